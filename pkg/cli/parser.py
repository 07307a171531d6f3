"""
命令行参数定义
"""

import argparse

from . import commands


def _common_options() -> argparse.ArgumentParser:
    """各子命令共享的配置覆盖参数"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML 配置文件")
    common.add_argument("--seed", type=int, help="覆盖 train.seed")
    common.add_argument("--epochs", type=int, help="覆盖 train.epochs")
    common.add_argument("--clip-len", dest="clip_len", type=int, help="覆盖 model.clip_len")
    common.add_argument("--kf-codec", dest="kf_codec", choices=["raw", "dct8"], help="覆盖 compress.kf_codec")
    common.add_argument("--quality", type=int, help="覆盖 compress.quality (dct8)")
    common.add_argument("--bits", type=int, help="覆盖 compress.bits")
    common.add_argument("--variant", choices=["dnerv", "nerv"], help="覆盖 model.variant")
    common.add_argument("--data", help="数据集目录 (每个视频一个子目录)")
    common.add_argument("--out", help="输出目录或文件")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="任意配置覆盖，例如 --set train.lr_peak=1e-3",
    )
    common.add_argument("--debug", action="store_true", help="输出调试日志")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnerv", description="D-NeRV 视频隐式神经表示压缩")
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    synth = subparsers.add_parser("synth", parents=[common], help="生成合成视频数据集")
    synth.set_defaults(handler=commands.cmd_synth)

    train = subparsers.add_parser("train", parents=[common], help="训练模型")
    train.set_defaults(handler=commands.cmd_train)

    compress = subparsers.add_parser("compress", parents=[common], help="量化 + 熵编码 + 关键帧打包")
    compress.add_argument("--checkpoint", help="检查点路径 (默认取运行目录)")
    compress.set_defaults(handler=commands.cmd_compress)

    decode = subparsers.add_parser("decode", parents=[common], help="从码流解码视频帧")
    decode.add_argument("bundle", help="DNVB1 码流文件")
    decode.add_argument("--select", help="只解码 video=ID[,clip=J]")
    decode.set_defaults(handler=commands.cmd_decode)

    evaluate = subparsers.add_parser("eval", parents=[common], help="评估解码结果并追加 RD 点")
    evaluate.add_argument("--decoded", required=True, help="解码帧目录")
    evaluate.add_argument("--gt", required=True, help="真值数据集目录")
    evaluate.add_argument("--bundle", required=True, help="用于计算 bpp 的码流文件")
    evaluate.add_argument("--label", default="", help="RD 点标签")
    evaluate.add_argument("--report", help="RD 报告 CSV (默认运行目录下 report.csv)")
    evaluate.set_defaults(handler=commands.cmd_eval)

    inpaint = subparsers.add_parser("inpaint", parents=[common], help="带掩码训练并报告掩码区域 PSNR")
    inpaint.set_defaults(handler=commands.cmd_inpaint)

    sweep = subparsers.add_parser("rd-sweep", parents=[common], help="码率-失真扫描")
    sweep.set_defaults(handler=commands.cmd_rd_sweep)

    return parser
