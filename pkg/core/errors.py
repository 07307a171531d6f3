"""
异常定义 - 所有模块共用的结构化错误类型
"""

from typing import Optional, Sequence


class DNeRVError(Exception):
    """所有错误的基类"""


class ShapeError(DNeRVError, ValueError):
    """张量形状不匹配"""

    def __init__(self, op: str, message: str, shapes: Sequence[tuple] = ()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = ", ".join(str(s) for s in self.shapes)
        text = f"{op}: {message}"
        if detail:
            text += f" (shapes: {detail})"
        super().__init__(text)


class TapeError(DNeRVError, RuntimeError):
    """反向传播使用错误"""


class InputRangeError(DNeRVError, ValueError):
    """输入数值超出允许范围"""


class StageError(DNeRVError):
    """解码器某一阶段失败，附带阶段编号"""

    def __init__(self, stage: int, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


class ConfigError(DNeRVError, ValueError):
    """配置字段校验失败"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DatasetError(DNeRVError):
    """数据集读取或切片失败"""


class TrainingDivergedError(DNeRVError):
    """训练出现 NaN"""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message)


class EntropyDecodeError(DNeRVError):
    """熵编码码流损坏或被截断"""


class BundleFormatError(DNeRVError):
    """压缩包格式错误"""

    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"[{section}] {message}")


class CodecError(DNeRVError):
    """关键帧编解码失败"""


class MetricsError(DNeRVError):
    """评估输入不完整或不一致"""


class SelectionError(DNeRVError):
    """解码选择参数越界"""


class RunLockedError(DNeRVError):
    """运行目录已被其他命令占用"""
