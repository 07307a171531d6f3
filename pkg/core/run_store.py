"""
运行目录管理 - runs/<name>/ 下的产物、锁文件与原子写入
"""

import csv
import io
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence, Union

from .errors import RunLockedError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """先写同目录临时文件再 rename，产物要么完整出现要么不出现"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def read_csv_rows(path: PathLike) -> List[List[str]]:
    """读取已有 CSV 的数据行（不含表头）"""
    path = Path(path)
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    return rows[1:]


def append_csv_rows(path: PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """追加行并整体原子重写"""
    existing = read_csv_rows(path)
    return atomic_write_text(path, format_csv(header, existing + [list(r) for r in rows]))


class RunStore:
    """单次实验的运行目录"""

    CONFIG_NAME = "config.resolved"
    CHECKPOINT_NAME = "checkpoint.dnrv"
    METRICS_NAME = "metrics.csv"
    REPORT_NAME = "report.csv"
    LOCK_NAME = "run.lock"

    def __init__(self, root: PathLike = "runs", name: Optional[str] = None, path: Optional[PathLike] = None):
        self.path = Path(path) if path is not None else Path(root) / (name or "default")
        self.path.mkdir(parents=True, exist_ok=True)

    @property
    def config_path(self) -> Path:
        return self.path / self.CONFIG_NAME

    @property
    def checkpoint_path(self) -> Path:
        return self.path / self.CHECKPOINT_NAME

    @property
    def metrics_path(self) -> Path:
        return self.path / self.METRICS_NAME

    @property
    def report_path(self) -> Path:
        return self.path / self.REPORT_NAME

    def artifact(self, name: str) -> Path:
        return self.path / name

    @contextmanager
    def lock(self):
        """独占运行目录，避免并发命令写同一个目录"""
        lock_path = self.path / self.LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockedError(f"运行目录已被占用: {self.path} (删除 {lock_path} 以解除)") from exc
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            logger.debug("已锁定运行目录 %s", self.path)
            yield self
        finally:
            lock_path.unlink(missing_ok=True)

    def write_bytes(self, name: str, data: bytes) -> Path:
        return atomic_write_bytes(self.path / name, data)

    def write_text(self, name: str, text: str) -> Path:
        return atomic_write_text(self.path / name, text)
