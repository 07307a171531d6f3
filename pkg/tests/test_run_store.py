import pytest

from core.errors import RunLockedError
from core.run_store import RunStore, append_csv_rows, atomic_write_text, read_csv_rows


def test_layout(tmp_path):
    store = RunStore(root=tmp_path, name="exp")
    assert store.path == tmp_path / "exp"
    assert store.path.is_dir()
    assert store.config_path.name == "config.resolved"
    assert store.checkpoint_path.name == "checkpoint.dnrv"
    assert store.metrics_path.name == "metrics.csv"
    assert store.artifact("bundle.dnvb") == store.path / "bundle.dnvb"


def test_lock_is_exclusive(tmp_path):
    store = RunStore(path=tmp_path / "run")
    with store.lock():
        with pytest.raises(RunLockedError):
            with RunStore(path=tmp_path / "run").lock():
                pass
    with store.lock():
        pass


def test_lock_released_on_error(tmp_path):
    store = RunStore(path=tmp_path / "run")
    with pytest.raises(ValueError):
        with store.lock():
            raise ValueError("boom")
    assert not (store.path / RunStore.LOCK_NAME).exists()


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = atomic_write_text(tmp_path / "out" / "a.txt", "hello")
    atomic_write_text(path, "world")
    assert path.read_text() == "world"
    assert [p.name for p in path.parent.iterdir()] == ["a.txt"]


def test_csv_append_keeps_single_header(tmp_path):
    path = tmp_path / "rows.csv"
    append_csv_rows(path, ("a", "b"), [[1, 2]])
    append_csv_rows(path, ("a", "b"), [[3, 4]])
    assert path.read_text() == "a,b\n1,2\n3,4\n"
    assert read_csv_rows(path) == [["1", "2"], ["3", "4"]]


def test_read_missing_csv(tmp_path):
    assert read_csv_rows(tmp_path / "none.csv") == []


def test_write_helpers(tmp_path):
    store = RunStore(path=tmp_path / "run")
    assert store.write_bytes("x.bin", b"\x00\x01").read_bytes() == b"\x00\x01"
    assert store.write_text("x.txt", "hi").read_text() == "hi"
