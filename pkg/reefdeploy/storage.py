import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Tuple, Union

from reefdeploy.exceptions import StorageError

logger = logging.getLogger(__name__)


class JsonlDecodeError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


PathLike = Union[str, Path]


@contextmanager
def atomic_writer(path: PathLike, mode: str = "w") -> Iterator[Any]:
    """Write to a temporary sibling and rename it over ``path`` on success."""
    target = Path(path)
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    except OSError as e:
        raise StorageError(f"cannot write to {target}: {e}") from e
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8", newline=None if "b" in mode else "\n") as f:
            yield f
        try:
            os.replace(tmp_name, target)
        except OSError as e:
            raise StorageError(f"cannot write to {target}: {e}") from e
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    with atomic_writer(path) as f:
        f.write(text)


def write_jsonl(path: PathLike, rows: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with atomic_writer(path) as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
            count += 1
    logger.debug(f"Wrote {count} lines to {path}")
    return count


def read_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_number, object)``; blank lines are skipped, bad UTF-8 or JSON raises ValueError."""
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise JsonlDecodeError(line_no, f"invalid UTF-8 at byte {e.start}") from e
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as e:
                raise JsonlDecodeError(line_no, f"invalid JSON ({e.msg})") from e


def write_frame_csv(path: PathLike, frame: Any) -> None:
    """Atomically write a pandas DataFrame as CSV."""
    with atomic_writer(path) as f:
        frame.to_csv(f, index=False)
