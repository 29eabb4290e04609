import os
import tempfile
import contextlib

from typing import IO, Any, Iterator

__all__ = ["atomic_open"]

@contextlib.contextmanager
def atomic_open(path: str, binary: bool=False) -> Iterator[IO[Any]]:
    """
    Opens a temporary file next to `path` and moves it into place on success.

    Readers never observe a partially written file; on error the temporary
    file is removed and `path` is left untouched.

    :param path: The destination path.
    :param binary: Whether to open in binary mode.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(
        dir=directory,
        prefix=f".{os.path.basename(path)}.",
        suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8"})) as handle:
            yield handle
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
