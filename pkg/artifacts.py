"""
Atomic file writes and the versioned .npz container used for the encoded
corpus cache and model checkpoints.
"""

import io
import os
import tempfile
import hashlib
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes):
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_container(path, magic: str, version: int, arrays: dict):
    """
    Save named arrays plus a magic string, a format version and the total
    element count, so truncated or foreign files are rejected on load.
    """
    count = sum(int(np.asarray(a).size) for a in arrays.values())
    payload = dict(arrays)
    payload["__magic__"] = np.array(magic)
    payload["__version__"] = np.array(version, dtype=np.int64)
    payload["__count__"] = np.array(count, dtype=np.int64)

    buf = io.BytesIO()
    np.savez(buf, **payload)
    atomic_write_bytes(path, buf.getvalue())


def read_container(path, magic: str, version: int, error_cls) -> dict:
    path = Path(path)
    if not path.exists():
        raise error_cls(f"{path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except Exception as e:
        raise error_cls(f"{path} is not a readable container: {e}") from e

    if "__magic__" not in arrays or str(arrays["__magic__"]) != magic:
        raise error_cls(f"{path} is not a {magic} file")
    if int(arrays["__version__"]) != version:
        raise error_cls(f"{path} has format version {int(arrays['__version__'])}, expected {version}")

    count = int(arrays.pop("__count__"))
    arrays.pop("__magic__")
    arrays.pop("__version__")
    if sum(int(a.size) for a in arrays.values()) != count:
        raise error_cls(f"{path} is truncated or corrupt (element count mismatch)")
    return arrays
