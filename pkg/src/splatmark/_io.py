"""Small file helpers: atomic writes, PNG I/O and fixed-precision JSON."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any

import cv2
import numpy as np

from .errors import ValidationError


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValidationError(f"cannot serialize non-finite number {x!r}")
        return "%.17g" % x
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist(), indent, level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_fmt(str(k), indent, level + 1)}: {_fmt(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # flat numeric rows stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_fmt(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _fmt(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_precise(obj: Any, indent: int = 1) -> str:
    """JSON text with every float written using 17 significant digits."""
    return _fmt(obj, indent, 0) + "\n"


def write_png(path: str | os.PathLike, image: np.ndarray, bits: int = 16) -> None:
    """Write an H x W x 3 image in [0, 1] as an 8- or 16-bit PNG."""
    if bits not in (8, 16):
        raise ValidationError("PNG bit depth must be 8 or 16")
    top = 255 if bits == 8 else 65535
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(arr * top).astype(np.uint8 if bits == 8 else np.uint16)
    ok, buf = cv2.imencode(".png", q[..., ::-1])
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write_bytes(path, buf.tobytes())


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read an 8- or 16-bit RGB(A)/gray PNG into an H x W x 3 float64 array in [0, 1]."""
    data = np.fromfile(str(path), dtype=np.uint8)
    raw = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot decode PNG {path}")
    if raw.dtype == np.uint8:
        top = 255.0
    elif raw.dtype == np.uint16:
        top = 65535.0
    else:
        raise ValidationError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[..., :3][..., ::-1]
    else:
        raw = raw[..., ::-1]
    return np.ascontiguousarray(raw, dtype=np.float64) / top
