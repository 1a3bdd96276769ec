"""CSV and PGM writers. Every file lands atomically (temp file + rename)."""

import csv
import io
import math
import os
import tempfile
from typing import Any, Iterable, Sequence

import numpy as np

from .config import ensure_dirs
from .logging_config import logger


def atomic_write_bytes(path: str, payload: bytes) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    ensure_dirs(directory)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    count = 0
    for row in rows:
        writer.writerow([_cell(v) for v in row])
        count += 1
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def write_pgm(path: str, image: np.ndarray) -> str:
    """Binary (P5) 8-bit graymap from an (H, W) or (H, W, 1) image in [0, 1]."""
    plane = np.asarray(image)
    if plane.ndim == 3 and plane.shape[-1] == 1:
        plane = plane[..., 0]
    if plane.ndim != 2:
        raise ValueError(f"write_pgm: expected a single grayscale image, got shape {np.asarray(image).shape}")
    pixels = np.rint(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    return atomic_write_bytes(path, header + pixels.tobytes())
