"""
Explanation Lab - Artifact Writer
Atomic emission of JSON results, CSV tables and 8-bit PGM (P5) rasters.
Every file is written under a temporary name in the target directory and
renamed into place, so readers never observe a partial artifact.
"""

import io
import json
import logging
import os
import tempfile
import threading
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def prepare_output_dir(path: PathLike) -> Path:
    """Create ``path`` by renaming a fully created temp directory into place; existing directories are reused"""
    path = Path(path)
    if path.is_dir():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        os.rename(staging, path)
    except OSError:
        os.rmdir(staging)
        if not path.is_dir():
            raise
    return path


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    return str(value)


def to_json(payload: Any) -> str:
    """Deterministic JSON text: sorted keys, fixed indentation"""
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def min_max_scale(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 255] uint8 for display; constant input maps to 0"""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(np.min(values)), float(np.max(values))
    if high - low <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * (values - low) / (high - low)).astype(np.uint8)


def pgm_bytes(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {raster.shape}")
    buffer = io.BytesIO()
    # mode L saved through the PPM plugin is a binary P5 graymap
    Image.fromarray(raster.astype(np.uint8)).save(buffer, format="PPM")
    return buffer.getvalue()


def grid_shape(size: int, image_shape: Optional[Sequence[int]] = None) -> Tuple[int, int]:
    """2-D layout for a flat vector: the given image shape, else the most square factorisation"""
    if image_shape is not None and len(image_shape) == 2 and int(np.prod(image_shape)) == size:
        return int(image_shape[0]), int(image_shape[1])
    rows = int(np.floor(np.sqrt(size)))
    while rows > 1 and size % rows:
        rows -= 1
    return max(rows, 1), size // max(rows, 1)


class ArtifactWriter:
    """Single writer for one output directory; safe to share between worker threads"""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.written = []

    def _emit(self, name: str, payload: bytes) -> Path:
        with self._lock:
            path = atomic_write_bytes(self.out_dir / name, payload)
            self.written.append(name)
        logger.debug(f"wrote {path}")
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        return self._emit(name, to_json(payload).encode("utf-8"))

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        return self._emit(name, frame.to_csv(index=False, float_format="%.17g").encode("utf-8"))

    def write_pgm(self, name: str, raster: np.ndarray) -> Path:
        return self._emit(name, pgm_bytes(raster))

    def write_map_csv(self, name: str, values: np.ndarray) -> Path:
        """Raw map values as a single CSV row"""
        row = np.asarray(values, dtype=np.float64).reshape(1, -1)
        return self.write_csv(name, pd.DataFrame(row))

    def write_heatmap(self, name: str, values: np.ndarray, image_shape: Optional[Sequence[int]] = None,
                      normalize_first: bool = False) -> Path:
        """Min-max scaled 8-bit heatmap; ``normalize_first`` sum-normalizes |values| before scaling"""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if normalize_first:
            magnitude = np.abs(values)
            total = magnitude.sum()
            values = magnitude / total if total > 0 else magnitude
        rows, cols = grid_shape(values.size, image_shape)
        return self.write_pgm(name, min_max_scale(values.reshape(rows, cols)))
