"""
Explanation Lab - Similarity Metrics
SSIM, Pearson correlation and MSE between explanation maps or images.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from skimage.metrics import structural_similarity

from artifacts import grid_shape
from errors import DegenerateMapError, DimensionError, UndefinedCorrelationError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 7
DEFAULT_K1 = 0.01
DEFAULT_K2 = 0.03


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def pcc(a, b) -> float:
    """Pearson correlation over the flattened values"""
    a, b = _pair(a, b)
    da = a.reshape(-1) - a.mean()
    db = b.reshape(-1) - b.mean()
    var_a, var_b = float(np.dot(da, da)), float(np.dot(db, db))
    if var_a == 0.0 or var_b == 0.0:
        raise UndefinedCorrelationError(f"zero-variance input (var_a={var_a:.3e}, var_b={var_b:.3e})")
    r = float(np.dot(da, db)) / np.sqrt(var_a * var_b)
    return float(np.clip(r, -1.0, 1.0))


def ssim(a, b, window: int = DEFAULT_WINDOW, data_range: float = 1.0, grid: Optional[Sequence[int]] = None,
         k1: float = DEFAULT_K1, k2: float = DEFAULT_K2) -> float:
    """Mean SSIM over all valid uniform windows of the 2-D grid"""
    a, b = _pair(a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"SSIM window must be odd and positive, got {window}")
    rows, cols = grid_shape(a.size, grid if grid is not None else (a.shape if a.ndim == 2 else None))
    if window > min(rows, cols):
        raise DimensionError(f"SSIM window {window} larger than {rows}x{cols} grid")
    return float(structural_similarity(
        a.reshape(rows, cols), b.reshape(rows, cols),
        win_size=window, data_range=data_range,
        gaussian_weights=False, use_sample_covariance=False, K1=k1, K2=k2,
    ))


def sum_normalize(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DegenerateMapError("map has negative entries; apply pixel_relevance before normalizing")
    total = float(values.sum())
    if not total > 0:
        raise DegenerateMapError(f"map sums to {total}; cannot normalize")
    return values / total


@dataclass
class SimilarityReport:
    ssim: Optional[float]
    pcc: float
    mse: float
    kind: str
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def pcc_negative(self) -> bool:
        return self.pcc < 0

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["pcc_negative"] = self.pcc_negative
        return payload


def report(a, b, kind: str = "map", window: int = DEFAULT_WINDOW, grid: Optional[Sequence[int]] = None,
           k1: float = DEFAULT_K1, k2: float = DEFAULT_K2) -> SimilarityReport:
    """Normalize per ``kind`` then compute the SSIM / PCC / MSE triple.

    Maps are sum-normalized and use the pair's max-min as SSIM data range;
    images must lie in [0, 1] and use data range 1.
    """
    a, b = _pair(a, b)
    if kind == "map":
        a, b = sum_normalize(a), sum_normalize(b)
        spread = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        data_range = spread if spread > 0 else 1.0
    elif kind == "image":
        if a.min() < 0 or b.min() < 0 or a.max() > 1 or b.max() > 1:
            raise ValueError("image similarity expects entries in [0, 1]")
        data_range = 1.0
    else:
        raise ValueError(f"unknown report kind {kind!r}")

    rows, cols = grid_shape(a.size, grid)
    effective = min(window, min(rows, cols))
    if effective % 2 == 0:
        effective -= 1
    if effective < 3:
        logger.warning(f"{rows}x{cols} grid too small for SSIM windows; ssim left empty")
        ssim_value = None
    else:
        ssim_value = ssim(a, b, window=effective, data_range=data_range, grid=(rows, cols), k1=k1, k2=k2)

    # pcc of an identical pair is 1 even when both are constant
    if np.array_equal(a, b):
        pcc_value = 1.0
    else:
        pcc_value = pcc(a, b)

    return SimilarityReport(
        ssim=ssim_value,
        pcc=pcc_value,
        mse=mse(a, b),
        kind=kind,
        config={"window": effective, "k1": k1, "k2": k2, "data_range": data_range,
                "grid": [rows, cols], "window_type": "uniform"},
    )
