"""Key-score heatmap export as binary PGM or full-precision CSV."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError
from .psa import PsaConfig, PsaParams, psa_forward


def score_map_from_run(x_map: np.ndarray, u_map: np.ndarray, params: PsaParams,
                       cfg: PsaConfig) -> np.ndarray:
    """Per-cell mean attention received by the coarse grid, shaped [Hc, Wc]."""
    diagnostics: dict = {}
    psa_forward(x_map, u_map, params, cfg, diagnostics=diagnostics)
    _, hc, wc = u_map.shape
    return diagnostics["key_scores"].reshape(hc, wc)


def quantize_minmax(score_map: np.ndarray) -> np.ndarray:
    """Min-max rescale to uint8. A constant map (no contrast) maps to zeros."""
    if score_map.ndim != 2:
        raise DimensionError(f"expected a 2-D score map, got shape {score_map.shape}")
    lo = float(score_map.min())
    hi = float(score_map.max())
    if hi == lo:
        return np.zeros(score_map.shape, dtype=np.uint8)
    scaled = (score_map.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path, score_map: np.ndarray) -> None:
    """Binary 8-bit PGM (magic P5), one byte per cell, row-major."""
    gray = quantize_minmax(score_map)
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def write_csv(path, score_map: np.ndarray) -> None:
    """Comma-separated rows with full float precision (%.17g)."""
    if score_map.ndim != 2:
        raise DimensionError(f"expected a 2-D score map, got shape {score_map.shape}")
    lines = [",".join("%.17g" % v for v in row) for row in np.asarray(score_map)]
    Path(path).write_text("\n".join(lines) + "\n")


def export_heatmap(path, score_map: np.ndarray, fmt: str = "pgm") -> None:
    if fmt == "pgm":
        write_pgm(path, score_map)
    elif fmt == "csv":
        write_csv(path, score_map)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}, expected pgm or csv")
