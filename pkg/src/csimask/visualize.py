"""Data-file emitters for inspection: error heatmaps, mask overlays and
correlation matrices. Outputs are CSV and portable graymap (PGM); plot
rendering is left to external tooling.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core.errors import ConfigError
from .masking import MaskPartition

VIZ_KINDS = ("error-heatmap", "mask-overlay", "corr-matrix")


def _write_csv(matrix: np.ndarray, path: Path):
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    path.write_text("\n".join(lines) + "\n")


def _write_pgm(matrix: np.ndarray, path: Path, lo: float | None = None, hi: float | None = None):
    """8-bit ASCII PGM with values scaled from [lo, hi] to [0, 255]."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = float(m.min()) if lo is None else lo
    hi = float(m.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.round((m - lo) / span * 255.0), 0, 255).astype(int)
    rows = [" ".join(str(v) for v in row) for row in gray]
    path.write_text(f"P2\n{m.shape[1]} {m.shape[0]}\n255\n" + "\n".join(rows) + "\n")


def emit_error_heatmap(error_map: np.ndarray, path) -> list[Path]:
    """(S, T) error map as CSV plus a grayscale PGM image."""
    base = Path(path)
    csv_path = base.with_suffix(".csv")
    pgm_path = base.with_suffix(".pgm")
    _write_csv(error_map, csv_path)
    _write_pgm(error_map, pgm_path)
    return [csv_path, pgm_path]


def emit_mask_overlay(partition: MaskPartition, path) -> list[Path]:
    """(S, T) 0/1 text grid with the visible fraction annotated."""
    base = Path(path).with_suffix(".txt")
    visible_fraction = float(partition.pixel_mask.mean())
    body = partition.to_text_grid()
    base.write_text(f"# visible_fraction = {visible_fraction:.6f}\n{body}\n")
    return [base]


def emit_corr_matrix(corr: np.ndarray, path, crop: int | None = None) -> list[Path]:
    """(W, W) correlation matrix as CSV; optional top-left crop as PGM."""
    base = Path(path)
    out = [base.with_suffix(".csv")]
    _write_csv(corr, out[0])
    if crop:
        k = min(crop, corr.shape[0])
        pgm = base.with_suffix(".pgm")
        _write_pgm(np.asarray(corr)[:k, :k], pgm, lo=-1.0, hi=1.0)
        out.append(pgm)
    return out


def emit_visualization(kind: str, data, path, **kw) -> list[Path]:
    """Dispatch on ``kind``; raises ConfigError for unknown kinds."""
    if kind == "error-heatmap":
        return emit_error_heatmap(data, path)
    if kind == "mask-overlay":
        return emit_mask_overlay(data, path)
    if kind == "corr-matrix":
        return emit_corr_matrix(data, path, **kw)
    raise ConfigError(f"unknown visualization kind {kind!r}; choose from {VIZ_KINDS}")
