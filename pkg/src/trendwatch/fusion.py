"""Combine per-stream one-sided p-values within a region (Stouffer's method)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .localreg import FitSeries

P_CLIP = 1e-15


@dataclass
class FusedSeries:
    region_id: str
    combined_z: dict[int, float] = field(default_factory=dict)
    combined_p: dict[int, float] = field(default_factory=dict)
    contributing: dict[int, list[str]] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def dates(self) -> list[int]:
        return sorted(self.combined_z)


def stouffer_combine(
    pvalues: Sequence[float], weights: Sequence[float] | None = None
) -> tuple[float, float]:
    """Weighted Stouffer combination: Z = sum(w_i Z_i) / sqrt(sum(w_i^2)).

    Z_i = Phi^{-1}(1 - p_i); p-values at the boundary are clipped to keep the
    quantile finite. Returns (Z, 1 - Phi(Z)).
    """
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values to combine")
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != p.shape:
        raise ValueError("weights and p-values must have the same length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    p = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    z_i = norm.isf(p)
    z = float((w * z_i).sum() / np.sqrt((w * w).sum()))
    return z, float(norm.sf(z))


def fuse_region(
    fit_series: Sequence[FitSeries], weights: dict[str, float] | None = None
) -> FusedSeries:
    """Per-date Stouffer fusion across a region's streams.

    Only converged fits contribute; dates where no stream has a converged fit
    are left missing. Weights default to 1 per stream.
    """
    regions = {fs.region_id for fs in fit_series}
    if len(regions) != 1:
        raise ValueError(f"fit series span multiple regions: {sorted(regions)}")
    region = regions.pop()
    weights = weights or {}
    fused = FusedSeries(region_id=region, weights=dict(weights))
    all_dates = sorted({d for fs in fit_series for d in fs.fits})
    for d in all_dates:
        ps, ws, streams = [], [], []
        for fs in fit_series:
            fit = fs.fits.get(d)
            if fit is None or not fit.converged:
                continue
            ps.append(fit.p_one_sided)
            ws.append(weights.get(fs.stream_id, 1.0))
            streams.append(fs.stream_id)
        if not ps:
            continue
        z, p = stouffer_combine(ps, ws)
        fused.combined_z[d] = z
        fused.combined_p[d] = p
        fused.contributing[d] = streams
    return fused


def write_fused_csv(fused_list: Sequence[FusedSeries], path) -> None:
    """Export schema: region_id,date,z,p,n_streams."""
    import csv

    from .panel import format_date

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "date", "z", "p", "n_streams"])
        for fused in fused_list:
            for d in fused.dates:
                writer.writerow(
                    [fused.region_id, format_date(d), repr(fused.combined_z[d]),
                     repr(fused.combined_p[d]), len(fused.contributing[d])]
                )
