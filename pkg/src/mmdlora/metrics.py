"""Monocular depth error metrics with max-depth masking.

Conventions (the usual ones in the depth-estimation literature): pixels
count when 0 < gt <= cap, and the delta threshold is strict, so a pixel at
exactly 1.25x scores zero. An empty mask is an error rather than a silent
NaN row in a results table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError, EmptyMaskError


@dataclass
class MetricReport:
    absrel: float
    sqrel: float
    rmse: float
    d1: float               # fraction in [0, 1]
    pixel_count: int

    @property
    def d1_pct(self) -> float:
        return 100.0 * self.d1

    def as_dict(self):
        return {
            "absrel": self.absrel,
            "sqrel": self.sqrel,
            "rmse": self.rmse,
            "d1": self.d1,
            "d1_pct": self.d1_pct,
            "pixel_count": self.pixel_count,
        }


def depth_metrics(pred: np.ndarray, gt: np.ndarray, cap: float) -> MetricReport:
    """absREL, sqREL, RMSE and d1 over pixels with 0 < gt <= cap."""
    if pred.shape != gt.shape:
        raise DimensionError(
            f"pred shape {pred.shape} does not match gt shape {gt.shape}"
        )
    if np.any(pred <= 0):
        raise ContractError("depth_metrics requires strictly positive predictions")
    acc = K.metrics_accum(
        np.ascontiguousarray(pred, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(gt, dtype=np.float64).reshape(-1),
        float(cap),
    )
    count = int(acc[0])
    if count == 0:
        raise EmptyMaskError(f"no pixel has 0 < gt <= cap={cap}")
    return MetricReport(
        absrel=acc[1] / count,
        sqrel=acc[2] / count,
        rmse=float(np.sqrt(acc[3] / count)),
        d1=acc[4] / count,
        pixel_count=count,
    )


def mean_report(reports) -> MetricReport:
    """Average per-image reports into one row; pixel counts add up."""
    reports = list(reports)
    if not reports:
        raise ContractError("mean_report needs at least one report")
    n = len(reports)
    return MetricReport(
        absrel=sum(r.absrel for r in reports) / n,
        sqrel=sum(r.sqrel for r in reports) / n,
        rmse=sum(r.rmse for r in reports) / n,
        d1=sum(r.d1 for r in reports) / n,
        pixel_count=sum(r.pixel_count for r in reports),
    )


def aggregate(reports_by_domain) -> dict:
    """Table document: ordered per-domain rows with d1 both ways.

    Accepts an ordered sequence of (domain, MetricReport); duplicate domain
    labels are a caller error.
    """
    rows = {}
    for domain, report in reports_by_domain:
        if domain in rows:
            raise ContractError(f"duplicate domain label {domain!r} in report")
        rows[domain] = report.as_dict()
    if not rows:
        raise ContractError("aggregate needs at least one domain report")
    return {"domains": rows}


def format_table(doc: dict) -> str:
    """Human-readable rendering of an aggregate() document."""
    header = f"{'domain':<12} {'absREL':>9} {'sqREL':>9} {'RMSE':>9} {'d1':>8} {'d1%':>8} {'pixels':>9}"
    lines = [header, "-" * len(header)]
    for domain, row in doc["domains"].items():
        lines.append(
            f"{domain:<12} {row['absrel']:>9.4f} {row['sqrel']:>9.4f} "
            f"{row['rmse']:>9.4f} {row['d1']:>8.4f} {row['d1_pct']:>8.2f} "
            f"{row['pixel_count']:>9d}"
        )
    return "\n".join(lines)
