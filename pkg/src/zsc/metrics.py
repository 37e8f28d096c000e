"""Counting metrics: MAE, RMSE, NAE, SRE."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CSV_FIELDS = ("mae", "rmse", "nae", "sre", "n")


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    nae: float
    sre: float
    n: int
    relative_defined: bool = True
    per_image: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self, include_per_image: bool = False) -> str:
        d = asdict(self)
        if not include_per_image:
            d.pop("per_image")
        # NaN is not valid JSON
        for k in ("nae", "sre"):
            if not math.isfinite(d[k]):
                d[k] = None
        return json.dumps(d, sort_keys=True)

    def csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, k))) if k != "n" else str(self.n)
                        for k in CSV_FIELDS)


def evaluate(gts, preds) -> MetricsReport:
    """Score predicted counts against ground truth.

    NAE and SRE divide by the ground-truth count; if any count is <= 0 they are
    reported as NaN with ``relative_defined=False`` instead of being padded.
    """
    y = np.asarray(gts, dtype=np.float64).ravel()
    yhat = np.asarray(preds, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} ground truths vs {yhat.size} predictions")
    if y.size == 0:
        raise ValueError("need at least one image")
    err = y - yhat
    mae = float(np.mean(np.abs(err)))
    # quadratic mean >= arithmetic mean; the max only absorbs last-ulp rounding
    rmse = max(float(np.sqrt(np.mean(err**2))), mae)
    defined = bool(np.all(y > 0))
    if defined:
        nae = float(np.mean(np.abs(err) / y))
        sre = float(np.sqrt(np.mean(err**2 / y)))
    else:
        nae = sre = float("nan")
    return MetricsReport(mae=mae, rmse=rmse, nae=nae, sre=sre, n=int(y.size),
                         relative_defined=defined,
                         per_image=[(float(a), float(b)) for a, b in zip(y, yhat)])
