"""Forecast metrics, ablation variants, baselines and diagnostic exports."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .deformable import describe_patches, write_run_table
from .fusion import VARIANTS, DTSFormer, ModelConfig
from .numerics import amplitude, dft_real

MAPE_EPS = 1e-6
HORIZON_ANCHORS = (2, 6, 12, 18, 24)  # 1h, 3h, 6h, 9h, 12h at 30-minute steps


class UndefinedImprovementError(ZeroDivisionError):
    pass


@dataclass
class MetricReport:
    mse: float
    mae: float
    mape_percent: float  # NaN when no target clears the MAPE guard
    horizon_steps: int
    sample_count: int
    excluded_mape: int = 0

    @property
    def mape_defined(self) -> bool:
        return not math.isnan(self.mape_percent)


def metrics(pred, truth, horizon_steps: int = 1) -> MetricReport:
    """MSE, MAE and MAPE over paired values; MAPE skips targets with ``|y| <= 1e-6``."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {y.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one observation")
    err = p - y
    ok = np.abs(y) > MAPE_EPS
    mape = 100.0 * float(np.mean(np.abs(err[ok] / y[ok]))) if ok.any() else math.nan
    sample_count = p.shape[0] if p.ndim > 1 else p.size
    return MetricReport(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        mape_percent=mape,
        horizon_steps=horizon_steps,
        sample_count=int(sample_count),
        excluded_mape=int(p.size - ok.sum()),
    )


def horizon_reports(pred, truth, anchors: Sequence[int] = HORIZON_ANCHORS) -> list[MetricReport]:
    """Metrics over steps ``1..h`` for each anchor ``h`` up to the horizon, plus the full horizon."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    y = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    n = p.shape[1]
    steps = sorted({h for h in anchors if h <= n} | {n})
    return [metrics(p[:, :h], y[:, :h], horizon_steps=h) for h in steps]


def improvement(err_baseline: float, err_ours: float) -> float:
    """Percent reduction of ``err_ours`` relative to ``err_baseline``."""
    if err_baseline == 0:
        raise UndefinedImprovementError("improvement is undefined for a zero baseline error")
    return (err_baseline - err_ours) / err_baseline * 100.0


METRIC_HEADER = ["variant", "horizon_steps", "mse", "mae", "mape_percent", "sample_count", "excluded_mape"]


def write_metric_csv(rows: Iterable[tuple[str, MetricReport]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for name, r in rows:
            w.writerow([name, r.horizon_steps, f"{r.mse:.6f}", f"{r.mae:.6f}",
                        f"{r.mape_percent:.6f}", r.sample_count, r.excluded_mape])


def read_metric_csv(path) -> list[tuple[str, MetricReport]]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((row["variant"], MetricReport(
                float(row["mse"]), float(row["mae"]), float(row["mape_percent"]),
                int(row["horizon_steps"]), int(row["sample_count"]), int(row["excluded_mape"]),
            )))
    return out


@dataclass(frozen=True)
class VariantSpec:
    kind: str = "FULL"
    fixed_patch_length: int = 6

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; choose from {VARIANTS}")


def build_variant(spec: VariantSpec, base_config: ModelConfig) -> DTSFormer:
    """FULL model or one of the FP / LM / LT ablations on the same base configuration."""
    cfg = dataclasses.replace(base_config, variant=spec.kind, fixed_patch_length=spec.fixed_patch_length)
    return DTSFormer(cfg)


def seasonal_naive(history, n: int, period: int = 48) -> np.ndarray:
    """Copy the value one period back: ``y[t+i] = x[t+i-period]``.

    ``history`` is ``(m,)`` or ``(batch, m)`` ending at the forecast origin.
    """
    h = np.asarray(history, dtype=np.float64)
    m = h.shape[-1]
    if m < period:
        raise ValueError(f"history of length {m} is shorter than the period {period}")
    if n < 1:
        raise ValueError("horizon must be positive")
    idx = m - period + (np.arange(n) % period)
    return h[..., idx]


def dominant_period(series) -> int:
    """Period (in steps) of the largest non-DC amplitude of the mean-removed series."""
    x = np.asarray(series, dtype=np.float64)
    L = len(x)
    amp = amplitude(dft_real(x - x.mean())).numpy()
    k = int(np.argmax(amp[1:])) + 1
    return int(round(L / k))


def export_patch_coverage(model: DTSFormer, out_path) -> list[tuple[int, list[int], int, list[int]]]:
    """Write the per-scale run table and return ``(scale, lengths, count, offsets)`` rows."""
    masks = model.masks()
    ids = [s.scale_index for s in model.scales]
    write_run_table(masks, out_path, ids)
    return [(sid, *describe_patches(mask)) for sid, mask in zip(ids, masks)]
