"""Hyper-parameter sweeps and rate-matched baselines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .entropy import build_huffman_tables, measure_rate
from .jpeg import CompressionKernels
from .losses import LossConfig
from .trainer import EvalResult, TrainConfig, Trainer

logger = logging.getLogger(__name__)

SWEEP_FIELDS = ["kind", "lam", "c", "lam1", "quality", "mean_KB", "accuracy", "PSNR", "SSIM", "status"]
SWEEP_PARAMS = ("lam", "c")


@dataclass
class SweepRow:
    kind: str  # "jcc" or "baseline"
    lam: float = math.nan
    c: float = math.nan
    lam1: float = math.nan
    quality: float = math.nan
    mean_KB: float = math.nan
    accuracy: float = math.nan
    PSNR: float = math.nan
    SSIM: float = math.nan
    status: str = "ok"
    result: EvalResult | None = None
    trainer: Trainer | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in SWEEP_FIELDS}


def _fill(row: SweepRow, result: EvalResult) -> SweepRow:
    row.result = result
    row.mean_KB = result.mean_kb
    row.accuracy = result.accuracy[1] if 1 in result.accuracy else next(iter(result.accuracy.values()))
    row.PSNR = result.psnr
    row.SSIM = result.ssim
    return row


def loss_for(param: str, value: float, base: LossConfig, coupled: bool) -> LossConfig:
    if param == "lam":
        if coupled:
            return LossConfig.coupled(value, base.lam1)
        return replace(base, lam=value)
    if param == "c":
        return replace(base, c=value)
    raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")


def run_sweep(
    base: TrainConfig,
    values,
    train: Dataset,
    val: Dataset,
    param: str = "lam",
    coupled: bool = True,
    keep_trainers: bool = False,
) -> list[SweepRow]:
    """One alternating run per value; failures are recorded and the sweep continues."""
    rows = []
    for v in values:
        loss = loss_for(param, float(v), base.loss, coupled)
        row = SweepRow("jcc", lam=loss.lam, c=loss.c, lam1=loss.lam1)
        try:
            cfg = replace(base, loss=loss)
            t = Trainer(cfg, train, val)
            t.run()
            _fill(row, t.evaluate())
            if keep_trainers:
                row.trainer = t
        except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
            logger.warning("sweep point %s=%g failed: %s", param, v, exc)
            row.status = f"failed: {exc}"
        logger.info("sweep %s=%g -> %.4f KB, acc %.4f", param, v, row.mean_KB, row.accuracy)
        rows.append(row)
    return rows


def quality_rates(train: Dataset, val: Dataset, qualities, sample_size: int = 50_000, seed: int = 0) -> dict:
    """Mean KB/image on ``val`` for standard tables at each quality (tables fitted on ``train``)."""
    out = {}
    for q in qualities:
        k = CompressionKernels.from_quality(q)
        codec = build_huffman_tables(train.images, k, sample_size, seed)
        out[float(q)] = measure_rate(val.images, k, codec).mean_kb
    return out


def match_quality(target_kb: float, rates: dict) -> float:
    """Quality whose measured rate is closest to ``target_kb`` (ties -> lower quality)."""
    if not rates:
        raise ValueError("no candidate qualities")
    return min(sorted(rates), key=lambda q: abs(rates[q] - target_kb))


def _quality_rate(q: float, train: Dataset, val: Dataset, sample_size: int, seed: int) -> float:
    k = CompressionKernels.from_quality(q)
    return measure_rate(val.images, k, build_huffman_tables(train.images, k, sample_size, seed)).mean_kb


def refine_quality(
    target_kb: float,
    train: Dataset,
    val: Dataset,
    rates: dict | None = None,
    tol: float = 0.1,
    steps: int = 14,
    sample_size: int = 50_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Lowest-rate quality whose measured rate lies in [target, target * (1 + tol)].

    Bisects the continuous quality scale between the bracketing qualities
    already in ``rates`` (extended in place).  Matching from above means a
    baseline never gets fewer bits than the run it is compared with.  If the
    window cannot be hit (rate is a step function of quality because tables
    are clamped to integers) the smallest rate >= target is returned.
    """
    rates = {} if rates is None else rates
    for q in (1.0, 100.0):
        if q not in rates:
            rates[q] = _quality_rate(q, train, val, sample_size, seed)
    if rates[100.0] < target_kb:
        return 100.0, rates[100.0]

    def bracket():
        lo = max((q for q in rates if rates[q] < target_kb), default=None)
        hi = min(q for q in rates if rates[q] >= target_kb)
        return lo, hi

    for _ in range(steps):
        lo, hi = bracket()
        if rates[hi] <= target_kb * (1 + tol) or lo is None or hi - lo < 0.01:
            break
        mid = round((lo + hi) / 2, 4)
        rates[mid] = _quality_rate(mid, train, val, sample_size, seed)
    _, hi = bracket()
    return hi, rates[hi]


def run_baseline(base: TrainConfig, quality: float, train: Dataset, val: Dataset) -> SweepRow:
    cfg = replace(base, mode="baseline", quality=float(quality))
    row = SweepRow("baseline", quality=float(quality))
    try:
        t = Trainer(cfg, train, val)
        t.run()
        _fill(row, t.evaluate())
    except Exception as exc:  # noqa: BLE001
        logger.warning("baseline at quality %g failed: %s", quality, exc)
        row.status = f"failed: {exc}"
    return row


def matched_baselines(
    base: TrainConfig, jcc_rows: list[SweepRow], train: Dataset, val: Dataset, qualities
) -> dict[float, SweepRow]:
    """Train one baseline per distinct quality matched to the JCC rates."""
    rates = quality_rates(train, val, qualities, base.huffman_sample, base.seed)
    wanted = set()
    for r in jcc_rows:
        if r.ok:
            q, _ = refine_quality(r.mean_KB, train, val, rates, sample_size=base.huffman_sample, seed=base.seed)
            wanted.add(q)
    return {q: run_baseline(base, q, train, val) for q in sorted(wanted)}


def write_sweep_csv(path: str | Path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def plot_rate_accuracy(path: str | Path, rows: list[SweepRow]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind, marker in (("jcc", "o-"), ("baseline", "s--")):
        pts = sorted((r.mean_KB, r.accuracy) for r in rows if r.kind == kind and r.ok)
        if pts:
            x, y = np.array(pts).T
            ax.plot(x, 100 * y, marker, label=kind.upper() if kind == "jcc" else "baseline")
    ax.set_xlabel("mean KB / image")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
