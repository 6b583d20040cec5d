"""Training objective: cross-entropy plus a rate surrogate on the kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .jpeg import CompressionKernels

PENALTIES = ("hinge_l1", "pure_l2")


@dataclass
class LossConfig:
    lam: float = 0.001
    lam1: float = 1.0
    c: float = 10.0
    penalty_kind: str = "hinge_l1"

    def __post_init__(self) -> None:
        for name in ("lam", "lam1", "c"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.penalty_kind not in PENALTIES:
            raise ValueError(f"penalty_kind must be one of {PENALTIES}, got {self.penalty_kind!r}")

    @classmethod
    def coupled(cls, lam: float, lam1: float = 1.0) -> "LossConfig":
        """CIFAR-style coupling c = 0.01 / lambda."""
        return cls(lam=lam, lam1=lam1, c=0.01 / lam if lam > 0 else math.inf)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return E.softmax_cross_entropy(logits, labels)


def _stack(kernels: CompressionKernels | Tensor) -> list[Tensor]:
    return kernels.tables if isinstance(kernels, CompressionKernels) else [kernels]


def quan_penalty_hinge_l1(kernels: CompressionKernels | Tensor, cfg: LossConfig) -> Tensor:
    """sum over entries of max(q^2 - c, 0) + lam1 * |q|."""
    total = Tensor(0.0)
    for q in _stack(kernels):
        sq = E.square(q)
        hinge = E.sum(E.maximum(E.sub(sq, cfg.c), 0.0)) if math.isfinite(cfg.c) else Tensor(0.0)
        total = total + hinge + cfg.lam1 * E.sum(E.absolute(q))
    return total


def quan_penalty_l2(kernels: CompressionKernels | Tensor) -> Tensor:
    total = Tensor(0.0)
    for q in _stack(kernels):
        total = total + E.sum(E.square(q))
    return total


def quan_penalty(kernels: CompressionKernels | Tensor, cfg: LossConfig) -> Tensor:
    if cfg.penalty_kind == "pure_l2":
        return quan_penalty_l2(kernels)
    return quan_penalty_hinge_l1(kernels, cfg)


def total_loss(cla: Tensor, quan: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.lam == 0:
        return cla
    return cla + cfg.lam * quan
