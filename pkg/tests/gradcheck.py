"""Finite-difference gradient checks shared by unit and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from qtune import engine as E
from qtune.jpeg import (
    ColorTransform,
    CompressionKernels,
    decode_pipeline,
    decode_ycbcr,
    encode_pipeline,
)
from qtune.classifier import ClassifierConfig, build_classifier

from oracles import finite_difference, rel_error

FD_STEP = 1e-4


def _away_from(x: np.ndarray, kinks, margin: float = 0.05) -> np.ndarray:
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, k + np.sign(x - k + 1e-12) * margin * 2, x)
    return x


@dataclass
class Case:
    name: str
    fn: Callable[..., E.Tensor]
    shapes: tuple[tuple[int, ...], ...]
    transform: Callable[[np.ndarray], np.ndarray] = lambda a: a


def _positive(a):
    return np.abs(a) + 0.5


CASES = [
    Case("add", lambda a, b: E.add(a, b), ((3, 4), (4,))),
    Case("sub", lambda a, b: E.sub(a, b), ((2, 3), (2, 3))),
    Case("mul", lambda a, b: E.mul(a, b), ((3, 1), (1, 4))),
    Case("div", lambda a, b: E.div(a, b), ((3, 4), (3, 4))),
    Case("safe_reciprocal", lambda a: E.safe_reciprocal(a), ((3, 4),), _positive),
    Case("square", lambda a: E.square(a), ((5,),)),
    Case("absolute", lambda a: E.absolute(a), ((6,),), lambda a: _away_from(a, [0.0])),
    Case("relu", lambda a: E.relu(a), ((6,),), lambda a: _away_from(a, [0.0])),
    Case("maximum", lambda a: E.maximum(a, 0.3), ((6,),), lambda a: _away_from(a, [0.3])),
    Case("clip", lambda a: E.clip(a, -0.5, 0.5), ((8,),), lambda a: _away_from(a, [-0.5, 0.5])),
    Case("identity", lambda a: E.identity(a), ((4,),)),
    Case("reshape", lambda a: E.reshape(a, (6, 2)), ((3, 4),)),
    Case("transpose", lambda a: E.transpose(a, (2, 0, 1)), ((2, 3, 4),)),
    Case("concat", lambda a, b: E.concat([a, b], axis=1), ((2, 3), (2, 2))),
    Case("getitem_slice", lambda a: a[1:, ::2], ((3, 5),)),
    Case("getitem_fancy", lambda a: a[np.array([0, 2, 0])], ((3, 2),)),
    Case("pad_edge", lambda a: E.pad_edge(a, 3, 2), ((2, 3, 3),)),
    Case("sum_axis", lambda a: E.sum(a, axis=1), ((3, 4),)),
    Case("mean_axes", lambda a: E.mean(a, axis=(0, 2), keepdims=True), ((2, 3, 4),)),
    Case("matmul", lambda a, b: E.matmul(a, b), ((2, 3, 4), (4, 5))),
    Case("sandwich", lambda a: E.sandwich(a, np.arange(12.0).reshape(4, 3) / 7, np.eye(3)[:, :2]), ((2, 3, 3),)),
    Case("dense", lambda x, w, b: E.dense(x, w, b), ((3, 4), (4, 2), (2,))),
    Case("upsample2x", lambda a: E.upsample2x(a), ((1, 3, 4),)),
    Case("conv2d_s1", lambda x, w, b: E.conv2d(x, w, b, stride=1, padding=1), ((2, 3, 5, 5), (4, 3, 3, 3), (4,))),
    Case("conv2d_s2", lambda x, w: E.conv2d(x, w, stride=2, padding=1), ((2, 2, 6, 6), (3, 2, 3, 3))),
    Case("conv2d_1x1", lambda x, w: E.conv2d(x, w, stride=2, padding=0), ((1, 3, 4, 4), (2, 3, 1, 1))),
    Case("conv_transpose2d", lambda x, w, b: E.conv_transpose2d(x, w, b), ((2, 3, 3, 3), (3, 2, 3, 3), (2,))),
    Case("global_avg_pool", lambda a: E.global_avg_pool(a), ((2, 3, 4, 4),)),
    Case("softmax_cross_entropy", lambda a: E.softmax_cross_entropy(a, np.array([0, 2, 1])), ((3, 4),)),
]


def check_case(case: Case, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences for every input."""
    rng = np.random.default_rng(seed)
    arrays = [case.transform(rng.normal(size=s)) for s in case.shapes]
    tensors = [E.Tensor(a, requires_grad=True) for a in arrays]
    with E.Tape():
        probe = case.fn(*[E.Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def value():
        return float(np.sum(case.fn(*[E.Tensor(t.data) for t in tensors]).data * weights))

    with E.Tape() as tape:
        loss = E.sum(E.mul(case.fn(*tensors), weights))
    grads = tape.backward(loss, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        worst = max(worst, rel_error(g, finite_difference(value, t.data, FD_STEP)))
    return worst


# ---------------------------------------------------------------------------
# composed pipeline
# ---------------------------------------------------------------------------


def _frozen_rounding(residuals: list[np.ndarray]):
    """round(z) = z + r with r recorded on the first call and replayed afterwards.

    With ``residuals`` empty the hook records; otherwise it replays them in
    call order, so finite differences see the smooth surrogate whose forward
    value equals the rounded pipeline at the base point.
    """
    state = {"i": 0, "record": not residuals}

    def hook(z: E.Tensor) -> E.Tensor:
        if state["record"]:
            r = E._round_half_away(z.data) - z.data
            residuals.append(r)
        else:
            r = residuals[state["i"]]
            state["i"] += 1
        return E.add(E.identity(z), r)

    return hook


def pipeline_gradcheck(seed: int = 0, size: int = 16, num_classes: int = 3, mode: str = "pixel") -> dict[str, float]:
    """Compare the STE gradient of encode->decode->classify against finite differences.

    The finite-difference target is the identity-surrogate pipeline: rounding
    replaced by ``z + r`` with the rounding residuals ``r`` frozen at the base
    point.  Its value at the base point equals the true rounded pipeline and
    its derivative equals the straight-through estimate.
    """
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(2, 3, size, size)).astype(np.float64)
    labels = rng.integers(0, num_classes, 2)
    kernels = CompressionKernels.from_arrays(rng.uniform(0.2, 0.9, size=(3, 8, 8)))
    kernels.set_trainable(True)
    ct = ColorTransform()
    net = build_classifier(ClassifierConfig(input_mode=mode, num_classes=num_classes, blocks_per_group=1,
                                            groups=2, base_width=4, frontend_width=4, seed=seed))
    net.set_trainable(False)
    weights = rng.normal(size=(2, 3, size, size))

    def objective(rounding, track: bool):
        enc = encode_pipeline(E.Tensor(images), ct, kernels, rounding)
        if mode == "dct":
            from qtune.jpeg import dequantized_grids

            logits = net(dequantized_grids(enc, kernels))
        else:
            logits = net(decode_ycbcr(enc, kernels))
        rgb = decode_pipeline(enc, ct, kernels) if mode == "pixel" else None
        loss = E.softmax_cross_entropy(logits, labels)
        if rgb is not None:
            loss = E.add(loss, E.mul(E.sum(E.mul(rgb, weights)), 1e-4))
        return loss

    with E.Tape() as tape:
        loss = objective(E.round_ste, True)
    grads = tape.backward(loss, kernels.tables)

    residuals: list[np.ndarray] = []
    with E.Tape():
        base = objective(_frozen_rounding(residuals), False)
    assert abs(base.item() - loss.item()) < 1e-9, "surrogate must match the rounded pipeline at the base point"

    out = {}
    for name, t, g in zip(("y", "cb", "cr"), kernels.tables, grads):
        def value():
            return objective(_frozen_rounding(residuals), False).item()

        out[name] = rel_error(g, finite_difference(value, t.data, FD_STEP))
    return out
