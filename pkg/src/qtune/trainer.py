"""Joint training of compression kernels and classifier.

Three modes:

``alternating``
    Repeat: ``classifier_epochs`` epochs updating only the classifier, then
    ``kernel_epochs`` epochs updating only the codec (kernels, optionally the
    colour transform).  The learning-rate schedule advances per alternation.
``joint``
    Every batch updates classifier and codec together with separate
    learning-rate groups; the schedule advances per epoch.
``baseline``
    Kernels fixed at the standard tables for ``quality``; only the
    classifier trains (the codec phase of each alternation is skipped).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .classifier import Classifier, ClassifierConfig, build_classifier, topk_accuracy
from .data import Dataset
from .entropy import HuffmanCodec, RateReport, build_huffman_tables, measure_rate
from .jpeg import (
    ColorTransform,
    CompressionKernels,
    decode_pipeline,
    decode_ycbcr,
    dequantized_grids,
    encode_pipeline,
    to_nchw,
)
from .losses import LossConfig, cross_entropy, quan_penalty, total_loss
from .metrics import batch_psnr, batch_ssim, finite_mean

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qtune-checkpoint/1"
MODES = ("alternating", "joint", "baseline")
HISTORY_FIELDS = [
    "alternation",
    "epoch",
    "phase",
    "loss",
    "cla_loss",
    "quan_loss",
    "train_acc",
    "val_acc",
    "mean_KB",
    "PSNR",
    "SSIM",
    "lr_classifier",
    "lr_kernels",
]


@dataclass
class Schedule:
    base: float
    milestones: tuple[int, ...] = ()
    scales: tuple[float, ...] = ()


def lr_at(schedule: Schedule, position: int) -> float:
    """Base rate times the scale of the last milestone reached."""
    if position < 0:
        raise ValueError("position must be >= 0")
    scale = 1.0
    for m, s in zip(schedule.milestones, schedule.scales):
        if position >= m:
            scale = s
    return schedule.base * scale


@dataclass
class TrainConfig:
    mode: str = "alternating"
    alternations: int = 20
    epochs: int = 90
    classifier_epochs: int = 2
    kernel_epochs: int = 1
    batch_size: int = 100
    # 0.05 for the kernels collapses every table within one kernel epoch at
    # desk scale, because Adam moves each entry by ~lr per step
    lr_classifier: float = 0.01
    lr_kernels: float = 0.01
    lr_color: float = 1e-4
    milestones: tuple[int, ...] = (7, 14)
    scales: tuple[float, ...] = (0.1, 0.01)
    loss: LossConfig = field(default_factory=LossConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    train_color: bool = False
    init_kernels: str = "ones"  # "ones" or "quality"
    quality: float = 50.0
    grad_clip: float | None = 5.0
    huffman_sample: int = 50_000
    topk: tuple[int, ...] = (1,)
    eval_history: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.scales = tuple(float(s) for s in self.scales)
        self.topk = tuple(int(k) for k in self.topk)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.milestones) != len(self.scales):
            raise ValueError("milestones and scales must have the same length")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "baseline":
            self.lr_kernels = 0.0
            self.lr_color = 0.0
            self.train_color = False
            self.init_kernels = "quality"

    @classmethod
    def joint_defaults(cls, **kw) -> "TrainConfig":
        """Joint-mode schedule: codec lr 1e-8, others 1e-3, x0.1/0.01/0.001 at 30/60/80."""
        base = dict(mode="joint", epochs=90, batch_size=32, lr_classifier=1e-3, lr_kernels=1e-8,
                    lr_color=1e-3, milestones=(30, 60, 80), scales=(0.1, 0.01, 0.001))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["scales"] = list(self.scales)
        d["topk"] = list(self.topk)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def schedule(self, group: str) -> Schedule:
        base = {"classifier": self.lr_classifier, "kernels": self.lr_kernels, "color": self.lr_color}[group]
        return Schedule(base, self.milestones, self.scales)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class EvalResult:
    accuracy: dict[int, float]
    psnr: float
    ssim: float
    rate: RateReport
    codec: HuffmanCodec

    @property
    def mean_kb(self) -> float:
        return self.rate.mean_kb

    def summary(self) -> dict:
        out = {f"top{k}": v for k, v in self.accuracy.items()}
        out.update(psnr=self.psnr, ssim=self.ssim, mean_KB=self.rate.mean_kb, median_KB=self.rate.median_kb)
        return out


def _array_doc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]}


def _array_from(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=np.float64).reshape(doc["shape"])


def _adam_doc(state: E.AdamState) -> dict:
    return {
        "step": state.step,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "m": [_array_doc(m) for m in state.m],
        "v": [_array_doc(v) for v in state.v],
        "warnings": list(state.warnings),
    }


def _adam_from(doc: dict) -> E.AdamState:
    return E.AdamState(
        [_array_from(m) for m in doc["m"]],
        [_array_from(v) for v in doc["v"]],
        doc["step"],
        doc["beta1"],
        doc["beta2"],
        doc["eps"],
        list(doc["warnings"]),
    )


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    params: dict[str, np.ndarray]
    kernels: np.ndarray
    color_matrix: np.ndarray
    optimizers: dict[str, dict]
    position: int
    epochs_done: int
    rng_state: dict
    history: list[dict]

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
            "config_hash": self.config_hash,
            "params": {k: _array_doc(v) for k, v in self.params.items()},
            "kernels": _array_doc(self.kernels),
            "color_matrix": _array_doc(self.color_matrix),
            "optimizers": self.optimizers,
            "position": self.position,
            "epochs_done": self.epochs_done,
            "rng_state": self.rng_state,
            "history": self.history,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
        return cls(
            config=doc["config"],
            config_hash=doc["config_hash"],
            params={k: _array_from(v) for k, v in doc["params"].items()},
            kernels=_array_from(doc["kernels"]),
            color_matrix=_array_from(doc["color_matrix"]),
            optimizers=doc["optimizers"],
            position=doc["position"],
            epochs_done=doc["epochs_done"],
            rng_state=doc["rng_state"],
            history=doc["history"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text())

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(copy.deepcopy(self.config))

    def compression_kernels(self) -> CompressionKernels:
        return CompressionKernels.from_arrays(self.kernels)

    def color_transform(self) -> ColorTransform:
        return ColorTransform(E.Tensor(self.color_matrix, name="color"))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


class Trainer:
    def __init__(self, cfg: TrainConfig, train: Dataset, val: Dataset | None = None):
        if len(train) == 0:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.train = train
        self.val = val
        self.net: Classifier = build_classifier(cfg.classifier)
        if cfg.init_kernels == "quality":
            self.kernels = CompressionKernels.from_quality(cfg.quality)
        else:
            self.kernels = CompressionKernels.constant(1.0)
        self.color = ColorTransform()
        self.opt_classifier = E.Adam(self.net.params())
        self.opt_kernels = E.Adam(self.kernels.tables)
        self.opt_color = E.Adam([self.color.matrix])
        self.position = 0
        self.epochs_done = 0
        self.history: list[dict] = []

    # -- state ---------------------------------------------------------------

    @property
    def total_positions(self) -> int:
        return self.cfg.epochs if self.cfg.mode == "joint" else self.cfg.alternations

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.to_dict(),
            config_hash=self.cfg.digest(),
            params=self.net.state_dict(),
            kernels=self.kernels.as_array(),
            color_matrix=self.color.matrix.data.copy(),
            optimizers={
                "classifier": _adam_doc(self.opt_classifier.state),
                "kernels": _adam_doc(self.opt_kernels.state),
                "color": _adam_doc(self.opt_color.state),
            },
            position=self.position,
            epochs_done=self.epochs_done,
            rng_state={"seed": self.cfg.seed, "epochs_done": self.epochs_done},
            history=copy.deepcopy(self.history),
        )

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, train: Dataset, val: Dataset | None = None, cfg: TrainConfig | None = None
    ) -> "Trainer":
        cfg = cfg or ckpt.train_config()
        if cfg.digest() != ckpt.config_hash:
            raise ValueError("checkpoint was written with a different configuration")
        t = cls(cfg, train, val)
        t.restore(ckpt)
        return t

    def restore(self, ckpt: Checkpoint) -> None:
        self.net.load_state_dict(ckpt.params)
        for t, arr in zip(self.kernels.tables, ckpt.kernels):
            t.data[...] = arr
        self.color.matrix.data[...] = ckpt.color_matrix
        self.opt_classifier.state = _adam_from(ckpt.optimizers["classifier"])
        self.opt_kernels.state = _adam_from(ckpt.optimizers["kernels"])
        self.opt_color.state = _adam_from(ckpt.optimizers["color"])
        self.position = ckpt.position
        self.epochs_done = ckpt.epochs_done
        self.history = copy.deepcopy(ckpt.history)

    # -- forward -------------------------------------------------------------

    def forward(self, images: np.ndarray) -> E.Tensor:
        enc = encode_pipeline(E.Tensor(to_nchw(images)), self.color, self.kernels)
        if self.cfg.classifier.input_mode == "dct":
            return self.net(dequantized_grids(enc, self.kernels))
        return self.net(decode_ycbcr(enc, self.kernels))

    def predict(self, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
        out = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.classifier.num_classes))

    def reconstruct(self, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
        """Decoded RGB (N,H,W,3) floats in [0,255]."""
        out = []
        for i in range(0, len(images), batch_size):
            enc = encode_pipeline(E.Tensor(to_nchw(images[i : i + batch_size])), self.color, self.kernels)
            out.append(decode_pipeline(enc, self.color, self.kernels).data.transpose(0, 2, 3, 1))
        return np.concatenate(out)

    # -- training ------------------------------------------------------------

    def _codec_params(self) -> list[E.Tensor]:
        return self.kernels.tables + ([self.color.matrix] if self.cfg.train_color else [])

    def _set_phase(self, phase: str) -> None:
        self.net.set_trainable(phase in ("classifier", "joint"))
        codec = phase in ("kernels", "joint")
        self.kernels.set_trainable(codec)
        self.color.trainable = codec and self.cfg.train_color

    def _order(self) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, self.epochs_done])
        return rng.permutation(len(self.train))

    def _codec_step(self, position: int) -> None:
        grads = [t.grad for t in self.kernels.tables]
        if self.cfg.grad_clip is not None:
            grads, _ = E.clip_grad_norm(grads, self.cfg.grad_clip)
        lr_k = lr_at(self.cfg.schedule("kernels"), position)
        if lr_k > 0:
            self.opt_kernels.step(lr_k, grads)
        self.kernels.project()
        if self.cfg.train_color:
            lr_c = lr_at(self.cfg.schedule("color"), position)
            if lr_c > 0:
                self.opt_color.step(lr_c)

    def _epoch(self, phase: str, position: int) -> dict:
        self._set_phase(phase)
        cfg = self.cfg
        lr_cls = lr_at(cfg.schedule("classifier"), position)
        order = self._order()
        sums = {"loss": 0.0, "cla_loss": 0.0, "quan_loss": 0.0, "correct": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with E.Tape() as tape:
                logits = self.forward(self.train.images[idx])
                cla = cross_entropy(logits, self.train.labels[idx])
                quan = quan_penalty(self.kernels, cfg.loss)
                loss = total_loss(cla, quan, cfg.loss)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss in {phase} epoch {self.epochs_done}")
            params = (self.net.params() if phase != "kernels" else []) + (
                self._codec_params() if phase != "classifier" else []
            )
            tape.backward(loss, params)
            if phase in ("classifier", "joint"):
                self.opt_classifier.step(lr_cls)
            if phase in ("kernels", "joint"):
                self._codec_step(position)
            n = len(idx)
            sums["loss"] += loss.item() * n
            sums["cla_loss"] += cla.item() * n
            sums["quan_loss"] += quan.item() * n
            sums["correct"] += topk_accuracy(logits, self.train.labels[idx], 1) * n
        self.epochs_done += 1
        self._set_phase("frozen")
        n = len(order)
        return {
            "epoch": self.epochs_done,
            "phase": phase,
            "loss": sums["loss"] / n,
            "cla_loss": sums["cla_loss"] / n,
            "quan_loss": sums["quan_loss"] / n,
            "train_acc": sums["correct"] / n,
            "lr_classifier": lr_cls,
            "lr_kernels": lr_at(cfg.schedule("kernels"), position),
        }

    def _quick_eval(self) -> dict:
        if self.val is None or not self.cfg.eval_history:
            return {}
        logits = self.predict(self.val.images)
        rate = measure_rate(self.val.images, self.kernels, HuffmanCodec.standard(), self.color)
        recon = self.reconstruct(self.val.images)
        return {
            "val_acc": topk_accuracy(logits, self.val.labels, 1),
            "mean_KB": rate.mean_kb,
            "PSNR": finite_mean(batch_psnr(self.val.images, recon)),
            "SSIM": float(np.mean(batch_ssim(self.val.images, recon))),
        }

    def step(self) -> list[dict]:
        """Run one alternation (or one joint epoch) and append to the history."""
        cfg = self.cfg
        pos = self.position
        rows = []
        if cfg.mode == "joint":
            rows.append(self._epoch("joint", pos))
        else:
            for _ in range(cfg.classifier_epochs):
                rows.append(self._epoch("classifier", pos))
            if cfg.mode == "alternating":
                for _ in range(cfg.kernel_epochs):
                    rows.append(self._epoch("kernels", pos))
        rows[-1].update(self._quick_eval())
        for r in rows:
            r["alternation"] = pos
            full = {k: _clean(r.get(k)) for k in HISTORY_FIELDS}
            self.history.append(full)
        self.position += 1
        return rows

    def run(self, until: int | None = None, on_step=None) -> Checkpoint:
        """Train up to position ``until`` (default: the configured total)."""
        until = self.total_positions if until is None else min(until, self.total_positions)
        last_good = self.checkpoint()
        while self.position < until:
            try:
                self.step()
            except FloatingPointError as exc:
                self.restore(last_good)
                raise TrainingAborted(str(exc), last_good) from exc
            last_good = self.checkpoint()
            if on_step is not None:
                on_step(self, last_good)
        return last_good

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, val: Dataset | None = None, codec: HuffmanCodec | None = None) -> EvalResult:
        """Accuracy, PSNR, SSIM and rate; Huffman tables are refit on the training split."""
        val = val if val is not None else self.val
        if val is None:
            raise ValueError("no validation data")
        if codec is None:
            codec = build_huffman_tables(
                self.train.images, self.kernels, self.cfg.huffman_sample, self.cfg.seed, self.color
            )
        rate = measure_rate(val.images, self.kernels, codec, self.color, image_ids=list(val.ids))
        logits = self.predict(val.images)
        recon = self.reconstruct(val.images)
        acc = {k: topk_accuracy(logits, val.labels, k) for k in self.cfg.topk}
        return EvalResult(
            acc,
            finite_mean(batch_psnr(val.images, recon)),
            float(np.mean(batch_ssim(val.images, recon))),
            rate,
            codec,
        )


def train_alternating(cfg: TrainConfig, train: Dataset, val: Dataset | None = None) -> tuple[Checkpoint, list[dict]]:
    if cfg.mode not in ("alternating", "baseline"):
        raise ValueError(f"train_alternating needs mode 'alternating' or 'baseline', got {cfg.mode!r}")
    t = Trainer(cfg, train, val)
    ckpt = t.run()
    return ckpt, t.history


def train_joint(cfg: TrainConfig, train: Dataset, val: Dataset | None = None) -> tuple[Checkpoint, list[dict]]:
    if cfg.mode != "joint":
        raise ValueError(f"train_joint needs mode 'joint', got {cfg.mode!r}")
    t = Trainer(cfg, train, val)
    ckpt = t.run()
    return ckpt, t.history


def evaluate(ckpt: Checkpoint, train: Dataset, val: Dataset) -> EvalResult:
    return Trainer.from_checkpoint(ckpt, train, val).evaluate()


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in HISTORY_FIELDS})
