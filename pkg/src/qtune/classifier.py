"""Small residual CNN classifiers over decoded pixels or DCT coefficients.

``pixel`` mode consumes the level-shifted YCbCr planes produced by the
decoder; ``dct`` mode consumes dequantized coefficient grids, with the two
chroma grids brought up to luma resolution by stride-2 transposed
convolutions before channel concatenation.  Both share a pre-activation
residual trunk with three width groups (16k, 32k, 64k by default).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .jpeg import BlockGrid

INPUT_MODES = ("pixel", "dct")
PIXEL_SCALE = 1.0 / 64.0
DCT_SCALE = 1.0 / 128.0


@dataclass
class ClassifierConfig:
    input_mode: str = "pixel"
    num_classes: int = 10
    k: int = 1
    blocks_per_group: int = 2
    groups: int = 3
    base_width: int = 16
    stem_stride: int = 1
    frontend_width: int = 64
    frontend_kernel: int = 3
    layer_scale_init: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.k < 1 or self.blocks_per_group < 1 or self.groups < 1 or self.base_width < 1:
            raise ValueError("k, blocks_per_group, groups and base_width must be >= 1")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")
        if self.frontend_kernel % 2 == 0:
            raise ValueError("frontend_kernel must be odd")

    def widths(self) -> list[int]:
        return [self.base_width * self.k * 2**g for g in range(self.groups)]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, name: str = "conv"):
        self.weight = Tensor(_he(rng, (cout, cin, k, k), cin * k * k), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), name=f"{name}.bias")
        self.stride = stride
        self.padding = k // 2

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return E.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose:
    """Stride-2 transposed convolution that exactly doubles spatial size."""

    def __init__(self, rng, cin: int, cout: int, k: int = 3, name: str = "deconv"):
        # fan-in of a stride-2 transposed conv is ~ cin * k * k / 4
        self.weight = Tensor(_he(rng, (cin, cout, k, k), max(cin * k * k // 4, 1)), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), name=f"{name}.bias")
        self.padding = k // 2

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return E.conv_transpose2d(x, self.weight, self.bias, stride=2, padding=self.padding, output_padding=1)


class ResidualBlock:
    """relu -> conv -> relu -> conv, scaled per channel, plus a skip path."""

    def __init__(self, rng, cin: int, cout: int, stride: int, scale_init: float, name: str):
        self.name = name
        self.conv1 = Conv(rng, cin, cout, 3, stride, f"{name}.conv1")
        self.conv2 = Conv(rng, cout, cout, 3, 1, f"{name}.conv2")
        self.scale = Tensor(np.full((1, cout, 1, 1), scale_init), name=f"{name}.scale")
        self.shortcut = Conv(rng, cin, cout, 1, stride, f"{name}.shortcut") if (stride != 1 or cin != cout) else None

    def params(self) -> list[Tensor]:
        ps = self.conv1.params() + self.conv2.params() + [self.scale]
        return ps + (self.shortcut.params() if self.shortcut else [])

    def __call__(self, x: Tensor) -> Tensor:
        a = E.relu(x)
        h = self.conv2(E.relu(self.conv1(a)))
        skip = self.shortcut(a) if self.shortcut else x
        return skip + h * self.scale


class DctFrontEnd:
    """Upsample chroma coefficient maps to luma resolution and concatenate."""

    def __init__(self, rng, width: int, kernel: int):
        self.cb = ConvTranspose(rng, 64, width, kernel, "frontend.cb")
        self.cr = ConvTranspose(rng, 64, width, kernel, "frontend.cr")

    def params(self) -> list[Tensor]:
        return self.cb.params() + self.cr.params()

    def __call__(self, y: Tensor, cb: Tensor, cr: Tensor) -> Tensor:
        return E.concat([y, self.cb(cb), self.cr(cr)], axis=1)


def coefficient_map(grid: BlockGrid) -> Tensor:
    """(N, by, bx, 8, 8) blocks -> (N, 64, by, bx), one channel per frequency."""
    n, by, bx = grid.blocks.shape[:3]
    flat = E.reshape(grid.blocks, (n, by, bx, 64))
    return E.transpose(flat, (0, 3, 1, 2))


class Classifier:
    def __init__(self, cfg: ClassifierConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths()
        self.frontend = None
        if cfg.input_mode == "dct":
            self.frontend = DctFrontEnd(rng, cfg.frontend_width, cfg.frontend_kernel)
            in_ch = 64 + 2 * cfg.frontend_width
        else:
            in_ch = 3
        self.stem = Conv(rng, in_ch, widths[0], 3, cfg.stem_stride, "stem")
        self.blocks: list[ResidualBlock] = []
        cin = widths[0]
        for g, w in enumerate(widths):
            for b in range(cfg.blocks_per_group):
                stride = 2 if (g > 0 and b == 0) else 1
                self.blocks.append(ResidualBlock(rng, cin, w, stride, cfg.layer_scale_init, f"group{g}.block{b}"))
                cin = w
        self.head_weight = Tensor(_he(rng, (cin, cfg.num_classes), cin) * 0.1, name="head.weight")
        self.head_bias = Tensor(np.zeros(cfg.num_classes), name="head.bias")

    def named_params(self) -> list[tuple[str, Tensor]]:
        ps = (self.frontend.params() if self.frontend else []) + self.stem.params()
        for b in self.blocks:
            ps += b.params()
        ps += [self.head_weight, self.head_bias]
        return [(p.name, p) for p in ps]

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            arr = np.asarray(state[name], dtype=np.float64).reshape(p.shape)
            p.data[...] = arr

    def forward_pixels(self, planes: Tensor) -> Tensor:
        if planes.ndim != 4 or planes.shape[1] != 3:
            raise E.ShapeError(f"pixel classifier expects (N,3,H,W) planes, got {planes.shape}")
        return self._trunk(E.mul(planes, PIXEL_SCALE))

    def forward_dct(self, grids) -> Tensor:
        y, cb, cr = (E.mul(coefficient_map(g), DCT_SCALE) for g in grids)
        if cb.shape[2] * 2 != y.shape[2] or cb.shape[3] * 2 != y.shape[3]:
            raise E.ShapeError(f"chroma map {cb.shape[2:]} is not half of luma map {y.shape[2:]}")
        return self._trunk(self.frontend(y, cb, cr))

    def __call__(self, x) -> Tensor:
        if self.cfg.input_mode == "dct":
            return self.forward_dct(x)
        return self.forward_pixels(E.as_tensor(x))

    def _trunk(self, x: Tensor) -> Tensor:
        if x.shape[0] == 0:
            return Tensor(np.zeros((0, self.cfg.num_classes)))
        h = _checked(self.stem(x), "stem")
        for b in self.blocks:
            h = _checked(b(h), b.name)
        pooled = E.global_avg_pool(E.relu(h))
        return _checked(E.dense(pooled, self.head_weight, self.head_bias), "head")


def _checked(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activation in layer {layer}")
    return t


def build_classifier(cfg: ClassifierConfig) -> Classifier:
    return Classifier(cfg)


def forward_logits(net: Classifier, batch) -> Tensor:
    return net(batch)


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of rows whose label is among the k largest logits (ties -> lower index)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    if n == 0:
        return 0.0
    # stable sort on -logits keeps lower indices first among equal values
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))
