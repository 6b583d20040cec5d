"""Differentiable baseline-JPEG encoder/decoder layers.

The encoder is level shift + colour transform, 4:2:0 chroma subsampling,
8x8 blockwise DCT and quantization with trainable *compression kernels*
(elementwise reciprocals of Q-tables).  The decoder is dequantization,
inverse DCT and bilinear chroma upsampling.

Images are batched as (N, 3, H, W) float tensors with samples in [0, 255].
Blocks are stored as (N, blocks_per_col, blocks_per_row, 8, 8).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import engine as E
from .engine import Tensor

BLOCK = 8
MACROBLOCK = 16
CHANNELS = ("Y", "Cb", "Cr")

# ITU-T T.81 Annex K.1 tables, row-major
STD_LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
STD_CHROMA_QTABLE = np.full((8, 8), 99, dtype=np.int64)
STD_CHROMA_QTABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]

BT601_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
BT601_OFFSET = np.array([0.0, 128.0, 128.0])


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal type-II DCT basis: row u is the u-th cosine."""
    k = np.arange(n)
    d = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


DCT_BASIS = dct_matrix()


def quality_scale(quality: float) -> float:
    if not 0 < quality <= 100:
        raise ValueError(f"quality must be in (0, 100], got {quality}")
    return 50.0 / quality if quality < 50 else 2.0 - quality / 50.0


def scaled_qtable(base: np.ndarray, quality: float) -> np.ndarray:
    """Standard table scaled to a JPEG quality percentage, entries in [1, 255]."""
    q = np.floor(base * quality_scale(quality) + 0.5)
    return np.clip(q, 1, 255).astype(np.int64)


def standard_qtables(quality: float = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    luma = scaled_qtable(STD_LUMA_QTABLE, quality)
    chroma = scaled_qtable(STD_CHROMA_QTABLE, quality)
    return luma, chroma, chroma.copy()


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ColorTransform:
    """Affine RGB -> YCbCr map; the inverse is recomputed from the matrix."""

    matrix: Tensor = field(default_factory=lambda: Tensor(BT601_MATRIX, name="color"))
    offset: np.ndarray = field(default_factory=lambda: BT601_OFFSET.copy())

    @property
    def trainable(self) -> bool:
        return self.matrix.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.matrix.requires_grad = flag

    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix.data)


@dataclass
class CompressionKernels:
    """Three trainable 8x8 reciprocal quantization tables (Y, Cb, Cr)."""

    y: Tensor
    cb: Tensor
    cr: Tensor

    Q_MAX = 1.0

    def __post_init__(self) -> None:
        for name, t in zip(CHANNELS, self.tables):
            if t.shape != (8, 8):
                raise ValueError(f"kernel {name} must be 8x8, got {t.shape}")
            t.name = f"kernel_{name}"

    @property
    def tables(self) -> list[Tensor]:
        return [self.y, self.cb, self.cr]

    @classmethod
    def from_arrays(cls, arrays) -> "CompressionKernels":
        arrays = np.asarray(arrays, dtype=np.float64)
        return cls(Tensor(arrays[0]), Tensor(arrays[1]), Tensor(arrays[2]))

    @classmethod
    def constant(cls, value: float = 1.0) -> "CompressionKernels":
        return cls.from_arrays(np.full((3, 8, 8), value))

    @classmethod
    def from_qtables(cls, qtables) -> "CompressionKernels":
        q = np.asarray(qtables, dtype=np.float64)
        if np.any(q < 1):
            raise ValueError("Q-table entries must be >= 1")
        return cls.from_arrays(1.0 / q)

    @classmethod
    def from_quality(cls, quality: float) -> "CompressionKernels":
        return cls.from_qtables(standard_qtables(quality))

    def as_array(self) -> np.ndarray:
        return np.stack([t.data for t in self.tables])

    def copy(self) -> "CompressionKernels":
        return CompressionKernels.from_arrays(self.as_array())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tables:
            t.requires_grad = flag

    def project(self) -> None:
        """Clamp all entries into [0, Q_MAX] in place."""
        for t in self.tables:
            np.clip(t.data, 0.0, self.Q_MAX, out=t.data)

    def validate(self) -> None:
        for name, t in zip(CHANNELS, self.tables):
            if np.any(t.data < 0) or not np.all(np.isfinite(t.data)):
                raise ValueError(f"kernel {name} has negative or non-finite entries")


@dataclass
class BlockGrid:
    """8x8 blocks of one channel plane, raster order."""

    channel: str
    blocks: Tensor  # (N, blocks_per_col, blocks_per_row, 8, 8)
    height: int  # plane size before padding to a multiple of 8
    width: int

    @property
    def blocks_per_col(self) -> int:
        return self.blocks.shape[1]

    @property
    def blocks_per_row(self) -> int:
        return self.blocks.shape[2]

    @property
    def block_count(self) -> int:
        return self.blocks_per_col * self.blocks_per_row

    def with_blocks(self, blocks: Tensor) -> "BlockGrid":
        return BlockGrid(self.channel, blocks, self.height, self.width)


@dataclass
class ImageYCbCr:
    y: Tensor  # (N, H, W)
    cb: Tensor  # (N, H/2, W/2)
    cr: Tensor
    level_shifted: bool = True


@dataclass
class EncodedBatch:
    """Quantized coefficient grids plus the geometry needed to decode."""

    grids: tuple[BlockGrid, BlockGrid, BlockGrid]
    height: int  # original image size
    width: int


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def rgb_to_ycbcr(images, ct: ColorTransform) -> Tensor:
    """(N,3,H,W) RGB -> level-shifted full-resolution YCbCr planes."""
    images = E.as_tensor(images)
    n, c, h, w = images.shape
    if c != 3:
        raise E.ShapeError(f"rgb_to_ycbcr: expected 3 channels, got {c}")
    flat = E.reshape(images, (n, 3, h * w))
    ycc = E.matmul(ct.matrix, flat) + (ct.offset - 128.0).reshape(3, 1)
    return E.reshape(ycc, (n, 3, h, w))


def ycbcr_to_rgb(planes, ct: ColorTransform) -> Tensor:
    planes = E.as_tensor(planes)
    n, _, h, w = planes.shape
    flat = E.reshape(planes, (n, 3, h * w)) + (128.0 - ct.offset).reshape(3, 1)
    rgb = E.matmul(E.Tensor(ct.inverse_matrix()), flat)
    return E.reshape(rgb, (n, 3, h, w))


def subsample_420(planes) -> ImageYCbCr:
    """Keep Y; average each 2x2 chroma neighbourhood."""
    planes = E.as_tensor(planes)
    n, _, h, w = planes.shape
    if h % 2 or w % 2:
        raise E.ShapeError(f"subsample_420: dimensions must be even, got {h}x{w}")
    y = planes[:, 0]
    chroma = E.reshape(planes[:, 1:], (n, 2, h // 2, 2, w // 2, 2))
    chroma = E.mean(chroma, axis=(3, 5))
    return ImageYCbCr(y, chroma[:, 0], chroma[:, 1])


def upsample_420(img: ImageYCbCr) -> Tensor:
    """Bilinear 2x chroma upsampling; returns (N,3,H,W) planes."""
    n = img.y.shape[0]
    chroma = E.upsample2x(E.concat([E.reshape(img.cb, (n, 1) + img.cb.shape[1:]),
                                    E.reshape(img.cr, (n, 1) + img.cr.shape[1:])], axis=1))
    y = E.reshape(img.y, (n, 1) + img.y.shape[1:])
    return E.concat([y, chroma], axis=1)


def blockify(plane, channel: str = "Y") -> BlockGrid:
    """Split (N,H,W) planes into 8x8 blocks, edge-padding to a multiple of 8."""
    plane = E.as_tensor(plane)
    n, h, w = plane.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    padded = E.pad_edge(plane, ph, pw) if ph or pw else plane
    by, bx = (h + ph) // BLOCK, (w + pw) // BLOCK
    blocks = E.transpose(E.reshape(padded, (n, by, BLOCK, bx, BLOCK)), (0, 1, 3, 2, 4))
    return BlockGrid(channel, blocks, h, w)


def deblockify(grid: BlockGrid) -> Tensor:
    n, by, bx = grid.blocks.shape[:3]
    plane = E.reshape(E.transpose(grid.blocks, (0, 1, 3, 2, 4)), (n, by * BLOCK, bx * BLOCK))
    if plane.shape[1:] != (grid.height, grid.width):
        plane = plane[:, : grid.height, : grid.width]
    return plane


def dct_forward(grid: BlockGrid) -> BlockGrid:
    return grid.with_blocks(E.sandwich(grid.blocks, DCT_BASIS, DCT_BASIS.T))


def idct(grid: BlockGrid) -> BlockGrid:
    return grid.with_blocks(E.sandwich(grid.blocks, DCT_BASIS.T, DCT_BASIS))


Rounding = Callable[[Tensor], Tensor]


def quantize(grid: BlockGrid, q: Tensor, rounding: Rounding = E.round_ste) -> BlockGrid:
    """round(F * q); entries where q == 0 are discarded (output 0, no gradient)."""
    if np.any(q.data < 0):
        raise ValueError(f"quantize: negative compression kernel entry (min {q.data.min()})")
    live = (q.data > 0).astype(np.float64)
    q_eff = E.mul(q, live) if q.requires_grad else Tensor(q.data * live)
    return grid.with_blocks(rounding(E.mul(grid.blocks, q_eff)))


def dequantize(grid: BlockGrid, q: Tensor) -> BlockGrid:
    """F_q / q where q > 0, else 0."""
    return grid.with_blocks(E.mul(grid.blocks, E.safe_reciprocal(q)))


def pad_to_macroblock(images) -> Tensor:
    images = E.as_tensor(images)
    h, w = images.shape[-2:]
    ph, pw = -h % MACROBLOCK, -w % MACROBLOCK
    return E.pad_edge(images, ph, pw) if ph or pw else images


def encode_pipeline(
    images, ct: ColorTransform, kernels: CompressionKernels, rounding: Rounding = E.round_ste
) -> EncodedBatch:
    images = E.as_tensor(images)
    h, w = images.shape[-2:]
    planes = rgb_to_ycbcr(pad_to_macroblock(images), ct)
    sub = subsample_420(planes)
    grids = []
    for name, plane, q in zip(CHANNELS, (sub.y, sub.cb, sub.cr), kernels.tables):
        grids.append(quantize(dct_forward(blockify(plane, name)), q, rounding))
    return EncodedBatch(tuple(grids), h, w)


def dequantized_grids(enc: EncodedBatch, kernels: CompressionKernels) -> list[BlockGrid]:
    return [dequantize(g, q) for g, q in zip(enc.grids, kernels.tables)]


def decode_ycbcr(enc: EncodedBatch, kernels: CompressionKernels) -> Tensor:
    """Reconstruct level-shifted full-resolution YCbCr planes (N,3,H,W)."""
    y, cb, cr = (deblockify(idct(g)) for g in dequantized_grids(enc, kernels))
    planes = upsample_420(ImageYCbCr(y, cb, cr))
    if planes.shape[2:] != (enc.height, enc.width):
        planes = planes[:, :, : enc.height, : enc.width]
    return planes


def decode_pipeline(enc: EncodedBatch, ct: ColorTransform, kernels: CompressionKernels) -> Tensor:
    """Reconstruct RGB images clamped to [0, 255]."""
    return E.clip(ycbcr_to_rgb(decode_ycbcr(enc, kernels), ct), 0.0, 255.0)


def to_nchw(images: np.ndarray) -> np.ndarray:
    """(N,H,W,3) uint8 -> (N,3,H,W) float64."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2))


def to_nhwc_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(images) + 0.5), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def compress_images(
    images: np.ndarray, kernels: CompressionKernels, ct: ColorTransform | None = None
) -> np.ndarray:
    """Encode then decode a uint8 (N,H,W,3) batch; returns float RGB (N,H,W,3)."""
    ct = ct or ColorTransform()
    enc = encode_pipeline(to_nchw(images), ct, kernels)
    return decode_pipeline(enc, ct, kernels).data.transpose(0, 2, 3, 1)


def quantized_coefficients(
    images: np.ndarray, kernels: CompressionKernels, ct: ColorTransform | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer coefficient blocks (N, nblocks, 8, 8) per channel, raster block order."""
    ct = ct or ColorTransform()
    enc = encode_pipeline(to_nchw(images), ct, kernels)
    out = []
    for g in enc.grids:
        b = g.blocks.data
        out.append(b.reshape(b.shape[0], -1, 8, 8).astype(np.int64))
    return tuple(out)
