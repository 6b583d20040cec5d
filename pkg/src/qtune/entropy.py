"""Baseline-JPEG style entropy coding for bandwidth measurement.

Coefficients are zigzag scanned, DC values are DPCM coded per channel, AC
values are run-length coded into (run, size) symbols, and symbols are
Huffman coded with four canonical tables (DC/AC x luma/chroma).  Amplitude
bits follow the JPEG one's-complement convention.

Two paths share the same symbol alphabet:

* :func:`huffman_encode` / :func:`huffman_decode` produce and parse real bit
  strings (used for round-trip verification);
* :func:`measure_rate` counts bits with vectorized numpy, which is what the
  trainer and CLI use on whole corpora.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .jpeg import ColorTransform, CompressionKernels, quantized_coefficients

logger = logging.getLogger(__name__)

MAX_CODE_LENGTH = 16
EOB = 0x00
ZRL = 0xF0
ESCAPE = 256
ESCAPE_PAYLOAD_BITS = 24
ALPHABET_SIZE = 257
MAX_DC_CATEGORY = 11
MAX_AC_CATEGORY = 10
BITS_PER_KB = 8192


def _zigzag_order() -> np.ndarray:
    order = []
    for s in range(15):
        diag = [(r, s - r) for r in range(8) if 0 <= s - r < 8]
        order.extend(diag if s % 2 else diag[::-1])
    return np.array([r * 8 + c for r, c in order], dtype=np.int64)


ZIGZAG = _zigzag_order()  # scan position -> row-major index
INVERSE_ZIGZAG = np.argsort(ZIGZAG)  # row-major index -> scan position


def zigzag_scan(blocks: np.ndarray) -> np.ndarray:
    """(..., 8, 8) -> (..., 64) in zigzag order."""
    blocks = np.asarray(blocks)
    return blocks.reshape(blocks.shape[:-2] + (64,))[..., ZIGZAG]


def inverse_zigzag(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors)
    return vectors[..., INVERSE_ZIGZAG].reshape(vectors.shape[:-1] + (8, 8))


def dc_differential(dc: np.ndarray) -> np.ndarray:
    """DPCM along the last axis: first value raw, then successive differences."""
    dc = np.asarray(dc, dtype=np.int64)
    out = dc.copy()
    out[..., 1:] = dc[..., 1:] - dc[..., :-1]
    return out


def dc_undifferential(diffs: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(diffs, dtype=np.int64), axis=-1)


def size_category(v) -> np.ndarray | int:
    """Number of bits needed for |v| (0 for v == 0)."""
    if isinstance(v, (int, np.integer)):
        return abs(int(v)).bit_length()
    a = np.abs(np.asarray(v, dtype=np.int64))
    cat = np.frexp(a.astype(np.float64))[1].astype(np.int64)
    return int(cat) if np.ndim(cat) == 0 else cat


def amplitude_bits(v: int, size: int) -> int:
    """JPEG amplitude field: v itself if positive, else v + 2**size - 1."""
    return v if v >= 0 else v + (1 << size) - 1


def amplitude_value(bits: int, size: int) -> int:
    if size == 0:
        return 0
    return bits if bits >> (size - 1) else bits - (1 << size) + 1


def clamp_coefficients(dc_diff: np.ndarray, ac: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp into the baseline range (|DC diff| <= 2047, |AC| <= 1023)."""
    dc_lim, ac_lim = (1 << MAX_DC_CATEGORY) - 1, (1 << MAX_AC_CATEGORY) - 1
    n_dc = int(np.count_nonzero(np.abs(dc_diff) > dc_lim))
    n_ac = int(np.count_nonzero(np.abs(ac) > ac_lim))
    if n_dc or n_ac:
        logger.warning("clamped %d DC differences and %d AC coefficients to JPEG range", n_dc, n_ac)
    return np.clip(dc_diff, -dc_lim, dc_lim), np.clip(ac, -ac_lim, ac_lim)


# ---------------------------------------------------------------------------
# symbol streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSymbols:
    """Entropy-coding tokens for one 8x8 block.

    ``ac`` holds (symbol, amplitude) pairs where symbol = run << 4 | size.
    """

    chroma: bool
    dc_size: int
    dc_amplitude: int
    ac: tuple[tuple[int, int], ...]


def ac_runlength_encode(ac: Sequence[int]) -> list[tuple[int, int, int]]:
    """63 AC values (zigzag order) -> [(run, size, value)], ZRL=(15,0,0), EOB=(0,0,0)."""
    if len(ac) != 63:
        raise ValueError(f"expected 63 AC coefficients, got {len(ac)}")
    out: list[tuple[int, int, int]] = []
    run = 0
    for v in ac:
        v = int(v)
        if v == 0:
            run += 1
            continue
        while run > 15:
            out.append((15, 0, 0))
            run -= 16
        out.append((run, size_category(v), v))
        run = 0
    if run:
        out.append((0, 0, 0))
    return out


def ac_runlength_decode(symbols: Iterable[tuple[int, int, int]], block_index: int = 0) -> list[int]:
    ac: list[int] = []
    for run, size, value in symbols:
        if (run, size) == (0, 0):
            ac.extend([0] * (63 - len(ac)))
            break
        ac.extend([0] * (run + (1 if size == 0 else 0)))
        if size:
            ac.append(value)
        if len(ac) > 63:
            raise ValueError(f"block {block_index}: run-length data overflows 63 coefficients")
    if len(ac) != 63:
        raise ValueError(f"block {block_index}: run-length data covers {len(ac)} of 63 coefficients")
    return ac


def block_symbols(zz: Sequence[int], dc_diff: int, chroma: bool) -> BlockSymbols:
    dc_size = size_category(dc_diff)
    ac = tuple(
        ((run << 4) | size, amplitude_bits(value, size))
        for run, size, value in ac_runlength_encode(list(zz)[1:])
    )
    return BlockSymbols(chroma, dc_size, amplitude_bits(int(dc_diff), dc_size), ac)


def symbols_to_coefficients(blocks: Sequence[BlockSymbols]) -> list[tuple[int, list[int]]]:
    """Inverse of :func:`block_symbols`: per block (dc_diff, 63 AC values)."""
    out = []
    for i, b in enumerate(blocks):
        rl = [(s >> 4, s & 15, amplitude_value(a, s & 15)) for s, a in b.ac]
        out.append((amplitude_value(b.dc_amplitude, b.dc_size), ac_runlength_decode(rl, i)))
    return out


# ---------------------------------------------------------------------------
# Huffman tables
# ---------------------------------------------------------------------------


def huffman_code_lengths(freqs: dict[int, int]) -> dict[int, int]:
    """Optimal (unlimited) code lengths; ties broken by symbol ordinal."""
    symbols = sorted(s for s, f in freqs.items() if f > 0)
    if not symbols:
        return {}
    if len(symbols) == 1:
        return {symbols[0]: 1}
    # heap entries: (weight, tiebreak, members)
    heap = [(freqs[s], s, [s]) for s in symbols]
    heapq.heapify(heap)
    lengths = dict.fromkeys(symbols, 0)
    serial = ALPHABET_SIZE
    while len(heap) > 1:
        w1, _, m1 = heapq.heappop(heap)
        w2, _, m2 = heapq.heappop(heap)
        for s in m1 + m2:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, serial, m1 + m2))
        serial += 1
    return lengths


def limit_code_lengths(lengths: dict[int, int], max_len: int = MAX_CODE_LENGTH) -> dict[int, int]:
    """Apply the T.81 Annex K.3 BITS adjustment so no code exceeds ``max_len``."""
    if not lengths:
        return {}
    longest = max(lengths.values())
    if longest <= max_len:
        return dict(lengths)
    bits = [0] * (longest + 1)
    for n in lengths.values():
        bits[n] += 1
    i = longest
    while i > max_len:
        while bits[i] > 0:
            j = i - 2
            while bits[j] == 0:
                j -= 1
            bits[i] -= 2
            bits[i - 1] += 1
            bits[j + 1] += 2
            bits[j] -= 1
        i -= 1
    order = sorted(lengths, key=lambda s: (lengths[s], s))
    out: dict[int, int] = {}
    pos = 0
    for n in range(1, max_len + 1):
        for _ in range(bits[n]):
            out[order[pos]] = n
            pos += 1
    return out


@dataclass
class HuffmanTable:
    """Canonical prefix code: symbol -> (length, code)."""

    lengths: dict[int, int]
    codes: dict[int, tuple[int, int]] = field(init=False)

    def __post_init__(self) -> None:
        order = sorted(self.lengths, key=lambda s: (self.lengths[s], s))
        self.codes = {}
        code, prev_len = 0, 0
        for s in order:
            n = self.lengths[s]
            if n < 1 or n > MAX_CODE_LENGTH:
                raise ValueError(f"code length {n} for symbol {s} outside [1, {MAX_CODE_LENGTH}]")
            code <<= n - prev_len
            self.codes[s] = (n, code)
            code += 1
            prev_len = n
        if self.kraft_sum() > 1.0:
            raise ValueError(f"code lengths violate the Kraft inequality ({self.kraft_sum()})")
        self.codewords = {format(c, f"0{n}b"): s for s, (n, c) in self.codes.items()}

    @classmethod
    def from_frequencies(cls, freqs: dict[int, int], escape: bool = True) -> "HuffmanTable":
        freqs = {s: int(f) for s, f in freqs.items() if f > 0}
        if escape:
            # pseudo-count 1 keeps one codeword for symbols unseen while fitting
            freqs[ESCAPE] = freqs.get(ESCAPE, 0) + 1
        return cls(limit_code_lengths(huffman_code_lengths(freqs)))

    @classmethod
    def from_bits(cls, bits: Sequence[int], values: Sequence[int]) -> "HuffmanTable":
        """Build from a DHT-style (BITS, HUFFVAL) pair."""
        lengths: dict[int, int] = {}
        it = iter(values)
        for n, count in enumerate(bits, start=1):
            for _ in range(count):
                lengths[next(it)] = n
        table = cls(lengths)
        # DHT order is authoritative: reassign codes in HUFFVAL order
        code, prev_len, codes = 0, 0, {}
        for v in values:
            n = lengths[v]
            code <<= n - prev_len
            codes[v] = (n, code)
            code += 1
            prev_len = n
        table.codes = codes
        table.codewords = {format(c, f"0{n}b"): s for s, (n, c) in codes.items()}
        return table

    def kraft_sum(self) -> float:
        return float(sum(2.0 ** -n for n in self.lengths.values()))

    def is_prefix_free(self) -> bool:
        words = sorted(format(c, f"0{n}b") for n, c in self.codes.values())
        return all(not b.startswith(a) for a, b in zip(words, words[1:]))

    def cost_array(self) -> np.ndarray:
        """Bits spent on each symbol id; unseen symbols pay the escape cost."""
        esc = self.lengths.get(ESCAPE)
        fallback = np.inf if esc is None else esc + ESCAPE_PAYLOAD_BITS
        cost = np.full(ALPHABET_SIZE, fallback)
        for s, n in self.lengths.items():
            cost[s] = n
        return cost

    def encode_symbol(self, symbol: int, out: list[str]) -> None:
        if symbol in self.codes:
            n, c = self.codes[symbol]
            out.append(format(c, f"0{n}b"))
            return
        if ESCAPE not in self.codes:
            raise KeyError(f"symbol {symbol:#04x} has no code and the table has no escape")
        n, c = self.codes[ESCAPE]
        out.append(format(c, f"0{n}b"))
        out.append(format(symbol, f"0{ESCAPE_PAYLOAD_BITS}b"))

    def to_json(self) -> dict:
        return {str(s): n for s, n in sorted(self.lengths.items())}

    @classmethod
    def from_json(cls, doc: dict) -> "HuffmanTable":
        return cls({int(s): int(n) for s, n in doc.items()})


# ITU-T T.81 Annex K.3 default tables
_DC_LUMA_BITS = (0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0)
_DC_CHROMA_BITS = (0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0)
_DC_VALUES = tuple(range(12))
_AC_LUMA_BITS = (0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D)
_AC_LUMA_VALUES = bytes.fromhex(
    "01020300041105122131410613516107227114328191a1082342b1c11552d1f0"
    "2433627282090a161718191a25262728292a3435363738393a434445464748494a"
    "535455565758595a636465666768696a737475767778797a838485868788898a"
    "92939495969798999aa2a3a4a5a6a7a8a9aab2b3b4b5b6b7b8b9bac2c3c4c5c6"
    "c7c8c9cad2d3d4d5d6d7d8d9dae1e2e3e4e5e6e7e8e9eaf1f2f3f4f5f6f7f8f9fa"
)
_AC_CHROMA_BITS = (0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77)
_AC_CHROMA_VALUES = bytes.fromhex(
    "000102031104052131061241510761711322328108144291a1b1c109233352f0"
    "156272d10a162434e125f11718191a262728292a35363738393a434445464748"
    "494a535455565758595a636465666768696a737475767778797a828384858687"
    "88898a92939495969798999aa2a3a4a5a6a7a8a9aab2b3b4b5b6b7b8b9bac2c3"
    "c4c5c6c7c8c9cad2d3d4d5d6d7d8d9dae2e3e4e5e6e7e8e9eaf2f3f4f5f6f7f8f9fa"
)


@dataclass
class HuffmanCodec:
    dc_luma: HuffmanTable
    dc_chroma: HuffmanTable
    ac_luma: HuffmanTable
    ac_chroma: HuffmanTable

    def tables(self) -> dict[str, HuffmanTable]:
        return {
            "dc_luma": self.dc_luma,
            "dc_chroma": self.dc_chroma,
            "ac_luma": self.ac_luma,
            "ac_chroma": self.ac_chroma,
        }

    def dc(self, chroma: bool) -> HuffmanTable:
        return self.dc_chroma if chroma else self.dc_luma

    def ac(self, chroma: bool) -> HuffmanTable:
        return self.ac_chroma if chroma else self.ac_luma

    @classmethod
    def standard(cls) -> "HuffmanCodec":
        return cls(
            HuffmanTable.from_bits(_DC_LUMA_BITS, _DC_VALUES),
            HuffmanTable.from_bits(_DC_CHROMA_BITS, _DC_VALUES),
            HuffmanTable.from_bits(_AC_LUMA_BITS, list(_AC_LUMA_VALUES)),
            HuffmanTable.from_bits(_AC_CHROMA_BITS, list(_AC_CHROMA_VALUES)),
        )

    @classmethod
    def from_counts(cls, counts: "SymbolCounts") -> "HuffmanCodec":
        def fit(arr):
            return HuffmanTable.from_frequencies({i: int(c) for i, c in enumerate(arr) if c})

        return cls(fit(counts.dc_luma), fit(counts.dc_chroma), fit(counts.ac_luma), fit(counts.ac_chroma))

    def to_json(self) -> dict:
        return {k: t.to_json() for k, t in self.tables().items()}

    @classmethod
    def from_json(cls, doc: dict) -> "HuffmanCodec":
        return cls(**{k: HuffmanTable.from_json(doc[k]) for k in ("dc_luma", "dc_chroma", "ac_luma", "ac_chroma")})


# ---------------------------------------------------------------------------
# bit-exact coding
# ---------------------------------------------------------------------------


def huffman_encode(blocks: Sequence[BlockSymbols], codec: HuffmanCodec) -> tuple[bytes, int]:
    """Serialize blocks to a bit string; returns (bytes padded with 1s, bit count)."""
    parts: list[str] = []
    for b in blocks:
        codec.dc(b.chroma).encode_symbol(b.dc_size, parts)
        if b.dc_size:
            parts.append(format(b.dc_amplitude, f"0{b.dc_size}b"))
        ac_table = codec.ac(b.chroma)
        for sym, amp in b.ac:
            ac_table.encode_symbol(sym, parts)
            if sym & 15:
                parts.append(format(amp, f"0{sym & 15}b"))
    bits = "".join(parts)
    nbits = len(bits)
    padded = bits + "1" * (-nbits % 8)
    data = int(padded, 2).to_bytes(len(padded) // 8, "big") if padded else b""
    return data, nbits


class _BitReader:
    def __init__(self, data: bytes, nbits: int):
        self.bits = "".join(format(byte, "08b") for byte in data)[:nbits]
        self.pos = 0

    def read(self, n: int, block: int) -> int:
        if self.pos + n > len(self.bits):
            raise ValueError(f"block {block}: stream truncated at bit offset {self.pos}")
        v = int(self.bits[self.pos : self.pos + n], 2) if n else 0
        self.pos += n
        return v

    def symbol(self, table: HuffmanTable, block: int) -> int:
        start = self.pos
        words = table.codewords
        for n in range(1, MAX_CODE_LENGTH + 1):
            if start + n > len(self.bits):
                raise ValueError(f"block {block}: stream truncated at bit offset {len(self.bits)}")
            sym = words.get(self.bits[start : start + n])
            if sym is not None:
                self.pos = start + n
                if sym == ESCAPE:
                    return self.read(ESCAPE_PAYLOAD_BITS, block)
                return sym
        raise ValueError(f"block {block}: no Huffman code matches at bit offset {start}")


def huffman_decode(
    data: bytes, nbits: int, chroma_flags: Sequence[bool], codec: HuffmanCodec
) -> list[BlockSymbols]:
    """Parse ``len(chroma_flags)`` blocks back into symbols."""
    reader = _BitReader(data, nbits)
    blocks = []
    for i, chroma in enumerate(chroma_flags):
        dc_size = reader.symbol(codec.dc(chroma), i)
        if dc_size > MAX_DC_CATEGORY:
            raise ValueError(f"block {i}: DC category {dc_size} at bit offset {reader.pos}")
        dc_amp = reader.read(dc_size, i)
        ac, filled = [], 0
        while filled < 63:
            sym = reader.symbol(codec.ac(chroma), i)
            size = sym & 15
            amp = reader.read(size, i)
            ac.append((sym, amp))
            if sym == EOB:
                break
            if not size and sym != ZRL:
                raise ValueError(f"block {i}: invalid AC symbol {sym:#04x} at bit offset {reader.pos}")
            filled += (sym >> 4) + 1 if size else 16
            if filled > 63:
                raise ValueError(f"block {i}: AC run overflows block at bit offset {reader.pos}")
        blocks.append(BlockSymbols(chroma, dc_size, dc_amp, tuple(ac)))
    if reader.pos != nbits:
        raise ValueError(f"{nbits - reader.pos} trailing bits after block {len(blocks) - 1}")
    return blocks


def image_symbols(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> list[BlockSymbols]:
    """Symbols for one image given (nblocks, 8, 8) integer coefficients per channel.

    Channels are emitted one after the other (non-interleaved scans).
    """
    out = []
    for chroma, blocks in ((False, y), (True, cb), (True, cr)):
        zz = zigzag_scan(blocks)
        diffs, ac = clamp_coefficients(dc_differential(zz[:, 0]), zz[:, 1:])
        for d, a in zip(diffs, ac):
            out.append(block_symbols(np.r_[0, a], int(d), chroma))
    return out


# ---------------------------------------------------------------------------
# vectorized counting
# ---------------------------------------------------------------------------


@dataclass
class ChannelSymbols:
    """Flattened symbol occurrences for the blocks of one channel.

    Every array of occurrences carries the block index it belongs to, so bits
    can be summed per block (and per image).
    """

    n_images: int
    blocks_per_image: int
    dc_symbol: np.ndarray  # (B,)
    ac_symbol: np.ndarray  # (M,) symbol ids incl. ZRL and EOB
    ac_block: np.ndarray  # (M,)
    ac_position: np.ndarray  # (M,) zigzag position credited with the bits
    ac_amplitude_bits: np.ndarray  # (M,)


def channel_symbols(coeffs: np.ndarray) -> ChannelSymbols:
    """Symbols for (N, nblocks, 8, 8) integer coefficients of one channel."""
    n, nb = coeffs.shape[:2]
    zz = zigzag_scan(coeffs).astype(np.int64)
    diffs, ac = clamp_coefficients(dc_differential(zz[..., 0]), zz[..., 1:])
    diffs = diffs.reshape(-1)
    ac = ac.reshape(n * nb, 63)

    rows, cols = np.nonzero(ac)
    same = np.zeros(rows.shape, dtype=bool)
    same[1:] = rows[1:] == rows[:-1]
    prev = np.where(same, np.r_[-1, cols[:-1]], -1)
    run = cols - prev - 1
    sizes = size_category(ac[rows, cols])
    nz_sym = ((run % 16) << 4) | sizes

    zrl_count = run // 16
    zrl_rows = np.repeat(rows, zrl_count)
    zrl_pos = np.repeat(cols + 1, zrl_count)

    last = np.full(n * nb, -1)
    if rows.size:
        last[rows] = cols  # later (larger) columns overwrite earlier ones
    eob_rows = np.nonzero(last < 62)[0]

    ac_symbol = np.concatenate([nz_sym, np.full(zrl_rows.size, ZRL), np.full(eob_rows.size, EOB)])
    ac_block = np.concatenate([rows, zrl_rows, eob_rows])
    ac_position = np.concatenate([cols + 1, zrl_pos, np.full(eob_rows.size, 63)])
    ac_amp = np.concatenate([sizes, np.zeros(zrl_rows.size + eob_rows.size, dtype=np.int64)])
    return ChannelSymbols(n, nb, size_category(diffs), ac_symbol, ac_block, ac_position, ac_amp)


@dataclass
class SymbolCounts:
    dc_luma: np.ndarray
    dc_chroma: np.ndarray
    ac_luma: np.ndarray
    ac_chroma: np.ndarray

    @classmethod
    def empty(cls) -> "SymbolCounts":
        return cls(*(np.zeros(ALPHABET_SIZE, dtype=np.int64) for _ in range(4)))

    def add(self, syms: ChannelSymbols, chroma: bool) -> None:
        dc = np.bincount(syms.dc_symbol, minlength=ALPHABET_SIZE)
        ac = np.bincount(syms.ac_symbol, minlength=ALPHABET_SIZE)
        if chroma:
            self.dc_chroma += dc
            self.ac_chroma += ac
        else:
            self.dc_luma += dc
            self.ac_luma += ac


@dataclass
class RateReport:
    """Payload bits per image and channel, plus per-frequency attribution."""

    bits: np.ndarray  # (N, 3) for Y, Cb, Cr
    per_frequency: np.ndarray  # (3, 64) bits credited to each zigzag position
    image_ids: list[str] | None = None
    escapes: int = 0

    @property
    def per_image_bits(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    @property
    def total_bits(self) -> float:
        return float(self.per_image_bits.sum())

    @property
    def mean_kb(self) -> float:
        return float(self.per_image_bits.mean() / BITS_PER_KB) if len(self.bits) else 0.0

    @property
    def median_kb(self) -> float:
        return float(np.median(self.per_image_bits) / BITS_PER_KB) if len(self.bits) else 0.0

    def write_csv(self, path: str | Path) -> None:
        ids = self.image_ids or [str(i) for i in range(len(self.bits))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "bits_y", "bits_cb", "bits_cr", "bits_total"])
            for i, row in zip(ids, self.bits):
                w.writerow([i, *(int(b) for b in row), int(row.sum())])


def _iter_coefficients(images, kernels, ct, batch_size):
    for start in range(0, len(images), batch_size):
        yield quantized_coefficients(images[start : start + batch_size], kernels, ct)


def count_symbols(
    images: np.ndarray,
    kernels: CompressionKernels,
    ct: ColorTransform | None = None,
    batch_size: int = 500,
) -> SymbolCounts:
    counts = SymbolCounts.empty()
    for coeffs in _iter_coefficients(images, kernels, ct, batch_size):
        for ch, c in enumerate(coeffs):
            counts.add(channel_symbols(c), chroma=ch > 0)
    return counts


def build_huffman_tables(
    images: np.ndarray,
    kernels: CompressionKernels,
    sample_size: int | None = 50_000,
    seed: int = 0,
    ct: ColorTransform | None = None,
) -> HuffmanCodec:
    """Fit the four tables on (a seeded sample of) a training corpus."""
    if len(images) == 0:
        raise ValueError("cannot build Huffman tables from an empty corpus")
    kernels.validate()
    if sample_size is not None and sample_size < len(images):
        idx = np.sort(np.random.default_rng(seed).choice(len(images), sample_size, replace=False))
        images = images[idx]
    return HuffmanCodec.from_counts(count_symbols(images, kernels, ct))


def measure_rate(
    images: np.ndarray,
    kernels: CompressionKernels,
    codec: HuffmanCodec,
    ct: ColorTransform | None = None,
    image_ids: list[str] | None = None,
    batch_size: int = 500,
) -> RateReport:
    """Entropy-coded payload size of every image (headers excluded)."""
    if len(images) == 0:
        raise ValueError("cannot measure the rate of an empty corpus")
    kernels.validate()
    costs = {
        False: (codec.dc_luma.cost_array(), codec.ac_luma.cost_array()),
        True: (codec.dc_chroma.cost_array(), codec.ac_chroma.cost_array()),
    }
    bits = np.zeros((len(images), 3))
    per_freq = np.zeros((3, 64))
    escapes = 0
    offset = 0
    for coeffs in _iter_coefficients(images, kernels, ct, batch_size):
        n = coeffs[0].shape[0]
        for ch, c in enumerate(coeffs):
            dc_cost, ac_cost = costs[ch > 0]
            s = channel_symbols(c)
            dc_bits = dc_cost[s.dc_symbol] + s.dc_symbol
            ac_bits = ac_cost[s.ac_symbol] + s.ac_amplitude_bits
            escapes += int(np.sum(dc_cost[s.dc_symbol] > MAX_CODE_LENGTH))
            escapes += int(np.sum(ac_cost[s.ac_symbol] > MAX_CODE_LENGTH))
            block_bits = dc_bits + np.bincount(s.ac_block, weights=ac_bits, minlength=n * s.blocks_per_image)
            bits[offset : offset + n, ch] = block_bits.reshape(n, s.blocks_per_image).sum(axis=1)
            per_freq[ch, 0] += dc_bits.sum()
            per_freq[ch] += np.bincount(s.ac_position, weights=ac_bits, minlength=64)
        offset += n
    if not np.all(np.isfinite(bits)):
        raise ValueError("codec cannot represent some symbols and has no escape code")
    if escapes:
        logger.warning("%d symbols were escape-coded", escapes)
    return RateReport(bits, per_freq, image_ids, escapes)


# ---------------------------------------------------------------------------
# Q-table export
# ---------------------------------------------------------------------------


def kernels_to_qtables(kernels: CompressionKernels | np.ndarray) -> np.ndarray:
    """Q = clamp(round(1/q), 1, 255), with q < 1/255 (including 0) mapped to 255."""
    q = kernels.as_array() if isinstance(kernels, CompressionKernels) else np.asarray(kernels, float)
    with np.errstate(divide="ignore"):
        inv = np.where(q >= 1.0 / 255.0, 1.0 / np.maximum(q, 1e-300), 255.0)
    return np.clip(np.floor(inv + 0.5), 1, 255).astype(np.int64)


def export_qtables(kernels: CompressionKernels, metadata: dict | None = None) -> dict:
    y, cb, cr = kernels_to_qtables(kernels)
    return {
        "y_qtable": y.tolist(),
        "cb_qtable": cb.tolist(),
        "cr_qtable": cr.tolist(),
        "kernels": [t.tolist() for t in kernels.as_array()],
        "metadata": dict(metadata or {}),
    }


def write_qtables(path: str | Path, kernels: CompressionKernels, metadata: dict | None = None) -> dict:
    doc = export_qtables(kernels, metadata)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def load_qtables(path: str | Path) -> CompressionKernels:
    """Kernels equal to the reciprocals of the exported integer tables."""
    doc = json.loads(Path(path).read_text())
    return CompressionKernels.from_qtables([doc["y_qtable"], doc["cb_qtable"], doc["cr_qtable"]])
