"""Independent reference computations used by the tests.

Nothing here imports the package under test except for type plumbing in
``finite_difference``; every oracle is a from-definition implementation or
an external library.
"""

from __future__ import annotations

import io
import math

import numpy as np
from PIL import Image


def naive_dct2(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II by its four-loop definition."""
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            cu = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            cv = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
            s = 0.0
            for x in range(n):
                for y in range(n):
                    s += (
                        block[x, y]
                        * math.cos((2 * x + 1) * u * math.pi / (2 * n))
                        * math.cos((2 * y + 1) * v * math.pi / (2 * n))
                    )
            out[u, v] = cu * cv * s
    return out


def finite_difference(f, arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def optimal_prefix_cost(freqs) -> int:
    """Minimum total bits of any prefix code, via repeated sorted-list merging."""
    w = sorted(f for f in freqs if f > 0)
    if len(w) == 1:
        return w[0]
    cost = 0
    while len(w) > 1:
        a, b = w[0], w[1]
        cost += a + b
        w = sorted(w[2:] + [a + b])
    return cost


def brute_force_lengths(freqs: list[int], max_len: int = 6) -> tuple[int, ...]:
    """Exhaustive search over length vectors satisfying Kraft; returns a cost-minimal one."""
    best, best_cost = None, None
    n = len(freqs)

    def rec(i, lens, kraft):
        nonlocal best, best_cost
        if kraft > 1 + 1e-12:
            return
        if i == n:
            cost = sum(f * l for f, l in zip(freqs, lens))
            if best_cost is None or cost < best_cost:
                best, best_cost = tuple(lens), cost
            return
        for l in range(1, max_len + 1):
            rec(i + 1, lens + [l], kraft + 2.0**-l)

    rec(0, [], 0.0)
    return best


def shannon_entropy(freqs) -> float:
    p = np.asarray([f for f in freqs if f > 0], dtype=np.float64)
    p /= p.sum()
    return float(-(p * np.log2(p)).sum())


def pillow_jpeg(rgb: np.ndarray, quality: int = 50) -> np.ndarray:
    """Round-trip through libjpeg via Pillow with 4:2:0 subsampling and standard tables."""
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="JPEG", quality=quality, subsampling=2)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"))


def psnr_ref(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return 10 * math.log10(255.0**2 / mse)


def natural_images(size: int = 128) -> dict[str, np.ndarray]:
    """Centre crops of scikit-image's bundled RGB photographs."""
    from skimage import data

    out = {}
    for name in ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "retina"):
        img = getattr(data, name)()
        if img.ndim != 3:
            continue
        h, w = img.shape[:2]
        s = min(h, w, size * 2)
        crop = img[(h - s) // 2 : (h - s) // 2 + s, (w - s) // 2 : (w - s) // 2 + s, :3]
        out[name] = np.asarray(Image.fromarray(crop).resize((size, size), Image.BICUBIC))
    return out
