"""Attention maps from deep features and saliency-driven non-uniform resampling ("zooming").

The zoom grid is separable: each axis is warped by the inverse CDF of the
saliency marginal along that axis.  That keeps grids monotone and fold-free
and always spans the full field of view.  Nothing here is differentiated;
the zoomed image is consumed as augmented input data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndtensor as nt

DEFAULT_RHO = 0.25
DEFAULT_EPS = 1e-3


@dataclass
class SamplingGrid:
    coords: np.ndarray  # H' x W' x 2, (x, y) in [-1, 1]
    center: tuple  # (row, col) of the Gaussian peak
    std: float

    @property
    def shape(self) -> tuple:
        return self.coords.shape[:2]


def identity_coords(h: int, w: int) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def identity_grid(h: int, w: int) -> SamplingGrid:
    return SamplingGrid(identity_coords(h, w), (0, 0), 0.0)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, nt.Tensor) else np.asarray(x, dtype=np.float64)


def bilinear_resize(maps: np.ndarray, size: tuple) -> np.ndarray:
    """Align-corners bilinear resize of N x C x h x w arrays to N x C x H x W."""
    n = maps.shape[0]
    grid = np.broadcast_to(identity_coords(*size), (n, size[0], size[1], 2))
    return nt.grid_sample(nt.Tensor(maps), nt.Tensor(grid.copy())).data


def attention_from_features(x_top, out_size: tuple) -> np.ndarray:
    """Channel sum of ReLU(top features), bilinearly upsampled; returns N x H x W."""
    x = _as_array(x_top)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError(f"attention needs N x C x h x w features with h, w >= 2, got {x.shape}")
    a = np.maximum(x, 0.0).sum(axis=1, keepdims=True)
    return bilinear_resize(a, tuple(out_size))[:, 0]


def normalize_attention(a: np.ndarray) -> np.ndarray:
    """Divide each H x W map by its maximum; all-zero maps pass through unchanged."""
    a = np.asarray(a, dtype=np.float64)
    peak = a.max(axis=(-2, -1), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, a / safe, a)


def build_saliency(a_star: np.ndarray, rho: float = DEFAULT_RHO) -> tuple[np.ndarray, tuple, float]:
    """Weight a normalized H x W attention map by a Gaussian centred on its maximum.

    Returns ``(saliency, (row, col), std)``; the saliency is rescaled to peak 1.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    a = np.asarray(a_star, dtype=np.float64)
    h, w = a.shape
    r, c = divmod(int(np.argmax(a)), w)
    std = rho * min(h, w)
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    g = np.exp(-((ii - r) ** 2 + (jj - c) ** 2) / (2.0 * std * std))
    s = a * g
    peak = s.max()
    if peak > 0:
        s = s / peak
    return s, (r, c), std


def _inverse_cdf(mass: np.ndarray, n_out: int) -> np.ndarray:
    """Positions in [-1, 1] at ``n_out`` uniform quantiles of a piecewise-linear CDF.

    Knots sit at the pixel centres; the interval between centres i and i+1
    carries the average mass of its two endpoints, so a flat marginal gives
    a linear CDF and hence the identity sampling.
    """
    n = mass.size
    if n == 1:
        return np.zeros(n_out)
    knots = np.linspace(-1.0, 1.0, n)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (mass[:-1] + mass[1:]))])
    cdf = cdf / cdf[-1]
    q = np.linspace(0.0, 1.0, n_out)
    pos = np.interp(q, cdf, knots)
    pos[0], pos[-1] = -1.0, 1.0
    return pos


def grid_from_saliency(s: np.ndarray, out: tuple, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Separable inverse-CDF sampling grid (H' x W' x 2) from an H x W saliency."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    s = np.asarray(s, dtype=np.float64)
    row_mass = s.sum(axis=1) + eps
    col_mass = s.sum(axis=0) + eps
    ys = _inverse_cdf(row_mass / row_mass.sum(), out[0])
    xs = _inverse_cdf(col_mass / col_mass.sum(), out[1])
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def sampling_grid(
    attention: np.ndarray, out: tuple, rho: float = DEFAULT_RHO, eps: float = DEFAULT_EPS
) -> tuple[SamplingGrid, np.ndarray]:
    """Normalize one H x W attention map and turn it into a zoom grid; returns (grid, saliency)."""
    a_star = normalize_attention(attention)
    if not np.any(a_star > 0):
        return identity_grid(*out), a_star
    s, center, std = build_saliency(a_star, rho)
    return SamplingGrid(grid_from_saliency(s, out, eps), center, std), s


def zoom_image(image, grids) -> np.ndarray:
    """Resample N x C x H x W images with one grid per image (or one shared grid)."""
    img = _as_array(image)
    if isinstance(grids, SamplingGrid):
        grids = [grids] * img.shape[0]
    coords = np.stack([g.coords if isinstance(g, SamplingGrid) else np.asarray(g) for g in grids])
    if coords.shape[0] != img.shape[0]:
        raise ValueError(f"{coords.shape[0]} grids for {img.shape[0]} images")
    return nt.grid_sample(nt.Tensor(img), nt.Tensor(coords)).data


def attention_zoom(image, x_top, rho: float = DEFAULT_RHO, eps: float = DEFAULT_EPS):
    """Zoom each image toward the peak of its own top-stage attention.

    Returns ``(zoomed, grids, saliencies)``.
    """
    img = _as_array(image)
    size = img.shape[2:]
    att = attention_from_features(x_top, size)
    grids, sal = [], []
    for a in att:
        g, s = sampling_grid(a, size, rho, eps)
        grids.append(g)
        sal.append(s)
    return zoom_image(img, grids), grids, np.stack(sal)


def write_pgm(path, values: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Write a 2-d array as an 8-bit binary PGM, linearly mapping [lo, hi] to [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {v.shape}")
    lo = v.min() if lo is None else lo
    hi = v.max() if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    px = np.clip(np.rint((v - lo) / span * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + px.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
