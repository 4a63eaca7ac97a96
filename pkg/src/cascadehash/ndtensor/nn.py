"""Convolution, pooling, bilinear sampling and classification loss primitives."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ConfigurationError, ShapeError, Tensor, as_tensor, make_node


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an N x Cin x H x W batch with a Cout x Cin x kh x kw kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # im2col rows ordered (N, Ho, Wo), columns (C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    k2 = kernel.data.reshape(cout, c * kh * kw)
    out = np.ascontiguousarray((cols @ k2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # scatter each (i, j) kernel tap back onto the padded input, channels last
            kt = kernel.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * c)
            dcols = (g2 @ kt).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c))
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + hs : stride, j : j + ws : stride] += dcols[:, :, :, i, j]
            gx = np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2))
        return gx, gk

    return make_node(out, "conv2d", (x, kernel), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element of the window."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    taps = [x.data[:, :, di::2, dj::2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    # first tap (row-major window order) attaining the max receives the gradient
    masks, taken = [], np.zeros(out.shape, dtype=bool)
    for t in taps:
        m = (t == out) & ~taken
        taken |= m
        masks.append(m)

    def bw(g):
        gx = np.zeros((n, c, h, w))
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, :, di::2, dj::2] = g * m
        return (gx,)

    return make_node(out, "maxpool2", (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), bw)


def _axis_coords(coord: np.ndarray, size: int):
    """Map [-1, 1] coordinates to pixel space (align-corners) with border clamping."""
    if size == 1:
        zeros = np.zeros(coord.shape, dtype=np.intp)
        return zeros, zeros, np.zeros(coord.shape), np.zeros(coord.shape)
    pix = (coord + 1.0) * 0.5 * (size - 1)
    inside = (pix > 0) & (pix < size - 1)
    pix = np.clip(pix, 0.0, size - 1)
    i0 = np.minimum(np.floor(pix).astype(np.intp), size - 2)
    frac = pix - i0
    # d(pix)/d(coord), zero where the border clamp is active
    dpix = np.where(inside, 0.5 * (size - 1), 0.0)
    return i0, i0 + 1, frac, dpix


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear resampling of ``x`` at normalized (x, y) positions given by ``grid``.

    ``grid[..., 0]`` indexes width and ``grid[..., 1]`` height; -1 and +1 are
    the centers of the first and last pixels.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    n, c, h, w = x.shape
    if grid.ndim != 4 or grid.shape[0] != n or grid.shape[3] != 2:
        raise ShapeError(f"grid of shape {grid.shape} does not match input {x.shape}")
    ho, wo = grid.shape[1], grid.shape[2]
    gx, gy = grid.data[..., 0], grid.data[..., 1]
    x0, x1, wx, dxp = _axis_coords(gx, w)
    y0, y1, wy, dyp = _axis_coords(gy, h)
    if w == 1:
        x1 = x0
    if h == 1:
        y1 = y0

    img = x.data.transpose(0, 2, 3, 1)  # N, H, W, C
    nidx = np.arange(n)[:, None, None]
    v00 = img[nidx, y0, x0]
    v01 = img[nidx, y0, x1]
    v10 = img[nidx, y1, x0]
    v11 = img[nidx, y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    out = (1 - wy_) * ((1 - wx_) * v00 + wx_ * v01) + wy_ * ((1 - wx_) * v10 + wx_ * v11)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gl = g.transpose(0, 2, 3, 1)  # N, Ho, Wo, C
        gin = None
        if x.requires_grad:
            acc = np.zeros((n, h, w, c))
            nn = np.broadcast_to(nidx, (n, ho, wo))
            for yi, xi, wgt in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x1, (1 - wy) * wx),
                (y1, x0, wy * (1 - wx)),
                (y1, x1, wy * wx),
            ):
                np.add.at(acc, (nn, yi, xi), gl * wgt[..., None])
            gin = acc.transpose(0, 3, 1, 2)
        ggrid = None
        if grid.requires_grad:
            d_ix = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
            d_iy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
            ggrid = np.stack(
                [(gl * d_ix).sum(-1) * dxp, (gl * d_iy).sum(-1) * dyp], axis=-1
            )
        return gin, ggrid

    return make_node(out, "grid_sample", (x, grid), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)).

    Targets may be smoothed distributions but every row must sum to one.
    """
    logits = as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and targets {t.shape} must be equal N x l")
    rows = t.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(rows - 1.0)))
        raise ValueError(f"target row {bad} sums to {rows[bad]!r}, expected 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logsm = z - lse
    nrows = logits.shape[0]
    loss = -(t * logsm).sum() / nrows

    def bw(g):
        sm = np.exp(logsm)
        return (g * (sm * rows[:, None] - t) / nrows,)

    return make_node(np.asarray(loss), "softmax_cross_entropy", (logits,), bw)
