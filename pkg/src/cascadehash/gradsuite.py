"""Finite-difference checks of every differentiable primitive and of the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ndtensor as nt
from .attention import attention_zoom
from .cascade_net import NetConfig, NetParams, forward_backbone
from .losses import LossWeights, onehot_rows, smooth_labels
from .ndtensor import Tensor, check_gradients

TOLERANCE = 1e-4
STEP = 1e-5

TINY_NET = NetConfig(
    stages=((3, 4), (4, 4), (4, 4)),
    stage_feature_dim=3,
    code_bits=12,
    num_classes=3,
    input_size=(3, 16, 16),
)


def _away_from_zero(rng, shape, margin=0.1):
    """Random values with |v| >= margin so ReLU kinks stay out of the difference stencil."""
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar <out, w>, a generic linear probe of the output."""
    return nt.tsum(nt.mul(out, Tensor(w)))


def _primitive_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list]]:
    cases = {}

    def binary(name, fn, a, b):
        pa, pb = _param(a), _param(b)
        w = rng.normal(size=fn(pa, pb).shape)
        cases[name] = (lambda: _weighted(fn(pa, pb), w), [pa, pb])

    def unary(name, fn, a, out_shape=None):
        pa = _param(a)
        w = rng.normal(size=out_shape if out_shape is not None else pa.shape)
        cases[name] = (lambda: _weighted(fn(pa), w), [pa])

    binary("add", nt.add, rng.normal(size=(3, 4)), rng.normal(size=(4,)))
    binary("sub", nt.sub, rng.normal(size=(3, 1)), rng.normal(size=(3, 4)))
    binary("mul", nt.mul, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    binary("div", nt.div, rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4)))
    binary("matmul", nt.matmul, rng.normal(size=(3, 5)), rng.normal(size=(5, 2)))
    unary("scale", lambda t: nt.scale(t, -2.5), rng.normal(size=(4,)))
    unary("power", lambda t: nt.power(t, 3.0), rng.normal(size=(4,)))
    unary("log", nt.log, rng.uniform(0.5, 2.0, size=(5,)))
    unary("softplus", nt.softplus, rng.normal(size=(5,)) * 3)
    unary("relu", nt.relu, _away_from_zero(rng, (6,)))
    unary("tsum", lambda t: nt.tsum(t, axis=1), rng.normal(size=(3, 4)), (3,))
    unary("mean", lambda t: nt.mean(t, axis=0), rng.normal(size=(3, 4)), (4,))
    unary("reshape", lambda t: nt.reshape(t, (2, 6)), rng.normal(size=(3, 4)), (2, 6))
    unary("transpose", nt.transpose, rng.normal(size=(3, 4)), (4, 3))
    pa, pb = _param(rng.normal(size=(2, 3))), _param(rng.normal(size=(2, 2)))
    wc = rng.normal(size=(2, 5))
    cases["concat"] = (lambda: _weighted(nt.concat([pa, pb], axis=1), wc), [pa, pb])

    x, k = _param(rng.normal(size=(2, 3, 6, 6))), _param(rng.normal(size=(4, 3, 3, 3)))
    wconv = rng.normal(size=(2, 4, 6, 6))
    cases["conv2d"] = (lambda: _weighted(nt.conv2d(x, k, padding=1), wconv), [x, k])
    x2, k2 = _param(rng.normal(size=(1, 2, 7, 7))), _param(rng.normal(size=(3, 2, 3, 3)))
    wconv2 = rng.normal(size=(1, 3, 3, 3))
    cases["conv2d_stride2"] = (lambda: _weighted(nt.conv2d(x2, k2, stride=2), wconv2), [x2, k2])

    # well separated values keep the pooling argmax stable under perturbation
    pool_in = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1
    unary("maxpool2", nt.maxpool2, pool_in, (2, 3, 2, 2))
    unary("global_avg_pool", nt.global_avg_pool, rng.normal(size=(2, 3, 4, 4)), (2, 3))

    # sample points at pixel fractions in [0.2, 0.8] avoid the piecewise-linear seams
    h, w = 5, 6
    cells_x = rng.integers(0, w - 1, size=(2, 3, 4)) + rng.uniform(0.2, 0.8, size=(2, 3, 4))
    cells_y = rng.integers(0, h - 1, size=(2, 3, 4)) + rng.uniform(0.2, 0.8, size=(2, 3, 4))
    grid = np.stack([2 * cells_x / (w - 1) - 1, 2 * cells_y / (h - 1) - 1], axis=-1)
    img, g = _param(rng.normal(size=(2, 2, h, w))), _param(grid)
    wgs = rng.normal(size=(2, 2, 3, 4))
    cases["grid_sample"] = (lambda: _weighted(nt.grid_sample(img, g), wgs), [img, g])

    logits = _param(rng.normal(size=(4, 3)))
    targets = smooth_labels(onehot_rows(rng.integers(0, 3, size=4), 3), 0.1)
    cases["softmax_cross_entropy"] = (lambda: nt.softmax_cross_entropy(logits, targets), [logits])
    return cases


def primitive_errors(seed: int = 0, step: float = STEP) -> dict[str, float]:
    """Relative error per ``primitive/argument``."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, (build, params) in _primitive_cases(rng).items():
        errs = check_gradients(build, params, step)
        for idx, err in errs.items():
            report[f"{name}/{idx}"] = err
    return report


def total_loss_errors(seed: int = 0, step: float = STEP, batch: int = 2) -> dict[str, float]:
    """Relative error of d L_TOTAL / d(every network parameter, raw_a, raw_b) on a tiny network.

    The attention zoom is computed once and held fixed, as in training.
    """
    from .trainer import TrainConfig, compute_losses

    rng = np.random.default_rng(seed)
    cfg = TINY_NET
    params = NetParams.init(cfg, seed=seed)
    # non-zero biases so every path carries gradient
    for name in params.names():
        if name.endswith("bias"):
            params[name].data = rng.normal(scale=0.1, size=params[name].shape)
    weights = LossWeights(alpha=1.3, beta=0.8)
    images = rng.uniform(size=(batch,) + cfg.input_size)
    codes = rng.choice([-1.0, 1.0], size=(batch, cfg.code_bits))
    targets = smooth_labels(onehot_rows(rng.integers(0, cfg.num_classes, size=batch), cfg.num_classes), 0.1)
    maps = forward_backbone(Tensor(images), params)
    zoomed, _, _ = attention_zoom(images, maps[-1].data)
    train_cfg = TrainConfig()

    def build() -> Tensor:
        return compute_losses(images, codes, targets, params, weights, train_cfg, zoomed=zoomed)[0]

    tensors = dict(params.tensors)
    tensors.update(weights.tensors())
    return check_gradients(build, list(tensors.values()), step, names=list(tensors))


def run(seed: int = 0, step: float = STEP) -> dict[str, float]:
    report = {f"primitive:{k}": v for k, v in primitive_errors(seed, step).items()}
    report.update({f"L_TOTAL:{k}": v for k, v in total_loss_errors(seed, step).items()})
    return report
