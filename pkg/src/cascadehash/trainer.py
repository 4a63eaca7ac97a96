"""Two-phase training: solve the binary code targets, then fit the network by SGD."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ndtensor as nt
from .attention import DEFAULT_EPS, DEFAULT_RHO, attention_zoom
from .cascade_net import (
    NetConfig,
    NetParams,
    decode_checkpoint,
    encode_checkpoint,
    forward_backbone,
    forward_full,
    hash_projection,
    fuse_global,
    stage_features,
)
from .code_solver import SolverConfig, labels_to_onehot, pack_codes, solve
from .data import Dataset, augment_batch, augment_draw, preprocess_eval
from .fileio import write_jsonl
from .losses import (
    DEFAULT_SMOOTHING,
    LossBreakdown,
    LossWeights,
    classification_loss,
    hash_regression_loss,
    onehot_rows,
    smooth_labels,
    stationary_alpha,
    total_balanced_loss,
)
from .retrieval import EvalReport, evaluate_codes

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "cascadehash.metrics/1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.  Defaults are the full-scale values (batch 128, 150 epochs); see ``desk``."""

    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 0.0003
    seed: int = 0
    smoothing: float = DEFAULT_SMOOTHING
    sigma: float = 1.0
    rho: float = DEFAULT_RHO
    zoom_eps: float = DEFAULT_EPS
    use_cls_org: bool = True
    use_cls_aug: bool = True
    fixed_weights: Optional[tuple] = None  # (alpha, beta) instead of learnable balance
    probe_every: int = 0  # epochs between probe mAP evaluations, 0 = never
    warmup_steps: int = 0  # linear ramp of the learning rate over the first optimizer steps
    balance_init: str = "unit"  # "unit": alpha = beta = 1; "stationary": fitted to the first batch's losses

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr > 0, weight_decay >= 0, epochs >= 0 and batch_size >= 1 required")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.balance_init not in ("unit", "stationary"):
            raise ValueError(f"balance_init must be 'unit' or 'stationary', got {self.balance_init!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale run: 64x64 inputs, batch 32, 30 epochs, ten epochs of warmup on 400 images."""
        base = dict(epochs=30, batch_size=32, lr=0.3, warmup_steps=130, balance_init="stationary")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.fixed_weights is not None:
            d["fixed_weights"] = list(self.fixed_weights)
        return d


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step decay: x0.1 from 50% of the epochs, x0.01 from 75%."""
    if config.epochs and not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch >= 0.75 * config.epochs:
        return config.lr * 0.01
    if epoch >= 0.5 * config.epochs:
        return config.lr * 0.1
    return config.lr


def warmup_scale(step: int, config: TrainConfig) -> float:
    """Factor applied to ``lr_at`` on optimizer step ``step`` (0-based)."""
    if step >= config.warmup_steps:
        return 1.0
    return (step + 1) / config.warmup_steps


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)
    steps: int = 0
    lr: float = 0.0


def sgd_step(
    params: dict,
    state: SGDState,
    lr: float,
    momentum: float,
    weight_decay: float,
    no_decay: frozenset = frozenset(),
) -> None:
    """v <- momentum v + grad + wd param; param <- param - lr v.

    ``params`` maps names to leaf tensors; a missing gradient counts as zero.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.steps}")
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p.data
        v = state.velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v
    state.steps += 1
    state.lr = lr


@dataclass
class FitResult:
    params: NetParams
    weights: LossWeights
    codes: np.ndarray  # k x n_train solver targets (columns follow the train split order)
    proxies: np.ndarray
    log: list
    solver_trace: list
    initial_weights: tuple = (1.0, 1.0)  # (alpha, beta) before the first step

    def checkpoint_bytes(self, train_config: TrainConfig, epoch: int) -> bytes:
        return checkpoint_bytes(self.params, self.weights, train_config, epoch)


def checkpoint_bytes(params: NetParams, weights: LossWeights, train_config: TrainConfig, epoch: int) -> bytes:
    extra = {name: t.data for name, t in weights.tensors().items()}
    meta = {"train_config": train_config.to_dict(), "epoch": epoch, "loss_floor": weights.floor}
    return encode_checkpoint(params, extra, meta)


def load_checkpoint(blob: bytes):
    """Return ``(params, weights, meta)``."""
    params, extra, meta = decode_checkpoint(blob)
    weights = LossWeights.from_raw(
        float(extra.get("loss.raw_a", 0.0)),
        float(extra.get("loss.raw_b", 0.0)),
        meta.get("loss_floor", 1e-3),
    )
    if "loss.raw_a" not in extra:
        weights = LossWeights()
    return params, weights, meta


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def compute_losses(
    images: np.ndarray,
    codes: np.ndarray,
    targets: np.ndarray,
    params: NetParams,
    weights: LossWeights,
    config: TrainConfig,
    zoomed: Optional[np.ndarray] = None,
):
    """Forward one batch and return ``(L_TOTAL tensor, LossBreakdown)``.

    ``codes`` is N x k (targets for the hash head), ``targets`` the smoothed
    N x l class distributions.  When the augmented branch is enabled and
    ``zoomed`` is None, the zoom is built from this forward pass.
    """
    x = nt.Tensor(images)
    maps = forward_backbone(x, params)
    if config.use_cls_aug and zoomed is None:
        zoomed, _, _ = attention_zoom(images, maps[-1].data, config.rho, config.zoom_eps)
    out = forward_full(x, params, zoomed=nt.Tensor(zoomed) if config.use_cls_aug else None, stage_maps=maps)
    l_hash = hash_regression_loss(out.h_global, codes)
    l_org = nt.softmax_cross_entropy(out.logits_org, targets)
    l_aug = nt.softmax_cross_entropy(out.logits_aug, targets) if out.logits_aug is not None else None
    terms = [t for t, on in ((l_org, config.use_cls_org), (l_aug, config.use_cls_aug)) if on]
    if len(terms) == 2:
        _, _, l_cls = classification_loss(out.logits_org, out.logits_aug, targets)
    elif terms:
        l_cls = terms[0]
    else:
        l_cls = None

    if config.fixed_weights is not None:
        a, b = config.fixed_weights
        total = nt.scale(l_hash, 1.0 / a**2)
        if l_cls is not None:
            total = nt.add(total, nt.scale(l_cls, 1.0 / b**2))
        alpha, beta = float(a), float(b)
    elif l_cls is None:
        # hash-only: the classification half of the balance has nothing to weigh
        alpha_t = weights.alpha()
        total = nt.add(nt.div(l_hash, nt.mul(alpha_t, alpha_t)), nt.log(nt.add(alpha_t, 1.0)))
        alpha, beta = weights.values
    else:
        total = total_balanced_loss(l_hash, l_cls, weights)
        alpha, beta = weights.values

    breakdown = LossBreakdown(
        L_cls_org=float(l_org.data),
        L_cls_aug=float(l_aug.data) if l_aug is not None else float("nan"),
        L_CLS=float(l_cls.data) if l_cls is not None else 0.0,
        L_HASH=float(l_hash.data),
        L_TOTAL=float(total.data),
        alpha=alpha,
        beta=beta,
    )
    return total, breakdown


def solve_codes(labels: np.ndarray, num_classes: int, k: int, sigma: float, seed: int, **kw):
    y = labels_to_onehot(labels, num_classes)
    return solve(y, k, SolverConfig(sigma=sigma, seed=seed, **kw))


def encode_images(params: NetParams, images: np.ndarray, batch_size: int = 100, preprocess: bool = True) -> np.ndarray:
    """Pre-sign global hash outputs (N x k) for raw dataset images."""
    out = []
    size = params.config.input_size[1]
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        if preprocess:
            # same 9:8 resize-then-centre-crop ratio at any input size
            x = preprocess_eval(x, resize=size * 9 // 8, out=size)
        maps = forward_backbone(nt.Tensor(x), params)
        feats = stage_features(maps, params)
        out.append(hash_projection(fuse_global(sorted(feats.items())), params).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.code_bits))


def evaluate(params: NetParams, dataset: Dataset, query_split: str = "test", db_split: str = "train") -> EvalReport:
    qx, qy = dataset.subset(query_split)
    dx, dy = dataset.subset(db_split)
    return evaluate_codes(encode_images(params, qx), qy, encode_images(params, dx), dy)


def fit(
    dataset: Dataset,
    net_config: NetConfig,
    train_config: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
    codes: Optional[np.ndarray] = None,
    progress=None,
    standardize: bool = True,
) -> FitResult:
    """Phase 1: binary targets for every training sample.  Phase 2: SGD on the balanced loss.

    ``codes`` (k x n_train, train-split order) skips phase 1 when given.
    ``progress(epoch, record)`` is called after each epoch.  With
    ``standardize`` the network's input statistics are set from the train split.
    """
    cfg = train_config
    train_idx = dataset.indices("train")
    if train_idx.size == 0:
        raise ValueError("dataset has no training samples")
    images = dataset.images[train_idx]
    labels = dataset.labels[train_idx]
    l = dataset.num_classes
    if net_config.num_classes != l:
        raise ValueError(f"network has {net_config.num_classes} classes, dataset {l}")
    k = net_config.code_bits
    if standardize:
        net_config = replace(
            net_config,
            pixel_mean=tuple(images.mean(axis=(0, 2, 3))),
            pixel_std=tuple(np.maximum(images.std(axis=(0, 2, 3)), 1e-3)),
        )

    trace: list = []
    proxies = np.zeros((l, k))
    if codes is None:
        result = solve_codes(labels, l, k, cfg.sigma, cfg.seed)
        codes, proxies, trace = result.C, result.D, result.trace
    if codes.shape != (k, train_idx.size):
        raise ValueError(f"code targets of shape {codes.shape}, expected {(k, train_idx.size)}")
    codes.setflags(write=False)
    code_rows = np.ascontiguousarray(codes.T)
    targets = smooth_labels(onehot_rows(labels, l), cfg.smoothing)

    n = train_idx.size

    def batch_inputs(epoch: int, start: int):
        order = np.random.default_rng([cfg.seed, epoch, 0x5EED]).permutation(n)
        batch = order[start : start + cfg.batch_size]
        draws = [augment_draw(cfg.seed, int(train_idx[i]), epoch) for i in batch]
        return batch, augment_batch(images[batch], draws)

    params = NetParams.init(net_config, seed=cfg.seed)
    weights = LossWeights()
    if cfg.balance_init == "stationary" and cfg.fixed_weights is None and cfg.epochs > 0:
        batch, x = batch_inputs(0, 0)
        _, bd = compute_losses(x, code_rows[batch], targets[batch], params, weights, cfg)
        beta = stationary_alpha(bd.L_CLS) if bd.L_CLS > 0 else 1.0
        weights = LossWeights(alpha=stationary_alpha(bd.L_HASH), beta=beta)
    initial_weights = weights.values
    trainable = dict(params.tensors)
    if cfg.fixed_weights is None:
        trainable.update(weights.tensors())
    no_decay = frozenset(weights.tensors())
    state = SGDState()
    log: list = []

    if metrics_path is not None:
        Path(metrics_path).write_text("")
    if checkpoint_path is not None:
        _atomic_write(checkpoint_path, checkpoint_bytes(params, weights, cfg, 0))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        sums = dict(L_cls_org=0.0, L_cls_aug=0.0, L_CLS=0.0, L_HASH=0.0, L_TOTAL=0.0)
        for start in range(0, n, cfg.batch_size):
            batch, x = batch_inputs(epoch, start)
            for t in trainable.values():
                t.grad = None
            total, bd = compute_losses(x, code_rows[batch], targets[batch], params, weights, cfg)
            nt.backward(total)
            step_lr = lr * warmup_scale(state.steps, cfg)
            sgd_step(trainable, state, step_lr, cfg.momentum, cfg.weight_decay, no_decay)
            for key in sums:
                sums[key] += getattr(bd, key) * len(batch)
        alpha, beta = (cfg.fixed_weights if cfg.fixed_weights is not None else weights.values)
        record = {"schema": METRICS_SCHEMA, "epoch": epoch}
        record.update({key: v / n for key, v in sums.items()})
        if not cfg.use_cls_aug:
            record["L_cls_aug"] = None
        record.update(alpha=float(alpha), beta=float(beta), lr=lr, seconds=time.perf_counter() - t0)
        if cfg.probe_every and ((epoch + 1) % cfg.probe_every == 0 or epoch + 1 == cfg.epochs):
            if dataset.indices("test").size:
                record["probe_map"] = evaluate(params, dataset).map
        log.append(record)
        if metrics_path is not None:
            write_jsonl(metrics_path, [record], append=True)
        if checkpoint_path is not None:
            _atomic_write(checkpoint_path, checkpoint_bytes(params, weights, cfg, epoch + 1))
        logger.info("epoch %d: L_TOTAL %.4f alpha %.3f beta %.3f", epoch, record["L_TOTAL"], alpha, beta)
        if progress:
            progress(epoch, record)

    return FitResult(params, weights, codes, proxies, log, trace, initial_weights)
