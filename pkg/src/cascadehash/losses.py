"""Label smoothing, two-branch classification loss, hash regression loss and the
learnable two-task balance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor

WEIGHT_FLOOR = 1e-3
DEFAULT_SMOOTHING = 0.1


def smooth_labels(onehot: np.ndarray, lam: float = DEFAULT_SMOOTHING, num_classes: int | None = None) -> np.ndarray:
    """y (1 - lam) + lam / l for N x l one-hot rows."""
    y = np.asarray(onehot, dtype=np.float64)
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"smoothing factor must be in [0, 1), got {lam}")
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("smooth_labels expects one-hot rows")
    l = y.shape[1] if num_classes is None else num_classes
    if l != y.shape[1]:
        raise ValueError(f"num_classes={l} but rows have {y.shape[1]} entries")
    return y * (1.0 - lam) + lam / l


def onehot_rows(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def classification_loss(logits_org: Tensor, logits_aug: Tensor | None, targets: np.ndarray):
    """Returns ``(L_cls_org, L_cls_aug, L_CLS)`` with L_CLS the mean of the two branches.

    Without an augmented branch the raw-branch loss stands in for both terms.
    """
    l_org = nt.softmax_cross_entropy(logits_org, targets)
    l_aug = nt.softmax_cross_entropy(logits_aug, targets) if logits_aug is not None else l_org
    return l_org, l_aug, nt.scale(nt.add(l_org, l_aug), 0.5)


def hash_regression_loss(h: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of ||c_i - h_i||^2; ``targets`` is N x k over {-1, +1} and never differentiated."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != h.shape:
        raise ValueError(f"code targets {t.shape} do not match hash outputs {h.shape}")
    diff = nt.sub(h, Tensor(t))
    return nt.scale(nt.tsum(nt.mul(diff, diff)), 1.0 / h.shape[0])


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class LossWeights:
    """Learnable task weights alpha = softplus(raw_a) + floor, beta likewise."""

    def __init__(self, alpha: float = 1.0, beta: float = 1.0, floor: float = WEIGHT_FLOOR):
        if alpha <= floor or beta <= floor:
            raise ValueError(f"initial weights must exceed the floor {floor}")
        self.floor = floor
        self.raw_a = Tensor(np.array(_softplus_inv(alpha - floor)), requires_grad=True)
        self.raw_b = Tensor(np.array(_softplus_inv(beta - floor)), requires_grad=True)

    def alpha(self) -> Tensor:
        return nt.add(nt.softplus(self.raw_a), self.floor)

    def beta(self) -> Tensor:
        return nt.add(nt.softplus(self.raw_b), self.floor)

    @property
    def values(self) -> tuple[float, float]:
        f = lambda r: float(np.logaddexp(0.0, r.data)) + self.floor  # noqa: E731
        return f(self.raw_a), f(self.raw_b)

    def tensors(self) -> dict[str, Tensor]:
        return {"loss.raw_a": self.raw_a, "loss.raw_b": self.raw_b}

    @classmethod
    def from_raw(cls, raw_a: float, raw_b: float, floor: float = WEIGHT_FLOOR) -> "LossWeights":
        w = cls(floor=floor)
        w.raw_a.data = np.array(float(raw_a))
        w.raw_b.data = np.array(float(raw_b))
        return w


def total_balanced_loss(l_hash: Tensor, l_cls: Tensor, weights: LossWeights | None = None) -> Tensor:
    """L_HASH / alpha^2 + L_CLS / beta^2 + log(alpha + 1) + log(beta + 1).

    ``weights=None`` gives the fixed baseline L_HASH + L_CLS (alpha = beta = 1,
    regularizer dropped).
    """
    if weights is None:
        return nt.add(l_hash, l_cls)
    a, b = weights.alpha(), weights.beta()
    return nt.add(
        nt.add(nt.div(l_hash, nt.mul(a, a)), nt.div(l_cls, nt.mul(b, b))),
        nt.add(nt.log(nt.add(a, 1.0)), nt.log(nt.add(b, 1.0))),
    )


def balanced_value(l_hash: float, l_cls: float, alpha: float, beta: float) -> float:
    return l_hash / alpha**2 + l_cls / beta**2 + math.log(alpha + 1) + math.log(beta + 1)


def stationary_alpha(loss: float, tol: float = 1e-14) -> float:
    """Positive root of a^3 = 2 L (a + 1): the minimizer of L / a^2 + log(a + 1) in a."""
    if loss <= 0:
        raise ValueError("stationary_alpha needs a positive loss")
    f = lambda a: a**3 - 2.0 * loss * (a + 1.0)  # noqa: E731
    lo, hi = 0.0, 1.0
    while f(hi) < 0:
        hi *= 2.0
    while hi - lo > tol * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class LossBreakdown:
    L_cls_org: float
    L_cls_aug: float
    L_CLS: float
    L_HASH: float
    L_TOTAL: float
    alpha: float
    beta: float

    def reconstruct(self, balanced: bool = True) -> float:
        if not balanced:
            return self.L_HASH + self.L_CLS
        return balanced_value(self.L_HASH, self.L_CLS, self.alpha, self.beta)
