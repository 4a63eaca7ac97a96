"""Alternating minimization of ||Y - D E||^2 + sigma ||C - O E||^2 over proxies,
relaxed codes, an orthogonal rotation and binary codes.

Shapes follow the column-per-sample convention: Y is l x n (one-hot
columns), D is l x k, E is k x n, O is k x k and C is k x n over {-1, +1}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fileio import FormatError, decode_container, encode_container
from .ndtensor import solve_spd, svd_small
from .retrieval import pack_signs

logger = logging.getLogger(__name__)

PROXY_RIDGE = 1e-6
CODES_KIND = "codes"


@dataclass(frozen=True)
class SolverConfig:
    sigma: float = 1.0
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError(f"invalid solver config {self}")


@dataclass
class SolverState:
    D: np.ndarray
    E: np.ndarray
    O: np.ndarray
    C: np.ndarray


@dataclass
class SolveResult:
    C: np.ndarray
    D: np.ndarray
    trace: list = field(default_factory=list)
    state: SolverState | None = None

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def labels_to_onehot(labels, num_classes: int | None = None) -> np.ndarray:
    """Class ids (length n) -> l x n one-hot label matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    l = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= l:
        raise ValueError(f"labels outside [0, {l})")
    y = np.zeros((l, labels.size))
    y[labels, np.arange(labels.size)] = 1.0
    return y


def check_label_matrix(y: np.ndarray) -> None:
    y = np.asarray(y)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=0) == 1):
        raise ValueError("label matrix columns must be one-hot")


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(x >= 0, 1.0, -1.0)


def _unique_columns(*mats: np.ndarray):
    """Unique columns of the row-stacked matrices, plus the inverse index."""
    stacked = np.vstack(mats)
    uniq, inverse = np.unique(stacked.T, axis=0, return_inverse=True)
    return uniq.T, inverse.reshape(-1)


def label_projection(k: int, l: int, seed: int) -> np.ndarray:
    """Seeded k x l random +-1 matrix whose columns are pairwise distinct and non-antipodal
    whenever 2^(k-1) >= l permits it."""
    rng = np.random.default_rng(seed)
    p = np.empty((k, l))
    distinct = k < 63 and 2 ** (k - 1) >= l
    used: set[bytes] = set()
    for j in range(l):
        while True:
            col = rng.choice([-1.0, 1.0], size=k)
            if not distinct or (col.tobytes() not in used and (-col).tobytes() not in used):
                break
        used.add(col.tobytes())
        p[:, j] = col
    return p


def objective(y, d, e, o, c, sigma: float) -> float:
    r1 = y - d @ e
    r2 = c - o @ e
    return float(np.sum(r1 * r1) + sigma * np.sum(r2 * r2))


def update_proxies(y: np.ndarray, e: np.ndarray, ridge: float = PROXY_RIDGE) -> np.ndarray:
    """D = Y E^T (E E^T + ridge I)^-1."""
    k = e.shape[0]
    gram = e @ e.T + ridge * np.eye(k)
    return solve_spd(gram, e @ y.T).T


def update_relaxed(y, d, o, c, sigma: float) -> np.ndarray:
    """E = (D^T D + sigma I)^-1 (D^T Y + sigma O^T C), evaluated once per distinct (y_i, c_i)."""
    k = d.shape[1]
    l = y.shape[0]
    cols, inverse = _unique_columns(y, c)
    yu, cu = cols[:l], cols[l:]
    rhs = d.T @ yu + sigma * (o.T @ cu)
    eu = solve_spd(d.T @ d + sigma * np.eye(k), rhs)
    return eu[:, inverse]


def update_rotation(c: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes: with C E^T = U S V^T, O = U V^T minimizes ||C - O E||_F."""
    u, _, v = svd_small(c @ e.T)
    return u @ v.T


def update_codes(o: np.ndarray, e: np.ndarray) -> np.ndarray:
    """C = sign(O E), evaluated once per distinct column of E."""
    eu, inverse = _unique_columns(e)
    return sign(o @ eu)[:, inverse]


def init_solver(y: np.ndarray, k: int, config: SolverConfig) -> SolverState:
    if k < 1:
        raise ValueError("k must be >= 1")
    check_label_matrix(y)
    l = y.shape[0]
    p = label_projection(k, l, config.seed)
    c = sign(p @ y)
    e = c.copy()
    o = np.eye(k)
    d = update_proxies(y, e)
    return SolverState(d, e, o, c)


def step(y: np.ndarray, state: SolverState, sigma: float, on_step=None) -> SolverState:
    """One D -> E -> O -> C sweep.  ``on_step(name, state)`` observes each block update."""
    state = SolverState(state.D, state.E, state.O, state.C)
    state.D = update_proxies(y, state.E)
    if on_step:
        on_step("D", state)
    state.E = update_relaxed(y, state.D, state.O, state.C, sigma)
    if on_step:
        on_step("E", state)
    state.O = update_rotation(state.C, state.E)
    if on_step:
        on_step("O", state)
    state.C = update_codes(state.O, state.E)
    if on_step:
        on_step("C", state)
    return state


def solve(y: np.ndarray, k: int, config: SolverConfig = SolverConfig(), on_step=None) -> SolveResult:
    """Alternate block updates until the relative objective decrease drops below ``tol``."""
    state = init_solver(y, k, config)
    sigma = config.sigma
    trace = [objective(y, state.D, state.E, state.O, state.C, sigma)]
    for _ in range(config.max_iters):
        state = step(y, state, sigma, on_step)
        trace.append(objective(y, state.D, state.E, state.O, state.C, sigma))
        prev, cur = trace[-2], trace[-1]
        if prev - cur <= config.tol * max(prev, 1e-300):
            break
    logger.debug("code solver: %d iterations, objective %.6g", len(trace) - 1, trace[-1])
    return SolveResult(state.C.copy(), state.D.copy(), trace, state)


# ---------------------------------------------------------------------------
# Bit packing and the codes file
# ---------------------------------------------------------------------------


def pack_codes(c: np.ndarray) -> np.ndarray:
    """k x n matrix over {-1, +1} -> n x ceil(k/64) uint64 words (bit b set iff c[b] = +1)."""
    return pack_signs(np.asarray(c, dtype=np.float64).T)


def unpack_codes(words: np.ndarray, k: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    c = np.empty((k, words.shape[0]))
    for b in range(k):
        bit = (words[:, b // 64] >> np.uint64(b % 64)) & np.uint64(1)
        c[b] = np.where(bit == 1, 1.0, -1.0)
    return c


def encode_codes_file(
    c: np.ndarray,
    labels=None,
    d: np.ndarray | None = None,
    meta: dict | None = None,
) -> bytes:
    k, n = c.shape
    body = {"k": int(k), "n": int(n)}
    body.update(meta or {})
    arrays = {"codes": pack_codes(c)}
    if labels is not None:
        arrays["labels"] = np.asarray(labels, dtype=np.int64)
    if d is not None:
        body["l"] = int(d.shape[0])
        arrays["proxies"] = np.asarray(d, dtype=np.float64)
    return encode_container(CODES_KIND, body, arrays)


def decode_codes_file(blob: bytes):
    """Return ``(C, labels or None, D or None, meta)``."""
    _, meta, arrays = decode_container(blob, CODES_KIND)
    for key in ("k", "n"):
        if not isinstance(meta.get(key), int):
            raise FormatError(f"meta: missing integer field {key!r}")
    k, n = meta["k"], meta["n"]
    if "codes" not in arrays:
        raise FormatError("arrays: missing 'codes'")
    words = arrays["codes"]
    if words.shape != (n, (k + 63) // 64):
        raise FormatError(f"codes: shape {words.shape} inconsistent with k={k}, n={n}")
    labels = arrays.get("labels")
    if labels is not None and labels.shape != (n,):
        raise FormatError(f"labels: shape {labels.shape}, expected ({n},)")
    d = arrays.get("proxies")
    if d is not None and d.shape[1] != k:
        raise FormatError(f"proxies: shape {d.shape} inconsistent with k={k}")
    return unpack_codes(words, k), labels, d, meta
