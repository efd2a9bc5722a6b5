"""Bernoulli mixture models: likelihood, EM fitting and AIC-based selection of K.

All likelihood arithmetic is done in the log domain.  A component's pmf over a
binary vector x is

    log P(x | p_k) = sum_i x_i log p_ki + (1 - x_i) log(1 - p_ki)

and the mixture combines components with log-sum-exp over log pi_k + log P(x | p_k).
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import BadModelFile, DimensionMismatch, EmptyDataset, FitError

log = logging.getLogger(__name__)

EPS = 1e-6
EMPTY_COMPONENT = 1e-8
INIT_LOW, INIT_HIGH = 0.25, 0.75

MODEL_MAGIC = b"BMIX"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class BernoulliMixture:
    pi: np.ndarray  # (K,)
    p: np.ndarray  # (K, D), entries in [EPS, 1 - EPS]

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2 or pi.shape != (p.shape[0],):
            raise DimensionMismatch(f"pi shape {pi.shape} incompatible with p shape {p.shape}")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "p", p)

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def D(self) -> int:
        return self.p.shape[1]

    def permuted(self, order) -> "BernoulliMixture":
        order = np.asarray(order)
        return BernoulliMixture(self.pi[order], self.p[order])


@dataclass
class FitResult:
    model: BernoulliMixture
    loglik_trace: list
    iterations: int
    converged: bool
    seed: int

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


@dataclass
class EMConfig:
    max_iter: int = 200
    rel_tol: float = 1e-6


@dataclass
class SelectionEntry:
    k: int
    seed: int
    loglik: float
    eta: int
    aic_score: float


@dataclass
class ModelSelectionReport:
    entries: list
    best_k: int
    selection: str = "best"
    fits: dict = field(default_factory=dict, repr=False)  # (k, seed) -> FitResult

    def scores_by_k(self) -> dict:
        out = {}
        for e in self.entries:
            out.setdefault(e.k, []).append(e.aic_score)
        return out

    def best_fit(self) -> FitResult:
        """Highest-likelihood fit among the seeds run at ``best_k``."""
        candidates = [f for (k, _), f in self.fits.items() if k == self.best_k]
        return max(candidates, key=lambda f: f.loglik)


def _as_binary(X) -> np.ndarray:
    X = getattr(X, "rows", X)
    return np.asarray(X, dtype=np.float64)


def _check_dim(X: np.ndarray, D: int):
    if X.ndim != 2 or X.shape[1] != D:
        raise DimensionMismatch(f"data has shape {X.shape}, model dimension is {D}")


def component_log_pmf(x, p_k) -> float:
    x = np.asarray(x, dtype=np.float64)
    p_k = np.asarray(p_k, dtype=np.float64)
    if x.shape != p_k.shape:
        raise DimensionMismatch(f"x has shape {x.shape}, p_k has shape {p_k.shape}")
    return float(x @ np.log(p_k) + (1.0 - x) @ np.log1p(-p_k))


def _component_log_probs(X: np.ndarray, model: BernoulliMixture) -> np.ndarray:
    # x.log p + (1-x).log(1-p) == x.(log p - log(1-p)) + sum log(1-p): one matmul
    log_p = np.log(model.p)
    log_q = np.log1p(-model.p)
    return X @ (log_p - log_q).T + log_q.sum(axis=1)


def _joint_log_probs(X: np.ndarray, model: BernoulliMixture) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.pi)
    return _component_log_probs(X, model) + log_pi  # pi_k = 0 -> -inf, drops out of the lse


def mixture_log_pmf(x, model: BernoulliMixture) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.D,):
        raise DimensionMismatch(f"x has shape {x.shape}, model dimension is {model.D}")
    return float(logsumexp(_joint_log_probs(x[None, :], model), axis=1)[0])


def log_likelihood(X, model: BernoulliMixture) -> float:
    X = _as_binary(X)
    if X.shape[0] == 0:
        return 0.0
    _check_dim(X, model.D)
    return float(np.sum(logsumexp(_joint_log_probs(X, model), axis=1)))


def _e_step(X: np.ndarray, model: BernoulliMixture) -> tuple[np.ndarray, float]:
    joint = _joint_log_probs(X, model)
    norm = logsumexp(joint, axis=1, keepdims=True)
    gamma = np.exp(joint - norm)
    gamma /= gamma.sum(axis=1, keepdims=True)
    return gamma, float(norm.sum())


def e_step(X, model: BernoulliMixture) -> np.ndarray:
    """Posterior membership probabilities, one row per digit."""
    X = _as_binary(X)
    _check_dim(X, model.D)
    return _e_step(X, model)[0]


def random_parameters(rng: np.random.Generator, K: int, D: int) -> np.ndarray:
    return rng.uniform(INIT_LOW, INIT_HIGH, size=(K, D))


def m_step(X, gamma, rng: np.random.Generator | None = None) -> BernoulliMixture:
    """Weighted maximum-likelihood update, clamped to [EPS, 1 - EPS].

    A component whose total responsibility drops below 1e-8 is re-seeded from
    the uniform initializer with weight 1/N before pi is renormalized.
    """
    X = _as_binary(X)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{gamma.shape[0]} responsibility rows for {X.shape[0]} digits")
    N = X.shape[0]
    Nk = gamma.sum(axis=0)
    empty = Nk < EMPTY_COMPONENT
    safe = np.where(empty, 1.0, Nk)
    p = (gamma.T @ X) / safe[:, None]
    pi = Nk / N
    if empty.any():
        rng = rng if rng is not None else np.random.default_rng(0)
        log.debug("re-seeding %d empty components", int(empty.sum()))
        p[empty] = random_parameters(rng, int(empty.sum()), X.shape[1])
        pi[empty] = 1.0 / N
    pi = pi / pi.sum()
    return BernoulliMixture(pi, np.clip(p, EPS, 1.0 - EPS))


def init_model(K: int, D: int, seed) -> tuple[BernoulliMixture, np.random.Generator]:
    rng = np.random.default_rng(seed)
    return BernoulliMixture(np.full(K, 1.0 / K), random_parameters(rng, K, D)), rng


def fit_em(X, K: int, seed=0, config: EMConfig | None = None) -> FitResult:
    config = config or EMConfig()
    X = _as_binary(X)
    N = X.shape[0]
    if N == 0:
        raise EmptyDataset("cannot fit a mixture to zero digits")
    if K < 1:
        raise ValueError("K must be at least 1")
    if N < K:
        warnings.warn(f"fitting K={K} components to only N={N} digits", stacklevel=2)

    model, rng = init_model(K, X.shape[1], seed)
    gamma, ll = _e_step(X, model)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        model = m_step(X, gamma, rng)
        gamma, ll = _e_step(X, model)
        prev = trace[-1]
        trace.append(ll)
        if ll - prev < config.rel_tol * abs(prev):
            converged = True
            break
    log.debug("K=%d seed=%s: %d iterations, loglik %.3f", K, seed, it, trace[-1])
    return FitResult(model, trace, it, converged, seed)


def free_parameters(K: int, D: int) -> int:
    if K < 1 or D < 1:
        raise ValueError("K and D must be positive")
    return K * (D + 1) - 1


def aic_score(loglik: float, eta: int) -> float:
    """2 loglik - 2 eta; larger is better."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return 2.0 * loglik - 2.0 * eta


def loglik_in_base(loglik: float, log_base: float | None) -> float:
    """Convert a natural-log likelihood to ``log_base`` (None means natural log)."""
    if log_base is None or log_base == np.e:
        return float(loglik)
    return float(loglik) / np.log(log_base)


def select_k(X, k_grid, seeds, config: EMConfig | None = None, selection: str = "best",
             log_base: float | None = 10.0, keep_fits: bool = True) -> ModelSelectionReport:
    """Fit every (K, seed) pair and pick the K with the highest AIC score.

    ``selection="best"`` keeps the highest score among the seeds at each K,
    the usual multi-start reading.  ``"mean"`` averages over seeds instead,
    which lets a single restart stuck in a merged-cluster optimum sink an
    otherwise correct K.  Entries carry the log-likelihood in ``log_base``
    (decimal by default, None for natural log), and the score is computed from
    that value, so ``aic_score == 2 * loglik - 2 * eta`` holds per entry.
    """
    k_grid, seeds = list(k_grid), list(seeds)
    if not k_grid or not seeds:
        raise ValueError("k_grid and seeds must be non-empty")
    if selection not in ("mean", "best"):
        raise ValueError(f"unknown selection rule {selection!r}")
    X = _as_binary(X)
    entries, fits = [], {}
    for k in k_grid:
        eta = free_parameters(k, X.shape[1])
        for seed in seeds:
            try:
                fit = fit_em(X, k, seed, config)
            except Exception as exc:
                raise FitError(k, seed, exc) from exc
            ll = loglik_in_base(fit.loglik, log_base)
            entries.append(SelectionEntry(k, seed, ll, eta, aic_score(ll, eta)))
            if keep_fits:
                fits[(k, seed)] = fit
            log.info("K=%d seed=%s loglik=%.1f aic_score=%.1f", k, seed, ll,
                     entries[-1].aic_score)
    report = ModelSelectionReport(entries, best_k=k_grid[0], selection=selection, fits=fits)
    reduce = np.mean if selection == "mean" else np.max
    scores = report.scores_by_k()
    report.best_k = max(k_grid, key=lambda k: (reduce(scores[k]), -k_grid.index(k)))
    return report


# -- serialization ---------------------------------------------------------
#
# Little-endian flat layout:
#   4s  magic "BMIX"
#   u32 version, u32 K, u32 D
#   f64[K]    pi
#   f64[K*D]  p, row-major

_HEADER = struct.Struct("<4sIII")


def serialize_model(model: BernoulliMixture) -> bytes:
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.K, model.D)
    return header + model.pi.astype("<f8").tobytes() + model.p.astype("<f8").tobytes()


def parse_model(data: bytes) -> BernoulliMixture:
    if len(data) < _HEADER.size:
        raise BadModelFile("model file shorter than its header")
    magic, version, K, D = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise BadModelFile(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise BadModelFile(f"unsupported model version {version}")
    expected = _HEADER.size + 8 * (K + K * D)
    if len(data) != expected:
        raise BadModelFile(f"expected {expected} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return BernoulliMixture(body[:K].astype(np.float64), body[K:].reshape(K, D).astype(np.float64))


def save_model(path, model: BernoulliMixture) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> BernoulliMixture:
    return parse_model(Path(path).read_bytes())
