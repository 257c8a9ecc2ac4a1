"""2-D stochastic neighbor embedding of high-dimensional vectors.

Gaussian input affinities with per-point perplexity calibration by binary
search, symmetrized joint probabilities, Student-t output affinities, and
KL-divergence gradient descent with momentum and early exaggeration.

Pairwise distances are computed from explicit coordinate differences (not
the expanded dot-product identity), so translating every input by a common
vector leaves the affinities, and therefore the embedding, unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-12


class TsneError(ValueError):
    pass


def pairwise_squared_distances(x: np.ndarray) -> np.ndarray:
    """Row-by-row squared Euclidean distances via explicit differences."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = x - x[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def _conditional_probabilities(d2_row: np.ndarray, beta: float) -> np.ndarray:
    p = np.exp(-d2_row * beta)
    total = p.sum()
    if total <= 0:
        p = np.zeros_like(d2_row)
        return p
    return p / total


def _entropy(p: np.ndarray) -> float:
    nz = p[p > EPS]
    return float(-(nz * np.log(nz)).sum())


def _calibrate_row(d2_row: np.ndarray, perplexity: float, tol: float = 1e-5,
                   max_iter: int = 60) -> np.ndarray:
    """Binary-search the Gaussian precision so exp(entropy) hits perplexity."""
    target = np.log(perplexity)
    beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
    p = _conditional_probabilities(d2_row, beta)
    for _ in range(max_iter):
        h = _entropy(p)
        diff = h - target
        if abs(diff) < tol:
            break
        if diff > 0:  # entropy too high -> sharpen
            beta_lo = beta
            beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
        else:
            beta_hi = beta
            beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        p = _conditional_probabilities(d2_row, beta)
    return p


def joint_affinities(vectors: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized input affinity matrix P."""
    n = vectors.shape[0]
    d2 = pairwise_squared_distances(vectors)
    cond = np.zeros((n, n), dtype=np.float64)
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = d2[i][mask[i]]
        cond[i][mask[i]] = _calibrate_row(row, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, EPS)


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


@dataclass
class TsneResult:
    embedding: np.ndarray  # (n, 2)
    initial_kl: float
    final_kl: float


def tsne(
    vectors: np.ndarray,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float | None = None,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    momentum_start: float = 0.5,
    momentum_final: float = 0.8,
    momentum_switch: int = 250,
) -> TsneResult:
    """Project vectors to 2-D. Deterministic for a fixed seed.

    Preconditions: n >= 3 * perplexity and iterations >= 250. Learning rate
    defaults to n / early_exaggeration. KL divergence is reported against
    the unexaggerated affinities at initialization and after the final step.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise TsneError("input must be a 2-D array of row vectors")
    n = x.shape[0]
    if perplexity <= 0 or n < 3 * perplexity:
        raise TsneError(f"perplexity {perplexity} infeasible for n={n} (needs n >= 3*perplexity)")
    if iterations < 250:
        raise TsneError("iterations must be >= 250")

    p = joint_affinities(x, perplexity)
    if learning_rate is None:
        learning_rate = max(n / early_exaggeration, 1.0)
    # Short runs still need unexaggerated iterations to converge.
    exaggeration_iters = min(exaggeration_iters, iterations // 4)
    momentum_switch = min(momentum_switch, exaggeration_iters)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    diag = np.eye(n, dtype=bool)

    def output_affinities(coords):
        d2 = pairwise_squared_distances(coords)
        w = 1.0 / (1.0 + d2)
        w[diag] = 0.0
        q = w / w.sum()
        return np.maximum(q, EPS), w

    q, _ = output_affinities(y)
    initial_kl = _kl_divergence(p, q)

    for it in range(iterations):
        exaggeration = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = momentum_start if it < momentum_switch else momentum_final
        q, w = output_affinities(y)
        coeff = (p * exaggeration - q) * w
        # grad_i = 4 * sum_j coeff_ij (y_i - y_j)
        grad = 4.0 * (coeff.sum(axis=1)[:, None] * y - coeff @ y)
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    q, _ = output_affinities(y)
    final_kl = _kl_divergence(p, q)
    return TsneResult(embedding=y, initial_kl=initial_kl, final_kl=final_kl)
