"""Exact t-SNE for desk-scale embedding maps, plus test-on-atlas overlays."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "OverlayResult",
    "ProjectionResult",
    "TsneConfig",
    "TsneError",
    "conditional_affinities",
    "conditional_probabilities",
    "overlay",
    "tsne",
    "write_projection_csv",
]


class TsneError(RuntimeError):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0
    init: str = "pca"
    max_points: int = 5000

    def __post_init__(self) -> None:
        if self.perplexity <= 0:
            raise ValueError("perplexity must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 250 or self.iterations < self.exaggeration_iters:
            raise ValueError("iterations must be >= 250 and >= exaggeration_iters")
        if self.init not in ("pca", "random"):
            raise ValueError(f"init must be 'pca' or 'random', got {self.init!r}")

    def check_size(self, n: int) -> None:
        if n > self.max_points:
            raise TsneError(f"{n} points exceeds the exact-gradient limit of {self.max_points}")
        if n < 4:
            raise TsneError("t-SNE needs at least 4 points")
        if not self.perplexity < (n - 1) / 3:
            raise ValueError(f"perplexity {self.perplexity} must be < (n-1)/3 = {(n - 1) / 3:.3g} for n={n}")


def _sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the Gram expansion, clipped at 0."""
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def conditional_probabilities(
    vectors,
    perplexity: float,
    tol: float = 1e-5,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional Gaussian neighbour probabilities p(j|i).

    Each row's precision is bisected until its entropy (bits) is within
    ``tol`` of log2(perplexity). Rows whose neighbours are all equidistant are
    uniform for every bandwidth and are returned as such.

    Returns (P_cond, entropy_bits).
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise TsneError("need at least 4 points")
    if not 1.0 <= perplexity < n - 1:
        raise ValueError(f"perplexity must lie in [1, n-1) = [1, {n - 1}), got {perplexity}")
    target = math.log2(perplexity)
    d2 = _sq_dists(x)
    P = np.zeros((n, n))
    H = np.zeros(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        row = row - row.min()
        span = row.max()
        if span <= 1e-12 * max(1.0, float(np.abs(d2[i]).max())):
            p = np.full(n - 1, 1.0 / (n - 1))
            h = math.log2(n - 1)
        else:
            beta = 1.0 / max(float(np.median(row[row > 0])), 1e-300)
            lo, hi = 0.0, math.inf
            for _ in range(max_iter):
                w = np.exp(-beta * row)
                s = w.sum()
                p = w / s
                h = (math.log(s) + beta * float(row @ p)) / math.log(2.0)
                if abs(h - target) <= tol:
                    break
                if h > target:
                    lo = beta
                    beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
                else:
                    hi = beta
                    beta = 0.5 * (beta + lo)
            else:
                raise TsneError(f"perplexity bisection did not converge for point {i} in {max_iter} iterations")
        P[i, np.arange(n) != i] = p
        H[i] = h
    return P, H


def conditional_affinities(vectors, perplexity: float, tol: float = 1e-5) -> np.ndarray:
    """Symmetric joint affinities (p(j|i) + p(i|j)) / 2n; entries sum to 1."""
    P, _ = conditional_probabilities(vectors, perplexity, tol)
    return (P + P.T) / (2.0 * P.shape[0])


@dataclass
class ProjectionResult:
    coords: np.ndarray
    kl_trace: np.ndarray
    config: TsneConfig
    source: np.ndarray | None = field(default=None, repr=False)

    def config_echo(self) -> dict:
        return dataclasses.asdict(self.config)


@dataclass
class OverlayResult:
    coords: np.ndarray
    is_test: np.ndarray
    kl_trace: np.ndarray
    config: TsneConfig


def _plogp(P: np.ndarray) -> float:
    nz = P[P > 0]
    return float(np.sum(nz * np.log(nz)))


def _kl(plogp: float, P: np.ndarray, D: np.ndarray, Z: float, buf: np.ndarray) -> float:
    # log q_ij = -log1p(d_ij) - log Z; P's zero diagonal drops the i == j terms
    np.log1p(D, out=buf)
    return plogp + float(np.vdot(P.ravel(), buf.ravel())) + math.log(Z)


class _Kernel:
    """Student-t kernel over 2-D coordinates, with reusable n x n buffers."""

    def __init__(self, n: int):
        self.D = np.empty((n, n))
        self.num = np.empty((n, n))
        self.tmp = np.empty((n, n))

    def __call__(self, y: np.ndarray) -> float:
        D, num, tmp = self.D, self.num, self.tmp
        np.subtract.outer(y[:, 0], y[:, 0], out=D)
        np.multiply(D, D, out=D)
        np.subtract.outer(y[:, 1], y[:, 1], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        D += tmp
        np.add(D, 1.0, out=num)
        np.reciprocal(num, out=num)
        np.fill_diagonal(num, 0.0)
        return float(num.sum())


def _initial_layout(x: np.ndarray, config: TsneConfig, rng: np.random.Generator) -> np.ndarray:
    if config.init == "pca" and x.shape[1] >= 2:
        centred = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        comps = vt[:2]
        pivot = np.argmax(np.abs(comps), axis=1)
        comps = comps * np.sign(comps[np.arange(2), pivot])[:, None]
        y = centred @ comps.T
        sd = y[:, 0].std()
        return y / sd * 1e-4 if sd > 0 else rng.normal(0.0, 1e-4, size=(x.shape[0], 2))
    return rng.normal(0.0, 1e-4, size=(x.shape[0], 2))


def tsne(vectors, config: TsneConfig | None = None) -> ProjectionResult:
    """Two-dimensional t-SNE by exact-gradient descent.

    ``kl_trace[t]`` is KL(P||Q) after t updates (t = 0..iterations), always
    measured against the un-exaggerated P.
    """
    config = config or TsneConfig()
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be 2-D")
    n = x.shape[0]
    config.check_size(n)
    P = conditional_affinities(x, config.perplexity)
    plogp = _plogp(P)
    rng = np.random.default_rng(config.seed)
    y = _initial_layout(x, config, rng)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = np.empty(config.iterations + 1)

    kernel = _Kernel(n)
    W = np.empty((n, n))

    for t in range(config.iterations):
        if t == config.exaggeration_iters:
            # gains built up under exaggeration overshoot once it is lifted
            update[:] = 0.0
            gains[:] = 1.0
        Z = kernel(y)
        kl[t] = _kl(plogp, P, kernel.D, Z, kernel.tmp)
        exaggeration = config.early_exaggeration if t < config.exaggeration_iters else 1.0
        momentum = config.momentum if t < config.momentum_switch_iter else config.final_momentum
        np.multiply(P, exaggeration, out=W)
        np.divide(kernel.num, Z, out=kernel.tmp)
        W -= kernel.tmp
        W *= kernel.num
        grad = 4.0 * (W.sum(axis=1)[:, None] * y - W @ y)
        gains = np.where(update * grad < 0.0, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - config.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if not np.all(np.isfinite(y)):
            raise TsneError(f"non-finite coordinates at iteration {t}")
    Z = kernel(y)
    kl[-1] = _kl(plogp, P, kernel.D, Z, kernel.tmp)
    if kl[-1] > kl[config.exaggeration_iters]:
        warnings.warn(
            f"final KL {kl[-1]:.4g} exceeds KL at iteration {config.exaggeration_iters} "
            f"({kl[config.exaggeration_iters]:.4g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return ProjectionResult(y, kl, config, x)


def overlay(atlas_result: ProjectionResult, test_vectors, config: TsneConfig | None = None) -> OverlayResult:
    """Jointly re-project atlas and test vectors, flagging the test rows."""
    if atlas_result.source is None:
        raise ValueError("atlas projection does not carry its source vectors")
    atlas_x = atlas_result.source
    test = np.asarray(test_vectors, dtype=np.float64)
    if test.size == 0:
        return OverlayResult(atlas_result.coords.copy(), np.zeros(len(atlas_x), dtype=bool),
                             atlas_result.kl_trace, atlas_result.config)
    if test.ndim != 2 or test.shape[1] != atlas_x.shape[1]:
        raise ValueError(f"dim mismatch: got {test.shape[-1]}, atlas {atlas_x.shape[1]}")
    joint = tsne(np.vstack([atlas_x, test]), config or atlas_result.config)
    flags = np.zeros(joint.coords.shape[0], dtype=bool)
    flags[len(atlas_x):] = True
    return OverlayResult(joint.coords, flags, joint.kl_trace, joint.config)


def write_projection_csv(
    path: str | Path,
    coords: np.ndarray,
    patch_ids: Sequence[str],
    label_ids: Sequence[int],
    is_test: Sequence[bool] | None = None,
) -> None:
    if is_test is None:
        is_test = [False] * len(patch_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "label_id", "is_test", "x", "y"])
        for pid, label, flag, (cx, cy) in zip(patch_ids, label_ids, is_test, coords):
            w.writerow([pid, int(label), int(bool(flag)), repr(float(cx)), repr(float(cy))])
