"""Metrics: empirical conditional moments, Gaussian W2 against the exact
posterior, eigen-alignment diagnostics, residual error magnitude, rMSE, and
the raw-vector conditional FID specialization.

Samplers are anything with ``sample(y, n, rng) -> (n, d)``; the affine
generator satisfies this, as do the exact-posterior and prior reference
samplers defined here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .gaussian_world import ConditionalOracle, GaussianDist, GaussianPrior, w2_gaussian


class Sampler(Protocol):
    def sample(self, y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray: ...


class ExactPosteriorSampler:
    """Reference sampler drawing from the analytic posterior."""

    def __init__(self, oracle: ConditionalOracle):
        self.oracle = oracle
        self._zero_mean = GaussianDist(mean=np.zeros(oracle.prior.dim), cov=oracle.cov)

    def sample(self, y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        mean = self.oracle.posterior_means(y[None, :])[0]
        return mean + self._zero_mean.sample(n, rng)


class PriorSampler:
    """Reference sampler that ignores the measurement entirely."""

    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    def sample(self, y: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.prior.sample(n, rng)


def empirical_stats(
    sampler: Sampler, y: np.ndarray, n_samples: int, rng: np.random.Generator
) -> GaussianDist:
    """Sample mean and unbiased (1/(n-1)) covariance of n generator draws."""
    if n_samples < 2:
        raise InvalidArgumentError("need at least 2 samples for a covariance")
    draws = sampler.sample(y, n_samples, rng)
    mean = draws.mean(axis=0)
    centered = draws - mean
    cov = centered.T @ centered / (n_samples - 1)
    return GaussianDist(mean=mean, cov=0.5 * (cov + cov.T))


class PosteriorW2Scorer:
    """Scores empirical moments against the exact posterior of one problem.

    The posterior covariance of the linear-Gaussian model is constant in y,
    so its square root, trace, and top eigenpairs are precomputed once and
    reused for every test measurement.
    """

    def __init__(self, oracle: ConditionalOracle):
        self.oracle = oracle
        dist = GaussianDist(mean=np.zeros(oracle.prior.dim), cov=oracle.cov)
        self.sqrt_true = dist.sqrt_cov()
        self.trace_true = dist.trace()
        # descending eigenpairs of the true posterior covariance
        self.true_eigvals = dist.eigvals[::-1].copy()
        self.true_eigvecs = dist.eigvecs[:, ::-1].copy()

    def w2(self, true_mean: np.ndarray, emp_mean: np.ndarray, emp_cov: np.ndarray) -> float:
        inner = self.sqrt_true @ emp_cov @ self.sqrt_true
        inner = 0.5 * (inner + inner.T)
        w = np.linalg.eigvalsh(inner)
        cross = 2.0 * float(np.sum(np.sqrt(np.maximum(w, 0.0))))
        val = (
            float(np.sum((true_mean - emp_mean) ** 2))
            + self.trace_true
            + float(np.trace(emp_cov))
            - cross
        )
        if not np.isfinite(val):
            raise NumericalFailureError("non-finite Wasserstein-2 value")
        return max(val, 0.0)

    def alignment(self, emp_cov: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(|v_hat_k . v_k|, relative eigenvalue errors) for the top k pairs."""
        w, v = np.linalg.eigh(emp_cov)
        w = w[::-1][:k]
        v = v[:, ::-1][:, :k]
        align = np.abs(np.sum(v * self.true_eigvecs[:, :k], axis=0))
        true_k = self.true_eigvals[:k]
        relerr = np.abs(w - true_k) / np.maximum(true_k, 1e-300)
        return align, relerr


@dataclass(frozen=True)
class W2Result:
    mean_w2: float
    per_y: np.ndarray
    n_excluded: int


def eval_w2(
    sampler: Sampler,
    oracle: ConditionalOracle,
    ys: np.ndarray,
    samples_per_dim: int = 10,
    rng: np.random.Generator | None = None,
    max_excluded_frac: float = 0.01,
) -> W2Result:
    """Mean Gaussian W2 between empirical generator moments and the exact
    posterior over a test set of measurements.

    Per-y numerical failures are excluded and counted; the evaluation fails
    outright if more than max_excluded_frac of the test set is lost.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if ys.shape[0] == 0:
        raise InvalidArgumentError("empty test set")
    if rng is None:
        raise InvalidArgumentError("an explicit rng is required for determinism")
    d = oracle.prior.dim
    n = samples_per_dim * d
    scorer = PosteriorW2Scorer(oracle)
    true_means = oracle.posterior_means(ys)
    vals = []
    excluded = 0
    for i in range(ys.shape[0]):
        try:
            stats = empirical_stats(sampler, ys[i], n, rng)
            vals.append(scorer.w2(true_means[i], stats.mean, stats.cov))
        except NumericalFailureError:
            excluded += 1
    if excluded > max_excluded_frac * ys.shape[0]:
        raise NumericalFailureError(
            "excluded %d of %d test points" % (excluded, ys.shape[0])
        )
    per_y = np.array(vals)
    return W2Result(mean_w2=float(per_y.mean()), per_y=per_y, n_excluded=excluded)


def rem_k(
    sampler: Sampler,
    xs: np.ndarray,
    ys: np.ndarray,
    k: int,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Residual error magnitude E||(I - V_k V_k^T)(x - mu_hat)||_2.

    mu_hat and the top-k directions come from n_samples generator draws per
    test pair; k = 0 applies the empty projector and reduces to rMSE.
    """
    from .regularizers import pca_extract

    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if k < 0:
        raise InvalidArgumentError("k must be >= 0")
    if n_samples < k + 1:
        raise InvalidArgumentError("need at least k+1 samples")
    if rng is None:
        raise InvalidArgumentError("an explicit rng is required for determinism")
    total = 0.0
    for x, y in zip(xs, ys):
        draws = sampler.sample(y, n_samples, rng)
        if k == 0:
            err = x - draws.mean(axis=0)
        else:
            est = pca_extract(draws, k)
            err = x - est.mean
            err = err - est.components @ (est.components.T @ err)
        total += float(np.linalg.norm(err))
    return total / xs.shape[0]


def rmse(
    sampler: Sampler,
    xs: np.ndarray,
    ys: np.ndarray,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Root MSE of the empirical conditional mean: E||x - mu_hat||_2."""
    return rem_k(sampler, xs, ys, 0, n_samples, rng)


def cfid_raw(
    sampler: Sampler,
    reference,
    ys: np.ndarray,
    samples_per_dim: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Conditional FID on raw vectors (identity embeddings).

    Per-y distributions are approximated by Gaussians, so this is the mean
    conditional Gaussian W2.  reference may be a ConditionalOracle (then
    this equals eval_w2 exactly) or another sampler, in which case the
    reference moments are estimated from the same number of draws.
    """
    if isinstance(reference, ConditionalOracle):
        return eval_w2(sampler, reference, ys, samples_per_dim, rng).mean_w2
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if ys.shape[0] == 0:
        raise InvalidArgumentError("empty test set")
    if rng is None:
        raise InvalidArgumentError("an explicit rng is required for determinism")
    d = ys.shape[1]
    n = samples_per_dim * d
    total = 0.0
    for y in ys:
        ref_stats = empirical_stats(reference, y, n, rng)
        gen_stats = empirical_stats(sampler, y, n, rng)
        total += w2_gaussian(ref_stats, gen_stats)
    return total / ys.shape[0]


@dataclass(frozen=True)
class EvalReport:
    """Full metric bundle for one model on one problem."""

    mean_w2: float
    w2_per_y: np.ndarray
    trace_ratio: float
    alignment: np.ndarray  # length-K, |v_hat_k . v_k| averaged over test y's
    eigval_relerr: np.ndarray  # length-K
    rem_k: float
    rmse: float
    cfid_raw: float
    k: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "mean_w2": self.mean_w2,
            "w2_per_y": self.w2_per_y.tolist(),
            "trace_ratio": self.trace_ratio,
            "alignment": self.alignment.tolist(),
            "eigval_relerr": self.eigval_relerr.tolist(),
            "rem_k": self.rem_k,
            "rmse": self.rmse,
            "cfid_raw": self.cfid_raw,
            "k": self.k,
            "n_excluded": self.n_excluded,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def evaluate_model(
    sampler: Sampler,
    oracle: ConditionalOracle,
    xs: np.ndarray,
    ys: np.ndarray,
    k: int,
    samples_per_dim: int = 10,
    rem_samples: int = 100,
    rem_subspace: int = 5,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """Compute the full EvalReport over a test set of (x, y) pairs."""
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if rng is None:
        raise InvalidArgumentError("an explicit rng is required for determinism")
    d = oracle.prior.dim
    n = samples_per_dim * d
    scorer = PosteriorW2Scorer(oracle)
    true_means = oracle.posterior_means(ys)
    w2s = []
    excluded = 0
    tr_ratio = 0.0
    align_acc = np.zeros(k)
    relerr_acc = np.zeros(k)
    for i in range(ys.shape[0]):
        stats = empirical_stats(sampler, ys[i], n, rng)
        try:
            w2s.append(scorer.w2(true_means[i], stats.mean, stats.cov))
        except NumericalFailureError:
            excluded += 1
            continue
        tr_ratio += float(np.trace(stats.cov)) / scorer.trace_true
        a, r = scorer.alignment(stats.cov, k)
        align_acc += a
        relerr_acc += r
    n_ok = ys.shape[0] - excluded
    if n_ok == 0:
        raise NumericalFailureError("all test points failed")
    per_y = np.array(w2s)
    rem = rem_k(sampler, xs, ys, min(rem_subspace, d), rem_samples, rng)
    root_mse = rem_k(sampler, xs, ys, 0, rem_samples, rng)
    cfid = float(per_y.mean())  # identity-embedding CFID with analytic reference
    return EvalReport(
        mean_w2=float(per_y.mean()),
        w2_per_y=per_y,
        trace_ratio=tr_ratio / n_ok,
        alignment=align_acc / n_ok,
        eigval_relerr=relerr_acc / n_ok,
        rem_k=rem,
        rmse=root_mse,
        cfid_raw=cfid,
        k=k,
        n_excluded=excluded,
    )
