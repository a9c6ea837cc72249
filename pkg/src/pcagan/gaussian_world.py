"""Synthetic Gaussian inverse problems with exact posteriors.

This module owns the ground truth side of the experiments: random Gaussian
signal priors built by truncating a single master prior across problem
sizes, the masked-noisy linear measurement model, the closed-form posterior
of the resulting jointly Gaussian pair, and the closed-form squared
Wasserstein-2 distance used to score approximate posteriors.

All types are immutable after construction (their arrays are marked
read-only) and safe to share across threads; sampling routines take an
explicit generator so callers control determinism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, NumericalFailureError
from .rng import stream

ORTHO_TOL = 1e-10
SYM_TOL = 1e-10
# PSD slack, relative to the largest eigenvalue: separates roundoff from
# genuinely indefinite inputs.
PSD_REL_TOL = 1e-8

FORMAT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GaussianPrior:
    """Signal prior N(mean, V diag(eigvals) V^T) in eigen form.

    eigvals are sorted descending and eigvecs has orthonormal columns, so
    the implied covariance is symmetric PSD by construction.
    """

    dim: int
    mean: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def __post_init__(self):
        d = self.dim
        if d <= 0:
            raise InvalidArgumentError("dim must be positive, got %r" % (d,))
        mean = _frozen(self.mean)
        eigvals = _frozen(self.eigvals)
        eigvecs = _frozen(self.eigvecs)
        if mean.shape != (d,) or eigvals.shape != (d,) or eigvecs.shape != (d, d):
            raise InvalidArgumentError("shape mismatch for dim=%d" % d)
        if np.any(eigvals < 0):
            raise InvalidArgumentError("eigenvalues must be nonnegative")
        if np.any(np.diff(eigvals) > 0):
            raise InvalidArgumentError("eigenvalues must be sorted descending")
        gram_err = np.linalg.norm(eigvecs.T @ eigvecs - np.eye(d))
        if gram_err > ORTHO_TOL * d:
            raise InvalidArgumentError(
                "eigenvector columns not orthonormal (|V'V - I|_F = %.3e)" % gram_err
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigvals", eigvals)
        object.__setattr__(self, "eigvecs", eigvecs)

    def covariance(self) -> np.ndarray:
        cov = (self.eigvecs * self.eigvals) @ self.eigvecs.T
        return 0.5 * (cov + cov.T)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n draws from the prior, shape (n, dim)."""
        eps = rng.standard_normal((n, self.dim))
        return self.mean + (eps * np.sqrt(self.eigvals)) @ self.eigvecs.T


@dataclass(frozen=True)
class MeasurementModel:
    """y = M x + w with diagonal 0/1 mask M and w ~ N(0, noise_var I)."""

    dim: int
    mask: np.ndarray  # boolean vector; True = coordinate observed
    noise_var: float

    def __post_init__(self):
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.shape != (self.dim,):
            raise InvalidArgumentError("mask length must equal dim")
        if not self.noise_var > 0:
            raise InvalidArgumentError("noise_var must be positive")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    def mask_floats(self) -> np.ndarray:
        return self.mask.astype(np.float64)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """M x, broadcasting over leading axes."""
        return x * self.mask_floats()


def even_masked_model(
    d: int, noise_var: float = 0.001, convention: str = "zero_even"
) -> MeasurementModel:
    """Measurement model whose mask zeroes alternating coordinates.

    convention selects which 0-based parity is zeroed: "zero_even" (default)
    removes indices 0, 2, 4, ...; "zero_odd" removes 1, 3, 5, ...
    """
    idx = np.arange(d)
    if convention == "zero_even":
        keep = idx % 2 == 1
    elif convention == "zero_odd":
        keep = idx % 2 == 0
    else:
        raise InvalidArgumentError("unknown mask convention %r" % (convention,))
    return MeasurementModel(dim=d, mask=keep, noise_var=float(noise_var))


@dataclass(frozen=True)
class GaussianDist:
    """Mean + covariance with a cached, PSD-clamped eigendecomposition.

    Houses both analytic posteriors and empirical moment estimates.
    Eigenvalues in [-PSD_REL_TOL * lam_max, 0) are treated as roundoff and
    clamped to zero; anything more negative is rejected.
    """

    mean: np.ndarray
    cov: np.ndarray
    # cached eigendecomposition (ascending eigh order, clamped)
    _eigvals: np.ndarray = field(repr=False, default=None)
    _eigvecs: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        mean = _frozen(self.mean)
        cov = np.ascontiguousarray(self.cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InvalidArgumentError("cov shape %r does not match mean" % (cov.shape,))
        asym = np.max(np.abs(cov - cov.T)) if d else 0.0
        scale = max(1.0, float(np.max(np.abs(cov)))) if d else 1.0
        if asym > SYM_TOL * scale:
            raise InvalidArgumentError("covariance not symmetric (max asym %.3e)" % asym)
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        lam_max = max(float(w[-1]), 0.0)
        floor = -PSD_REL_TOL * max(lam_max, 1e-300)
        if float(w[0]) < floor:
            raise InvalidArgumentError(
                "covariance not PSD (min eigval %.3e, allowed %.3e)" % (w[0], floor)
            )
        w = np.maximum(w, 0.0)
        cov.setflags(write=False)
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_eigvals", w)
        object.__setattr__(self, "_eigvecs", v)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def eigvals(self) -> np.ndarray:
        """Clamped eigenvalues, ascending."""
        return self._eigvals

    @property
    def eigvecs(self) -> np.ndarray:
        return self._eigvecs

    def trace(self) -> float:
        return float(np.trace(self.cov))

    def sqrt_cov(self) -> np.ndarray:
        """Symmetric PSD square root via the cached eigendecomposition."""
        return (self._eigvecs * np.sqrt(self._eigvals)) @ self._eigvecs.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mean + (eps * np.sqrt(self._eigvals)) @ self._eigvecs.T


def make_prior_chain(d_max: int, seed: int) -> list[GaussianPrior]:
    """Priors for every d in {10, 20, ..., d_max}, truncated from one master.

    The master prior at d_max draws mean ~ N(0, I), half-normal eigenvalues
    |N(0, 1)|, and eigenvectors as the Q factor of an i.i.d. standard normal
    matrix.  Each smaller d keeps the first d mean entries, the first d
    eigenvalues, and the first d coordinates of the first d eigenvectors of
    the master, re-orthonormalized by QR.  Eigenpairs of the master are
    sorted descending before truncation (a joint permutation, so the master
    covariance is unchanged) to keep the descending-spectrum invariant at
    every d.

    Returns the list ascending in d.  Draws come from stream
    (seed, "prior-chain", d_max).
    """
    if d_max <= 0 or d_max % 10 != 0:
        raise InvalidArgumentError(
            "d_max must be a positive multiple of 10, got %r" % (d_max,)
        )
    rng = stream(seed, "prior-chain", d_max)
    mean_full = rng.standard_normal(d_max)
    eigvals_full = np.abs(rng.standard_normal(d_max))
    gauss = rng.standard_normal((d_max, d_max))
    q_full = _qr_orthonormal(gauss)

    order = np.argsort(-eigvals_full, kind="stable")
    eigvals_full = eigvals_full[order]
    q_full = q_full[:, order]

    priors = []
    for d in range(10, d_max + 1, 10):
        if d == d_max:
            vecs = q_full
        else:
            vecs = _qr_orthonormal(q_full[:d, :d])
        priors.append(
            GaussianPrior(
                dim=d, mean=mean_full[:d], eigvals=eigvals_full[:d], eigvecs=vecs
            )
        )
    return priors


def _qr_orthonormal(a: np.ndarray) -> np.ndarray:
    """Q factor with the sign fixed so diag(R) > 0 (deterministic)."""
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def sample_pair(
    prior: GaussianPrior, mm: MeasurementModel, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One (x, y) draw: x from the prior, y = M x + w."""
    x, y = sample_pairs(prior, mm, 1, rng)
    return x[0], y[0]


def sample_pairs(
    prior: GaussianPrior, mm: MeasurementModel, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """n i.i.d. (x, y) rows.  Consumes 2*n*d normals: signals then noise."""
    if prior.dim != mm.dim:
        raise InvalidArgumentError(
            "prior dim %d != measurement dim %d" % (prior.dim, mm.dim)
        )
    x = prior.sample(n, rng)
    w = rng.standard_normal((n, prior.dim)) * np.sqrt(mm.noise_var)
    y = x * mm.mask_floats() + w
    return x, y


class ConditionalOracle:
    """Precomputed posterior map for one (prior, measurement model) pair.

    The posterior covariance of the linear-Gaussian model does not depend
    on y, so the gain matrix and covariance are factored once and reused
    for every conditioning call.
    """

    def __init__(self, prior: GaussianPrior, mm: MeasurementModel):
        if prior.dim != mm.dim:
            raise InvalidArgumentError("prior and measurement dims differ")
        self.prior = prior
        self.mm = mm
        m = mm.mask_floats()
        sigma_x = prior.covariance()
        sigma_xy = sigma_x * m[None, :]  # Sigma_x M^T
        sigma_y = m[:, None] * sigma_x * m[None, :] + mm.noise_var * np.eye(prior.dim)
        try:
            cho = scipy.linalg.cho_factor(sigma_y, lower=True)
        except scipy.linalg.LinAlgError as exc:  # pragma: no cover - sigma^2 > 0
            raise NumericalFailureError(
                "measurement covariance factorization failed (cond=%.3e)"
                % np.linalg.cond(sigma_y)
            ) from exc
        # gain = Sigma_xy Sigma_y^{-1}, via the SPD factor (never an inverse)
        self.gain = scipy.linalg.cho_solve(cho, sigma_xy.T).T
        cov = sigma_x - self.gain @ sigma_xy.T
        self.mean_y = m * prior.mean
        self.cov = 0.5 * (cov + cov.T)
        self._cov_dist = GaussianDist(mean=np.zeros(prior.dim), cov=self.cov)

    def posterior(self, y: np.ndarray) -> GaussianDist:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.prior.dim,):
            raise InvalidArgumentError("y has shape %r" % (y.shape,))
        mean = self.prior.mean + self.gain @ (y - self.mean_y)
        return GaussianDist(mean=mean, cov=self.cov)

    def posterior_means(self, ys: np.ndarray) -> np.ndarray:
        """Posterior means for a batch of y rows."""
        return self.prior.mean + (ys - self.mean_y) @ self.gain.T


def analytic_posterior(
    prior: GaussianPrior, mm: MeasurementModel, y: np.ndarray
) -> GaussianDist:
    """Exact Gaussian posterior of x given y = M x + w."""
    return ConditionalOracle(prior, mm).posterior(y)


def w2_gaussian(a: GaussianDist, b: GaussianDist) -> float:
    """Squared Wasserstein-2 distance between Gaussians.

    ||mu_a - mu_b||^2 + tr[Sigma_a + Sigma_b - 2 (Sigma_a^1/2 Sigma_b
    Sigma_a^1/2)^1/2], with matrix square roots taken through symmetric
    eigendecompositions and eigenvalues clamped at zero.
    """
    if a.dim != b.dim:
        raise InvalidArgumentError("dimension mismatch %d vs %d" % (a.dim, b.dim))
    sqrt_a = a.sqrt_cov()
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    cross = 2.0 * float(np.sum(np.sqrt(np.maximum(w, 0.0))))
    val = float(np.sum((a.mean - b.mean) ** 2)) + a.trace() + b.trace() - cross
    if not np.isfinite(val):
        raise NumericalFailureError("non-finite Wasserstein-2 value")
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# JSON serialization (versioned)
# ---------------------------------------------------------------------------


def prior_to_dict(prior: GaussianPrior) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "gaussian_prior",
        "dim": prior.dim,
        "mean": prior.mean.tolist(),
        "eigvals": prior.eigvals.tolist(),
        "eigvecs": prior.eigvecs.tolist(),  # row-major
    }


def prior_from_dict(doc: dict) -> GaussianPrior:
    _check_doc(doc, "gaussian_prior")
    return GaussianPrior(
        dim=int(doc["dim"]),
        mean=np.array(doc["mean"]),
        eigvals=np.array(doc["eigvals"]),
        eigvecs=np.array(doc["eigvecs"]),
    )


def measurement_to_dict(mm: MeasurementModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "measurement_model",
        "dim": mm.dim,
        "mask": [int(v) for v in mm.mask],
        "noise_var": mm.noise_var,
    }


def measurement_from_dict(doc: dict) -> MeasurementModel:
    _check_doc(doc, "measurement_model")
    return MeasurementModel(
        dim=int(doc["dim"]),
        mask=np.array(doc["mask"], dtype=bool),
        noise_var=float(doc["noise_var"]),
    )


def _check_doc(doc: dict, kind: str) -> None:
    if doc.get("kind") != kind:
        raise InvalidArgumentError("expected %r document, got %r" % (kind, doc.get("kind")))
    if doc.get("format_version") != FORMAT_VERSION:
        raise InvalidArgumentError(
            "unsupported format_version %r" % (doc.get("format_version"),)
        )


def canonical_json(doc: dict) -> str:
    """Stable serialization used for hashing."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
