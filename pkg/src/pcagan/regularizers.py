"""Loss terms and their sample-based estimators.

Covers the adversarial losses for both players (including the critic's
gradient penalty), the l1-to-sample-mean loss, the standard-deviation
reward, SVD-based principal-component extraction, the eigenvector and
eigenvalue regularizers with their stop-gradient boundaries, and the
multiplicative controller that tunes the reward weight toward correct
trace covariance.

Plain functions compute values per sample or per batch; the *Loss classes
at the bottom bind data and return (value, gradient) through the shared
kernels, satisfying the netcore gradient contract.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import InvalidArgumentError
from .netcore import AffineGenerator, LinearDiscriminator, ParamVector, disc_forward, gen_forward

log = logging.getLogger(__name__)

# Division guard for the eigenvalue loss, relative to the top eigenvalue:
# rank-deficient early training must not blow up the ratio terms.
LAM_FLOOR_REL = 1e-10

EIGVAL_MODES = ("per_sample", "strict")


@dataclass(frozen=True)
class PcaEstimate:
    """Top principal components of a centered sample cloud.

    mean is the sample average and acts as a stop-gradient constant in
    every loss that consumes the estimate.  components holds the top
    right singular vectors of the centered sample matrix (columns,
    sign-normalized so the first non-negligible coordinate is positive);
    eigvals are the squared singular values, descending.  When the cloud
    is rank deficient only the available directions are returned;
    rank_deficit records how many of the requested components are missing.
    """

    mean: np.ndarray
    components: np.ndarray  # (d, k_eff)
    eigvals: np.ndarray  # (k_eff,)
    requested_k: int
    n_samples: int

    @property
    def k_eff(self) -> int:
        return self.components.shape[1]

    @property
    def rank_deficit(self) -> int:
        return self.requested_k - self.k_eff


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            out[:, k] = -col
    return out


def pca_extract(samples: np.ndarray, k: int) -> PcaEstimate:
    """Mean + top-k right singular vectors/squared values of the centered cloud."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidArgumentError("samples must be (P, d)")
    p, d = samples.shape
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if p < k + 1:
        raise InvalidArgumentError("need at least k+1=%d samples, got %d" % (k + 1, p))
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, s, vh = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > max(float(s[0]), 0.0) * 1e-12)) if s.size else 0
    k_eff = min(k, rank)
    if k_eff < k:
        log.debug("pca_extract rank deficient: rank=%d requested=%d", rank, k)
    return PcaEstimate(
        mean=mean,
        components=_fix_signs(vh[:k_eff].T),
        eigvals=s[:k_eff] ** 2,
        requested_k=k,
        n_samples=p,
    )


# ---------------------------------------------------------------------------
# Value-level loss terms
# ---------------------------------------------------------------------------


def adv_loss_gen(
    disc: LinearDiscriminator,
    gen: AffineGenerator,
    ys: np.ndarray,
    zs: np.ndarray,
    beta_adv: float,
) -> float:
    """-beta_adv * sum_i D(G(z_i, y), y), averaged over the batch."""
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 3 or zs.shape[0] != ys.shape[0] or zs.shape[1] < 1:
        raise InvalidArgumentError("zs must be (batch, P, d_z) with P >= 1")
    total = 0.0
    for y, z_set in zip(ys, zs):
        for z in z_set:
            total -= beta_adv * disc_forward(disc, gen_forward(gen, z, y), y)
    return total / ys.shape[0]


def adv_loss_disc(
    disc: LinearDiscriminator,
    gen: AffineGenerator,
    xs: np.ndarray,
    ys: np.ndarray,
    zs: np.ndarray,
    gp_weight: float,
    eps: np.ndarray,
) -> float:
    """Critic loss -[D(x,y) - mean_i D(xh_i,y)] + gradient penalty, batch mean.

    The penalty is evaluated at the interpolate eps*x + (1-eps)*xh_1; for
    the affine critic the input-gradient there is w_x regardless of the
    interpolation point, so the penalty reduces to (||w_x|| - 1)^2.
    """
    if gp_weight < 0:
        raise InvalidArgumentError("gp_weight must be >= 0")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    zs = np.asarray(zs, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (xs.shape[0],))
    total = 0.0
    for x, y, z_set, e in zip(xs, ys, zs, eps):
        fakes = [gen_forward(gen, z, y) for z in z_set]
        d_fake = np.mean([disc_forward(disc, xh, y) for xh in fakes])
        x_tilde = e * x + (1.0 - e) * fakes[0]
        gnorm = np.linalg.norm(disc.input_grad(x_tilde, y))
        total += -(disc_forward(disc, x, y) - d_fake) + gp_weight * (gnorm - 1.0) ** 2
    return total / xs.shape[0]


def l1_reg(x: np.ndarray, samples: np.ndarray) -> float:
    """||x - mean_i(sample_i)||_1."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1:
        raise InvalidArgumentError("need at least one sample")
    return float(np.abs(np.asarray(x) - samples.mean(axis=0)).sum())


def sd_reward(samples: np.ndarray) -> float:
    """sum_i ||sample_i - sample_mean||_1 (the spread the reward pays for)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 2:
        raise InvalidArgumentError("spread reward needs at least two samples")
    return float(np.abs(samples - samples.mean(axis=0)).sum())


def evec_loss(pca: PcaEstimate, x: np.ndarray) -> float:
    """-sum_k (v_k . (x - mean))^2; the weight is applied by the caller.

    pca.mean is a stop-gradient constant; in the differentiable version of
    this term the gradient flows only through the components.
    """
    proj = pca.components.T @ (np.asarray(x, dtype=np.float64) - pca.mean)
    return float(-(proj ** 2).sum())


def eigval_estimate(pca: PcaEstimate, x: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """(P+1)-term sample average of squared projections onto each component.

    Stacks [x - mean; sample_i - mean] and averages the squared projection
    per component; in conditional expectation at the truth this equals the
    true eigenvalue.  Treated as a stop-gradient constant by the
    eigenvalue loss.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    rows = np.vstack([np.asarray(x, dtype=np.float64) - pca.mean, samples - pca.mean])
    proj = rows @ pca.components
    return (proj ** 2).sum(axis=0) / rows.shape[0]


def eigval_match_terms(
    lam_hat: np.ndarray, lam_tilde: np.ndarray, lam_floor_rel: float = LAM_FLOOR_REL
) -> tuple[float, int]:
    """sum_k (1 - lam_tilde_k / lam_hat_k)^2 with a division guard.

    Terms whose lam_hat falls at or below lam_floor_rel * max(lam_hat) are
    skipped and counted instead of corrupting the loss.
    """
    lam_hat = np.asarray(lam_hat, dtype=np.float64)
    lam_tilde = np.asarray(lam_tilde, dtype=np.float64)
    if lam_hat.shape != lam_tilde.shape:
        raise InvalidArgumentError("eigenvalue vectors differ in length")
    floor = lam_floor_rel * (float(lam_hat.max()) if lam_hat.size else 0.0)
    value = 0.0
    skipped = 0
    for lh, lt in zip(lam_hat, lam_tilde):
        if lh <= floor or lh <= 0.0:
            skipped += 1
            continue
        value += (1.0 - lt / lh) ** 2
    if skipped:
        log.debug("eigval loss skipped %d guarded terms", skipped)
    return value, skipped


def scaled_eigvals(pca: PcaEstimate, mode: str) -> np.ndarray:
    """Squared singular values on the scale the eigenvalue loss compares at.

    "per_sample" divides by the sample count so generated and estimated
    eigenvalues share a per-sample variance scale (default); "strict"
    keeps the raw squared singular values.
    """
    if mode not in EIGVAL_MODES:
        raise InvalidArgumentError("unknown eigval mode %r" % (mode,))
    if mode == "per_sample":
        return pca.eigvals / pca.n_samples
    return pca.eigvals.copy()


def eval_loss(
    pca: PcaEstimate,
    x: np.ndarray,
    samples: np.ndarray,
    mode: str = "per_sample",
    lam_floor_rel: float = LAM_FLOOR_REL,
) -> float:
    """Eigenvalue-matching loss; the weight is applied by the caller.

    The (P+1)-sample estimate is a stop-gradient constant: in the
    differentiable version only the estimated eigenvalues carry gradient.
    """
    value, _ = eval_loss_detailed(pca, x, samples, mode, lam_floor_rel)
    return value


def eval_loss_detailed(
    pca: PcaEstimate,
    x: np.ndarray,
    samples: np.ndarray,
    mode: str = "per_sample",
    lam_floor_rel: float = LAM_FLOOR_REL,
) -> tuple[float, int]:
    lam_hat = scaled_eigvals(pca, mode)
    lam_tilde = eigval_estimate(pca, x, samples)
    return eigval_match_terms(lam_hat, lam_tilde, lam_floor_rel)


# ---------------------------------------------------------------------------
# Reward-weight controller
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdStats:
    """Validation moments estimated with the monitor sample count P.

    err_sq    = E ||x - xh_(P)||^2
    spread_sq = mean_i E ||xh_i - xh_(P)||^2
    """

    err_sq: float
    spread_sq: float


@dataclass(frozen=True)
class SdController:
    """Multiplicative controller for the spread-reward weight.

    Its fixed point rho = 1 holds exactly when the generated trace
    covariance matches the true one under a correct mean: with matched
    traces, err_sq/spread_sq = (P+1)/(P-1) = target_ratio.
    """

    beta_sd: float
    gain: float = 0.5
    band: float = 0.2
    target_ratio: float = 3.0

    def __post_init__(self):
        if not self.beta_sd > 0:
            raise InvalidArgumentError("beta_sd must stay positive")
        if self.band < 0:
            raise InvalidArgumentError("band must be >= 0")

    @classmethod
    def for_monitor(
        cls, monitor_p: int, beta_sd: float, gain: float = 0.5, band: float = 0.2
    ) -> "SdController":
        if monitor_p < 2:
            raise InvalidArgumentError("monitor P must be >= 2")
        return cls(
            beta_sd=beta_sd,
            gain=gain,
            band=band,
            target_ratio=(monitor_p + 1) / (monitor_p - 1),
        )


def update_beta_sd(ctrl: SdController, stats: SdStats) -> SdController:
    """One controller step: beta_sd *= clip(rho^gain, 1-band, 1+band).

    rho = (err_sq / spread_sq) / target_ratio; rho > 1 means the generated
    spread is too small, so the reward weight grows.  A zero denominator
    holds the weight and logs a diagnostic.
    """
    if stats.spread_sq <= 0.0:
        log.warning(
            "sd controller hold: zero spread (err_sq=%.3e)", stats.err_sq
        )
        return ctrl
    rho = (stats.err_sq / stats.spread_sq) / ctrl.target_ratio
    factor = float(np.clip(rho ** ctrl.gain, 1.0 - ctrl.band, 1.0 + ctrl.band))
    return replace(ctrl, beta_sd=ctrl.beta_sd * factor)


# ---------------------------------------------------------------------------
# Differentiable loss objects (netcore gradient contract)
# ---------------------------------------------------------------------------


def _assemble_gen_grad(p: ParamVector, dA, dB, db, scale: float) -> np.ndarray:
    grad = np.empty(p.size)
    sl, _ = p.layout.slice_of("A")
    grad[sl] = dA.ravel() * scale
    sl, _ = p.layout.slice_of("B")
    grad[sl] = dB.ravel() * scale
    sl, _ = p.layout.slice_of("b")
    grad[sl] = db * scale
    return grad


@dataclass(frozen=True)
class GenRcLoss:
    """Adversarial + l1 + spread-reward generator loss on a fixed batch.

    With (beta_adv, l1_weight, beta_sd) the training step uses
    (beta_adv, 1, beta_sd); single terms are isolated by zeroing the other
    weights.  No stop-gradient boundaries, so frozen_fn is just the value.
    """

    d: int
    d_z: int
    disc: LinearDiscriminator
    x: np.ndarray  # (Bn, d)
    y: np.ndarray  # (Bn, d)
    z: np.ndarray  # (Bn, P, d_z)
    beta_adv: float = 0.0
    l1_weight: float = 0.0
    beta_sd: float = 0.0
    reduction: str = "mean"

    def _scale(self) -> float:
        return 1.0 / self.x.shape[0] if self.reduction == "mean" else 1.0

    def value(self, p: ParamVector) -> float:
        return self.value_and_grad(p)[0]

    def value_and_grad(self, p: ParamVector) -> tuple[float, np.ndarray]:
        adv, l1, sd, dA, dB, db = kernels.rc_step_value_grad(
            p.get("A"), p.get("B"), p.get("b"),
            self.disc.w_x, self.disc.w_y, self.disc.c,
            self.x, self.y, self.z,
            self.beta_adv, self.l1_weight, self.beta_sd,
        )
        s = self._scale()
        return (adv + l1 + sd) * s, _assemble_gen_grad(p, dA, dB, db, s)

    def frozen_fn(self, p0: ParamVector):
        return self.value


@dataclass(frozen=True)
class GenPcaLoss:
    """Eigenvector (+ optionally eigenvalue) generator loss on a fixed batch.

    The per-row sample mean and the (P+1)-sample eigenvalue estimate are
    stop-gradient: value_and_grad differentiates the function returned by
    frozen_fn, in which those quantities are literal constants.
    """

    d: int
    d_z: int
    x: np.ndarray  # (Bn, d)
    y: np.ndarray  # (Bn, d)
    z: np.ndarray  # (Bn, P_pca, d_z)
    k: int
    beta_evec: float = 0.0
    beta_eval: float = 0.0
    include_eval: bool = True
    eigval_mode: str = "per_sample"
    reduction: str = "mean"

    def _scale(self) -> float:
        return 1.0 / self.x.shape[0] if self.reduction == "mean" else 1.0

    def _lam_scale(self) -> float:
        if self.eigval_mode not in EIGVAL_MODES:
            raise InvalidArgumentError("unknown eigval mode %r" % (self.eigval_mode,))
        return 1.0 / self.z.shape[1] if self.eigval_mode == "per_sample" else 1.0

    def value(self, p: ParamVector) -> float:
        return self.value_and_grad(p)[0]

    def value_and_grad(self, p: ParamVector) -> tuple[float, np.ndarray]:
        evec, ev, _, dA, dB, db = kernels.pca_step_value_grad(
            p.get("A"), p.get("B"), p.get("b"),
            self.x, self.y, self.z, self.k,
            self.beta_evec, self.beta_eval, self.include_eval,
            self._lam_scale(), LAM_FLOOR_REL,
        )
        s = self._scale()
        return (evec + ev) * s, _assemble_gen_grad(p, dA, dB, db, s)

    def _forward(self, p: ParamVector) -> np.ndarray:
        a, bmat, bias = p.get("A"), p.get("B"), p.get("b")
        return (self.y @ a.T)[:, None, :] + self.z @ bmat.T + bias

    def frozen_fn(self, p0: ParamVector):
        """Scalar function with the stop-gradient quantities pinned at p0."""
        samples0 = self._forward(p0)
        mu0 = samples0.mean(axis=1)  # (Bn, d), frozen
        lam_scale = self._lam_scale()
        pp = self.z.shape[1]

        lam_tilde0 = []
        for b in range(self.x.shape[0]):
            xc = samples0[b] - mu0[b]
            _, s, vh = np.linalg.svd(xc, full_matrices=False)
            rows = np.vstack([self.x[b] - mu0[b], xc])
            proj = rows @ vh[: self.k].T
            lam_tilde0.append((proj ** 2).sum(axis=0) / (pp + 1))

        def fn(p: ParamVector) -> float:
            samples = self._forward(p)
            total = 0.0
            for b in range(self.x.shape[0]):
                xc = samples[b] - mu0[b]
                _, s, vh = np.linalg.svd(xc, full_matrices=False)
                e = vh[: self.k] @ (self.x[b] - mu0[b])
                total += -self.beta_evec * float((e ** 2).sum())
                if self.include_eval:
                    lam_hat = (s[: self.k] ** 2) * lam_scale
                    floor = LAM_FLOOR_REL * (lam_hat.max() if lam_hat.size else 0.0)
                    for k in range(self.k):
                        if lam_hat[k] <= floor or lam_hat[k] <= 0.0:
                            continue
                        total += self.beta_eval * (1.0 - lam_tilde0[b][k] / lam_hat[k]) ** 2
            return total * self._scale()

        return fn


@dataclass(frozen=True)
class DiscLoss:
    """Critic loss (Wasserstein part + gradient penalty) on a fixed batch."""

    d: int
    gen: AffineGenerator
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray  # (Bn, P, d_z)
    gp_weight: float = 10.0
    reduction: str = "mean"

    def _scale(self) -> float:
        return 1.0 / self.x.shape[0] if self.reduction == "mean" else 1.0

    def value(self, p: ParamVector) -> float:
        return self.value_and_grad(p)[0]

    def value_and_grad(self, p: ParamVector) -> tuple[float, np.ndarray]:
        w = p.get("w")
        wass, gp, dwx, dwy, dc = kernels.disc_step_value_grad(
            w[: self.d], w[self.d :], float(p.get("c")),
            self.gen.A, self.gen.B, self.gen.b,
            self.x, self.y, self.z, self.gp_weight,
        )
        s = self._scale()
        grad = np.empty(p.size)
        sl, _ = p.layout.slice_of("w")
        grad[sl] = np.concatenate([dwx, dwy]) * s
        sl, _ = p.layout.slice_of("c")
        grad[sl] = dc * s
        return (wass + gp) * s, grad

    def frozen_fn(self, p0: ParamVector):
        return self.value
