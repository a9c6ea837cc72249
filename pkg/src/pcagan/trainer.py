"""End-to-end training loop: epoch/step scheduling, lazy regularization,
alternating critic/generator updates, reward-weight control, validation,
checkpointing, and the plain-rcGAN baseline mode.

One generator step accumulates, over the batch, the adversarial term, the
l1-to-sample-mean term, and the spread reward; every m_lazy-th step in
epochs >= e_evec it adds the eigenvector regularizer, and from e_eval on
also the eigenvalue regularizer, then applies a single Adam update.  The
critic takes n_disc updates before each generator step.  The step counter
is global across epochs and never resets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .datakit import DatasetHandle
from .errors import InvalidArgumentError, NumericalFailureError
from .gaussian_world import ConditionalOracle, canonical_json
from .netcore import (
    AdamState,
    AffineGenerator,
    LinearDiscriminator,
    adam_step,
    checkpoint_to_dict,
)
from .regularizers import LAM_FLOOR_REL, EIGVAL_MODES, SdController, SdStats, update_beta_sd
from .rng import ALGORITHM_ID, stream

log = logging.getLogger(__name__)

MODES = ("pcaGAN", "rcGAN")


def default_beta_sd(p_rc: int) -> float:
    """Reward weight at which, per coordinate, the stationary generated
    spread of the l1/reward pair equals the true spread: 1/(P sqrt(P^2-1))."""
    return 1.0 / (p_rc * math.sqrt(p_rc ** 2 - 1.0))


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one training run.

    None values resolve against the problem dimension d at train time:
    k -> d, p_pca -> 10*k, e_eval -> e_evec + 25, d_z -> d,
    sd_monitor_p -> p_rc, beta_sd_init -> 1/(p_rc sqrt(p_rc^2-1)).
    mode "rcGAN" forces beta_pca to 0 and skips the regularizer schedule
    entirely.
    """

    mode: str = "pcaGAN"
    k: int | None = None
    p_rc: int = 2
    p_pca: int | None = None
    m_lazy: int = 100
    e_evec: int = 10
    e_eval: int | None = None
    beta_adv: float = 1e-5
    beta_pca: float = 1e-2
    beta_sd_init: float | None = None
    sd_gain: float = 0.5
    sd_band: float = 0.2
    sd_monitor_p: int | None = None
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    d_z: int | None = None
    n_disc: int = 1
    gp_weight: float = 10.0
    batch_reduction: str = "mean"
    eigval_mode: str = "per_sample"
    val_num_y: int = 200
    val_samples_per_dim: int = 10
    divergence_factor: float = 1e3
    divergence_patience: int = 3

    def resolved(self, d: int) -> "TrainConfig":
        """Concrete config for problem dimension d, with invariants checked."""
        k = d if self.k is None else int(self.k)
        p_pca = 10 * k if self.p_pca is None else int(self.p_pca)
        e_eval = self.e_evec + 25 if self.e_eval is None else int(self.e_eval)
        d_z = d if self.d_z is None else int(self.d_z)
        monitor = self.p_rc if self.sd_monitor_p is None else int(self.sd_monitor_p)
        beta_sd = (
            default_beta_sd(self.p_rc)
            if self.beta_sd_init is None
            else float(self.beta_sd_init)
        )
        beta_pca = self.beta_pca
        if self.mode == "rcGAN":
            beta_pca = 0.0
        elif self.mode not in MODES:
            raise InvalidArgumentError("mode must be one of %r" % (MODES,))
        cfg = TrainConfig(
            mode=self.mode,
            k=k,
            p_rc=self.p_rc,
            p_pca=p_pca,
            m_lazy=self.m_lazy,
            e_evec=self.e_evec,
            e_eval=e_eval,
            beta_adv=self.beta_adv,
            beta_pca=beta_pca,
            beta_sd_init=beta_sd,
            sd_gain=self.sd_gain,
            sd_band=self.sd_band,
            sd_monitor_p=monitor,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            d_z=d_z,
            n_disc=self.n_disc,
            gp_weight=self.gp_weight,
            batch_reduction=self.batch_reduction,
            eigval_mode=self.eigval_mode,
            val_num_y=self.val_num_y,
            val_samples_per_dim=self.val_samples_per_dim,
            divergence_factor=self.divergence_factor,
            divergence_patience=self.divergence_patience,
        )
        cfg._validate(d)
        return cfg

    def _validate(self, d: int) -> None:
        if self.k < 1 or self.k > d:
            raise InvalidArgumentError("k must be in [1, d]")
        if self.p_rc < 2:
            raise InvalidArgumentError("p_rc must be >= 2")
        if self.p_pca < self.k + 1:
            raise InvalidArgumentError("p_pca must be >= k + 1")
        if self.e_eval < self.e_evec:
            raise InvalidArgumentError("e_eval must be >= e_evec")
        if self.m_lazy < 1:
            raise InvalidArgumentError("m_lazy must be >= 1")
        if min(self.beta_adv, self.beta_pca, self.gp_weight) < 0:
            raise InvalidArgumentError("loss weights must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.n_disc < 0:
            raise InvalidArgumentError("bad epochs/batch_size/n_disc")
        if self.batch_reduction not in ("mean", "sum"):
            raise InvalidArgumentError("batch_reduction must be mean or sum")
        if self.eigval_mode not in EIGVAL_MODES:
            raise InvalidArgumentError("unknown eigval_mode %r" % (self.eigval_mode,))
        if self.d_z < 1:
            raise InvalidArgumentError("d_z must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError("unknown config keys: %s" % sorted(unknown))
        return cls(**doc)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


@dataclass(frozen=True)
class EpochRow:
    """Per-epoch metrics; loss columns are the signed, weighted per-sample
    contributions averaged over the epoch's steps (zero on the untrained
    row)."""

    epoch: int
    mean_w2: float
    trace_ratio: float
    alignment: float
    beta_sd: float
    gen_adv: float
    gen_l1: float
    gen_sd: float
    gen_evec: float
    gen_eval: float
    disc_wass: float
    disc_gp: float

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


CSV_COLUMNS = tuple(EpochRow.__dataclass_fields__)


@dataclass
class RunRecord:
    """Everything one training run produced."""

    config: dict
    seed: int
    rows: list[EpochRow]
    best_epoch: int
    best_w2: float
    checkpoint: dict
    diverged: bool
    pca_steps: list[tuple[int, int, bool, bool]]  # (step, epoch, evec_on, eval_on)
    rng_algorithm: str = ALGORITHM_ID

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for row in self.rows:
                doc = asdict(row)
                fh.write(",".join(_fmt(doc[c]) for c in CSV_COLUMNS) + "\n")

    def write_manifest(self, path, checkpoint_path: str | None = None) -> None:
        doc = {
            "config": self.config,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_w2": self.best_w2,
            "diverged": self.diverged,
            "checkpoint_path": checkpoint_path,
            "rng_algorithm": self.rng_algorithm,
            "n_pca_steps": len(self.pca_steps),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainState:
    """Mutable state threaded through discriminator/generator steps."""

    cfg: TrainConfig  # resolved
    d: int
    gen: AffineGenerator
    disc: LinearDiscriminator
    adam_gen: AdamState
    adam_disc: AdamState
    sd: SdController
    epoch: int = 0
    step: int = 0  # global generator-step counter; never reset
    disc_step: int = 0
    pca_steps: list = field(default_factory=list)
    last_gen_loss: float = 0.0
    last_components: dict = field(default_factory=dict)

    def scale(self, batch_n: int) -> float:
        return 1.0 / batch_n if self.cfg.batch_reduction == "mean" else 1.0


def init_state(cfg: TrainConfig, d: int) -> TrainState:
    """Networks, optimizers, and controller for a resolved config."""
    gen = AffineGenerator.init_random(d, cfg.d_z, stream(cfg.seed, "init-gen"))
    disc = LinearDiscriminator.init_random(d, stream(cfg.seed, "init-disc"))
    return TrainState(
        cfg=cfg,
        d=d,
        gen=gen,
        disc=disc,
        adam_gen=AdamState.zeros(
            gen.params.size, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        ),
        adam_disc=AdamState.zeros(
            disc.params.size, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        ),
        sd=SdController.for_monitor(
            cfg.sd_monitor_p, cfg.beta_sd_init, cfg.sd_gain, cfg.sd_band
        ),
    )


def discriminator_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray]) -> TrainState:
    """One Adam update of the critic on this batch."""
    cfg = state.cfg
    xb, yb = batch
    bn = xb.shape[0]
    z = stream(cfg.seed, "z-disc", state.disc_step).standard_normal(
        (bn, cfg.p_rc, cfg.d_z)
    )
    w = state.disc.params.get("w")
    wass, gp, dwx, dwy, dc = kernels.disc_step_value_grad(
        w[: state.d], w[state.d :], float(state.disc.params.get("c")),
        state.gen.A, state.gen.B, state.gen.b,
        xb, yb, z, cfg.gp_weight,
    )
    s = state.scale(bn)
    if not (np.isfinite(wass) and np.isfinite(gp)):
        log.error("non-finite critic loss at disc step %d", state.disc_step)
        raise NumericalFailureError("non-finite critic loss")
    grad = np.empty(state.disc.params.size)
    sl, _ = state.disc.params.layout.slice_of("w")
    grad[sl] = np.concatenate([dwx, dwy]) * s
    sl, _ = state.disc.params.layout.slice_of("c")
    grad[sl] = dc * s
    new_p, new_a = adam_step(state.disc.params, grad, state.adam_disc)
    state.disc = state.disc.with_params(new_p)
    state.adam_disc = new_a
    state.disc_step += 1
    state.last_components["disc_wass"] = wass * s
    state.last_components["disc_gp"] = gp * s
    return state


def generator_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray]) -> TrainState:
    """One generator update implementing the full training iteration.

    The adversarial/l1/reward terms always run; the eigenvector block runs
    when epoch >= e_evec and step % m_lazy == 0 (pcaGAN mode only), and the
    eigenvalue block additionally requires epoch >= e_eval.
    """
    cfg = state.cfg
    xb, yb = batch
    bn = xb.shape[0]
    p = state.gen.params
    z_rc = stream(cfg.seed, "z-rc", state.step).standard_normal((bn, cfg.p_rc, cfg.d_z))
    adv, l1, sd, dA, dB, db = kernels.rc_step_value_grad(
        p.get("A"), p.get("B"), p.get("b"),
        state.disc.w_x, state.disc.w_y, state.disc.c,
        xb, yb, z_rc, cfg.beta_adv, 1.0, state.sd.beta_sd,
    )

    evec = ev = 0.0
    pca_on = (
        cfg.mode == "pcaGAN"
        and state.epoch >= cfg.e_evec
        and state.step % cfg.m_lazy == 0
    )
    eval_on = pca_on and state.epoch >= cfg.e_eval
    if pca_on:
        z_pca = stream(cfg.seed, "z-pca", state.step).standard_normal(
            (bn, cfg.p_pca, cfg.d_z)
        )
        lam_scale = 1.0 / cfg.p_pca if cfg.eigval_mode == "per_sample" else 1.0
        evec, ev, n_skip, dA2, dB2, db2 = kernels.pca_step_value_grad(
            p.get("A"), p.get("B"), p.get("b"),
            xb, yb, z_pca, cfg.k,
            cfg.beta_pca, cfg.beta_pca, eval_on,
            lam_scale, LAM_FLOOR_REL,
        )
        if n_skip:
            log.debug("step %d: %d eigenvalue terms guarded", state.step, n_skip)
        dA = dA + dA2
        dB = dB + dB2
        db = db + db2
        state.pca_steps.append((state.step, state.epoch, True, eval_on))

    s = state.scale(bn)
    total = (adv + l1 + sd + evec + ev) * s
    if not np.isfinite(total):
        log.error(
            "non-finite generator loss at step %d (adv=%r l1=%r sd=%r evec=%r eval=%r)",
            state.step, adv, l1, sd, evec, ev,
        )
        raise NumericalFailureError("non-finite generator loss at step %d" % state.step)

    grad = np.empty(p.size)
    sl, _ = p.layout.slice_of("A")
    grad[sl] = dA.ravel() * s
    sl, _ = p.layout.slice_of("B")
    grad[sl] = dB.ravel() * s
    sl, _ = p.layout.slice_of("b")
    grad[sl] = db * s
    new_p, new_a = adam_step(p, grad, state.adam_gen)
    state.gen = state.gen.with_params(new_p)
    state.adam_gen = new_a
    state.last_gen_loss = total
    state.last_components.update(
        gen_adv=adv * s, gen_l1=l1 * s, gen_sd=sd * s, gen_evec=evec * s,
        gen_eval=ev * s,
    )
    state.step += 1
    return state


def _validate_epoch(
    state: TrainState, oracle, scorer, val_ys: np.ndarray, epoch_row_idx: int
) -> tuple[float, float, float]:
    """(mean W2, trace ratio, mean top-K alignment) over the validation y's."""
    cfg = state.cfg
    n = cfg.val_samples_per_dim * state.d
    rng = stream(cfg.seed, "val", epoch_row_idx)
    true_means = oracle.posterior_means(val_ys)
    a_mat = np.ascontiguousarray(state.gen.A.T)
    b_mat = np.ascontiguousarray(state.gen.B.T)
    bias = state.gen.b
    w2_acc = tr_acc = al_acc = 0.0
    for i in range(val_ys.shape[0]):
        z = rng.standard_normal((n, cfg.d_z))
        draws = val_ys[i] @ a_mat + bias + z @ b_mat
        mean = draws.mean(axis=0)
        centered = draws - mean
        cov = centered.T @ centered / (n - 1)
        cov = 0.5 * (cov + cov.T)
        w2_acc += scorer.w2(true_means[i], mean, cov)
        tr_acc += float(np.trace(cov)) / scorer.trace_true
        align, _ = scorer.alignment(cov, cfg.k)
        al_acc += float(align.mean())
    nv = val_ys.shape[0]
    return w2_acc / nv, tr_acc / nv, al_acc / nv


def _sd_monitor_stats(state: TrainState, data: DatasetHandle, epoch_row_idx: int) -> SdStats:
    """Validation moments for the reward-weight controller, at the monitor P."""
    cfg = state.cfg
    xs, ys = data.val.x, data.val.y
    p = cfg.sd_monitor_p
    rng = stream(cfg.seed, "sd-monitor", epoch_row_idx)
    z = rng.standard_normal((xs.shape[0], p, cfg.d_z))
    base = ys @ state.gen.A.T + state.gen.b
    draws = base[:, None, :] + z @ state.gen.B.T  # (n, p, d)
    xbar = draws.mean(axis=1)
    err_sq = float(np.mean(np.sum((xs - xbar) ** 2, axis=1)))
    spread_sq = float(np.mean(np.sum((draws - xbar[:, None, :]) ** 2, axis=2)))
    return SdStats(err_sq=err_sq, spread_sq=spread_sq)


def _checkpoint(state: TrainState, cfg_hash: str) -> dict:
    return {
        "format_version": 1,
        "kind": "run_checkpoint",
        "config_hash": cfg_hash,
        "d": state.d,
        "d_z": state.cfg.d_z,
        "generator": checkpoint_to_dict(state.gen.params, state.adam_gen, cfg_hash),
        "discriminator": checkpoint_to_dict(state.disc.params, state.adam_disc, cfg_hash),
    }


def train(config: TrainConfig, data: DatasetHandle) -> RunRecord:
    """Run the full training loop; deterministic given (config, data, seed).

    Validation runs once per epoch (plus once untrained); the best
    checkpoint is the epoch with the lowest validation W2.  If validation
    W2 exceeds divergence_factor times the untrained value for
    divergence_patience consecutive epochs, training aborts early and the
    partial record is returned with diverged=True.
    """
    d = data.dim
    cfg = config.resolved(d)
    if cfg.batch_size > data.train.n:
        raise InvalidArgumentError("batch_size exceeds training set size")
    cfg_hash = cfg.config_hash()
    state = init_state(cfg, d)
    oracle = ConditionalOracle(data.prior, data.mm)
    from .evaluation import PosteriorW2Scorer

    scorer = PosteriorW2Scorer(oracle)
    val_ys = data.val.y[: cfg.val_num_y]

    rows: list[EpochRow] = []
    w2_0, tr_0, al_0 = _validate_epoch(state, oracle, scorer, val_ys, 0)
    rows.append(
        EpochRow(
            epoch=0, mean_w2=w2_0, trace_ratio=tr_0, alignment=al_0,
            beta_sd=state.sd.beta_sd, gen_adv=0.0, gen_l1=0.0, gen_sd=0.0,
            gen_evec=0.0, gen_eval=0.0, disc_wass=0.0, disc_gp=0.0,
        )
    )
    best_epoch, best_w2 = 0, w2_0
    best_ckpt = _checkpoint(state, cfg_hash)
    diverged = False
    bad_epochs = 0

    n_batches = data.train.n // cfg.batch_size
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        perm = stream(cfg.seed, "shuffle", epoch).permutation(data.train.n)
        xp = data.train.x[perm]
        yp = data.train.y[perm]
        sums = {k: 0.0 for k in (
            "gen_adv", "gen_l1", "gen_sd", "gen_evec", "gen_eval", "disc_wass",
            "disc_gp",
        )}
        for bi in range(n_batches):
            lo = bi * cfg.batch_size
            batch = (xp[lo : lo + cfg.batch_size], yp[lo : lo + cfg.batch_size])
            for _ in range(cfg.n_disc):
                discriminator_step(state, batch)
            generator_step(state, batch)
            for key in sums:
                sums[key] += state.last_components.get(key, 0.0)
        w2_e, tr_e, al_e = _validate_epoch(state, oracle, scorer, val_ys, epoch + 1)
        state.sd = update_beta_sd(state.sd, _sd_monitor_stats(state, data, epoch + 1))
        rows.append(
            EpochRow(
                epoch=epoch + 1, mean_w2=w2_e, trace_ratio=tr_e, alignment=al_e,
                beta_sd=state.sd.beta_sd,
                gen_adv=sums["gen_adv"] / n_batches,
                gen_l1=sums["gen_l1"] / n_batches,
                gen_sd=sums["gen_sd"] / n_batches,
                gen_evec=sums["gen_evec"] / n_batches,
                gen_eval=sums["gen_eval"] / n_batches,
                disc_wass=sums["disc_wass"] / n_batches,
                disc_gp=sums["disc_gp"] / n_batches,
            )
        )
        if not rows[-1].is_finite():
            raise NumericalFailureError("non-finite epoch row at epoch %d" % (epoch + 1))
        if w2_e < best_w2:
            best_epoch, best_w2 = epoch + 1, w2_e
            best_ckpt = _checkpoint(state, cfg_hash)
        if w2_e > cfg.divergence_factor * max(w2_0, 1e-300):
            bad_epochs += 1
            if bad_epochs >= cfg.divergence_patience:
                log.warning("divergence detected at epoch %d; aborting", epoch + 1)
                diverged = True
                break
        else:
            bad_epochs = 0

    return RunRecord(
        config=cfg.to_dict(),
        seed=cfg.seed,
        rows=rows,
        best_epoch=best_epoch,
        best_w2=best_w2,
        checkpoint=best_ckpt,
        diverged=diverged,
        pca_steps=list(state.pca_steps),
    )
