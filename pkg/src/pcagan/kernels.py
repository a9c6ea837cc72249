"""Hot numeric kernels: fused loss values + closed-form gradients.

The generator and critic are affine maps, so every shipped loss has an
exact hand-derived gradient; these kernels compute value and gradient in
one pass over a batch.  Each function is written once in a
numba-compatible numpy dialect.  On import the module JIT-compiles them
with ``@njit(cache=True)`` unless the environment variable
``PCAGAN_NO_NUMBA`` is set to a non-empty value other than ``0``, in which
case the plain numpy versions run as-is.  ``PLAIN`` always holds the
uncompiled functions (used by the backend-parity tests and by
``python -m pcagan.bench``).

Gradient conventions
--------------------
* Sample means used for centering and the eigenvalue estimator are
  stop-gradient constants: their dependence on the parameters contributes
  nothing to any gradient here.
* sign(0) = 0, so the l1 subgradient at a kink is 0.
* Eigen-gaps smaller than 1e-12 of the top eigenvalue are treated as
  degenerate and their (ill-defined) gradient contribution is dropped.
"""

from __future__ import annotations

import os

import numpy as np

_GAP_REL_FLOOR = 1e-12


def rc_step_value_grad(A, B, bv, wx, wy, c, X, Y, Z, beta_adv, l1_weight, beta_sd):
    """Adversarial + l1-to-sample-mean + spread-reward terms for one batch.

    A (d,d), B (d,dz), bv (d,): generator.  wx, wy (d,), c: frozen critic.
    X, Y (Bn,d): truths and measurements.  Z (Bn,P,dz): code draws.

    Returns (adv_sum, l1_sum, sd_sum, dA, dB, db): signed, weighted
    contributions summed over batch rows, and the gradient of their total
    with respect to the generator parameters.
    """
    Bn, d = X.shape
    P = Z.shape[1]
    base = Y @ np.ascontiguousarray(A.T) + bv  # (Bn, d)

    xh = np.empty((P, Bn, d))
    for i in range(P):
        zi = np.ascontiguousarray(Z[:, i, :])
        xh[i] = base + zi @ np.ascontiguousarray(B.T)

    xbar = np.zeros((Bn, d))
    for i in range(P):
        xbar += xh[i]
    xbar /= P

    crit_y = Y @ wy + c  # (Bn,)
    tot = 0.0
    for i in range(P):
        tot += np.sum(xh[i] @ wx + crit_y)
    adv_sum = -beta_adv * tot

    diff1 = X - xbar
    sgn1 = np.sign(diff1)
    l1_sum = l1_weight * np.sum(np.abs(diff1))

    sd_raw = 0.0
    sgn_i = np.empty((P, Bn, d))
    sgn_mean = np.zeros((Bn, d))
    for i in range(P):
        di = xh[i] - xbar
        sd_raw += np.sum(np.abs(di))
        sgn_i[i] = np.sign(di)
        sgn_mean += sgn_i[i]
    sgn_mean /= P
    sd_sum = -beta_sd * sd_raw

    dA = np.zeros((d, d))
    dB = np.zeros((B.shape[0], B.shape[1]))
    db = np.zeros(d)
    for i in range(P):
        g = (-l1_weight / P) * sgn1 - beta_sd * (sgn_i[i] - sgn_mean)
        g -= beta_adv * np.ones((Bn, 1)) * wx.reshape(1, d)
        gt = np.ascontiguousarray(g.T)
        dA += gt @ Y
        dB += gt @ np.ascontiguousarray(Z[:, i, :])
        db += g.sum(axis=0)
    return adv_sum, l1_sum, sd_sum, dA, dB, db


def pca_step_value_grad(
    A, B, bv, X, Y, Z, k_top, beta_evec, beta_eval, include_eval, lam_scale,
    lam_floor_rel,
):
    """Eigenvector and eigenvalue regularizers for one batch.

    Z (Bn,P,dz) holds the regularization code draws.  Per batch row, P
    samples are generated, centered on their (stop-gradient) mean, and the
    top k_top right singular vectors/values of the centered matrix drive

      evec term: -beta_evec * sum_k (v_k . (x - mu))^2
      eval term: +beta_eval * sum_k (1 - lam_tilde_k / lam_hat_k)^2

    with lam_hat_k = lam_scale * s_k^2 and lam_tilde_k the stop-gradient
    (P+1)-sample average of the squared projections of [x - mu; centered
    samples] onto v_k.  The eval term flows only through lam_hat; terms
    with lam_hat below lam_floor_rel * lam_hat_1 are skipped and counted.

    Returns (evec_sum, eval_sum, n_skipped, dA, dB, db).
    """
    Bn, d = X.shape
    P = Z.shape[1]
    dz = B.shape[1]

    evec_sum = 0.0
    eval_sum = 0.0
    n_skipped = 0
    dA = np.zeros((d, d))
    dB = np.zeros((d, dz))
    db = np.zeros(d)

    for b in range(Bn):
        yb = Y[b]
        zb = np.ascontiguousarray(Z[b])  # (P, dz)
        samples = zb @ np.ascontiguousarray(B.T) + (A @ yb + bv).reshape(1, d)
        mu = samples.sum(axis=0) / P  # stop-gradient
        xc = samples - mu.reshape(1, d)

        u, s, vh = np.linalg.svd(xc, full_matrices=False)
        kdim = s.shape[0]
        sigma = s * s
        r = X[b] - mu

        vk = np.ascontiguousarray(vh[:k_top])  # (k_top, d)
        e = vk @ r  # projections of the residual
        evec_sum += -beta_evec * np.sum(e * e)

        # cotangents: gmat columns are dL/dv_k; sig_bar is dL/dsigma_k
        gmat = np.zeros((d, k_top))
        for k in range(k_top):
            gmat[:, k] = (-2.0 * beta_evec * e[k]) * r
        sig_bar = np.zeros(k_top)

        if include_eval:
            proj = xc @ np.ascontiguousarray(vk.T)  # (P, k_top)
            lam_hat_1 = sigma[0] * lam_scale if kdim > 0 else 0.0
            floor = lam_floor_rel * lam_hat_1
            for k in range(k_top):
                lam_hat = sigma[k] * lam_scale
                if lam_hat <= floor or lam_hat <= 0.0:
                    n_skipped += 1
                    continue
                lam_tilde = (e[k] * e[k] + np.sum(proj[:, k] ** 2)) / (P + 1.0)
                ratio = lam_tilde / lam_hat
                eval_sum += beta_eval * (1.0 - ratio) ** 2
                sig_bar[k] += beta_eval * 2.0 * (1.0 - ratio) * ratio / lam_hat * lam_scale

        # eigen backward.  With C = xc^T xc = V diag(sigma) V^T:
        #   w_k = sum_{m != k} v_m (v_m . g_k) / (sigma_k - sigma_m)
        #         + (g_k - V V^T g_k) / sigma_k            [complement space]
        #   xc_bar = xc (M + M^T),  M = sum_k sigma_bar_k v_k v_k^T + w_k v_k^T
        gap_floor = _GAP_REL_FLOOR * max(sigma[0], 1e-300)
        vt = np.ascontiguousarray(vh.T)  # (d, kdim)
        tmat = vh @ gmat  # (kdim, k_top): basis coefficients of each g_k
        wmat = np.zeros((d, k_top))
        for k in range(k_top):
            coef = np.zeros(kdim)
            for m in range(kdim):
                if m == k:
                    continue
                gap = sigma[k] - sigma[m]
                if abs(gap) <= gap_floor:
                    continue
                coef[m] = tmat[m, k] / gap
            wk = vt @ coef
            if kdim < d and sigma[k] > gap_floor:
                wk += (gmat[:, k] - vt @ np.ascontiguousarray(tmat[:, k])) / sigma[k]
            wmat[:, k] = wk

        pk = xc @ np.ascontiguousarray(vk.T)  # (P, k_top) = xc v_k
        xc_bar = (2.0 * pk * sig_bar.reshape(1, k_top)) @ vk
        xc_bar += (xc @ wmat) @ vk
        xc_bar += pk @ np.ascontiguousarray(wmat.T)

        gsum = xc_bar.sum(axis=0)
        dA += gsum.reshape(d, 1) * yb.reshape(1, d)
        dB += np.ascontiguousarray(xc_bar.T) @ zb
        db += gsum
    return evec_sum, eval_sum, n_skipped, dA, dB, db


def disc_step_value_grad(wx, wy, c, A, B, bv, X, Y, Z, gp_weight):
    """Critic loss -[D(x,y) - mean_i D(xh_i,y)] + gradient penalty.

    For the affine critic the input-gradient is wx for every interpolate,
    so the penalty is gp_weight * (||wx|| - 1)^2 per sample independent of
    the interpolation point.

    Returns (wass_sum, gp_sum, dwx, dwy, dc) summed over batch rows.
    """
    Bn, d = X.shape
    P = Z.shape[1]
    base = Y @ np.ascontiguousarray(A.T) + bv

    d_true = X @ wx + Y @ wy + c  # (Bn,)
    d_fake_mean = np.zeros(Bn)
    xh_mean = np.zeros((Bn, d))
    for i in range(P):
        xh = base + np.ascontiguousarray(Z[:, i, :]) @ np.ascontiguousarray(B.T)
        d_fake_mean += xh @ wx + Y @ wy + c
        xh_mean += xh
    d_fake_mean /= P
    xh_mean /= P

    wass_sum = np.sum(d_fake_mean - d_true)
    dwx = (xh_mean - X).sum(axis=0)
    dwy = np.zeros(d)
    dc = 0.0

    gnorm = np.sqrt(np.sum(wx * wx))
    gp_sum = Bn * gp_weight * (gnorm - 1.0) ** 2
    if gnorm > 0.0:
        dwx += Bn * gp_weight * 2.0 * (gnorm - 1.0) / gnorm * wx
    return wass_sum, gp_sum, dwx, dwy, dc


def adam_kernel(values, grad, m, v, t, lr, b1, b2, eps):
    """One bias-corrected Adam update; pure function of its inputs."""
    m_new = b1 * m + (1.0 - b1) * grad
    v_new = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m_new / (1.0 - b1 ** t)
    v_hat = v_new / (1.0 - b2 ** t)
    values_new = values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return values_new, m_new, v_new


PLAIN = {
    "rc_step_value_grad": rc_step_value_grad,
    "pca_step_value_grad": pca_step_value_grad,
    "disc_step_value_grad": disc_step_value_grad,
    "adam_kernel": adam_kernel,
}

_flag = os.environ.get("PCAGAN_NO_NUMBA", "").strip()
if _flag and _flag != "0":
    BACKEND = "numpy"
else:
    try:
        from numba import njit

        _jit = njit(cache=True)
        rc_step_value_grad = _jit(rc_step_value_grad)
        pca_step_value_grad = _jit(pca_step_value_grad)
        disc_step_value_grad = _jit(disc_step_value_grad)
        adam_kernel = _jit(adam_kernel)
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        BACKEND = "numpy"
