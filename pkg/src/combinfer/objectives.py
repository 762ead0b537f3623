"""Training objectives usable as propose loss hooks, plus weight diagnostics.

Every loss takes ``(rho_q, rho_p, log_w, log_v)``: the proposal and target
density maps, the incoming log weight and the incremental log weight of one
propose node. Softmax normalization runs over sample dim 0. Any remaining batch
dims are averaged.
"""

from __future__ import annotations

import numpy as np

from combinfer import autodiff as ad
from combinfer.core import log_mean_exp
from combinfer.errors import DegenerateWeights


def density_total(rho, addresses=None) -> ad.Tensor:
    total = ad.Tensor(0.0)
    for address, lp in rho.items():
        if addresses is None or address in addresses:
            total = total + lp
    return total


def normalized_weights(log_w) -> ad.Tensor:
    """Detached softmax over dim 0."""
    lw = ad.detach(log_w)
    if np.any(np.all(np.isneginf(lw.data), axis=0)):
        raise DegenerateWeights("all importance weights are zero")
    return ad.detach(ad.softmax(lw, axis=0))


def _weighted(weights, values) -> ad.Tensor:
    total = ad.sum(weights * values, axis=0)
    return ad.mean(total) if total.ndim else total


def _safe(values: ad.Tensor) -> ad.Tensor:
    # -inf densities at zero-weight samples would otherwise turn 0 * -inf into nan.
    bad = ~np.isfinite(values.data)
    return ad.where(bad, 0.0, values) if bad.any() else values


def svi_loss(rho_q, rho_p, log_w, log_v) -> ad.Tensor:
    """Negative stochastic lower bound, ``-mean(log w + log v)``."""
    return -ad.mean(log_w + log_v)


def rws_theta_loss(rho_q, rho_p, log_w, log_v) -> ad.Tensor:
    """Self-normalized surrogate whose gradient estimates the gradient of ``log Z``."""
    w_out = normalized_weights(log_w + log_v)
    lp = ad.broadcast_to(density_total(rho_p), w_out.shape)
    return -_weighted(w_out, _safe(lp))


def _is_weightless(log_w) -> bool:
    return bool(np.all(ad.as_tensor(log_w).data == 0))


def rws_phi_loss(rho_q, rho_p, log_w, log_v) -> ad.Tensor:
    """Forward-KL surrogate for the proposal. Uses ``w_out - w_in`` unless the proposal is weightless."""
    w_out = normalized_weights(log_w + log_v)
    coeff = w_out if _is_weightless(log_w) else w_out - normalized_weights(log_w)
    lq = ad.broadcast_to(density_total(rho_q), coeff.shape)
    return -_weighted(coeff, _safe(lq))


def rws_loss(rho_q, rho_p, log_w, log_v) -> ad.Tensor:
    return rws_theta_loss(rho_q, rho_p, log_w, log_v) + rws_phi_loss(rho_q, rho_p, log_w, log_v)


def nvi_loss(
    divergence="reverse",
    learn_target=False,
    normalizer=None,
    self_normalize=True,
    incoming_normalizer=None,
):
    """Build a per-level loss for nested variational inference.

    ``divergence`` is ``"reverse"`` (reparameterized, ``-log v`` weighted by the
    incoming self-normalized weights, or uniformly when ``self_normalize`` is
    off) or ``"forward"`` (the self-normalized difference estimator on the
    proposal density).

    With ``learn_target`` the loss adds the gradient of the log normalizer of
    this level's target. ``normalizer(rho_p)`` must return per-sample log
    target densities that carry gradients to target parameters only. When it is
    omitted the full target density map is used.

    ``incoming_normalizer(rho_q)`` does the same for the previous level's
    target when that target is learned. Its samples are distributed by that
    target, so a baseline-corrected score term carries the dependence of this
    level's loss on the previous target's parameters.
    """
    if divergence not in ("reverse", "forward"):
        raise ValueError(f"unknown divergence {divergence!r}")

    def loss(rho_q, rho_p, log_w, log_v):
        if self_normalize:
            w_in = normalized_weights(log_w)
        else:
            shape = ad.as_tensor(log_v).shape
            w_in = ad.Tensor(np.full(shape, 1.0 / shape[0]))
        if divergence == "reverse":
            total = _weighted(w_in, _safe(-log_v))
        else:
            w_out = normalized_weights(log_w + log_v)
            lq = ad.broadcast_to(density_total(rho_q), w_out.shape)
            total = -_weighted(w_out - w_in, _safe(lq))
        if learn_target:
            w_out = normalized_weights(log_w + ad.detach(log_v))
            lp = normalizer(rho_p) if normalizer else density_total(rho_p)
            lp = ad.broadcast_to(lp, w_out.shape)
            sign = 1.0 if divergence == "reverse" else -1.0
            total = total + sign * _weighted(w_out, _safe(lp))
        if incoming_normalizer is not None:
            f = ad.detach(_safe(-ad.as_tensor(log_v)))
            centered = ad.detach(f - ad.sum(w_in * f, axis=0))
            lq = ad.broadcast_to(incoming_normalizer(rho_q), centered.shape)
            total = total + _weighted(w_in, centered * _safe(lq))
        return total

    return loss


def log_z_hat(log_w, dim: int = 0) -> float:
    """``log((1/L) sum w)`` along ``dim``, averaged over any other dims."""
    value = log_mean_exp(ad.detach(ad.as_tensor(log_w)), dim).data
    return float(np.mean(value))


def ess(log_w, dim: int = 0) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``; zero when every weight is zero."""
    lw = np.moveaxis(np.asarray(ad.as_tensor(log_w).data, dtype=np.float64), dim, 0)
    m = lw.max(axis=0)
    if np.any(np.isneginf(m)):
        return 0.0
    shifted = lw - m
    value = np.exp(2.0 * np.log(np.exp(shifted).sum(axis=0)) - np.log(np.exp(2.0 * shifted).sum(axis=0)))
    return float(np.mean(value))

