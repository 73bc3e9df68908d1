"""Losses and regularizers for fixed-λ, self-tuning and hyper-batch training."""

import logging
from dataclasses import dataclass

import numpy as np

from . import hyperdist
from .diffcore import ops
from .diffcore.tensor import NonFiniteError, Tensor, as_tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# number of probabilities clamped at PROB_FLOOR since import
clamp_count = 0


@dataclass
class LossConfig:
    train_loss: str = "gibbs_ce"  # gibbs_ce | gibbs_mse
    val_loss: str = "ensemble_nll"  # ensemble_nll | ensemble_mse
    label_smoothing: object = 0.0  # fixed scalar or a λ entry name
    tau: float = 1e-3

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.train_loss not in ("gibbs_ce", "gibbs_mse"):
            raise ValueError(f"unknown train_loss {self.train_loss!r}")
        if self.val_loss not in ("ensemble_nll", "ensemble_mse"):
            raise ValueError(f"unknown val_loss {self.val_loss!r}")
        if not isinstance(self.label_smoothing, str) and not 0 <= self.label_smoothing <= 0.3:
            raise ValueError("label smoothing must lie in [0, 0.3]")


def smoothed_xent(logits, labels, smoothing=0.0):
    """Mean cross entropy against targets (1 - s) onehot + s / C.

    ``smoothing`` is a scalar or one value per row.
    """
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.values)):
        raise NonFiniteError("non-finite logits")
    labels = np.asarray(labels, dtype=np.intp)
    n, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels outside [0, {C})")
    s = np.broadcast_to(np.asarray(smoothing, dtype=np.float64), (n,))
    if np.any(s < 0) or np.any(s >= 1):
        raise ValueError("smoothing must lie in [0, 1)")
    targets = np.repeat((s / C)[:, None], C, axis=1)
    targets[np.arange(n), labels] += 1.0 - s
    logp = ops.log_softmax(logits, axis=-1)
    return -(logp * targets).sum() * (1.0 / n)


def gibbs_loss(member_logits, labels, smoothing=0.0):
    """Mean over members of the smoothed cross entropy.

    ``member_logits`` is (K, b, C); ``labels`` (b,) or (K, b); smoothing a
    scalar, (b,), or (K, b).
    """
    member_logits = as_tensor(member_logits)
    K, b, C = member_logits.shape
    labels = np.broadcast_to(np.asarray(labels), (K, b)).reshape(-1)
    smoothing = np.broadcast_to(np.asarray(smoothing, dtype=np.float64), (K, b)).reshape(-1)
    flat = ops.reshape(member_logits, (K * b, C))
    return smoothed_xent(flat, labels, smoothing)


def gibbs_mse(member_preds, targets):
    member_preds = as_tensor(member_preds)
    K, b = member_preds.shape[:2]
    flat = ops.reshape(member_preds, (K * b,))
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), (K, b)).reshape(-1)
    return ops.square(flat - t).mean()


def _clamped_log(p):
    global clamp_count
    if isinstance(p, Tensor):
        n = int(np.sum(p.values <= PROB_FLOOR))
        out = ops.log(ops.clip_min(p, PROB_FLOOR))
    else:
        n = int(np.sum(p <= PROB_FLOOR))
        out = np.log(np.maximum(p, PROB_FLOOR))
    if n:
        clamp_count += n
        log.warning("clamped %d probabilities at %g before log", n, PROB_FLOOR)
    return out


def ensemble_nll(member_probs, labels):
    """-mean log of the member-averaged probability of the true class.

    Works on numpy arrays or tensors of shape (K, b, C).
    """
    labels = np.asarray(labels, dtype=np.intp)
    if isinstance(member_probs, Tensor):
        K, b, C = member_probs.shape
        avg = member_probs.mean(axis=0)
        true = avg[np.arange(b), labels]
        return -_clamped_log(true).mean()
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim == 2:
        member_probs = member_probs[None]
    sums = member_probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    avg = member_probs.mean(axis=0)
    return float(-np.mean(_clamped_log(avg[np.arange(avg.shape[0]), labels])))


def ensemble_mse(member_preds, targets):
    if isinstance(member_preds, Tensor):
        avg = member_preds.mean(axis=0)
        return ops.square(avg - np.asarray(targets, dtype=np.float64)).mean()
    avg = np.asarray(member_preds).mean(axis=0)
    return float(np.mean((avg - targets) ** 2))


def ensemble_xent(member_logits, labels):
    """Cross entropy of the averaged prediction; evaluation only."""
    probs = ops.softmax(as_tensor(member_logits), axis=-1)
    return ensemble_nll(probs, labels)


def _factor_weights(layer):
    """Per-member (W_k, Δ_k) tensors of shape (K, n, c_out) with n the flattened fan-in."""
    W, Delta = layer.W, layer.Delta
    K = layer.K
    c_out = W.shape[-1]
    n = int(np.prod(W.shape[:-1]))
    ci = W.shape[-2]
    Wf = ops.reshape(W, (1, n, c_out))
    Df = ops.reshape(Delta, (1, n, c_out))
    if not layer.regularize_rank1:
        return Wf, Df
    reps = n // ci

    def spread(vec):  # (K, ci) -> (K, n, 1) matching the flattened (l, l, ci) layout
        v = ops.reshape(vec, (K, 1, ci))
        if reps > 1:
            v = ops.concat([v] * reps, axis=1)
        return ops.reshape(v, (K, n, 1))

    rs = spread(layer.r) * ops.reshape(layer.s, (K, 1, c_out))
    uv = spread(layer.u) * ops.reshape(layer.v, (K, 1, c_out))
    return Wf * rs, Df * uv


def l2_reg_vectorized(layer, member_index, lam, nu_weight, nu_bias=None):
    """(1/N) Σ_rows ν_row ‖W_k(λ_row)‖² + ν'_row ‖b_k(λ_row)‖² via member moments.

    ``nu_weight``/``nu_bias`` hold one L2 strength per row (already extracted
    from λ). With ``layer.regularize_rank1`` unset, the rank-1 factors are
    excluded: W and Δ are penalized without them. Bias terms always include
    b_k and δ_k.
    """
    member_index = np.asarray(member_index, dtype=np.intp)
    N = member_index.size
    K = layer.K
    nu_w = np.asarray(nu_weight, dtype=np.float64)
    onehot = np.zeros((K, N))
    onehot[member_index, np.arange(N)] = 1.0
    e, e2 = layer.embedding(lam)

    Wk, Dk = _factor_weights(layer)  # (K or 1, n, c_out)
    s_nu = onehot @ nu_w  # (K,)
    s_nue = Tensor(onehot * nu_w[None, :]) @ e  # (K, c_out)
    s_nue2 = Tensor(onehot * nu_w[None, :]) @ ops.square(e)
    w2 = ops.square(Wk).sum(axis=1)  # (K|1, c_out)
    wd = (Wk * Dk).sum(axis=1)
    d2 = ops.square(Dk).sum(axis=1)
    total = (w2.sum(axis=1) * s_nu).sum() + 2.0 * (wd * s_nue).sum() + (d2 * s_nue2).sum()

    if nu_bias is not None:
        nu_b = np.asarray(nu_bias, dtype=np.float64)
        t_nu = onehot @ nu_b
        t_nue = Tensor(onehot * nu_b[None, :]) @ e2
        t_nue2 = Tensor(onehot * nu_b[None, :]) @ ops.square(e2)
        b, d = layer.b, layer.delta
        total = total + (ops.square(b).sum(axis=1) * t_nu).sum() \
            + 2.0 * ((b * d) * t_nue).sum() + (ops.square(d) * t_nue2).sum()
    return total * (1.0 / N)


def l2_reg_plain(layer, nu_weight, nu_bias=None):
    """ν̄‖W‖² + ν̄'‖b‖² for a plain layer, ν̄ the mean of per-row strengths."""
    nu_w = float(np.mean(nu_weight))
    W = layer.W if hasattr(layer, "W") else layer.K
    total = ops.square(W).sum() * nu_w
    if nu_bias is not None:
        total = total + ops.square(layer.b).sum() * float(np.mean(nu_bias))
    return total


def validation_objective(member_probs, labels, bounds, tau, loss="ensemble_nll"):
    """Ensemble NLL minus tau times the summed member entropies.

    ``bounds`` is a :class:`~hyperens.hyperdist.BoundParams` (tensor path) or
    a list of MemberDistribution (value path). For regression pass member
    predictions, real targets and ``loss="ensemble_mse"``.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if loss == "ensemble_mse":
        nll = ensemble_mse(member_probs, labels)
    else:
        nll = ensemble_nll(member_probs, labels)
    if isinstance(bounds, hyperdist.BoundParams):
        H = hyperdist.entropy_tensor(bounds.log_lower, bounds.log_upper)
        return nll - H * tau
    return nll - tau * hyperdist.joint_entropy(bounds)
