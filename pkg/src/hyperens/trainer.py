"""Training loops.

``train_fixed`` minimizes the regularized empirical risk at one fixed λ.
``fit_hyper_batch`` trains a K-member hyper-batch network: after a warm-up
of pure training steps it alternates ``train_steps_per_tune`` parameter
steps (λ sampled per row from each member's distribution, Gibbs loss plus
the vectorized L2 term) with one step on the distribution bounds against
the entropy-regularized validation objective.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import hyperdist, layers, objectives
from .datastore.config import TrainPlan
from .diffcore import ops
from .diffcore.optim import optimizer_step
from .diffcore.rng import make_rng
from .diffcore.tensor import NonFiniteError, Tape
from .network import Network, softmax_np

log = logging.getLogger(__name__)

__all__ = [
    "HyperBatchState",
    "TrainPlan",
    "TrainedModel",
    "fit_hyper_batch",
    "train_fixed",
    "train_step",
    "tune_step",
    "write_trajectory_csv",
]


@dataclass
class TrainedModel:
    network: Network
    status: str = "ok"  # ok | failed
    lam: np.ndarray = None  # fixed λ, or (K, m) member means
    dists: list = None
    history: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    message: str = ""

    @property
    def is_regression(self):
        return self.network.n_out == 1 and self.history.get("task") == "regression"

    def member_outputs(self, X):
        return self.network.predict_members(X, self.lam)

    def predict_members(self, X):
        """(K, n, C) member probabilities, or (K, n) predictions for regression."""
        out = self.member_outputs(X)
        if self.is_regression:
            return out[..., 0]
        return softmax_np(out)

    def predict(self, X):
        return self.predict_members(X).mean(axis=0)

    def state_arrays(self):
        arrays = self.network.state_arrays()
        if self.lam is not None:
            arrays["lambda"] = np.asarray(self.lam, dtype=np.float64)
        if self.dists:
            arrays["dist.lower"] = np.stack([d.lower for d in self.dists])
            arrays["dist.upper"] = np.stack([d.upper for d in self.dists])
        return arrays


def _is_regression(data):
    return not data.is_classification


def _smoothing(loss_cfg, schema, lam_v):
    s = loss_cfg.label_smoothing
    if isinstance(s, str):
        return lam_v[..., schema.index(s)]
    return np.full(lam_v.shape[:-1], float(s)) if lam_v.ndim > 1 else float(s)


def _trainable(net, plan):
    named = net.params()
    keep = {n: p for n, p in named.items()
            if not any(n.split(".", 1)[1] == f or n.split(".", 1)[1].startswith(f)
                       for f in plan.freeze)}
    return list(keep.keys()), list(keep.values())


def _batches(n, batch_size, gen):
    perm = gen.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _eval_loss(model, data):
    if len(data) == 0:
        return float("nan")
    preds = model.predict_members(data.X)
    if _is_regression(data):
        return objectives.ensemble_mse(preds, data.y)
    return objectives.ensemble_nll(preds, data.y)


def train_fixed(spec, schema, lam, plan, rng, train, val, loss_cfg=None):
    """Train a plain network at fixed ``lam``.

    Divergence yields a ``failed`` model rather than an exception.
    """
    loss_cfg = loss_cfg or objectives.LossConfig()
    lam = schema.check(np.asarray(lam, dtype=np.float64))
    regression = _is_regression(train)
    n_out = 1 if regression else train.n_classes
    net = Network(spec, schema, train.X.shape[1:], n_out, "plain", 1, rng)
    model = TrainedModel(net, lam=lam, history={"task": "regression" if regression else "classification",
                                                 "train_loss": [], "step_loss": [], "val_loss": []})
    names, params = _trainable(net, plan)
    opt = plan.optimizer.state()
    shuffle_gen = rng.child("shuffle").generator()
    drop_gen = rng.child("dropout").generator()
    smoothing = _smoothing(loss_cfg, schema, lam)
    try:
        for _ in range(plan.epochs):
            losses = []
            for idx in _batches(len(train), plan.batch_size, shuffle_gen):
                Xb, yb = train.X[idx], train.y[idx]
                with Tape() as tape:
                    out = net.forward(Xb, lam, mode="train", gen=drop_gen)
                    if regression:
                        data_loss = objectives.gibbs_mse(out.reshape(1, len(idx)), yb)
                    else:
                        data_loss = objectives.smoothed_xent(out, yb, smoothing)
                    loss = data_loss + net.regularizer(lam)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("non-finite training loss")
                grads = tape.backward(loss, params)
                optimizer_step(opt, params, [grads[id(p)] for p in params], names)
                losses.append(loss.item())
            model.history["step_loss"].extend(losses)
            model.history["train_loss"].append(float(np.mean(losses)) if losses else float("nan"))
            model.history["val_loss"].append(_eval_loss(model, val))
    except (NonFiniteError, FloatingPointError, OverflowError) as exc:
        model.status = "failed"
        model.message = str(exc)
        log.info("training diverged at λ=%s: %s", lam, exc)
    return model


@dataclass
class HyperBatchState:
    """Everything a hyper-batch run mutates, passed to the step functions."""

    net: Network
    bounds: hyperdist.BoundParams
    schema: object
    plan: TrainPlan
    loss_cfg: objectives.LossConfig
    opt: object
    tune_opt: object
    names: list
    params: list
    regression: bool = False
    train_steps: int = 0
    tune_steps: int = 0
    warmup_steps: int = 0

    @property
    def K(self):
        return self.net.K

    def dists(self):
        return self.bounds.dists()

    def member_means(self):
        return np.stack([hyperdist.mean(d) for d in self.dists()])


@dataclass
class StepInfo:
    loss: float
    lam_rows: np.ndarray
    members: np.ndarray


def _train_lambdas(state, b, gen):
    """One λ per tiled row, shape (K*b, m)."""
    lo = state.bounds.log_lower.values[:, None, :]
    hi = state.bounds.log_upper.values[:, None, :]
    if state.plan.hyper_sampling == "mean":
        means = state.member_means()[:, None, :]
        return np.broadcast_to(means, (state.K, b, means.shape[-1])).reshape(state.K * b, -1).copy()
    u = gen.random((state.K, b, lo.shape[-1]))
    return np.exp(lo + u * (hi - lo)).reshape(state.K * b, -1)


def train_step(state, X, y, lambda_gen, dropout_gen):
    """One optimizer step on the network parameters with the bounds held fixed."""
    b = len(y)
    K = state.K
    lam_rows = _train_lambdas(state, b, lambda_gen)
    Xt, members, _ = layers.tile_minibatch(X, K)
    net = state.net
    with Tape() as tape:
        out = net.forward(Xt, lam_rows, members, mode="train", gen=dropout_gen)
        if state.regression:
            data_loss = objectives.gibbs_mse(out.reshape(K, b), y)
        else:
            smoothing = np.reshape(_smoothing(state.loss_cfg, state.schema, lam_rows), (K, b))
            data_loss = objectives.gibbs_loss(out.reshape(K, b, out.shape[-1]), y, smoothing)
        loss = data_loss + net.regularizer(lam_rows, members)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("non-finite training loss")
    grads = tape.backward(loss, state.params)
    optimizer_step(state.opt, state.params, [grads[id(p)] for p in state.params], state.names)
    state.train_steps += 1
    return StepInfo(loss.item(), lam_rows, members)


def tune_step(state, Xv, yv, gen):
    """One step on the (ln a, ln b) bounds against the validation objective, then project.

    A fresh λ is drawn per validation row and member; the network runs in
    eval mode and its parameters are not updated.
    """
    K, bv = state.K, len(yv)
    lo, hi = state.bounds.log_lower, state.bounds.log_upper
    m = lo.shape[-1]
    u = gen.random((K, bv, m))
    Xt, members, _ = layers.tile_minibatch(Xv, K)
    with Tape() as tape:
        lam = hyperdist.sample_tensor(lo.reshape(K, 1, m), hi.reshape(K, 1, m), u)
        lam = lam.reshape(K * bv, m)
        out = state.net.forward(Xt, lam, members, mode="eval")
        if state.regression:
            preds = out.reshape(K, bv)
            obj = objectives.validation_objective(preds, yv, state.bounds, state.loss_cfg.tau,
                                                  loss="ensemble_mse")
        else:
            probs = ops.softmax(out.reshape(K, bv, out.shape[-1]), axis=-1)
            obj = objectives.validation_objective(probs, yv, state.bounds, state.loss_cfg.tau)
    grads = tape.backward(obj, [lo, hi])
    optimizer_step(state.tune_opt, [lo, hi], [grads[id(lo)], grads[id(hi)]],
                   ["log_lower", "log_upper"])
    state.bounds.project_(state.schema)
    state.tune_steps += 1
    return obj.item()


def _trajectory_rows(epoch, state):
    rows = []
    for k, d in enumerate(state.dists()):
        mu = hyperdist.mean(d)
        for j, name in enumerate(state.schema.names):
            rows.append((epoch, k, name, float(d.lower[j]), float(d.upper[j]), float(mu[j])))
    return rows


def fit_hyper_batch(spec, schema, K, plan, rng, train, val, loss_cfg=None, init_dists=None):
    """Train a K-member hyper-batch ensemble with alternating tuning steps.

    With ``plan.hyper_sampling == "mean"`` the distributions stay frozen and
    every row uses its member's distribution mean; no tuning steps run.
    Otherwise the post-warm-up train/tune step counts keep the exact ratio
    ``train_steps_per_tune`` (the last cycle is completed with extra
    training batches if needed).
    """
    loss_cfg = loss_cfg or objectives.LossConfig()
    if K < 1:
        raise ValueError("K must be >= 1")
    regression = _is_regression(train)
    n_out = 1 if regression else train.n_classes
    net = Network(spec, schema, train.X.shape[1:], n_out, "hyper_batch", K, rng)
    if init_dists is None:
        init_dists = [hyperdist.MemberDistribution.full_range(schema, plan.shrink_l2_decades)
                      for _ in range(K)]
    if len(init_dists) != K:
        raise ValueError("need one initial distribution per member")
    bounds = hyperdist.BoundParams.from_dists(init_dists)
    bounds.project_(schema)
    names, params = _trainable(net, plan)
    state = HyperBatchState(net, bounds, schema, plan, loss_cfg, plan.optimizer.state(),
                            plan.tune_optimizer.state(), names, params, regression)
    history = {"task": "regression" if regression else "classification",
               "train_loss": [], "step_loss": [], "val_loss": [], "val_objective": []}
    model = TrainedModel(net, lam=state.member_means(), dists=state.dists(), history=history)

    shuffle_gen = rng.child("shuffle").generator()
    drop_gen = rng.child("dropout").generator()
    lambda_gen = rng.child("lambda").generator()
    tune_gen = rng.child("tune").generator()
    val_order = rng.child("val_order").generator().permutation(len(val))
    val_pos = 0
    tuning = plan.hyper_sampling == "sample" and len(val) > 0
    since_tune = 0

    def next_val_batch():
        nonlocal val_pos
        bv = min(plan.val_batch_size, len(val))
        idx = np.take(val_order, np.arange(val_pos, val_pos + bv), mode="wrap")
        val_pos = (val_pos + bv) % len(val)
        return val.X[idx], val.y[idx]

    def do_train(idx, warm):
        nonlocal since_tune
        info = train_step(state, train.X[idx], train.y[idx], lambda_gen, drop_gen)
        if warm:
            state.warmup_steps += 1
        elif tuning:
            since_tune += 1
            if since_tune == plan.train_steps_per_tune:
                history["val_objective"].append(tune_step(state, *next_val_batch(), tune_gen))
                since_tune = 0
        return info.loss

    model.trajectory.extend(_trajectory_rows(0, state))
    try:
        for epoch in range(plan.epochs):
            warm = epoch < plan.warmup_epochs
            losses = [do_train(idx, warm) for idx in _batches(len(train), plan.batch_size, shuffle_gen)]
            if epoch == plan.epochs - 1 and tuning and since_tune:
                extra = []
                while since_tune:
                    if not extra:
                        extra = _batches(len(train), plan.batch_size, shuffle_gen)
                    losses.append(do_train(extra.pop(0), False))
            history["step_loss"].extend(losses)
            history["train_loss"].append(float(np.mean(losses)) if losses else float("nan"))
            model.lam, model.dists = state.member_means(), state.dists()
            history["val_loss"].append(_eval_loss(model, val))
            model.trajectory.extend(_trajectory_rows(epoch + 1, state))
    except (NonFiniteError, FloatingPointError, OverflowError) as exc:
        model.status = "failed"
        model.message = str(exc)
        log.warning("hyper-batch training diverged: %s", exc)
    model.lam, model.dists = state.member_means(), state.dists()
    history["train_steps"] = state.train_steps
    history["tune_steps"] = state.tune_steps
    history["warmup_steps"] = state.warmup_steps
    return model


def write_trajectory_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "member", "hyper_name", "lower", "upper", "mean"])
        for epoch, member, name, lo, hi, mu in rows:
            w.writerow([epoch, member, name, repr(lo), repr(hi), repr(mu)])


def default_rng(seed, trial_id=0, purpose="train"):
    return make_rng(seed, trial_id, purpose)
