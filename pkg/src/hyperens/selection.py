"""Post-hoc ensemble construction from pools of trained models.

The greedy builder grows an ensemble with replacement, each step adding the
model whose inclusion gives the lowest validation NLL of the
multiplicity-weighted average prediction, and stops at the first step
without strict improvement. Hyper-deep ensembles run that builder on a
random-search pool, retrain the selected hyperparameters under several
initializations and run it again on the stratified grid.
"""

import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hyperdist, kernels
from .datastore.checkpoint import checkpoint_load, checkpoint_save
from .datastore.records import records_append
from .diffcore.rng import Rng, make_rng, stream_key
from .metrics import basic_metrics
from .objectives import PROB_FLOOR
from .trainer import train_fixed

log = logging.getLogger(__name__)

# relative margin a greedy step must beat the current best by
IMPROVEMENT_RTOL = 1e-12


class SelectionError(ValueError):
    pass


@dataclass
class ModelRecord:
    id: str
    lam: np.ndarray
    init_seed: int
    checkpoint: str = ""
    val_predictions: np.ndarray = None
    test_predictions: np.ndarray = None
    status: str = "ok"
    metrics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.status == "failed":
            self.val_predictions = self.test_predictions = None
        for name in ("val_predictions", "test_predictions"):
            p = getattr(self, name)
            if p is None:
                continue
            p = np.asarray(p, dtype=np.float64)
            if p.ndim != 2 or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError(f"record {self.id}: {name} rows must sum to 1")
            setattr(self, name, p)

    @property
    def ok(self):
        return self.status == "ok"

    def to_json(self):
        d = {"kind": "model", "id": self.id, "lam": self.lam.tolist(), "init_seed": self.init_seed,
             "checkpoint": self.checkpoint, "status": self.status, "metrics": self.metrics,
             "provenance": self.provenance}
        if not self.checkpoint:
            for name in ("val_predictions", "test_predictions"):
                p = getattr(self, name)
                d[name] = None if p is None else p.tolist()
        return d

    @classmethod
    def from_json(cls, d, load_predictions=True):
        rec = cls(d["id"], d["lam"], d["init_seed"], d.get("checkpoint", ""),
                  d.get("val_predictions"), d.get("test_predictions"), d.get("status", "ok"),
                  d.get("metrics", {}), d.get("provenance", {}))
        if load_predictions and rec.checkpoint and rec.ok and os.path.exists(rec.checkpoint):
            arrays = checkpoint_load(rec.checkpoint)
            rec.val_predictions = arrays.get("val_predictions")
            rec.test_predictions = arrays.get("test_predictions")
        return rec


@dataclass
class EnsembleSelection:
    members: list = field(default_factory=list)  # [(id, multiplicity)] in first-selection order
    history: list = field(default_factory=list)  # [(chosen id, score after adding it)]

    @property
    def size(self):
        return sum(m for _, m in self.members)

    @property
    def unique_count(self):
        return len(self.members)

    @property
    def ids(self):
        return [i for i, _ in self.members]

    @property
    def score(self):
        return self.history[-1][1] if self.history else float("inf")

    def weights(self):
        total = self.size
        return {i: m / total for i, m in self.members}

    def _add(self, rid, score):
        for j, (i, m) in enumerate(self.members):
            if i == rid:
                self.members[j] = (i, m + 1)
                break
        else:
            self.members.append((rid, 1))
        self.history.append((rid, score))

    def predictions(self, records, which="val"):
        by_id = {r.id: r for r in records}
        total = None
        for rid, mult in self.members:
            p = getattr(by_id[rid], f"{which}_predictions") * mult
            total = p if total is None else total + p
        return total / self.size

    def member_predictions(self, records, which="val"):
        """(unique members, n, C) stack, for diversity."""
        by_id = {r.id: r for r in records}
        return np.stack([getattr(by_id[rid], f"{which}_predictions") for rid in self.ids])

    def to_json(self):
        return {"kind": "selection", "members": [list(m) for m in self.members],
                "history": [list(h) for h in self.history]}


def _ok_sorted(records):
    ok = sorted((r for r in records if r.ok), key=lambda r: r.id)
    if not ok:
        raise SelectionError("no successfully trained records to select from")
    return ok


def _true_probs(records, labels, which="val"):
    labels = np.asarray(labels, dtype=np.intp)
    P = np.stack([getattr(r, f"{which}_predictions") for r in records])
    return P[:, np.arange(len(labels)), labels]


def nll_score(avg_probs, labels):
    labels = np.asarray(labels, dtype=np.intp)
    true = avg_probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(true, PROB_FLOOR))))


def single_scores(records, labels, score="nll"):
    if score == "nll":
        T = _true_probs(records, labels)
        return -np.mean(np.log(np.maximum(T, PROB_FLOOR)), axis=1)
    return np.array([score(r.val_predictions, labels) for r in records])


def hyper_ens(records, K, labels, score="nll", max_iter=None):
    """Greedy with-replacement selection; at most K distinct members.

    Candidates are scanned in id order so ties go to the lowest id. Once K
    distinct members are chosen, only those remain eligible. The loop ends at
    the first step without strict improvement or after ``max_iter``
    (default ``5 K``) additions.
    """
    if K < 1:
        raise SelectionError("K must be >= 1")
    pool = _ok_sorted(records)
    max_iter = 5 * K if max_iter is None else max_iter
    sel = EnsembleSelection()
    n_val = len(labels)
    if score == "nll":
        T = _true_probs(pool, labels)
        running = np.zeros(n_val)
    else:
        P = np.stack([r.val_predictions for r in pool])
        running = np.zeros(P.shape[1:])
    count = 0
    best = np.inf
    chosen = np.zeros(len(pool), dtype=bool)
    for _ in range(max_iter):
        if score == "nll":
            scores = kernels.greedy_scores(T, running, count, PROB_FLOOR)
        else:
            scores = np.array([score((running + P[j]) / (count + 1), labels) for j in range(len(pool))])
        if chosen.sum() >= K:
            scores = np.where(chosen, scores, np.inf)
        j = int(np.argmin(scores))
        new = float(scores[j])
        limit = best - IMPROVEMENT_RTOL * abs(best) if np.isfinite(best) else np.inf
        if not new < limit:
            break
        best = new
        chosen[j] = True
        running = running + (T[j] if score == "nll" else P[j])
        count += 1
        sel._add(pool[j].id, new)
    return sel


def top_k_select(records, K, labels, score="nll"):
    """The K best single models, uniformly weighted."""
    pool = _ok_sorted(records)
    if len(pool) < K:
        raise SelectionError(f"top-{K} needs {K} ok records, have {len(pool)}")
    s = single_scores(pool, labels, score)
    order = np.argsort(s, kind="stable")[:K]
    sel = EnsembleSelection()
    for j in order:
        sel.members.append((pool[j].id, 1))
    sel.history.append((pool[order[-1]].id, selection_score(sel, pool, labels, score)))
    return sel


def selection_score(sel, records, labels, score="nll"):
    avg = sel.predictions(records)
    return nll_score(avg, labels) if score == "nll" else score(avg, labels)


def uniform_selection(records, labels, score="nll"):
    sel = EnsembleSelection(members=[(r.id, 1) for r in records])
    sel.history.append((records[-1].id, selection_score(sel, records, labels, score)))
    return sel


def deep_ens(records, lam, K, labels, score="nll"):
    """Uniform ensemble of K records sharing hyperparameters ``lam`` (lowest ids first)."""
    lam = np.asarray(lam, dtype=np.float64)
    column = [r for r in _ok_sorted(records) if r.lam.shape == lam.shape and np.array_equal(r.lam, lam)]
    if len(column) < K:
        raise SelectionError(f"deep ensemble needs {K} records at the given λ, found {len(column)}")
    return uniform_selection(column[:K], labels, score)


def fixed_init_hyper_ens(records, K, labels, init_seed=None, score="nll"):
    """Greedy selection restricted to records sharing one initialization seed."""
    ok = _ok_sorted(records)
    if init_seed is None:
        seeds = {r.init_seed for r in ok}
        if len(seeds) != 1:
            raise SelectionError("records span several init seeds; pass init_seed")
        init_seed = seeds.pop()
    row = [r for r in ok if r.init_seed == init_seed]
    if not row:
        raise SelectionError(f"no records with init seed {init_seed}")
    return hyper_ens(row, K, labels, score)


# ---------------------------------------------------------------- training pools


@dataclass
class TrialContext:
    """Everything a worker needs to train and persist one candidate."""

    spec: object
    schema: object
    plan: object
    loss_cfg: object
    train: object
    val: object
    test: object = None
    ledger: str = ""
    checkpoint_dir: str = ""


def derive_seed(*parts):
    return stream_key(*parts) & 0x7FFFFFFFFFFFFFFF


def run_trial(ctx, rid, lam, init_seed, provenance=None):
    model = train_fixed(ctx.spec, ctx.schema, lam, ctx.plan, Rng(init_seed, stream_key("model")),
                        ctx.train, ctx.val, ctx.loss_cfg)
    rec = ModelRecord(rid, lam, init_seed, status=model.status, provenance=provenance or {})
    if model.status == "ok":
        val_p = model.predict(ctx.val.X)
        test_p = model.predict(ctx.test.X) if ctx.test is not None else None
        if not np.all(np.isfinite(val_p)) or (test_p is not None and not np.all(np.isfinite(test_p))):
            rec.status = "failed"
        else:
            rec.val_predictions, rec.test_predictions = val_p, test_p
            nll, acc, brier = basic_metrics(val_p, ctx.val.y)
            rec.metrics = {"val_nll": nll, "val_accuracy": acc, "val_brier": brier}
            if test_p is not None:
                nll, acc, brier = basic_metrics(test_p, ctx.test.y)
                rec.metrics.update(test_nll=nll, test_accuracy=acc, test_brier=brier)
    if rec.status == "failed":
        rec.metrics = {"val_nll": float("inf")}
        rec.val_predictions = rec.test_predictions = None
    if ctx.checkpoint_dir and rec.ok:
        rec.checkpoint = os.path.join(ctx.checkpoint_dir, f"{rid}.ckpt")
        arrays = model.state_arrays()
        arrays["val_predictions"] = rec.val_predictions
        if rec.test_predictions is not None:
            arrays["test_predictions"] = rec.test_predictions
        checkpoint_save(rec.checkpoint, arrays)
    if ctx.ledger:
        records_append(ctx.ledger, rec.to_json())
    return rec


def _run_trial_args(args):
    return run_trial(*args)


def run_trials(ctx, jobs, workers=1):
    """Train ``jobs`` = [(id, lam, init_seed, provenance)], in parallel if asked.

    Results come back in job order regardless of completion order.
    """
    if workers <= 1 or len(jobs) <= 1:
        return [run_trial(ctx, *job) for job in jobs]
    mp = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp) as pool:
        return list(pool.map(_run_trial_args, [(ctx, *job) for job in jobs]))


def rand_search(schema, spec, kappa, plan, rng, train, val, test=None, loss_cfg=None,
                ledger="", checkpoint_dir="", workers=1, done=None, id_prefix="rs"):
    """Train ``kappa`` models at log-uniformly drawn λ, each with its own init seed.

    ``done`` maps already-finished record ids to their records; those
    trials are skipped so an interrupted search resumes where it stopped.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    done = done or {}
    box = hyperdist.MemberDistribution.full_range(schema)
    jobs, out = [], {}
    for j in range(kappa):
        rid = f"{id_prefix}-{j:04d}"
        lam = hyperdist.sample(box, rng.child("rand_search", j).generator())
        init_seed = derive_seed(rng.seed, rng.stream_key, "init", j)
        if rid in done:
            out[rid] = done[rid]
        else:
            jobs.append((rid, lam, init_seed, {"trial": j}))
    ctx = TrialContext(spec, schema, plan, loss_cfg, train, val, test, ledger, checkpoint_dir)
    for rec in run_trials(ctx, jobs, workers):
        out[rec.id] = rec
    return [out[f"{id_prefix}-{j:04d}"] for j in range(kappa)]


@dataclass
class HyperDeepResult:
    selection: EnsembleSelection
    initial: EnsembleSelection
    search: list
    stratified: list
    provenance: dict  # id -> {"lambda_index": i, "seed_index": l}
    deep: EnsembleSelection
    deep_score: float
    dominates_deep: bool

    @property
    def records(self):
        return self.search + [r for r in self.stratified if r not in self.search]


def stratify(records, initial, K, ctx, rng, reuse_originals=False, workers=1, done=None):
    """Retrain each distinct selected λ under K initializations.

    Column ``l`` uses a seed shared across all λ, so each column is a
    fixed-init row of the grid. With ``reuse_originals`` the original model
    fills column 0 and only K-1 models are retrained per λ.
    """
    done = done or {}
    by_id = {r.id: r for r in records}
    out, jobs, order = {}, [], []
    for i, rid in enumerate(initial.ids):
        orig = by_id[rid]
        for l in range(K):
            prov = {"lambda_index": i, "seed_index": l, "source": rid}
            if reuse_originals and l == 0:
                orig.provenance = {**orig.provenance, **prov, "reused": True}
                out[orig.id] = orig
                order.append(orig.id)
                continue
            sid = f"st-{i:02d}-{l:02d}"
            order.append(sid)
            if sid in done:
                out[sid] = done[sid]
                continue
            jobs.append((sid, orig.lam, derive_seed(rng.seed, rng.stream_key, "stratify", l), prov))
    for rec in run_trials(ctx, jobs, workers):
        out[rec.id] = rec
    return [out[i] for i in order]


def hyper_deep_ens(K, kappa, spec, schema, plan, rng, train, val, test=None, loss_cfg=None,
                   reuse_originals=False, ledger="", checkpoint_dir="", workers=1, done=None):
    """Random search, greedy selection, stratified retraining, greedy selection again."""
    if K < 1 or kappa < K:
        raise ValueError("need K >= 1 and kappa >= K")
    labels = val.y
    search = rand_search(schema, spec, kappa, plan, rng, train, val, test, loss_cfg,
                         ledger, checkpoint_dir, workers, done)
    initial = hyper_ens(search, K, labels)
    ctx = TrialContext(spec, schema, plan, loss_cfg, train, val, test, ledger, checkpoint_dir)
    strat = stratify(search, initial, K, ctx, rng, reuse_originals, workers, done)
    provenance = {r.id: {"lambda_index": r.provenance["lambda_index"],
                         "seed_index": r.provenance["seed_index"]} for r in strat}
    final = hyper_ens(strat, K, labels)
    # the best single model is the greedy first pick, so its column is lambda_index 0
    column = [r for r in strat if r.provenance["lambda_index"] == 0 and r.ok]
    if len(column) >= 1:
        deep = uniform_selection(sorted(column, key=lambda r: r.provenance["seed_index"]), labels)
        deep_score = deep.score
    else:
        deep, deep_score = EnsembleSelection(), float("inf")
    dominates = final.score <= deep_score
    if not dominates:
        log.info("hyper-deep selection (%.6f) scored worse than its best column (%.6f)",
                 final.score, deep_score)
    return HyperDeepResult(final, initial, search, strat, provenance, deep, deep_score, dominates)


def default_search_rng(seed):
    return make_rng(seed, 0, "search")
