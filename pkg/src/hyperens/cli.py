"""Command-line driver.

Every command reads an experiment config (YAML, plus ``--set key=value``
overrides), writes into an output directory and can be re-run safely:
trials whose ids are already in the ledger are skipped.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import bestresponse, hyperdist, metrics, selection, trainer
from .datastore import (
    ConfigError,
    checkpoint_load,
    checkpoint_save,
    dump_config,
    load_config,
    load_data,
    records_append,
    records_scan,
    repair,
)
from .diffcore.rng import make_rng
from .network import Network, softmax_np

log = logging.getLogger("hyperens")

COMMANDS = ("train", "random-search", "select", "stratify", "fit-hyper-batch", "evaluate",
            "ood-eval", "bestresponse", "report")
LEDGER = "ledger.jsonl"


class UsageError(Exception):
    """Bad input that is not a config problem (missing artifact, unknown id)."""


def build_parser():
    p = argparse.ArgumentParser(prog="hyperens", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--out", help="output directory (default: $HYPERENS_OUT or ./hyperens_out)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--kappa", type=int, help="number of random-search trials")
    p.add_argument("--k", type=int, help="ensemble size K")
    p.add_argument("--workers", type=int, help="parallel trial workers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--pool", choices=("search", "stratified"), default="search",
                   help="record pool used by `select`")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


class Run:
    """Resolved config, data and paths for one invocation."""

    def __init__(self, args):
        overrides = list(args.set)
        for flag, key in (("seed", "seed"), ("kappa", "kappa"), ("k", "K"), ("workers", "workers")):
            if getattr(args, flag) is not None:
                overrides.append(f"{key}={getattr(args, flag)}")
        self.cfg = load_config(args.config, overrides)
        self.out = args.out or os.environ.get("HYPERENS_OUT") or "hyperens_out"
        os.makedirs(os.path.join(self.out, "checkpoints"), exist_ok=True)
        self.ledger = os.path.join(self.out, LEDGER)
        cfg = self.cfg
        full, self.test = load_data(cfg.data)
        self.train, self.val = full.split_off(cfg.plan.val_fraction, cfg.data.seed)
        n_param = sum(1 for l in cfg.model.layers if l["type"] in ("dense", "conv")) + 1
        self.schema = cfg.hyper_schema(n_param)
        dump_config(cfg, os.path.join(self.out, "config.yaml"))

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def ctx(self):
        return selection.TrialContext(self.cfg.model, self.schema, self.cfg.plan, self.cfg.loss,
                                      self.train, self.val, self.test, self.ledger,
                                      self.path("checkpoints"))

    def records(self, load=True):
        repair(self.ledger)
        scan = records_scan(self.ledger)
        out = {}
        for d in scan.records:
            if d.get("kind") == "model":
                out[d["id"]] = selection.ModelRecord.from_json(d, load_predictions=load)
        return out

    def rng(self, purpose):
        return make_rng(self.cfg.seed, 0, purpose)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise UsageError(f"missing artifact {path}; run the producing command first")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _fmt(v):
    return "" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))


def cmd_train(run):
    cfg = run.cfg
    if cfg.fixed_lambda:
        unknown = set(cfg.fixed_lambda) - set(run.schema.names)
        if unknown:
            raise ConfigError("fixed_lambda", f"unknown hyperparameters {sorted(unknown)}")
        lam = np.array([cfg.fixed_lambda.get(n, 0.0) for n in run.schema.names], dtype=np.float64)
        missing = [n for n in run.schema.names if n not in cfg.fixed_lambda]
        if missing:
            raise ConfigError("fixed_lambda", f"missing values for {missing}")
    else:
        lam = hyperdist.mean(hyperdist.MemberDistribution.full_range(run.schema))
    if "train-0000" in run.records(load=False):
        print("train-0000 already complete")
        return 0
    seed = selection.derive_seed(cfg.seed, "train")
    rec = selection.run_trial(run.ctx(), "train-0000", lam, seed, {"command": "train"})
    print(f"train-0000 status={rec.status} val_nll={rec.metrics.get('val_nll')}")
    return 0 if rec.ok else 2


def cmd_random_search(run):
    cfg = run.cfg
    done = run.records()
    recs = selection.rand_search(run.schema, cfg.model, cfg.kappa, cfg.plan, run.rng("search"),
                                 run.train, run.val, run.test, cfg.loss, run.ledger,
                                 run.path("checkpoints"), cfg.workers, done)
    ok = sum(r.ok for r in recs)
    print(f"random search: {len(recs)} records ({ok} ok) in {run.ledger}")
    return 0


def _pool(run, which):
    recs = run.records()
    if which == "search":
        pool = [r for r in recs.values() if not r.id.startswith(("st-", "train-"))]
    else:
        pool = [r for r in recs.values() if "seed_index" in r.provenance]
    if not pool:
        raise UsageError(f"no {which} records in {run.ledger}")
    return pool


def _write_selection(run, sel, name, pool):
    _write_json(run.path(f"{name}.json"), sel.to_json())
    with open(run.path(f"{name}_trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "chosen_id", "score"])
        for i, (rid, score) in enumerate(sel.history):
            w.writerow([i + 1, rid, _fmt(score)])
    with open(run.path(f"{name}_members.csv"), "w", newline="") as f:
        w = csv.writer(f)
        by_id = {r.id: r for r in pool}
        w.writerow(["id", "multiplicity", "init_seed"] + list(run.schema.names))
        for rid, mult in sel.members:
            w.writerow([rid, mult, by_id[rid].init_seed] + [_fmt(v) for v in by_id[rid].lam])


def cmd_select(run, pool_name):
    pool = _pool(run, pool_name)
    sel = selection.hyper_ens(pool, run.cfg.K, run.val.y)
    name = "selection" if pool_name == "search" else "hyper_deep_selection"
    _write_selection(run, sel, name, pool)
    for step, (rid, score) in enumerate(sel.history, 1):
        print(f"step {step}: add {rid} -> val NLL {score:.6f}")
    print(f"{sel.unique_count} unique members, size {sel.size}")
    return 0


def cmd_stratify(run):
    cfg = run.cfg
    sel_json = _read_json(run.path("selection.json"))
    initial = selection.EnsembleSelection([tuple(m) for m in sel_json["members"]],
                                          [tuple(h) for h in sel_json["history"]])
    done = run.records()
    missing = [rid for rid in initial.ids if rid not in done]
    if missing:
        raise UsageError(f"selection references unknown records {missing}")
    search = list(done.values())
    unmarked = {rid for rid, r in done.items() if "seed_index" not in r.provenance}
    strat = selection.stratify(search, initial, cfg.K, run.ctx(), run.rng("search"),
                               cfg.reuse_originals, cfg.workers, done)
    # reused originals gain provenance in memory only; persist it so `select --pool stratified` finds them
    reused = [r for r in strat if r.provenance.get("reused") and r.id in unmarked]
    if reused:
        records_append(run.ledger, *[r.to_json() for r in reused])
    print(f"stratified set: {len(strat)} models")
    return 0


def _hyper_batch_network(run, arrays):
    K = arrays["lambda"].shape[0]
    regression = not run.train.is_classification
    net = Network(run.cfg.model, run.schema, run.train.X.shape[1:],
                  1 if regression else run.train.n_classes, "hyper_batch", K)
    net.load_state(arrays)
    return net


def cmd_fit_hyper_batch(run):
    cfg = run.cfg
    ckpt = run.path("hyper_batch.ckpt")
    if os.path.exists(ckpt):
        print(f"{ckpt} already exists; skipping")
        return 0
    init = [hyperdist.MemberDistribution.full_range(run.schema, cfg.plan.shrink_l2_decades)
            for _ in range(cfg.K)]
    model = trainer.fit_hyper_batch(cfg.model, run.schema, cfg.K, cfg.plan, run.rng("hyper_batch"),
                                    run.train, run.val, cfg.loss, init)
    if model.status != "ok":
        print(f"hyper-batch training failed: {model.message}", file=sys.stderr)
        return 2
    arrays = model.state_arrays()
    arrays["val_predictions"] = model.predict_members(run.val.X)
    arrays["test_predictions"] = model.predict_members(run.test.X)
    checkpoint_save(ckpt, arrays)
    trainer.write_trajectory_csv(run.path("bound_trajectories.csv"), model.trajectory)
    _write_json(run.path("hyper_batch_history.json"),
                {k: v for k, v in model.history.items() if k != "task"})
    print(f"hyper-batch K={cfg.K}: final val loss {model.history['val_loss'][-1]:.6f}")
    return 0


def _method_predictions(run):
    """Test-set member probabilities (members, n, C) for every available method."""
    out = {}
    recs = run.records()
    search = [r for r in recs.values() if r.id.startswith("rs-") and r.ok]
    K = run.cfg.K
    if search:
        scores = selection.single_scores(sorted(search, key=lambda r: r.id), run.val.y)
        best = sorted(search, key=lambda r: r.id)[int(np.argmin(scores))]
        out["single"] = best.test_predictions[None]
        if len(search) >= K:
            top = selection.top_k_select(search, K, run.val.y)
            out["top_k"] = _weighted_members(top, search)
    if os.path.exists(run.path("selection.json")):
        out["hyper_ens"] = _weighted_members(_load_selection(run.path("selection.json")), list(recs.values()))
    strat = [r for r in recs.values() if "seed_index" in r.provenance and r.ok]
    if strat:
        column = sorted((r for r in strat if r.provenance["lambda_index"] == 0),
                        key=lambda r: r.provenance["seed_index"])
        if column:
            out["deep_ens"] = np.stack([r.test_predictions for r in column])
        seeds = {r.init_seed for r in strat if r.provenance["seed_index"] == (1 if run.cfg.reuse_originals else 0)}
        if len(seeds) == 1:
            fixed = selection.fixed_init_hyper_ens(strat, K, run.val.y, seeds.pop())
            out["fixed_init_hyper_ens"] = _weighted_members(fixed, strat)
    if os.path.exists(run.path("hyper_deep_selection.json")):
        out["hyper_deep_ens"] = _weighted_members(
            _load_selection(run.path("hyper_deep_selection.json")), list(recs.values()))
    if os.path.exists(run.path("hyper_batch.ckpt")):
        out["hyper_batch_ens"] = checkpoint_load(run.path("hyper_batch.ckpt"))["test_predictions"]
    return out


def _load_selection(path):
    d = _read_json(path)
    return selection.EnsembleSelection([tuple(m) for m in d["members"]], [tuple(h) for h in d["history"]])


def _weighted_members(sel, records):
    """Repeat members by multiplicity so a plain mean reproduces the weighting."""
    by_id = {r.id: r for r in records}
    return np.stack([by_id[rid].test_predictions for rid, m in sel.members for _ in range(m)])


def _metric_rows(run, ood_probs=None):
    if not run.test.is_classification:
        raise UsageError("evaluate and report need a classification task")
    rows = []
    for method, members in _method_predictions(run).items():
        out = None if ood_probs is None else ood_probs.get(method)
        # members repeat by multiplicity, which weights the average correctly
        rep = metrics.evaluate(members, run.test.y, out_member_probs=out)
        unique = np.unique(members, axis=0)
        # repeated copies would dilute pairwise disagreement
        rep.diversity = metrics.diversity(unique, rep.accuracy) if len(unique) >= 2 else None
        rows.append((method, rep))
    if not rows:
        raise UsageError("no trained artifacts to evaluate")
    return rows


def cmd_evaluate(run):
    rows = _metric_rows(run)
    _write_json(run.path("metrics.json"), {m: r.to_dict() for m, r in rows})
    for method, rep in rows:
        print(f"{method:22s} nll={rep.nll:.4f} acc={rep.accuracy:.4f} ece={rep.ece:.4f} "
              f"brier={rep.brier:.4f} diversity={_fmt(rep.diversity)}")
    return 0


def _ood_inputs(run):
    o = run.cfg.ood
    source = o.get("source", "noise")
    n = int(o.get("n", 500))
    if source != "noise":
        raise ConfigError("ood.source", "only 'noise' is supported")
    gen = make_rng(run.cfg.seed, 0, "ood").generator()
    X = run.train.X
    return X.mean(axis=0) + float(o.get("scale", 3.0)) * X.std(axis=0) * gen.normal(size=(n,) + X.shape[1:])


def _ood_member_probs(run, X_out):
    out = {}
    recs = run.records()
    cfg = run.cfg
    regression = not run.train.is_classification

    def probs_of(rec):
        arrays = checkpoint_load(rec.checkpoint)
        net = Network(cfg.model, run.schema, run.train.X.shape[1:],
                      1 if regression else run.train.n_classes, "plain", 1)
        net.load_state(arrays)
        return softmax_np(net.predict_members(X_out, rec.lam))[0]

    for name in ("selection", "hyper_deep_selection"):
        if os.path.exists(run.path(f"{name}.json")):
            sel = _load_selection(run.path(f"{name}.json"))
            key = "hyper_ens" if name == "selection" else "hyper_deep_ens"
            out[key] = np.stack([probs_of(recs[rid]) for rid, m in sel.members for _ in range(m)])
    if os.path.exists(run.path("hyper_batch.ckpt")):
        arrays = checkpoint_load(run.path("hyper_batch.ckpt"))
        net = _hyper_batch_network(run, arrays)
        out["hyper_batch_ens"] = softmax_np(net.predict_members(X_out, arrays["lambda"]))
    return out


def cmd_ood_eval(run):
    X_out = _ood_inputs(run)
    ood = _ood_member_probs(run, X_out)
    rows = [(m, r) for m, r in _metric_rows(run, ood) if r.auroc is not None]
    if not rows:
        raise UsageError("no models with checkpoints to score out-of-distribution inputs")
    _write_json(run.path("ood_metrics.json"),
                {m: {"mmc": r.mmc, "auroc": r.auroc, "fpr95": r.fpr95} for m, r in rows})
    for method, rep in rows:
        print(f"{method:22s} mmc={rep.mmc:.4f} auroc={rep.auroc:.4f} fpr95={rep.fpr95:.4f}")
    return 0


def cmd_bestresponse(run):
    b = run.cfg.bestresponse
    lam_range = tuple(b["lam_range"])
    rows = []
    for seed in b["seeds"]:
        problem = bestresponse.make_ridge_problem(b["n"], b["k"], seed, lam_range, loss=b["loss"])
        grid = bestresponse.q_grid(lam_range)
        for h in b["capacities"]:
            emb = bestresponse.PolyEmbedding(h, lam_range)
            fit = bestresponse.fit_bestresponse(problem, emb, b["steps"], make_rng(seed, h, "bestresponse"))
            rep = bestresponse.gap_report(fit.U, emb, problem, grid,
                                          run.path(f"gap_seed{seed}_h{h}.csv"))
            chk = bestresponse.gap_bound_check(problem, fit.U, emb, 2.0, grid)
            rows.append([seed, h, rep.expected_sq_gap, chk.lhs, chk.bound, chk.passed])
    with open(run.path("bestresponse_summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "h", "expected_sq_gap", "weighted_sq_gap", "bound", "within_2x"])
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    for r in rows:
        print(f"seed={r[0]} h={r[1]} E|gap|^2={r[2]:.3e} lhs={r[3]:.3e} bound={r[4]:.3e} ok={r[5]}")
    return 0


def cmd_report(run):
    rows = _metric_rows(run)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "nll", "accuracy", "ece", "brier", "diversity"])
    for method, rep in rows:
        w.writerow([method, _fmt(rep.nll), _fmt(rep.accuracy), _fmt(rep.ece), _fmt(rep.brier),
                    _fmt(rep.diversity)])
    os.makedirs(run.path("report"), exist_ok=True)
    with open(run.path("report", "comparison.csv"), "w", newline="") as f:
        f.write(buf.getvalue())
    src = run.path("bound_trajectories.csv")
    if os.path.exists(src):
        with open(src, newline="") as fin, open(run.path("report", "bound_trajectories.csv"), "w",
                                                newline="") as fout:
            fout.write(fin.read())
    search = [r for r in run.records(load=False).values() if r.id.startswith("rs-")]
    with open(run.path("report", "random_search.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "status", "val_nll"] + list(run.schema.names))
        for r in sorted(search, key=lambda r: r.id):
            w.writerow([r.id, r.status, _fmt(r.metrics.get("val_nll"))] + [_fmt(v) for v in r.lam])
    print(buf.getvalue(), end="")
    return 0


def dispatch(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        handlers = {
            "train": cmd_train,
            "random-search": cmd_random_search,
            "select": lambda r: cmd_select(r, args.pool),
            "stratify": cmd_stratify,
            "fit-hyper-batch": cmd_fit_hyper_batch,
            "evaluate": cmd_evaluate,
            "ood-eval": cmd_ood_eval,
            "bestresponse": cmd_bestresponse,
            "report": cmd_report,
        }
        return handlers[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, selection.SelectionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
