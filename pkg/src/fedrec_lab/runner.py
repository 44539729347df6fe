"""Experiment orchestration: executes the configured pipeline stages and
persists every artifact under the output directory.

Layout (per run):
    config_snapshot.yaml        resolved config; sufficient to replay the run
    manifest.json               stage completion + failure marker
    ingest/stats.json           dataset statistics (+ generated synthetic file)
    train/curve.csv             round,train_loss,val_hit10
    train/deviation.csv         round,user_deviation,item_deviation
    train/checkpoint.npz        final public + private parameters
    train/trace/round_*.npz     archived uploads (the attack surface)
    attack/<name>.jsonl         per-user attack records
    attack/summary.json         macro metrics + bucket breakdown
    sweep/...                   nested mini-runs over the defense grids
    analyze/metrics.json        composed metrics for reporting
    report/*.csv|json|md|png    tables and their figure twins
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import plots
from .analysis import (
    attack_f1,
    bucketed_f1,
    cost_effectiveness,
    hit_at_k,
    macro_attack_metrics,
)
from .attacks import AttackConfig, imia_attack, kmeans_attack, random_attack
from .config import ExperimentConfig, config_from_dict
from .data import (
    interaction_buckets,
    leave_one_out_split,
    load_dataset,
    positive_fraction,
    subsample_users,
    write_synthetic_dataset,
)
from .federation import TrainingRun, load_round_trace, make_score_fn, run_training
from .models import save_checkpoint
from .numerics import RngStream, single_thread_blas

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage cannot run (usually missing upstream artifacts)."""


@dataclass
class RunArtifacts:
    """Paths + in-memory handles produced by run_experiment."""

    root: str
    config: ExperimentConfig
    split: object = None
    run: TrainingRun | None = None
    stages_done: list = field(default_factory=list)

    def path(self, *parts) -> str:
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_ingest(art: RunArtifacts):
    cfg = art.config
    if cfg.dataset.source == "synthetic":
        path = art.path("ingest", "synthetic_u.data")
        spec = cfg.dataset.synthetic
        write_synthetic_dataset(path, n_users=spec["users"], n_items=spec["items"],
                                n_interactions=spec["interactions"], seed=spec["seed"])
    else:
        path = cfg.dataset.source
        if not os.path.exists(path):
            raise StageError(f"dataset file not found: {path}")
    interactions, catalog, dups = load_dataset(path, cfg.dataset.resolve_format())
    if cfg.dataset.max_users is not None:
        interactions, catalog = subsample_users(interactions, catalog,
                                                cfg.dataset.max_users)
    split = leave_one_out_split(interactions, catalog,
                                RngStream(cfg.seeds.split, "split"), dups)
    art.split = split
    _write_json(art.path("ingest", "stats.json"), split.report.as_dict())
    return split


def _require_split(art: RunArtifacts):
    if art.split is None:
        stage_ingest(art)
    return art.split


def stage_train(art: RunArtifacts) -> TrainingRun:
    cfg = art.config
    split = _require_split(art)
    t0 = time.time()
    run = run_training(
        split, cfg.model, cfg.train, cfg.seeds, ldp=cfg.ldp, mu=cfg.mu,
        penalty_scope=cfg.penalty_scope, archive=cfg.archive,
        patience=cfg.patience, persist_adam=cfg.persist_adam,
        aggregate_mode=cfg.aggregate_mode, eval_negatives=cfg.eval.negatives,
        progress=True,
    )
    art.run = run
    _write_csv(art.path("train", "curve.csv"),
               ("round", "train_loss", "val_hit10"), run.curve)
    _write_csv(art.path("train", "deviation.csv"),
               ("round", "user_deviation", "item_deviation"), run.deviation)
    save_checkpoint(art.path("train", "checkpoint.npz"), cfg.model,
                    run.state.public, run.state.privates)
    run.trace.save(art.path("train", "trace"))
    test = hit_at_k(make_score_fn(cfg.model, run.state, split), split,
                    k=cfg.eval.k, n_candidates=cfg.eval.negatives,
                    eval_seed=cfg.seeds.eval, which="test",
                    protocol=cfg.eval.protocol)
    log.info("train stage finished in %.1fs", time.time() - t0)
    _write_json(art.path("train", "summary.json"), {
        "rounds_run": len(run.curve),
        "stopped_early": run.stopped_early,
        "final_train_loss": run.curve[-1][1] if run.curve else None,
        "final_val_hit10": run.curve[-1][2] if run.curve else None,
        "test_hit10": test.mean,
        "hit_protocol": test.protocol,
        "user_deviation": run.deviation[-1][1],
        "item_deviation": run.deviation[-1][2],
    })
    return run


def _load_trace(art: RunArtifacts):
    trace_dir = art.path("train", "trace")
    files = sorted(f for f in os.listdir(trace_dir) if f.endswith(".npz")) \
        if os.path.isdir(trace_dir) else []
    if not files:
        raise StageError("attack stage needs an archived training trace; "
                         "run the train stage first")
    return load_round_trace(os.path.join(trace_dir, files[-1]))


def run_attacks(art: RunArtifacts, trace=None, gamma=None, out_subdir="attack",
                write_files=True) -> dict:
    """IMIA (+ optional baselines) against the latest archived round."""
    cfg = art.config
    split = _require_split(art)
    if trace is None:
        if art.run is not None and art.run.trace.rounds:
            trace = art.run.trace.latest()
        else:
            trace = _load_trace(art)
    acfg = AttackConfig(
        gamma=cfg.attack.gamma if gamma is None else gamma,
        eta=cfg.train.neg_ratio,
        max_iterations=cfg.attack.max_iterations,
        shadow_epochs=cfg.attack.shadow_epochs,
        popularity_boost=(cfg.attack.popularity or {}).get("boost", 3.0),
    )
    popular = None
    if cfg.attack.popularity:
        popular = split.catalog.top_popular(
            float(cfg.attack.popularity.get("top_fraction", 0.1)))
    p = positive_fraction(cfg.train.neg_ratio)
    uploads = sorted(trace.uploads, key=lambda u: u.user)
    if cfg.attack.attack_users is not None:
        uploads = uploads[: cfg.attack.attack_users]

    records = {"imia": [], "random": [], "kmeans": []}
    per_user = {"imia": {}, "random": {}, "kmeans": {}}
    with single_thread_blas():
        for up in uploads:
            truth = split.clients[up.user].positives
            res = imia_attack(up, trace.v_before, acfg, cfg.model, cfg.train,
                              RngStream(cfg.seeds.shadow, f"shadow:{up.user}"),
                              popular_items=popular)
            m = attack_f1(res.predicted_pos, truth)
            per_user["imia"][up.user] = m
            records["imia"].append({
                "user": int(up.user), "touched": len(up.touched),
                "predicted": [int(i) for i in res.predicted_pos],
                "iterations": res.iterations, "complete": res.complete,
                "precision": m.precision, "recall": m.recall, "f1": m.f1,
            })
            if cfg.attack.baselines:
                rnd = random_attack(up.touched, p,
                                    RngStream(cfg.seeds.shadow, f"random:{up.user}"))
                m = attack_f1(rnd, truth)
                per_user["random"][up.user] = m
                records["random"].append({
                    "user": int(up.user), "touched": len(up.touched),
                    "predicted": [int(i) for i in rnd],
                    "iterations": 1, "complete": True,
                    "precision": m.precision, "recall": m.recall, "f1": m.f1,
                })
                km, degenerate = kmeans_attack(
                    up.item_rows, up.touched,
                    RngStream(cfg.seeds.shadow, f"kmeans:{up.user}"))
                m = attack_f1(km, truth)
                per_user["kmeans"][up.user] = m
                records["kmeans"].append({
                    "user": int(up.user), "touched": len(up.touched),
                    "predicted": [int(i) for i in km],
                    "iterations": 1, "complete": not degenerate,
                    "precision": m.precision, "recall": m.recall, "f1": m.f1,
                })

    buckets = interaction_buckets(split, n=min(20, len(split.clients)))
    summary = {"attacked_round": trace.round, "attacked_users": len(uploads),
               "gamma": acfg.gamma, "popularity": cfg.attack.popularity}
    for name, table in per_user.items():
        if not table:
            continue
        summary[name] = macro_attack_metrics(table)
        bk = bucketed_f1({u: m.f1 for u, m in table.items()}, buckets)
        summary[f"{name}_buckets"] = {
            "means": [[b, cnt, f1] for b, cnt, f1 in bk.buckets],
            "spearman_rho": bk.spearman_rho,
        }
    if write_files:
        for name, recs in records.items():
            if not recs:
                continue
            with open(art.path(out_subdir, f"{name}.jsonl"), "w", encoding="utf-8") as fh:
                for rec in recs:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _write_json(art.path(out_subdir, "summary.json"), summary)
    return summary


def stage_attack(art: RunArtifacts) -> dict:
    return run_attacks(art)


def _sub_experiment(art: RunArtifacts, rel_out: str, **config_updates) -> RunArtifacts:
    """A nested run sharing the parent's dataset and seeds."""
    raw = art.config.as_dict()
    for dotted, value in config_updates.items():
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    sub_cfg = config_from_dict(raw)
    sub = RunArtifacts(root=art.path(rel_out), config=sub_cfg)
    sub.split = art.split
    return sub


def stage_sweep(art: RunArtifacts) -> dict:
    """Defense grids: retrain per lambda / mu value, re-attack per gamma."""
    cfg = art.config
    _require_split(art)
    out = {"lambda": [], "mu": [], "gamma": []}
    for lam in cfg.sweep.lambda_grid:
        sub = _sub_experiment(art, os.path.join("sweep", "lambda", f"{lam:g}"),
                              **{"defense.ldp_lambda": lam, "defense.mu": 0.0})
        stage_train(sub)
        summary = run_attacks(sub)
        train_summary = _read_json(sub.path("train", "summary.json"))
        out["lambda"].append({"lambda": lam, "f1": summary["imia"]["f1"],
                              "hit10": train_summary["test_hit10"]})
    for mu in cfg.sweep.mu_grid:
        sub = _sub_experiment(art, os.path.join("sweep", "mu", f"{mu:g}"),
                              **{"defense.mu": mu, "defense.ldp_lambda": 0.0})
        stage_train(sub)
        summary = run_attacks(sub)
        train_summary = _read_json(sub.path("train", "summary.json"))
        out["mu"].append({"mu": mu, "f1": summary["imia"]["f1"],
                          "hit10": train_summary["test_hit10"],
                          "user_deviation": train_summary["user_deviation"],
                          "item_deviation": train_summary["item_deviation"]})
    for g in cfg.sweep.gamma_grid:
        summary = run_attacks(art, gamma=g,
                              out_subdir=os.path.join("sweep", "gamma", f"{g:g}"))
        out["gamma"].append({"gamma": g, "f1": summary["imia"]["f1"]})
    _write_json(art.path("sweep", "summary.json"), out)
    return out


def stage_analyze(art: RunArtifacts) -> dict:
    """Compose every available stage output into one metrics document."""
    cfg = art.config
    metrics = {"name": cfg.name}
    for piece, rel in (("ingest", ("ingest", "stats.json")),
                       ("train", ("train", "summary.json")),
                       ("attack", ("attack", "summary.json")),
                       ("sweep", ("sweep", "summary.json"))):
        p = os.path.join(art.root, *rel)
        if os.path.exists(p):
            metrics[piece] = _read_json(p)
    if "train" in metrics and "attack" in metrics and "sweep" in metrics:
        base = (metrics["attack"]["imia"]["f1"], metrics["train"]["test_hit10"])
        random_f1 = metrics["attack"].get("random", {}).get("f1")
        ratios = {}
        for kind in ("lambda", "mu"):
            rows = metrics["sweep"].get(kind, [])
            chosen = _weakest_effective(rows, kind, base[0], random_f1)
            if chosen is not None:
                ce = cost_effectiveness(base, (chosen["f1"], chosen["hit10"]))
                ratios[kind] = {
                    "config": chosen[kind], "f1": chosen["f1"],
                    "hit10": chosen["hit10"], "delta_f1": ce.delta_f1,
                    "delta_hit10": ce.delta_hit, "ratio": ce.ratio,
                    "infinite": ce.infinite,
                }
        metrics["cost_effectiveness"] = ratios
    _write_json(art.path("analyze", "metrics.json"), metrics)
    return metrics


def _weakest_effective(rows, key, base_f1, random_f1, slack=0.02):
    """The weakest grid setting that pushes attacker F1 to the random level
    (+slack); falls back to the strongest setting if none qualifies."""
    live = [r for r in rows if r[key] > 0]
    if not live:
        return None
    live = sorted(live, key=lambda r: r[key])
    if random_f1 is not None:
        for r in live:
            if r["f1"] <= random_f1 + slack:
                return r
    return live[-1]


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def emit_report(art: RunArtifacts, formats=("csv", "json", "markdown-summary")) -> list:
    """Render the report tables and figures from analyze/metrics.json.

    Raises StageError naming whatever upstream stage output is missing.
    """
    metrics_path = os.path.join(art.root, "analyze", "metrics.json")
    if not os.path.exists(metrics_path):
        missing = [s for s in ("ingest", "train", "attack", "analyze")
                   if not os.path.isdir(os.path.join(art.root, s))]
        raise StageError(f"report needs analyze/metrics.json; missing stages: {missing}")
    metrics = _read_json(metrics_path)
    written = []

    def out(name):
        p = art.path("report", name)
        written.append(p)
        return p

    attack = metrics.get("attack")
    if attack and "csv" in formats:
        rows = [(name, attack[name]["f1"], attack[name]["precision"],
                 attack[name]["recall"])
                for name in ("random", "kmeans", "imia") if name in attack]
        _write_csv(out("attack_f1.csv"), ("attack", "f1", "precision", "recall"), rows)
        bk = attack.get("imia_buckets")
        if bk:
            _write_csv(out("buckets.csv"), ("bucket", "users", "mean_f1"),
                       [tuple(r) for r in bk["means"]])
            plots.bucket_curve(bk["means"], out("buckets.png"))

    sweep = metrics.get("sweep")
    if sweep and "csv" in formats:
        if sweep.get("lambda"):
            rows = [(r["lambda"], r["f1"], r["hit10"]) for r in sweep["lambda"]]
            _write_csv(out("ldp_grid.csv"), ("lambda", "imia_f1", "hit10"), rows)
            plots.tradeoff_curve([r[0] for r in rows], [r[1] for r in rows],
                                 [r[2] for r in rows], "noise scale",
                                 out("ldp_tradeoff.png"), "LDP noise vs attack/utility",
                                 log_x=True)
        if sweep.get("mu"):
            rows = [(r["mu"], r["f1"], r["hit10"], r["user_deviation"],
                     r["item_deviation"]) for r in sweep["mu"]]
            _write_csv(out("defender_grid.csv"),
                       ("mu", "imia_f1", "hit10", "user_deviation", "item_deviation"),
                       rows)
            plots.tradeoff_curve([r[0] for r in rows], [r[1] for r in rows],
                                 [r[2] for r in rows], "constraint scale",
                                 out("mu_tradeoff.png"),
                                 "Proximal constraint vs attack/utility")
            _write_csv(out("deviation.csv"),
                       ("mu", "user_deviation", "item_deviation"),
                       [(r[0], r[3], r[4]) for r in rows])
        if sweep.get("gamma"):
            rows = [(r["gamma"], r["f1"]) for r in sweep["gamma"]]
            _write_csv(out("gamma.csv"), ("gamma", "imia_f1"), rows)
            plots.gamma_curve([r[0] for r in rows], [r[1] for r in rows],
                              out("gamma.png"))

    ce = metrics.get("cost_effectiveness")
    if ce and "csv" in formats:
        rows = [(kind, v["config"], v["delta_f1"], v["delta_hit10"],
                 "inf" if v["infinite"] else v["ratio"])
                for kind, v in sorted(ce.items())]
        _write_csv(out("cost_effectiveness.csv"),
                   ("defense", "config", "delta_f1", "delta_hit10", "ratio"), rows)

    train = metrics.get("train")
    if train:
        curve_csv = os.path.join(art.root, "train", "curve.csv")
        dev_csv = os.path.join(art.root, "train", "deviation.csv")
        if os.path.exists(curve_csv):
            rows = np.genfromtxt(curve_csv, delimiter=",", skip_header=1, ndmin=2)
            if rows.size:
                plots.training_curve([tuple(r) for r in rows], out("curve.png"),
                                     title=f"{metrics['name']}: training")
        if os.path.exists(dev_csv):
            rows = np.genfromtxt(dev_csv, delimiter=",", skip_header=1, ndmin=2)
            if rows.size:
                plots.deviation_trend([tuple(r) for r in rows], out("deviation.png"),
                                      title=f"{metrics['name']}: embedding drift")

    if "json" in formats:
        _write_json(out("summary.json"), metrics)
    if "markdown-summary" in formats:
        _write_markdown(out("summary.md"), metrics)
    return written


def _write_markdown(path, metrics) -> None:
    lines = [f"# {metrics.get('name', 'experiment')}", ""]
    ing = metrics.get("ingest")
    if ing:
        lines += ["## Dataset", "",
                  f"- users: {ing['users']}, items: {ing['items']}, "
                  f"interactions: {ing['interactions']}",
                  f"- retained users: {ing['retained_users']} "
                  f"(excluded {ing['excluded_users']})",
                  f"- density: {ing['density_percent']}%", ""]
    tr = metrics.get("train")
    if tr:
        lines += ["## Training", "",
                  f"- rounds: {tr['rounds_run']} (early stop: {tr['stopped_early']})",
                  f"- final Hit@10 (test, {tr['hit_protocol']}): {tr['test_hit10']:.4f}",
                  f"- embedding deviation user/item: "
                  f"{tr['user_deviation']:.6f} / {tr['item_deviation']:.6f}", ""]
    atk = metrics.get("attack")
    if atk:
        lines += ["## Attacks (mean F1)", ""]
        for name in ("random", "kmeans", "imia"):
            if name in atk:
                lines.append(f"- {name}: {atk[name]['f1']:.4f}")
        lines.append("")
    ce = metrics.get("cost_effectiveness")
    if ce:
        lines += ["## Cost-effectiveness |dF1|/|dHit@10|", ""]
        for kind, v in sorted(ce.items()):
            ratio = "inf" if v["infinite"] else f"{v['ratio']:.2f}"
            lines.append(f"- {kind} @ {v['config']:g}: {ratio}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def stage_report(art: RunArtifacts) -> list:
    return emit_report(art)


STAGES = {
    "ingest": stage_ingest,
    "train": stage_train,
    "attack": stage_attack,
    "sweep": stage_sweep,
    "analyze": stage_analyze,
    "report": stage_report,
}


def run_experiment(config: ExperimentConfig, out_dir=None) -> RunArtifacts:
    """Execute the configured stages; artifacts land under the output dir.

    A mid-run failure keeps the partial artifacts and records the failing
    stage in manifest.json before re-raising.
    """
    root = out_dir or config.output
    os.makedirs(root, exist_ok=True)
    art = RunArtifacts(root=root, config=config)
    config.save(art.path("config_snapshot.yaml"))
    manifest = {"name": config.name, "stages": list(config.stages),
                "completed": [], "failed": None}
    for stage in config.stages:
        try:
            STAGES[stage](art)
        except Exception as exc:
            manifest["failed"] = {"stage": stage, "error": str(exc)}
            _write_json(art.path("manifest.json"), manifest)
            raise
        manifest["completed"].append(stage)
        art.stages_done.append(stage)
    _write_json(art.path("manifest.json"), manifest)
    return art
