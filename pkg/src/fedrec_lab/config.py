"""Experiment configuration: YAML schema, validation, presets, overrides."""

from __future__ import annotations

import copy
import importlib.resources
from dataclasses import dataclass, field

import yaml

from .data import FORMAT_PRESETS, DatasetFormat, parse_ratio
from .federation import LdpConfig, SeedBlock, TrainHyper
from .models import ModelConfig

STAGE_ORDER = ("ingest", "train", "attack", "sweep", "analyze", "report")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists field-level problems."""


@dataclass
class DatasetSpec:
    source: str = "synthetic"           # "synthetic" or a file path
    format: str | dict = "ml-100k"
    max_users: int | None = None
    synthetic: dict = field(default_factory=lambda: {
        "users": 943, "items": 1682, "interactions": 100_000, "seed": 20240913,
    })

    def resolve_format(self) -> DatasetFormat:
        if isinstance(self.format, str):
            if self.format not in FORMAT_PRESETS:
                raise ConfigError(
                    f"dataset.format: unknown preset {self.format!r}; "
                    f"have {sorted(FORMAT_PRESETS)}"
                )
            return FORMAT_PRESETS[self.format]
        return DatasetFormat(**self.format)


@dataclass
class AttackSpec:
    gamma: float = 0.2
    max_iterations: int = 50
    shadow_epochs: int = 20
    attack_users: int | None = None     # cap on attacked clients (None = all)
    popularity: dict | None = None      # {"top_fraction": 0.1, "boost": 3.0}
    baselines: bool = True


@dataclass
class SweepSpec:
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.1])
    mu_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.4, 0.7, 1.0])
    gamma_grid: list = field(default_factory=lambda: [0.1, 0.2, 0.5, 0.9])


@dataclass
class EvalSpec:
    k: int = 10
    negatives: int = 99
    protocol: str = "sampled"           # or "all"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    ldp: LdpConfig = field(default_factory=LdpConfig)
    mu: float = 0.0
    penalty_scope: str = "items"
    persist_adam: bool = False
    aggregate_mode: str = "participants"
    patience: int | None = None
    archive: str = "final"
    attack: AttackSpec = field(default_factory=AttackSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seeds: SeedBlock = field(default_factory=SeedBlock)
    stages: list = field(default_factory=lambda: ["ingest", "train", "attack",
                                                  "analyze", "report"])
    output: str = "runs/experiment"

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": {
                "source": self.dataset.source,
                "format": self.dataset.format,
                "max_users": self.dataset.max_users,
                "synthetic": dict(self.dataset.synthetic),
            },
            "model": {
                "kind": self.model.kind,
                "embed_dim": self.model.embed_dim,
                "ffn_dims": list(self.model.ffn_dims),
                "gcn_layers": self.model.gcn_layers,
            },
            "train": {
                "lr": self.train.lr,
                "local_epochs": self.train.local_epochs,
                "batch_size": self.train.batch_size,
                "neg_ratio": self.train.neg_ratio,
                "global_epochs": self.train.global_epochs,
                "participants": self.train.participants,
            },
            "defense": {"ldp_lambda": self.ldp.lam, "mu": self.mu,
                        "penalty_scope": self.penalty_scope},
            "federation": {"persist_adam": self.persist_adam,
                           "aggregate_mode": self.aggregate_mode,
                           "patience": self.patience,
                           "archive": self.archive},
            "attack": {
                "gamma": self.attack.gamma,
                "max_iterations": self.attack.max_iterations,
                "shadow_epochs": self.attack.shadow_epochs,
                "attack_users": self.attack.attack_users,
                "popularity": self.attack.popularity,
                "baselines": self.attack.baselines,
            },
            "sweep": {"lambda_grid": list(self.sweep.lambda_grid),
                      "mu_grid": list(self.sweep.mu_grid),
                      "gamma_grid": list(self.sweep.gamma_grid)},
            "eval": {"k": self.eval.k, "negatives": self.eval.negatives,
                     "protocol": self.eval.protocol},
            "seeds": self.seeds.as_dict(),
            "stages": list(self.stages),
            "output": self.output,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.as_dict(), fh, sort_keys=True)


def _require(cond, problems, msg):
    if not cond:
        problems.append(msg)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config from parsed YAML; raises ConfigError with
    every field-level problem found."""
    raw = copy.deepcopy(raw or {})
    problems: list[str] = []

    ds_raw = raw.get("dataset", {}) or {}
    dataset = DatasetSpec(
        source=ds_raw.get("source", "synthetic"),
        format=ds_raw.get("format", "ml-100k"),
        max_users=ds_raw.get("max_users"),
        synthetic={**DatasetSpec().synthetic, **(ds_raw.get("synthetic") or {})},
    )
    if dataset.max_users is not None:
        _require(dataset.max_users >= 1, problems, "dataset.max_users: must be >= 1")
    try:
        dataset.resolve_format()
    except (ConfigError, TypeError) as exc:
        problems.append(str(exc))

    mdl_raw = raw.get("model", {}) or {}
    try:
        model = ModelConfig(
            kind=mdl_raw.get("kind", "ncf"),
            embed_dim=int(mdl_raw.get("embed_dim", 64)),
            ffn_dims=tuple(mdl_raw.get("ffn_dims", (128, 64, 32))),
            gcn_layers=int(mdl_raw.get("gcn_layers", 3)),
        )
    except (ValueError, TypeError) as exc:
        problems.append(f"model: {exc}")
        model = ModelConfig()
    _require(model.embed_dim >= 1, problems, "model.embed_dim: must be >= 1")

    tr = raw.get("train", {}) or {}
    try:
        train = TrainHyper(
            lr=float(tr.get("lr", 0.001)),
            local_epochs=int(tr.get("local_epochs", 20)),
            batch_size=int(tr.get("batch_size", 64)),
            neg_ratio=str(tr.get("neg_ratio", "1:4")),
            global_epochs=int(tr.get("global_epochs", 200)),
            participants=tr.get("participants"),
        )
    except ValueError as exc:
        problems.append(f"train: {exc}")
        train = TrainHyper()
    try:
        parse_ratio(train.neg_ratio)
    except ValueError as exc:
        problems.append(f"train.neg_ratio: {exc}")

    de = raw.get("defense", {}) or {}
    lam = float(de.get("ldp_lambda", 0.0))
    _require(lam >= 0, problems, "defense.ldp_lambda: must be >= 0")
    mu = float(de.get("mu", 0.0))
    _require(mu >= 0, problems, "defense.mu: must be >= 0")
    scope = de.get("penalty_scope", "items")
    _require(scope in ("items", "public"), problems,
             "defense.penalty_scope: must be 'items' or 'public'")

    fed = raw.get("federation", {}) or {}
    patience = fed.get("patience")
    if patience is not None:
        patience = int(patience)
        _require(patience >= 1, problems, "federation.patience: must be >= 1 or null")
    archive = fed.get("archive", "final")
    _require(archive in ("none", "final", "all"), problems,
             "federation.archive: must be none|final|all")
    agg_mode = fed.get("aggregate_mode", "participants")
    _require(agg_mode in ("participants", "touchers", "sum"), problems,
             "federation.aggregate_mode: must be participants|touchers|sum")

    at = raw.get("attack", {}) or {}
    attack = AttackSpec(
        gamma=float(at.get("gamma", 0.2)),
        max_iterations=int(at.get("max_iterations", 50)),
        shadow_epochs=int(at.get("shadow_epochs", tr.get("local_epochs", 20))),
        attack_users=at.get("attack_users"),
        popularity=at.get("popularity"),
        baselines=bool(at.get("baselines", True)),
    )
    _require(0 < attack.gamma <= 1, problems, "attack.gamma: must be in (0, 1]")
    _require(attack.max_iterations >= 1, problems,
             "attack.max_iterations: must be >= 1")
    if attack.popularity is not None:
        _require(0 < float(attack.popularity.get("top_fraction", 0.1)) <= 1,
                 problems, "attack.popularity.top_fraction: must be in (0, 1]")

    sw = raw.get("sweep", {}) or {}
    sweep = SweepSpec(
        lambda_grid=[float(x) for x in sw.get("lambda_grid", SweepSpec().lambda_grid)],
        mu_grid=[float(x) for x in sw.get("mu_grid", SweepSpec().mu_grid)],
        gamma_grid=[float(x) for x in sw.get("gamma_grid", SweepSpec().gamma_grid)],
    )

    ev = raw.get("eval", {}) or {}
    eval_spec = EvalSpec(k=int(ev.get("k", 10)), negatives=int(ev.get("negatives", 99)),
                         protocol=ev.get("protocol", "sampled"))
    _require(eval_spec.protocol in ("sampled", "all"), problems,
             "eval.protocol: must be sampled|all")

    sd = raw.get("seeds", {}) or {}
    if "master" in sd:
        seeds = SeedBlock.from_master(int(sd["master"]))
    else:
        known = {f.name for f in SeedBlock.__dataclass_fields__.values()}
        bad = set(sd) - known
        if bad:
            problems.append(f"seeds: unknown fields {sorted(bad)}")
        seeds = SeedBlock(**{k: int(v) for k, v in sd.items() if k in known})

    stages = raw.get("stages", ["ingest", "train", "attack", "analyze", "report"])
    for st in stages:
        _require(st in STAGE_ORDER, problems, f"stages: unknown stage {st!r}")
    idx = [STAGE_ORDER.index(s) for s in stages if s in STAGE_ORDER]
    _require(idx == sorted(idx), problems,
             f"stages: must follow the order {list(STAGE_ORDER)}")

    if problems:
        raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        dataset=dataset, model=model, train=train,
        ldp=LdpConfig(lam=lam, enabled=lam > 0), mu=mu, penalty_scope=scope,
        persist_adam=bool(fed.get("persist_adam", False)),
        aggregate_mode=agg_mode, patience=patience, archive=archive,
        attack=attack, sweep=sweep, eval=eval_spec, seeds=seeds,
        stages=list(stages), output=str(raw.get("output", "runs/experiment")),
    )


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply --set key.path=value pairs onto a raw config dict."""
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        parsed = yaml.safe_load(value)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a mapping")
        node[parts[-1]] = parsed
    return out


def load_config(path, overrides=None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(apply_overrides(raw, overrides))


def load_preset(name: str) -> dict:
    """Raw dict for a shipped preset (see fedrec_lab/presets/)."""
    ref = importlib.resources.files("fedrec_lab").joinpath(f"presets/{name}.yaml")
    if not ref.is_file():
        have = sorted(p.name[:-5] for p in
                      importlib.resources.files("fedrec_lab").joinpath("presets").iterdir()
                      if p.name.endswith(".yaml"))
        raise ConfigError(f"unknown preset {name!r}; shipped presets: {have}")
    return yaml.safe_load(ref.read_text(encoding="utf-8"))
