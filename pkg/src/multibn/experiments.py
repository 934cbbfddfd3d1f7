"""Reproducible experiment plumbing: flat configs, presets, CSV artifacts.

A run is described by a flat key-value document (ExperimentConfig); its
canonical hash stamps every CSV row together with the seed and a build
tag, so artifacts are traceable and reruns are byte-comparable.  Presets
bundle the training and evaluation protocol for each table/figure
analogue at desk scale; budgets come from a named profile so the same
protocol can run in seconds (tiny) or at full desk scale (desk).
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackSpec
from .data import DatasetManifest, Split, generate_synthetic_dataset
from .evaluation import (
    EVAL_KINDS,
    Pipeline,
    adaptive_curve,
    blackbox_transfer,
    budget_sweep,
    cross_branch_grid,
    evaluate,
    model_size_report,
    report_to_dict,
)
from .nets import ArchConfig, forward_target
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

BUILD_TAG = f"multibn-{__version__}"

PRESETS = ("table1", "table2", "table3", "table4", "table8",
           "fig5", "fig6", "fig7", "fig8")


class ConfigError(ValueError):
    """Unknown keys, malformed values, or conflicting artifacts."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat run description; every field maps to one `key=value` entry."""

    scheme: str = "natural"
    attacks: tuple = ("pgd", "roa")
    t_max: int = 2
    epsilon: float = 4 / 255
    s_roa: int = 8
    s_af: int = 2
    s_spa: int = 50
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 0.1
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    channels: tuple = (8, 16, 32)
    detector_channels: tuple = (8, 16)
    classes: int = 5
    data_seed: int = 0
    train_size: int = 256
    test_size: int = 96
    eval_subset: int = 96
    eval_t_max: int = 5
    metric_subset: int = 32
    workers: int = 0  # 0 = use MULTIBN_WORKERS / sequential

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_sources(cls, config_path=None, overrides=()):
        doc = {}
        if config_path:
            try:
                loaded = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {config_path} must hold a flat object")
            doc.update(loaded)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            doc[key.strip()] = value.strip()
        return cls.from_mapping(doc)

    def canonical(self):
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc

    def config_hash(self):
        return config_hash(self.canonical())

    # -- derived objects ---------------------------------------------------

    def arch(self):
        return ArchConfig(channels=self.channels, num_classes=self.classes)

    def dataset_manifest(self):
        return DatasetManifest(seed=self.data_seed, train_size=self.train_size,
                               test_size=self.test_size, class_count=self.classes)

    def train_attack_specs(self):
        return tuple(self._spec(kind, self.t_max) for kind in self.attacks)

    def eval_suite(self, kinds=EVAL_KINDS):
        return [self._spec(kind, self.eval_t_max) for kind in kinds]

    def _spec(self, kind, t_max):
        eps = self.epsilon if kind in ("pgd", "adaptive") else None
        return AttackSpec(kind=kind, epsilon=eps, t_max=t_max, s_roa=self.s_roa,
                          s_af=self.s_af, s_spa=self.s_spa, seed=self.seed)

    def train_config(self, scheme=None, attacks=None):
        scheme = scheme if scheme is not None else self.scheme
        specs = (tuple(self._spec(k, self.t_max) for k in attacks)
                 if attacks is not None else self.train_attack_specs())
        if scheme in ("madry", "mixed", "trades"):
            specs = specs[:1]
        return TrainConfig(
            scheme=scheme, attack_specs=specs,
            lr=self.lr / _loss_terms(scheme, len(specs)),
            momentum=self.momentum,
            weight_decay=self.weight_decay, lam=self.lam, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, arch=self.arch(),
            detector_channels=self.detector_channels,
            metric_subset=self.metric_subset or None,
        )


def _loss_terms(scheme, n_specs):
    """Number of summed CE-scale terms in a scheme's objective.

    The config's ``lr`` is calibrated for a single-term loss; dividing by
    the term count keeps the optimizer's step scale comparable across
    schemes (a summed multi-term loss multiplies the gradient).
    """
    return {
        "natural": 1, "madry": 1, "mixed": 2, "trades": 2,
        "max": 2, "msd": 2, "avg": n_specs + 1, "multibn": n_specs + 1,
    }[scheme]


def _coerce(field_info, raw):
    if not isinstance(raw, str):
        if field_info.type == "tuple" and isinstance(raw, list):
            return tuple(raw)
        return raw
    kind = field_info.type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            items = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) if p.isdigit() else p for p in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {field_info.name}") from exc


def config_hash(doc):
    """Order-independent digest of a canonicalized flat document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# budget profiles


PROFILES = {
    # desk: the acceptance-scale budget (minutes per model on one core)
    "desk": dict(train_size=256, test_size=96, epochs=12, t_max=2, eval_t_max=5,
                 eval_subset=96, lr=0.1, epsilon=8 / 255, batch_size=16,
                 metric_subset=32),
    # tiny: structure and determinism checks (seconds per model)
    "tiny": dict(train_size=24, test_size=12, epochs=2, t_max=1, eval_t_max=1,
                 eval_subset=12, lr=0.1, batch_size=8, metric_subset=8,
                 channels=(4, 6, 8), detector_channels=(4, 6)),
}


def profiled_config(profile, seed=0, **extra):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    doc = dict(PROFILES[profile])
    doc["seed"] = seed
    doc["data_seed"] = seed
    doc.update(extra)
    return ExperimentConfig.from_mapping(doc)


# ---------------------------------------------------------------------------
# CSV artifacts


def write_csv(path, rows, columns, meta):
    """Rows to CSV with the traceability columns appended to each row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tagged = list(columns) + ["config_hash", "seed", "build"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(tagged)
        for row in rows:
            values = [_format_cell(row[c]) for c in columns]
            writer.writerow(values + [meta["config_hash"], meta["seed"], meta["build"]])
    return path


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    return value


# ---------------------------------------------------------------------------
# the run directory


@dataclass
class RunContext:
    out_dir: Path
    cfg: ExperimentConfig
    preset: str
    force: bool = False
    verbose: bool = False

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.meta = {"config_hash": self._run_hash(), "seed": self.cfg.seed,
                     "build": BUILD_TAG}

    def _run_hash(self):
        doc = self.cfg.canonical()
        doc["preset"] = self.preset
        return config_hash(doc)

    def prepare(self):
        manifest_path = self.out_dir / "manifest.json"
        if manifest_path.exists():
            old = json.loads(manifest_path.read_text())
            if old.get("config_hash") != self.meta["config_hash"]:
                if not self.force:
                    raise ConfigError(
                        f"{self.out_dir} holds a different run "
                        f"({old.get('config_hash')} vs {self.meta['config_hash']}); "
                        "pass --force to overwrite")
                shutil.rmtree(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "preset": self.preset,
            "config_hash": self.meta["config_hash"],
            "build": BUILD_TAG,
            "seed": self.cfg.seed,
            "config": self.cfg.canonical(),
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def dataset(self):
        return generate_synthetic_dataset(self.cfg.dataset_manifest())

    def eval_split(self, dataset):
        n = min(self.cfg.eval_subset or len(dataset.test.labels), len(dataset.test.labels))
        t = dataset.test
        return Split(videos=t.videos[:n], labels=t.labels[:n], ids=t.ids[:n])

    def checkpoint_path(self, name):
        return self.out_dir / "checkpoints" / f"{name}.ntc"

    def train_or_load(self, name, dataset, scheme, attacks=None):
        """Resume from an existing checkpoint when the run hash matches."""
        path = self.checkpoint_path(name)
        tc = self.cfg.train_config(scheme=scheme, attacks=attacks)
        if path.exists():
            net, det, _, manifest = load_checkpoint(path)
            kinds = tuple(s["kind"] for s in manifest["config"]["attack_specs"])
            if self.verbose:
                print(f"[{self.preset}] reusing {name}", flush=True)
            return net, det, kinds
        if self.verbose:
            print(f"[{self.preset}] training {name} ({scheme})", flush=True)
        result = train(tc, dataset, verbose=self.verbose)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, result)
        rows = [dict(r) for r in result.metrics]
        write_csv(self.out_dir / f"train_{name}.csv", rows,
                  ["epoch", "split", "input_type", "accuracy", "loss"], self.meta)
        return result.net, result.detector, tuple(s.kind for s in tc.attack_specs)


# ---------------------------------------------------------------------------
# presets


# AT rows train on clean + adversarial batches; pure-adversarial updates
# collapse a net this small when the perturbation is an unbounded mask.
TABLE1_MODELS = (
    ("no_defense", "natural", None),
    ("at_pgd", "mixed", ("pgd",)),
    ("at_roa", "mixed", ("roa",)),
    ("at_af", "mixed", ("af",)),
    ("at_spa", "mixed", ("spa",)),
    ("multibn_manual", "multibn", ("pgd", "roa")),
)

TABLE4_MODELS = (
    ("natural", "natural", None),
    ("avg", "avg", ("pgd", "roa")),
    ("max", "max", ("pgd", "roa")),
    ("msd", "msd", ("pgd", "roa")),
    ("trades", "trades", ("pgd",)),
    ("multibn", "multibn", ("pgd", "roa")),
)

_REPORT_COLUMNS = ["model", "mode", "clean", "pgd", "roa", "af", "spa",
                   "mean", "union"]


def _report_row(name, mode, report):
    acc = report.per_type_accuracy
    return {
        "model": name, "mode": mode,
        "clean": acc["clean"], "pgd": acc["pgd"], "roa": acc["roa"],
        "af": acc["af"], "spa": acc["spa"],
        "mean": report.mean_accuracy, "union": report.union_accuracy,
    }


def _table_preset(ctx, models, auto_for=()):
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    suite = ctx.cfg.eval_suite()
    rows = []
    trained = {}
    for name, scheme, attacks in models:
        net, det, kinds = ctx.train_or_load(name, dataset, scheme, attacks)
        trained[name] = (net, det, kinds)
        mode = "auto" if name in auto_for else "manual"
        pipe = Pipeline(net=net, detector=det if mode == "auto" else None,
                        mode=mode, trained_kinds=kinds)
        report = evaluate(pipe, split, suite, workers=ctx.cfg.workers or None)
        rows.append(_report_row(name, mode, report))
        (ctx.out_dir / f"report_{name}.json").write_text(
            json.dumps(report_to_dict(report), indent=2) + "\n")
    write_csv(ctx.out_dir / f"{ctx.preset}.csv", rows, _REPORT_COLUMNS, ctx.meta)
    return trained


def preset_table1(ctx):
    _table_preset(ctx, TABLE1_MODELS)


def preset_table4(ctx):
    _table_preset(ctx, TABLE4_MODELS, auto_for=("multibn",))


def _grid_rows(grid, kinds, clean_by_branch):
    rows = []
    K = grid.shape[0]
    for tb in range(K):
        for ib in range(K):
            row = {"target_branch": tb, "inference_branch": ib,
                   "clean": clean_by_branch[ib]}
            for a, kind in enumerate(kinds):
                row[kind] = grid[tb, ib, a]
            rows.append(row)
    return rows


def _multibn_grid(ctx):
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    net, det, kinds = ctx.train_or_load("multibn", dataset, "multibn", ("pgd", "roa"))
    suite = ctx.cfg.eval_suite()
    grid, grid_kinds = cross_branch_grid(net, split, suite, trained_kinds=kinds)
    clean_by_branch = []
    for b in range(net.K):
        rho = np.zeros(net.K, dtype=net.config.dtype)
        rho[b] = 1.0
        correct = []
        for s in range(0, len(split.labels), 32):
            logits = forward_target(net, split.videos[s:s + 32], rho, "eval").data
            correct.append(np.argmax(logits, axis=1) == split.labels[s:s + 32])
        flags = np.concatenate(correct)
        clean_by_branch.append(100.0 * int(flags.sum()) / flags.size)
    return grid, grid_kinds, clean_by_branch


def preset_table2(ctx):
    """Per-branch white-box results: the grid's diagonal plus clean."""
    grid, kinds, clean_by_branch = _multibn_grid(ctx)
    rows = []
    for b in range(grid.shape[0]):
        row = {"branch": b, "clean": clean_by_branch[b]}
        for a, kind in enumerate(kinds):
            row[kind] = grid[b, b, a]
        rows.append(row)
    write_csv(ctx.out_dir / "table2.csv", rows,
              ["branch", "clean"] + list(kinds), ctx.meta)


def preset_table3(ctx):
    """Full target-branch x inference-branch gray-box grid."""
    grid, kinds, clean_by_branch = _multibn_grid(ctx)
    rows = _grid_rows(grid, kinds, clean_by_branch)
    write_csv(ctx.out_dir / "table3.csv", rows,
              ["target_branch", "inference_branch", "clean"] + list(kinds), ctx.meta)


def preset_table8(ctx):
    """Black-box transfer from a halved-width natural substitute."""
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    suite = ctx.cfg.eval_suite()
    halved = tuple(max(2, c // 2) for c in ctx.cfg.channels)
    sub_cfg = replace(ctx.cfg, channels=halved, seed=ctx.cfg.seed + 1000)
    sub_ctx = RunContext(out_dir=ctx.out_dir, cfg=sub_cfg, preset=ctx.preset,
                         force=ctx.force, verbose=ctx.verbose)
    sub_net, _, _ = sub_ctx.train_or_load("substitute", dataset, "natural")
    substitute = Pipeline(net=sub_net, mode="manual")
    rows = []
    for name, scheme, attacks in (("natural", "natural", None),
                                  ("avg", "avg", ("pgd", "roa")),
                                  ("multibn", "multibn", ("pgd", "roa"))):
        net, det, kinds = ctx.train_or_load(name, dataset, scheme, attacks)
        mode = "auto" if name == "multibn" else "manual"
        target = Pipeline(net=net, detector=det if mode == "auto" else None,
                          mode=mode, trained_kinds=kinds)
        report = blackbox_transfer(substitute, target, split, suite)
        rows.append(_report_row(name, mode, report))
    write_csv(ctx.out_dir / "table8.csv", rows, _REPORT_COLUMNS, ctx.meta)


def preset_fig5(ctx):
    """Accuracy vs attack iterations, per kind, natural and defended."""
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    t_grid = (0, 1, 2, 5)
    rows = []
    for name, scheme, attacks, mode in (("natural", "natural", None, "manual"),
                                        ("multibn", "multibn", ("pgd", "roa"), "auto")):
        net, det, kinds = ctx.train_or_load(name, dataset, scheme, attacks)
        pipe = Pipeline(net=net, detector=det if mode == "auto" else None,
                        mode=mode, trained_kinds=kinds)
        for kind in EVAL_KINDS:
            base = ctx.cfg.eval_suite([kind])[0]
            for t, acc in budget_sweep(pipe, split, kind, t_grid, "t_max",
                                       base_spec=base):
                rows.append({"model": name, "kind": kind, "t_max": t, "accuracy": acc})
    write_csv(ctx.out_dir / "fig5.csv", rows,
              ["model", "kind", "t_max", "accuracy"], ctx.meta)


def preset_fig6(ctx):
    """Accuracy vs perturbation bound, per kind."""
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    grids = {"pgd": (1 / 255, 2 / 255, 4 / 255, 8 / 255), "roa": (4, 8, 12),
             "af": (1, 2, 4), "spa": (25, 50, 100)}
    rows = []
    for name, scheme, attacks, mode in (("natural", "natural", None, "manual"),
                                        ("multibn", "multibn", ("pgd", "roa"), "auto")):
        net, det, kinds = ctx.train_or_load(name, dataset, scheme, attacks)
        pipe = Pipeline(net=net, detector=det if mode == "auto" else None,
                        mode=mode, trained_kinds=kinds)
        for kind, values in grids.items():
            base = ctx.cfg.eval_suite([kind])[0]
            for v, acc in budget_sweep(pipe, split, kind, values, "bound",
                                       base_spec=base):
                rows.append({"model": name, "kind": kind, "bound": v, "accuracy": acc})
    write_csv(ctx.out_dir / "fig6.csv", rows,
              ["model", "kind", "bound", "accuracy"], ctx.meta)


def preset_fig7(ctx):
    """Adaptive-attack robustness as a function of the detector weight."""
    dataset = ctx.dataset()
    split = ctx.eval_split(dataset)
    net, det, kinds = ctx.train_or_load("multibn", dataset, "multibn", ("pgd", "roa"))
    pipe = Pipeline(net=net, detector=det, mode="auto", trained_kinds=kinds)
    spec = AttackSpec(kind="adaptive", t_max=ctx.cfg.eval_t_max, seed=ctx.cfg.seed)
    rows = []
    for lam, acc in adaptive_curve(pipe, split, (-1.0, -0.5, 0.0, 0.5, 1.0), spec):
        rows.append({"lambda": lam, "accuracy": acc})
    write_csv(ctx.out_dir / "fig7.csv", rows, ["lambda", "accuracy"], ctx.meta)


def preset_fig8(ctx):
    rows = model_size_report(ctx.cfg.arch(), range(1, 5))
    write_csv(ctx.out_dir / "fig8.csv", rows,
              ["K", "shared", "bn_per_branch", "multibn_total", "ensemble_total",
               "overhead_fraction"], ctx.meta)


PRESET_RUNNERS = {
    "table1": preset_table1,
    "table2": preset_table2,
    "table3": preset_table3,
    "table4": preset_table4,
    "table8": preset_table8,
    "fig5": preset_fig5,
    "fig6": preset_fig6,
    "fig7": preset_fig7,
    "fig8": preset_fig8,
}


def run_preset(preset, out_dir, seed=0, profile="desk", force=False,
               overrides=(), verbose=False):
    """Train (or resume) and evaluate one table/figure analogue."""
    if preset not in PRESET_RUNNERS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    cfg = profiled_config(profile, seed=seed)
    if overrides:
        doc = cfg.canonical()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            doc[key.strip()] = value.strip()
        cfg = ExperimentConfig.from_mapping(doc)
    ctx = RunContext(out_dir=out_dir, cfg=cfg, preset=preset, force=force,
                     verbose=verbose)
    ctx.prepare()
    PRESET_RUNNERS[preset](ctx)
    return ctx.out_dir
