"""Robustness metrics and evaluation protocols.

The central object is a Pipeline: a target net plus (optionally) the
detector, evaluated either with automatic branch selection or with manual
one-hot routing by known input type.  Attacks here are white-box against
the evaluated configuration: in auto mode they differentiate through the
detector and selector, in manual mode through the branch used at
inference.  Crafting losses are summed over the batch, so every report is
bitwise independent of batch chunking; that is also what makes the
sample-parallel path safe.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, adaptive_attack, attack_on_branch, batch_ce_loss, run_attack
from .nets import (
    ArchConfig,
    FullModel,
    MultiBnNet,
    build_detector_net,
    count_parameters,
    forward_full,
    forward_target,
    parameter_counts,
)
from .selection import GumbelConfig

EVAL_KINDS = ("pgd", "roa", "af", "spa")
TYPE_GROUP = {"pgd": "lp", "spa": "lp", "roa": "physical", "af": "physical"}

_BATCH = 32


def branch_for_kind(kind, K, trained_kinds=("pgd", "roa")):
    """Inference branch for an input type under manual routing.

    Trained attack i sits on branch i+1; an unforeseen kind routes to the
    first trained branch of the same constraint group (Lp vs physical),
    falling back to branch 1.  Single-branch models always use branch 0.
    """
    if K == 1 or kind == "clean":
        return 0
    trained = tuple(trained_kinds)
    if kind in trained:
        return trained.index(kind) + 1
    group = TYPE_GROUP.get(kind)
    for i, t in enumerate(trained):
        if TYPE_GROUP.get(t) == group:
            return i + 1
    return 1


@dataclass
class Pipeline:
    """A model under evaluation: net, optional detector, and routing mode."""

    net: MultiBnNet
    detector: object = None
    mode: str = "manual"
    trained_kinds: tuple = ("pgd", "roa")
    gumbel: GumbelConfig = field(default_factory=lambda: GumbelConfig(noise_mode="deterministic"))

    def __post_init__(self):
        if self.mode not in ("auto", "manual"):
            raise ValueError(f"mode must be 'auto' or 'manual', got {self.mode!r}")
        if self.mode == "auto" and self.detector is None:
            raise ValueError("auto mode needs a detector")

    def _rho(self, kind):
        b = branch_for_kind(kind, self.net.K, self.trained_kinds)
        rho = np.zeros(self.net.K, dtype=self.net.config.dtype)
        rho[b] = 1.0
        return rho

    def logits_for(self, x, kind):
        """Eval-mode class logits for inputs of a (claimed) type."""
        if self.mode == "auto":
            fm = FullModel(net=self.net, detector=self.detector, gumbel=self.gumbel)
            return forward_full(fm, x, mode="eval")[0].data
        return forward_target(self.net, x, self._rho(kind), "eval").data

    def craft_loss_fn(self, kind):
        """White-box crafting loss matching the inference configuration."""
        if self.mode == "auto":
            fm = FullModel(net=self.net, detector=self.detector, gumbel=self.gumbel)
            return batch_ce_loss(lambda xt: forward_full(fm, xt, mode="eval")[0])
        rho = self._rho(kind)
        return batch_ce_loss(lambda xt: forward_target(self.net, xt, rho, "eval"))


@dataclass
class EvalReport:
    """Per-type accuracies plus the row-conjunction union over all types."""

    types: tuple
    per_type_accuracy: dict
    mean_accuracy: float
    union_accuracy: float
    correctness_matrix: np.ndarray  # [samples, len(types)] bool


def mean_accuracy(per_type):
    """Arithmetic mean of exactly five per-type percentages (clean included)."""
    values = [float(v) for v in per_type]
    if len(values) != 5:
        raise ValueError(f"expected five per-type accuracies, got {len(values)}")
    return float(np.mean(values))


def _pct(flags):
    flags = np.asarray(flags, dtype=bool)
    return 100.0 * int(flags.sum()) / flags.size


def union_accuracy(correctness_matrix):
    """Percentage of samples classified correctly under every type."""
    rows = list(correctness_matrix)
    if rows and len({len(np.atleast_1d(r)) for r in rows}) != 1:
        raise ValueError("ragged correctness matrix")
    mat = np.asarray(rows, dtype=bool)
    if mat.ndim != 2:
        raise ValueError(f"expected a samples x types matrix, got shape {mat.shape}")
    return _pct(mat.all(axis=1))


def _correct_clean(pipeline, x, y):
    out = np.empty(len(y), dtype=bool)
    for s in range(0, len(y), _BATCH):
        xb, yb = x[s:s + _BATCH], y[s:s + _BATCH]
        out[s:s + _BATCH] = np.argmax(pipeline.logits_for(xb, "clean"), axis=1) == yb
    return out


def _correct_under_attack(pipeline, x, y, ids, spec, crafter=None):
    """Per-sample correctness after crafting; ``crafter`` defaults to the
    evaluated pipeline (white box) and may be a substitute (black box)."""
    crafter = crafter if crafter is not None else pipeline
    out = np.empty(len(y), dtype=bool)
    for s in range(0, len(y), _BATCH):
        xb, yb, ib = x[s:s + _BATCH], y[s:s + _BATCH], ids[s:s + _BATCH]
        x_adv = run_attack(crafter.craft_loss_fn(spec.kind), xb, yb, spec, sample_ids=ib)
        out[s:s + _BATCH] = np.argmax(pipeline.logits_for(x_adv, spec.kind), axis=1) == yb
    return out


def _report_from_matrix(types, matrix):
    per = {t: _pct(matrix[:, j]) for j, t in enumerate(types)}
    return EvalReport(
        types=tuple(types),
        per_type_accuracy=per,
        mean_accuracy=float(np.mean(list(per.values()))),
        union_accuracy=union_accuracy(matrix),
        correctness_matrix=matrix,
    )


def evaluate(pipeline, split, attack_suite, workers=None, crafter=None):
    """Clean plus per-attack accuracy on a dataset split.

    ``workers`` > 1 shards the split across processes (merged by sample
    order, bitwise identical to the sequential path); default comes from
    the MULTIBN_WORKERS environment variable.
    """
    if len(split.labels) == 0:
        raise ValueError("empty evaluation split")
    suite = list(attack_suite)
    kinds = [s.kind for s in suite]
    if len(set(kinds)) != len(kinds):
        raise ValueError("duplicate attack kinds in suite")
    workers = _worker_count(workers)
    if workers > 1 and crafter is None:
        matrix = _parallel_matrix(pipeline, split, suite, workers)
    else:
        x, y, ids = split.videos, split.labels, split.ids
        cols = [_correct_clean(pipeline, x, y)]
        for spec in suite:
            cols.append(_correct_under_attack(pipeline, x, y, ids, spec, crafter=crafter))
        matrix = np.stack(cols, axis=1)
    return _report_from_matrix(["clean"] + kinds, matrix)


# ---------------------------------------------------------------------------
# sample-parallel evaluation


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("MULTIBN_WORKERS", "1")))


def _pipeline_payload(pipeline):
    payload = {
        "arch": asdict(pipeline.net.config),
        "net": {k: v.copy() for k, v in {**pipeline.net.parameters(),
                                         **pipeline.net.buffers()}.items()},
        "mode": pipeline.mode,
        "trained_kinds": tuple(pipeline.trained_kinds),
        "gumbel": asdict(pipeline.gumbel),
        "det": None,
    }
    if pipeline.detector is not None:
        det = pipeline.detector
        payload["det"] = {
            "channels": tuple(det.net.config.channels),
            "arrays": {k: v.copy() for k, v in {**det.parameters(), **det.buffers()}.items()},
        }
    return payload


def _pipeline_from_payload(payload):
    arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in payload["arch"].items()})
    net = MultiBnNet(arch, seed=0)
    net.load_arrays(payload["net"])
    det = None
    if payload["det"] is not None:
        det = build_detector_net(arch.K, seed=0,
                                 channels=tuple(payload["det"]["channels"]), base=arch)
        det.net.load_arrays(payload["det"]["arrays"])
    return Pipeline(net=net, detector=det, mode=payload["mode"],
                    trained_kinds=tuple(payload["trained_kinds"]),
                    gumbel=GumbelConfig(**payload["gumbel"]))


def _eval_shard(args):
    payload, specs, x, y, ids = args
    pipeline = _pipeline_from_payload(payload)
    cols = [_correct_clean(pipeline, x, y)]
    for spec_kw in specs:
        spec = AttackSpec(**spec_kw)
        cols.append(_correct_under_attack(pipeline, x, y, ids, spec))
    return np.stack(cols, axis=1)


def _parallel_matrix(pipeline, split, suite, workers):
    payload = _pipeline_payload(pipeline)
    specs = [asdict(s) for s in suite]
    n = len(split.labels)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    tasks = [(payload, specs, split.videos[a:b], split.labels[a:b], split.ids[a:b])
             for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_eval_shard, tasks))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# protocols


def cross_branch_grid(net, split, attacks, trained_kinds=("pgd", "roa")):
    """Accuracy for every (crafting branch, inference branch, attack) triple.

    The diagonal is the white-box manual protocol; off-diagonal cells craft
    through one branch and classify through another (the gray-box setting).
    """
    if len(split.labels) == 0:
        raise ValueError("empty evaluation split")
    attacks = list(attacks)
    K = net.K
    x, y, ids = split.videos, split.labels, split.ids
    grid = np.zeros((K, K, len(attacks)))
    for a, spec in enumerate(attacks):
        for tb in range(K):
            advs = []
            for s in range(0, len(y), _BATCH):
                advs.append(attack_on_branch(net, tb, x[s:s + _BATCH], y[s:s + _BATCH],
                                             spec, sample_ids=ids[s:s + _BATCH]))
            x_adv = np.concatenate(advs, axis=0)
            for ib in range(K):
                rho = np.zeros(K, dtype=net.config.dtype)
                rho[ib] = 1.0
                correct = np.empty(len(y), dtype=bool)
                for s in range(0, len(y), _BATCH):
                    logits = forward_target(net, x_adv[s:s + _BATCH], rho, "eval").data
                    correct[s:s + _BATCH] = np.argmax(logits, axis=1) == y[s:s + _BATCH]
                grid[tb, ib, a] = _pct(correct)
    return grid, tuple(s.kind for s in attacks)


def budget_sweep(pipeline, split, kind, values, vary, base_spec=None):
    """Accuracy curve over attack budgets.

    ``vary`` is ``t_max`` or ``bound``; the bound maps to epsilon for pgd
    and to the kind's mask-size parameter otherwise.  ``t_max`` = 0 or a
    zero bound reproduces clean accuracy.
    """
    if vary not in ("t_max", "bound"):
        raise ValueError(f"vary must be 't_max' or 'bound', got {vary!r}")
    spec = base_spec if base_spec is not None else AttackSpec(kind=kind)
    if spec.kind != kind:
        raise ValueError(f"base spec kind {spec.kind!r} does not match {kind!r}")
    bound_field = {"pgd": "epsilon", "adaptive": "epsilon", "roa": "s_roa",
                   "af": "s_af", "spa": "s_spa"}[kind]
    curve = []
    for v in values:
        if vary == "t_max":
            s = replace(spec, t_max=int(v))
        elif kind in ("pgd", "adaptive"):
            s = replace(spec, epsilon=float(v))
        else:
            s = replace(spec, **{bound_field: int(v)})
        correct = _correct_under_attack(pipeline, split.videos, split.labels,
                                        split.ids, s)
        curve.append((v, _pct(correct)))
    return curve


def blackbox_transfer(substitute, target, split, attacks, workers=None):
    """Evaluate ``target`` on examples crafted white-box on ``substitute``."""
    return evaluate(target, split, attacks, workers=workers, crafter=substitute)


def adaptive_curve(pipeline, split, lambdas, spec):
    """Robust accuracy of the full pipeline under the joint attack, per lambda.

    The detector target is the branch the attack kind routes to, so positive
    lambda spends budget pushing the selector off that branch and negative
    lambda spends it reinforcing the routing.
    """
    if pipeline.mode != "auto":
        raise ValueError("adaptive attacks target the automatic pipeline")
    fm = FullModel(net=pipeline.net, detector=pipeline.detector, gumbel=pipeline.gumbel)
    y_det = branch_for_kind(spec.kind, pipeline.net.K, pipeline.trained_kinds)
    x, y, ids = split.videos, split.labels, split.ids
    curve = []
    for lam in lambdas:
        correct = np.empty(len(y), dtype=bool)
        for s in range(0, len(y), _BATCH):
            xb, yb, ib = x[s:s + _BATCH], y[s:s + _BATCH], ids[s:s + _BATCH]
            x_adv = adaptive_attack(fm, xb, yb, y_det, float(lam), spec, sample_ids=ib)
            logits = pipeline.logits_for(x_adv, spec.kind)
            correct[s:s + _BATCH] = np.argmax(logits, axis=1) == yb
        curve.append((float(lam), _pct(correct)))
    return curve


# ---------------------------------------------------------------------------
# sanity checks


DEFAULT_BUDGET_GRIDS = {
    "pgd": (2 / 255, 4 / 255, 8 / 255),
    "roa": (4, 8, 12),
    "af": (1, 2, 4),
    "spa": (25, 50, 100),
}


def sanity_check_suite(pipeline, split, substitute, seed=0, tolerance=2.0,
                       grids=None):
    """The four attack-correctness checks, with measured evidence.

    1. five-step PGD is at least as successful as one-step;
    2. white-box robust accuracy <= black-box (substitute-crafted) per type;
    3. an unbounded attack drives accuracy to ~0;
    4. accuracy is non-increasing in the budget, within ``tolerance`` points.
    """
    grids = grids if grids is not None else DEFAULT_BUDGET_GRIDS
    x, y, ids = split.videos, split.labels, split.ids

    def acc_under(spec, crafter=None):
        return _pct(_correct_under_attack(pipeline, x, y, ids, spec, crafter=crafter))

    checks = {}
    a1 = acc_under(AttackSpec(kind="pgd", t_max=1, seed=seed))
    a5 = acc_under(AttackSpec(kind="pgd", t_max=5, seed=seed))
    checks["iterative_stronger"] = {
        "passed": bool(a5 <= a1 + 1e-9),
        "one_step_accuracy": a1,
        "five_step_accuracy": a5,
    }
    per = {}
    ok = True
    for kind in EVAL_KINDS:
        spec = AttackSpec(kind=kind, t_max=5, seed=seed)
        white = acc_under(spec)
        black = acc_under(spec, crafter=substitute)
        per[kind] = {"white": white, "black": black}
        ok = ok and white <= black + 1e-9
    checks["whitebox_stronger"] = {"passed": bool(ok), "per_type": per}
    unbounded = AttackSpec(kind="pgd", epsilon=1.0, t_max=10, seed=seed)
    au = acc_under(unbounded)
    checks["unbounded_reaches_zero"] = {"passed": bool(au <= 0.5), "accuracy": au}
    curves = {}
    ok = True
    for kind, values in grids.items():
        curve = budget_sweep(pipeline, split, kind, values, "bound",
                             base_spec=AttackSpec(kind=kind, t_max=5, seed=seed))
        curves[kind] = curve
        for (_, lo), (_, hi) in zip(curve[1:], curve[:-1]):
            ok = ok and lo <= hi + tolerance
    checks["monotone_in_budget"] = {"passed": bool(ok), "curves": curves}
    checks["all_passed"] = all(v["passed"] for k, v in checks.items() if k != "all_passed")
    return checks


# ---------------------------------------------------------------------------
# model size accounting


def model_size_report(config, K_range):
    """Exact parameter counts: shared backbone + K BN branches vs K models."""
    rows = []
    for K in K_range:
        c = parameter_counts(replace(config, K=int(K)))
        rows.append({
            "K": int(K),
            "shared": c["shared"],
            "bn_per_branch": c["bn_per_branch"],
            "multibn_total": c["total"],
            "ensemble_total": c["ensemble_total"],
            "overhead_fraction": c["overhead_fraction"],
        })
    return rows


def enumerate_count(net):
    """Checkpoint-style enumeration oracle for the closed-form counts."""
    return count_parameters(net)


# ---------------------------------------------------------------------------
# serialization


def report_to_dict(report):
    return {
        "types": list(report.types),
        "per_type_accuracy": {k: float(v) for k, v in report.per_type_accuracy.items()},
        "mean_accuracy": float(report.mean_accuracy),
        "union_accuracy": float(report.union_accuracy),
        "correctness_matrix": report.correctness_matrix.astype(int).tolist(),
    }


def report_from_dict(doc):
    return EvalReport(
        types=tuple(doc["types"]),
        per_type_accuracy=dict(doc["per_type_accuracy"]),
        mean_accuracy=doc["mean_accuracy"],
        union_accuracy=doc["union_accuracy"],
        correctness_matrix=np.asarray(doc["correctness_matrix"], dtype=bool),
    )
