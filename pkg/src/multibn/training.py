"""Training objectives, SGD, and the training loop.

Seven schemes: natural, madry, mixed, and trades train a single-BN model
against zero or one perturbation type; avg, max, and msd train it against
several; multibn trains the K-branch model end to end with the detector.
Inner maximization always runs in eval mode through fixed branch weights
(the crafted example is a constant of the outer step), and outer batches
are homogeneous per data type so BN batch statistics stay attack-pure.

The multibn objective routes each data type through its assigned branch
for both the inner attack and the running-statistic updates, while the
outer forward goes through sampled Gumbel-Softmax weights so gradients
reach the detector both via its own cross-entropy term and via the
feature aggregation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import (
    AttackSpec,
    _batch_mask,
    _expand_mask,
    _input_gradient,
    attack_on_branch,
    batch_ce_loss,
    run_attack,
)
from .autodiff import Tape, Tensor
from .container import IntegrityError, load_tensors, save_tensors
from .nets import (
    ArchConfig,
    DetectorNet,
    FullModel,
    MultiBnNet,
    build_detector_net,
    build_target_net,
    forward_full,
    forward_target,
)
from .seeding import derived_rng
from .selection import GumbelConfig

SCHEMES = ("natural", "madry", "mixed", "trades", "avg", "max", "msd", "multibn")
SINGLE_VARIANTS = ("natural", "madry", "mixed", "trades")
MULTI_VARIANTS = ("avg", "max", "msd")

DEFAULT_TRAIN_SPECS = (AttackSpec(kind="pgd"), AttackSpec(kind="roa"))


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; message carries epoch/step context."""


@dataclass(frozen=True)
class TrainConfig:
    scheme: str
    attack_specs: tuple = DEFAULT_TRAIN_SPECS
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 0.1  # detector-loss weight, multibn only
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    detector_channels: tuple = (8, 16)
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    metric_subset: int | None = 128  # test samples for per-epoch metrics
    metric_attacks: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        specs = tuple(self.attack_specs)
        object.__setattr__(self, "attack_specs", specs)
        n = len(specs)
        if self.scheme in ("madry", "mixed", "trades") and n != 1:
            raise ValueError(f"{self.scheme} trains against exactly one attack, got {n}")
        if self.scheme in MULTI_VARIANTS + ("multibn",) and n < 1:
            raise ValueError(f"{self.scheme} needs at least one attack spec")

    @property
    def K(self):
        return len(self.attack_specs) + 1 if self.scheme == "multibn" else 1


def build_models(cfg):
    """Target net (K per scheme) and, for multibn, the detector."""
    arch = replace(cfg.arch, K=cfg.K)
    net = build_target_net(arch, seed=cfg.seed)
    det = None
    if cfg.scheme == "multibn":
        det = build_detector_net(cfg.K, seed=cfg.seed + 1,
                                 channels=cfg.detector_channels, base=arch)
    return net, det


# ---------------------------------------------------------------------------
# shared pieces


def _single_rho(net):
    return np.ones(1, dtype=net.config.dtype) if net.K == 1 else _one_hot(net.K, 0)


def _one_hot(K, k):
    v = np.zeros(K)
    v[k] = 1.0
    return v


def _eval_loss_fn(model, rho):
    return batch_ce_loss(lambda xt: forward_target(model, xt, rho, "eval"))


def _per_sample_ce(logits, y):
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    return lse - logits[np.arange(len(y)), y]


def _train_forward(model, x, params, stats_branches=(0,)):
    rho = _single_rho(model)
    return forward_target(model, x, rho, "train", params=params,
                          stats_branches=stats_branches)


# ---------------------------------------------------------------------------
# objectives


def single_perturbation_loss(variant, model, x, y, spec, params=None, sample_ids=None):
    """Clean / adversarial-only / mixed / soft-target objectives (one type)."""
    if variant not in SINGLE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {SINGLE_VARIANTS}")
    y = np.asarray(y)
    if variant == "natural":
        return ad.cross_entropy(_train_forward(model, x, params), y)
    rho = _single_rho(model)
    if variant == "trades":
        z_clean = _train_forward(model, x, params)
        target = np.exp(z_clean.data - z_clean.data.max(axis=1, keepdims=True))
        target = target / target.sum(axis=1, keepdims=True)

        def craft_loss(xt, _y):
            return ad.soft_cross_entropy(forward_target(model, xt, rho, "eval"), target, "sum")

        x_adv = run_attack(craft_loss, x, y, spec, sample_ids=sample_ids)
        # the soft target is live (same tape as the clean forward), so both
        # sides of the agreement term push on the parameters
        adv_term = ad.soft_cross_entropy_pair(_train_forward(model, x_adv, params), z_clean)
        return ad.add(ad.cross_entropy(z_clean, y), adv_term)
    x_adv = run_attack(_eval_loss_fn(model, rho), x, y, spec, sample_ids=sample_ids)
    if variant == "madry":
        return ad.cross_entropy(_train_forward(model, x_adv, params), y)
    clean_term = ad.cross_entropy(_train_forward(model, x, params), y)
    adv_term = ad.cross_entropy(_train_forward(model, x_adv, params), y)
    return ad.add(clean_term, adv_term)


def _msd_craft(model, x, y, specs, sample_ids):
    """One shared gradient per iteration; per-sample best typed candidate step."""
    x0 = np.asarray(x)
    rho = _single_rho(model)
    loss_fn = _eval_loss_fn(model, rho)
    masks = []
    for spec in specs:
        if spec.kind in ("roa", "af", "spa"):
            masks.append(_expand_mask(_batch_mask(spec.kind, x0, spec, sample_ids), x0))
        else:
            masks.append(None)
    x_adv = x0.copy()
    for _ in range(max(s.t_max for s in specs)):
        g = _input_gradient(loss_fn, x_adv, y)
        sg = ad.sign(g)
        candidates = []
        for spec, mask in zip(specs, masks):
            step = spec.resolved_alpha() * sg
            if mask is not None:
                step = step * mask
            eps = spec.resolved_epsilon()
            cand = x0 + np.clip((x_adv + step) - x0, -eps, eps)
            candidates.append(np.clip(cand, 0.0, 1.0))
        if len(candidates) == 1:
            x_adv = candidates[0]
            continue
        losses = np.stack([
            _per_sample_ce(forward_target(model, cand, rho, "eval").data, y)
            for cand in candidates
        ])
        best = np.argmax(losses, axis=0)  # ties resolve to the lowest index
        x_adv = np.stack([candidates[k][b] for b, k in enumerate(best)])
    if len(specs) == 1 and masks[0] is not None:
        keep = np.broadcast_to(masks[0] > 0, x_adv.shape)
        x_adv = np.where(keep, x_adv, x0)
    return x_adv.astype(x0.dtype, copy=False)


def multi_perturbation_loss(variant, model, x, y, specs, params=None, sample_ids=None):
    """Objectives over several perturbation types, clean term included."""
    if variant not in MULTI_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {MULTI_VARIANTS}")
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one attack spec")
    y = np.asarray(y)
    rho = _single_rho(model)
    # All crafting runs before any train-mode forward so the attacks see the
    # same running statistics regardless of variant (N=1 then reduces to
    # mixed bitwise).
    if variant == "msd":
        adv_batches = [_msd_craft(model, x, y, specs, sample_ids)]
    else:
        crafted = [run_attack(_eval_loss_fn(model, rho), x, y, spec, sample_ids=sample_ids)
                   for spec in specs]
        if variant == "avg":
            adv_batches = crafted
        elif len(crafted) == 1:
            adv_batches = crafted
        else:
            # max: per-sample worst crafted type by its eval loss, ties to
            # the lowest spec index
            losses = np.stack([
                _per_sample_ce(forward_target(model, x_adv, rho, "eval").data, y)
                for x_adv in crafted
            ])
            best = np.argmax(losses, axis=0)
            adv_batches = [np.stack([crafted[k][b] for b, k in enumerate(best)])]
    total = ad.cross_entropy(_train_forward(model, x, params), y)
    for x_adv in adv_batches:
        total = ad.add(total, ad.cross_entropy(_train_forward(model, x_adv, params), y))
    return total


def multibn_loss(model, det, x, y, specs, lam, params=None, det_params=None,
                 gumbel=None, rng=None, sample_ids=None):
    """End-to-end objective: task + detector terms over clean and each type.

    Per data type: the example is crafted through its assigned branch with
    one-hot weights, the outer forward goes through sampled Gumbel-Softmax
    weights from the detector, running statistics update only the assigned
    branch, and the detector gets a cross-entropy term against the type
    label (clean=0, spec_i=i+1) weighted by ``lam``.  The Gumbel stream is
    consumed in batch order: clean first, then each spec.
    """
    specs = list(specs)
    if model.K != len(specs) + 1:
        raise ValueError(f"model has K={model.K} branches but {len(specs)} specs; need K=N+1")
    y = np.asarray(y)
    gumbel = gumbel if gumbel is not None else GumbelConfig()
    fm = FullModel(net=model, detector=det, gumbel=gumbel)

    def term(batch_x, branch, det_label):
        logits, det_logits, _ = forward_full(
            fm, batch_x, mode="train", rng=rng, net_params=params,
            det_params=det_params, stats_branches=(branch,))
        t = ad.cross_entropy(logits, y)
        if lam != 0.0:
            labels = np.full(len(y), det_label, dtype=np.int64)
            t = ad.add(t, ad.scale(ad.cross_entropy(det_logits, labels), lam))
        return t

    total = term(x, 0, 0)
    for i, spec in enumerate(specs):
        x_adv = attack_on_branch(model, i + 1, x, y, spec, sample_ids=sample_ids)
        total = ad.add(total, term(x_adv, i + 1, i + 1))
    return total


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads, state, cfg, lr=None):
    """Momentum SGD: v <- mu*v + g + wd*p; p <- p - lr*v (in place).

    ``state`` maps parameter names to momentum buffers and is created on
    first use.  Non-finite gradients abort with the offending name.
    """
    eff_lr = cfg.lr if lr is None else lr
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
            state[name] = v
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= eff_lr * v
    return params


def lr_at_epoch(cfg, epoch):
    """Base rate, dropped x0.1 from epoch ceil(epochs/2) (1-based) onward."""
    return cfg.lr * (0.1 if epoch >= math.ceil(cfg.epochs / 2) else 1.0)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    net: MultiBnNet
    detector: DetectorNet | None
    opt_state: dict
    config: TrainConfig
    metrics: list  # rows: {epoch, split, input_type, accuracy, loss}


def _step_spec(spec, cfg_seed, epoch, step, idx):
    seed = int(derived_rng(cfg_seed, "attack-seed", epoch, step, idx).integers(2 ** 62))
    return replace(spec, seed=seed)


def _batch_loss(cfg, net, det, x, y, specs, params, det_params, gumbel_rng, sample_ids):
    if cfg.scheme == "natural":
        return single_perturbation_loss("natural", net, x, y, None, params=params)
    if cfg.scheme in ("madry", "mixed", "trades"):
        return single_perturbation_loss(cfg.scheme, net, x, y, specs[0],
                                        params=params, sample_ids=sample_ids)
    if cfg.scheme in MULTI_VARIANTS:
        return multi_perturbation_loss(cfg.scheme, net, x, y, specs,
                                       params=params, sample_ids=sample_ids)
    return multibn_loss(net, det, x, y, specs, cfg.lam, params=params,
                        det_params=det_params, gumbel=cfg.gumbel,
                        rng=gumbel_rng, sample_ids=sample_ids)


def predict(net, det, x, batch_size=64):
    """Eval-mode class predictions; detector-routed when a detector exists."""
    out = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        if det is not None:
            fm = FullModel(net=net, detector=det,
                           gumbel=GumbelConfig(noise_mode="deterministic"))
            logits = forward_full(fm, xb, mode="eval")[0]
        else:
            logits = forward_target(net, xb, _single_rho(net), "eval")
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _metric_rows(cfg, net, det, dataset, epoch):
    sub = len(dataset.test) if cfg.metric_subset is None else min(cfg.metric_subset,
                                                                 len(dataset.test))
    if sub == 0:
        return []
    x = dataset.test.videos[:sub]
    y = dataset.test.labels[:sub]
    ids = dataset.test.ids[:sub]
    rows = []

    def row(input_type, xe):
        if det is not None:
            fm = FullModel(net=net, detector=det,
                           gumbel=GumbelConfig(noise_mode="deterministic"))
            logits = forward_full(fm, xe, mode="eval")[0].data
        else:
            logits = forward_target(net, xe, _single_rho(net), "eval").data
        acc = float((np.argmax(logits, axis=1) == y).mean())
        loss = float(_per_sample_ce(logits, y).mean())
        rows.append({"epoch": epoch, "split": "test", "input_type": input_type,
                     "accuracy": acc, "loss": loss})

    row("clean", x)
    if cfg.metric_attacks:
        for spec in cfg.attack_specs:
            cheap = replace(spec, t_max=1,
                            seed=int(derived_rng(cfg.seed, "metric", epoch).integers(2 ** 62)))
            if det is not None:
                fm = FullModel(net=net, detector=det,
                               gumbel=GumbelConfig(noise_mode="deterministic"))
                loss_fn = batch_ce_loss(lambda xt: forward_full(fm, xt, mode="eval")[0])
            else:
                loss_fn = _eval_loss_fn(net, _single_rho(net))
            xa = run_attack(loss_fn, x, y, cheap, sample_ids=ids)
            row(spec.kind, xa)
    return rows


def train(cfg, dataset, verbose=False):
    """Run the configured scheme over the dataset; returns model + metrics."""
    net, det = build_models(cfg)
    opt_state = {}
    metrics = []
    shuffle_rng = derived_rng(cfg.seed, "shuffle")
    gumbel_rng = derived_rng(cfg.seed, "gumbel-train")
    n = len(dataset.train)
    if n < 1:
        raise ValueError("empty training split")
    steps = math.ceil(n / cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        for step in range(steps):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = dataset.train.videos[idx]
            y = dataset.train.labels[idx]
            ids = dataset.train.ids[idx]
            specs = [_step_spec(s, cfg.seed, epoch, step, j)
                     for j, s in enumerate(cfg.attack_specs)]
            with Tape() as tape:
                params = net.param_tensors(requires_grad=True)
                det_params = det.param_tensors(requires_grad=True) if det else None
                loss = _batch_loss(cfg, net, det, x, y, specs, params, det_params,
                                   gumbel_rng, ids)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step} ({cfg.scheme})")
                grads = tape.backward(loss)
            named = {"net": (net, params), "det": (det, det_params)}
            for prefix, (module, ptensors) in named.items():
                if module is None:
                    continue
                arrays = module.parameters()
                gdict = {}
                for pname, pt in ptensors.items():
                    g = grads.get(pt)
                    if g is not None:
                        gdict[pname] = g.astype(arrays[pname].dtype, copy=False)
                scoped = {f"{prefix}/{k}": v for k, v in arrays.items()}
                sgd_step(scoped, {f"{prefix}/{k}": v for k, v in gdict.items()},
                         opt_state, cfg, lr=lr)
            tape.release()  # per-step graphs are large; free before the next batch
        rows = _metric_rows(cfg, net, det, dataset, epoch)
        metrics.extend(rows)
        if verbose:
            clean = next((r for r in rows if r["input_type"] == "clean"), None)
            msg = f"epoch {epoch}/{cfg.epochs} lr={lr:g}"
            if clean:
                msg += f" clean_acc={clean['accuracy']:.3f} loss={clean['loss']:.3f}"
            print(msg, flush=True)
    return TrainResult(net=net, detector=det, opt_state=opt_state, config=cfg,
                       metrics=metrics)


# ---------------------------------------------------------------------------
# checkpoints


def _config_echo(cfg):
    echo = asdict(cfg)
    echo["attack_specs"] = [asdict(s) for s in cfg.attack_specs]
    echo["arch"] = asdict(cfg.arch)
    echo["gumbel"] = asdict(cfg.gumbel)
    echo["detector_channels"] = list(cfg.detector_channels)
    return echo


def save_checkpoint(path, result, epoch=None):
    cfg = result.config
    tensors = {}
    net = result.net
    tensors.update(net.parameters())
    tensors.update(net.buffers())
    if result.detector is not None:
        tensors.update({f"det/{k}": v for k, v in result.detector.parameters().items()})
        tensors.update({f"det/{k}": v for k, v in result.detector.buffers().items()})
    tensors.update({f"opt/{k}": v for k, v in result.opt_state.items()})
    arch = replace(cfg.arch, K=cfg.K)
    manifest = {
        "K": cfg.K,
        "num_classes": arch.num_classes,
        "arch": asdict(arch),
        "detector_channels": list(cfg.detector_channels) if result.detector else None,
        "scheme": cfg.scheme,
        "seed": cfg.seed,
        "epoch": epoch if epoch is not None else cfg.epochs,
        "config": _config_echo(cfg),
    }
    save_tensors(path, tensors, manifest)


def load_checkpoint(path):
    """Rebuild (net, detector|None, opt_state, manifest) from a checkpoint."""
    tensors, manifest = load_tensors(path)
    try:
        arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in manifest["arch"].items()})
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}: not a checkpoint container ({exc})") from exc
    net = MultiBnNet(arch, seed=0)
    net.load_arrays({k: v for k, v in tensors.items()
                     if not k.startswith(("det/", "opt/"))})
    det = None
    if manifest.get("detector_channels"):
        det = build_detector_net(arch.K, seed=0,
                                 channels=tuple(manifest["detector_channels"]), base=arch)
        det.net.load_arrays({k[len("det/"):]: v for k, v in tensors.items()
                             if k.startswith("det/")})
    opt_state = {k[len("opt/"):]: v for k, v in tensors.items() if k.startswith("opt/")}
    return net, det, opt_state, manifest
