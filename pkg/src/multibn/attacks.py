"""White-box adversarial attacks on video batches.

All five attacks share one projected signed-gradient loop.  The dense
attack bounds the perturbation in L-infinity; the rectangle, border-band,
and sparse-pixel attacks instead confine an unbounded perturbation to a
binary per-frame mask, with [0,1] as the only magnitude constraint.  The
adaptive variant runs the same loop on a joint classifier-plus-detector
loss through the full selection pipeline.

Model hooks are loss builders ``loss_fn(x_tensor, y) -> scalar Tensor``
recorded on the active tape; attacks own the tape and the iteration.
Masks and random starts derive from (spec.seed, purpose, sample id), so
results do not depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nets import forward_full, forward_target
from .seeding import derived_rng

PGD_DEFAULT_EPS = 4.0 / 255.0
MASKED_ALPHA_DEFAULT = 0.25
MASKED_KINDS = ("roa", "af", "spa")
ATTACK_KINDS = ("pgd",) + MASKED_KINDS + ("adaptive",)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float | None = None  # None resolves to 4/255 (pgd) or 1 (masked)
    alpha: float | None = None  # None resolves to 2.5*eps/t_max or 0.25 (masked)
    t_max: int = 5
    s_roa: int = 8
    s_af: int = 2
    s_spa: int = 50
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.kind in MASKED_KINDS and self.epsilon not in (None, 1.0):
            raise ValueError(f"{self.kind} is unbounded on its mask; epsilon must be 1, got {self.epsilon}")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.t_max < 0:
            raise ValueError(f"t_max must be >= 0, got {self.t_max}")
        if min(self.s_roa, self.s_af, self.s_spa) < 0:
            raise ValueError("mask sizes must be >= 0")

    def resolved_epsilon(self):
        if self.epsilon is not None:
            return self.epsilon
        return 1.0 if self.kind in MASKED_KINDS else PGD_DEFAULT_EPS

    def resolved_alpha(self):
        if self.alpha is not None:
            return self.alpha
        if self.kind in MASKED_KINDS:
            return MASKED_ALPHA_DEFAULT
        if self.t_max == 0:
            return 0.0
        return 2.5 * self.resolved_epsilon() / self.t_max


# ---------------------------------------------------------------------------
# masks


def _frame_dims(x):
    if x.ndim not in (4, 5):
        raise ValueError(f"masked attacks expect [C,T,H,W] or [B,C,T,H,W] video, got shape {x.shape}")
    return x.shape[-3], x.shape[-2], x.shape[-1]


def roa_mask(T, H, W, s, rng):
    """One seeded axis-aligned s x s rectangle per frame."""
    if s > min(H, W):
        raise ValueError(f"rectangle side {s} exceeds frame {H}x{W}")
    mask = np.zeros((T, H, W), dtype=np.float32)
    if s == 0:
        return mask
    for t in range(T):
        top = int(rng.integers(0, H - s + 1))
        left = int(rng.integers(0, W - s + 1))
        mask[t, top:top + s, left:left + s] = 1.0
    return mask


def af_mask(T, H, W, s):
    """Border band of width s on every frame; popcount HW - max(H-2s,0)*max(W-2s,0)."""
    if s > -(-min(H, W) // 2):  # ceil division
        raise ValueError(f"framing width {s} exceeds ceil(min(H,W)/2) for frame {H}x{W}")
    mask = np.zeros((T, H, W), dtype=np.float32)
    if s == 0:
        return mask
    mask[:, :s, :] = 1.0
    mask[:, H - s:, :] = 1.0
    mask[:, :, :s] = 1.0
    mask[:, :, W - s:] = 1.0
    return mask


def spa_mask(T, H, W, s, rng):
    """s distinct seeded pixels per frame, all channels perturbable."""
    if s > H * W:
        raise ValueError(f"{s} pixels per frame exceed the {H}x{W} frame")
    mask = np.zeros((T, H * W), dtype=np.float32)
    for t in range(T):
        if s:
            mask[t, rng.choice(H * W, size=s, replace=False)] = 1.0
    return mask.reshape(T, H, W)


def _batch_mask(kind, x, spec, sample_ids):
    """Per-sample [B, T, H, W] mask stack from the seeded stream."""
    T, H, W = _frame_dims(x)
    B = x.shape[0] if x.ndim == 5 else 1
    if sample_ids is None:
        sample_ids = np.arange(B)
    if len(sample_ids) != B:
        raise ValueError(f"{len(sample_ids)} sample ids for a batch of {B}")
    masks = np.empty((B, T, H, W), dtype=np.float32)
    for i, sid in enumerate(sample_ids):
        rng = derived_rng(spec.seed, "mask", kind, int(sid))
        if kind == "roa":
            masks[i] = roa_mask(T, H, W, spec.s_roa, rng)
        elif kind == "af":
            masks[i] = af_mask(T, H, W, spec.s_af)
        elif kind == "spa":
            masks[i] = spa_mask(T, H, W, spec.s_spa, rng)
        else:
            raise AssertionError(kind)
    return masks if x.ndim == 5 else masks[0]


def _expand_mask(mask, x):
    """Broadcast a per-pixel mask over channels (and batch when shared)."""
    mask = np.asarray(mask, dtype=x.dtype)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask entries must be 0 or 1")
    T, H, W = _frame_dims(x)
    if x.ndim == 4:
        if mask.shape != (T, H, W):
            raise ValueError(f"mask shape {mask.shape} does not match frames {(T, H, W)}")
        return mask[None]  # [1, T, H, W] over channels
    if mask.shape == (T, H, W):
        return mask[None, None]
    if mask.shape == (x.shape[0], T, H, W):
        return mask[:, None]
    raise ValueError(f"mask shape {mask.shape} does not match video shape {x.shape}")


# ---------------------------------------------------------------------------
# the shared projected ascent loop


def _input_gradient(loss_fn, x_np, y):
    with Tape() as tape:
        xt = Tensor(x_np, requires_grad=True)
        loss = loss_fn(xt, y)
        if not isinstance(loss, Tensor) or loss._tape is not tape:
            raise TypeError("model hook must return a scalar loss recorded on the attack tape")
        grads = tape.backward(loss)
    g = grads.get(xt)
    g = np.zeros_like(x_np) if g is None else g
    tape.release()  # one graph per ascent step; don't wait for cyclic GC
    return g


def _random_start(x0, eps, mask_b, sample_ids, spec):
    batched = x0.ndim == 5
    xs = x0 if batched else x0[None]
    B = xs.shape[0]
    ids = list(sample_ids) if sample_ids is not None else list(range(B))
    out = xs.copy()
    for i in range(B):
        rng = derived_rng(spec.seed, "init", int(ids[i]))
        if mask_b is None:
            noise = rng.uniform(-eps, eps, size=xs.shape[1:])
            out[i] = np.clip(xs[i] + noise, 0.0, 1.0)
        else:
            if batched:
                m = mask_b[i] if mask_b.shape[0] == B else mask_b[0]
            else:
                m = mask_b
            values = rng.uniform(0.0, 1.0, size=xs.shape[1:]).astype(x0.dtype)
            out[i] = np.where(np.broadcast_to(m > 0, xs.shape[1:]), values, xs[i])
    return out if batched else out[0]


def _ascend(loss_fn, x, y, spec, mask=None, sample_ids=None):
    x0 = np.asarray(x)
    if x0.dtype not in (np.float32, np.float64):
        x0 = x0.astype(np.float32)
    if x0.size and (x0.min() < 0.0 or x0.max() > 1.0):
        raise ValueError("input pixels must lie in [0, 1]")
    eps = spec.resolved_epsilon()
    alpha = spec.resolved_alpha()
    mask_b = _expand_mask(mask, x0) if mask is not None else None
    x_adv = x0.copy()
    if spec.random_start and spec.t_max > 0 and eps > 0:
        x_adv = _random_start(x0, eps, mask_b, sample_ids, spec)
    for _ in range(spec.t_max):
        g = _input_gradient(loss_fn, x_adv, y)
        step = alpha * ad.sign(g)
        if mask_b is not None:
            step = step * mask_b
        x_adv = x0 + np.clip((x_adv + step) - x0, -eps, eps)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    if mask_b is not None:
        keep = np.broadcast_to(mask_b > 0, x_adv.shape)
        x_adv = np.where(keep, x_adv, x0)  # unmasked pixels bitwise intact
    return x_adv.astype(x0.dtype, copy=False)


# ---------------------------------------------------------------------------
# public attacks


def pgd_attack(loss_fn, x, y, spec, sample_ids=None):
    """Iterative signed-gradient ascent inside the epsilon L-inf ball."""
    if spec.kind not in ("pgd", "adaptive"):
        raise ValueError(f"pgd_attack got spec kind {spec.kind!r}")
    return _ascend(loss_fn, x, y, spec, mask=None, sample_ids=sample_ids)


def masked_pgd(loss_fn, x, y, mask, spec, sample_ids=None):
    """Signed-gradient ascent confined to a binary per-pixel mask."""
    return _ascend(loss_fn, x, y, spec, mask=mask, sample_ids=sample_ids)


def roa_attack(loss_fn, x, y, spec, sample_ids=None):
    """Unbounded perturbation in one seeded rectangle per frame."""
    if spec.kind != "roa":
        raise ValueError(f"roa_attack got spec kind {spec.kind!r}")
    x0 = np.asarray(x)
    mask = _batch_mask("roa", x0, spec, sample_ids)
    return masked_pgd(loss_fn, x0, y, mask, spec, sample_ids=sample_ids)


def af_attack(loss_fn, x, y, spec, sample_ids=None):
    """Unbounded perturbation on a border band of every frame."""
    if spec.kind != "af":
        raise ValueError(f"af_attack got spec kind {spec.kind!r}")
    x0 = np.asarray(x)
    mask = _batch_mask("af", x0, spec, sample_ids)
    return masked_pgd(loss_fn, x0, y, mask, spec, sample_ids=sample_ids)


def spa_attack(loss_fn, x, y, spec, sample_ids=None):
    """Unbounded perturbation on s_spa seeded pixels per frame."""
    if spec.kind != "spa":
        raise ValueError(f"spa_attack got spec kind {spec.kind!r}")
    x0 = np.asarray(x)
    mask = _batch_mask("spa", x0, spec, sample_ids)
    return masked_pgd(loss_fn, x0, y, mask, spec, sample_ids=sample_ids)


def run_attack(loss_fn, x, y, spec, sample_ids=None):
    """Dispatch on spec.kind; 'adaptive' uses the dense-ball geometry."""
    if spec.kind in ("pgd", "adaptive"):
        return pgd_attack(loss_fn, x, y, spec, sample_ids=sample_ids)
    fn = {"roa": roa_attack, "af": af_attack, "spa": spa_attack}[spec.kind]
    return fn(loss_fn, x, y, spec, sample_ids=sample_ids)


def batch_ce_loss(logits_of, reduction="sum"):
    """Wrap a logits builder into the attack loss interface.

    Summed cross-entropy keeps per-sample gradients independent of batch
    composition (eval-mode forwards share no statistics across samples).
    """

    def loss_fn(xt, y):
        return ad.cross_entropy(logits_of(xt), np.asarray(y), reduction)

    return loss_fn


def attack_on_branch(net, branch, x, y, spec, sample_ids=None):
    """Craft through one fixed BN branch (gray-box target-BN protocol)."""
    rho = np.asarray(branch, dtype=np.float64)
    if rho.ndim == 0:
        idx = int(rho)
        rho = np.zeros(net.K)
        rho[idx] = 1.0
    loss_fn = batch_ce_loss(lambda xt: forward_target(net, xt, rho, "eval"))
    return run_attack(loss_fn, x, y, spec, sample_ids=sample_ids)


def adaptive_attack(full_model, x, y, y_det, lambda_adapt, spec, sample_ids=None):
    """Joint ascent on task loss + lambda * detector loss through the pipeline.

    lambda_adapt = 0 reproduces the plain attack on the end-to-end pipeline
    exactly; the constraint geometry follows spec.kind ('adaptive' meaning
    the dense ball).
    """
    y_det = np.asarray(y_det)
    if y_det.ndim == 0:
        y_det = np.full(np.asarray(x).shape[0] if np.asarray(x).ndim == 5 else 1, int(y_det))

    def loss_fn(xt, labels):
        logits, det_logits, _ = forward_full(full_model, xt, mode="eval")
        task = ad.cross_entropy(logits, np.asarray(labels), "sum")
        if lambda_adapt == 0.0:
            return task
        det = ad.cross_entropy(det_logits, y_det, "sum")
        return ad.add(task, ad.scale(det, lambda_adapt))

    return run_attack(loss_fn, x, y, spec, sample_ids=sample_ids)
