"""Branch selection: Gumbel-Softmax weights from detector logits.

Detector outputs are treated as log-domain scores, so the weights are
softmax((pi + G) / tau) with G either i.i.d. Gumbel noise (training) or
zero (deterministic inference).  Manual selection returns exact one-hot
weights for the oracle-routed variant of the defense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import derived_rng

_TINY = 1e-20

# Branch layout: clean -> 0, Lp-bounded -> 1, physically realizable -> 2.
BRANCH_OF_TYPE = {"clean": 0, "lp": 1, "physical": 2}


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    noise_mode: str = "sampled"
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.noise_mode not in ("sampled", "deterministic"):
            raise ValueError(f"noise_mode must be 'sampled' or 'deterministic', got {self.noise_mode!r}")


def gumbel_noise(shape, rng, dtype=np.float64):
    """G = -log(-log U); the tiny offsets keep U=0 from producing inf."""
    u = rng.random(size=shape)
    return (-np.log(-np.log(u + _TINY) + _TINY)).astype(dtype, copy=False)


def gumbel_softmax(pi, cfg=GumbelConfig(), rng=None):
    """Differentiable simplex weights from logits ``pi`` ([K] or [B, K]).

    ``rng`` overrides the config seed stream for sampled noise, which is how
    the training loop threads one seeded stream through all steps.  Passing
    a Tensor keeps the result differentiable w.r.t. ``pi``; ndarrays come
    back as ndarrays.
    """
    is_tensor = isinstance(pi, Tensor)
    data = pi.data if is_tensor else np.asarray(pi, dtype=np.float64)
    if data.ndim not in (1, 2):
        raise ValueError(f"logits must be [K] or [B, K], got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("non-finite logits")
    pt = pi if is_tensor else Tensor(data)
    if cfg.noise_mode == "sampled":
        if rng is None:
            rng = derived_rng(cfg.seed, "gumbel")
        noisy = ad.add_const(pt, gumbel_noise(data.shape, rng, dtype=data.dtype))
    else:
        noisy = pt
    rho = ad.softmax(ad.scale(noisy, 1.0 / cfg.tau), axis=-1)
    return rho if is_tensor else rho.data


def aggregate_branches(zs, rho):
    """Weighted feature sum ẑ = Σ ρ_k z_k; gradients reach every z_k and ρ."""
    check = rho.data if isinstance(rho, Tensor) else np.asarray(rho)
    tol = 1e-6 if check.dtype == np.float32 else 1e-9
    if check.min() < -tol or np.abs(check.sum(axis=-1) - 1.0).max() > max(tol, 1e-9):
        raise ValueError("rho must lie on the probability simplex")
    return ad.branch_combine(zs, rho)


def manual_select(data_type, dtype=np.float64):
    """Exact one-hot branch weights for a known data type."""
    try:
        branch = BRANCH_OF_TYPE[data_type]
    except KeyError:
        raise ValueError(
            f"unknown data type {data_type!r}; expected one of {sorted(BRANCH_OF_TYPE)}"
        ) from None
    rho = np.zeros(len(BRANCH_OF_TYPE), dtype=dtype)
    rho[branch] = 1.0
    return rho
