"""Target classifier with multi-branch BN, and the attack-type detector.

The backbone is three conv3d blocks (conv -> multi-branch BN -> relu ->
2x2x2 average pool), global average pooling, and a dense head.  Every BN
layer holds K branches of affine parameters and running statistics over
shared convolution features; a branch-weight vector rho mixes the branch
outputs, so one-hot rho recovers a plain single-BN network exactly.

The detector is the same backbone at K=1 with K-way outputs; it sees the
raw input video and its logits feed the branch selector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .seeding import derived_rng


class NonFiniteActivations(FloatingPointError):
    """A forward pass produced NaN or infinite outputs."""


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    channels: tuple = (8, 16, 32)
    kernel: tuple = (3, 3, 3)
    K: int = 3
    num_classes: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.channels) < 1:
            raise ValueError("need at least one conv block")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")


class MultiBnLayer:
    """K branches of (gamma, beta, running_mean, running_var) over C channels."""

    def __init__(self, K, C, eps, momentum, dtype):
        self.K, self.C = K, C
        self.eps, self.momentum = eps, momentum
        self.gamma = np.ones((K, C), dtype=dtype)
        self.beta = np.zeros((K, C), dtype=dtype)
        self.running_mean = np.zeros((K, C), dtype=dtype)
        self.running_var = np.ones((K, C), dtype=dtype)

    def update_running(self, branch, batch_mean, batch_var):
        m = self.momentum
        self.running_mean[branch] = (1.0 - m) * self.running_mean[branch] + m * batch_mean
        self.running_var[branch] = (1.0 - m) * self.running_var[branch] + m * batch_var


class MultiBnNet:
    """Shared conv/dense parameters plus per-layer multi-branch BN."""

    def __init__(self, config, seed=0):
        self.config = config
        dtype = np.dtype(config.dtype)
        self.conv = []
        in_c = config.in_channels
        kt, kh, kw = config.kernel
        for i, out_c in enumerate(config.channels):
            rng = derived_rng(seed, "conv", i)
            fan_in = in_c * kt * kh * kw
            w = rng.standard_normal((out_c, in_c, kt, kh, kw)) * np.sqrt(2.0 / fan_in)
            self.conv.append(w.astype(dtype))
            in_c = out_c
        self.bn = [MultiBnLayer(config.K, c, config.bn_eps, config.bn_momentum, dtype)
                   for c in config.channels]
        rng = derived_rng(seed, "head")
        fan_in = config.channels[-1]
        self.head_w = (rng.standard_normal((fan_in, config.num_classes))
                       * np.sqrt(1.0 / fan_in)).astype(dtype)
        self.head_b = np.zeros(config.num_classes, dtype=dtype)

    @property
    def K(self):
        return self.config.K

    def parameters(self):
        """Live references; in-place updates through this dict mutate the net."""
        out = {}
        for i, w in enumerate(self.conv):
            out[f"conv/{i}/weight"] = w
        for i, layer in enumerate(self.bn):
            for k in range(layer.K):
                out[f"bn/{i}/branch{k}/gamma"] = layer.gamma[k]
                out[f"bn/{i}/branch{k}/beta"] = layer.beta[k]
        out["head/weight"] = self.head_w
        out["head/bias"] = self.head_b
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.bn):
            for k in range(layer.K):
                out[f"bn/{i}/branch{k}/running_mean"] = layer.running_mean[k]
                out[f"bn/{i}/branch{k}/running_var"] = layer.running_var[k]
        return out

    def param_tensors(self, requires_grad=False):
        return {name: Tensor(arr, requires_grad=requires_grad)
                for name, arr in self.parameters().items()}

    def load_arrays(self, arrays):
        """Copy values into the live parameter/buffer arrays by name."""
        targets = {**self.parameters(), **self.buffers()}
        for name, arr in arrays.items():
            if name not in targets:
                raise KeyError(f"unknown tensor {name!r} for this architecture")
            if targets[name].shape != arr.shape:
                raise ShapeMismatch(f"{name}: stored shape {arr.shape} vs model {targets[name].shape}")
            targets[name][...] = arr


@dataclass
class DetectorNet:
    """Single-BN classifier over attack types; logits have length K = N+1."""

    net: MultiBnNet

    @property
    def num_outputs(self):
        return self.net.config.num_classes

    def parameters(self):
        return self.net.parameters()

    def buffers(self):
        return self.net.buffers()

    def param_tensors(self, requires_grad=False):
        return self.net.param_tensors(requires_grad)


def build_target_net(config, seed=0):
    """Deterministic He-style init; same seed gives bitwise-identical nets."""
    return MultiBnNet(config, seed=seed)


def build_detector_net(K, seed=0, channels=(8, 16), base=None):
    """Detector over K = N+1 input types; ``base`` overrides the backbone dims."""
    base = base if base is not None else ArchConfig()
    cfg = ArchConfig(in_channels=base.in_channels, channels=tuple(channels),
                     kernel=base.kernel, K=1, num_classes=K,
                     bn_eps=base.bn_eps, bn_momentum=base.bn_momentum, dtype=base.dtype)
    return DetectorNet(net=MultiBnNet(cfg, seed=seed))


def _check_rho(rho, K, batch):
    data = rho.data if isinstance(rho, Tensor) else np.asarray(rho)
    if data.ndim == 1:
        if data.shape != (K,):
            raise ShapeMismatch(f"rho has length {data.shape[0]}, net has K={K}")
    elif data.ndim == 2:
        if data.shape != (batch, K):
            raise ShapeMismatch(f"per-sample rho must be [{batch}, {K}], got {data.shape}")
    else:
        raise ShapeMismatch(f"rho must be 1-d or 2-d, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("rho contains non-finite entries")
    if data.min() < -1e-6 or np.abs(data.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("rho must lie on the probability simplex")
    return data


def _one_hot_index(rho_data):
    if rho_data.ndim != 1:
        return None
    top = int(np.argmax(rho_data))
    return top if rho_data[top] == 1.0 else None


def forward_target(net, x, rho, mode, params=None, stats_branches=None):
    """End-to-end pipeline from video batch to class logits.

    ``rho`` is a simplex vector [K] or per-sample matrix [B, K].  Train mode
    normalizes with batch statistics (shared across branches, since every
    branch sees the same conv features) and folds them into the running
    statistics of the updated branches: by default those with mean rho_k >
    0.5, or exactly ``stats_branches`` when given, which training uses to
    route by the known data type of the batch.  Eval mode normalizes each
    branch with its own running statistics.

    ``params`` may carry pre-wrapped parameter Tensors (see
    ``MultiBnNet.param_tensors``) so a training step can read gradients; by
    default parameters are treated as constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.data.ndim != 5:
        raise ShapeMismatch(f"expected a video batch [B,C,T,H,W], got shape {xt.shape}")
    B = xt.shape[0]
    rho_data = _check_rho(rho, net.K, B)
    rho_t = rho if isinstance(rho, Tensor) else Tensor(rho_data)
    hot = _one_hot_index(rho_data)
    if params is None:
        params = net.param_tensors(requires_grad=False)
    if stats_branches is not None and mode == "train":
        stats_branches = tuple(int(b) for b in stats_branches)
        for b in stats_branches:
            if not 0 <= b < net.K:
                raise ValueError(f"stats branch {b} outside K={net.K}")

    h = xt
    for i, layer in enumerate(net.bn):
        h = ad.conv3d(h, params[f"conv/{i}/weight"], stride=1, padding=1)
        if mode == "train":
            stats = {}
            xhat = ad.bn_normalize(h, eps=layer.eps, stats_out=stats)
            branches = range(layer.K) if hot is None else (hot,)
            zs = [ad.channel_affine(xhat, params[f"bn/{i}/branch{k}/gamma"],
                                    params[f"bn/{i}/branch{k}/beta"]) for k in branches]
            if stats_branches is not None:
                updated = stats_branches
            else:
                mean_rho = rho_data if rho_data.ndim == 1 else rho_data.mean(axis=0)
                updated = tuple(int(k) for k in range(layer.K) if mean_rho[k] > 0.5)
            for b in updated:
                layer.update_running(b, stats["mean"], stats["var"])
        else:
            inv = 1.0 / np.sqrt(layer.running_var + layer.eps)  # [K, C]
            branches = range(layer.K) if hot is None else (hot,)
            zs = []
            for k in branches:
                scale = params[f"bn/{i}/branch{k}/gamma"].data * inv[k]
                shift = (params[f"bn/{i}/branch{k}/beta"].data
                         - layer.running_mean[k] * scale)
                zs.append(ad.channel_affine(h, Tensor(scale), Tensor(shift)))
        if hot is not None:
            h = zs[0]
        else:
            h = ad.branch_combine(zs, rho_t)
        h = ad.relu(h)
        h = ad.avg_pool3d(h, 2)
    h = ad.global_avg_pool(h)
    logits = ad.dense(h, params["head/weight"], params["head/bias"])
    if not np.isfinite(logits.data).all():
        raise NonFiniteActivations("forward pass produced non-finite logits")
    return logits


def forward_detector(det, x, mode="eval", params=None, stats_update=True):
    """Length-K attack-type logits for each sample."""
    branches = (0,) if stats_update else ()
    return forward_target(det.net, x, np.ones(1, dtype=det.net.config.dtype), mode,
                          params=params,
                          stats_branches=branches if mode == "train" else None)


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class FullModel:
    """Target net plus detector plus the selector settings between them."""

    net: MultiBnNet
    detector: DetectorNet
    gumbel: "GumbelConfig" = None

    def __post_init__(self):
        from .selection import GumbelConfig

        if self.gumbel is None:
            self.gumbel = GumbelConfig(noise_mode="deterministic")
        if self.detector.num_outputs != self.net.K:
            raise ValueError(
                f"detector has {self.detector.num_outputs} outputs, net has K={self.net.K}"
            )


def forward_full(fm, x, mode="eval", rng=None, net_params=None, det_params=None,
                 stats_branches=None, det_stats_update=True):
    """Detector -> Gumbel-Softmax weights -> weighted multi-BN classifier.

    Returns ``(logits, det_logits, rho)``; the whole chain sits on one tape,
    so attacks differentiate through the selector and training reaches the
    detector parameters via rho.
    """
    from .selection import gumbel_softmax

    det_logits = forward_detector(fm.detector, x, mode=mode, params=det_params,
                                  stats_update=det_stats_update)
    rho = gumbel_softmax(det_logits, fm.gumbel, rng=rng)
    logits = forward_target(fm.net, x, rho, mode, params=net_params,
                            stats_branches=stats_branches)
    return logits, det_logits, rho


# ---------------------------------------------------------------------------
# parameter accounting


def parameter_counts(config):
    """Closed-form counts: shared conv/dense, per-branch BN, and totals.

    The K-branch network costs ``shared + K * bn_per_branch``; the ensemble
    alternative (K full single-BN copies) costs K times the K=1 total.
    """
    kt, kh, kw = config.kernel
    shared = 0
    in_c = config.in_channels
    for out_c in config.channels:
        shared += out_c * in_c * kt * kh * kw  # bias-free convs feed BN
        in_c = out_c
    shared += config.channels[-1] * config.num_classes + config.num_classes
    bn_per_branch = sum(2 * c for c in config.channels)
    total = shared + config.K * bn_per_branch
    single_total = shared + bn_per_branch
    return {
        "shared": shared,
        "bn_per_branch": bn_per_branch,
        "K": config.K,
        "total": total,
        "single_total": single_total,
        "ensemble_total": config.K * single_total,
        "overhead_fraction": (total - single_total) / single_total,
    }


def count_parameters(net):
    """Enumerated count from the live arrays; must equal the closed form."""
    return int(sum(arr.size for arr in net.parameters().values()))
