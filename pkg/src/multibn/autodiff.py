"""Tape-based reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray.  While a ``Tape`` is active, primitive ops
record the output tensor together with a closure that maps the output
adjoint to parent adjoints.  ``Tape.backward`` walks the recorded nodes in
reverse creation order (a valid topological order, since parents are always
created before their children) and accumulates adjoints per node, so shared
subexpressions receive the sum of all downstream contributions.

Outside a tape, ops run as plain numpy with no graph overhead, which is the
fast path used for inference and attack-crafting forwards that only need
the input gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NonScalarLoss(ValueError):
    """Raised when backward is started from a non-scalar tensor."""


def _require(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff.

    ``grad`` is populated by ``Tape.backward``.  Tensors created by ops while
    a tape is active carry ``_parents`` and ``_vjp``; leaves carry neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator surface so loss compositions read naturally.  Scalars
    # mean python numbers; tensor-tensor ops require identical shapes.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))


class Tape:
    """Records ops while active; replays adjoints in reverse on ``backward``."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._adjoints: dict[int, np.ndarray] = {}
        self._by_id: dict[int, Tensor] = {}

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = Tape._stack.pop()
        assert popped is self
        return False

    @staticmethod
    def active():
        return Tape._stack[-1] if Tape._stack else None

    def release(self):
        """Drop the recorded graph so its arrays free immediately.

        Recorded tensors point at the tape and the tape points back at
        them, so without this the graph waits for a cyclic-GC pass; at
        video sizes that lag costs hundreds of MB.  Gradients already
        extracted (``.grad`` arrays, ``Gradients`` results) stay valid.
        """
        for node in self.nodes:
            node._parents = ()
            node._vjp = None
            node._tape = None
        self.nodes.clear()
        self._adjoints.clear()
        self._by_id.clear()

    def backward(self, loss, accumulate=False):
        """Propagate d(loss)/d(node) to every recorded ancestor of ``loss``.

        Returns a :class:`Gradients` view keyed by tensor.  Each call runs
        the reverse walk from scratch; by default the result replaces the
        tape's held gradients, while ``accumulate=True`` adds it to them.
        Leaf tensors with ``requires_grad`` that feed the graph but not the
        loss end up with zero gradients.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.shape != ():
            raise NonScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        # Adjoints of interior nodes are dropped as soon as their vjp has
        # run; only leaf tensors (and the loss itself) keep gradients.
        local: dict[int, np.ndarray] = {}
        by_id: dict[int, Tensor] = {}

        def accumulate_into(tensor, adjoint):
            key = id(tensor)
            by_id[key] = tensor
            held = local.get(key)
            if held is None:
                # Copy: vjps may hand the same array to several parents.
                local[key] = np.array(adjoint, copy=True)
            else:
                held += adjoint

        accumulate_into(loss, np.ones((), dtype=loss.data.dtype))
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = local.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if parent._vjp is None and parent.requires_grad:
                    leaves[id(parent)] = parent
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeMismatch(
                        f"adjoint shape {pg.shape} does not match value shape {parent.data.shape}"
                    )
                accumulate_into(parent, pg)
            # The reverse creation order guarantees every consumer of this
            # node has already run, so its adjoint is dead; freeing it here
            # keeps the walk's working set near the largest single layer
            # instead of the whole graph.
            if node is not loss:
                local.pop(id(node), None)
                by_id.pop(id(node), None)
        for key, leaf in leaves.items():
            if key not in local:
                accumulate_into(leaf, np.zeros_like(leaf.data))
        if accumulate:
            for key, tensor in by_id.items():
                held = self._adjoints.get(key)
                # New array, so results returned from earlier calls stay intact.
                self._adjoints[key] = local[key] if held is None else held + local[key]
                self._by_id[key] = tensor
        else:
            self._adjoints = local
            self._by_id = by_id
        for key, tensor in self._by_id.items():
            if tensor.requires_grad:
                tensor.grad = self._adjoints[key]
        return Gradients(dict(self._by_id), dict(self._adjoints))


class Gradients:
    """Read-only mapping from tensors (by identity) to their adjoints."""

    def __init__(self, by_id, adjoints):
        self._by_id = by_id
        self._adjoints = adjoints

    def __contains__(self, tensor):
        return id(tensor) in self._adjoints

    def __getitem__(self, tensor):
        try:
            return self._adjoints[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def get(self, tensor, default=None):
        return self._adjoints.get(id(tensor), default)


def _record(out_data, parents, vjp):
    """Wrap an op result; register it on the active tape when grads are needed."""
    tape = Tape.active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, f"add expects equal shapes, got {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        return g, g

    return _record(out, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, f"mul expects equal shapes, got {a.shape} vs {b.shape}")
    out = a.data * b.data

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return _record(out, (x,), vjp)


def shift(x, c):
    """Add a python scalar constant."""
    x = _as_tensor(x)
    out = x.data + float(c)

    def vjp(g):
        return (g,)

    return _record(out, (x,), vjp)


def add_const(x, arr):
    """Add a constant ndarray (no gradient flows into ``arr``)."""
    x = _as_tensor(x)
    arr = np.asarray(arr, dtype=x.dtype)
    _require(arr.shape == x.shape, f"add_const expects shape {x.shape}, got {arr.shape}")
    out = x.data + arr

    def vjp(g):
        return (g,)

    return _record(out, (x,), vjp)


def mul_const(x, arr):
    """Multiply by a constant ndarray, e.g. a 0/1 mask."""
    x = _as_tensor(x)
    arr = np.asarray(arr, dtype=x.dtype)
    _require(arr.shape == x.shape, f"mul_const expects shape {x.shape}, got {arr.shape}")
    out = x.data * arr

    def vjp(g):
        return (g * arr,)

    return _record(out, (x,), vjp)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _record(out, (x,), vjp)


def reshape(x, shape):
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, (x,), vjp)


def sum_all(x):
    """Full reduction to a scalar."""
    x = _as_tensor(x)
    out = x.data.sum()
    shape = x.data.shape
    dtype = x.data.dtype

    def vjp(g):
        return (np.full(shape, g, dtype=dtype),)

    return _record(out, (x,), vjp)


def mean_all(x):
    x = _as_tensor(x)
    return scale(sum_all(x), 1.0 / x.data.size)


def masked_assign(x, mask, v):
    """``out = x*(1-mask) + v*mask`` with gradients to both ``x`` and ``v``."""
    x, v = _as_tensor(x), _as_tensor(v)
    mask = np.asarray(mask, dtype=x.dtype)
    _require(x.shape == v.shape == mask.shape,
             f"masked_assign expects equal shapes, got {x.shape}, {v.shape}, {mask.shape}")
    keep = 1.0 - mask
    out = x.data * keep + v.data * mask

    def vjp(g):
        gx = g * keep if x.requires_grad else None
        gv = g * mask if v.requires_grad else None
        return gx, gv

    return _record(out, (x, v), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.data.ndim == 2 and b.data.ndim == 2,
             f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0],
             f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def dense(x, w, b=None):
    """Affine layer: ``x @ w + b`` with x [N, In], w [In, Out], b [Out]."""
    x, w = _as_tensor(x), _as_tensor(w)
    _require(x.data.ndim == 2 and w.data.ndim == 2,
             f"dense expects 2-d x and w, got {x.shape} and {w.shape}")
    _require(x.shape[1] == w.shape[0],
             f"dense inner dims differ: {x.shape} vs {w.shape}")
    out = x.data @ w.data
    if b is None:
        def vjp(g):
            gx = g @ w.data.T if x.requires_grad else None
            gw = x.data.T @ g if w.requires_grad else None
            return gx, gw

        return _record(out, (x, w), vjp)
    b = _as_tensor(b)
    _require(b.data.ndim == 1 and b.shape[0] == w.shape[1],
             f"dense bias shape {b.shape} does not match w {w.shape}")
    out = out + b.data

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# 3-d convolution and pooling


def _triple(v):
    if isinstance(v, (tuple, list)):
        _require(len(v) == 3, f"expected 3 entries, got {v!r}")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def _conv3d_core(x, w, stride, pad):
    """im2col forward.  Returns (out, cols); cols is kept for the w-grad."""
    B, C, T, H, W = x.shape
    F, Cw, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    _require(xp.shape[2] >= kt and xp.shape[3] >= kh and xp.shape[4] >= kw,
             f"kernel {w.shape[2:]} exceeds padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    To, Ho, Wo = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * To * Ho * Wo, C * kt * kh * kw)
    out = cols @ w.reshape(F, -1).T
    out = np.ascontiguousarray(out.reshape(B, To, Ho, Wo, F).transpose(0, 4, 1, 2, 3))
    return out, cols


def _conv3d_input_grad(g, w, x_shape, stride, pad):
    """Gradient w.r.t. the conv input: full correlation with the flipped kernel."""
    B, C, T, H, W = x_shape
    F, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    P = (T + 2 * pt, H + 2 * ph, W + 2 * pw)
    To, Ho, Wo = g.shape[2:]
    if (st, sh, sw) == (1, 1, 1):
        gd = g
    else:
        gd = np.zeros((B, F, (To - 1) * st + 1, (Ho - 1) * sh + 1, (Wo - 1) * sw + 1), dtype=g.dtype)
        gd[:, :, ::st, ::sh, ::sw] = g
    # Right pad restores samples dropped when the stride did not divide evenly.
    rt, rh, rw = (P[0] - kt) % st, (P[1] - kh) % sh, (P[2] - kw) % sw
    gp = np.pad(gd, ((0, 0), (0, 0),
                     (kt - 1, kt - 1 + rt), (kh - 1, kh - 1 + rh), (kw - 1, kw - 1 + rw)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dxp, _ = _conv3d_core(gp, wf, (1, 1, 1), (0, 0, 0))
    return np.ascontiguousarray(dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W])


def conv3d(x, w, bias=None, stride=1, padding=0):
    """3-d convolution (cross-correlation) over [B, C, T, H, W] input.

    A 4-d input [C, T, H, W] is treated as a batch of one and the batch axis
    is stripped from the result.  ``w`` is [F, C, kt, kh, kw]; ``bias`` [F]
    is optional since the backbone runs its convs bias-free into BN.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    _require(xd.ndim == 5, f"conv3d expects a 4-d or 5-d input, got shape {x.shape}")
    _require(w.data.ndim == 5, f"conv3d kernel must be 5-d, got shape {w.shape}")
    _require(xd.shape[1] == w.shape[1],
             f"input channels {xd.shape[1]} do not match kernel channels {w.shape[1]}")
    stride = _triple(stride)
    padding = _triple(padding)
    _require(all(s >= 1 for s in stride), f"stride must be positive, got {stride}")
    out, cols = _conv3d_core(xd, w.data, stride, padding)
    F = w.shape[0]
    if bias is not None:
        bias = _as_tensor(bias)
        _require(bias.shape == (F,), f"bias shape {bias.shape} does not match {F} filters")
        out = out + bias.data[None, :, None, None, None]
    x_shape, w_shape = xd.shape, w.data.shape
    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        if squeeze:
            g = g[None]
        g_mat = None
        if w.requires_grad:
            g_mat = g.transpose(0, 2, 3, 4, 1).reshape(-1, F)
            gw = (cols.T @ g_mat).T.reshape(w_shape)
        else:
            gw = None
        gx = _conv3d_input_grad(g, w.data, x_shape, stride, padding) if x.requires_grad else None
        if squeeze and gx is not None:
            gx = gx[0]
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out[0] if squeeze else out, parents, vjp)


def avg_pool3d(x, size=2):
    """Non-overlapping average pooling; every pooled axis must divide evenly."""
    x = _as_tensor(x)
    _require(x.data.ndim == 5, f"avg_pool3d expects [B,C,T,H,W], got {x.shape}")
    kt, kh, kw = _triple(size)
    B, C, T, H, W = x.shape
    _require(T % kt == 0 and H % kh == 0 and W % kw == 0,
             f"pool size {(kt, kh, kw)} does not divide {(T, H, W)}")
    To, Ho, Wo = T // kt, H // kh, W // kw
    r = x.data.reshape(B, C, To, kt, Ho, kh, Wo, kw)
    out = r.mean(axis=(3, 5, 7))
    inv = 1.0 / (kt * kh * kw)

    def vjp(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None, :, None] * inv,
                             (B, C, To, kt, Ho, kh, Wo, kw))
        return (gx.reshape(B, C, T, H, W).copy(),)

    return _record(out, (x,), vjp)


def global_avg_pool(x):
    """[B, C, T, H, W] -> [B, C] by averaging over all spatiotemporal positions."""
    x = _as_tensor(x)
    _require(x.data.ndim == 5, f"global_avg_pool expects [B,C,T,H,W], got {x.shape}")
    B, C, T, H, W = x.shape
    out = x.data.mean(axis=(2, 3, 4))
    inv = 1.0 / (T * H * W)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None, None] * inv, (B, C, T, H, W)).copy(),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization


def bn_normalize(x, eps=1e-5, stats_out=None):
    """Normalize per channel with statistics of the current batch.

    Gradients account for the mean and variance being functions of the
    batch.  When ``stats_out`` is a dict it receives the computed ``mean``
    and (biased) ``var`` so callers can fold them into running statistics.
    """
    x = _as_tensor(x)
    _require(x.data.ndim == 5, f"bn_normalize expects [B,C,T,H,W], got {x.shape}")
    axes = (0, 2, 3, 4)
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    if stats_out is not None:
        stats_out["mean"] = mean
        stats_out["var"] = var
    inv = 1.0 / np.sqrt(var + eps)
    bshape = (1, -1, 1, 1, 1)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    n = x.data.size // x.shape[1]

    def vjp(g):
        gsum = g.sum(axis=axes).reshape(bshape)
        gdot = (g * xhat).sum(axis=axes).reshape(bshape)
        gx = (inv.reshape(bshape) / n) * (n * g - gsum - xhat * gdot)
        return (gx,)

    return _record(xhat, (x,), vjp)


def channel_affine(x, scale_t, shift_t):
    """Per-channel ``x * scale + shift`` over a [B, C, T, H, W] tensor.

    Also the whole story of eval-mode BN: fold the running statistics into
    ``scale`` and ``shift`` and apply this op.
    """
    x, scale_t, shift_t = _as_tensor(x), _as_tensor(scale_t), _as_tensor(shift_t)
    _require(x.data.ndim == 5, f"channel_affine expects [B,C,T,H,W], got {x.shape}")
    C = x.shape[1]
    _require(scale_t.shape == (C,) and shift_t.shape == (C,),
             f"scale/shift must have shape ({C},), got {scale_t.shape} and {shift_t.shape}")
    bshape = (1, -1, 1, 1, 1)
    out = x.data * scale_t.data.reshape(bshape) + shift_t.data.reshape(bshape)
    axes = (0, 2, 3, 4)

    def vjp(g):
        gx = g * scale_t.data.reshape(bshape) if x.requires_grad else None
        gs = (g * x.data).sum(axis=axes) if scale_t.requires_grad else None
        gh = g.sum(axis=axes) if shift_t.requires_grad else None
        return gx, gs, gh

    return _record(out, (x, scale_t, shift_t), vjp)


def branch_combine(zs, rho):
    """Convex combination of branch activations.

    ``zs`` is a list of K same-shaped [B, ...] tensors; ``rho`` is either a
    global weight vector [K] or per-sample weights [B, K].  Gradients flow
    into every branch and into ``rho``.
    """
    zs = [_as_tensor(z) for z in zs]
    rho = _as_tensor(rho)
    _require(len(zs) >= 1, "branch_combine needs at least one branch")
    shape = zs[0].shape
    for z in zs[1:]:
        _require(z.shape == shape, f"branch shapes differ: {z.shape} vs {shape}")
    K = len(zs)
    per_sample = rho.data.ndim == 2
    if per_sample:
        _require(rho.shape == (shape[0], K),
                 f"per-sample rho must be [{shape[0]}, {K}], got {rho.shape}")
    else:
        _require(rho.shape == (K,), f"rho must be [{K}] or [B, {K}], got {rho.shape}")
    extra = (1,) * (len(shape) - 1)
    out = np.zeros(shape, dtype=zs[0].dtype)
    for k, z in enumerate(zs):
        wk = rho.data[:, k].reshape((shape[0],) + extra) if per_sample else rho.data[k]
        out += wk * z.data
    red_axes = tuple(range(1, len(shape)))

    def vjp(g):
        grads = []
        for k, z in enumerate(zs):
            if z.requires_grad:
                wk = rho.data[:, k].reshape((shape[0],) + extra) if per_sample else rho.data[k]
                grads.append(g * wk)
            else:
                grads.append(None)
        if rho.requires_grad:
            if per_sample:
                gr = np.stack([(g * z.data).sum(axis=red_axes) for z in zs], axis=1)
            else:
                gr = np.array([(g * z.data).sum() for z in zs], dtype=rho.dtype)
            grads.append(gr)
        else:
            grads.append(None)
        return tuple(grads)

    return _record(out, tuple(zs) + (rho,), vjp)


# ---------------------------------------------------------------------------
# classification heads


def softmax(x, axis=-1):
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(s, (x,), vjp)


def _log_softmax_parts(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    return logits - lse  # log-probabilities


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy against integer labels.

    ``reduction`` is "mean" or "sum".  Attacks use "sum" so per-sample input
    gradients stay independent of the batch composition.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    _require(logits.data.ndim == 2, f"cross_entropy expects [B, K] logits, got {logits.shape}")
    _require(labels.ndim == 1 and labels.shape[0] == logits.shape[0],
             f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {labels.dtype}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels out of range for {K} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = _log_softmax_parts(logits.data)
    per = -logp[np.arange(B), labels]
    out = per.sum() if reduction == "sum" else per.mean()
    w = 1.0 if reduction == "sum" else 1.0 / B

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g * w),)

    return _record(out, (logits,), vjp)


def soft_cross_entropy(logits, target_probs, reduction="mean"):
    """Cross-entropy against a constant probability-vector target."""
    logits = _as_tensor(logits)
    q = np.asarray(target_probs, dtype=logits.dtype)
    _require(logits.data.ndim == 2 and q.shape == logits.shape,
             f"target shape {q.shape} does not match logits {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    B = logits.shape[0]
    logp = _log_softmax_parts(logits.data)
    per = -(q * logp).sum(axis=1)
    out = per.sum() if reduction == "sum" else per.mean()
    w = 1.0 if reduction == "sum" else 1.0 / B

    def vjp(g):
        p = np.exp(logp)
        return ((p * q.sum(axis=1, keepdims=True) - q) * (g * w),)

    return _record(out, (logits,), vjp)


def soft_cross_entropy_pair(logits, target_logits, reduction="mean"):
    """Cross-entropy of ``logits`` against softmax(``target_logits``).

    Unlike :func:`soft_cross_entropy` the target is live: gradients flow
    into both arguments, matching self-distillation objectives where the
    reference forward sits on the same tape.
    """
    logits = _as_tensor(logits)
    target_logits = _as_tensor(target_logits)
    _require(logits.data.ndim == 2 and target_logits.shape == logits.shape,
             f"target shape {target_logits.shape} does not match logits {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    B = logits.shape[0]
    logp = _log_softmax_parts(logits.data)
    logq = _log_softmax_parts(target_logits.data)
    q = np.exp(logq)
    per = -(q * logp).sum(axis=1)
    out = per.sum() if reduction == "sum" else per.mean()
    w = 1.0 if reduction == "sum" else 1.0 / B

    def vjp(g):
        p = np.exp(logp)
        gz = (p - q) * (g * w)
        # d/dt_j of -sum_c q_c logp_c with q = softmax(t):
        # q_j * (sum_c q_c logp_c - logp_j)
        s = (q * logp).sum(axis=1, keepdims=True)
        gt = q * (s - logp) * (g * w)
        return gz, gt

    return _record(out, (logits, target_logits), vjp)


# ---------------------------------------------------------------------------
# numerical oracle


def finite_difference_gradient(f, x, step=1e-5):
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` maps an ndarray to a float.  Each coordinate is perturbed in turn,
    so cost is linear in ``x.size``; intended for small oracle checks, not
    training.  Non-finite probe values propagate into the result so callers
    can detect them.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def sign(x):
    """Elementwise sign with sign(0) = 0, as used by gradient-sign steps."""
    return np.sign(x)
