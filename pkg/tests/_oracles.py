"""Shared numerical oracles for the test suite.

The finite-difference checker here is the frozen reference for every
analytic gradient in the package: build the scalar loss twice, once through
the tape and once as a plain float function, and compare coordinatewise.
"""

import numpy as np

from multibn.autodiff import Tape, Tensor, finite_difference_gradient

REL_FLOOR = 1e-3  # denominators below this are floored so zeros don't blow up


def rel_error(analytic, numeric):
    """Max over coordinates of |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def tape_gradient(build_loss, x):
    """Analytic gradient of ``build_loss(Tensor) -> scalar Tensor`` at ``x``."""
    with Tape() as tape:
        xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        loss = build_loss(xt)
        grads = tape.backward(loss)
    return grads[xt]

def check_gradient(build_loss, x, step=1e-6):
    """Return max relative error between tape and central-difference grads."""
    analytic = tape_gradient(build_loss, x)

    def f(arr):
        loss = build_loss(Tensor(arr))
        return float(loss.data)

    numeric = finite_difference_gradient(f, x, step=step)
    assert np.all(np.isfinite(numeric)), "finite differences produced non-finite values"
    return rel_error(analytic, numeric)


def buffer_snapshot(*modules):
    saved = []
    for mod in modules:
        if mod is None:
            continue
        saved.append({k: v.copy() for k, v in mod.buffers().items()})
    return saved


def buffer_restore(saved, *modules):
    idx = 0
    for mod in modules:
        if mod is None:
            continue
        for k, v in mod.buffers().items():
            v[...] = saved[idx][k]
        idx += 1


def check_param_grads(build_loss, net, det=None, names=(), step=1e-6, tol=1e-4,
                      coord_seed=123):
    """FD-check scheme losses w.r.t. named parameters of a float64 model.

    Central differences at 64-bit; the tiny step keeps relu-kink crossings
    (batch-normalized activations cluster near zero) below the tolerance.
    ``build_loss(params, det_params)`` must rebuild the loss from scratch so
    crafted inputs and noise replay identically; buffers are restored around
    every value evaluation. Returns the max relative error seen.
    """
    from multibn.seeding import derived_rng

    snap = buffer_snapshot(net, det)
    with Tape() as tape:
        params = net.param_tensors(requires_grad=True)
        det_params = det.param_tensors(requires_grad=True) if det else None
        loss = build_loss(params, det_params)
        grads = tape.backward(loss)
    buffer_restore(snap, net, det)
    all_params = dict(net.parameters())
    tensor_of = dict(params)
    if det is not None:
        all_params.update({f"det/{k}": v for k, v in det.parameters().items()})
        tensor_of.update({f"det/{k}": v for k, v in det_params.items()})

    def value():
        buffer_restore(snap, net, det)
        out = float(build_loss(None, None).data)
        buffer_restore(snap, net, det)
        return out

    rng = derived_rng(coord_seed, "coords")
    worst = 0.0
    for name in names:
        arr = all_params[name]
        g = grads.get(tensor_of[name])
        assert g is not None, f"no gradient reached {name}"
        flat = arr.reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + step
        up = value()
        flat[idx] = orig - step
        down = value()
        flat[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(g.reshape(-1)[idx])
        err = rel_error(analytic, numeric)
        assert err < tol, (name, analytic, numeric)
        worst = max(worst, err)
    return worst
