"""Training objectives against hand-built replays and closed-form identities.

The reduction identities (eps=0, N=1, lambda=0) compare two library
computations and must agree essentially bitwise.  The hand-CE oracles
recompute every cross-entropy term from raw logits with independent numpy
log-sum-exp, on float64 models so the comparison tolerance is meaningful.
"""

import numpy as np
import pytest

from multibn import autodiff as ad
from multibn.attacks import AttackSpec, attack_on_branch, run_attack
from multibn.container import IntegrityError, save_tensors
from multibn.data import DatasetManifest, generate_synthetic_dataset
from multibn.nets import (
    ArchConfig,
    FullModel,
    build_detector_net,
    build_target_net,
    forward_detector,
    forward_full,
    forward_target,
)
from multibn.seeding import derived_rng
from multibn.selection import GumbelConfig, gumbel_softmax
from multibn.training import (
    DEFAULT_TRAIN_SPECS,
    TrainConfig,
    TrainingDiverged,
    _msd_craft,
    build_models,
    load_checkpoint,
    lr_at_epoch,
    multi_perturbation_loss,
    multibn_loss,
    save_checkpoint,
    sgd_step,
    single_perturbation_loss,
    train,
)

from _oracles import check_param_grads

TINY = ArchConfig(channels=(4, 6, 8))
TINY64 = ArchConfig(channels=(2, 3, 4), dtype="float64")

PGD2 = AttackSpec(kind="pgd", t_max=2, seed=11)
ROA2 = AttackSpec(kind="roa", t_max=2, seed=12)


@pytest.fixture(scope="module")
def batch():
    ds = generate_synthetic_dataset(DatasetManifest(seed=5, train_size=12, test_size=4))
    return ds.train.videos[:6], ds.train.labels[:6], ds.train.ids[:6]


def fresh(K=1, seed=3, arch=TINY):
    from dataclasses import replace

    return build_target_net(replace(arch, K=K), seed=seed)


def np_ce(logits, y):
    """Independent mean cross-entropy via float64 log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return float((lse - z[np.arange(len(y)), y]).mean())


def np_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# validation


def test_variant_validation(batch):
    x, y, ids = batch
    net = fresh()
    with pytest.raises(ValueError):
        single_perturbation_loss("avg", net, x, y, PGD2)
    with pytest.raises(ValueError):
        multi_perturbation_loss("madry", net, x, y, [PGD2])
    with pytest.raises(ValueError):
        multi_perturbation_loss("avg", net, x, y, [])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(scheme="sgd")
    with pytest.raises(ValueError):
        TrainConfig(scheme="natural", lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(scheme="madry", attack_specs=(PGD2, ROA2))
    with pytest.raises(ValueError):
        TrainConfig(scheme="multibn", attack_specs=())
    with pytest.raises(ValueError):
        TrainConfig(scheme="avg", epochs=0)
    assert TrainConfig(scheme="multibn").K == 3
    assert TrainConfig(scheme="avg").K == 1
    kinds = tuple(s.kind for s in DEFAULT_TRAIN_SPECS)
    assert kinds == ("pgd", "roa")


def test_multibn_branch_count_must_match(batch):
    x, y, ids = batch
    net = fresh(K=2)
    det = build_detector_net(2, seed=1, channels=(4, 6), base=net.config)
    with pytest.raises(ValueError):
        multibn_loss(net, det, x, y, [PGD2, ROA2], 0.1)


# ---------------------------------------------------------------------------
# closed-form identities between library computations


def test_madry_eps_zero_equals_natural(batch):
    x, y, ids = batch
    nat = single_perturbation_loss("natural", fresh(), x, y, None)
    spec = AttackSpec(kind="pgd", epsilon=0.0, t_max=2)
    adv = single_perturbation_loss("madry", fresh(), x, y, spec, sample_ids=ids)
    assert abs(nat.item() - adv.item()) <= 1e-9


def test_trades_delta_zero_is_natural_plus_entropy(batch):
    x, y, ids = batch
    spec = AttackSpec(kind="pgd", epsilon=0.0, t_max=1)
    loss = single_perturbation_loss("trades", fresh(), x, y, spec, sample_ids=ids)
    # replay on a twin: soft target is f(x) from the same train-mode forward,
    # so at delta=0 the adv term collapses to the Shannon entropy of f(x)
    z = forward_target(fresh(), x, np.ones(1, dtype=np.float32), "train",
                       stats_branches=(0,)).data
    q = np_softmax(z)
    entropy = float(-(q * np.log(q)).sum(axis=1).mean())
    assert abs(loss.item() - (np_ce(z, y) + entropy)) < 1e-5


def test_mixed_matches_hand_computed_ce(batch):
    x, y, ids = batch
    x = x[:2].astype(np.float64)
    y, ids = y[:2], ids[:2]
    spec = AttackSpec(kind="pgd", t_max=1, seed=4)
    loss = single_perturbation_loss("mixed", fresh(arch=TINY64), x, y, spec,
                                    sample_ids=ids)
    twin = fresh(arch=TINY64)
    rho = np.ones(1)
    x_adv = run_attack(
        lambda xt, yy: ad.cross_entropy(forward_target(twin, xt, rho, "eval"), yy, "sum"),
        x, y, spec, sample_ids=ids)
    z_clean = forward_target(twin, x, rho, "train", stats_branches=(0,)).data
    z_adv = forward_target(twin, x_adv, rho, "train", stats_branches=(0,)).data
    assert abs(loss.item() - (np_ce(z_clean, y) + np_ce(z_adv, y))) < 1e-6


@pytest.mark.parametrize("spec", [PGD2, ROA2], ids=["pgd", "roa"])
def test_single_type_reductions(batch, spec):
    # one attack spec: avg, max, and msd all collapse to the mixed objective
    x, y, ids = batch
    mixed = single_perturbation_loss("mixed", fresh(), x, y, spec, sample_ids=ids)
    for variant in ("avg", "max", "msd"):
        v = multi_perturbation_loss(variant, fresh(), x, y, [spec], sample_ids=ids)
        assert abs(v.item() - mixed.item()) <= 1e-9, variant


def test_max_selection_matches_brute_force(batch):
    x, y, ids = batch
    x64 = x.astype(np.float64)
    specs = [AttackSpec(kind="pgd", epsilon=0.0, t_max=0),
             AttackSpec(kind="pgd", t_max=2, seed=7)]
    loss = multi_perturbation_loss("max", fresh(arch=TINY64), x64, y, specs,
                                   sample_ids=ids)
    twin = fresh(arch=TINY64)
    rho = np.ones(1)

    def eval_fn(xt, yy):
        return ad.cross_entropy(forward_target(twin, xt, rho, "eval"), yy, "sum")

    crafted = [run_attack(eval_fn, x64, y, s, sample_ids=ids) for s in specs]
    per_sample = []
    for xa in crafted:
        z = forward_target(twin, xa, rho, "eval").data
        m = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
        per_sample.append(lse - z[np.arange(len(y)), y])
    per_sample = np.stack(per_sample)
    # brute force: per-sample worst candidate; ties resolve to index 0
    pick = np.argmax(per_sample, axis=0)
    worst = np.stack([crafted[k][b] for b, k in enumerate(pick)])
    # the selected batch attains the per-sample maximum exactly (eval-mode
    # forwards are per-sample independent, so gathering commutes with CE)
    z_sel = forward_target(twin, worst, rho, "eval").data
    m = z_sel.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z_sel - m).sum(axis=1)) + m[:, 0]
    sel_ce = lse - z_sel[np.arange(len(y)), y]
    assert np.allclose(sel_ce, per_sample.max(axis=0), atol=1e-12)
    z_clean = forward_target(twin, x64, rho, "train", stats_branches=(0,)).data
    z_worst = forward_target(twin, worst, rho, "train", stats_branches=(0,)).data
    assert abs(loss.item() - (np_ce(z_clean, y) + np_ce(z_worst, y))) < 1e-6


def test_max_adv_term_dominates_each_type(batch):
    # eval-mode loss of the selected batch >= each candidate's eval loss
    x, y, ids = batch
    net = fresh(seed=9)
    rho = np.ones(1, dtype=np.float32)

    def eval_fn(xt, yy):
        return ad.cross_entropy(forward_target(net, xt, rho, "eval"), yy, "sum")

    specs = [PGD2, ROA2]
    crafted = [run_attack(eval_fn, x, y, s, sample_ids=ids) for s in specs]
    per = [np_ce(forward_target(net, xa, rho, "eval").data, y) for xa in crafted]
    per_sample = np.stack([
        -np.log(np_softmax(forward_target(net, xa, rho, "eval").data)[np.arange(len(y)), y])
        for xa in crafted
    ])
    worst = np.stack([crafted[k][b] for b, k in enumerate(np.argmax(per_sample, axis=0))])
    max_ce = np_ce(forward_target(net, worst, rho, "eval").data, y)
    for ce in per:
        assert max_ce >= ce - 1e-9


def test_msd_mixed_geometry(batch):
    x, y, ids = batch
    net = fresh(seed=13)
    specs = [AttackSpec(kind="pgd", t_max=2, seed=3),
             AttackSpec(kind="roa", t_max=2, seed=3)]
    adv = _msd_craft(net, x, y, specs, ids)
    assert adv.shape == x.shape and adv.dtype == x.dtype
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert not np.array_equal(adv, x)
    # pixels outside a sample's patch mask are only ever touched by the
    # ball-projected candidate, so they stay within epsilon of the original
    from multibn.attacks import _batch_mask

    masks = _batch_mask("roa", x, specs[1], ids)[:, None]
    eps = specs[0].resolved_epsilon()
    outside = np.broadcast_to(masks == 0, x.shape)
    assert np.abs((adv - x)[outside]).max() <= eps + 1e-6
    again = _msd_craft(net, x, y, specs, ids)
    assert np.array_equal(adv, again)


# ---------------------------------------------------------------------------
# multibn objective


def _twin_multibn(seed=21, arch=TINY64):
    from dataclasses import replace

    cfg = replace(arch, K=3)
    net = build_target_net(cfg, seed=seed)
    det = build_detector_net(3, seed=seed + 1, channels=(2, 3), base=cfg)
    return net, det


def _replay_multibn(net, det, x, y, specs, lam, rng, gumbel):
    """Hand assembly of the objective, consuming the same noise stream."""
    total = 0.0
    batches = [(x, 0)]
    for i, spec in enumerate(specs):
        batches.append((None, i + 1))  # crafted lazily below, in order
    for i, (xb, branch) in enumerate(batches):
        if xb is None:
            xb = attack_on_branch(net, branch, x, y, specs[branch - 1],
                                  sample_ids=np.arange(len(y)))
        det_logits = forward_detector(det, xb, mode="train")
        rho = gumbel_softmax(det_logits, gumbel, rng=rng)
        z = forward_target(net, xb, rho, "train", stats_branches=(branch,)).data
        total += np_ce(z, y)
        if lam != 0.0:
            total += lam * np_ce(det_logits.data, np.full(len(y), branch))
    return total


@pytest.mark.parametrize("lam", [0.0, 0.7], ids=["lam0", "lam07"])
def test_multibn_term_oracle(batch, lam):
    x, y, ids = batch
    x = x[:4].astype(np.float64)
    y, ids = y[:4], np.arange(4)
    specs = [AttackSpec(kind="pgd", t_max=1, seed=5),
             AttackSpec(kind="roa", t_max=1, seed=6)]
    gcfg = GumbelConfig(noise_mode="sampled", tau=1.0)
    net, det = _twin_multibn()
    loss = multibn_loss(net, det, x, y, specs, lam, gumbel=gcfg,
                        rng=derived_rng(77), sample_ids=ids)
    net2, det2 = _twin_multibn()
    expected = _replay_multibn(net2, det2, x, y, specs, lam, derived_rng(77), gcfg)
    assert abs(loss.item() - expected) < 1e-6


def test_multibn_lambda_zero_drops_detector_terms(batch):
    # lam=0 equals the lam>0 objective minus the detector cross-entropies
    x, y, ids = batch
    x = x[:4].astype(np.float64)
    y, ids = y[:4], np.arange(4)
    specs = [AttackSpec(kind="pgd", t_max=1, seed=5),
             AttackSpec(kind="roa", t_max=1, seed=6)]
    gcfg = GumbelConfig(noise_mode="sampled")
    l0 = multibn_loss(*_twin_multibn(), x, y, specs, 0.0, gumbel=gcfg,
                      rng=derived_rng(3), sample_ids=ids)
    l1 = multibn_loss(*_twin_multibn(), x, y, specs, 0.5, gumbel=gcfg,
                      rng=derived_rng(3), sample_ids=ids)
    net2, det2 = _twin_multibn()
    det_sum = 0.0
    rng = derived_rng(3)
    for i, (xb_branch) in enumerate([(x, 0)] + [(None, j + 1) for j in range(2)]):
        xb, branch = xb_branch
        if xb is None:
            xb = attack_on_branch(net2, branch, x, y, specs[branch - 1],
                                  sample_ids=ids)
        det_logits = forward_detector(det2, xb, mode="train")
        gumbel_softmax(det_logits, gcfg, rng=rng)  # keep the stream aligned
        forward_target(net2, xb, np.full(3, 1 / 3), "train", stats_branches=(branch,))
        det_sum += np_ce(det_logits.data, np.full(len(y), branch))
    assert abs(l1.item() - (l0.item() + 0.5 * det_sum)) < 1e-6


def test_multibn_stats_routed_by_type(batch):
    # layer-0 running stats of branch k blend exactly one batch: the type-k one
    x, y, ids = batch
    specs = [AttackSpec(kind="pgd", t_max=1, seed=5),
             AttackSpec(kind="roa", t_max=1, seed=6)]
    net, det = _twin_multibn(seed=31, arch=TINY)
    multibn_loss(net, det, x, y, specs, 0.1, rng=derived_rng(1), sample_ids=ids)
    net2, det2 = _twin_multibn(seed=31, arch=TINY)
    batches = [x,
               attack_on_branch(net2, 1, x, y, specs[0], sample_ids=ids),
               attack_on_branch(net2, 2, x, y, specs[1], sample_ids=ids)]
    m = net.config.bn_momentum
    for k, xb in enumerate(batches):
        feats = ad.conv3d(ad.Tensor(xb), ad.Tensor(net2.conv[0]), padding=1).data
        mean = feats.mean(axis=(0, 2, 3, 4))
        var = feats.var(axis=(0, 2, 3, 4))  # biased, matching normalization
        assert np.allclose(net.bn[0].running_mean[k], m * mean, atol=1e-5), k
        assert np.allclose(net.bn[0].running_var[k], (1 - m) + m * var, atol=1e-5), k


# ---------------------------------------------------------------------------
# parameter gradients of every scheme (64-bit, crafted points held by seed)


_check_param_grads = check_param_grads

SCHEME_CASES = ["natural", "madry", "mixed", "trades", "avg", "max", "msd", "multibn"]


@pytest.mark.parametrize("scheme", SCHEME_CASES)
def test_scheme_gradients_match_finite_differences(batch, scheme):
    x, y, ids = batch
    x = x[:3].astype(np.float64)
    y, ids = y[:3], np.arange(3)
    specs = [AttackSpec(kind="pgd", t_max=1, seed=2),
             AttackSpec(kind="roa", t_max=1, seed=3)]
    names = ("conv/0/weight", "bn/0/branch0/gamma", "head/weight")
    if scheme == "multibn":
        net, det = _twin_multibn(seed=41)

        def build(p, dp):
            return multibn_loss(net, det, x, y, specs, 0.1, params=p, det_params=dp,
                                rng=derived_rng(55), sample_ids=ids)

        _check_param_grads(build, net, det,
                           names=names + ("bn/0/branch2/beta", "det/conv/0/weight",
                                          "det/head/bias"))
        return
    net = fresh(arch=TINY64, seed=41)
    if scheme == "natural":
        build = lambda p, dp: single_perturbation_loss("natural", net, x, y, None, params=p)
    elif scheme in ("madry", "mixed", "trades"):
        build = lambda p, dp: single_perturbation_loss(scheme, net, x, y, specs[0],
                                                       params=p, sample_ids=ids)
    else:
        build = lambda p, dp: multi_perturbation_loss(scheme, net, x, y, specs,
                                                      params=p, sample_ids=ids)
    _check_param_grads(build, net, names=names)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_zero_gradient_is_fixed_point():
    cfg = TrainConfig(scheme="natural", lr=0.1, momentum=0.9, weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, {}, cfg)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_sgd_vanilla_step():
    cfg = TrainConfig(scheme="natural", lr=0.5, momentum=0.0, weight_decay=0.0)
    p = {"w": np.array([1.0, 1.0])}
    sgd_step(p, {"w": np.array([2.0, -4.0])}, {}, cfg)
    assert np.allclose(p["w"], [0.0, 3.0], atol=1e-15)


def test_sgd_momentum_hand_recursion():
    # v1 = g1 + wd*p0;            p1 = p0 - lr*v1
    # v2 = mu*v1 + g2 + wd*p1;    p2 = p1 - lr*v2
    lr, mu, wd = 0.1, 0.9, 0.01
    p0, g1, g2 = 2.0, 0.5, -0.25
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    v2 = mu * v1 + g2 + wd * p1
    p2 = p1 - lr * v2
    cfg = TrainConfig(scheme="natural", lr=lr, momentum=mu, weight_decay=wd)
    p = {"w": np.array([p0])}
    state = {}
    sgd_step(p, {"w": np.array([g1])}, state, cfg)
    assert abs(p["w"][0] - p1) < 1e-12
    sgd_step(p, {"w": np.array([g2])}, state, cfg)
    assert abs(p["w"][0] - p2) < 1e-12


def test_sgd_rejects_nonfinite_gradients():
    cfg = TrainConfig(scheme="natural")
    with pytest.raises(TrainingDiverged):
        sgd_step({"w": np.ones(1)}, {"w": np.array([np.inf])}, {}, cfg)


def test_lr_drops_at_midpoint():
    cfg = TrainConfig(scheme="natural", lr=1e-3, epochs=20)
    assert lr_at_epoch(cfg, 9) == 1e-3
    assert lr_at_epoch(cfg, 10) == pytest.approx(1e-4)
    assert lr_at_epoch(cfg, 20) == pytest.approx(1e-4)
    odd = TrainConfig(scheme="natural", lr=1e-3, epochs=7)
    assert lr_at_epoch(odd, 3) == 1e-3
    assert lr_at_epoch(odd, 4) == pytest.approx(1e-4)


# ---------------------------------------------------------------------------
# the loop and checkpoints


@pytest.fixture(scope="module")
def mini_dataset():
    return generate_synthetic_dataset(DatasetManifest(seed=2, train_size=16, test_size=8))


def test_train_runs_are_identical(mini_dataset):
    cfg = TrainConfig(scheme="mixed", attack_specs=(AttackSpec(kind="pgd", t_max=1),),
                      epochs=2, batch_size=8, arch=TINY, metric_subset=4)
    a = train(cfg, mini_dataset)
    b = train(cfg, mini_dataset)
    assert a.metrics == b.metrics
    for k, v in a.net.parameters().items():
        assert np.array_equal(v, b.net.parameters()[k]), k


def test_train_metric_rows_shape(mini_dataset):
    cfg = TrainConfig(scheme="natural", attack_specs=(AttackSpec(kind="pgd", t_max=1),),
                      epochs=2, batch_size=8, arch=TINY, metric_subset=4)
    res = train(cfg, mini_dataset)
    assert {r["input_type"] for r in res.metrics} == {"clean", "pgd"}
    assert {r["epoch"] for r in res.metrics} == {1, 2}
    for r in res.metrics:
        assert set(r) == {"epoch", "split", "input_type", "accuracy", "loss"}
        assert 0.0 <= r["accuracy"] <= 1.0 and np.isfinite(r["loss"])


def test_checkpoint_roundtrip_multibn(tmp_path, mini_dataset):
    specs = (AttackSpec(kind="pgd", t_max=1), AttackSpec(kind="roa", t_max=1))
    cfg = TrainConfig(scheme="multibn", attack_specs=specs, epochs=1, batch_size=8,
                      arch=TINY, detector_channels=(4, 6), metric_subset=None,
                      metric_attacks=False)
    res = train(cfg, mini_dataset)
    path = tmp_path / "ck.ntc"
    save_checkpoint(path, res)
    net2, det2, state2, manifest = load_checkpoint(path)
    x = mini_dataset.test.videos[:4]
    g = GumbelConfig(noise_mode="deterministic")
    before = forward_full(FullModel(net=res.net, detector=res.detector, gumbel=g),
                          x, mode="eval")[0].data
    after = forward_full(FullModel(net=net2, detector=det2, gumbel=g),
                         x, mode="eval")[0].data
    assert np.array_equal(before, after)
    assert manifest["scheme"] == "multibn" and manifest["K"] == 3
    assert manifest["epoch"] == 1
    assert set(state2) == set(res.opt_state)
    for k in state2:
        assert np.array_equal(state2[k], res.opt_state[k]), k


def test_checkpoint_roundtrip_single(tmp_path, mini_dataset):
    cfg = TrainConfig(scheme="natural", epochs=1, batch_size=8, arch=TINY,
                      metric_subset=None, metric_attacks=False)
    res = train(cfg, mini_dataset)
    path = tmp_path / "ck.ntc"
    save_checkpoint(path, res)
    net2, det2, _, manifest = load_checkpoint(path)
    assert det2 is None
    x = mini_dataset.test.videos[:4]
    rho = np.ones(1, dtype=np.float32)
    assert np.array_equal(forward_target(res.net, x, rho, "eval").data,
                          forward_target(net2, x, rho, "eval").data)
    assert manifest["config"]["scheme"] == "natural"


def test_checkpoint_rejects_foreign_container(tmp_path):
    path = tmp_path / "junk.ntc"
    save_tensors(path, {"stuff": np.zeros(3, dtype=np.float32)}, {"kind": "other"})
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_build_models_matches_scheme():
    net, det = build_models(TrainConfig(scheme="avg", arch=TINY))
    assert net.K == 1 and det is None
    net, det = build_models(TrainConfig(scheme="multibn", arch=TINY,
                                        detector_channels=(4, 6)))
    assert net.K == 3 and det is not None and det.num_outputs == 3
