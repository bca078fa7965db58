import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comatch import cotrain as C
from comatch import ndgrad
from comatch.augment import AugmentationPolicy
from comatch.datanoise import build_transition_matrix, corrupt_labels, synth_blobs
from comatch.errors import NumericalError, ValidationError
from comatch.models import build_mlp
from oracles import subset_oracle


# ------------------------------------------------------------- schedules


def test_rate_schedule_examples():
    assert C.rate_schedule(0, 10, 0.5) == 1.0
    assert C.rate_schedule(5, 10, 0.5) == 0.75
    assert C.rate_schedule(200, 10, 0.2) == 0.8


@given(st.integers(0, 300), st.sampled_from([1, 10]), st.sampled_from([0.2, 0.5, 0.8]))
def test_rate_schedule_shape(t, t_k, tau):
    r = C.rate_schedule(t, t_k, tau)
    assert r == 1.0 - min(t / t_k * tau, tau)
    assert C.rate_schedule(t + 1, t_k, tau) <= r
    if t >= t_k:
        assert r == 1.0 - tau


def test_lr_schedule_examples():
    cfg = C.TrainConfig(epochs=200, lr=0.001, lr_decay_start=80)
    assert C.lr_schedule(0, cfg) == 0.001
    assert C.lr_schedule(79, cfg) == 0.001
    assert C.lr_schedule(140, cfg) == pytest.approx(0.0005, abs=1e-18)
    assert C.lr_schedule(199, cfg) == pytest.approx(0.001 / 120)
    with pytest.raises(ValidationError):
        C.lr_schedule(200, cfg)


# -------------------------------------------------------------- selection


def test_select_small_loss_examples():
    assert C.select_small_loss([0.1, 2.0, 0.5, 3.0], 0.5).tolist() == [0, 2]
    assert C.select_small_loss([3.0, 1.0, 2.0], 1.0).tolist() == [0, 1, 2]
    assert C.select_small_loss([1.0, 1.0, 2.0], 1 / 3).tolist() == [0]
    # 0.7 * 10 is 7.000000000000001 in floating point
    assert len(C.select_small_loss(np.arange(10.0), 0.7)) == 7


def test_select_small_loss_errors():
    with pytest.raises(ValidationError):
        C.select_small_loss([], 0.5)
    with pytest.raises(ValidationError):
        C.select_small_loss([1.0], 0.0)
    with pytest.raises(NumericalError):
        C.select_small_loss([1.0, np.nan], 0.5)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=9), st.sampled_from([0.25, 1 / 3, 0.5, 0.7, 1.0]))
def test_selection_matches_subset_oracle_with_ties(values, rate):
    losses = [float(v) for v in values]
    assert C.select_small_loss(losses, rate).tolist() == subset_oracle(losses, rate)


# ----------------------------------------------------------------- losses


def test_hard_pseudo_label():
    assert C.hard_pseudo_label([0.2, 0.5, 0.3]).tolist() == [0, 1, 0]
    assert C.hard_pseudo_label([1.0, 0.0, 0.0]).tolist() == [1, 0, 0]
    assert C.hard_pseudo_label([1 / 3] * 3).tolist() == [1, 0, 0]


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8), st.floats(0.1, 100))
def test_hard_pseudo_label_ignores_scale(raw, c):
    p = np.array(raw) / sum(raw)
    q = np.array(raw) * c
    q = q / q.sum()
    assert np.argmax(C.hard_pseudo_label(p)) == np.argmax(p)
    assert np.argmax(C.hard_pseudo_label(q)) == np.argmax(raw)


def test_classification_loss_examples():
    y = np.eye(10)[[3, 7]]
    assert np.allclose(C.classification_loss(y, y, y), 0)
    uniform = np.full((2, 10), 0.1)
    assert np.allclose(C.classification_loss(uniform, uniform, y), 2 * math.log(10))


def test_classification_loss_random_against_direct_evaluation():
    rng = np.random.default_rng(0)
    pf = rng.dirichlet(np.ones(5), 6)
    pg = rng.dirichlet(np.ones(5), 6)
    labels = rng.integers(0, 5, 6)
    got = C.classification_loss(pf, pg, np.eye(5)[labels])
    want = [-math.log(pf[i, labels[i]]) - math.log(pg[i, labels[i]]) for i in range(6)]
    assert np.allclose(got, want, rtol=1e-13)


def test_matching_loss_examples():
    anchor = np.eye(10)[[2]] * 0.9 + 0.01
    assert np.allclose(C.matching_loss(anchor, np.eye(10)[[2]]), 0)
    assert np.allclose(C.matching_loss(anchor, np.full((1, 10), 0.1)), math.log(10))
    soft = C.matching_loss(anchor, np.full((1, 10), 0.1), mode="soft")
    assert np.allclose(soft, math.log(10))


def test_total_loss_examples():
    lc, la = np.array([2.0, 3.0]), np.array([1.0, 0.5])
    assert np.array_equal(C.total_loss(lc, la, 0.0), lc)
    assert np.array_equal(C.total_loss(lc, la, 1.0), la)
    assert C.total_loss([2.0], [1.0], 0.95)[0] == pytest.approx(1.05)
    with pytest.raises(ValidationError):
        C.total_loss(lc, la, 1.5)


def test_matching_gradient_is_probs_minus_anchor():
    rng = np.random.default_rng(1)
    logits = ndgrad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    anchor = C.hard_pseudo_label(rng.dirichlet(np.ones(4), 5))
    with ndgrad.Graph() as g:
        loss, probs = ndgrad.softmax_cross_entropy(logits, anchor)
        total = ndgrad.reduce_sum(loss)
    g.backward(total)
    assert np.max(np.abs(logits.grad - (probs - anchor))) < 1e-12
    h = 1e-6
    base = logits.data.copy()
    for i, j in [(0, 0), (2, 3), (4, 1)]:
        up, down = base.copy(), base.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (C.matching_loss(anchor, ndgrad.softmax(up)).sum()
              - C.matching_loss(anchor, ndgrad.softmax(down)).sum()) / (2 * h)
        assert abs(fd - logits.grad[i, j]) < 1e-7


# ------------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": ndgrad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    C.adam_update(p, {"w": np.zeros(2)}, C.AdamState(), 0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_signed_lr():
    p = {"w": ndgrad.Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)}
    C.adam_update(p, {"w": np.array([3.0, -0.02, 1e-3])}, C.AdamState(), 0.001)
    assert np.allclose(p["w"].data, [-0.001, 0.001, -0.001], rtol=1e-4)


def test_adam_rejects_nan_with_diagnostics():
    p = {"w": ndgrad.Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(NumericalError, match="w: 1 bad"):
        C.adam_update(p, {"w": np.array([0.0, np.nan, 1.0])}, C.AdamState(), 0.1)


def test_adam_trajectories_repeat():
    def run():
        p = {"w": ndgrad.Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        s = C.AdamState()
        for _ in range(20):
            C.adam_update(p, {"w": 2 * p["w"].data}, s, 0.05)
        return p["w"].data
    assert np.array_equal(run(), run())


# ------------------------------------------------------------------ steps


def make_state(algorithm, seeds=(0, 1), rate=1.0, lr=0.01):
    keys = ("f", "g") if algorithm in C.TWO_NETWORK else ("f",)
    nets = {k: build_mlp(12, [8], 3, s, dtype=np.float64) for k, s in zip(keys, seeds)}
    return C.TrainState(nets, C.AdamState(), 0, rate, lr)


def make_batch(seed=0, n=10, views_differ=True):
    rng = np.random.default_rng(seed)
    view_f = rng.normal(size=(n, 12))
    view_g = rng.normal(size=(n, 12)) if views_differ else view_f
    return C.Batch(view_f, view_g, rng.integers(0, 3, n), np.arange(n), 3)


def params_of(state, key):
    return {k: v.data.copy() for k, v in state.networks[key].params.items()}


def assert_same_params(a, b, tol=0.0):
    for k in a:
        assert np.max(np.abs(a[k] - b[k])) <= tol, k


def test_standard_plus_at_full_rate_is_standard():
    a, b = make_state("standard"), make_state("standard_plus")
    batch = make_batch()
    C.standard_step(batch, a, C.TrainConfig(algorithm="standard"))
    C.standard_plus_step(batch, b, C.TrainConfig(algorithm="standard_plus"))
    assert_same_params(params_of(a, "f"), params_of(b, "f"))


def test_comatch_without_matching_updates_f_like_standard():
    std, co = make_state("standard"), make_state("co_matching")
    batch = make_batch()
    C.standard_step(batch, std, C.TrainConfig(algorithm="standard"))
    C.comatch_step(batch, co, C.TrainConfig(lam=0.0))
    assert_same_params(params_of(std, "f"), params_of(co, "f"), 1e-15)


def test_comatch_without_matching_on_one_view_selects_like_standard_plus():
    batch = make_batch(views_differ=False)
    co = make_state("co_matching", seeds=(0, 0), rate=0.6)
    rec = C.comatch_step(batch, co, C.TrainConfig(lam=0.0))
    plus = make_state("standard_plus", rate=0.6)
    rec_plus = C.standard_plus_step(batch, plus, C.TrainConfig(algorithm="standard_plus"))
    assert np.allclose(rec.losses, 2 * rec_plus.losses)
    assert rec.selected[0].tolist() == rec_plus.selected[0].tolist()
    assert_same_params(params_of(co, "f"), params_of(plus, "f"), 1e-15)


def test_anchor_carries_no_gradient_into_f():
    co = make_state("co_matching")
    before = params_of(co, "f")
    C.comatch_step(make_batch(), co, C.TrainConfig(lam=1.0))
    assert_same_params(before, params_of(co, "f"))


@pytest.mark.parametrize("lam", [0.3, 0.65, 0.95])
def test_f_gradient_only_scales_with_lambda(lam):
    batch = make_batch(3)

    def f_grads(lam):
        state = make_state("co_matching")
        with ndgrad.Graph() as g:
            total, _, _ = C.comatch_losses(batch, state, C.TrainConfig(lam=lam))
            loss = ndgrad.reduce_mean(total)
        g.backward(loss)
        return {k: t.grad.copy() for k, t in state.networks["f"].params.items()}

    base, scaled = f_grads(0.0), f_grads(lam)
    for k in base:
        assert np.allclose(scaled[k], (1 - lam) * base[k], rtol=1e-12, atol=1e-15)


def test_matching_loss_ignores_labels_but_classification_does_not():
    rng = np.random.default_rng(4)
    state = make_state("co_matching")
    for trial in range(5):
        batch = make_batch(trial, n=16)
        perm = C.Batch(batch.view_f, batch.view_g, rng.permutation(batch.noisy_labels), batch.indices, 3)
        with ndgrad.no_graph():
            _, lc, la = C.comatch_losses(batch, state, C.TrainConfig())
            _, lc2, la2 = C.comatch_losses(perm, state, C.TrainConfig())
        assert np.array_equal(la.data, la2.data)
        if not np.array_equal(batch.noisy_labels, perm.noisy_labels):
            assert not np.array_equal(lc.data, lc2.data)


def test_comatch_selection_matches_recomputation():
    batch = make_batch(5, n=20)
    state = make_state("co_matching", rate=0.55)
    cfg = C.TrainConfig(lam=0.65)
    probs_f = _probs(state.networks["f"], batch.view_f)
    probs_g = _probs(state.networks["g"], batch.view_g)
    y = np.eye(3)[batch.noisy_labels]
    expected = 0.35 * C.classification_loss(probs_f, probs_g, y) + 0.65 * C.matching_loss(probs_f, probs_g)
    rec = C.comatch_step(batch, state, cfg)
    assert np.allclose(rec.losses, expected, rtol=1e-12)
    assert rec.selected[0].tolist() == sorted(np.argsort(expected, kind="stable")[:11].tolist())


def _probs(net, x):
    # plain numpy forward for a one-hidden-layer MLP
    p = {k: v.data for k, v in net.params.items()}
    h = np.maximum(x @ p["fc0.weight"] + p["fc0.bias"], 0)
    return ndgrad.softmax(h @ p["head.weight"] + p["head.bias"])


def test_co_teaching_cross_update():
    batch = make_batch(6, n=12, views_differ=False)
    ct = make_state("co_teaching", seeds=(0, 1), rate=0.5)
    probs_a, probs_b = _probs(ct.networks["f"], batch.view_f), _probs(ct.networks["g"], batch.view_f)
    y = np.eye(3)[batch.noisy_labels]
    rec = C.co_teaching_step(batch, ct, C.TrainConfig(algorithm="co_teaching"))
    ce_a = -np.log((probs_a * y).sum(1))
    ce_b = -np.log((probs_b * y).sum(1))
    assert rec.selected[0].tolist() == sorted(np.argsort(ce_a, kind="stable")[:6].tolist())
    assert rec.selected[1].tolist() == sorted(np.argsort(ce_b, kind="stable")[:6].tolist())


def test_co_teaching_with_identical_networks_is_standard_plus():
    batch = make_batch(7, n=12, views_differ=False)
    ct = make_state("co_teaching", seeds=(2, 2), rate=0.5)
    plus = make_state("standard_plus", seeds=(2,), rate=0.5)
    C.co_teaching_step(batch, ct, C.TrainConfig(algorithm="co_teaching"))
    C.standard_plus_step(batch, plus, C.TrainConfig(algorithm="standard_plus"))
    assert_same_params(params_of(ct, "f"), params_of(plus, "f"), 1e-15)
    assert_same_params(params_of(ct, "g"), params_of(plus, "f"), 1e-15)


def test_co_teaching_at_full_rate_is_two_standards():
    batch = make_batch(8, views_differ=False)
    ct = make_state("co_teaching", seeds=(0, 1))
    s0, s1 = make_state("standard", seeds=(0,)), make_state("standard", seeds=(1,))
    C.co_teaching_step(batch, ct, C.TrainConfig(algorithm="co_teaching"))
    C.standard_step(batch, s0, C.TrainConfig(algorithm="standard"))
    C.standard_step(batch, s1, C.TrainConfig(algorithm="standard"))
    assert_same_params(params_of(ct, "f"), params_of(s0, "f"), 1e-15)
    assert_same_params(params_of(ct, "g"), params_of(s1, "f"), 1e-15)


# ---------------------------------------------------------------- metrics


def _record(clean, n):
    r = C.StepRecord(np.zeros(n), (np.arange(n),), 0.0, n_selected=n)
    r.clean_selected = clean
    return r


def test_label_precision():
    assert C.label_precision([_record(4, 4), _record(2, 2)]) == 1.0
    assert C.label_precision([_record(1, 2)]) == 0.5
    assert C.label_precision([_record(0, 0)]) is None


def test_uniform_selection_precision_is_near_one_minus_epsilon():
    rng = np.random.default_rng(0)
    clean = rng.random(20000) >= 0.4
    records = []
    for start in range(0, 20000, 100):
        sel = np.sort(rng.choice(100, 50, replace=False))
        records.append(_record(int(clean[start:start + 100][sel].sum()), 50))
    assert abs(C.label_precision(records) - 0.6) < 3 * math.sqrt(0.24 / 10000)


# ---------------------------------------------------------------- trainer


def _trainer(algorithm="co_matching", lam=0.65, seed=0):
    train = synth_blobs(3, 20, 8, 1)
    train = corrupt_labels(train, build_transition_matrix("symmetric", 0.4, 3), 2)
    test = synth_blobs(3, 10, 8, 3, split="test")
    cfg = C.TrainConfig(algorithm=algorithm, lam=lam, tau=0.4, t_k=2, epochs=3, batch_size=16, lr_decay_start=1,
                        seed=seed)
    pol = {"f": AugmentationPolicy("weak", pad=1), "g": AugmentationPolicy("strong", pad=1)}
    return C.Trainer(cfg, train, test, lambda k: build_mlp(192, [16], 3, {"f": 5, "g": 6}[k],
                                                           input_shape=(3, 8, 8)), pol)


def test_trainer_schedule_and_metrics():
    tr = _trainer()
    rows = [tr.run_epoch(e) for e in range(3)]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert [r["rate"] for r in rows] == [1.0, 0.8, 0.6]
    assert rows[0]["lr"] == 0.001 and rows[2]["lr"] == pytest.approx(0.0005)
    for r in rows:
        assert 0 <= r["test_acc"] <= 1 and 0 <= r["label_precision"] <= 1


def test_trainer_is_deterministic():
    a = [_trainer().run_epoch(e) for e in range(1)]
    b = [_trainer().run_epoch(e) for e in range(1)]
    assert a == b


def test_trainer_without_evaluation():
    m = _trainer("standard").run_epoch(0, evaluate=False)
    assert m["test_acc"] is None and m["test_acc_g"] is None


def test_trainer_batches_skip_singletons():
    tr = _trainer()
    sizes = [len(i) for i in tr.batches(0)]
    assert sum(sizes) == 60 and min(sizes) >= 2
    assert sorted(np.concatenate(list(tr.batches(0)))) == list(range(60))


def test_train_config_validation():
    with pytest.raises(ValidationError):
        C.TrainConfig(algorithm="decoupling").validate()
    with pytest.raises(ValidationError):
        C.TrainConfig(tau=1.0).validate()
    with pytest.raises(ValidationError):
        C.TrainConfig(epochs=10, lr_decay_start=20).validate()
