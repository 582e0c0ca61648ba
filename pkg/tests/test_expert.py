import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expertgrowth.errors import ConfigError, RoutingError
from expertgrowth.expert import (
    ExpertParams, PairSet, PreferencePair, TrainConfig, batch_loss, compose_action, expert_delta,
    filter_by_contrast, gate, init_expert, mine_pairs_harder, mine_pairs_naive, mine_segment_candidates,
    pref_loss, pref_loss_grad, preference_accuracy, train_expert,
)
from expertgrowth.indexer import ClusterSet, RoutingDecision
from expertgrowth.shiftenv import ShiftSpec, Trajectory


def fake_traj(rewards, actions, seed=0):
    rewards = np.asarray(rewards, float)
    actions = np.asarray(actions, float)
    T = len(rewards)
    return Trajectory(np.zeros((T, 2)), actions, rewards, float(rewards.sum()), seed, ShiftSpec(),
                      states=np.zeros((T, 2)), base_actions=np.zeros(T), routes=[None] * T,
                      clamped=np.zeros(T, bool))


def zero_expert(n_in, delta_max=0.5):
    return ExpertParams(np.zeros((4, n_in)), np.zeros(4), np.zeros(4), 0.0, delta_max)


def random_expert(rng, n_in, hidden=5):
    return ExpertParams(rng.normal(size=(hidden, n_in)), rng.normal(size=hidden), rng.normal(size=hidden),
                        float(rng.normal()), 0.5, "", rng.normal(size=n_in), rng.uniform(0.5, 2, size=n_in))


# ------------------------------------------------------------------ mining


def test_naive_two_episodes():
    lo = fake_traj([1.0] * 10, np.linspace(-0.5, 0.5, 10))
    hi = fake_traj([2.0] * 10, np.linspace(0.1, 0.9, 10), seed=1)
    emb = [np.arange(10.0)[:, None], np.arange(10.0)[:, None]]
    ps = mine_pairs_naive([lo, hi], emb)
    assert len(ps) == 10
    assert np.all(ps.contrast == 10.0)
    np.testing.assert_array_equal(ps.a_plus, hi.actions)
    np.testing.assert_array_equal(ps.a_minus, lo.actions)


def test_naive_identical_returns_is_empty():
    t = [fake_traj([1.0] * 5, np.zeros(5)), fake_traj([1.0] * 5, np.ones(5), 1)]
    assert len(mine_pairs_naive(t, [np.zeros((5, 2))] * 2)) == 0


def test_naive_four_episodes_bruteforce():
    rng = np.random.default_rng(0)
    rets = [1.0, 4.0, 2.0, 8.0]
    trajs = [fake_traj([r / 6] * 6, rng.uniform(-1, 1, 6), i) for i, r in enumerate(rets)]
    emb = [rng.normal(size=(6, 3)) for _ in rets]
    ps = mine_pairs_naive(trajs, emb)
    # median 3: episodes 0 and 2 are low, 1 and 3 high
    hi_pts = [(emb[i][t], trajs[i].actions[t], rets[i]) for i in (1, 3) for t in range(6)]
    expected = []
    for i in (0, 2):
        for t in range(6):
            j = min(range(len(hi_pts)), key=lambda k: np.sum((hi_pts[k][0] - emb[i][t]) ** 2))
            expected.append((hi_pts[j][1], trajs[i].actions[t], hi_pts[j][2] - rets[i]))
    assert len(ps) == 12
    np.testing.assert_allclose(ps.a_plus, [e[0] for e in expected])
    np.testing.assert_allclose(ps.a_minus, [e[1] for e in expected])
    np.testing.assert_allclose(ps.contrast, [e[2] for e in expected])


def make_pairs(contrasts):
    n = len(contrasts)
    return PairSet(np.zeros((n, 2)), np.ones(n), -np.ones(n), np.asarray(contrasts, float))


def test_contrast_filter_hand_quantile():
    kept = filter_by_contrast(make_pairs(np.arange(1, 11)), 0.7)
    assert sorted(kept.contrast) == [8, 9, 10]


def test_contrast_filter_extremes():
    ps = make_pairs([3, 1, 2, 5])
    assert np.array_equal(filter_by_contrast(ps, 0.0).contrast, ps.contrast)
    assert list(filter_by_contrast(ps, 0.999).contrast) == [5]
    with pytest.raises(ValueError):
        filter_by_contrast(ps, 1.0)


def test_harder_with_q_zero_is_segment_mining():
    rng = np.random.default_rng(1)
    trajs = [fake_traj(rng.uniform(0, 1, 50), rng.uniform(-1, 1, 50), i) for i in range(4)]
    emb = [rng.normal(size=(50, 2)) for _ in trajs]
    a = mine_pairs_harder(trajs, emb, q=0.0, seg_len=10)
    b = mine_segment_candidates(trajs, emb, 10)
    assert np.array_equal(a.contexts, b.contexts) and np.array_equal(a.contrast, b.contrast)
    assert len(mine_pairs_harder(trajs, emb, q=0.7, seg_len=10)) < len(b)


def test_pairset_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    ps = PairSet(rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=5), rng.uniform(size=5))
    ps.to_csv(tmp_path / "p.csv")
    back = PairSet.from_csv(tmp_path / "p.csv")
    assert np.array_equal(back.contexts, ps.contexts) and np.array_equal(back.contrast, ps.contrast)
    PairSet.empty(3).to_csv(tmp_path / "e.csv")
    assert len(PairSet.from_csv(tmp_path / "e.csv")) == 0


# ------------------------------------------------------------------ loss


def test_loss_hand_values():
    e = zero_expert(2)
    ctx = np.array([0.0, 0.0])  # a_base = 0, delta = 0
    assert pref_loss(e, PreferencePair(ctx, 1.0, -1.0, 1.0), 0.5) == 0.5
    assert pref_loss(e, PreferencePair(ctx, 0.3, -0.3, 1.0), 0.2) == pytest.approx(0.2)
    # d+ = 0, d- = m + 1
    assert pref_loss(e, PreferencePair(ctx, 0.0, 1.2, 1.0), 0.2) == 0.0


def test_inactive_hinge_has_zero_gradient():
    e = random_expert(np.random.default_rng(0), 3)
    ctx = np.array([0.1, 0.2, 0.0])
    a = float(ctx[-1] + expert_delta(e, ctx))
    g = pref_loss_grad(e, PreferencePair(ctx, a, a + 5.0, 1.0), 0.2)
    assert np.all(g == 0)


def fd_grad(e, pair, m, eps=1e-5):
    theta = e.flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        out[i] = (pref_loss(e.with_flat(tp), pair, m) - pref_loss(e.with_flat(tm), pair, m)) / (2 * eps)
    return out


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 50:
        n_in = int(rng.integers(2, 5))
        e = random_expert(rng, n_in)
        ctx = rng.normal(size=n_in)
        pair = PreferencePair(ctx, float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), 1.0)
        a = float(ctx[-1] + expert_delta(e, ctx))
        m = 0.2
        hinge = m + abs(a - pair.a_plus) - abs(a - pair.a_minus)
        # stay clear of the kinks where finite differences are meaningless
        if abs(hinge) < 1e-3 or min(abs(a - pair.a_plus), abs(a - pair.a_minus)) < 1e-3:
            continue
        g, fd = pref_loss_grad(e, pair, m), fd_grad(e, pair, m)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)
        checked += 1


def test_gradient_antisymmetry_under_swap():
    rng = np.random.default_rng(3)
    e = random_expert(rng, 3)
    ctx = rng.normal(size=3)
    a = float(ctx[-1] + expert_delta(e, ctx))
    g1 = pref_loss_grad(e, PreferencePair(ctx, a + 0.3, a - 0.3, 1.0), 0.2)
    g2 = pref_loss_grad(e, PreferencePair(ctx, a - 0.3, a + 0.3, 1.0), 0.2)
    np.testing.assert_allclose(g1, -g2, atol=1e-15)


# ------------------------------------------------------------------ training


def test_zero_epochs_returns_init():
    ps = make_pairs([1.0, 2.0])
    init = init_expert(2, TrainConfig(seed=3), "", ps.contexts)
    res = train_expert(ps, TrainConfig(epochs=0, seed=3), init=init)
    assert np.array_equal(res.params.flat(), init.flat()) and len(res.loss_curve) == 0


def test_single_separable_pair_reaches_zero():
    ps = PairSet(np.array([[0.2, 0.0]]), np.array([0.3]), np.array([-0.3]), np.array([1.0]))
    res = train_expert(ps, TrainConfig(epochs=200, seed=0))
    assert batch_loss(res.params, ps, 0.2) == 0.0


def synthetic_pairs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n, 3))
    base = rng.uniform(-0.5, 0.5, n)
    push = 0.3 * np.sign(h[:, 0])
    return PairSet(np.column_stack([h, base]), base + push, base - push, np.ones(n))


def test_loss_decreases_early():
    res = train_expert(synthetic_pairs(), TrainConfig(epochs=10))
    assert np.all(np.diff(res.loss_curve) <= 1e-12)


def test_training_deterministic_and_learns():
    ps = synthetic_pairs()
    a = train_expert(ps, TrainConfig(epochs=30, seed=2))
    b = train_expert(ps, TrainConfig(epochs=30, seed=2))
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert preference_accuracy(a.params, ps) > 0.9


def test_expert_text_roundtrip():
    e = random_expert(np.random.default_rng(4), 3)
    back = ExpertParams.from_text(e.to_text())
    assert np.array_equal(back.flat(), e.flat()) and np.array_equal(back.in_scale, e.in_scale)


def test_preference_accuracy_cases():
    e = zero_expert(2)
    base = np.array([0.1, -0.2, 0.4])
    exact = PairSet(np.column_stack([np.zeros(3), base]), base, base + 1, np.ones(3))
    assert preference_accuracy(e, exact) == 1.0
    tied = PairSet(np.column_stack([np.zeros(3), base]), base + 0.2, base - 0.2, np.ones(3))
    assert preference_accuracy(e, tied) == 0.0
    # ten pairs, a_tilde = a_base: correct iff a_plus is strictly closer
    plus = np.array([0.1, 0.5, -0.1, 0.9, 0.0, 0.2, -0.6, 0.3, 0.05, 1.0])
    minus = np.array([0.2, 0.1, 0.3, -0.2, 0.4, 0.2, 0.5, -0.1, -0.3, 0.0])
    ps = PairSet(np.zeros((10, 2)), plus, minus, np.ones(10))
    # |plus| < |minus| at indices 0, 2, 4, 8
    assert preference_accuracy(e, ps) == 0.4


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 2))
def test_delta_bounded(x, a_base, dmax):
    e = random_expert(np.random.default_rng(0), 2)
    e = ExpertParams(e.W1, e.b1, e.w2 * 10, e.b2, dmax)
    assert abs(float(expert_delta(e, np.array([x, a_base])))) <= dmax


# ------------------------------------------------------------------ composition and gating


def test_compose_id_is_identity():
    a = 0.123456789
    assert compose_action(a, RoutingDecision("ID", {}), {}) is a
    assert compose_action(0.3, "c", {"c": zero_expert(2)}, np.zeros(2)) == 0.3
    with pytest.raises(RoutingError):
        compose_action(0.3, "missing", {}, np.zeros(2))


def test_compose_clamps():
    e = ExpertParams(np.zeros((1, 2)), np.zeros(1), np.zeros(1), 100.0, 0.5)
    assert compose_action(0.9, "c", {"c": e}, np.array([0.0, 0.9])) == 1.0


def test_gate_modes():
    cs = ClusterSet({"ID": np.zeros(2), "a": np.array([3.0, 0]), "b": np.array([0, 3.0])})
    h = np.zeros(2)
    assert gate("none", np.array([3.0, 0]), cs).assigned == "ID"
    assert gate("global", h, cs, designated="a").assigned == "a"
    assert gate("coarse", h, cs, designated="a").assigned == "ID"
    assert gate("coarse", np.array([0, 3.0]), cs, designated="a").assigned == "a"
    assert gate("jepa", np.array([0, 3.0]), cs).assigned == "b"
    with pytest.raises(ConfigError):
        gate("global", h, cs)
    with pytest.raises(ConfigError):
        gate("bogus", h, cs)


def test_random_gate_golden_sequence():
    cs = ClusterSet({"ID": np.zeros(2), "a": np.ones(2), "b": -np.ones(2)})
    rng = np.random.default_rng(11)
    seq = [gate("random", np.zeros(2), cs, rng).assigned for _ in range(12)]
    assert seq == ["a", "a", "b", "a", "b", "b", "b", "a", "a", "a", "a", "b"]
