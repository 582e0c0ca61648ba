import dataclasses

import numpy as np
import pytest

from expertgrowth.agent import ExpertAgent
from expertgrowth.controller import NominalModel, Planner, PlannerConfig
from expertgrowth.encoder import Encoder, featurize_window, fit_pca, windows
from expertgrowth.expert import ExpertParams
from expertgrowth.indexer import ClusterSet
from expertgrowth.shiftenv import EnvParams, ShiftSpec, apply_shift, run_episode

P = dataclasses.replace(EnvParams(), horizon=60)


@pytest.fixture(scope="module")
def parts():
    planner = Planner(NominalModel.from_params(P), PlannerConfig(n_candidates=32), P)
    base = [run_episode(planner, P, s) for s in range(3)]
    enc = Encoder(fit_pca(featurize_window(windows(np.vstack([t.observations for t in base]))), 4))
    return planner, enc, base


def push(n_in, amount):
    return ExpertParams(np.zeros((1, n_in)), np.zeros(1), np.zeros(1), float(np.arctanh(amount / 0.5)), 0.5)


def test_all_id_routing_is_bit_identical(parts):
    planner, enc, base = parts
    far = ClusterSet({"ID": np.zeros(4), "m": np.full(4, 1e6)})
    agent = ExpertAgent(planner, enc, far, {"m": push(5, 0.3)})
    for t0 in base:
        t1 = run_episode(agent, P, t0.seed)
        assert all(r == "ID" for r in t1.routes)
        assert np.array_equal(t1.actions, t0.actions) and np.array_equal(t1.observations, t0.observations)
        assert t1.episode_return == t0.episode_return


def test_global_mode_changes_actions(parts):
    planner, enc, base = parts
    cs = ClusterSet({"ID": np.zeros(4), "m": np.ones(4)})
    agent = ExpertAgent(planner, enc, cs, {"m": push(5, 0.3)}, mode="global", designated="m")
    tr = run_episode(agent, P, base[0].seed)
    assert all(r == "m" for r in tr.routes)
    assert not np.array_equal(tr.actions, base[0].actions)


def test_latch_keeps_expert(parts):
    planner, enc, _ = parts
    cs = ClusterSet({"ID": np.zeros(4), "m": np.ones(4)})
    heavy = apply_shift(P, ShiftSpec("torso_mass", 5.0))
    agent = ExpertAgent(planner, enc, cs, {"m": push(5, 0.2)}, latch="cluster")
    tr = run_episode(agent, heavy, 7)
    if "m" in tr.routes:
        first = tr.routes.index("m")
        assert all(r == "m" for r in tr.routes[first:])
    # the latch resets between episodes
    again = run_episode(agent, heavy, 7)
    assert again.routes == tr.routes


def test_reject_latch_never_returns_to_id(parts):
    planner, enc, base = parts
    H = enc.embed_episode(base[0].observations)
    cs = ClusterSet({"ID": H[:20].mean(axis=0), "a": H[40], "b": H[55]})
    zero = ExpertParams(np.zeros((1, 5)), np.zeros(1), np.zeros(1), 0.0, 0.5)
    agent = ExpertAgent(planner, enc, cs, {"a": zero, "b": zero}, latch="reject")
    tr = run_episode(agent, P, base[0].seed)
    first = next(i for i, r in enumerate(tr.routes) if r != "ID")
    for t in range(first, len(tr.routes)):
        d = {k: np.linalg.norm(H[t] - cs.centroids[k]) for k in ("a", "b")}
        assert tr.routes[t] == min(d, key=d.get)
    assert "a" in tr.routes[first:] and "b" in tr.routes[first:]


def test_unknown_latch_rejected(parts):
    planner, enc, _ = parts
    with pytest.raises(ValueError):
        ExpertAgent(planner, enc, ClusterSet({"ID": np.zeros(4)}), {}, latch="sticky")


def test_random_gating_draws_only_gate_stream(parts):
    planner, enc, base = parts
    cs = ClusterSet({"ID": np.zeros(4), "a": np.ones(4), "b": -np.ones(4)})
    zero = ExpertParams(np.zeros((1, 5)), np.zeros(1), np.zeros(1), 0.0, 0.5)
    agent = ExpertAgent(planner, enc, cs, {"a": zero, "b": zero}, mode="random")
    tr = run_episode(agent, P, base[1].seed)
    # zero corrections leave the trajectory untouched even though every step is routed
    assert set(tr.routes) == {"a", "b"}
    assert np.array_equal(tr.actions, base[1].actions)
