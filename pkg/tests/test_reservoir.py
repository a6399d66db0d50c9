import copy
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservoirbench import bench
from reservoirbench.reservoir import (
    MCI,
    CycleJumps,
    Deep,
    DenseSparse,
    EchoStateReservoir,
    Parallel,
    ReservoirConfig,
    ReservoirError,
    SimpleCycle,
    SmallWorld,
    build_reservoir,
    build_weights,
    config_from_dict,
    config_to_dict,
    gershgorin_bound,
    intrinsic_plasticity,
    run,
    scale_spectral_radius,
    spectral_norm,
    spectral_radius,
    step,
    verify_esp,
)


def bare(n=2, n_inputs=1, leak=1.0):
    """Reservoir with every weight family zeroed, for hand-set instances."""
    res = copy.copy(EchoStateReservoir(ReservoirConfig(SimpleCycle(n), leak=leak), n_inputs))
    res.W = np.zeros((n, n))
    res.W_in = np.zeros((n, n_inputs))
    res.bias = np.zeros(n)
    return res


# --- construction -----------------------------------------------------------


def test_simple_cycle_pattern():
    W, meta = build_weights(SimpleCycle(4, 0.8))
    expected = np.zeros((4, 4))
    for i in range(4):
        expected[i, (i + 1) % 4] = 0.8
    assert np.array_equal(W, expected)
    assert meta["closed_form_radius"] == 0.8
    assert np.max(np.abs(np.linalg.eigvals(W))) == pytest.approx(0.8)


def test_cycle_jumps_nonzero_count():
    W, _ = build_weights(CycleJumps(300, 0.8, 0.8, 15))
    assert np.count_nonzero(W) == 300 + 2 * (300 // 15)
    ring, _ = build_weights(SimpleCycle(300, 0.8))
    chords = W - ring
    assert np.array_equal(chords, chords.T)
    rows = np.flatnonzero(chords.any(axis=1))
    assert set(rows) == set(range(0, 300, 15)) | {i + 15 for i in range(0, 300, 15) if i + 15 < 300}


def test_mci_structure():
    W, _ = build_weights(MCI(300))
    assert np.count_nonzero(W) == 2 * 300 + 2
    decoupled = W.copy()
    decoupled[0, 300] = decoupled[300, 0] = 0.0
    ring, _ = build_weights(SimpleCycle(300, 0.8))
    assert np.array_equal(decoupled[:300, :300], ring)
    assert np.array_equal(decoupled[300:, 300:], ring)
    assert not decoupled[:300, 300:].any() and not decoupled[300:, :300].any()


def test_mci_input_balance():
    res = EchoStateReservoir(ReservoirConfig(MCI(10, input_balance=0.5), seed=4), 2)
    assert np.allclose(res.W_in[10:], 0.5 * res.W_in[:10])


@pytest.mark.parametrize("p", [0.0, 0.1, 0.5])
def test_small_world_degree_preserved(p):
    W, _ = build_weights(SmallWorld(100, 6, p), seed=2)
    adj = W != 0
    assert np.array_equal(adj, adj.T)
    assert np.count_nonzero(adj) == 100 * 6
    assert not np.any(np.diag(adj))
    if p == 0.0:
        lattice = sum(np.roll(np.eye(100, dtype=bool), k, axis=1) for k in (1, 2, 3, -1, -2, -3))
        assert np.array_equal(adj, lattice.astype(bool))


def test_dense_sparse_density():
    W, _ = build_weights(DenseSparse(400, 0.05), seed=1)
    assert abs(np.count_nonzero(W) / W.size - 0.05) < 0.005
    assert np.all(np.abs(W) <= 1)


@pytest.mark.parametrize(
    "bad",
    [
        lambda: CycleJumps(10, jump_size=10),
        lambda: CycleJumps(10, jump_size=1),
        lambda: SmallWorld(10, degree=5),
        lambda: SmallWorld(10, degree=10),
        lambda: SmallWorld(10, rewire_prob=1.5),
        lambda: DenseSparse(1),
        lambda: DenseSparse(10, connectivity=0.0),
        lambda: ReservoirConfig(DenseSparse(10), leak=0.0),
        lambda: ReservoirConfig(DenseSparse(10), spectral_radius=0.0),
    ],
)
def test_infeasible_specs_rejected(bad):
    with pytest.raises(ValueError):
        bad()


def test_parallel_requires_matching_groups():
    member = ReservoirConfig(DenseSparse(10))
    cfg = ReservoirConfig(Parallel((member, member), group_size=1))
    with pytest.raises(ValueError):
        build_reservoir(cfg, 3)


def test_seed_determinism_and_golden_values():
    cfg = ReservoirConfig(DenseSparse(30, 0.2), seed=12345)
    a = EchoStateReservoir(cfg, 2)
    b = EchoStateReservoir(cfg, 2)
    for name in ("W", "W_in", "bias"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    # counter-based generator output is platform independent
    raw, _ = build_weights(DenseSparse(30, 0.2), 12345)
    digest = hashlib.sha256(np.ascontiguousarray(raw).tobytes()).hexdigest()[:16]
    assert digest == "9e92458ff60ed8bd"


def test_seed_changes_weights():
    a = EchoStateReservoir(ReservoirConfig(DenseSparse(30, 0.2), seed=1), 1)
    b = EchoStateReservoir(ReservoirConfig(DenseSparse(30, 0.2), seed=2), 1)
    assert not np.array_equal(a.W, b.W)


def test_substreams_independent_of_topology_draws():
    # the input stream does not depend on how many recurrent draws a topology made
    a = EchoStateReservoir(ReservoirConfig(DenseSparse(20, 0.1), seed=7), 1)
    b = EchoStateReservoir(ReservoirConfig(DenseSparse(20, 0.9), seed=7), 1)
    assert np.array_equal(a.W_in, b.W_in) and np.array_equal(a.bias, b.bias)


def test_config_dict_roundtrip_and_unknown_keys():
    doc = bench.preset_reservoir("deep_ia", 20)
    cfg = config_from_dict(doc)
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ValueError):
        config_from_dict({**doc, "spectral_radious": 0.9})
    bad = copy.deepcopy(doc)
    bad["topology"]["layers"][0]["topology"]["conectivity"] = 0.1
    with pytest.raises(ValueError):
        config_from_dict(bad)


# --- spectral tools ---------------------------------------------------------


def test_scale_identity():
    W, info = scale_spectral_radius(np.eye(5), 0.5)
    assert np.allclose(W, 0.5 * np.eye(5))
    assert np.allclose(np.linalg.eigvals(W), 0.5)


def test_scale_ring_closed_form():
    res = EchoStateReservoir(ReservoirConfig(SimpleCycle(4, 0.8), spectral_radius=0.95), 1)
    assert np.allclose(res.W[np.arange(4), (np.arange(4) + 1) % 4], 0.95)


@pytest.mark.parametrize("seed", range(10))
def test_scale_dense_against_eigensolver(seed):
    W = np.random.default_rng(seed).uniform(-1, 1, (50, 50))
    S, _ = scale_spectral_radius(W, 0.95)
    assert np.max(np.abs(np.linalg.eigvals(S))) == pytest.approx(0.95, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_radius_sparse_against_eigensolver(seed):
    W, _ = build_weights(DenseSparse(300, 0.05), seed)
    assert spectral_radius(W) == pytest.approx(np.max(np.abs(np.linalg.eigvals(W))), rel=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_scaling_idempotent(seed):
    W, _ = build_weights(DenseSparse(100, 0.1), seed)
    S1, _ = scale_spectral_radius(W, 0.9)
    S2, _ = scale_spectral_radius(S1, 0.9)
    assert np.max(np.abs(S2 - S1)) < 1e-9


def test_scale_rejects_zero():
    with pytest.raises(ValueError):
        scale_spectral_radius(np.zeros((3, 3)), 0.9)


def test_spectral_norm_matches_svd():
    W = np.random.default_rng(3).normal(size=(40, 40))
    assert spectral_norm(W) == pytest.approx(np.linalg.norm(W, 2), rel=1e-8)


def test_gershgorin_examples():
    assert gershgorin_bound(np.diag([0.3, -0.7])) == pytest.approx(0.7)
    W, _ = build_weights(SimpleCycle(10, 0.8))
    assert gershgorin_bound(W) == pytest.approx(0.8)


@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
@settings(max_examples=100, deadline=None)
def test_gershgorin_bounds_power_iteration(seed, n):
    W = np.random.default_rng(seed).normal(size=(n, n))
    assert gershgorin_bound(W) >= spectral_radius(W) * (1 - 1e-9)


# --- state updates ----------------------------------------------------------


def test_step_zero_weights():
    res = bare(3)
    assert np.array_equal(res.step(np.array([0.4, -0.2, 0.9]), [0.5]), np.zeros(3))


def test_step_pure_leak():
    res = bare(3, leak=0.3)
    s = np.array([0.4, -0.2, 0.9])
    assert np.allclose(res.step(s, [0.5]), 0.7 * s)


def test_step_hand_instance():
    res = bare(2)
    res.W = np.array([[0.0, 0.5], [0.5, 0.0]])
    res.W_in = np.array([[1.0], [0.0]])
    assert np.allclose(res.step(np.zeros(2), [0.2]), [np.tanh(0.2), 0.0])


def test_step_feedback_and_param_channel():
    cfg = ReservoirConfig(DenseSparse(8, 0.5), feedback=True, param_channel=(0.3, -1.0), seed=2)
    res = build_reservoir(cfg, 1, 1)
    x = np.full(8, 0.1)
    expected = 0.2 * x + 0.8 * np.tanh(res.W_in @ [0.5] + res.W @ x + res.bias + res.W_back @ [0.25] + res.param_drive)
    assert np.allclose(step(res, x, [0.5], [0.25]), expected)
    with pytest.raises(ReservoirError):
        res.step(x, [0.5])
    plain = build_reservoir(ReservoirConfig(DenseSparse(8, 0.5), seed=2), 1)
    with pytest.raises(ReservoirError):
        plain.step(x, [0.5], [0.1])


def test_run_with_teacher_matches_step():
    cfg = ReservoirConfig(DenseSparse(8, 0.5), feedback=True, seed=2)
    res = build_reservoir(cfg, 1, 1)
    u = np.random.default_rng(0).normal(size=(20, 1))
    y = np.random.default_rng(1).normal(size=(20, 1))
    states = res.run(u, 0, teacher=y).states
    x = np.zeros(8)
    prev = np.zeros(1)
    for t in range(20):
        x = res.step(x, u[t], prev)
        prev = y[t]
        assert np.allclose(states[t], x)


def test_step_dimension_mismatch():
    res = build_reservoir(ReservoirConfig(DenseSparse(8, 0.5)), 2)
    with pytest.raises(ReservoirError):
        res.step(np.zeros(8), [1.0])
    with pytest.raises(ReservoirError):
        res.step(np.zeros(7), [1.0, 2.0])


def test_run_matches_repeated_step():
    res = build_reservoir(ReservoirConfig(DenseSparse(20, 0.2), seed=5), 2)
    u = np.random.default_rng(0).normal(size=(30, 2))
    states = res.run(u).states
    x = np.zeros(20)
    for t in range(30):
        x = res.step(x, u[t])
    assert np.allclose(states[-1], x, atol=1e-14)


def test_run_warmup_boundary_and_alignment():
    res = build_reservoir(ReservoirConfig(DenseSparse(20, 0.2), seed=5), 1)
    u = np.random.default_rng(0).normal(size=(50, 1))
    assert res.run(u, 49).states.shape == (1, 20)
    full = res.run(u).states
    assert np.array_equal(res.run(u, 10).states, full[10:])
    with pytest.raises(ValueError):
        res.run(u, 50)


def test_run_lorenz_protocol_rows():
    data = bench.DatasetCache().get(bench.ExperimentConfig(bench.preset_experiment("lorenz"))).data
    res = build_reservoir(config_from_dict(bench.preset_reservoir("vanilla", 50)), 3)
    assert res.run(data[:4500], 100).states.shape == (4400, 50)


def test_run_forgets_initial_state():
    cfg = ReservoirConfig(DenseSparse(50, 0.2), spectral_radius=0.8, leak=1.0, seed=3)
    u = np.random.default_rng(0).uniform(-1, 1, (200, 1))
    x0 = np.random.default_rng(1).uniform(-1, 1, 50)
    a = run(cfg, u, 100).states
    b = run(cfg, u, 100, x0=x0).states
    assert np.max(np.abs(a - b)) < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_aborts():
    res = bare(2, leak=1.0)
    res.config = ReservoirConfig(SimpleCycle(2), activation="identity")
    res.W = np.array([[0.0, 1e200], [1e200, 0.0]])
    with pytest.raises(ReservoirError):
        res.run(np.ones((10, 1)), 0, x0=np.ones(2))


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_tanh_states_in_open_interval(seed):
    cfg = ReservoirConfig(DenseSparse(20, 0.3), input_scaling=1.0, seed=seed)
    u = np.random.default_rng(seed).normal(size=(100, 2))
    states = run(cfg, u).states
    assert np.all(np.abs(states) < 1)


def test_deep_single_layer_equals_vanilla():
    layer = ReservoirConfig(DenseSparse(30, 0.2), seed=9)
    deep = build_reservoir(ReservoirConfig(Deep((layer,), "stacked")), 3)
    u = np.random.default_rng(0).normal(size=(80, 3))
    assert deep.run(u, 5).states.tobytes() == build_reservoir(layer, 3).run(u, 5).states.tobytes()


def test_parallel_single_member_equals_member():
    member = ReservoirConfig(DenseSparse(30, 0.2), seed=9)
    par = build_reservoir(ReservoirConfig(Parallel((member,), group_size=2, buffer=0)), 2)
    u = np.random.default_rng(0).normal(size=(80, 2))
    assert par.run(u, 5).states.tobytes() == build_reservoir(member, 2).run(u, 5).states.tobytes()


def test_parallel_buffered_slices_wrap():
    member = ReservoirConfig(DenseSparse(5, 0.5))
    par = build_reservoir(ReservoirConfig(Parallel((member,) * 3, group_size=1, buffer=1)), 3)
    assert [s.tolist() for s in par.slices] == [[2, 0, 1], [0, 1, 2], [1, 2, 0]]


@pytest.mark.parametrize("mode", ["stacked", "input_to_all", "grouped"])
def test_deep_step_matches_run(mode):
    layers = tuple(ReservoirConfig(DenseSparse(10, 0.3), seed=s) for s in range(3))
    res = build_reservoir(ReservoirConfig(Deep(layers, mode)), 2)
    u = np.random.default_rng(0).normal(size=(15, 2))
    x = np.zeros(res.n_states)
    for t in range(15):
        x = res.step(x, u[t])
    assert np.allclose(res.run(u).states[-1], x, atol=1e-14)


def test_deep_layer_inputs():
    layers = tuple(ReservoirConfig(DenseSparse(10, 0.3), seed=s) for s in range(2))
    dims = {m: [l.n_inputs for l in build_reservoir(ReservoirConfig(Deep(layers, m)), 3).layers] for m in ("stacked", "input_to_all", "grouped")}
    assert dims == {"stacked": [3, 10], "input_to_all": [3, 13], "grouped": [3, 3]}


def test_reseeded_composites_get_distinct_members():
    cfg = config_from_dict(bench.preset_reservoir("parallel", 10))
    new = cfg.reseeded(3)
    seeds = [m.seed for m in new.topology.members]
    assert len(set(seeds)) == 3 and new.seed == 3
    assert new.reseeded(3) == cfg.reseeded(3).reseeded(3)


# --- echo state property ------------------------------------------------------


def test_esp_small_radius_decays_fast():
    cfg = ReservoirConfig(SimpleCycle(50), spectral_radius=0.5, leak=1.0, seed=1)
    u = np.random.default_rng(0).uniform(-1, 1, (100, 1))
    rep = verify_esp(cfg, u, 10)
    assert rep.converged
    assert rep.decay_rate <= np.log(0.5) + 0.05


def test_esp_preset_defaults_converge():
    cfg = config_from_dict(bench.preset_reservoir("vanilla", 100))
    u = np.random.default_rng(0).uniform(-1, 1, (300, 3))
    rep = verify_esp(cfg, u, 20)
    assert rep.converged and rep.decay_rate < 0
    assert rep.max_excess <= 1e-12


def test_esp_large_radius_reports_slopes():
    cfg = ReservoirConfig(DenseSparse(50, 0.2), spectral_radius=1.4, input_scaling=2.0, seed=2)
    u = np.random.default_rng(0).uniform(-1, 1, (300, 1))
    rep = verify_esp(cfg, u, 6)
    assert rep.slopes.shape == (6,)
    assert rep.converged == bool(np.all(rep.slopes < 0))


def test_esp_contraction_when_norm_below_one():
    # symmetric W has norm equal to spectral radius, so r < 1 bounds every step
    A = np.random.default_rng(0).normal(size=(30, 30))
    res = bare(30, leak=1.0)
    res.W, _ = scale_spectral_radius(A + A.T, 0.9)
    res.W_in = np.random.default_rng(1).uniform(-1, 1, (30, 1))
    u = np.random.default_rng(2).uniform(-1, 1, (200, 1))
    rep = verify_esp(res, u, 20)
    assert rep.contraction_factor == pytest.approx(0.9, rel=1e-8)
    assert rep.max_excess <= 1e-12 and rep.converged


def test_esp_needs_two_trials():
    with pytest.raises(ValueError):
        verify_esp(ReservoirConfig(SimpleCycle(5)), np.zeros((10, 1)), 1)


# --- intrinsic plasticity ---------------------------------------------------


def test_ip_zero_rate_is_identity():
    cfg = ReservoirConfig(DenseSparse(20, 0.2), seed=1)
    u = np.random.default_rng(0).uniform(-1, 1, (200, 1))
    out = intrinsic_plasticity(cfg, u, eta=0.0)
    assert np.array_equal(out.gain, np.ones(20)) and np.array_equal(out.bias, np.zeros(20))


def test_ip_stationary_when_matched():
    cfg = ReservoirConfig(DenseSparse(50, 0.2), input_scaling=0.5, seed=1)
    u = np.random.default_rng(0).uniform(-1, 1, (1000, 1))
    r = intrinsic_plasticity(cfg, u, 1e-3, 0.0, 0.2, 20)
    r = intrinsic_plasticity(cfg, u, 1e-4, 0.0, 0.2, 50, r.gain, r.bias)
    r = intrinsic_plasticity(cfg, u, 1e-5, 0.0, 0.2, 50, r.gain, r.bias)
    assert np.max(np.abs(r.mean)) < 0.01 and np.max(np.abs(r.std - 0.2)) < 0.01
    again = intrinsic_plasticity(cfg, u, 1e-5, 0.0, 0.2, 1, r.gain, r.bias)
    drift = max(np.max(np.abs(again.gain - r.gain)), np.max(np.abs(again.bias - r.bias)))
    fresh = intrinsic_plasticity(cfg, u, 1e-5, 0.0, 0.2, 1)
    fresh_drift = max(np.max(np.abs(fresh.gain - 1)), np.max(np.abs(fresh.bias)))
    assert drift < 1e-3 and drift < 0.1 * fresh_drift


def test_ip_desaturates():
    cfg = ReservoirConfig(DenseSparse(50, 0.2), input_scaling=2.0, seed=1)
    u = np.random.default_rng(0).uniform(-1, 1, (1000, 1))
    res = build_reservoir(cfg, 1)
    before = np.mean(np.abs(res.run(u).states), axis=0)
    r = intrinsic_plasticity(cfg, u, 1e-3, 0.0, 0.2, 10)
    after = np.mean(np.abs(res.with_plasticity(r.gain, r.bias).run(u).states), axis=0)
    assert np.mean(after < before) >= 0.8


def test_ip_rejects_composites():
    cfg = config_from_dict(bench.preset_reservoir("parallel", 10))
    with pytest.raises(TypeError):
        intrinsic_plasticity(cfg, np.zeros((10, 3)))
