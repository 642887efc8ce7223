import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsf.controllers import make_policy, zero_input_policy
from cpsf.exceptions import InvalidInputError
from cpsf.filter import (
    FilterDataset,
    FilteredController,
    FilterTrainingRecord,
    InfiniteRadiusFallbackWarning,
    SafetyFilter,
    build_sftrain,
    filter_loss,
    filtered_step,
    loss_terms,
    nominal_rollout,
    rollout_states,
    run_filtered_episode,
)
from cpsf.learncore import Tensor, forward_mlp, init_mlp, fit_minibatch, max_relative_error
from cpsf.predictor import ConstantVelocityPredictor
from cpsf.world import ControlInput, ScenarioConfig, SystemState, VehicleParams, clamp_input

VP = VehicleParams()
DT = 0.1
AGGRESSIVE = make_policy("aggressive", ScenarioConfig())


def hand_step(x, y, th, v, a, s):
    return (x + v * math.cos(th) * DT, y + v * math.sin(th) * DT,
            th + v * math.tan(s) * DT / VP.wheelbase, min(max(v + a * DT, 0.0), VP.v_max))


# -- nominal rollout ---------------------------------------------------------


def test_single_step_rollout():
    state = SystemState(0.0, 0.0, 0.3, 1.0)
    hist = np.array([[[3.0, 3.0]], [[3.0, 2.9]]])
    x, u = nominal_rollout(state, hist, np.zeros((1, 1, 2)) + 3.0, AGGRESSIVE, goal=np.array([4.0, 1.0]), H=1)
    u0 = clamp_input(AGGRESSIVE(state, hist[-1], (hist[-1] - hist[-2]) / DT, np.array([4.0, 1.0])))
    assert np.array_equal(u[0], u0.as_array())
    assert np.allclose(x[0], hand_step(0.0, 0.0, 0.3, 1.0, *u[0]), atol=1e-15)


def test_zero_input_rollout_is_coasting():
    state = SystemState(1.0, 2.0, 0.5, 1.5)
    x, u = nominal_rollout(state, np.zeros((2, 1, 2)), np.zeros((5, 1, 2)), zero_input_policy, goal=np.zeros(2))
    assert np.array_equal(u, np.zeros((5, 2)))
    ref = [1.0, 2.0, 0.5, 1.5]
    for h in range(5):
        ref = hand_step(*ref, 0.0, 0.0)
        assert np.allclose(x[h], ref, atol=1e-14)


def test_three_step_rollout_matches_hand_unrolling():
    rng = np.random.default_rng(11)
    state = SystemState(*rng.uniform(-1, 1, 2), rng.uniform(-3, 3), rng.uniform(0, 2))
    goal = rng.uniform(-5, 5, 2)
    hist = rng.uniform(-5, 5, (2, 2, 2))
    preds = rng.uniform(-5, 5, (3, 2, 2))
    x, u = nominal_rollout(state, hist, preds, AGGRESSIVE, goal=goal, H=3)
    # policy inputs: true snapshot first, then predicted snapshots with finite-difference velocities
    s0 = state
    u0 = clamp_input(AGGRESSIVE(s0, hist[1], (hist[1] - hist[0]) / DT, goal))
    x1 = SystemState(*hand_step(s0.pos_x, s0.pos_y, s0.heading, s0.speed, u0.accel, u0.steer))
    u1 = clamp_input(AGGRESSIVE(x1, preds[0], (preds[0] - hist[1]) / DT, goal))
    x2 = SystemState(*hand_step(x1.pos_x, x1.pos_y, x1.heading, x1.speed, u1.accel, u1.steer))
    u2 = clamp_input(AGGRESSIVE(x2, preds[1], (preds[1] - preds[0]) / DT, goal))
    x3 = hand_step(x2.pos_x, x2.pos_y, x2.heading, x2.speed, u2.accel, u2.steer)
    assert np.allclose(u, [u0.as_array(), u1.as_array(), u2.as_array()], atol=1e-12)
    assert np.allclose(x[2, [0, 1, 3]], np.array(x3)[[0, 1, 3]], atol=1e-12)
    assert math.isclose(math.cos(x[2, 2]), math.cos(x3[2]), abs_tol=1e-12)


# -- records -----------------------------------------------------------------


def test_one_record_per_episode(small_config, small_predictor, small_data):
    train = small_data[1]
    ds = build_sftrain(train, small_predictor, AGGRESSIVE, np.full(7, 0.3), 8, small_config)
    # episodes whose ego arrives or collides before the cut yield no record
    assert 0.8 * len(train) <= len(ds) <= len(train)
    assert ds.predictions.shape[1:] == (7, 2, 2) and np.all(ds.t == 8)


def test_empty_training_set():
    ds = build_sftrain([], None, AGGRESSIVE, np.ones(7))
    assert len(ds) == 0


def test_records_are_byte_identical(tmp_path, small_config, small_predictor, small_data):
    for name in ("a", "b"):
        build_sftrain(small_data[1][:10], small_predictor, AGGRESSIVE, np.full(7, 0.3), 8, small_config,
                      cut_stride=3).to_jsonl(tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = FilterDataset.from_jsonl(tmp_path / "a.jsonl")
    assert np.array_equal(back.x_nom, FilterDataset.from_jsonl(tmp_path / "b.jsonl").x_nom)


def test_infinite_radii_refused(small_predictor, small_data):
    with pytest.raises(InvalidInputError, match="infinite"):
        build_sftrain(small_data[1][:2], small_predictor, AGGRESSIVE, np.full(7, np.inf))


# -- loss --------------------------------------------------------------------


def make_record(agent_xy, C=0.3, H=3, u=(0.5, 0.1), speed=1.0):
    state = np.array([0.0, 0.0, 0.0, speed])
    u_nom = np.tile(u, (H, 1))
    x_nom = rollout_states(state, u_nom)
    pred = np.repeat(np.asarray(agent_xy, float)[None], H, axis=0)
    return FilterTrainingRecord(pred, u_nom, x_nom, np.full(H, C), state, pred[0].copy())


def test_feasible_imitation_has_zero_loss():
    rec = make_record([[10.0, 10.0]])
    assert filter_loss(rec.u_nom, rec, penalty=100.0, margin=1.0) == 0.0


def test_single_hinge_hand_value():
    # zero inputs from rest: the ego stays at the origin, so imitation is exactly zero
    C, eps, lam = 0.3, 1.0, 7.0
    rec = make_record([[C + eps - 0.1, 0.0]], C=C, H=1, u=(0.0, 0.0), speed=0.0)
    assert filter_loss(rec.u_nom, rec, penalty=lam, margin=eps) == pytest.approx(lam * 0.01, rel=1e-12)


def test_zero_penalty_is_pure_imitation():
    rec = make_record([[0.5, 0.0]])
    u = rec.u_nom + 0.2
    x_hat = rollout_states(rec.state, u)
    assert filter_loss(u, rec, penalty=0.0, margin=1.0) == pytest.approx(np.sum((rec.x_nom - x_hat) ** 2), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(-0.6, 0.6), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.0, 1.0))
def test_loss_zero_iff_residual_zero_and_hinges_inactive(da, ds, ax, ay, C):
    rec = make_record([[ax, ay]], C=C)
    u = np.clip(rec.u_nom + [da, ds], [-2, -0.6], [2, 0.6])
    x_hat = rollout_states(rec.state, u)
    imitation = np.sum((rec.x_nom - x_hat) ** 2)
    clear = np.linalg.norm(x_hat[:, None, :2] - rec.predictions, axis=-1)
    active = np.any(clear < C + 1.0)
    loss = filter_loss(u, rec, penalty=3.0, margin=1.0)
    assert (loss == 0.0) == (imitation == 0.0 and not active)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_gradient_through_rollout(seed):
    rng = np.random.default_rng(seed)
    B, H, m = 2, 3, 2
    x0 = np.column_stack([np.zeros((B, 3)), rng.uniform(0.3, 1.5, B)])
    x_nom = rng.normal(scale=0.3, size=(B, H, 4))
    pred = rng.uniform(-1.0, 1.0, (B, H, m, 2))
    radii = np.full((B, H), 0.5)
    feats = rng.normal(size=(B, 4))
    params = init_mlp([4, 5, 2 * H], rng)

    def loss():
        u = forward_mlp(params, feats).reshape(B, H, 2) * 0.3
        imitation, hinge = loss_terms(u, x0, x_nom, pred, radii, 1.0, DT, VP)
        return (imitation + hinge * 10.0).sum()

    from cpsf.learncore import gradient_check

    # step 1e-4: with losses of order 100, a 1e-5 step leaves round-off of
    # about 1e-9 on entries whose gradient is itself of order 1e-6
    assert gradient_check(loss, params, h=1e-4) < 1e-4


# -- training ----------------------------------------------------------------


def synthetic_records(n, seed, far=False):
    """Ego at the origin heading +x, goal ahead; one agent near the nominal path."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        v = rng.uniform(0.5, 1.5)
        state = SystemState(0.0, 0.0, 0.0, v)
        goal = np.array([4.0, rng.uniform(-0.5, 0.5)])
        if far:
            agent = np.array([rng.uniform(-8, 8), rng.choice([-1, 1]) * rng.uniform(6, 8)])
        else:
            agent = np.array([rng.uniform(1.0, 2.0), rng.uniform(-0.6, 0.6)])
        hist = np.repeat(np.array([[agent, [-8.0, 8.0]]]), 2, axis=0)
        preds = np.repeat(hist[-1:], 7, axis=0)
        x_nom, u_nom = nominal_rollout(state, hist, preds, AGGRESSIVE, goal=goal)
        recs.append(FilterTrainingRecord(preds, u_nom, x_nom, np.full(7, 0.2), state.as_array(),
                                         hist[-1].copy(), seed=i, t=1))
    return FilterDataset.from_records(recs)


def small_filter(**kw):
    base = dict(num_agents=2, horizon=7, hidden=32, layers=2, epochs=10, batch_size=32, lr=3e-3,
                random_state=0)
    base.update(kw)
    return SafetyFilter(**base)


def test_fit_is_reproducible():
    ds = synthetic_records(60, 1)
    a = small_filter(epochs=2).fit(ds)
    b = small_filter(epochs=2).fit(ds)
    assert all(np.array_equal(a.params_[n].data, b.params_[n].data) for n in a.params_.names())


def test_zero_penalty_matches_direct_regression_baseline():
    ds = synthetic_records(200, 2)
    val = synthetic_records(40, 3)
    f = small_filter(penalty=0.0, epochs=5).fit(ds)
    # baseline: the same network regressing the nominal inputs directly
    flt = small_filter()
    flt.init_params()
    prep_tr, prep_va = flt._prepare(ds), flt._prepare(val)
    feats = flt._features(prep_tr)
    rng = np.random.default_rng(0)

    def batch_loss(idx):
        u = flt._controls(feats[idx], prep_tr["u_nom"][idx])
        return (u - Tensor(prep_tr["u_nom"][idx])).square().sum() * (1.0 / len(idx))

    flt.params_ = fit_minibatch(flt.params_, batch_loss, len(ds), epochs=5, batch_size=32, lr=3e-3, rng=rng).params
    base = flt._metrics(prep_va)["imitation"]
    ours = f.evaluate(val)["imitation"]
    # both sit at round-off scale here; 1e-4 m^2 is far below plan-scale errors
    assert ours <= 1.1 * base + 1e-4


def test_feasible_dataset_has_small_hinge():
    ds = synthetic_records(100, 4, far=True)
    f = small_filter(epochs=3).fit(ds)
    assert f.val_metrics_["hinge"] < 1e-3 and f.final_penalty_ == 10.0


def test_large_penalty_pushes_clearance_to_the_margin():
    # slow ego, agent 1.7 m ahead just off the path: braking alone can keep C + margin
    state = SystemState(0.0, 0.0, 0.0, 0.6)
    hist = np.array([[[1.7, 0.2], [-8.0, 8.0]]] * 2)
    preds = np.repeat(hist[-1:], 7, axis=0)
    x_nom, u_nom = nominal_rollout(state, hist, preds, AGGRESSIVE, goal=np.array([4.0, 0.0]))
    rec = FilterTrainingRecord(preds, u_nom, x_nom, np.full(7, 0.2), state.as_array(), hist[-1].copy())
    assert np.linalg.norm(x_nom[:, :2] - preds[:, 0], axis=1).min() < 1.2
    ds = FilterDataset.from_records([rec] * 32)
    f = small_filter(penalty=1e4, penalty_growth=1.0, max_penalty=1e4, epochs=400, val_fraction=0.0, lr=1e-2,
                     speed_clip_leak=0.0).fit(ds)
    u = f.predict(rec)
    x_hat = rollout_states(rec.state, u)
    clearance = np.linalg.norm(x_hat[:, None, :2] - rec.predictions, axis=-1)
    assert clearance.min() >= rec.radii[0] + f.margin - 1e-2


def test_penalty_homotopy_doubles_until_capped():
    ds = synthetic_records(60, 6)
    f = small_filter(epochs=12, penalty_every=3, max_penalty=40.0, target_violation_rate=0.0).fit(ds)
    assert [p for p, _ in f.penalty_schedule_] == [10.0, 20.0, 40.0, 40.0]


def test_save_load_round_trip(tmp_path):
    ds = synthetic_records(30, 7)
    f = small_filter(epochs=1).fit(ds)
    f.save(tmp_path / "f.json")
    g = SafetyFilter.load(tmp_path / "f.json")
    assert np.array_equal(f.predict_controls(ds), g.predict_controls(ds))
    assert g.get_params() == f.get_params()


@pytest.fixture(scope="module")
def trained_filter():
    return small_filter(epochs=20, penalty_every=5, max_penalty=160.0).fit(synthetic_records(400, 8))


def test_filtered_plan_increases_clearance(trained_filter):
    test = synthetic_records(50, 9)
    u = trained_filter.predict_controls(test)
    better = 0
    for i in range(len(test)):
        rec = test[i]
        x_hat = rollout_states(rec.state, u[i])
        c_f = np.linalg.norm(x_hat[:, None, :2] - rec.predictions, axis=-1).min()
        c_n = np.linalg.norm(rec.x_nom[:, None, :2] - rec.predictions, axis=-1).min()
        blocking = c_n < rec.radii[0] + 1.0
        better += int(c_f > c_n) if blocking else 0
        if blocking:
            assert c_f > c_n
    assert better > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_filtered_input_always_in_bounds(trained_filter, seed):
    rng = np.random.default_rng(seed)
    state = SystemState(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3), rng.uniform(0, 2))
    hist = rng.uniform(-4, 4, (3, 2, 2))
    u = filtered_step(state, hist, ConstantVelocityPredictor(2).fit(), AGGRESSIVE, trained_filter,
                      np.full(7, rng.uniform(0, 3)), ScenarioConfig(num_agents=2), rng.uniform(-5, 5, 2))
    assert abs(u.accel) <= VP.a_max and abs(u.steer) <= VP.steer_max
    u2 = filtered_step(state, hist, ConstantVelocityPredictor(2).fit(), AGGRESSIVE, trained_filter,
                       np.full(7, rng.uniform(0, 3)), ScenarioConfig(num_agents=2), rng.uniform(-5, 5, 2))
    assert isinstance(u2, ControlInput)


def test_zero_penalty_filter_reproduces_nominal_far_from_agents():
    ds = synthetic_records(200, 10, far=True)
    f = small_filter(penalty=0.0, epochs=5).fit(ds)
    cfg = ScenarioConfig(num_agents=2)
    pred = ConstantVelocityPredictor(2).fit()
    rng = np.random.default_rng(12)
    for _ in range(20):
        state = SystemState(0.0, 0.0, 0.0, rng.uniform(0.5, 1.5))
        goal = np.array([4.0, rng.uniform(-0.5, 0.5)])
        hist = np.repeat(np.array([[[rng.uniform(-8, 8), 7.0], [-8.0, 8.0]]]), 2, axis=0)
        u_f = filtered_step(state, hist, pred, AGGRESSIVE, f, np.full(7, 0.2), cfg, goal)
        u_n = clamp_input(AGGRESSIVE(state, hist[-1], np.zeros((2, 2)), goal))
        assert np.max(np.abs(u_f.as_array() - u_n.as_array())) < 0.1


def test_infinite_radii_fall_back_to_nominal(trained_filter):
    cfg = ScenarioConfig(num_agents=2)
    ctl = FilteredController(ConstantVelocityPredictor(2).fit(), AGGRESSIVE, trained_filter,
                             np.full(7, np.inf), cfg, warmup=0)
    hist = np.array([[[1.0, 0.0], [-8.0, 8.0]]] * 2)
    state = SystemState(0.0, 0.0, 0.0, 1.0)
    with pytest.warns(InfiniteRadiusFallbackWarning):
        u = ctl(state, hist, np.array([4.0, 0.0]))
    assert u == clamp_input(AGGRESSIVE(state, hist[-1], np.zeros((2, 2)), np.array([4.0, 0.0])))


def test_episode_without_agents_reaches_goal():
    cfg = ScenarioConfig(num_agents=0, horizon_T=80)
    f = SafetyFilter(num_agents=0, horizon=7, hidden=8, layers=1).init_params()
    rec, m = run_filtered_episode(cfg, ConstantVelocityPredictor(0).fit(), AGGRESSIVE, f, np.full(7, 0.3), 3)
    assert m.reached and not m.failed


def test_filtered_episode_is_deterministic(trained_filter, small_config):
    pred = ConstantVelocityPredictor(2).fit()
    a = run_filtered_episode(small_config, pred, AGGRESSIVE, trained_filter, np.full(7, 0.2), 17)
    b = run_filtered_episode(small_config, pred, AGGRESSIVE, trained_filter, np.full(7, 0.2), 17)
    assert a[0].to_json() == b[0].to_json() and a[1] == b[1]


def test_sub_step_errors_are_labeled(trained_filter):
    cfg = ScenarioConfig(num_agents=2)
    ctl = FilteredController(ConstantVelocityPredictor(2).fit(), AGGRESSIVE, trained_filter, np.full(7, 0.2),
                             cfg, warmup=0)
    with pytest.raises(InvalidInputError, match=r"\[predict\]"):
        ctl(SystemState(0, 0, 0, 0), np.zeros((1, 2, 2)), np.zeros(2))
