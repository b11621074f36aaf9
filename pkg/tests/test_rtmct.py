import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionpred.geometry import CAR, CYCLIST, PEDESTRIAN
from fusionpred.rtmct import (
    AgentHistory,
    RtmctConfig,
    TrainSettings,
    collate,
    forward,
    generate_references,
    init_params,
    load_checkpoint,
    loss,
    loss_and_grad,
    predict,
    prepare,
    preprocess,
    save_checkpoint,
    small_config,
    train,
)
from fusionpred.rtmct.data import constant_velocity, generate_samples
from fusionpred.rtmct.model import audit_positive_index, decode, encode, positive_index, reciprocal, zero_heads
from fusionpred.rtmct.train import TrainingDiverged, class_balanced_weights

from oracles import (
    gradient_errors,
    hand_attention,
    hand_gelu,
    hand_layer_norm,
    random_rtmct_batch,
    random_rtmct_params,
)


# --- preprocessing -------------------------------------------------------------------

def test_preprocess_hand_example():
    cfg = small_config()
    el = prepare(AgentHistory(PEDESTRIAN, [(1, 1), (2, 2)]), [], cfg)
    assert el.observed[-1] == pytest.approx([0, 0], abs=1e-12)
    assert el.observed[0] == pytest.approx([np.sqrt(2), 0], abs=1e-12)
    assert np.array_equal(el.observed[0], el.observed[1]) and np.array_equal(el.observed[1], el.observed[2])
    world = el.transform.to_world(el.observed)
    assert world == pytest.approx(np.array([(1, 1), (1, 1), (1, 1), (2, 2)]), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31 - 1))
def test_canonical_frame_invariants(length, seed):
    rng = np.random.default_rng(seed)
    cfg = RtmctConfig()
    hist = AgentHistory(int(rng.integers(0, 3)), rng.uniform(-50, 50, 2) + np.cumsum(rng.normal(0, 1, (length, 2)), 0))
    el = prepare(hist, [], cfg)
    assert np.max(np.abs(el.observed[-1])) < 1e-9
    assert abs(el.observed[0, 1]) < 1e-9 and el.observed[0, 0] >= -1e-9
    assert el.transform.to_world(el.observed[-1:])[0] == pytest.approx(hist.positions[-1], abs=1e-9)


def test_neighbor_thresholds_and_sentinel():
    cfg = RtmctConfig()
    ped = AgentHistory(PEDESTRIAN, np.column_stack([np.arange(16) * 0.1, np.zeros(16)]))
    far = AgentHistory(PEDESTRIAN, ped.positions + [0, 10.0])
    near = AgentHistory(PEDESTRIAN, ped.positions + [0, 1.0])
    car_4m = AgentHistory(CAR, ped.positions + [0, 4.0])  # max(2, 5) = 5 m admits it
    robot_3m = AgentHistory(cfg.robot_class, ped.positions + [0, 3.0])  # max(2, 2): excluded
    partial = AgentHistory(CYCLIST, near.positions[-3:] + [0, 0.5], np.arange(-2, 1))
    el = prepare(ped, [far, near, car_4m, robot_3m, partial], cfg)
    assert el.neighbor_cls.tolist() == [PEDESTRIAN, CYCLIST, CAR]  # nearest first
    assert np.all(el.neighbors[1, :13] == cfg.sentinel) and np.all(el.neighbors[1, 13:] < 100)


def test_neighbor_cap_keeps_nearest():
    cfg = small_config(k_max=2)
    tgt = AgentHistory(PEDESTRIAN, np.zeros((4, 2)) + [[0, 0]])
    others = [AgentHistory(PEDESTRIAN, np.full((4, 2), d)) for d in (1.2, 0.3, 0.9)]
    el = prepare(tgt, others, cfg)
    assert el.neighbors[:, -1, 0].tolist() == [0.3, 0.9]


def test_stationary_history_identity_rotation():
    el = prepare(AgentHistory(CAR, np.full((16, 2), 7.0)), [], RtmctConfig())
    assert el.transform.theta == 0.0
    assert np.all(el.observed == 0)


def test_t_min_rejection_with_reason():
    cfg = RtmctConfig()
    items = [(AgentHistory(PEDESTRIAN, [(0, 0)]), []), (AgentHistory(PEDESTRIAN, [(0, 0), (1, 0)]), [])]
    batch, kept, rejected = preprocess(items, cfg)
    assert kept == [1] and len(batch) == 1
    assert rejected[0][0] == 0 and "at least 2" in rejected[0][1]


# --- references ----------------------------------------------------------------------

def test_reference_examples():
    cfg = RtmctConfig()
    refs = generate_references(cfg)
    assert refs.trajectories.shape == (3, 49, 24, 2)
    assert np.all(refs.trajectories[:, 0] == 0)  # stationary + stationary
    fast = 2 * cfg.num_modes + 2
    straight = generate_references(cfg, heading=0.0).trajectories[PEDESTRIAN, fast]
    assert straight[-1] == pytest.approx([4.8, 0.0], abs=1e-12)
    # default heading points away from the history, toward -X
    assert refs.trajectories[PEDESTRIAN, fast, -1] == pytest.approx([-4.8, 0.0], abs=1e-12)
    assert refs.trajectories[CAR, fast, -1] == pytest.approx([-19.2, 0.0], abs=1e-9)
    assert np.array_equal(refs.trajectories, generate_references(cfg).trajectories)
    jit = generate_references(cfg, seed=3, jitter=0.1).trajectories
    assert np.array_equal(jit, generate_references(cfg, seed=3, jitter=0.1).trajectories)


def test_reference_two_stage_split():
    cfg = RtmctConfig(t_pred=5)
    refs = generate_references(cfg, heading=0.0).trajectories[PEDESTRIAN]
    # stage 1 (3 steps) stationary, stage 2 (2 steps) at 2 m/s
    traj = refs[0 * cfg.num_modes + 2]
    assert traj[:3] == pytest.approx(np.zeros((3, 2)))
    assert traj[-1] == pytest.approx([0.4, 0.0])


# --- encode / decode / heads -----------------------------------------------------------

def test_encode_shapes_reciprocal_and_concat_sensitivity():
    cfg = RtmctConfig()
    assert reciprocal(np.array([1e6, -1e6, 0.0, 0.05]), cfg.reciprocal_floor) == pytest.approx([1e-6, -1e-6, 10.0, 10.0])
    batch = random_rtmct_batch(cfg, np.random.default_rng(0), size=3)
    p = init_params(cfg)
    ex, en, _ = encode(batch, p, cfg)
    assert ex.shape == (3, 49, 64) and en.shape == (3, cfg.k_max, 64)
    assert not np.allclose(ex[0, 1], ex[0, 2])
    bad = collate([prepare(AgentHistory(PEDESTRIAN, [(0, 0), (1, 0)]), [], cfg)], cfg)
    object.__setattr__(bad, "cls", np.array([7]))
    with pytest.raises(ValueError, match="class"):
        encode(bad, p, cfg)


def test_decode_without_neighbors_ignores_cross_attention():
    cfg = small_config()
    p = random_rtmct_params(cfg, 0)
    batch = random_rtmct_batch(cfg, np.random.default_rng(1))
    ex, en, _ = encode(batch, p, cfg)
    masked, _ = decode(ex, en, np.zeros_like(batch.neighbor_mask), p, cfg)
    empty, _ = decode(ex, en[:, :0], batch.neighbor_mask[:, :0], p, cfg)
    assert np.array_equal(masked, empty)


def test_decode_one_query_one_neighbor_hand_oracle():
    cfg = small_config(forward_speeds=(0.0,), num_modes=1, num_layers=1)
    p = random_rtmct_params(cfg, 2)
    rng = np.random.default_rng(3)
    ex = rng.normal(size=(1, 1, cfg.dim))
    en = rng.normal(size=(1, 1, cfg.dim))
    out, _ = decode(ex, en, np.ones((1, 1), bool), p, cfg)
    x = ex[0, 0]
    h = hand_layer_norm(x, p["layer0.ln1.g"], p["layer0.ln1.b"])
    x = x + hand_attention(h, [h], p, "layer0.self.", cfg.num_heads)
    h = hand_layer_norm(x, p["layer0.ln2.g"], p["layer0.ln2.b"])
    x = x + hand_attention(h, [en[0, 0]], p, "layer0.cross.", cfg.num_heads)
    h = hand_layer_norm(x, p["layer0.ln3.g"], p["layer0.ln3.b"])
    x = x + hand_gelu(h @ p["layer0.ffn1.w"] + p["layer0.ffn1.b"]) @ p["layer0.ffn2.w"] + p["layer0.ffn2.b"]
    assert np.max(np.abs(out[0, 0] - x)) < 1e-9


def test_zero_heads_return_references_with_uniform_scores():
    cfg = RtmctConfig()
    batch = random_rtmct_batch(cfg, np.random.default_rng(0), size=3)
    p = zero_heads(init_params(cfg), cfg)
    fwd = forward(batch, p, cfg)
    assert fwd.predictions.shape == (3, 49, 24, 2)
    for i in range(3):
        assert np.array_equal(fwd.predictions[i], p["refs"][batch.cls[i]])
    assert np.all(fwd.scores == 1 / 49)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_on_simplex(seed):
    cfg = small_config()
    batch = random_rtmct_batch(cfg, np.random.default_rng(seed))
    fwd = forward(batch, random_rtmct_params(cfg, seed % 7), cfg)
    assert np.all(fwd.scores >= 0)
    assert np.max(np.abs(fwd.scores.sum(axis=1) - 1)) < 1e-9


# --- loss and gradients -----------------------------------------------------------------

def test_positive_index_examples_and_audit():
    cfg = RtmctConfig()
    p = init_params(cfg)
    fut = p["refs"][PEDESTRIAN, 3][None]
    assert positive_index(fut, np.array([PEDESTRIAN]), p)[0] == 3
    # references 0 and 1 tie: both stationary + slow and stationary + stationary differ, so build a tie by hand
    refs = np.zeros((1, 4, 3, 2))
    refs[0, 2] = 1.0
    q = {"refs": refs}
    assert positive_index(np.zeros((1, 3, 2)), np.array([0]), q)[0] == 0
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(0, 3))
        y = np.cumsum(rng.normal(0, 0.3, (24, 2)), 0) * (1 + 3 * (c == CAR))
        assert positive_index(y[None], np.array([c]), p)[0] == audit_positive_index(y, p["refs"][c])


def test_zero_loss_gives_zero_gradients():
    cfg = small_config(forward_speeds=(0.0,), num_modes=1)
    rng = np.random.default_rng(0)
    p = zero_heads(random_rtmct_params(cfg, 0), cfg)
    elements = []
    for c in range(3):
        hist = AgentHistory(c, np.cumsum(rng.normal(0, 0.5, (4, 2)), 0))
        el = prepare(hist, [AgentHistory(0, hist.positions + 0.5)], cfg)
        object.__setattr__(el, "future", p["refs"][c, 0].copy())
        elements.append(el)
    batch = collate(elements, cfg)
    value, grads, _, _ = loss_and_grad(batch, p, cfg)
    assert value == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_unused_class_heads_get_zero_gradient():
    cfg = small_config()
    rng = np.random.default_rng(1)
    batch = random_rtmct_batch(cfg, rng, size=6)
    keep = np.flatnonzero(batch.cls == CAR)
    single = batch.subset(keep)
    _, grads, _, _ = loss_and_grad(single, random_rtmct_params(cfg, 1), cfg)
    for c in (PEDESTRIAN, CYCLIST):
        for name in (f"traj.{c}", f"score.{c}", f"phi.{c}"):
            assert np.all(grads[name + ".w"] == 0) and np.all(grads[name + ".b"] == 0)
        assert np.all(grads["refs"][c] == 0)
    assert np.any(grads["refs"][CAR] != 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_small_config_every_element(seed):
    cfg = small_config()
    batch = random_rtmct_batch(cfg, np.random.default_rng(seed))
    p = random_rtmct_params(cfg, seed)
    _, grads, _, _ = loss_and_grad(batch, p, cfg)
    errors = gradient_errors(batch, p, grads, cfg)
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


@pytest.mark.slow
def test_gradient_check_default_config_sampled():
    cfg = RtmctConfig()
    rng = np.random.default_rng(5)
    batch = random_rtmct_batch(cfg, rng, size=3)
    p = random_rtmct_params(cfg, 5)
    _, grads, _, _ = loss_and_grad(batch, p, cfg)
    errors = gradient_errors(batch, p, grads, cfg, samples=4, rng=rng)
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


# --- training -------------------------------------------------------------------------------

def small_training_set(cfg, count, seed):
    batch, _, _ = preprocess(generate_samples(count, cfg, seed=seed), cfg)
    return batch


def test_overfit_sixteen_samples():
    cfg = small_config(dim=32, num_heads=4, ffn_dim=64)
    data = small_training_set(cfg, 16, 0)
    res = train(data, init_params(cfg, seed=0), cfg, TrainSettings(lr=3e-3, steps=2000, batch_size=16,
                                                                   class_balanced=False))
    full_before = loss(forward(data, init_params(cfg, seed=0), cfg), data, init_params(cfg, seed=0), cfg)[0]
    full_after = loss(forward(data, res.params, cfg), data, res.params, cfg)[0]
    assert full_after < 0.05 * full_before


def test_training_deterministic_lr_zero_and_audit():
    cfg = small_config()
    data = small_training_set(cfg, 40, 1)
    s = TrainSettings(lr=1e-3, steps=30, batch_size=8, seed=4, audit=True)
    a = train(data, init_params(cfg), cfg, s)
    b = train(data, init_params(cfg), cfg, s)
    assert a.curve == b.curve and a.audited == 240
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    p0 = init_params(cfg)
    frozen = train(data, p0, cfg, TrainSettings(lr=0.0, steps=5, batch_size=8))
    assert all(np.array_equal(frozen.params[k], p0[k]) for k in p0)


def test_class_balanced_weights():
    cls = np.array([0, 0, 0, 1, 2, 2])
    w = class_balanced_weights(cls, 3)
    assert w.sum() == pytest.approx(1.0)
    assert [w[cls == c].sum() for c in range(3)] == pytest.approx([1 / 3] * 3)


def test_training_divergence_raises():
    cfg = small_config()
    data = small_training_set(cfg, 8, 2)
    p = init_params(cfg)
    p["traj.0.w"] = np.full_like(p["traj.0.w"], np.nan)
    p["traj.1.w"] = np.full_like(p["traj.1.w"], np.nan)
    p["traj.2.w"] = np.full_like(p["traj.2.w"], np.nan)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(data, p, cfg, TrainSettings(steps=3, batch_size=4))
    with pytest.raises(ValueError):
        train(data.subset(np.array([], dtype=int)), init_params(cfg), cfg)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_config()
    p = random_rtmct_params(cfg, 3)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p, cfg, {"steps": 3})
    back, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"steps": 3}
    assert sorted(back) == sorted(p)
    assert all(np.array_equal(back[k], p[k]) and back[k].shape == p[k].shape for k in p)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


# --- prediction ------------------------------------------------------------------------------

def rigid(theta, t):
    c, s = np.cos(theta), np.sin(theta)
    r = np.array([[c, -s], [s, c]])
    return lambda pts: np.asarray(pts) @ r.T + t


def test_predict_ranking_and_origin_round_trip():
    cfg = small_config()
    items = generate_samples(6, cfg, seed=3)
    batch, _, _ = preprocess(items, cfg)
    preds = predict(batch, random_rtmct_params(cfg, 0), cfg)
    for i, ps in enumerate(preds):
        assert ps.scores[0] == ps.scores.max() and np.all(np.diff(ps.scores) <= 0)
        assert batch.transform(i).to_world(np.zeros((1, 2)))[0] == pytest.approx(items[i][0].positions[-1], abs=1e-9)


def test_prediction_equivariance():
    cfg = RtmctConfig()
    items = generate_samples(10, cfg, seed=4)
    p = random_rtmct_params(cfg, 1)
    move = rigid(1.234, np.array([-31.0, 17.5]))
    moved = [(AgentHistory(t.cls, move(t.positions), t.frames),
              [AgentHistory(o.cls, move(o.positions), o.frames) for o in others], move(f))
             for t, others, f in items]
    a = predict(preprocess(items, cfg)[0], p, cfg)
    b = predict(preprocess(moved, cfg)[0], p, cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.reference_index, y.reference_index) or np.allclose(x.scores, y.scores, atol=1e-9)
        assert np.max(np.abs(move(x.trajectories.reshape(-1, 2)) - y.trajectories.reshape(-1, 2))) < 1e-6


def test_padded_and_unpadded_histories_agree_bit_exactly():
    cfg = RtmctConfig()
    short = AgentHistory(PEDESTRIAN, [(3.0, 1.0), (3.5, 1.2)])
    padded = AgentHistory(PEDESTRIAN, [(3.0, 1.0)] * 15 + [(3.5, 1.2)])
    gappy = AgentHistory(PEDESTRIAN, [(3.0, 1.0), (3.0, 1.0), (3.5, 1.2)], np.array([-15, -1, 0]))
    nb = [AgentHistory(CAR, [(4.0, 1.0), (4.2, 1.0)])]
    p = random_rtmct_params(cfg, 2)
    outs = [predict(preprocess([(h, nb)], cfg)[0], p, cfg)[0] for h in (short, padded, gappy)]
    for o in outs[1:]:
        assert np.array_equal(o.trajectories, outs[0].trajectories) and np.array_equal(o.scores, outs[0].scores)


def test_constant_velocity_baseline():
    obs = np.array([[[0.0, 0.0], [1.0, 0.5]]])
    assert constant_velocity(obs, 3)[0] == pytest.approx(np.array([[2, 1], [3, 1.5], [4, 2]]))
