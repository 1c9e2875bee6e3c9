import numpy as np
import pytest

from flowuq.ensembles import SgdrSchedule, merge_predictive, snapshot_iterations
from flowuq.fields import endpoint_error, mean_epe
from flowuq.toytrain import (
    TrainConfig,
    TrainingDiverged,
    forward,
    generate_scenes,
    init_model,
    load_model,
    predict_merged,
    resample_latent,
    save_model,
    stack_scenes,
    train,
    train_merge_head,
    train_wta,
)
from flowuq.toytrain.data import NUM_FEATURES, clean_flow
from flowuq.toytrain.train import merge_inputs, merged_from_inputs, predict_parts


def aepe(model, scenes):
    return float(np.mean([mean_epe(endpoint_error(forward(model, s), s.gt)) for s in scenes]))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def test_unimodal_gt_is_function_of_features():
    for s in generate_scenes(0, 5, "unimodal"):
        u, v = clean_flow(s.features)
        np.testing.assert_array_equal(s.gt.u, u)
        np.testing.assert_array_equal(s.gt.v, v)


def test_bimodal_latent_is_fair_coin():
    scene = next(s for s in generate_scenes(1, 20, "bimodal") if s.ambiguous.any())
    rng = np.random.default_rng(0)
    draws = [resample_latent(scene, rng) for _ in range(1000)]
    assert all((d.features == scene.features).all() for d in draws)
    plus = sum(d.latent == 1 for d in draws) / 1000
    assert abs(plus - 0.5) <= 0.05
    gts = {d.gt.u.tobytes() for d in draws}
    assert len(gts) == 2


def test_dataset_deterministic():
    a = stack_scenes(generate_scenes(3, 4, "bimodal", heteroscedastic=True))
    b = stack_scenes(generate_scenes(3, 4, "bimodal", heteroscedastic=True))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate_scenes(0, 0)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _zeroed(model):
    for w in model.weights:
        w[...] = 0
    for b in model.biases:
        b[...] = 0
    return model


def test_zero_weights_give_head_constants():
    scene = generate_scenes(0, 1)[0]
    flow = forward(_zeroed(init_model(0, NUM_FEATURES)), scene)
    assert (flow.u == 0).all() and (flow.v == 0).all()
    pred, unc = forward(_zeroed(init_model(0, NUM_FEATURES, with_scale=True)), scene)
    assert (unc.b_u == 1).all() and (pred.u == 0).all()
    hyps = forward(_zeroed(init_model(0, NUM_FEATURES, num_hyp=3, with_scale=True)), scene)
    assert hyps.M == 3 and (hyps.b_v == 1).all()


def test_dropout_rate_zero_matches_plain():
    scene = generate_scenes(0, 1)[0]
    m = init_model(1, NUM_FEATURES)
    a = forward(m, scene)
    b = forward(m, scene, (0.0, np.random.default_rng(0)))
    np.testing.assert_array_equal(a.u, b.u)


def test_dropout_seeds_differ():
    scene = generate_scenes(0, 1)[0]
    m = init_model(1, NUM_FEATURES)
    a = forward(m, scene, (0.2, np.random.default_rng(0)))
    b = forward(m, scene, (0.2, np.random.default_rng(1)))
    assert not np.array_equal(a.u, b.u)


def test_forward_deterministic_and_param_count():
    scene = generate_scenes(0, 1)[0]
    m = init_model(2, NUM_FEATURES, (64, 64), 8, True)
    assert m.num_params == 6 * 64 + 64 + 64 * 64 + 64 + 64 * 32 + 32
    a, b = forward(m, scene), forward(m, scene)
    np.testing.assert_array_equal(a.u, b.u)


def test_checkpoint_roundtrip():
    m = init_model(3, NUM_FEATURES, (8, 5), 2, True)
    data = save_model(m)
    assert data[:4] == b"FUQM"
    back = load_model(data)
    assert back.sizes == m.sizes and back.num_hyp == 2 and back.with_scale
    for w0, w1 in zip(m.weights, back.weights):
        np.testing.assert_array_equal(w0.astype(np.float32), w1)
    assert save_model(back) == data
    with pytest.raises(ValueError):
        load_model(data[:-1])
    with pytest.raises(ValueError):
        load_model(b"XXXX" + data[4:])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_training_bitwise_reproducible():
    data = generate_scenes(0, 16)
    cfg = TrainConfig(seed=5, iterations=50, base_lr=0.03, dropout_rate=0.2)
    a, b = init_model(0, NUM_FEATURES), init_model(0, NUM_FEATURES)
    train(a, data, cfg)
    train(b, data, cfg)
    assert a.flat().tobytes() == b.flat().tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    data = generate_scenes(0, 4)
    cfg = TrainConfig(iterations=200, base_lr=1e30, grad_clip=0.0, schedule="constant", dropout_rate=0.0)
    with pytest.raises(TrainingDiverged, match="iteration"):
        train(init_model(0, NUM_FEATURES), data, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss="l2")
    with pytest.raises(ValueError):
        TrainConfig(schedule="sgdr")
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)


def test_sgdr_snapshots_recorded():
    sched = SgdrSchedule(0.03, 10, pre_cycles=1, num_snapshots=3)
    cfg = TrainConfig(schedule="sgdr", sgdr=sched, dropout_rate=0.0)
    result = train(init_model(0, NUM_FEATURES), generate_scenes(0, 8), cfg)
    assert len(result.history) == 40
    assert len(result.snapshots) == len(snapshot_iterations(sched)) == 3
    assert not np.array_equal(result.snapshots[0].flat(), result.snapshots[1].flat())


def test_wta_single_head_is_plain_training():
    data = generate_scenes(0, 8)
    cfg = TrainConfig(seed=1, iterations=30, dropout_rate=0.0, smoothness_weight=0.0)
    a, b = init_model(0, NUM_FEATURES), init_model(0, NUM_FEATURES)
    train(a, data, cfg)
    r = train_wta(b, data, cfg)
    np.testing.assert_allclose(a.flat(), b.flat(), rtol=1e-10, atol=1e-12)
    assert r.usage.tolist() == [1.0]


def test_unimodal_epe_training_reduces_error():
    data = generate_scenes(0, 256, "unimodal")
    m = init_model(0, NUM_FEATURES)
    before = aepe(m, data)
    train(m, data, TrainConfig(seed=0, iterations=2000, base_lr=0.03, dropout_rate=0.0))
    assert aepe(m, data) < 0.10 * before


# ---------------------------------------------------------------------------
# merging head
# ---------------------------------------------------------------------------


def _merge_setup(mode):
    tr = generate_scenes(20, 1024, mode, num_regions=8)
    te = generate_scenes(21, 32, mode, num_regions=8)
    cfg = TrainConfig(seed=0, iterations=3000, base_lr=0.03, loss="laplace_nll", dropout_rate=0.0, smoothness_weight=0.1)
    hyp = init_model(0, NUM_FEATURES, (64, 64), 2, True)
    train_wta(hyp, tr, cfg)
    merge = train_merge_head(hyp, tr, cfg)
    return hyp, merge, te


@pytest.fixture(scope="module")
def merged_unimodal():
    return _merge_setup("unimodal")


@pytest.fixture(scope="module")
def merged_bimodal():
    return _merge_setup("bimodal")


@pytest.mark.slow
def test_merge_matches_averaging_on_unimodal(merged_unimodal):
    hyp, merge, te = merged_unimodal
    merged = np.mean([mean_epe(endpoint_error(predict_merged(merge, hyp, s)[0], s.gt)) for s in te])
    pred = np.mean([mean_epe(endpoint_error(merge_predictive(forward(hyp, s)).mean, s.gt)) for s in te])
    assert abs(merged / pred - 1) < 0.20


@pytest.mark.slow
def test_merged_scale_larger_where_ambiguous(merged_bimodal):
    hyp, merge, te = merged_bimodal
    amb, unamb = [], []
    for s in te:
        if not s.ambiguous.any() or s.ambiguous.all():
            continue
        _, unc = predict_merged(merge, hyp, s)
        b = (unc.b_u + unc.b_v) / 2
        amb.append(b[s.ambiguous].mean())
        unamb.append(b[~s.ambiguous].mean())
    assert np.mean(amb) / np.mean(unamb) > 1.5


@pytest.mark.slow
def test_merge_identity_probe(merged_unimodal):
    # all hypotheses replaced by the first one: the merged mean must stay on it
    hyp, merge, te = merged_unimodal
    probe, merged_err = [], []
    for s in te:
        parts = predict_parts(hyp, s.features[None])
        same = {k: np.repeat(v[:1], hyp.num_hyp, axis=0) for k, v in parts.items()}
        feats, mu_u, mu_v = merge_inputs(same, True)
        flow, _ = merged_from_inputs(merge, feats[0], mu_u[0], mu_v[0])
        probe.append(np.hypot(flow.u - same["u"][0, 0], flow.v - same["v"][0, 0]).mean())
        merged_err.append(mean_epe(endpoint_error(predict_merged(merge, hyp, s)[0], s.gt)))
    # "training tolerance": the merged model's own test AEPE
    assert np.mean(probe) < np.mean(merged_err)
