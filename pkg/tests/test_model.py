import numpy as np
import pytest

from reference import (
    attentive_forward_ref,
    central_differences,
    min_relu_preactivation,
    relative_gradient_error,
)
from visaff import dataset as ds
from visaff import model as mdl
from visaff.errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    StateError,
    TruncatedFileError,
)


def tiny_config(**kwargs):
    base = dict(variant="attentive_mtl", d_a=3, head_hidden=5,
                dropout_rate=0.0, feature_dim=8, densenet_dim=6)
    base.update(kwargs)
    return mdl.ModelConfig(**base)


def random_params(config, seed, scale=0.5):
    params = mdl.ModelParams(config)
    rng = np.random.default_rng(seed)
    params.flat[:] = rng.uniform(-scale, scale, params.size)
    return params


# ---------------------------------------------------------------------------
# config and init


def test_config_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(variant="bogus")


def test_config_enforces_task_counts():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(variant="attentive_mtl", n_tasks=1)
    with pytest.raises(ConfigError):
        mdl.ModelConfig(variant="attentive_task_specific", n_tasks=12)


def test_config_rejects_bad_dropout():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(dropout_rate=1.0)


def test_init_deterministic_bitwise():
    cfg = tiny_config(init_seed=77)
    a = mdl.init_params(cfg)
    b = mdl.init_params(cfg)
    assert a.flat.tobytes() == b.flat.tobytes()


def test_init_biases_zero():
    params = mdl.init_params(tiny_config(init_seed=1))
    for name, _ in params.layout:
        if name.rsplit(".", 1)[-1] in ("bias", "b1", "b2"):
            assert not params.view(name).any()


def test_init_weight_std_matches_fan_scaling():
    # U(-a, a) with a = sqrt(6/(fan_in+fan_out)) has std a/sqrt(3)
    cfg = mdl.ModelConfig(variant="attentive_mtl", init_seed=3)
    params = mdl.init_params(cfg)
    w = params.view("head.0.w1")  # 256 x 2048
    a = np.sqrt(6.0 / (2048 + 256))
    target = a / np.sqrt(3.0)
    assert abs(w.std() - target) / target < 0.10


def test_parameter_counts_match_closed_forms():
    d, da, h = 8, 3, 5
    cfg = tiny_config()
    expected = (da * d + 2 * da) + 12 * (da * d + 2 * da) + 12 * (h * d + h + h + 1)
    assert mdl.ModelParams(cfg).size == expected

    cfg_pm = tiny_config(per_model_primary_attention=True)
    expected_pm = 4 * (da * d + 2 * da) + 12 * (da * d + 2 * da) + 12 * (h * d + h + h + 1)
    assert mdl.ModelParams(cfg_pm).size == expected_pm

    cfg_single = tiny_config(variant="attentive_task_specific", n_tasks=1)
    expected_single = (da * d + 2 * da) + (da * d + 2 * da) + (h * d + h + h + 1)
    assert mdl.ModelParams(cfg_single).size == expected_single

    cfg_dense = mdl.ModelConfig(
        variant="nonattentive_mtl", feature_dim=8, densenet_dim=6,
        shared_hidden_sizes=(7, 5), task_hidden_sizes=(4, 3),
    )
    whole = 3 * 8 + 6
    shared = (7 * whole + 7) + (5 * 7 + 5)
    per_task = (4 * 5 + 4) + (3 * 4 + 3) + (3 + 1)
    assert mdl.ModelParams(cfg_dense).size == shared + 12 * per_task


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_params_outputs_zero():
    cfg = tiny_config()
    params = mdl.ModelParams(cfg)  # all zeros
    x = np.random.default_rng(0).normal(size=(4, 16, 8))
    pred = mdl.forward(x, params, mode="eval")
    np.testing.assert_array_equal(pred.values, np.zeros(12))


def test_forward_dropout_zero_train_equals_eval():
    cfg = tiny_config(dropout_rate=0.0)
    params = random_params(cfg, 4)
    x = np.random.default_rng(1).normal(size=(2, 4, 16, 8))
    y_train, _ = mdl.forward_batch(x, params, mode="train",
                                   rng=np.random.default_rng(9))
    y_eval, _ = mdl.forward_batch(x, params, mode="eval")
    np.testing.assert_array_equal(y_train, y_eval)


def test_forward_matches_scalar_reference():
    cfg = tiny_config()
    params = random_params(cfg, 5)
    x = np.random.default_rng(2).normal(size=(4, 16, 8))
    pred = mdl.forward(x, params, mode="eval")
    ref_params = {
        "primary": (params.view("primary.weight").tolist(),
                    params.view("primary.bias").tolist(),
                    params.view("primary.context").tolist()),
        "secondary": [
            (params.view(f"secondary.{k}.weight").tolist(),
             params.view(f"secondary.{k}.bias").tolist(),
             params.view(f"secondary.{k}.context").tolist())
            for k in range(12)
        ],
        "head": [
            (params.view(f"head.{k}.w1").tolist(),
             params.view(f"head.{k}.b1").tolist(),
             params.view(f"head.{k}.w2")[0].tolist(),
             float(params.view(f"head.{k}.b2")[0]))
            for k in range(12)
        ],
    }
    ref = attentive_forward_ref(x.tolist(), ref_params, 12)
    np.testing.assert_allclose(pred.values, ref, atol=1e-12)


def test_forward_layout_mismatch_rejected():
    cfg = tiny_config()
    params = random_params(cfg, 6)
    with pytest.raises(ValueError):
        mdl.forward_batch(np.zeros((2, cfg.whole_dim)), params)
    rec = ds.FeatureTensor("x", "whole", np.zeros(8064, dtype=np.float32))
    big = mdl.init_params(mdl.ModelConfig(variant="attentive_mtl"))
    with pytest.raises(ValueError, match="layout"):
        mdl.forward(rec, big)


def test_forward_outputs_strictly_inside_unit_interval():
    cfg = tiny_config()
    rng = np.random.default_rng(7)
    for trial in range(50):
        params = random_params(cfg, trial, scale=0.8)
        x = rng.normal(size=(3, 4, 16, 8))
        y, _ = mdl.forward_batch(x, params)
        assert np.all(np.abs(y) < 1.0)
    # extreme scales may saturate float64 tanh to exactly +-1, never beyond
    params = random_params(cfg, 999, scale=10.0)
    y, _ = mdl.forward_batch(rng.normal(scale=5.0, size=(3, 4, 16, 8)), params)
    assert np.all(np.abs(y) <= 1.0)


def test_forward_eval_deterministic():
    cfg = tiny_config()
    params = random_params(cfg, 8)
    x = np.random.default_rng(3).normal(size=(3, 4, 16, 8))
    y1, _ = mdl.forward_batch(x, params, mode="eval")
    y2, _ = mdl.forward_batch(x, params, mode="eval")
    assert y1.tobytes() == y2.tobytes()


def test_attention_record_shapes():
    cfg = tiny_config()
    params = random_params(cfg, 9)
    pred = mdl.forward(np.random.default_rng(4).normal(size=(4, 16, 8)), params)
    assert pred.attention.alpha_primary.shape == (4, 16)
    assert pred.attention.alpha_secondary.shape == (12, 4)
    np.testing.assert_allclose(pred.attention.alpha_primary.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pred.attention.alpha_secondary.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_on_equal():
    y = np.random.default_rng(5).normal(size=(3, 12))
    assert mdl.joint_loss(y, y) == 0.0


def test_loss_twelve_residuals_of_point_one():
    pred = np.full((1, 12), 0.1)
    target = np.zeros((1, 12))
    assert mdl.joint_loss(pred, target) == pytest.approx(0.12, abs=1e-15)


def test_loss_decomposes_into_task_mses_bitwise():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(17, 12))
    target = rng.normal(size=(17, 12))
    independent = [float(np.mean((pred[:, k] - target[:, k]) ** 2)) for k in range(12)]
    assert mdl.joint_loss(pred, target) == sum(independent)


def test_loss_length_mismatch_rejected():
    with pytest.raises(ValueError):
        mdl.joint_loss(np.zeros((2, 12)), np.zeros((2, 11)))


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_residual_zero_grad():
    cfg = tiny_config()
    params = random_params(cfg, 10)
    x = np.random.default_rng(7).normal(size=(2, 4, 16, 8))
    y, cache = mdl.forward_batch(x, params)
    grad = mdl.backward_batch(cache, y)
    assert not grad.any()


def test_backward_head_bias_hand_formula():
    # single sample: dL/db2[k] = 2 (y_k - t_k) (1 - y_k^2)
    cfg = tiny_config()
    params = random_params(cfg, 11)
    x = np.random.default_rng(8).normal(size=(1, 4, 16, 8))
    t = np.random.default_rng(9).uniform(-0.5, 0.5, (1, 12))
    y, cache = mdl.forward_batch(x, params)
    grad = mdl.backward_batch(cache, t)
    gviews, _ = mdl._build_views(params.layout, grad)
    for k in range(12):
        expected = 2.0 * (y[0, k] - t[0, k]) * (1.0 - y[0, k] ** 2)
        assert gviews[f"head.{k}.b2"][0] == pytest.approx(expected, rel=1e-12)


def test_backward_stale_cache_rejected():
    cfg = tiny_config()
    params = random_params(cfg, 12)
    x = np.random.default_rng(10).normal(size=(2, 4, 16, 8))
    y, cache = mdl.forward_batch(x, params)
    params.assign_flat(params.flat + 0.01)
    with pytest.raises(StateError):
        mdl.backward_batch(cache, y)


def _model_fd_error(cfg, seed, batch=2):
    rng = np.random.default_rng(seed)
    for attempt in range(20):
        params = random_params(cfg, seed + 1000 * attempt, scale=0.6)
        if mdl.is_attentive(cfg.variant):
            x = rng.normal(size=(batch, 4, 16, cfg.feature_dim))
        else:
            x = rng.normal(size=(batch, cfg.whole_dim))
        t = rng.uniform(-0.5, 0.5, (batch, cfg.n_tasks))
        y, cache = mdl.forward_batch(x, params)
        if min_relu_preactivation(cache) < 1e-4:
            continue  # FD is invalid next to a relu kink; redraw
        analytic = mdl.backward_batch(cache, t)

        def loss_fn():
            yy, _ = mdl.forward_batch(x, params)
            return mdl.joint_loss(yy, t)

        numeric = central_differences(loss_fn, params.flat)
        return relative_gradient_error(analytic, numeric)
    raise AssertionError("could not find a kink-free random instance")


def test_backward_matches_finite_differences_attentive():
    assert _model_fd_error(tiny_config(), seed=0) < 1e-6


def test_backward_matches_finite_differences_per_model():
    cfg = tiny_config(per_model_primary_attention=True, feature_dim=6, densenet_dim=5)
    assert _model_fd_error(cfg, seed=1) < 1e-6


def test_backward_matches_finite_differences_dense():
    cfg = mdl.ModelConfig(variant="nonattentive_mtl", dropout_rate=0.0,
                          feature_dim=8, densenet_dim=6,
                          shared_hidden_sizes=(7, 5), task_hidden_sizes=(4, 3))
    assert _model_fd_error(cfg, seed=2) < 1e-6


def test_backward_matches_finite_differences_single_task():
    cfg = tiny_config(variant="attentive_task_specific", n_tasks=1)
    assert _model_fd_error(cfg, seed=3) < 1e-6


def test_train_mode_gradient_uses_dropout_masks():
    # FD through the train-mode loss with the mask fixed by the cache
    cfg = tiny_config(dropout_rate=0.5)
    params = random_params(cfg, 14)
    rng_data = np.random.default_rng(15)
    x = rng_data.normal(size=(2, 4, 16, 8))
    t = rng_data.uniform(-0.5, 0.5, (2, 12))
    y, cache = mdl.forward_batch(x, params, mode="train",
                                 rng=np.random.default_rng(99))
    analytic = mdl.backward_batch(cache, t)
    masks = cache.mask.copy()  # (B, K, H)

    def loss_fn():
        # replay the forward with the recorded masks
        pooled, _, _ = mdl.attend(x, params.primary_params())
        preds = np.empty((2, 12))
        for k in range(12):
            fused, _, _ = mdl.attend(pooled, params.secondary_params(k))
            z1 = fused @ params.view(f"head.{k}.w1").T + params.view(f"head.{k}.b1")
            h = np.maximum(z1, 0.0) * masks[:, k] * 2.0
            z2 = h @ params.view(f"head.{k}.w2").T + params.view(f"head.{k}.b2")
            preds[:, k] = np.tanh(z2[:, 0])
        return mdl.joint_loss(preds, t)

    numeric = central_differences(loss_fn, params.flat)
    assert relative_gradient_error(analytic, numeric) < 1e-6


def test_task_isolation_under_parameter_perturbation():
    cfg = tiny_config()
    params = random_params(cfg, 16)
    x = np.random.default_rng(17).normal(size=(3, 4, 16, 8))
    y0, _ = mdl.forward_batch(x, params)
    for k in (0, 5, 11):
        for name in (f"secondary.{k}.weight", f"head.{k}.w1", f"head.{k}.b2"):
            perturbed = params.copy()
            perturbed.view(name)[...] += 0.05
            y1, _ = mdl.forward_batch(x, perturbed)
            changed = np.abs(y1 - y0) > 0.0
            assert changed[:, k].any()
            other = np.delete(np.arange(12), k)
            assert not changed[:, other].any()


def test_shared_coupling_single_task_residual():
    cfg = tiny_config()
    params = random_params(cfg, 18)
    x = np.random.default_rng(19).normal(size=(2, 4, 16, 8))
    y, cache = mdl.forward_batch(x, params)
    t = y.copy()
    t[:, 3] += 0.1  # only task 3 has residual
    grad = mdl.backward_batch(cache, t)
    gviews, _ = mdl._build_views(params.layout, grad)
    assert np.abs(gviews["primary.weight"]).max() > 0.0
    assert np.abs(gviews["primary.context"]).max() > 0.0


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config(init_seed=21, per_model_primary_attention=True,
                      feature_dim=6, densenet_dim=5)
    params = mdl.init_params(cfg)
    path = tmp_path / "model.amtp"
    mdl.save_checkpoint(path, params)
    back = mdl.load_checkpoint(path)
    assert back.config == cfg
    assert back.flat.tobytes() == params.flat.tobytes()


def test_checkpoint_round_trip_dense(tmp_path):
    cfg = mdl.ModelConfig(variant="nonattentive_mtl", feature_dim=8, densenet_dim=6,
                          shared_hidden_sizes=(7, 5), task_hidden_sizes=(4, 3),
                          init_seed=-12345)
    params = mdl.init_params(cfg)
    path = tmp_path / "model.amtp"
    mdl.save_checkpoint(path, params)
    back = mdl.load_checkpoint(path)
    assert back.config == cfg
    assert back.flat.tobytes() == params.flat.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.amtp"
    mdl.save_checkpoint(path, mdl.init_params(tiny_config()))
    blob = bytearray(path.read_bytes())
    blob[0] = 0
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        mdl.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.amtp"
    mdl.save_checkpoint(path, mdl.init_params(tiny_config()))
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(TruncatedFileError):
        mdl.load_checkpoint(path)


# ---------------------------------------------------------------------------
# non-transfer feature source


def test_nontransfer_deterministic():
    a = mdl.build_nontransfer_features(["x", "y"], seed=5)
    b = mdl.build_nontransfer_features(["x", "y"], seed=5)
    for r1, r2 in zip(a, b):
        assert r1.values.tobytes() == r2.values.tobytes()


def test_nontransfer_shapes_and_pad():
    recs = mdl.build_nontransfer_features(["img"], seed=6)
    rec = recs[0]
    assert rec.values.shape == (4, 16, 2048)
    assert not rec.values[3, :, 1920:].any()
    rec.validate()
    whole = mdl.build_nontransfer_features(["img"], seed=6, layout="whole")[0]
    assert whole.values.shape == (8064,)
    whole.validate()


def test_nontransfer_near_zero_mean():
    recs = mdl.build_nontransfer_features([f"i{n}" for n in range(2)], seed=7)
    sample = np.concatenate([r.values[:3].ravel() for r in recs])
    assert sample.size > 10_000
    assert abs(sample.mean()) < 0.05


def test_nontransfer_distinct_ids_distinct_features():
    a, b = mdl.build_nontransfer_features(["x", "y"], seed=8)
    assert a.values.tobytes() != b.values.tobytes()


def test_nontransfer_accepts_supplied_surrogates():
    rng = np.random.default_rng(20)
    surrogate = rng.standard_normal((4, 16, mdl.SURROGATE_DIM))
    rec = mdl.build_nontransfer_features([("img", surrogate)], seed=9)[0]
    rec.validate()
    again = mdl.build_nontransfer_features([("img", surrogate)], seed=9)[0]
    assert rec.values.tobytes() == again.values.tobytes()
    with pytest.raises(ValueError, match="surrogate shape"):
        mdl.build_nontransfer_features([("img", surrogate[:, :3])], seed=9)


def test_whole_payload_length_validated():
    rec = ds.FeatureTensor("w", "whole", np.zeros(8000, dtype=np.float32))
    with pytest.raises(FormatError):
        rec.validate()


def test_batch_loss_matches_per_sample_recomputation():
    rng = np.random.default_rng(21)
    pred = rng.uniform(-1, 1, (9, 12))
    target = rng.uniform(-0.5, 0.5, (9, 12))
    total = 0.0
    for k in range(12):
        acc = 0.0
        for b in range(9):
            acc += (pred[b, k] - target[b, k]) ** 2
        total += acc / 9
    assert mdl.joint_loss(pred, target) == pytest.approx(total, rel=1e-14)
