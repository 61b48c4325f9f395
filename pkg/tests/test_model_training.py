import itertools
import math

import numpy as np
import pytest

from ccim_caer.confounder_dictionary import build_dictionary
from ccim_caer.errors import ConfigError, DimensionError
from ccim_caer.metrics import MetricsReport, average_precision, classification_report
from ccim_caer.model_training import (
    D_H_PRESETS,
    ModelConfig,
    classify,
    encode,
    encode_backward,
    evaluate,
    fuse,
    init_state,
    logits_for,
    loss_and_grads,
    loss_ce,
    parse_variants,
    run_ablation,
    state_from_json,
    state_to_json,
    train,
)
from ccim_caer.synthetic_caer import GeneratorConfig, context_features, generate

from conftest import central_difference, max_rel_error


@pytest.fixture(scope="module")
def small_data():
    cfg = GeneratorConfig(n_contexts=4, n_emotions=3, d_s=5, d_c=6, rho=0.9, subject_signal=2.0,
                          sigma_s=0.5, n_train=300, n_test=200, leak_alpha=0.3)
    return generate(cfg, 11)


@pytest.fixture(scope="module")
def small_dict(small_data):
    return build_dictionary(context_features(small_data[0]), 4, seed=0)


SMALL_MODEL = dict(enc_hidden=7, s_out=4, c_out=3, d_m=5, d_n=6, epochs=3, batch=32)


# ---------------------------------------------------------------- encode

def test_encode_zero_weights_gives_zero():
    assert np.all(encode(np.zeros((4, 3)), np.zeros((2, 4)), np.ones(3)) == 0)


def test_encode_range_and_shape_check():
    rng = np.random.default_rng(0)
    out = encode(rng.normal(size=(8, 3)) * 10, rng.normal(size=(5, 8)) * 10, rng.normal(size=(20, 3)))
    assert out.shape == (20, 5)
    assert np.all(np.abs(out) <= 1)
    with pytest.raises(DimensionError):
        encode(np.zeros((4, 3)), np.zeros((2, 4)), np.ones(2))


def test_encode_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    W1, W2, x = rng.normal(size=(6, 4)), rng.normal(size=(3, 6)), rng.normal(size=(5, 4))
    g = rng.normal(size=(5, 3))
    u = np.tanh(x @ W1.T)
    out = np.tanh(u @ W2.T)
    dW1, dW2, dx = encode_backward(W1, W2, x, u, out, g)

    def f():
        return float(np.sum(encode(W1, W2, x) * g))

    for analytic, arr in ((dW1, W1), (dW2, W2), (dx, x)):
        assert max_rel_error(analytic, central_difference(f, arr)) < 1e-5


# ------------------------------------------------------ fuse / classify

def test_fuse_concatenates():
    assert fuse([1, 2], [3]).tolist() == [1, 2, 3]
    s, c = np.arange(4.0), np.arange(3.0) + 10
    h = fuse(s, c)
    assert np.array_equal(h[:4], s) and np.array_equal(h[4:], c)


def test_emot_net_preset():
    assert D_H_PRESETS["emot-net"] == 256
    cfg = ModelConfig(s_out=128, c_out=128)
    assert cfg.d_h == D_H_PRESETS["emot-net"]


def test_uniform_logits_loss_is_log_e():
    loss, _ = loss_ce(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7), abs=1e-15)


def test_confident_logit_loss():
    loss, _ = loss_ce(np.array([10.0, 0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-12)
    assert loss == pytest.approx(9.0796e-5, rel=1e-4)


def test_loss_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=5)
    _, grad = loss_ce(logits, 2)
    expected = np.exp(logits) / np.exp(logits).sum()
    expected[2] -= 1
    np.testing.assert_allclose(grad, expected, atol=1e-15)
    numeric = central_difference(lambda: loss_ce(logits, 2)[0], logits)
    assert np.max(np.abs(grad - numeric)) < 1e-6


def test_label_out_of_range():
    with pytest.raises(ValueError):
        loss_ce(np.zeros(3), 3)


def test_classify_shape_check():
    with pytest.raises(DimensionError):
        classify(np.zeros((3, 4)), np.zeros(5))


# ------------------------------------------------- whole-model gradients

@pytest.mark.parametrize("use_ccim,attention,use_prior", [
    (False, "dot_product", True),
    (True, "dot_product", True),
    (True, "additive", False),
    (True, "uniform", True),
])
def test_model_gradients_match_finite_differences(small_data, small_dict, use_ccim, attention, use_prior):
    train_data, _ = small_data
    cfg = ModelConfig(**SMALL_MODEL, use_ccim=use_ccim, attention=attention, use_prior=use_prior,
                      ccim_init_scale=0.5)
    state = init_state(cfg, 5, 6, 3, small_dict if use_ccim else None)
    d = small_dict if use_ccim else None
    s, c, y = train_data.subjects[:9], train_data.contexts[:9], train_data.labels[:9]
    _, grads = loss_and_grads(state, s, c, y, d)

    def f():
        return loss_and_grads(state, s, c, y, d)[0]

    for name, arr in state.all_params().items():
        assert max_rel_error(grads[name], central_difference(f, arr)) < 1e-5, name


# --------------------------------------------------------------- training

def test_ccim_requires_dictionary(small_data):
    with pytest.raises(ConfigError):
        train(ModelConfig(**SMALL_MODEL, use_ccim=True), small_data[0])


def test_zero_epochs_returns_initial_state(small_data, small_dict):
    cfg = ModelConfig(**dict(SMALL_MODEL, epochs=0), use_ccim=True)
    trained = train(cfg, small_data[0], small_dict)
    fresh = init_state(cfg, 5, 6, 3, small_dict)
    for name, arr in fresh.all_params().items():
        assert np.array_equal(arr, trained.all_params()[name])


def test_training_reduces_loss_on_separable_data():
    cfg = GeneratorConfig(n_contexts=3, n_emotions=3, d_s=4, d_c=4, rho=0.0, subject_signal=4.0,
                          sigma_s=0.2, n_train=640, n_test=100)
    data, _ = generate(cfg, 0)
    state = train(ModelConfig(**dict(SMALL_MODEL, epochs=10)), data)
    assert len(state.loss_curve) == 10
    assert state.loss_curve[-1] < state.loss_curve[0]
    assert all(math.isfinite(v) for v in state.loss_curve)


@pytest.mark.parametrize("use_ccim", [False, True])
def test_training_is_deterministic(small_data, small_dict, use_ccim):
    cfg = ModelConfig(**SMALL_MODEL, use_ccim=use_ccim)
    d = small_dict if use_ccim else None
    a = train(cfg, small_data[0], d)
    b = train(cfg, small_data[0], d)
    for name, arr in a.all_params().items():
        assert np.array_equal(arr, b.all_params()[name])
    assert a.loss_curve == b.loss_curve


def test_baseline_ccim_parity_at_degenerate_setting(small_data, small_dict):
    """W_g = 0 and W_h = [I; 0] make the CCIM model a padded baseline."""
    base_cfg = ModelConfig(**SMALL_MODEL)
    base = init_state(base_cfg, 5, 6, 3)
    ccim_cfg = ModelConfig(**dict(SMALL_MODEL, d_m=9), use_ccim=True)
    model = init_state(ccim_cfg, 5, 6, 3, small_dict)
    for name in ("fs_W1", "fs_W2", "fc_W1", "fc_W2"):
        model.params[name] = base.params[name].copy()
    d_h = base_cfg.d_h
    model.ccim.W_g[...] = 0.0
    model.ccim.W_h[...] = 0.0
    model.ccim.W_h[:d_h, :d_h] = np.eye(d_h)
    model.params["cls"][:, :d_h] = base.params["cls"]
    s, c = small_data[1].subjects, small_data[1].contexts
    np.testing.assert_allclose(logits_for(model, s, c, small_dict), logits_for(base, s, c), atol=1e-10)


def test_checkpoint_round_trip(small_data, small_dict):
    state = train(ModelConfig(**SMALL_MODEL, use_ccim=True), small_data[0], small_dict)
    back = state_from_json(state_to_json(state))
    for name, arr in state.all_params().items():
        assert np.array_equal(arr, back.all_params()[name])
    assert back.loss_curve == state.loss_curve
    assert back.dictionary_fingerprint == small_dict.fingerprint()


# ------------------------------------------------------------ evaluation

def test_evaluate_reports_consistent_map(small_data, small_dict):
    state = train(ModelConfig(**SMALL_MODEL, use_ccim=True), small_data[0], small_dict)
    report = evaluate(state, small_data[1], small_dict)
    assert abs(report.map - sum(report.per_class_ap) / 3) < 1e-12
    assert 0 <= report.accuracy <= 1
    assert all(0 <= ap <= 1 for ap in report.per_class_ap)


def test_perfect_scores_give_perfect_metrics():
    labels = np.array([0, 1, 2, 1, 0, 2])
    scores = np.eye(3)[labels]
    report = classification_report(scores, labels, 3)
    assert report.accuracy == 1.0
    assert report.map == 1.0


# ------------------------------------------------------------- ablations

def test_parse_variants_dedupes_with_warning():
    parsed, warnings = parse_variants(["baseline", "random_Z", "baseline"])
    assert parsed == [("baseline", None), ("random_Z", None)]
    assert len(warnings) == 1


def test_parse_variants_n_sweep_forms():
    assert parse_variants(["n_sweep:2,4,8"])[0] == [("n_sweep", 2), ("n_sweep", 4), ("n_sweep", 8)]
    assert parse_variants([("n_sweep", [2, 4])])[0] == [("n_sweep", 2), ("n_sweep", 4)]


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError, match="valid ids"):
        parse_variants(["ccim_turbo"])


def test_n_sweep_emits_one_report_per_size(small_data):
    base = ModelConfig(**dict(SMALL_MODEL, epochs=1))
    result = run_ablation(base, *small_data, [("n_sweep", [2, 4, 8])], seeds=[0])
    assert [row.n for row in result.rows] == [2, 4, 8]
    assert all(isinstance(row.report, MetricsReport) for row in result.rows)


def test_ablation_variants_share_encoder_init(small_data):
    base = ModelConfig(**dict(SMALL_MODEL, epochs=0))
    result = run_ablation(base, *small_data, ["baseline", "ccim_full_dot"], seeds=[3])
    assert len(result.rows) == 2
    a = init_state(ModelConfig(**dict(SMALL_MODEL, seed=3)), 5, 6, 3)
    b = init_state(ModelConfig(**dict(SMALL_MODEL, seed=3), use_ccim=True), 5, 6, 3,
                   build_dictionary(context_features(small_data[0]), 4, seed=0))
    for name in ("fs_W1", "fs_W2", "fc_W1", "fc_W2"):
        assert np.array_equal(a.params[name], b.params[name])


def test_parallel_ablation_matches_serial(small_data):
    base = ModelConfig(**dict(SMALL_MODEL, epochs=1))
    variants = ["baseline", "no_prior", "no_masking"]
    serial = run_ablation(base, *small_data, variants, seeds=[0, 1])
    parallel = run_ablation(base, *small_data, variants, seeds=[0, 1], jobs=2)
    assert [(r.variant, r.seed, r.report.accuracy, r.report.per_class_ap) for r in serial.rows] == \
           [(r.variant, r.seed, r.report.accuracy, r.report.per_class_ap) for r in parallel.rows]


# ---------------------------------------------------------------- metrics

def brute_force_ap(scores, labels):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions = []
    hits = 0
    for rank, i in enumerate(ranked, start=1):
        if labels[i]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else 0.0


def test_ap_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_no_positives():
    assert average_precision([0.3, 0.2], [0, 0]) == 0.0


def test_ap_known_value():
    assert average_precision([3.0, 2.0, 1.0], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)


def test_ap_ties_keep_index_order():
    assert average_precision([1.0, 1.0], [0, 1]) == 0.5
    assert average_precision([1.0, 1.0], [1, 0]) == 1.0


def test_ap_matches_brute_force_exhaustively_small():
    for length in range(1, 7):
        for labels in itertools.product([0, 1], repeat=length):
            scores = [float((i * 7) % 5) for i in range(length)]
            assert average_precision(scores, labels) == brute_force_ap(scores, labels)


def test_ap_length_mismatch():
    with pytest.raises(DimensionError):
        average_precision([1.0, 2.0], [1])
