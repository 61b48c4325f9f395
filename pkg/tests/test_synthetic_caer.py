import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccim_caer.errors import GenerationError, ParameterError, ValidationError
from ccim_caer.synthetic_caer import (
    GeneratorConfig,
    bias_audit,
    binary_entropy,
    context_features,
    generate,
    mutual_information_bits,
    read_dataset,
    subject_padding,
    write_dataset,
)


def config(**kw):
    base = dict(n_contexts=8, n_emotions=4, d_s=6, d_c=5, n_train=2000, n_test=1000)
    base.update(kw)
    return GeneratorConfig(**base)


def test_rho_one_ties_each_context_to_one_label():
    train, _ = generate(config(rho=1.0), 0)
    for k in range(8):
        labels = set(train.labels[train.context_ids == k].tolist())
        assert labels == {k % 4}


def test_rho_zero_is_nearly_independent():
    train, _ = generate(config(rho=0.0, n_train=10_000), 1)
    assert mutual_information_bits(train.context_ids, train.labels) < 0.02


@pytest.mark.parametrize("rho", [0.0, 0.7, 1.0])
def test_test_split_is_decorrelated(rho):
    _, test = generate(config(rho=rho, n_test=10_000), 2)
    assert mutual_information_bits(test.context_ids, test.labels) < 0.02


def test_generation_is_deterministic():
    a = generate(config(rho=0.8, leak_alpha=0.2), 3)
    b = generate(config(rho=0.8, leak_alpha=0.2), 3)
    for x, y in zip(a, b):
        for field in ("subjects", "contexts", "labels", "context_ids"):
            assert np.array_equal(getattr(x, field), getattr(y, field))
        assert x.fingerprint == y.fingerprint


def test_seed_changes_data():
    a, _ = generate(config(), 0)
    b, _ = generate(config(), 1)
    assert not np.array_equal(a.subjects, b.subjects)


def test_impossible_separation_raises():
    with pytest.raises(GenerationError):
        generate(config(d_c=1, n_contexts=3, max_attempts=50), 0)


@pytest.mark.parametrize("field,value", [("rho", 1.5), ("rho", -0.1), ("n_train", 0), ("sigma_s", -1.0)])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ParameterError, match=field):
        config(**{field: value})


def test_unknown_config_field():
    with pytest.raises(ParameterError, match="bogus"):
        GeneratorConfig.from_dict({"bogus": 1})


# ----------------------------------------------------------- context features

def test_masking_is_noop_without_leak():
    train, _ = generate(config(leak_alpha=0.0), 4)
    assert np.array_equal(context_features(train, True), context_features(train, False))


def test_feature_shape():
    train, _ = generate(config(), 4)
    assert context_features(train).shape == (2000, 5)


def test_unmasked_difference_is_scaled_padding():
    train, _ = generate(config(leak_alpha=0.5), 5)
    diff = context_features(train, False) - context_features(train, True)
    pad = subject_padding(train.subjects, 5)
    np.testing.assert_allclose(np.linalg.norm(diff, axis=1), 0.5 * np.linalg.norm(pad, axis=1),
                               rtol=1e-12, atol=1e-14)


def test_padding_pads_and_truncates():
    s = np.arange(6.0).reshape(2, 3)
    assert subject_padding(s, 5).tolist() == [[0, 1, 2, 0, 0], [3, 4, 5, 0, 0]]
    assert subject_padding(s, 2).tolist() == [[0, 1], [3, 4]]


# ------------------------------------------------------------------ bias audit

def test_entropy_known_points():
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(0.5) == 1.0
    oracle = -(0.25 * math.log2(0.25) + 0.75 * math.log2(0.75))
    assert abs(binary_entropy(0.25) - oracle) < 1e-15
    assert abs(binary_entropy(0.25) - 0.811278) < 1e-6


@given(st.floats(0.0, 1.0))
def test_entropy_bounds_and_symmetry(p):
    e = binary_entropy(p)
    assert 0.0 <= e <= 1.0
    assert abs(e - binary_entropy(1.0 - p)) < 1e-12


def test_audit_rho_one_is_fully_biased():
    train, _ = generate(config(rho=1.0), 6)
    for emotion in range(4):
        report = bias_audit(train, emotion)
        assert report.zero_entropy_fraction == 1.0


def test_audit_rho_zero_has_no_biased_contexts():
    train, _ = generate(config(rho=0.0, n_train=10_000), 7)
    report = bias_audit(train, 0)
    assert report.zero_entropy_fraction < 0.05
    assert len(report.context_ids) == 8
    assert report.co_occurrence.sum() == 10_000


def test_audit_excludes_empty_contexts_and_counts_split():
    train, _ = generate(config(n_contexts=8, n_train=3), 8)
    report = bias_audit(train, 1)
    assert len(report.context_ids) == len(set(train.context_ids.tolist()))
    assert sum(report.counts) == 3


def test_audit_rejects_bad_emotion():
    train, _ = generate(config(), 0)
    with pytest.raises(ParameterError):
        bias_audit(train, 4)


def test_bias_increases_with_rho():
    means, entropies = {}, {}
    for rho in (0.0, 0.5, 1.0):
        fracs, ents = [], []
        for seed in range(5):
            train, _ = generate(config(rho=rho, n_train=5000), seed)
            reports = [bias_audit(train, e) for e in range(4)]
            fracs.append(np.mean([r.zero_entropy_fraction for r in reports]))
            ents.append(np.mean([r.summary()["mean_entropy"] for r in reports]))
        means[rho] = np.mean(fracs)
        entropies[rho] = np.mean(ents)
    # ~625 samples per context: no context is pure at rho < 1, so both fractions are 0
    assert means[1.0] > means[0.5] >= means[0.0]
    assert entropies[0.0] > entropies[0.5] > entropies[1.0]


# --------------------------------------------------------------------- files

def test_dataset_file_round_trip(tmp_path):
    train, test = generate(config(rho=0.9, leak_alpha=0.3, n_train=50, n_test=40), 9)
    write_dataset(train, test, tmp_path)
    header = (tmp_path / "train.csv").read_text().splitlines()[0]
    assert header.startswith("split,label,context_id,s_0")
    assert header.endswith("c_4")
    rtrain, rtest = read_dataset(tmp_path)
    for orig, back in ((train, rtrain), (test, rtest)):
        for field in ("subjects", "contexts", "labels", "context_ids"):
            assert np.array_equal(getattr(orig, field), getattr(back, field))
        assert back.split == orig.split


def test_tampered_fingerprint_rejected(tmp_path):
    train, test = generate(config(n_train=10, n_test=10), 0)
    write_dataset(train, test, tmp_path)
    fp = tmp_path / "fingerprint.json"
    fp.write_text(fp.read_text().replace('"rho": 0.95', '"rho": 0.5'))
    with pytest.raises(ValidationError):
        read_dataset(tmp_path)
