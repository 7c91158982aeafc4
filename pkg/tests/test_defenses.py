"""Defense primitives against closed-form oracles plus pipeline contracts."""
import math

import numpy as np
import pytest

from mimbd.data import Dataset, generate_shapes
from mimbd.defenses import (Classifier, DetectionReport, NCConfig,
                            mad_anomaly_index, neural_cleanse, shannon_entropy,
                            spectral_scores, spectral_signature_defense, strip)
from mimbd.errors import ConfigError
from mimbd.model import EncoderConfig, MIMModel
from mimbd.train_eval import LinearProbe

TINY = EncoderConfig(image_size=16, patch_size=4, embed_dim=24, depth=2,
                     num_heads=3, decoder_dim=16, decoder_depth=1,
                     decoder_heads=2)


def _uniform_classifier(num_classes=10):
    model = MIMModel(TINY, seed=0)
    probe = LinearProbe(TINY.embed_dim, num_classes, seed=0)
    probe.w.value[...] = 0.0
    probe.b.value[...] = 0.0
    return Classifier(model, probe)


def _random_classifier(num_classes=10, seed=0):
    model = MIMModel(TINY, seed=seed)
    probe = LinearProbe(TINY.embed_dim, num_classes, seed=seed)
    probe.w.value[...] = (np.random.default_rng(seed)
                          .standard_normal(probe.w.value.shape)
                          .astype(np.float32) * 3.0)
    return Classifier(model, probe)


# ---------------------------------------------------------------- MAD index

def test_mad_anomaly_index_frozen_example():
    idx = mad_anomaly_index([10, 10.5, 9.8, 10.2, 2.0])
    # median 10, MAD 0.2, so the outlier scores |2-10| / (1.4826 * 0.2)
    assert abs(idx[-1] - 26.979630379063806) < 1e-9
    assert idx.argmax() == 4
    assert (idx[:4] < 3).all()


def test_mad_index_shift_and_scale_invariant():
    rng = np.random.default_rng(0)
    v = rng.normal(50.0, 3.0, 25)
    v[3] = 200.0
    base = mad_anomaly_index(v)
    assert np.allclose(mad_anomaly_index(v + 17.5), base, atol=1e-9)
    assert np.allclose(mad_anomaly_index(v * 4.25), base, atol=1e-9)


def test_mad_index_validation():
    with pytest.raises(ConfigError):
        mad_anomaly_index([1.0, 2.0])
    with pytest.raises(ConfigError, match="MAD is zero"):
        mad_anomaly_index([5.0, 5.0, 5.0, 5.0])


# ------------------------------------------------------------------ entropy

def test_shannon_entropy_closed_forms():
    assert abs(shannon_entropy([0.5, 0.5]) - math.log(2)) < 1e-12
    assert abs(shannon_entropy([0.1] * 10) - math.log(10)) < 1e-12
    assert shannon_entropy([1.0, 0.0, 0.0]) == 0.0
    # entropy is maximal at the uniform distribution
    assert shannon_entropy([0.9, 0.05, 0.05]) < math.log(3)


def test_shannon_entropy_validation():
    with pytest.raises(ConfigError):
        shannon_entropy([0.7, -0.2, 0.5])
    with pytest.raises(ConfigError):
        shannon_entropy([0.3, 0.3])


# ----------------------------------------------------------- spectral scores

def test_spectral_scores_two_point_oracle():
    scores = spectral_scores(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert np.allclose(scores, [1.0, 1.0], atol=1e-12)


def test_spectral_scores_match_eigendecomposition():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 8))
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(xc.T @ xc)
    top = v[:, np.argmax(w)]
    want = (xc @ top) ** 2
    assert np.allclose(spectral_scores(x), want, atol=1e-8)


def test_spectral_scores_invariances_and_edges():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((30, 6))
    base = spectral_scores(x)
    # translation falls out with the centering
    assert np.allclose(spectral_scores(x + 3.0), base, atol=1e-8)
    # rotation preserves the top-direction projections
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    assert np.allclose(spectral_scores(x @ q), base, atol=1e-8)
    # identical rows centre to zero: all scores zero by convention
    assert np.array_equal(spectral_scores(np.ones((5, 3))), np.zeros(5))
    with pytest.raises(ConfigError):
        spectral_scores(np.ones((1, 3)))
    with pytest.raises(ConfigError):
        spectral_scores(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_spectral_scores_separate_shifted_cluster():
    rng = np.random.default_rng(3)
    clean = rng.standard_normal((200, 16))
    shift = np.zeros(16)
    shift[0] = 4.0
    poisoned = rng.standard_normal((30, 16)) + shift
    scores = spectral_scores(np.vstack([clean, poisoned]))
    assert scores[200:].mean() > scores[:200].mean()


# ------------------------------------------------------------ report object

def test_detection_report_validation_and_dict():
    with pytest.raises(ConfigError):
        DetectionReport(method="x", flagged=False, far=120.0)
    with pytest.raises(ConfigError):
        DetectionReport(method="x", flagged=True)  # no rule given
    rep = DetectionReport(method="x", flagged=True, rule="because",
                          b_score=2.0, c_score=1.0)
    d = rep.to_dict()
    assert d["method"] == "x" and d["rule"] == "because"


def test_classifier_end_to_end_shapes():
    clf = _uniform_classifier(num_classes=4)
    images = np.random.default_rng(4).random((6, 16, 16, 3)).astype(np.float32)
    assert clf.logits(images).shape == (6, 4)
    p = clf.probs(images)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert clf.predict(images).shape == (6,)


# -------------------------------------------------------------------- STRIP

def _strip_sets(seed=0, n_suspect=12, n_overlay=10, n_calib=16):
    rng = np.random.default_rng(seed)

    def mk(name, n):
        return Dataset(name, rng.random((n, 16, 16, 3)).astype(np.float32))

    return mk("sus", n_suspect), mk("ovl", n_overlay), mk("cal", n_calib)


def test_strip_uniform_classifier_scores_ln_k():
    sus, ovl, cal = _strip_sets()
    rep = strip(_uniform_classifier(10), sus, ovl, cal, n_overlays=8)
    for group in ("suspect", "calibration", "holdout"):
        assert np.allclose(rep.scores[group], math.log(10), atol=1e-6)
    # constant scores: nothing falls strictly below the threshold
    assert rep.far == 100.0 and rep.frr == 0.0 and not rep.flagged


def test_strip_deterministic_and_monotone_in_frr_target():
    sus, ovl, cal = _strip_sets(seed=5)
    clf = _random_classifier(seed=5)
    rep1 = strip(clf, sus, ovl, cal, n_overlays=8, seed=11)
    rep2 = strip(clf, sus, ovl, cal, n_overlays=8, seed=11)
    assert rep1.scores == rep2.scores and rep1.threshold == rep2.threshold
    lo = strip(clf, sus, ovl, cal, n_overlays=8, frr_target=0.02, seed=11)
    hi = strip(clf, sus, ovl, cal, n_overlays=8, frr_target=0.75, seed=11)
    assert hi.threshold >= lo.threshold
    assert hi.far <= lo.far  # raising the threshold can only catch more


def test_strip_validation():
    sus, ovl, cal = _strip_sets()
    clf = _uniform_classifier()
    with pytest.raises(ConfigError):
        strip(clf, sus, ovl, cal, n_overlays=1)
    with pytest.raises(ConfigError):
        strip(clf, sus, ovl, cal, alpha=1.0)
    with pytest.raises(ConfigError):
        strip(clf, sus, ovl, Dataset("c", cal.images[:3]))


# ----------------------------------------------------------- neural cleanse

def test_neural_cleanse_report_structure():
    train = generate_shapes(3, 4, 16, seed=0, name="nc-probe")
    clf = _random_classifier(num_classes=3, seed=7)
    rep = neural_cleanse(clf, train, NCConfig(steps=8, batch_size=8, seed=0))
    assert rep.method == "neural_cleanse"
    assert len(rep.per_label_norms) == 3
    assert all(n >= 0 for n in rep.per_label_norms)
    assert rep.predicted_target == int(np.argmin(rep.per_label_norms))
    assert np.isfinite(rep.anomaly_index)
    assert len(rep.scores["anomaly_indices"]) == 3
    assert rep.flagged == (rep.anomaly_index > 2.0)


def test_neural_cleanse_validation():
    clf = _uniform_classifier(3)
    rng = np.random.default_rng(0)
    unlabeled = Dataset("u", rng.random((6, 16, 16, 3)).astype(np.float32))
    with pytest.raises(ConfigError):
        neural_cleanse(clf, unlabeled, NCConfig(steps=2))
    partial = Dataset("p", rng.random((6, 16, 16, 3)).astype(np.float32),
                      np.zeros(6, dtype=np.int64), num_classes=3)
    with pytest.raises(ConfigError, match="covers 1 of 3"):
        neural_cleanse(clf, partial, NCConfig(steps=2))


# ------------------------------------------------- spectral signature (pipe)

def test_spectral_defense_group_selection_and_removal_budget():
    train = generate_shapes(3, 10, 16, seed=1, name="sp")
    poison_mask = np.zeros(len(train), dtype=bool)
    target_rows = np.flatnonzero(train.labels == 0)
    victims = target_rows[:4]
    poison_mask[victims] = True
    images = train.images.copy()
    images[victims, 2:14, 2:14, :] = 1.0  # heavy-handed visual shift
    poisoned = Dataset("sp-poisoned", images, train.labels,
                       num_classes=train.num_classes)
    model = MIMModel(TINY, seed=0)

    rep = spectral_signature_defense(poisoned, model, poison_mask,
                                     target_class=0)
    assert rep.details["group"] == "class 0"
    assert len(rep.removed_ids) == round(1.5 * 4)
    assert set(rep.removed_ids) <= {poisoned.ids[i] for i in target_rows}
    assert rep.b_score > rep.c_score and rep.flagged

    # unlabeled grouping scans the whole set
    rep_all = spectral_signature_defense(
        Dataset("sp-unlab", images), model, poison_mask)
    assert rep_all.details["group"] == "all samples"
    assert len(rep_all.scores["per_sample"]) == len(train)


def test_spectral_defense_skips_tiny_groups():
    train = generate_shapes(3, 2, 16, seed=2, name="sp-small")
    keep = np.flatnonzero(train.labels != 0)[:4].tolist() + \
        np.flatnonzero(train.labels == 0)[:1].tolist()
    small = train.subset(keep)
    rep = spectral_signature_defense(small, MIMModel(TINY, seed=0),
                                     np.zeros(len(small), dtype=bool),
                                     target_class=0)
    assert not rep.flagged
    assert "skipped" in rep.details["note"]


def test_spectral_defense_mask_must_align():
    train = generate_shapes(3, 4, 16, seed=3, name="sp-bad")
    with pytest.raises(ConfigError):
        spectral_signature_defense(train, MIMModel(TINY, seed=0),
                                   np.zeros(5, dtype=bool))
