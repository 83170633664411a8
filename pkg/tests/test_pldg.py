import numpy as np
import pytest
from hypothesis import given, strategies as st

from idpl.datamodel import IGNORE, ProbMap, PseudoLabelMap, StateError, ValidationError
from idpl.pldg import (
    THETA_MIN,
    ClassThresholds,
    InstanceClassifier,
    InstanceRecord,
    assign_pseudo_labels,
    class_sampling_weight,
    classify_instance,
    extract_instances,
    fuse_thresholds,
    generate_pseudo_labels,
    init_global_thresholds,
    local_thresholds,
    train_instance_classifier,
    update_thresholds,
)
from conftest import random_probmap
from oracles import flood_fill_components, pseudo_label_pixel, weighted_prototype


def pm(*pixels):
    return ProbMap(np.array([list(pixels)], dtype=np.float32))


# --- assign_pseudo_labels ---------------------------------------------------------


def test_assign_examples():
    assert assign_pseudo_labels(pm([0.9, 0.1]), [0.5, 0.5]).labels[0, 0] == 0
    assert assign_pseudo_labels(pm([0.4, 0.6]), [0.9, 0.9]).labels[0, 0] == IGNORE
    # the ratio, not the raw probability, decides
    assert assign_pseudo_labels(pm([0.6, 0.4]), [0.9, 0.4]).labels[0, 0] == 1


def test_assign_tie_goes_to_lowest_class():
    assert assign_pseudo_labels(pm([0.5, 0.5]), [0.5, 0.5]).labels[0, 0] == 0


def test_assign_rejects_bad_thresholds():
    with pytest.raises(ValidationError):
        assign_pseudo_labels(pm([0.5, 0.5]), [0.0, 0.5])
    with pytest.raises(ValidationError):
        assign_pseudo_labels(pm([0.5, 0.5]), [0.5, 1.5])


def test_assign_matches_exhaustive_oracle(rng):
    for _ in range(20):
        probs = random_probmap(rng, 8, 8, 4)
        theta = np.full(4, 0.5)
        got = assign_pseudo_labels(probs, theta).labels
        p64 = probs.probs.astype(np.float64)
        for y in range(8):
            for x in range(8):
                assert got[y, x] == pseudo_label_pixel(list(p64[y, x]), list(theta))


@given(st.integers(0, 3), st.floats(0.05, 0.95), st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_count_non_increasing_in_theta(c, t, dt, seed):
    probs = random_probmap(np.random.default_rng(seed), 6, 6, 4)
    theta = np.random.default_rng(seed + 1).uniform(0.05, 1.0, 4)
    lo, hi = theta.copy(), theta.copy()
    lo[c], hi[c] = t, min(t + dt, 1.0)
    n_lo = np.sum(assign_pseudo_labels(probs, lo).labels == c)
    n_hi = np.sum(assign_pseudo_labels(probs, hi).labels == c)
    assert n_hi <= n_lo


def test_coverage_bounds(rng):
    probs = random_probmap(rng, 6, 6, 3)
    # theta = 1: a pixel is labelled iff its max probability is exactly 1
    out = assign_pseudo_labels(probs, np.ones(3))
    assert np.array_equal(out.labels != IGNORE, probs.probs.max(-1) >= 1.0)
    onehot = ProbMap(np.eye(3, dtype=np.float32)[[[0, 1], [2, 0]]])
    assert assign_pseudo_labels(onehot, np.ones(3)).coverage == 1.0
    assert assign_pseudo_labels(probs, np.full(3, 1e-6)).coverage == 1.0


# --- extract_instances --------------------------------------------------------------


def test_two_blobs_and_empty():
    labels = np.full((6, 6), IGNORE)
    labels[0:2, 0:2] = 1
    labels[4:6, 4:6] = 1
    insts = extract_instances(PseudoLabelMap(labels), np.ones((6, 6, 2)), "a", min_area=1)
    assert len(insts) == 2 and all(i.pseudo_class == 1 for i in insts)
    assert extract_instances(PseudoLabelMap(np.full((6, 6), IGNORE)), np.ones((6, 6, 2))) == []


def test_diagonal_is_not_connected():
    labels = np.full((3, 3), IGNORE)
    labels[0, 0] = labels[1, 1] = 2
    assert len(extract_instances(PseudoLabelMap(labels), np.zeros((3, 3, 1)), min_area=1)) == 2


def test_five_components_match_flood_fill():
    labels = np.full((16, 16), IGNORE)
    labels[0:3, 0:4] = 0
    labels[0:4, 8:11] = 0
    labels[6:9, 2:5] = 1
    labels[12:16, 12:16] = 2
    labels[10:13, 0:3] = 1
    labels[15, 0] = 1  # speckle below min_area
    insts = extract_instances(PseudoLabelMap(labels), np.zeros((16, 16, 2)), min_area=8)
    assert len(insts) == 5
    ref = flood_fill_components(labels.tolist(), 8)
    got = sorted((i.pseudo_class, sorted(map(tuple, i.region.tolist()))) for i in insts)
    assert got == sorted(ref)


def test_flood_fill_oracle_random(rng):
    for _ in range(30):
        labels = rng.integers(0, 3, size=(10, 10))
        labels[rng.random((10, 10)) < 0.3] = IGNORE
        feats = rng.normal(size=(10, 10, 4)).astype(np.float32)
        insts = extract_instances(PseudoLabelMap(labels), feats, min_area=2)
        ref = flood_fill_components(labels.tolist(), 2)
        got = sorted((i.pseudo_class, sorted(map(tuple, i.region.tolist()))) for i in insts)
        assert got == sorted(ref)
        for inst in insts:
            r = inst.region
            np.testing.assert_allclose(inst.embedding, feats[r[:, 0], r[:, 1]].mean(0), atol=1e-6)


def test_pseudo_map_downsampled_to_features():
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[:, 4:] = 1
    insts = extract_instances(PseudoLabelMap(labels), np.zeros((2, 2, 3)), min_area=1)
    assert sorted(i.pseudo_class for i in insts) == [0, 1]
    assert all(i.area == 2 for i in insts)


# --- classifier -------------------------------------------------------------------------


def rec(emb, cls=0, probs=None, image_id="x"):
    return InstanceRecord(image_id, np.zeros((1, 2), dtype=np.int64), np.asarray(emb, float),
                          cls, None if probs is None else np.asarray(probs, float))


def test_classify_zero_weights_uniform():
    clf = InstanceClassifier.zeros(3, 4)
    np.testing.assert_allclose(classify_instance(clf, rec([1, 2, 3])), 0.25)


def test_classify_aligned_axis():
    clf = InstanceClassifier(np.eye(3) * 5)
    assert np.argmax(classify_instance(clf, rec([0, 1, 0]))) == 1


def test_classify_matches_matmul_softmax(rng):
    for _ in range(20):
        W = rng.normal(size=(5, 3))
        e = rng.normal(size=5)
        z = e @ W
        want = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        inst = rec(e)
        np.testing.assert_allclose(classify_instance(InstanceClassifier(W), inst), want, atol=1e-6)
        np.testing.assert_allclose(inst.class_probs, want, atol=1e-6)


def test_classify_dimension_mismatch():
    with pytest.raises(ValidationError):
        classify_instance(InstanceClassifier.zeros(3, 2), rec([1, 2]))


def test_predicted_class_requires_probs():
    with pytest.raises(StateError):
        rec([1.0]).predicted_class


def test_training_separates_clusters(rng):
    a = rng.normal(0, 0.3, size=(20, 4)) + [2, 0, 0, 1]
    b = rng.normal(0, 0.3, size=(20, 4)) + [-2, 0, 0, 1]
    insts = [rec(x, 0) for x in a] + [rec(x, 1) for x in b]
    clf = train_instance_classifier(InstanceClassifier.zeros(4, 2), insts, steps=50)
    pred = clf.predict_proba([i.embedding for i in insts]).argmax(1)
    assert np.all(pred == [i.pseudo_class for i in insts])
    assert clf.trained_steps == 50


def test_training_monotone_on_repeated_instance():
    insts = [rec([0.5, -1.0, 2.0], 2)] * 4
    clf = InstanceClassifier.zeros(3, 3)
    losses = []
    for _ in range(20):
        clf = train_instance_classifier(clf, insts, steps=1)
        losses.append(clf.loss([i.embedding for i in insts], [2] * 4))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_training_noop_cases():
    clf = InstanceClassifier(np.ones((2, 2)))
    assert train_instance_classifier(clf, [], steps=10) is clf
    same = train_instance_classifier(clf, [rec([1, 1], 0)], steps=0)
    np.testing.assert_array_equal(same.weights, clf.weights)


# --- sampling weight ------------------------------------------------------------------


def test_sampling_weight_examples():
    uniform = ProbMap(np.full((2, 2, 4), 0.25, dtype=np.float32))
    i0 = rec([1.0, 2.0], 0, [0.7, 0.1, 0.1, 0.1])
    np.testing.assert_array_equal(class_sampling_weight(uniform, [i0], 3), [0, 0])
    np.testing.assert_allclose(class_sampling_weight(uniform, [i0], 0), [0.25, 0.5])


def test_sampling_weight_matches_oracle(rng):
    probs = random_probmap(rng, 4, 4, 3)
    insts = []
    for _ in range(3):
        cp = rng.dirichlet(np.ones(3))
        cp[1] += 2
        cp /= cp.sum()
        insts.append(rec(rng.normal(size=4), 1, cp))
    got = class_sampling_weight(probs, insts, 1)
    want = weighted_prototype(float(probs.probs[..., 1].astype(np.float64).mean()),
                              [i.class_probs[1] for i in insts], [list(i.embedding) for i in insts])
    np.testing.assert_allclose(got, want, atol=1e-6)


# --- thresholds -----------------------------------------------------------------------


def test_fusion_arithmetic():
    fused = fuse_thresholds([0.8], [0.6], 0.9)
    assert abs(fused[0] - 0.78) < 1e-12
    np.testing.assert_array_equal(fuse_thresholds([0.8, 0.5], [np.nan, 0.5], 0.9), [0.8, 0.5])


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_fusion_contraction(g, l, a):
    f = fuse_thresholds([g], [l], a)[0]
    assert abs(f - g) <= (1 - a) * abs(l - g) + 1e-12
    assert min(g, l) - 1e-12 <= f <= max(g, l) + 1e-12


def test_alpha_validation():
    with pytest.raises(ValidationError):
        ClassThresholds(np.full(2, 0.5), alpha=1.5)
    with pytest.raises(ValidationError):
        ClassThresholds(np.array([0.0, 0.5]))


def test_local_thresholds_mean_max_prob():
    insts = [rec([0], 0, [0.9, 0.1]), rec([0], 0, [0.7, 0.3]), rec([0], 1, [0.2, 0.8])]
    np.testing.assert_allclose(local_thresholds(insts, 3)[:2], [0.8, 0.8])
    assert np.isnan(local_thresholds(insts, 3)[2])


def test_update_thresholds_absent_class_keeps_global():
    st_ = ClassThresholds(np.array([0.8, 0.7, 0.6]), alpha=0.9)
    new = update_thresholds(st_, [rec([0], 0, [0.6, 0.2, 0.2], "a")], image_ids=["a", "b"])
    np.testing.assert_allclose(new.fused["a"], [0.9 * 0.8 + 0.1 * 0.6, 0.7, 0.6])
    np.testing.assert_allclose(new.fused["b"], [0.8, 0.7, 0.6])
    # global moves toward the batch mean of present local values only
    np.testing.assert_allclose(new.global_, [0.78, 0.7, 0.6])
    assert new.fused_for("unseen") is new.global_


def test_global_clamped_to_theta_min():
    st_ = ClassThresholds(np.array([0.06, 0.5]), alpha=0.0)
    insts = [rec([0], 0, [0.5, 0.5], "a")]
    new = update_thresholds(st_, insts, ["a"])
    assert new.global_[0] >= THETA_MIN


def test_init_global_thresholds(rng):
    probs = [random_probmap(rng, 8, 8, 3, sharp=4.0) for _ in range(4)]
    theta = init_global_thresholds(probs, 3, 0.9, 0.5, 0.95)
    assert np.all((theta >= 0.5) & (theta <= 0.95))
    # a class no pixel predicts falls back to the upper clamp
    one = ProbMap(np.tile(np.array([0.8, 0.1, 0.1], np.float32), (2, 2, 1)))
    np.testing.assert_allclose(init_global_thresholds([one], 3), [0.8, 0.95, 0.95], atol=1e-6)


def test_generate_pseudo_labels_end_to_end(rng):
    probs = {f"i{k}": random_probmap(rng, 8, 8, 3, sharp=4.0) for k in range(5)}
    feats = {k: rng.normal(size=(8, 8, 4)).astype(np.float32) for k in probs}
    state = ClassThresholds(np.full(3, 0.6), alpha=0.9)
    res = generate_pseudo_labels(state, InstanceClassifier.zeros(4, 3), probs, feats,
                                 batch_size=2, min_area=2, clf_steps=10)
    assert set(res.pseudo) == set(probs) == set(res.instances)
    for iid, p in res.pseudo.items():
        expect = assign_pseudo_labels(probs[iid], res.thresholds.fused_for(iid))
        np.testing.assert_array_equal(p.labels, expect.labels)
    for insts in res.instances.values():
        for inst in insts:
            assert abs(inst.class_probs.sum() - 1) < 1e-5
    assert np.all((res.thresholds.global_ >= THETA_MIN) & (res.thresholds.global_ <= 1))
