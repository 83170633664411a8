import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from idpl.datamodel import StateError, ValidationError
from idpl.pldg import InstanceRecord
from idpl.scic import (
    SubdomainSplit,
    instance_confidence,
    random_split,
    split_domain,
    split_instances,
)
from oracles import confidence_loop, image_is_easy


def rec(probs, image_id="x"):
    return InstanceRecord(image_id, np.zeros((1, 2), dtype=np.int64), np.zeros(2), 0,
                          None if probs is None else np.asarray(probs, float))


def test_confidence_examples():
    assert instance_confidence(rec([1.0, 0.0]), [1.0, 0.5]) == 1.0
    k = instance_confidence(rec([0.8, 0.2]), [0.75, 0.9])
    assert abs(k - 0.6) < 1e-12
    easy, hard = split_instances([rec([0.8, 0.2])], 0.6, confidences=[0.6])
    assert len(easy) == 1 and not hard
    with pytest.raises(StateError):
        instance_confidence(rec(None), [0.5, 0.5])


def test_confidence_matches_product_oracle(rng):
    for _ in range(50):
        p = rng.dirichlet(np.ones(4))
        fused = rng.uniform(0.05, 1, 4)
        assert abs(instance_confidence(rec(p), fused) - confidence_loop(list(p), list(fused))) < 1e-12


def test_split_instances_matches_comparison(rng):
    insts = [rec(rng.dirichlet(np.ones(3))) for _ in range(40)]
    conf = rng.random(40)
    easy, hard = split_instances(insts, 0.5, confidences=conf)
    assert [id(i) for i in easy] == [id(i) for i, k in zip(insts, conf) if k >= 0.5]
    assert len(easy) + len(hard) == 40
    all_easy, none_hard = split_instances(insts, 0.5, confidences=np.ones(40))
    assert len(all_easy) == 40 and not none_hard


def test_split_domain_rules():
    per = {"a": [rec([1, 0], "a")] * 10, "b": [], "c": [rec([1, 0], "c")] * 10}
    conf = {"a": [0.9] * 7 + [0.1] * 3, "b": [], "c": [0.9] * 6 + [0.1] * 4}
    s = split_domain(per, 0.6, 0.7, confidences=conf)
    assert s.easy_ids == {"a"} and s.hard_ids == {"b", "c"}
    assert s.per_image_counts == {"a": (7, 3), "b": (0, 0), "c": (6, 4)}
    with pytest.raises(ValidationError):
        split_domain(per, 0.6, 1.0, confidences=conf)
    with pytest.raises(ValidationError):
        split_domain(per, 0.0, 0.5, confidences=conf)


def _random_case(seed):
    r = np.random.default_rng(seed)
    per, conf = {}, {}
    for i in range(12):
        n = int(r.integers(0, 6))
        per[f"im{i}"] = [rec([1, 0], f"im{i}")] * n
        conf[f"im{i}"] = list(r.random(n))
    return per, conf


@given(st.integers(0, 10_000), st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.floats(0, 0.5))
def test_monotone_in_lambda_and_beta(seed, beta, lam, d):
    per, conf = _random_case(seed)
    lo = split_domain(per, beta, lam, confidences=conf)
    hi = split_domain(per, beta, min(lam + d, 0.99), confidences=conf)
    assert hi.easy_ids <= lo.easy_ids
    hb = split_domain(per, min(beta + d, 0.99), lam, confidences=conf)
    for iid in per:
        assert hb.per_image_counts[iid][0] <= lo.per_image_counts[iid][0]
    # partition and oracle agreement
    assert lo.easy_ids | lo.hard_ids == set(per) and not lo.easy_ids & lo.hard_ids
    for iid in per:
        assert (iid in lo.easy_ids) == image_is_easy(conf[iid], beta, lam)


def test_split_with_fused_thresholds():
    per = {"a": [rec([0.9, 0.1], "a")], "b": [rec([0.9, 0.1], "b")]}
    fused = {"a": np.array([0.9, 0.9]), "b": np.array([0.5, 0.9])}
    s = split_domain(per, 0.6, 0.5, fused=fused)
    assert s.easy_ids == {"a"} and s.hard_ids == {"b"}


def test_json_round_trip_and_determinism():
    per, conf = _random_case(3)
    a = split_domain(per, 0.6, 0.7, confidences=conf)
    b = split_domain(per, 0.6, 0.7, confidences=conf)
    assert a.dumps() == b.dumps()
    data = json.loads(a.dumps())
    assert set(data) == {"beta", "lambda", "easy", "hard", "counts"}
    back = SubdomainSplit.from_json(data)
    assert back.easy_ids == a.easy_ids and back.per_image_counts == a.per_image_counts
    with pytest.raises(ValidationError):
        SubdomainSplit({"x"}, {"x"}, 0.5, 0.5)


def test_random_split_half():
    ids = [f"i{k}" for k in range(9)]
    s = random_split(ids, np.random.default_rng(0))
    assert len(s.easy_ids) == 4 and len(s.hard_ids) == 5
    assert random_split(ids, np.random.default_rng(0)).easy_ids == s.easy_ids
