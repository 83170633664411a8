"""Instance confidence and the easy/difficult split of the target domain."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from idpl.datamodel import StateError, ValidationError
from idpl.pldg import InstanceRecord


def _check_unit(name: str, value: float) -> float:
    if not 0.0 < value < 1.0:
        raise ValidationError(f"{name} must lie in (0, 1), got {value}")
    return float(value)


def instance_confidence(inst: InstanceRecord, fused) -> float:
    """k_I = p(c*|I) * theta_{c*} for the instance's predicted class c*."""
    if inst.class_probs is None:
        raise StateError("instance has no class probabilities")
    c = inst.predicted_class
    return float(inst.class_probs[c]) * float(np.asarray(fused)[c])


def split_instances(instances: Sequence[InstanceRecord], beta: float, fused=None,
                    confidences: Sequence[float] | None = None):
    """(easy, hard) with easy = {k_I >= beta}.

    Confidences are computed from ``fused`` unless given explicitly.
    """
    _check_unit("beta", beta)
    if confidences is None:
        if fused is None:
            raise ValidationError("need fused thresholds or precomputed confidences")
        confidences = [instance_confidence(inst, fused) for inst in instances]
    easy, hard = [], []
    for inst, k in zip(instances, confidences):
        (easy if k >= beta else hard).append(inst)
    return easy, hard


@dataclass
class SubdomainSplit:
    easy_ids: set[str]
    hard_ids: set[str]
    beta: float
    lambda_: float
    per_image_counts: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.easy_ids & self.hard_ids:
            raise ValidationError("an image cannot be both easy and hard")

    @property
    def all_ids(self) -> set[str]:
        return self.easy_ids | self.hard_ids

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "lambda": self.lambda_,
            "easy": sorted(self.easy_ids),
            "hard": sorted(self.hard_ids),
            "counts": {k: list(v) for k, v in sorted(self.per_image_counts.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data: dict) -> "SubdomainSplit":
        return cls(
            set(data["easy"]),
            set(data["hard"]),
            data["beta"],
            data["lambda"],
            {k: tuple(v) for k, v in data.get("counts", {}).items()},
        )


def split_domain(per_image: Mapping[str, Sequence[InstanceRecord]], beta: float,
                 lambda_: float, fused: Mapping[str, np.ndarray] | None = None,
                 confidences: Mapping[str, Sequence[float]] | None = None) -> SubdomainSplit:
    """Image goes to the easy subdomain iff its easy-instance fraction >= lambda.

    Images without instances go to the difficult subdomain.
    """
    _check_unit("beta", beta)
    _check_unit("lambda", lambda_)
    easy_ids, hard_ids, counts = set(), set(), {}
    for iid, insts in per_image.items():
        if confidences is not None:
            easy, hard = split_instances(insts, beta, confidences=confidences[iid])
        else:
            if fused is None:
                raise ValidationError("need fused thresholds or precomputed confidences")
            easy, hard = split_instances(insts, beta, fused[iid])
        n_e, n_h = len(easy), len(hard)
        counts[iid] = (n_e, n_h)
        if n_e + n_h > 0 and n_e / (n_e + n_h) >= lambda_:
            easy_ids.add(iid)
        else:
            hard_ids.add(iid)
    return SubdomainSplit(easy_ids, hard_ids, beta, lambda_, counts)


def random_split(ids: Sequence[str], rng: np.random.Generator, beta: float = 0.6,
                 lambda_: float = 0.7) -> SubdomainSplit:
    """Half the images (rounded down) to the easy subdomain, chosen at random."""
    ids = sorted(ids)
    order = rng.permutation(len(ids))
    n_easy = len(ids) // 2
    easy = {ids[i] for i in order[:n_easy]}
    return SubdomainSplit(easy, set(ids) - easy, beta, lambda_)
