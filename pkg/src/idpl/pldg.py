"""Instance-level dynamic pseudo-label generation.

Per target image: threshold the probability map with the current class
thresholds, cut each class's activation region into 4-connected instances,
classify the pooled instance embeddings, average the instance confidences per
class into local thresholds and fuse them with the global ones under
momentum ``alpha``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from idpl.datamodel import (
    IGNORE,
    ProbMap,
    PseudoLabelMap,
    ShapeError,
    StateError,
    ValidationError,
    check_finite,
)

THETA_MIN = 0.05
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _check_alpha(alpha: float) -> float:
    # closed interval: the alpha sweep evaluates both endpoints
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def _check_thresholds(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise ShapeError("thresholds must be a length-C vector")
    check_finite(theta, "thresholds")
    if np.any(theta <= 0) or np.any(theta > 1):
        raise ValidationError("thresholds must lie in (0, 1]")
    return theta


def fuse_thresholds(global_, local, alpha: float) -> np.ndarray:
    """alpha * global + (1 - alpha) * local; NaN (absent) local entries keep global."""
    global_ = np.asarray(global_, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    fused = alpha * global_ + (1.0 - alpha) * local
    return np.where(np.isnan(local), global_, fused)


@dataclass
class ClassThresholds:
    global_: np.ndarray
    alpha: float = 0.9
    local: dict[str, np.ndarray] = field(default_factory=dict)
    fused: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.global_ = _check_thresholds(self.global_)
        self.alpha = _check_alpha(self.alpha)

    @property
    def num_classes(self) -> int:
        return len(self.global_)

    def fused_for(self, image_id: str) -> np.ndarray:
        return self.fused.get(image_id, self.global_)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "global": self.global_.tolist(),
            "local": {k: [None if np.isnan(v) else float(v) for v in arr]
                      for k, arr in sorted(self.local.items())},
            "fused": {k: arr.tolist() for k, arr in sorted(self.fused.items())},
        }


def init_global_thresholds(probmaps: Iterable[ProbMap], num_classes: int,
                           quantile: float = 0.9, lo: float = 0.5,
                           hi: float = 0.95) -> np.ndarray:
    """Per class, the ``quantile`` of max-probability over pixels predicted as that class."""
    per_class = [[] for _ in range(num_classes)]
    for pm in probmaps:
        probs = pm.probs.reshape(-1, num_classes)
        pred = probs.argmax(1)
        conf = probs.max(1)
        for c in range(num_classes):
            per_class[c].append(conf[pred == c])
    theta = np.full(num_classes, hi)
    for c, chunks in enumerate(per_class):
        vals = np.concatenate(chunks) if chunks else np.empty(0)
        if vals.size:
            theta[c] = np.quantile(vals.astype(np.float64), quantile)
    return np.clip(theta, lo, hi)


def assign_pseudo_labels(probs, thresholds) -> PseudoLabelMap:
    """Thresholded argmax of p_c / theta_c; pixels with no ratio >= 1 are IGNORE."""
    p = probs.probs if isinstance(probs, ProbMap) else np.asarray(probs)
    theta = _check_thresholds(thresholds)
    if p.shape[-1] != len(theta):
        raise ShapeError(f"{p.shape[-1]} classes but {len(theta)} thresholds")
    scores = p.astype(np.float64) / theta
    best = scores.argmax(axis=-1)  # first maximum: ties go to the lowest class id
    keep = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0] >= 1.0
    return PseudoLabelMap(np.where(keep, best, IGNORE).astype(np.int64))


@dataclass
class InstanceRecord:
    image_id: str
    region: np.ndarray  # (K, 2) integer (row, col) coordinates on the feature grid
    embedding: np.ndarray
    pseudo_class: int
    class_probs: np.ndarray | None = None

    def __post_init__(self):
        if len(self.region) == 0:
            raise ValidationError("instance region must be non-empty")

    @property
    def predicted_class(self) -> int:
        if self.class_probs is None:
            raise StateError("instance has not been classified yet")
        return int(np.argmax(self.class_probs))

    @property
    def area(self) -> int:
        return len(self.region)


def extract_instances(pseudo: PseudoLabelMap, features, image_id: str = "",
                      min_area: int = 8) -> list[InstanceRecord]:
    """4-connected same-class components of ``pseudo`` with at least ``min_area`` cells.

    ``features`` is H' x W' x F; a finer pseudo map is nearest-subsampled onto it.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3:
        raise ShapeError("features must be H' x W' x F")
    h, w = features.shape[:2]
    if pseudo.shape != (h, w):
        sy, sx = pseudo.shape[0] // h, pseudo.shape[1] // w
        if sy != sx or sy * h != pseudo.shape[0] or sx * w != pseudo.shape[1]:
            raise ShapeError(f"pseudo map {pseudo.shape} not a multiple of features {(h, w)}")
        pseudo = pseudo.downsample(sy)
    labels = pseudo.labels
    out = []
    for c in np.unique(labels):
        if c == IGNORE:
            continue
        comp, n = ndimage.label(labels == c, structure=FOUR_CONNECTED)
        for k in range(1, n + 1):
            region = np.argwhere(comp == k)
            if len(region) < min_area:
                continue
            emb = features[region[:, 0], region[:, 1]].mean(axis=0)
            out.append(InstanceRecord(image_id, region, emb, int(c)))
    return out


@dataclass
class InstanceClassifier:
    """Linear map + softmax over pooled instance embeddings (no bias)."""

    weights: np.ndarray
    trained_steps: int = 0

    @classmethod
    def zeros(cls, in_dim: int, num_classes: int) -> "InstanceClassifier":
        return cls(np.zeros((in_dim, num_classes)))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        check_finite(self.weights, "classifier weights")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def predict_proba(self, embeddings) -> np.ndarray:
        x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"embedding length {x.shape[1]} != classifier input {self.in_dim}")
        z = x @ self.weights
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, embeddings, targets) -> float:
        p = self.predict_proba(embeddings)
        return float(-np.mean(np.log(p[np.arange(len(targets)), targets] + 1e-300)))


def classify_instance(clf: InstanceClassifier, inst: InstanceRecord) -> np.ndarray:
    probs = clf.predict_proba(inst.embedding)[0]
    inst.class_probs = probs
    return probs


def train_instance_classifier(clf: InstanceClassifier, instances: Sequence[InstanceRecord],
                              steps: int = 50, lr: float = 1.0,
                              prototypes: Mapping[int, np.ndarray] | None = None
                              ) -> InstanceClassifier:
    """Full-batch gradient descent on cross-entropy (embedding -> pseudo class).

    The step is ``lr`` over the curvature bound 0.5 * mean ||x||^2, so lr <= 1
    gives monotone descent on this convex objective.
    """
    xs = [inst.embedding for inst in instances]
    ys = [inst.pseudo_class for inst in instances]
    for c, proto in (prototypes or {}).items():
        if np.any(proto):
            xs.append(proto)
            ys.append(int(c))
    if not xs or steps <= 0:
        return clf
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys)
    target = np.zeros((len(y), clf.num_classes))
    target[np.arange(len(y)), y] = 1.0
    curvature = 0.5 * np.mean(np.sum(x * x, axis=1))
    step = lr / max(curvature, 1e-12)
    w = clf.weights.copy()
    for _ in range(steps):
        z = x @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= step * x.T @ (p - target) / len(y)
    return InstanceClassifier(w, clf.trained_steps + steps)


def class_sampling_weight(probs, instances: Sequence[InstanceRecord], c: int) -> np.ndarray:
    """Mean class-c probability times the confidence-weighted mean embedding of L_c."""
    p = probs.probs if isinstance(probs, ProbMap) else np.asarray(probs)
    members = [inst for inst in instances if inst.predicted_class == c]
    if not instances:
        return np.zeros(0)
    dim = len(instances[0].embedding)
    if not members:
        return np.zeros(dim)
    wts = np.array([inst.class_probs[c] for inst in members], dtype=np.float64)
    embs = np.array([inst.embedding for inst in members], dtype=np.float64)
    pooled = (wts[:, None] * embs).sum(0) / wts.sum()
    return float(p[..., c].mean()) * pooled


def local_thresholds(instances: Sequence[InstanceRecord], num_classes: int) -> np.ndarray:
    """Per class, mean of max_j p(j|I) over instances predicted as that class; NaN if none."""
    sums = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for inst in instances:
        if inst.class_probs is None:
            raise StateError("instances must be classified before thresholding")
        c = inst.predicted_class
        sums[c] += float(np.max(inst.class_probs))
        counts[c] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def update_thresholds(state: ClassThresholds, instances: Sequence[InstanceRecord],
                      image_ids: Iterable[str] = ()) -> ClassThresholds:
    """One batch of threshold updates.

    Local thresholds and fused thresholds are computed per image against the
    incoming global state; the global state then moves by the same momentum
    toward the batch mean of the local thresholds, clamped to [THETA_MIN, 1].
    ``image_ids`` names images of the batch that produced no instances.
    """
    _check_alpha(state.alpha)
    by_image: dict[str, list[InstanceRecord]] = defaultdict(list, {i: [] for i in image_ids})
    for inst in instances:
        by_image[inst.image_id].append(inst)
    C = state.num_classes
    local = dict(state.local)
    fused = dict(state.fused)
    batch_locals = []
    for iid, insts in by_image.items():
        loc = local_thresholds(insts, C)
        local[iid] = loc
        fused[iid] = fuse_thresholds(state.global_, loc, state.alpha)
        batch_locals.append(loc)
    new_global = state.global_.copy()
    if batch_locals:
        stacked = np.vstack(batch_locals)
        present = ~np.all(np.isnan(stacked), axis=0)
        with np.errstate(invalid="ignore"):
            mean_local = np.nanmean(np.where(present, stacked, 0.0), axis=0)
        new_global = np.where(
            present, state.alpha * new_global + (1.0 - state.alpha) * mean_local, new_global
        )
        new_global = np.clip(new_global, THETA_MIN, 1.0)
    return replace(state, global_=new_global, local=local, fused=fused)


@dataclass
class PLDGResult:
    thresholds: ClassThresholds
    classifier: InstanceClassifier
    pseudo: dict[str, PseudoLabelMap]
    instances: dict[str, list[InstanceRecord]]
    prototypes: dict[int, np.ndarray]


def generate_pseudo_labels(state: ClassThresholds, clf: InstanceClassifier,
                           probmaps: Mapping[str, ProbMap],
                           features: Mapping[str, np.ndarray], *,
                           batch_size: int = 8, min_area: int = 8,
                           clf_steps: int = 50, clf_lr: float = 1.0) -> PLDGResult:
    """Run the dynamic-threshold procedure batch by batch over ``probmaps``.

    Per batch: pseudo labels under the current global thresholds seed the
    instances, the instance classifier is refit on them (plus the per-class
    sampling-weight prototypes), the instances are classified, thresholds
    are updated, and the final pseudo labels use each image's fused thresholds.
    """
    ids = list(probmaps)
    C = state.num_classes
    pseudo, all_insts = {}, {}
    prototypes: dict[int, np.ndarray] = {}
    for start in range(0, len(ids), batch_size):
        batch = ids[start : start + batch_size]
        seeded = {}
        for iid in batch:
            first = assign_pseudo_labels(probmaps[iid], state.global_)
            seeded[iid] = extract_instances(first, features[iid], iid, min_area)
        flat = [inst for iid in batch for inst in seeded[iid]]
        clf = train_instance_classifier(clf, flat, clf_steps, clf_lr, prototypes)
        for inst in flat:
            classify_instance(clf, inst)
        for iid in batch:
            for c in range(C):
                proto = class_sampling_weight(probmaps[iid], seeded[iid], c)
                if proto.size and np.any(proto):
                    prev = prototypes.get(c)
                    prototypes[c] = proto if prev is None else 0.5 * (prev + proto)
        state = update_thresholds(state, flat, image_ids=batch)
        for iid in batch:
            pseudo[iid] = assign_pseudo_labels(probmaps[iid], state.fused_for(iid))
            all_insts[iid] = seeded[iid]
    return PLDGResult(state, clf, pseudo, all_insts, prototypes)
