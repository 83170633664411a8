"""Three-stage schedule: pre-training (PT), pseudo labels + split, intra-subdomain rounds.

Hidden target labels never enter a training path: training functions accept
``UnlabeledImage`` only, and evaluation goes through ``HiddenLabelMonitor``,
which exposes metrics and nothing else.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from idpl import evalkit, pldg, scic, sasa
from idpl.datamodel import (
    IGNORE,
    LabeledImage,
    NumericError,
    ProbMap,
    StateError,
    UnlabeledImage,
    ValidationError,
)
from idpl.segnet import (
    InterDiscriminator,
    IntraDiscriminator,
    SegModel,
    checkpoint_name,
    discriminate_intra,
    image_batch,
    parameter_hash,
    save_checkpoint,
    self_information,
)
from idpl.synthdata import DomainShiftSpec, SceneSpec, generate_source, generate_target

log = logging.getLogger(__name__)

PSEUDO_MODES = ("dynamic", "fixed")
SPLIT_MODES = ("confidence", "random")
ADV_MODES = ("sasa", "plain", "none")


# Reference schedule for full-size crops. The TrainConfig defaults below are
# retuned for 32x32 synthetic scenes on one CPU core.
PUBLISHED_HPARAMS = {
    "alpha": 0.9,
    "beta": 0.6,
    "lambda": 0.7,
    "lr_g": 2e-4,
    "lr_d": 1e-4,
    "poly_power": 0.9,
    "adam_betas": (0.9, 0.99),
}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.9
    beta: float = 0.6
    lambda_: float = 0.7
    lr_g: float = 3e-3
    lr_d: float = 1e-4
    lr_d_intra: float | None = 1e-3  # attention heads + intra-domain D; None -> lr_d
    lr_g_round: float | None = 3e-4  # generator during self-training; None -> lr_g
    poly_power: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 8
    pt_steps: int = 1200
    rounds: int = 3
    steps_per_round: int = 100
    adv_weight_pt: float = 1e-3
    adv_weight_intra: float = 1e-2
    ground_weight: float = 1.0
    min_area: int = 2
    theta_init_quantile: float = 0.9
    theta_init_clamp: tuple[float, float] = (0.5, 0.95)
    clf_steps: int = 50
    clf_lr: float = 1.0
    features: int = 32
    key_dim: int = 16
    num_classes: int = 6
    height: int = 32
    width: int = 32
    n_source: int = 64
    n_target: int = 64
    n_eval: int = 32
    hue_shift: float = 0.03
    noise_sigma: float = 0.12
    texture_warp: float = 1.0
    brightness_gamma: float = 1.5
    severity_spread: float = 0.8
    seed: int = 7
    pseudo_mode: str = "dynamic"
    fixed_threshold: float = 0.9
    split_mode: str = "confidence"
    adversarial: str = "sasa"
    pt_adversarial: bool = True
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("beta", "lambda_"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name.rstrip('_')} must lie in (0, 1), got {v}")
        for name in ("lr_g", "lr_d", "poly_power"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("lr_d_intra", "lr_g_round"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.batch_size < 1 or self.rounds < 0 or self.steps_per_round < 0 or self.pt_steps < 0:
            raise ValidationError("batch_size must be >= 1 and step counts >= 0")
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ValidationError(f"pseudo_mode must be one of {PSEUDO_MODES}")
        if self.split_mode not in SPLIT_MODES:
            raise ValidationError(f"split_mode must be one of {SPLIT_MODES}")
        if self.adversarial not in ADV_MODES:
            raise ValidationError(f"adversarial must be one of {ADV_MODES}")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "theta_init_clamp", tuple(self.theta_init_clamp))

    # config files use "lambda" for lambda_
    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["adam_betas"] = list(d["adam_betas"])
        d["theta_init_clamp"] = list(d["theta_init_clamp"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def intra_lr(self) -> float:
        return self.lr_d if self.lr_d_intra is None else self.lr_d_intra

    @property
    def round_lr(self) -> float:
        return self.lr_g if self.lr_g_round is None else self.lr_g_round

    def with_overrides(self, **kw) -> "TrainConfig":
        if "lambda" in kw:
            kw["lambda_"] = kw.pop("lambda")
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @property
    def scene(self) -> SceneSpec:
        return SceneSpec(self.num_classes, self.height, self.width, seed=self.seed)

    @property
    def shift(self) -> DomainShiftSpec:
        return DomainShiftSpec(self.hue_shift, self.noise_sigma, self.texture_warp,
                               self.brightness_gamma, self.severity_spread)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} not found")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        data = tomllib.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    return TrainConfig.from_dict(data)


def sub_seed(seed: int, purpose: str) -> int:
    """Stable per-purpose seed derived from the master seed."""
    tag = {"data": 1, "init": 2, "order": 3}[purpose]
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base
    return base * (1.0 - min(step, total) / total) ** power


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _require_unlabeled(images):
    for im in images:
        if not isinstance(im, UnlabeledImage):
            raise TypeError(
                f"target training data must be UnlabeledImage, got {type(im).__name__}"
            )


# --- data --------------------------------------------------------------------


@dataclass
class Benchmark:
    scene: SceneSpec
    source: list[LabeledImage]
    target: list[UnlabeledImage]
    monitor: "HiddenLabelMonitor"


class HiddenLabelMonitor:
    """Holds the hidden target labels and reports metrics computed against them."""

    def __init__(self, scene: SceneSpec, eval_pairs, target_truth: dict[str, np.ndarray] | None = None):
        self._scene = scene
        self._eval_images = [im for im, _ in eval_pairs]
        self._eval_truth = [lab.labels for _, lab in eval_pairs]
        self._target_truth = dict(target_truth or {})

    @property
    def class_names(self):
        return self._scene.class_names

    @property
    def rare_classes(self):
        return self._scene.rare_classes

    def evaluate(self, model: SegModel) -> dict:
        cm = evalkit.ConfusionMatrix(self._scene.num_classes)
        for pred, truth in zip(predict_labels(model, self._eval_images), self._eval_truth):
            evalkit.accumulate(cm, pred, truth)
        return evalkit.metrics_dict(cm, self.class_names)

    def pseudo_quality(self, pseudo: dict) -> dict:
        q = evalkit.PseudoQuality(self._scene.num_classes)
        for iid, pm in sorted(pseudo.items()):
            if iid in self._target_truth:
                q.add(pm, self._target_truth[iid])
        rare_prec, rare_cov = q.pooled(self.rare_classes) if self.rare_classes else (np.nan, np.nan)
        all_prec, all_cov = q.pooled(range(self._scene.num_classes))
        return {
            "precision": _clean(q.precision()),
            "coverage": _clean(q.coverage()),
            "overall_precision": _clean([all_prec])[0],
            "overall_coverage": _clean([all_cov])[0],
            "rare_precision": _clean([rare_prec])[0],
            "rare_coverage": _clean([rare_cov])[0],
        }

    def export_target_truth(self) -> dict[str, np.ndarray]:
        """Copies of the hidden target labels, for writing an offline evaluation set."""
        return {k: v.copy() for k, v in sorted(self._target_truth.items())}

    def eval_samples(self, k: int):
        """First ``k`` evaluation images with their labels, for figures."""
        return list(zip(self._eval_images[:k], self._eval_truth[:k]))


def _clean(values):
    return [None if v is None or (isinstance(v, float) and math.isnan(v)) or
            (isinstance(v, (np.floating,)) and np.isnan(v)) else float(v) for v in values]


def build_benchmark(cfg: TrainConfig) -> Benchmark:
    data_seed = sub_seed(cfg.seed, "data")
    base = cfg.scene
    src_spec = replace(base, seed=data_seed)
    tgt_spec = replace(base, seed=data_seed + 1)
    eval_spec = replace(base, seed=data_seed + 2)
    source = generate_source(src_spec, cfg.n_source)
    target_pairs = generate_target(tgt_spec, cfg.shift, cfg.n_target)
    eval_pairs = generate_target(eval_spec, cfg.shift, cfg.n_eval)
    monitor = HiddenLabelMonitor(
        base, eval_pairs, {im.id: lab.labels for im, lab in target_pairs}
    )
    return Benchmark(base, source, [im for im, _ in target_pairs], monitor)


# --- model helpers -------------------------------------------------------------


def new_model(cfg: TrainConfig) -> SegModel:
    torch.manual_seed(sub_seed(cfg.seed, "init"))
    return SegModel(cfg.num_classes, cfg.height, cfg.width, cfg.features)


@torch.no_grad()
def predict(model: SegModel, images, batch_size: int = 16):
    """(probs N x H x W x C, features N x H' x W' x F) as float32 numpy arrays."""
    was_training = model.training
    model.eval()
    probs, feats = [], []
    for i in range(0, len(images), batch_size):
        logits, f = model(image_batch(images[i : i + batch_size]))
        probs.append(torch.softmax(logits, 1).permute(0, 2, 3, 1).numpy())
        feats.append(f.permute(0, 2, 3, 1).numpy())
    model.train(was_training)
    if not probs:
        return np.empty(0), np.empty(0)
    return np.concatenate(probs), np.concatenate(feats)


def predict_labels(model: SegModel, images) -> list[np.ndarray]:
    probs, _ = predict(model, images)
    return [p.argmax(-1) for p in probs]


def _labels_tensor(images):
    return torch.from_numpy(np.stack([im.labels for im in images]).astype(np.int64))


class _Sampler:
    """Epoch-style shuffled index stream."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.buf = n, rng, []

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if not self.buf:
                self.buf = list(self.rng.permutation(self.n))
            out.append(self.buf.pop())
        return np.asarray(out)


# --- stage 1: PT ----------------------------------------------------------------

_PT_CACHE: dict[str, dict] = {}

_PT_KEYS = ("lr_g", "lr_d", "poly_power", "adam_betas", "batch_size", "pt_steps",
            "adv_weight_pt", "features", "num_classes", "height", "width", "n_source",
            "n_target", "hue_shift", "noise_sigma", "texture_warp", "brightness_gamma",
            "severity_spread", "seed", "pt_adversarial")


def _pt_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    return json.dumps({k: d[k] for k in _PT_KEYS}, sort_keys=True)


def pretrain_pt(source: Sequence[LabeledImage], target: Sequence[UnlabeledImage],
                cfg: TrainConfig, *, history: list | None = None, out_dir=None,
                discriminator: InterDiscriminator | None = None) -> SegModel:
    """Supervised source training plus entropy-map inter-domain adversarial training.

    The discriminator sees weighted self-information maps (source = 0,
    target = 1); the generator is pushed to make target maps look like source.
    Pass ``discriminator`` to keep hold of the trained inter-domain discriminator.
    """
    if not source or not target:
        raise ValidationError("pre-training needs non-empty source and target sets")
    _require_unlabeled(target)
    model = new_model(cfg)
    disc = InterDiscriminator(cfg.num_classes)  # seeded by new_model
    if discriminator is not None:
        discriminator.load_state_dict(disc.state_dict())
        disc = discriminator
    if cfg.pt_steps == 0:
        return model
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=cfg.adam_betas)
    rng = np.random.default_rng([sub_seed(cfg.seed, "order"), 0])
    src_x, src_y = image_batch(source), _labels_tensor(source)
    tgt_x = image_batch(target)
    src_s, tgt_s = _Sampler(len(source), rng), _Sampler(len(target), rng)
    model.train()
    window: dict[str, list[float]] = {}
    for step in range(cfg.pt_steps):
        _set_lr(opt_g, poly_lr(cfg.lr_g, step, cfg.pt_steps, cfg.poly_power))
        _set_lr(opt_d, poly_lr(cfg.lr_d, step, cfg.pt_steps, cfg.poly_power))
        si, ti = src_s.take(cfg.batch_size), tgt_s.take(cfg.batch_size)
        logits_s, _ = model(src_x[si])
        ce = F.cross_entropy(logits_s, src_y[si], ignore_index=IGNORE)
        loss = ce
        rec = {"ce": ce.item()}
        if cfg.pt_adversarial:
            logits_t, _ = model(tgt_x[ti])
            info_t = self_information(torch.softmax(logits_t, 1))
            disc.requires_grad_(False)
            adv = F.binary_cross_entropy_with_logits(disc.logits(info_t),
                                                     torch.zeros(len(ti)))
            disc.requires_grad_(True)
            loss = loss + cfg.adv_weight_pt * adv
            rec["adv"] = adv.item()
        if not torch.isfinite(loss):
            _abort(model, out_dir, "pretrain", step)
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        if cfg.pt_adversarial:
            info_s = self_information(torch.softmax(logits_s.detach(), 1))
            d_s = disc.logits(info_s)
            d_t = disc.logits(info_t.detach())
            d_loss = 0.5 * (F.binary_cross_entropy_with_logits(d_s, torch.zeros_like(d_s))
                            + F.binary_cross_entropy_with_logits(d_t, torch.ones_like(d_t)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            rec.update(d=d_loss.item(), d_src=torch.sigmoid(d_s).mean().item(),
                       d_tgt=torch.sigmoid(d_t).mean().item())
        _log_window(history, window, rec, step, cfg.log_every)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / checkpoint_name("pretrain", cfg.pt_steps),
                        {"gen": model, "d_inter": disc}, {"stage": "pretrain"})
    return model


def _log_window(history, window, rec, step, every):
    if history is None:
        return
    for k, v in rec.items():
        window.setdefault(k, []).append(v)
    if (step + 1) % every == 0:
        history.append({"step": step + 1, **{k: float(np.mean(v)) for k, v in window.items()}})
        window.clear()


def _abort(model, out_dir, stage, step):
    if out_dir is not None:
        path = Path(out_dir) / checkpoint_name(f"{stage}_diverged", step)
        save_checkpoint(path, {"gen": model}, {"stage": stage, "diverged_at": step})
    raise NumericError(f"{stage} loss became non-finite at step {step}")


def inter_discriminator_means(model: SegModel, disc: InterDiscriminator, source,
                              target) -> tuple[float, float]:
    """Mean inter-domain discriminator output on the source and target sets."""
    out = []
    with torch.no_grad():
        for images in (source, target):
            probs, _ = predict(model, images)
            info = self_information(torch.from_numpy(probs).permute(0, 3, 1, 2))
            out.append(float(disc(info).mean()))
    return out[0], out[1]


def pretrained(cfg: TrainConfig, bench: Benchmark, history: list | None = None) -> SegModel:
    """``pretrain_pt`` memoised on the PT-relevant part of the config."""
    key = _pt_key(cfg)
    if key not in _PT_CACHE:
        hist: list = []
        model = pretrain_pt(bench.source, bench.target, cfg, history=hist)
        _PT_CACHE[key] = {"state": copy.deepcopy(model.state_dict()), "history": list(hist)}
    entry = _PT_CACHE[key]
    model = SegModel(cfg.num_classes, cfg.height, cfg.width, cfg.features)
    model.load_state_dict(entry["state"])
    if history is not None:
        history.extend(entry["history"])
    return model


# --- stages 2 and 3: IDPL rounds --------------------------------------------------


@dataclass
class IDPLState:
    model: SegModel
    classifier: pldg.InstanceClassifier
    heads: sasa.AttentionHeads
    d_intra: IntraDiscriminator
    thresholds: pldg.ClassThresholds | None = None
    step: int = 0
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None


def init_idpl_state(model: SegModel, cfg: TrainConfig) -> IDPLState:
    torch.manual_seed(sub_seed(cfg.seed, "init") + 1)
    heads = sasa.AttentionHeads(cfg.num_classes, model.features, cfg.key_dim)
    d_intra = IntraDiscriminator(cfg.num_classes, heads.token_dim)
    clf = pldg.InstanceClassifier.zeros(model.features, cfg.num_classes)
    state = IDPLState(model, clf, heads, d_intra)
    state.opt_g = torch.optim.Adam(model.parameters(), lr=cfg.round_lr, betas=cfg.adam_betas)
    state.opt_d = torch.optim.Adam(list(heads.parameters()) + list(d_intra.parameters()),
                                   lr=cfg.intra_lr, betas=cfg.adam_betas)
    return state


@dataclass
class RoundReport:
    round: int
    pseudo_coverage: float | None
    pseudo_precision: float | None
    rare_precision: float | None
    rare_coverage: float | None
    class_precision: list
    class_coverage: list
    n_easy: int
    n_hard: int
    adversarial_active: bool
    global_thresholds: list
    losses: dict
    iou: list
    miou: float | None
    param_hash_before: str = ""
    param_hash_after: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, data: dict) -> "RoundReport":
        return cls(**data)


@dataclass
class PseudoStage:
    pseudo: dict[str, "pldg.PseudoLabelMap"]
    instances: dict[str, list]
    fused: dict[str, np.ndarray]
    split: scic.SubdomainSplit
    hash_before: str
    hash_after: str


def pseudo_stage(state: IDPLState, target: Sequence[UnlabeledImage], cfg: TrainConfig,
                 round_index: int = 0) -> PseudoStage:
    """Frozen-generator pass: pseudo labels, instances, fused thresholds and the split."""
    _require_unlabeled(target)
    model = state.model
    before = parameter_hash(model)
    probs, feats = predict(model, target, cfg.batch_size)
    after = parameter_hash(model)
    if before != after:
        raise StateError("generator parameters changed during pseudo-label generation")
    ids = [im.id for im in target]
    probmaps = {iid: ProbMap(p) for iid, p in zip(ids, probs)}
    featmap = dict(zip(ids, feats))
    C = cfg.num_classes
    if cfg.pseudo_mode == "fixed":
        theta = np.full(C, cfg.fixed_threshold)
        state.thresholds = pldg.ClassThresholds(theta, alpha=cfg.alpha)
        pseudo = {iid: pldg.assign_pseudo_labels(probmaps[iid], theta) for iid in ids}
        instances = {iid: pldg.extract_instances(pseudo[iid], featmap[iid], iid, cfg.min_area)
                     for iid in ids}
        flat = [i for iid in ids for i in instances[iid]]
        state.classifier = pldg.train_instance_classifier(
            state.classifier, flat, cfg.clf_steps, cfg.clf_lr)
        for inst in flat:
            pldg.classify_instance(state.classifier, inst)
        fused = {iid: theta for iid in ids}
    else:
        if state.thresholds is None:
            lo, hi = cfg.theta_init_clamp
            first = [probmaps[iid] for iid in ids[: cfg.batch_size]]
            theta0 = pldg.init_global_thresholds(first, C, cfg.theta_init_quantile, lo, hi)
            state.thresholds = pldg.ClassThresholds(theta0, alpha=cfg.alpha)
        res = pldg.generate_pseudo_labels(
            state.thresholds, state.classifier, probmaps, featmap,
            batch_size=cfg.batch_size, min_area=cfg.min_area,
            clf_steps=cfg.clf_steps, clf_lr=cfg.clf_lr)
        state.thresholds, state.classifier = res.thresholds, res.classifier
        pseudo, instances = res.pseudo, res.instances
        fused = {iid: state.thresholds.fused_for(iid) for iid in ids}
    if cfg.split_mode == "random":
        rng = np.random.default_rng([sub_seed(cfg.seed, "order"), 100 + round_index])
        split = scic.random_split(ids, rng, cfg.beta, cfg.lambda_)
    else:
        split = scic.split_domain(instances, cfg.beta, cfg.lambda_, fused=fused)
    return PseudoStage(pseudo, instances, fused, split, before, after)


def _adversarial_pass(state: IDPLState, logits, feats, labels_grid, cfg: TrainConfig):
    """Attention maps, class weights and head outputs p(d=1) for one batch."""
    probs = torch.softmax(logits, 1)
    grid = sasa.pool_to_grid(probs, state.model.stride).flatten(2)
    tok_feats = feats.flatten(2).transpose(1, 2)
    if cfg.adversarial == "plain":
        tokens = state.heads.tokens(grid, tok_feats)
        n = tokens.shape[1]
        attn = torch.full((tokens.shape[0], cfg.num_classes, n), 1.0 / n)
        q = torch.full((tokens.shape[0], cfg.num_classes), 1.0 / cfg.num_classes)
    else:
        attn, tokens = state.heads(grid, tok_feats)
        q = sasa.class_weights_batch(attn.detach(), labels_grid)
    p_hard = discriminate_intra(state.d_intra, tokens, attn)
    return attn, grid, q, p_hard


def run_idpl_round(state: IDPLState, target: Sequence[UnlabeledImage], cfg: TrainConfig,
                   round_index: int = 0, monitor: HiddenLabelMonitor | None = None):
    """One round: pseudo labels -> subdomain split -> self-training with the adversarial term."""
    stage = pseudo_stage(state, target, cfg, round_index)
    split = stage.split
    ids = [im.id for im in target]
    index = {iid: i for i, iid in enumerate(ids)}
    x_all = image_batch(target)
    y_all = torch.from_numpy(np.stack([stage.pseudo[iid].labels for iid in ids]))
    off = state.model.stride // 2
    y_grid = y_all[:, off :: state.model.stride, off :: state.model.stride].flatten(1)
    easy_idx = np.array(sorted(index[i] for i in split.easy_ids), dtype=np.int64)
    hard_idx = np.array(sorted(index[i] for i in split.hard_ids), dtype=np.int64)
    adv_on = cfg.adversarial != "none" and len(easy_idx) > 0 and len(hard_idx) > 0
    if cfg.adversarial != "none" and not adv_on:
        log.warning("round %d: empty subdomain (easy=%d, hard=%d); adversarial term skipped",
                    round_index, len(easy_idx), len(hard_idx))

    rng = np.random.default_rng([sub_seed(cfg.seed, "order"), 1 + round_index])
    all_s = _Sampler(len(ids), rng)
    easy_s = _Sampler(len(easy_idx), rng) if len(easy_idx) else None
    hard_s = _Sampler(len(hard_idx), rng) if len(hard_idx) else None
    total = cfg.rounds * cfg.steps_per_round
    model, heads, d_intra = state.model, state.heads, state.d_intra
    model.train()
    history: list[dict] = []
    window: dict[str, list[float]] = {}
    for _ in range(cfg.steps_per_round):
        _set_lr(state.opt_g, poly_lr(cfg.round_lr, state.step, total, cfg.poly_power))
        _set_lr(state.opt_d, poly_lr(cfg.intra_lr, state.step, total, cfg.poly_power))
        bi = all_s.take(cfg.batch_size)
        logits, _ = model(x_all[bi])
        y = y_all[bi]
        rec = {}
        loss = torch.zeros(())
        if (y != IGNORE).any():
            ce = F.cross_entropy(logits, y, ignore_index=IGNORE)
            loss = loss + ce
            rec["ce"] = ce.item()
        if adv_on:
            hi = hard_idx[hard_s.take(cfg.batch_size)]
            logits_h, feats_h = model(x_all[hi])
            heads.requires_grad_(False)
            d_intra.requires_grad_(False)
            _, _, q_h, p1 = _adversarial_pass(state, logits_h, feats_h, y_grid[hi], cfg)
            adv = sasa.generator_adv_loss(1.0 - p1, q_h)
            heads.requires_grad_(True)
            d_intra.requires_grad_(True)
            loss = loss + cfg.adv_weight_intra * adv
            rec["adv"] = adv.item()
        if not torch.isfinite(loss):
            _abort(model, None, "idpl", state.step)
        if loss.requires_grad:
            state.opt_g.zero_grad()
            loss.backward()
            state.opt_g.step()
        if adv_on:
            ei = easy_idx[easy_s.take(cfg.batch_size)]
            with torch.no_grad():
                logits_e, feats_e = model(x_all[ei])
            attn_e, grid_e, q_e, p1_e = _adversarial_pass(state, logits_e, feats_e, y_grid[ei], cfg)
            attn_h, grid_h, q_h, p1_h = _adversarial_pass(
                state, logits_h.detach(), feats_h.detach(), y_grid[hi], cfg)
            d_loss = sasa.discriminator_loss(1.0 - p1_e, p1_h, q_e, q_h)
            rec["d"] = d_loss.item()
            if cfg.adversarial == "sasa" and cfg.ground_weight:
                d_loss = d_loss + cfg.ground_weight * (
                    sasa.grounding_loss(attn_e, grid_e) + sasa.grounding_loss(attn_h, grid_h))
            state.opt_d.zero_grad()
            d_loss.backward()
            state.opt_d.step()
        state.step += 1
        for k, v in rec.items():
            window.setdefault(k, []).append(v)
        if state.step % cfg.log_every == 0:
            history.append({k: float(np.mean(v)) for k, v in window.items()})
            window.clear()

    losses = {k: [h.get(k) for h in history] for k in ("ce", "adv", "d")}
    quality = monitor.pseudo_quality(stage.pseudo) if monitor else {}
    metrics = monitor.evaluate(model) if monitor else {"iou": [], "miou": None}
    report = RoundReport(
        round=round_index,
        pseudo_coverage=quality.get("overall_coverage",
                                    float(np.mean([stage.pseudo[i].coverage for i in ids]))),
        pseudo_precision=quality.get("overall_precision"),
        rare_precision=quality.get("rare_precision"),
        rare_coverage=quality.get("rare_coverage"),
        class_precision=quality.get("precision", []),
        class_coverage=quality.get("coverage", []),
        n_easy=len(split.easy_ids),
        n_hard=len(split.hard_ids),
        adversarial_active=adv_on,
        global_thresholds=[float(v) for v in state.thresholds.global_],
        losses=losses,
        iou=metrics["iou"],
        miou=metrics["miou"],
        param_hash_before=stage.hash_before,
        param_hash_after=stage.hash_after,
    )
    return state, report, stage


# --- experiments ---------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: dict
    pt_metrics: dict
    reports: list[RoundReport]
    final_metrics: dict
    pt_history: list = field(default_factory=list)

    @property
    def pt_miou(self) -> float:
        return self.pt_metrics["miou"]

    @property
    def final_miou(self) -> float:
        return self.final_metrics["miou"]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "pt_metrics": self.pt_metrics,
            "final_metrics": self.final_metrics,
            "rounds": [r.to_json() for r in self.reports],
        }


_BENCH_CACHE: dict[str, Benchmark] = {}


def benchmark_for(cfg: TrainConfig) -> Benchmark:
    d = cfg.to_dict()
    key = json.dumps({k: d[k] for k in ("num_classes", "height", "width", "n_source",
                                         "n_target", "n_eval", "hue_shift", "noise_sigma",
                                         "texture_warp", "brightness_gamma", "severity_spread",
                                         "seed")},
                     sort_keys=True)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE[key] = build_benchmark(cfg)
    return _BENCH_CACHE[key]


def run_experiment(cfg: TrainConfig, bench: Benchmark | None = None, out_dir=None,
                   keep_stages: bool = False, init_model: SegModel | None = None):
    """PT followed by ``cfg.rounds`` IDPL rounds; returns (result, final state[, stages]).

    ``init_model`` skips pre-training and starts the rounds from the given weights.
    """
    bench = bench or benchmark_for(cfg)
    pt_history: list = []
    model = init_model if init_model is not None else pretrained(cfg, bench, pt_history)
    pt_metrics = bench.monitor.evaluate(model)
    state = init_idpl_state(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / checkpoint_name("pretrain", cfg.pt_steps), {"gen": model},
                        {"stage": "pretrain", "config": cfg.to_dict()})
    reports, stages = [], []
    for r in range(cfg.rounds):
        state, report, stage = run_idpl_round(state, bench.target, cfg, r, bench.monitor)
        reports.append(report)
        if keep_stages:
            stages.append(stage)
        log.info("round %d: mIoU %.4f easy=%d hard=%d", r, report.miou or float("nan"),
                 report.n_easy, report.n_hard)
        if out is not None:
            save_checkpoint(out / checkpoint_name("idpl", state.step),
                            {"gen": state.model, "heads": state.heads, "d_intra": state.d_intra},
                            {"stage": "idpl", "round": r})
    final = bench.monitor.evaluate(state.model) if cfg.rounds else pt_metrics
    result = ExperimentResult(cfg.to_dict(), pt_metrics, reports, final, pt_history)
    return (result, state, stages) if keep_stages else (result, state)


MODULE_VARIANTS = {
    "PT+PLDG": dict(adversarial="none"),
    "PT+PLDG+SASA": dict(),
    "General pseudo label": dict(pseudo_mode="fixed"),
    "Random Select": dict(split_mode="random"),
    "Plain intra-domain adversarial": dict(adversarial="plain"),
}


def ablation_suite(base: TrainConfig, grid: Sequence[dict]) -> list[dict]:
    """mIoU for each override cell of ``grid`` (one row per cell, grid order)."""
    rows = []
    for cell in grid:
        cfg = base.with_overrides(**cell)
        result, _ = run_experiment(cfg)
        row = {k: v for k, v in cell.items()}
        row.update(pt_miou=result.pt_miou, miou=result.final_miou)
        rows.append(row)
    return rows


def module_ablation(base: TrainConfig, variants: Sequence[str] = tuple(MODULE_VARIANTS)) -> list[dict]:
    """PT plus the named module variants, each as one table row."""
    result, _ = run_experiment(base.with_overrides(rounds=0))
    rows = [{"method": "PT", "miou": result.pt_miou}]
    for name in variants:
        res, _ = run_experiment(base.with_overrides(**MODULE_VARIANTS[name]))
        rows.append({"method": name, "miou": res.final_miou})
    return rows


SWEEP_GRIDS = {
    "alpha": (0.0, 0.5, 0.9, 1.0),
    "beta": (0.1, 0.3, 0.5, 0.7, 0.9),
    "lambda": (0.1, 0.3, 0.5, 0.7, 0.9),
}


def sweep(base: TrainConfig, param: str, values: Sequence[float] | None = None) -> list[dict]:
    values = SWEEP_GRIDS[param] if values is None else values
    return ablation_suite(base, [{param: v} for v in values])


def interior_maximum(scores: Sequence[float], at: int | None = None) -> bool:
    """True if the best cell (or cell ``at``) beats both endpoints strictly."""
    scores = list(scores)
    k = int(np.argmax(scores)) if at is None else at
    return 0 < k < len(scores) - 1 and scores[k] > scores[0] and scores[k] > scores[-1]
