"""Procedural source/target scenes with a controllable photometric domain shift.

Every image is rendered from its own layout, seeded by ``(spec.seed, index)``,
so any subset can be generated independently (and in parallel) and still
agree bit-for-bit with serial generation.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from idpl.datamodel import IGNORE, LabeledImage, UnlabeledImage, ValidationError

log = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("ground", "building", "vegetation", "vehicle", "pole", "sign")

# (hue, saturation, value, texture kind, texture frequency, texture angle)
# "pole" sits near "building" in hue and "sign" near "ground": a hue shift in
# the target domain pushes common classes onto the rare ones.
_APPEARANCE_6 = (
    (0.08, 0.35, 0.55, "flat", 0.0, 0.0),
    (0.60, 0.30, 0.65, "stripes", 0.22, 0.0),
    (0.30, 0.60, 0.55, "checker", 0.18, 0.0),
    (0.98, 0.70, 0.70, "flat", 0.0, 0.0),
    (0.68, 0.45, 0.60, "stripes", 0.40, np.pi / 2),
    (0.14, 0.75, 0.80, "stripes", 0.30, np.pi / 4),
)

RARE_RATIO = 0.25


def _default_frequency(num_classes: int) -> tuple[float, ...]:
    if num_classes == 6:
        return (1.0, 1.0, 0.7, 0.5, 0.2, 0.15)
    return tuple(float(v) for v in np.geomspace(1.0, 0.15, num_classes))


def class_appearance(c: int, num_classes: int):
    if num_classes == 6:
        return _APPEARANCE_6[c]
    kinds = ("flat", "stripes", "checker")
    return (
        (0.08 + 0.618034 * c) % 1.0,
        0.55,
        0.65,
        kinds[c % 3],
        0.15 + 0.05 * (c % 4),
        (c % 4) * np.pi / 4,
    )


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 6
    height: int = 64
    width: int = 64
    shapes_per_image: tuple[int, int] = (3, 6)
    class_frequency: tuple[float, ...] | None = None
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValidationError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if self.num_classes < 1:
            raise ValidationError("need at least one class")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValidationError(f"bad shapes_per_image range {self.shapes_per_image}")
        freq = self.class_frequency
        if freq is None:
            freq = _default_frequency(self.num_classes)
        freq = tuple(float(f) for f in freq)
        if len(freq) != self.num_classes:
            raise ValidationError("class_frequency needs one entry per class")
        if min(freq) <= 0:
            raise ValidationError("class frequencies must be positive")
        if self.num_classes >= 2 and min(freq) > RARE_RATIO * max(freq):
            raise ValidationError("at least one class must be rare (<= 25% of the most common)")
        object.__setattr__(self, "class_frequency", freq)
        names = self.class_names
        if names is None:
            names = (
                DEFAULT_CLASS_NAMES
                if self.num_classes == 6
                else tuple(f"class{c}" for c in range(self.num_classes))
            )
        object.__setattr__(self, "class_names", tuple(names))

    @property
    def rare_classes(self) -> tuple[int, ...]:
        if self.num_classes < 2:
            return ()
        top = max(self.class_frequency)
        return tuple(c for c, f in enumerate(self.class_frequency) if f <= RARE_RATIO * top)

    def sampling_probs(self) -> np.ndarray:
        f = np.asarray(self.class_frequency, dtype=np.float64)
        return f / f.sum()


@dataclass(frozen=True)
class DomainShiftSpec:
    hue_shift: float = 0.0
    noise_sigma: float = 0.0
    texture_warp: float = 0.0
    brightness_gamma: float = 1.0
    # per-image severity is drawn from [1 - spread, 1 + spread]; 0 = uniform shift
    severity_spread: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.severity_spread <= 1.0:
            raise ValidationError("severity_spread must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.brightness_gamma <= 0:
            raise ValidationError("brightness_gamma must be > 0")

    @property
    def is_identity(self) -> bool:
        return (
            self.hue_shift == 0
            and self.noise_sigma == 0
            and self.texture_warp == 0
            and self.brightness_gamma == 1
        )

    def scaled(self, severity: float) -> "DomainShiftSpec":
        """The same shift with every component scaled by ``severity``."""
        return DomainShiftSpec(
            self.hue_shift * severity,
            self.noise_sigma * severity,
            self.texture_warp * severity,
            1.0 + (self.brightness_gamma - 1.0) * severity,
        )

    def severity(self, seed: int, index: int) -> float:
        if not self.severity_spread:
            return 1.0
        u = np.random.default_rng([seed, index, 2]).random()
        return 1.0 + self.severity_spread * (2.0 * u - 1.0)


DEFAULT_SHIFT = DomainShiftSpec(hue_shift=0.07, noise_sigma=0.06, texture_warp=0.5,
                                brightness_gamma=1.3)


@dataclass(frozen=True)
class Shape:
    cls: int
    kind: str  # "ellipse" | "rect"
    cy: float
    cx: float
    ry: float
    rx: float
    phase: float = field(default=0.0)

    @property
    def area(self) -> float:
        return self.ry * self.rx


def scene_layout(spec: SceneSpec, index: int) -> list[Shape]:
    """Shapes for image ``index``, largest first (paint order)."""
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    probs = spec.sampling_probs()
    shapes = []
    for _ in range(n):
        cls = int(rng.choice(spec.num_classes, p=probs))
        kind = "ellipse" if rng.random() < 0.5 else "rect"
        ry = float(rng.uniform(0.08, 0.22) * spec.height)
        rx = float(rng.uniform(0.08, 0.22) * spec.width)
        cy = float(rng.uniform(0, spec.height))
        cx = float(rng.uniform(0, spec.width))
        phase = float(rng.uniform(0, 2 * np.pi))
        shapes.append(Shape(cls, kind, cy, cx, ry, rx, phase))
    shapes.sort(key=lambda s: -s.area)
    return shapes


def _texture(kind, freq, angle, yy, xx, phase):
    if kind == "stripes":
        return np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    if kind == "checker":
        return np.sign(np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy))
    return np.zeros_like(yy)


def render_layout(spec: SceneSpec, shapes: Sequence[Shape], warp: float = 0.0):
    """Rasterise a layout; ``warp`` displaces texture coordinates only."""
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if warp:
        ty = yy + 3.0 * warp * np.sin(2 * np.pi * xx / 23.0)
        tx = xx + 3.0 * warp * np.sin(2 * np.pi * yy / 17.0)
    else:
        ty, tx = yy, xx
    labels = np.zeros((H, W), dtype=np.int64)
    hsv = np.empty((H, W, 3), dtype=np.float64)

    def paint(mask, cls, phase):
        h, s, v, kind, freq, angle = class_appearance(cls, spec.num_classes)
        tex = _texture(kind, freq, angle, ty[mask], tx[mask], phase)
        hsv[mask, 0] = h
        hsv[mask, 1] = s
        hsv[mask, 2] = np.clip(v * (1.0 + 0.2 * tex), 0.0, 1.0)
        labels[mask] = cls

    paint(np.ones((H, W), dtype=bool), 0, 0.0)
    for sh in shapes:
        dy = (yy - sh.cy) / sh.ry
        dx = (xx - sh.cx) / sh.rx
        if sh.kind == "ellipse":
            mask = dy * dy + dx * dx <= 1.0
        else:
            mask = (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
        if mask.any():
            paint(mask, sh.cls, sh.phase)
    return hsv, labels


def _apply_photometric(spec: SceneSpec, hsv: np.ndarray, shift: DomainShiftSpec, index: int):
    if shift.hue_shift:
        hsv = hsv.copy()
        hsv[..., 0] = (hsv[..., 0] + shift.hue_shift) % 1.0
    rgb = hsv_to_rgb(hsv)
    if shift.brightness_gamma != 1:
        rgb = rgb ** shift.brightness_gamma
    if shift.noise_sigma:
        noise_rng = np.random.default_rng([spec.seed, index, 1])
        rgb = rgb + noise_rng.normal(0.0, shift.noise_sigma, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def _render_one(spec: SceneSpec, index: int, shift: DomainShiftSpec):
    if shift.severity_spread:
        shift = shift.scaled(shift.severity(spec.seed, index))
    hsv, labels = render_layout(spec, scene_layout(spec, index), warp=shift.texture_warp)
    return _apply_photometric(spec, hsv, shift, index), labels


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("IDPL_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, n: int, workers: int | None):
    workers = workers or _workers()
    if workers == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def generate_source(spec: SceneSpec, n: int, workers: int | None = None) -> list[LabeledImage]:
    if n <= 0:
        raise ValidationError("n must be positive")
    identity = DomainShiftSpec()

    def make(i):
        pixels, labels = _render_one(spec, i, identity)
        return LabeledImage(pixels, labels, id=f"s{spec.seed}_{i:05d}")

    return _map(make, n, workers)


def generate_target(
    spec: SceneSpec, shift: DomainShiftSpec, n: int, workers: int | None = None
) -> list[tuple[UnlabeledImage, LabeledImage]]:
    """Shifted renderings paired with their hidden labels (evaluation only)."""
    if n <= 0:
        raise ValidationError("n must be positive")

    def make(i):
        pixels, labels = _render_one(spec, i, shift)
        image_id = f"t{spec.seed}_{i:05d}"
        return UnlabeledImage(pixels, image_id), LabeledImage(pixels, labels, id=image_id)

    return _map(make, n, workers)


# --- on-disk layout: images/<id>.png, labels/<id>.png, dataset.json ----------


def save_image_png(path, pixels) -> None:
    arr = np.round(np.asarray(pixels) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_label_png(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.max() > 255:
        raise ValidationError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValidationError(f"{path}: label PNG must be single-channel, got {im.mode}")
        return np.asarray(im, dtype=np.uint8).astype(np.int64)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(items, root, spec: SceneSpec | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ids = []
    for item in items:
        save_image_png(root / "images" / f"{item.id}.png", item.pixels)
        if isinstance(item, LabeledImage):
            (root / "labels").mkdir(exist_ok=True)
            save_label_png(root / "labels" / f"{item.id}.png", item.labels)
        ids.append(item.id)
    manifest = {"ids": ids, "ignore": IGNORE}
    if spec is not None:
        manifest.update(
            C=spec.num_classes,
            H=spec.height,
            W=spec.width,
            class_names=list(spec.class_names),
            rare_classes=list(spec.rare_classes),
        )
    elif items:
        h, w = items[0].pixels.shape[:2]
        manifest.update(H=h, W=w)
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset_with_report(root) -> tuple[list, list[tuple[str, str]]]:
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    items, errors = [], []
    if not img_dir.is_dir():
        return items, errors
    for img_path in sorted(img_dir.glob("*.png")):
        image_id = img_path.stem
        try:
            pixels = load_image_png(img_path)
            lbl_path = lbl_dir / f"{image_id}.png"
            if lbl_path.exists():
                labels = load_label_png(lbl_path)
                if labels.shape != pixels.shape[:2]:
                    raise ValidationError(
                        f"size mismatch: image {pixels.shape[:2]} vs label {labels.shape}"
                    )
                items.append(LabeledImage(pixels, labels, id=image_id))
            else:
                items.append(UnlabeledImage(pixels, image_id))
        except (ValidationError, OSError) as exc:
            errors.append((str(img_path), str(exc)))
    return items, errors


def load_dataset(root) -> list:
    items, errors = load_dataset_with_report(root)
    for path, msg in errors:
        log.warning("skipped %s: %s", path, msg)
    return items


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.json"
    return json.loads(path.read_text()) if path.exists() else {}
