"""Segmentation generator and the two discriminators.

Tensors inside the networks are NCHW; the op-level helpers (``forward``,
``discriminate_intra``) accept and return the H x W x C layout used by the
value types.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from idpl.datamodel import (
    LabeledImage,
    ShapeError,
    UnlabeledImage,
    ValidationError,
    load_tensors,
    save_tensors,
)


class SegModel(nn.Module):
    """Two stride-2 encoder stages, a decoder at half resolution with one skip,
    and a final bilinear upsample.

    The feature tap is the last encoder stage, at 1/4 of the input size.
    """

    stride = 4
    feature_tap = "enc3"

    def __init__(self, num_classes: int, height: int = 64, width: int = 64,
                 features: int = 32, zero_head: bool = False):
        super().__init__()
        if height % self.stride or width % self.stride:
            raise ValidationError(f"image size must be divisible by {self.stride}")
        self.num_classes = num_classes
        self.height = height
        self.width = width
        self.features = features
        half = max(features // 2, 4)
        self.enc1 = nn.Conv2d(3, half, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(half, features, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(features, features, 3, padding=1)
        self.dec = nn.Conv2d(features + half, half, 3, padding=1)
        self.classifier = nn.Conv2d(half, num_classes, 1)
        if zero_head:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    def forward(self, x):
        if x.shape[-2:] != (self.height, self.width):
            raise ShapeError(
                f"expected {self.height}x{self.width} input, got {tuple(x.shape[-2:])}"
            )
        e1 = F.relu(self.enc1(x))
        feats = F.relu(self.enc3(F.relu(self.enc2(e1))))
        up = F.interpolate(feats, scale_factor=2, mode="bilinear", align_corners=False)
        d = F.relu(self.dec(torch.cat([up, e1], dim=1)))
        logits = F.interpolate(self.classifier(d), scale_factor=2, mode="bilinear",
                               align_corners=False)
        return logits, feats


class IntraDiscriminator(nn.Module):
    """C independent binary heads over per-class pooled vectors.

    Head ``c`` sees only the class-``c`` vector and outputs p(d=1 | f_c), the
    probability that the vector came from the difficult subdomain.
    """

    def __init__(self, num_classes: int, in_dim: int, hidden: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.in_dim = in_dim
        self.w1 = nn.Parameter(torch.randn(num_classes, in_dim, hidden) * (2.0 / in_dim) ** 0.5)
        self.b1 = nn.Parameter(torch.zeros(num_classes, hidden))
        self.w2 = nn.Parameter(torch.randn(num_classes, hidden) * 0.01)
        self.b2 = nn.Parameter(torch.zeros(num_classes))

    def logits(self, pooled):
        if pooled.shape[-2:] != (self.num_classes, self.in_dim):
            raise ValidationError(
                f"expected (..., {self.num_classes}, {self.in_dim}) pooled input, "
                f"got {tuple(pooled.shape)}"
            )
        h = F.leaky_relu(torch.einsum("...ci,cih->...ch", pooled, self.w1) + self.b1, 0.2)
        return (h * self.w2).sum(-1) + self.b2

    def forward(self, pooled):
        return torch.sigmoid(self.logits(pooled))


class InterDiscriminator(nn.Module):
    """Single binary head over weighted self-information maps (source=0, target=1)."""

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(num_classes, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 1, 1),
        )

    def logits(self, info):
        return self.net(info).mean(dim=(1, 2, 3))

    def forward(self, info):
        return torch.sigmoid(self.logits(info))


def image_batch(images) -> torch.Tensor:
    """Stack images (value types or H x W x 3 arrays) into an N x 3 x H x W tensor."""
    arrs = [im.pixels if isinstance(im, (LabeledImage, UnlabeledImage)) else im for im in images]
    x = np.stack([np.asarray(a, dtype=np.float32) for a in arrs])
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()


def forward(model: SegModel, image):
    """Single image -> (logits H x W x C, features H' x W' x F)."""
    pixels = image.pixels if isinstance(image, (LabeledImage, UnlabeledImage)) else image
    pixels = np.asarray(pixels)
    if pixels.shape != (model.height, model.width, 3):
        raise ShapeError(f"expected {(model.height, model.width, 3)} image, got {pixels.shape}")
    logits, feats = model(image_batch([pixels]))
    return logits[0].permute(1, 2, 0), feats[0].permute(1, 2, 0)


def discriminate_intra(d: IntraDiscriminator, tokens, attention):
    """Attention-pool ``tokens`` per class and run the C heads.

    tokens: (N, D) or (B, N, D); attention: (C, N) or (B, C, N), each row a
    spatial distribution. Returns (C,) or (B, C) probabilities of "difficult".
    """
    single = tokens.dim() == 2
    if single:
        tokens, attention = tokens.unsqueeze(0), attention.unsqueeze(0)
    if attention.shape[1] != d.num_classes:
        raise ValidationError(
            f"{attention.shape[1]} attention maps for a {d.num_classes}-head discriminator"
        )
    if attention.shape[2] != tokens.shape[1]:
        raise ShapeError("attention maps are not aligned with the token grid")
    pooled = torch.einsum("bcn,bnd->bcd", attention, tokens)
    out = d(pooled)
    return out[0] if single else out


def self_information(probs, eps: float = 1e-30):
    """Weighted self-information -p log p, normalised by log C (N x C x H x W)."""
    c = probs.shape[1]
    return -probs * torch.log(probs + eps) / np.log(c)


# --- checkpoints ---------------------------------------------------------------


def checkpoint_name(stage: str, step: int) -> str:
    return f"{stage}_{step}.ckpt"


def save_checkpoint(path, modules: Mapping[str, nn.Module], meta: dict | None = None) -> Path:
    tensors = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    save_tensors(path, tensors, meta)
    return Path(path)


def load_checkpoint(path, modules: Mapping[str, nn.Module]) -> dict:
    tensors, meta = load_tensors(path)
    for prefix, mod in modules.items():
        sub = {
            k[len(prefix) + 1 :]: torch.from_numpy(v.copy())
            for k, v in tensors.items()
            if k.startswith(prefix + ".")
        }
        mod.load_state_dict(sub)
    return meta


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
