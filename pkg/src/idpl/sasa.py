"""Per-class self-attention, class weights and the intra-domain adversarial losses.

Tokens are the feature vectors on the feature grid concatenated with the
(average-pooled) class probabilities. Head ``c`` seeds its query with the
class-``c``-probability-weighted mean token and attends over all positions,
giving a spatial distribution A_c.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from idpl.datamodel import IGNORE, NumericError, ProbMap, PseudoLabelMap, ShapeError, ValidationError

P_CLAMP = 1e-6


class AttentionHeads(nn.Module):
    def __init__(self, num_classes: int, feat_dim: int, key_dim: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        self.key_dim = key_dim
        token_dim = feat_dim + num_classes
        w = torch.randn(num_classes, token_dim, key_dim) / token_dim ** 0.5
        # shared start makes q.k a similarity between the seed and each token
        self.w_query = nn.Parameter(w.clone())
        self.w_key = nn.Parameter(w.clone())

    @property
    def token_dim(self) -> int:
        return self.feat_dim + self.num_classes

    def tokens(self, probs, feats):
        """probs: (B, C, N), feats: (B, N, F) -> (B, N, F + C)."""
        return torch.cat([feats, probs.transpose(1, 2)], dim=2)

    def forward(self, probs, feats):
        """Attention maps (B, C, N) and the tokens they pool over."""
        if probs.shape[1] != self.num_classes:
            raise ValidationError(
                f"{probs.shape[1]}-class input for {self.num_classes} attention heads"
            )
        if probs.shape[2] != feats.shape[1]:
            raise ShapeError("probability map and features are not spatially aligned")
        tok = self.tokens(probs, feats)
        mass = probs.sum(dim=2, keepdim=True)  # (B, C, 1)
        seed = torch.einsum("bcn,bnd->bcd", probs, tok) / mass.clamp_min(1e-8)
        q = torch.einsum("bcd,cdk->bck", seed, self.w_query)
        k = torch.einsum("bnd,cdk->bcnk", tok, self.w_key)
        scores = torch.einsum("bck,bcnk->bcn", q, k) / self.key_dim ** 0.5
        return torch.softmax(scores, dim=2), tok


def pool_to_grid(probs, stride: int):
    """Average-pool an (B, C, H, W) probability tensor onto the feature grid."""
    if stride == 1:
        return probs
    return F.avg_pool2d(probs, stride)


def attention_maps(heads: AttentionHeads, probmap: ProbMap, features) -> list[np.ndarray]:
    """C spatial attention maps on the feature grid (each non-negative, summing to 1)."""
    feats = torch.as_tensor(np.asarray(features, dtype=np.float32))
    if feats.dim() != 3:
        raise ShapeError("features must be H' x W' x F")
    h, w, _ = feats.shape
    probs = torch.from_numpy(np.array(probmap.probs)).permute(2, 0, 1)[None]
    if probs.shape[1] != heads.num_classes:
        raise ValidationError(
            f"{probs.shape[1]}-class probability map for {heads.num_classes} heads"
        )
    if probs.shape[-2:] != (h, w):
        stride = probs.shape[-2] // h
        if stride * h != probs.shape[-2] or stride * w != probs.shape[-1]:
            raise ShapeError("probability map is not an integer multiple of the feature grid")
        probs = pool_to_grid(probs, stride)
    with torch.no_grad():
        attn, _ = heads(probs.flatten(2), feats.reshape(1, h * w, -1))
    return [a.reshape(h, w).numpy() for a in attn[0]]


def grounding_loss(attn, probs, eps: float = 1e-8):
    """Cross-entropy pulling A_c toward the spatial distribution of class-c probability.

    attn, probs: (B, C, N). Classes with no probability mass are skipped.
    """
    mass = probs.sum(dim=2, keepdim=True)
    target = probs / mass.clamp_min(eps)
    per = -(target * torch.log(attn + eps)).sum(dim=2)
    weight = (mass[..., 0] > eps).float()
    return (per * weight).sum() / weight.sum().clamp_min(1.0)


def class_weights(attn: Sequence[np.ndarray] | np.ndarray, pseudo: PseudoLabelMap | np.ndarray
                  ) -> np.ndarray:
    """Q_c proportional to the attention mass A_c places on pixels pseudo-labelled c.

    Falls back to uniform when no mass lands on any labelled pixel.
    """
    a = np.stack([np.asarray(m, dtype=np.float64) for m in attn])
    labels = pseudo.labels if isinstance(pseudo, PseudoLabelMap) else np.asarray(pseudo)
    C = a.shape[0]
    if a.shape[1:] != labels.shape:
        raise ShapeError(f"attention {a.shape[1:]} and pseudo labels {labels.shape} misaligned")
    raw = np.array([a[c][labels == c].sum() for c in range(C)])
    total = raw.sum()
    if total <= 0:
        return np.full(C, 1.0 / C)
    return raw / total


def class_weights_batch(attn, labels):
    """Torch batch version. attn: (B, C, N); labels: (B, N) ints with IGNORE -> (B, C)."""
    C = attn.shape[1]
    onehot = torch.zeros_like(attn)
    valid = labels != IGNORE
    idx = torch.where(valid, labels, torch.zeros_like(labels))
    onehot.scatter_(1, idx.unsqueeze(1), valid.unsqueeze(1).to(attn.dtype))
    raw = (attn * onehot).sum(dim=2)
    total = raw.sum(dim=1, keepdim=True)
    uniform = torch.full_like(raw, 1.0 / C)
    return torch.where(total > 0, raw / total.clamp_min(1e-30), uniform)


def _clamped(p, name):
    p = torch.as_tensor(p)
    p = p.clamp(P_CLAMP, 1.0 - P_CLAMP)
    if torch.isnan(p).any():
        raise NumericError(f"{name} contains NaN")
    return p


def _per_image(p, q):
    p, q = torch.as_tensor(p), torch.as_tensor(q, dtype=p.dtype)
    if p.shape[-1] != q.shape[-1]:
        raise ShapeError("probabilities and class weights disagree on C")
    return -(q * torch.log(p)).sum(-1)


def discriminator_loss(p_easy, p_hard, q_easy, q_hard):
    """-sum_c Q_e,c log p(d=0,c|f_e) - sum_c Q_h,c log p(d=1,c|f_h).

    ``p_easy`` holds p(d=0) for easy images and ``p_hard`` p(d=1) for
    difficult ones, i.e. each is the probability of the true side. Inputs are
    (C,) or (B, C); batches are averaged per subdomain.
    """
    p_easy = _clamped(p_easy, "easy-side probabilities")
    p_hard = _clamped(p_hard, "hard-side probabilities")
    return _per_image(p_easy, q_easy).mean() + _per_image(p_hard, q_hard).mean()


def generator_adv_loss(p_hard_as_easy, q_hard):
    """-sum_c Q_h,c log p(d=0,c|f) over difficult-subdomain images only."""
    p = _clamped(p_hard_as_easy, "hard-as-easy probabilities")
    return _per_image(p, q_hard).mean()
