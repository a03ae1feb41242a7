"""Student-teacher self-distillation and patch-wise contrastive learning.

All losses treat teacher tensors as constants (stop-gradient); only the
student side carries a graph. Stochastic ops take explicit seeds so a
run is reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateLogitsError, TrainingDivergenceError

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12


@dataclass
class ViewPair:
    """Two augmented crops of one image; the local view is the smaller."""

    local_view: torch.Tensor   # (3, hl, wl)
    global_view: torch.Tensor  # (3, hg, wg)

    def __post_init__(self):
        la = self.local_view.shape[-1] * self.local_view.shape[-2]
        ga = self.global_view.shape[-1] * self.global_view.shape[-2]
        if la >= ga:
            raise ConfigurationError(
                f"local view area {la} must be smaller than global view area {ga}")


@dataclass
class PatchSelection:
    """Mined grid cells, flat row-major indices."""

    positives: list
    negatives: list

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ConfigurationError("positive and negative counts must match")
        if set(self.positives) & set(self.negatives):
            raise ConfigurationError("positives and negatives must be disjoint")


@dataclass
class EmaSchedule:
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.lambda_start <= self.lambda_end <= 1.0:
            raise ConfigurationError("need 0 < lambda_start <= lambda_end <= 1")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")


# ---------------------------------------------------------------------------
# augmentation


def _bicubic_resize(img: torch.Tensor, size: int) -> torch.Tensor:
    out = F.interpolate(img[None], size=(size, size), mode="bicubic", align_corners=False)
    return out[0].clamp(0.0, 1.0)


def _color_jitter(img, rng, strength):
    # brightness / contrast / saturation, each by a factor in 1 +- strength
    fb, fc, fs = 1.0 + strength * (2.0 * rng.random(3) - 1.0)
    img = img * fb
    mean = img.mean()
    img = (img - mean) * fc + mean
    gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    img = (img - gray) * fs + gray
    return img.clamp(0.0, 1.0)


def _gaussian_blur(img, sigma):
    radius = max(1, int(math.ceil(2.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=img.dtype)
    kernel = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = kernel / kernel.sum()
    c = img.shape[0]
    kx = kernel.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = kernel.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    out = F.pad(img[None], (radius, radius, 0, 0), mode="replicate")
    out = F.conv2d(out, kx, groups=c)
    out = F.pad(out, (0, 0, radius, radius), mode="replicate")
    out = F.conv2d(out, ky, groups=c)
    return out[0]


def _solarize(img, threshold):
    return torch.where(img >= threshold, 1.0 - img, img)


def _augment_one(img, rng, out_size, scale_range, cfg):
    h, w = img.shape[-2:]
    side_min = int(math.ceil(scale_range[0] * min(h, w)))
    side_max = int(math.floor(scale_range[1] * min(h, w)))
    side_min = max(1, side_min)
    if side_max < side_min:
        raise ConfigurationError(f"empty crop range {scale_range} for {h}x{w} input")
    side = int(rng.integers(side_min, side_max + 1))
    if side > min(h, w):
        raise ConfigurationError(f"crop side {side} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = img[:, top:top + side, left:left + side]
    out = _bicubic_resize(out, out_size)
    if rng.random() < cfg.jitter_prob:
        out = _color_jitter(out, rng, cfg.jitter_strength)
    if rng.random() < cfg.blur_prob:
        sigma = cfg.blur_sigma_min + rng.random() * (cfg.blur_sigma_max - cfg.blur_sigma_min)
        out = _gaussian_blur(out, sigma)
    if rng.random() < cfg.solarize_prob:
        out = _solarize(out, cfg.solarize_threshold)
    return out.clamp(0.0, 1.0)


def augment_views(image: torch.Tensor, seed: int, cfg) -> ViewPair:
    """Produce one (local, global) augmented view pair, seeded.

    ``cfg`` supplies view sizes, crop scale ranges and augmentation
    probabilities (see trainer.TrainConfig). The two views use
    independent draws from the same seeded stream.
    """
    rng = np.random.default_rng(seed)
    g = _augment_one(image, rng, cfg.global_view, (cfg.global_scale_min, cfg.global_scale_max), cfg)
    l = _augment_one(image, rng, cfg.local_view, (cfg.local_scale_min, cfg.local_scale_max), cfg)
    return ViewPair(local_view=l, global_view=g)


# ---------------------------------------------------------------------------
# logits plumbing


def image_logits(class_map: torch.Tensor) -> torch.Tensor:
    """Image-level logits: sum of the class map over all grid cells."""
    if class_map.dim() != 3:
        raise ConfigurationError(f"expected (Gh,Gw,K) map, got {tuple(class_map.shape)}")
    return class_map.sum(dim=(0, 1))


def center_teacher(class_map: torch.Tensor, center: torch.Tensor,
                   sign: int = 1) -> torch.Tensor:
    """Shift every grid cell of the teacher map by the running center."""
    if class_map.shape[-1] != center.shape[-1]:
        raise ConfigurationError(
            f"center dim {center.shape[-1]} does not match K={class_map.shape[-1]}")
    return class_map + float(sign) * center


def loss_st(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            literal_order: bool = False) -> torch.Tensor:
    """Image-level distillation cross-entropy between softmax distributions.

    Default orientation uses the teacher distribution as the target.
    ``literal_order`` instead weights by the student distribution (the
    alternative reading of the loss definition); either way the teacher
    is a constant.
    """
    if not (torch.isfinite(student_logits).all() and torch.isfinite(teacher_logits).all()):
        raise TrainingDivergenceError("non-finite logits in distillation loss")
    p_s = F.softmax(student_logits, dim=-1)
    p_t = F.softmax(teacher_logits.detach(), dim=-1)
    if literal_order:
        return -(p_s * torch.log(p_t.clamp_min(PROB_FLOOR))).sum()
    return -(p_t * torch.log(p_s.clamp_min(PROB_FLOOR))).sum()


def mine_patches(class_map: torch.Tensor, image_vec: torch.Tensor, count: int) -> PatchSelection:
    """Pick the grid cells most / least aligned with the image logits.

    Cells are scored by cosine similarity between their K-vector and the
    image-level logits; the top ``count`` become positives and the bottom
    ``count`` negatives. Ties resolve by ascending row-major index on the
    positive end (stable descending sort), so positives prefer earlier
    cells and negatives later ones.
    """
    gh, gw, k = class_map.shape
    cells = gh * gw
    if count < 1 or count > cells // 2:
        raise ConfigurationError(f"count {count} invalid for a {gh}x{gw} grid")
    with torch.no_grad():
        c = image_vec.detach().double()
        cnorm = float(torch.linalg.vector_norm(c))
        if cnorm < NORM_FLOOR:
            raise DegenerateLogitsError("image logits have near-zero norm")
        flat = class_map.detach().double().reshape(cells, k)
        norms = torch.linalg.vector_norm(flat, dim=1).clamp_min(NORM_FLOOR)
        scores = (flat @ c) / (norms * max(cnorm, NORM_FLOOR))
        order = torch.argsort(scores, descending=True, stable=True)
    order = [int(i) for i in order]
    return PatchSelection(positives=order[:count], negatives=order[-count:][::-1])


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # a: (M,K), b: (N,K) -> (M,N)
    na = torch.linalg.vector_norm(a, dim=1).clamp_min(NORM_FLOOR)
    nb = torch.linalg.vector_norm(b, dim=1).clamp_min(NORM_FLOOR)
    return (a @ b.T) / (na[:, None] * nb[None, :])


def loss_rho(student_map: torch.Tensor, teacher_map: torch.Tensor,
             sel_s: PatchSelection, sel_t: PatchSelection,
             tau: float, include_positive: bool = False) -> torch.Tensor:
    """Patch-wise contrastive loss over mined positives and negatives.

    Every student positive is pulled toward every teacher positive and
    pushed from the teacher map evaluated at both negative sets. The
    denominator covers only the 2M negatives; ``include_positive`` adds
    the positive pair itself (the common InfoNCE variant).
    """
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    if student_map.shape != teacher_map.shape:
        raise ConfigurationError(
            f"student grid {tuple(student_map.shape)} != teacher grid {tuple(teacher_map.shape)}")
    k = student_map.shape[-1]
    s_flat = student_map.reshape(-1, k)
    t_flat = teacher_map.detach().reshape(-1, k)
    anchors = s_flat[list(sel_s.positives)]
    targets = t_flat[list(sel_t.positives)]
    negatives = t_flat[list(sel_t.negatives) + list(sel_s.negatives)]
    pos_sim = _cosine(anchors, targets) / tau        # (M, M)
    neg_sim = _cosine(anchors, negatives) / tau      # (M, 2M)
    log_denom = torch.logsumexp(neg_sim, dim=1, keepdim=True)
    if include_positive:
        log_denom = torch.logaddexp(log_denom.expand_as(pos_sim), pos_sim)
    m = pos_sim.shape[0]
    return (log_denom - pos_sim).sum() / (m * m)


# ---------------------------------------------------------------------------
# EMA machinery


def lambda_at(step: int, sched: EmaSchedule) -> float:
    """Cosine momentum schedule value at a step (endpoints exact)."""
    if not 0 <= step <= sched.total_steps:
        raise ConfigurationError(
            f"step {step} outside [0, {sched.total_steps}]")
    frac = step / sched.total_steps
    return sched.lambda_end - (sched.lambda_end - sched.lambda_start) \
        * (1.0 + math.cos(math.pi * frac)) / 2.0


@torch.no_grad()
def ema_update(teacher, student, lam: float) -> None:
    """In-place teacher <- lam * teacher + (1 - lam) * student."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda {lam} outside [0,1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ConfigurationError("teacher/student parameter names differ")
    for name, p_t in t_params.items():
        p_s = s_params[name]
        if p_t.shape != p_s.shape:
            raise ConfigurationError(f"shape mismatch for parameter {name!r}")
        p_t.mul_(lam).add_(p_s, alpha=1.0 - lam)


def ema_center(center: torch.Tensor, batch_center: torch.Tensor, lam: float) -> torch.Tensor:
    """New running center lam * center + (1 - lam) * batch_center."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda {lam} outside [0,1]")
    if center.shape != batch_center.shape:
        raise ConfigurationError("center dimension mismatch")
    return lam * center + (1.0 - lam) * batch_center.detach()
