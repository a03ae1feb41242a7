"""Pseudo ground-truth generation and the saliency losses.

The label for one image is built with no annotations: a class activation
map from the classification decoder, an edge map of the image, a gate
cut from the dilated thresholded activation map, and the union (pixel
max) of the activation map with the gated edges. Both saliency losses
consume that label as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ConfigurationError, CorpusError, TrainingDivergenceError

DEGENERATE_EPS = 1e-8
PRED_CLAMP = 1e-6

LUMA = (0.299, 0.587, 0.114)

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class PseudoGT:
    soft: torch.Tensor   # (H,W) in [0,1]
    hard: torch.Tensor   # (H,W) in {0,1}


def grayscale(image: torch.Tensor) -> torch.Tensor:
    """Luma of a (3,H,W) image."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"expected (3,H,W) image, got {tuple(image.shape)}")
    r, g, b = LUMA
    return r * image[0] + g * image[1] + b * image[2]


def normalize_cam(raw: torch.Tensor) -> torch.Tensor:
    """Min-max normalize a raw activation map; degenerate maps go to zero."""
    lo = raw.min()
    hi = raw.max()
    if float(hi - lo) < DEGENERATE_EPS:
        return torch.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def cam_from_features(features: torch.Tensor, class_weights: torch.Tensor,
                      class_index: int, out_size: tuple) -> torch.Tensor:
    """Weighted sum of spatial evidence maps for one class, upsampled
    bilinearly to ``out_size`` and min-max normalized."""
    if features.dim() != 3:
        raise ConfigurationError(f"expected (C,h,w) features, got {tuple(features.shape)}")
    if class_weights.shape[1] != features.shape[0]:
        raise ConfigurationError("class weight width does not match feature channels")
    raw = (class_weights[class_index][:, None, None] * features).sum(dim=0)
    up = F.interpolate(raw[None, None], size=out_size, mode="bilinear",
                       align_corners=False)[0, 0]
    return normalize_cam(up)


@torch.no_grad()
def compute_cam(image: torch.Tensor, model) -> torch.Tensor:
    """Class activation map of one (3,H,W) image under a model.

    The class is the argmax of the image-level logits; evidence maps are
    the classification decoder's final spatial features weighted by that
    class's projection weights.
    """
    parts = model.forward_parts(image[None])
    logits = parts["class_map"][0].sum(dim=(0, 1))
    k_star = int(torch.argmax(logits))
    feats = parts["class_features"][0]
    weights = model.class_decoder.proj.weight.squeeze(-1).squeeze(-1)
    return cam_from_features(feats, weights, k_star, image.shape[-2:])


# ---------------------------------------------------------------------------
# edges


def detect_edges(image: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude of the luma image, max-normalized.

    Borders are replicate-padded; a flat image returns all zeros.
    """
    gray = grayscale(image)[None, None]
    gray = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    kx = SOBEL_X.to(image.dtype)[None, None]
    ky = SOBEL_Y.to(image.dtype)[None, None]
    gx = F.conv2d(gray, kx)[0, 0]
    gy = F.conv2d(gray, ky)[0, 0]
    mag = torch.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if float(peak) < DEGENERATE_EPS:
        return torch.zeros_like(mag)
    return mag / peak


class SobelEdgeProvider:
    """Default edge source: Sobel magnitude computed from the image."""

    def __call__(self, image: torch.Tensor, key: str | None = None) -> torch.Tensor:
        return detect_edges(image)


class FileEdgeProvider:
    """Edge maps precomputed elsewhere, one 8-bit grayscale file per image.

    Files are matched by corpus id: ``<directory>/<key>.png``.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise CorpusError(f"edge directory not found: {self.directory}")

    def __call__(self, image: torch.Tensor, key: str | None = None) -> torch.Tensor:
        if key is None:
            raise CorpusError("file edge provider needs the image id")
        path = self.directory / f"{key}.png"
        if not path.exists():
            raise CorpusError(f"edge file missing for {key!r}: {path}")
        arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.float64) / 255.0
        if arr.shape != tuple(image.shape[-2:]):
            raise CorpusError(
                f"edge file {path} is {arr.shape}, image is {tuple(image.shape[-2:])}")
        return torch.from_numpy(arr).to(image.dtype)


# ---------------------------------------------------------------------------
# gating and fusion


def make_gate(cam: torch.Tensor, threshold: float = 0.5, radius: int = 3) -> torch.Tensor:
    """Threshold the activation map and dilate with a square element.

    Dilation is a sliding max over a (2r+1)^2 window, clipped at the
    borders, so the gate always contains the thresholded support.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold {threshold} outside (0,1)")
    if radius < 0:
        raise ConfigurationError("dilation radius must be >= 0")
    binary = (cam >= threshold).to(cam.dtype)
    if radius == 0:
        return binary
    return F.max_pool2d(binary[None, None], kernel_size=2 * radius + 1,
                        stride=1, padding=radius)[0, 0]


def scaled_radius(radius_at_64: int, side: int) -> int:
    """Dilation radius proportional to image side (reference side 64)."""
    return max(0, int(round(radius_at_64 * side / 64.0)))


def gate_edges(edges: torch.Tensor, gate: torch.Tensor,
               edge_threshold: float = 0.2) -> torch.Tensor:
    """Binarize the edge map and keep only pixels inside the gate."""
    if edges.shape != gate.shape:
        raise ConfigurationError(
            f"edge map {tuple(edges.shape)} vs gate {tuple(gate.shape)}")
    return (edges >= edge_threshold).to(edges.dtype) * gate


def fuse_pseudo_gt(cam: torch.Tensor, gated_edges: torch.Tensor) -> PseudoGT:
    """Union of activation map and gated edges: pixelwise max, plus the
    0.5-thresholded hard target."""
    if cam.shape != gated_edges.shape:
        raise ConfigurationError(
            f"cam {tuple(cam.shape)} vs gated edges {tuple(gated_edges.shape)}")
    soft = torch.maximum(cam, gated_edges)
    return PseudoGT(soft=soft, hard=(soft >= 0.5).to(soft.dtype))


# ---------------------------------------------------------------------------
# losses


def loss_pgt(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Pixel-summed binary cross-entropy against the pseudo label."""
    if target.shape != pred.shape:
        raise ConfigurationError(
            f"target {tuple(target.shape)} vs prediction {tuple(pred.shape)}")
    t = target.detach()
    p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).sum()


def loss_gs(pred: torch.Tensor, image: torch.Tensor, gate: torch.Tensor,
            psi_eps: float = 1e-6, gate_channels: str = "luma") -> torch.Tensor:
    """Gated structure-aware smoothness penalty.

    Forward differences of the prediction are attenuated where the gated
    image has strong gradients, then passed through psi(s)=sqrt(s^2+eps).
    ``gate_channels``: "luma" gates the grayscale image, "rgb" averages
    per-channel gradient magnitudes.
    """
    h, w = pred.shape[-2:]
    if image.shape[-2:] != (h, w) or gate.shape != pred.shape:
        raise ConfigurationError("prediction / image / gate sizes differ")
    if gate_channels == "luma":
        gated = (gate * grayscale(image))[None]
    elif gate_channels == "rgb":
        gated = gate[None] * image
    else:
        raise ConfigurationError(f"unknown gate_channels {gate_channels!r}")

    def direction(p_diff, g_diff):
        att = torch.exp(-0.5 * g_diff.abs().mean(dim=0))
        s = p_diff.abs() * att
        return torch.sqrt(s * s + psi_eps).sum()

    dh_p = pred[:, 1:] - pred[:, :-1]
    dv_p = pred[1:, :] - pred[:-1, :]
    dh_g = gated[:, :, 1:] - gated[:, :, :-1]
    dv_g = gated[:, 1:, :] - gated[:, :-1, :]
    return direction(dh_p, dh_g) + direction(dv_p, dv_g)


def total_loss(l_st, l_rho, l_pgt, l_gs, beta1: float = 0.3):
    """Overall objective: distillation + contrastive + pseudo-label BCE
    + beta1 * structure loss. Raises naming the first non-finite term."""
    parts = {"l_st": l_st, "l_rho": l_rho, "l_pgt": l_pgt, "l_gs": l_gs}
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not np.isfinite(v):
            raise TrainingDivergenceError(f"loss term {name} is not finite ({v})")
    return l_st + l_rho + l_pgt + beta1 * l_gs
