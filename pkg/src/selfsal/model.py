"""Base saliency network: local CNN encoder, global attention encoder,
feature fusion, saliency decoder and patch-classification decoder.

The network takes a batch of RGB images in [0,1] (B,3,H,W) and produces
a per-pixel saliency map in [0,1] (B,H,W) plus a patch-wise class logits
map (B,Gh,Gw,K), one K-vector per non-overlapping PxP patch.

Design constraints honoured throughout:
  - forward is a pure function of (input, parameters): no batch norm,
    no dropout, so outputs never depend on batch composition or mode;
  - every op is differentiable and dtype-agnostic (float64 supported for
    finite-difference verification);
  - H and W must be divisible by 8 (encoder depth) and by the effective
    patch size.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass
class ArchConfig:
    """Architecture descriptor. Shipped inside every checkpoint."""

    in_channels: int = 3
    widths: tuple = (16, 32, 64, 64)   # encoder stage channels at strides 1,2,4,8
    token_dim: int = 64                # global-encoder token width
    heads: int = 4
    tx_blocks: int = 2
    mlp_ratio: int = 2
    pos_grid: int = 8                  # learned positional grid, interpolated to the token grid
    patch_pool: int = 4                # per-patch pooling size feeding the token embedding
    class_width: int = 32              # classification-decoder trunk channels
    patch_size: int = 32               # default classification patch size P
    num_classes: int = 200             # K

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ConfigurationError("widths must list 4 encoder stage channels")
        if self.token_dim % self.heads != 0:
            raise ConfigurationError("token_dim must be divisible by heads")
        for name in ("token_dim", "heads", "tx_blocks", "pos_grid", "patch_pool",
                     "class_width", "patch_size", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def effective_patch_size(side: int, patch: int) -> int:
    """Patch size actually used for an input of the given side.

    The configured patch size applies whenever it leaves at least a 2x2
    grid; smaller inputs (augmented views) fall back to side//2 so the
    class-logits grid never degenerates below 2x2.
    """
    eff = min(patch, side // 2)
    if eff < 1:
        raise ConfigurationError(f"input side {side} too small for patching")
    return eff


def _norm(ch: int) -> nn.GroupNorm:
    # keep >= 2 channels per group so 1x1 spatial maps still normalize
    if ch % 4 == 0 and ch >= 8:
        groups = 4
    elif ch % 2 == 0 and ch >= 4:
        groups = 2
    else:
        groups = 1
    return nn.GroupNorm(groups, ch)


class ConvBlock(nn.Module):
    """3x3 conv + group norm + ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ResUBlock(nn.Module):
    """Residual block whose body is a 2-level mini U-net.

    The inner encoder/decoder widens the receptive field at constant
    resolution; the residual path keeps gradients well-conditioned.
    """

    def __init__(self, cin, cout):
        super().__init__()
        mid = max(2, cout // 2)
        self.conv_in = ConvBlock(cin, cout)
        self.enc1 = ConvBlock(cout, mid)
        self.enc2 = ConvBlock(mid, mid)
        self.dec1 = ConvBlock(mid + mid, cout)

    def forward(self, x):
        h0 = self.conv_in(x)
        h1 = self.enc1(h0)
        if min(h1.shape[-2:]) >= 2:
            h2 = self.enc2(F.max_pool2d(h1, 2))
            h2 = F.interpolate(h2, size=h1.shape[-2:], mode="bilinear",
                               align_corners=False)
        else:
            h2 = self.enc2(h1)  # nothing left to pool at 1x1
        return self.dec1(torch.cat([h1, h2], dim=1)) + h0


class LocalEncoder(nn.Module):
    """4-stage U-style encoder; returns features at strides 1, 2, 4, 8."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.widths
        self.stage1 = ResUBlock(arch.in_channels, w[0])
        self.stage2 = ResUBlock(w[0], w[1])
        self.stage3 = ResUBlock(w[1], w[2])
        self.stage4 = ResUBlock(w[2], w[3])

    def forward(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(F.max_pool2d(f1, 2))
        f3 = self.stage3(F.max_pool2d(f2, 2))
        f4 = self.stage4(F.max_pool2d(f3, 2))
        return [f1, f2, f3, f4]


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class GlobalEncoder(nn.Module):
    """Transformer over patch tokens; mixes context across the full grid.

    Each PxP patch is average-pooled to a fixed patch_pool^2 stencil and
    linearly embedded, which keeps the embedding independent of the patch
    size actually in effect. Positional embeddings are learned on a fixed
    pos_grid and bilinearly resampled to the token grid.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        in_dim = arch.in_channels * arch.patch_pool ** 2
        self.embed = nn.Linear(in_dim, arch.token_dim)
        self.pos = nn.Parameter(torch.zeros(1, arch.token_dim, arch.pos_grid, arch.pos_grid))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(arch.token_dim, arch.heads, arch.mlp_ratio)
            for _ in range(arch.tx_blocks)
        )
        self.norm = nn.LayerNorm(arch.token_dim)

    def forward(self, x, patch: int):
        b, c, h, w = x.shape
        if h % patch or w % patch:
            raise ConfigurationError(
                f"input {h}x{w} not divisible by patch size {patch}")
        gh, gw = h // patch, w // patch
        pp = self.arch.patch_pool
        patches = x.unfold(2, patch, patch).unfold(3, patch, patch)      # (b,c,gh,gw,p,p)
        patches = patches.permute(0, 2, 3, 1, 4, 5)                      # (b,gh,gw,c,p,p)
        patches = patches.reshape(b * gh * gw * c, 1, patch, patch)
        pooled = F.adaptive_avg_pool2d(patches, pp)
        tokens = self.embed(pooled.reshape(b, gh * gw, c * pp * pp))
        pos = self.pos
        if pos.shape[-2:] != (gh, gw):
            pos = F.interpolate(pos, size=(gh, gw), mode="bilinear", align_corners=False)
        tokens = tokens + pos.reshape(1, -1, gh * gw).transpose(1, 2)
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)                                         # (b, gh*gw, D)


def fuse_features(pyramid: list, tokens: torch.Tensor, grid: tuple) -> torch.Tensor:
    """Concatenate the deepest local feature with the token map.

    Tokens arrive as (B, Gh*Gw, D) on the grid given by ``grid`` and are
    resampled (nearest when upsampling, average when pooling down) to the
    deepest pyramid resolution before channel concatenation.
    """
    deep = pyramid[-1]
    b, n, d = tokens.shape
    gh, gw = grid
    if gh * gw != n:
        raise ConfigurationError(f"token count {n} does not match grid {grid}")
    tok = tokens.transpose(1, 2).reshape(b, d, gh, gw)
    th, tw = deep.shape[-2:]
    if (gh, gw) != (th, tw):
        if th >= gh and tw >= gw and th % gh == 0 and tw % gw == 0:
            tok = F.interpolate(tok, size=(th, tw), mode="nearest")
        elif gh % th == 0 and gw % tw == 0:
            tok = F.adaptive_avg_pool2d(tok, (th, tw))
        else:
            raise ConfigurationError(
                f"token grid {grid} not alignable to feature grid {(th, tw)}")
    return torch.cat([deep, tok], dim=1)


class SaliencyDecoder(nn.Module):
    """U-style decoder over the fused features with pyramid skips."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.widths
        fused = w[3] + arch.token_dim
        self.dec4 = ConvBlock(fused, w[3])
        self.dec3 = ConvBlock(w[3] + w[2], w[2])
        self.dec2 = ConvBlock(w[2] + w[1], w[1])
        self.dec1 = ConvBlock(w[1] + w[0], w[0])
        self.head = nn.Conv2d(w[0], 1, 3, padding=1)

    def forward(self, fused, pyramid):
        f1, f2, f3, _ = pyramid
        h = self.dec4(fused)
        h = F.interpolate(h, size=f3.shape[-2:], mode="bilinear", align_corners=False)
        h = self.dec3(torch.cat([h, f3], dim=1))
        h = F.interpolate(h, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        h = self.dec2(torch.cat([h, f2], dim=1))
        h = F.interpolate(h, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        h = self.dec1(torch.cat([h, f1], dim=1))
        return torch.sigmoid(self.head(h)).squeeze(1)                    # (b, H, W)


class ClassDecoder(nn.Module):
    """Patch classification head.

    A small trunk refines the fused features back to stride 4 (with one
    pyramid skip); the refined maps are pooled onto the patch grid and
    projected to K classes with a 1x1 conv. The trunk output doubles as
    the spatial evidence map for class activation maps, and ``proj``
    holds the per-class weights used there.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.widths
        cw = arch.class_width
        self.trunk1 = ConvBlock(w[3] + arch.token_dim, cw)
        self.trunk2 = ConvBlock(cw + w[2], cw)
        self.proj = nn.Conv2d(cw, arch.num_classes, 1)

    def features(self, fused, pyramid):
        f3 = pyramid[2]
        h = self.trunk1(fused)
        h = F.interpolate(h, size=f3.shape[-2:], mode="bilinear", align_corners=False)
        return self.trunk2(torch.cat([h, f3], dim=1))                    # (b, cw, H/4, W/4)

    def forward(self, fused, pyramid, grid):
        feats = self.features(fused, pyramid)
        pooled = F.adaptive_avg_pool2d(feats, grid)
        logits = self.proj(pooled)                                       # (b, K, gh, gw)
        return logits.permute(0, 2, 3, 1), feats                         # (b, gh, gw, K)


class BaseNetwork(nn.Module):
    """Dual-encoder / dual-decoder saliency + patch-classification net."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.local_encoder = LocalEncoder(arch)
        self.global_encoder = GlobalEncoder(arch)
        self.saliency_decoder = SaliencyDecoder(arch)
        self.class_decoder = ClassDecoder(arch)

    def _check_input(self, x, patch):
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ConfigurationError(
                f"expected (B,{self.arch.in_channels},H,W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ConfigurationError(f"input sides must be divisible by 8, got {h}x{w}")
        if h % patch or w % patch:
            raise ConfigurationError(
                f"input {h}x{w} not divisible by patch size {patch}")

    def resolve_patch(self, x, patch_size=None) -> int:
        side = min(x.shape[-2:])
        return effective_patch_size(side, patch_size or self.arch.patch_size)

    def forward_parts(self, x, patch_size=None) -> dict:
        """Run all five stages and return every intermediate product."""
        patch = self.resolve_patch(x, patch_size)
        self._check_input(x, patch)
        h, w = x.shape[-2:]
        grid = (h // patch, w // patch)
        pyramid = self.local_encoder(x)
        tokens = self.global_encoder(x, patch)
        fused = fuse_features(pyramid, tokens, grid)
        saliency = self.saliency_decoder(fused, pyramid)
        class_map, class_feats = self.class_decoder(fused, pyramid, grid)
        return {
            "patch": patch,
            "grid": grid,
            "pyramid": pyramid,
            "tokens": tokens,
            "fused": fused,
            "saliency": saliency,
            "class_map": class_map,
            "class_features": class_feats,
        }

    def forward(self, x, patch_size=None):
        parts = self.forward_parts(x, patch_size)
        return parts["saliency"], parts["class_map"]


def build_model(arch: ArchConfig, seed: int = 0, dtype=torch.float32) -> BaseNetwork:
    """Construct a network with fan-in-scaled uniform init, reproducibly.

    torch's default conv/linear init is already fan-in-scaled uniform;
    seeding the global generator before construction pins every draw.
    """
    torch.manual_seed(seed)
    model = BaseNetwork(arch)
    return model.to(dtype)


def clone_as_teacher(student: BaseNetwork) -> BaseNetwork:
    """Exact copy of the student with gradients disabled."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher
