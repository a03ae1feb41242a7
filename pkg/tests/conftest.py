import numpy as np
import pytest
import torch

from selfsal.model import ArchConfig

torch.set_num_threads(1)


def micro_arch(num_classes=4, patch_size=32) -> ArchConfig:
    """Smallest architecture that still exercises every code path;
    used for finite-difference checks where parameter count matters."""
    return ArchConfig(
        widths=(4, 4, 6, 6),
        token_dim=8,
        heads=2,
        tx_blocks=1,
        mlp_ratio=2,
        pos_grid=2,
        patch_pool=2,
        class_width=6,
        patch_size=patch_size,
        num_classes=num_classes,
    )


def numeric_grad(func, tensor, eps=1e-6):
    """Central finite differences of a scalar function w.r.t. every
    element of ``tensor`` (modified in place and restored)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(func())
        flat[i] = orig - eps
        lo = float(func())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grads_match(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    diff = (analytic - numeric).abs()
    bound = atol + rtol * numeric.abs()
    bad = diff > bound
    assert not bool(bad.any()), (
        f"{label}: {int(bad.sum())}/{numeric.numel()} gradient entries off; "
        f"worst abs diff {float(diff.max()):.3e}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
