import math

import numpy as np
import pytest
import torch

from selfsal import pseudogt as pg
from selfsal.errors import ConfigurationError, CorpusError, TrainingDivergenceError
from selfsal.model import build_model

from conftest import assert_grads_match, micro_arch, numeric_grad


# ---------------------------------------------------------------------------
# oracles


def bilinear_oracle(src, out_h, out_w):
    """Half-pixel bilinear resampling with explicit loops (matches the
    library's align_corners=False convention, negative coords clamped)."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = max(0.0, (i + 0.5) * h / out_h - 0.5)
            x = max(0.0, (j + 0.5) * w / out_w - 0.5)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (src[y0, x0] * (1 - dy) * (1 - dx)
                         + src[y1, x0] * dy * (1 - dx)
                         + src[y0, x1] * (1 - dy) * dx
                         + src[y1, x1] * dy * dx)
    return out


def sobel_oracle(image):
    """Direct convolution with explicit 3x3 kernels, replicate padding."""
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    r, g, b = image[0], image[1], image[2]
    gray = 0.299 * r + 0.587 * g + 0.114 * b
    gray = gray.numpy().astype(np.float64)
    h, w = gray.shape
    mag = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    gx += kx[di + 1][dj + 1] * gray[ii, jj]
                    gy += ky[di + 1][dj + 1] * gray[ii, jj]
            mag[i, j] = math.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    return mag / peak if peak >= 1e-8 else np.zeros_like(mag)


def dilate_oracle(binary, radius):
    """Sliding-window max with explicit loops, clipped at borders."""
    h, w = binary.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            lo_i, hi_i = max(0, i - radius), min(h, i + radius + 1)
            lo_j, hi_j = max(0, j - radius), min(w, j + radius + 1)
            out[i, j] = binary[lo_i:hi_i, lo_j:hi_j].max()
    return out


def bce_oracle(target, pred):
    total = 0.0
    t = target.reshape(-1).tolist()
    p = pred.reshape(-1).tolist()
    for ti, pi in zip(t, p):
        pi = min(max(pi, 1e-6), 1.0 - 1e-6)
        total += -(ti * math.log(pi) + (1.0 - ti) * math.log(1.0 - pi))
    return total


def gs_oracle(pred, image, gate, psi_eps=1e-6):
    pred = pred.numpy().astype(np.float64)
    gray = (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]).numpy()
    gated = gate.numpy() * gray
    h, w = pred.shape
    total = 0.0
    for i in range(h):
        for j in range(w - 1):
            s = abs(pred[i, j + 1] - pred[i, j]) * math.exp(
                -0.5 * abs(gated[i, j + 1] - gated[i, j]))
            total += math.sqrt(s * s + psi_eps)
    for i in range(h - 1):
        for j in range(w):
            s = abs(pred[i + 1, j] - pred[i, j]) * math.exp(
                -0.5 * abs(gated[i + 1, j] - gated[i, j]))
            total += math.sqrt(s * s + psi_eps)
    return total


# ---------------------------------------------------------------------------
# CAM


def test_normalize_cam_contract():
    raw = torch.tensor([[0.2, 0.7], [1.4, -0.3]], dtype=torch.float64)
    out = pg.normalize_cam(raw)
    assert float(out.min()) == 0.0
    assert float(out.max()) == 1.0
    flat = torch.full((4, 4), 3.25, dtype=torch.float64)
    assert torch.equal(pg.normalize_cam(flat), torch.zeros(4, 4, dtype=torch.float64))


def test_cam_from_features_matches_oracle(rng):
    feats = torch.tensor(rng.normal(size=(3, 2, 2)))
    weights = torch.zeros(5, 3, dtype=torch.float64)
    weights[2, 0] = 1.0  # class 2 reads channel 0 only
    cam = pg.cam_from_features(feats, weights, 2, (8, 8))
    up = bilinear_oracle(feats[0].numpy(), 8, 8)
    expect = (up - up.min()) / (up.max() - up.min())
    assert np.allclose(cam.numpy(), expect, atol=1e-12)


def test_cam_weighted_sum_oracle(rng):
    for _ in range(20):
        feats = torch.tensor(rng.normal(size=(4, 3, 5)))
        weights = torch.tensor(rng.normal(size=(6, 4)))
        k = int(rng.integers(0, 6))
        cam = pg.cam_from_features(feats, weights, k, (9, 10))
        raw = np.zeros((3, 5))
        for c in range(4):
            raw += weights[k, c].item() * feats[c].numpy()
        up = bilinear_oracle(raw, 9, 10)
        if up.max() - up.min() < 1e-8:
            expect = np.zeros_like(up)
        else:
            expect = (up - up.min()) / (up.max() - up.min())
        assert np.allclose(cam.numpy(), expect, atol=1e-9)


def test_compute_cam_shape_and_range():
    model = build_model(micro_arch(), seed=0, dtype=torch.float64)
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    cam = pg.compute_cam(x, model)
    assert cam.shape == (16, 16)
    assert float(cam.min()) == 0.0 and float(cam.max()) == 1.0


# ---------------------------------------------------------------------------
# edges


def test_edges_constant_image_zero():
    x = torch.full((3, 8, 8), 0.4, dtype=torch.float64)
    assert torch.equal(pg.detect_edges(x), torch.zeros(8, 8, dtype=torch.float64))


def test_edges_vertical_step():
    x = torch.zeros(3, 8, 8, dtype=torch.float64)
    x[:, :, 4:] = 1.0
    e = pg.detect_edges(x)
    assert torch.allclose(e[:, 3:5], torch.ones(8, 2, dtype=torch.float64))
    assert float(e[:, :2].abs().max()) < 1e-12   # zero far from the step
    assert float(e[:, 6:].abs().max()) < 1e-12


def test_edges_match_convolution_oracle(rng):
    for _ in range(10):
        x = torch.tensor(rng.random((3, 8, 8)))
        e = pg.detect_edges(x)
        assert np.allclose(e.numpy(), sobel_oracle(x), atol=1e-10)


def test_file_edge_provider(tmp_path, rng):
    from PIL import Image as PILImage
    arr = (rng.random((8, 8)) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(tmp_path / "a.png")
    provider = pg.FileEdgeProvider(tmp_path)
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    edges = provider(x, key="a")
    assert np.allclose(edges.numpy(), arr / 255.0)
    with pytest.raises(CorpusError):
        provider(x, key="missing")
    with pytest.raises(CorpusError):
        provider(torch.rand(3, 4, 4), key="a")
    with pytest.raises(CorpusError):
        pg.FileEdgeProvider(tmp_path / "absent")


# ---------------------------------------------------------------------------
# gate / fusion


def test_gate_zero_cam():
    cam = torch.zeros(8, 8)
    assert torch.equal(pg.make_gate(cam, 0.5, 2), torch.zeros(8, 8))


def test_gate_single_pixel_neighborhood():
    cam = torch.zeros(6, 6)
    cam[2, 3] = 0.9
    gate = pg.make_gate(cam, 0.5, 1)
    expect = torch.zeros(6, 6)
    expect[1:4, 2:5] = 1.0
    assert torch.equal(gate, expect)
    corner = torch.zeros(5, 5)
    corner[0, 0] = 1.0
    gate = pg.make_gate(corner, 0.5, 1)
    expect = torch.zeros(5, 5)
    expect[:2, :2] = 1.0
    assert torch.equal(gate, expect)


def test_gate_matches_sliding_max_oracle(rng):
    for _ in range(25):
        binary = (rng.random((9, 9)) > 0.7).astype(np.float64)
        gate = pg.make_gate(torch.tensor(binary), 0.5, 2)
        assert np.array_equal(gate.numpy(), dilate_oracle(binary, 2))


def test_gate_extensive_and_monotone(rng):
    cam = torch.tensor(rng.random((12, 12)))
    thresholded = (cam >= 0.5).double()
    g1 = pg.make_gate(cam, 0.5, 1)
    g3 = pg.make_gate(cam, 0.5, 3)
    assert bool((g1 >= thresholded).all())
    assert bool((g3 >= g1).all())
    with pytest.raises(ConfigurationError):
        pg.make_gate(cam, 1.5, 1)
    with pytest.raises(ConfigurationError):
        pg.make_gate(cam, 0.5, -1)


def test_scaled_radius():
    assert pg.scaled_radius(3, 64) == 3
    assert pg.scaled_radius(3, 128) == 6
    assert pg.scaled_radius(3, 16) == 1


def test_gate_edges_basics(rng):
    e = torch.tensor(rng.random((6, 6)))
    zeros = torch.zeros(6, 6, dtype=e.dtype)
    ones = torch.ones(6, 6, dtype=e.dtype)
    assert torch.equal(pg.gate_edges(e, zeros), zeros)
    binary = (e >= 0.5).double()
    assert torch.equal(pg.gate_edges(binary, ones, edge_threshold=0.5), binary)
    g = (torch.tensor(rng.random((6, 6))) > 0.5).double()
    expect = (e >= 0.2).double() * g
    assert torch.equal(pg.gate_edges(e, g), expect)
    with pytest.raises(ConfigurationError):
        pg.gate_edges(e, torch.zeros(4, 4))


def test_gate_edges_monotone_in_gate(rng):
    e = torch.tensor(rng.random((10, 10)))
    g_small = (torch.tensor(rng.random((10, 10))) > 0.6).double()
    g_big = torch.maximum(g_small, (torch.tensor(rng.random((10, 10))) > 0.6).double())
    out_small = pg.gate_edges(e, g_small)
    out_big = pg.gate_edges(e, g_big)
    assert bool((out_big >= out_small).all())


def test_fuse_pseudo_gt(rng):
    cam = torch.tensor(rng.random((7, 7)))
    ge = (torch.tensor(rng.random((7, 7))) > 0.5).double()
    out = pg.fuse_pseudo_gt(cam, ge)
    assert torch.equal(out.soft, torch.maximum(cam, ge))
    assert bool((out.soft >= cam).all()) and bool((out.soft >= ge).all())
    assert set(out.hard.unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(out.hard, (out.soft >= 0.5).double())
    # identity / absorbing / commutativity
    assert torch.equal(pg.fuse_pseudo_gt(cam, torch.zeros(7, 7).double()).soft, cam)
    ones = torch.ones(7, 7).double()
    assert torch.equal(pg.fuse_pseudo_gt(ones, ge).soft, ones)
    assert torch.equal(pg.fuse_pseudo_gt(cam, ge).soft, pg.fuse_pseudo_gt(ge, cam).soft)


# ---------------------------------------------------------------------------
# losses


def test_loss_pgt_symmetric_point():
    val = pg.loss_pgt(torch.tensor([[0.5]], dtype=torch.float64),
                      torch.tensor([[0.5]], dtype=torch.float64))
    assert abs(float(val) - math.log(2.0)) < 1e-12


def test_loss_pgt_clamp_limit():
    pred = torch.tensor([[1e-6, 1.0 - 1e-6]] * 2, dtype=torch.float64)
    target = (pred >= 0.5).double()
    val = float(pg.loss_pgt(target, pred))
    assert val < 4 * 1e-5
    assert val > 0.0


def test_loss_pgt_matches_loop_oracle(rng):
    for _ in range(25):
        t = (rng.random((4, 4)) > 0.5).astype(np.float64)
        p = rng.random((4, 4))
        val = float(pg.loss_pgt(torch.tensor(t), torch.tensor(p)))
        assert abs(val - bce_oracle(t, p)) < 1e-10


def test_loss_pgt_gradient_matches_finite_differences(rng):
    t = torch.tensor((rng.random((4, 4)) > 0.5).astype(np.float64))
    p = torch.tensor(rng.random((4, 4)) * 0.8 + 0.1, requires_grad=True)
    pg.loss_pgt(t, p).backward()
    numeric = numeric_grad(lambda: pg.loss_pgt(t, p.detach()), p.data)
    assert_grads_match(p.grad, numeric, label="loss_pgt")


def test_loss_gs_constant_prediction_anchor():
    pred = torch.full((4, 4), 0.37, dtype=torch.float64)
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    g = torch.ones(4, 4, dtype=torch.float64)
    val = float(pg.loss_gs(pred, x, g))
    assert abs(val - 24 * 1e-3) < 1e-12


def test_loss_gs_zero_gate_is_plain_smoothness(rng):
    pred = torch.tensor(rng.random((5, 5)))
    x = torch.tensor(rng.random((3, 5, 5)))
    g = torch.zeros(5, 5, dtype=torch.float64)
    val = float(pg.loss_gs(pred, x, g))
    dh = (pred[:, 1:] - pred[:, :-1]).abs()
    dv = (pred[1:, :] - pred[:-1, :]).abs()
    expect = float(torch.sqrt(dh * dh + 1e-6).sum() + torch.sqrt(dv * dv + 1e-6).sum())
    assert abs(val - expect) < 1e-12


def test_loss_gs_matches_loop_oracle(rng):
    for _ in range(10):
        pred = torch.tensor(rng.random((6, 6)))
        x = torch.tensor(rng.random((3, 6, 6)))
        g = (torch.tensor(rng.random((6, 6))) > 0.4).double()
        val = float(pg.loss_gs(pred, x, g))
        assert abs(val - gs_oracle(pred, x, g)) < 1e-10


def test_loss_gs_gradient_matches_finite_differences(rng):
    pred = torch.tensor(rng.random((6, 6)), requires_grad=True)
    x = torch.tensor(rng.random((3, 6, 6)))
    g = (torch.tensor(rng.random((6, 6))) > 0.4).double()
    pg.loss_gs(pred, x, g).backward()
    numeric = numeric_grad(lambda: pg.loss_gs(pred.detach(), x, g), pred.data)
    assert_grads_match(pred.grad, numeric, label="loss_gs")


def test_loss_gs_gate_strengthening_never_increases(rng):
    for _ in range(20):
        pred = torch.tensor(rng.random((6, 6)))
        x = torch.tensor(rng.random((3, 6, 6)))
        g = (torch.tensor(rng.random((6, 6))) > 0.5).double()
        base = float(pg.loss_gs(pred, x, g))
        stronger = float(pg.loss_gs(pred, 3.0 * x, g))
        assert stronger <= base + 1e-12


def test_loss_gs_literal_psi_constant():
    pred = torch.full((4, 4), 0.2, dtype=torch.float64)
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    g = torch.ones(4, 4, dtype=torch.float64)
    val = float(pg.loss_gs(pred, x, g, psi_eps=math.exp(-6.0)))
    assert abs(val - 24 * math.sqrt(math.exp(-6.0))) < 1e-12


def test_losses_nonnegative(rng):
    for _ in range(50):
        t = (rng.random((4, 4)) > 0.5).astype(np.float64)
        p = rng.random((4, 4))
        assert float(pg.loss_pgt(torch.tensor(t), torch.tensor(p))) >= 0.0
        x = torch.tensor(rng.random((3, 4, 4)))
        g = (torch.tensor(rng.random((4, 4))) > 0.5).double()
        assert float(pg.loss_gs(torch.tensor(p), x, g)) >= 0.0


def test_total_loss():
    assert abs(float(pg.total_loss(1.0, 1.0, 1.0, 1.0, 0.3)) - 3.3) < 1e-12
    assert float(pg.total_loss(0.0, 0.0, 0.0, 0.0)) == 0.0
    assert float(pg.total_loss(1.0, 2.0, 3.0, 99.0, beta1=0.0)) == 6.0
    with pytest.raises(TrainingDivergenceError, match="l_pgt"):
        pg.total_loss(1.0, 1.0, float("nan"), 1.0)
    with pytest.raises(TrainingDivergenceError, match="l_gs"):
        pg.total_loss(1.0, 1.0, 1.0, float("inf"))


def test_grayscale_validates():
    with pytest.raises(ConfigurationError):
        pg.grayscale(torch.rand(1, 4, 4))
