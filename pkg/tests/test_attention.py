"""Attention map normalization, pooling, upsampling, and localization."""

import math

import numpy as np
import pytest
import torch

from glavcl import attention as A

# softmax over two logits one unit apart: e / (e + 1) and 1 / (e + 1)
TWO_CELL_SOFTMAX = (0.7310585786300049, 0.2689414213699951)

# bilinear (align-corners-false) upsample of [[0.7, 0.1], [0.1, 0.1]]
# to 4x4, renormalized to sum 1; frozen from a 64-bit evaluation
UPSAMPLED_2X2 = np.array(
    [
        [0.175, 0.1375, 0.0625, 0.025],
        [0.1375, 0.109375, 0.053125, 0.025],
        [0.0625, 0.053125, 0.034375, 0.025],
        [0.025, 0.025, 0.025, 0.025],
    ]
)


def rand_map(rng, h=3, w=3, d=4, tau=0.5, mode="softmax"):
    za = torch.tensor(rng.standard_normal(d))
    grid = torch.tensor(rng.standard_normal((h, w, d)))
    return A.attention_map(za, grid, tau, mode=mode)


def test_two_cell_softmax_hand_values():
    za = torch.tensor([1.0, 0.0], dtype=torch.float64)
    grid = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    m = A.attention_map(za, grid, 1.0)
    w = m.weights.flatten().tolist()
    assert math.isclose(w[0], TWO_CELL_SOFTMAX[0], rel_tol=1e-12)
    assert math.isclose(w[1], TWO_CELL_SOFTMAX[1], rel_tol=1e-12)


def test_weights_normalized_and_nonnegative():
    rng = np.random.default_rng(0)
    for mode in ("softmax", "renormalize"):
        for _ in range(10):
            m = rand_map(rng, mode=mode)
            assert abs(float(m.weights.sum()) - 1.0) <= 1e-6
            assert float(m.weights.min()) >= 0.0


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    za = torch.tensor(rng.standard_normal(4))
    grid = torch.tensor(rng.standard_normal((2, 3, 4)))
    base = A.attention_map(za, grid, 0.7)
    # adding a constant to every logit must not change the weights; realize
    # the shift by appending a constant coordinate to audio and grid
    za_s = torch.cat([za, torch.tensor([2.0])])
    grid_s = torch.cat([grid, torch.ones(2, 3, 1) * 1.75], dim=-1)
    shifted = A.attention_map(za_s, grid_s, 0.7)
    assert torch.allclose(base.weights, shifted.weights, atol=1e-6)


def test_renormalize_all_nonpositive_falls_back_to_uniform():
    za = torch.tensor([1.0, 0.0])
    grid = -torch.ones(2, 2, 2)
    m = A.attention_map(za, grid, 1.0, mode="renormalize")
    assert torch.allclose(m.weights, torch.full((2, 2), 0.25))


def test_attention_pool_is_convex_combination():
    rng = np.random.default_rng(2)
    m = rand_map(rng, h=2, w=2, d=3)
    seq = torch.tensor(rng.standard_normal((5, 2, 2, 3)))
    pooled = A.attention_pool(seq, m)
    assert pooled.shape == (5, 3)
    lo = seq.reshape(5, 4, 3).min(dim=1).values
    hi = seq.reshape(5, 4, 3).max(dim=1).values
    assert torch.all(pooled >= lo - 1e-9)
    assert torch.all(pooled <= hi + 1e-9)


def test_uniform_attention_pool_equals_mean():
    seq = torch.arange(24, dtype=torch.float64).reshape(2, 2, 2, 3)
    m = A.AttentionMap(
        weights=torch.full((2, 2), 0.25, dtype=torch.float64),
        logits=torch.zeros(2, 2, dtype=torch.float64),
    )
    pooled = A.attention_pool(seq, m)
    assert torch.allclose(pooled, seq.mean(dim=(1, 2)))


def test_stop_gradient_blocks_attention_path():
    za = torch.randn(3, requires_grad=True, dtype=torch.float64)
    grid = torch.randn(2, 2, 3, dtype=torch.float64)
    seq = torch.randn(4, 2, 2, 3, dtype=torch.float64)
    m = A.attention_map(za, grid, 0.5)
    pooled = A.attention_pool(seq, m, stop_gradient=True)
    assert not pooled.requires_grad  # no path back to za through the weights
    m2 = A.attention_map(za, grid, 0.5)
    pooled2 = A.attention_pool(seq, m2, stop_gradient=False)
    pooled2.sum().backward()
    assert za.grad is not None and float(za.grad.abs().sum()) > 0.0


def test_upsample_hand_values_and_normalization():
    w = torch.tensor([[0.7, 0.1], [0.1, 0.1]], dtype=torch.float64)
    up = A.upsample_attention(w, (4, 4)).numpy()
    np.testing.assert_allclose(up, UPSAMPLED_2X2, atol=1e-7)
    assert abs(up.sum() - 1.0) <= 1e-9


def test_upsample_preserves_argmax_cell():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = rand_map(rng, h=4, w=4, d=4)
        up = A.upsample_attention(m, (16, 16))
        r, c = np.unravel_index(int(np.argmax(up.detach().numpy())), (16, 16))
        wr, wc = np.unravel_index(
            int(np.argmax(m.weights.detach().numpy())), (4, 4)
        )
        assert r // 4 == wr and c // 4 == wc


def test_upsample_rejects_downscaling():
    with pytest.raises(A.AttentionError):
        A.upsample_attention(torch.ones(4, 4) / 16, (2, 2))


def test_localization_score_oracle_attention():
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1.0
    attn = mask / mask.sum()
    iou, hit = A.localization_score(attn, mask, percentile=80.0)
    assert iou == 1.0 and hit


def test_localization_uniform_attention_ties_break_first():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0
    attn = np.full((4, 4), 1 / 16)
    _, hit = A.localization_score(attn, mask)
    assert hit  # flat map peaks at the first pixel in row-major order
    mask2 = np.zeros((4, 4))
    mask2[3, 3] = 1.0
    _, hit2 = A.localization_score(attn, mask2)
    assert not hit2


def test_localization_rejects_empty_mask():
    with pytest.raises(A.AttentionError):
        A.localization_score(np.ones((4, 4)) / 16, np.zeros((4, 4)))


def test_attention_map_shape_mismatch_rejected():
    with pytest.raises(A.AttentionError):
        A.attention_map(torch.ones(3), torch.ones(2, 2, 4), 1.0)
    with pytest.raises(A.AttentionError):
        A.attention_map(torch.ones(3), torch.ones(2, 2, 3), 1.0, mode="wat")


def test_write_pgm_format(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "x.pgm"
    A.write_pgm(path, img)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n4 3\n255\n")
    pixels = np.frombuffer(blob[len(b"P5\n4 3\n255\n"):], dtype=np.uint8)
    assert pixels.size == 12
    assert pixels[0] == 0 and pixels[-1] == 255


def test_render_attention_heatmap_writes_files(tmp_path):
    m = A.AttentionMap(weights=torch.ones(2, 2) / 4, logits=torch.zeros(2, 2))
    paths = A.render_attention_heatmap(
        tmp_path, "clip_00003", m, (8, 8), frame=np.zeros((8, 8))
    )
    assert [p.endswith("clip_00003_attn.pgm") for p in paths][0]
    assert len(paths) == 2
    for p in paths:
        assert (tmp_path / p.split("/")[-1]).exists()
