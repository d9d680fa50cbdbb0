"""Encoder shapes, normalization, determinism, and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from glavcl import synthdata as S
from glavcl.encoders import (
    ConfigError,
    EncoderConfig,
    GlavModel,
    ShapeError,
    l2_normalize,
    local_embedding_from_pooled,
)


def tiny_cfg(**overrides):
    base = dict(
        embed_dim=8,
        slow_stride=2,
        grid_hw=(2, 2),
        n_mel_bands=16,
        slices_per_frame=3,
        hidden_channels=4,
        init_seed=0,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_clip(t_v=4, hw=8, bands=16, m=3, seed=0):
    spec = S.SyntheticClipSpec(
        grid_size=(hw, hw), n_frames_raw=t_v, slices_per_frame=m,
        n_mel_bands=bands, source_region=(0, 0, 2, 2), n_distractors=0,
        seed=seed,
    )
    return S.generate_clip(spec)


def test_encode_clip_output_shapes():
    model = GlavModel(tiny_cfg())
    clip = tiny_clip()
    zv_g, zv_l, za = model.encode_clip(clip.frames, clip.mel)
    assert zv_g.grid.shape == (2, 2, 8)
    assert zv_l.grid_seq.shape == (4, 2, 2, 8)
    assert za.slices.shape == (12, 8)
    assert za.pooled.shape == (8,)


def test_normalization_gives_unit_vectors():
    model = GlavModel(tiny_cfg())
    clip = tiny_clip()
    zv_g, _, za = model.encode_clip(clip.frames, clip.mel)
    norms = torch.linalg.norm(zv_g.grid, dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)
    slice_norms = torch.linalg.norm(za.slices, dim=-1)
    # all-zero activations stay at norm 0 (zero-safe normalization)
    assert torch.all(
        (slice_norms - 1.0).abs().minimum(slice_norms.abs()) <= 1e-6
    )
    assert abs(float(torch.linalg.norm(za.pooled).detach()) - 1.0) <= 1e-6


def test_unnormalized_mode_skips_normalization():
    model = GlavModel(tiny_cfg(normalize=False))
    clip = tiny_clip()
    zv_g, _, _ = model.encode_clip(clip.frames, clip.mel)
    norms = torch.linalg.norm(zv_g.grid, dim=-1)
    assert not torch.allclose(norms, torch.ones_like(norms), atol=1e-3)


def test_initialization_is_seed_deterministic():
    a = GlavModel(tiny_cfg(init_seed=7))
    b = GlavModel(tiny_cfg(init_seed=7))
    c = GlavModel(tiny_cfg(init_seed=8))
    for (n1, p1), (n2, p2) in zip(
        a.named_parameters(), b.named_parameters()
    ):
        assert n1 == n2
        assert torch.equal(p1, p2)
    assert any(
        not torch.equal(p1, p2)
        for (_, p1), (_, p2) in zip(a.named_parameters(), c.named_parameters())
    )


def test_two_pathways_do_not_share_weights():
    model = GlavModel(tiny_cfg())
    g = dict(model.visual_global.named_parameters())
    l = dict(model.visual_local.named_parameters())
    assert any(not torch.equal(g[k], l[k]) for k in g)


def test_slow_pathway_subsamples_frames():
    # With stride 2, dropping an odd-index frame leaves the slow pathway's
    # output untouched while the fast pathway changes.
    model = GlavModel(tiny_cfg())
    clip = tiny_clip(t_v=4)
    frames = torch.as_tensor(clip.frames)
    zv_g, zv_l, _ = model.encode_clip(clip.frames, clip.mel)
    perturbed = frames.clone()
    perturbed[1] = 0.0
    zv_g2 = model.visual_global(perturbed)
    zv_l2 = model.visual_local(perturbed)
    assert torch.equal(zv_g.grid, zv_g2.grid)
    assert not torch.equal(zv_l.grid_seq, zv_l2.grid_seq)


def test_misaligned_audio_rejected():
    model = GlavModel(tiny_cfg())
    clip = tiny_clip()
    with pytest.raises(ConfigError):
        model.encode_clip(clip.frames, clip.mel[:, :-1])


def test_bad_frame_shape_rejected():
    model = GlavModel(tiny_cfg())
    with pytest.raises(ShapeError):
        model.visual_global(torch.zeros(4, 8, 8))
    with pytest.raises(ShapeError):
        model.audio(torch.zeros(5, 12))


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(embed_dim=0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(slow_stride=0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(temperature=0.0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg().validate(n_frames=3)  # stride 2 needs >= 1 slow frame okay
        tiny_cfg(slow_stride=8).validate(n_frames=4)


def test_save_load_round_trip_bit_exact(tmp_path):
    model = GlavModel(tiny_cfg(init_seed=3))
    path = tmp_path / "model.glav"
    model.save(path)
    back = GlavModel.load(path)
    assert back.cfg == model.cfg
    for (n1, p1), (n2, p2) in zip(
        model.named_parameters(), back.named_parameters()
    ):
        assert n1 == n2
        assert p1.detach().numpy().tobytes() == p2.detach().numpy().tobytes()
    clip = tiny_clip()
    zv_g, _, _ = model.encode_clip(clip.frames, clip.mel)
    zv_g2, _, _ = back.encode_clip(clip.frames, clip.mel)
    assert torch.equal(zv_g.grid, zv_g2.grid)


def test_l2_normalize_handles_zero_vectors():
    x = torch.zeros(3, 4)
    out = l2_normalize(x)
    assert torch.isfinite(out).all()


def test_local_embedding_from_pooled_normalizes():
    cfg = tiny_cfg()
    pooled = torch.randn(5, 8, dtype=torch.float64)
    emb = local_embedding_from_pooled(pooled, cfg)
    norms = torch.linalg.norm(emb.seq, dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)


def test_encoding_is_deterministic_across_calls():
    model = GlavModel(tiny_cfg())
    clip = tiny_clip()
    a, _, _ = model.encode_clip(clip.frames, clip.mel)
    b, _, _ = model.encode_clip(clip.frames, clip.mel)
    assert torch.equal(a.grid, b.grid)
