"""Audio-visual spatial attention: map computation, attention pooling,
bilinear upsampling for visualization, and localization scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import GlobalVisualEmbedding, LocalVisualFeatureMap


class AttentionError(ValueError):
    pass


@dataclass
class AttentionMap:
    weights: torch.Tensor  # [H, W], nonnegative, sums to 1
    logits: torch.Tensor  # [H, W] pre-normalization dot products


def attention_map(za_g: torch.Tensor,
                  zv_g: GlobalVisualEmbedding | torch.Tensor,
                  tau_attn: float,
                  mode: str = "softmax") -> AttentionMap:
    """Dot-product attention between the global audio vector and each
    visual grid cell. mode="softmax" (default) normalizes with a softmax
    over the flattened grid; mode="renormalize" clamps raw correlations at
    zero and divides by their sum instead."""
    grid = zv_g.grid if isinstance(zv_g, GlobalVisualEmbedding) else zv_g
    if grid.ndim != 3 or za_g.ndim != 1 or grid.shape[2] != za_g.shape[0]:
        raise AttentionError(
            f"dimension mismatch: audio {tuple(za_g.shape)} vs grid "
            f"{tuple(grid.shape)}"
        )
    if not (torch.isfinite(za_g).all() and torch.isfinite(grid).all()):
        raise AttentionError("non-finite attention inputs")
    logits = torch.einsum("hwd,d->hw", grid, za_g) / tau_attn
    if mode == "softmax":
        weights = torch.softmax(logits.reshape(-1), dim=0).reshape(logits.shape)
    elif mode == "renormalize":
        clamped = logits.clamp_min(0.0)
        total = clamped.sum()
        if float(total) <= 0.0:
            weights = torch.full_like(logits, 1.0 / logits.numel())
        else:
            weights = clamped / total
    else:
        raise AttentionError(f"unknown attention mode {mode!r}")
    return AttentionMap(weights=weights, logits=logits)


def attention_pool(feature_map: LocalVisualFeatureMap | torch.Tensor,
                   attn: AttentionMap,
                   stop_gradient: bool = True) -> torch.Tensor:
    """Spatially pool each time step with the attention weights.

    Returns the raw convex combination [T_v, D]; callers normalize if their
    config asks for unit-norm embeddings. With stop_gradient (default) no
    gradient flows from downstream losses into the attention inputs.
    """
    seq = feature_map.grid_seq if isinstance(feature_map, LocalVisualFeatureMap) \
        else feature_map
    if seq.ndim != 4 or seq.shape[1:3] != attn.weights.shape:
        raise AttentionError(
            f"dimension mismatch: features {tuple(seq.shape)} vs attention "
            f"{tuple(attn.weights.shape)}"
        )
    weights = attn.weights.detach() if stop_gradient else attn.weights
    return torch.einsum("thwd,hw->td", seq, weights)


def upsample_attention(attn: AttentionMap | torch.Tensor,
                       out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear (align-corners-false) upsampling, renormalized to sum 1."""
    weights = attn.weights if isinstance(attn, AttentionMap) else attn
    if out_hw[0] < weights.shape[0] or out_hw[1] < weights.shape[1]:
        raise AttentionError(
            f"output dims {out_hw} smaller than attention grid "
            f"{tuple(weights.shape)}"
        )
    x = weights[None, None, :, :]
    up = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
    up = up[0, 0]
    return up / up.sum()


def localization_score(attn_upsampled, truth_mask,
                       percentile: float = 80.0) -> tuple[float, bool]:
    """IoU of the percentile-thresholded attention with the ground-truth
    mask, plus whether the attention argmax pixel lands inside the mask.

    Ties in the argmax break to the first pixel in row-major order.
    """
    attn = np.asarray(
        attn_upsampled.detach().cpu().numpy()
        if isinstance(attn_upsampled, torch.Tensor) else attn_upsampled,
        dtype=np.float64,
    )
    mask = np.asarray(truth_mask, dtype=np.float64) > 0.5
    if attn.shape != mask.shape:
        raise AttentionError(
            f"pixel dims differ: {attn.shape} vs {mask.shape}"
        )
    if not mask.any():
        raise AttentionError("empty ground-truth mask")
    thresh = np.percentile(attn, percentile)
    binar = attn > thresh
    union = np.logical_or(binar, mask).sum()
    inter = np.logical_and(binar, mask).sum()
    iou = float(inter / union) if union else 0.0
    peak = np.unravel_index(int(np.argmax(attn)), attn.shape)
    return iou, bool(mask[peak])


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5). The image is min-max scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def render_attention_heatmap(out_dir, clip_id: str, attn: AttentionMap,
                             out_hw: tuple[int, int],
                             frame: np.ndarray | None = None) -> list[str]:
    """Write `<clip_id>_attn.pgm` (and optional `<clip_id>_overlay.pgm`)."""
    import os

    up = upsample_attention(attn, out_hw).detach().cpu().numpy()
    paths = []
    attn_path = os.path.join(out_dir, f"{clip_id}_attn.pgm")
    write_pgm(attn_path, up)
    paths.append(attn_path)
    if frame is not None:
        base = np.asarray(frame, dtype=np.float64).reshape(out_hw)
        norm = up / up.max() if up.max() > 0 else up
        overlay = 0.5 * base + 0.5 * norm
        overlay_path = os.path.join(out_dir, f"{clip_id}_overlay.pgm")
        write_pgm(overlay_path, overlay)
        paths.append(overlay_path)
    return paths
