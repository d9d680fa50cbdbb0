"""The two factorized MIL contrastive losses and their pair combinatorics.

Both losses share the same form: -log(sum_P F / (sum_P F + sum_N F)) with
F(z_a, z_v) = exp(z_a . z_v / tau), evaluated entirely in log space.

Negative enumeration is configurable because the stated counts are
ambiguous between two readings:

  "all_pairs" (loss default): every anchor is contrasted against every
      cross-clip cell (resp. every other-block audio slice of the same
      video). Per-anchor negative count H*W*(B-1), batch-wide
      B*H*W*(B-1)  (resp. M*(T_v-1) per frame).

  "batch_squared": batch-wide count H*W*(B-1)^2 (resp. M*(T_v-1)^2 per video),
      realized by dropping, from the ordered distinct (anchor, other)
      index pairs, the superdiagonal pairs (b, b+1) for b < B-1. Under
      this reading anchors can end up with empty negative sets at B=2,
      which is why it is not the loss default.

Per-anchor losses reduce to a batch/video arithmetic mean. Logit
reductions sort before logsumexp, so permuting the pair order is
bit-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class LossInputError(ValueError):
    pass


READINGS = ("all_pairs", "batch_squared")


@dataclass
class PairSets:
    positives: list[tuple] = field(default_factory=list)
    negatives: list[tuple] = field(default_factory=list)

    @property
    def counts(self) -> tuple[int, int]:
        return (len(self.positives), len(self.negatives))

    def validate(self) -> None:
        pos = set(self.positives)
        neg = set(self.negatives)
        if pos & neg:
            raise LossInputError("positive and negative pair sets overlap")
        if not pos or not neg:
            raise LossInputError("pair sets must both be non-empty")


@dataclass
class LossReport:
    value: float
    positive_logit_sum: float  # mean over anchors of logsumexp(pos logits)
    denominator_logsumexp: float  # mean over anchors of logsumexp(pos+neg)
    pair_counts: tuple[int, int]  # per-anchor (|P|, |N|)

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "positive_logit_sum": self.positive_logit_sum,
            "denominator_logsumexp": self.denominator_logsumexp,
            "pair_counts": list(self.pair_counts),
        }


def compatibility(z_a: torch.Tensor, z_v: torch.Tensor, tau: float) -> torch.Tensor:
    """Log-space compatibility: the logit z_a.z_v / tau (F = exp of it)."""
    if z_a.shape != z_v.shape:
        raise LossInputError(
            f"dimension mismatch: {tuple(z_a.shape)} vs {tuple(z_v.shape)}"
        )
    return (z_a * z_v).sum(dim=-1) / tau


def enumerate_pairs_global(batch_size: int, grid_h: int, grid_w: int,
                           reading: str = "batch_squared") -> PairSets:
    """Audio-visual pair sets for the spatially-local/temporally-global loss.

    Pairs are ((audio clip), (visual clip, cell)) index tuples.
    """
    _check_reading(reading)
    if batch_size < 2:
        raise LossInputError("batch_size must be >= 2 (no negatives exist)")
    cells = [(i, j) for i in range(grid_h) for j in range(grid_w)]
    pairs = PairSets()
    for b in range(batch_size):
        for cell in cells:
            pairs.positives.append((b, (b, cell)))
    for b in range(batch_size):
        for b2 in range(batch_size):
            if b2 == b:
                continue
            if reading == "batch_squared" and b2 == b + 1:
                continue
            for cell in cells:
                pairs.negatives.append((b, (b2, cell)))
    return pairs


def enumerate_pairs_local(t_v: int, m: int, reading: str = "batch_squared") -> PairSets:
    """Per-video pair sets for the spatially-global/temporally-local loss.

    Pairs are (visual frame, audio slice) index tuples; the positive window
    for frame t is the non-overlapping block of slices [m*t, m*(t+1)).
    """
    _check_reading(reading)
    if t_v < 2:
        raise LossInputError("t_v must be >= 2 (no negative blocks exist)")
    if m < 1:
        raise LossInputError("m must be >= 1")
    pairs = PairSets()
    for t in range(t_v):
        for k in range(m):
            pairs.positives.append((t, m * t + k))
    for t in range(t_v):
        for t2 in range(t_v):
            if t2 == t:
                continue
            if reading == "batch_squared" and t2 == t + 1:
                continue
            for k in range(m):
                pairs.negatives.append((t, m * t2 + k))
    return pairs


def _check_reading(reading: str) -> None:
    if reading not in READINGS:
        raise LossInputError(f"unknown enumeration reading {reading!r}")


def _check_finite(name: str, x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise LossInputError(f"{name} contains non-finite values")


def _sorted_logsumexp(x: torch.Tensor) -> torch.Tensor:
    """logsumexp along the last dim with sorted summation order, so the
    result is independent of the input permutation."""
    return torch.logsumexp(torch.sort(x, dim=-1).values, dim=-1)


def _anchor_losses(pos_logits: torch.Tensor,
                   neg_logits: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Per-anchor -log(sum exp(pos) / (sum exp(pos) + sum exp(neg))).

    pos_logits: [A, P]; neg_logits: [A, N] (entries may be -inf to mask
    excluded pairs). Returns (losses[A], lse_pos[A], lse_den[A]).
    """
    lse_pos = _sorted_logsumexp(pos_logits)
    lse_den = _sorted_logsumexp(torch.cat([pos_logits, neg_logits], dim=-1))
    return lse_den - lse_pos, lse_pos, lse_den


def _neg_mask(n: int, reading: str, device, dtype) -> torch.Tensor:
    """[n, n] additive mask: -inf on excluded (anchor, other) index pairs."""
    mask = torch.zeros(n, n, dtype=dtype, device=device)
    mask.fill_diagonal_(float("-inf"))
    if reading == "batch_squared":
        idx = torch.arange(n - 1)
        mask[idx, idx + 1] = float("-inf")
    return mask


def loss_slocal_tglobal(za_g: torch.Tensor, zv_g: torch.Tensor, tau: float,
                        reading: str = "all_pairs") -> tuple[torch.Tensor, LossReport]:
    """Cross-clip spatial MIL loss. za_g: [B, D]; zv_g: [B, H, W, D]."""
    _check_reading(reading)
    _check_tau(tau)
    if za_g.ndim != 2 or zv_g.ndim != 4 or za_g.shape[0] != zv_g.shape[0] \
            or za_g.shape[1] != zv_g.shape[3]:
        raise LossInputError(
            f"inconsistent shapes {tuple(za_g.shape)} / {tuple(zv_g.shape)}"
        )
    b, h, w, _ = zv_g.shape
    if b < 2:
        raise LossInputError("batch must contain >= 2 clips")
    _check_finite("za_g", za_g)
    _check_finite("zv_g", zv_g)

    # logits[a, v, c]: audio of clip a vs cell c of clip v
    logits = torch.einsum("ad,vhwd->avhw", za_g, zv_g).reshape(b, b, h * w) / tau
    pos = logits[torch.arange(b), torch.arange(b)]  # [B, H*W]
    mask = _neg_mask(b, reading, logits.device, logits.dtype)
    neg = (logits + mask[:, :, None]).reshape(b, b * h * w)
    losses, lse_pos, lse_den = _anchor_losses(pos, neg)
    report = LossReport(
        value=float(losses.mean().detach()),
        positive_logit_sum=float(lse_pos.mean().detach()),
        denominator_logsumexp=float(lse_den.mean().detach()),
        pair_counts=(h * w, h * w * (b - 1 if reading == "all_pairs" else b - 2)),
    )
    return losses.mean(), report


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise LossInputError("tau must be positive")


def _validate_local(za_l: torch.Tensor, zv_l: torch.Tensor, m: int,
                    tau: float) -> None:
    _check_tau(tau)
    if za_l.ndim != 2 or zv_l.ndim != 2 or za_l.shape[1] != zv_l.shape[1]:
        raise LossInputError(
            f"inconsistent shapes {tuple(za_l.shape)} / {tuple(zv_l.shape)}"
        )
    t_v = zv_l.shape[0]
    if za_l.shape[0] != m * t_v:
        raise LossInputError(
            f"alignment violation: T_a={za_l.shape[0]} != M*T_v={m * t_v}"
        )
    if t_v < 2:
        raise LossInputError("video must contain >= 2 frames")
    _check_finite("za_l", za_l)
    _check_finite("zv_l", zv_l)


def _local_logits(za_l: torch.Tensor, zv_l: torch.Tensor, m: int,
                  tau: float) -> torch.Tensor:
    _validate_local(za_l, zv_l, m, tau)
    return zv_l @ za_l.transpose(0, 1) / tau  # [T_v, T_a]


def loss_sglobal_tlocal(za_l: torch.Tensor, zv_l: torch.Tensor, m: int,
                        tau: float,
                        reading: str = "all_pairs") -> tuple[torch.Tensor, LossReport]:
    """Within-video temporal MIL loss. za_l: [M*T_v, D]; zv_l: [T_v, D]."""
    _check_reading(reading)
    logits = _local_logits(za_l, zv_l, m, tau)
    t_v = zv_l.shape[0]
    blocks = logits.reshape(t_v, t_v, m)  # [frame, block, slice]
    pos = blocks[torch.arange(t_v), torch.arange(t_v)]  # [T_v, M]
    mask = _neg_mask(t_v, reading, logits.device, logits.dtype)
    neg = (blocks + mask[:, :, None]).reshape(t_v, t_v * m)
    losses, lse_pos, lse_den = _anchor_losses(pos, neg)
    report = LossReport(
        value=float(losses.mean().detach()),
        positive_logit_sum=float(lse_pos.mean().detach()),
        denominator_logsumexp=float(lse_den.mean().detach()),
        pair_counts=(m, m * (t_v - 1 if reading == "all_pairs" else t_v - 2)),
    )
    return losses.mean(), report


def loss_single_positive_variant(za_l: torch.Tensor, zv_l: torch.Tensor,
                                 m: int, tau: float
                                 ) -> tuple[torch.Tensor, LossReport]:
    """Ablation variant: mean-pool the audio slices of each window to one
    vector per frame, then vanilla InfoNCE with one positive per anchor."""
    _validate_local(za_l, zv_l, m, tau)
    t_v = zv_l.shape[0]
    za_pooled = za_l.reshape(t_v, m, -1).mean(dim=1)  # [T_v, D]
    logits = zv_l @ za_pooled.transpose(0, 1) / tau  # [T_v, T_v]
    pos = logits[torch.arange(t_v), torch.arange(t_v)].unsqueeze(-1)
    mask = torch.zeros(t_v, t_v, dtype=logits.dtype, device=logits.device)
    mask.fill_diagonal_(float("-inf"))
    neg = logits + mask
    losses, lse_pos, lse_den = _anchor_losses(pos, neg)
    report = LossReport(
        value=float(losses.mean().detach()),
        positive_logit_sum=float(lse_pos.mean().detach()),
        denominator_logsumexp=float(lse_den.mean().detach()),
        pair_counts=(1, t_v - 1),
    )
    return losses.mean(), report


def joint_loss(loss_global: torch.Tensor | None,
               loss_local: torch.Tensor | None,
               weight_global: float = 1.0,
               weight_local: float = 1.0) -> torch.Tensor:
    """weight_global * L_g + weight_local * L_l."""
    if weight_global < 0 or weight_local < 0:
        raise LossInputError("objective weights must be nonnegative")
    if weight_global == 0 and weight_local == 0:
        raise LossInputError("at least one objective weight must be positive")
    total = None
    if weight_global > 0:
        if loss_global is None:
            raise LossInputError("weight_global > 0 but no global loss given")
        total = weight_global * loss_global
    if weight_local > 0:
        if loss_local is None:
            raise LossInputError("weight_local > 0 but no local loss given")
        total = weight_local * loss_local if total is None \
            else total + weight_local * loss_local
    return total


# ---------------------------------------------------------------------------
# Brute-force oracle twins: plain double loops over enumerated pairs,
# evaluated with Python floats in 64-bit. Deliberately structured unlike
# the vectorized paths above.
# ---------------------------------------------------------------------------


def _oracle_anchor_loss(pos: list[float], neg: list[float]) -> float:
    num = math.fsum(math.exp(x) for x in sorted(pos))
    den = num + math.fsum(math.exp(x) for x in sorted(neg))
    return -math.log(num / den)


def oracle_loss_slocal_tglobal(za_g, zv_g, tau: float,
                               reading: str = "all_pairs") -> float:
    za = [[float(x) for x in row] for row in za_g]
    b = len(za)
    h = len(zv_g[0])
    w = len(zv_g[0][0])
    pairs = enumerate_pairs_global(b, h, w, reading=reading)

    def dot(a_idx, v_idx):
        vb, (i, j) = v_idx
        cell = zv_g[vb][i][j]
        return math.fsum(za[a_idx][k] * float(cell[k]) for k in range(len(za[a_idx])))

    losses = []
    for anchor in range(b):
        pos = [dot(a, v) / tau for (a, v) in pairs.positives if a == anchor]
        neg = [dot(a, v) / tau for (a, v) in pairs.negatives if a == anchor]
        if not neg:
            losses.append(0.0)
        else:
            losses.append(_oracle_anchor_loss(pos, neg))
    return math.fsum(losses) / b


def oracle_loss_sglobal_tlocal(za_l, zv_l, m: int, tau: float,
                               reading: str = "all_pairs") -> float:
    t_v = len(zv_l)
    pairs = enumerate_pairs_local(t_v, m, reading=reading)

    def dot(t, s):
        return math.fsum(
            float(zv_l[t][k]) * float(za_l[s][k]) for k in range(len(zv_l[t]))
        )

    losses = []
    for anchor in range(t_v):
        pos = [dot(t, s) / tau for (t, s) in pairs.positives if t == anchor]
        neg = [dot(t, s) / tau for (t, s) in pairs.negatives if t == anchor]
        if not neg:
            losses.append(0.0)
        else:
            losses.append(_oracle_anchor_loss(pos, neg))
    return math.fsum(losses) / t_v


def oracle_loss_single_positive(za_l, zv_l, m: int, tau: float) -> float:
    t_v = len(zv_l)
    d = len(zv_l[0])
    pooled = []
    for t in range(t_v):
        pooled.append(
            [math.fsum(float(za_l[m * t + k][c]) for k in range(m)) / m
             for c in range(d)]
        )

    losses = []
    for t in range(t_v):
        def dot(t2):
            return math.fsum(float(zv_l[t][k]) * pooled[t2][k] for k in range(d))

        pos = [dot(t) / tau]
        neg = [dot(t2) / tau for t2 in range(t_v) if t2 != t]
        losses.append(_oracle_anchor_loss(pos, neg))
    return math.fsum(losses) / t_v
