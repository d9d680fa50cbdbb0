"""Joint pretraining loop: Adam with linear warmup over the combined
global/local contrastive objective, with deterministic batching,
checkpointing, and JSON-lines metrics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import attention, container, encoders, objectives
from .encoders import EncoderConfig, GlavModel
from .synthdata import SyntheticClip

OBJECTIVE_MODES = ("both", "global_only", "local_only")
POOLING_MODES = ("mil_multi_positive", "avg_single_positive")


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-3
    warmup_steps: int | None = None  # None -> min(500, steps // 10)
    weight_global: float = 1.0
    weight_local: float = 1.0
    seed: int = 0
    eval_every: int = 100
    objective_mode: str = "both"
    pooling_mode: str = "mil_multi_positive"
    negative_reading: str = "all_pairs"
    attention_mode: str = "softmax"
    attention_stop_gradient: bool = True
    grad_clip: float | None = None  # None -> 5.0 in unnormalized mode, else off
    jitter_frames: int = 2

    def validate(self) -> None:
        if self.steps < 1:
            raise TrainConfigError("steps must be >= 1")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise TrainConfigError(f"unknown objective_mode {self.objective_mode!r}")
        if self.pooling_mode not in POOLING_MODES:
            raise TrainConfigError(f"unknown pooling_mode {self.pooling_mode!r}")
        if self.weight_global < 0 or self.weight_local < 0:
            raise TrainConfigError("objective weights must be nonnegative")
        uses_global = self.objective_mode in ("both", "global_only")
        uses_local = self.objective_mode in ("both", "local_only")
        if uses_global and self.weight_global == 0 and not (
                uses_local and self.weight_local > 0):
            raise TrainConfigError("no objective carries positive weight")
        if uses_global and self.batch_size < 2:
            raise TrainConfigError(
                "batch_size must be >= 2 when the global objective is active"
            )
        if self.lr <= 0:
            raise TrainConfigError("lr must be positive")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(500, self.steps // 10)


@dataclass
class TrainState:
    model: GlavModel
    optimizer: torch.optim.Adam
    config: TrainConfig
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)


def effective_grad_clip(cfg: TrainConfig, normalize: bool) -> float | None:
    """Explicit setting wins; otherwise clip at 5.0 only when embeddings are
    unnormalized (where logits, and so gradients, are unbounded)."""
    if cfg.grad_clip is not None:
        return cfg.grad_clip
    return None if normalize else 5.0


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Effective learning rate at 1-based step: linear warmup, constant after."""
    warmup = cfg.effective_warmup
    if warmup <= 0:
        return cfg.lr
    return cfg.lr * min(step, warmup) / warmup


def _batch_indices(cfg: TrainConfig, n_clips: int, step: int) -> list[int]:
    """Batch for 0-based step: a seeded per-epoch shuffle, consumed in order.

    Pure function of (seed, step), so resuming needs only the step counter.
    """
    idx = []
    for j in range(cfg.batch_size):
        g = step * cfg.batch_size + j
        epoch, offset = divmod(g, n_clips)
        perm = np.random.default_rng((cfg.seed, 0xE90C, epoch)).permutation(n_clips)
        idx.append(int(perm[offset]))
    return idx


def _jitter_offsets(cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, 0x71F, step))
    j = cfg.jitter_frames
    return rng.integers(-j, j + 1, size=cfg.batch_size)


def _jittered(clip: SyntheticClip, offset: int, m: int):
    """Temporal jitter as a circular shift, audio shifted consistently."""
    frames = np.roll(clip.frames, -offset, axis=0)
    mel = np.roll(clip.mel, -offset * m, axis=1)
    return frames, mel


def encode_batch(model: GlavModel, frames_list, mel_list, cfg: TrainConfig):
    """Encode clips and run attention pooling; returns batched embeddings."""
    zv_g, za_g, za_l, zv_l = [], [], [], []
    for frames, mel in zip(frames_list, mel_list):
        g_emb, l_map, a_emb = model.encode_clip(frames, mel)
        attn = attention.attention_map(
            a_emb.pooled, g_emb, model.cfg.temperature, mode=cfg.attention_mode
        )
        pooled = attention.attention_pool(
            l_map, attn, stop_gradient=cfg.attention_stop_gradient
        )
        zv_l.append(encoders.local_embedding_from_pooled(pooled, model.cfg).seq)
        zv_g.append(g_emb.grid)
        za_g.append(a_emb.pooled)
        za_l.append(a_emb.slices)
    return (torch.stack(za_g), torch.stack(zv_g),
            torch.stack(za_l), torch.stack(zv_l))


def compute_losses(model: GlavModel, frames_list, mel_list, cfg: TrainConfig):
    """Total weighted loss plus per-objective reports for one batch."""
    za_g, zv_g, za_l, zv_l = encode_batch(model, frames_list, mel_list, cfg)
    tau = model.cfg.temperature
    m = model.cfg.slices_per_frame

    loss_g = report_g = None
    if cfg.objective_mode in ("both", "global_only") and cfg.weight_global > 0:
        loss_g, report_g = objectives.loss_slocal_tglobal(
            za_g, zv_g, tau, reading=cfg.negative_reading
        )

    loss_l = report_l = None
    if cfg.objective_mode in ("both", "local_only") and cfg.weight_local > 0:
        per_video = []
        for b in range(za_l.shape[0]):
            if cfg.pooling_mode == "avg_single_positive":
                lv, report_l = objectives.loss_single_positive_variant(
                    za_l[b], zv_l[b], m, tau
                )
            else:
                lv, report_l = objectives.loss_sglobal_tlocal(
                    za_l[b], zv_l[b], m, tau, reading=cfg.negative_reading
                )
            per_video.append(lv)
        loss_l = torch.stack(per_video).mean()

    total = objectives.joint_loss(
        loss_g, loss_l,
        weight_global=cfg.weight_global
        if cfg.objective_mode in ("both", "global_only") else 0.0,
        weight_local=cfg.weight_local
        if cfg.objective_mode in ("both", "local_only") else 0.0,
    )
    return total, loss_g, loss_l, report_g, report_l


def init_state(dataset: list[SyntheticClip], cfg: TrainConfig,
               enc_cfg: EncoderConfig) -> TrainState:
    cfg.validate()
    if not dataset:
        raise TrainConfigError("dataset is empty")
    model = GlavModel(enc_cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8
    )
    return TrainState(model=model, optimizer=optimizer, config=cfg)


def train(dataset: list[SyntheticClip], cfg: TrainConfig,
          enc_cfg: EncoderConfig | None = None,
          state: TrainState | None = None,
          out_dir=None,
          metrics_fh=None) -> TrainState:
    """Run (or continue) training until cfg.steps; returns the final state.

    With out_dir set, writes metrics.jsonl and checkpoint.glav there.
    """
    if state is None:
        state = init_state(dataset, cfg, enc_cfg or EncoderConfig())
    else:
        cfg = state.config
    cfg.validate()
    if not dataset:
        raise TrainConfigError("dataset is empty")

    model = state.model
    effective_clip = effective_grad_clip(cfg, model.cfg.normalize)

    own_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if metrics_fh is None:
            own_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a",
                          encoding="utf-8")
            metrics_fh = own_fh

    try:
        while state.step < cfg.steps:
            step = state.step  # 0-based internal counter
            indices = _batch_indices(cfg, len(dataset), step)
            offsets = _jitter_offsets(cfg, step)
            frames_list, mel_list = [], []
            for i, off in zip(indices, offsets):
                frames, mel = _jittered(dataset[i], int(off),
                                        model.cfg.slices_per_frame)
                frames_list.append(frames)
                mel_list.append(mel)

            lr = lr_at_step(cfg, step + 1)
            for group in state.optimizer.param_groups:
                group["lr"] = lr

            state.optimizer.zero_grad()
            total, loss_g, loss_l, report_g, report_l = compute_losses(
                model, frames_list, mel_list, cfg
            )
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1}: "
                    f"L_g={report_g.to_json() if report_g else None}, "
                    f"L_l={report_l.to_json() if report_l else None}"
                )
            total.backward()
            if effective_clip is not None:
                grad_norm = float(torch.nn.utils.clip_grad_norm_(
                    model.parameters(), effective_clip
                ))
            else:
                grad_norm = float(torch.sqrt(sum(
                    (p.grad ** 2).sum() for p in model.parameters()
                    if p.grad is not None
                )))
            state.optimizer.step()
            state.step = step + 1

            record = {
                "step": state.step,
                "L_g": float(loss_g.detach()) if loss_g is not None else None,
                "L_l": float(loss_l.detach()) if loss_l is not None else None,
                "loss": float(total.detach()),
                "lr": lr,
                "grad_norm": grad_norm,
            }
            state.loss_history.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
    finally:
        if own_fh is not None:
            own_fh.close()

    if out_dir is not None:
        checkpoint(state, os.path.join(out_dir, "checkpoint.glav"))
    return state


def checkpoint(state: TrainState, path) -> None:
    """Serialize weights, Adam moments and counters to a GLAV container,
    with configs and loss history in a JSON sidecar."""
    arrays = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in state.model.named_parameters()
    }
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        opt_state = state.optimizer.state.get(p)
        if not opt_state:
            continue
        arrays[f"adam.{name}.exp_avg"] = (
            opt_state["exp_avg"].detach().cpu().numpy().astype(np.float32)
        )
        arrays[f"adam.{name}.exp_avg_sq"] = (
            opt_state["exp_avg_sq"].detach().cpu().numpy().astype(np.float32)
        )
        arrays[f"adam.{name}.step"] = np.array(
            float(opt_state["step"]), dtype=np.float32
        )
    arrays["trainer.step"] = np.array(float(state.step), dtype=np.float32)
    container.write_arrays(path, arrays)
    sidecar = {
        "encoder_config": encoders._config_to_json(state.model.cfg),
        "train_config": asdict(state.config),
        "loss_history": state.loss_history,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)


def resume(path) -> TrainState:
    """Rebuild a TrainState from a checkpoint; continuing for k steps equals
    an uninterrupted run of the same k steps."""
    with open(str(path) + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    enc_cfg = encoders.config_from_json(sidecar["encoder_config"])
    cfg = TrainConfig(**sidecar["train_config"])
    arrays = container.read_arrays(path)
    model = GlavModel(enc_cfg)
    model.load_weight_arrays(
        {k: v for k, v in arrays.items() if not k.startswith(("adam.", "trainer."))}
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8
    )
    for name, p in model.named_parameters():
        key = f"adam.{name}.exp_avg"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(np.ravel(arrays[f"adam.{name}.step"])[0])),
            "exp_avg": torch.as_tensor(arrays[key], dtype=p.dtype),
            "exp_avg_sq": torch.as_tensor(
                arrays[f"adam.{name}.exp_avg_sq"], dtype=p.dtype
            ),
        }
    state = TrainState(
        model=model,
        optimizer=optimizer,
        config=cfg,
        step=int(np.ravel(arrays["trainer.step"])[0]),
        loss_history=list(sidecar.get("loss_history", [])),
    )
    return state
