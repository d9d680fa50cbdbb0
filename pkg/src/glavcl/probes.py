"""Downstream-task analogs on frozen encoders: linear classification
probes, a temporal event localization probe, sound-source localization
scoring, and the ablation sweep harness."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from scipy.optimize import minimize

from . import attention, trainer
from .encoders import EncoderConfig, GlavModel
from .synthdata import SyntheticClip, SyntheticClipSpec, generate_dataset
from .trainer import TrainConfig


class ProbeError(ValueError):
    pass


@dataclass
class FeatureSelector:
    use_zvg: bool = True
    use_zvl: bool = True
    use_audio: bool = False

    def validate(self) -> None:
        if not (self.use_zvg or self.use_zvl or self.use_audio):
            raise ProbeError(
                "FeatureSelector: at least one of use_zvg/use_zvl/use_audio "
                "must be true"
            )


@dataclass
class ProbeResult:
    task: str  # global_cls | event_loc | source_loc | word_cls
    metric_name: str
    value: float
    condition: dict = field(default_factory=dict)
    n_samples: int = 0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Linear probe: multinomial logistic regression, deterministic full-batch
# L-BFGS from a zero init, tolerance 1e-8 on the gradient norm.
# ---------------------------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int,
                       l2: float = 1e-4) -> np.ndarray:
    """Returns weights [n_features + 1, n_classes] (bias row last)."""
    x = np.asarray(x, dtype=np.float64)
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    n, d = xb.shape
    onehot = np.eye(n_classes)[y]

    def objective(wflat):
        w = wflat.reshape(d, n_classes)
        probs = _softmax(xb @ w)
        nll = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean()
        reg = 0.5 * l2 * np.sum(w[:-1] ** 2)
        grad = xb.T @ (probs - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return nll + reg, grad.ravel()

    res = minimize(objective, np.zeros(d * n_classes), jac=True,
                   method="L-BFGS-B",
                   options={"gtol": 1e-8, "ftol": 0.0, "maxiter": 5000})
    return res.x.reshape(d, n_classes)


def probe_predict(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    return np.argmax(xb @ weights, axis=1)


def _split_indices(n: int, seed: int, eval_frac: float = 0.2):
    perm = np.random.default_rng((seed, 0x5B117)).permutation(n)
    n_eval = max(1, int(round(eval_frac * n)))
    return sorted(perm[n_eval:].tolist()), sorted(perm[:n_eval].tolist())


# ---------------------------------------------------------------------------
# Frozen-feature extraction
# ---------------------------------------------------------------------------


@dataclass
class ClipFeatures:
    zvg_mean: np.ndarray  # [D] grid mean of z_v^g
    zvl_seq: np.ndarray  # [T_v, D] attention-pooled local sequence
    audio_slices: np.ndarray  # [T_a, D]
    audio_pooled: np.ndarray  # [D]
    attn_weights: np.ndarray  # [H, W]


def extract_features(model: GlavModel, clips: list[SyntheticClip],
                     attention_mode: str = "softmax") -> list[ClipFeatures]:
    feats = []
    with torch.no_grad():
        for clip in clips:
            g_emb, l_map, a_emb = model.encode_clip(clip.frames, clip.mel)
            attn = attention.attention_map(
                a_emb.pooled, g_emb, model.cfg.temperature, mode=attention_mode
            )
            pooled = attention.attention_pool(l_map, attn)
            zvl = pooled
            if model.cfg.normalize:
                zvl = zvl / zvl.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            feats.append(ClipFeatures(
                zvg_mean=g_emb.grid.mean(dim=(0, 1)).numpy(),
                zvl_seq=zvl.numpy(),
                audio_slices=a_emb.slices.numpy(),
                audio_pooled=a_emb.pooled.numpy(),
                attn_weights=attn.weights.numpy(),
            ))
    return feats


def _global_feature_matrix(feats: list[ClipFeatures],
                           selector: FeatureSelector) -> np.ndarray:
    parts = []
    for f in feats:
        row = []
        if selector.use_zvg:
            row.append(f.zvg_mean)
        if selector.use_zvl:
            row.append(f.zvl_seq.mean(axis=0))
        if selector.use_audio:
            row.append(f.audio_pooled)
        parts.append(np.concatenate(row))
    return np.stack(parts)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


def probe_global_classification(model: GlavModel, clips: list[SyntheticClip],
                                selector: FeatureSelector,
                                seed: int = 0,
                                labels: np.ndarray | None = None) -> ProbeResult:
    selector.validate()
    if labels is None:
        labels = np.array([c.class_label for c in clips])
    classes = np.unique(labels)
    if classes.size < 2:
        raise ProbeError("global classification probe needs >= 2 classes")
    feats = extract_features(model, clips)
    x = _global_feature_matrix(feats, selector)
    y = np.searchsorted(classes, labels)
    train_idx, eval_idx = _split_indices(len(clips), seed)
    w = train_linear_probe(x[train_idx], y[train_idx], classes.size)
    pred = probe_predict(w, x[eval_idx])
    acc = float((pred == y[eval_idx]).mean())
    return ProbeResult(
        task="global_cls", metric_name="top1_accuracy", value=acc,
        condition={"selector": asdict(selector), "seed": seed},
        n_samples=len(eval_idx),
        extras={"train_clips": train_idx, "eval_clips": eval_idx},
    )


def probe_event_localization(model: GlavModel, clips: list[SyntheticClip],
                             seed: int = 0,
                             labels_override: list[np.ndarray] | None = None
                             ) -> ProbeResult:
    feats = extract_features(model, clips)
    m = model.cfg.slices_per_frame
    frame_labels = (labels_override if labels_override is not None
                    else [c.event_segment_labels for c in clips])

    def clip_rows(f: ClipFeatures):
        t_v = f.zvl_seq.shape[0]
        audio_blocks = f.audio_slices.reshape(t_v, m, -1).mean(axis=1)
        return np.hstack([f.zvl_seq, audio_blocks])

    train_idx, eval_idx = _split_indices(len(clips), seed)
    classes = np.unique(np.concatenate([frame_labels[i] for i in range(len(clips))]))

    x_train = np.vstack([clip_rows(feats[i]) for i in train_idx])
    y_train = np.searchsorted(
        classes, np.concatenate([frame_labels[i] for i in train_idx])
    )
    x_eval = np.vstack([clip_rows(feats[i]) for i in eval_idx])
    y_eval = np.searchsorted(
        classes, np.concatenate([frame_labels[i] for i in eval_idx])
    )
    majority = np.bincount(y_train).argmax()
    majority_acc = float((y_eval == majority).mean())
    if classes.size < 2:
        acc = 1.0  # constant predictor is exact when only background exists
    else:
        w = train_linear_probe(x_train, y_train, classes.size)
        acc = float((probe_predict(w, x_eval) == y_eval).mean())
    return ProbeResult(
        task="event_loc", metric_name="segment_accuracy", value=acc,
        condition={"seed": seed},
        n_samples=int(y_eval.size),
        extras={"majority_baseline": majority_acc,
                "train_clips": train_idx, "eval_clips": eval_idx},
    )


def probe_source_localization(model: GlavModel, clips: list[SyntheticClip],
                              seed: int = 0,
                              percentile: float = 80.0,
                              eval_frac: float = 0.2) -> ProbeResult:
    """Needs no probe training, so callers holding a dedicated evaluation
    set can score every clip by passing eval_frac=1.0."""
    feats = extract_features(model, clips)
    if eval_frac >= 1.0:
        eval_idx = list(range(len(clips)))
    else:
        _, eval_idx = _split_indices(len(clips), seed, eval_frac=eval_frac)
    ious, hits = [], []
    for i in eval_idx:
        mask = clips[i].truth_mask
        up = attention.upsample_attention(
            torch.as_tensor(feats[i].attn_weights), mask.shape
        )
        iou, hit = attention.localization_score(up, mask, percentile=percentile)
        ious.append(iou)
        hits.append(hit)
    return ProbeResult(
        task="source_loc", metric_name="pointing_accuracy",
        value=float(np.mean(hits)),
        condition={"seed": seed, "percentile": percentile},
        n_samples=len(eval_idx),
        extras={"mean_iou": float(np.mean(ious)), "eval_clips": eval_idx},
    )


def probe_word_classification(model: GlavModel, clips: list[SyntheticClip],
                              seed: int = 0) -> ProbeResult:
    """Class decoded from the mean of the z_v^l sequence only."""
    result = probe_global_classification(
        model, clips,
        FeatureSelector(use_zvg=False, use_zvl=True, use_audio=False),
        seed=seed,
    )
    result.task = "word_cls"
    return result


def run_all_probes(model: GlavModel, clips: list[SyntheticClip],
                   selector: FeatureSelector | None = None,
                   seed: int = 0) -> list[ProbeResult]:
    selector = selector or FeatureSelector()
    return [
        probe_global_classification(model, clips, selector, seed=seed),
        probe_event_localization(model, clips, seed=seed),
        probe_source_localization(model, clips, seed=seed),
        probe_word_classification(model, clips, seed=seed),
    ]


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_AXES = ("objective_mode", "pooling_mode", "m", "feature_selector")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _copy_spec(data_spec: SyntheticClipSpec) -> SyntheticClipSpec:
    spec = SyntheticClipSpec(**{**asdict(data_spec)})
    spec.grid_size = tuple(spec.grid_size)
    spec.source_region = tuple(spec.source_region)
    if spec.event_window is not None:
        spec.event_window = tuple(spec.event_window)
    return spec


def evaluate_condition(args) -> list[ProbeResult]:
    """One pretrain+probe run; top-level so worker processes can run it."""
    (data_spec, n_clips, n_classes, data_seed, train_cfg, enc_cfg,
     obj_mode, pool_mode, m, selector) = args
    if isinstance(selector, dict):
        selector = FeatureSelector(**selector)
    selector.validate()
    flagged = (obj_mode == "global_only" and selector.use_zvl
               and not selector.use_zvg)
    condition = {
        "objective_mode": obj_mode,
        "pooling_mode": pool_mode,
        "m": m,
        "feature_selector": asdict(selector),
        "flagged": flagged,
    }
    spec = _copy_spec(data_spec)
    spec.slices_per_frame = m
    clips, _ = generate_dataset(
        n_clips, spec, n_classes=n_classes, seed=data_seed,
        source_cell_grid=tuple(enc_cfg.grid_hw),
        randomize_event=spec.event_window is not None,
    )
    run_cfg = TrainConfig(**{**asdict(train_cfg)})
    run_cfg.objective_mode = obj_mode
    run_cfg.pooling_mode = pool_mode
    run_enc = EncoderConfig(**{**asdict(enc_cfg)})
    run_enc.grid_hw = tuple(run_enc.grid_hw)
    run_enc.slices_per_frame = m
    state = trainer.train(clips, run_cfg, enc_cfg=run_enc)
    results = []
    for result in run_all_probes(state.model, clips, selector,
                                 seed=run_cfg.seed):
        result.condition.update(condition)
        results.append(result)
    return results


def run_ablation_suite(data_spec: SyntheticClipSpec,
                       n_clips: int,
                       axes: dict,
                       train_cfg: TrainConfig,
                       enc_cfg: EncoderConfig,
                       n_classes: int = 4,
                       data_seed: int = 0,
                       out_dir=None,
                       jobs: int = 1) -> list[ProbeResult]:
    """Full factorial of pretrain+probe runs over the requested axes.

    axes maps axis name -> list of values; unknown axes are rejected.
    Emits, under out_dir, a JSON array plus an aligned text table named by
    a hash of the suite configuration. jobs > 1 runs conditions in
    separate processes (conditions are independent by construction).
    """
    for key in axes:
        if key not in ABLATION_AXES:
            raise ProbeError(f"unknown ablation axis {key!r}")
    grid = {
        "objective_mode": axes.get("objective_mode", [train_cfg.objective_mode]),
        "pooling_mode": axes.get("pooling_mode", [train_cfg.pooling_mode]),
        "m": axes.get("m", [enc_cfg.slices_per_frame]),
        "feature_selector": axes.get("feature_selector", [FeatureSelector()]),
    }
    condition_args = [
        (data_spec, n_clips, n_classes, data_seed, train_cfg, enc_cfg,
         obj_mode, pool_mode, m, selector)
        for obj_mode, pool_mode, m, selector in itertools.product(
            grid["objective_mode"], grid["pooling_mode"], grid["m"],
            grid["feature_selector"])
    ]
    results: list[ProbeResult] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for batch in pool.map(evaluate_condition, condition_args):
                results.extend(batch)
    else:
        for args in condition_args:
            results.extend(evaluate_condition(args))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        suite_id = config_hash({
            "axes": {k: [str(v) for v in vals] for k, vals in axes.items()},
            "train": asdict(train_cfg),
            "enc": encoders_json(enc_cfg),
            "n_clips": n_clips,
            "data_seed": data_seed,
        })
        with open(os.path.join(out_dir, f"suite_{suite_id}.json"), "w",
                  encoding="utf-8") as fh:
            json.dump([r.to_json() for r in results], fh, indent=2)
        with open(os.path.join(out_dir, f"suite_{suite_id}.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(format_results_table(results))
    return results


def encoders_json(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["grid_hw"] = list(cfg.grid_hw)
    return d


def format_results_table(results: list[ProbeResult]) -> str:
    header = ["task", "metric", "value", "obj", "pool", "M", "feat"]
    rows = [header]
    for r in results:
        sel = r.condition.get("feature_selector", {})
        feat = "+".join(
            name for name, flag in
            (("zvg", sel.get("use_zvg")), ("zvl", sel.get("use_zvl")),
             ("aud", sel.get("use_audio"))) if flag
        )
        rows.append([
            r.task, r.metric_name, f"{r.value:.4f}",
            str(r.condition.get("objective_mode", "-")),
            str(r.condition.get("pooling_mode", "-")),
            str(r.condition.get("m", "-")), feat or "-",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j])
                               for j, cell in enumerate(row)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
