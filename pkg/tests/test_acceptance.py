"""Acceptance gate: eight go/no-go checks, one pass/fail line each.

Run with `pytest -s tests/test_acceptance.py` to see the per-check lines
as they complete. Several checks pretrain small models on synthetic data
and take minutes on CPU; the whole module finishes in well under half an
hour on a desktop machine.
"""

import math
import statistics
import time

import numpy as np
import torch

from glavcl import attention as A
from glavcl import objectives as O
from glavcl import synthdata as S
from glavcl import trainer as T
from glavcl.encoders import EncoderConfig
from glavcl.gradcheck import run_gradcheck
from glavcl.probes import (
    FeatureSelector,
    _split_indices,
    evaluate_condition,
    probe_event_localization,
    probe_global_classification,
    probe_predict,
    probe_source_localization,
    train_linear_probe,
)


def report(name: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Shared configurations
# ---------------------------------------------------------------------------

SEL_ALL = FeatureSelector(use_zvg=True, use_zvl=True, use_audio=True)


def base_spec(**overrides):
    base = dict(
        grid_size=(16, 16), n_frames_raw=8, slices_per_frame=3,
        n_mel_bands=80, source_region=(0, 0, 4, 4), n_distractors=2,
        noise_sigma=0.02,
    )
    base.update(overrides)
    return S.SyntheticClipSpec(**base)


def base_enc(**overrides):
    base = dict(
        embed_dim=16, slow_stride=2, grid_hw=(4, 4), n_mel_bands=80,
        slices_per_frame=3, hidden_channels=16,
    )
    base.update(overrides)
    return EncoderConfig(**base)


# ---------------------------------------------------------------------------
# 1. Loss-oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_1_loss_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_each = 200

    for _ in range(n_each):
        b = int(rng.integers(2, 5))
        h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d = int(rng.integers(1, 5))
        tau = float(rng.uniform(0.1, 2.0))
        reading = ("all_pairs", "batch_squared")[int(rng.integers(0, 2))]
        za = torch.tensor(rng.standard_normal((b, d)))
        zv = torch.tensor(rng.standard_normal((b, h, w, d)))
        got, _ = O.loss_slocal_tglobal(za, zv, tau, reading=reading)
        want = O.oracle_loss_slocal_tglobal(
            za.numpy(), zv.numpy(), tau, reading=reading
        )
        worst = max(worst, abs(float(got) - want) / max(abs(want), 1e-12))

    for _ in range(n_each):
        t_v = int(rng.integers(2, 7))
        m = int(rng.integers(1, 4))
        d = int(rng.integers(1, 5))
        tau = float(rng.uniform(0.1, 2.0))
        reading = ("all_pairs", "batch_squared")[int(rng.integers(0, 2))]
        za = torch.tensor(rng.standard_normal((m * t_v, d)))
        zv = torch.tensor(rng.standard_normal((t_v, d)))
        got, _ = O.loss_sglobal_tlocal(za, zv, m, tau, reading=reading)
        want = O.oracle_loss_sglobal_tlocal(
            za.numpy(), zv.numpy(), m, tau, reading=reading
        )
        worst = max(worst, abs(float(got) - want) / max(abs(want), 1e-12))

    for _ in range(n_each):
        t_v = int(rng.integers(2, 7))
        m = int(rng.integers(1, 4))
        d = int(rng.integers(1, 5))
        tau = float(rng.uniform(0.1, 2.0))
        za = torch.tensor(rng.standard_normal((m * t_v, d)))
        zv = torch.tensor(rng.standard_normal((t_v, d)))
        got, _ = O.loss_single_positive_variant(za, zv, m, tau)
        want = O.oracle_loss_single_positive(za.numpy(), zv.numpy(), m, tau)
        worst = max(worst, abs(float(got) - want) / max(abs(want), 1e-12))

    wall = time.time() - t0
    report(
        "criterion 1 (loss-oracle equivalence)",
        worst < 1e-6 and wall < 30.0,
        f"{3 * n_each} instances, max rel err {worst:.2e}, {wall:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Pair-count reproduction
# ---------------------------------------------------------------------------

def test_criterion_2_pair_counts():
    n_global = O.enumerate_pairs_global(32, 16, 16).counts[1]
    n_local = O.enumerate_pairs_local(32, 3).counts[1]
    report(
        "criterion 2 (pair counts)",
        n_global == 246_016 and n_local == 2_883,
        f"global {n_global} (want 246016), local {n_local} (want 2883)",
    )


# ---------------------------------------------------------------------------
# 3. Gradient checks
# ---------------------------------------------------------------------------

def test_criterion_3_gradient_checks():
    t0 = time.time()
    result = run_gradcheck(seed=0)
    wall = time.time() - t0
    worst = max(result.checks.values())
    report(
        "criterion 3 (gradient checks)",
        result.passed and wall < 120.0,
        f"{len(result.checks)} checks, max rel err {worst:.2e}, {wall:.1f}s",
    )


# ---------------------------------------------------------------------------
# 4. Training sanity + localization
# ---------------------------------------------------------------------------

def test_criterion_4_training_localization():
    t0 = time.time()
    spec = base_spec()
    clips, _ = S.generate_dataset(
        320, spec, n_classes=3, seed=7, source_cell_grid=(4, 4)
    )
    train_clips, heldout = clips[:256], clips[256:]
    cfg = T.TrainConfig(batch_size=8, steps=2000, lr=2e-3, seed=0)

    state = T.train(train_clips, cfg, enc_cfg=base_enc())
    trained = probe_source_localization(
        state.model, heldout, eval_frac=1.0
    ).value

    control_clips = S.shuffle_audio(train_clips, seed=1)
    control_state = T.train(control_clips, cfg, enc_cfg=base_enc())
    control = probe_source_localization(
        control_state.model, heldout, eval_frac=1.0
    ).value

    wall = time.time() - t0
    ok = trained >= 0.5 and trained >= 3.0 * control and wall < 600.0
    report(
        "criterion 4 (training sanity + localization)",
        ok,
        f"pointing {trained:.3f} (need >= 0.5), shuffled-audio control "
        f"{control:.3f} (need <= {trained / 3.0:.3f}), {wall:.0f}s",
    )


# ---------------------------------------------------------------------------
# 5-7. Directional ablation trends
# ---------------------------------------------------------------------------

def _condition_medians(spec, n_clips, train_cfg, obj_mode, pool_mode, m,
                       seeds=(0, 1, 2)):
    """Median probe value per task over per-seed pretrain+probe runs."""
    per_task = {}
    for seed in seeds:
        cfg = T.TrainConfig(**{**train_cfg.__dict__, "seed": seed})
        results = evaluate_condition(
            (spec, n_clips, 3, 11 + seed, cfg, base_enc(), obj_mode,
             pool_mode, m, SEL_ALL)
        )
        for r in results:
            key = r.value if r.task != "source_loc" else r.extras["mean_iou"]
            per_task.setdefault(r.task, []).append(key)
    return {task: statistics.median(vals) for task, vals in per_task.items()}


def test_criterion_5_joint_objectives_dominate():
    t0 = time.time()
    spec = base_spec(n_distractors=1, event_window=(2, 6))
    cfg = T.TrainConfig(batch_size=8, steps=400, lr=2e-3)
    meds = {
        mode: _condition_medians(spec, 96, cfg, mode, "mil_multi_positive", 3)
        for mode in ("both", "global_only", "local_only")
    }
    ok = all(
        meds["both"][task] >= meds[single][task]
        for task in ("global_cls", "event_loc")
        for single in ("global_only", "local_only")
    )
    wall = time.time() - t0
    detail = ", ".join(
        f"{mode}: cls {meds[mode]['global_cls']:.3f} / "
        f"evt {meds[mode]['event_loc']:.3f}"
        for mode in meds
    )
    report(
        "criterion 5 (joint objectives dominate single objectives)",
        ok, f"{detail}, {wall:.0f}s",
    )


def test_criterion_6_multi_positive_beats_single_positive_iou():
    # Trains both pooling variants to convergence (run-to-run IoU spread
    # < 0.01 at 3000 steps) so a pass/fail reflects a real effect rather
    # than optimization noise.
    t0 = time.time()
    spec = base_spec()  # sounding region occupies exactly 1 grid cell below
    cfg = T.TrainConfig(batch_size=8, steps=3000, lr=2e-3)
    mil = _condition_medians(spec, 192, cfg, "both", "mil_multi_positive", 3)
    avg = _condition_medians(spec, 192, cfg, "both", "avg_single_positive", 3)
    wall = time.time() - t0
    report(
        "criterion 6 (multi-positive beats averaged single positive on IoU)",
        mil["source_loc"] > avg["source_loc"],
        f"IoU multi {mil['source_loc']:.3f} vs single {avg['source_loc']:.3f}"
        f", {wall:.0f}s",
    )


def test_criterion_7_window_size_sweep():
    t0 = time.time()
    spec = base_spec(n_distractors=1, event_window=(2, 6))
    cfg = T.TrainConfig(batch_size=8, steps=400, lr=2e-3)
    meds = {
        m: _condition_medians(spec, 96, cfg, "both", "mil_multi_positive", m)
        for m in (1, 3, 5, 7)
    }
    wall = time.time() - t0
    sweep = ", ".join(
        f"M={m}: {meds[m]['event_loc']:.3f}" for m in (1, 3, 5, 7)
    )
    report(
        "criterion 7 (window-size sweep: M=3 at least matches M=1)",
        meds[3]["event_loc"] >= meds[1]["event_loc"],
        f"{sweep}, {wall:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8. Invariant suite
# ---------------------------------------------------------------------------

def test_criterion_8_invariants(tmp_path):
    failures = []
    rng = np.random.default_rng(0)

    # attention normalization + softmax shift invariance
    za = torch.tensor(rng.standard_normal(8))
    grid = torch.tensor(rng.standard_normal((4, 4, 8)))
    attn = A.attention_map(za, grid, 0.5)
    if abs(float(attn.weights.sum()) - 1.0) > 1e-6:
        failures.append("attention weights do not sum to 1")
    za_s = torch.cat([za, torch.tensor([3.0])])
    grid_s = torch.cat([grid, torch.ones(4, 4, 1)], dim=-1)
    shifted = A.attention_map(za_s, grid_s, 0.5)
    if not torch.allclose(attn.weights, shifted.weights, atol=1e-6):
        failures.append("softmax not shift invariant")

    # convex-combination bounds of attention pooling
    seq = torch.tensor(rng.standard_normal((6, 4, 4, 8)))
    pooled = A.attention_pool(seq, attn)
    lo = seq.reshape(6, 16, 8).min(dim=1).values
    hi = seq.reshape(6, 16, 8).max(dim=1).values
    if not (torch.all(pooled >= lo - 1e-9) and torch.all(pooled <= hi + 1e-9)):
        failures.append("attention pool escapes convex hull")

    # stop-gradient zero path
    za_req = za.clone().requires_grad_(True)
    attn_req = A.attention_map(za_req, grid, 0.5)
    pooled_req = A.attention_pool(seq, attn_req, stop_gradient=True)
    if pooled_req.requires_grad:
        failures.append("stop-gradient leaks into attention inputs")

    # negative-permutation stability
    za_b = torch.tensor(rng.standard_normal((4, 6)))
    zv_b = torch.tensor(rng.standard_normal((4, 2, 2, 6)))
    base, _ = O.loss_slocal_tglobal(za_b, zv_b, 0.7)
    for _ in range(4):
        perm = torch.tensor(rng.permutation(4))
        permuted, _ = O.loss_slocal_tglobal(za_b[perm], zv_b[perm], 0.7)
        if abs(float(base) - float(permuted)) > 1e-12:
            failures.append("loss not stable under clip permutation")
            break

    # checkpoint/resume trajectory equality
    spec = base_spec(grid_size=(8, 8), n_frames_raw=4, n_mel_bands=16,
                     source_region=(0, 0, 2, 2), n_distractors=0)
    clips, _ = S.generate_dataset(12, spec, n_classes=2, seed=0)
    enc = base_enc(embed_dim=4, grid_hw=(2, 2), n_mel_bands=16,
                   hidden_channels=4)
    full = T.train(clips, T.TrainConfig(batch_size=4, steps=6, seed=0,
                                        warmup_steps=2), enc_cfg=enc)
    half = T.train(clips, T.TrainConfig(batch_size=4, steps=3, seed=0,
                                        warmup_steps=2), enc_cfg=enc)
    half.config.steps = 6
    ckpt = tmp_path / "ckpt.glav"
    T.checkpoint(half, ckpt)
    resumed_state = T.resume(ckpt)
    resumed = T.train(clips, resumed_state.config, state=resumed_state)
    drift = max(
        abs(a["loss"] - b["loss"])
        for a, b in zip(full.loss_history[3:], resumed.loss_history[3:])
    )
    if drift > 1e-10:
        failures.append(f"resume drift {drift:.2e} exceeds 1e-10")

    # chance-level calibration of probes on shuffled labels
    x = rng.standard_normal((400, 6))
    y = rng.integers(0, 4, size=400)
    tr, ev = _split_indices(400, seed=0)
    w = train_linear_probe(x[tr], y[tr], 4)
    acc = float((probe_predict(w, x[ev]) == y[ev]).mean())
    sigma = math.sqrt(0.25 * 0.75 / len(ev))
    if abs(acc - 0.25) > 3 * sigma:
        failures.append(f"shuffled-label probe accuracy {acc:.3f} off chance")

    report(
        "criterion 8 (invariant suite)",
        not failures,
        "all invariants hold" if not failures else "; ".join(failures),
    )
