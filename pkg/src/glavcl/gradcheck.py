"""Central finite-difference verification of analytic (autograd) gradients
for the losses and the encoders, run at 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import objectives
from .encoders import EncoderConfig, GlavModel

DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    checks: dict[str, float] = field(default_factory=dict)  # name -> max rel err
    tolerance: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(
            err < self.tolerance for err in self.checks.values()
        )

    def to_json(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_err": self.checks,
        }


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def finite_difference_grad(fn, x: torch.Tensor, indices,
                           eps: float = DEFAULT_EPS) -> dict:
    """Central differences of scalar fn at the given flat indices of x."""
    grads = {}
    flat = x.reshape(-1)
    for idx in indices:
        orig = float(flat[idx].detach())
        with torch.no_grad():
            flat[idx] = orig + eps
        f_plus = float(fn().detach())
        with torch.no_grad():
            flat[idx] = orig - eps
        f_minus = float(fn().detach())
        with torch.no_grad():
            flat[idx] = orig
        grads[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grads


def _max_rel_err(fn, x: torch.Tensor, n_probe: int, rng: np.random.Generator,
                 eps: float = DEFAULT_EPS) -> float:
    """Compare autograd to central differences on sampled entries of x."""
    if x.grad is not None:
        x.grad = None
    value = fn()
    value.backward()
    analytic = x.grad.reshape(-1).detach().clone()
    n = x.numel()
    indices = rng.choice(n, size=min(n_probe, n), replace=False).tolist()
    numeric = finite_difference_grad(fn, x, indices, eps=eps)
    return max(
        relative_error(float(analytic[i]), numeric[i]) for i in indices
    )


def check_loss_gradients(seed: int = 0, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Gradients of all three losses w.r.t. both embedding batches."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    b, h, w, d, t_v, m, tau = 3, 2, 2, 4, 4, 2, 0.5

    za_g = torch.tensor(rng.normal(size=(b, d)), dtype=torch.float64,
                        requires_grad=True)
    zv_g = torch.tensor(rng.normal(size=(b, h, w, d)), dtype=torch.float64,
                        requires_grad=True)
    for name, x in (("loss_slocal_tglobal/za", za_g),
                    ("loss_slocal_tglobal/zv", zv_g)):
        report.checks[name] = _max_rel_err(
            lambda: objectives.loss_slocal_tglobal(za_g, zv_g, tau)[0],
            x, n_probe=6, rng=rng,
        )

    za_l = torch.tensor(rng.normal(size=(m * t_v, d)), dtype=torch.float64,
                        requires_grad=True)
    zv_l = torch.tensor(rng.normal(size=(t_v, d)), dtype=torch.float64,
                        requires_grad=True)
    for name, x in (("loss_sglobal_tlocal/za", za_l),
                    ("loss_sglobal_tlocal/zv", zv_l)):
        report.checks[name] = _max_rel_err(
            lambda: objectives.loss_sglobal_tlocal(za_l, zv_l, m, tau)[0],
            x, n_probe=6, rng=rng,
        )
    for name, x in (("loss_single_positive/za", za_l),
                    ("loss_single_positive/zv", zv_l)):
        report.checks[name] = _max_rel_err(
            lambda: objectives.loss_single_positive_variant(za_l, zv_l, m, tau)[0],
            x, n_probe=6, rng=rng,
        )
    return report


def check_encoder_gradients(cfg: EncoderConfig | None = None, seed: int = 0,
                            tol: float = DEFAULT_TOL,
                            n_probe: int = 3) -> GradCheckReport:
    """Gradients of each encoder output w.r.t. sampled weight entries.

    The scalar under test is a fixed random projection of the encoder
    output, so every output element influences it.
    """
    rng = np.random.default_rng(seed)
    cfg = cfg or EncoderConfig(
        embed_dim=4, slow_stride=2, grid_hw=(2, 2), normalize=True,
        temperature=0.5, n_mel_bands=8, slices_per_frame=2,
        hidden_channels=4, init_seed=seed,
    )
    model = GlavModel(cfg, dtype=torch.float64)
    t_v = 4
    frames = torch.tensor(
        rng.uniform(0, 1, size=(t_v, 8, 8, 1)), dtype=torch.float64
    )
    mel = torch.tensor(
        rng.uniform(0, 1, size=(cfg.n_mel_bands, cfg.slices_per_frame * t_v)),
        dtype=torch.float64,
    )

    def scalar_for(encode):
        out = encode()
        proj = torch.tensor(
            np.random.default_rng((seed, out.numel())).normal(size=out.shape),
            dtype=torch.float64,
        )
        return (out * proj).sum()

    targets = {
        "encoder_visual_global": lambda: model.visual_global(frames).grid,
        "encoder_visual_local": lambda: model.visual_local(frames).grid_seq,
        "encoder_audio": lambda: model.audio(mel).slices,
    }
    report = GradCheckReport(tolerance=tol)
    for name, encode in targets.items():
        submodule = {
            "encoder_visual_global": model.visual_global,
            "encoder_visual_local": model.visual_local,
            "encoder_audio": model.audio,
        }[name]
        worst = 0.0
        for pname, p in submodule.named_parameters():
            if pname.endswith("bias"):
                continue
            err = _max_rel_err(
                lambda: scalar_for(encode), p, n_probe=n_probe, rng=rng
            )
            worst = max(worst, err)
        report.checks[name] = worst
    return report


def run_gradcheck(seed: int = 0, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Combined loss + encoder gradient check, as run by the CLI."""
    combined = GradCheckReport(tolerance=tol)
    combined.checks.update(check_loss_gradients(seed=seed, tol=tol).checks)
    combined.checks.update(check_encoder_gradients(seed=seed, tol=tol).checks)
    return combined
