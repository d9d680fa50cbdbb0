"""JSON run configuration: sections {data, encoder, train, probe} with
unknown keys rejected and every default made explicit after parsing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, asdict

from .encoders import EncoderConfig
from .synthdata import SyntheticClipSpec, ValidationError
from .trainer import TrainConfig


@dataclass
class DataConfig:
    n_clips: int = 64
    n_classes: int = 4
    grid_size: tuple[int, int] = (32, 32)
    n_frames_raw: int = 32
    fps: float = 10.0
    slices_per_frame: int = 3
    n_mel_bands: int = 80
    source_region: tuple[int, int, int, int] = (4, 4, 8, 8)
    n_distractors: int = 1
    event_window: tuple[int, int] | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    randomize_source: bool = True
    align_source_to_grid: bool = False
    randomize_event: bool = False

    def clip_spec(self) -> SyntheticClipSpec:
        return SyntheticClipSpec(
            grid_size=tuple(self.grid_size),
            n_frames_raw=self.n_frames_raw,
            fps=self.fps,
            slices_per_frame=self.slices_per_frame,
            n_mel_bands=self.n_mel_bands,
            source_region=tuple(self.source_region),
            n_distractors=self.n_distractors,
            event_window=tuple(self.event_window) if self.event_window else None,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )


@dataclass
class ProbeConfig:
    task: str = "all"
    features: dict = field(default_factory=lambda: {
        "use_zvg": True, "use_zvl": True, "use_audio": False,
    })
    seed: int = 0
    percentile: float = 80.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


def _build_section(cls, raw: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(
            f"config section {section!r}: unknown keys {sorted(unknown)}"
        )
    obj = cls(**raw)
    for attr in ("grid_size", "grid_hw", "source_region", "event_window"):
        if hasattr(obj, attr) and getattr(obj, attr) is not None:
            setattr(obj, attr, tuple(getattr(obj, attr)))
    return obj


def parse_run_config(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValidationError(f"config: unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build_section(cls, raw.get(section, {}), section)
    return RunConfig(**kwargs)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(json.load(fh))


def effective_json(cfg: RunConfig) -> dict:
    """The fully explicit configuration; feeding it back reproduces the run."""
    out = asdict(cfg)
    for section in out.values():
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
    return out


def echo_config(cfg: RunConfig, out_dir) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(effective_json(cfg), fh, indent=2)
