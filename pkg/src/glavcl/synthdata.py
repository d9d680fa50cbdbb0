"""Synthetic paired audio-visual clips with known ground-truth correspondence.

A clip is driven by a latent scalar signal s(t): a class-indexed sinusoid
(an integer number of cycles over the clip, so different frequencies are
orthogonal) plus a small band-limited noise component. The signal drives
both the pixel intensities inside the sounding region and the envelope of
a synthetic band-energy "mel" spectrogram, so audio-visual correspondence
is exact by construction. Distractor regions oscillate with independent
signals at frequencies disjoint from every class frequency.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import container

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "glav-dataset-1"

_SINE_AMP = 0.35
_BLN_AMP = 0.05


class ValidationError(ValueError):
    """Raised when a spec or manifest violates an invariant."""


@dataclass
class SyntheticClipSpec:
    grid_size: tuple[int, int] = (32, 32)
    n_frames_raw: int = 32
    fps: float = 10.0
    slices_per_frame: int = 3
    n_mel_bands: int = 80
    source_region: tuple[int, int, int, int] = (4, 4, 8, 8)
    n_distractors: int = 1
    event_window: tuple[int, int] | None = None
    class_label: int = 0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        h_px, w_px = self.grid_size
        r, c, h, w = self.source_region
        if h_px < 1 or w_px < 1:
            raise ValidationError("grid_size: dimensions must be positive")
        if self.n_frames_raw < 2:
            raise ValidationError("n_frames_raw: must be >= 2")
        if self.slices_per_frame < 1:
            raise ValidationError("slices_per_frame: must be >= 1")
        if self.n_mel_bands < 1:
            raise ValidationError("n_mel_bands: must be >= 1")
        if h < 1 or w < 1 or r < 0 or c < 0 or r + h > h_px or c + w > w_px:
            raise ValidationError(
                "source_region: rectangle must lie fully inside the pixel grid"
            )
        if self.event_window is not None:
            s, e = self.event_window
            if not (0 <= s < e <= self.n_frames_raw):
                raise ValidationError(
                    "event_window: requires 0 <= start < end <= n_frames_raw"
                )
        if self.n_distractors < 0:
            raise ValidationError("n_distractors: must be >= 0")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma: must be >= 0")
        if self.class_label < 0:
            raise ValidationError("class_label: must be >= 0")


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T_v, H_px, W_px, 1] float32 in [0, 1]
    mel: np.ndarray  # [n_mel_bands, M * T_v] float32, nonnegative
    truth_mask: np.ndarray  # [H_px, W_px] float32 in {0, 1}
    event_segment_labels: np.ndarray  # [T_v] int64, 0 = background
    class_label: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetManifest:
    version: str
    clip_count: int
    clip_records: list[dict]  # {"path", "class_label", "seed"}
    generator_params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.clip_count != len(self.clip_records):
            raise ValidationError(
                f"manifest: clip_count {self.clip_count} != "
                f"{len(self.clip_records)} records"
            )


def _latent_signal(rng: np.random.Generator, freq_cycles: float, n: int) -> np.ndarray:
    """Sinusoid around 0.5 plus small band-limited noise, values in (0, 1)."""
    t = np.arange(n, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    s = 0.5 + _SINE_AMP * np.sin(2.0 * np.pi * freq_cycles * t / n + phase)
    # band-limited noise: a few random low/high harmonics at small amplitude
    for _ in range(3):
        k = rng.integers(1, max(2, n // 2))
        ph = rng.uniform(0.0, 2.0 * np.pi)
        s += (_BLN_AMP / 3.0) * np.sin(2.0 * np.pi * k * t / n + ph)
    return s


def _interp_to_slices(per_frame: np.ndarray, m: int) -> np.ndarray:
    """Linearly interpolate a per-frame series to slice resolution.

    Slice tau samples the series at frame coordinate (tau + 0.5) / m - 0.5,
    clamped to the series support.
    """
    n = per_frame.shape[0]
    tau = np.arange(n * m, dtype=np.float64)
    pos = np.clip((tau + 0.5) / m - 0.5, 0.0, n - 1.0)
    return np.interp(pos, np.arange(n, dtype=np.float64), per_frame)


def _band_profile(n_bands: int, class_label: int) -> np.ndarray:
    """Class-dependent energy profile over mel bands (a Gaussian bump)."""
    centers = np.arange(n_bands, dtype=np.float64)
    center = (7 + 13 * class_label) % n_bands
    width = max(2.0, n_bands / 20.0)
    prof = np.exp(-0.5 * ((centers - center) / width) ** 2)
    return 0.1 + prof  # strictly positive floor keeps mean energy coupled


def _place_distractors(
    rng: np.random.Generator, spec: SyntheticClipSpec
) -> list[tuple[int, int, int, int]]:
    h_px, w_px = spec.grid_size
    src = spec.source_region
    placed: list[tuple[int, int, int, int]] = []

    def overlaps(a, b):
        return not (
            a[0] + a[2] <= b[0]
            or b[0] + b[2] <= a[0]
            or a[1] + a[3] <= b[1]
            or b[1] + b[3] <= a[1]
        )

    for _ in range(spec.n_distractors):
        h = src[2]
        w = src[3]
        for _attempt in range(500):
            r = int(rng.integers(0, h_px - h + 1))
            c = int(rng.integers(0, w_px - w + 1))
            cand = (r, c, h, w)
            if not overlaps(cand, src) and all(not overlaps(cand, p) for p in placed):
                placed.append(cand)
                break
        else:
            raise ValidationError(
                "n_distractors: cannot place distractors disjoint from "
                "source_region on this grid"
            )
    return placed


def generate_clip(spec: SyntheticClipSpec) -> SyntheticClip:
    """Generate one clip; pure function of the spec (seed included)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h_px, w_px = spec.grid_size
    t_v = spec.n_frames_raw
    m = spec.slices_per_frame

    s = _latent_signal(rng, spec.class_label + 1, t_v)
    distractors = _place_distractors(rng, spec)
    # Distractor frequencies: integer cycle counts below Nyquist, distinct
    # from the clip's own class frequency, biased toward the high end so
    # they stay orthogonal to every small class index.
    candidates = [f for f in range(1, max(2, t_v // 2)) if f != spec.class_label + 1]
    candidates = candidates[-8:]
    distractor_signals = [
        _latent_signal(rng, candidates[int(rng.integers(0, len(candidates)))], t_v)
        for _ in distractors
    ]

    # Outside the event window the source is inactive: the source region sits
    # at background intensity and the audio envelope drops to a quiet floor,
    # so the shared signal only drives both modalities inside the window.
    vid_signal = s.copy()
    aud_signal = s.copy()
    event_labels = np.zeros(t_v, dtype=np.int64)
    if spec.event_window is not None:
        start, end = spec.event_window
        outside = np.ones(t_v, dtype=bool)
        outside[start:end] = False
        vid_signal[outside] = 0.5
        aud_signal[outside] = 0.1
        event_labels[start:end] = spec.class_label + 1

    frames = np.full((t_v, h_px, w_px, 1), 0.5, dtype=np.float64)
    r, c, h, w = spec.source_region
    frames[:, r : r + h, c : c + w, 0] = vid_signal[:, None, None]
    for (dr, dc, dh, dw), dsig in zip(distractors, distractor_signals):
        frames[:, dr : dr + dh, dc : dc + dw, 0] = dsig[:, None, None]

    env = _interp_to_slices(aud_signal, m)
    mel = _band_profile(spec.n_mel_bands, spec.class_label)[:, None] * env[None, :]

    if spec.noise_sigma > 0:
        frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape)
        mel += rng.normal(0.0, spec.noise_sigma, size=mel.shape)

    frames = np.clip(frames, 0.0, 1.0)
    mel = np.clip(mel, 0.0, None)

    truth_mask = np.zeros((h_px, w_px), dtype=np.float32)
    truth_mask[r : r + h, c : c + w] = 1.0

    return SyntheticClip(
        frames=frames.astype(np.float32),
        mel=mel.astype(np.float32),
        truth_mask=truth_mask,
        event_segment_labels=event_labels,
        class_label=spec.class_label,
    )


def generate_dataset(
    n_clips: int,
    base_spec: SyntheticClipSpec,
    n_classes: int = 4,
    seed: int = 0,
    randomize_source: bool = True,
    source_cell_grid: tuple[int, int] | None = None,
    randomize_event: bool = False,
) -> tuple[list[SyntheticClip], DatasetManifest]:
    """Generate n clips cycling over class labels; clip i uses seed+i.

    With randomize_source the sounding region is placed at a random position
    per clip (seeded at the dataset level); when source_cell_grid=(H, W) is
    given, positions snap to that cell grid and the region is resized to
    exactly one cell, so the sounding region occupies 1 of H*W cells.
    With randomize_event each clip gets an event window of the base spec's
    length (half the clip when the base spec has none) at a random offset.
    """
    if n_clips < 1:
        raise ValidationError("n_clips: must be >= 1")
    placer = np.random.default_rng((seed, 0xA17))
    h_px, w_px = base_spec.grid_size
    clips = []
    records = []
    for i in range(n_clips):
        spec_i = SyntheticClipSpec(**{**asdict(base_spec)})
        spec_i.class_label = i % n_classes
        spec_i.seed = seed + i
        # convert lists from asdict back to tuples
        spec_i.grid_size = tuple(spec_i.grid_size)
        spec_i.source_region = tuple(spec_i.source_region)
        if spec_i.event_window is not None:
            spec_i.event_window = tuple(spec_i.event_window)
        if source_cell_grid is not None:
            gh, gw = source_cell_grid
            ch, cw = h_px // gh, w_px // gw
            r = int(placer.integers(0, gh)) * ch
            c = int(placer.integers(0, gw)) * cw
            spec_i.source_region = (r, c, ch, cw)
        elif randomize_source:
            _, _, h, w = spec_i.source_region
            r = int(placer.integers(0, h_px - h + 1))
            c = int(placer.integers(0, w_px - w + 1))
            spec_i.source_region = (r, c, h, w)
        if randomize_event:
            if spec_i.event_window is not None:
                length = spec_i.event_window[1] - spec_i.event_window[0]
            else:
                length = max(1, spec_i.n_frames_raw // 2)
            start = int(placer.integers(0, spec_i.n_frames_raw - length + 1))
            spec_i.event_window = (start, start + length)
        clips.append(generate_clip(spec_i))
        records.append(
            {"path": f"clip_{i:05d}.glav", "class_label": spec_i.class_label,
             "seed": spec_i.seed}
        )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        clip_count=n_clips,
        clip_records=records,
        generator_params=asdict(base_spec),
    )
    return clips, manifest


def write_dataset(
    clips: list[SyntheticClip], manifest: DatasetManifest, root_path
) -> None:
    manifest.validate()
    if len(clips) != manifest.clip_count:
        raise ValidationError("manifest clip_count does not match number of clips")
    os.makedirs(root_path, exist_ok=True)
    for clip, rec in zip(clips, manifest.clip_records):
        container.write_arrays(
            os.path.join(root_path, rec["path"]),
            {
                "frames": clip.frames,
                "mel": clip.mel,
                "truth_mask": clip.truth_mask,
                "event_segment_labels": clip.event_segment_labels.astype(np.float32),
                "class_label": np.array(float(clip.class_label), dtype=np.float32),
            },
        )
    with open(os.path.join(root_path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "version": manifest.version,
                "clip_count": manifest.clip_count,
                "clip_records": manifest.clip_records,
                "generator_params": manifest.generator_params,
            },
            fh,
            indent=2,
        )


def read_dataset(root_path) -> tuple[list[SyntheticClip], DatasetManifest]:
    manifest_path = os.path.join(root_path, MANIFEST_NAME)
    with open(manifest_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    manifest = DatasetManifest(
        version=raw["version"],
        clip_count=raw["clip_count"],
        clip_records=raw["clip_records"],
        generator_params=raw.get("generator_params", {}),
    )
    manifest.validate()
    clips = []
    for rec in manifest.clip_records:
        path = os.path.join(root_path, rec["path"])
        if not os.path.exists(path):
            raise ValidationError(f"manifest references missing file {rec['path']}")
        arrays = container.read_arrays(path)
        for key in ("frames", "mel", "truth_mask", "event_segment_labels",
                    "class_label"):
            if key not in arrays:
                raise container.DimensionMismatchError(
                    f"clip file {rec['path']} missing array {key!r}"
                )
        clips.append(
            SyntheticClip(
                frames=arrays["frames"],
                mel=arrays["mel"],
                truth_mask=arrays["truth_mask"],
                event_segment_labels=arrays["event_segment_labels"].astype(np.int64),
                class_label=int(np.ravel(arrays["class_label"])[0]),
            )
        )
    return clips, manifest


def shuffle_audio(
    clips: list[SyntheticClip], seed: int
) -> list[SyntheticClip]:
    """Permute mel arrays across clips by a derangement; video untouched."""
    n = len(clips)
    if n < 2:
        raise ValidationError("shuffle_audio: needs >= 2 clips (no derangement)")
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    while True:
        rng.shuffle(perm)
        if not np.any(perm == np.arange(n)):
            break
    return [
        SyntheticClip(
            frames=clip.frames,
            mel=clips[perm[i]].mel,
            truth_mask=clip.truth_mask,
            event_segment_labels=clip.event_segment_labels,
            class_label=clip.class_label,
        )
        for i, clip in enumerate(clips)
    ]
