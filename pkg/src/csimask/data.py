"""CSI ingestion, preprocessing, synthetic datasets and the on-disk format.

A sample is a pair of real tensors of shape (antennas, subcarriers,
timesteps): the magnitude and the angle of the complex channel estimate per
subcarrier and time step. Preprocessing follows the usual recipe for
commodity-NIC CSI: unwrap and linearly detrend the phase along the
subcarrier axis, then z-score both streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core.errors import ConfigError, DimensionError, ShapeMismatchError
from .core.init import make_rng
from .storage import read_record, write_record

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
ZSCORE_EPS = 1e-8


# ---- preprocessing ----------------------------------------------------------


def decompose_complex(real: np.ndarray, imag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a complex channel into (amplitude, phase).

    amplitude = sqrt(re^2 + im^2); phase = atan2(im, re) in (-pi, pi], with
    the origin mapped to phase 0 by convention.
    """
    real = np.asarray(real)
    imag = np.asarray(imag)
    if real.shape != imag.shape:
        raise DimensionError("decompose_complex: real/imag shapes differ")
    return np.hypot(real, imag), np.arctan2(imag, real)


def calibrate_phase(phase: np.ndarray) -> np.ndarray:
    """Remove the linear-in-subcarrier phase distortion.

    Per antenna and timestep: unwrap along the subcarrier axis, then subtract
    the least-squares line in subcarrier index (slope and intercept). The
    result has zero mean and zero linear trend along subcarriers.
    """
    phase = np.asarray(phase, dtype=np.float64)
    if phase.ndim != 3:
        raise DimensionError("calibrate_phase expects (antennas, subcarriers, timesteps)")
    n_sub = phase.shape[1]
    if n_sub < 2:
        raise DimensionError("calibrate_phase needs at least 2 subcarriers")
    unwrapped = np.unwrap(phase, axis=1)
    k = np.arange(n_sub, dtype=np.float64)[None, :, None]
    kc = k - k.mean()
    mean = unwrapped.mean(axis=1, keepdims=True)
    slope = (kc * unwrapped).sum(axis=1, keepdims=True) / (kc * kc).sum()
    return unwrapped - mean - slope * kc


def zscore_normalize(x: np.ndarray, stats: tuple[float, float] | None = None) -> np.ndarray:
    """(x - mu) / (sigma + eps) over all elements, or with supplied stats."""
    x = np.asarray(x, dtype=np.float64)
    if stats is None:
        mu, sigma = float(x.mean()), float(x.std())
    else:
        mu, sigma = stats
    return (x - mu) / (sigma + ZSCORE_EPS)


def resample_time(x: np.ndarray, t_out: int) -> np.ndarray:
    """Linear interpolation to ``t_out`` uniform positions along the last axis.

    Endpoints are preserved exactly; a no-op when the lengths already match.
    """
    x = np.asarray(x)
    t_in = x.shape[-1]
    if t_in < 2 or t_out < 2:
        raise DimensionError("resample_time requires at least 2 timesteps on both sides")
    if t_in == t_out:
        return x.copy()
    pos = np.linspace(0.0, t_in - 1.0, t_out)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = pos - lo
    return x[..., lo] * (1.0 - frac) + x[..., hi] * frac


# ---- datasets ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    n_samples: int
    n_antennas: int
    n_subcarriers: int
    n_timesteps: int
    n_classes: int
    modalities: tuple[str, str] = ("amplitude", "phase")
    normalization: str = "raw"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_antennas": self.n_antennas,
            "n_subcarriers": self.n_subcarriers,
            "n_timesteps": self.n_timesteps,
            "n_classes": self.n_classes,
            "modalities": list(self.modalities),
            "normalization": self.normalization,
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(
            n_samples=int(d["n_samples"]),
            n_antennas=int(d["n_antennas"]),
            n_subcarriers=int(d["n_subcarriers"]),
            n_timesteps=int(d["n_timesteps"]),
            n_classes=int(d["n_classes"]),
            modalities=tuple(d.get("modalities", ("amplitude", "phase"))),
            normalization=d.get("normalization", "raw"),
            extra=d.get("extra", {}),
        )

    def describe(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.to_json().items() if k != "extra"]
        for k, v in self.extra.items():
            lines.append(f"extra.{k}: {json.dumps(v)}")
        return "\n".join(lines)


@dataclass
class CsiDataset:
    """Immutable bundle of aligned amplitude/phase tensors and labels."""

    amplitude: np.ndarray  # (n, N, S, T) float32
    phase: np.ndarray  # (n, N, S, T) float32
    labels: np.ndarray  # (n,) int32
    manifest: DatasetManifest

    def __post_init__(self):
        m = self.manifest
        want = (m.n_samples, m.n_antennas, m.n_subcarriers, m.n_timesteps)
        if self.amplitude.shape != want or self.phase.shape != want:
            raise ShapeMismatchError(
                f"dataset arrays {self.amplitude.shape}/{self.phase.shape} "
                f"do not match manifest {want}"
            )
        if self.labels.shape != (m.n_samples,):
            raise ShapeMismatchError("label count does not match manifest")
        if m.n_samples and (self.labels.min() < 0 or self.labels.max() >= m.n_classes):
            raise ShapeMismatchError("labels outside [0, n_classes)")

    def __len__(self):
        return self.manifest.n_samples


def preprocess(dataset: CsiDataset, zscore_scope: str = "per_sample") -> CsiDataset:
    """Calibrate phase and z-score both streams.

    ``zscore_scope``: "per_sample" computes statistics per sample and
    modality (the default; nothing leaks between samples), "global" uses
    dataset-wide statistics per modality.
    """
    if dataset.manifest.normalization != "raw":
        raise ConfigError("dataset already preprocessed")
    amp = dataset.amplitude.astype(np.float64)
    pha = np.stack([calibrate_phase(p) for p in dataset.phase.astype(np.float64)])
    if zscore_scope == "per_sample":
        amp = np.stack([zscore_normalize(a) for a in amp])
        pha = np.stack([zscore_normalize(p) for p in pha])
    elif zscore_scope == "global":
        amp = zscore_normalize(amp)
        pha = zscore_normalize(pha)
    else:
        raise ConfigError(f"unknown zscore_scope {zscore_scope!r}")
    manifest = replace(dataset.manifest, normalization=f"zscore/{zscore_scope}")
    return CsiDataset(
        amplitude=amp.astype(np.float32),
        phase=pha.astype(np.float32),
        labels=dataset.labels,
        manifest=manifest,
    )


# ---- splits -------------------------------------------------------------------


@dataclass
class SplitSpec:
    train: np.ndarray
    test: np.ndarray
    seed: int
    ratio: float


def stratified_split(labels: np.ndarray, ratio: float, seed: int) -> SplitSpec:
    """Per-class shuffled split; floor(ratio * class size) goes to train."""
    labels = np.asarray(labels)
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise ConfigError(f"class {int(cls)} has fewer than 2 samples")
        rng = make_rng(seed, 101, int(cls))
        idx = rng.permutation(idx)
        cut = int(np.floor(ratio * idx.size))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return SplitSpec(
        train=np.sort(np.concatenate(train)),
        test=np.sort(np.concatenate(test)),
        seed=seed,
        ratio=ratio,
    )


def kshot_sample(train_labels: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Exactly k indices per class, drawn without replacement, seeded."""
    train_labels = np.asarray(train_labels)
    deficient = [
        int(c) for c in np.unique(train_labels) if np.count_nonzero(train_labels == c) < k
    ]
    if deficient:
        raise ConfigError(f"classes with fewer than k={k} train samples: {deficient}")
    picks = []
    for cls in np.unique(train_labels):
        idx = np.flatnonzero(train_labels == cls)
        rng = make_rng(seed, 102, int(cls))
        picks.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picks))


# ---- synthetic generator -------------------------------------------------------


@dataclass
class SynthConfig:
    """Desk-scale synthetic CSI with one localized activity region per class.

    Each sample is drawn from a shared complex model: a flat noisy background
    plus, inside a class-specific subcarrier band and temporal burst, a slow
    oscillating complex component with a class-specific carrier frequency and
    phase slope. Amplitude and phase are |H| and angle(H) of the same H, so
    the two streams are genuinely coupled. The activity template is
    deterministic per class; per-sample randomness enters through the burst
    amplitude, small antenna gain jitter and the background noise, which
    keeps masked activity regions reconstructable from sparse context while
    still carrying far more variance than the background.
    """

    n_classes: int = 4
    per_class: int = 100
    n_antennas: int = 3
    n_subcarriers: int = 30
    n_timesteps: int = 200
    background_mean: float = 1.0
    background_sigma: float = 0.015
    activity_amp: tuple[float, float] = (0.8, 1.6)
    band_width: int = 8
    burst_width: int = 70
    bands: list[tuple[int, int]] | None = None  # per class (s0, s1); derived if None
    bursts: list[tuple[int, int]] | None = None  # per class (t0, t1); derived if None

    def resolve_regions(self) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        c, s, t = self.n_classes, self.n_subcarriers, self.n_timesteps
        bands = self.bands
        if bands is None:
            bands = []
            for i in range(c):
                s0 = int(round(i * (s - self.band_width) / max(c - 1, 1)))
                bands.append((s0, s0 + self.band_width))
        bursts = self.bursts
        if bursts is None:
            bursts = []
            for i in range(c):
                t0 = int(round(i * (t - self.burst_width) / max(c - 1, 1)))
                bursts.append((t0, t0 + self.burst_width))
        for s0, s1 in bands:
            if not (0 <= s0 < s1 <= s):
                raise ConfigError(f"band ({s0},{s1}) outside [0,{s})")
        for t0, t1 in bursts:
            if not (0 <= t0 < t1 <= t):
                raise ConfigError(f"burst ({t0},{t1}) outside [0,{t})")
        return bands, bursts


def synth_generate(config: SynthConfig, seed: int) -> CsiDataset:
    """Generate a labeled synthetic dataset per ``config``; bitwise seeded."""
    bands, bursts = config.resolve_regions()
    n = config.n_classes * config.per_class
    shape = (config.n_antennas, config.n_subcarriers, config.n_timesteps)
    amp = np.empty((n,) + shape, dtype=np.float32)
    pha = np.empty((n,) + shape, dtype=np.float32)
    labels = np.empty(n, dtype=np.int32)
    t_axis = np.arange(config.n_timesteps, dtype=np.float64)
    s_axis = np.arange(config.n_subcarriers, dtype=np.float64)
    # Fixed, distinct antenna phase offsets; per-sample jitter stays in the
    # gains so the class template itself is inferable from sparse glimpses.
    ant_phase = np.linspace(0.0, np.pi / 2, config.n_antennas)
    i = 0
    for cls in range(config.n_classes):
        s0, s1 = bands[cls]
        t0, t1 = bursts[cls]
        rng = make_rng(seed, 103, cls)
        # Hann windows confine the activity to its rectangular region.
        win_s = np.zeros(config.n_subcarriers)
        win_s[s0:s1] = np.hanning(s1 - s0 + 2)[1:-1]
        win_t = np.zeros(config.n_timesteps)
        win_t[t0:t1] = np.hanning(t1 - t0 + 2)[1:-1]
        envelope = win_s[:, None] * win_t[None, :]
        carrier = 1.5 + 0.5 * cls  # cycles per burst, class specific and slow
        slope = 0.35 * (cls + 1)  # phase ramp across the band, class specific
        osc = np.exp(
            1j
            * (
                2.0 * np.pi * carrier * (t_axis[None, :] - t0) / max(t1 - t0, 1)
                + slope * (s_axis[:, None] - s0)
            )
        )
        template = (
            envelope
            * osc
            * np.exp(1j * ant_phase)[:, None, None]
        )
        for _ in range(config.per_class):
            noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            h = config.background_mean + config.background_sigma * noise
            a = rng.uniform(*config.activity_amp)
            ant_gain = rng.uniform(0.9, 1.1, size=config.n_antennas)
            h = h + a * ant_gain[:, None, None] * template
            amp[i], pha[i] = np.abs(h).astype(np.float32), np.angle(h).astype(np.float32)
            labels[i] = cls
            i += 1
    manifest = DatasetManifest(
        n_samples=n,
        n_antennas=config.n_antennas,
        n_subcarriers=config.n_subcarriers,
        n_timesteps=config.n_timesteps,
        n_classes=config.n_classes,
        extra={
            "generator": "synthetic",
            "activity_bands": [list(b) for b in bands],
            "activity_bursts": [list(b) for b in bursts],
            "background_sigma": config.background_sigma,
        },
    )
    return CsiDataset(amplitude=amp, phase=pha, labels=labels, manifest=manifest)


def activity_region_mask(manifest: DatasetManifest, cls: int) -> np.ndarray:
    """Boolean (S, T) mask of the injected activity region for a class."""
    s0, s1 = manifest.extra["activity_bands"][cls]
    t0, t1 = manifest.extra["activity_bursts"][cls]
    mask = np.zeros((manifest.n_subcarriers, manifest.n_timesteps), dtype=bool)
    mask[s0:s1, t0:t1] = True
    return mask


# ---- on-disk format ------------------------------------------------------------


def write_dataset(dataset: CsiDataset, path):
    """Pack to a single file: manifest + interleaved (amp, phase) per sample."""
    n = len(dataset)
    payload = np.empty(
        (
            n,
            2,
            dataset.manifest.n_antennas,
            dataset.manifest.n_subcarriers,
            dataset.manifest.n_timesteps,
        ),
        dtype=np.float32,
    )
    payload[:, 0] = dataset.amplitude
    payload[:, 1] = dataset.phase
    write_record(
        path,
        DATASET_MAGIC,
        DATASET_VERSION,
        meta={"manifest": dataset.manifest.to_json()},
        arrays={"payload": payload, "labels": dataset.labels.astype(np.int32)},
    )


def read_dataset(path) -> CsiDataset:
    """Read a packed dataset file, or a directory of per-sample files."""
    path = Path(path)
    if path.is_dir():
        parts = [read_dataset(p) for p in sorted(path.iterdir()) if p.suffix == ".csid"]
        if not parts:
            raise ConfigError(f"no .csid files under {path}")
        first = parts[0].manifest
        for part in parts[1:]:
            got = part.manifest
            if (got.n_antennas, got.n_subcarriers, got.n_timesteps, got.n_classes) != (
                first.n_antennas,
                first.n_subcarriers,
                first.n_timesteps,
                first.n_classes,
            ):
                raise ShapeMismatchError("per-sample files disagree on shapes")
        manifest = replace(first, n_samples=sum(len(p) for p in parts))
        return CsiDataset(
            amplitude=np.concatenate([p.amplitude for p in parts]),
            phase=np.concatenate([p.phase for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            manifest=manifest,
        )
    meta, arrays = read_record(path, DATASET_MAGIC, DATASET_VERSION)
    manifest = DatasetManifest.from_json(meta["manifest"])
    payload = arrays["payload"]
    want = (
        manifest.n_samples,
        2,
        manifest.n_antennas,
        manifest.n_subcarriers,
        manifest.n_timesteps,
    )
    if payload.shape != want:
        raise ShapeMismatchError(f"payload shape {payload.shape} != manifest-implied {want}")
    return CsiDataset(
        amplitude=payload[:, 0].copy(),
        phase=payload[:, 1].copy(),
        labels=arrays["labels"],
        manifest=manifest,
    )
