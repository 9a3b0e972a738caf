"""Waveform to network-input spectrograms.

One 4-second segment becomes a (1, 1, 80, 48) dB magnitude spectrogram:
4096-point FFT, hop 2048, periodic Hann window, no padding. The first
48 of the 49 raw frames are kept and the band is cropped to FFT bins
4..83 (centers 25.0-518.75 Hz at the 6.25 Hz bin width), which is the
tightest 80-bin window inside 20-520 Hz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .siggen import FS_HZ, SEGMENT_SAMPLES, DomainDataset, WaveSegment

N_FFT = 4096
HOP = 2048
N_FREQ = 80
N_FRAMES = 48
FIRST_BIN = 4
BIN_HZ = FS_HZ / N_FFT  # 6.25
DB_EPS = 1e-8
DB_FLOOR = 20.0 * np.log10(DB_EPS)

FREQ_AXIS = (np.arange(FIRST_BIN, FIRST_BIN + N_FREQ) * BIN_HZ).astype(np.float64)
TIME_AXIS = ((np.arange(N_FRAMES) * HOP + N_FFT / 2) / FS_HZ).astype(np.float64)

# Periodic Hann: a bin-centered sinusoid leaks into adjacent bins only.
_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)


@dataclass
class SpectrogramTensor:
    """Batch of dB spectrograms with axis annotations, shape (B, 1, 80, 48)."""

    values: np.ndarray
    freq_axis: np.ndarray = None
    time_axis: np.ndarray = None

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1:] != (1, N_FREQ, N_FRAMES):
            raise ValueError(f"expected (B, 1, {N_FREQ}, {N_FRAMES}), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")
        if self.freq_axis is None:
            self.freq_axis = FREQ_AXIS.copy()
        if self.time_axis is None:
            self.time_axis = TIME_AXIS.copy()

    @property
    def batch(self) -> int:
        return self.values.shape[0]


def stft_db_array(samples: np.ndarray) -> np.ndarray:
    """Cropped dB magnitude STFT of one segment, shape (80, 48) float32."""
    if samples.shape != (SEGMENT_SAMPLES,):
        raise ValueError(f"expected {SEGMENT_SAMPLES} samples, got {samples.shape}")
    x = np.asarray(samples, dtype=np.float64)
    starts = np.arange(N_FRAMES) * HOP
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[starts] * _WINDOW
    spec = np.fft.rfft(frames, axis=1)
    mag = np.abs(spec[:, FIRST_BIN:FIRST_BIN + N_FREQ])
    db = 20.0 * np.log10(mag + DB_EPS)
    return db.T.astype(np.float32)  # (freq, time)


def stft_db(segment: WaveSegment) -> SpectrogramTensor:
    return SpectrogramTensor(values=stft_db_array(segment.samples)[None, None])


def batchify(items: list[SpectrogramTensor]) -> SpectrogramTensor:
    """Stack single-item spectrograms along the batch axis, order preserving."""
    if not items:
        raise ValueError("nothing to batch")
    shapes = {item.values.shape[1:] for item in items}
    if len(shapes) != 1:
        raise ValueError(f"mixed item shapes: {sorted(shapes)}")
    return SpectrogramTensor(values=np.concatenate([item.values for item in items], axis=0),
                             freq_axis=items[0].freq_axis.copy(),
                             time_axis=items[0].time_axis.copy())


def domain_spectrograms(dataset: DomainDataset) -> np.ndarray:
    """All segments of a domain as one (N, 1, 80, 48) float32 array."""
    out = np.empty((len(dataset), 1, N_FREQ, N_FRAMES), dtype=np.float32)
    for i in range(len(dataset)):
        out[i, 0] = stft_db_array(np.asarray(dataset.waves[i]))
    return out


SPEC_MANIFEST_NAME = "spectrograms.json"
SPEC_DATA_NAME = "spectrograms.f32"


def write_spectrogram_cache(cache_dir: Path, specs: np.ndarray) -> Path:
    """Persist spectrograms with the raw-float32 + JSON-manifest convention."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    specs = np.ascontiguousarray(specs, dtype="<f4")
    with open(cache_dir / SPEC_DATA_NAME, "wb") as f:
        f.write(specs.tobytes())
    manifest = {
        "format_version": 1,
        "shape": list(specs.shape),
        "dtype": "<f4",
        "freq_axis_hz": FREQ_AXIS.tolist(),
        "time_axis_s": TIME_AXIS.tolist(),
    }
    with open(cache_dir / SPEC_MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return cache_dir


def read_spectrogram_cache(cache_dir: Path) -> np.ndarray:
    cache_dir = Path(cache_dir)
    with open(cache_dir / SPEC_MANIFEST_NAME) as f:
        manifest = json.load(f)
    data = np.fromfile(cache_dir / SPEC_DATA_NAME, dtype="<f4")
    return data.reshape(manifest["shape"])
