"""Synthetic compound-fault vibration generator.

Produces 4-second acceleration segments at 25.6 kHz for three operating
condition subsets (sinusoidal / triangular / constant rpm) and all
combinations of four fault types. Fault signatures are rendered as
harmonic lines and modulated ball-pass-frequency trains so that every
class stays separable inside the 20-520 Hz analysis band.

A domain is written to disk as a `manifest.json` plus a flat
`segments.f32` file of concatenated little-endian float32 records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Literal, NamedTuple, Sequence

import numpy as np

from .labels import CompoundLabel, all_compound_labels, single_fault_labels

FS_HZ = 25600
SEGMENT_SECONDS = 4
SEGMENT_SAMPLES = FS_HZ * SEGMENT_SECONDS

# Amplitude per severity index: 2-level faults jump straight to 1.0,
# 3-level faults step through half amplitude.
AMP_2LEVEL = (0.0, 1.0)
AMP_3LEVEL = (0.0, 0.5, 1.0)

N_BPF_HARMONICS = 5


@dataclass(frozen=True)
class BearingGeometry:
    ball_diameter_mm: float = 7.90
    pitch_diameter_mm: float = 38.5
    contact_angle_deg: float = 0.0
    n_balls: int = 9

    def __post_init__(self):
        if not self.ball_diameter_mm < self.pitch_diameter_mm:
            raise ValueError("ball diameter must be smaller than pitch diameter")
        if self.n_balls < 1:
            raise ValueError("need at least one ball")
        if not 0 <= self.contact_angle_deg < 90:
            raise ValueError("contact angle must lie in [0, 90) degrees")


DEFAULT_GEOMETRY = BearingGeometry()

Pattern = Literal["sinusoidal", "triangular", "constant"]


@dataclass(frozen=True)
class SubsetProfile:
    """Operating condition of one data subset (= one domain)."""

    pattern: Pattern
    base_rpm: float = 3000.0
    modulation_period_s: float = 0.0
    modulation_depth: float = 0.10
    constant_levels: tuple[float, ...] = ()
    domain_gain: float = 1.0
    noise_sigma: float = 0.3
    gain_jitter: float = 0.0

    def __post_init__(self):
        if self.pattern not in ("sinusoidal", "triangular", "constant"):
            raise ValueError(f"unknown rpm pattern {self.pattern!r}")
        if self.pattern == "constant":
            if not self.constant_levels:
                raise ValueError("constant pattern needs at least one rpm level")
            if any(level <= 0 for level in self.constant_levels):
                raise ValueError("rpm levels must be positive")
        else:
            if self.base_rpm <= 0:
                raise ValueError("base_rpm must be positive")
            if self.modulation_period_s <= 0:
                raise ValueError("modulation period must be positive")

    @property
    def n_levels(self) -> int:
        return len(self.constant_levels) if self.pattern == "constant" else 1


DEFAULT_PROFILES = {
    "A": SubsetProfile(pattern="sinusoidal", base_rpm=3000.0,
                       modulation_period_s=10.0, modulation_depth=0.10,
                       domain_gain=1.0, noise_sigma=0.3, gain_jitter=0.2),
    "B": SubsetProfile(pattern="triangular", base_rpm=4000.0,
                       modulation_period_s=5.0, modulation_depth=0.10,
                       domain_gain=1.5, noise_sigma=0.3),
    "C": SubsetProfile(pattern="constant",
                       constant_levels=(1800.0, 2100.0, 2400.0, 2700.0, 3000.0),
                       domain_gain=0.7, noise_sigma=0.3),
}


@dataclass
class WaveSegment:
    samples: np.ndarray  # float32, SEGMENT_SAMPLES long
    fs_hz: int
    label: CompoundLabel
    subset: str = ""
    labeled: bool = True

    def __post_init__(self):
        if self.samples.shape != (SEGMENT_SAMPLES,):
            raise ValueError(f"expected {SEGMENT_SAMPLES} samples, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("segment contains non-finite samples")


class CharacteristicFrequencies(NamedTuple):
    bpfo_hz: float
    bpfi_hz: float


def characteristic_frequencies(geom: BearingGeometry,
                               shaft_hz: float) -> CharacteristicFrequencies:
    """Ball pass frequencies of the outer and inner race at a given shaft speed."""
    if shaft_hz <= 0:
        raise ValueError("shaft frequency must be positive")
    ratio = (geom.ball_diameter_mm / geom.pitch_diameter_mm
             * np.cos(np.deg2rad(geom.contact_angle_deg)))
    half = geom.n_balls / 2.0
    return CharacteristicFrequencies(bpfo_hz=half * shaft_hz * (1.0 - ratio),
                                     bpfi_hz=half * shaft_hz * (1.0 + ratio))


def rpm_profile(profile: SubsetProfile, t, level_index: int = 0):
    """Instantaneous rpm at time(s) t (scalar or array)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("time must be nonnegative")
    if profile.pattern == "sinusoidal":
        mod = np.sin(2.0 * np.pi * t / profile.modulation_period_s)
        return profile.base_rpm * (1.0 + profile.modulation_depth * mod)
    if profile.pattern == "triangular":
        u = t / profile.modulation_period_s
        mod = 4.0 * np.abs(np.mod(u - 0.25, 1.0) - 0.5) - 1.0
        return profile.base_rpm * (1.0 + profile.modulation_depth * mod)
    if not 0 <= level_index < len(profile.constant_levels):
        raise ValueError(f"level index {level_index} outside profile levels")
    return np.broadcast_to(np.float64(profile.constant_levels[level_index]), t.shape).copy()


def _fault_amplitudes(label: CompoundLabel) -> tuple[float, float, float, float]:
    return (AMP_2LEVEL[label.irf], AMP_2LEVEL[label.orf],
            AMP_3LEVEL[label.mis], AMP_3LEVEL[label.unb])


def synthesize_segment(label: CompoundLabel, profile: SubsetProfile,
                       geom: BearingGeometry = DEFAULT_GEOMETRY,
                       seed: int = 0, level_index: int = 0,
                       gear_ratio: float = 1.0) -> WaveSegment:
    """Render one 4-second segment for a given fault combination.

    Deterministic in (label, profile, geom, seed, level_index). The
    per-segment RNG drives the segment's position inside the rpm
    modulation cycle, the component phases, the torque gain jitter and
    the additive noise.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(SEGMENT_SAMPLES, dtype=np.float64) / FS_HZ

    if profile.pattern == "constant":
        t0 = 0.0
    else:
        t0 = rng.uniform(0.0, profile.modulation_period_s)
    phase_shaft, phase_bpfi, phase_bpfo = rng.uniform(0.0, 2.0 * np.pi, size=3)
    gain = profile.domain_gain
    if profile.gain_jitter > 0:
        gain *= 1.0 + profile.gain_jitter * rng.uniform(-1.0, 1.0)

    shaft_hz = rpm_profile(profile, t0 + t, level_index) / (60.0 * gear_ratio)
    # Cumulative phase of the shaft; BPF phases scale by their frequency ratios.
    base = 2.0 * np.pi * np.cumsum(shaft_hz) / FS_HZ
    ratios = characteristic_frequencies(geom, 1.0)
    theta = phase_shaft + base
    theta_i = phase_bpfi + ratios.bpfi_hz * base
    theta_o = phase_bpfo + ratios.bpfo_hz * base

    a_irf, a_orf, a_mis, a_unb = _fault_amplitudes(label)
    wave = np.zeros(SEGMENT_SAMPLES)
    if a_unb:
        wave += a_unb * np.sin(theta)
    if a_mis:
        wave += a_mis * (0.5 * np.sin(theta) + np.sin(2.0 * theta))
    if a_irf:
        train = sum(np.sin(h * theta_i) / h for h in range(1, N_BPF_HARMONICS + 1))
        wave += a_irf * (1.0 + np.cos(theta)) * train
    if a_orf:
        train = sum(np.sin(h * theta_o) / h for h in range(1, N_BPF_HARMONICS + 1))
        rotor_fault = label.mis > 0 or label.unb > 0
        modulation = 1.0 + (0.3 * np.cos(theta) if rotor_fault else 0.0)
        wave += a_orf * modulation * train

    wave *= gain
    if profile.noise_sigma > 0:
        wave += rng.normal(0.0, profile.noise_sigma, SEGMENT_SAMPLES)
    return WaveSegment(samples=wave.astype(np.float32), fs_hz=FS_HZ, label=label)


ClassFilter = Literal["all36", "normal_plus_single7"]


def class_list(class_filter: ClassFilter) -> list[CompoundLabel]:
    if class_filter == "all36":
        return all_compound_labels()
    if class_filter == "normal_plus_single7":
        return single_fault_labels()
    raise ValueError(f"unknown class filter {class_filter!r}")


@dataclass(frozen=True)
class SegmentPlan:
    label: CompoundLabel
    seed: int
    level_index: int


def plan_domain(class_filter: ClassFilter, segments_per_class: int,
                seed: int, n_levels: int = 1) -> list[SegmentPlan]:
    """Per-segment recipe for a domain.

    Per-segment seeds come from the splittable scheme seed XOR index.
    Constant-rpm subsets cycle through their levels so counts per level
    stay balanced.
    """
    if segments_per_class < 1:
        raise ValueError("segments_per_class must be >= 1")
    plans = []
    index = 0
    for label in class_list(class_filter):
        for k in range(segments_per_class):
            plans.append(SegmentPlan(label=label, seed=seed ^ index,
                                     level_index=k % n_levels))
            index += 1
    return plans


@dataclass
class DomainDataset:
    subset: str
    profile: SubsetProfile
    class_filter: ClassFilter
    waves: np.ndarray        # (N, SEGMENT_SAMPLES) float32
    labels: np.ndarray       # (N, 4) int64 severity digits
    joint: np.ndarray        # (N,) int64 joint class
    labeled: np.ndarray      # (N,) bool
    seeds: np.ndarray        # (N,) int64
    levels: np.ndarray       # (N,) int64

    def __len__(self) -> int:
        return len(self.joint)

    @property
    def classes(self) -> list[int]:
        return [lab.joint for lab in class_list(self.class_filter)]


def iter_segments(profile: SubsetProfile, plans: Sequence[SegmentPlan],
                  geom: BearingGeometry = DEFAULT_GEOMETRY,
                  gear_ratio: float = 1.0) -> Iterator[WaveSegment]:
    for plan in plans:
        yield synthesize_segment(plan.label, profile, geom, plan.seed,
                                 plan.level_index, gear_ratio)


def build_domain(profile: SubsetProfile, segments_per_class: int,
                 class_filter: ClassFilter = "all36", seed: int = 0,
                 subset: str = "", geom: BearingGeometry = DEFAULT_GEOMETRY,
                 gear_ratio: float = 1.0) -> DomainDataset:
    """Generate a whole domain in memory (class-balanced by construction)."""
    plans = plan_domain(class_filter, segments_per_class, seed, profile.n_levels)
    waves = np.empty((len(plans), SEGMENT_SAMPLES), dtype=np.float32)
    for i, seg in enumerate(iter_segments(profile, plans, geom, gear_ratio)):
        waves[i] = seg.samples
    return DomainDataset(
        subset=subset, profile=profile, class_filter=class_filter, waves=waves,
        labels=np.array([p.label.digits() for p in plans], dtype=np.int64),
        joint=np.array([p.label.joint for p in plans], dtype=np.int64),
        labeled=np.ones(len(plans), dtype=bool),
        seeds=np.array([p.seed for p in plans], dtype=np.int64),
        levels=np.array([p.level_index for p in plans], dtype=np.int64),
    )


MANIFEST_NAME = "manifest.json"
SEGMENTS_NAME = "segments.f32"
_BYTES_PER_SEGMENT = SEGMENT_SAMPLES * 4


def write_domain(out_dir: Path, profile: SubsetProfile, segments_per_class: int,
                 class_filter: ClassFilter = "all36", seed: int = 0,
                 subset: str = "", geom: BearingGeometry = DEFAULT_GEOMETRY,
                 gear_ratio: float = 1.0) -> Path:
    """Stream a domain to disk: manifest.json + raw float32 segment records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = plan_domain(class_filter, segments_per_class, seed, profile.n_levels)
    records = []
    with open(out_dir / SEGMENTS_NAME, "wb") as f:
        for i, seg in enumerate(iter_segments(profile, plans, geom, gear_ratio)):
            f.write(seg.samples.astype("<f4").tobytes())
            records.append({
                "offset_bytes": i * _BYTES_PER_SEGMENT,
                "label": list(plans[i].label.digits()),
                "joint": plans[i].label.joint,
                "labeled": True,
                "seed": plans[i].seed,
                "level_index": plans[i].level_index,
            })
    manifest = {
        "format_version": 1,
        "subset": subset,
        "fs_hz": FS_HZ,
        "segment_samples": SEGMENT_SAMPLES,
        "class_filter": class_filter,
        "segments_per_class": segments_per_class,
        "seed": seed,
        "gear_ratio": gear_ratio,
        "profile": asdict(profile),
        "geometry": asdict(geom),
        "class_list": [lab.joint for lab in class_list(class_filter)],
        "segments": records,
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out_dir


def read_manifest(domain_dir: Path) -> dict:
    with open(Path(domain_dir) / MANIFEST_NAME) as f:
        return json.load(f)


def profile_from_dict(d: dict) -> SubsetProfile:
    d = dict(d)
    if d.get("constant_levels"):
        d["constant_levels"] = tuple(d["constant_levels"])
    else:
        d["constant_levels"] = ()
    return SubsetProfile(**d)


def load_domain(domain_dir: Path) -> DomainDataset:
    """Load a domain written by write_domain (waveforms memory-mapped)."""
    domain_dir = Path(domain_dir)
    man = read_manifest(domain_dir)
    n = len(man["segments"])
    waves = np.memmap(domain_dir / SEGMENTS_NAME, dtype="<f4", mode="r",
                      shape=(n, man["segment_samples"]))
    segs = man["segments"]
    return DomainDataset(
        subset=man["subset"],
        profile=profile_from_dict(man["profile"]),
        class_filter=man["class_filter"],
        waves=waves,
        labels=np.array([s["label"] for s in segs], dtype=np.int64),
        joint=np.array([s["joint"] for s in segs], dtype=np.int64),
        labeled=np.array([s["labeled"] for s in segs], dtype=bool),
        seeds=np.array([s["seed"] for s in segs], dtype=np.int64),
        levels=np.array([s["level_index"] for s in segs], dtype=np.int64),
    )
