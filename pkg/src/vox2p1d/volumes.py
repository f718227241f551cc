"""Volume ingestion, cohort manifests, and synthetic phantom cohorts.

Real cohorts arrive as already-preprocessed tissue probability volumes
(one rank-3 V21T file per subject per metric) listed in a JSON manifest.
Phantom cohorts substitute for clinical data at desk scale: a smooth
per-metric baseline blob plus seeded Gaussian noise, with extra intensity
in configured effect regions for the positive class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import SplitMix64Stream, splitmix64
from .tensor import read_array, write_array

RANGE_TOL = 1e-6


class Metric(str, Enum):
    GM = "gm"
    WM = "wm"
    CSF = "csf"


class Label(str, Enum):
    SZ = "sz"  # positive class
    HC = "hc"


METRICS = (Metric.GM, Metric.WM, Metric.CSF)


@dataclass(frozen=True)
class BrainVolume:
    """One subject's probability map for one metric; values in [0, 1]."""

    subject_id: str
    metric: Metric
    voxels: np.ndarray  # rank-3 float32 (x, y, z)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class Subject:
    subject_id: str
    label: Label
    volume_paths: dict[Metric, Path]


@dataclass(frozen=True)
class DatasetManifest:
    subjects: tuple[Subject, ...]
    seed: int

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids in manifest")
        for s in self.subjects:
            missing = [m for m in METRICS if m not in s.volume_paths]
            if missing:
                raise DataError(
                    f"subject {s.subject_id} missing metric paths: {missing}"
                )

    def labels(self) -> dict[str, Label]:
        return {s.subject_id: s.label for s in self.subjects}


@dataclass(frozen=True)
class EffectRegion:
    """Spherical region that gets a per-metric intensity delta in SZ subjects."""

    center: tuple[int, int, int]
    radius: float
    delta: dict[Metric, float]


@dataclass(frozen=True)
class PhantomSpec:
    n_per_class: int
    dims: tuple[int, int, int] = (121, 145, 121)
    effect_regions: tuple[EffectRegion, ...] = ()
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"invalid dims {self.dims}")
        for r in self.effect_regions:
            if not all(0 <= c < d for c, d in zip(r.center, self.dims)):
                raise ConfigError(
                    f"effect region center {r.center} outside dims {self.dims}"
                )


def load_volume(path: str | Path, metric: Metric, subject_id: str = "") -> BrainVolume:
    """Load and validate a rank-3 probability volume.

    Values within RANGE_TOL of [0, 1] are clamped; values farther out
    are a data error.
    """
    arr = read_array(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected rank-3 volume, got rank {arr.ndim}")
    lo = float(arr.min())
    hi = float(arr.max())
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise DataError(
            f"{path}: voxel values [{lo}, {hi}] outside [0,1] beyond tolerance"
        )
    arr = np.clip(arr, 0.0, 1.0)
    return BrainVolume(subject_id=subject_id, metric=metric, voxels=arr)


def pad_to_even(v: BrainVolume) -> BrainVolume:
    """Zero-pad each odd dim by one voxel at the high end."""
    pads = [(0, d % 2) for d in v.voxels.shape]
    if not any(p[1] for p in pads):
        return v
    vox = np.pad(v.voxels, pads, mode="constant")
    return BrainVolume(subject_id=v.subject_id, metric=v.metric, voxels=vox)


# Per-metric baseline blob: amplitude and radial falloff rate of a smooth
# ellipsoidal bump centered in the grid. Identical for every subject;
# between-subject variability comes only from noise and effect regions.
_BASELINE = {Metric.GM: (0.70, 3.0), Metric.WM: (0.60, 5.0), Metric.CSF: (0.45, 8.0)}


def _baseline_blob(dims: tuple[int, int, int], metric: Metric) -> np.ndarray:
    amp, rate = _BASELINE[metric]
    axes = [
        ((np.arange(d, dtype=np.float64) - (d - 1) / 2.0) / max((d - 1) / 2.0, 1.0)) ** 2
        for d in dims
    ]
    r2 = (
        axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    )
    return amp * np.exp(-rate * r2)


def _region_mask(dims: tuple[int, int, int], region: EffectRegion) -> np.ndarray:
    grids = np.ogrid[0 : dims[0], 0 : dims[1], 0 : dims[2]]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, region.center))
    return d2 <= region.radius**2


def phantom_volume(
    spec: PhantomSpec, subject_index: int, metric: Metric, positive: bool
) -> np.ndarray:
    """Deterministic voxel grid for one (subject, metric); float32 in [0,1]."""
    subject_seed = splitmix64(spec.seed ^ subject_index)
    metric_index = METRICS.index(metric)
    vol = _baseline_blob(spec.dims, metric)
    if spec.noise_sigma > 0:
        stream = SplitMix64Stream(splitmix64(subject_seed ^ (metric_index + 1)))
        noise = stream.gaussians(vol.size).reshape(spec.dims)
        vol = vol + spec.noise_sigma * noise
    if positive:
        for region in spec.effect_regions:
            delta = region.delta.get(metric, 0.0)
            if delta:
                vol[_region_mask(spec.dims, region)] += delta
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def generate_phantom_cohort(spec: PhantomSpec, out_dir: str | Path) -> Path:
    """Write a full phantom cohort and its manifest; returns the manifest path.

    Byte-identical across reruns with the same spec: every volume is a
    pure function of (spec.seed, subject index, metric).
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    try:
        vol_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {vol_dir}: {exc}") from exc

    subjects = []
    order = [(Label.SZ, i) for i in range(spec.n_per_class)] + [
        (Label.HC, i) for i in range(spec.n_per_class)
    ]
    for subject_index, (label, i) in enumerate(order):
        sid = f"{label.value}{i:03d}"
        paths: dict[Metric, Path] = {}
        for metric in METRICS:
            vol = phantom_volume(spec, subject_index, metric, label is Label.SZ)
            path = vol_dir / f"{sid}_{metric.value}.v21t"
            write_array(vol, path)
            paths[metric] = path
        subjects.append(Subject(subject_id=sid, label=label, volume_paths=paths))

    manifest = DatasetManifest(subjects=tuple(subjects), seed=spec.seed)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


def permute_labels(
    manifest: DatasetManifest, seed: int, balanced: bool = True
) -> DatasetManifest:
    """Deterministically permute the label assignment across subjects.

    Volume paths stay put, so the permuted cohort shares feature caches
    with the original; used as a chance-level control. With
    ``balanced=True`` the permutation swaps the labels of half of each
    class (seeded choice), so exactly 50% of subjects keep their
    original label and no residual class signal survives by overlap; a
    plain seeded shuffle leaves a binomially distributed overlap.
    """
    if balanced:
        stream = SplitMix64Stream(splitmix64(seed ^ 0x5EED))
        by_label: dict[Label, list[int]] = {}
        for i, s in enumerate(manifest.subjects):
            by_label.setdefault(s.label, []).append(i)
        flipped: set[int] = set()
        for members in by_label.values():
            chosen = stream.shuffled(members)[: len(members) // 2]
            flipped.update(chosen)
        other = {Label.SZ: Label.HC, Label.HC: Label.SZ}
        labels = [
            other[s.label] if i in flipped else s.label
            for i, s in enumerate(manifest.subjects)
        ]
    else:
        stream = SplitMix64Stream(splitmix64(seed ^ 0x5EED))
        labels = stream.shuffled([s.label for s in manifest.subjects])
    return DatasetManifest(
        subjects=tuple(
            Subject(
                subject_id=s.subject_id,
                label=label,
                volume_paths=s.volume_paths,
            )
            for s, label in zip(manifest.subjects, labels)
        ),
        seed=manifest.seed,
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    doc = {
        "seed": manifest.seed,
        "subjects": [
            {
                "id": s.subject_id,
                "label": s.label.value,
                **{
                    m.value: _relative_to(s.volume_paths[m], path.parent)
                    for m in METRICS
                },
            }
            for s in manifest.subjects
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        subjects = tuple(
            Subject(
                subject_id=entry["id"],
                label=Label(entry["label"]),
                volume_paths={
                    m: (path.parent / entry[m.value]).resolve() for m in METRICS
                },
            )
            for entry in doc["subjects"]
        )
        return DatasetManifest(subjects=subjects, seed=int(doc["seed"]))
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def _relative_to(target: Path, base: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(target).resolve())
