"""End-to-end pipeline orchestration: configs, stage caching, commands.

Stages are content-addressed: the feature cache directory is keyed by a
hash of everything that influences extraction (manifest content,
extractor setup, decomposition flag), and the CV report embeds the hash
of the full semantic config, so identical configs reproduce identical
artifacts byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decompose import (
    DEFAULT_DESCRIPTOR,
    VIEWS,
    ExtractorDescriptor,
    View,
    adapt_stack,
    decompose8,
    extract_view_slices,
)
from .errors import ConfigError, DataError
from .evaluate import (
    BRANCH_NAMES,
    BRANCHES,
    HOLDOUT_ACCURACY,
    CVSettings,
    run_cv,
)
from .extraction import FeatureMapSet, StubExtractor, import_external_features, maxpool8
from .net import TrainConfig
from .pooling import (
    CHANNEL_KEEP_DIVISOR,
    PER_SLICE,
    SLICE_KEEP_DIVISOR,
)
from .tensor import read_array, write_array
from .volumes import (
    METRICS,
    EffectRegion,
    Metric,
    PhantomSpec,
    generate_phantom_cohort,
    load_manifest,
    load_volume,
    pad_to_even,
)

CACHE_ENV = "VOX2P1D_CACHE"

# Published total for the reference 9-branch architecture; the counting
# convention behind it is unspecified, so it is reported for context only.
REFERENCE_TOTAL_PARAMS = 115_259


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    out_dir: Path
    seed: int = 0
    n_folds: int = 5
    n_repeats: int = 10
    stub_seed: int | None = 0
    import_dir: Path | None = None
    descriptor: ExtractorDescriptor = DEFAULT_DESCRIPTOR
    train: TrainConfig = TrainConfig()
    channel_selection: str = PER_SLICE
    fusion: str = HOLDOUT_ACCURACY
    keep_slices: int | None = None
    keep_channels: int | None = None
    skip_decomposition: bool = False
    skip_global_pooling: bool = False
    skip_fusion: bool = False
    skip_net1d: bool = False
    jobs: int = 1

    def __post_init__(self):
        if (self.stub_seed is None) == (self.import_dir is None):
            raise ConfigError(
                "exactly one extractor source required: stub seed or import dir"
            )
        if self.import_dir is not None and self.skip_decomposition:
            raise ConfigError(
                "skip_decomposition is incompatible with imported per-offset maps"
            )


def load_config(path: str | Path) -> PipelineConfig:
    """Parse a pipeline config JSON file (field names match the schema)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        extractor = doc.get("extractor", {"stub": {"seed": 0}})
        stub_seed = None
        import_dir = None
        descriptor = DEFAULT_DESCRIPTOR
        if "stub" in extractor:
            stub_seed = int(extractor["stub"].get("seed", 0))
            if "descriptor" in extractor["stub"]:
                d = extractor["stub"]["descriptor"]
                descriptor = ExtractorDescriptor(
                    input_height=int(d["input_height"]),
                    input_width=int(d["input_width"]),
                    channel_mode=d.get("channel_mode", "replicate3"),
                    intensity_range=tuple(d.get("intensity_range", (-1.0, 1.0))),
                    out_dims=tuple(d.get("out_dims", DEFAULT_DESCRIPTOR.out_dims)),
                )
        if "import_dir" in extractor:
            import_dir = (path.parent / extractor["import_dir"]).resolve()
        train_doc = doc.get("train", {})
        ablation = doc.get("ablation", {})
        return PipelineConfig(
            manifest=(path.parent / doc["manifest"]).resolve(),
            out_dir=(path.parent / doc.get("out_dir", ".")).resolve(),
            seed=int(doc.get("seed", 0)),
            n_folds=int(doc.get("n_folds", 5)),
            n_repeats=int(doc.get("n_repeats", 10)),
            stub_seed=stub_seed,
            import_dir=import_dir,
            descriptor=descriptor,
            train=TrainConfig(
                learning_rate=float(train_doc.get("learning_rate", 0.01)),
                batch_size=int(train_doc.get("batch_size", 8)),
                epochs=int(train_doc.get("epochs", 100)),
            ),
            channel_selection=doc.get("channel_selection", PER_SLICE),
            fusion=doc.get("fusion", HOLDOUT_ACCURACY),
            keep_slices=doc.get("keep_slices"),
            keep_channels=doc.get("keep_channels"),
            skip_decomposition=bool(ablation.get("skip_decomposition", False)),
            skip_global_pooling=bool(ablation.get("skip_global_pooling", False)),
            skip_fusion=bool(ablation.get("skip_fusion", False)),
            skip_net1d=bool(ablation.get("skip_net1d", False)),
            jobs=int(doc.get("jobs", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_doc(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _descriptor_doc(d: ExtractorDescriptor) -> dict:
    return {
        "input_height": d.input_height,
        "input_width": d.input_width,
        "channel_mode": d.channel_mode,
        "intensity_range": list(d.intensity_range),
        "out_dims": list(d.out_dims),
    }


def extract_stage_hash(config: PipelineConfig) -> str:
    """Content hash of everything extraction depends on.

    Labels are deliberately excluded (extraction never reads them), so
    cohorts that differ only in label assignment share a feature cache.
    """
    manifest = load_manifest(config.manifest)
    volumes = [
        [s.subject_id]
        + [_sha256_file(s.volume_paths[m]) for m in METRICS]
        for s in sorted(manifest.subjects, key=lambda s: s.subject_id)
    ]
    doc = {
        "volumes": volumes,
        "stub_seed": config.stub_seed,
        "import_dir": str(config.import_dir) if config.import_dir else None,
        "descriptor": _descriptor_doc(config.descriptor),
        "skip_decomposition": config.skip_decomposition,
    }
    return _hash_doc(doc)


def config_hash(config: PipelineConfig) -> str:
    doc = {
        "extract": extract_stage_hash(config),
        "manifest_sha256": _sha256_file(config.manifest),
        "seed": config.seed,
        "n_folds": config.n_folds,
        "n_repeats": config.n_repeats,
        "train": {
            "learning_rate": config.train.learning_rate,
            "batch_size": config.train.batch_size,
            "epochs": config.train.epochs,
        },
        "channel_selection": config.channel_selection,
        "fusion": config.fusion,
        "keep_slices": config.keep_slices,
        "keep_channels": config.keep_channels,
        "skip_global_pooling": config.skip_global_pooling,
        "skip_fusion": config.skip_fusion,
        "skip_net1d": config.skip_net1d,
    }
    return _hash_doc(doc)


def cache_root(config: PipelineConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else config.out_dir / "cache"


class FileFeatures:
    """Feature provider reading cached max-pooled maps, with an in-process
    memory cache (dropped on pickling so workers start fresh)."""

    CACHE_BYTES = 1 << 30

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._cache: dict[tuple, np.ndarray] = {}
        self._cached_bytes = 0

    def __call__(self, sid: str, metric: Metric, view: View) -> np.ndarray:
        key = (sid, metric.value, view.value)
        arr = self._cache.get(key)
        if arr is None:
            arr = read_array(self.directory / f"{sid}_{metric.value}_{view.value}.v21t")
            if self._cached_bytes + arr.nbytes <= self.CACHE_BYTES:
                self._cache[key] = arr
                self._cached_bytes += arr.nbytes
        return arr

    def __getstate__(self):
        return {"directory": self.directory}

    def __setstate__(self, state):
        self.directory = state["directory"]
        self._cache = {}
        self._cached_bytes = 0


_STUB_MEMO: dict[tuple, StubExtractor] = {}


def _stub_for(seed: int, descriptor: ExtractorDescriptor) -> StubExtractor:
    key = (seed, descriptor)
    stub = _STUB_MEMO.get(key)
    if stub is None:
        stub = StubExtractor(seed, descriptor)
        _STUB_MEMO[key] = stub
    return stub


def _extract_subject(args) -> list[str]:
    (sid, volume_paths, stub_seed, descriptor, skip_decomposition, feat_dir) = args
    stub = _stub_for(stub_seed, descriptor)
    written = []
    for metric in METRICS:
        vol = pad_to_even(load_volume(volume_paths[metric], metric, sid))
        if skip_decomposition:
            per_view = {
                view: [extract_view_slices(vol.voxels, view)] for view in VIEWS
            }
        else:
            subs = decompose8(vol)
            per_view = {
                view: [extract_view_slices(sv, view) for sv in subs.subvolumes]
                for view in VIEWS
            }
        for view, stacks in per_view.items():
            maps = []
            for k, stack in enumerate(stacks):
                imgs = adapt_stack(stack.slices, descriptor)
                maps.append(
                    FeatureMapSet(view=view, k=k, maps=stub.extract_stack(imgs))
                )
            pooled = maps[0].maps if len(maps) == 1 else maxpool8(maps).maps
            name = f"{sid}_{metric.value}_{view.value}.v21t"
            write_array(pooled, Path(feat_dir) / name)
            written.append(name)
    return written


def extract_features(config: PipelineConfig) -> Path:
    """Ensure the max-pooled feature cache for ``config``; returns its dir.

    A completed cache (marker present, all files present) is left
    untouched.
    """
    manifest = load_manifest(config.manifest)
    stage_hash = extract_stage_hash(config)
    feat_dir = cache_root(config) / f"features-{stage_hash[:16]}"
    marker = feat_dir / "_complete.json"
    expected = [
        f"{s.subject_id}_{m.value}_{v.value}.v21t"
        for s in manifest.subjects
        for m in METRICS
        for v in VIEWS
    ]
    if marker.exists():
        doc = json.loads(marker.read_text())
        if doc.get("stage_hash") == stage_hash and all(
            (feat_dir / f).exists() for f in expected
        ):
            return feat_dir
    feat_dir.mkdir(parents=True, exist_ok=True)

    if config.import_dir is not None:
        imported = import_external_features(config.import_dir, manifest)
        for (sid, metric, view), sets in imported.items():
            pooled = maxpool8(sets).maps
            write_array(pooled, feat_dir / f"{sid}_{metric.value}_{view.value}.v21t")
    else:
        tasks = [
            (
                s.subject_id,
                s.volume_paths,
                config.stub_seed,
                config.descriptor,
                config.skip_decomposition,
                str(feat_dir),
            )
            for s in manifest.subjects
        ]
        if config.jobs > 1:
            with ProcessPoolExecutor(max_workers=config.jobs) as pool:
                list(pool.map(_extract_subject, tasks, chunksize=1))
        else:
            for t in tasks:
                _extract_subject(t)

    marker_doc = {"stage": "extract", "stage_hash": stage_hash, "files": sorted(expected)}
    marker.write_text(json.dumps(marker_doc, indent=2, sort_keys=True) + "\n")
    return feat_dir


def branch_dimensions(config: PipelineConfig, feat_dir: Path) -> dict[str, dict]:
    """Input dims and parameter count per branch, from the cached features."""
    from .net import parameter_count_for

    manifest = load_manifest(config.manifest)
    sid = manifest.subjects[0].subject_id
    out = {}
    for (metric, view), name in zip(BRANCHES, BRANCH_NAMES):
        n, w, h, ch = read_array(
            feat_dir / f"{sid}_{metric.value}_{view.value}.v21t"
        ).shape
        if config.skip_global_pooling:
            j, k = n, ch
        else:
            j = config.keep_slices or n // SLICE_KEEP_DIVISOR
            k = config.keep_channels or ch // CHANNEL_KEEP_DIVISOR
        if config.skip_net1d:
            params = j * w * h * k * 2 + 2
        else:
            params = parameter_count_for(j, k, w, h)
        out[name] = {"n_slices_in": n, "channels_in": ch, "j": j, "k": k,
                     "width": w, "height": h, "parameters": params}
    return out


def cross_validate(config: PipelineConfig) -> tuple[dict, Path, Path]:
    """Run the full CV protocol; writes report JSON + text summary."""
    manifest = load_manifest(config.manifest)
    feat_dir = extract_features(config)
    settings = CVSettings(
        n_folds=config.n_folds,
        n_repeats=config.n_repeats,
        base_seed=config.seed,
        train=config.train,
        fusion_scheme=config.fusion,
        channel_selection=config.channel_selection,
        keep_slices=config.keep_slices,
        keep_channels=config.keep_channels,
        skip_global_pooling=config.skip_global_pooling,
        skip_net1d=config.skip_net1d,
        skip_fusion=config.skip_fusion,
        jobs=config.jobs,
    )
    report = run_cv(manifest, FileFeatures(feat_dir), settings)
    dims = branch_dimensions(config, feat_dir)
    report["config_hash"] = config_hash(config)
    report["branch_dimensions"] = dims
    report["parameter_counts"] = {
        **{nm: dims[nm]["parameters"] for nm in BRANCH_NAMES},
        "total": sum(dims[nm]["parameters"] for nm in BRANCH_NAMES),
    }

    config.out_dir.mkdir(parents=True, exist_ok=True)
    report_path = config.out_dir / "cv_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    summary = summary_text(report)
    summary_path = config.out_dir / "summary.txt"
    summary_path.write_text(summary)
    save_fold_selections(config, manifest, feat_dir, settings)
    return report, report_path, summary_path


def save_fold_selections(config, manifest, feat_dir, settings) -> Path:
    """Audit dump: the learned selection per (fold, metric, view) of the
    first repeat, as JSON documents under <out>/selections/."""
    from .evaluate import make_folds
    from .pooling import (
        TrainingFeatureCorpus,
        identity_selection,
        learn_selection,
        save_selection,
    )
    from .rng import splitmix64

    sel_dir = config.out_dir / "selections"
    sel_dir.mkdir(parents=True, exist_ok=True)
    provider = FileFeatures(feat_dir)
    folds = make_folds(manifest, settings.n_folds, splitmix64(settings.base_seed))
    for f, fold_ids in enumerate(folds):
        train_ids = sorted(
            s.subject_id for s in manifest.subjects if s.subject_id not in set(fold_ids)
        )
        for (metric, view), name in zip(BRANCHES, BRANCH_NAMES):
            feats = [provider(sid, metric, view) for sid in train_ids]
            if settings.skip_global_pooling:
                n, _, _, ch = feats[0].shape
                sel = identity_selection(view, n, ch)
            else:
                corpus = TrainingFeatureCorpus(view=view, features=tuple(feats))
                sel = learn_selection(
                    corpus,
                    mode=settings.channel_selection,
                    keep_slices=settings.keep_slices,
                    keep_channels=settings.keep_channels,
                )
            save_selection(sel, sel_dir / f"repeat0_fold{f}_{name}.json")
    return sel_dir


def _fmt(stats: dict) -> str:
    if stats["mean"] is None:
        return "      n/a     "
    return f"{stats['mean']:.4f}±{stats['std']:.4f}"


def summary_text(report: dict) -> str:
    """Plain-text result table: one row per branch plus the fused row."""
    lines = [
        f"config {report.get('config_hash', 'n/a')}",
        f"base seed {report['base_seed']}  "
        f"{report['n_repeats']} repeats x {report['n_folds']} folds",
        "",
        f"{'branch':<14}{'Acc':>16}{'Sp':>16}{'Se':>16}{'ROC-AUC':>16}",
    ]
    order = ("accuracy", "specificity", "sensitivity", "roc_auc")
    for nm in report["branches"]:
        agg = report["aggregate"]["branch"][nm]
        lines.append(
            f"{nm:<14}" + "".join(f"{_fmt(agg[f]):>16}" for f in order)
        )
    fused = report["aggregate"]["fused"]
    lines.append(
        f"{'fused':<14}" + "".join(f"{_fmt(fused[f]):>16}" for f in order)
    )
    if "parameter_counts" in report:
        lines.append("")
        lines.append("trainable parameters per branch:")
        for nm in report["branches"]:
            lines.append(f"  {nm:<14}{report['parameter_counts'][nm]:>10,}")
        total = report["parameter_counts"]["total"]
        lines.append(f"  {'total':<14}{total:>10,}")
        lines.append(
            f"  reference architecture total: {REFERENCE_TOTAL_PARAMS:,} "
            "(not comparable: counting convention unspecified)"
        )
    return "\n".join(lines) + "\n"


def report_text(report_path: str | Path) -> str:
    """Human-readable dump of a stored CV report (per-cell + aggregate)."""
    report_path = Path(report_path)
    if not report_path.exists():
        raise DataError(f"no CV report at {report_path}")
    report = json.loads(report_path.read_text())
    lines = [summary_text(report), "per-cell fused accuracy:"]
    for cell in report["cells"]:
        fm = cell["fused_metrics"]
        auc = fm["roc_auc"]
        lines.append(
            f"  repeat {cell['repeat']:>2} fold {cell['fold']}: "
            f"acc {fm['accuracy']:.4f}"
            + (f"  auc {auc:.4f}" if auc is not None else "")
        )
    lines.append("")
    lines.append("repeat seeds: " + ", ".join(str(s) for s in report["repeat_seeds"]))
    return "\n".join(lines) + "\n"


def load_phantom_spec(path: str | Path) -> PhantomSpec:
    """Parse a phantom cohort spec JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read phantom spec {path}: {exc}") from exc
    try:
        regions = tuple(
            EffectRegion(
                center=tuple(int(c) for c in r["center"]),
                radius=float(r["radius"]),
                delta={Metric(k): float(v) for k, v in r["delta"].items()},
            )
            for r in doc.get("effect_regions", ())
        )
        return PhantomSpec(
            n_per_class=int(doc["n_per_class"]),
            dims=tuple(int(d) for d in doc.get("dims", (121, 145, 121))),
            effect_regions=regions,
            noise_sigma=float(doc.get("noise_sigma", 0.05)),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed phantom spec {path}: {exc}") from exc


def synthesize(spec_path: str | Path, out_dir: str | Path) -> Path:
    """Generate a phantom cohort from a spec file; returns the manifest path.

    The manifest carries the sha256 of the spec file that produced it.
    """
    spec = load_phantom_spec(spec_path)
    manifest_path = generate_phantom_cohort(spec, out_dir)
    doc = json.loads(manifest_path.read_text())
    doc["config_hash"] = _sha256_file(Path(spec_path))
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest_path
