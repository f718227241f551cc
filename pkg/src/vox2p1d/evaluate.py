"""Branch prediction fusion, classification metrics, and the CV harness.

One branch is a (metric, view) pipeline instance; nine branches are
fused per subject by weighted soft voting. Evaluation runs stratified
5-fold cross-validation repeated with independent split seeds, learning
selections and training networks on each training fold only.
"""

from __future__ import annotations

import dataclasses
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decompose import VIEWS, View
from .errors import ConfigError, DataError
from .extraction import MaxPooledFeatures
from .net import (
    LinearHead,
    TrainConfig,
    predict_positive,
    train_branch,
    train_branch_group,
)
from .pooling import (
    PER_SLICE,
    SelectionIndices,
    TrainingFeatureCorpus,
    apply_selection,
    identity_selection,
    learn_selection,
)
from .rng import SplitMix64Stream, derive_seed, splitmix64
from .volumes import METRICS, DatasetManifest, Label, Metric

UNIFORM = "uniform"
HOLDOUT_ACCURACY = "holdout_accuracy"

BRANCHES = tuple((m, v) for m in METRICS for v in VIEWS)


def branch_name(metric: Metric, view: View) -> str:
    return f"{metric.value}_{view.value}"


BRANCH_NAMES = tuple(branch_name(m, v) for m, v in BRANCHES)


@dataclass(frozen=True)
class Metrics:
    """Confusion counts at threshold 0.5 plus derived rates.

    sensitivity/specificity/roc_auc are None when the test set lacks
    the corresponding class.
    """

    tp: int
    fn: int
    tn: int
    fp: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    roc_auc: float | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_metrics(scores: np.ndarray, labels: np.ndarray) -> Metrics:
    """Threshold scores at 0.5 (positive class = 1) and count outcomes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise DataError("scores and labels must be equal-length 1-D arrays")
    pred = scores >= 0.5
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fn = int(np.sum(~pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    total = tp + fn + tn + fp
    return Metrics(
        tp=tp,
        fn=fn,
        tn=tn,
        fp=fp,
        accuracy=(tp + tn) / total,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        roc_auc=roc_auc(scores, labels) if 0 < pos.sum() < total else None,
    )


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank estimator of ROC-AUC: P(score_pos > score_neg) + 0.5 P(equal).

    Average ranks handle ties, which makes this identical to the
    brute-force average over all positive/negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def fuse(scores: np.ndarray, weights: np.ndarray) -> tuple[float, Label]:
    """Weighted soft vote; label is SZ iff the fused probability >= 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.shape != weights.shape:
        raise DataError("one weight per branch prediction required")
    if np.any(weights < 0):
        raise DataError("fusion weights must be nonnegative")
    total = float(weights.sum())
    if total == 0.0:
        raise DataError("fusion weights must not be all zero")
    p = float(np.dot(weights, scores) / total)
    return p, Label.SZ if p >= 0.5 else Label.HC


def branch_weights(scheme: str, inner_accuracy=None) -> np.ndarray:
    """Fusion weight vector for the nine branches.

    ``uniform`` ignores the fold context; ``holdout_accuracy`` uses each
    branch's accuracy on the inner held-out split, falling back to
    uniform when every branch scored zero.
    """
    if scheme == UNIFORM:
        return np.ones(len(BRANCHES))
    if scheme != HOLDOUT_ACCURACY:
        raise ConfigError(f"unknown fusion scheme {scheme!r}")
    if inner_accuracy is None or len(inner_accuracy) != len(BRANCHES):
        raise DataError("holdout_accuracy weights need one inner accuracy per branch")
    weights = np.asarray(inner_accuracy, dtype=np.float64)
    if weights.sum() == 0.0:
        return np.ones(len(BRANCHES))
    return weights


def make_folds(
    manifest: DatasetManifest, n_folds: int, repeat_seed: int
) -> list[list[str]]:
    """Label-stratified fold assignment: seeded shuffle of the cohort,
    then per-class round-robin over folds. Deterministic in
    (manifest, repeat_seed)."""
    if len(manifest.subjects) < n_folds:
        raise DataError("cohort smaller than the number of folds")
    stream = SplitMix64Stream(repeat_seed)
    order = stream.shuffled(list(range(len(manifest.subjects))))
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    seen: dict[Label, int] = {}
    for idx in order:
        subject = manifest.subjects[idx]
        c = seen.get(subject.label, 0)
        folds[c % n_folds].append(subject.subject_id)
        seen[subject.label] = c + 1
    return folds


@dataclass(frozen=True)
class CVSettings:
    n_folds: int = 5
    n_repeats: int = 10
    base_seed: int = 0
    train: TrainConfig = TrainConfig()
    fusion_scheme: str = HOLDOUT_ACCURACY
    channel_selection: str = PER_SLICE
    keep_slices: int | None = None  # override floor(N/2) for ablations
    keep_channels: int | None = None  # override floor(CH/4) for ablations
    skip_global_pooling: bool = False
    skip_net1d: bool = False
    skip_fusion: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.fusion_scheme not in (UNIFORM, HOLDOUT_ACCURACY):
            raise ConfigError(f"unknown fusion scheme {self.fusion_scheme!r}")
        if self.n_folds < 2 or self.n_repeats < 1:
            raise ConfigError("need n_folds >= 2 and n_repeats >= 1")


class DictFeatures:
    """In-memory feature provider: {(subject_id, metric, view): maps}."""

    def __init__(self, mapping: dict):
        self.mapping = dict(mapping)

    def __call__(self, sid: str, metric: Metric, view: View) -> np.ndarray:
        return self.mapping[(sid, metric, view)]


class _BranchRun:
    """Selections + trained model for one branch on one subject set."""

    def __init__(self, selection: SelectionIndices, model):
        self.selection = selection
        self.model = model


def _pooled(provider, sid: str, metric: Metric, view: View, sel: SelectionIndices):
    maps = provider(sid, metric, view)
    return apply_selection(MaxPooledFeatures(view=view, maps=maps), sel)


def _fit_all_branches(
    provider,
    train_ids: list[str],
    labels: dict[str, Label],
    settings: CVSettings,
    fold_seed: int,
    seed_tag: int,
) -> dict[str, _BranchRun]:
    """Selections + trained models for all nine branches on one subject set.

    Branches whose pooled features share dims train as one stacked group
    (identical results to training them one by one, just faster).
    """
    runs: dict[str, _BranchRun] = {}
    for b, (metric, view) in enumerate(BRANCHES):
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
        rows = [
            (sid, apply_selection(MaxPooledFeatures(view=view, maps=maps), sel),
             1 if labels[sid] is Label.SZ else 0)
            for sid, maps in zip(train_ids, feats)
        ]
        seed = derive_seed(fold_seed, seed_tag, b)
        cfg = dataclasses.replace(settings.train, seed=seed)
        name = branch_name(metric, view)
        if settings.skip_net1d:
            j, w, h, k = rows[0][1].shape
            model = LinearHead(j, k, w, h, seed=derive_seed(seed, 1, 0))
            runs[name] = _BranchRun(
                selection=sel, model=train_branch(rows, cfg, model=model)
            )
        else:
            model = train_branch_group([rows], [cfg])[0]
            runs[name] = _BranchRun(selection=sel, model=model)
    return runs


def _predict_branch(
    run: _BranchRun, provider, ids: list[str], metric: Metric, view: View
) -> dict[str, float]:
    return {
        sid: predict_positive(run.model, _pooled(provider, sid, metric, view, run.selection))
        for sid in ids
    }


def _branch_accuracy(preds: dict[str, float], labels: dict[str, Label]) -> float:
    hits = sum(
        (p >= 0.5) == (labels[sid] is Label.SZ) for sid, p in preds.items()
    )
    return hits / len(preds)


def _digest(run: _BranchRun) -> str:
    h = hashlib.sha256()
    h.update(repr(run.selection.slice_indices).encode())
    h.update(repr(run.selection.channel_indices).encode())
    for layer in run.model.param_layers():
        h.update(np.ascontiguousarray(layer.weights).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


def evaluate_cell(
    manifest: DatasetManifest,
    provider,
    settings: CVSettings,
    repeat_index: int,
    fold_index: int,
    audit: bool = False,
) -> dict:
    """Train and evaluate all branches for one (repeat, fold) cell.

    With ``audit=True`` the cell record carries digests of the learned
    selections and trained parameters (for leakage verification).
    """
    labels = manifest.labels()
    repeat_seed = splitmix64(settings.base_seed + repeat_index)
    folds = make_folds(manifest, settings.n_folds, repeat_seed)
    test_ids = sorted(folds[fold_index])
    train_ids = sorted(
        s.subject_id for s in manifest.subjects if s.subject_id not in test_ids
    )
    fold_seed = derive_seed(repeat_seed, fold_index)

    # Inner 80/20 split of the training fold: drives holdout-accuracy
    # weights and best-branch selection, never sees the test fold.
    weights = np.ones(len(BRANCHES))
    inner_accuracy: list[float] = []
    if settings.fusion_scheme == HOLDOUT_ACCURACY or settings.skip_fusion:
        inner_manifest = DatasetManifest(
            subjects=tuple(
                s for s in manifest.subjects if s.subject_id in set(train_ids)
            ),
            seed=manifest.seed,
        )
        inner_folds = make_folds(inner_manifest, 5, derive_seed(fold_seed, 1))
        holdout_ids = sorted(inner_folds[0])
        inner_train = sorted(set(train_ids) - set(holdout_ids))
        hold_labels = {labels[sid] for sid in holdout_ids}
        if len(hold_labels) < 2 or len({labels[s] for s in inner_train}) < 2:
            raise DataError(
                f"degenerate inner split at repeat {repeat_index} fold {fold_index}"
            )
        inner_runs = _fit_all_branches(
            provider, inner_train, labels, settings, fold_seed, seed_tag=2
        )
        for metric, view in BRANCHES:
            run = inner_runs[branch_name(metric, view)]
            preds = _predict_branch(run, provider, holdout_ids, metric, view)
            inner_accuracy.append(_branch_accuracy(preds, labels))
        if settings.fusion_scheme == HOLDOUT_ACCURACY:
            weights = branch_weights(HOLDOUT_ACCURACY, inner_accuracy)

    test_labels = np.array(
        [1 if labels[sid] is Label.SZ else 0 for sid in test_ids], dtype=np.intp
    )
    branch_preds: dict[str, dict[str, float]] = {}
    branch_metrics: dict[str, dict] = {}
    digests: dict[str, str] = {}
    outer_runs = _fit_all_branches(
        provider, train_ids, labels, settings, fold_seed, seed_tag=0
    )
    for metric, view in BRANCHES:
        name = branch_name(metric, view)
        run = outer_runs[name]
        preds = _predict_branch(run, provider, test_ids, metric, view)
        branch_preds[name] = preds
        if audit:
            digests[name] = _digest(run)
        scores = np.array([preds[sid] for sid in test_ids])
        branch_metrics[name] = compute_metrics(scores, test_labels).to_dict()

    if settings.skip_fusion:
        best = int(np.argmax(inner_accuracy))
        fused_scores = np.array(
            [branch_preds[BRANCH_NAMES[best]][sid] for sid in test_ids]
        )
        weights = np.zeros(len(BRANCHES))
        weights[best] = 1.0
    else:
        stacked = np.array(
            [[branch_preds[nm][sid] for nm in BRANCH_NAMES] for sid in test_ids]
        )
        fused_scores = np.array([fuse(row, weights)[0] for row in stacked])

    fused = compute_metrics(fused_scores, test_labels)
    cell = {
        "repeat": repeat_index,
        "fold": fold_index,
        "test_subjects": test_ids,
        "branch_weights": {nm: float(w) for nm, w in zip(BRANCH_NAMES, weights)},
        "branch_metrics": branch_metrics,
        "branch_predictions": {
            nm: {sid: float(p) for sid, p in preds.items()}
            for nm, preds in branch_preds.items()
        },
        "fused_metrics": fused.to_dict(),
        "predictions": {
            sid: float(p) for sid, p in zip(test_ids, fused_scores)
        },
    }
    if audit:
        cell["branch_digests"] = digests
    return cell


def _cell_task(args):
    manifest, provider, settings, r, f = args
    return evaluate_cell(manifest, provider, settings, r, f)


def _aggregate(cells: list[dict], key: str) -> dict:
    """Mean/std over cells of each metric field (None entries skipped)."""
    out = {}
    for field_name in ("accuracy", "specificity", "sensitivity", "roc_auc"):
        values = [c[key][field_name] for c in cells if c[key][field_name] is not None]
        if values:
            arr = np.array(values, dtype=np.float64)
            out[field_name] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "n_cells": len(values),
            }
        else:
            out[field_name] = {"mean": None, "std": None, "n_cells": 0}
    return out


def run_cv(manifest: DatasetManifest, provider, settings: CVSettings) -> dict:
    """Full repeated-CV protocol; returns the report document (JSON-ready).

    Cells are independent given (manifest, base seed); with jobs > 1 they
    run in a process pool and the result is identical to sequential.
    """
    tasks = [
        (manifest, provider, settings, r, f)
        for r in range(settings.n_repeats)
        for f in range(settings.n_folds)
    ]
    if settings.jobs > 1:
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            cells = list(pool.map(_cell_task, tasks, chunksize=1))
    else:
        cells = [_cell_task(t) for t in tasks]

    branch_aggregates = {
        nm: _aggregate(
            [{"m": c["branch_metrics"][nm]} for c in cells], "m"
        )
        for nm in BRANCH_NAMES
    }
    report = {
        "n_folds": settings.n_folds,
        "n_repeats": settings.n_repeats,
        "base_seed": settings.base_seed,
        "repeat_seeds": [
            splitmix64(settings.base_seed + r) for r in range(settings.n_repeats)
        ],
        "fusion_scheme": settings.fusion_scheme,
        "channel_selection": settings.channel_selection,
        "ablation": {
            "skip_global_pooling": settings.skip_global_pooling,
            "skip_net1d": settings.skip_net1d,
            "skip_fusion": settings.skip_fusion,
        },
        "branches": list(BRANCH_NAMES),
        "cells": cells,
        "aggregate": {
            "fused": _aggregate(cells, "fused_metrics"),
            "branch": branch_aggregates,
        },
    }
    return report
