"""Learned global pooling over slices and channels.

Slice and channel subsets are a training-set statistic, not a trainable
layer: slices are ranked by their total activation summed over all
training subjects and retained top-half; channels are ranked the same
way per retained slice (or once globally, as an ablation) and retained
top-quarter. Retained indices stay in ascending anatomical order so the
downstream slice-axis convolutions see spatially adjacent inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decompose import View
from .errors import DataError
from .extraction import MaxPooledFeatures

PER_SLICE = "per_slice"
GLOBAL = "global"

SLICE_KEEP_DIVISOR = 2  # retain floor(N/2) slices
CHANNEL_KEEP_DIVISOR = 4  # retain floor(CH/4) channels


@dataclass(frozen=True)
class TrainingFeatureCorpus:
    """Max-pooled feature maps of the training subjects only, one view."""

    view: View
    features: tuple[np.ndarray, ...]  # each (N, W, H, CH), congruent

    def __post_init__(self):
        if not self.features:
            raise DataError("empty training corpus")
        shape = self.features[0].shape
        for f in self.features:
            if f.shape != shape:
                raise DataError(f"corpus dim mismatch: {f.shape} vs {shape}")


@dataclass(frozen=True)
class SelectionIndices:
    """Retained slice indices and per-slice channel indices, ascending."""

    view: View
    slice_indices: tuple[int, ...]
    channel_indices: tuple[tuple[int, ...], ...]  # one tuple per retained slice

    def __post_init__(self):
        if len(self.channel_indices) != len(self.slice_indices):
            raise DataError("one channel list per retained slice required")

    @property
    def n_slices(self) -> int:
        return len(self.slice_indices)

    @property
    def n_channels(self) -> int:
        return len(self.channel_indices[0]) if self.channel_indices else 0


def top_indices_ascending(scores: np.ndarray, keep: int) -> tuple[int, ...]:
    """Indices of the ``keep`` largest scores, ties toward the smaller
    index, returned in ascending index order."""
    order = np.argsort(-scores, kind="stable")[:keep]
    return tuple(int(i) for i in np.sort(order))


def activation_totals(corpus: TrainingFeatureCorpus) -> np.ndarray:
    """Per-(slice, channel) activation summed over subjects, w, h.

    One corpus pass feeds both the slice and the channel rankings; the
    fixed subject order keeps the float accumulation bit-stable.
    """
    totals = np.zeros(
        (corpus.features[0].shape[0], corpus.features[0].shape[3]), dtype=np.float64
    )
    for f in corpus.features:
        totals += f.sum(axis=(1, 2), dtype=np.float64)
    return totals


def slice_scores(corpus: TrainingFeatureCorpus) -> np.ndarray:
    """Per-slice total activation summed over subjects, w, h, ch."""
    return activation_totals(corpus).sum(axis=1)


def channel_scores(corpus: TrainingFeatureCorpus, slice_index: int) -> np.ndarray:
    """Per-channel activation at one slice, summed over subjects, w, h."""
    return activation_totals(corpus)[slice_index]


def _top_slices(totals: np.ndarray, keep: int | None) -> tuple[int, ...]:
    n = totals.shape[0]
    if keep is None:
        keep = n // SLICE_KEEP_DIVISOR
    if not 1 <= keep <= n:
        raise DataError(f"cannot keep {keep} of {n} slices")
    return top_indices_ascending(totals.sum(axis=1), keep)


def _top_channels(
    totals: np.ndarray, slice_indices: tuple[int, ...], keep: int | None, mode: str
) -> tuple[tuple[int, ...], ...]:
    n, ch = totals.shape
    if keep is None:
        keep = ch // CHANNEL_KEEP_DIVISOR
    if not 1 <= keep <= ch:
        raise DataError(f"cannot keep {keep} of {ch} channels")
    for s in slice_indices:
        if not 0 <= s < n:
            raise DataError(f"slice index {s} outside [0, {n})")
    if mode == GLOBAL:
        shared = top_indices_ascending(totals[list(slice_indices)].sum(axis=0), keep)
        return tuple(shared for _ in slice_indices)
    if mode != PER_SLICE:
        raise DataError(f"unknown channel selection mode {mode!r}")
    return tuple(top_indices_ascending(totals[s], keep) for s in slice_indices)


def learn_slice_selection(
    corpus: TrainingFeatureCorpus, keep: int | None = None
) -> tuple[int, ...]:
    """Top floor(N/2) slice indices by summed training activation."""
    return _top_slices(activation_totals(corpus), keep)


def learn_channel_selection(
    corpus: TrainingFeatureCorpus,
    slice_indices: tuple[int, ...],
    keep: int | None = None,
    mode: str = PER_SLICE,
) -> tuple[tuple[int, ...], ...]:
    """Top floor(CH/4) channel indices, independently per retained slice.

    ``mode="global"`` ranks channels once over all retained slices and
    reuses the same list everywhere (ablation switch).
    """
    return _top_channels(activation_totals(corpus), slice_indices, keep, mode)


def learn_selection(
    corpus: TrainingFeatureCorpus,
    mode: str = PER_SLICE,
    keep_slices: int | None = None,
    keep_channels: int | None = None,
) -> SelectionIndices:
    """Slice selection followed by channel selection, in one corpus pass."""
    totals = activation_totals(corpus)
    slices = _top_slices(totals, keep_slices)
    channels = _top_channels(totals, slices, keep_channels, mode)
    return SelectionIndices(
        view=corpus.view, slice_indices=slices, channel_indices=channels
    )


def identity_selection(view: View, n_slices: int, n_channels: int) -> SelectionIndices:
    """Keep everything (used when global pooling is ablated)."""
    all_channels = tuple(range(n_channels))
    return SelectionIndices(
        view=view,
        slice_indices=tuple(range(n_slices)),
        channel_indices=tuple(all_channels for _ in range(n_slices)),
    )


def apply_selection(f: MaxPooledFeatures, sel: SelectionIndices) -> np.ndarray:
    """Gather the selected slices/channels: (N, W, H, CH) -> (J, W, H, K)."""
    n, w, h, ch = f.maps.shape
    if f.view != sel.view:
        raise DataError(f"view mismatch: features {f.view} vs selection {sel.view}")
    if sel.slice_indices and sel.slice_indices[-1] >= n:
        raise DataError(f"selection slice index {sel.slice_indices[-1]} >= N={n}")
    chans = np.asarray(sel.channel_indices, dtype=np.intp)  # (J, K)
    if chans.size and chans.max() >= ch:
        raise DataError(f"selection channel index {chans.max()} >= CH={ch}")
    kept = f.maps[list(sel.slice_indices)]  # (J, W, H, CH)
    return np.take_along_axis(kept, chans[:, None, None, :], axis=3)


def save_selection(sel: SelectionIndices, path: str | Path) -> None:
    doc = {
        "view": sel.view.value,
        "slice_indices": list(sel.slice_indices),
        "channel_indices": [list(c) for c in sel.channel_indices],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_selection(path: str | Path) -> SelectionIndices:
    doc = json.loads(Path(path).read_text())
    return SelectionIndices(
        view=View(doc["view"]),
        slice_indices=tuple(doc["slice_indices"]),
        channel_indices=tuple(tuple(c) for c in doc["channel_indices"]),
    )
