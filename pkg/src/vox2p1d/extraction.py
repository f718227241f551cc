"""Per-slice 2D feature extraction and 8-way neighbor max-pooling.

The extractor itself is a boundary: either the deterministic stub below
(a seeded random-projection bank standing in for a frozen pre-trained
network) or feature maps computed externally and imported as V21T files.
Either way the result per (subject, metric, view, offset k) is a rank-4
map stack (N, W, H, CH) of non-negative activations, and the 8 offset
stacks are reduced by an elementwise maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decompose import VIEWS, ExtractorDescriptor, View
from .errors import DataError
from .rng import SplitMix64Stream, splitmix64
from .tensor import read_array
from .volumes import METRICS, DatasetManifest, Metric


@dataclass(frozen=True)
class FeatureMapSet:
    """Extractor output for one offset k: maps (N, W, H, CH), all >= 0."""

    view: View
    k: int
    maps: np.ndarray


@dataclass(frozen=True)
class MaxPooledFeatures:
    """Elementwise max over the 8 offset map sets; same (N, W, H, CH)."""

    view: View
    maps: np.ndarray


def _block_edges(total: int, parts: int) -> list[tuple[int, int]]:
    """Split ``total`` pixels into ``parts`` equal bands, remainder to the last."""
    base = total // parts
    edges = [(i * base, (i + 1) * base) for i in range(parts - 1)]
    edges.append(((parts - 1) * base, total))
    return edges


class StubExtractor:
    """Deterministic stand-in for a frozen pre-trained 2D feature extractor.

    The input image is partitioned into a W x H grid of rectangular
    blocks (grid cell (w, h) covers width band w and height band h;
    remainder pixels go to the last band). Cell (w, h) computes
    ReLU(A @ vec(block) + b) where vec() flattens the block row-major
    (height, width, channel) and the entries of A (CH x L, row-major)
    then b (CH) are uniform draws in [-s, s], s = 1 / sqrt(L), from the
    SplitMix64 stream seeded with splitmix64(seed ^ (cell_index + 1)),
    cell_index = w * H + h. Weights depend only on (seed, descriptor),
    so the same stub behaves like one fixed network across all slices.
    """

    def __init__(self, seed: int, descriptor: ExtractorDescriptor):
        self.seed = int(seed)
        self.descriptor = descriptor
        w_cells, h_cells, ch = descriptor.out_dims
        self._w_bands = _block_edges(descriptor.input_width, w_cells)
        self._h_bands = _block_edges(descriptor.input_height, h_cells)
        self._cells = []
        for w in range(w_cells):
            for h in range(h_cells):
                x0, x1 = self._w_bands[w]
                y0, y1 = self._h_bands[h]
                length = (y1 - y0) * (x1 - x0) * descriptor.channels
                scale = 1.0 / np.sqrt(length)
                stream = SplitMix64Stream(splitmix64(self.seed ^ (w * h_cells + h + 1)))
                draws = stream.uniforms(ch * length + ch)
                weights = ((2.0 * draws[: ch * length] - 1.0) * scale).reshape(ch, length)
                bias = (2.0 * draws[ch * length :] - 1.0) * scale
                self._cells.append((w, h, y0, y1, x0, x1, weights, bias))

    def extract_stack(self, imgs: np.ndarray) -> np.ndarray:
        """Feature maps for a batch of adapted images.

        (N, input_height, input_width, channels) -> (N, W, H, CH).
        """
        d = self.descriptor
        if imgs.ndim != 4 or imgs.shape[1:] != (
            d.input_height,
            d.input_width,
            d.channels,
        ):
            raise DataError(
                f"stub extractor expects (N, {d.input_height}, {d.input_width}, "
                f"{d.channels}) images, got {imgs.shape}"
            )
        n = imgs.shape[0]
        w_cells, h_cells, ch = d.out_dims
        out = np.empty((n, w_cells, h_cells, ch), dtype=np.float32)
        imgs64 = imgs.astype(np.float64)
        for w, h, y0, y1, x0, x1, weights, bias in self._cells:
            block = imgs64[:, y0:y1, x0:x1, :].reshape(n, -1)
            acts = block @ weights.T + bias
            out[:, w, h, :] = np.maximum(acts, 0.0)
        return out

    def extract(self, img: np.ndarray) -> np.ndarray:
        """Single adapted image -> (W, H, CH) feature map."""
        return self.extract_stack(img[None, ...])[0]


def stub_extract(
    img: np.ndarray, seed: int, descriptor: ExtractorDescriptor
) -> np.ndarray:
    """One-shot stub extraction; prefer StubExtractor when reusing weights."""
    return StubExtractor(seed, descriptor).extract(img)


def maxpool8(sets: list[FeatureMapSet] | tuple[FeatureMapSet, ...]) -> MaxPooledFeatures:
    """Elementwise maximum across the 8 offset feature-map sets."""
    if len(sets) != 8:
        raise DataError(f"maxpool8 needs exactly 8 sets, got {len(sets)}")
    view = sets[0].view
    shape = sets[0].maps.shape
    for s in sets:
        if s.view != view:
            raise DataError("maxpool8 inputs must share a view")
        if s.maps.shape != shape:
            raise DataError(
                f"maxpool8 dim mismatch: {s.maps.shape} vs {shape} (k={s.k})"
            )
    pooled = np.maximum.reduce([s.maps for s in sets])
    return MaxPooledFeatures(view=view, maps=pooled)


def feature_file_name(subject_id: str, metric: Metric, view: View, k: int) -> str:
    return f"{subject_id}_{metric.value}_{view.value}_{k}.v21t"


def import_external_features(
    directory: str | Path, manifest: DatasetManifest
) -> dict[tuple[str, Metric, View], list[FeatureMapSet]]:
    """Load externally computed per-offset feature maps for a whole cohort.

    Expects one rank-4 V21T file per (subject, metric, view, k), named
    ``{subject}_{metric}_{view}_{k}.v21t``. Dims must agree across the 8
    offsets of a (subject, metric, view) and activations must be >= 0.
    """
    directory = Path(directory)
    out: dict[tuple[str, Metric, View], list[FeatureMapSet]] = {}
    for subject in manifest.subjects:
        for metric in METRICS:
            for view in VIEWS:
                sets = []
                shape = None
                for k in range(8):
                    path = directory / feature_file_name(
                        subject.subject_id, metric, view, k
                    )
                    if not path.exists():
                        raise DataError(
                            f"missing feature file for ({subject.subject_id}, "
                            f"{metric.value}, {view.value}, k={k}): {path}"
                        )
                    maps = read_array(path)
                    if maps.ndim != 4:
                        raise DataError(f"{path}: expected rank-4 maps")
                    if shape is None:
                        shape = maps.shape
                    elif maps.shape != shape:
                        raise DataError(
                            f"{path}: dims {maps.shape} disagree with k=0 dims "
                            f"{shape} for ({subject.subject_id}, {metric.value}, "
                            f"{view.value})"
                        )
                    if maps.min() < 0:
                        raise DataError(f"{path}: negative activations")
                    sets.append(FeatureMapSet(view=view, k=k, maps=maps))
                out[(subject.subject_id, metric, view)] = sets
    return out
