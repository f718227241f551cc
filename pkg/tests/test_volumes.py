import numpy as np
import pytest

from vox2p1d.errors import ConfigError, DataError
from vox2p1d.tensor import write_array
from vox2p1d.volumes import (
    METRICS,
    BrainVolume,
    EffectRegion,
    Label,
    Metric,
    PhantomSpec,
    generate_phantom_cohort,
    load_manifest,
    load_volume,
    pad_to_even,
    phantom_volume,
)


def _write_volume(tmp_path, arr, name="v.v21t"):
    path = tmp_path / name
    write_array(arr.astype(np.float32), path)
    return path


def test_load_zero_volume(tmp_path):
    path = _write_volume(tmp_path, np.zeros((8, 8, 8)))
    vol = load_volume(path, Metric.CSF)
    assert vol.metric is Metric.CSF
    assert vol.dims == (8, 8, 8)
    assert vol.voxels.max() == 0.0


def test_load_rejects_rank2(tmp_path):
    path = _write_volume(tmp_path, np.zeros((8, 8)))
    with pytest.raises(DataError):
        load_volume(path, Metric.GM)


def test_load_preserves_reference_grid(tmp_path):
    path = _write_volume(tmp_path, np.full((121, 145, 121), 0.5))
    vol = load_volume(path, Metric.GM)
    assert vol.dims == (121, 145, 121)
    assert float(vol.voxels[60, 70, 60]) == 0.5


def test_load_clamps_within_tolerance(tmp_path):
    arr = np.full((4, 4, 4), 1.0)
    arr[0, 0, 0] = 1.0 + 5e-7
    path = _write_volume(tmp_path, arr)
    vol = load_volume(path, Metric.WM)
    assert vol.voxels.max() == 1.0


def test_load_rejects_out_of_range(tmp_path):
    arr = np.full((4, 4, 4), 0.5)
    arr[1, 2, 3] = 1.1
    path = _write_volume(tmp_path, arr)
    with pytest.raises(DataError):
        load_volume(path, Metric.WM)


def test_pad_reference_grid():
    vol = BrainVolume("s", Metric.GM, np.zeros((121, 145, 121), dtype=np.float32))
    assert pad_to_even(vol).dims == (122, 146, 122)


def test_pad_even_noop():
    vox = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    vol = BrainVolume("s", Metric.GM, vox)
    padded = pad_to_even(vol)
    assert padded.voxels is vox  # untouched


def test_pad_high_end_preserves_voxels():
    vox = np.arange(3 * 4 * 5, dtype=np.float32).reshape(3, 4, 5)
    padded = pad_to_even(BrainVolume("s", Metric.WM, vox))
    assert padded.dims == (4, 4, 6)
    assert padded.voxels[2, 3, 4] == vox[2, 3, 4]
    np.testing.assert_array_equal(padded.voxels[:3, :4, :5], vox)
    assert padded.voxels[3].sum() == 0 and padded.voxels[:, :, 5].sum() == 0


def _spec(tmp_path=None, **kw):
    defaults = dict(
        n_per_class=3,
        dims=(12, 14, 12),
        effect_regions=(
            EffectRegion(center=(6, 7, 6), radius=2.0, delta={Metric.GM: 0.2}),
        ),
        noise_sigma=0.02,
        seed=99,
    )
    defaults.update(kw)
    return PhantomSpec(**defaults)


def test_phantom_zero_noise_differs_only_in_regions():
    spec = _spec(noise_sigma=0.0)
    sz = phantom_volume(spec, 0, Metric.GM, positive=True)
    hc = phantom_volume(spec, 3, Metric.GM, positive=False)
    diff = sz != hc
    grids = np.ogrid[0:12, 0:14, 0:12]
    mask = sum((g - c) ** 2 for g, c in zip(grids, (6, 7, 6))) <= 4.0
    assert diff.any()
    assert not diff[~mask].any()
    np.testing.assert_array_equal(diff, diff & mask)


def test_phantom_rerun_byte_identical(tmp_path):
    spec = _spec()
    m1 = generate_phantom_cohort(spec, tmp_path / "a")
    m2 = generate_phantom_cohort(spec, tmp_path / "b")
    man = load_manifest(m1)
    for s1, s2 in zip(man.subjects, load_manifest(m2).subjects):
        for metric in METRICS:
            b1 = s1.volume_paths[metric].read_bytes()
            b2 = s2.volume_paths[metric].read_bytes()
            assert b1 == b2


def test_phantom_zero_delta_classes_indistinguishable():
    # with all effect deltas zero the positive flag has no influence, so
    # a downstream classifier can only reach chance on such a cohort
    spec = _spec(
        effect_regions=(
            EffectRegion(center=(6, 7, 6), radius=2.0, delta={Metric.GM: 0.0}),
        )
    )
    for metric in METRICS:
        sz = phantom_volume(spec, 2, metric, positive=True)
        hc = phantom_volume(spec, 2, metric, positive=False)
        np.testing.assert_array_equal(sz, hc)


def test_phantom_default_dims_reference_grid():
    assert PhantomSpec(n_per_class=1).dims == (121, 145, 121)


def test_phantom_values_in_unit_interval():
    spec = _spec(noise_sigma=0.3)
    vol = phantom_volume(spec, 1, Metric.CSF, positive=True)
    assert vol.min() >= 0.0 and vol.max() <= 1.0
    assert vol.dtype == np.float32


def test_manifest_round_trip(tmp_path):
    spec = _spec()
    manifest_path = generate_phantom_cohort(spec, tmp_path)
    man = load_manifest(manifest_path)
    assert len(man.subjects) == 6
    labels = [s.label for s in man.subjects]
    assert labels.count(Label.SZ) == 3 and labels.count(Label.HC) == 3
    for s in man.subjects:
        for metric in METRICS:
            assert s.volume_paths[metric].exists()
    vol = load_volume(man.subjects[0].volume_paths[Metric.GM], Metric.GM)
    assert vol.dims == (12, 14, 12)


def test_phantom_spec_validation():
    with pytest.raises(ConfigError):
        _spec(noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        _spec(
            effect_regions=(
                EffectRegion(center=(99, 0, 0), radius=1.0, delta={Metric.GM: 0.1}),
            )
        )
    with pytest.raises(ConfigError):
        _spec(n_per_class=0)


def test_cohort_file_count(tmp_path):
    manifest_path = generate_phantom_cohort(_spec(n_per_class=5), tmp_path)
    files = list((tmp_path / "volumes").glob("*.v21t"))
    assert len(files) == 10 * 3


def test_permute_labels_balanced(tmp_path):
    from vox2p1d.volumes import permute_labels

    manifest_path = generate_phantom_cohort(_spec(n_per_class=6), tmp_path)
    manifest = load_manifest(manifest_path)
    permuted = permute_labels(manifest, seed=4)
    agree = sum(
        a.label == b.label for a, b in zip(manifest.subjects, permuted.subjects)
    )
    assert agree == len(manifest.subjects) // 2  # exactly half keep their label
    labels = [s.label for s in permuted.subjects]
    assert labels.count(Label.SZ) == labels.count(Label.HC) == 6
    # deterministic in the seed, different permutation for another seed
    again = permute_labels(manifest, seed=4)
    assert [s.label for s in again.subjects] == labels
    other = permute_labels(manifest, seed=5)
    assert [s.label for s in other.subjects] != labels
    for a, b in zip(manifest.subjects, permuted.subjects):
        assert a.volume_paths == b.volume_paths
