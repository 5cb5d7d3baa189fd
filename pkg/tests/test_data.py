"""Data model: joint sampling statistics, band rendering, splits, file IO."""

from __future__ import annotations

import numpy as np
import pytest

from mtk.errors import FormatError, MTKError, UndefinedConditionalError
from mtk.data import (
    ClassPattern,
    JointLabelModel,
    MultiTaskDataset,
    RenderSpec,
    TaskSpec,
    default_render_spec,
    default_tasks,
    empirical_conditional,
    empirical_marginal,
    generate_synthetic,
    load_dataset,
    render_labels,
    save_dataset,
    split,
)


def _tiny_dataset(labels, n_classes=(3, 2), secured=(0,)) -> MultiTaskDataset:
    labels = np.asarray(labels)
    tasks = default_tasks(n_classes, secured)
    samples = np.zeros((labels.shape[0], 2, 2, 1), dtype=np.float32)
    return MultiTaskDataset(tasks, samples, labels)


class TestJointLabelModel:
    def test_table_shapes_must_chain(self) -> None:
        with pytest.raises(MTKError):
            JointLabelModel((np.array([0.5, 0.5]), np.full((3, 2), 0.5)))

    def test_rows_must_sum_to_one(self) -> None:
        with pytest.raises(MTKError):
            JointLabelModel((np.array([0.6, 0.5]),))

    def test_negative_probabilities_rejected(self) -> None:
        with pytest.raises(MTKError):
            JointLabelModel((np.array([1.5, -0.5]),))

    def test_sampled_marginals_within_binomial_bound(self) -> None:
        # n=20000, p=0.25: five sigma on a frequency is ~0.0153
        joint = JointLabelModel.independent_uniform((4, 2))
        labels = joint.sample(20000, np.random.default_rng(0))
        freq = np.bincount(labels[:, 0], minlength=4) / 20000
        assert np.abs(freq - 0.25).max() < 0.02
        freq1 = np.bincount(labels[:, 1], minlength=2) / 20000
        assert np.abs(freq1 - 0.5).max() < 0.02

    def test_planted_conditional_is_recovered(self) -> None:
        t0 = np.array([0.5, 0.5])
        t1 = np.array([[0.7, 0.3], [0.2, 0.8]])
        joint = JointLabelModel((t0, t1))
        labels = joint.sample(40000, np.random.default_rng(1))
        sel = labels[:, 0] == 0
        freq = (labels[sel, 1] == 0).mean()
        # se = sqrt(.7*.3/20000) ~ 0.0032, allow five sigma
        assert freq == pytest.approx(0.7, abs=0.017)

    def test_sampling_is_deterministic_per_seed(self) -> None:
        joint = JointLabelModel.independent_uniform((4, 2, 5))
        a = joint.sample(100, np.random.default_rng(7))
        b = joint.sample(100, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


class TestRendering:
    def test_band_rows_tile_the_image(self) -> None:
        spec = default_render_spec(default_tasks(), image_shape=(32, 32, 3))
        assert spec.band_rows(0) == (0, 10)
        assert spec.band_rows(1) == (10, 21)
        assert spec.band_rows(2) == (21, 32)

    def test_noiseless_render_has_exact_pattern(self) -> None:
        tasks = default_tasks((4, 2, 5), secured=(0, 2))
        spec = default_render_spec(tasks, image_shape=(32, 32, 3), noise_sigma=0.0)
        labels = np.array([[2, 1, 4]])
        img = render_labels(labels, spec, np.random.default_rng(0))[0]

        # task 0, class 2: rows 0..9, channel 2, intensity 3/5
        np.testing.assert_allclose(img[0:10, :, 2], np.float32(3 / 5))
        # task 1, class 1: rows 10..20, channel 1, intensity 2/3
        np.testing.assert_allclose(img[10:21, :, 1], np.float32(2 / 3))
        # task 2, class 4: rows 21..31, channel 4 mod 3 = 1, intensity 5/6
        np.testing.assert_allclose(img[21:32, :, 1], np.float32(5 / 6))
        # channels not selected by any pattern stay dark
        np.testing.assert_array_equal(img[0:10, :, 0], 0.0)
        np.testing.assert_array_equal(img[0:10, :, 1], 0.0)
        np.testing.assert_array_equal(img[10:21, :, 0], 0.0)
        np.testing.assert_array_equal(img[21:32, :, 0], 0.0)

    def test_signal_rows_limits_the_pattern(self) -> None:
        tasks = default_tasks((2, 2), secured=(0,))
        base = default_render_spec(tasks, image_shape=(8, 4, 3), noise_sigma=0.0)
        spec = RenderSpec(
            image_shape=(8, 4, 3),
            patterns=base.patterns,
            noise_sigma=0.0,
            signal_rows=(1, None),
        )
        img = render_labels(np.array([[0, 0]]), spec, np.random.default_rng(0))[0]
        assert img[0, :, 0].min() > 0       # first band row carries the pattern
        np.testing.assert_array_equal(img[1:4, :, 0], 0.0)  # rest of the band is dark

    def test_noise_keeps_values_in_range_and_is_seeded(self) -> None:
        tasks = default_tasks()
        joint = JointLabelModel.independent_uniform((4, 2, 5))
        spec = default_render_spec(tasks, noise_sigma=0.05)
        a = generate_synthetic(tasks, joint, spec, 50, seed=3)
        b = generate_synthetic(tasks, joint, spec, 50, seed=3)
        c = generate_synthetic(tasks, joint, spec, 50, seed=4)
        assert a.samples.min() >= 0.0 and a.samples.max() <= 1.0
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.samples, c.samples)

    def test_provenance_equals_labels_at_generation(self) -> None:
        tasks = default_tasks()
        ds = generate_synthetic(
            tasks, JointLabelModel.independent_uniform((4, 2, 5)),
            default_render_spec(tasks), 20, seed=0,
        )
        np.testing.assert_array_equal(ds.provenance, ds.labels)

    def test_bad_band_permutation_rejected(self) -> None:
        tasks = default_tasks((2, 2), secured=())
        base = default_render_spec(tasks, image_shape=(8, 4, 3))
        with pytest.raises(MTKError):
            RenderSpec(image_shape=(8, 4, 3), patterns=base.patterns, band_of_task=(0, 0))


class TestDatasetInvariants:
    def test_arrays_are_frozen(self) -> None:
        ds = _tiny_dataset([[0, 0], [1, 1]])
        assert not ds.samples.flags.writeable
        assert not ds.labels.flags.writeable
        with pytest.raises(ValueError):
            ds.labels[0, 0] = 2

    def test_label_range_is_validated(self) -> None:
        with pytest.raises(MTKError):
            _tiny_dataset([[3, 0]])
        with pytest.raises(MTKError):
            _tiny_dataset([[-1, 0]])

    def test_sample_range_is_validated(self) -> None:
        tasks = default_tasks((2, 2), secured=())
        bad = np.full((1, 2, 2, 1), 1.5, dtype=np.float32)
        with pytest.raises(MTKError):
            MultiTaskDataset(tasks, bad, np.zeros((1, 2), dtype=np.int64))

    def test_ground_truth_prefers_provenance(self) -> None:
        labels = np.array([[0, 0]])
        prov = np.array([[2, 1]])
        tasks = default_tasks((3, 2), secured=(0,))
        ds = MultiTaskDataset(tasks, np.zeros((1, 2, 2, 1), np.float32), labels, prov)
        np.testing.assert_array_equal(ds.ground_truth(), prov)


class TestStatistics:
    LABELS = [[0, 0], [0, 1], [1, 0], [2, 0], [2, 0], [2, 1]]

    def test_marginal_matches_hand_count(self) -> None:
        ds = _tiny_dataset(self.LABELS)
        np.testing.assert_allclose(empirical_marginal(ds, 0), [2 / 6, 1 / 6, 3 / 6])
        np.testing.assert_allclose(empirical_marginal(ds, 1), [4 / 6, 2 / 6])

    def test_conditional_matches_hand_count(self) -> None:
        ds = _tiny_dataset(self.LABELS)
        # among task-1 == 0 rows: task-0 labels are 0, 1, 2, 2
        np.testing.assert_allclose(
            empirical_conditional(ds, i=0, j=1, k=0), [1 / 4, 1 / 4, 2 / 4]
        )
        np.testing.assert_allclose(
            empirical_conditional(ds, i=1, j=0, k=2), [2 / 3, 1 / 3]
        )

    def test_empty_conditioning_set_is_an_error_not_zero(self) -> None:
        ds = _tiny_dataset([[0, 0], [1, 0]])
        with pytest.raises(UndefinedConditionalError):
            empirical_conditional(ds, i=0, j=1, k=1)

    def test_same_task_conditional_rejected(self) -> None:
        ds = _tiny_dataset(self.LABELS)
        with pytest.raises(MTKError):
            empirical_conditional(ds, i=1, j=1, k=0)


class TestSplit:
    def _dataset(self, n=10) -> MultiTaskDataset:
        rng = np.random.default_rng(0)
        tasks = default_tasks((3, 2), secured=(0,))
        samples = rng.uniform(0, 1, size=(n, 2, 2, 1)).astype(np.float32)
        labels = np.stack([rng.integers(0, 3, n), rng.integers(0, 2, n)], axis=1)
        return MultiTaskDataset(tasks, samples, labels, provenance=labels.copy())

    def test_sizes_and_disjoint_union(self) -> None:
        ds = self._dataset(10)
        a, b = split(ds, 0.8, seed=1)
        assert (a.n_samples, b.n_samples) == (8, 2)
        merged = np.concatenate([a.samples, b.samples])
        assert merged.shape == ds.samples.shape
        # every original sample appears exactly once across the two sides
        orig = {ds.samples[i].tobytes() for i in range(10)}
        got = {merged[i].tobytes() for i in range(10)}
        assert orig == got

    def test_split_is_deterministic(self) -> None:
        ds = self._dataset(12)
        a1, _ = split(ds, 0.5, seed=9)
        a2, _ = split(ds, 0.5, seed=9)
        np.testing.assert_array_equal(a1.samples, a2.samples)

    def test_provenance_rides_along(self) -> None:
        ds = self._dataset(6)
        a, b = split(ds, 0.5, seed=2)
        np.testing.assert_array_equal(a.provenance, a.labels)
        np.testing.assert_array_equal(b.provenance, b.labels)

    def test_empty_side_rejected(self) -> None:
        ds = self._dataset(3)
        with pytest.raises(MTKError):
            split(ds, 0.05, seed=0)
        with pytest.raises(MTKError):
            split(ds, 1.5, seed=0)


class TestFileFormat:
    def _dataset(self, provenance: bool) -> MultiTaskDataset:
        tasks = default_tasks((4, 2, 5), secured=(0, 2))
        joint = JointLabelModel.independent_uniform((4, 2, 5))
        ds = generate_synthetic(tasks, joint, default_render_spec(tasks), 17, seed=5)
        if not provenance:
            ds = MultiTaskDataset(ds.tasks, ds.samples, ds.labels, None)
        return ds

    @pytest.mark.parametrize("provenance", [True, False])
    def test_roundtrip_is_bit_exact(self, tmp_path, provenance) -> None:
        ds = self._dataset(provenance)
        path = str(tmp_path / "ds.mtkd")
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.tasks == ds.tasks
        np.testing.assert_array_equal(back.samples, ds.samples)
        np.testing.assert_array_equal(back.labels, ds.labels)
        if provenance:
            np.testing.assert_array_equal(back.provenance, ds.provenance)
        else:
            assert back.provenance is None

    def test_save_load_save_is_byte_identical(self, tmp_path) -> None:
        ds = self._dataset(True)
        p1, p2 = str(tmp_path / "a.mtkd"), str(tmp_path / "b.mtkd")
        save_dataset(p1, ds)
        save_dataset(p2, load_dataset(p1))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_secured_flags_survive(self, tmp_path) -> None:
        ds = self._dataset(True)
        path = str(tmp_path / "ds.mtkd")
        save_dataset(path, ds)
        assert load_dataset(path).secured_ids == (0, 2)

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda b: b.__setitem__(slice(0, 4), b"MTKX"), "magic"),
            (lambda b: b.__setitem__(4, 7), "version"),
            (lambda b: b.__delitem__(slice(-50, None)), "truncated"),
            (lambda b: b.extend(b"\x00" * 4), "trailing"),
        ],
    )
    def test_malformed_files_name_the_problem(self, tmp_path, mutate, message) -> None:
        path = str(tmp_path / "ds.mtkd")
        save_dataset(path, self._dataset(True))
        blob = bytearray(open(path, "rb").read())
        mutate(blob)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(FormatError, match=message):
            load_dataset(path)
