import numpy as np
import pytest

from barelyseg.voxel import (
    LabelVolume,
    SliceAnnotation,
    Volume,
    annotate,
    extract_slice,
    insert_slice,
    make_training_sets,
    normalize,
)


class TestNormalize:
    def test_range(self):
        out = normalize(np.array([2.0, 4.0, 6.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(normalize(np.full((2, 2), 7.0)), 0.0)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            normalize(np.array([0.0, bad]))


class TestVolume:
    def test_channel_axis_added(self):
        assert Volume(np.zeros((3, 4, 5))).shape == (1, 3, 4, 5)

    def test_read_only(self):
        v = Volume(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0, 0] = 1.0

    def test_from_raw_per_channel(self):
        raw = np.stack([np.arange(8.0).reshape(2, 2, 2), -np.arange(8.0).reshape(2, 2, 2)])
        v = Volume.from_raw(raw)
        assert v.data.min() == 0.0 and v.data.max() == 1.0
        assert v.data[1, 0, 0, 0] == 1.0

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2)))


class TestLabels:
    def test_class_range(self):
        with pytest.raises(ValueError):
            LabelVolume(np.full((2, 2, 2), 2), num_classes=2)

    def test_float_rejected(self):
        with pytest.raises(ValueError):
            LabelVolume(np.zeros((2, 2, 2)))

    def test_annotate_keeps_one_plane(self):
        lab = LabelVolume(np.arange(8).reshape(2, 2, 2) % 2)
        ann = annotate(lab, 1)
        assert ann.slice_index == 1
        np.testing.assert_array_equal(ann.label2d, lab.data[1])

    def test_annotation_shape_check(self):
        ann = SliceAnnotation(0, np.zeros((3, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            ann.check_against(Volume(np.zeros((2, 4, 4))))
        with pytest.raises(IndexError):
            SliceAnnotation(5, np.zeros((4, 4), dtype=np.uint8)).check_against(Volume(np.zeros((2, 4, 4))))


class TestSlices:
    def test_extract_insert_roundtrip(self):
        v = Volume(np.random.default_rng(0).uniform(size=(2, 3, 4, 4)))
        plane = np.ones((2, 4, 4))
        w = insert_slice(v, 2, plane)
        np.testing.assert_array_equal(extract_slice(w, 2), plane)
        np.testing.assert_array_equal(extract_slice(w, 0), extract_slice(v, 0))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            extract_slice(Volume(np.zeros((2, 2, 2))), 2)


class TestTrainingSets:
    def test_labeled_volume_pooled_once(self):
        a, b = Volume(np.zeros((2, 2, 2))), Volume(np.ones((2, 2, 2)))
        ann = SliceAnnotation(0, np.zeros((2, 2), dtype=np.uint8))
        lset, uset = make_training_sets([(a, ann)], [b])
        assert len(lset) == 1 and len(uset) == 2
        lset, uset = make_training_sets([(a, ann)], [a, b])
        assert len(uset) == 2
