import copy

import numpy as np
import pytest
import torch

from dynafield.scene import validate_bundle, validate_cloud
from dynafield.synth import (
    default_two_object_spec,
    frame_times,
    labeled_objects,
    object_state_at,
    synthesize_scene,
)


class TestSynthScene:
    def test_default_spec_shape(self):
        spec = default_two_object_spec()
        assert spec.num_frames == 8
        assert (spec.width, spec.height) == (128, 128)
        assert len(spec.objects) == 2
        assert spec.objects[0].switch_time == 0.5

    def test_state_switch_at_half(self):
        spec = default_two_object_spec()
        cup = spec.objects[0]
        times = frame_times(8)
        states = [object_state_at(cup, t) for t in times]
        assert states == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_bundle_is_valid(self, tiny_scene):
        assert validate_bundle(tiny_scene.bundle, tiny_scene.gt_cloud) == []

    def test_masks_disjoint_and_backdrop_completes(self, tiny_scene):
        bundle = tiny_scene.bundle
        for f in range(bundle.num_frames):
            total = np.zeros(bundle.frames[0].shape[:2], dtype=int)
            for track in bundle.mask_tracks:
                total += track.masks[f].astype(int)
            assert total.max() == 1 and total.min() == 1  # exact partition

    def test_labeled_objects_appends_backdrop(self, tiny_scene):
        pairs = labeled_objects(tiny_scene.spec)
        assert [oid for oid, _ in pairs] == [1, 2, 3]
        assert pairs[-1][1].name == tiny_scene.spec.background_name

    def test_ground_truth_queries_only_real_objects(self, tiny_scene):
        gt = tiny_scene.bundle.ground_truth
        assert {q.object_id for q in gt.queries} == {1, 2}
        ts = [q for q in gt.queries if q.mode == "timeSensitive"]
        assert len(ts) == 3  # two cup states + one ball state

    def test_deterministic_under_seed(self):
        a = synthesize_scene(default_two_object_spec(width=32, height=32, num_frames=3))
        b = synthesize_scene(default_two_object_spec(width=32, height=32, num_frames=3))
        for fa, fb in zip(a.bundle.frames, b.bundle.frames):
            assert np.array_equal(fa, fb)
        assert np.array_equal(a.init_positions, b.init_positions)

    def test_degenerate_specs_fault(self):
        spec = default_two_object_spec()
        spec.num_frames = 1
        with pytest.raises(ValueError):
            synthesize_scene(spec)
        spec2 = default_two_object_spec()
        spec2.objects = []
        with pytest.raises(ValueError):
            synthesize_scene(spec2)


class TestValidation:
    def test_clean_cloud(self, tiny_scene):
        assert validate_cloud(tiny_scene.gt_cloud) == []

    def test_non_unit_quaternion_flagged(self, tiny_scene):
        cloud = tiny_scene.gt_cloud.detach_clone()
        cloud.rotations[0] = torch.tensor([2.0, 0.0, 0.0, 0.0])
        violations = validate_cloud(cloud)
        assert any("quaternion" in v for v in violations)

    def test_nan_flagged(self, tiny_scene):
        cloud = tiny_scene.gt_cloud.detach_clone()
        cloud.positions[0, 0] = float("nan")
        assert any("non-finite" in v for v in validate_cloud(cloud))

    def test_camera_time_out_of_range(self, tiny_scene):
        bundle = copy.copy(tiny_scene.bundle)
        bundle.cameras = [copy.deepcopy(c) for c in bundle.cameras]
        bundle.cameras[0].t = 1.5
        assert any("out of [0,1]" in v for v in validate_bundle(bundle))

    def test_frame_camera_count_mismatch(self, tiny_scene):
        bundle = copy.copy(tiny_scene.bundle)
        bundle.cameras = bundle.cameras[:-1]
        assert any("mismatch" in v for v in validate_bundle(bundle))

    def test_duplicate_object_id(self, tiny_scene):
        bundle = copy.copy(tiny_scene.bundle)
        bundle.mask_tracks = list(bundle.mask_tracks) + [bundle.mask_tracks[0]]
        assert any("duplicate" in v for v in validate_bundle(bundle))

    def test_bad_embedding_norm(self, tiny_scene):
        bundle = copy.copy(tiny_scene.bundle)
        bundle.caption_records = [copy.deepcopy(r) for r in bundle.caption_records]
        bundle.caption_records[0].embedding = bundle.caption_records[0].embedding * 2
        assert any("norm" in v for v in validate_bundle(bundle))

    def test_track_lookup(self, tiny_scene):
        bundle = tiny_scene.bundle
        assert bundle.track_for(1).object_id == 1
        with pytest.raises(KeyError):
            bundle.track_for(99)
        assert bundle.caption_record(1, 0) is not None
        assert bundle.caption_record(99, 0) is None
