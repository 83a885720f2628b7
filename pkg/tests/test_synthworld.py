"""Scene generator tests: determinism, ground-truth consistency (point-in-box
oracle, label partition), augmentation rules, dataset round trips, and
image/geometry agreement."""

import numpy as np
import pytest

from pano4d import synthworld as sw
from pano4d.errors import ConfigError, FormatError
from pano4d.geometry import project


@pytest.fixture(scope="module")
def scene():
    return sw.generate_scene(sw.SceneConfig(frames=5, actors_min=2, actors_max=3), seed=7)


class TestGeneration:
    def test_fixed_seed_identical(self):
        cfg = sw.SceneConfig(frames=3)
        a = sw.generate_scene(cfg, seed=11)
        b = sw.generate_scene(cfg, seed=11)
        assert sw.scene_equal(a, b)

    def test_different_seed_differs(self):
        cfg = sw.SceneConfig(frames=3)
        a = sw.generate_scene(cfg, seed=1)
        b = sw.generate_scene(cfg, seed=2)
        assert not sw.scene_equal(a, b)

    def test_zero_actors_only_stuff(self):
        cfg = sw.SceneConfig(frames=3, actors_min=0, actors_max=0)
        scene = sw.generate_scene(cfg, seed=3)
        for frame in scene.frames:
            assert np.all(frame.track_ids == 0)

    def test_thing_points_inside_actor_box(self, scene):
        for f, frame in enumerate(scene.frames):
            for actor in scene.actors:
                sel = frame.track_ids == actor.track_id
                if not sel.any():
                    assert not actor.visible[f]
                    continue
                inside = sw.point_in_box(frame.xyz[sel].astype(np.float64), actor, f,
                                         tol=1e-5)
                assert inside.all()

    def test_labels_partition(self, scene):
        ids = {c.id for c in scene.config.classes}
        thing_ids = {c.id for c in scene.config.thing_classes()}
        for frame in scene.frames:
            assert set(np.unique(frame.class_ids)) <= ids
            is_thing = np.isin(frame.class_ids, list(thing_ids))
            assert np.all(frame.track_ids[is_thing] > 0)
            assert np.all(frame.track_ids[~is_thing] == 0)

    def test_track_ids_temporally_consistent(self, scene):
        # the same actor id always refers to the same class
        seen = {}
        for frame in scene.frames:
            for tid in np.unique(frame.track_ids[frame.track_ids > 0]):
                cls = np.unique(frame.class_ids[frame.track_ids == tid])
                assert len(cls) == 1
                if tid in seen:
                    assert seen[tid] == cls[0]
                seen[tid] = cls[0]

    def test_infeasible_config_rejected(self):
        with pytest.raises(ConfigError, match="classes"):
            sw.generate_scene(sw.SceneConfig(classes=[]), seed=0)
        with pytest.raises(ConfigError, match="frames"):
            sw.generate_scene(sw.SceneConfig(frames=1), seed=0)

    def test_occlusion_windows_recorded(self):
        cfg = sw.SceneConfig(frames=8, actors_min=4, actors_max=4,
                             occlusion_prob=1.0)
        scene = sw.generate_scene(cfg, seed=5)
        for actor in scene.actors:
            hidden = np.flatnonzero(~actor.visible)
            assert 1 <= len(hidden) <= 3
            assert actor.visible[0] and actor.visible[-1]
            # contiguous window
            assert np.all(np.diff(hidden) == 1) if len(hidden) > 1 else True
            for f in hidden:
                assert not np.any(scene.frames[f].track_ids == actor.track_id)


class TestImages:
    def test_points_land_in_silhouette(self, scene):
        hits = 0
        total = 0
        for f, frame in enumerate(scene.frames):
            for actor in scene.actors:
                sel = frame.track_ids == actor.track_id
                if not sel.any():
                    continue
                pts = frame.xyz[sel].astype(np.float64)
                for cam in scene.cameras:
                    sil = sw.actor_silhouette(actor, f, cam)
                    if sil is None:
                        continue
                    uvz, valid = project(pts, cam)
                    for u, v, _ in uvz[valid]:
                        total += 1
                        hits += bool(sil[int(v), int(u)])
        assert total > 50, "scene should have visible actors"
        assert hits / total >= 0.95

    def test_render_deterministic(self, scene):
        img = sw.render_frame(scene.actors, 0, scene.cameras[0])
        assert np.array_equal(img, scene.images[0][0])

    def test_brightness_jitter(self):
        img = np.full((4, 4, 3), 100, dtype=np.uint8)
        out = sw.jitter_brightness(img, 1.5)
        assert np.all(out == 150)
        assert sw.jitter_brightness(img, 10.0).max() == 255


class TestClip:
    def test_clip_timestamps(self, scene):
        clip = scene.clip(1)
        n0 = scene.frames[0].num_points
        assert np.all(clip.timestamps[:n0] == -1.0)
        assert np.all(clip.timestamps[n0:] == 0.0)
        assert clip.frame_numbers == (0, 1)

    def test_clip_out_of_range(self, scene):
        with pytest.raises(IndexError):
            scene.clip(0)
        with pytest.raises(IndexError):
            scene.clip(scene.num_frames)


class TestAugment:
    def test_identity(self, scene):
        clip = scene.clip(1)
        out = sw.augment_clip(
            clip, sw.AugmentParams(rotation_max=0.0, jitter_sigma=0.0,
                                   point_budget=clip.num_points), seed=0)
        np.testing.assert_array_equal(out.xyz, clip.xyz)
        np.testing.assert_array_equal(out.class_ids, clip.class_ids)

    def test_quarter_turn(self):
        out = np.array([[1.0, 0.0, 0.0]]) @ sw._rot_z(np.pi / 2).T
        np.testing.assert_allclose(out[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_budget_subsample(self, scene):
        clip = scene.clip(1)
        out = sw.augment_clip(clip, sw.AugmentParams(point_budget=50), seed=1)
        assert out.num_points == 50
        assert out.class_ids.shape == (50,)

    def test_bad_budget_rejected(self, scene):
        with pytest.raises(ConfigError):
            sw.augment_clip(scene.clip(1), sw.AugmentParams(point_budget=0), seed=0)

    def test_deterministic(self, scene):
        clip = scene.clip(1)
        p = sw.AugmentParams(rotation_max=1.0, jitter_sigma=0.01, point_budget=100)
        a = sw.augment_clip(clip, p, seed=9)
        b = sw.augment_clip(clip, p, seed=9)
        np.testing.assert_array_equal(a.xyz, b.xyz)


class TestDatasetIO:
    def test_round_trip(self, scene, tmp_path):
        out = str(tmp_path / "scene")
        sw.write_dataset(scene, out)
        loaded = sw.read_dataset(out)
        assert sw.scene_equal(scene, loaded)

    def test_missing_frame_file_named(self, scene, tmp_path):
        out = str(tmp_path / "scene")
        sw.write_dataset(scene, out)
        (tmp_path / "scene" / "points_1.bin").unlink()
        with pytest.raises(FormatError, match="points_1.bin"):
            sw.read_dataset(out)

    def test_corrupt_magic(self, scene, tmp_path):
        out = str(tmp_path / "scene")
        sw.write_dataset(scene, out)
        p = tmp_path / "scene" / "points_0.bin"
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            sw.read_dataset(out)

    def test_truncated_reports_offset(self, scene, tmp_path):
        out = str(tmp_path / "scene")
        sw.write_dataset(scene, out)
        p = tmp_path / "scene" / "labels_0.bin"
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError, match="offset"):
            sw.read_dataset(out)
