"""Decoder tests: soft-masked attention limit behavior, image-feature
gathering bounds, block/decode structure, assembly rules, and the
permutation/bit-identity invariants."""

import numpy as np
import pytest

from pano4d import autodiff as ad
from pano4d import decoder as dec
from pano4d import encoder as enc
from pano4d import geometry as geo
from pano4d import synthworld as sw
from pano4d.autodiff import Tensor

D = 16
T = 8


@pytest.fixture(scope="module")
def scene():
    return sw.generate_scene(
        sw.SceneConfig(frames=3, actors_min=2, actors_max=2, ground_points=120,
                       wall_points=50, points_per_actor=40), seed=21)


@pytest.fixture(scope="module")
def enc_params():
    return enc.init_encoder_params(D, np.random.default_rng(1))


@pytest.fixture(scope="module")
def dec_params(scene):
    c = len(scene.config.classes)
    return dec.init_decoder_params(D, T, c, np.random.default_rng(2))


@pytest.fixture(scope="module")
def encoded(scene, enc_params):
    clip = scene.clip(1)
    return clip, enc.encode_clip(clip, scene.images[1], scene.cameras,
                                 enc_params, D, 0.3)


class TestMaskedAttention:
    def test_identical_keys_alpha_zero_gives_value_mean(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.normal(size=(4, D)))
        keys = Tensor(np.tile(rng.normal(size=(1, D)), (6, 1)))
        values = Tensor(rng.normal(size=(6, D)))
        bias = Tensor(rng.normal(size=(6, 4)))
        out = dec.masked_attention(q, keys, values, None, bias, Tensor(0.0), D)
        np.testing.assert_allclose(out.data, np.tile(values.data.mean(0), (4, 1)),
                                   atol=1e-12)

    def test_large_alpha_one_hot_selects_value_row(self):
        rng = np.random.default_rng(4)
        n = 10
        q = Tensor(rng.normal(size=(3, D)))
        keys = Tensor(rng.normal(size=(n, D)))
        values = Tensor(rng.normal(size=(n, D)))
        onehot = np.zeros((n, 3))
        picks = [7, 2, 5]
        for t, j in enumerate(picks):
            onehot[j, t] = 1.0
        out = dec.masked_attention(q, keys, values, None, Tensor(onehot),
                                   Tensor(1000.0), D)
        for t, j in enumerate(picks):
            assert np.max(np.abs(out.data[t] - values.data[j])) < 1e-6

    def test_attention_rows_convex(self):
        # outputs stay inside the convex hull of value rows per dimension
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(4, D)))
        keys = Tensor(rng.normal(size=(9, D)))
        values = Tensor(rng.normal(size=(9, D)))
        out = dec.masked_attention(q, keys, values, None, None, None, D)
        assert np.all(out.data <= values.data.max(0) + 1e-12)
        assert np.all(out.data >= values.data.min(0) - 1e-12)

    def test_misaligned_bias_rejected(self):
        q = Tensor(np.zeros((2, D)))
        kv = Tensor(np.zeros((5, D)))
        with pytest.raises(ad.ShapeError, match="bias rows"):
            dec.masked_attention(q, kv, kv, None, Tensor(np.zeros((4, 2))),
                                 Tensor(1.0), D)


class TestGatherImageFeatures:
    def test_counts_bounded_and_tagged(self, scene, enc_params, encoded):
        _, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        for stride in (1, 2, 4, 8):
            rows = dec.gather_image_features(out.pyramid, stride, pyr,
                                             scene.cameras, D)
            n_i = out.pyramid.grids[stride].num_voxels
            if rows.features is None:
                continue
            assert rows.num_rows <= 2 * n_i
            assert rows.voxel_tags.shape == (rows.num_rows,)
            assert rows.encodings.shape == (rows.num_rows, D)

    def test_count_matches_projection_loop(self, scene, enc_params, encoded):
        _, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        stride = 4
        rows = dec.gather_image_features(out.pyramid, stride, pyr, scene.cameras, D)
        centers = out.pyramid.grids[stride].centers()
        projectable = 0
        for c in centers:
            for cam in scene.cameras:
                _, valid = geo.project(c[None, :], cam)
                if valid[0]:
                    projectable += 1
                    break
        assert rows.num_rows == 2 * projectable

    def test_voxel_in_both_maps_shares_tag(self, scene, enc_params, encoded):
        _, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        rows = dec.gather_image_features(out.pyramid, 8, pyr, scene.cameras, D)
        tags, counts = np.unique(rows.voxel_tags, return_counts=True)
        assert np.all(counts == 2)

    def test_no_cameras_degenerates(self, encoded):
        _, out = encoded
        rows = dec.gather_image_features(out.pyramid, 8,
                                         enc.ImagePyramid([], []), [], D)
        assert rows.num_rows == 0


class TestFusionBlockAndDecode:
    def test_zero_params_pass_through_up_to_layer_norm(self, encoded):
        clip, out = encoded
        params = dec.init_decoder_params(D, T, 4, np.random.default_rng(6))
        zeroed = {}
        for k, v in params.items():
            if k.endswith(".ln.g"):
                zeroed[k] = Tensor(np.ones_like(v.data))
            elif k.endswith((".w", ".b", ".wq", ".wk", ".wv")) or k.endswith("alpha"):
                zeroed[k] = Tensor(np.zeros_like(v.data))
            else:
                zeroed[k] = Tensor(np.zeros_like(v.data))
        rng = np.random.default_rng(7)
        q0 = rng.normal(size=(T, D))
        q0 = (q0 - q0.mean(1, keepdims=True)) / q0.std(1, ddof=0, keepdims=True)
        vox_enc = np.zeros((out.pyramid.grids[8].num_voxels, D))
        res = dec.fusion_block(Tensor(q0), out.z, out.voxel_features[8], vox_enc,
                               dec.ImageRows(None, None, None), out.pyramid, 8,
                               zeroed, 0, D)
        np.testing.assert_allclose(res.data, q0, atol=1e-3)

    def test_decode_returns_four_query_sets(self, scene, enc_params, dec_params, encoded):
        clip, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        blocks = dec.decode(dec_params, out, pyr, scene.cameras, D)
        assert len(blocks) == 4
        for q in blocks:
            assert q.shape == (T, D)

    def test_decode_deterministic(self, scene, enc_params, dec_params, encoded):
        clip, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        a = dec.decode(dec_params, out, pyr, scene.cameras, D)[-1].data
        b = dec.decode(dec_params, out, pyr, scene.cameras, D)[-1].data
        assert a.tobytes() == b.tobytes()

    def test_query_permutation_equivariance(self, scene, enc_params, dec_params, encoded):
        clip, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        base = dec.decode(dec_params, out, pyr, scene.cameras, D)[-1].data
        perm = np.random.default_rng(8).permutation(T)
        permuted = dict(dec_params)
        permuted["dec.queries"] = Tensor(dec_params["dec.queries"].data[perm])
        got = dec.decode(permuted, out, pyr, scene.cameras, D)[-1].data
        np.testing.assert_allclose(got, base[perm], atol=1e-9)

    def test_missing_stride_rejected(self, scene, enc_params, dec_params, encoded):
        clip, out = encoded
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        crippled = enc.EncoderOutput(
            z=out.z,
            voxel_features={s: v for s, v in out.voxel_features.items() if s != 2},
            pyramid=out.pyramid, fusion_terms=[])
        with pytest.raises(ValueError, match="stride 2"):
            dec.decode(dec_params, crippled, pyr, scene.cameras, D)

    def test_alpha_zero_bit_identical_to_disabled_bias(self, scene, enc_params, encoded):
        clip, out = encoded
        params = dec.init_decoder_params(D, T, 4, np.random.default_rng(9))
        zero_alpha = dict(params)
        for b in range(4):
            zero_alpha[f"dec.b{b}.alpha"] = Tensor(np.array(0.0), requires_grad=True)
        pyr = enc.encode_images(scene.images[1], enc_params, D)
        with_bias = dec.decode(zero_alpha, out, pyr, scene.cameras, D)[-1].data
        without = dec.decode(zero_alpha, out, pyr, scene.cameras, D,
                             mask_bias_enabled=False)[-1].data
        assert with_bias.tobytes() == without.tobytes()

    def test_voxel_storage_order_invariance(self, scene, enc_params, dec_params, encoded):
        clip, out = encoded
        pyr_img = enc.encode_images(scene.images[1], enc_params, D)
        base = dec.decode(dec_params, out, pyr_img, scene.cameras, D)[-1].data

        # permute the stride-8 voxel rows consistently
        rng = np.random.default_rng(10)
        g8 = out.pyramid.grids[8]
        perm = rng.permutation(g8.num_voxels)
        inv = np.argsort(perm)
        pyr2 = geo.VoxelPyramid(
            grids=dict(out.pyramid.grids), parent_maps=dict(out.pyramid.parent_maps))
        pyr2.grids[8] = geo.VoxelGrid(8, g8.voxel_size, g8.coords[perm])
        pyr2.parent_maps[4] = inv[out.pyramid.parent_maps[4]]
        out2 = enc.EncoderOutput(
            z=out.z,
            voxel_features={**out.voxel_features,
                            8: Tensor(out.voxel_features[8].data[perm])},
            pyramid=pyr2, fusion_terms=[])
        got = dec.decode(dec_params, out2, pyr_img, scene.cameras, D)[-1].data
        np.testing.assert_allclose(got, base, atol=1e-9)


class TestHeads:
    def test_mask_logits_hand_product(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(3, 4))
        q = rng.normal(size=(2, 4))
        got = dec.predict_masks(Tensor(q), Tensor(z)).data
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                want[i, j] = float(np.dot(z[i], q[j]))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_orthogonal_rows_zero_logit(self):
        z = np.array([[1.0, 0.0]])
        q = np.array([[0.0, 1.0]])
        assert dec.predict_masks(Tensor(q), Tensor(z)).data[0, 0] == 0.0

    def test_orthonormal_identity_diagonal(self):
        q = np.eye(4)
        got = dec.predict_masks(Tensor(q), Tensor(q)).data
        np.testing.assert_array_equal(got, np.eye(4))

    def test_zero_head_uniform_probs(self):
        params = {
            "head.cls.w": Tensor(np.zeros((D, 5))),
            "head.cls.b": Tensor(np.zeros(5)),
        }
        logits = dec.predict_classes(Tensor(np.random.default_rng(12).normal(size=(T, D))), params)
        probs = ad.softmax(logits).data
        np.testing.assert_allclose(probs, np.full((T, 5), 0.2), atol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(T), atol=1e-9)


def _toy_clip(n0=3, n1=4):
    n = n0 + n1
    rng = np.random.default_rng(13)
    return sw.PointCloudClip(
        xyz=rng.normal(size=(n, 3)),
        intensity=np.zeros(n), timestamps=np.concatenate([np.full(n0, -1.0), np.zeros(n1)]),
        class_ids=np.zeros(n, np.int64), track_ids=np.zeros(n, np.int64),
        frame_index=np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)]),
        frame_numbers=(4, 5))


class TestAssembly:
    CFG = sw.SceneConfig()

    def test_single_thing_query_covers_all(self):
        clip = _toy_clip()
        n = clip.num_points
        mask = np.full((n, 2), 5.0)
        cls = np.zeros((2, 5))
        cls[0, 2] = 8.0  # crate (thing, palette index 2)
        cls[1, 4] = 8.0  # no-object
        got = dec.assemble_panoptic(mask, cls, np.zeros((2, D)), clip, self.CFG, 1)
        assert np.all(got.class_ids == 3)
        assert np.all(got.track_ids == 1)
        assert len(got.tracklets) == 1
        assert got.tracklets[0].frame_range == (4, 5)

    def test_disjoint_one_hot_masks_partition(self):
        clip = _toy_clip(2, 3)
        n = clip.num_points
        mask = np.full((n, 2), -5.0)
        mask[:2, 0] = 5.0
        mask[2:, 1] = 5.0
        cls = np.zeros((2, 5))
        cls[0, 2] = 8.0
        cls[1, 3] = 8.0  # cart
        got = dec.assemble_panoptic(mask, cls, np.zeros((2, D)), clip, self.CFG, 1)
        # brute-force expectation over the 5 points
        probs = np.exp(cls - cls.max(1, keepdims=True))
        probs /= probs.sum(1, keepdims=True)
        for i in range(n):
            scores = [probs[q, probs[q, :-1].argmax()] / (1 + np.exp(-mask[i, q]))
                      for q in range(2)]
            q_star = int(np.argmax(scores))
            assert got.class_ids[i] == (3 if q_star == 0 else 4)
        assert set(np.unique(got.track_ids)) == {1, 2}

    def test_all_no_object_fallback(self):
        clip = _toy_clip()
        n = clip.num_points
        cls = np.zeros((3, 5))
        cls[:, 4] = 9.0
        got = dec.assemble_panoptic(np.zeros((n, 3)), cls, np.zeros((3, D)),
                                    clip, self.CFG, 1)
        assert np.all(got.class_ids == 1)
        assert np.all(got.track_ids == 0)
        assert got.tracklets == []

    def test_total_labeling(self):
        rng = np.random.default_rng(14)
        clip = _toy_clip(5, 5)
        mask = rng.normal(size=(10, 4))
        cls = rng.normal(size=(4, 5))
        got = dec.assemble_panoptic(mask, cls, np.zeros((4, D)), clip, self.CFG, 1)
        palette = {c.id for c in self.CFG.classes}
        assert set(np.unique(got.class_ids)) <= palette
        thing = {c.id for c in self.CFG.thing_classes()}
        is_thing = np.isin(got.class_ids, list(thing))
        assert np.all(got.track_ids[is_thing] > 0)
        assert np.all(got.track_ids[~is_thing] == 0)

    def test_constant_class_logit_shift_invariant(self):
        rng = np.random.default_rng(15)
        clip = _toy_clip(5, 5)
        mask = rng.normal(size=(10, 4))
        cls = rng.normal(size=(4, 5))
        a = dec.assemble_panoptic(mask, cls, np.zeros((4, D)), clip, self.CFG, 1)
        b = dec.assemble_panoptic(mask, cls + 3.7, np.zeros((4, D)), clip, self.CFG, 1)
        np.testing.assert_array_equal(a.class_ids, b.class_ids)
        np.testing.assert_array_equal(a.track_ids, b.track_ids)

    def test_stuff_query_no_track(self):
        clip = _toy_clip()
        n = clip.num_points
        cls = np.zeros((1, 5))
        cls[0, 0] = 9.0  # ground (stuff)
        got = dec.assemble_panoptic(np.full((n, 1), 4.0), cls, np.zeros((1, D)),
                                    clip, self.CFG, 2)
        assert np.all(got.class_ids == 1)
        assert np.all(got.track_ids == 0)
        assert got.tracklets == []
