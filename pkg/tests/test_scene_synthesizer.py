import itertools
import json
import math

import numpy as np
import pytest

from herdkit.body_model import pose_mesh, rodrigues
from herdkit.projection import PerspectiveCamera, bbox_from_points, project
from herdkit.scene_synthesizer import (
    LayoutConfig,
    LayoutError,
    SceneAnnotation,
    SchemaError,
    assemble_scene,
    derive_instances,
    derive_scene_seed,
    dumps_scene,
    loads_scene,
    make_pose_pool,
    make_shape_pool,
    occlusion_stats,
    orientation_matrix,
    rasterize,
    sample_layout,
    sample_orientation,
    scene_to_dict,
    splitmix64,
    with_instances,
)


@pytest.fixture(scope="module")
def pools(desk_template):
    return make_pose_pool(desk_template), make_shape_pool(desk_template)


def _scene(template, pools, seed=0, index=0, config=LayoutConfig()):
    return assemble_scene(template, pools[0], pools[1], config, seed, index)


class TestSeeds:
    def test_splitmix_reference_vector(self):
        # first output of the reference generator seeded with 1234567
        assert splitmix64(1234567) == 6457827717110365317

    def test_scene_seed_composition(self):
        expect = splitmix64(splitmix64(42) ^ 7) >> 1
        assert derive_scene_seed(42, 7) == expect
        assert 0 <= derive_scene_seed(2**64 - 1, 3) < 2**63

    def test_distinct(self):
        seeds = {derive_scene_seed(0, i) for i in range(5000)}
        assert len(seeds) == 5000


class TestLayout:
    def test_eight_bins(self):
        cfg = LayoutConfig(n_horizontal_bins=8, min_animals=1, max_animals=4)
        rng = np.random.default_rng(0)
        for _ in range(200):
            bins = sorted(p.bin for p in sample_layout(4, cfg, rng))
            assert all(b - a >= 2 for a, b in zip(bins, bins[1:]))
            assert 0 <= bins[0] and bins[-1] < 8
        assert len(sample_layout(1, cfg, rng)) == 1
        with pytest.raises(LayoutError):
            sample_layout(5, cfg, rng)
        with pytest.raises(LayoutError):
            LayoutConfig(n_horizontal_bins=8, max_animals=5)

    def test_default_bins_fit_eight(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            bins = sorted(p.bin for p in sample_layout(8, LayoutConfig(), rng))
            assert all(b - a >= 2 for a, b in zip(bins, bins[1:]))

    def test_non_adjacent_subsets_uniform(self):
        # 2 animals in 5 bins: the 6 non-adjacent pairs should be equally likely
        cfg = LayoutConfig(n_horizontal_bins=5, min_animals=1, max_animals=2)
        allowed = [c for c in itertools.combinations(range(5), 2) if c[1] - c[0] >= 2]
        rng = np.random.default_rng(2)
        counts = dict.fromkeys(allowed, 0)
        n = 12000
        for _ in range(n):
            counts[tuple(sorted(p.bin for p in sample_layout(2, cfg, rng)))] += 1
        for c in counts.values():
            assert abs(c / n - 1 / 6) < 0.015

    def test_placement_ranges(self):
        cfg = LayoutConfig()
        rng = np.random.default_rng(3)
        edges = cfg.bin_edges()
        for _ in range(300):
            places = sample_layout(int(rng.integers(1, 9)), cfg, rng)
            raw = [p.tz_raw for p in places]
            assert max(raw) - min(raw) <= cfg.depth_span_max
            for p in places:
                assert edges[p.bin] <= p.tx_raw <= edges[p.bin + 1]
                a, b = cfg.intervals()[p.depth_interval]
                assert a <= p.tz_raw <= b
                assert max(abs(j) for j in p.jitter) <= cfg.jitter_xz
                assert cfg.tz_range[0] <= p.tz <= cfg.tz_range[1]
                assert p.ty == 0.0

    def test_bad_config(self):
        with pytest.raises(LayoutError):
            LayoutConfig(min_animals=3, max_animals=2)
        with pytest.raises(LayoutError):
            LayoutConfig(tz_range=(10.0, 5.0))
        with pytest.raises(LayoutError):
            LayoutConfig(depth_intervals=((0.0, 100.0),))


class TestOrientation:
    def test_statistics(self):
        rng = np.random.default_rng(4)
        draws = np.array([sample_orientation(LayoutConfig(), rng) for _ in range(10000)])
        pitch, yaw = draws.T
        assert abs(yaw.mean() - 180.0) <= 5.0
        assert yaw.min() >= 0 and yaw.max() <= 360
        assert pitch.min() >= -15 and pitch.max() <= 15
        assert abs(pitch.mean()) <= 0.5

    def test_matrix(self):
        # yaw 90 about +y sends +x to -z; pitch 90 about +z sends +x to +y
        assert np.allclose(orientation_matrix(90, 0) @ [1, 0, 0], [0, 0, -1], atol=1e-15)
        assert np.allclose(orientation_matrix(0, 90) @ [1, 0, 0], [0, 1, 0], atol=1e-15)
        R = orientation_matrix(30, 10)
        assert np.allclose(R, rodrigues([0, math.radians(30), 0]) @ rodrigues([0, 0, math.radians(10)]))


class TestAssemble:
    def test_deterministic_bytes(self, desk_template, pools):
        a = dumps_scene(_scene(desk_template, pools, 5, 3))
        b = dumps_scene(_scene(desk_template, pools, 5, 3))
        assert a == b
        assert dumps_scene(_scene(desk_template, pools, 5, 4)) != a

    def test_counts_and_layout_record(self, desk_template, pools):
        cfg = LayoutConfig(min_animals=2, max_animals=5)
        for i in range(30):
            s = _scene(desk_template, pools, 1, i, cfg)
            assert 2 <= len(s.instances) <= 5
            for inst in s.instances:
                assert inst.layout["ty"] == 0.0
                assert inst.translation[1] == cfg.ground_offset
                assert inst.layout["pose_id"].startswith("pose_")

    def test_derivation_consistency(self, desk_template, pools):
        t = desk_template
        s = _scene(t, pools, 9, 0)
        for inst in s.instances:
            mesh = pose_mesh(t, inst.shape, inst.pose, inst.translation)
            assert np.allclose(mesh.keypoints3d, inst.keypoints3d, atol=1e-12)
            uv, valid = project(inst.keypoints3d, s.camera)
            assert np.allclose(uv[valid], inst.keypoints2d[valid], atol=1e-9)
            vuv, vvalid = project(mesh.vertices, s.camera)
            assert inst.bbox == bbox_from_points(vuv, s.image_size, vvalid)

    def test_orientation_in_root(self, desk_template, pools):
        s = _scene(desk_template, pools, 2, 1)
        for inst in s.instances:
            # pool roots are neutral, so the root rotation is the orientation alone
            assert np.allclose(rodrigues(inst.pose[0]), orientation_matrix(inst.yaw_deg, inst.pitch_deg), atol=1e-9)

    def test_empty_pools(self, desk_template):
        with pytest.raises(ValueError):
            assemble_scene(desk_template, [], make_shape_pool(desk_template))


def _spec(template, x, z, yaw=0.0):
    pose = np.zeros((template.n_joints, 3))
    pose[0] = [0.0, math.radians(yaw), 0.0]
    return dict(species_tag="s", shape=np.zeros(template.n_betas), pose=pose,
                translation=np.array([x, 0.3, z]), yaw_deg=yaw, pitch_deg=0.0)


class TestOcclusion:
    cam = PerspectiveCamera.centered()

    def test_far_apart_are_disjoint_and_visible(self, desk_template):
        insts = derive_instances(desk_template, self.cam, [_spec(desk_template, -4, 30), _spec(desk_template, 4, 30)])
        scene = SceneAnnotation(self.cam, insts, 0, 0)
        M, frac = occlusion_stats(scene)
        assert M[0, 1] == 0.0
        assert all(i.visibility.all() for i in insts)
        assert (frac == 0).all()

    def test_single(self, desk_template):
        scene = SceneAnnotation(self.cam, derive_instances(desk_template, self.cam, [_spec(desk_template, 0, 20)]), 0, 0)
        M, frac = occlusion_stats(scene)
        assert M.tolist() == [[1.0]] and frac.tolist() == [0.0]

    def test_duplicate(self, desk_template):
        spec = _spec(desk_template, 0, 20)
        scene = SceneAnnotation(self.cam, derive_instances(desk_template, self.cam, [spec, spec]), 0, 0)
        M, _ = occlusion_stats(scene)
        assert M[0, 1] == 1.0

    def test_front_hides_back(self, desk_template):
        t = desk_template
        specs = [_spec(t, 0.0, 10), _spec(t, 0.0, 40)]
        insts = derive_instances(t, self.cam, specs)
        _, frac = occlusion_stats(SceneAnnotation(self.cam, insts, 0, 0))
        assert frac[0] == 0.0 and insts[0].visibility.all()
        # oracle: a far keypoint is hidden exactly when it falls inside the near box
        x0, y0, x1, y1 = insts[0].bbox.xyxy()
        norm = insts[1].keypoints2d / np.array(self.cam.image_size)
        inside = (norm[:, 0] >= x0) & (norm[:, 0] <= x1) & (norm[:, 1] >= y0) & (norm[:, 1] <= y1)
        assert inside.sum() > len(inside) // 2
        assert np.array_equal(insts[1].visibility, ~inside)
        assert frac[1] == pytest.approx(inside.mean(), abs=1e-15)

    def test_behind_camera_invisible(self, desk_template):
        insts = derive_instances(desk_template, self.cam, [_spec(desk_template, 0, 20), _spec(desk_template, 200, 20)])
        assert not insts[1].visibility.any()


class TestSchema:
    def test_round_trip(self, desk_template, pools):
        s = _scene(desk_template, pools, 3, 2)
        text = dumps_scene(s)
        back = loads_scene(text)
        assert dumps_scene(back) == text
        inst = back.instances[0]
        inst.confidence = 0.25
        text2 = dumps_scene(with_instances(back, [inst]))
        assert loads_scene(text2).instances[0].confidence == 0.25

    @pytest.mark.parametrize("mutate,msg", [
        (lambda d: d.pop("camera"), "camera"),
        (lambda d: d.update(schema_version=2), "schema_version"),
        (lambda d: d["instances"][0].pop("pose"), "pose"),
        (lambda d: d["instances"][0].update(confidence=1.5), "confidence"),
        (lambda d: d["instances"][0].update(translation=[1, 2]), "translation"),
        (lambda d: d["instances"][0]["keypoints3d"].pop(), "lengths"),
    ])
    def test_errors(self, desk_template, pools, mutate, msg):
        d = scene_to_dict(_scene(desk_template, pools, 3, 2))
        mutate(d)
        with pytest.raises(SchemaError, match=msg):
            loads_scene(json.dumps(d))

    def test_bad_json(self):
        with pytest.raises(SchemaError):
            loads_scene("{not json")
        with pytest.raises(SchemaError):
            loads_scene("[]")


def test_rasterize(desk_template, pools):
    s = _scene(desk_template, pools, 0, 0)
    img = rasterize(s, desk_template, (64, 48))
    assert img.shape == (48, 64, 3)
    assert 0 <= img.min() and img.max() <= 1 and img.max() > 0
    empty = rasterize(with_instances(s, []), desk_template, (16, 16))
    assert not empty.any()
