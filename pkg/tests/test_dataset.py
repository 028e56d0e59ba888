import math

import numpy as np
import pytest

from posemetric.dataset import (
    FeatureMaps,
    ReferenceSetDesign,
    ViewingSphere,
    build_reference_poses,
    flip_signs,
    generate_dataset,
    grid_size,
    load_jsonl,
    reference_arrays,
    save_jsonl,
)
from posemetric.pose_math import EulerPose


def small(seed=3, n=200, **kw):
    kw.setdefault("subcategory_mix", {"sedan": 0.75, "van": 0.25})
    return generate_dataset(seed, n, ["car"], **kw)


class TestGenerate:
    def test_deterministic(self):
        a, b = small(), small()
        for x, y in zip(a, b):
            assert x.to_json() == y.to_json()
            assert x.camera_feat.tobytes() == y.camera_feat.tobytes()

    def test_seed_changes_data(self):
        assert small(seed=1)[0].to_json() != small(seed=2)[0].to_json()

    def test_noise_free_equal_pose_equal_camera(self):
        data = small(noise_sigma=0.0, n=50)
        maps = FeatureMaps(16)
        s = data[0]
        offsets = maps.offset(s.category) + maps.offset(s.subcategory)
        twin = maps.camera(s.pose.as_array(), offsets)[0]
        assert twin.tobytes() == s.camera_feat.tobytes()

    def test_render_depends_on_pose_only(self):
        data = small(n=100, subcategory_mix={"sedan": 1, "van": 1})
        maps = FeatureMaps(16)
        for s in data[:20]:
            assert maps.render(s.pose.as_array())[0].tobytes() == s.render_feat.tobytes()

    def test_subcategory_mix(self):
        data = small(n=1000)
        sedans = sum(s.subcategory == "sedan" for s in data)
        assert 700 <= sedans <= 800

    def test_poses_inside_sphere(self):
        sphere = ViewingSphere()
        for prior in ("natural", "uniform"):
            data = small(n=300, pose_prior=prior)
            assert all(sphere.contains(s.pose) for s in data)

    def test_levels_start_at_l0(self):
        assert {s.occlusion_level for s in small(n=30)} == {"L0"}

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(categories=[]),
            dict(sphere=ViewingSphere((0, 0), (0, 0), (0, 0))),
            dict(subcategory_mix={"a": 0.0}),
            dict(subcategory_mix={"a": -1.0, "b": 2.0}),
        ],
    )
    def test_rejects_bad_input(self, kwargs):
        base = dict(seed=0, n_samples=5, categories=["car"], subcategory_mix={"a": 1.0})
        base.update(kwargs)
        with pytest.raises(ValueError):
            generate_dataset(**base)


class TestFeatureMaps:
    def test_flip_is_sign_pattern(self, rng):
        maps = FeatureMaps(16)
        angles = np.column_stack(
            [rng.uniform(0, 2 * np.pi, 50), rng.uniform(-0.5, 1.0, 50), rng.uniform(-0.5, 0.5, 50)]
        )
        mirrored = angles * np.array([-1.0, 1.0, -1.0])
        offsets = maps.offset("van")
        signs = flip_signs(16)
        np.testing.assert_allclose(maps.render(mirrored), maps.render(angles) * signs, atol=1e-12)
        np.testing.assert_allclose(
            maps.camera(mirrored, offsets), maps.camera(angles, offsets) * signs, atol=1e-12
        )

    def test_camera_and_render_maps_differ(self):
        maps = FeatureMaps(16)
        a = np.array([[0.3, 0.1, 0.0]])
        assert not np.allclose(maps.camera(a), maps.render(a))
        shared = FeatureMaps(16, shared=True)
        np.testing.assert_array_equal(shared.camera(a, shared.offset("van")), shared.render(a))

    def test_distinct_poses_distinct_features(self, rng):
        maps = FeatureMaps(16)
        angles = np.radians(
            np.column_stack([rng.uniform(0, 360, 400), rng.uniform(-30, 60, 400), rng.uniform(-30, 30, 400)])
        )
        feats = maps.render(angles)
        d = np.linalg.norm(feats[:, None] - feats[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-4


class TestReferenceSets:
    def test_traindb_one_entry_per_sample(self):
        train = small(n=2700)
        refs = build_reference_poses(ReferenceSetDesign("TrainDB"), train)
        assert len(refs) == 2700
        assert refs[5][0] == train[5].pose

    def test_traindb_requires_training_data(self):
        with pytest.raises(ValueError):
            build_reference_poses(ReferenceSetDesign("TrainDB"), [])

    def test_reduced_coarse_grid(self):
        sphere = ViewingSphere((0, 10), (0, 0), (0, 0))
        refs = build_reference_poses(ReferenceSetDesign("CoarseDB"), None, sphere)
        assert [round(p.degrees()[0], 9) for p, _ in refs] == [0.0, 5.0, 10.0]

    def test_full_scale_grid_sizes(self):
        sphere = ViewingSphere()
        coarse, fine = ReferenceSetDesign("CoarseDB"), ReferenceSetDesign("FineDB")
        assert grid_size(coarse, sphere) == 72 * 19 * 13
        assert grid_size(fine, sphere) == 360 * 19 * 13
        # published table sizes count ten CAD models per pose
        assert round(grid_size(coarse, sphere, n_models=10), -3) == 178_000
        assert round(grid_size(fine, sphere, n_models=10), -3) == 889_000
        angles, feats, ids = reference_arrays(fine, None, sphere)
        assert len(angles) == grid_size(fine, sphere) == len(feats) == len(ids)
        assert np.degrees(angles[:, 0]).max() < 360.0

    def test_step_must_divide_range(self):
        with pytest.raises(ValueError):
            reference_arrays(ReferenceSetDesign("CoarseDB"), None, ViewingSphere((0, 12), (0, 0), (0, 0)))


def test_jsonl_round_trip(tmp_path):
    data = small(n=20)
    data[3].occlusion_level, data[3].occlusion_ratio = "L2", 0.4375
    path = tmp_path / "d.jsonl"
    save_jsonl(data, path)
    back = load_jsonl(path)
    for a, b in zip(data, back):
        assert a.to_json() == b.to_json()
        assert a.camera_feat.tobytes() == b.camera_feat.tobytes()
    assert back[3].occlusion_level == "L2"


def test_pose_mirrored_in_range():
    p = EulerPose.from_degrees(10, 20, 25).mirrored()
    assert ViewingSphere().contains(p)
    assert math.isclose(p.degrees()[0], 350.0)
