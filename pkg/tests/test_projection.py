import json

import numpy as np
import pytest

from spgroup.data import FeatureSet, PointCloud
from spgroup.io import write_depth, write_feature_set
from spgroup.projection import CameraView, ProjectionConfig, aggregate_views, project_view

K = np.array([[100.0, 0, 32], [0, 100.0, 24], [0, 0, 1]])


def make_view(depth_mm, feats=None, pose=np.eye(4), stride=1, shape=(48, 64), dim=4):
    depth = np.full(shape, depth_mm, dtype=np.uint16)
    gh, gw = -(-shape[0] // stride), -(-shape[1] // stride)
    if feats is None:
        feats = np.arange(gh * gw * dim, dtype=np.float64).reshape(gh, gw, dim)
    return CameraView(K, pose, depth, feats, stride)


def one_point(xyz):
    return PointCloud("p", np.array([xyz], dtype=np.float64), np.zeros((1, 3)))


def test_point_on_axis_gets_principal_pixel():
    view = make_view(2000)
    f, hit = project_view(one_point([0, 0, 2.0]), view)
    assert hit[0]
    np.testing.assert_array_equal(f[0], view.features[24, 32])


def test_occluded_point_misses():
    f, hit = project_view(one_point([0, 0, 2.0]), make_view(1000))
    assert not hit[0]
    assert not f.any()


def test_point_behind_camera():
    _, hit = project_view(one_point([0, 0, -2.0]), make_view(2000))
    assert not hit[0]


def test_zero_depth_is_no_hit():
    _, hit = project_view(one_point([0, 0, 2.0]), make_view(0))
    assert not hit[0]


def test_tolerance_boundary_inclusive():
    cfg = ProjectionConfig(depth_tolerance=0.05)
    # dyadic offsets keep the comparison free of rounding
    _, hit = project_view(one_point([0, 0, 2.0625]), make_view(2000), cfg)
    assert not hit[0]
    _, hit = project_view(one_point([0, 0, 2.03125]), make_view(2000), cfg)
    assert hit[0]


def test_out_of_frame():
    _, hit = project_view(one_point([10.0, 0, 2.0]), make_view(2000))
    assert not hit[0]


def test_stride_picks_coarse_cell():
    view = make_view(2000, stride=8)
    f, hit = project_view(one_point([0, 0, 2.0]), view)
    assert hit[0]
    np.testing.assert_array_equal(f[0], view.features[24 // 8, 32 // 8])


def test_translated_camera():
    pose = np.eye(4)
    pose[:3, 3] = [1.0, 0.0, -1.0]
    view = make_view(3000, pose=pose)
    f, hit = project_view(one_point([1.0, 0.0, 2.0]), view)
    assert hit[0]
    np.testing.assert_array_equal(f[0], view.features[24, 32])


def test_two_views_average():
    a = make_view(2000, feats=np.broadcast_to([1.0, 0.0], (48, 64, 2)).copy())
    b = make_view(2000, feats=np.broadcast_to([0.0, 1.0], (48, 64, 2)).copy())
    fs = aggregate_views(one_point([0, 0, 2.0]), [a, b])
    assert fs.valid_mask[0]
    np.testing.assert_array_equal(fs.values[0], [0.5, 0.5])


def test_no_hits_masked():
    fs = aggregate_views(one_point([0, 0, -1.0]), [make_view(2000)])
    assert not fs.valid_mask[0]


def test_min_views():
    cloud = one_point([0, 0, 2.0])
    fs = aggregate_views(cloud, [make_view(2000), make_view(1000)], ProjectionConfig(min_views=2))
    assert not fs.valid_mask[0]


@pytest.mark.parametrize("bad", [
    dict(pose=np.diag([1.0, 1.0, -1.0, 1.0])),
    dict(pose=np.diag([2.0, 1.0, 1.0, 1.0])),
])
def test_bad_rotation_rejected(bad):
    with pytest.raises(ValueError, match="orthonormal"):
        make_view(2000, **bad)


def test_feature_grid_shape_checked():
    with pytest.raises(ValueError, match="feature grid"):
        CameraView(K, np.eye(4), np.zeros((48, 64)), np.zeros((48, 63, 2)))


def test_from_json(tmp_path):
    view = make_view(1500, stride=4)
    write_depth(view.depth, tmp_path / "d.dpth")
    gh, gw, dim = view.features.shape
    write_feature_set(FeatureSet(view.features.reshape(gh * gw, dim)), tmp_path / "f.feat")
    entry = {"intrinsics": K.tolist(), "extrinsics": np.eye(4).tolist(), "stride": 4,
             "depth": str(tmp_path / "d.dpth"), "features": str(tmp_path / "f.feat")}
    back = CameraView.from_json(json.loads(json.dumps(entry)))
    np.testing.assert_array_equal(back.features, view.features.astype(np.float32))
    np.testing.assert_array_equal(back.depth, view.depth)
