import math

import numpy as np
import pytest

import cylseg


def toy_config():
    cfg = cylseg.NetworkConfig()
    cfg.num_classes = 3
    cfg.base_channels = 4
    cfg.num_stages = 2
    cfg.point_mlp_widths = [8]
    grid = cylseg.CylGridSpec()
    grid.resolution = (32, 32, 8)
    cfg.grid = grid
    return cfg


def test_cart_to_cyl():
    out = cylseg.cart_to_cyl(np.array([[3.0, 4.0, 1.0], [-1.0, 0.0, 0.0]]))
    assert out[0] == pytest.approx([5.0, math.atan2(4, 3), 1.0])
    assert out[1][1] == pytest.approx(-math.pi)


def test_point_cloud_round_trip(tmp_path):
    xyz = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 2.0]])
    cloud = cylseg.PointCloud(xyz, np.array([0.5, 0.25]))
    path = tmp_path / "c.bin"
    cylseg.write_kitti_bin(path, cloud)
    back = cylseg.read_kitti_bin(path)
    assert len(back) == 2
    np.testing.assert_array_equal(back.xyz, xyz)
    assert back.labels is None
    with pytest.raises(ValueError):
        cylseg.PointCloud(np.zeros((3, 2)))


def test_labels_through_map(tmp_path):
    kitti = cylseg.LabelMap.semantic_kitti()
    assert kitti.num_classes == 19
    labels = np.arange(19, dtype=np.int32)
    path = tmp_path / "p.label"
    cylseg.write_kitti_labels(path, labels, kitti)
    np.testing.assert_array_equal(cylseg.read_kitti_labels(path, kitti), labels)


def test_partition_and_bounds():
    scene = cylseg.synthetic_scene(seed=3, num_points=3000)
    grid = cylseg.CylGridSpec()
    point_cell, cells = cylseg.assign_cells(scene, grid)
    assert point_cell.shape == (3000,)
    assert cells.shape[1] == 3
    maj = cylseg.encoding_upper_bound_miou(scene, grid, "majority", 3)
    mino = cylseg.encoding_upper_bound_miou(scene, grid, "minority", 3)
    assert 0.0 <= mino <= maj <= 1.0
    rows = cylseg.occupancy_by_distance([scene], grid, cylseg.CubicGridSpec())
    assert {r[0] for r in rows} == {"cylindrical", "cubic"}


def test_sparse_conv_identity():
    coords = np.array([[0, 0, 0], [1, 2, 3]], dtype=np.int32)
    feats = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.eye(2).reshape(1, 2, 2)
    out_c, out_f, shape = cylseg.sparse_conv(coords, feats, (4, 4, 4), (1, 1, 1), w)
    np.testing.assert_array_equal(out_c, coords)
    np.testing.assert_array_equal(out_f, feats)
    _, _, down = cylseg.sparse_conv(coords, feats, (4, 4, 4), (3, 3, 3),
                                    np.zeros((27, 2, 5)), stride=(2, 2, 2))
    assert tuple(down) == (2, 2, 2)


def test_network_train_and_checkpoint(tmp_path):
    cfg = toy_config()
    train = [cylseg.synthetic_scene(seed=i, num_points=800) for i in range(2)]
    val = [cylseg.synthetic_scene(seed=100, num_points=800)]
    result = cylseg.train(cfg, train, val, epochs=1, seed=0)
    assert len(result["iteration_losses"]) == 2
    assert all(math.isfinite(l["total"]) for l in result["iteration_losses"])
    params = result["params"]
    path = tmp_path / "m.ckpt"
    cylseg.save_checkpoint(path, cfg, params)
    cfg2, params2 = cylseg.load_checkpoint(path)
    assert cfg2.to_text() == cfg.to_text()
    assert params2 == params
    net = cylseg.Network(cfg)
    pred = net.predict(val[0], params)
    assert pred.shape == (800,)
    assert set(np.unique(pred)) <= {0, 1, 2}
    coords, voxel_logits, point_logits = net.forward(val[0], params)
    assert voxel_logits.shape == (coords.shape[0], 3)
    assert point_logits.shape == (800, 3)
    report = cylseg.evaluate(net, params, val)
    assert report["miou"] is None or 0.0 <= report["miou"] <= 1.0


def test_miou_and_cli():
    r = cylseg.miou(np.array([0, 0, 1]), np.array([0, 1, 1]), 2)
    assert r["iou"] == [0.5, 0.5]
    assert r["miou"] == 0.5
    code, _, _ = cylseg.cli([])
    assert code == 2
    with pytest.raises(ValueError):
        cylseg.NetworkConfig.from_text("nonsense = 1\n")
