import numpy as np
import pytest

from forestsurvey import reloc, se3, sensors, slam, world as worldmod

from conftest import single_tree_world


def _world_with_stems(positions, radius=0.16, extent=(40.0, 40.0)):
    terrain = worldmod.TerrainField(
        heights=np.zeros((int(extent[1]) + 1, int(extent[0]) + 1)), cell=1.0
    )
    trees = []
    for k, (x, y) in enumerate(positions):
        height = 14.0
        slope = -0.55 * radius / height
        trees.append(worldmod.TreeSpec(
            tree_id=k,
            base_xy=(x, y),
            height=height,
            taper_h=np.array([0.0, height]),
            taper_r=np.array([radius - slope * 1.3, radius + slope * (height - 1.3)]),
        ))
    return worldmod.ForestWorld(terrain=terrain, trees=trees, patches=[], seed=0)


def _dense_lidar(noise=0.0):
    base = sensors.LIDAR_PRESETS["wide-104"]
    return sensors.LidarModel(**{
        **base.__dict__, "azimuth_res_deg": 0.5, "range_noise_std": noise,
    })


STEMS = [(14.0, 20.0), (20.0, 26.0), (25.0, 19.0), (18.5, 14.5), (23.5, 23.5)]


def test_constellation_recovers_visible_stems():
    w = _world_with_stems(STEMS)
    pose = se3.pose_xyyaw(20.0, 20.0, 0.0, z=0.9)
    scan = sensors.simulate_scan(w, pose, _dense_lidar())
    desc = reloc.build_constellation(scan)
    assert len(desc) == 5
    truth = np.asarray(STEMS) - (20.0, 20.0)
    for t in truth:
        err = np.min(np.linalg.norm(desc - t, axis=1))
        assert err <= 0.05


def test_open_field_gives_empty_descriptor(flat_empty_world):
    pose = se3.pose_xyyaw(15.0, 15.0, 0.0, z=0.9)
    scan = sensors.simulate_scan(flat_empty_world, pose, _dense_lidar())
    desc = reloc.build_constellation(scan)
    assert len(desc) == 0


def test_viewpoint_invariance_across_sensor_heights():
    w = _world_with_stems(STEMS + [(12.0, 26.0), (27.0, 26.5), (13.5, 13.0)])
    low = se3.pose_xyyaw(20.0, 20.0, 0.3, z=0.6)
    high = se3.pose_xyyaw(20.0, 20.0, 0.3, z=2.5)
    d_low = reloc.build_constellation(sensors.simulate_scan(w, low, _dense_lidar()))
    d_high = reloc.build_constellation(sensors.simulate_scan(w, high, _dense_lidar()))
    assert len(d_low) >= 4 and len(d_high) >= 4
    matches = 0
    for p in d_low:
        if np.min(np.linalg.norm(d_high - p, axis=1)) <= 0.15:
            matches += 1
    assert matches / len(d_low) >= 0.8


def _toy_prior(tree_positions, node_xy_yaw):
    g = slam.start_graph(np.eye(4))
    g.nodes = []
    for k, (x, y, yaw) in enumerate(node_xy_yaw):
        g.nodes.append(slam.PoseGraphNode(
            node_id=k, pose=se3.pose_xyyaw(x, y, yaw, z=2.5), scan=None,
            odom_dist=1.0, scan_points=np.zeros((0, 3)),
        ))
    return reloc.build_prior_map(g, tree_positions, sensor_height=2.5)


def _true_descriptor(tree_positions, x, y, yaw):
    rel = np.asarray(tree_positions, dtype=float) - (x, y)
    keep = np.linalg.norm(rel, axis=1) <= reloc.DESCRIPTOR_RANGE
    c, s = np.cos(-yaw), np.sin(-yaw)
    out = np.column_stack([c * rel[keep, 0] - s * rel[keep, 1],
                           s * rel[keep, 0] + c * rel[keep, 1]])
    return out


def test_relocalize_at_mapped_node_exact():
    trees = np.array(STEMS + [(30.0, 30.0), (10.0, 28.0)])
    prior = _toy_prior(trees, [(20.0, 20.0, 0.0), (26.0, 24.0, 1.0)])
    query = _true_descriptor(trees, 20.0, 20.0, 0.7)  # same spot, new heading
    res = reloc.relocalize(query, prior, timestamp=1.0)
    assert res.success
    assert np.linalg.norm(res.pose[:2, 3] - (20.0, 20.0)) <= 0.1
    assert abs(se3.wrap_angle(se3.yaw_of(res.pose) - 0.7)) <= 0.02
    assert res.inliers >= reloc.MIN_INLIERS
    assert res.rmse <= reloc.MAX_RMSE


def test_relocalize_unmapped_corner_fails():
    trees = np.array(STEMS)
    prior = _toy_prior(trees, [(20.0, 20.0, 0.0)])
    far_trees = np.array([(100.0, 100.0), (104.0, 101.0), (98.0, 104.0),
                          (101.0, 96.0)])
    query = _true_descriptor(far_trees - 80.0, 22.0, 22.0, 0.0)
    res = reloc.relocalize(query, prior)
    if res.success:  # accidental alignment must still satisfy the gates
        assert res.inliers >= reloc.MIN_INLIERS
    else:
        assert res.pose is None


def test_relocalize_empty_descriptor_skipped():
    prior = _toy_prior(np.array(STEMS), [(20.0, 20.0, 0.0)])
    res = reloc.relocalize(np.zeros((0, 2)), prior)
    assert not res.success and res.pose is None


def test_odometric_gating_limits_candidates():
    trees = np.array(STEMS + [(27.0, 16.0), (13.0, 24.0)])
    prior = _toy_prior(trees, [(20.0, 20.0, 0.0), (200.0, 200.0, 0.0)])
    query = _true_descriptor(trees, 20.0, 20.0, 0.0)
    res = reloc.relocalize(query, prior, odom_pose_prior=se3.pose_xyyaw(21.0, 20.0, 0.0))
    assert res.success and res.node_id == 0


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _result(t, success, mark):
    return reloc.RelocResult(timestamp=t, success=success, odom_mark=mark,
                             pose=np.eye(4) if success else None)


def test_rate_matches_table_scale():
    results = [_result(float(k), k < 59, float(k)) for k in range(269)]
    st = reloc.reloc_stats(results)
    assert st.scans == 269 and st.successes == 59
    assert st.rate_pct == pytest.approx(21.9, abs=0.05)


def test_all_success_unit_spacing():
    results = [_result(float(k), True, float(k)) for k in range(12)]
    st = reloc.reloc_stats(results)
    assert st.mean_m == st.median_m == st.max_m == 1.0


def test_gap_statistics_hand_case():
    results = [
        _result(0.0, True, 0.0),
        _result(1.0, False, 1.0),
        _result(2.0, True, 2.0),
        _result(3.0, False, 12.0),
        _result(4.0, True, 30.0),
    ]
    st = reloc.reloc_stats(results)
    assert st.successes == 3
    assert st.mean_m == pytest.approx(15.0)
    assert st.max_m == pytest.approx(28.0)
    assert st.median_m == pytest.approx(15.0)


def test_stats_require_time_order():
    results = [_result(1.0, True, 0.0), _result(0.5, True, 1.0)]
    with pytest.raises(ValueError):
        reloc.reloc_stats(results)


def test_prior_map_roundtrip(tmp_path):
    trees = np.array(STEMS)
    prior = _toy_prior(trees, [(20.0, 20.0, 0.3), (26.0, 24.0, -1.2)])
    path = tmp_path / "prior.map"
    reloc.save_prior_map(prior, path)
    back = reloc.load_prior_map(path)
    assert back.node_ids == prior.node_ids
    assert back.sensor_height == prior.sensor_height
    for nid in prior.node_ids:
        assert np.allclose(back.descriptors[nid], prior.descriptors[nid])
        assert np.allclose(back.node_poses[nid], prior.node_poses[nid], atol=1e-12)


def test_stats_csv(tmp_path):
    st = reloc.RelocStats(scans=269, successes=59, rate_pct=21.9, path_m=119.8,
                          mean_m=2.0, median_m=0.7, max_m=25.6)
    path = tmp_path / "reloc.csv"
    reloc.write_reloc_stats_csv([("Seq-01", st)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "mission,scans,successes,rate_pct,path_m,mean_m,median_m,max_m"
    assert lines[1] == "Seq-01,269,59,21.9,119.8,2.0,0.7,25.6"
