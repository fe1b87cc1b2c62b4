import math

import numpy as np
import pytest

from conftest import box_scene
from toponav.perception import HEADINGS, P_CLAMP, heading_angles
from toponav.segmentation import assign_label, segment_scene
from toponav.sim import clearance
from toponav.topo_map import (W_MAX, W_MIN, DisconnectedMapError, TopoEdge, TopoMap, TopoNode,
                              build_map, build_map_from_dataset, closest_heading, radius_adjacency,
                              sample_node_positions, sparsify_map)


def tiny_map(edges, n=None):
    ids = sorted({i for e in edges for i in e[:2]}) if n is None else list(range(n))
    nodes = [TopoNode(i, [float(i), 0.0], np.eye(HEADINGS, 4)) for i in ids]
    out = {}
    for src, dst, w in edges:
        out.setdefault(src, []).append(TopoEdge(src, dst, w, 0.0))
    return TopoMap(nodes, out)


@pytest.fixture(scope="module")
def built(trained_models):
    scene, gmm = trained_models["scene"], trained_models["gmm"]
    pos = sample_node_positions(scene, gmm, min_per_room=3, seed=0)
    topo = build_map(scene, pos, trained_models["fx"], trained_models["pd"], validate=False)
    return topo, pos


class TestSampling:
    def test_min_per_room_spacing_and_clearance(self, trained_models):
        scene, gmm = trained_models["scene"], trained_models["gmm"]
        pos = sample_node_positions(scene, gmm, min_per_room=3, seed=1)
        counts = np.bincount([assign_label(gmm, p) for p in pos], minlength=gmm.n_components)
        assert (counts >= 3).all()
        d = np.linalg.norm(pos[:, None] - pos[None], axis=2) + np.eye(len(pos)) * 99
        assert d.min() >= 0.8
        assert all(clearance(scene, *p) >= 0.2 for p in pos)

    def test_deterministic(self, trained_models):
        scene, gmm = trained_models["scene"], trained_models["gmm"]
        a = sample_node_positions(scene, gmm, 2, seed=4)
        b = sample_node_positions(scene, gmm, 2, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_infeasible_spacing_raises(self):
        s = box_scene(12, 12)
        gmm, _ = segment_scene(s, 20, 0)
        with pytest.raises(ValueError):
            sample_node_positions(s, gmm, min_per_room=5, spacing_min=5.0, max_attempts=500)

    def test_bad_min_per_room(self, trained_models):
        with pytest.raises(ValueError):
            sample_node_positions(trained_models["scene"], trained_models["gmm"], min_per_room=0)


class TestBuild:
    def test_structure(self, built):
        topo, pos = built
        for n in topo.nodes:
            assert n.descriptors.shape[0] == HEADINGS
            np.testing.assert_allclose(np.linalg.norm(n.descriptors, axis=1), 1.0, atol=1e-6)
        for e in topo.edge_list():
            assert e.src != e.dst
            assert W_MIN - 1e-12 <= e.weight <= W_MAX + 1e-12
            assert np.linalg.norm(pos[e.src] - pos[e.dst]) < 2.5

    def test_edges_only_within_radius_both_directions(self, built):
        topo, pos = built
        for i in topo.node_ids:
            for j in topo.node_ids:
                if i != j:
                    near = np.linalg.norm(pos[i] - pos[j]) < 2.5
                    assert (topo.edge(i, j) is not None) == near

    def test_edge_angle_is_bearing(self, built):
        topo, pos = built
        for e in topo.edge_list():
            d = pos[e.dst] - pos[e.src]
            assert e.abs_angle == pytest.approx(math.atan2(d[1], d[0]))

    def test_disconnected_raises(self, trained_models):
        scene = trained_models["scene"]
        from toponav.sim import sample_free_position
        rng = np.random.default_rng(0)
        a = sample_free_position(scene, rng, 0.2)
        far = max((sample_free_position(scene, rng, 0.2) for _ in range(50)),
                  key=lambda q: np.linalg.norm(q - a))
        with pytest.raises(DisconnectedMapError) as err:
            build_map(scene, [a, far], trained_models["fx"], trained_models["pd"], connect_radius=0.1)
        assert len(err.value.components) == 2

    def test_round_trip(self, built, tmp_path):
        topo, _ = built
        topo.save(tmp_path / "m.json")
        back = TopoMap.load(tmp_path / "m.json")
        assert back.node_ids == topo.node_ids
        assert [(e.src, e.dst, e.weight, e.abs_angle) for e in back.edge_list()] == \
               [(e.src, e.dst, e.weight, e.abs_angle) for e in topo.edge_list()]
        for a, b in zip(back.nodes, topo.nodes):
            np.testing.assert_array_equal(a.descriptors, b.descriptors)

    def test_bad_version(self, built):
        d = built[0].to_dict()
        d["version"] = 99
        with pytest.raises(ValueError, match="version"):
            TopoMap.from_dict(d)


class TestValidation:
    def test_self_loop(self):
        with pytest.raises(ValueError):
            TopoEdge(1, 1, 0.1, 0.0)

    def test_weight_range(self):
        with pytest.raises(ValueError):
            TopoEdge(0, 1, -math.log(P_CLAMP) + 1.0, 0.0)
        TopoEdge(0, 1, W_MIN, 0.0)

    def test_unknown_node(self):
        with pytest.raises(ValueError):
            TopoMap([TopoNode(0, [0, 0], np.ones((HEADINGS, 2)))], {0: [TopoEdge(0, 5, 0.1, 0.0)]})

    def test_duplicate_ids(self):
        n = TopoNode(0, [0, 0], np.ones((HEADINGS, 2)))
        with pytest.raises(ValueError):
            TopoMap([n, n])

    def test_wrong_heading_count(self):
        with pytest.raises(ValueError):
            TopoNode(0, [0, 0], np.ones((5, 2)))


class TestHeadings:
    def test_closest_heading_exact(self):
        for k, a in enumerate(heading_angles()):
            assert closest_heading(a) == k

    def test_tie_goes_to_lower_index(self):
        assert closest_heading(math.radians(10)) == 0
        assert closest_heading(math.radians(30)) == 1

    def test_wraps(self):
        assert closest_heading(math.radians(355)) == 0
        assert closest_heading(-math.radians(20)) == 17


class TestView:
    def test_has_no_positions(self, built):
        view = built[0].view()
        assert not hasattr(view, "positions") and not hasattr(view, "nodes")
        with pytest.raises(AttributeError):
            view.foo = 1
        with pytest.raises(ValueError):
            view.descriptors[0, 0, 0] = 1.0

    def test_out_edges_sorted(self, built):
        view = built[0].view()
        for i in view.node_ids:
            dsts = [d for d, _, _ in view.out_edges(i)]
            assert dsts == sorted(dsts)


class TestDatasetAndSparse:
    def test_from_dataset(self, trained_models):
        from toponav.perception import observe_headings
        scene = trained_models["scene"]
        from toponav.sim import sample_free_position
        rng = np.random.default_rng(2)
        pos = {k: sample_free_position(scene, rng, 0.3) for k in range(5)}
        collected = {k: (p, observe_headings(scene, p)) for k, p in pos.items()}
        adj = radius_adjacency(pos, 3.0)
        topo = build_map_from_dataset(collected, adj, trained_models["pd"], trained_models["fx"])
        assert len(topo.edge_list()) == 2 * len(adj)
        collected[0] = (pos[0], collected[0][1][:5])
        with pytest.raises(ValueError, match="missing"):
            build_map_from_dataset(collected, adj, trained_models["pd"], trained_models["fx"])

    def test_unknown_adjacency(self, trained_models):
        with pytest.raises(ValueError):
            build_map_from_dataset({}, [(0, 1)], trained_models["pd"], trained_models["fx"])

    def test_sparsify(self, built):
        topo = built[0]
        sparse = sparsify_map(topo, 0.5, seed=0)
        keep = set(sparse.node_ids)
        assert len(keep) == max(2, round(0.5 * len(topo.nodes)))
        assert all(e.src in keep and e.dst in keep for e in sparse.edge_list())
        assert sparsify_map(topo, 0.5, seed=0).node_ids == sparse.node_ids

    def test_weak_components(self):
        m = tiny_map([(0, 1, 0.1), (2, 3, 0.1)])
        assert m.weak_components() == [{0, 1}, {2, 3}]
        assert not m.is_connected()
        assert tiny_map([(0, 1, 0.1), (2, 1, 0.1)]).is_connected()
