import csv
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box_scene
from toponav.evaluation import (BenchScene, EpisodeSpec, GridDistances, compute_metrics, grid_shortest_path,
                                run_benchmark, sample_episodes, spl_term, write_report)
from toponav.runtime import EpisodeResult, NavConfig, NavModels
from toponav.segmentation import assign_label
from toponav.sim import Pose


def res(success, shortest=10.0, navigated=10.0, contact=0.0, duration=50.0, scene="s"):
    return EpisodeResult(success, shortest, navigated, contact, duration, "x", scene)


class TestMetrics:
    def test_single_perfect(self):
        m = compute_metrics([res(True)])
        assert (m.sr, m.spl) == (1.0, 1.0)

    def test_half_and_quarter(self):
        m = compute_metrics([res(True, 10, 20), res(False)])
        assert m.sr == 0.5 and m.spl == 0.25

    def test_all_failures(self):
        m = compute_metrics([res(False, contact=5.0), res(False)])
        assert (m.sr, m.spl, m.rc, m.aadc) == (0.0, 0.0, 0.0, 0.0)
        assert m.ad == 50.0

    def test_contact_terms_over_successes_only(self):
        m = compute_metrics([res(True, contact=10.0), res(True), res(False, contact=99.0)])
        assert m.rc == 0.5 and m.aadc == 5.0

    def test_navigated_shorter_than_shortest_capped(self):
        assert spl_term(res(True, 10, 8)) == 1.0

    def test_per_scene(self):
        m = compute_metrics([res(True, scene="a"), res(False, scene="b")])
        assert m.per_scene["a"].sr == 1.0 and m.per_scene["b"].sr == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.floats(0, 50), st.floats(0, 80), st.floats(0, 30)),
                    min_size=1, max_size=20))
    def test_spl_le_sr_and_order_independent(self, rows):
        results = [res(s, a, b, c) for s, a, b, c in rows]
        m = compute_metrics(results)
        assert m.spl <= m.sr + 1e-12
        assert 0 <= m.rc <= 1
        r = compute_metrics(results[::-1])
        assert r.sr == pytest.approx(m.sr) and r.spl == pytest.approx(m.spl)


class TestGrid:
    def test_open_box_octile(self):
        s = box_scene(40, 40)
        g = GridDistances(s)
        d = g.distance((1.05, 1.05), (2.05, 1.55))
        dx, dy = 1.0, 0.5
        assert d == pytest.approx(math.sqrt(2) * min(dx, dy) + abs(dx - dy), abs=1e-9)

    def test_wall_blocks(self):
        s = box_scene(40, 20, wall_col=20)
        assert math.isinf(grid_shortest_path(s, (1.0, 1.0), (3.0, 1.0)))

    def test_door_detour_longer_than_straight(self):
        s = box_scene(40, 20, wall_col=20, door=(14, 19))
        d = grid_shortest_path(s, (1.0, 0.5), (3.0, 0.5))
        assert d > 2.0

    def test_infeasible_point(self):
        with pytest.raises(ValueError):
            GridDistances(box_scene()).distance((0.02, 0.02), (2.0, 2.0))


class TestEpisodes:
    def test_constraints_and_determinism(self, trained_models):
        s, gmm = trained_models["scene"], trained_models["gmm"]
        eps = sample_episodes(s, gmm, 5, seed=0)
        assert eps == sample_episodes(s, gmm, 5, seed=0)
        for e in eps:
            assert math.dist(e.start.xy, e.goal) >= 2.5
            assert assign_label(gmm, e.start.xy) != assign_label(gmm, e.goal)
            assert math.isfinite(e.shortest) and e.shortest >= math.dist(e.start.xy, e.goal) - 0.15

    def test_round_trip(self):
        e = EpisodeSpec("s", 0, Pose(1.0, 2.0, 0.5), (3.0, 4.0), 0.1, 3.3)
        assert EpisodeSpec.from_dict(e.to_dict()) == e

    def test_one_cluster_rejected(self):
        from toponav.segmentation import segment_scene
        s = box_scene()
        gmm, _ = segment_scene(s, 20, 0)
        with pytest.raises(ValueError):
            sample_episodes(s, gmm, 1)

    def test_unreachable_count_reported(self, trained_models):
        s, gmm = trained_models["scene"], trained_models["gmm"]
        with pytest.raises(ValueError, match="only"):
            sample_episodes(s, gmm, 3, min_separation=50.0, max_attempts=20)


class TestBenchmark:
    def test_missing_map(self, trained_models):
        m = NavModels(trained_models["fx"], trained_models["pd"], trained_models["policy"])
        with pytest.raises(FileNotFoundError, match="two-room"):
            run_benchmark([BenchScene(trained_models["scene"], None, [])], m)

    def test_report_files(self, tmp_path):
        results = [res(True, scene="a"), res(False, scene="a"), res(True, scene="b")]
        write_report(tmp_path, compute_metrics(results), results)
        rows = list(csv.DictReader(open(tmp_path / "per-episode.csv")))
        assert len(rows) == 3
        metrics = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        assert [r["scene"] for r in metrics] == ["a", "b", "ALL"]
        assert "| SR |" in (tmp_path / "report.md").read_text()

    def test_identical_seeds_identical_reports(self, trained_models):
        from toponav.topo_map import build_map, sample_node_positions
        s, gmm = trained_models["scene"], trained_models["gmm"]
        m = NavModels(trained_models["fx"], trained_models["pd"], trained_models["policy"])
        topo = build_map(s, sample_node_positions(s, gmm, 2, seed=0), m.fx_loc, m.pd, validate=False)
        eps = sample_episodes(s, gmm, 2, seed=1)
        cfg = NavConfig(max_seconds=10.0, segments_per_waypoint=1)
        a = run_benchmark([BenchScene(s, topo, eps)], m, cfg, seed=4)[1]
        b = run_benchmark([BenchScene(s, topo, eps)], m, cfg, seed=4)[1]
        assert a == b and len(a) == 2
