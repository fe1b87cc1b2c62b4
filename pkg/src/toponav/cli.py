"""Command-line entry point: ``toponav <verb> ...``.

Every verb is a thin wrapper over library functions. Exit codes: 0 on
success, 2 for configuration or usage errors, 3 when a stage or library
operation fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import adaptation as adapt
from . import evaluation as ev
from .config import ConfigError, PipelineConfig, validate_config
from .perception import PassageDetector, RayFeatureExtractor, load_examples
from .pipeline import (STAGE_NAMES, StageError, Workspace, load_models, run_pipeline, train_passage, train_rooms,
                       write_csv)
from .policy import run_local_segment
from .runtime import NavConfig, run_episode, save_trajectory_log
from .segmentation import GmmModel, segment_scene
from .sim import REAL, SIM, DomainParams, Pose, Scene, generate_scene, observe
from .topo_map import TopoMap, build_map, build_map_from_dataset, radius_adjacency, sample_node_positions

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("toponav")


class UsageError(ValueError):
    """Bad command-line input that argparse cannot catch by itself."""


# argument helpers


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _floats(n_min: int, n_max: int):
    def parse(text: str) -> tuple:
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
        if not n_min <= len(vals) <= n_max:
            raise argparse.ArgumentTypeError(f"expected {n_min}-{n_max} values, got {len(vals)}")
        return vals
    return parse


def _pose(vals) -> Pose:
    return Pose(vals[0], vals[1], math.radians(vals[2]) if len(vals) > 2 else 0.0)


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"file not found: {p}")
    return json.loads(p.read_text())


def _domain(name: str) -> DomainParams:
    return {"SIM": SIM, "REAL": REAL}[name.upper()]


def _load_config(args) -> PipelineConfig:
    cfg = validate_config(args.config)
    if args.seed is not None:
        data = cfg.to_dict()
        data["seed"] = args.seed
        cfg = validate_config(data)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# verbs


def cmd_scene_gen(args) -> int:
    scene = generate_scene(args.rooms, args.size, args.clutter, args.seed or 0, name=args.name)
    out = _out(args, f"{args.name}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    scene.save(out)
    _emit({"scene": str(out), "rooms": scene.n_rooms, "shape": list(scene.occ.shape)})
    return EXIT_OK


def cmd_segment(args) -> int:
    scene = Scene.load(args.scene)
    model, agreement = segment_scene(scene, args.points, args.seed or 0, K=args.k)
    out = _out(args, "gmm.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _emit({"model": str(out), "components": model.n_components, "agreement": agreement})
    return EXIT_OK


def _run_stages(args, *stages) -> Workspace:
    cfg = _load_config(args)
    out = _out(args, "out")
    run_pipeline(cfg, out, jobs=args.jobs, only=list(stages))
    return Workspace(out, cfg, args.jobs)


def cmd_perceive(args) -> int:
    ws = _run_stages(args, "segment")
    outputs = train_rooms(ws) if args.task == "train-rooms" else train_passage(ws)
    _emit({"outputs": [str(ws.root / o) for o in outputs], "metrics": ws.json(outputs[-1])})
    return EXIT_OK


def cmd_policy_collect(args) -> int:
    ws = _run_stages(args, "expert")
    _emit({"trajectories": str(ws.root / "data/expert.jsonl")})
    return EXIT_OK


def cmd_policy_train(args) -> int:
    ws = _run_stages(args, "policy")
    _emit({"policy": str(ws.root / "models/policy.json"), "metrics": ws.json("policy/metrics.json")})
    return EXIT_OK


def cmd_policy_rollout(args) -> int:
    scene = Scene.load(args.scene)
    models = load_models(args.models)
    res = run_local_segment(scene, _pose(args.start), models.policy, models.fx_loc, models.fx_pass,
                            duration=args.duration, domain=_domain(args.domain),
                            rng=np.random.default_rng(args.seed or 0))
    records = [{"t": round((k + 1) * 0.1, 10), "pose": [p.x, p.y, p.theta], "command": [c.v, c.w],
                "contact": bool(hit)}
               for k, (p, c, hit) in enumerate(zip(res.poses[1:], res.commands, res.contacts))]
    if args.out:
        save_trajectory_log(args.out, records)
    f = res.final_pose
    _emit({"steps": len(res.commands), "contact": res.contact, "final_pose": [f.x, f.y, f.theta]})
    return EXIT_OK


def cmd_map_build(args) -> int:
    scene = Scene.load(args.scene)
    gmm = GmmModel.load(args.gmm)
    fx = RayFeatureExtractor.from_json(_read_json(args.fx))
    pd = PassageDetector.from_json(_read_json(args.pd))
    pos = sample_node_positions(scene, gmm, args.min_per_room, args.seed or 0, args.spacing, density=args.density)
    topo = build_map(scene, pos, fx, pd, connect_radius=args.radius, seed=args.seed or 0, validate=args.validate)
    out = _out(args, "map.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    topo.save(out)
    _emit({"map": str(out), "nodes": len(topo.nodes), "edges": sum(len(v) for v in topo.edges.values())})
    return EXIT_OK


def cmd_map_from_dataset(args) -> int:
    data = Path(args.data)
    coll_file = data / "real_collection.jsonl" if data.is_dir() else data
    pos_file = data / "real_positions.json" if data.is_dir() else Path(args.positions or "")
    if not coll_file.exists() or not pos_file.is_file():
        raise UsageError(f"dataset needs a collection file and a positions file (got {coll_file}, {pos_file})")
    positions = json.loads(pos_file.read_text())
    collected = {}
    for ex in load_examples(coll_file):
        collected.setdefault(ex.position_id, (np.asarray(positions[ex.position_id]), []))[1].append(ex.observation)
    if args.adjacency:
        adjacency = [tuple(int(v) for v in pair) for pair in _read_json(args.adjacency)]
    else:
        adjacency = radius_adjacency({k: v[0] for k, v in collected.items()}, args.radius)
    fx = RayFeatureExtractor.from_json(_read_json(args.fx))
    pd = PassageDetector.from_json(_read_json(args.pd))
    topo = build_map_from_dataset(collected, adjacency, pd, fx, args.name)
    out = _out(args, "map.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    topo.save(out)
    _emit({"map": str(out), "nodes": len(topo.nodes), "connected": topo.is_connected()})
    return EXIT_OK


def cmd_nav_run(args) -> int:
    scene = Scene.load(args.scene)
    topo = TopoMap.load(args.map)
    models = load_models(args.models)
    domain = _domain(args.domain)
    seed = args.seed or 0
    goal = _pose(args.goal)
    rng = np.random.default_rng([seed, 7])
    goal_obs = observe(scene, goal, domain, rng)
    shortest = ev.GridDistances(scene).distance(_pose(args.start).xy, goal.xy)
    records = [] if args.log else None
    res = run_episode(scene, topo, models, _pose(args.start), goal_obs, NavConfig(max_seconds=args.max_seconds),
                      seed=seed, goal_position=goal.xy, shortest=shortest, domain=domain, trajectory_log=records)
    if args.log:
        save_trajectory_log(args.log, records)
    _emit(res.to_dict())
    return EXIT_OK


def cmd_adapt_features(args) -> int:
    sims = [Scene.load(p) for p in args.sim_scenes]
    real = Scene.load(args.real_scene)
    seed = args.seed or 0
    f_s = RayFeatureExtractor.from_json(_read_json(args.fx))
    domain = _domain(args.domain)
    X_sim = adapt.observation_pool(sims, args.n, SIM, seed)
    X_real = adapt.observation_pool([real], args.n, domain, seed + 1)
    cfg = adapt.AdaptationConfig(epochs=args.epochs, lr=args.lr, disc_lr=args.disc_lr, seed=seed)
    f_t, _, diag = adapt.adapt_extractor(f_s, X_sim, X_real, cfg)
    out = _out(args, "adapt")
    out.mkdir(parents=True, exist_ok=True)
    (out / "fx_t.json").write_text(json.dumps(f_t.to_json()))
    write_csv(out / "diagnostics.csv", diag.rows())
    probe = adapt.choose_real_positions(real, 20, seed + 2)
    kw = dict(query_domain=domain, n_queries=args.queries, seed=seed + 3)
    _emit({"fx_t": str(out / "fx_t.json"),
           "top1_source": adapt.cross_domain_retrieval(real, probe, f_s, f_s, **kw),
           "top1_target": adapt.cross_domain_retrieval(real, probe, f_s, f_t, **kw)})
    return EXIT_OK


def cmd_adapt_passage(args) -> int:
    coll = load_examples(args.data)
    train, test = adapt.split_by_position(coll, args.test_fraction, args.seed or 0)
    sim_pd = PassageDetector.from_json(_read_json(args.pd)) if args.pd else None
    extractor = RayFeatureExtractor.from_json(_read_json(args.fx)) if args.fx else None
    pd, metrics = adapt.finetune_passage(train, test, args.config, sim_pd, epochs=args.epochs,
                                         batch_size=args.batch_size, lr=args.lr, seed=args.seed or 0,
                                         extractor=extractor)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(pd.to_json()))
    _emit({"config": args.config, **metrics, "n_train": len(train), "n_test": len(test)})
    return EXIT_OK


def cmd_bench_run(args) -> int:
    suite = _read_json(args.suite)
    base = Path(args.suite).parent
    seed = args.seed if args.seed is not None else int(suite.get("seed", 0))
    models = load_models(base / suite["models"])
    nav = NavConfig(**suite.get("nav", {}))
    domain = _domain(suite.get("domain", "SIM"))
    entries = []
    for k, s in enumerate(suite["scenes"]):
        scene = Scene.load(base / s["scene"])
        map_path = base / s["map"]
        if not map_path.exists():
            raise FileNotFoundError(f"missing map artifact {map_path}")
        episodes = ev.sample_episodes(scene, GmmModel.load(base / s["gmm"]), int(s.get("episodes", 20)),
                                      int(s.get("seed", seed + k)))
        entries.append(ev.BenchScene(scene, TopoMap.load(map_path), episodes))
    report, _ = ev.run_benchmark(entries, models, nav, seed=seed, jobs=args.jobs, domain=domain,
                                 out_dir=_out(args, "bench"))
    _emit({"out": str(_out(args, "bench")), **report.row()})
    return EXIT_OK


def cmd_pipeline_all(args) -> int:
    cfg = _load_config(args)
    status = run_pipeline(cfg, _out(args, "out"), jobs=args.jobs, only=args.stages)
    _emit(status)
    return EXIT_OK


def cmd_config_validate(args) -> int:
    cfg = _load_config(args)
    print(cfg.to_json())
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # leaf parsers suppress their defaults so flags given before the verb survive
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--seed", type=int, default=d(None), help="random seed (overrides the config seed)")
        g.add_argument("--jobs", type=int, default=d(1), help="parallel workers for episode evaluation")
        g.add_argument("--out", default=d(None), help="output file or directory")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to stderr")
        return g

    common = global_flags(True)
    parser = argparse.ArgumentParser(prog="toponav", parents=[global_flags(False)],
                                     description="Topological navigation on a synthetic ray-sensing world.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(subparsers, name, func, help_):
        p = subparsers.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    scene = sub.add_parser("scene", help="scene generation").add_subparsers(dest="action", required=True)
    p = add(scene, "gen", cmd_scene_gen, "generate a scene file")
    p.add_argument("--rooms", type=int, default=4)
    p.add_argument("--size", type=_size, default=(64, 64), help="grid size WxH in cells")
    p.add_argument("--clutter", type=float, default=0.0)
    p.add_argument("--name", default="scene")

    p = add(sub, "segment", cmd_segment, "fit the room GMM of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--points", type=int, default=100, help="number of sampled valid positions")
    p.add_argument("--k", type=int, default=None, help="number of clusters (default: scene room count)")

    perceive = add(sub, "perceive", cmd_perceive, "train perception models from a pipeline config")
    perceive.add_argument("task", choices=["train-rooms", "train-passage"])
    perceive.add_argument("--config", required=True)

    policy = sub.add_parser("policy", help="expert data and local policy").add_subparsers(dest="action",
                                                                                          required=True)
    for name, func, help_ in (("collect", cmd_policy_collect, "collect expert trajectories"),
                              ("train", cmd_policy_train, "train the local policy")):
        add(policy, name, func, help_).add_argument("--config", required=True)
    p = add(policy, "rollout", cmd_policy_rollout, "run the policy for one local segment")
    p.add_argument("--scene", required=True)
    p.add_argument("--models", required=True, help="directory with fx_loc.json, pd.json and policy.json")
    p.add_argument("--start", type=_floats(2, 3), required=True, help="x,y[,heading_deg]")
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--domain", choices=["SIM", "REAL"], default="SIM")

    mp = sub.add_parser("map", help="topological maps").add_subparsers(dest="action", required=True)
    p = add(mp, "build", cmd_map_build, "build a map in a simulated scene")
    for a in ("--scene", "--gmm", "--fx", "--pd"):
        p.add_argument(a, required=True)
    p.add_argument("--min-per-room", type=int, default=3)
    p.add_argument("--spacing", type=float, default=0.8)
    p.add_argument("--density", type=float, default=0.35)
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--validate", action="store_true", help="fail if the map is disconnected")
    p = add(mp, "from-dataset", cmd_map_from_dataset, "build a map from collected observations")
    p.add_argument("--data", required=True, help="collection directory, or a collection JSON-lines file")
    p.add_argument("--positions", default=None, help="positions JSON (when --data is a file)")
    p.add_argument("--adjacency", default=None, help="JSON list of [a, b] pairs (default: radius rule)")
    p.add_argument("--radius", type=float, default=2.5)
    p.add_argument("--fx", required=True)
    p.add_argument("--pd", required=True)
    p.add_argument("--name", default="dataset")

    nav = sub.add_parser("nav", help="navigation episodes").add_subparsers(dest="action", required=True)
    p = add(nav, "run", cmd_nav_run, "run one navigation episode")
    p.add_argument("--scene", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--start", type=_floats(2, 3), required=True, help="x,y[,heading_deg]")
    p.add_argument("--goal", type=_floats(2, 3), required=True, help="x,y[,heading_deg]")
    p.add_argument("--domain", choices=["SIM", "REAL"], default="SIM")
    p.add_argument("--max-seconds", type=float, default=300.0)
    p.add_argument("--log", default=None, help="trajectory log (JSON lines)")

    ad = sub.add_parser("adapt", help="sim-to-real adaptation").add_subparsers(dest="action", required=True)
    p = add(ad, "features", cmd_adapt_features, "adversarially align a feature extractor")
    p.add_argument("--sim-scenes", nargs="+", required=True)
    p.add_argument("--real-scene", required=True)
    p.add_argument("--fx", required=True, help="source feature extractor JSON")
    p.add_argument("--domain", choices=["SIM", "REAL"], default="REAL")
    p.add_argument("--n", type=int, default=1500, help="observations per domain")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--disc-lr", type=float, default=1e-3)
    p.add_argument("--queries", type=int, default=200)
    p = add(ad, "passage", cmd_adapt_passage, "evaluate one passage transfer configuration")
    p.add_argument("--config", choices=list(adapt.CONFIGS), required=True)
    p.add_argument("--data", required=True, help="collection JSON lines")
    p.add_argument("--pd", default=None, help="sim-trained passage detector (configs C and D)")
    p.add_argument("--fx", default=None, help="optional replacement trunk for configs C and D")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="action", required=True)
    p = add(bench, "run", cmd_bench_run, "run a benchmark suite")
    p.add_argument("--suite", required=True, help="suite JSON: models, scenes[{scene, gmm, map, episodes}]")

    pipe = sub.add_parser("pipeline", help="end-to-end recipe").add_subparsers(dest="action", required=True)
    p = add(pipe, "all", cmd_pipeline_all, "run every stage, skipping up-to-date ones")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", nargs="+", choices=STAGE_NAMES, default=None,
                   help="only these stages (plus their dependencies)")

    conf = sub.add_parser("config", help="configuration files").add_subparsers(dest="action", required=True)
    p = add(conf, "validate", cmd_config_validate, "print the fully resolved configuration")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
