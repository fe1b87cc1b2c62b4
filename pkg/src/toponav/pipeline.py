"""End-to-end experiment recipe as a small DAG of resumable stages.

Each stage declares the config sections and upstream stages it depends on.
Its input hash combines those sections with the content hashes of the
upstream outputs. A stage is skipped when its recorded input hash matches
and its outputs are still on disk with the recorded content.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import adaptation as adapt
from . import evaluation as ev
from .config import PipelineConfig, domain_params, nav_config
from .expert import collect_expert_trajectories
from .perception import (PassageDetector, RayFeatureExtractor, build_passage_dataset, build_room_dataset,
                         load_examples, save_examples, train_passage_detector,
                         train_room_classifier)
from .policy import LocalPolicy, build_bc_dataset, load_trajectories, save_trajectories, train_local_policy
from .runtime import NavModels
from .segmentation import GmmModel, segment_scene
from .sim import SIM, Scene, generate_scene
from .topo_map import TopoMap, build_map, build_map_from_dataset, radius_adjacency, sample_node_positions, sparsify_map

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, log_path: Path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause} (log: {log_path})")
        self.stage = stage
        self.log_path = log_path


@dataclass(frozen=True)
class Stage:
    name: str
    sections: tuple
    deps: tuple
    run: Callable


class Workspace:
    """Artifact directory layout plus typed loaders."""

    def __init__(self, root, cfg: PipelineConfig, jobs: int = 1):
        self.root = Path(root)
        self.cfg = cfg
        self.jobs = jobs

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def all_scene_names(self):
        sc = self.cfg["scenes"]
        return [s["name"] for s in sc["train"] + sc["bench"]] + [sc["real"]["name"]]

    def scene(self, name: str) -> Scene:
        return Scene.load(self.root / "scenes" / f"{name}.json")

    def gmm(self, name: str) -> GmmModel:
        return GmmModel.load(self.root / "gmm" / f"{name}.json")

    def json(self, rel: str):
        return json.loads((self.root / rel).read_text())

    def write_json(self, rel: str, obj) -> None:
        self.path(rel).write_text(json.dumps(obj, indent=1, sort_keys=True))

    def fx_loc(self) -> RayFeatureExtractor:
        return RayFeatureExtractor.from_json(self.json("models/fx_loc.json"))

    def pd(self, rel: str = "models/pd.json") -> PassageDetector:
        return PassageDetector.from_json(self.json(rel))

    def policy(self) -> LocalPolicy:
        return LocalPolicy.from_json(self.json("models/policy.json"))


def _seed(cfg: PipelineConfig, *parts: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(1)[0])


# stages


def stage_scenes(ws: Workspace) -> list[str]:
    sc = ws.cfg["scenes"]
    outs = []
    for spec in sc["train"] + sc["bench"] + [sc["real"]]:
        if spec["file"]:
            scene = Scene.load(spec["file"])
            scene = Scene(scene.occ, scene.tex, scene.room, scene.resolution, spec["name"])
        else:
            scene = generate_scene(spec["n_rooms"], tuple(spec["size"]), spec["clutter"], spec["seed"],
                                   name=spec["name"])
        rel = f"scenes/{spec['name']}.json"
        scene.save(ws.path(rel))
        outs.append(rel)
    return outs


def stage_segment(ws: Workspace) -> list[str]:
    outs, summary = [], {}
    for k, name in enumerate(ws.all_scene_names()):
        model, agreement = segment_scene(ws.scene(name), ws.cfg["segmentation"]["n_train_points"], _seed(ws.cfg, 1, k))
        rel = f"gmm/{name}.json"
        model.save(ws.path(rel))
        outs.append(rel)
        summary[name] = {"components": model.n_components, "agreement": agreement}
    ws.write_json("gmm/summary.json", summary)
    return outs + ["gmm/summary.json"]


def _train_scenes(ws: Workspace):
    names = [s["name"] for s in ws.cfg["scenes"]["train"]]
    return [ws.scene(n) for n in names], [ws.gmm(n) for n in names]


def train_rooms(ws: Workspace) -> list[str]:
    """Room classifier on the training scenes; writes ``models/fx_loc.json``."""
    p = ws.cfg["perception"]
    scenes, gmms = _train_scenes(ws)
    train, test = build_room_dataset(scenes, gmms, p["positions_per_scene"], seed=_seed(ws.cfg, 2, 0))
    fx0 = RayFeatureExtractor(window=p["window"], hidden=p["hidden"], random_state=_seed(ws.cfg, 2, 1) % 2**31).fit()
    fx, _, acc, f1, _ = train_room_classifier(train, test, epochs=p["room_epochs"], seed=_seed(ws.cfg, 2, 2) % 2**31,
                                              lr=p["room_lr"], batch_size=p["room_batch_size"],
                                              smoothing=p["smoothing"], extractor=fx0,
                                              shift_augment=p["shift_augment"])
    ws.write_json("models/fx_loc.json", fx.to_json())
    ws.write_json("perception/rooms.json", {"accuracy": acc, "macro_f1": f1, "n_train": len(train),
                                            "n_test": len(test)})
    return ["models/fx_loc.json", "perception/rooms.json"]


def train_passage(ws: Workspace) -> list[str]:
    """Passage detector on the training scenes; writes ``models/pd.json``."""
    p = ws.cfg["perception"]
    scenes, gmms = _train_scenes(ws)
    passage = build_passage_dataset(scenes, gmms, p["sources_per_room"], p["targets_per_source"],
                                    seed=_seed(ws.cfg, 2, 3))
    rng = np.random.default_rng(_seed(ws.cfg, 2, 4))
    pids = np.unique([e.position_id for e in passage])
    test_ids = set(rng.choice(pids, max(1, int(round(0.3 * len(pids)))), replace=False).tolist())
    p_train = [e for e in passage if e.position_id not in test_ids]
    p_test = [e for e in passage if e.position_id in test_ids]
    fxp0 = RayFeatureExtractor(window=p["window"], hidden=p["hidden"], random_state=_seed(ws.cfg, 2, 5) % 2**31).fit()
    pd, pm = train_passage_detector(p_train, p_test, extractor=fxp0, epochs=p["passage_epochs"],
                                    seed=_seed(ws.cfg, 2, 6) % 2**31, lr=p["passage_lr"],
                                    batch_size=p["passage_batch_size"])
    ws.write_json("models/pd.json", pd.to_json())
    ws.write_json("perception/passage.json", {**pm, "n_train": len(p_train), "n_test": len(p_test)})
    return ["models/pd.json", "perception/passage.json"]


def stage_perception(ws: Workspace) -> list[str]:
    return train_rooms(ws) + train_passage(ws)


def stage_expert(ws: Workspace) -> list[str]:
    trajs = []
    for k, spec in enumerate(ws.cfg["scenes"]["train"]):
        trajs += collect_expert_trajectories(ws.scene(spec["name"]), ws.cfg["expert"]["trajectories_per_scene"],
                                             seed=_seed(ws.cfg, 3, k))
    save_trajectories(ws.path("data/expert.jsonl"), trajs)
    return ["data/expert.jsonl"]


def stage_policy(ws: Workspace) -> list[str]:
    p = dict(ws.cfg["policy"])
    fx, pd = ws.fx_loc(), ws.pd()
    ds = build_bc_dataset(load_trajectories(ws.root / "data/expert.jsonl"), fx, pd.extractor_,
                          seed=_seed(ws.cfg, 4, 0), test_fraction=p.pop("test_fraction"))
    policy, metrics = train_local_policy(ds, random_state=_seed(ws.cfg, 4, 1) % 2**31, **p)
    ws.write_json("models/policy.json", policy.to_json())
    ws.write_json("policy/metrics.json", {**metrics, "n_train": len(ds.train), "n_test": len(ds.test),
                                          "loss_curve": policy.loss_curve_, "pretrain_curve": policy.pretrain_curve_})
    return ["models/policy.json", "policy/metrics.json"]


def stage_maps(ws: Workspace) -> list[str]:
    m = ws.cfg["map"]
    fx, pd = ws.fx_loc(), ws.pd()
    outs = []
    for k, spec in enumerate(ws.cfg["scenes"]["bench"]):
        scene, gmm = ws.scene(spec["name"]), ws.gmm(spec["name"])
        pos = sample_node_positions(scene, gmm, m["min_per_room"], _seed(ws.cfg, 5, k), m["spacing_min"],
                                    density=m["density"])
        topo = build_map(scene, pos, fx, pd, connect_radius=m["connect_radius"], seed=_seed(ws.cfg, 5, 100 + k),
                         validate=False)
        rel = f"maps/{spec['name']}.json"
        topo.save(ws.path(rel))
        outs.append(rel)
        if spec["name"] == m["sparse_scene"]:
            sparse = sparsify_map(topo, m["sparse_keep"], _seed(ws.cfg, 5, 200 + k))
            rel = f"maps/{spec['name']}-sparse.json"
            sparse.save(ws.path(rel))
            outs.append(rel)
    return outs


def _episodes(ws: Workspace, name: str, k: int) -> list:
    return ev.sample_episodes(ws.scene(name), ws.gmm(name), ws.cfg["nav"]["episodes_per_scene"], _seed(ws.cfg, 6, k))


def _bench(ws: Workspace, subdir: str, entries, models: NavModels, domain) -> list[str]:
    report, results = ev.run_benchmark(entries, models, nav_config(ws.cfg), seed=_seed(ws.cfg, 7, len(subdir)),
                                       jobs=ws.jobs, domain=domain, out_dir=ws.root / subdir)
    ws.write_json(f"{subdir}/episodes.json", [e.to_dict() for b in entries for e in b.episodes])
    return [f"{subdir}/metrics.csv", f"{subdir}/per-episode.csv", f"{subdir}/report.md", f"{subdir}/episodes.json"]


def _sim_models(ws: Workspace) -> NavModels:
    return NavModels(ws.fx_loc(), ws.pd(), ws.policy())


def stage_bench_sim(ws: Workspace) -> list[str]:
    entries = [ev.BenchScene(ws.scene(s["name"]), TopoMap.load(ws.root / f"maps/{s['name']}.json"),
                             _episodes(ws, s["name"], k)) for k, s in enumerate(ws.cfg["scenes"]["bench"])]
    return _bench(ws, "bench/sim", entries, _sim_models(ws), SIM)


def stage_bench_sparse(ws: Workspace) -> list[str]:
    name = ws.cfg["map"]["sparse_scene"]
    if name is None:
        return []
    k = [s["name"] for s in ws.cfg["scenes"]["bench"]].index(name)
    episodes = _episodes(ws, name, k)
    scene = ws.scene(name)
    out = []
    for tag, rel in (("dense", f"maps/{name}.json"), ("sparse", f"maps/{name}-sparse.json")):
        entries = [ev.BenchScene(scene, TopoMap.load(ws.root / rel), episodes)]
        out += _bench(ws, f"bench/map-{tag}", entries, _sim_models(ws), SIM)
    return out


def stage_real_collect(ws: Workspace) -> list[str]:
    a = ws.cfg["adaptation"]
    real = ws.scene(ws.cfg["scenes"]["real"]["name"])
    pos = adapt.choose_real_positions(real, a["n_positions"], _seed(ws.cfg, 8, 0))
    coll = adapt.build_real_collection(real, pos, domain_params(ws.cfg), seed=_seed(ws.cfg, 8, 1))
    save_examples(ws.path("data/real_collection.jsonl"), coll)
    ws.write_json("data/real_positions.json", pos.tolist())
    return ["data/real_collection.jsonl", "data/real_positions.json"]


def stage_adapt(ws: Workspace) -> list[str]:
    a = ws.cfg["adaptation"]
    dom = domain_params(ws.cfg)
    sim_scenes = [ws.scene(s["name"]) for s in ws.cfg["scenes"]["train"]]
    real = ws.scene(ws.cfg["scenes"]["real"]["name"])
    X_sim = adapt.observation_pool(sim_scenes, a["n_sim"], SIM, _seed(ws.cfg, 9, 0))
    X_real = adapt.observation_pool([real], a["n_real"], dom, _seed(ws.cfg, 9, 1))
    f_s = ws.fx_loc()
    cfg = adapt.AdaptationConfig(epochs=a["epochs"], batch_size=a["batch_size"], resample_every=a["resample_every"],
                                 pool_size=a["pool_size"], disc_steps=a["disc_steps"], lr=a["lr"],
                                 disc_lr=a["disc_lr"], seed=_seed(ws.cfg, 9, 2) % 2**31)
    f_t, _, diag = adapt.adapt_extractor(f_s, X_sim, X_real, cfg)
    probe = adapt.choose_real_positions(real, a["n_positions"], _seed(ws.cfg, 9, 3))
    kw = dict(query_domain=dom, n_queries=a["probe_queries"], seed=_seed(ws.cfg, 9, 4))
    top1_s = adapt.cross_domain_retrieval(real, probe, f_s, f_s, **kw)
    top1_t = adapt.cross_domain_retrieval(real, probe, f_s, f_t, **kw)
    ws.write_json("models/fx_t.json", f_t.to_json())
    write_csv(ws.path("adapt/diagnostics.csv"), diag.rows())
    ws.write_json("adapt/retrieval.json", {"top1_source": top1_s, "top1_target": top1_t})
    return ["models/fx_t.json", "adapt/diagnostics.csv", "adapt/retrieval.json"]


def stage_finetune(ws: Workspace) -> list[str]:
    a = ws.cfg["adaptation"]
    coll = load_examples(ws.root / "data/real_collection.jsonl")
    train, test = adapt.split_by_position(coll, a["test_fraction"], _seed(ws.cfg, 10, 0))
    sim_pd = ws.pd()
    rows, outs = [], []
    for c in adapt.CONFIGS:
        pd, m = adapt.finetune_passage(train, test, c, sim_pd, epochs=a["finetune_epochs"],
                                       batch_size=a["finetune_batch_size"], lr=a["finetune_lr"],
                                       seed=_seed(ws.cfg, 10, 1) % 2**31)
        rel = f"models/pd_real_{c}.json"
        ws.write_json(rel, pd.to_json())
        outs.append(rel)
        rows.append({"config": c, **m, "n_train": len(train), "n_test": len(test)})
    write_csv(ws.path("adapt/finetune.csv"), rows)
    return outs + ["adapt/finetune.csv"]


def stage_real_map(ws: Workspace) -> list[str]:
    coll = load_examples(ws.root / "data/real_collection.jsonl")
    positions = ws.json("data/real_positions.json")
    collected = {}
    for ex in coll:
        collected.setdefault(ex.position_id, (np.asarray(positions[ex.position_id]), []))[1].append(ex.observation)
    fx_t = RayFeatureExtractor.from_json(ws.json("models/fx_t.json"))
    pd = ws.pd("models/pd_real_D.json")
    adj = radius_adjacency({k: v[0] for k, v in collected.items()}, ws.cfg["map"]["connect_radius"])
    topo = build_map_from_dataset(collected, adj, pd, fx_t, ws.cfg["scenes"]["real"]["name"])
    topo.save(ws.path("maps/real.json"))
    return ["maps/real.json"]


def stage_bench_real(ws: Workspace) -> list[str]:
    name = ws.cfg["scenes"]["real"]["name"]
    entries = [ev.BenchScene(ws.scene(name), TopoMap.load(ws.root / "maps/real.json"),
                             _episodes(ws, name, 99))]
    models = NavModels(RayFeatureExtractor.from_json(ws.json("models/fx_t.json")),
                       ws.pd("models/pd_real_D.json"), ws.policy())
    return _bench(ws, "bench/real", entries, models, domain_params(ws.cfg))


def stage_summary(ws: Workspace) -> list[str]:
    rows = []
    for suite in ("sim", "map-dense", "map-sparse", "real"):
        f = ws.root / "bench" / suite / "metrics.csv"
        if f.exists():
            with open(f) as fh:
                rows += [{"suite": suite, **r} for r in csv.DictReader(fh)]
    write_csv(ws.path("metrics.csv"), rows)
    return ["metrics.csv"]


STAGES = [
    Stage("scenes", ("seed", "scenes"), (), stage_scenes),
    Stage("segment", ("seed", "segmentation"), ("scenes",), stage_segment),
    Stage("perception", ("seed", "perception"), ("segment",), stage_perception),
    Stage("expert", ("seed", "expert"), ("scenes",), stage_expert),
    Stage("policy", ("seed", "policy"), ("expert", "perception"), stage_policy),
    Stage("maps", ("seed", "map"), ("perception", "segment"), stage_maps),
    Stage("bench_sim", ("seed", "nav"), ("maps", "policy"), stage_bench_sim),
    Stage("bench_sparse", ("seed", "nav"), ("maps", "policy"), stage_bench_sparse),
    Stage("real_collect", ("seed", "adaptation", "domain"), ("scenes",), stage_real_collect),
    Stage("adapt", ("seed", "adaptation", "domain"), ("perception", "scenes"), stage_adapt),
    Stage("finetune", ("seed", "adaptation"), ("real_collect", "perception"), stage_finetune),
    Stage("real_map", ("seed", "map"), ("adapt", "finetune", "real_collect"), stage_real_map),
    Stage("bench_real", ("seed", "nav", "domain"), ("real_map", "policy", "segment"), stage_bench_real),
    Stage("summary", (), ("bench_sim", "bench_sparse", "bench_real"), stage_summary),
]
STAGE_NAMES = [s.name for s in STAGES]


# orchestration


def write_csv(path, rows) -> None:
    rows = list(rows)
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items()})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _record_path(ws: Workspace, name: str) -> Path:
    return ws.path(f".stages/{name}.json")


def _load_record(ws: Workspace, name: str) -> dict | None:
    p = ws.root / ".stages" / f"{name}.json"
    return json.loads(p.read_text()) if p.exists() else None


def _input_hash(ws: Workspace, stage: Stage) -> str:
    h = hashlib.sha256()
    h.update(stage.name.encode())
    h.update(ws.cfg.digest(*stage.sections).encode() if stage.sections else b"")
    for dep in stage.deps:
        rec = _load_record(ws, dep)
        h.update(json.dumps(rec["outputs"] if rec else None, sort_keys=True).encode())
    return h.hexdigest()


def _outputs_intact(ws: Workspace, rec: dict) -> bool:
    for rel, digest in rec["outputs"].items():
        p = ws.root / rel
        if not p.exists() or file_digest(p) != digest:
            return False
    return True


def run_pipeline(cfg: PipelineConfig, out_dir, jobs: int = 1, only: list | None = None) -> dict:
    """Run (or skip) every stage in order; returns ``{stage: "ran" | "skipped"}``.

    ``only`` restricts execution to the named stages and their upstream
    dependencies.
    """
    ws = Workspace(out_dir, cfg, jobs)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.resolved.json").write_text(cfg.to_json())
    wanted = set(STAGE_NAMES) if not only else _closure(only)
    status = {}
    for stage in STAGES:
        if stage.name not in wanted:
            continue
        ih = _input_hash(ws, stage)
        rec = _load_record(ws, stage.name)
        if rec and rec["input_hash"] == ih and _outputs_intact(ws, rec):
            status[stage.name] = "skipped"
            log.info("stage %s: up to date", stage.name)
            continue
        log_path = ws.path(f"logs/{stage.name}.log")
        handler = logging.FileHandler(log_path, mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root = logging.getLogger("toponav")
        root.addHandler(handler)
        prev_level = root.level
        root.setLevel(logging.INFO)
        try:
            log.info("stage %s: running", stage.name)
            outputs = stage.run(ws)
        except Exception as exc:
            log.exception("stage %s failed", stage.name)
            raise StageError(stage.name, log_path, exc) from exc
        finally:
            root.removeHandler(handler)
            root.setLevel(prev_level)
            handler.close()
        record = {"input_hash": ih, "outputs": {rel: file_digest(ws.root / rel) for rel in outputs}}
        _record_path(ws, stage.name).write_text(json.dumps(record, indent=1, sort_keys=True))
        status[stage.name] = "ran"
    return status


def _closure(names) -> set:
    by_name = {s.name: s for s in STAGES}
    todo, seen = list(names), set()
    while todo:
        n = todo.pop()
        if n not in by_name:
            raise KeyError(f"unknown stage {n!r}; known: {STAGE_NAMES}")
        if n not in seen:
            seen.add(n)
            todo.extend(by_name[n].deps)
    return seen


def load_models(model_dir) -> NavModels:
    """Models bundle directory: ``fx_loc.json``, ``pd.json`` (or ``pd_real_D.json``) and ``policy.json``."""
    d = Path(model_dir)
    for f in ("fx_loc.json", "policy.json"):
        if not (d / f).exists():
            raise FileNotFoundError(f"missing model artifact {d / f}")
    pd_file = d / "pd.json"
    if not pd_file.exists():
        raise FileNotFoundError(f"missing model artifact {pd_file}")
    return NavModels(RayFeatureExtractor.from_json(json.loads((d / "fx_loc.json").read_text())),
                     PassageDetector.from_json(json.loads(pd_file.read_text())),
                     LocalPolicy.from_json(json.loads((d / "policy.json").read_text())))
