"""
Pipeline stages over an output directory.

Every stage reads upstream artifacts, writes its outputs into a staging
directory and moves them into place only after it succeeds. A manifest
records the config hash, input/output file hashes and seeds of each stage,
so an unchanged stage is skipped unless forced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fuselet.config import PipelineConfig
from fuselet.context import ContextTable, ZonalCounts, build_context_table, extract_mask, merge_counts, zonal_histogram
from fuselet.errors import DataError
from fuselet.evaluation import SsimConfig, difference_map, evaluate_set, write_report
from fuselet.iic import ClusterTree, SegmentationMap, TreeConfig, predict_map, train_tree
from fuselet.morph import build_objects
from fuselet.raster import ChannelSpec, Raster, collocate_stack, load_polygons, load_raster, resample_nearest, save_raster
from fuselet.rbm import CdConfig, DbnModel, embed, expansion_dims, train_dbn
from fuselet.sampling import SampleSet, extract_neighborhoods, fit_stats, kmeans_fit, standardize, stratified_sample
from fuselet.synth import SceneSpec, generate_scene, write_scene

log = logging.getLogger(__name__)

STAGES = (
    "gen-synthetic",
    "preprocess",
    "train-encoder",
    "train-cluster",
    "predict",
    "assign-context",
    "detect",
    "evaluate",
)
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRef:
    id: str
    index: int
    role: str
    dataset: str
    rasters: tuple[tuple[Path, ChannelSpec], ...]
    labels: Path | None
    references: dict[str, Path]

    def load(self) -> Raster:
        rasters = [load_raster(p, spec) for p, spec in self.rasters]
        return rasters[0] if len(rasters) == 1 else collocate_stack(rasters)


def envi_files(path) -> list[Path]:
    p = Path(path)
    return [p.with_suffix(".hdr"), p.with_suffix(".img")]


def synth_scene_ids(cfg: PipelineConfig) -> list[tuple[str, str, int]]:
    s = cfg.synth
    return [(f"train_{k}", "train", k) for k in s.train_seeds] + [(f"test_{k}", "test", k) for k in s.test_seeds]


def scenes(cfg: PipelineConfig) -> list[SceneRef]:
    out_dir = Path(cfg.output_dir)
    refs = []
    if cfg.synth is not None:
        for i, (sid, role, _) in enumerate(synth_scene_ids(cfg)):
            base = out_dir / "scenes" / sid
            refs.append(SceneRef(
                sid, i, role, cfg.synth.dataset,
                ((base.with_suffix(".img"), ChannelSpec()),),
                base.parent / f"{sid}_labels.geojson",
                {c: base.parent / f"{sid}_truth_{c}.img" for c in ("fire", "smoke")},
            ))
        return refs
    for i, sc in enumerate(cfg.scenes):
        rasters = tuple(
            (cfg.resolve(r.path), ChannelSpec(r.fill, _range(r.valid_range), r.channels)) for r in sc.rasters
        )
        refs.append(SceneRef(
            sc.id, i, sc.role, sc.dataset, rasters,
            cfg.resolve(sc.labels) if sc.labels else None,
            {str(k): cfg.resolve(v) for k, v in sc.references.items()},
        ))
    return refs


def _range(v):
    if v is None:
        return None
    if np.ndim(v) == 1:
        return tuple(v)
    return [tuple(x) for x in v]


def train_scenes(cfg) -> list[SceneRef]:
    return [s for s in scenes(cfg) if s.role == "train"]


def eval_scenes(cfg) -> list[SceneRef]:
    """Held-out scenes when there are any, otherwise every scene."""
    all_scenes = scenes(cfg)
    test = [s for s in all_scenes if s.role == "test"]
    return test or all_scenes


# ---------------------------------------------------------------------------
# manifest and staging
# ---------------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json_atomic(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    os.replace(tmp, path)


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def rel(self, path) -> str:
        p = Path(path)
        try:
            return p.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(p.resolve())

    def manifest(self) -> dict:
        p = self.path(MANIFEST)
        if not p.exists():
            return {}
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring corrupt manifest %s", p)
            return {}

    def input_hashes(self, files) -> dict[str, str]:
        out = {}
        for f in files:
            if not Path(f).exists():
                raise DataError(f"missing input {f}")
            out[self.rel(f)] = file_hash(f)
        return dict(sorted(out.items()))

    def up_to_date(self, stage: str, config_hash: str, inputs: dict[str, str]) -> bool:
        entry = self.manifest().get(stage)
        if not entry or entry.get("config_hash") != config_hash or entry.get("inputs") != inputs:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            p = self.path(rel)
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    def commit(self, stage: str, staging: Path, config_hash: str, inputs, seeds) -> dict[str, str]:
        outputs = {}
        files = sorted(p for p in staging.rglob("*") if p.is_file())
        for src in files:
            rel = src.relative_to(staging).as_posix()
            dst = self.path(rel)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
            outputs[rel] = file_hash(dst)
        shutil.rmtree(staging, ignore_errors=True)
        manifest = self.manifest()
        manifest[stage] = {"config_hash": config_hash, "inputs": inputs, "outputs": outputs, "seeds": seeds}
        _write_json_atomic(self.path(MANIFEST), manifest)
        return outputs


@dataclass(frozen=True)
class StageSpec:
    name: str
    sections: tuple[str, ...]
    inputs: Callable[[PipelineConfig, Workspace], list[Path]]
    run: Callable[[PipelineConfig, Workspace, Path], None]
    seeds: Callable[[PipelineConfig], dict] = lambda cfg: {}


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> str:
    """Run one stage; returns 'ran' or 'up-to-date'."""
    spec = _REGISTRY[name]
    ws = Workspace(cfg)
    files = spec.inputs(cfg, ws)
    missing = [str(f) for f in files if not Path(f).exists()]
    if missing:
        raise DataError(f"{name}: missing inputs (run the upstream stage first): {', '.join(missing[:5])}")
    inputs = ws.input_hashes(files)
    chash = cfg.section_hash(*spec.sections)
    if not force and ws.up_to_date(name, chash, inputs):
        return "up-to-date"
    staging = ws.path(f".staging-{name}")
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir(parents=True)
    try:
        spec.run(cfg, ws, staging)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    ws.commit(name, staging, chash, inputs, spec.seeds(cfg))
    return "ran"


def stages_for(cfg: PipelineConfig) -> list[str]:
    return [s for s in STAGES if s != "gen-synthetic" or cfg.synth is not None]


def run_all(cfg: PipelineConfig, force: bool = False) -> dict[str, str]:
    return {name: run_stage(name, cfg, force) for name in stages_for(cfg)}


# ---------------------------------------------------------------------------
# stage bodies
# ---------------------------------------------------------------------------


def _out(staging: Path, rel: str) -> Path:
    p = staging / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _gen_inputs(cfg, ws):
    return []


def _gen_run(cfg, ws, staging):
    s = cfg.synth
    if s is None:
        raise DataError("gen-synthetic needs a [synth] section")
    fields = {f.name for f in dataclasses.fields(SceneSpec)}
    base = {k: v for k, v in dataclasses.asdict(s).items() if k in fields}
    for sid, _, seed in synth_scene_ids(cfg):
        scene = generate_scene(SceneSpec(**base, seed=seed))
        write_scene(scene, _out(staging, "scenes"), sid)


def _scene_inputs(refs):
    files = []
    for r in refs:
        files += [f for p, _ in r.rasters for f in envi_files(p)]
    return files


def _pre_inputs(cfg, ws):
    return _scene_inputs(train_scenes(cfg))


def _pre_run(cfg, ws, staging):
    sp = cfg.sampling
    sets = [extract_neighborhoods(ref.load(), ref.index) for ref in train_scenes(cfg)]
    raw = SampleSet.concatenate(sets)
    if len(raw) == 0:
        raise DataError("no valid 3x3 neighbourhoods in the training scenes")
    stats = fit_stats(raw)
    z = standardize(raw, stats)
    km = kmeans_fit(z, min(sp.k, len(z)), seed=sp.seed, max_iter=sp.max_iter)
    sub = stratified_sample(z, km, sp.n_total, seed=sp.seed)
    sub.save(_out(staging, "samples/train.vec"))
    _out(staging, "samples/strata.json").write_text(json.dumps({
        "k": km.k, "seed": km.seed, "n_iter": km.n_iter,
        "inertia_history": list(km.inertia_history),
        "centroids": km.centroids.tolist(),
        "n_candidates": len(z), "n_selected": len(sub),
    }))


def _samples_files(ws):
    return [ws.path(f"samples/train{s}") for s in (".vec", ".prov", ".json")]


def _load_samples(ws) -> SampleSet:
    return SampleSet.load(ws.path("samples/train.vec"))


def _enc_run(cfg, ws, staging):
    d = cfg.dbn
    samples = _load_samples(ws)
    dims = list(d.layer_dims) or expansion_dims(samples.dim, d.expansion_factor, d.n_layers)
    cd = CdConfig(k=d.k, learning_rate=d.learning_rate, momentum=d.momentum, weight_decay=d.weight_decay,
                  batch_size=d.batch_size, epochs=d.epochs, seed=d.seed)
    train_dbn(samples, dims, cd).save(_out(staging, "models/dbn.bin"))


def _dbn_files(ws):
    return [ws.path("models/dbn.bin"), ws.path("models/dbn.json")]


def _tree_files(ws):
    return [ws.path("models/tree.bin"), ws.path("models/tree.json")]


def tree_config(cfg: PipelineConfig) -> TreeConfig:
    return TreeConfig(**dataclasses.asdict(cfg.iic))


def _clu_run(cfg, ws, staging):
    samples = _load_samples(ws)
    dbn = DbnModel.load(ws.path("models/dbn.bin"))
    if dbn.input_dim != samples.dim:
        raise DataError(f"DBN expects {dbn.input_dim} inputs, samples have {samples.dim}")
    tree = train_tree(embed(dbn, samples), tree_config(cfg), threads=cfg.threads)
    tree.save(_out(staging, "models/tree.bin"))


def _pred_inputs(cfg, ws):
    return _samples_files(ws) + _dbn_files(ws) + _tree_files(ws) + _scene_inputs(scenes(cfg))


def _pred_run(cfg, ws, staging):
    stats = _load_samples(ws).stats
    dbn = DbnModel.load(ws.path("models/dbn.bin"))
    tree = ClusterTree.load(ws.path("models/tree.bin"))

    def one(ref: SceneRef):
        segmap = predict_map(tree, dbn, ref.load(), stats, ref.index)
        segmap.save(_out(staging, f"segmaps/{ref.id}.img"))

    _parallel(one, scenes(cfg), cfg.threads)


def _parallel(fn, items, threads):
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(fn, items))


def _segmap_files(ws, refs):
    files = []
    for r in refs:
        files += envi_files(ws.path(f"segmaps/{r.id}.img")) + [ws.path(f"segmaps/{r.id}.json")]
    return files


def _ctx_inputs(cfg, ws):
    refs = train_scenes(cfg)
    return _segmap_files(ws, refs) + [r.labels for r in refs if r.labels is not None]


def _ctx_run(cfg, ws, staging):
    c = cfg.context
    counts = ZonalCounts()
    labelled = [r for r in train_scenes(cfg) if r.labels is not None]
    if not labelled:
        raise DataError("assign-context needs at least one training scene with labels")
    for ref in labelled:
        segmap = SegmentationMap.load(ws.path(f"segmaps/{ref.id}.img"))
        counts = merge_counts(counts, zonal_histogram(segmap, load_polygons(ref.labels), ref.id))
    counts.save(_out(staging, "context/counts.json"))
    table = build_context_table(counts, c.classes, c.tau, c.level, cfg.iic.c_child)
    table.save(_out(staging, "context/table.json"))
    for name, labels in sorted(table.assignments.items()):
        log.info("context: %s <- %d labels", name, len(labels))


def _det_inputs(cfg, ws):
    return _segmap_files(ws, scenes(cfg)) + [ws.path("context/table.json")]


def _det_run(cfg, ws, staging):
    m = cfg.morph
    table = ContextTable.load(ws.path("context/table.json"))

    def one(ref: SceneRef):
        segmap = SegmentationMap.load(ws.path(f"segmaps/{ref.id}.img"))
        for name in cfg.context.classes:
            mask = extract_mask(segmap, table.assignments.get(name, ()), table.level, name)
            obj = build_objects(mask, m.min_area, m.max_area, m.preserve_holes)
            save_raster(obj, _out(staging, f"detections/{ref.id}_{name}.img"))

    _parallel(one, scenes(cfg), cfg.threads)


def _eval_inputs(cfg, ws):
    files = []
    for ref in eval_scenes(cfg):
        for name in cfg.context.classes:
            files += envi_files(ws.path(f"detections/{ref.id}_{name}.img"))
            if name in ref.references:
                files += envi_files(ref.references[name])
    return files


def _eval_run(cfg, ws, staging):
    e = cfg.eval
    ssim_cfg = SsimConfig(window=e.window, K1=e.K1, K2=e.K2, L=e.L)
    for name in cfg.context.classes:
        pairs = []
        for ref in eval_scenes(cfg):
            if name not in ref.references:
                continue
            det = load_raster(ws.path(f"detections/{ref.id}_{name}.img"))
            truth = load_raster(ref.references[name])
            if truth.grid != det.grid:
                truth = resample_nearest(truth, det.grid)
            pairs.append((det, truth, ref.dataset))
            save_raster(difference_map(det, truth), _out(staging, f"reports/diff/{ref.id}_{name}.img"))
        if not pairs:
            log.warning("evaluate: no reference masks for class %s", name)
            continue
        rows = evaluate_set(pairs, ssim_cfg)
        write_report(rows, _out(staging, f"reports/{name}.csv"), title=f"{name} detection")


_REGISTRY = {
    "gen-synthetic": StageSpec("gen-synthetic", ("synth",), _gen_inputs, _gen_run),
    "preprocess": StageSpec(
        "preprocess", ("sampling", "scenes"), _pre_inputs, _pre_run,
        lambda cfg: {"sampling": cfg.sampling.seed},
    ),
    "train-encoder": StageSpec(
        "train-encoder", ("dbn",), lambda cfg, ws: _samples_files(ws), _enc_run,
        lambda cfg: {"dbn": cfg.dbn.seed},
    ),
    "train-cluster": StageSpec(
        "train-cluster", ("iic",), lambda cfg, ws: _samples_files(ws) + _dbn_files(ws), _clu_run,
        lambda cfg: {"iic": cfg.iic.seed},
    ),
    "predict": StageSpec("predict", ("scenes",), _pred_inputs, _pred_run),
    "assign-context": StageSpec("assign-context", ("context", "iic"), _ctx_inputs, _ctx_run),
    "detect": StageSpec("detect", ("context", "morph"), _det_inputs, _det_run),
    "evaluate": StageSpec("evaluate", ("eval", "context"), _eval_inputs, _eval_run),
}
