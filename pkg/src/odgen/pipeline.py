"""Staged synthesis pipeline with a content-hash manifest.

Every stage reads its inputs from earlier stages' artifacts under ``work_dir``,
writes its outputs to staging paths and moves them into place only on
success, then records input and output hashes in ``manifest.json``. A stage
whose recorded input hash matches the current one (and whose outputs are
intact) is skipped. A stage whose ancestors are missing raises
:class:`MissingArtifact`. One whose ancestors changed since they were recorded
raises :class:`StaleUpstream`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .conditioning import (
    ForegroundPool,
    build_global_prompt,
    build_text_list,
    build_triplet,
)
from .config import PipelineConfig
from .core import Annotation, BBox, DetectionDataset, LabeledImage
from .diffusion import (
    ModelConfig,
    ObjectwiseDenoiser,
    OptimizerConfig,
    generate_foreground_pool,
    load_checkpoint,
    sample_triplets,
    save_checkpoint,
    train_control,
    train_finetune,
)
from .exceptions import ConfigError, MissingArtifact, StaleUpstream
from .filtering import (
    ForegroundDiscriminator,
    crop_patches,
    filter_pseudo_labels,
    train_discriminator,
)
from .imaging import resize_bilinear, resize_dataset
from .metrics import compute_fid, discriminator_features
from .stats import LayoutSampler, PseudoLabel
from .yolo import export_yolo_dataset, parse_yolo_dataset, read_manifest

logger = logging.getLogger(__name__)

STAGES = ("finetune", "pool", "train-control", "fit-stats", "synthesize", "filter", "export", "eval")
UPSTREAM = {
    "finetune": (),
    "pool": ("finetune",),
    "train-control": ("finetune", "pool"),
    "fit-stats": (),
    "synthesize": ("train-control", "fit-stats", "pool"),
    "filter": ("synthesize",),
    "export": ("filter", "synthesize"),
    "eval": ("export", "filter", "synthesize", "pool", "fit-stats", "train-control"),
}
# Config keys each stage depends on (dotted paths into PipelineConfig).
STAGE_KEYS = {
    "finetune": ("diffusion", "finetune"),
    "pool": ("pool", "diffusion.sampling_steps"),
    "train-control": ("control",),
    "fit-stats": ("diffusion.image_size", "diffusion.max_objects"),
    "synthesize": ("synthesis", "diffusion.sampling_steps"),
    "filter": ("discriminator",),
    "export": (),
    "eval": ("eval", "diffusion.sampling_steps"),
}
READS_DATA = {"finetune", "train-control", "fit-stats", "filter", "eval"}
MANIFEST_NAME = "manifest.json"


def stage_outputs(config: PipelineConfig, stage: str) -> dict[str, Path]:
    w = config.work_path
    outputs = {
        "finetune": {"checkpoint": w / "checkpoints" / "finetune.pt", "metrics": w / "metrics" / "finetune.jsonl"},
        "pool": {"pool": w / "pool"},
        "train-control": {"checkpoint": w / "checkpoints" / "control.pt",
                          "metrics": w / "metrics" / "control.jsonl"},
        "fit-stats": {"stats": w / "stats" / "layout.json"},
        "synthesize": {"raw": w / "synth"},
        "filter": {"filter": w / "filter"},
        "export": {"dataset": config.export_path, "report": w / "reports" / "synthesis_report.json"},
        "eval": {"report": w / "reports" / "eval.jsonl"},
    }
    if stage not in outputs:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    return outputs[stage]


# ---------------------------------------------------------------- hashing

def hash_path(path) -> str | None:
    """sha256 of a file, or of a directory's sorted (relative path, file hash) list; None if absent."""
    path = Path(path)
    if path.is_file():
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0" + hash_path(p).encode())
        return h.hexdigest()
    return None


def _config_value(d: dict, dotted: str):
    for key in dotted.split("."):
        d = d[key]
    return d


def _data_hash(config: PipelineConfig) -> str:
    root = Path(config.data.root)
    manifest, split_dir = root / "data.yaml", root / config.data.split
    if not manifest.is_file() or not split_dir.is_dir():
        raise MissingArtifact(f"training data not found: expected {manifest} and {split_dir}/")
    return hashlib.sha256((hash_path(manifest) + hash_path(split_dir)).encode()).hexdigest()


def read_pipeline_manifest(config: PipelineConfig) -> dict:
    path = config.work_path / MANIFEST_NAME
    if not path.is_file():
        return {"stages": {}}
    with open(path) as fh:
        return json.load(fh)


def _write_json_atomic(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def stage_input_hash(config: PipelineConfig, stage: str, manifest: dict, data_hash: str | None = None) -> str:
    d = config.to_dict()
    blob = {
        "stage": stage,
        "seed": config.seed,
        "config": {k: _config_value(d, k) for k in STAGE_KEYS[stage]},
        "upstream": {u: manifest["stages"].get(u, {}).get("output_hash") for u in UPSTREAM[stage]},
    }
    if stage in READS_DATA:
        blob["data"] = data_hash or _data_hash(config)
        blob["split"] = config.data.split
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def _outputs_hash(outputs: dict[str, Path]) -> str | None:
    parts = {k: hash_path(p) for k, p in outputs.items()}
    if any(v is None for v in parts.values()):
        return None
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


def _ancestors(stage: str) -> list[str]:
    seen: list[str] = []
    stack = list(UPSTREAM[stage])
    while stack:
        s = stack.pop()
        if s not in seen:
            seen.append(s)
            stack.extend(UPSTREAM[s])
    return sorted(seen, key=STAGES.index)


def check_upstream(config: PipelineConfig, stage: str, manifest: dict | None = None,
                   data_hash: str | None = None) -> None:
    """Raise MissingArtifact / StaleUpstream unless every ancestor is recorded, intact and current."""
    manifest = manifest or read_pipeline_manifest(config)
    for anc in _ancestors(stage):
        entry = manifest["stages"].get(anc)
        outputs = stage_outputs(config, anc)
        if entry is None or any(not p.exists() for p in outputs.values()):
            raise MissingArtifact(f"stage {stage!r} needs the outputs of {anc!r}; run `odgen {anc}` first")
        if _outputs_hash(outputs) != entry["output_hash"]:
            raise StaleUpstream(f"outputs of {anc!r} changed on disk since they were recorded; re-run {anc!r}")
        if stage_input_hash(config, anc, manifest, data_hash) != entry["input_hash"]:
            raise StaleUpstream(f"{anc!r} is out of date with the current config, data or its own "
                                f"inputs; re-run {anc!r}")


# ---------------------------------------------------------------- stage context and runner

@dataclass
class StageContext:
    config: PipelineConfig
    stage: str
    staging: dict[str, Path]
    rng: np.random.Generator

    def out(self, key: str) -> Path:
        return self.staging[key]


@dataclass
class StageResult:
    stage: str
    status: str                       # "ran" or "skipped"
    outputs: dict[str, Path]
    seconds: float = 0.0
    info: dict = field(default_factory=dict)


def stage_rng(config: PipelineConfig, stage: str) -> np.random.Generator:
    """Independent stream per stage derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(config.seed), STAGES.index(stage)]))


def _remove(path: Path) -> None:
    if path.is_dir() and not path.is_symlink():
        shutil.rmtree(path)
    elif path.exists() or path.is_symlink():
        path.unlink()


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> StageResult:
    """Run one stage, or skip it when its recorded inputs are unchanged and outputs intact."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    manifest = read_pipeline_manifest(config)
    data_hash = _data_hash(config) if stage in READS_DATA else None
    check_upstream(config, stage, manifest, data_hash)
    outputs = stage_outputs(config, stage)
    input_hash = stage_input_hash(config, stage, manifest, data_hash)
    entry = manifest["stages"].get(stage)
    if (not force and entry and entry["input_hash"] == input_hash
            and _outputs_hash(outputs) == entry["output_hash"]):
        logger.info("stage %s is up to date; nothing to do", stage)
        return StageResult(stage, "skipped", outputs, 0.0, entry.get("info", {}))

    staging = {}
    for key, path in outputs.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.staging-{os.getpid()}")
        _remove(tmp)
        staging[key] = tmp
    ctx = StageContext(config, stage, staging, stage_rng(config, stage))
    logger.info("running stage %s", stage)
    start = time.time()
    try:
        info = STAGE_FUNCTIONS[stage](ctx) or {}
        for key, tmp in staging.items():
            if not tmp.exists():
                raise RuntimeError(f"stage {stage!r} did not produce its {key!r} output")
        for key, path in outputs.items():
            _remove(path)
            os.replace(staging[key], path)
    finally:
        for tmp in staging.values():
            _remove(tmp)
    seconds = time.time() - start
    manifest = read_pipeline_manifest(config)
    manifest["stages"][stage] = {
        "input_hash": input_hash,
        "output_hash": _outputs_hash(outputs),
        "outputs": {k: str(p) for k, p in outputs.items()},
        "seconds": round(seconds, 3),
        "info": info,
    }
    _write_json_atomic(config.work_path / MANIFEST_NAME, manifest)
    return StageResult(stage, "ran", outputs, seconds, info)


def run_pipeline(config: PipelineConfig, stages=STAGES, force: bool = False) -> list[StageResult]:
    return [run_stage(config, s, force=force) for s in stages]


# ---------------------------------------------------------------- artifact loading

def load_training_data(config: PipelineConfig) -> DetectionDataset:
    ds = parse_yolo_dataset(config.data.root, config.data.split)
    return resize_dataset(ds, config.diffusion.image_size)


def resolve_max_objects(config: PipelineConfig, dataset: DetectionDataset) -> int:
    n = config.diffusion.max_objects
    return max(1, dataset.max_objects()) if n == "auto" else int(n)


def model_config(config: PipelineConfig, dataset: DetectionDataset) -> ModelConfig:
    d = config.diffusion
    return ModelConfig(
        image_size=d.image_size, channels=tuple(d.channels), attn_levels=tuple(d.attn_levels),
        max_objects=resolve_max_objects(config, dataset), text_length=d.text_length, text_dim=d.text_dim,
        image_encoder_channels=tuple(d.image_encoder_channels) if d.image_encoder_channels else None,
        T=d.T, schedule=d.schedule,
    )


def load_model(config: PipelineConfig, which: str = "control") -> ObjectwiseDenoiser:
    stage = {"finetune": "finetune", "control": "train-control"}[which]
    return load_checkpoint(stage_outputs(config, stage)["checkpoint"])


def load_pool(config: PipelineConfig, categories) -> ForegroundPool:
    return ForegroundPool.load(stage_outputs(config, "pool")["pool"], categories)


def load_sampler(config: PipelineConfig, max_objects: int) -> LayoutSampler:
    size = config.diffusion.image_size
    return LayoutSampler.load(stage_outputs(config, "fit-stats")["stats"], (size, size), max_objects)


def load_discriminator(config: PipelineConfig) -> ForegroundDiscriminator:
    return ForegroundDiscriminator.load(stage_outputs(config, "filter")["filter"] / "discriminator.pt")


def _read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _pseudo_from_record(record: dict) -> PseudoLabel:
    anns = tuple(Annotation(a["category_id"], BBox(*a["box"])) for a in record["annotations"])
    return PseudoLabel(anns, tuple(record["image_size"]))


def _pseudo_to_record(name: str, pseudo: PseudoLabel) -> dict:
    return {"image": name, "image_size": list(pseudo.image_size),
            "annotations": [{"category_id": a.category_id, "box": [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h]}
                            for a in pseudo.annotations]}


def load_synthesized(config: PipelineConfig) -> tuple[DetectionDataset, list[PseudoLabel]]:
    """Raw synthesized images with their exact (unfiltered) pseudo-labels."""
    raw = stage_outputs(config, "synthesize")["raw"]
    ds = parse_yolo_dataset(raw, "train") if (raw / "train" / "images").is_dir() else None
    pseudo = [_pseudo_from_record(r) for r in _read_jsonl(raw / "layouts.jsonl")]
    if ds is None:
        meta = read_manifest(raw)
        ds = DetectionDataset(tuple(meta["names"]), meta["scene_name"], "train", ())
    return ds, pseudo


# ---------------------------------------------------------------- stages

def _optimizer(section) -> OptimizerConfig:
    return OptimizerConfig(lr=section.lr, batch_size=section.batch_size, log_every=section.log_every)


def _seed_int(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31 - 1))


def stage_finetune(ctx: StageContext) -> dict:
    cfg = ctx.config
    ds = load_training_data(cfg)
    torch.manual_seed(_seed_int(ctx.rng))
    model = ObjectwiseDenoiser(model_config(cfg, ds))
    history: list = []
    ctx.out("metrics").touch()
    train_finetune(model, ds, cfg.finetune.lambda_, cfg.finetune.steps, _optimizer(cfg.finetune), ctx.rng,
                   metrics_path=ctx.out("metrics"), history=history)
    save_checkpoint(model, ctx.out("checkpoint"), meta={"stage": "finetune", "steps": cfg.finetune.steps})
    probes = [r["probe_loss"] for r in history if "probe_loss" in r]
    return {"max_objects": model.max_objects, "probe_loss": probes}


def stage_pool(ctx: StageContext) -> dict:
    cfg = ctx.config
    model = load_model(cfg, "finetune")
    ds_meta = read_manifest(cfg.data.root)
    pool = generate_foreground_pool(model, tuple(ds_meta["names"]), cfg.pool.size, ctx.rng,
                                    steps=cfg.diffusion.sampling_steps, batch_size=cfg.pool.batch_size)
    pool.save(ctx.out("pool"))
    return {"images": len(pool)}


def stage_train_control(ctx: StageContext) -> dict:
    cfg = ctx.config
    ds = load_training_data(cfg)
    model = load_model(cfg, "finetune")
    pool = load_pool(cfg, ds.categories)
    ctx.out("metrics").touch()
    train_control(model, ds, pool, cfg.control.gamma, cfg.control.steps, _optimizer(cfg.control), ctx.rng,
                  freeze_base=cfg.control.freeze_base, metrics_path=ctx.out("metrics"))
    save_checkpoint(model, ctx.out("checkpoint"), meta={"stage": "train-control", "steps": cfg.control.steps})
    return {}


def stage_fit_stats(ctx: StageContext) -> dict:
    cfg = ctx.config
    ds = load_training_data(cfg)
    size = cfg.diffusion.image_size
    sampler = LayoutSampler(max_objects=resolve_max_objects(cfg, ds), image_size=(size, size)).fit(ds)
    sampler.save(ctx.out("stats"))
    return {"max_objects": sampler.n_objects_, "missing_categories": sampler.box_stats_.missing_categories}


def stage_synthesize(ctx: StageContext) -> dict:
    cfg = ctx.config
    model = load_model(cfg, "control")
    n = model.max_objects
    sampler = load_sampler(cfg, n)
    categories = tuple(sampler.categories_)
    scene_name = read_manifest(cfg.data.root)["scene_name"]
    pool = load_pool(cfg, categories)
    m = cfg.synthesis.num_images
    layout_rng, cond_rng, noise_rng = ctx.rng.spawn(3)
    pseudo = sampler.sample(m, random_state=layout_rng)
    triplets = [build_triplet(p, categories, scene_name, pool, n, cond_rng) for p in pseudo]
    images = sample_triplets(model, triplets, cfg.diffusion.sampling_steps, noise_rng, cfg.synthesis.batch_size)
    names = [f"synth_{i:05d}" for i in range(m)]
    items = [LabeledImage(img, p.annotations, name) for img, p, name in zip(images, pseudo, names)]
    root = ctx.out("raw")
    export_yolo_dataset(DetectionDataset(categories, scene_name, "train", tuple(items)), root)
    _write_jsonl(root / "layouts.jsonl", [_pseudo_to_record(nm, p) for nm, p in zip(names, pseudo)])
    _write_jsonl(root / "conditions.jsonl", [
        {"image": nm, "text_list": list(build_text_list(p, categories, n).entries),
         "global_prompt": build_global_prompt(p, categories, scene_name)}
        for nm, p in zip(names, pseudo)])
    return {"generated": m}


def stage_filter(ctx: StageContext) -> dict:
    cfg = ctx.config
    dc = cfg.discriminator
    real = load_training_data(cfg)
    patch_rng, fit_rng = ctx.rng.spawn(2)
    patches = crop_patches(real, dc.per_image_bg, patch_rng, patch_size=dc.patch_size)
    disc, report = train_discriminator(patches, dc.epochs, {"lr": dc.lr, "batch_size": dc.batch_size},
                                       random_state=_seed_int(fit_rng), backbone=dc.backbone,
                                       threshold=dc.threshold)
    out = ctx.out("filter")
    out.mkdir(parents=True)
    disc.save(out / "discriminator.pt")
    _write_json_atomic(out / "discriminator.json", report)

    synth, pseudo = load_synthesized(cfg)
    decisions, results = [], []
    counts = {"generated": len(pseudo), "clean": 0, "partially_filtered": 0, "dropped": 0,
              "boxes_total": 0, "boxes_kept": 0}
    for item, p in zip(synth.items, pseudo):
        res = filter_pseudo_labels(item.pixels, p, disc)
        for j, d in enumerate(res.decisions()):
            decisions.append({"image": item.name, "index": j, **d})
        status = "dropped" if res.dropped else ("partially_filtered" if res.n_removed else "clean")
        counts[status] += 1
        counts["boxes_total"] += len(p)
        counts["boxes_kept"] += len(res.pseudo)
        results.append({**_pseudo_to_record(item.name, res.pseudo), "status": status})
    _write_jsonl(out / "decisions.jsonl", decisions)
    _write_jsonl(out / "filtered.jsonl", results)
    _write_json_atomic(out / "summary.json", counts)
    return {"discriminator": report, **counts}


@dataclass
class SynthesisReport:
    requested: int
    generated: int
    filtered: int               # images whose boxes all survived filtering
    partially_filtered: int     # images that lost some boxes
    dropped: int                # images that lost every box
    boxes_total: int
    boxes_kept: int
    realization_rate: float
    fid: float | None = None
    fid_extractor: str | None = None
    stage_seconds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generated != self.filtered + self.partially_filtered + self.dropped:
            raise ValueError("report accounting broken: generated != filtered + partially_filtered + dropped")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisReport":
        return cls(**d)


def stage_export(ctx: StageContext) -> dict:
    cfg = ctx.config
    synth, _ = load_synthesized(cfg)
    filt = stage_outputs(cfg, "filter")["filter"]
    results = {r["image"]: r for r in _read_jsonl(filt / "filtered.jsonl")}
    counts = json.loads((filt / "summary.json").read_text())
    items = []
    for item in synth.items:
        r = results[item.name]
        if r["status"] != "dropped":
            items.append(LabeledImage(item.pixels, _pseudo_from_record(r).annotations, item.name))
    export_yolo_dataset(synth.with_items(items, "train"), ctx.out("dataset"))
    manifest = read_pipeline_manifest(cfg)
    total = counts["boxes_total"]
    report = SynthesisReport(
        requested=cfg.synthesis.num_images, generated=counts["generated"], filtered=counts["clean"],
        partially_filtered=counts["partially_filtered"], dropped=counts["dropped"],
        boxes_total=total, boxes_kept=counts["boxes_kept"],
        realization_rate=counts["boxes_kept"] / total if total else float("nan"),
        stage_seconds={s: e["seconds"] for s, e in manifest["stages"].items() if s in STAGES[:6]},
    )
    _write_json_atomic(ctx.out("report"), report.to_dict())
    return {"exported": len(items)}


def single_object_layouts(sampler: LayoutSampler, n: int, rng) -> list[PseudoLabel]:
    """Sampled layouts reduced to their largest object; empty draws are skipped."""
    out: list[PseudoLabel] = []
    for _ in range(100 * max(n, 1)):
        if len(out) == n:
            break
        p = sampler.sample(1, random_state=rng)[0]
        if p.annotations:
            out.append(PseudoLabel(p.annotations[:1], p.image_size))
    return out


def realization_comparison(model: ObjectwiseDenoiser, disc: ForegroundDiscriminator, layouts, categories,
                           scene_name: str, pool: ForegroundPool, steps: int, rng) -> dict:
    """Realization rate of conditioned sampling vs the same prompts without the control branch."""
    cond_rng, noise_seed = np.random.default_rng(rng.integers(2**63 - 1)), int(rng.integers(2**63 - 1))
    triplets = [build_triplet(p, categories, scene_name, pool, model.max_objects, cond_rng) for p in layouts]
    conditioned = sample_triplets(model, triplets, steps, np.random.default_rng(noise_seed))
    baseline = sample_triplets(model, triplets, steps, np.random.default_rng(noise_seed), use_control=False)

    def rate(images):
        hits = [disc.score_boxes(im, [a.bbox for a in p.annotations]) >= disc.threshold_
                for im, p in zip(images, layouts)]
        return float(np.mean(np.concatenate(hits))) if hits else float("nan")

    return {"layouts": len(layouts), "conditioned": rate(conditioned), "baseline": rate(baseline)}


def stage_eval(ctx: StageContext) -> dict:
    cfg = ctx.config
    real = load_training_data(cfg)
    disc = load_discriminator(cfg)
    report = json.loads(stage_outputs(cfg, "export")["report"].read_text())
    exported = parse_yolo_dataset(stage_outputs(cfg, "export")["dataset"], "train")
    record: dict = {"synthesis": report}
    record["discriminator"] = json.loads((stage_outputs(cfg, "filter")["filter"]
                                          / "discriminator.json").read_text())
    if cfg.eval.fid and len(exported) >= 2:
        extractor = discriminator_features(disc)
        record["fid"] = compute_fid(np.stack([it.pixels for it in real.items]),
                                    np.stack([it.pixels for it in exported.items]), extractor)
        record["fid_extractor"] = extractor.name
    boxes = [disc.score_boxes(it.pixels, [a.bbox for a in it.annotations]) for it in exported.items]
    boxes = np.concatenate(boxes) if boxes else np.zeros(0)
    record["exported_positive_rate"] = float(np.mean(boxes >= disc.threshold_)) if len(boxes) else float("nan")
    pool = load_pool(cfg, real.categories)
    pool_images = np.stack([im for c in real.categories for im in pool.images[c]])
    record["pool_positive_rate"] = float(np.mean(disc.predict(_fit_patch(pool_images, disc.patch_size))))
    if cfg.eval.single_object_layouts > 0:
        model = load_model(cfg, "control")
        sampler = load_sampler(cfg, model.max_objects)
        layouts = single_object_layouts(sampler, cfg.eval.single_object_layouts, ctx.rng)
        record["single_object"] = realization_comparison(model, disc, layouts, real.categories, real.scene_name,
                                                         pool, cfg.diffusion.sampling_steps, ctx.rng)
    _write_jsonl(ctx.out("report"), [record])
    return {k: v for k, v in record.items() if k in ("fid", "pool_positive_rate", "single_object")}


def _fit_patch(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[1:3] == (size, size):
        return images
    return np.stack([resize_bilinear(im, size, size) for im in images])


STAGE_FUNCTIONS: dict[str, Callable[[StageContext], dict]] = {
    "finetune": stage_finetune,
    "pool": stage_pool,
    "train-control": stage_train_control,
    "fit-stats": stage_fit_stats,
    "synthesize": stage_synthesize,
    "filter": stage_filter,
    "export": stage_export,
    "eval": stage_eval,
}


def read_report(config: PipelineConfig) -> SynthesisReport:
    path = stage_outputs(config, "export")["report"]
    if not path.is_file():
        raise MissingArtifact(f"no synthesis report at {path}; run `odgen export` first")
    return SynthesisReport.from_dict(json.loads(path.read_text()))


def synthesize_dataset(config: PipelineConfig, evaluate: bool = False) -> tuple[DetectionDataset, SynthesisReport]:
    """Sample layouts, generate, filter and export; returns the exported dataset and its report.

    Needs the trained control model, pool and layout statistics. With
    ``evaluate`` the FID against the training images is added to the report.
    """
    for stage in ("synthesize", "filter", "export") + (("eval",) if evaluate else ()):
        run_stage(config, stage)
    dataset = parse_yolo_dataset(config.export_path, "train")
    report = read_report(config)
    if evaluate:
        record = _read_jsonl(stage_outputs(config, "eval")["report"])[0]
        report.fid, report.fid_extractor = record.get("fid"), record.get("fid_extractor")
    return dataset, report
