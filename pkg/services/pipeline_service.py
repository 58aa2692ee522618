"""
Pipeline Service Module - Localize, retrieve, compile and edit, end to end
Runs the four stages per image, persists every intermediate artifact and
isolates failures across a batch.
"""

import contextlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import PipelineConfig
from database import create_run_dir, load_graph, read_json, write_json, write_run_index
from services.backbone import BackboneClient, TinyBackbone
from services.cue_service import (
    EmotionPrompt, SceneStructure, calibrate, compile_prompt, filter_bank,
    load_conflict_rules, load_cue_lexicon, plain_prompt, select_cues
)
from services.denoisers import DenoiserClient, GaussianDenoiser, PixelCodec, ZeroDenoiser
from services.dsee_service import EditConfig, NoiseSchedule, edit
from services.errors import ConfigError, EmoKgError, ManifestError, StageError
from services.image_io import load_image, save_image
from services.lmm_client import make_lmm_client
from services.providers import IntensityClient, make_embedding_provider
from services.region_service import AffectiveMask, DecoderParams, LayerSet, localize
from services.retrieval_service import (
    RetrievalQuery, resolve_starts, resolve_targets, retrieve_subgraph, save_subgraph
)

logger = logging.getLogger(__name__)

BATCH_COLUMNS = ("image_path", "target_emotions", "scene_path")
TARGET_SEPARATOR = ";"
STAGES = ("era", "retrieval", "cues", "dsee")
EVAL_MANIFEST = "eval_manifest.csv"


@dataclass(frozen=True)
class Ablation:
    """Which parts of the method a pipeline variant keeps."""
    localize: bool
    knowledge_prompt: bool
    inject_attention: bool


# full frame and o_prompt stand in for a dropped region or knowledge prompt
ABLATION_VARIANTS = {
    "full": Ablation(localize=True, knowledge_prompt=True, inject_attention=True),
    "no_era": Ablation(localize=False, knowledge_prompt=True, inject_attention=True),
    "no_kg": Ablation(localize=True, knowledge_prompt=False, inject_attention=True),
    "era": Ablation(localize=True, knowledge_prompt=False, inject_attention=False),
    "base": Ablation(localize=False, knowledge_prompt=False, inject_attention=False),
}


@dataclass
class PipelineResources:
    """Everything a run needs that can be built once and shared read-only."""
    graph: Any
    backbone: Any
    decoder: DecoderParams
    layers: LayerSet
    provider: Any
    intensity: Any
    rules: list
    lexicon: dict
    lmm_client: Any
    denoiser: Any
    schedule: NoiseSchedule
    codec: PixelCodec
    lock: Any = field(default_factory=contextlib.nullcontext)


def build_resources(config: PipelineConfig) -> PipelineResources:
    """Load the graph and construct backends from the configuration."""
    graph = load_graph(config.graph_path, emotion_labels=config.kg.emotion_labels)
    clients = config.clients

    if clients.backbone_endpoint:
        backbone = BackboneClient(clients.backbone_endpoint, clients.timeout, num_layers=config.era.backbone_depth)
    else:
        backbone = TinyBackbone(
            patch=config.era.patch, dim=config.era.backbone_dim,
            depth=config.era.backbone_depth, seed=config.run.seed,
        )
    if config.era.decoder_path:
        decoder = DecoderParams.load(config.resolve(config.era.decoder_path))
    else:
        decoder = DecoderParams.initialize(config.era.backbone_dim, (1, 1), seed=config.run.seed)

    schedule = NoiseSchedule.scaled_linear(config.dsee.steps)
    if config.dsee.backend == "zero":
        denoiser = ZeroDenoiser()
    elif config.dsee.backend == "gaussian":
        denoiser = GaussianDenoiser(schedule, std=config.dsee.prior_std)
    else:
        denoiser = DenoiserClient(clients.denoiser_endpoint, timeout=clients.timeout)

    return PipelineResources(
        graph=graph,
        backbone=backbone,
        decoder=decoder,
        layers=LayerSet.last(config.era.num_layers, config.era.backbone_depth),
        provider=make_embedding_provider(clients.embedding_endpoint, dim=graph.dim, seed=config.run.seed),
        intensity=IntensityClient(clients.intensity_endpoint) if clients.intensity_endpoint else None,
        rules=load_conflict_rules(config.resolve(config.cues.conflict_rules)),
        lexicon=load_cue_lexicon(config.resolve(config.cues.lexicon)),
        lmm_client=make_lmm_client(clients.lmm_endpoint, clients.lmm_command, clients.timeout),
        denoiser=denoiser,
        schedule=schedule,
        codec=PixelCodec(config.dsee.latent_scale),
        lock=threading.Lock() if getattr(denoiser, "exclusive", False) else contextlib.nullcontext(),
    )


@dataclass
class RunRecord:
    """
    Provenance of one image. Artifact paths are relative to the item
    directory; wall-clock timings are kept out so records are byte-stable.
    """
    name: str
    image_path: str
    target_emotions: List[str]
    scene: Dict
    settings: Dict
    mask: Optional[Dict] = None
    retrieval: Optional[Dict] = None
    cues: Optional[Dict] = None
    prompt: Optional[Dict] = None
    edit: Optional[Dict] = None
    status: str = "pending"
    error: Optional[Dict] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "image_path": self.image_path,
            "target_emotions": list(self.target_emotions),
            "scene": self.scene,
            "settings": self.settings,
            "mask": self.mask,
            "retrieval": self.retrieval,
            "cues": self.cues,
            "prompt": self.prompt,
            "edit": self.edit,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunRecord":
        return cls(**{k: data.get(k) for k in (
            "name", "image_path", "target_emotions", "scene", "settings", "mask",
            "retrieval", "cues", "prompt", "edit", "error",
        )}, status=data.get("status", "pending"))

    def save(self, item_dir: str) -> str:
        write_json(os.path.join(item_dir, "timings.json"), self.timings)
        return write_json(os.path.join(item_dir, "record.json"), self.to_dict())

    @classmethod
    def load(cls, path: str) -> "RunRecord":
        record = cls.from_dict(read_json(path))
        timings_path = os.path.join(os.path.dirname(path), "timings.json")
        if os.path.exists(timings_path):
            record.timings = read_json(timings_path)
        return record


def run_settings(config: PipelineConfig) -> Dict:
    """The config values a record needs to be replayed."""
    return {
        "k": config.kg.k,
        "lam": config.cues.lam,
        "K": config.cues.K,
        "tau": config.cues.tau,
        "mode": config.cues.mode,
        "num_layers": config.era.num_layers,
        "threshold": config.era.threshold,
        "steps": config.dsee.steps,
        "guidance_scale": config.dsee.guidance_scale,
        "lambda_att": config.dsee.lambda_att,
        "harmonize_steps": config.dsee.harmonize_steps,
        "backend": config.dsee.backend,
        "latent_scale": config.dsee.latent_scale,
        "soft_mask": config.dsee.soft_mask,
        "seed": config.run.seed,
        "ablation": config.run.ablation,
    }


@contextlib.contextmanager
def _stage(name: str, record: RunRecord, item_dir: str):
    started = time.perf_counter()
    try:
        yield
    except Exception as e:
        record.status = "failed"
        record.error = {"stage": name, "type": type(e).__name__, "message": str(e)}
        record.timings[name] = time.perf_counter() - started
        record.save(item_dir)
        logger.warning("Stage %s failed for %s: %s", name, record.name, e)
        raise StageError(name, e, record) from e
    record.timings[name] = time.perf_counter() - started


def run_single(
    image_path: str,
    target_emotions: Sequence[str],
    config: PipelineConfig,
    scene: SceneStructure,
    resources: Optional[PipelineResources] = None,
    item_dir: Optional[str] = None,
    name: Optional[str] = None,
    run_dsee: bool = True,
) -> RunRecord:
    """
    Run region localization, retrieval, cue transfer and editing for one image.

    Args:
        image_path: source image
        target_emotions: one or more target emotion labels
        config: validated pipeline configuration
        scene: objects, scene label and description of the image
        resources: shared backends (built from config when omitted)
        item_dir: artifact directory (a new run directory when omitted)
        name: record name (defaults to the image file stem)
        run_dsee: skip the editing stage when False

    Returns:
        RunRecord: the completed record

    Raises:
        StageError: carrying the failing stage and the partial record
    """
    targets = [t for t in target_emotions if t]
    if not targets:
        raise ConfigError("At least one target emotion is required.")
    if resources is None:
        config.validate()
        resources = build_resources(config)
    if item_dir is None:
        item_dir = create_run_dir(config.resolve(config.run.output_dir), config.run.run_name)
    os.makedirs(item_dir, exist_ok=True)

    record = RunRecord(
        name=name or os.path.splitext(os.path.basename(image_path))[0],
        image_path=os.path.abspath(image_path),
        target_emotions=list(targets),
        scene=scene.to_dict(),
        settings=run_settings(config),
    )
    graph = resources.graph
    variant = ABLATION_VARIANTS.get(config.run.ablation)
    if variant is None:
        raise ConfigError(f"Unknown ablation variant '{config.run.ablation}'.")

    with _stage("era", record, item_dir):
        image = load_image(image_path)
        if variant.localize:
            backbone_input = image_path if isinstance(resources.backbone, BackboneClient) else image
            mask = localize(backbone_input, resources.backbone, resources.decoder, resources.layers,
                            config.era.threshold, out_shape=image.shape[:2])
        else:
            mask = AffectiveMask.from_binary(np.ones(image.shape[:2], dtype=bool), config.era.threshold)
        mask.save(os.path.join(item_dir, "mask.png"))
        record.mask = {
            "path": "mask.png",
            "box": list(mask.box) if mask.box else None,
            "pixels": int(mask.binary.sum()),
            "source": "localized" if variant.localize else "full_frame",
        }

    if variant.knowledge_prompt:
        with _stage("retrieval", record, item_dir):
            starts = resolve_starts(graph, scene.start_names)
            query = RetrievalQuery(tuple(starts), tuple(resolve_targets(graph, targets)), config.kg.k)
            subgraph = retrieve_subgraph(graph, query)
            save_subgraph(graph, subgraph, os.path.join(item_dir, "subgraph.json"))
            record.retrieval = {
                "starts": list(query.starts),
                "targets": list(query.targets),
                "path_count": len(subgraph),
                "subgraph": "subgraph.json",
            }

        with _stage("cues", record, item_dir):
            embedding = resources.provider.embed_image(image)
            pool = select_cues(graph, subgraph, embedding, targets, config.cues.lam, config.cues.K,
                               intensity=resources.intensity, lexicon=resources.lexicon)
            pool = calibrate(pool, scene, resources.rules)
            bank = filter_bank(pool, targets, config.cues.tau, scene, resources.rules)
            prompt = compile_prompt(bank, scene, targets, config.cues.mode, resources.lmm_client)
            write_json(os.path.join(item_dir, "prompt.json"), prompt.to_dict())
            record.cues = {
                "pool": [c.attribute_node for c in pool.cues],
                "admitted": [c.attribute_node for c in bank.admitted],
                "rejected": [[c.attribute_node, reason] for c, reason in bank.rejected],
                "scores": {c.attribute_node: {"s_sim": c.s_sim, "s_emo": c.s_emo, "fused": c.fused}
                           for c in pool.cues},
            }
            record.prompt = prompt.to_dict()
    else:
        with _stage("cues", record, item_dir):
            prompt = plain_prompt(scene, targets)
            write_json(os.path.join(item_dir, "prompt.json"), prompt.to_dict())
            record.prompt = prompt.to_dict()

    if run_dsee:
        with _stage("dsee", record, item_dir):
            edit_config = EditConfig(
                guidance_scale=config.dsee.guidance_scale,
                lambda_att=config.dsee.lambda_att if variant.inject_attention else 0.0,
                harmonize_steps=config.dsee.harmonize_steps,
                soft_mask=config.dsee.soft_mask,
            )
            x_0 = resources.codec.encode(image)
            with resources.lock:
                result = edit(x_0, prompt, mask, resources.denoiser, resources.schedule, edit_config)
            save_image(os.path.join(item_dir, "edited.png"), resources.codec.decode(result.final, image.shape[:2]))
            result.save_trajectories(os.path.join(item_dir, "trajectories"))
            record.edit = {
                "config": edit_config.to_dict(),
                "output": "edited.png",
                "trajectories": [f"trajectories/{kind}.npz" for kind in ("inversion", "reconstruction", "editing")],
            }

    record.status = "ok"
    record.save(item_dir)
    logger.info("Run %s finished: prompt=%r", record.name, prompt.text)
    return record


# --- Batches ---

@dataclass
class BatchItem:
    name: str
    image_path: str
    target_emotions: List[str]
    scene_path: str


@dataclass
class BatchResult:
    run_dir: str
    records: List[RunRecord]
    failures: List[Dict]
    summary: Dict

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def read_batch_manifest(path: str) -> List[BatchItem]:
    """CSV with image_path, target_emotions (';'-separated), scene_path and an optional name."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise ManifestError(f"Manifest not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ManifestError(f"Unreadable manifest {path}: {e}") from None
    missing = [c for c in BATCH_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Manifest is missing columns: {', '.join(missing)}.")
    if frame.empty:
        raise ManifestError("Manifest has no rows.")

    base = os.path.dirname(os.path.abspath(path))
    items, names = [], set()
    for index, row in enumerate(frame.to_dict("records")):
        name = row.get("name") or f"{index:04d}"
        if name in names:
            raise ManifestError(f"Duplicate item name '{name}'.")
        names.add(name)
        items.append(BatchItem(
            name=name,
            image_path=os.path.join(base, row["image_path"]),
            target_emotions=[t.strip() for t in row["target_emotions"].split(TARGET_SEPARATOR) if t.strip()],
            scene_path=os.path.join(base, row["scene_path"]),
        ))
    return items


def _run_item(item: BatchItem, config: PipelineConfig, resources: PipelineResources,
              run_dir: str, run_dsee: bool) -> Dict:
    item_dir = os.path.join(run_dir, "items", item.name)
    os.makedirs(item_dir, exist_ok=True)
    try:
        scene = SceneStructure.from_dict(read_json(item.scene_path))
    except (OSError, ValueError, KeyError, EmoKgError) as e:
        return {"name": item.name, "status": "failed", "error": {"stage": "input", "message": str(e)}}
    try:
        record = run_single(item.image_path, item.target_emotions, config, scene,
                            resources=resources, item_dir=item_dir, name=item.name, run_dsee=run_dsee)
    except StageError as e:
        return {"name": item.name, "status": "failed", "error": e.record.error if e.record else {"stage": e.stage},
                "record": f"items/{item.name}/record.json", "timings": e.record.timings if e.record else {}}
    except EmoKgError as e:
        return {"name": item.name, "status": "failed", "error": {"stage": "input", "message": str(e)}}
    return {"name": item.name, "status": "ok", "record": f"items/{item.name}/record.json",
            "timings": record.timings, "_record": record}


def write_eval_manifest(run_dir: str, records: Sequence[RunRecord], ablation: str) -> str:
    """An `eval report` manifest for the edited items, one row per record, first target only."""
    rows = [{
        "source_path": r.image_path,
        "edited_path": os.path.join(run_dir, "items", r.name, r.edit["output"]),
        "target_emotion": r.target_emotions[0],
        "method": "pipeline",
        "ablation": ablation,
    } for r in records]
    path = os.path.join(run_dir, EVAL_MANIFEST)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def run_batch(manifest_path: str, config: PipelineConfig, run_dsee: bool = True,
              progress: bool = False) -> BatchResult:
    """
    Run every manifest item independently; failures are recorded, not raised.

    Returns:
        BatchResult: records in manifest order, failures, and a summary with mean timings
    """
    items = read_batch_manifest(manifest_path)
    config.validate()
    resources = build_resources(config)
    run_dir = create_run_dir(config.resolve(config.run.output_dir), config.run.run_name)

    def work(item):
        return _run_item(item, config, resources, run_dir, run_dsee)

    with ThreadPoolExecutor(max_workers=config.run.workers) as pool:
        entries = list(tqdm(pool.map(work, items), total=len(items), desc="Editing", disable=not progress))

    records = [entry.pop("_record") for entry in entries if "_record" in entry]
    failures = [entry for entry in entries if entry["status"] == "failed"]
    mean_timings = {}
    for stage in STAGES:
        values = [r.timings[stage] for r in records if stage in r.timings]
        if values:
            mean_timings[stage] = sum(values) / len(values)
    summary = {
        "total": len(items),
        "succeeded": len(records),
        "failed": len(failures),
        "mean_timings": mean_timings,
    }
    edited = [r for r in records if r.edit is not None]
    if edited:
        write_eval_manifest(run_dir, edited, config.run.ablation)
        summary["eval_manifest"] = EVAL_MANIFEST
    write_run_index(run_dir, entries, summary)
    logger.info("Batch finished: %d ok, %d failed (%s)", len(records), len(failures), run_dir)
    return BatchResult(run_dir, records, failures, summary)


def replay(record_path: str, config: PipelineConfig, item_dir: Optional[str] = None,
           run_dsee: Optional[bool] = None) -> RunRecord:
    """
    Re-run a record's stored inputs with its stored settings.

    The new artifacts go to item_dir (default: a "replay" folder next to the record).
    """
    stored = RunRecord.load(record_path)
    s = stored.settings
    replay_config = config.with_overrides(**{
        "kg.k": s["k"], "cues.lam": s["lam"], "cues.K": s["K"], "cues.tau": s["tau"], "cues.mode": s["mode"],
        "era.num_layers": s["num_layers"], "era.threshold": s["threshold"],
        "dsee.steps": s["steps"], "dsee.guidance_scale": s["guidance_scale"],
        "dsee.lambda_att": s["lambda_att"], "dsee.harmonize_steps": s["harmonize_steps"],
        "dsee.backend": s["backend"], "dsee.latent_scale": s["latent_scale"],
        "dsee.soft_mask": s["soft_mask"], "run.seed": s["seed"],
        "run.ablation": s.get("ablation", "full"),
    })
    item_dir = item_dir or os.path.join(os.path.dirname(os.path.abspath(record_path)), "replay")
    if run_dsee is None:
        run_dsee = stored.edit is not None
    return run_single(
        stored.image_path, stored.target_emotions, replay_config,
        SceneStructure.from_dict(stored.scene), item_dir=item_dir, name=stored.name, run_dsee=run_dsee,
    )
