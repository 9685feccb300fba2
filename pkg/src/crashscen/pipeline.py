"""Crash report to scenario bundle: context building, staged decoding, refinement.

Stage templates only carry the generation query and a ``$feedback`` slot.
The crash report, retrieved snippets and (for the behavior stage) the road
summary travel in the context channel so that the contrastive decoder can
weigh them against the context-free pass.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Callable, Mapping

from .cad import CadConfig, DecodeTrace, Greedy, Sample, decode, stop_ids, write_trace
from .retrieval import KnowledgeStore
from .roadnet import NetFormatError, RoadGraph, parse_sumo_net, road_summary, write_opendrive
from .scenario_io import (
    Reason,
    ScenarioBundle,
    ScenarioError,
    ValidationStatus,
    default_horizon,
    extract_trajectories,
    invalid,
    parse_xosc,
    save_bundle,
    validate_bundle,
    VALID,
    VALIDATION_DT,
)
from .token_model import LogitSource, PromptBundle, detokenize

log = logging.getLogger(__name__)

MAX_ITERATIONS = 10
MAX_FEEDBACK_CODES = 5
SNIPPET_SEPARATOR = "\n\n--- retrieved reference ---\n"
ROAD_SUMMARY_HEADER = "\n\n--- road network from stage 1 ---\n"
STAGES = ("road", "behavior")
STOP_WORDS = ("<eos>",)


@dataclass(frozen=True)
class CrashCase:
    id: str
    report_text: str
    diagram: bytes | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.report_text.strip():
            raise ValueError(f"case {self.id!r} has an empty report")

    @classmethod
    def from_json(cls, path: str | Path) -> CrashCase:
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        diagram = None
        if data.get("diagram"):
            diagram = (path.parent / data["diagram"]).read_bytes()
        return cls(
            id=str(data.get("id", path.stem)),
            report_text=data["report_text"],
            diagram=diagram,
            metadata={str(k): str(v) for k, v in data.get("metadata", {}).items()},
        )


def load_template(stage: str) -> str:
    return resources.files("crashscen").joinpath("templates", f"{stage}.txt").read_text(encoding="utf-8")


def default_templates() -> dict[str, str]:
    return {stage: load_template(stage) for stage in STAGES}


def template_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_context(case: CrashCase, store: KnowledgeStore | None, k: int) -> tuple[PromptBundle, list[str]]:
    """Report text plus the top-k retrieved snippets, in rank order.

    Returns the bundle and the ids of the retrieved entries.
    """
    parts = [case.report_text]
    ids: list[str] = []
    if store is not None and len(store) and k > 0:
        for hit in store.retrieve_top_k(case.report_text, k):
            parts.append(hit.entry.text)
            ids.append(hit.entry.id)
    attachments = (case.diagram,) if case.diagram else ()
    return PromptBundle(context_text=SNIPPET_SEPARATOR.join(parts), context_attachments=attachments), ids


def render_query(template: str, reasons: list[Reason] | tuple[Reason, ...] = ()) -> str:
    feedback = ""
    if reasons:
        codes = [r.code for r in reasons[:MAX_FEEDBACK_CODES]]
        feedback = "The previous attempt was rejected by the validator: " + ", ".join(codes)
    return Template(template).safe_substitute(feedback=feedback).rstrip() + "\n"


# validators take decoded text and return (status, artifact payload)
Validator = Callable[[str], "tuple[ValidationStatus, object]"]


def road_validator(text: str) -> tuple[ValidationStatus, tuple[RoadGraph, bytes] | None]:
    try:
        graph = parse_sumo_net(text.encode("utf-8"))
        if not graph.edges:
            return invalid(Reason("empty-network", "net", "no edges")), None
        xodr = write_opendrive(graph)
    except NetFormatError as exc:
        return invalid(Reason(exc.code, "net", str(exc))), None
    return VALID, (graph, xodr)


def behavior_validator(graph: RoadGraph) -> Validator:
    def check(text: str):
        try:
            doc = parse_xosc(text.encode("utf-8"))
            extract_trajectories(doc, graph, VALIDATION_DT, default_horizon(doc))
        except ScenarioError as exc:
            return invalid(Reason(exc.code, "xosc", str(exc))), None
        return VALID, doc

    return check


@dataclass
class Decoder:
    source: LogitSource
    config: CadConfig

    @classmethod
    def create(cls, source: LogitSource, alpha: float = 0.7, max_tokens: int = 4096, selection=Greedy()) -> Decoder:
        return cls(source, CadConfig(alpha, max_tokens, stop_ids(source, STOP_WORDS), selection))

    def __call__(self, bundle: PromptBundle) -> tuple[str, DecodeTrace]:
        ids, trace = decode(self.source, bundle, self.config)
        return detokenize(self.source, ids), trace


@dataclass
class StageResult:
    stage: str
    iterations_used: int
    artifact: bytes
    status: ValidationStatus
    traces: list[DecodeTrace]
    queries: list[str]
    payload: object = None

    def __post_init__(self) -> None:
        if not 1 <= self.iterations_used <= MAX_ITERATIONS:
            raise ValueError("iterations_used out of range")


def run_stage(
    bundle: PromptBundle,
    stage: str,
    decoder: Callable[[PromptBundle], tuple[str, DecodeTrace]],
    validator: Validator,
    template: str | None = None,
    max_iterations: int = MAX_ITERATIONS,
) -> StageResult:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    max_iterations = min(max_iterations, MAX_ITERATIONS)
    template = template if template is not None else load_template(stage)
    traces: list[DecodeTrace] = []
    queries: list[str] = []
    reasons: tuple[Reason, ...] = ()
    text = ""
    status = invalid(Reason("not-run"))
    payload = None
    for iteration in range(1, max_iterations + 1):
        query = render_query(template, reasons)
        queries.append(query)
        step_bundle = PromptBundle(bundle.context_text, query, (), bundle.context_attachments)
        text, trace = decoder(step_bundle)
        traces.append(trace)
        status, payload = validator(text)
        log.info("stage %s iteration %d: %s", stage, iteration, "valid" if status.valid else ",".join(status.codes))
        if status.valid:
            break
        reasons = status.reasons
    return StageResult(stage, iteration, text.encode("utf-8"), status, traces, queries, payload)


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.7
    k: int = 3
    max_tokens: int = 4096
    max_iterations: int = MAX_ITERATIONS
    seed: int | None = None
    temperature: float | None = None
    templates: Mapping[str, str] | None = None
    backend_name: str = "unspecified"

    def selection(self):
        if self.temperature is None:
            return Greedy()
        return Sample(self.temperature, self.seed or 0)


@dataclass
class GenerationResult:
    bundle: ScenarioBundle
    status: ValidationStatus
    manifest: dict
    stages: list[StageResult]
    graph: RoadGraph | None = None


def generate_scenario(
    case: CrashCase,
    source: LogitSource,
    store: KnowledgeStore | None = None,
    config: PipelineConfig = PipelineConfig(),
) -> GenerationResult:
    templates = dict(config.templates) if config.templates else default_templates()
    decoder = Decoder.create(source, config.alpha, config.max_tokens, config.selection())
    context, retrieved = build_context(case, store, config.k)

    stages = [run_stage(context, "road", decoder, road_validator, templates["road"], config.max_iterations)]
    road = stages[0]
    graph = xodr = None
    if road.status.valid:
        graph, xodr = road.payload
        behavior_ctx = PromptBundle(
            context.context_text + ROAD_SUMMARY_HEADER + road_summary(graph),
            "",
            (),
            context.context_attachments,
        )
        stages.append(run_stage(behavior_ctx, "behavior", decoder, behavior_validator(graph), templates["behavior"], config.max_iterations))
        bundle = ScenarioBundle(road.artifact, xodr, stages[1].artifact, case.id)
        status = validate_bundle(bundle)
    else:
        bundle = ScenarioBundle(road.artifact, None, None, case.id)
        status = invalid(Reason("stage1-failed", "net", f"no valid network after {road.iterations_used} iterations"), *road.status.reasons)

    manifest = {
        "case_id": case.id,
        "backend": config.backend_name,
        "alpha": config.alpha,
        "selection": "greedy" if config.temperature is None else "sample",
        "temperature": config.temperature,
        "seed": config.seed,
        "k": config.k,
        "max_tokens": config.max_tokens,
        "max_iterations": config.max_iterations,
        "retrieved": retrieved,
        "store_digest": store.digest() if store is not None else None,
        "templates": {stage: template_hash(templates[stage]) for stage in STAGES},
        "iterations": {s.stage: s.iterations_used for s in stages},
        "stage_status": {s.stage: s.status.to_dict() for s in stages},
        "validation": status.to_dict(),
    }
    return GenerationResult(bundle, status, manifest, stages, graph)


def write_result(result: GenerationResult, out_dir: str | Path, traces: bool = True) -> Path:
    out = Path(out_dir)
    save_bundle(result.bundle, out)
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for stage in result.stages:
            for i, trace in enumerate(stage.traces, 1):
                write_trace(trace, tdir / f"{stage.stage}_{i:02d}.jsonl")
    return out
