"""Run orchestration: config loading, cohort degradation, model batches, manifests.

A run directory looks like::

    <run>/manifest.json
    <run>/volumes/<condition_id>/<case_id>.nii.gz
    <run>/detections/<condition_id>.csv        (+ .stdout.log / .stderr.log)
    <run>/consensus.csv
    <run>/report/*.csv, *.svg, condition_table.txt
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .annotations import (
    DEFAULT_MERGE_RADIUS_MM,
    DEFAULT_MIN_READERS,
    AnnotationError,
    ConsensusNodule,
    build_consensus,
    parse_lidc_xml,
    read_consensus_csv,
    write_consensus_csv,
)
from .degrade import (
    DEFAULT_SEED,
    DEFAULT_SIGMA_BASE_HU,
    Condition,
    DegradeError,
    NoiseModel,
    apply_condition,
    condition_parameters,
    condition_suite,
)
from .detections import (
    DetectionError,
    ExternalModelError,
    detection_diagnostics,
    parse_detections,
    run_external_model,
)
from .evaluate import DEFAULT_RADIUS_MM, DEFAULT_SWEEP, DEFAULT_THRESHOLD, MatchParams, evaluate_cohort
from .report import write_report
from .volume_io import DEFAULT_MIN_SLICES, Geometry, VolumeError, read_volume, validate_volume, write_volume

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "NODULEQA_OUTPUT_ROOT"
DEFAULT_MODEL_TIMEOUT_S = 3600


class ConfigError(ValueError):
    """Usage or configuration problem (exit code 1)."""


class DataError(ValueError):
    """Unreadable or invalid input data (exit code 2)."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def case_id_from_path(path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def discover_volumes(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    found = sorted(p for p in directory.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    return {case_id_from_path(p): p for p in found}


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "out"))


@dataclass
class RunConfig:
    """Resolved run configuration (see README for the YAML schema)."""

    cases: dict[str, Path]
    output_root: Path
    conditions: list[Condition] = field(default_factory=condition_suite)
    sigma_base_hu: float = DEFAULT_SIGMA_BASE_HU
    noise_mode: str = "literal"
    seed: int = DEFAULT_SEED
    min_slices: int = DEFAULT_MIN_SLICES
    jobs: int = 1
    consensus_csv: Path | None = None
    xml_dir: Path | None = None
    min_readers: int = DEFAULT_MIN_READERS
    merge_radius_mm: float = DEFAULT_MERGE_RADIUS_MM
    model_command: str | None = None
    model_timeout_s: int = DEFAULT_MODEL_TIMEOUT_S
    threshold: float = DEFAULT_THRESHOLD
    radius_mm: float = DEFAULT_RADIUS_MM
    sweep: tuple[float, ...] = DEFAULT_SWEEP

    @property
    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.sigma_base_hu, self.seed, self.noise_mode)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "cases": {k: str(v) for k, v in sorted(self.cases.items())},
            "output_root": str(self.output_root),
            "conditions": [c.to_dict() for c in self.conditions],
            "noise": {"sigma_base_hu": self.sigma_base_hu, "mode": self.noise_mode},
            "seed": self.seed,
            "min_slices": self.min_slices,
            "jobs": self.jobs,
            "annotations": {
                "consensus_csv": str(self.consensus_csv) if self.consensus_csv else None,
                "xml_dir": str(self.xml_dir) if self.xml_dir else None,
                "min_readers": self.min_readers,
                "merge_radius_mm": self.merge_radius_mm,
            },
            "model": {"command": self.model_command, "timeout_s": self.model_timeout_s},
            "evaluation": {
                "threshold": self.threshold,
                "radius_mm": self.radius_mm,
                "sweep": list(self.sweep),
            },
        }


def _resolve(base: Path, value) -> Path:
    p = Path(os.path.expanduser(str(value)))
    return p if p.is_absolute() else base / p


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML/JSON config; non-None ``overrides`` (from CLI flags) win.

    Relative paths are resolved against the config file's directory.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        base = path.parent.resolve()
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    o = {k: v for k, v in (overrides or {}).items() if v is not None}

    cases: dict[str, Path] = {}
    if "volumes_dir" in raw:
        cases.update(discover_volumes(_resolve(base, raw["volumes_dir"])))
    for cid, p in (raw.get("cases") or {}).items():
        cases[str(cid)] = _resolve(base, p)
    if "volumes_dir" in o:
        cases = discover_volumes(o["volumes_dir"])

    try:
        conds_raw = raw.get("conditions", "default")
        if conds_raw in (None, "default"):
            conditions = condition_suite()
        else:
            conditions = [Condition.from_dict(c) for c in conds_raw]
    except (DegradeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad conditions: {exc}") from exc
    if len({c.id for c in conditions}) != len(conditions):
        raise ConfigError("condition ids must be unique")

    noise = raw.get("noise") or {}
    ann = raw.get("annotations") or {}
    model = raw.get("model") or {}
    ev = raw.get("evaluation") or {}
    if o.get("output_root"):
        out_root = Path(o["output_root"])
    elif raw.get("output_root"):
        out_root = _resolve(base, raw["output_root"])
    else:
        out_root = default_output_root()
    try:
        cfg = RunConfig(
            cases=cases,
            output_root=out_root,
            conditions=conditions,
            sigma_base_hu=float(o.get("sigma_base_hu", noise.get("sigma_base_hu", DEFAULT_SIGMA_BASE_HU))),
            noise_mode=str(o.get("noise_mode", noise.get("mode", "literal"))),
            seed=int(o.get("seed", raw.get("seed", DEFAULT_SEED))),
            min_slices=int(o.get("min_slices", raw.get("min_slices", DEFAULT_MIN_SLICES))),
            jobs=int(o.get("jobs", raw.get("jobs", 1))),
            consensus_csv=_resolve(base, ann["consensus_csv"]) if ann.get("consensus_csv") else None,
            xml_dir=_resolve(base, ann["xml_dir"]) if ann.get("xml_dir") else None,
            min_readers=int(o.get("min_readers", ann.get("min_readers", DEFAULT_MIN_READERS))),
            merge_radius_mm=float(o.get("merge_radius_mm", ann.get("merge_radius_mm", DEFAULT_MERGE_RADIUS_MM))),
            model_command=o.get("model_command", model.get("command")),
            model_timeout_s=int(o.get("model_timeout_s", model.get("timeout_s", DEFAULT_MODEL_TIMEOUT_S))),
            threshold=float(o.get("threshold", ev.get("threshold", DEFAULT_THRESHOLD))),
            radius_mm=float(o.get("radius_mm", ev.get("radius_mm", DEFAULT_RADIUS_MM))),
            sweep=tuple(float(t) for t in ev.get("sweep", DEFAULT_SWEEP)),
        )
        cfg.noise_model  # validates sigma and mode
        MatchParams(cfg.threshold, cfg.radius_mm)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


@dataclass
class DegradeEntry:
    case_id: str
    condition_id: str
    input_path: str
    output_path: str
    parameters: dict
    input_sha256: str
    output_sha256: str | None = None
    status: str = "planned"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "condition_id": self.condition_id,
            "input": self.input_path,
            "output": self.output_path,
            "parameters": self.parameters,
            "input_sha256": self.input_sha256,
            "output_sha256": self.output_sha256,
            "status": self.status,
            "error": self.error,
        }


@dataclass
class DegradeResult:
    entries: list[DegradeEntry]
    excluded: list[dict]
    geometries: dict[str, Geometry]
    affine_sources: dict[str, str]

    def produced(self) -> set[tuple[str, str]]:
        return {(e.case_id, e.condition_id) for e in self.entries if e.status == "ok"}


def degrade_cohort(
    cases: dict[str, Path],
    out_dir,
    conditions: list[Condition],
    noise: NoiseModel,
    min_slices: int = DEFAULT_MIN_SLICES,
    jobs: int = 1,
    dry_run: bool = False,
    rel_to: Path | None = None,
) -> DegradeResult:
    """Write ``out_dir/<condition>/<case>.nii.gz`` for every valid case.

    Volumes failing :func:`validate_volume` are excluded and listed.
    """
    out_dir = Path(out_dir)
    rel_to = rel_to or out_dir

    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(rel_to))
        except ValueError:
            return str(p)

    excluded, geometries, sources, plans = [], {}, {}, []
    for case_id in sorted(cases):
        path = Path(cases[case_id])
        try:
            vol = read_volume(path)
        except VolumeError as exc:
            excluded.append({"case_id": case_id, "input": str(path), "reasons": [str(exc)]})
            continue
        report = validate_volume(vol, min_slices)
        if not report.ok:
            excluded.append({"case_id": case_id, "input": str(path), "reasons": list(report.messages)})
            continue
        geometries[case_id] = vol.geometry
        sources[case_id] = vol.affine_source
        digest = sha256_file(path)
        for cond in conditions:
            target = out_dir / cond.id / f"{case_id}.nii.gz"
            try:
                params = condition_parameters(cond, vol, noise, case_id)
            except DegradeError as exc:
                params = cond.to_dict()
                entry = DegradeEntry(case_id, cond.id, str(path), rel(target), params, digest, status="failed", error=str(exc))
            else:
                entry = DegradeEntry(case_id, cond.id, str(path), rel(target), params, digest)
            plans.append((entry, cond, path, target))

    if dry_run:
        return DegradeResult([p[0] for p in plans], excluded, geometries, sources)

    for cond in conditions:
        (out_dir / cond.id).mkdir(parents=True, exist_ok=True)

    def work(item):
        entry, cond, path, target = item
        if entry.status == "failed":
            return entry
        try:
            vol = read_volume(path)
            out = apply_condition(vol, cond, noise, entry.case_id)
            write_volume(out, target)
        except (VolumeError, DegradeError) as exc:
            entry.status, entry.error = "failed", str(exc)
            return entry
        entry.output_sha256 = sha256_file(target)
        entry.status = "ok"
        return entry

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(work, plans))
    else:
        entries = [work(p) for p in plans]
    return DegradeResult(entries, excluded, geometries, sources)


def consensus_from_xml(
    xml_dir,
    geometries: dict[str, Geometry],
    min_readers: int = DEFAULT_MIN_READERS,
    merge_radius_mm: float = DEFAULT_MERGE_RADIUS_MM,
) -> tuple[dict[str, list[ConsensusNodule]], dict[str, dict]]:
    """Build consensus nodules for every ``<case_id>.xml`` that has a geometry."""
    xml_dir = Path(xml_dir)
    if not xml_dir.is_dir():
        raise DataError(f"{xml_dir}: not a directory")
    nodules, stats = {}, {}
    for xml_path in sorted(xml_dir.glob("*.xml")):
        case_id = xml_path.stem
        if case_id not in geometries:
            log.warning("%s: no volume geometry for case %s, skipped", xml_path, case_id)
            continue
        try:
            reads = parse_lidc_xml(xml_path.read_text(encoding="utf-8"), case_id, geometries[case_id])
        except AnnotationError as exc:
            raise DataError(f"{xml_path}: {exc}") from exc
        nodules[case_id] = build_consensus(reads.annotations, min_readers, merge_radius_mm)
        stats[case_id] = {
            "sessions": reads.sessions,
            "annotations": len(reads),
            "skipped_marks": reads.skipped_marks,
            "consensus": len(nodules[case_id]),
        }
    return nodules, stats


def geometries_from_volumes(volumes_dir) -> dict[str, Geometry]:
    out = {}
    for case_id, p in discover_volumes(volumes_dir).items():
        try:
            out[case_id] = read_volume(p).geometry
        except VolumeError as exc:
            raise DataError(str(exc)) from exc
    return out


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _detections_by_file(paths, geometries):
    dets = []
    for p in paths:
        try:
            dets.extend(parse_detections(p, geometries))
        except DetectionError as exc:
            raise DataError(str(exc)) from exc
    return dets


@dataclass
class RunOutcome:
    run_dir: Path
    manifest: dict
    exit_code: int


def run_pipeline(cfg: RunConfig, dry_run: bool = False) -> RunOutcome:
    """Degrade -> external model per condition -> consensus -> evaluate -> report."""
    if not cfg.model_command:
        raise ConfigError("model.command is required for `run`")
    for placeholder in ("{input_dir}", "{output}"):
        if placeholder not in cfg.model_command:
            raise ConfigError(f"model.command lacks the {placeholder} placeholder")
    if not cfg.cases:
        raise ConfigError("no input volumes configured")
    if cfg.consensus_csv is None and cfg.xml_dir is None:
        raise ConfigError("annotations.consensus_csv or annotations.xml_dir is required")

    run_dir = Path(cfg.output_root)
    vol_dir = run_dir / "volumes"
    det_dir = run_dir / "detections"
    manifest: dict[str, Any] = {
        "tool": "noduleqa",
        "tool_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dry_run": dry_run,
    }

    deg = degrade_cohort(
        cfg.cases, vol_dir, cfg.conditions, cfg.noise_model, cfg.min_slices, cfg.jobs, dry_run, rel_to=run_dir
    )
    manifest["affine_sources"] = dict(sorted(deg.affine_sources.items()))
    manifest["excluded"] = deg.excluded
    manifest["degrade"] = [e.to_dict() for e in deg.entries]
    manifest["model_runs"] = [
        {
            "condition_id": c.id,
            "input_dir": str(Path("volumes") / c.id),
            "output": str(Path("detections") / f"{c.id}.csv"),
            "status": "planned",
        }
        for c in cfg.conditions
    ]
    if dry_run:
        return RunOutcome(run_dir, manifest, 0)

    det_dir.mkdir(parents=True, exist_ok=True)
    exit_code = 0
    produced = deg.produced()
    runs, det_files, evaluated = [], [], set()

    def model_batch(cond: Condition) -> dict:
        out = det_dir / f"{cond.id}.csv"
        entry = {"condition_id": cond.id, "input_dir": str(Path("volumes") / cond.id), "output": str(Path("detections") / out.name)}
        try:
            mr = run_external_model(
                cfg.model_command, vol_dir / cond.id, out, cfg.model_timeout_s, deg.geometries, cond.id
            )
        except ExternalModelError as exc:
            entry.update(status="failed", error=str(exc))
            if exc.run is not None:
                entry.update(returncode=exc.run.returncode, timed_out=exc.run.timed_out, command=exc.run.command,
                             duration_s=round(exc.run.duration_s, 3))
            return entry
        entry.update(status="ok", returncode=mr.returncode, command=mr.command, duration_s=round(mr.duration_s, 3),
                     output_sha256=sha256_file(out), detections=len(mr.detections or []))
        return entry

    batch_conds = [c for c in cfg.conditions if any(cc == c.id for _, cc in produced)]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            runs = list(pool.map(model_batch, batch_conds))
    else:
        runs = [model_batch(c) for c in batch_conds]
    for r in runs:
        if r["status"] == "ok":
            det_files.append(run_dir / r["output"])
            evaluated |= {(case, cid) for case, cid in produced if cid == r["condition_id"]}
        else:
            exit_code = 3
    manifest["model_runs"] = runs

    if cfg.consensus_csv is not None:
        try:
            nodules = read_consensus_csv(cfg.consensus_csv)
        except (AnnotationError, OSError) as exc:
            raise DataError(str(exc)) from exc
        manifest["consensus_source"] = {"csv": str(cfg.consensus_csv), "sha256": sha256_file(cfg.consensus_csv)}
    else:
        nodules, stats = consensus_from_xml(cfg.xml_dir, deg.geometries, cfg.min_readers, cfg.merge_radius_mm)
        manifest["consensus_source"] = {"xml_dir": str(cfg.xml_dir), "cases": stats}
    nodules = {c: nodules.get(c, []) for c in sorted(deg.geometries)}
    write_consensus_csv([n for c in sorted(nodules) for n in nodules[c]], run_dir / "consensus.csv")

    dets = [d for d in _detections_by_file(det_files, deg.geometries) if (d.case_id, d.condition_id) in evaluated]
    manifest["detection_diagnostics"] = detection_diagnostics(dets, deg.geometries)
    report = evaluate_cohort(
        nodules, dets, cfg.conditions, MatchParams(cfg.threshold, cfg.radius_mm), cfg.sweep, evaluated
    )
    paths = write_report(report, run_dir / "report")
    manifest["report"] = {name: {"path": str(p.relative_to(run_dir)), "sha256": sha256_file(p)} for name, p in sorted(paths.items())}
    manifest["absent_cells"] = [list(k) for k in sorted(report.absent_cells())]
    manifest["cases_without_nodules"] = report.cases_without_nodules
    write_manifest(manifest, run_dir / "manifest.json")
    return RunOutcome(run_dir, manifest, exit_code)
