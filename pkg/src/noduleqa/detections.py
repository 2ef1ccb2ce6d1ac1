"""Model-output contract: detection files and external model invocation.

Any detector can be evaluated as long as it writes one of

* CSV with header ``case_id,condition_id,frame,x,y,z,confidence``
* JSON lines with the same field names

where ``frame`` is ``world`` (mm) or ``voxel`` (index, converted on ingest).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import shlex
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .volume_io import voxel_to_world, world_to_voxel

log = logging.getLogger(__name__)

FIELDS = ["case_id", "condition_id", "frame", "x", "y", "z", "confidence"]
FRAMES = ("world", "voxel")


class DetectionError(ValueError):
    pass


class ExternalModelError(RuntimeError):
    def __init__(self, message: str, run: "ModelRun | None" = None):
        super().__init__(message)
        self.run = run


@dataclass(frozen=True)
class Detection:
    case_id: str
    condition_id: str
    position_world: tuple[float, float, float]
    confidence: float
    source_frame: str = "world"

    def sort_key(self):
        return (self.case_id, self.condition_id, -self.confidence, self.position_world)


def sort_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=Detection.sort_key)


def _rows_from_csv(text: str) -> Iterable[tuple[int, dict]]:
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise DetectionError(f"line 1: missing column(s) {', '.join(missing)}")
    for lineno, row in enumerate(reader, start=2):
        yield lineno, row


def _rows_from_jsonl(text: str) -> Iterable[tuple[int, dict]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DetectionError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        missing = [f for f in FIELDS if f not in row]
        if missing:
            raise DetectionError(f"line {lineno}: missing column(s) {', '.join(missing)}")
        yield lineno, row


def _is_jsonl(path: Path, text: str) -> bool:
    if path.suffix in (".jsonl", ".ndjson"):
        return True
    if path.suffix == ".csv":
        return False
    return text.lstrip().startswith("{")


_UNKNOWN = object()


def _lookup(geometry_lookup, case_id: str):
    # a known case may map to None: world-frame rows only
    if isinstance(geometry_lookup, Mapping):
        return geometry_lookup.get(case_id, _UNKNOWN)
    try:
        return geometry_lookup(case_id)
    except KeyError:
        return _UNKNOWN


def parse_detections_text(text: str, geometry_lookup, jsonl: bool = False) -> list[Detection]:
    rows = _rows_from_jsonl(text) if jsonl else _rows_from_csv(text)
    out = []
    for lineno, row in rows:
        case_id = str(row["case_id"])
        frame = str(row["frame"]).strip().lower()
        if frame not in FRAMES:
            raise DetectionError(f"line {lineno}: unknown frame {row['frame']!r}")
        try:
            coords = tuple(float(row[k]) for k in ("x", "y", "z"))
            conf = float(row["confidence"])
        except (TypeError, ValueError) as exc:
            raise DetectionError(f"line {lineno}: {exc}") from exc
        if not all(math.isfinite(c) for c in coords):
            raise DetectionError(f"line {lineno}: non-finite coordinate {coords}")
        if not (0.0 <= conf <= 1.0):
            raise DetectionError(f"line {lineno}: confidence {conf} outside [0, 1]")
        g = _lookup(geometry_lookup, case_id)
        if g is _UNKNOWN:
            raise DetectionError(f"line {lineno}: unknown case_id {case_id!r}")
        if frame == "voxel":
            if g is None:
                raise DetectionError(f"line {lineno}: no geometry to convert voxel row of {case_id!r}")
            coords = tuple(voxel_to_world(g, coords).tolist())
        out.append(Detection(case_id, str(row["condition_id"]), coords, conf, frame))
    return sort_detections(out)


def parse_detections(path, geometry_lookup) -> list[Detection]:
    """Read a detections file; voxel rows are converted to world coordinates.

    Errors carry the offending line number.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return parse_detections_text(text, geometry_lookup, jsonl=_is_jsonl(path, text))
    except DetectionError as exc:
        raise DetectionError(f"{path}: {exc}") from None


def _g6(v: float) -> str:
    return f"{v:.6g}"


def format_detections_csv(dets: Iterable[Detection]) -> str:
    """CSV text of ``dets`` in world frame, coordinates at 6 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for d in sort_detections(dets):
        x, y, z = d.position_world
        w.writerow([d.case_id, d.condition_id, "world", _g6(x), _g6(y), _g6(z), _g6(d.confidence)])
    return buf.getvalue()


def format_detections_jsonl(dets: Iterable[Detection]) -> str:
    lines = []
    for d in sort_detections(dets):
        x, y, z = d.position_world
        row = dict(zip(FIELDS, [d.case_id, d.condition_id, "world", x, y, z, d.confidence]))
        lines.append(json.dumps(row))
    return "".join(line + "\n" for line in lines)


def write_detections(dets: Iterable[Detection], path) -> None:
    path = Path(path)
    dets = list(dets)
    text = format_detections_jsonl(dets) if path.suffix in (".jsonl", ".ndjson") else format_detections_csv(dets)
    path.write_text(text, encoding="utf-8", newline="")


def is_out_of_volume(d: Detection, geometry) -> bool:
    """True when the detection lies outside the voxel grid (half-voxel margin)."""
    idx = world_to_voxel(geometry, d.position_world)
    return bool(any(i < -0.5 or i > n - 0.5 for i, n in zip(idx, geometry.dims)))


def detection_diagnostics(dets: Iterable[Detection], geometries: Mapping) -> dict:
    """Per-condition detection counts and how many fall outside their volume.

    Out-of-volume detections are kept for matching; this is bookkeeping only.
    """
    out: dict[str, dict[str, int]] = {}
    for d in dets:
        row = out.setdefault(d.condition_id, {"detections": 0, "out_of_volume": 0})
        row["detections"] += 1
        g = geometries.get(d.case_id)
        if g is not None and is_out_of_volume(d, g):
            row["out_of_volume"] += 1
    return dict(sorted(out.items()))


@dataclass
class ModelRun:
    command: list[str]
    returncode: int | None
    duration_s: float
    output_path: str
    stdout_log: str
    stderr_log: str
    timed_out: bool = False
    detections: list[Detection] | None = None

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "returncode": self.returncode,
            "duration_s": round(self.duration_s, 3),
            "timed_out": self.timed_out,
            "output": self.output_path,
            "stdout_log": self.stdout_log,
            "stderr_log": self.stderr_log,
        }


def build_command(command_template: str, **values) -> list[str]:
    """Split the template shell-style and substitute placeholders per token.

    ``{input_dir}`` and ``{output}`` are required; ``{python}`` expands to the
    running interpreter and ``{condition}`` to the batch condition id.
    """
    for required in ("{input_dir}", "{output}"):
        if required not in command_template:
            raise ValueError(f"command template lacks the {required} placeholder")
    values.setdefault("python", sys.executable)
    try:
        return [tok.format(**values) for tok in shlex.split(command_template)]
    except KeyError as exc:
        raise ValueError(f"unknown placeholder {exc} in command template") from None


def run_external_model(
    command_template: str,
    input_dir,
    output_path,
    timeout_s: int,
    geometry_lookup=None,
    condition_id: str = "",
) -> ModelRun:
    """Run one detector batch and parse its output.

    Raises :class:`ExternalModelError` (with the partial :class:`ModelRun`
    attached) on non-zero exit, timeout, or a missing/unparseable output.
    """
    output_path = Path(output_path)
    if output_path.exists():
        output_path.unlink()
    cmd = build_command(
        command_template, input_dir=str(input_dir), output=str(output_path), condition=condition_id
    )
    stdout_log = output_path.with_name(output_path.name + ".stdout.log")
    stderr_log = output_path.with_name(output_path.name + ".stderr.log")
    run = ModelRun(cmd, None, 0.0, str(output_path), str(stdout_log), str(stderr_log))
    log.info("running model: %s", " ".join(shlex.quote(c) for c in cmd))
    t0 = time.monotonic()
    with open(stdout_log, "wb") as out, open(stderr_log, "wb") as err:
        try:
            proc = subprocess.run(cmd, stdout=out, stderr=err, timeout=timeout_s)
        except subprocess.TimeoutExpired:
            run.duration_s = time.monotonic() - t0
            run.timed_out = True
            raise ExternalModelError(f"model timed out after {timeout_s} s", run) from None
        except OSError as exc:
            run.duration_s = time.monotonic() - t0
            raise ExternalModelError(f"could not start model: {exc}", run) from exc
    run.duration_s = time.monotonic() - t0
    run.returncode = proc.returncode
    if proc.returncode != 0:
        raise ExternalModelError(f"model exited with status {proc.returncode}", run)
    if not output_path.exists():
        raise ExternalModelError(f"model produced no output at {output_path}", run)
    if geometry_lookup is not None:
        try:
            dets = parse_detections(output_path, geometry_lookup)
        except (DetectionError, OSError) as exc:
            raise ExternalModelError(f"unparseable model output: {exc}", run) from exc
        if condition_id:
            stray = {d.condition_id for d in dets} - {condition_id}
            if stray:
                raise ExternalModelError(
                    f"output for batch {condition_id!r} has rows for {sorted(stray)}", run
                )
        run.detections = dets
    return run
