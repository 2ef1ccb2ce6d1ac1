"""Detection-to-nodule matching and sensitivity aggregation.

A consensus nodule counts as detected when at least one detection with
confidence >= threshold lies within the match radius (both bounds inclusive).
One detection may satisfy several nodules.  All aggregates are integer
counts; ratios are formed only at the end.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import ConsensusNodule
from .degrade import Condition, condition_suite
from .detections import Detection

DEFAULT_THRESHOLD = 0.5
DEFAULT_RADIUS_MM = 15.0
DEFAULT_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))

GREEN, YELLOW, RED, ABSENT = "green", "yellow", "red", "absent"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MatchParams:
    confidence_threshold: float = DEFAULT_THRESHOLD
    match_radius_mm: float = DEFAULT_RADIUS_MM

    def __post_init__(self):
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise EvaluationError(f"threshold must be in [0, 1], got {self.confidence_threshold}")
        if not self.match_radius_mm > 0:
            raise EvaluationError(f"match radius must be > 0, got {self.match_radius_mm}")


@dataclass(frozen=True)
class MatchResult:
    nodule: ConsensusNodule
    detected: bool
    best_distance_mm: float | None = None
    best_confidence: float | None = None


@dataclass(frozen=True)
class Sensitivity:
    detected: int
    total: int

    @property
    def ratio(self) -> float | None:
        """``None`` marks an undefined sensitivity (no nodules)."""
        if self.total == 0:
            return None
        return self.detected / self.total

    @property
    def percent(self) -> str:
        return format_percent(self.detected, self.total)

    def __add__(self, other: "Sensitivity") -> "Sensitivity":
        return Sensitivity(self.detected + other.detected, self.total + other.total)


def round_half_up(value: Fraction, places: int) -> Fraction:
    scale = 10**places
    scaled = value * scale
    q = (abs(scaled.numerator) * 2 + scaled.denominator) // (2 * scaled.denominator)
    return Fraction(q if scaled >= 0 else -q, scale)


def _fmt_fraction(value: Fraction, places: int) -> str:
    r = round_half_up(value, places)
    sign = "-" if r < 0 else ""
    r = abs(r)
    whole = r.numerator // r.denominator
    if places == 0:
        return f"{sign}{whole}"
    frac = (r - whole) * 10**places
    return f"{sign}{whole}.{int(frac):0{places}d}"


def format_percent(detected: int, total: int, places: int = 1) -> str:
    """Exact decimal percentage, rounded half-up; ``n/a`` when undefined."""
    if total == 0:
        return "n/a"
    return _fmt_fraction(Fraction(100 * detected, total), places)


def match_case(
    nodules: Sequence[ConsensusNodule],
    detections: Sequence[Detection],
    p: MatchParams = MatchParams(),
) -> list[MatchResult]:
    cases = {n.case_id for n in nodules} | {d.case_id for d in detections}
    if len(cases) > 1:
        raise EvaluationError(f"mixed case ids in one match: {sorted(cases)}")
    conds = {d.condition_id for d in detections}
    if len(conds) > 1:
        raise EvaluationError(f"mixed condition ids in one match: {sorted(conds)}")

    qualifying = [d for d in detections if d.confidence >= p.confidence_threshold]
    if not nodules:
        return []
    if not qualifying:
        return [MatchResult(n, False) for n in nodules]

    # canonical order so ties resolve identically for any input permutation
    qualifying.sort(key=lambda d: (-d.confidence, d.position_world))
    det_pos = np.array([d.position_world for d in qualifying], dtype=np.float64)
    det_conf = np.array([d.confidence for d in qualifying])
    nod_pos = np.array([n.centroid_world for n in nodules], dtype=np.float64)
    dist = np.sqrt(((nod_pos[:, None, :] - det_pos[None, :, :]) ** 2).sum(axis=-1))

    out = []
    for i, n in enumerate(nodules):
        # nearest first, then highest confidence (already ordered)
        j = int(np.argmin(dist[i]))
        d = float(dist[i, j])
        out.append(MatchResult(n, d <= p.match_radius_mm, d, float(det_conf[j])))
    return out


def sensitivity(results: Iterable[MatchResult]) -> Sensitivity:
    results = list(results)
    return Sensitivity(sum(1 for r in results if r.detected), len(results))


def _group_detections(detections: Iterable[Detection]) -> dict[tuple[str, str], list[Detection]]:
    groups: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in detections:
        groups[(d.case_id, d.condition_id)].append(d)
    return groups


def _condition_labels(conditions) -> tuple[list[str], dict[str, str]]:
    known = {c.id: c.label for c in condition_suite()}
    ids, labels = [], {}
    for c in conditions:
        if isinstance(c, Condition):
            ids.append(c.id)
            labels[c.id] = c.label
        else:
            ids.append(str(c))
            labels[str(c)] = known.get(str(c), str(c))
    return ids, labels


@dataclass
class SensitivityReport:
    conditions: list[str]
    labels: dict[str, str]
    cases: list[str]
    # None marks a (case, condition) cell without model output
    cells: dict[tuple[str, str], Sensitivity | None]
    sweep: dict[str, list[tuple[float, Sensitivity]]]
    params: MatchParams = field(default_factory=MatchParams)
    cases_without_nodules: list[str] = field(default_factory=list)

    def condition_totals(self, condition_id: str) -> Sensitivity:
        total = Sensitivity(0, 0)
        for case in self.cases:
            cell = self.cells.get((case, condition_id))
            if cell is not None:
                total = total + cell
        return total

    @property
    def per_condition(self) -> dict[str, Sensitivity]:
        return {c: self.condition_totals(c) for c in self.conditions}

    def absent_cells(self) -> list[tuple[str, str]]:
        return [k for k, v in self.cells.items() if v is None]


def threshold_sweep(
    nodules_by_case: Mapping[str, Sequence[ConsensusNodule]],
    detections: Iterable[Detection],
    radius_mm: float = DEFAULT_RADIUS_MM,
    thresholds: Sequence[float] = DEFAULT_SWEEP,
    conditions: Sequence[str] | None = None,
    evaluated: set[tuple[str, str]] | None = None,
) -> dict[str, list[tuple[float, Sensitivity]]]:
    if list(thresholds) != sorted(thresholds):
        raise EvaluationError("thresholds must be sorted ascending")
    groups = _group_detections(detections)
    if conditions is None:
        conditions = sorted({c for _, c in groups})
    curves = {}
    for cond in conditions:
        points = []
        for t in thresholds:
            p = MatchParams(t, radius_mm)
            s = Sensitivity(0, 0)
            for case, nodules in nodules_by_case.items():
                if not nodules or (evaluated is not None and (case, cond) not in evaluated):
                    continue
                s = s + sensitivity(match_case(nodules, groups.get((case, cond), []), p))
            points.append((t, s))
        curves[cond] = points
    return curves


def evaluate_cohort(
    nodules_by_case: Mapping[str, Sequence[ConsensusNodule]],
    detections: Iterable[Detection],
    conditions: Sequence[Condition | str] | None = None,
    params: MatchParams = MatchParams(),
    thresholds: Sequence[float] = DEFAULT_SWEEP,
    evaluated: set[tuple[str, str]] | None = None,
) -> SensitivityReport:
    """Per-case and per-condition sensitivity plus a threshold sweep.

    ``evaluated`` lists the (case, condition) cells that actually have model
    output; cells outside it are reported absent rather than as misses.  When
    omitted, every cell is assumed evaluated.
    """
    detections = list(detections)
    groups = _group_detections(detections)
    if conditions is None:
        conditions = condition_suite()
    cond_ids, labels = _condition_labels(conditions)

    cases = sorted(c for c, ns in nodules_by_case.items() if ns)
    empty = sorted(c for c, ns in nodules_by_case.items() if not ns)
    cells: dict[tuple[str, str], Sensitivity | None] = {}
    for case in cases:
        for cond in cond_ids:
            if evaluated is not None and (case, cond) not in evaluated:
                cells[(case, cond)] = None
                continue
            results = match_case(nodules_by_case[case], groups.get((case, cond), []), params)
            cells[(case, cond)] = sensitivity(results)

    sweep = threshold_sweep(
        {c: nodules_by_case[c] for c in cases},
        detections,
        params.match_radius_mm,
        thresholds,
        cond_ids,
        evaluated,
    )
    return SensitivityReport(cond_ids, labels, cases, cells, sweep, params, empty)


def classify_fraction(cell: Sensitivity | None) -> str:
    if cell is None:
        return ABSENT
    if cell.total == 0:
        return ABSENT
    if cell.detected == 0:
        return RED
    if cell.detected == cell.total:
        return GREEN
    return YELLOW


@dataclass
class CaseMatrix:
    cases: list[str]
    conditions: list[str]
    labels: dict[str, str]
    cells: dict[tuple[str, str], Sensitivity | None]
    footer: dict[str, Sensitivity]

    def status(self, case: str, condition: str) -> str:
        return classify_fraction(self.cells.get((case, condition)))

    def rows(self) -> list[dict]:
        """Flat rows (cases then the aggregate footer), shared by CSV and SVG output."""
        out = []
        for case in self.cases:
            for cond in self.conditions:
                cell = self.cells.get((case, cond))
                out.append(_matrix_row(case, cond, cell))
        for cond in self.conditions:
            out.append(_matrix_row("ALL", cond, self.footer[cond]))
        return out


def _matrix_row(case: str, cond: str, cell: Sensitivity | None) -> dict:
    return {
        "case_id": case,
        "condition_id": cond,
        "detected": "" if cell is None else cell.detected,
        "total": "" if cell is None else cell.total,
        "fraction": "" if cell is None or cell.ratio is None else repr(cell.ratio),
        "status": classify_fraction(cell),
    }


def per_case_matrix(report: SensitivityReport) -> CaseMatrix:
    return CaseMatrix(
        list(report.cases),
        list(report.conditions),
        dict(report.labels),
        dict(report.cells),
        report.per_condition,
    )


@dataclass(frozen=True)
class ConditionDelta:
    condition_id: str
    sensitivity: Sensitivity
    pp_delta: Fraction
    relative_change: Fraction | None

    @property
    def pp_headline(self) -> str:
        return _fmt_fraction(self.pp_delta, 0)

    @property
    def relative_headline(self) -> str:
        if self.relative_change is None:
            return "n/a"
        return _fmt_fraction(self.relative_change * 100, 0)

    def pp_one_decimal(self) -> str:
        return _fmt_fraction(self.pp_delta, 1)

    def relative_pct_one_decimal(self) -> str:
        if self.relative_change is None:
            return "n/a"
        return _fmt_fraction(self.relative_change * 100, 1)


def condition_deltas(report: SensitivityReport, baseline: str = "baseline") -> dict[str, ConditionDelta]:
    """Percentage-point and relative change of every condition against baseline.

    Computed on exact fractions so headline rounding never depends on float error.
    """
    per = report.per_condition
    if baseline not in per:
        raise EvaluationError(f"baseline condition {baseline!r} missing from report")
    base = per[baseline]
    if base.total == 0:
        raise EvaluationError("baseline has no nodules")
    s_base = Fraction(base.detected, base.total)
    out = {}
    for cond, s in per.items():
        if s.total == 0:
            continue
        s_c = Fraction(s.detected, s.total)
        pp = 100 * (s_c - s_base)
        rel = None if s_base == 0 else (s_c - s_base) / s_base
        out[cond] = ConditionDelta(cond, s, pp, rel)
    return out
