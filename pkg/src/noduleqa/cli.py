"""Command line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 external-model failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .annotations import AnnotationError, read_consensus_csv, write_consensus_csv
from .degrade import DegradeError, condition_suite
from .detections import DetectionError, ExternalModelError, parse_detections, write_detections
from .evaluate import DEFAULT_SWEEP, EvaluationError, MatchParams, evaluate_cohort
from .phantom import PhantomError, generate_phantom, load_phantom_spec, synthetic_detect
from .pipeline import (
    ConfigError,
    DataError,
    consensus_from_xml,
    degrade_cohort,
    discover_volumes,
    geometries_from_volumes,
    load_config,
    run_pipeline,
    write_manifest,
)
from .report import emit_condition_table, emit_sweep_csv, emit_sweep_svg, write_report
from .volume_io import VolumeError, read_volume, write_volume

log = logging.getLogger("noduleqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--sigma-base", type=float, dest="sigma_base_hu")
    p.add_argument("--noise-model", choices=["literal", "variance-gap"], dest="noise_mode")
    p.add_argument("--min-slices", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--radius", type=float, dest="radius_mm")
    p.add_argument("--min-readers", type=int)
    p.add_argument("--merge-radius", type=float, dest="merge_radius_mm")
    p.add_argument("--dry-run", action="store_true")


def _overrides(args, *names) -> dict:
    return {n: getattr(args, n, None) for n in names}


def _nodules_for(consensus_path, geometries=None):
    nodules = read_consensus_csv(consensus_path)
    if geometries:
        for case in geometries:
            nodules.setdefault(case, [])
    return nodules


def _evaluated_from_manifest(path) -> set[tuple[str, str]]:
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    ok_conds = {r["condition_id"] for r in m.get("model_runs", []) if r.get("status") == "ok"}
    return {
        (e["case_id"], e["condition_id"])
        for e in m.get("degrade", [])
        if e.get("status") == "ok" and e["condition_id"] in ok_conds
    }


def cmd_degrade(args) -> int:
    overrides = _overrides(args, "seed", "jobs", "sigma_base_hu", "noise_mode", "min_slices")
    overrides["output_root"] = args.out
    if args.input_dir:
        overrides["volumes_dir"] = args.input_dir
    cfg = load_config(args.config, overrides)
    if not cfg.cases:
        raise ConfigError("no input volumes (use --input-dir or config `cases`/`volumes_dir`)")
    out = Path(cfg.output_root)
    res = degrade_cohort(cfg.cases, out, cfg.conditions, cfg.noise_model, cfg.min_slices, cfg.jobs, args.dry_run)
    manifest = {
        "tool": "noduleqa",
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "affine_sources": dict(sorted(res.affine_sources.items())),
        "excluded": res.excluded,
        "degrade": [e.to_dict() for e in res.entries],
        "dry_run": args.dry_run,
    }
    for ex in res.excluded:
        log.warning("excluded %s: %s", ex["case_id"], "; ".join(ex["reasons"]))
    if args.dry_run:
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return EXIT_OK
    write_manifest(manifest, out / "manifest.json")
    failed = [e for e in res.entries if e.status != "ok"]
    for e in failed:
        log.error("%s/%s: %s", e.case_id, e.condition_id, e.error)
    print(f"wrote {len(res.entries) - len(failed)} volumes to {out} ({len(res.excluded)} cases excluded)")
    return EXIT_DATA if failed else EXIT_OK


def cmd_consensus(args) -> int:
    geoms = geometries_from_volumes(args.volumes)
    nodules, stats = consensus_from_xml(
        args.xml_dir, geoms, args.min_readers if args.min_readers is not None else 3,
        args.merge_radius_mm if args.merge_radius_mm is not None else 5.0,
    )
    flat = [n for case in sorted(nodules) for n in nodules[case]]
    text = write_consensus_csv(flat, args.out)
    if args.out is None:
        sys.stdout.write(text)
    for case, s in sorted(stats.items()):
        log.info("%s: %d sessions, %d contoured annotations, %d marks skipped, %d consensus",
                 case, s["sessions"], s["annotations"], s["skipped_marks"], s["consensus"])
    return EXIT_OK


def _load_eval_inputs(args):
    geoms = geometries_from_volumes(args.volumes) if args.volumes else None
    nodules = _nodules_for(args.consensus, geoms)
    lookup = geoms if geoms is not None else {c: None for c in nodules}
    dets = []
    for p in args.detections:
        dets.extend(parse_detections(p, lookup))
    conds = args.conditions or [c.id for c in condition_suite()]
    evaluated = _evaluated_from_manifest(args.manifest) if args.manifest else None
    return nodules, dets, conds, evaluated


def _threshold_grid(args) -> tuple[float, ...]:
    if args.thresholds:
        return tuple(sorted(float(t) for t in args.thresholds.split(",")))
    return DEFAULT_SWEEP


def cmd_evaluate(args) -> int:
    nodules, dets, conds, evaluated = _load_eval_inputs(args)
    params = MatchParams(
        args.threshold if args.threshold is not None else 0.5,
        args.radius_mm if args.radius_mm is not None else 15.0,
    )
    report = evaluate_cohort(nodules, dets, conds, params, _threshold_grid(args), evaluated)
    write_report(report, args.out)
    table, _ = emit_condition_table(report)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_sweep(args) -> int:
    nodules, dets, conds, evaluated = _load_eval_inputs(args)
    radius = args.radius_mm if args.radius_mm is not None else 15.0
    report = evaluate_cohort(nodules, dets, conds, MatchParams(0.5, radius), _threshold_grid(args), evaluated)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = emit_sweep_csv(report)
    (out / "threshold_sweep.csv").write_text(csv_text, encoding="utf-8", newline="")
    (out / "threshold_sweep.svg").write_text(emit_sweep_svg(report), encoding="utf-8", newline="")
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_phantom(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = []
    for spec_path in args.specs:
        case_id = Path(spec_path).stem
        vol, gt = generate_phantom(load_phantom_spec(spec_path), case_id)
        write_volume(vol, out / f"{case_id}.nii.gz")
        truth.extend(gt)
    write_consensus_csv(truth, out / "consensus.csv")
    print(f"wrote {len(args.specs)} phantoms and {len(truth)} ground-truth nodules to {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    """Bundled synthetic detector, usable as an external model command."""
    dets = []
    for case_id, path in discover_volumes(args.input_dir).items():
        vol = read_volume(path)
        dets.extend(synthetic_detect(vol, args.min_peak, args.fwhm, case_id, args.condition))
    write_detections(dets, args.output)
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = _overrides(
        args, "seed", "jobs", "sigma_base_hu", "noise_mode", "min_slices", "threshold", "radius_mm",
        "min_readers", "merge_radius_mm",
    )
    overrides["output_root"] = args.out
    overrides["model_command"] = args.model_command
    cfg = load_config(args.config, overrides)
    outcome = run_pipeline(cfg, dry_run=args.dry_run)
    if args.dry_run:
        print(json.dumps(outcome.manifest, indent=2, sort_keys=True))
        return EXIT_OK
    table = (outcome.run_dir / "report" / "condition_table.txt").read_text(encoding="utf-8")
    sys.stdout.write(table)
    for r in outcome.manifest["model_runs"]:
        if r["status"] != "ok":
            log.error("model batch %s failed: %s", r["condition_id"], r.get("error"))
    return outcome.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noduleqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"noduleqa {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="write degraded volumes for every condition")
    _add_common(p)
    p.add_argument("--input-dir", type=Path, help="directory of <case_id>.nii[.gz] volumes")
    p.add_argument("--out", type=Path, help="output root (default $NODULEQA_OUTPUT_ROOT or ./out)")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("consensus", help="build consensus nodules from LIDC XML")
    _add_common(p)
    p.add_argument("--xml-dir", type=Path, required=True, help="directory of <case_id>.xml files")
    p.add_argument("--volumes", type=Path, required=True, help="directory of volumes (geometry source)")
    p.add_argument("--out", type=Path, help="consensus CSV (default stdout)")
    p.set_defaults(func=cmd_consensus)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "sensitivity tables, per-case matrix and sweep"),
        ("sweep", cmd_sweep, "threshold sweep only"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--consensus", type=Path, required=True)
        p.add_argument("--detections", type=Path, nargs="+", required=True)
        p.add_argument("--volumes", type=Path, help="volume directory for voxel-frame rows")
        p.add_argument("--conditions", nargs="+", help="condition ids in report order")
        p.add_argument("--manifest", type=Path, help="run manifest marking which cells have output")
        p.add_argument("--thresholds", help="comma-separated sweep grid (default 0.1..0.9)")
        p.add_argument("--out", type=Path, required=True, help="report directory")
        p.set_defaults(func=func)

    p = sub.add_parser("phantom", help="generate phantom volumes and ground truth")
    p.add_argument("specs", nargs="+", type=Path, help="phantom spec files (YAML/JSON)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("detect", help="run the bundled synthetic blob detector")
    p.add_argument("--input-dir", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--condition", default="")
    p.add_argument("--min-peak", type=float, default=100.0, help="HU above background")
    p.add_argument("--fwhm", type=float, default=2.0, help="smoothing FWHM in mm")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("run", help="full pipeline: degrade, model, consensus, evaluate, report")
    _add_common(p)
    p.add_argument("--out", type=Path, help="run directory")
    p.add_argument("--model-command", help="override model.command")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, EvaluationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ExternalModelError as exc:
        log.error("%s", exc)
        return EXIT_MODEL
    except (DataError, VolumeError, AnnotationError, DetectionError, DegradeError, PhantomError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
