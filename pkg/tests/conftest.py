from __future__ import annotations

import numpy as np
import pytest

from noduleqa.annotations import ConsensusNodule
from noduleqa.detections import Detection
from noduleqa.volume_io import Geometry, Volume

LIDC_NS = "http://www.nih.gov"


@pytest.fixture
def lidc_geometry():
    # 1.25 mm slices from z=-100; slice 30 sits at z=-62.5
    return Geometry((-175.0, -175.0, -100.0), (0.7, 0.7, 1.25), (512, 512, 120))


def make_volume(dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), data=None,
                source_dtype="float32", seed=0):
    if data is None:
        data = np.random.default_rng(seed).normal(-500, 200, size=dims)
    return Volume(Geometry(origin, spacing, dims), data, source_dtype=source_dtype)


def edge_map(x, y):
    return f"<edgeMap><xCoord>{x}</xCoord><yCoord>{y}</yCoord></edgeMap>"


def roi(z, points, inclusion="TRUE"):
    edges = "".join(edge_map(x, y) for x, y in points)
    return (
        f"<roi><imageZposition>{z}</imageZposition><imageSOP_UID>1.2.3</imageSOP_UID>"
        f"<inclusion>{inclusion}</inclusion>{edges}</roi>"
    )


def nodule(nid, rois, characteristics=True):
    chars = "<characteristics><subtlety>5</subtlety></characteristics>" if characteristics else ""
    return f"<unblindedReadNodule><noduleID>{nid}</noduleID>{chars}{''.join(rois)}</unblindedReadNodule>"


def session(nodules, non_nodules=""):
    return (
        "<readingSession><annotationVersion>3.12</annotationVersion>"
        "<servicingRadiologistID>anon</servicingRadiologistID>"
        f"{''.join(nodules)}{non_nodules}</readingSession>"
    )


def lidc_document(sessions):
    return (
        f'<?xml version="1.0" encoding="UTF-8"?><LidcReadMessage xmlns="{LIDC_NS}">'
        "<ResponseHeader><Version>1.8.1</Version></ResponseHeader>"
        f"{''.join(sessions)}</LidcReadMessage>"
    )


def square(cx, cy, half=3):
    """10-vertex closed square ring centred on (cx, cy)."""
    pts = [
        (cx - half, cy - half), (cx, cy - half), (cx + half, cy - half),
        (cx + half, cy), (cx + half, cy + half), (cx, cy + half),
        (cx - half, cy + half), (cx - half, cy),
    ]
    # an opposing pair keeps the vertex set point-symmetric about the centre
    return pts + [(cx - half, cy - 1), (cx + half, cy + 1)]


def nodule_at(case_id, point, readers=4):
    return ConsensusNodule(case_id, tuple(float(v) for v in point), readers)


def det(case_id, condition_id, point, conf):
    return Detection(case_id, condition_id, tuple(float(v) for v in point), float(conf))


HEADLINE_COUNTS = {"baseline": 57, "dose_25": 52, "dose_50": 53, "thick_3mm": 52, "thick_5mm": 33}
HEADLINE_CONDITIONS = tuple(HEADLINE_COUNTS)


def headline_cohort(sub_threshold=6):
    """21 cases and 126 nodules whose detections reproduce the headline sensitivity counts.

    Case T00 holds 10 nodules and T01 holds 2, neither ever detected.  The
    other 19 cases hold 6 nodules each; across them nodule g is hit in
    condition c iff g < count[c].  The next ``sub_threshold`` nodules get a
    close detection below 0.5 confidence, and every remaining nodule gets a
    confident decoy 15.1 mm away, so neither may count at the default operating
    point.
    """
    nodules, dets = {}, []
    sizes = [10, 2] + [6] * 19
    flat = []
    for k, size in enumerate(sizes):
        case = f"T{k:02d}"
        nodules[case] = [nodule_at(case, (40.0 * j, 10.0 * k, -50.0)) for j in range(size)]
        if k >= 2:
            flat.extend(nodules[case])
    for cond, count in HEADLINE_COUNTS.items():
        for g, n in enumerate(flat):
            x, y, z = n.centroid_world
            if g < count:
                conf = 0.5 + ((g * 37) % 100) / 200
                dets.append(det(n.case_id, cond, (x + 3.0, y, z + 4.0), conf))
            elif g < count + sub_threshold:
                dets.append(det(n.case_id, cond, (x, y + 1.0, z), 0.1 + (g % 39) / 100))
            else:
                dets.append(det(n.case_id, cond, (x, y + 15.1, z), 0.9))
        for n in nodules["T00"] + nodules["T01"]:
            x, y, z = n.centroid_world
            dets.append(det(n.case_id, cond, (x, y, z + 15.1), 1.0))
    return nodules, dets


DETECT_COMMAND = "{python} -m noduleqa detect --input-dir {input_dir} --output {output} --condition {condition}"


def phantom_inputs(root, n_cases=2, dims=(40, 40, 32)):
    """Write phantom volumes, their ground-truth consensus CSV and a run config under ``root``."""
    from noduleqa.annotations import write_consensus_csv
    from noduleqa.phantom import PhantomNodule, PhantomSpec, generate_phantom
    from noduleqa.volume_io import write_volume

    vol_dir = root / "volumes"
    vol_dir.mkdir(parents=True)
    truth = []
    for k in range(n_cases):
        spec = PhantomSpec(
            dims=dims, spacing=(0.7, 0.7, 1.25), origin=(-14.0, -14.0, -20.0),
            nodules=[
                PhantomNodule((-4.2 + 0.7 * k, -2.8, -5.0), 5.0, 400.0),
                PhantomNodule((7.0, 7.0, 10.0), 1.2, 950.0),
            ],
            texture_sigma_hu=5.0, seed=k,
        )
        vol, gt = generate_phantom(spec, f"P{k:02d}")
        write_volume(vol, vol_dir / f"P{k:02d}.nii.gz")
        truth.extend(gt)
    write_consensus_csv(truth, root / "consensus.csv")
    (root / "config.yaml").write_text(
        "schema_version: 1\n"
        "volumes_dir: volumes\n"
        "annotations:\n  consensus_csv: consensus.csv\n"
        f"model:\n  command: \"{DETECT_COMMAND}\"\n  timeout_s: 120\n"
    )
    return root / "config.yaml"
