"""LIDC reading-session parsing and multi-reader consensus.

Each ``readingSession`` in an LIDC XML file is one reader.  Contoured
``unblindedReadNodule`` entries become :class:`ReaderAnnotation` objects;
nodules marked by a single point (the sub-3 mm convention) carry no contour
and are skipped.  Annotations from different readers are merged by
single-linkage clustering of their centroids.
"""
from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.spatial.distance import pdist

from .volume_io import Geometry, voxel_to_world

DEFAULT_MIN_READERS = 3
DEFAULT_MERGE_RADIUS_MM = 5.0

CONSENSUS_HEADER = ["case_id", "nodule_index", "x_mm", "y_mm", "z_mm", "reader_count"]


class AnnotationError(ValueError):
    pass


@dataclass
class ReaderAnnotation:
    case_id: str
    reader_index: int
    nodule_id: str
    # per slice: list of (x_voxel, y_voxel, z_world_mm)
    contours: list[list[tuple[float, float, float]]]
    centroid_world: tuple[float, float, float] | None = None
    approx_diameter_mm: float | None = None

    @property
    def contour_points(self) -> list[tuple[float, float, float]]:
        return [p for c in self.contours for p in c]


@dataclass(frozen=True)
class ConsensusNodule:
    case_id: str
    centroid_world: tuple[float, float, float]
    reader_count: int
    member_ids: tuple[tuple[int, str], ...] = field(default_factory=tuple)


@dataclass
class LidcReads:
    """Result of parsing one XML file."""

    annotations: list[ReaderAnnotation]
    skipped_marks: int = 0
    sessions: int = 0

    def __iter__(self) -> Iterator[ReaderAnnotation]:
        return iter(self.annotations)

    def __len__(self) -> int:
        return len(self.annotations)

    def __getitem__(self, i):
        return self.annotations[i]


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _children(el: ET.Element, name: str) -> list[ET.Element]:
    return [c for c in el if _local(c.tag) == name]


def _text(el: ET.Element, name: str) -> str | None:
    for c in el:
        if _local(c.tag) == name:
            return (c.text or "").strip()
    return None


def _slice_index(g: Geometry, z_world: float) -> int:
    oz, dz, nz = g.origin[2], g.spacing[2], g.dims[2]
    k = min(max(round((z_world - oz) / dz), 0), nz - 1)
    if abs(oz + k * dz - z_world) > dz / 2:
        raise AnnotationError(
            f"contour z={z_world} mm does not map to the z-grid "
            f"(origin {oz}, spacing {dz}, {nz} slices)"
        )
    return k


def _world_points(a: ReaderAnnotation, g: Geometry) -> np.ndarray:
    pts = a.contour_points
    if not pts:
        raise AnnotationError(f"{a.case_id}/{a.nodule_id}: empty contour")
    idx = np.array([(x, y, _slice_index(g, z)) for x, y, z in pts], dtype=np.float64)
    return voxel_to_world(g, idx)


def _mask_voxels(a: ReaderAnnotation, g: Geometry) -> np.ndarray:
    from skimage.draw import polygon

    voxels = set()
    for contour in a.contours:
        if not contour:
            continue
        k = _slice_index(g, contour[0][2])
        xs = np.array([p[0] for p in contour])
        ys = np.array([p[1] for p in contour])
        rr, cc = polygon(xs, ys)
        voxels.update(zip(rr.tolist(), cc.tolist(), [k] * len(rr)))
        # LIDC edge maps list the boundary pixels themselves
        voxels.update((int(round(x)), int(round(y)), k) for x, y in zip(xs, ys))
    return np.array(sorted(voxels), dtype=np.float64)


def annotation_centroid(a: ReaderAnnotation, g: Geometry, method: str = "vertex") -> np.ndarray:
    """World centroid of an annotation.

    ``vertex``: unweighted mean of all contour vertices.  ``mask``: mean of the
    voxel centres covered by the filled contours.
    """
    if method == "vertex":
        pts = _world_points(a, g)
    elif method == "mask":
        pts = voxel_to_world(g, _mask_voxels(a, g))
    else:
        raise ValueError(f"unknown centroid method {method!r}")
    return pts.mean(axis=0)


def _max_extent(pts: np.ndarray) -> float:
    if len(pts) < 2:
        return 0.0
    return float(pdist(pts).max())


def parse_lidc_xml(
    xml_text: str, case_id: str, geometry: Geometry, centroid_method: str = "vertex"
) -> LidcReads:
    """Parse an LIDC XML document into per-reader contoured nodules.

    ``geometry`` is the case's volume geometry; it resolves contour z
    positions and fixes centroids in world coordinates.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise AnnotationError(f"{case_id}: malformed XML ({exc})") from exc

    sessions = [el for el in root.iter() if _local(el.tag) == "readingSession"]
    out: list[ReaderAnnotation] = []
    skipped = 0
    for reader, session in enumerate(sessions):
        for nod in _children(session, "unblindedReadNodule"):
            nodule_id = _text(nod, "noduleID") or f"nodule-{len(out)}"
            contours = []
            for roi in _children(nod, "roi"):
                if (_text(roi, "inclusion") or "TRUE").upper() == "FALSE":
                    continue
                z_txt = _text(roi, "imageZposition")
                edges = _children(roi, "edgeMap")
                if z_txt is None or not edges:
                    continue
                z = float(z_txt)
                contours.append(
                    [(float(_text(e, "xCoord")), float(_text(e, "yCoord")), z) for e in edges]
                )
            if sum(len(c) for c in contours) < 2:
                skipped += 1
                continue
            a = ReaderAnnotation(case_id, reader, nodule_id, contours)
            pts = _world_points(a, g=geometry)
            a.centroid_world = tuple(annotation_centroid(a, geometry, centroid_method).tolist())
            a.approx_diameter_mm = _max_extent(pts)
            out.append(a)
    return LidcReads(out, skipped_marks=skipped, sessions=len(sessions))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def build_consensus(
    annotations: Iterable[ReaderAnnotation],
    min_readers: int = DEFAULT_MIN_READERS,
    merge_radius_mm: float = DEFAULT_MERGE_RADIUS_MM,
) -> list[ConsensusNodule]:
    anns = list(annotations)
    if not anns:
        return []
    case_ids = {a.case_id for a in anns}
    if len(case_ids) > 1:
        raise AnnotationError(f"annotations span several cases: {sorted(case_ids)}")
    case_id = anns[0].case_id
    centroids = np.array([a.centroid_world for a in anns], dtype=np.float64)

    uf = _UnionFind(len(anns))
    diff = centroids[:, None, :] - centroids[None, :, :]
    close = np.sqrt((diff**2).sum(axis=-1)) <= merge_radius_mm
    for i, j in zip(*np.nonzero(np.triu(close, k=1))):
        uf.union(int(i), int(j))

    clusters: dict[int, list[int]] = defaultdict(list)
    for i in range(len(anns)):
        clusters[uf.find(i)].append(i)

    out = []
    for members in clusters.values():
        readers = {anns[i].reader_index for i in members}
        if len(readers) < min_readers:
            continue
        centre = centroids[members].mean(axis=0)
        ids = tuple(sorted((anns[i].reader_index, anns[i].nodule_id) for i in members))
        out.append(ConsensusNodule(case_id, tuple(centre.tolist()), len(readers), ids))
    out.sort(key=lambda n: (n.centroid_world[2], n.centroid_world[1], n.centroid_world[0]))
    return out


def _g6(v: float) -> str:
    return f"{v:.6g}"


def write_consensus_csv(nodules: Iterable[ConsensusNodule], path=None) -> str:
    """Serialise nodules (grouped by case, indexed per case) to the consensus CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONSENSUS_HEADER)
    counters: dict[str, int] = defaultdict(int)
    for n in nodules:
        x, y, z = n.centroid_world
        w.writerow([n.case_id, counters[n.case_id], _g6(x), _g6(y), _g6(z), n.reader_count])
        counters[n.case_id] += 1
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def read_consensus_csv(path) -> dict[str, list[ConsensusNodule]]:
    """Consensus nodules keyed by case id, in file order."""
    out: dict[str, list[ConsensusNodule]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CONSENSUS_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise AnnotationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                centre = (float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"]))
                count = int(row["reader_count"])
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(c) for c in centre):
                raise AnnotationError(f"{path}:{lineno}: non-finite coordinate")
            out[row["case_id"]].append(ConsensusNodule(row["case_id"], centre, count))
    return dict(out)
