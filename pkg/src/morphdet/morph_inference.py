"""Morphing a trained detector onto novel classes, and the detection pipeline.

Morphing is forward-only: each novel class's exemplar descriptors are embedded
with the frozen network, their mean feature becomes the class's prototype, and
the network parameters are shared untouched with the new state. No gradient is
ever computed on this path.

Detection scores every proposal against every registered prototype plus the
background slot, decodes the class-agnostic box regression, thresholds, and
runs per-class greedy NMS with a deterministic ordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .embedder import forward_batch
from .numkernel import DimensionMismatch, EmptyInput
from .objective import posterior_batch
from .prototype_store import add_novel, all_prototypes
from .textio import fmt


class InvalidBox(ValueError):
    """Box corners that do not describe a positive-area axis-aligned box."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (float(self.x1), float(self.y1), float(self.x2), float(self.y2))
        if not all(np.isfinite(coords)):
            raise InvalidBox(f"non-finite box corners: {coords}")
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise InvalidBox(f"degenerate box corners: {coords}")
        object.__setattr__(self, "x1", coords[0])
        object.__setattr__(self, "y1", coords[1])
        object.__setattr__(self, "x2", coords[2])
        object.__setattr__(self, "y2", coords[3])

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center_x(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def center_y(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 when the boxes do not overlap."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def encode_box(anchor: Box, target: Box) -> np.ndarray:
    """Regression deltas taking `anchor` onto `target`: center offsets in
    anchor units, log size ratios."""
    return np.array(
        [
            (target.center_x - anchor.center_x) / anchor.width,
            (target.center_y - anchor.center_y) / anchor.height,
            np.log(target.width / anchor.width),
            np.log(target.height / anchor.height),
        ]
    )


def decode_box(anchor: Box, deltas) -> Box:
    """Inverse of encode_box. Rejects non-finite deltas; the exp on the size
    channels keeps every decoded box positive-area."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.shape != (4,):
        raise DimensionMismatch(f"box deltas must have shape (4,), got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InvalidBox(f"non-finite box deltas: {d}")
    cx = anchor.center_x + d[0] * anchor.width
    cy = anchor.center_y + d[1] * anchor.height
    w = anchor.width * np.exp(d[2])
    h = anchor.height * np.exp(d[3])
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box


@dataclass(frozen=True)
class DetectConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5


def morph(state, exemplars):
    """Register novel classes on a trained detector from exemplar descriptors.

    `exemplars` maps class_id -> non-empty sequence of descriptors. Each
    class's prototype is the unit-normalized mean of its exemplars' feature
    vectors under the frozen network. Returns a new state sharing the same
    network parameters object; an empty mapping returns the state unchanged.
    """
    if not exemplars:
        return state
    protos = state.prototypes
    for cid in sorted(exemplars):
        descs = list(exemplars[cid])
        if not descs:
            raise EmptyInput(f"class {cid} has no exemplars")
        feats, _, _ = forward_batch(state.params, np.stack([np.asarray(d, dtype=np.float64) for d in descs]))
        protos = add_novel(protos, cid, feats.mean(axis=0))
    return replace(state, prototypes=protos)


def _order_key(det: Detection):
    return (-det.score, det.class_id, det.box.as_tuple())


def nms(detections, iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression.

    Candidates are visited by descending score, ties broken by class id and
    then box corners, so the kept list (returned in that order) is a pure
    function of the input set. Only detections of the same class suppress
    each other.
    """
    thr = float(iou_threshold)
    if not 0.0 < thr < 1.0:
        raise ValueError(f"NMS IoU threshold must lie in (0, 1), got {thr}")
    kept: list[Detection] = []
    for det in sorted(detections, key=_order_key):
        suppressed = False
        for keeper in kept:
            if keeper.class_id == det.class_id and iou(keeper.box, det.box) > thr:
                suppressed = True
                break
        if not suppressed:
            kept.append(det)
    return kept


def detect(state, proposals, score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[Detection]:
    """Score (descriptor, anchor_box) proposals against every registered class.

    Each proposal contributes one candidate per class whose posterior
    probability reaches the threshold, all sharing that proposal's decoded
    box (the regression is class-agnostic). Per-class NMS then prunes. Pure:
    identical inputs give an identical list, order included.
    """
    proposals = list(proposals)
    if not proposals:
        return []
    protos = all_prototypes(state.prototypes)
    if not protos:
        raise EmptyInput("detector has no registered classes")
    descriptors = np.stack([np.asarray(d, dtype=np.float64) for d, _ in proposals])
    feats, bg, deltas = forward_batch(state.params, descriptors)
    q, ids = posterior_batch(feats, bg, protos)
    candidates: list[Detection] = []
    for i, (_, anchor) in enumerate(proposals):
        decoded = decode_box(anchor, deltas[i])
        for k, cid in enumerate(ids):
            score = float(q[i, k + 1])
            if score >= score_threshold:
                candidates.append(Detection(class_id=cid, score=score, box=decoded))
    return nms(candidates, nms_iou)


def write_detections_csv(path, rows) -> None:
    """Dump (scene_id, Detection) rows as scene_id,class_id,score,x1,y1,x2,y2
    with six-decimal scores and coordinates."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "class_id", "score", "x1", "y1", "x2", "y2"])
        for scene_id, det in rows:
            writer.writerow(
                [
                    scene_id,
                    det.class_id,
                    f"{det.score:.6f}",
                    f"{det.box.x1:.6f}",
                    f"{det.box.y1:.6f}",
                    f"{det.box.x2:.6f}",
                    f"{det.box.y2:.6f}",
                ]
            )


def write_exemplars_csv(path, exemplars) -> None:
    """Exemplar file: one row per exemplar, class_id first, then the
    descriptor components (full float precision, no header)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for cid in sorted(exemplars):
            for desc in exemplars[cid]:
                writer.writerow([int(cid), *[fmt(x) for x in np.asarray(desc, dtype=np.float64)]])


def read_exemplars_csv(path) -> dict[int, list[np.ndarray]]:
    """Inverse of write_exemplars_csv; preserves per-class row order."""
    out: dict[int, list[np.ndarray]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            cid = int(row[0])
            if len(row) < 2:
                raise ValueError(f"exemplar row for class {cid} has no descriptor")
            out.setdefault(cid, []).append(np.array([float(v) for v in row[1:]], dtype=np.float64))
    return out
