"""Synthetic detection world with a controllable semantics/appearance link.

Each class is a point in a latent attribute space. Its semantic vector is an
isometric projection of the attributes plus noise (sigma_sem), so how much
semantics reveal about appearance is a single knob: at sigma_sem = 0 the
semantic geometry mirrors the attribute geometry exactly; cranking it up
decorrelates them. Proposal descriptors mix the appearance of whatever
objects the box overlaps (weighted by IoU), per-instance noise (sigma_inst)
and four box-geometry features, so a box on an object carries that object's
appearance and a random box mostly does not.

Scenes live in the unit square. Dataset proposals are jittered copies of the
ground-truth boxes plus uniform random boxes, each labelled by the IoU >= 0.5
rule against the scene's objects; foreground proposals carry box-regression
targets. Ground-truth entries keep a descriptor of their own (the instance
model at IoU 1), which is what prototype refits and exemplars embed.

Exemplar draws and dataset draws use separate seed streams: changing the
exemplar seed never perturbs the dataset, and vice versa.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .morph_inference import Box, encode_box, iou
from .textio import fmt, fmt_vector, parse_floats

GEOMETRY_FEATURES = 4
# Weight on the box-geometry channels relative to unit-variance appearance
# noise. Geometry is a class-independent component shared by every proposal,
# so raw descriptor means pick it up as a common direction while semantic
# vectors stay free of it.
GEOMETRY_SCALE = 3.0
FG_IOU_THRESHOLD = 0.5

UNIVERSE_HEADER = "toyworld-universe v1"
DATASET_HEADER = "toyworld-dataset v1"

# Sub-stream tags so one seed drives several independent generators.
_STREAM_UNIVERSE = 0
_STREAM_DATASET = 1
_STREAM_EXEMPLARS = 2


@dataclass(frozen=True, eq=False)
class ToyClass:
    class_id: int
    name: str
    attribute: np.ndarray
    semantic: np.ndarray


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """One annotated object: its class, box, and an IoU-1 descriptor drawn by
    the same instance model as proposals."""

    class_id: int
    box: Box
    descriptor: np.ndarray


@dataclass(frozen=True, eq=False)
class Proposal:
    """A candidate region. label 0 means background; foreground proposals
    carry encode_box targets onto their matched object."""

    descriptor: np.ndarray
    anchor: Box
    label: int
    target_deltas: np.ndarray | None

    def __post_init__(self):
        if (self.label == 0) != (self.target_deltas is None):
            raise ValueError("background proposals carry no targets; foreground ones must")


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: int
    objects: tuple[GroundTruth, ...]
    proposals: tuple[Proposal, ...]


@dataclass(frozen=True, eq=False)
class Universe:
    """The classes plus the shared generative model that renders them."""

    base: tuple[ToyClass, ...]
    novel: tuple[ToyClass, ...]
    semantic_projection: np.ndarray  # (d_sem, k), orthonormal columns
    descriptor_projection: np.ndarray  # (m_in - 4, k), orthonormal columns
    sigma_sem: float
    sigma_inst: float
    seed: int

    @property
    def k(self) -> int:
        return self.semantic_projection.shape[1]

    @property
    def d_sem(self) -> int:
        return self.semantic_projection.shape[0]

    @property
    def m_in(self) -> int:
        return self.descriptor_projection.shape[0] + GEOMETRY_FEATURES

    def classes(self) -> tuple[ToyClass, ...]:
        return self.base + self.novel

    def class_by_id(self, class_id: int) -> ToyClass:
        for cls in self.classes():
            if cls.class_id == class_id:
                return cls
        raise KeyError(f"no class {class_id} in this universe")

    def split_manifest(self) -> dict:
        return {
            "base_class_ids": [c.class_id for c in self.base],
            "novel_class_ids": [c.class_id for c in self.novel],
            "k": self.k,
            "d_sem": self.d_sem,
            "m_in": self.m_in,
            "sigma_sem": self.sigma_sem,
            "sigma_inst": self.sigma_inst,
            "seed": self.seed,
        }


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """QR of a gaussian draw: `cols` orthonormal directions in R^rows, so the
    projection is an isometry on the attribute space."""
    gauss = rng.normal(size=(rows, cols))
    q, r = np.linalg.qr(gauss)
    # Fix each column's sign so the draw is a deterministic function of rng state.
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


def make_universe(
    n_base: int = 20,
    n_novel: int = 5,
    k: int = 6,
    d_sem: int = 16,
    m_in: int = 12,
    sigma_sem: float = 0.02,
    sigma_inst: float = 0.3,
    seed: int = 0,
) -> Universe:
    """Draw base and novel classes with disjoint ids (base first, from 1)."""
    if n_base < 1 or n_novel < 0:
        raise ValueError(f"need n_base >= 1 and n_novel >= 0, got {n_base}, {n_novel}")
    if k < 1:
        raise ValueError(f"attribute dim must be >= 1, got {k}")
    if d_sem < k:
        raise ValueError(f"semantic dim {d_sem} must be >= attribute dim {k}")
    if m_in - GEOMETRY_FEATURES < k:
        raise ValueError(
            f"descriptor dim {m_in} leaves {m_in - GEOMETRY_FEATURES} appearance channels, need >= {k}"
        )
    if sigma_sem < 0 or sigma_inst < 0:
        raise ValueError("noise scales must be >= 0")
    rng = np.random.default_rng([seed, _STREAM_UNIVERSE])
    sem_proj = _orthonormal_columns(rng, d_sem, k)
    desc_proj = _orthonormal_columns(rng, m_in - GEOMETRY_FEATURES, k)

    def draw_class(cid: int) -> ToyClass:
        attribute = rng.normal(size=k)
        semantic = sem_proj @ attribute + sigma_sem * rng.normal(size=d_sem)
        return ToyClass(class_id=cid, name=f"toy{cid:03d}", attribute=attribute, semantic=semantic)

    base = tuple(draw_class(cid) for cid in range(1, n_base + 1))
    novel = tuple(draw_class(cid) for cid in range(n_base + 1, n_base + n_novel + 1))
    return Universe(
        base=base,
        novel=novel,
        semantic_projection=sem_proj,
        descriptor_projection=desc_proj,
        sigma_sem=float(sigma_sem),
        sigma_inst=float(sigma_inst),
        seed=int(seed),
    )


def _sample_box(rng: np.random.Generator) -> Box:
    w = rng.uniform(0.12, 0.35)
    h = rng.uniform(0.12, 0.35)
    cx = rng.uniform(0.5 * w, 1.0 - 0.5 * w)
    cy = rng.uniform(0.5 * h, 1.0 - 0.5 * h)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def _jitter_box(rng: np.random.Generator, box: Box, jitter: float) -> Box:
    cx = box.center_x + rng.uniform(-jitter, jitter) * box.width
    cy = box.center_y + rng.uniform(-jitter, jitter) * box.height
    w = box.width * np.exp(rng.uniform(-jitter, jitter))
    h = box.height * np.exp(rng.uniform(-jitter, jitter))
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def _geometry_features(box: Box) -> np.ndarray:
    return GEOMETRY_SCALE * np.array([box.center_x, box.center_y, box.width, box.height])


def _descriptor(universe: Universe, box: Box, scene_objects, rng: np.random.Generator) -> np.ndarray:
    """Instance model: IoU-weighted appearance of overlapped objects, plus
    per-instance noise, plus the box's own geometry features."""
    app_dim = universe.descriptor_projection.shape[0]
    appearance = np.zeros(app_dim)
    for cls, obj_box in scene_objects:
        overlap = iou(box, obj_box)
        if overlap > 0.0:
            appearance += overlap * (universe.descriptor_projection @ cls.attribute)
    appearance += universe.sigma_inst * rng.normal(size=app_dim)
    return np.concatenate([appearance, _geometry_features(box)])


def _label_for(box: Box, scene_objects) -> tuple[int, Box | None]:
    """IoU >= 0.5 rule: the max-overlap object's class, else background."""
    best_iou = 0.0
    best: tuple[int, Box] | None = None
    for cls, obj_box in scene_objects:
        overlap = iou(box, obj_box)
        if overlap > best_iou:
            best_iou = overlap
            best = (cls.class_id, obj_box)
    if best is not None and best_iou >= FG_IOU_THRESHOLD:
        return best
    return 0, None


def _make_scene(
    universe: Universe,
    anchor_class: ToyClass,
    pool,
    scene_id: int,
    objects_per_scene: int,
    proposals_per_scene: int,
    jitter: float,
    rng: np.random.Generator,
) -> Scene:
    placed = [(anchor_class, _sample_box(rng))]
    for _ in range(objects_per_scene - 1):
        cls = pool[rng.integers(0, len(pool))]
        placed.append((cls, _sample_box(rng)))

    objects = tuple(
        GroundTruth(class_id=cls.class_id, box=box, descriptor=_descriptor(universe, box, placed, rng))
        for cls, box in placed
    )

    anchors: list[Box] = []
    n_jittered = proposals_per_scene // 2
    for j in range(n_jittered):
        _, source_box = placed[j % len(placed)]
        anchors.append(_jitter_box(rng, source_box, jitter))
    for _ in range(proposals_per_scene - n_jittered):
        anchors.append(_sample_box(rng))

    proposals = []
    for anchor in anchors:
        label, matched = _label_for(anchor, placed)
        proposals.append(
            Proposal(
                descriptor=_descriptor(universe, anchor, placed, rng),
                anchor=anchor,
                label=label,
                target_deltas=encode_box(anchor, matched) if matched is not None else None,
            )
        )

    scene = Scene(scene_id=scene_id, objects=objects, proposals=tuple(proposals))
    _verify_labels(scene)
    return scene


def _verify_labels(scene: Scene) -> None:
    """Independent relabel pass; generation must agree with the IoU rule."""
    pairs = [(obj.class_id, obj.box) for obj in scene.objects]
    for prop in scene.proposals:
        best_iou, best_cid = 0.0, 0
        for cid, box in pairs:
            overlap = iou(prop.anchor, box)
            if overlap > best_iou:
                best_iou, best_cid = overlap, cid
        expected = best_cid if best_iou >= FG_IOU_THRESHOLD else 0
        if prop.label != expected:
            raise RuntimeError(
                f"scene {scene.scene_id}: proposal labelled {prop.label}, IoU rule says {expected}"
            )


def make_dataset(
    universe: Universe,
    classes,
    scenes_per_class: int,
    objects_per_scene: int,
    proposals_per_scene: int,
    seed: int,
    jitter: float = 0.12,
) -> list[Scene]:
    """Scenes grouped per anchor class (each class fronts `scenes_per_class`
    scenes; extra objects are drawn from the same class pool)."""
    pool = sorted(classes, key=lambda c: c.class_id)
    if not pool:
        raise ValueError("no classes to generate scenes for")
    if scenes_per_class < 1 or objects_per_scene < 1 or proposals_per_scene < 1:
        raise ValueError("scene, object and proposal counts must all be >= 1")
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    rng = np.random.default_rng([seed, _STREAM_DATASET])
    scenes: list[Scene] = []
    scene_id = 0
    for cls in pool:
        for _ in range(scenes_per_class):
            scenes.append(
                _make_scene(
                    universe, cls, pool, scene_id, objects_per_scene, proposals_per_scene, jitter, rng
                )
            )
            scene_id += 1
    return scenes


def exemplars_for(universe: Universe, classes, shots: int, seed: int) -> dict[int, list[np.ndarray]]:
    """Draw `shots` isolated exemplars per class: the instance model at IoU 1
    (full appearance weight) on a fresh random box. Uses its own seed stream."""
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng([seed, _STREAM_EXEMPLARS])
    out: dict[int, list[np.ndarray]] = {}
    for cls in sorted(classes, key=lambda c: c.class_id):
        draws = []
        for _ in range(shots):
            box = _sample_box(rng)
            appearance = universe.descriptor_projection @ cls.attribute
            appearance = appearance + universe.sigma_inst * rng.normal(size=appearance.shape[0])
            draws.append(np.concatenate([appearance, _geometry_features(box)]))
        out[cls.class_id] = draws
    return out


def semantic_vectors(universe: Universe, classes=None) -> dict[int, np.ndarray]:
    chosen = universe.classes() if classes is None else classes
    return {cls.class_id: cls.semantic for cls in chosen}


def save_universe(path, universe: Universe) -> None:
    meta = {
        "k": universe.k,
        "d_sem": universe.d_sem,
        "m_in": universe.m_in,
        "sigma_sem": universe.sigma_sem,
        "sigma_inst": universe.sigma_inst,
        "seed": universe.seed,
        "n_base": len(universe.base),
        "n_novel": len(universe.novel),
    }
    lines = [UNIVERSE_HEADER, "meta " + json.dumps(meta, sort_keys=True)]
    for role, group in (("base", universe.base), ("novel", universe.novel)):
        for cls in group:
            lines.append(
                f"class {cls.class_id} {role} {cls.name} "
                f"attr {fmt_vector(cls.attribute)} sem {fmt_vector(cls.semantic)}"
            )
    for name, mat in (
        ("semantic_projection", universe.semantic_projection),
        ("descriptor_projection", universe.descriptor_projection),
    ):
        lines.append(f"matrix {name} {mat.shape[0]} {mat.shape[1]}")
        lines.append(" ".join(fmt(x) for x in mat.ravel()))
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_universe(path) -> Universe:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != UNIVERSE_HEADER:
        raise ValueError(f"not a universe file: {path}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise ValueError("universe file missing meta line")
    meta = json.loads(lines[1][len("meta ") :])
    base: list[ToyClass] = []
    novel: list[ToyClass] = []
    matrices: dict[str, np.ndarray] = {}
    k = 2
    while k < len(lines):
        line = lines[k]
        if line == "end":
            break
        if line.startswith("class "):
            tokens = line.split()
            cid, role, name = int(tokens[1]), tokens[2], tokens[3]
            if tokens[4] != "attr":
                raise ValueError(f"malformed class line: {line!r}")
            sem_at = tokens.index("sem")
            attribute = parse_floats(tokens[5:sem_at])
            semantic = parse_floats(tokens[sem_at + 1 :])
            cls = ToyClass(class_id=cid, name=name, attribute=attribute, semantic=semantic)
            (base if role == "base" else novel).append(cls)
            k += 1
        elif line.startswith("matrix "):
            _, name, rows, cols = line.split()
            values = parse_floats(lines[k + 1])
            matrices[name] = values.reshape(int(rows), int(cols))
            k += 2
        else:
            raise ValueError(f"unexpected universe line: {line!r}")
    return Universe(
        base=tuple(base),
        novel=tuple(novel),
        semantic_projection=matrices["semantic_projection"],
        descriptor_projection=matrices["descriptor_projection"],
        sigma_sem=float(meta["sigma_sem"]),
        sigma_inst=float(meta["sigma_inst"]),
        seed=int(meta["seed"]),
    )


def _box_tokens(box: Box) -> str:
    return f"{fmt(box.x1)} {fmt(box.y1)} {fmt(box.x2)} {fmt(box.y2)}"


def save_dataset(path, scenes) -> None:
    scenes = list(scenes)
    m_in = scenes[0].proposals[0].descriptor.shape[0] if scenes and scenes[0].proposals else 0
    meta = {"scene_count": len(scenes), "m_in": m_in}
    lines = [DATASET_HEADER, "meta " + json.dumps(meta, sort_keys=True)]
    for scene in scenes:
        lines.append(f"scene {scene.scene_id}")
        for obj in scene.objects:
            lines.append(f"object {obj.class_id} {_box_tokens(obj.box)} {fmt_vector(obj.descriptor)}")
        for prop in scene.proposals:
            head = f"proposal {prop.label} {_box_tokens(prop.anchor)}"
            if prop.label > 0:
                head += f" {fmt_vector(prop.target_deltas)}"
            lines.append(f"{head} {fmt_vector(prop.descriptor)}")
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> list[Scene]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise ValueError(f"not a dataset file: {path}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise ValueError("dataset file missing meta line")
    meta = json.loads(lines[1][len("meta ") :])
    m_in = int(meta["m_in"])
    scenes: list[Scene] = []
    current_id: int | None = None
    objects: list[GroundTruth] = []
    proposals: list[Proposal] = []

    def flush():
        if current_id is not None:
            scenes.append(Scene(scene_id=current_id, objects=tuple(objects), proposals=tuple(proposals)))

    for line in lines[2:]:
        if line == "end":
            break
        tokens = line.split()
        if tokens[0] == "scene":
            flush()
            current_id = int(tokens[1])
            objects, proposals = [], []
        elif tokens[0] == "object":
            cid = int(tokens[1])
            box = Box(*[float(t) for t in tokens[2:6]])
            objects.append(GroundTruth(class_id=cid, box=box, descriptor=parse_floats(tokens[6:])))
        elif tokens[0] == "proposal":
            label = int(tokens[1])
            box = Box(*[float(t) for t in tokens[2:6]])
            rest = tokens[6:]
            if label > 0:
                targets = parse_floats(rest[:4])
                descriptor = parse_floats(rest[4:])
            else:
                targets = None
                descriptor = parse_floats(rest)
            if descriptor.shape[0] != m_in:
                raise ValueError(
                    f"proposal descriptor has {descriptor.shape[0]} values, meta says {m_in}"
                )
            proposals.append(
                Proposal(descriptor=descriptor, anchor=box, label=label, target_deltas=targets)
            )
        else:
            raise ValueError(f"unexpected dataset line: {line!r}")
    flush()
    return scenes
