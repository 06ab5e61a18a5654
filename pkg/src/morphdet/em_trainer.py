"""Alternating training of the embedder and its class prototypes.

Each iteration runs an M-step (minibatch SGD on the network, optionally with
momentum, prototypes frozen) and then an E-step (prototypes refit toward per-class mean
features of the ground-truth boxes under the frozen network, blended with the
old prototypes). Prototypes start from the base classes' semantic vectors.

A snapshot is captured after every M-step; the K-th snapshot is "the detector
after K iterations", which is what ablations over the iteration count
evaluate, and the last snapshot is the detector train() returns. The trailing
E-step still runs (its output would seed a further iteration) and is exposed
for inspection.

Everything is a pure function of (dataset, semantic vectors, config): fixed
seeds, fixed shuffle order, fixed reduction order, so reruns are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict
import json

import numpy as np

from .embedder import (
    CheckpointError,
    EmbedderParams,
    forward_batch,
    forward_batch_with_grad,
    init_params,
    params_config,
    params_from_tensors,
    params_to_lines,
    sgd_step,
)
from .numkernel import DimensionMismatch, EmptyInput
from .objective import LossWeights
from .prototype_store import (
    PrototypeSet,
    UnknownClass,
    e_step_update,
    from_text,
    init_from_semantic,
    to_text,
)
from .textio import parse_tensor

CHECKPOINT_HEADER = "morphdet-checkpoint v1"


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; training cannot continue."""


class MissingClassSamples(ValueError):
    """A base class has no ground-truth samples to refit its prototype from."""


@dataclass(frozen=True)
class TrainConfig:
    em_iterations: int = 3
    m_step_epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 0.8  # fraction of epochs after which the decay kicks in
    momentum: float = 0.0
    lam: float = 0.5  # weight kept on the old prototype in each E-step blend
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (64, 64)
    fg_weight: float = 1.0
    bg_weight: float = 1.0
    bbox_weight: float = 1.0

    def __post_init__(self):
        if self.em_iterations < 1:
            raise ValueError(f"em_iterations must be >= 1, got {self.em_iterations}")
        if self.m_step_epochs < 0:
            raise ValueError(f"m_step_epochs must be >= 0, got {self.m_step_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if not 0 < self.lr_decay_at <= 1:
            raise ValueError(f"lr_decay_at must lie in (0, 1], got {self.lr_decay_at}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def loss_weights(self) -> LossWeights:
        return LossWeights(fg=self.fg_weight, bg=self.bg_weight, bbox=self.bbox_weight)


@dataclass(frozen=True, eq=False)
class DetectorState:
    """The full detector: network parameters, prototypes, and the config that
    produced them."""

    params: EmbedderParams
    prototypes: PrototypeSet
    config: TrainConfig

    def __post_init__(self):
        if self.params.feature_dim != self.prototypes.dim:
            raise DimensionMismatch(
                f"feature dim {self.params.feature_dim} != prototype dim {self.prototypes.dim}"
            )


@dataclass(frozen=True)
class EpochRecord:
    iteration: int
    epoch: int
    fg: float
    bg: float
    bbox: float
    total: float


@dataclass(frozen=True, eq=False)
class TrainResult:
    state: DetectorState  # last post-M-step snapshot: the operative detector
    snapshots: list[DetectorState]  # one per EM iteration, captured after its M-step
    metrics: list[EpochRecord]
    final_prototypes: PrototypeSet  # output of the trailing E-step


def collect_proposals(dataset) -> list:
    return [prop for scene in dataset for prop in scene.proposals]


class _CyclicSampler:
    """Deterministic shuffled stream over a fixed index pool; reshuffles with
    the shared rng whenever the pool is exhausted."""

    def __init__(self, indices, rng: np.random.Generator):
        self._indices = list(indices)
        self._rng = rng
        self._order: list[int] = []
        self._pos = 0

    def draw(self, count: int) -> list[int]:
        out = []
        while len(out) < count and self._indices:
            if self._pos >= len(self._order):
                self._order = [self._indices[j] for j in self._rng.permutation(len(self._indices))]
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return out


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Schedule restarts every M-step: base rate, then times lr_decay_factor
    for the tail of the epochs."""
    decay_epoch = math.ceil(config.lr_decay_at * config.m_step_epochs)
    if epoch >= decay_epoch:
        return config.learning_rate * config.lr_decay_factor
    return config.learning_rate


def m_step(state: DetectorState, dataset, config: TrainConfig, rng_tag: int = 0, metrics=None) -> DetectorState:
    """SGD on the network with prototypes frozen.

    Batches mix foreground and background proposals at 1:3 where both pools
    allow; a missing pool fills the batch from the other. Zero epochs is the
    identity. The optional `metrics` list receives one (epoch, mean losses)
    record per epoch.
    """
    pool = collect_proposals(dataset)
    if not pool:
        raise EmptyInput("dataset has no proposals")
    for prop in pool:
        if prop.label > 0 and not state.prototypes.has_class(prop.label):
            raise UnknownClass(f"dataset label {prop.label} has no prototype")
    if config.m_step_epochs == 0:
        return state

    rng = np.random.default_rng([config.seed, 17, rng_tag])
    fg_pool = [i for i, p in enumerate(pool) if p.label > 0]
    bg_pool = [i for i, p in enumerate(pool) if p.label == 0]
    fg_stream = _CyclicSampler(fg_pool, rng)
    bg_stream = _CyclicSampler(bg_pool, rng)
    steps_per_epoch = max(1, math.ceil(len(pool) / config.batch_size))
    weights = config.loss_weights()

    params = state.params
    velocity = None
    for epoch in range(config.m_step_epochs):
        lr = _epoch_lr(config, epoch)
        epoch_terms = np.zeros(4)
        for _ in range(steps_per_epoch):
            n_fg = config.batch_size // 4 if fg_pool else 0
            if fg_pool and config.batch_size >= 2:
                n_fg = max(1, n_fg)
            if not bg_pool:
                n_fg = config.batch_size
            picks = fg_stream.draw(n_fg) + bg_stream.draw(config.batch_size - n_fg)
            batch = [pool[i] for i in picks]
            breakdown, grads = forward_batch_with_grad(params, batch, state.prototypes, weights)
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {breakdown}")
            params, velocity = sgd_step(params, grads, lr, velocity, config.momentum)
            epoch_terms += (breakdown.fg, breakdown.bg, breakdown.bbox, breakdown.total)
        if metrics is not None:
            mean = epoch_terms / steps_per_epoch
            metrics.append((epoch, float(mean[0]), float(mean[1]), float(mean[2]), float(mean[3])))
    return replace(state, params=params)


def e_step(state: DetectorState, dataset, lam: float) -> DetectorState:
    """Refit base prototypes toward per-class mean features of the
    ground-truth boxes, embedded with the frozen network."""
    gts = [obj for scene in dataset for obj in scene.objects]
    if not gts:
        raise EmptyInput("dataset has no ground-truth objects")
    base_ids = set(state.prototypes.base)
    for obj in gts:
        if obj.class_id not in base_ids:
            raise UnknownClass(f"ground-truth class {obj.class_id} has no base prototype")
    feats, _, _ = forward_batch(state.params, np.stack([obj.descriptor for obj in gts]))
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for row, obj in zip(feats, gts):
        if obj.class_id in sums:
            sums[obj.class_id] = sums[obj.class_id] + row
            counts[obj.class_id] += 1
        else:
            sums[obj.class_id] = row.copy()
            counts[obj.class_id] = 1
    missing = sorted(base_ids - set(sums))
    if missing:
        raise MissingClassSamples(f"no ground-truth samples for base classes {missing}")
    means = {cid: sums[cid] / counts[cid] for cid in sorted(sums)}
    return replace(state, prototypes=e_step_update(state.prototypes, means, lam))


def train(dataset, semantic_vectors, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Full alternating run: semantic prototype init, then em_iterations
    rounds of (M-step, E-step), snapshotting after each M-step.

    `semantic_vectors` maps class_id -> vector and must cover every class
    appearing in the dataset; extra entries (e.g. novel classes kept for
    later) are ignored.
    """
    dataset = list(dataset)
    pool = collect_proposals(dataset)
    if not pool:
        raise EmptyInput("dataset has no proposals")
    base_ids = sorted(
        {p.label for p in pool if p.label > 0} | {o.class_id for s in dataset for o in s.objects}
    )
    if not base_ids:
        raise EmptyInput("dataset has no foreground classes")
    missing = [cid for cid in base_ids if cid not in semantic_vectors]
    if missing:
        raise UnknownClass(f"no semantic vector for dataset classes {missing}")

    protos = init_from_semantic({cid: semantic_vectors[cid] for cid in base_ids})
    m_in = pool[0].descriptor.shape[0]
    params = init_params(m_in, config.hidden_sizes, protos.dim, config.seed)
    state = DetectorState(params=params, prototypes=protos, config=config)

    snapshots: list[DetectorState] = []
    records: list[EpochRecord] = []
    for iteration in range(1, config.em_iterations + 1):
        sink: list = []
        state = m_step(state, dataset, config, rng_tag=iteration, metrics=sink)
        records.extend(
            EpochRecord(iteration=iteration, epoch=e, fg=f, bg=b, bbox=bb, total=t)
            for e, f, b, bb, t in sink
        )
        snapshots.append(state)
        state = e_step(state, dataset, config.lam)
    return TrainResult(
        state=snapshots[-1],
        snapshots=snapshots,
        metrics=records,
        final_prototypes=state.prototypes,
    )


def visual_init_vectors(dataset, dim: int) -> dict[int, np.ndarray]:
    """Baseline prototype seeds: per-class means of the raw ground-truth
    descriptors, zero-padded or truncated to the prototype dimension."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for scene in dataset:
        for obj in scene.objects:
            if obj.class_id in sums:
                sums[obj.class_id] = sums[obj.class_id] + obj.descriptor
                counts[obj.class_id] += 1
            else:
                sums[obj.class_id] = obj.descriptor.copy()
                counts[obj.class_id] = 1
    if not sums:
        raise EmptyInput("dataset has no ground-truth objects")
    out: dict[int, np.ndarray] = {}
    for cid in sorted(sums):
        mean = sums[cid] / counts[cid]
        if mean.shape[0] >= dim:
            out[cid] = mean[:dim].copy()
        else:
            out[cid] = np.concatenate([mean, np.zeros(dim - mean.shape[0])])
    return out


def write_metrics_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iteration,epoch,fg_loss,bg_loss,bbox_loss,total_loss\n")
        for rec in records:
            fh.write(
                f"{rec.iteration},{rec.epoch},{rec.fg:.17g},{rec.bg:.17g},{rec.bbox:.17g},{rec.total:.17g}\n"
            )


def read_metrics_csv(path) -> list[EpochRecord]:
    out: list[EpochRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("iteration,"):
            raise ValueError(f"not a metrics file: {path}")
        for line in fh:
            if not line.strip():
                continue
            it, ep, fg, bg, bbox, total = line.strip().split(",")
            out.append(
                EpochRecord(
                    iteration=int(it), epoch=int(ep), fg=float(fg), bg=float(bg),
                    bbox=float(bbox), total=float(total),
                )
            )
    return out


def checkpoint_text(state: DetectorState) -> str:
    """Full-detector checkpoint: versioned header, config JSON (training plus
    architecture), every network tensor, then the prototype sections."""
    config = {
        "train": asdict(state.config),
        "arch": params_config(state.params),
    }
    config["train"]["hidden_sizes"] = list(state.config.hidden_sizes)
    lines = [CHECKPOINT_HEADER, "config " + json.dumps(config, sort_keys=True)]
    lines.extend(params_to_lines(state.params))
    lines.append("prototypes")
    lines.extend(to_text(state.prototypes).splitlines())
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, state: DetectorState) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_text(state))


def load_checkpoint(path) -> DetectorState:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise CheckpointError(f"not a detector checkpoint: {path}")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise CheckpointError("checkpoint is missing its config line")
    try:
        config = json.loads(lines[1][len("config ") :])
        train_cfg = dict(config["train"])
        train_cfg["hidden_sizes"] = tuple(train_cfg["hidden_sizes"])
        tconfig = TrainConfig(**train_cfg)
        arch = config["arch"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    k = 2
    while k < len(lines) and lines[k] != "prototypes":
        if not lines[k].strip():
            k += 1
            continue
        if k + 1 >= len(lines):
            raise CheckpointError(f"dangling tensor header: {lines[k]!r}")
        try:
            name, arr = parse_tensor(lines[k], lines[k + 1])
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr
        k += 2
    if k >= len(lines):
        raise CheckpointError("checkpoint has no prototype section")
    proto_lines = []
    for line in lines[k + 1 :]:
        if line == "end":
            break
        proto_lines.append(line)
    params = params_from_tensors(tensors, arch)
    try:
        protos = from_text("\n".join(proto_lines) + "\n", dim=params.feature_dim)
    except ValueError as exc:
        raise CheckpointError(f"bad prototype section: {exc}") from exc
    return DetectorState(params=params, prototypes=protos, config=tconfig)
