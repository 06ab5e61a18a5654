"""The feature-embedding network and its exact gradients.

Architecture: a trunk of affine + ReLU layers over proposal descriptors,
topped by three linear heads sharing the trunk output -- a feature vector
(scored against class prototypes), a single background logit, and four
class-agnostic box-regression deltas.

Gradients are hand-derived and exact: the batched loss mirrors
objective.batch_loss (per-group means of foreground, background and box
terms, each multiplied by its weight), and backpropagation runs through the
heads and the ReLU trunk in closed form. Prototypes are constants here.

A module-level counter records every gradient evaluation; inference-only
paths (forward, forward_batch) never touch it, which is how zero-gradient
guarantees for morphing are asserted downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .numkernel import DimensionMismatch, EmptyInput, smooth_l1_array, smooth_l1_grad_array
from .objective import LossBreakdown, LossWeights
from .prototype_store import PrototypeSet, UnknownClass, all_prototypes
from .textio import parse_tensor, tensor_lines

PARAMS_HEADER = "morphdet-params v1"

_grad_evaluations = 0


def grad_evaluation_count() -> int:
    """How many gradient computations have run in this process."""
    return _grad_evaluations


class CheckpointError(ValueError):
    """A parameter file is malformed, versioned wrong, or shape-incompatible."""


@dataclass(eq=False)
class AffineLayer:
    weight: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)


@dataclass(eq=False)
class EmbedderParams:
    trunk: list[AffineLayer]
    feature_head: AffineLayer
    background_head: AffineLayer
    box_head: AffineLayer

    @property
    def m_in(self) -> int:
        first = self.trunk[0] if self.trunk else self.feature_head
        return first.weight.shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(layer.weight.shape[1] for layer in self.trunk)

    @property
    def feature_dim(self) -> int:
        return self.feature_head.weight.shape[1]

    def blocks(self) -> list[AffineLayer]:
        return [*self.trunk, self.feature_head, self.background_head, self.box_head]


# Gradients share the parameter tree shape: d(loss)/d(tensor) in each slot.
Gradients = EmbedderParams


@dataclass(frozen=True, eq=False)
class ProposalOutputs:
    feature: np.ndarray
    bg_logit: float
    box_deltas: np.ndarray


def validate_params(params: EmbedderParams) -> None:
    """Check the layer shapes chain and every entry is finite."""
    widths = [params.m_in, *params.hidden_sizes]
    for k, layer in enumerate(params.trunk):
        if layer.weight.shape != (widths[k], widths[k + 1]):
            raise DimensionMismatch(f"trunk layer {k} weight has shape {layer.weight.shape}")
        if layer.bias.shape != (widths[k + 1],):
            raise DimensionMismatch(f"trunk layer {k} bias has shape {layer.bias.shape}")
    top = widths[-1]
    for name, layer, n_out in (
        ("feature_head", params.feature_head, params.feature_dim),
        ("background_head", params.background_head, 1),
        ("box_head", params.box_head, 4),
    ):
        if layer.weight.shape != (top, n_out):
            raise DimensionMismatch(f"{name} weight has shape {layer.weight.shape}, expected {(top, n_out)}")
        if layer.bias.shape != (n_out,):
            raise DimensionMismatch(f"{name} bias has shape {layer.bias.shape}, expected {(n_out,)}")
    for layer in params.blocks():
        if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
            raise ValueError("network parameters contain non-finite entries")


def init_params(m_in: int, hidden_sizes, feature_dim: int, seed: int) -> EmbedderParams:
    """Deterministic initialization: weights uniform in +-1/sqrt(fan_in),
    biases zero. Layers are drawn in a fixed order (trunk bottom-up, then
    feature, background, box heads), so a seed pins every tensor."""
    hidden_sizes = tuple(int(h) for h in hidden_sizes)
    if m_in < 1 or feature_dim < 1 or any(h < 1 for h in hidden_sizes):
        raise ValueError(f"all layer sizes must be >= 1, got m_in={m_in}, hidden={hidden_sizes}, d={feature_dim}")
    rng = np.random.default_rng(seed)

    def affine(n_in: int, n_out: int) -> AffineLayer:
        scale = 1.0 / math.sqrt(n_in)
        return AffineLayer(rng.uniform(-scale, scale, size=(n_in, n_out)), np.zeros(n_out))

    widths = [int(m_in), *hidden_sizes]
    trunk = [affine(widths[k], widths[k + 1]) for k in range(len(hidden_sizes))]
    top = widths[-1]
    return EmbedderParams(
        trunk=trunk,
        feature_head=affine(top, feature_dim),
        background_head=affine(top, 1),
        box_head=affine(top, 4),
    )


def _trunk_forward(params: EmbedderParams, x: np.ndarray) -> np.ndarray:
    h = x
    for layer in params.trunk:
        h = np.maximum(h @ layer.weight + layer.bias, 0.0)
    return h


def forward(params: EmbedderParams, descriptor) -> ProposalOutputs:
    """Embed one descriptor. Pure; never counts as a gradient evaluation."""
    x = np.asarray(descriptor, dtype=np.float64)
    if x.shape != (params.m_in,):
        raise DimensionMismatch(f"descriptor has shape {x.shape}, expected ({params.m_in},)")
    h = _trunk_forward(params, x)
    feature = h @ params.feature_head.weight + params.feature_head.bias
    bg = float((h @ params.background_head.weight + params.background_head.bias)[0])
    deltas = h @ params.box_head.weight + params.box_head.bias
    return ProposalOutputs(feature=feature, bg_logit=bg, box_deltas=deltas)


def forward_batch(params: EmbedderParams, descriptors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embed a stack of descriptors; returns (features, bg_logits, box_deltas)."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.m_in:
        raise DimensionMismatch(f"descriptor batch has shape {x.shape}, expected (n, {params.m_in})")
    h = _trunk_forward(params, x)
    features = h @ params.feature_head.weight + params.feature_head.bias
    bg = (h @ params.background_head.weight + params.background_head.bias)[:, 0]
    deltas = h @ params.box_head.weight + params.box_head.bias
    return features, bg, deltas


def zeros_like_params(params: EmbedderParams) -> EmbedderParams:
    def z(layer: AffineLayer) -> AffineLayer:
        return AffineLayer(np.zeros_like(layer.weight), np.zeros_like(layer.bias))

    return EmbedderParams(
        trunk=[z(layer) for layer in params.trunk],
        feature_head=z(params.feature_head),
        background_head=z(params.background_head),
        box_head=z(params.box_head),
    )


def clone_params(params: EmbedderParams) -> EmbedderParams:
    def c(layer: AffineLayer) -> AffineLayer:
        return AffineLayer(layer.weight.copy(), layer.bias.copy())

    return EmbedderParams(
        trunk=[c(layer) for layer in params.trunk],
        feature_head=c(params.feature_head),
        background_head=c(params.background_head),
        box_head=c(params.box_head),
    )


def params_equal(a: EmbedderParams, b: EmbedderParams) -> bool:
    """Exact (bitwise-value) equality of two parameter trees."""
    blocks_a, blocks_b = a.blocks(), b.blocks()
    if len(blocks_a) != len(blocks_b):
        return False
    return all(
        la.weight.shape == lb.weight.shape
        and np.array_equal(la.weight, lb.weight)
        and np.array_equal(la.bias, lb.bias)
        for la, lb in zip(blocks_a, blocks_b)
    )


def forward_batch_with_grad(
    params: EmbedderParams,
    batch,
    prototypes: PrototypeSet,
    weights: LossWeights = LossWeights(),
) -> tuple[LossBreakdown, Gradients]:
    """Composite loss and exact parameter gradients for one minibatch.

    The loss is the weighted sum of three group means: foreground negative
    log-probability over proposals with label > 0, background negative
    log-probability over label-0 proposals, and smooth-L1 box regression over
    foreground proposals. Accumulation order is fixed (batch order), so the
    result is reproducible bit-for-bit.
    """
    batch = list(batch)
    if not batch:
        raise EmptyInput("empty batch")
    protos = all_prototypes(prototypes)
    if not protos:
        raise EmptyInput("no prototypes to train against")
    ids = [p.class_id for p in protos]
    slot = {cid: k for k, cid in enumerate(ids)}
    pmat = np.stack([p.vector for p in protos])  # (M, d)
    if pmat.shape[1] != params.feature_dim:
        raise DimensionMismatch(f"prototype dim {pmat.shape[1]} != feature dim {params.feature_dim}")

    labels = np.array([int(p.label) for p in batch])
    for lab in labels:
        if lab > 0 and lab not in slot:
            raise UnknownClass(f"foreground label {lab} has no prototype")
    x = np.stack([np.asarray(p.descriptor, dtype=np.float64) for p in batch])
    if x.shape[1] != params.m_in:
        raise DimensionMismatch(f"descriptors have dim {x.shape[1]}, network expects {params.m_in}")

    # Forward pass, caching pre-activations for the backward sweep.
    pre_acts: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    h = x
    for layer in params.trunk:
        z = h @ layer.weight + layer.bias
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    feats = h @ params.feature_head.weight + params.feature_head.bias  # (N, d)
    bg = (h @ params.background_head.weight + params.background_head.bias)[:, 0]  # (N,)
    deltas = h @ params.box_head.weight + params.box_head.bias  # (N, 4)

    all_logits = np.concatenate([bg[:, None], feats @ pmat.T], axis=1)  # (N, 1 + M)
    shift = np.max(all_logits, axis=1)
    log_denom = shift + np.log(np.sum(np.exp(all_logits - shift[:, None]), axis=1))
    q = np.exp(all_logits - log_denom[:, None])  # posteriors; column 0 = background

    fg_rows = np.flatnonzero(labels > 0)
    bg_rows = np.flatnonzero(labels == 0)
    n_fg, n_bg = len(fg_rows), len(bg_rows)

    d_feats = np.zeros_like(feats)
    d_bg = np.zeros_like(bg)
    d_deltas = np.zeros_like(deltas)
    mix = q[:, 1:] @ pmat  # (N, d): sum_m q_m p_m, the log-denominator's f-gradient

    fg_term = bg_term = box_term = 0.0
    if n_fg:
        slots = np.array([slot[labels[i]] for i in fg_rows])
        fg_vals = log_denom[fg_rows] - all_logits[fg_rows, slots + 1]
        fg_term = weights.fg * float(np.sum(fg_vals) / n_fg)
        coef = weights.fg / n_fg
        d_feats[fg_rows] = coef * (mix[fg_rows] - pmat[slots])
        d_bg[fg_rows] = coef * q[fg_rows, 0]

        targets = np.stack([np.asarray(batch[i].target_deltas, dtype=np.float64) for i in fg_rows])
        residual = deltas[fg_rows] - targets
        box_vals = np.sum(smooth_l1_array(residual), axis=1)
        box_term = weights.bbox * float(np.sum(box_vals) / n_fg)
        d_deltas[fg_rows] = (weights.bbox / n_fg) * smooth_l1_grad_array(residual)
    if n_bg:
        bg_vals = log_denom[bg_rows] - bg[bg_rows]
        bg_term = weights.bg * float(np.sum(bg_vals) / n_bg)
        coef = weights.bg / n_bg
        d_feats[bg_rows] = coef * mix[bg_rows]
        d_bg[bg_rows] = coef * (q[bg_rows, 0] - 1.0)

    breakdown = LossBreakdown(
        fg=fg_term, bg=bg_term, bbox=box_term, total=fg_term + bg_term + box_term
    )

    # Backward through the heads.
    grads = zeros_like_params(params)
    top = acts[-1]
    grads.feature_head.weight[:] = top.T @ d_feats
    grads.feature_head.bias[:] = d_feats.sum(axis=0)
    grads.background_head.weight[:] = top.T @ d_bg[:, None]
    grads.background_head.bias[:] = [d_bg.sum()]
    grads.box_head.weight[:] = top.T @ d_deltas
    grads.box_head.bias[:] = d_deltas.sum(axis=0)

    d_h = (
        d_feats @ params.feature_head.weight.T
        + d_bg[:, None] @ params.background_head.weight.T
        + d_deltas @ params.box_head.weight.T
    )
    # Backward through the ReLU trunk.
    for k in reversed(range(len(params.trunk))):
        d_z = d_h * (pre_acts[k] > 0.0)
        grads.trunk[k].weight[:] = acts[k].T @ d_z
        grads.trunk[k].bias[:] = d_z.sum(axis=0)
        d_h = d_z @ params.trunk[k].weight.T

    global _grad_evaluations
    _grad_evaluations += 1
    return breakdown, grads


def sgd_step(
    params: EmbedderParams,
    grads: Gradients,
    lr: float,
    momentum_state: EmbedderParams | None = None,
    momentum: float = 0.0,
) -> tuple[EmbedderParams, EmbedderParams]:
    """One momentum-SGD update: v <- momentum * v + g; p <- p - lr * v.

    Returns (new_params, new_momentum_state); inputs are not mutated.
    A None momentum_state means zero velocity.
    """
    lr = float(lr)
    momentum = float(momentum)
    if not lr > 0.0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if momentum_state is None:
        momentum_state = zeros_like_params(params)
    p_blocks = params.blocks()
    g_blocks = grads.blocks()
    v_blocks = momentum_state.blocks()
    if len(p_blocks) != len(g_blocks) or len(p_blocks) != len(v_blocks):
        raise DimensionMismatch("parameter, gradient and momentum trees differ in depth")
    new_params = zeros_like_params(params)
    new_state = zeros_like_params(params)
    for np_block, ns_block, p, g, v in zip(
        new_params.blocks(), new_state.blocks(), p_blocks, g_blocks, v_blocks
    ):
        if p.weight.shape != g.weight.shape or p.weight.shape != v.weight.shape:
            raise DimensionMismatch(
                f"shape mismatch in update: {p.weight.shape} vs {g.weight.shape} vs {v.weight.shape}"
            )
        ns_block.weight[:] = momentum * v.weight + g.weight
        ns_block.bias[:] = momentum * v.bias + g.bias
        np_block.weight[:] = p.weight - lr * ns_block.weight
        np_block.bias[:] = p.bias - lr * ns_block.bias
    return new_params, new_state


def _named_tensors(params: EmbedderParams) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for k, layer in enumerate(params.trunk):
        out.append((f"trunk.{k}.weight", layer.weight))
        out.append((f"trunk.{k}.bias", layer.bias))
    for name, layer in (
        ("feature_head", params.feature_head),
        ("background_head", params.background_head),
        ("box_head", params.box_head),
    ):
        out.append((f"{name}.weight", layer.weight))
        out.append((f"{name}.bias", layer.bias))
    return out


def params_config(params: EmbedderParams) -> dict:
    return {
        "m_in": params.m_in,
        "hidden_sizes": list(params.hidden_sizes),
        "feature_dim": params.feature_dim,
    }


def params_to_lines(params: EmbedderParams) -> list[str]:
    """Tensor block lines (no header/config); shared with full checkpoints."""
    lines: list[str] = []
    for name, arr in _named_tensors(params):
        lines.extend(tensor_lines(name, arr))
    return lines


def params_from_tensors(tensors: dict[str, np.ndarray], config: dict) -> EmbedderParams:
    """Rebuild a parameter tree from named tensors, validating shapes against
    the declared architecture."""
    tensors = dict(tensors)
    try:
        m_in = int(config["m_in"])
        hidden = [int(h) for h in config["hidden_sizes"]]
        feature_dim = int(config["feature_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad architecture config: {exc}") from exc

    def take(name: str, shape: tuple[int, int]) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    widths = [m_in, *hidden]
    trunk = []
    for k in range(len(hidden)):
        weight = take(f"trunk.{k}.weight", (widths[k], widths[k + 1]))
        bias = take(f"trunk.{k}.bias", (1, widths[k + 1]))[0]
        trunk.append(AffineLayer(weight, bias))
    top = widths[-1]
    heads = {}
    for name, n_out in (("feature_head", feature_dim), ("background_head", 1), ("box_head", 4)):
        weight = take(f"{name}.weight", (top, n_out))
        bias = take(f"{name}.bias", (1, n_out))[0]
        heads[name] = AffineLayer(weight, bias)
    if tensors:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(tensors)}")
    params = EmbedderParams(trunk=trunk, **heads)
    try:
        validate_params(params)
    except (DimensionMismatch, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return params


def save_params(path, params: EmbedderParams, extra_config: dict | None = None) -> None:
    """Single-file parameter checkpoint: versioned header, a JSON config line
    (architecture plus any extra keys), then one block per tensor."""
    config = params_config(params)
    if extra_config:
        config.update(extra_config)
    lines = [PARAMS_HEADER, "config " + json.dumps(config, sort_keys=True)]
    lines.extend(params_to_lines(params))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> tuple[EmbedderParams, dict]:
    """Inverse of save_params. Rejects unknown versions and any tensor whose
    shape disagrees with the declared architecture."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != PARAMS_HEADER:
        raise CheckpointError(f"not a parameter checkpoint (header {lines[0][:40]!r})" if lines else "empty file")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise CheckpointError("missing config line")
    try:
        config = json.loads(lines[1][len("config ") :])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad config JSON: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    body = lines[2:]
    k = 0
    while k < len(body):
        if not body[k].strip():
            k += 1
            continue
        if k + 1 >= len(body):
            raise CheckpointError(f"dangling tensor header: {body[k]!r}")
        try:
            name, arr = parse_tensor(body[k], body[k + 1])
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = arr
        k += 2
    params = params_from_tensors(tensors, config)
    return params, config
