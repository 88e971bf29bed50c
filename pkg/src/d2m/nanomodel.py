"""Deterministic desk-scale decoder-only transformer.

Everything runs in float64 numpy: causal GQA attention with per-head q/k
norms, GLU MLPs, top-k expert routing, the load-balancing auxiliary loss,
analytic gradients for router and expert weights, and a full-batch SGD toy
trainer. Positions enter as fixed sinusoidal offsets added to the token
embeddings; attention and embeddings are never trained, so no gradient ever
flows through the attention stack.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import ModelShape, RouterConfig, validate_router
from .errors import (
    DimensionMismatch,
    DivergenceDetected,
    EmptyRecord,
    InvalidConfig,
    IoFailure,
    NonFiniteActivation,
    NonFiniteGradient,
    OutOfRange,
    UnsupportedTopology,
)
from .traceio import (
    ActivationTrace,
    WeightContainer,
    copy_container,
    make_trace,
    tensor_schema,
    validate_container,
)

RMS_EPS = 1e-6


# --- numeric primitives --------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * scale


def rms_norm_input_grad(x: np.ndarray, scale: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient of rms_norm w.r.t. its input (scale held constant)."""
    ms = np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS
    inv = 1.0 / np.sqrt(ms)
    gy = d_out * scale
    dot = np.sum(gy * x, axis=-1, keepdims=True)
    return gy * inv - x * (dot * inv ** 3 / x.shape[-1])


def sinusoid_positions(seq_len: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Fixed additive positional offsets (parameter-free by design)."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)
    ang = pos / np.power(10000.0, 2.0 * idx / dim)
    enc = np.zeros((seq_len, dim))
    enc[:, 0::2] = np.sin(ang)
    enc[:, 1 ::2] = np.cos(ang[:, : enc[:, 1::2].shape[1]])
    return enc * scale


# --- layer views ----------------------------------------------------------------


@dataclass(frozen=True)
class AttentionParams:
    norm: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    q_norm: np.ndarray
    k_norm: np.ndarray
    n_heads: int
    n_kv_heads: int
    head_dim: int


@dataclass(frozen=True)
class GluMlp:
    up: np.ndarray
    gate: np.ndarray
    down: np.ndarray


@dataclass(frozen=True)
class DenseLayer:
    attn: AttentionParams
    mlp_norm: np.ndarray
    mlp: GluMlp


@dataclass(frozen=True)
class MoELayer:
    """Shared attention and one mlp norm, a router, and N expert GLU triples."""

    attn: AttentionParams
    mlp_norm: np.ndarray
    experts: tuple[GluMlp, ...]
    router: np.ndarray
    top_k: int
    config: RouterConfig = RouterConfig()
    provenance: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RoutingRecord:
    """Per-token routing outcome: full probabilities, top-k picks, gates."""

    probabilities: np.ndarray
    selected: np.ndarray
    gates: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.probabilities.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probabilities.shape[1]


def top1_fractions(record: RoutingRecord) -> np.ndarray:
    """Fraction of tokens whose highest-probability expert is i."""
    winners = np.argmax(record.probabilities, axis=1)
    counts = np.bincount(winners, minlength=record.num_experts)
    return counts / record.num_tokens


# --- forward ops ---------------------------------------------------------------


def mlp_apply(mlp: GluMlp, x: np.ndarray) -> np.ndarray:
    """GLU feed-forward: (silu(x @ up) * (x @ gate)) @ down."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.up.shape[0]:
        raise DimensionMismatch(
            f"mlp input has shape {x.shape}, expected (T, {mlp.up.shape[0]})"
        )
    if mlp.gate.shape != mlp.up.shape or mlp.down.shape != mlp.up.shape[::-1]:
        raise DimensionMismatch(
            f"inconsistent GLU triple: up {mlp.up.shape}, gate {mlp.gate.shape}, "
            f"down {mlp.down.shape}"
        )
    return (silu(x @ mlp.up) * (x @ mlp.gate)) @ mlp.down


def _head_rms(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * scale


def attention_forward(attn: AttentionParams, x: np.ndarray) -> np.ndarray:
    """Causal grouped-query attention over one sequence."""
    seq_len = x.shape[0]
    z = rms_norm(x, attn.norm)
    q = (z @ attn.q).reshape(seq_len, attn.n_heads, attn.head_dim)
    k = (z @ attn.k).reshape(seq_len, attn.n_kv_heads, attn.head_dim)
    v = (z @ attn.v).reshape(seq_len, attn.n_kv_heads, attn.head_dim)
    q = _head_rms(q, attn.q_norm)
    k = _head_rms(k, attn.k_norm)
    group = attn.n_heads // attn.n_kv_heads
    k = np.repeat(k, group, axis=1)
    v = np.repeat(v, group, axis=1)
    scores = np.einsum("thd,shd->hts", q, k) / math.sqrt(attn.head_dim)
    causal = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    scores = np.where(causal[None, :, :], -np.inf, scores)
    weights = softmax(scores, axis=-1)
    ctx = np.einsum("hts,shd->thd", weights, v)
    return ctx.reshape(seq_len, attn.n_heads * attn.head_dim) @ attn.o


def route(router: np.ndarray, h: np.ndarray, top_k: int,
          config: RouterConfig = RouterConfig()) -> RoutingRecord:
    """Softmax routing with temperature; picks the top_k largest probabilities.

    Gates are the raw selected probabilities unless renormalize_top_k is on.
    Probability ties resolve to the smaller expert index.
    """
    validate_router(config)
    n_experts = router.shape[1]
    if not 1 <= top_k <= n_experts:
        raise OutOfRange(f"top_k {top_k} outside 1..{n_experts}")
    probs = softmax((h @ router) / config.temperature, axis=1)
    order = np.argsort(-probs, axis=1, kind="stable")
    selected = order[:, :top_k]
    gates = np.take_along_axis(probs, selected, axis=1)
    if config.renormalize_top_k:
        gates = gates / gates.sum(axis=1, keepdims=True)
    return RoutingRecord(probabilities=probs, selected=selected, gates=gates)


@dataclass(frozen=True)
class _MoeCache:
    """Intermediates needed to backpropagate through the expert branch."""

    z: np.ndarray
    items: tuple[tuple[int, np.ndarray, np.ndarray, np.ndarray], ...]
    forced: bool


def _moe_from_h(layer: MoELayer, h: np.ndarray,
                forced_expert: int | None = None) -> tuple[np.ndarray, RoutingRecord, _MoeCache]:
    seq_len = h.shape[0]
    record = route(layer.router, h, layer.top_k, layer.config)
    if forced_expert is not None:
        if not 1 <= forced_expert <= len(layer.experts):
            raise OutOfRange(f"forced expert {forced_expert} outside 1..{len(layer.experts)}")
        record = RoutingRecord(
            probabilities=record.probabilities,
            selected=np.full((seq_len, 1), forced_expert - 1, dtype=np.int64),
            gates=np.ones((seq_len, 1)),
        )
    z = rms_norm(h, layer.mlp_norm)
    y = h.copy()
    items = []
    for e in range(len(layer.experts)):
        rows, slots = np.nonzero(record.selected == e)
        if rows.size == 0:
            continue
        outputs = mlp_apply(layer.experts[e], z[rows])
        gates = record.gates[rows, slots]
        y[rows] += gates[:, None] * outputs
        items.append((e, rows, gates, outputs))
    return y, record, _MoeCache(z=z, items=tuple(items), forced=forced_expert is not None)


def pre_mlp_state(layer: DenseLayer | MoELayer, x: np.ndarray) -> np.ndarray:
    """Residual state after attention: the routing input of a MoE layer."""
    h = x + attention_forward(layer.attn, x)
    if not np.isfinite(h).all():
        raise NonFiniteActivation("attention produced non-finite values")
    return h


def moe_forward(layer: MoELayer, x: np.ndarray,
                forced_expert: int | None = None) -> tuple[np.ndarray, RoutingRecord]:
    """One MoE layer: shared attention, then gated experts on the shared state.

    ``forced_expert`` (1-based) is a test hook that routes every token to one
    expert with gate 1.0, bypassing the router's selection.
    """
    h = pre_mlp_state(layer, x)
    y, record, _ = _moe_from_h(layer, h, forced_expert)
    if not np.isfinite(y).all():
        raise NonFiniteActivation("moe layer output contains non-finite values")
    return y, record


def dense_layer_forward(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (h, y) for one dense layer."""
    h = pre_mlp_state(layer, x)
    y = h + mlp_apply(layer.mlp, rms_norm(h, layer.mlp_norm))
    return h, y


# --- whole-model forward ---------------------------------------------------------


def layers_of(container: WeightContainer,
              router_config: RouterConfig = RouterConfig()) -> list[DenseLayer | MoELayer]:
    """Materialize layer views over the container's tensors (no copies)."""
    shape = container.shape
    t = container.tensors
    out: list[DenseLayer | MoELayer] = []
    for l in range(1, shape.num_layers + 1):
        attn = AttentionParams(
            norm=t[f"layer.{l}.attn_norm"],
            q=t[f"layer.{l}.attn.q"],
            k=t[f"layer.{l}.attn.k"],
            v=t[f"layer.{l}.attn.v"],
            o=t[f"layer.{l}.attn.o"],
            q_norm=t[f"layer.{l}.attn.q_norm"],
            k_norm=t[f"layer.{l}.attn.k_norm"],
            n_heads=shape.num_heads,
            n_kv_heads=shape.num_kv_heads,
            head_dim=shape.head_dim,
        )
        mlp_norm = t[f"layer.{l}.mlp_norm"]
        if l in container.moe_layers:
            n_experts = container.moe_layers[l]
            experts = tuple(
                GluMlp(
                    up=t[f"layer.{l}.moe.expert.{e}.up"],
                    gate=t[f"layer.{l}.moe.expert.{e}.gate"],
                    down=t[f"layer.{l}.moe.expert.{e}.down"],
                )
                for e in range(1, n_experts + 1)
            )
            out.append(MoELayer(attn=attn, mlp_norm=mlp_norm, experts=experts,
                                router=t[f"layer.{l}.router"],
                                top_k=container.shape.moe.top_k,
                                config=router_config))
        else:
            mlp = GluMlp(up=t[f"layer.{l}.mlp.up"], gate=t[f"layer.{l}.mlp.gate"],
                         down=t[f"layer.{l}.mlp.down"])
            out.append(DenseLayer(attn=attn, mlp_norm=mlp_norm, mlp=mlp))
    return out


def forward_trace(container: WeightContainer, x: np.ndarray,
                  router_config: RouterConfig = RouterConfig(),
                  forced_expert: int | None = None,
                  ) -> tuple[np.ndarray, ActivationTrace, dict[int, RoutingRecord]]:
    """Run all layers on embedded input, capturing h/y per layer.

    Returns the final layer output (which equals the last captured y), the
    trace, and the routing record of every MoE layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != container.shape.hidden_dim:
        raise DimensionMismatch(
            f"input has shape {x.shape}, expected (T, {container.shape.hidden_dim})"
        )
    if not np.isfinite(x).all():
        raise NonFiniteActivation("embedded input contains non-finite values")
    records: dict[int, RoutingRecord] = {}
    h_states, y_states = [], []
    state = x
    for idx, layer in enumerate(layers_of(container, router_config), start=1):
        if isinstance(layer, MoELayer):
            h = pre_mlp_state(layer, state)
            y, record, _ = _moe_from_h(layer, h, forced_expert)
            records[idx] = record
        else:
            h, y = dense_layer_forward(layer, state)
        if not np.isfinite(y).all():
            raise NonFiniteActivation(f"layer {idx} produced non-finite values")
        h_states.append(h)
        y_states.append(y)
        state = y
    return state, make_trace(h_states, y_states), records


def dense_forward(container: WeightContainer, x: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    """Forward pass of a dense model, capturing the full activation trace."""
    if container.moe_layers:
        raise DimensionMismatch("dense_forward requires a model without MoE layers")
    state, trace, _ = forward_trace(container, x)
    return state, trace


def head_logits(container: WeightContainer, final_state: np.ndarray) -> np.ndarray:
    """Final norm plus (tied or untied) LM head."""
    f = rms_norm(final_state, container.tensors["final_norm"])
    if container.shape.tied_embedding:
        return f @ container.tensors["embed"].T
    return f @ container.tensors["lm_head"]


# --- load balancing ---------------------------------------------------------------


def load_balance_loss(records: Sequence[RoutingRecord], alpha: float) -> float:
    """Switch-style auxiliary loss: alpha * N * sum_i f_i * P_i per record.

    f_i is the hard top-1 assignment fraction (no gradient), P_i the mean
    routing probability of expert i; record contributions are summed.
    """
    if not records:
        raise EmptyRecord("load_balance_loss needs at least one routing record")
    total = 0.0
    for record in records:
        f = top1_fractions(record)
        mean_prob = record.probabilities.mean(axis=0)
        total += alpha * record.num_experts * float(f @ mean_prob)
    return total


# --- gradients ----------------------------------------------------------------------


@dataclass
class MoeGrads:
    router: np.ndarray
    experts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


def glu_param_grads(mlp: GluMlp, z: np.ndarray,
                    d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a GLU MLP's three matrices given upstream d_out (input fixed)."""
    u = z @ mlp.up
    v = z @ mlp.gate
    sig = sigmoid(u)
    act = u * sig
    d_pre = d_out @ mlp.down.T
    d_down = (act * v).T @ d_out
    d_u = d_pre * v * (sig * (1.0 + u * (1.0 - sig)))
    d_v = d_pre * act
    return z.T @ d_u, z.T @ d_v, d_down


def moe_param_grads(layer: MoELayer, h: np.ndarray, record: RoutingRecord,
                    cache: _MoeCache, d_output: np.ndarray,
                    lb_alpha: float) -> MoeGrads:
    """Analytic gradients w.r.t. router and expert weights for a loss whose
    gradient on the layer output is d_output, plus the lb_alpha-weighted
    balancing term (top-1 fractions treated as constants).

    The routing input h is held fixed (no gradient flows back through
    attention), matching the trainer's frozen-attention regime.
    """
    if cache.forced:
        raise InvalidConfig("gradients are undefined under forced routing")
    if layer.config.renormalize_top_k:
        raise InvalidConfig("gradient path supports raw softmax gates only")
    n_experts = len(layer.experts)
    num_tokens = h.shape[0]
    d_probs = np.zeros_like(record.probabilities)
    expert_grads = []
    by_expert = {e: (rows, gates, outputs) for e, rows, gates, outputs in cache.items}
    for e in range(n_experts):
        if e not in by_expert:
            expert_grads.append((np.zeros_like(layer.experts[e].up),
                                 np.zeros_like(layer.experts[e].gate),
                                 np.zeros_like(layer.experts[e].down)))
            continue
        rows, gates, outputs = by_expert[e]
        dy_rows = d_output[rows]
        d_probs[rows, e] += np.einsum("td,td->t", dy_rows, outputs)
        upstream = gates[:, None] * dy_rows
        expert_grads.append(glu_param_grads(layer.experts[e], cache.z[rows], upstream))
    if lb_alpha:
        f = top1_fractions(record)
        d_probs += lb_alpha * n_experts * f[None, :] / num_tokens
    inner = np.einsum("tn,tn->t", d_probs, record.probabilities)
    d_logits = record.probabilities * (d_probs - inner[:, None])
    router_grad = h.T @ d_logits / layer.config.temperature
    return MoeGrads(router=router_grad, experts=expert_grads)


def _named_layer_params(layer: MoELayer, grads: MoeGrads):
    yield "router", layer.router, grads.router
    for e, mlp in enumerate(layer.experts, start=1):
        g_up, g_gate, g_down = grads.experts[e - 1]
        yield f"expert.{e}.up", mlp.up, g_up
        yield f"expert.{e}.gate", mlp.gate, g_gate
        yield f"expert.{e}.down", mlp.down, g_down


GRAD_DENOM_FLOOR = 1e-3


def grad_check(layer: MoELayer, x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Loss = mean(output**2) + load-balancing term at the layer's aux weight,
    with assignment fractions frozen at the unperturbed routing (stop-gradient
    semantics). Covers the router and every expert tensor. The relative-error
    denominator is floored at GRAD_DENOM_FLOOR: float64 central differences
    carry ~1e-10 absolute roundoff, so entries below the floor are held to a
    ~1e-9 absolute bound instead of a meaningless relative one.
    """
    if not 1e-7 <= step <= 1e-4:
        raise OutOfRange(f"step {step} outside [1e-7, 1e-4]")
    x = np.asarray(x, dtype=np.float64)
    h = pre_mlp_state(layer, x)
    y, record, cache = _moe_from_h(layer, h)
    alpha = layer.config.aux_loss_weight
    n_experts = len(layer.experts)
    d_y = (2.0 / y.size) * y
    grads = moe_param_grads(layer, h, record, cache, d_y, alpha)
    frozen_f = top1_fractions(record)

    def loss() -> float:
        y2, rec2, _ = _moe_from_h(layer, h)
        mean_prob = rec2.probabilities.mean(axis=0)
        return float(np.mean(y2 ** 2)) + alpha * n_experts * float(frozen_f @ mean_prob)

    worst = 0.0
    for name, tensor, grad in _named_layer_params(layer, grads):
        flat_t = tensor.reshape(-1)
        flat_g = grad.reshape(-1)
        for i in range(flat_t.size):
            original = flat_t[i]
            flat_t[i] = original + step
            up = loss()
            flat_t[i] = original - step
            down = loss()
            flat_t[i] = original
            fd = (up - down) / (2.0 * step)
            analytic = flat_g[i]
            if not (np.isfinite(fd) and np.isfinite(analytic)):
                raise NonFiniteGradient(f"non-finite gradient in {name}[{i}]")
            err = abs(fd - analytic) / max(abs(fd), abs(analytic), GRAD_DENOM_FLOOR)
            worst = max(worst, err)
    return worst


# --- toy models and training ----------------------------------------------------------


def build_toy_container(shape: ModelShape, seed: int,
                        moe_layers: Mapping[int, int] | None = None,
                        weight_scale: float = 0.02,
                        duplicate_from: Iterable[tuple[int, int]] = ()) -> WeightContainer:
    """Seeded Gaussian toy weights (norm scales start at one).

    ``duplicate_from`` entries (base, offset) copy every tensor of layer
    ``base`` onto layer ``base+offset``, producing exactly redundant layers.
    Values pass through float32 so containers serialize losslessly.
    """
    rng = np.random.default_rng(seed)
    schema = tensor_schema(shape, moe_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, dims in schema.items():
        if name.endswith("norm"):
            tensors[name] = np.ones(dims)
        else:
            raw = rng.standard_normal(dims) * weight_scale
            tensors[name] = raw.astype(np.float32).astype(np.float64)
    for base, offset in duplicate_from:
        target = base + offset
        if not (1 <= base <= shape.num_layers and base < target <= shape.num_layers):
            raise OutOfRange(f"duplicate entry (base={base}, offset={offset}) out of range")
        src_prefix = f"layer.{base}."
        for name in list(tensors):
            if name.startswith(src_prefix):
                tensors[f"layer.{target}.{name[len(src_prefix):]}"] = tensors[name].copy()
    container = WeightContainer(shape=shape, tensors=tensors,
                                moe_layers=dict(moe_layers or {}))
    return validate_container(container)


def build_toy_moe_layer(hidden_dim: int, mlp_dim: int, n_experts: int, seed: int,
                        top_k: int = 1, n_heads: int = 2, n_kv_heads: int = 1,
                        weight_scale: float = 0.5,
                        config: RouterConfig = RouterConfig()) -> MoELayer:
    """Standalone random MoE layer for gradient and routing tests."""
    rng = np.random.default_rng(seed)
    head_dim = hidden_dim // n_heads

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) * weight_scale

    attn = AttentionParams(
        norm=np.ones(hidden_dim),
        q=mat(hidden_dim, n_heads * head_dim),
        k=mat(hidden_dim, n_kv_heads * head_dim),
        v=mat(hidden_dim, n_kv_heads * head_dim),
        o=mat(n_heads * head_dim, hidden_dim),
        q_norm=np.ones(head_dim),
        k_norm=np.ones(head_dim),
        n_heads=n_heads,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
    )
    experts = tuple(
        GluMlp(up=mat(hidden_dim, mlp_dim), gate=mat(hidden_dim, mlp_dim),
               down=mat(mlp_dim, hidden_dim))
        for _ in range(n_experts)
    )
    return MoELayer(attn=attn, mlp_norm=np.ones(hidden_dim), experts=experts,
                    router=mat(hidden_dim, n_experts), top_k=top_k, config=config)


def make_copy_stream(vocab_size: int, seq_len: int, num_sequences: int,
                     seed: int) -> np.ndarray:
    """Random token sequences for the copy task (target equals input)."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(num_sequences, seq_len), dtype=np.int64)


@dataclass(frozen=True)
class TrainStep:
    step: int
    task_loss: float
    lb_loss: float
    loads: tuple[float, ...]


@dataclass
class TrainLog:
    steps: list[TrainStep] = field(default_factory=list)

    @property
    def num_experts(self) -> int:
        return len(self.steps[0].loads)

    def to_csv(self, destination) -> None:
        rows = [["step", "task_loss", "lb_loss"]
                + [f"load_e{i}" for i in range(1, self.num_experts + 1)]]
        for s in self.steps:
            rows.append([str(s.step), f"{s.task_loss:.12e}", f"{s.lb_loss:.12e}"]
                        + [f"{v:.12e}" for v in s.loads])
        try:
            if isinstance(destination, (str, Path)):
                with open(destination, "w", newline="", encoding="utf-8") as handle:
                    csv.writer(handle).writerows(rows)
            else:
                csv.writer(destination).writerows(rows)
        except OSError as exc:
            raise IoFailure(f"cannot write training log: {exc}") from exc


def train_log_from_csv(source) -> TrainLog:
    try:
        if isinstance(source, (str, Path)):
            with open(source, newline="", encoding="utf-8") as handle:
                rows = list(csv.reader(handle))
        else:
            rows = list(csv.reader(source))
    except OSError as exc:
        raise IoFailure(f"cannot read training log: {exc}") from exc
    if not rows or not rows[0][:3] == ["step", "task_loss", "lb_loss"]:
        raise InvalidConfig("not a training log CSV (bad header)")
    log = TrainLog()
    for row in rows[1:]:
        log.steps.append(TrainStep(step=int(row[0]), task_loss=float(row[1]),
                                   lb_loss=float(row[2]),
                                   loads=tuple(float(v) for v in row[3:])))
    if not log.steps:
        raise InvalidConfig("training log has no data rows")
    return log


def _softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(len(targets))
    loss = -float(np.mean(log_p[rows, targets]))
    grad = np.exp(log_p)
    grad[rows, targets] -= 1.0
    return loss, grad / len(targets)


POSITION_SCALE = 0.1


def train_toy(container: WeightContainer, data: np.ndarray | None, steps: int,
              lr: float, alpha: float, seed: int = 0) -> tuple[TrainLog, WeightContainer]:
    """Full-batch SGD on router and expert weights of a fused toy model.

    Supports models whose single MoE layer sits last in the stack, so exact
    gradients never have to cross an attention module. Every step processes
    the whole stream; loads are pooled top-1 fractions over all its tokens.
    The logged lb_loss is the unweighted balance term (alpha scales it in the
    training objective only). When ``data`` is None a default copy-task
    stream is synthesized from ``seed``.
    """
    validate_container(container)
    if steps < 1:
        raise OutOfRange("steps must be at least 1")
    num_layers = container.shape.num_layers
    if list(container.moe_layers) != [num_layers]:
        raise UnsupportedTopology(
            "train_toy requires exactly one MoE layer, at the final position "
            f"(got MoE layers {sorted(container.moe_layers)} of {num_layers})"
        )
    work = copy_container(container)
    shape = work.shape
    if data is None:
        data = make_copy_stream(shape.vocab_size, seq_len=64, num_sequences=4, seed=seed)
    data = np.asarray(data, dtype=np.int64)
    if data.ndim != 2 or data.size == 0:
        raise OutOfRange("data must be a non-empty (num_sequences, seq_len) array")
    if data.min() < 0 or data.max() >= shape.vocab_size:
        raise OutOfRange("token ids must lie in [0, vocab_size)")

    router_config = RouterConfig(aux_loss_weight=alpha)
    layers = layers_of(work, router_config)
    moe_layer = layers[-1]
    n_experts = len(moe_layer.experts)
    embed = work.tensors["embed"]
    final_norm = work.tensors["final_norm"]
    head = embed if shape.tied_embedding else work.tensors["lm_head"]
    num_seqs, seq_len = data.shape
    positions = sinusoid_positions(seq_len, shape.hidden_dim, scale=POSITION_SCALE)
    total_tokens = num_seqs * seq_len

    log = TrainLog()
    for step in range(1, steps + 1):
        router_grad = np.zeros_like(moe_layer.router)
        expert_grads = [
            (np.zeros_like(m.up), np.zeros_like(m.gate), np.zeros_like(m.down))
            for m in moe_layer.experts
        ]
        task_loss = 0.0
        top1_counts = np.zeros(n_experts)
        prob_sums = np.zeros(n_experts)
        lb_router_inputs = []
        for seq in data:
            state = embed[seq] + positions
            for layer in layers[:-1]:
                _, state = dense_layer_forward(layer, state)
            h = pre_mlp_state(moe_layer, state)
            y, record, cache = _moe_from_h(moe_layer, h)
            if shape.tied_embedding:
                logits = rms_norm(y, final_norm) @ head.T
            else:
                logits = rms_norm(y, final_norm) @ head
            seq_loss, d_logits = _softmax_xent(logits, seq)
            task_loss += seq_loss / num_seqs
            d_logits = d_logits / num_seqs
            d_final = d_logits @ head if shape.tied_embedding else d_logits @ head.T
            d_y = rms_norm_input_grad(y, final_norm, d_final)
            grads = moe_param_grads(moe_layer, h, record, cache, d_y, lb_alpha=0.0)
            router_grad += grads.router
            for e in range(n_experts):
                for acc, g in zip(expert_grads[e], grads.experts[e]):
                    acc += g
            winners = np.argmax(record.probabilities, axis=1)
            top1_counts += np.bincount(winners, minlength=n_experts)
            prob_sums += record.probabilities.sum(axis=0)
            lb_router_inputs.append((h, record.probabilities))

        loads = top1_counts / total_tokens
        mean_probs = prob_sums / total_tokens
        lb_raw = n_experts * float(loads @ mean_probs)
        if alpha:
            # balance gradient with pooled assignment fractions held constant
            d_probs_row = alpha * n_experts * loads / total_tokens
            for h, probs in lb_router_inputs:
                d_probs = np.broadcast_to(d_probs_row, probs.shape)
                inner = np.einsum("tn,tn->t", d_probs, probs)
                d_logits_r = probs * (d_probs - inner[:, None])
                router_grad += h.T @ d_logits_r / router_config.temperature

        if not (np.isfinite(task_loss) and np.isfinite(lb_raw)):
            raise DivergenceDetected(f"loss became non-finite at step {step}")
        log.steps.append(TrainStep(step=step, task_loss=task_loss, lb_loss=lb_raw,
                                   loads=tuple(loads)))

        moe_layer.router[...] -= lr * router_grad
        for e, mlp in enumerate(moe_layer.experts):
            mlp.up[...] -= lr * expert_grads[e][0]
            mlp.gate[...] -= lr * expert_grads[e][1]
            mlp.down[...] -= lr * expert_grads[e][2]
    return log, work


def collect_top1_assignments(container: WeightContainer, data: np.ndarray,
                             router_config: RouterConfig = RouterConfig(),
                             ) -> dict[int, np.ndarray]:
    """Pooled top-1 expert assignments per MoE layer over a token stream."""
    data = np.asarray(data, dtype=np.int64)
    shape = container.shape
    positions = sinusoid_positions(data.shape[1], shape.hidden_dim, scale=POSITION_SCALE)
    assignments: dict[int, list[np.ndarray]] = {l: [] for l in container.moe_layers}
    for seq in data:
        x = container.tensors["embed"][seq] + positions
        _, _, records = forward_trace(container, x, router_config)
        for l, record in records.items():
            assignments[l].append(np.argmax(record.probabilities, axis=1))
    return {l: np.concatenate(parts) for l, parts in assignments.items()}
