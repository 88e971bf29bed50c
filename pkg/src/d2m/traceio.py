"""Activation traces, weight containers, and their binary formats.

On-disk precision is 32-bit little-endian floats; in-memory analysis runs in
float64. Files therefore round-trip bit-exactly, while writing arbitrary
float64 data truncates it to float32 once (synthesized fixtures are generated
float32-representable so every write is lossless in practice).

Formats (all integers little-endian u32):

  trace   magic ``D2MT`` | version=1 | L | T | d |
          h^(1..L) row-major T*d f32 | y^(1..L) row-major T*d f32
  weights magic ``D2MW`` | version=1 | config-length | UTF-8 JSON shape doc |
          entries: name-length | UTF-8 name | ndim | dims u32*ndim | f32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from .config import ModelShape, shape_from_dict, shape_to_dict, validate_shape
from .errors import (
    BadMagic,
    DimensionMismatch,
    InvalidConfig,
    InvalidTrace,
    IoFailure,
    MissingTensor,
    NonFiniteValue,
    OutOfRange,
    TruncatedPayload,
    VersionMismatch,
)

TRACE_MAGIC = b"D2MT"
WEIGHTS_MAGIC = b"D2MW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ActivationTrace:
    """Per-layer, per-token hidden states captured from a forward pass.

    ``mlp_inputs[l-1]`` is the post-attention residual state entering layer
    l's MLP branch; ``layer_outputs[l-1]`` is layer l's final output.
    """

    mlp_inputs: tuple[np.ndarray, ...]
    layer_outputs: tuple[np.ndarray, ...]

    @property
    def num_layers(self) -> int:
        return len(self.mlp_inputs)

    @property
    def seq_len(self) -> int:
        return self.mlp_inputs[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.mlp_inputs[0].shape[1]


def make_trace(mlp_inputs: Sequence[np.ndarray],
               layer_outputs: Sequence[np.ndarray]) -> ActivationTrace:
    """Build a validated trace from per-layer matrices."""
    if len(mlp_inputs) == 0 or len(mlp_inputs) != len(layer_outputs):
        raise InvalidTrace(
            f"need equal non-zero layer counts, got {len(mlp_inputs)} mlp inputs "
            f"and {len(layer_outputs)} outputs"
        )
    h = tuple(np.ascontiguousarray(m, dtype=np.float64) for m in mlp_inputs)
    y = tuple(np.ascontiguousarray(m, dtype=np.float64) for m in layer_outputs)
    t, d = h[0].shape
    if t < 1 or d < 1:
        raise InvalidTrace(f"degenerate trace dimensions T={t}, d={d}")
    for label, mats in (("mlp_inputs", h), ("layer_outputs", y)):
        for idx, m in enumerate(mats, start=1):
            if m.ndim != 2 or m.shape != (t, d):
                raise InvalidTrace(
                    f"{label} layer {idx} has shape {m.shape}, expected {(t, d)}"
                )
            if not np.isfinite(m).all():
                raise NonFiniteValue(f"{label} layer {idx} contains non-finite values")
    return ActivationTrace(mlp_inputs=h, layer_outputs=y)


# --- low-level stream helpers --------------------------------------------------


def _as_sink(destination) -> tuple[BinaryIO, bool]:
    if isinstance(destination, (str, Path)):
        try:
            return open(destination, "wb"), True
        except OSError as exc:
            raise IoFailure(f"cannot open {destination} for writing: {exc}") from exc
    return destination, False


def _as_source(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        try:
            return open(source, "rb"), True
        except OSError as exc:
            raise IoFailure(f"cannot open {source} for reading: {exc}") from exc
    return source, False


def _write(stream: BinaryIO, payload: bytes) -> int:
    try:
        stream.write(payload)
    except (OSError, ValueError, AttributeError) as exc:
        raise IoFailure(f"write failed: {exc}") from exc
    return len(payload)


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    try:
        data = stream.read(count)
    except (OSError, ValueError, AttributeError) as exc:
        raise IoFailure(f"read failed: {exc}") from exc
    if data is None or len(data) < count:
        got = 0 if data is None else len(data)
        raise TruncatedPayload(f"expected {count} bytes for {what}, got {got}")
    return data


def _read_u32(stream: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(stream, 4, what))[0]


def _check_header(stream: BinaryIO, magic: bytes) -> None:
    got = _read_exact(stream, 4, "magic")
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, got {got!r}")
    version = _read_u32(stream, "version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format version {version}")


# --- trace format ---------------------------------------------------------------


def write_trace(trace: ActivationTrace, destination) -> int:
    """Serialize a trace; returns the number of bytes emitted."""
    stream, owned = _as_sink(destination)
    try:
        n = _write(stream, TRACE_MAGIC)
        n += _write(stream, struct.pack("<IIII", FORMAT_VERSION, trace.num_layers,
                                        trace.seq_len, trace.hidden_dim))
        for mats in (trace.mlp_inputs, trace.layer_outputs):
            for m in mats:
                n += _write(stream, np.ascontiguousarray(m, dtype="<f4").tobytes())
        return n
    finally:
        if owned:
            stream.close()


def read_trace(source) -> ActivationTrace:
    """Deserialize a trace, re-validating finiteness and dimensions."""
    stream, owned = _as_source(source)
    try:
        _check_header(stream, TRACE_MAGIC)
        num_layers = _read_u32(stream, "layer count")
        seq_len = _read_u32(stream, "sequence length")
        hidden = _read_u32(stream, "hidden dim")
        if num_layers < 1 or seq_len < 1 or hidden < 1:
            raise InvalidTrace(
                f"degenerate header L={num_layers}, T={seq_len}, d={hidden}"
            )
        per_matrix = seq_len * hidden * 4
        halves = []
        for label in ("mlp_inputs", "layer_outputs"):
            mats = []
            for idx in range(1, num_layers + 1):
                raw = _read_exact(stream, per_matrix, f"{label} layer {idx}")
                mats.append(
                    np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(seq_len, hidden)
                )
            halves.append(mats)
        return make_trace(halves[0], halves[1])
    finally:
        if owned:
            stream.close()


def trace_byte_size(num_layers: int, seq_len: int, hidden_dim: int) -> int:
    """Exact serialized size: 20-byte header plus two f32 matrices per layer."""
    return 20 + 2 * num_layers * seq_len * hidden_dim * 4


def synth_trace(num_layers: int, seq_len: int, hidden_dim: int,
                redundancy_spec: Iterable[tuple[int, int, float]] = (),
                seed: int = 0) -> ActivationTrace:
    """Deterministic random trace with controllable layer redundancy.

    Each ``(base, offset, noise_scale)`` entry rewrites layer ``base+offset``
    as layer ``base`` plus seeded Gaussian noise of the given scale, in both
    the MLP-input and output states, so cosine similarity and norm error of
    that pair are directly controlled. Entries apply in order against the
    current contents of the base layer. Values pass through float32 so the
    trace serializes losslessly.
    """
    if num_layers < 1 or seq_len < 1 or hidden_dim < 1:
        raise InvalidTrace("num_layers, seq_len, and hidden_dim must be positive")
    spec = list(redundancy_spec)
    for base, offset, scale in spec:
        if base < 1 or offset < 1 or base + offset > num_layers:
            raise OutOfRange(
                f"redundancy entry (base={base}, offset={offset}) outside 1..{num_layers}"
            )
        if scale < 0:
            raise OutOfRange(f"noise_scale must be non-negative, got {scale}")
    rng = np.random.default_rng(seed)

    def draw() -> np.ndarray:
        return rng.standard_normal((seq_len, hidden_dim)).astype(np.float32).astype(np.float64)

    h = [draw() for _ in range(num_layers)]
    y = [draw() for _ in range(num_layers)]
    for base, offset, scale in spec:
        for mats in (h, y):
            noise = rng.standard_normal((seq_len, hidden_dim))
            dup = mats[base - 1] + scale * noise
            mats[base + offset - 1] = dup.astype(np.float32).astype(np.float64)
    return make_trace(h, y)


# --- weight containers ------------------------------------------------------------


@dataclass
class WeightContainer:
    """A named-tensor map plus the shape that dictates its schema.

    ``moe_layers`` maps 1-based layer index to that layer's expert count; it
    is empty for dense models. Tensor insertion order is preserved and is the
    on-disk order.
    """

    shape: ModelShape
    tensors: dict[str, np.ndarray]
    moe_layers: dict[int, int] = field(default_factory=dict)


def attention_tensor_names(layer: int) -> tuple[str, ...]:
    p = f"layer.{layer}.attn"
    return (f"layer.{layer}.attn_norm", f"{p}.q", f"{p}.k", f"{p}.v", f"{p}.o",
            f"{p}.q_norm", f"{p}.k_norm")


def tensor_schema(shape: ModelShape,
                  moe_layers: Mapping[int, int] | None = None) -> dict[str, tuple[int, ...]]:
    """Canonical name -> dims map for a container of this shape.

    The schema mirrors the static-memory accounting: per layer one attention
    block (q/k/v/o plus per-head q/k norms), two layer-norm scales, and either
    a dense GLU triple or a router plus N expert triples; globally the token
    embedding, the final norm, and an LM head only when untied.
    """
    validate_shape(shape)
    moe_layers = dict(moe_layers or {})
    d, d_mid = shape.hidden_dim, shape.mlp_dim
    qdim = shape.num_heads * shape.head_dim
    kvdim = shape.num_kv_heads * shape.head_dim
    schema: dict[str, tuple[int, ...]] = {"embed": (shape.vocab_size, d)}
    if not shape.tied_embedding:
        schema["lm_head"] = (d, shape.vocab_size)
    schema["final_norm"] = (d,)
    for layer in range(1, shape.num_layers + 1):
        schema[f"layer.{layer}.attn_norm"] = (d,)
        schema[f"layer.{layer}.attn.q"] = (d, qdim)
        schema[f"layer.{layer}.attn.k"] = (d, kvdim)
        schema[f"layer.{layer}.attn.v"] = (d, kvdim)
        schema[f"layer.{layer}.attn.o"] = (qdim, d)
        schema[f"layer.{layer}.attn.q_norm"] = (shape.head_dim,)
        schema[f"layer.{layer}.attn.k_norm"] = (shape.head_dim,)
        schema[f"layer.{layer}.mlp_norm"] = (d,)
        if layer in moe_layers:
            n_experts = moe_layers[layer]
            schema[f"layer.{layer}.router"] = (d, n_experts)
            for e in range(1, n_experts + 1):
                schema[f"layer.{layer}.moe.expert.{e}.up"] = (d, d_mid)
                schema[f"layer.{layer}.moe.expert.{e}.gate"] = (d, d_mid)
                schema[f"layer.{layer}.moe.expert.{e}.down"] = (d_mid, d)
        else:
            schema[f"layer.{layer}.mlp.up"] = (d, d_mid)
            schema[f"layer.{layer}.mlp.gate"] = (d, d_mid)
            schema[f"layer.{layer}.mlp.down"] = (d_mid, d)
    return schema


def validate_container(container: WeightContainer) -> WeightContainer:
    """Every schema tensor present with matching dims, and nothing extra."""
    for layer in container.moe_layers:
        if not 1 <= layer <= container.shape.num_layers:
            raise DimensionMismatch(f"moe layer index {layer} outside 1..{container.shape.num_layers}")
    if container.moe_layers and container.shape.moe is None:
        raise DimensionMismatch("container has MoE layers but shape.moe is unset")
    if container.shape.moe is not None:
        k = container.shape.moe.top_k
        for layer, n_experts in container.moe_layers.items():
            if k > n_experts:
                raise DimensionMismatch(
                    f"top_k {k} exceeds expert count {n_experts} of layer {layer}"
                )
    schema = tensor_schema(container.shape, container.moe_layers)
    for name, dims in schema.items():
        if name not in container.tensors:
            raise MissingTensor(f"tensor {name!r} is required but absent")
        got = tuple(container.tensors[name].shape)
        if got != dims:
            raise DimensionMismatch(f"tensor {name!r} has dims {got}, expected {dims}")
    extras = set(container.tensors) - set(schema)
    if extras:
        raise DimensionMismatch(f"unexpected tensors not in schema: {sorted(extras)}")
    return container


def param_count(container: WeightContainer) -> int:
    return sum(int(t.size) for t in container.tensors.values())


def copy_container(container: WeightContainer) -> WeightContainer:
    return WeightContainer(
        shape=container.shape,
        tensors={name: t.copy() for name, t in container.tensors.items()},
        moe_layers=dict(container.moe_layers),
    )


def _container_doc(container: WeightContainer) -> dict[str, Any]:
    doc = shape_to_dict(container.shape)
    doc["moe_layers"] = {str(k): v for k, v in sorted(container.moe_layers.items())}
    return doc


def _container_meta(doc: Mapping[str, Any]) -> tuple[ModelShape, dict[int, int]]:
    data = dict(doc)
    moe_layers_doc = data.pop("moe_layers", {})
    shape = shape_from_dict(data)
    try:
        moe_layers = {int(k): int(v) for k, v in moe_layers_doc.items()}
    except (ValueError, AttributeError) as exc:
        raise InvalidConfig(f"malformed moe_layers map: {exc}") from exc
    return shape, moe_layers


def write_weights(container: WeightContainer, destination) -> int:
    """Serialize a validated container; returns the number of bytes emitted."""
    validate_container(container)
    config = json.dumps(_container_doc(container), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    stream, owned = _as_sink(destination)
    try:
        n = _write(stream, WEIGHTS_MAGIC)
        n += _write(stream, struct.pack("<II", FORMAT_VERSION, len(config)))
        n += _write(stream, config)
        for name, tensor in container.tensors.items():
            encoded = name.encode("utf-8")
            n += _write(stream, struct.pack("<I", len(encoded)))
            n += _write(stream, encoded)
            n += _write(stream, struct.pack("<I", tensor.ndim))
            n += _write(stream, struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            n += _write(stream, np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return n
    finally:
        if owned:
            stream.close()


def read_weights(source) -> WeightContainer:
    """Deserialize and re-validate a weight container."""
    stream, owned = _as_source(source)
    try:
        _check_header(stream, WEIGHTS_MAGIC)
        config_len = _read_u32(stream, "config length")
        raw_config = _read_exact(stream, config_len, "config document")
        try:
            doc = json.loads(raw_config.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TruncatedPayload(f"config document is unreadable: {exc}") from exc
        shape, moe_layers = _container_meta(doc)

        tensors: dict[str, np.ndarray] = {}
        while True:
            head = stream.read(4)
            if head is None or len(head) == 0:
                break
            if len(head) < 4:
                raise TruncatedPayload("dangling bytes where a name length was expected")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(stream, name_len, "tensor name").decode("utf-8")
            ndim = _read_u32(stream, f"ndim of {name!r}")
            if ndim < 1 or ndim > 8:
                raise TruncatedPayload(f"implausible ndim {ndim} for tensor {name!r}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, f"dims of {name!r}"))
            count = int(np.prod(dims, dtype=np.int64))
            raw = _read_exact(stream, 4 * count, f"data of {name!r}")
            if name in tensors:
                raise DimensionMismatch(f"duplicate tensor {name!r} in stream")
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        return validate_container(WeightContainer(shape=shape, tensors=tensors,
                                                  moe_layers=moe_layers))
    finally:
        if owned:
            stream.close()
