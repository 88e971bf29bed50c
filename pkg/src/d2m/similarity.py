"""Inter-layer similarity statistics: sequence-averaged cosine similarity of
layer outputs and MLP inputs, and the mean relative norm mismatch that guards
against scale shifts when distant MLPs are reused as experts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoFailure, ZeroVector
from .traceio import ActivationTrace


@dataclass(frozen=True)
class SimilarityMatrices:
    """L x L statistics over all layer pairs.

    Cosine matrices are symmetric; ``delta_norm[i, j]`` always places the
    later of the two layers in the denominator, so it too is stored
    symmetrically. Row/column ``i`` (0-based) refers to layer ``i + 1``.
    """

    s_out: np.ndarray
    s_mlp: np.ndarray
    delta_norm: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.s_out.shape[0]


def _row_norms(mat: np.ndarray, label: str) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ZeroVector(f"{label} has zero-norm token row at index {int(zero[0])}")
    return norms


def seq_avg_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over tokens of the cosine similarity between paired rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ZeroVector(f"inputs must share a T x d shape, got {a.shape} and {b.shape}")
    na = _row_norms(a, "first argument")
    nb = _row_norms(b, "second argument")
    cos = np.einsum("td,td->t", a, b) / (na * nb)
    return float(np.mean(np.clip(cos, -1.0, 1.0)))


def norm_mismatch(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over tokens of |norm(a_t) - norm(b_t)| / norm(b_t).

    Deliberately asymmetric: the second argument is the denominator.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ZeroVector(f"inputs must share a T x d shape, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = _row_norms(b, "denominator argument")
    return float(np.mean(np.abs(na - nb) / nb))


def build_matrices(trace: ActivationTrace, jobs: int = 1) -> SimilarityMatrices:
    """Compute all pairwise statistics of a trace.

    Output cosine comes from the per-layer outputs, MLP cosine and the norm
    mismatch from the MLP-input states; the mismatch denominator for a pair
    is the later layer's per-token norm. ``jobs > 1`` computes the three
    matrices concurrently (the heavy einsums release the GIL).
    """
    num_layers = trace.num_layers
    seq_len = trace.seq_len

    def cosine_matrix(mats: tuple[np.ndarray, ...], label: str) -> np.ndarray:
        stack = np.stack(mats)
        norms = np.linalg.norm(stack, axis=2)
        for idx in range(num_layers):
            zero = np.nonzero(norms[idx] == 0.0)[0]
            if zero.size:
                raise ZeroVector(
                    f"{label} layer {idx + 1} has zero-norm token row at index {int(zero[0])}"
                )
        units = stack / norms[:, :, None]
        cos = np.einsum("itd,jtd->ij", units, units) / seq_len
        return np.clip(cos, -1.0, 1.0)

    def norm_matrix() -> np.ndarray:
        h_norms = np.linalg.norm(np.stack(trace.mlp_inputs), axis=2)
        # pairwise[i, j] averages |n_i - n_j| / n_j; keeping only i < j puts
        # the later layer in the denominator, then mirror for symmetric storage
        pairwise = np.mean(
            np.abs(h_norms[:, None, :] - h_norms[None, :, :]) / h_norms[None, :, :], axis=2
        )
        upper = np.triu(pairwise, k=1)
        return upper + upper.T

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=3) as pool:
            f_out = pool.submit(cosine_matrix, trace.layer_outputs, "layer_outputs")
            f_mlp = pool.submit(cosine_matrix, trace.mlp_inputs, "mlp_inputs")
            f_delta = pool.submit(norm_matrix)
            return SimilarityMatrices(s_out=f_out.result(), s_mlp=f_mlp.result(),
                                      delta_norm=f_delta.result())
    return SimilarityMatrices(s_out=cosine_matrix(trace.layer_outputs, "layer_outputs"),
                              s_mlp=cosine_matrix(trace.mlp_inputs, "mlp_inputs"),
                              delta_norm=norm_matrix())


def _write_matrix_csv(matrix: np.ndarray, path: Path) -> None:
    num_layers = matrix.shape[0]
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["layer"] + [str(i) for i in range(1, num_layers + 1)])
            for i in range(num_layers):
                writer.writerow([str(i + 1)] + [f"{v:.8e}" for v in matrix[i]])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def export_heatmap(matrices: SimilarityMatrices, out_dir: str | Path) -> dict[str, Path]:
    """Write s_out.csv, s_mlp.csv, and delta_norm.csv (9 significant digits)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    paths = {
        "s_out": out / "s_out.csv",
        "s_mlp": out / "s_mlp.csv",
        "delta_norm": out / "delta_norm.csv",
    }
    _write_matrix_csv(matrices.s_out, paths["s_out"])
    _write_matrix_csv(matrices.s_mlp, paths["s_mlp"])
    _write_matrix_csv(matrices.delta_norm, paths["delta_norm"])
    return paths


# Binary cache so the search stage can re-load matrices at full precision:
# magic D2MS | version u32=1 | L u32 | s_out, s_mlp, delta_norm as L*L f64-LE.
CACHE_MAGIC = b"D2MS"


def write_matrices(matrices: SimilarityMatrices, path: str | Path) -> None:
    import struct

    num_layers = matrices.num_layers
    try:
        with open(path, "wb") as handle:
            handle.write(CACHE_MAGIC)
            handle.write(struct.pack("<II", 1, num_layers))
            for mat in (matrices.s_out, matrices.s_mlp, matrices.delta_norm):
                handle.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrices(path: str | Path) -> SimilarityMatrices:
    import struct

    from .errors import BadMagic, TruncatedPayload, VersionMismatch

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:4] != CACHE_MAGIC:
        raise BadMagic(f"expected magic {CACHE_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedPayload("matrices cache header incomplete")
    version, num_layers = struct.unpack("<II", raw[4:12])
    if version != 1:
        raise VersionMismatch(f"unsupported matrices cache version {version}")
    need = 12 + 3 * num_layers * num_layers * 8
    if len(raw) < need:
        raise TruncatedPayload(f"matrices cache needs {need} bytes, has {len(raw)}")
    mats = []
    offset = 12
    for _ in range(3):
        size = num_layers * num_layers * 8
        mats.append(
            np.frombuffer(raw[offset:offset + size], dtype="<f8")
            .astype(np.float64)
            .reshape(num_layers, num_layers)
        )
        offset += size
    return SimilarityMatrices(s_out=mats[0], s_mlp=mats[1], delta_norm=mats[2])
