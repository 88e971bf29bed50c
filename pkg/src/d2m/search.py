"""Greedy global search for redundant layer blocks, plus the threshold-to-depth
sweep used to pick a pruning depth.

A block (base l, size n) is valid when every offset k in 1..n clears the
cosine thresholds against the base and stays inside the norm tolerance; valid
blocks are scored, sorted, and accepted greedily so that no layer is claimed
twice (the base counts as claimed, so it can never double as another block's
redundant member). Ties are broken by smaller base, then smaller size, which
makes the result independent of enumeration order.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .config import FusionBlock, FusionPlan, SearchThresholds, validate_plan, validate_thresholds
from .errors import DepthUnreachable, IndexOutOfRange, IoFailure
from .similarity import SimilarityMatrices


@dataclass(frozen=True)
class CandidateBlock:
    """A scored valid block prior to greedy selection."""

    score: float
    base: int
    size: int


@dataclass(frozen=True)
class SweepCell:
    """One (delta, epsilon) grid cell of the threshold sweep."""

    cos_threshold: float
    norm_tolerance: float
    pruned_count: int
    plan: FusionPlan


def _check_block_range(matrices: SimilarityMatrices, base: int, size: int) -> None:
    if size < 1 or base < 1 or base + size > matrices.num_layers:
        raise IndexOutOfRange(
            f"block (base={base}, size={size}) does not fit in 1..{matrices.num_layers}"
        )


def is_valid_block(matrices: SimilarityMatrices, base: int, size: int,
                   cos_threshold: float, norm_tolerance: float) -> bool:
    """True iff every offset clears both cosine bars and the norm tolerance.

    All inequalities are strict, so a zero cosine threshold admits nothing.
    """
    _check_block_range(matrices, base, size)
    bar = 1.0 - cos_threshold
    i = base - 1
    for k in range(1, size + 1):
        j = base + k - 1
        if not (matrices.s_out[i, j] > bar and matrices.s_mlp[i, j] > bar
                and matrices.delta_norm[i, j] < norm_tolerance):
            return False
    return True


def block_score(matrices: SimilarityMatrices, base: int, size: int,
                score_penalty: float) -> float:
    """Mean over offsets of the two cosines' average minus the penalized norm gap."""
    _check_block_range(matrices, base, size)
    i = base - 1
    total = 0.0
    for k in range(1, size + 1):
        j = base + k - 1
        total += (matrices.s_out[i, j] + matrices.s_mlp[i, j]) / 2.0 \
            - score_penalty * matrices.delta_norm[i, j]
    return total / size


def _search_raw(matrices: SimilarityMatrices, cos_threshold: float,
                norm_tolerance: float, score_penalty: float,
                block_sizes: Sequence[int]) -> FusionPlan:
    num_layers = matrices.num_layers
    candidates: list[CandidateBlock] = []
    for base in range(1, num_layers + 1):
        for size in block_sizes:
            if base + size > num_layers:
                continue
            if is_valid_block(matrices, base, size, cos_threshold, norm_tolerance):
                candidates.append(
                    CandidateBlock(block_score(matrices, base, size, score_penalty), base, size)
                )
    candidates.sort(key=lambda c: (-c.score, c.base, c.size))

    occupied = [False] * (num_layers + 1)
    blocks: list[FusionBlock] = []
    prune: set[int] = set()
    for cand in candidates:
        span = range(cand.base, cand.base + cand.size + 1)
        if any(occupied[i] for i in span):
            continue
        redundant = tuple(range(cand.base + 1, cand.base + cand.size + 1))
        blocks.append(FusionBlock(base=cand.base, redundant=redundant))
        prune.update(redundant)
        for i in span:
            occupied[i] = True
    blocks.sort(key=lambda b: b.base)
    keep = tuple(i for i in range(1, num_layers + 1) if i not in prune)
    plan = FusionPlan(keep_layers=keep, prune_layers=frozenset(prune), blocks=tuple(blocks))
    return validate_plan(plan, num_layers)


def search(matrices: SimilarityMatrices, thresholds: SearchThresholds) -> FusionPlan:
    """Run the full greedy block search with validated thresholds."""
    validate_thresholds(thresholds)
    sizes = sorted(set(thresholds.block_sizes))
    return _search_raw(matrices, thresholds.cos_threshold, thresholds.norm_tolerance,
                       thresholds.score_penalty, sizes)


def threshold_sweep(matrices: SimilarityMatrices,
                    cos_grid: Sequence[float], norm_grid: Sequence[float],
                    score_penalty: float = 1.0,
                    block_sizes: Sequence[int] = (1, 2, 3),
                    jobs: int = 1) -> list[SweepCell]:
    """Run the search over the grid and record each cell's pruned-layer count.

    Grid values outside (0, 1) are legal here (a zero cosine threshold simply
    prunes nothing); cells are returned row-major in the given grid order.
    """
    if not len(cos_grid) or not len(norm_grid):
        raise IndexOutOfRange("sweep grids must be non-empty")
    sizes = sorted(set(block_sizes))
    points = [(d, e) for d in cos_grid for e in norm_grid]

    def run(point: tuple[float, float]) -> SweepCell:
        d, e = point
        plan = _search_raw(matrices, d, e, score_penalty, sizes)
        return SweepCell(d, e, len(plan.prune_layers), plan)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, points))
    return [run(p) for p in points]


def plan_from_depth(cells: Iterable[SweepCell], target_kept: int) -> tuple[float, float, FusionPlan]:
    """Pick the tightest sweep cell (smallest delta, then epsilon) whose plan
    keeps exactly ``target_kept`` layers."""
    best: SweepCell | None = None
    for cell in cells:
        kept = len(cell.plan.keep_layers)
        if kept != target_kept:
            continue
        if best is None or (cell.cos_threshold, cell.norm_tolerance) < (
                best.cos_threshold, best.norm_tolerance):
            best = cell
    if best is None:
        raise DepthUnreachable(f"no sweep cell keeps exactly {target_kept} layers")
    return best.cos_threshold, best.norm_tolerance, best.plan


def write_sweep_csv(cells: Sequence[SweepCell], path: str | Path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["delta", "epsilon", "pruned_count"])
            for cell in cells:
                writer.writerow([f"{cell.cos_threshold:.8e}", f"{cell.norm_tolerance:.8e}",
                                 str(cell.pruned_count)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
