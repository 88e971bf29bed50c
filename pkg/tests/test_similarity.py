"""Similarity statistics against a per-token double-loop oracle, plus the
exact identities (duplicates, scaling asymmetry, diagonals)."""

import math

import numpy as np
import pytest

from d2m.errors import ZeroVector
from d2m.similarity import (
    build_matrices,
    export_heatmap,
    norm_mismatch,
    read_matrices,
    seq_avg_cosine,
    write_matrices,
)
from d2m.traceio import make_trace, synth_trace


def oracle_cosine(a, b):
    """Straight per-token loop over the cosine definition."""
    total = 0.0
    for t in range(a.shape[0]):
        dot = sum(float(a[t, i]) * float(b[t, i]) for i in range(a.shape[1]))
        na = math.sqrt(sum(float(a[t, i]) ** 2 for i in range(a.shape[1])))
        nb = math.sqrt(sum(float(b[t, i]) ** 2 for i in range(b.shape[1])))
        total += dot / (na * nb)
    return total / a.shape[0]


def oracle_norm_mismatch(a, b):
    total = 0.0
    for t in range(a.shape[0]):
        na = math.sqrt(sum(float(a[t, i]) ** 2 for i in range(a.shape[1])))
        nb = math.sqrt(sum(float(b[t, i]) ** 2 for i in range(b.shape[1])))
        total += abs(na - nb) / nb
    return total / a.shape[0]


class TestSeqAvgCosine:
    def test_identical_inputs(self):
        a = np.random.default_rng(0).standard_normal((7, 5))
        assert seq_avg_cosine(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_and_identical_rows_average(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert seq_avg_cosine(a, b) == pytest.approx(0.5, abs=1e-12)

    def test_antiparallel(self):
        a = np.random.default_rng(1).standard_normal((4, 6))
        assert seq_avg_cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)

    def test_symmetry_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal((6, 4))
            b = rng.standard_normal((6, 4))
            scales = rng.uniform(0.1, 10.0, size=(6, 1))
            assert seq_avg_cosine(a, b) == pytest.approx(seq_avg_cosine(b, a), abs=1e-12)
            assert seq_avg_cosine(a * scales, b) == pytest.approx(
                seq_avg_cosine(a, b), abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 5))
        b = rng.standard_normal((8, 5))
        assert seq_avg_cosine(a, b) == pytest.approx(oracle_cosine(a, b), abs=1e-12)

    def test_zero_row_reports_token(self):
        a = np.ones((3, 2))
        a[1] = 0.0
        with pytest.raises(ZeroVector, match="index 1"):
            seq_avg_cosine(a, np.ones((3, 2)))


class TestNormMismatch:
    def test_equal_inputs(self):
        a = np.random.default_rng(4).standard_normal((5, 3))
        assert norm_mismatch(a, a) == 0.0

    def test_first_argument_doubled(self):
        b = np.random.default_rng(5).standard_normal((5, 3))
        assert norm_mismatch(2 * b, b) == pytest.approx(1.0, abs=1e-12)

    def test_denominator_asymmetry(self):
        a = np.random.default_rng(6).standard_normal((5, 3))
        assert norm_mismatch(a, 2 * a) == pytest.approx(0.5, abs=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 4))
        b = rng.standard_normal((6, 4))
        # a random orthogonal matrix preserves all row norms
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        assert norm_mismatch(a @ q, b @ q) == pytest.approx(norm_mismatch(a, b), abs=1e-10)

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((9, 4))
        b = rng.standard_normal((9, 4))
        assert norm_mismatch(a, b) == pytest.approx(oracle_norm_mismatch(a, b), abs=1e-12)


class TestBuildMatrices:
    def test_exact_duplicate_entries(self):
        trace = synth_trace(4, 8, 6, [(2, 1, 0.0)], seed=1)
        mats = build_matrices(trace)
        assert mats.s_out[1, 2] == pytest.approx(1.0, abs=1e-12)
        assert mats.s_mlp[1, 2] == pytest.approx(1.0, abs=1e-12)
        assert mats.delta_norm[1, 2] == 0.0

    def test_diagonals(self):
        mats = build_matrices(synth_trace(5, 6, 7, seed=2))
        for i in range(5):
            assert mats.s_out[i, i] == pytest.approx(1.0, abs=1e-12)
            assert mats.s_mlp[i, i] == pytest.approx(1.0, abs=1e-12)
            assert mats.delta_norm[i, i] == 0.0

    def test_value_ranges(self):
        mats = build_matrices(synth_trace(6, 5, 8, seed=3))
        assert np.all(mats.s_out <= 1.0) and np.all(mats.s_out >= -1.0)
        assert np.all(mats.s_mlp <= 1.0) and np.all(mats.s_mlp >= -1.0)
        assert np.all(mats.delta_norm >= 0.0)

    def test_matches_double_loop_oracle(self):
        trace = synth_trace(3, 4, 8, seed=11)
        mats = build_matrices(trace)
        num_layers = trace.num_layers
        for i in range(num_layers):
            for j in range(num_layers):
                if i == j:
                    continue
                lo, hi = min(i, j), max(i, j)
                assert mats.s_out[i, j] == pytest.approx(
                    oracle_cosine(trace.layer_outputs[i], trace.layer_outputs[j]), abs=1e-9)
                assert mats.s_mlp[i, j] == pytest.approx(
                    oracle_cosine(trace.mlp_inputs[i], trace.mlp_inputs[j]), abs=1e-9)
                # the later layer is always the denominator
                assert mats.delta_norm[i, j] == pytest.approx(
                    oracle_norm_mismatch(trace.mlp_inputs[lo], trace.mlp_inputs[hi]), abs=1e-9)

    def test_oracle_agreement_on_many_random_traces(self):
        rng = np.random.default_rng(12)
        for trial in range(50):
            num_layers = int(rng.integers(2, 5))
            seq_len = int(rng.integers(2, 6))
            hidden = int(rng.integers(2, 7))
            trace = synth_trace(num_layers, seq_len, hidden, seed=1000 + trial)
            mats = build_matrices(trace)
            i, j = sorted(rng.choice(num_layers, size=2, replace=False))
            assert mats.s_out[i, j] == pytest.approx(
                oracle_cosine(trace.layer_outputs[i], trace.layer_outputs[j]), abs=1e-9)
            assert mats.delta_norm[i, j] == pytest.approx(
                oracle_norm_mismatch(trace.mlp_inputs[i], trace.mlp_inputs[j]), abs=1e-9)

    def test_zero_token_aborts(self):
        h = [np.ones((3, 2)), np.ones((3, 2))]
        y = [np.ones((3, 2)), np.ones((3, 2))]
        h[1][2] = 0.0
        with pytest.raises(ZeroVector):
            build_matrices(make_trace(h, y))

    def test_parallel_jobs_match_serial(self):
        trace = synth_trace(6, 16, 8, [(2, 1, 0.05)], seed=17)
        serial = build_matrices(trace)
        parallel = build_matrices(trace, jobs=3)
        assert np.array_equal(serial.s_out, parallel.s_out)
        assert np.array_equal(serial.s_mlp, parallel.s_mlp)
        assert np.array_equal(serial.delta_norm, parallel.delta_norm)


class TestHeatmapExport:
    def test_three_files_with_headers(self, tmp_path):
        mats = build_matrices(synth_trace(2, 3, 4, seed=4))
        paths = export_heatmap(mats, tmp_path)
        assert sorted(p.name for p in paths.values()) == [
            "delta_norm.csv", "s_mlp.csv", "s_out.csv"]
        lines = paths["s_out"].read_text().strip().splitlines()
        assert lines[0] == "layer,1,2"
        assert len(lines) == 3

    def test_round_trip_precision(self, tmp_path):
        mats = build_matrices(synth_trace(4, 5, 6, seed=5))
        paths = export_heatmap(mats, tmp_path)
        rows = [line.split(",")[1:] for line in
                paths["s_mlp"].read_text().strip().splitlines()[1:]]
        parsed = np.array([[float(v) for v in row] for row in rows])
        assert np.allclose(parsed, mats.s_mlp, atol=1e-8)

    def test_binary_cache_round_trip(self, tmp_path):
        mats = build_matrices(synth_trace(3, 4, 5, seed=6))
        path = tmp_path / "matrices.d2ms"
        write_matrices(mats, path)
        back = read_matrices(path)
        assert np.array_equal(back.s_out, mats.s_out)
        assert np.array_equal(back.s_mlp, mats.s_mlp)
        assert np.array_equal(back.delta_norm, mats.delta_norm)
