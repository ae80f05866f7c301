"""Kernel correctness: numba and numpy twins against brute-force oracles."""

import numpy as np
import pytest

from hyperadapt import kernels

from oracles import best_path_durations, enumerate_paths_logsumexp, random_grids


class TestForwardSum:
    def test_matches_path_enumeration(self):
        checked = 0
        for logp in random_grids(120, seed=11):
            loss, grad = kernels.forward_sum(logp)
            want_loss, post = enumerate_paths_logsumexp(logp)
            assert loss == pytest.approx(want_loss, abs=1e-9)
            np.testing.assert_allclose(grad, -post, atol=1e-9)
            checked += 1
        assert checked == 120

    def test_gradient_columns_sum_to_minus_one(self):
        for logp in random_grids(20, seed=5):
            _, grad = kernels.forward_sum(logp)
            np.testing.assert_allclose(grad.sum(axis=0), -1.0, atol=1e-9)

    def test_single_phoneme(self):
        logp = np.log(np.full((1, 4), 0.25))
        loss, grad = kernels.forward_sum(logp)
        assert loss == pytest.approx(4 * np.log(4.0), abs=1e-12)
        np.testing.assert_allclose(grad, -1.0, atol=1e-12)

    def test_square_grid_has_single_path(self):
        logp = np.log(np.random.default_rng(3).dirichlet(np.ones(5), size=5).T + 1e-9)
        loss, grad = kernels.forward_sum(logp)
        # n == m forces the diagonal path
        assert loss == pytest.approx(-np.trace(logp), abs=1e-9)
        np.testing.assert_allclose(np.diag(grad), -1.0, atol=1e-9)

    def test_backend_twins_agree(self):
        for logp in random_grids(30, seed=7):
            loss_np, grad_np = kernels.forward_sum_np(logp)
            loss_active, grad_active = kernels.forward_sum(logp)
            assert loss_np == pytest.approx(loss_active, abs=1e-10)
            np.testing.assert_allclose(grad_np, grad_active, atol=1e-10)


class TestViterbi:
    def test_matches_enumeration(self):
        for logp in random_grids(120, seed=23):
            durs = kernels.viterbi(logp)
            want = best_path_durations(logp)
            np.testing.assert_array_equal(durs, want)

    def test_durations_partition_frames(self):
        for logp in random_grids(40, seed=29):
            durs = kernels.viterbi(logp)
            assert durs.sum() == logp.shape[1]
            assert durs.min() >= 1

    def test_backend_twins_agree(self):
        for logp in random_grids(30, seed=31):
            np.testing.assert_array_equal(kernels.viterbi_np(logp), kernels.viterbi(logp))


class TestConv1d:
    def _oracle(self, xp, w):
        t = xp.shape[0] - w.shape[0] + 1
        k, cin, cout = w.shape
        out = np.zeros((t, cout), dtype=xp.dtype)
        for i in range(t):
            for dk in range(k):
                out[i] += xp[i + dk] @ w[dk]
        return out

    def test_forward_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            k = int(rng.choice([1, 3, 5, 9]))
            cin = int(rng.integers(1, 6))
            cout = int(rng.integers(1, 6))
            t = int(rng.integers(1, 12))
            xp = rng.standard_normal((t + k - 1, cin))
            w = rng.standard_normal((k, cin, cout))
            np.testing.assert_allclose(kernels.conv1d_forward(xp, w), self._oracle(xp, w), atol=1e-12)

    def test_backward_twins_agree(self):
        rng = np.random.default_rng(4)
        for dtype in (np.float32, np.float64):
            xp = rng.standard_normal((20, 3)).astype(dtype)
            w = rng.standard_normal((9, 3, 5)).astype(dtype)
            g = rng.standard_normal((12, 5)).astype(dtype)
            gx_np, gw_np = kernels.conv1d_backward_np(xp, w, g)
            gx, gw = kernels.conv1d_backward(xp, w, g)
            tol = 1e-5 if dtype == np.float32 else 1e-12
            np.testing.assert_allclose(gx, gx_np, atol=tol)
            np.testing.assert_allclose(gw, gw_np, atol=tol)


class TestDtw:
    def test_identical_sequences_walk_diagonal(self):
        cost = np.abs(np.arange(6)[:, None] - np.arange(6)[None, :]).astype(np.float64)
        path = kernels.dtw_path(cost)
        np.testing.assert_array_equal(path, np.stack([np.arange(6), np.arange(6)], axis=1))

    def test_path_is_monotonic_and_complete(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            cost = rng.random((int(rng.integers(2, 15)), int(rng.integers(2, 15))))
            path = kernels.dtw_path(cost)
            assert tuple(path[0]) == (0, 0)
            assert tuple(path[-1]) == (cost.shape[0] - 1, cost.shape[1] - 1)
            steps = np.diff(path, axis=0)
            assert set(map(tuple, steps)) <= {(1, 0), (0, 1), (1, 1)}

    def test_total_cost_matches_dp_table(self):
        rng = np.random.default_rng(13)
        cost = rng.random((8, 11))
        acc = np.full((8, 11), np.inf)
        acc[0, 0] = cost[0, 0]
        for i in range(8):
            for j in range(11):
                if i == 0 and j == 0:
                    continue
                prev = min(
                    acc[i - 1, j] if i else np.inf,
                    acc[i, j - 1] if j else np.inf,
                    acc[i - 1, j - 1] if i and j else np.inf,
                )
                acc[i, j] = cost[i, j] + prev
        path = kernels.dtw_path(cost)
        assert cost[path[:, 0], path[:, 1]].sum() == pytest.approx(acc[-1, -1], abs=1e-12)


def test_backend_report():
    assert kernels.ACTIVE_BACKEND in ("numba", "numpy")
