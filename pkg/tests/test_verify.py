import numpy as np
import pytest

from repcnld.verify import gradient_check, strong_error_check, swap_check


class TestSwapCheck:
    def test_passes_at_fixed_seed(self):
        out = swap_check(n_draws=50_000, seed=3)
        assert out["ok"]
        assert out["admissibility_bound"] == pytest.approx(0.5541871921182266, rel=1e-12)

    def test_correction_factor_direction(self):
        # The uncorrected statistic over-estimates under the forward-error
        # model, so the target ratio exceeds one.
        out = swap_check(n_draws=20_000, seed=5)
        assert out["target_ratio"] > 1.0


class TestStrongErrorCheck:
    def test_machinery_small(self):
        out = strong_error_check(deltas=[2.0 ** -4, 2.0 ** -6], n_paths=40, seed=4)
        mse = out["mse"]
        assert all(v > 0 for v in mse)
        assert mse[0] > mse[1]

    def test_reproducible(self):
        a = strong_error_check(deltas=[2.0 ** -5], n_paths=30, seed=9)
        b = strong_error_check(deltas=[2.0 ** -5], n_paths=30, seed=9)
        assert a["mse"] == b["mse"]


class TestGradientCheckHarness:
    def test_center_small_mesh(self):
        results = gradient_check(draws=3, tol=1e-4, seed=2, problems=("center",),
                                 center_mesh=16)
        assert len(results) == 1
        assert results[0].ok
        assert "center" in results[0].name
