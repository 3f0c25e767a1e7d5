import numpy as np

from sriqa import selfcheck, tensor


def by_name(results):
    return {r.name: r for r in results}


class TestSuites:
    def test_oracle_suite_passes(self):
        results = selfcheck.run_oracle_suite(seed=0)
        assert results and all(r.ok for r in results), by_name(results)

    def test_gradient_suite_passes(self):
        results = selfcheck.run_gradient_suite(seed=0)
        assert results and all(r.ok for r in results), by_name(results)

    def test_selftest_combines_both(self):
        combined = selfcheck.run_selftest(seed=0)
        names = {r.name for r in combined}
        assert "conv_forward_matches_loop" in names
        assert "grad_full_model_reduced_reference" in names
        only_oracles = selfcheck.run_selftest(seed=0, include_gradients=False)
        assert not any(r.name.startswith("grad_") for r in only_oracles)

    def test_detects_broken_conv(self, monkeypatch):
        real = tensor.conv3x3_forward

        def skewed(x, w, b):
            return real(x, w, b) + 1e-6

        monkeypatch.setattr(tensor, "conv3x3_forward", skewed)
        results = by_name(selfcheck.run_oracle_suite(seed=0))
        assert not results["conv_forward_matches_loop"].ok

    def test_detects_broken_pool_routing(self, monkeypatch):
        real = tensor.maxpool2_backward

        def doubled(cache, grad_out):
            return 2.0 * real(cache, grad_out)

        monkeypatch.setattr(tensor, "maxpool2_backward", doubled)
        results = by_name(selfcheck.run_oracle_suite(seed=0))
        assert not results["pool_gradient_tie_routing"].ok


class TestFormatting:
    def test_lines_and_tail(self):
        results = [
            selfcheck.CheckResult("alpha", True, "fine"),
            selfcheck.CheckResult("beta", False, "off by 1"),
        ]
        lines = selfcheck.format_results(results)
        assert lines[0] == "[ok  ] alpha: fine"
        assert lines[1] == "[FAIL] beta: off by 1"
        assert lines[-1] == "1/2 checks passed"


class TestLoopOracles:
    """The references themselves get one sanity pin each, on values
    computed by hand, so a bug cannot hide in both routes at once."""

    def test_conv_loop_hand_value(self):
        x = np.zeros((1, 3, 3, 1))
        x[0, 1, 1, 0] = 2.0
        w = np.zeros((3, 3, 1, 1))
        w[0, 0, 0, 0] = 5.0  # top-left tap reads one pixel up-left
        b = np.array([1.0])
        out = selfcheck._conv_loop(x, w, b)
        assert out[0, 2, 2, 0] == 11.0
        assert out[0, 1, 1, 0] == 1.0

    def test_kendall_loop_hand_value(self):
        # 1 concordant, 1 discordant, 1 x-tie over n=3
        x = [1.0, 1.0, 2.0]
        y = [1.0, 2.0, 3.0]
        got = selfcheck._kendall_loop(x, y)
        assert abs(got - 2.0 / np.sqrt(6.0)) < 1e-15

    def test_ranks_loop(self):
        assert selfcheck._ranks_loop([10.0, 30.0, 20.0, 30.0]) == [1.0, 3.5, 2.0, 3.5]

    def test_adam_scalar_first_step(self):
        theta, m, v = selfcheck._adam_scalar(0.0, 4.0, 0.0, 0.0, 0,
                                             1e-4, 0.9, 0.999, 1e-8)
        assert abs(theta + 1e-4 * 4.0 / (4.0 + 1e-8)) < 1e-18
        assert abs(m - 0.4) < 1e-15 and abs(v - 0.016) < 1e-15
