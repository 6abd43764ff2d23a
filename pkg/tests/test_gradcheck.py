"""
梯度检查的测试：逐算子有限差分、完整流程抽查与故意出错的梯度会被发现。
"""

import numpy as np
import pytest

from sceneslots_core.gradcheck import (
    OP_CASES, TOLERANCE, GradCheckReport, OpCase, check_entries, check_op, pipeline_suite, relative_error,
    run_gradcheck, tensor_suite,
)
from sceneslots_core.tensor import Function, precision


class WrongSquare(Function):
    """前向 x²，反向故意返回 x 而不是 2x。"""

    name = "wrong_square"

    def forward(self, a):
        return a * a

    def backward(self, grad):
        return (grad * self.inputs[0],)


class TestRelativeError:
    def test_floor_for_small_gradients(self):
        assert relative_error(np.array(1e-10), np.array(2e-10)) < TOLERANCE
        assert relative_error(np.array(1.0), np.array(1.1)) == pytest.approx(0.1 / 1.1)

    def test_check_entries_exact_quadratic(self):
        x = np.array([0.3, -1.2])
        result = check_entries("quadratic", 0, lambda: float(np.sum(x ** 2)), [x], [2 * x])
        assert result.passed and result.checked == 2


class TestTensorSuite:
    """每个算子 2 次试验。"""

    @pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.name)
    def test_operator(self, case):
        with precision("float64"):
            for trial in range(2):
                result = check_op(case, trial)
                assert result.passed, f"{case.name}: {result.max_error:.3e}"

    def test_detects_wrong_backward(self):
        case = OpCase("wrong_square", lambda g: [g.uniform(0.5, 1.0, size=(4,))], lambda x: WrongSquare.apply(x[0]))
        report = tensor_suite(trials=1, cases=[case])
        assert not report.passed
        assert report.failures[0].name == "wrong_square"

    def test_report_summary(self):
        report = tensor_suite(trials=2, cases=OP_CASES[:2])
        summary = report.summary()
        assert set(summary) == {OP_CASES[0].name, OP_CASES[1].name}
        assert all(row["trials"] == 2 and row["failures"] == 0 for row in summary.values())


class TestPipelineSuite:
    def test_pipeline_gradients(self):
        report = pipeline_suite(trials=2)
        assert len(report.results) == 2
        assert report.passed, report.summary()
        assert all(r.checked > 0 for r in report.results)

    def test_unknown_module(self):
        with pytest.raises(ValueError):
            run_gradcheck("renderer")

    def test_empty_report_passes(self):
        assert GradCheckReport().passed
