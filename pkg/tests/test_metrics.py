import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csident.metrics import (
    DegenerateTargetError,
    IdentReport,
    binarize_support,
    mcc_linear,
    nonlinear_r2,
    report_from_latents,
    support_f1,
    write_report_csv,
)
from csident.synthgen import ProcessConfig, build_process, sample_all_domains


@pytest.fixture(scope="module")
def gauss():
    return np.random.default_rng(7).normal(size=(1000, 3))


class TestNonlinearR2:
    def test_identity(self, gauss):
        assert nonlinear_r2(gauss, gauss) >= 0.99

    def test_independent(self, gauss):
        other = np.random.default_rng(8).normal(size=(1000, 2))
        assert nonlinear_r2(gauss, other) <= 0.05

    def test_tanh_of_inputs(self, gauss):
        assert nonlinear_r2(gauss, np.tanh(gauss)) >= 0.95

    def test_affine_invariance(self, gauss, rng):
        y = np.sin(gauss[:, :2]) + gauss[:, 2:] ** 2
        a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        base = nonlinear_r2(gauss, y)
        assert abs(nonlinear_r2(gauss @ a + rng.normal(size=3), y) - base) <= 0.02
        assert abs(nonlinear_r2(gauss[:, [2, 0, 1]], y) - base) <= 0.02

    def test_target_scale_invariance(self, gauss):
        y = np.sin(gauss[:, :2])
        assert nonlinear_r2(gauss, 50 * y - 3) == pytest.approx(nonlinear_r2(gauss, y), abs=1e-9)

    def test_degenerate_target(self, gauss):
        y = np.column_stack([gauss[:, 0], np.full(1000, 2.0)])
        with pytest.raises(DegenerateTargetError):
            nonlinear_r2(gauss, y)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            nonlinear_r2(np.zeros((20, 1)), np.arange(20.0))

    def test_deterministic(self, gauss):
        y = gauss[:, 0] ** 2
        assert nonlinear_r2(gauss, y, seed=3) == nonlinear_r2(gauss, y, seed=3)


class TestMCC:
    def test_permuted_scaled(self, gauss):
        assert mcc_linear(-2 * gauss[:, [1, 2, 0]], gauss) == pytest.approx(1.0)

    def test_independent_low(self, gauss):
        assert mcc_linear(np.random.default_rng(1).normal(size=(1000, 3)), gauss) < 0.15


class TestSupport:
    def test_binarize_relative_threshold(self):
        m = np.array([[1.0, 0.0], [0.05, 2.0], [0.2, 0.1]])
        assert binarize_support(m).tolist() == [[True, False], [False, True], [True, False]]

    def test_f1_perfect_up_to_block_permutation(self):
        true = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 0]], bool)
        est = true[:, [1, 0, 2]]
        assert support_f1(est, true, d_c=2) == 1.0

    def test_f1_cross_block_not_permuted(self):
        true = np.array([[1, 0, 0], [1, 1, 1], [0, 1, 0]], bool)
        est = true[:, [2, 1, 0]]
        assert support_f1(est, true, d_c=2) < 1.0

    def test_f1_hand_value(self):
        true = np.array([[1, 0], [1, 1], [0, 1]], bool)
        est = np.array([[1, 0], [0, 1], [1, 1]], bool)
        # tp=3, est=4, true=4 -> F1 = 0.75
        assert support_f1(est, true, d_c=1) == pytest.approx(0.75)

    def test_empty_estimate_scores_zero(self):
        true = np.eye(3, dtype=bool)
        assert support_f1(np.zeros((3, 3), bool), true, 1) == 0.0
        with pytest.raises(ValueError):
            support_f1(true, np.zeros((3, 3), bool), 1)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30)
    def test_f1_bounds(self, seed):
        r = np.random.default_rng(seed)
        true = r.random((6, 4)) < 0.5
        true[0] = True
        est = r.random((6, 4)) < 0.5
        f = support_f1(est, true, 2)
        assert 0.0 <= f <= 1.0
        assert support_f1(true, true, 2) == 1.0


@pytest.fixture(scope="module")
def batch():
    proc = build_process(ProcessConfig(seed=0))
    return sample_all_domains(proc, 150, seed=3)


class TestReport:
    def test_ground_truth_latents(self, batch):
        rep = report_from_latents(batch.c, batch.s, batch.c, batch.s, 4)
        assert rep.r2_c_from_chat >= 0.95 and rep.r2_s_from_shat >= 0.95
        assert rep.leak_s_from_chat == pytest.approx(rep.baseline_leak_s_from_c)
        assert rep.excess_leak_s_from_chat == pytest.approx(0.0)
        assert rep.mcc_linear == pytest.approx(1.0)

    def test_shuffled_latents_at_floor(self, batch):
        r = np.random.default_rng(0)
        c_hat = batch.c[r.permutation(len(batch.c))]
        s_hat = batch.s[r.permutation(len(batch.s))]
        rep = report_from_latents(c_hat, s_hat, batch.c, batch.s, 4, with_mcc=False)
        assert rep.r2_c_from_chat <= 0.05 and rep.r2_s_from_shat <= 0.05
        assert rep.mcc_linear is None

    def test_serialization(self, tmp_path):
        rep = IdentReport(0.9, 0.8, 0.1, 0.2, 0.05, 0.1, support_f1=None, mcc_linear=0.7)
        rep.write_json(tmp_path / "r.json")
        write_report_csv(tmp_path / "r.csv", [rep.csv_row(name="a"), rep.csv_row(name="b")])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("name,r2_c_from_chat")
        assert len(lines) == 3 and ",," in lines[1]
        assert rep.excess_leak_s_from_chat == pytest.approx(0.1)
        with pytest.raises(ValueError):
            write_report_csv(tmp_path / "e.csv", [])
