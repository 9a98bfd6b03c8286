import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.certificates import (CertificateReport, comparison_solution, convergence_bound, convergence_time,
                               detect_trap, fit_error_envelope, lyapunov_value, posterior_contraction_slope,
                               reach_times, verify_invariance)
from core.errors import ValidationError
from core.integrators import CorrectionTrace, Snapshot, run_correction, run_filtered_flow
from core.safety_filter import BarrierSpec, CbfParams, SafetyFilter
from core.trajectory import Path, make_rng, uniform_grid
from core.vector_fields import CallableField, GmmMarginalField, GmmTarget, OtConditionalField
from tests.helpers import straight_line


class TestLyapunov:

    @pytest.mark.parametrize('b, expected', [(0.01, 0.0), (0.01 - 0.3, 0.3), (5.01, 0.0)])
    def test_values(self, b, expected):
        assert lyapunov_value(b, 0.01) == pytest.approx(expected)

    def test_elementwise(self):
        assert_allclose(lyapunov_value(np.array([0.0, 1.0]), 0.5), [0.5, 0.0])


class TestComparisonSolution:

    def test_zero_start_stays_zero(self):
        assert all(comparison_solution(0.0, 1.0, 0.5, 0.0, t) == 0.0 for t in (0.0, 0.5, 3.0))

    def test_extinction_time(self):
        assert comparison_solution(1.0, 1.0, 0.5, 0.0, 2.0) == 0.0
        assert comparison_solution(1.0, 1.0, 0.5, 0.0, 1.0) == pytest.approx(0.25)

    def test_non_increasing_and_hits_zero_on_time(self):
        V0, eps, rho, t_w = 0.7, 3.0, 0.4, 0.2
        times = np.linspace(t_w, 2.0, 400)
        values = np.array([comparison_solution(V0, eps, rho, t_w, t) for t in times])
        assert np.all(np.diff(values) <= 0)
        extinction = t_w + V0 ** (1 - rho) / ((1 - rho) * eps)
        assert comparison_solution(V0, eps, rho, t_w, extinction) == pytest.approx(0.0, abs=1e-12)
        assert comparison_solution(V0, eps, rho, t_w, extinction - 1e-3) > 0

    @pytest.mark.parametrize('rho', [0.0, 1.0, 1.5])
    def test_rho_outside_unit_interval(self, rho):
        with pytest.raises(ValidationError):
            comparison_solution(1.0, 1.0, rho, 0.0, 1.0)

    def test_before_t_w_rejected(self):
        with pytest.raises(ValidationError):
            comparison_solution(1.0, 1.0, 0.5, 0.5, 0.1)


class TestConvergenceBound:

    def test_already_safe(self):
        params = CbfParams(t_w=0.3)
        assert convergence_bound(params.delta + 1.0, params) == 0.3

    def test_quarter_violation(self):
        params = CbfParams(epsilon=1.0, rho=0.5, t_w=0.0)
        assert convergence_bound(params.delta - 0.25, params) == pytest.approx(1.0)

    def test_unit_violation(self):
        params = CbfParams(epsilon=10.0, rho=0.5, t_w=0.5)
        assert convergence_bound(params.delta - 1.0, params) == pytest.approx(0.7)


def hand_trace(values, times):
    """A one-waypoint trace with prescribed barrier values."""
    snapshots = []
    for t, b in zip(times, values):
        snapshots.append(Snapshot(t=float(t), path=Path(np.zeros((2, 2))), barrier=np.array([[b, 1.0]]),
                                  slack=np.zeros(2), multipliers=np.zeros((1, 2)), degenerate=np.zeros(2, bool)))
    return CorrectionTrace(snapshots=snapshots, barrier_names=('BS1',))


class TestVerifyInvariance:

    def test_dip_after_reach_is_reported(self):
        params = CbfParams()
        times = uniform_grid(10).times
        values = [0.5] * 11
        values[8] = -0.2
        report = verify_invariance(hand_trace(values, times), params, tol=1e-3)
        assert not report.passed
        dips = [v for v in report.violations if v.check == 'invariance']
        assert dips[0].snapshot == 8
        assert dips[0].waypoint == 0
        assert dips[0].margin == pytest.approx(params.delta - 1e-3 + 0.2)

    def test_never_reaching_is_reported(self):
        params = CbfParams()
        times = uniform_grid(10).times
        report = verify_invariance(hand_trace([-0.5] * 11, times), params, tol=1e-3)
        assert any(v.check == 'reach' for v in report.violations)
        assert report.waypoints[0].reach_time is None

    def test_monotone_in_tolerance(self):
        params = CbfParams()
        times = uniform_grid(10).times
        values = [0.5] * 11
        values[9] = params.delta - 0.05
        trace = hand_trace(values, times)
        assert not verify_invariance(trace, params, tol=0.01).passed
        assert verify_invariance(trace, params, tol=0.06).passed
        assert verify_invariance(trace, params, tol=1.0).passed

    def test_recorded_values_are_checked_against_positions(self):
        disc = BarrierSpec('ellipse', center=(10.0, 10.0), name='disc')
        trace = run_filtered_flow(OtConditionalField(Path(np.ones((2, 3)))), uniform_grid(8), Path(np.zeros((2, 3))),
                                  SafetyFilter([disc]))
        assert verify_invariance(trace, CbfParams(), [disc]).passed
        trace.snapshots[6].barrier[0, 1] -= 0.5
        report = verify_invariance(trace, CbfParams(), [disc])
        assert [v.check for v in report.violations] == ['consistency']

    def test_unsafe_run_through_an_obstacle_fails(self):
        disc = BarrierSpec('ellipse', center=(0.0, 0.0), axes=(1.0, 1.0), name='disc')
        target = Path(np.array([[0.0, 0.0], [0.0, 0.2]]))
        start = Path(np.array([[0.0, 0.0], [1.5, 1.7]]))
        trace = run_correction(OtConditionalField(target), 3.0, 64, start, barriers=[disc])
        report = verify_invariance(trace, CbfParams(), [disc])
        assert not report.passed
        assert {v.check for v in report.violations} <= {'reach', 'reach_time', 'invariance', 'comparison'}

    def test_report_round_trip(self):
        times = uniform_grid(4).times
        report = verify_invariance(hand_trace([0.5, 0.5, -1.0, 0.5, 0.5], times), CbfParams(), tol=0.0)
        restored = CertificateReport.from_dict(report.to_dict())
        assert restored.to_dict() == report.to_dict()
        assert not restored.passed


class TestFiniteTimeConvergence:

    def test_constructed_violations_meet_the_bound(self):
        """Waypoints started inside an obstacle reach b >= delta before the bound plus one step."""
        params = CbfParams(t_w=0.0)
        disc = BarrierSpec('ellipse', center=(0.0, 0.0), axes=(1.0, 1.0), name='disc')
        T = 256
        rng = make_rng(42)
        freeze = CallableField(lambda x, t: np.zeros_like(x))
        for _ in range(50):
            b0 = rng.uniform(params.delta - 1.0 + 1e-3, params.delta)
            radius = np.sqrt(b0 + 1.0)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            start = Path(np.array([[radius * np.cos(angle)], [radius * np.sin(angle)]]))
            trace = run_filtered_flow(freeze, uniform_grid(T), start, SafetyFilter([disc], params))
            report = verify_invariance(trace, params, [disc])
            assert report.passed, report.violations[:3]
            cert = report.waypoints[0]
            assert cert.reach_time is not None
            assert cert.reach_time <= params.t_w + (params.delta - b0) ** (1 - params.rho) / (
                params.epsilon * (1 - params.rho)) + 1.0 / T
            V0 = params.delta - trace.snapshots[0].barrier[0, 0]
            for snap in trace.snapshots:
                V = max(params.delta - snap.barrier[0, 0], 0.0)
                phi = comparison_solution(V0, params.epsilon, params.rho, 0.0, snap.t)
                assert V <= phi + report.tol_disc


class TestDetectTrap:

    def test_uniform_line_has_no_trap(self):
        path = Path(straight_line([0.0, 0.0], [3.1, 0.0], 31))
        assert detect_trap(path, 0.2) == (False, ())

    def test_displaced_waypoint(self):
        data = straight_line([0.0, 0.0], [3.1, 0.0], 31)
        data[1, 10] += 0.3
        flag, indices = detect_trap(Path(data), 0.2)
        assert flag
        assert indices == (10, 11)

    def test_translation_invariant(self):
        data = straight_line([0.0, 0.0], [3.1, 0.0], 31)
        data[0, 20] += 0.5
        shifted = data + np.array([[7.0], [-4.0]])
        assert detect_trap(Path(data), 0.2) == detect_trap(Path(shifted), 0.2)

    def test_boundary_requirement(self):
        data = straight_line([0.0, 0.0], [3.1, 0.0], 31)
        data[1, 10] += 0.3
        barrier = np.ones((1, 32))
        assert detect_trap(Path(data), 0.2, barrier, require_boundary=True) == (False, ())
        barrier[0, 11] = 0.0
        assert detect_trap(Path(data), 0.2, barrier, require_boundary=True) == (True, (11,))

    def test_boundary_requirement_needs_values(self):
        with pytest.raises(ValidationError):
            detect_trap(Path(np.zeros((2, 3))), 0.2, require_boundary=True)

    def test_single_waypoint_rejected(self):
        with pytest.raises(ValidationError):
            detect_trap(Path(np.zeros((2, 1))), 0.2)


class TestConvergenceTime:

    def test_reach_times(self):
        times = uniform_grid(10).times
        trace = hand_trace([-1.0] * 6 + [0.5] * 5, times)
        assert_allclose(reach_times(trace, CbfParams()), [[0.6, 0.5]])
        assert convergence_time(trace, CbfParams()) == pytest.approx(0.6)

    def test_never_reached_is_nan(self):
        trace = hand_trace([-1.0] * 11, uniform_grid(10).times)
        assert np.isnan(convergence_time(trace, CbfParams()))


class TestEnvelope:

    def test_recovers_constants(self):
        times = np.linspace(0.0, 1.0, 50)
        errors = 0.8 * np.exp(-2.0 * times) + 0.3 * (1.0 - times) ** 2
        fit = fit_error_envelope(times, errors, 2.0)
        assert fit.C1 == pytest.approx(0.8, rel=1e-8)
        assert fit.C2 == pytest.approx(0.3, rel=1e-8)
        assert_allclose(fit.evaluate(times), errors, atol=1e-10)

    def test_point_mass_correction_fits_pure_decay(self):
        target = Path(make_rng(6).normal(size=(2, 4)))
        start = target + Path(np.ones((2, 4)))
        trace = run_correction(OtConditionalField(target), 2.0, 256, start)
        errors = [np.linalg.norm(p - target.data) for p in trace.paths()]
        fit = fit_error_envelope(trace.times, errors, 2.0)
        assert fit.C1 == pytest.approx(errors[0], rel=0.05)
        assert fit.C2 < 0.05 * fit.C1


def test_posterior_contraction_slope():
    """||E[tau_1 | tau_t] - mode|| shrinks linearly in (1 - t) near the end of the flow."""
    mode = straight_line([0.0, 0.0], [3.0, 3.0], 7)
    other = mode + 20.0
    gmm = GmmTarget(weights=np.array([0.5, 0.5]), means=np.array([mode, other]), stds=np.ones(2))
    start = Path(make_rng(0).normal(size=(2, 8)))
    slope = posterior_contraction_slope(GmmMarginalField(gmm), Path(mode), start, np.linspace(0.9, 0.999, 20))
    assert 0.9 <= slope <= 1.2
