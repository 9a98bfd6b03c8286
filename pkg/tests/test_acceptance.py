import numpy as np
import pytest

import config
from cli.harness import Harness
from core.certificates import verify_invariance
from core.environment import trap_threshold
from core.integrators import plan, run_correction
from core.safety_filter import BarrierSpec, CbfParams, SafetyFilter
from core.trajectory import Path, RunConfig, make_rng, spawn_rngs
from core.vector_fields import GmmMarginalField, MlpField, OtConditionalField, field_distance, sample_probes, train_field

pytestmark = pytest.mark.slow


def test_corridor_runs_stay_safe(corridor):
    params = CbfParams()
    for seed in range(100):
        run_config = RunConfig(seed=seed, T_pred=4)
        trace, record = plan(run_config, corridor)
        assert len(record.min_barrier) == len(corridor.barriers)
        for name, value in zip(record.barrier_names, record.min_barrier):
            assert value >= params.delta - 1e-6, f"seed {seed}, barrier {name}"
        report = verify_invariance(trace, run_config.cbf, corridor.barriers)
        assert report.passed, f"seed {seed}: {report.violations[:3]}"


def test_correction_never_traps_and_naive_filtering_does_not_do_better(corridor):
    rates = {}
    for method in ('safeflowmatcher', 'safe_fm_naive'):
        traps = [plan(RunConfig(seed=seed, T_pred=4, method=method), corridor)[1].trap for seed in range(50)]
        rates[method] = np.mean(traps)
    assert rates['safeflowmatcher'] == 0.0
    assert rates['safeflowmatcher'] <= rates['safe_fm_naive']


def test_cfm_training_approaches_the_mixture_field(corridor_surrogate):
    _, gmm = corridor_surrogate
    d, width = gmm.path_shape
    model_rng, probe_rng = spawn_rngs(0, 2)
    model = MlpField.for_paths(d, width - 1, config.HIDDEN_WIDTHS, model_rng)
    exact = GmmMarginalField(gmm)
    probes = sample_probes(gmm, 128, probe_rng)
    before = field_distance(model, exact, probes)
    history = train_field(model, gmm, 5000, config.BATCH_SIZE, config.LEARNING_RATE)
    after = field_distance(model, exact, probes)
    assert len(history) == 5000
    assert after < 0.25 * before
    assert np.mean([h.value for h in history[-200:]]) < np.mean([h.value for h in history[:200]])


def test_filter_holds_a_path_pressed_against_an_obstacle(corridor_surrogate):
    """The target runs straight through a disc, so the final path rests on its boundary."""
    _, gmm = corridor_surrogate
    target = gmm.component_mean(0)
    middle = target.waypoint(target.H // 2)
    disc = BarrierSpec('ellipse', center=tuple(middle), axes=(0.5, 0.5), name='disc')
    params = CbfParams()
    # one Euler step can undershoot delta by at most (dt * eps)^2 / 4 while the barrier is active
    floor = params.delta - (params.epsilon / 256) ** 2 / 4
    field = OtConditionalField(target)
    for seed in range(20):
        start = target + Path(0.05 * make_rng(seed).standard_normal(target.shape))
        unfiltered = run_correction(field, 2.0, 256, start, barriers=[disc])
        assert np.min(unfiltered.snapshots[-1].barrier) < 0.0
        trace = run_correction(field, 2.0, 256, start, SafetyFilter([disc], params))
        final = trace.snapshots[-1].barrier
        assert np.min(final) >= floor, f"seed {seed}"
        assert np.min(final) <= params.delta + 0.01, f"seed {seed}"
        assert trace.interventions > 0


def test_parallel_sweep_matches_serial(store):
    harness = Harness(store)
    base = ['sweep', '--seeds', '0-3', '--methods', 'safeflowmatcher,safe_fm_naive', '--T-pred', '2',
            '--T-corr', '32']
    assert harness.run(base + ['--out', 'serial.csv']) == 0
    assert harness.run(base + ['--jobs', '2', '--out', 'parallel.csv']) == 0
    assert store.load_csv(store.resolve('serial_runs.csv')) == store.load_csv(store.resolve('parallel_runs.csv'))
    assert store.load_csv(store.resolve('serial.csv')) == store.load_csv(store.resolve('parallel.csv'))


def test_default_zeta_is_shared_by_all_methods(corridor):
    thresholds = {trap_threshold(RunConfig(method=m), corridor) for m in ('fm_unsafe', 'safeflowmatcher')}
    assert len(thresholds) == 1
