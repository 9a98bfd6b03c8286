import argparse
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from itertools import product
from multiprocessing import Pool
from pathlib import Path as FsPath
from typing import Any, Dict, List, Optional, Sequence, Tuple

import config
from core.artifact_store import ArtifactStore
from core.certificates import CertificateReport, correction_envelope, verify_invariance
from core.environment import BUILTIN_ENVIRONMENTS, fit_gmm_target, generate_dataset, get_environment, trap_threshold
from core.errors import (ArtifactError, ArtifactIOError, CertificateViolationError, MalformedArtifactError,
                         SafeFlowError, ValidationError)
from core.integrators import plan
from core.metrics import RunRecord, aggregate_records
from core.trajectory import METHODS, RunConfig, make_rng, spawn_rngs
from core.vector_fields import GmmMarginalField, MlpField, field_distance, sample_probes, smoothed, train_field

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CERTIFICATE = 2
EXIT_IO = 3

PROBE_COUNT = 256


@dataclass
class ExperimentPlan:
    """Grid of (method, T_pred, alpha, seed) cells sharing one base config."""
    base: RunConfig
    seeds: Tuple[int, ...]
    methods: Tuple[str, ...] = ('safeflowmatcher',)
    T_pred_values: Tuple[int, ...] = ()
    alpha_values: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("A sweep needs a non-empty seed list")
        if not self.methods:
            raise ValidationError("A sweep needs at least one method")
        for method in self.methods:
            if method not in METHODS:
                raise ValidationError(f"Unknown method '{method}', expected one of {METHODS}")
        self.T_pred_values = tuple(self.T_pred_values) or (self.base.T_pred,)
        self.alpha_values = tuple(self.alpha_values) or (self.base.alpha,)

    def groups(self) -> List[Dict[str, Any]]:
        return [{'method': m, 'T_pred': tp, 'alpha': a}
                for m, tp, a in product(self.methods, self.T_pred_values, self.alpha_values)]

    def cells(self) -> List[RunConfig]:
        # validation happens here so a bad axis fails before any worker starts
        return [self.base.with_overrides(seed=seed, **group) for group in self.groups() for seed in self.seeds]


class HarnessArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def parse_seeds(text: str) -> Tuple[int, ...]:
    """'0-49' or '1,2,5' (ranges inclusive)."""
    seeds: List[int] = []
    for part in (p.strip() for p in text.split(',')):
        if not part:
            continue
        if '-' in part:
            lo, hi = part.split('-', 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def load_config_file(path: str) -> Dict[str, Any]:
    """TOML or JSON with the RunConfig schema; cbf may be a nested table."""
    file_path = FsPath(path)
    try:
        raw = file_path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read config file ({e.strerror or e})", file_path) from e
    try:
        if file_path.suffix == '.toml':
            return tomllib.loads(raw.decode('utf-8'))
        return json.loads(raw.decode('utf-8'))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedArtifactError(f"{file_path}: {e}") from e


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Built-in defaults, then the --config file, then explicit flags."""
    base = RunConfig()
    if getattr(args, 'config', None):
        overrides = load_config_file(args.config)
        merged = base.to_dict()
        cbf = dict(merged['cbf'])
        cbf.update(overrides.pop('cbf', {}) or {})
        merged.update(overrides)
        merged['cbf'] = cbf
        base = RunConfig.from_dict(merged)
    flags = {
        'seed': args.seed,
        'T_pred': getattr(args, 'T_pred', None),
        'T_corr': getattr(args, 'T_corr', None),
        'alpha': getattr(args, 'alpha', None),
        'field': getattr(args, 'field', None),
        'environment': getattr(args, 'env', None),
        'method': getattr(args, 'method', None),
        'checkpoint': getattr(args, 'checkpoint', None),
        'H': getattr(args, 'horizon', None),
        'epsilon': getattr(args, 'epsilon', None),
        'rho': getattr(args, 'rho', None),
        'delta': getattr(args, 'delta', None),
        't_w': getattr(args, 't_w', None),
        'w0': getattr(args, 'w0', None),
        'zeta': getattr(args, 'zeta', None),
    }
    if getattr(args, 'no_safety', False):
        flags['safety'] = False
    if args.timing:
        flags['record_timing'] = True
    try:
        return base.with_overrides(**flags)
    except TypeError as e:
        raise ValidationError(str(e)) from e


def run_id(run_config: RunConfig) -> str:
    return f"{run_config.method}-{run_config.config_hash()}-s{run_config.seed}"


def attach_envelope(report: CertificateReport, trace, run_config: RunConfig) -> None:
    if run_config.method == 'safeflowmatcher':
        report.envelope = correction_envelope(trace, run_config.alpha)


def run_cell(run_config: RunConfig) -> RunRecord:
    """One sweep cell; module level so worker processes can unpickle it."""
    env = get_environment(run_config.environment, run_config.H)
    _, record = plan(run_config, env)
    return record


class Harness:
    def __init__(self, store: Optional[ArtifactStore] = None):
        self.store = store or ArtifactStore()

    def build_parser(self) -> argparse.ArgumentParser:
        common = HarnessArgumentParser(add_help=False)
        common.add_argument('--seed', type=int, default=None, help='Random seed (default from SAFEFLOW_SEED)')
        common.add_argument('--jobs', type=int, default=config.JOBS, help='Worker processes for sweeps')
        common.add_argument('--force', action='store_true', help='Overwrite existing outputs')
        common.add_argument('--config', default=None, help='TOML or JSON run configuration')
        common.add_argument('--timing', action='store_true', help='Write wall-clock time per step into artifacts')

        planning = HarnessArgumentParser(add_help=False)
        planning.add_argument('--env', default=None, choices=sorted(BUILTIN_ENVIRONMENTS))
        planning.add_argument('--field', default=None, choices=('ot', 'gmm', 'mlp'))
        planning.add_argument('--checkpoint', default=None)
        planning.add_argument('--horizon', type=int, default=None, help='H, the path has H+1 waypoints')
        planning.add_argument('--T-pred', dest='T_pred', type=int, default=None)
        planning.add_argument('--T-corr', dest='T_corr', type=int, default=None)
        planning.add_argument('--epsilon', type=float, default=None)
        planning.add_argument('--rho', type=float, default=None)
        planning.add_argument('--delta', type=float, default=None)
        planning.add_argument('--t-w', dest='t_w', type=float, default=None)
        planning.add_argument('--w0', type=float, default=None)
        planning.add_argument('--zeta', type=float, default=None)

        parser = HarnessArgumentParser(prog='app.py', description='Safe flow-matching path planner')
        sub = parser.add_subparsers(dest='command', required=True, parser_class=HarnessArgumentParser)

        p = sub.add_parser('generate', parents=[common], help='Generate a surrogate path dataset')
        p.add_argument('env_name', choices=sorted(BUILTIN_ENVIRONMENTS))
        p.add_argument('n', type=int)
        p.add_argument('--horizon', type=int, default=config.HORIZON)
        p.add_argument('--out', default=None)
        p.set_defaults(handler=self.cmd_generate)

        p = sub.add_parser('train', parents=[common], help='Train an MLP field with the CFM loss')
        p.add_argument('dataset')
        p.add_argument('--widths', default=','.join(str(w) for w in config.HIDDEN_WIDTHS))
        p.add_argument('--steps', type=int, default=5000)
        p.add_argument('--lr', type=float, default=config.LEARNING_RATE)
        p.add_argument('--batch-size', type=int, default=config.BATCH_SIZE)
        p.add_argument('--components', type=int, default=config.GMM_COMPONENTS)
        p.add_argument('--out', default=None)
        p.set_defaults(handler=self.cmd_train)

        p = sub.add_parser('plan', parents=[common, planning], help='Plan one path and write its artifacts')
        p.add_argument('--method', default=None, choices=METHODS)
        p.add_argument('--alpha', type=float, default=None)
        p.add_argument('--no-safety', action='store_true')
        p.add_argument('--out', default=None, help='Run directory (default runs/<run-id>)')
        p.set_defaults(handler=self.cmd_plan)

        p = sub.add_parser('sweep', parents=[common, planning], help='Run a seed grid and aggregate')
        p.add_argument('--methods', default='safeflowmatcher')
        p.add_argument('--seeds', default='0-49')
        p.add_argument('--T-pred-values', dest='T_pred_values', default='')
        p.add_argument('--alpha-values', dest='alpha_values', default='')
        p.add_argument('--out', default='sweep.csv')
        p.set_defaults(handler=self.cmd_sweep)

        p = sub.add_parser('verify', parents=[common], help='Check the barrier certificate of a run')
        p.add_argument('run_dir')
        p.set_defaults(handler=self.cmd_verify)

        p = sub.add_parser('report', parents=[common], help='Aggregate run directories into a table')
        p.add_argument('run_dirs', nargs='+')
        p.add_argument('--out', default='report.csv')
        p.set_defaults(handler=self.cmd_report)
        return parser

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.build_parser().parse_args(argv)
            args.handler(args)
        except ValidationError as e:
            logger.error(f"Invalid input: {e}")
            return EXIT_VALIDATION
        except CertificateViolationError as e:
            logger.error(f"Certificate check failed: {e}")
            return EXIT_CERTIFICATE
        except ArtifactError as e:
            logger.error(f"Artifact error: {e}")
            return EXIT_IO
        except SafeFlowError as e:
            logger.exception(f"Command failed: {e}")
            return EXIT_VALIDATION
        return EXIT_OK

    def _out_path(self, out: Optional[str], default: FsPath) -> FsPath:
        return self.store.resolve(out) if out else default

    def cmd_generate(self, args) -> FsPath:
        if args.n < 1:
            raise ValidationError(f"n must be >= 1, got {args.n}")
        seed = config.DATASET_SEED if args.seed is None else args.seed
        env = get_environment(args.env_name, args.horizon)
        out = self._out_path(args.out, self.store.dataset_path(env.name))
        dataset = generate_dataset(env, args.n, make_rng(seed), seed=seed)
        self.store.save_dataset(dataset, out, force=args.force)
        self.store.save_environment(env, force=True)
        logger.info(f"wrote {len(dataset)} '{env.name}' paths to {out}")
        return out

    def cmd_train(self, args) -> FsPath:
        if args.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {args.steps}")
        seed = config.SEED if args.seed is None else args.seed
        dataset = self.store.load_dataset(self.store.resolve(args.dataset))
        d, width = dataset.paths[0].shape
        hidden = [int(w) for w in args.widths.split(',') if w]
        model_rng, probe_rng = spawn_rngs(seed, 2)
        gmm = fit_gmm_target(dataset, args.components, rng=make_rng(seed))
        model = MlpField.for_paths(d, width - 1, hidden, model_rng)
        exact = GmmMarginalField(gmm)
        probes = sample_probes(gmm, PROBE_COUNT, probe_rng)
        initial = field_distance(model, exact, probes)
        logger.info(f"training {model.widths} for {args.steps} steps, initial field distance {initial:.4f}")
        history = train_field(model, gmm, args.steps, args.batch_size, args.lr)
        final = field_distance(model, exact, probes)
        if history:
            curve = smoothed([h.value for h in history])
            logger.info(f"smoothed loss {curve[0]:.4f} -> {curve[-1]:.4f}")
        logger.info(f"field distance to the exact mixture field: {initial:.4f} -> {final:.4f}")
        out = self._out_path(args.out, self.store.checkpoint_path(FsPath(args.dataset).stem))
        self.store.save_checkpoint(model, out, force=args.force)
        return out

    def cmd_plan(self, args) -> FsPath:
        run_config = resolve_config(args)
        env = get_environment(run_config.environment, run_config.H)
        out = self._out_path(args.out, self.store.run_dir(run_id(run_config)))
        if (out / 'record.csv').exists() and not args.force:
            raise ValidationError(f"Run directory {out} already holds a record, pass --force to overwrite")
        trace, record = plan(run_config, env)
        report = verify_invariance(trace, run_config.cbf, env.barriers, zeta=trap_threshold(run_config, env))
        attach_envelope(report, trace, run_config)
        self.store.save_config(out, run_config)
        self.store.save_trace(out, trace)
        self.store.save_report(out, report)
        self.store.save_record(out, record, include_timing=run_config.record_timing)
        if report.passed:
            logger.info(f"run written to {out}; certificate holds")
        else:
            logger.warning(f"run written to {out}; {len(report.violations)} certificate violation(s)")
        return out

    def cmd_sweep(self, args) -> FsPath:
        run_config = resolve_config(args)
        try:
            experiment = ExperimentPlan(
                base=run_config,
                seeds=parse_seeds(args.seeds),
                methods=tuple(m.strip() for m in args.methods.split(',') if m.strip()),
                T_pred_values=tuple(int(v) for v in args.T_pred_values.split(',') if v.strip()),
                alpha_values=tuple(float(v) for v in args.alpha_values.split(',') if v.strip()),
            )
        except ValidationError:
            raise
        except ValueError as e:
            raise ValidationError(f"Bad sweep axis: {e}") from e
        out = self._out_path(args.out, self.store.resolve('sweep.csv'))
        if out.exists() and not args.force:
            raise ValidationError(f"{out} exists, pass --force to overwrite")
        cells = experiment.cells()
        logger.info(f"sweeping {len(cells)} cells over {max(1, args.jobs)} worker(s)")
        if args.jobs > 1:
            with Pool(min(args.jobs, len(cells))) as pool:
                records = pool.map(run_cell, cells)
        else:
            records = [run_cell(cell) for cell in cells]
        rows = []
        per_group = len(experiment.seeds)
        for i, group in enumerate(experiment.groups()):
            chunk = records[i * per_group:(i + 1) * per_group]
            rows.append(aggregate_records(chunk, group, include_timing=run_config.record_timing))
        self.store.save_table(out, rows, force=True)
        record_rows = [records[0].csv_header()] + [r.to_csv_row(run_config.record_timing) for r in records]
        self.store.save_csv(out.with_name(f"{out.stem}_runs.csv"), record_rows, force=True)
        logger.info(f"wrote {len(rows)} aggregate rows to {out}")
        return out

    def cmd_verify(self, args):
        run_dir = self.store.resolve(args.run_dir)
        run_config = self.store.load_config(run_dir)
        env = get_environment(run_config.environment, run_config.H)
        trace = self.store.load_trace(run_dir, tuple(spec.name or spec.kind for spec in env.barriers))
        report = verify_invariance(trace, run_config.cbf, env.barriers, zeta=trap_threshold(run_config, env))
        attach_envelope(report, trace, run_config)
        self.store.save_report(run_dir, report)
        if not report.passed:
            raise CertificateViolationError(report.violations)
        logger.info(f"{run_dir}: certificate holds for {len(report.waypoints)} waypoint/barrier pairs")
        return report

    def cmd_report(self, args) -> FsPath:
        groups: Dict[Tuple[str, int, float], List[RunRecord]] = {}
        certified: Dict[Tuple[str, int, float], List[int]] = {}
        timing = args.timing
        for run_dir in args.run_dirs:
            path = self.store.resolve(run_dir)
            run_config = self.store.load_config(path)
            key = (run_config.method, run_config.T_pred, run_config.alpha)
            groups.setdefault(key, []).append(self.store.load_record(path))
            certified.setdefault(key, []).append(self.store.load_report(path).summary_row()['passed'])
        rows = []
        for (m, tp, a), records in groups.items():
            row = aggregate_records(records, {'method': m, 'T_pred': tp, 'alpha': a}, include_timing=timing)
            row['Certified'] = sum(certified[(m, tp, a)]) / len(records)
            rows.append(row)
        out = self._out_path(args.out, self.store.resolve('report.csv'))
        if out.exists() and not args.force:
            raise ValidationError(f"{out} exists, pass --force to overwrite")
        self.store.save_table(out, rows, force=True)
        logger.info(f"aggregated {len(args.run_dirs)} run(s) into {len(rows)} row(s) at {out}")
        return out


harness = Harness()
