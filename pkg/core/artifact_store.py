import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path as FsPath
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import config
from core.certificates import CertificateReport
from core.environment import Environment, PathDataset
from core.errors import ArtifactIOError, MalformedArtifactError, SchemaVersionError, ValidationError
from core.integrators import CorrectionTrace
from core.metrics import RunRecord
from core.trajectory import RunConfig
from core.vector_fields import GmmTarget, MlpField

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CONFIG_FILE = 'config.json'
TRACE_FILE = 'trace.csv'
REPORT_FILE = 'report.json'
RECORD_FILE = 'record.csv'

T = TypeVar('T')
PathLike = Union[str, os.PathLike]


class ArtifactStore:
    """Reads and writes every artifact under one root directory.

    JSON documents carry a schema_version checked on load; CSV files are
    RFC-4180 with repr-formatted floats. Writes go to a temp file in the target
    directory and are renamed into place.
    """

    def __init__(self, root: Optional[PathLike] = None):
        self.root = FsPath(root if root is not None else config.ARTIFACT_ROOT)

    # locations

    def run_dir(self, run_id: str) -> FsPath:
        return self.root / config.RUNS_FOLDER / run_id

    def dataset_path(self, name: str) -> FsPath:
        return self.root / config.DATASETS_FOLDER / f"{name}.json"

    def environment_path(self, name: str) -> FsPath:
        return self.root / config.ENVIRONMENTS_FOLDER / f"{name}.json"

    def checkpoint_path(self, name: str) -> FsPath:
        return self.root / config.CHECKPOINTS_FOLDER / f"{name}.json"

    def resolve(self, path: PathLike) -> FsPath:
        path = FsPath(path)
        return path if path.is_absolute() else self.root / path

    # raw io

    def write_text(self, path: PathLike, text: str, force: bool = True) -> FsPath:
        path = FsPath(path)
        if path.exists() and not force:
            raise ArtifactIOError("File exists, pass --force to overwrite", path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
            try:
                with os.fdopen(fd, 'w', encoding='utf-8', newline='') as handle:
                    handle.write(text)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as e:
            raise ArtifactIOError(f"Cannot write artifact ({e.strerror or e})", path) from e
        logger.debug(f"wrote {path}")
        return path

    def read_text(self, path: PathLike) -> str:
        path = FsPath(path)
        try:
            return path.read_text(encoding='utf-8')
        except OSError as e:
            raise ArtifactIOError(f"Cannot read artifact ({e.strerror or e})", path) from e

    def save_json(self, path: PathLike, payload: Dict[str, Any], force: bool = True) -> FsPath:
        document = {'schema_version': SCHEMA_VERSION, **payload}
        text = json.dumps(document, indent=2, sort_keys=True, allow_nan=True) + '\n'
        return self.write_text(path, text, force)

    def load_json(self, path: PathLike) -> Dict[str, Any]:
        text = self.read_text(path)
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise MalformedArtifactError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e
        if not isinstance(document, dict):
            raise MalformedArtifactError(f"{path}: expected a JSON object")
        version = document.pop('schema_version', None)
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"{path}: schema_version {version!r}, this build reads {SCHEMA_VERSION}")
        return document

    def save_csv(self, path: PathLike, rows: Sequence[Sequence[Any]], force: bool = True) -> FsPath:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerows(rows)
        return self.write_text(path, buffer.getvalue(), force)

    def load_csv(self, path: PathLike) -> List[List[str]]:
        text = self.read_text(path)
        try:
            rows = list(csv.reader(io.StringIO(text, newline='')))
        except csv.Error as e:
            raise MalformedArtifactError(f"{path}: invalid CSV ({e})") from e
        if not rows:
            raise MalformedArtifactError(f"{path}: empty CSV")
        return rows

    def _decode(self, path: PathLike, build: Callable[..., T], *args) -> T:
        try:
            return build(*args)
        except SchemaVersionError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise MalformedArtifactError(f"{path}: {e}") from e

    # typed artifacts

    def save_environment(self, env: Environment, path: Optional[PathLike] = None, force: bool = True) -> FsPath:
        return self.save_json(path or self.environment_path(env.name), env.to_dict(), force)

    def load_environment(self, path: PathLike) -> Environment:
        return self._decode(path, Environment.from_dict, self.load_json(path))

    def save_dataset(self, dataset: PathDataset, path: PathLike, force: bool = False) -> FsPath:
        return self.save_json(path, dataset.to_dict(), force)

    def load_dataset(self, path: PathLike) -> PathDataset:
        return self._decode(path, PathDataset.from_dict, self.load_json(path))

    def save_config(self, run_dir: PathLike, run_config: RunConfig, force: bool = True) -> FsPath:
        return self.save_json(FsPath(run_dir) / CONFIG_FILE, run_config.to_dict(), force)

    def load_config(self, path: PathLike) -> RunConfig:
        path = FsPath(path)
        if path.is_dir():
            path = path / CONFIG_FILE
        return self._decode(path, RunConfig.from_dict, self.load_json(path))

    def save_trace(self, run_dir: PathLike, trace: CorrectionTrace, force: bool = True) -> FsPath:
        return self.save_csv(FsPath(run_dir) / TRACE_FILE, trace.to_csv_rows(), force)

    def load_trace(self, run_dir: PathLike, barrier_names: Tuple[str, ...] = ()) -> CorrectionTrace:
        path = FsPath(run_dir) / TRACE_FILE
        return self._decode(path, CorrectionTrace.from_csv_rows, self.load_csv(path), barrier_names)

    def save_report(self, run_dir: PathLike, report: CertificateReport, force: bool = True) -> FsPath:
        return self.save_json(FsPath(run_dir) / REPORT_FILE, report.to_dict(), force)

    def load_report(self, run_dir: PathLike) -> CertificateReport:
        path = FsPath(run_dir) / REPORT_FILE
        return self._decode(path, CertificateReport.from_dict, self.load_json(path))

    def save_record(self, run_dir: PathLike, record: RunRecord, include_timing: bool = False,
                    force: bool = True) -> FsPath:
        rows = [record.csv_header(), record.to_csv_row(include_timing)]
        return self.save_csv(FsPath(run_dir) / RECORD_FILE, rows, force)

    def load_record(self, run_dir: PathLike) -> RunRecord:
        path = FsPath(run_dir) / RECORD_FILE
        rows = self.load_csv(path)
        if len(rows) != 2:
            raise MalformedArtifactError(f"{path}: expected a header and one record row, got {len(rows)} rows")
        return self._decode(path, RunRecord.from_csv, rows[0], rows[1])

    def save_checkpoint(self, model: MlpField, path: PathLike, force: bool = True) -> FsPath:
        return self.save_json(path, model.to_dict(), force)

    def load_checkpoint(self, path: Optional[PathLike]) -> MlpField:
        if not path:
            raise ValidationError("No checkpoint path given")
        path = self.resolve(path)
        return self._decode(path, MlpField.from_dict, self.load_json(path))

    def save_gmm(self, gmm: GmmTarget, path: PathLike, force: bool = True) -> FsPath:
        return self.save_json(path, gmm.to_dict(), force)

    def load_gmm(self, path: PathLike) -> GmmTarget:
        return self._decode(path, GmmTarget.from_dict, self.load_json(path))

    def save_table(self, path: PathLike, rows: Sequence[Dict[str, Any]], force: bool = True) -> FsPath:
        """Aggregate rows as CSV; columns are the union of keys in first-seen order."""
        columns: List[str] = []
        for row in rows:
            columns.extend(key for key in row if key not in columns)
        body = [[_cell(row.get(column)) for column in columns] for row in rows]
        return self.save_csv(path, [columns] + body, force)


def _cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)
