import datetime
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from fbsdex.cache import write_cache
from fbsdex.constants import VERSION
from fbsdex.diagnostics import DiagnosticsReport
from fbsdex.fbsde import FbsdeSolution, NumericsConfig, ProblemSpec
from fbsdex.paths import StatePaths

__all__ = [
    'FLOAT_FORMAT',
    'to_json',
    'solution_processes',
    'write_solution',
    'write_report',
]

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def _default(value):
    if isinstance(value, np.generic):
        return value.item()

    if isinstance(value, np.ndarray):
        return value.tolist()

    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def to_json(data: Any, *, pretty: bool = True) -> str:
    return json.dumps(data, sort_keys=True, indent=2 if pretty else None, default=_default) + '\n'


def solution_processes(solution: FbsdeSolution) -> Dict[str, StatePaths]:
    processes = {'X': solution.X, 'Y': solution.Y, 'Z': solution.Z, 'pi': solution.pi_star}
    return {k: v for k, v in processes.items() if v is not None}


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def _provenance(
    solution: FbsdeSolution,
    spec: ProblemSpec,
    numerics: NumericsConfig,
    echo: Optional[dict],
) -> dict:
    return {
        'version': VERSION,
        'config': echo,
        'problem': spec.describe(),
        'seed': numerics.seed,
        'numerics': numerics.describe(),
        'layout': None if solution.bundle is None else solution.bundle.layout,
    }


def write_solution(
    directory: Union[str, Path],
    solution: FbsdeSolution,
    spec: ProblemSpec,
    numerics: NumericsConfig,
    *,
    echo: Optional[dict] = None,
    formats: Iterable[str] = ('csv', 'json'),
    trace_paths: int = 5,
    pretty: bool = True,
) -> List[Path]:
    """
    Writes solution_<process>.csv traces in (path, node, time, value) long format,
    solution_summary.csv with per-node mean and std, meta.json and optional binary caches
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    processes = solution_processes(solution)
    written = []

    if 'csv' in formats and processes:
        traces = list(range(min(trace_paths, solution.X.n_paths)))

        for name, paths in processes.items():
            path = directory / f'solution_{name}.csv'
            _write_csv(paths.to_frame(traces), path)
            written.append(path)

        path = directory / 'solution_summary.csv'
        _write_csv(pd.concat([x.summary_frame() for x in processes.values()], ignore_index=True), path)
        written.append(path)

    if 'cache' in formats:
        for name, paths in processes.items():
            path = directory / f'solution_{name}.fbsx'
            write_cache(path, paths)
            written.append(path)

    if 'json' in formats:
        meta = _provenance(solution, spec, numerics, echo)
        meta.update(solution.to_meta())
        meta['timestamp'] = datetime.datetime.now(datetime.timezone.utc).isoformat()

        path = directory / 'meta.json'
        path.write_text(to_json(meta, pretty=pretty), encoding='utf-8')
        written.append(path)

    logger.info('Wrote %d artifacts to %s', len(written), directory)

    return written


def write_report(
    directory: Union[str, Path],
    report: DiagnosticsReport,
    *,
    echo: Optional[dict] = None,
    pretty: bool = True,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    data = report.to_dict()
    data['version'] = VERSION
    data['config'] = echo

    path = directory / 'report.json'
    path.write_text(to_json(data, pretty=pretty), encoding='utf-8')

    return path
