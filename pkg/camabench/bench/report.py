"""Aggregate result CSVs into plot-data tables: one file per (experiment id, manipulation)."""
import logging
from pathlib import Path
from typing import Iterable, List, Union

import pandas as pd

from camabench.errors import SchemaError
from camabench.utils import RESULT_COLUMNS

logger = logging.getLogger(__name__)

PLOT_COLUMNS = ('series', 'model', 'regime', 'finetune', 'x', 'mean', 'std', 'clean_mean', 'clean_std', 'n')
SERIES_KEYS = ['model', 'regime', 'finetune']


def read_results(csv_paths: Iterable[Union[str, Path]]) -> pd.DataFrame:
    frames = []
    for path in csv_paths:
        frame = pd.read_csv(path, encoding='utf-8')
        if list(frame.columns) != list(RESULT_COLUMNS):
            raise SchemaError(f'{path}: columns {list(frame.columns)} do not match {list(RESULT_COLUMNS)}')
        frames.append(frame)
    if not frames:
        raise SchemaError('No result files given')
    return pd.concat(frames, ignore_index=True)


def plot_data(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std over seeds per (series, x).

    x is the magnitude, or the fine-tune fraction when the magnitude is fixed.
    """
    frame = results.copy()
    frame['finetune'] = frame['finetune_fraction'] > 0
    frame['x'] = frame['magnitude'] if frame['magnitude'].nunique() > 1 else frame['finetune_fraction']
    grouped = frame.groupby(SERIES_KEYS + ['x'], sort=True)
    table = grouped.agg(
            mean=('acc_manipulated', 'mean'),
            std=('acc_manipulated', lambda values: values.std(ddof=0)),
            clean_mean=('acc_clean', 'mean'),
            clean_std=('acc_clean', lambda values: values.std(ddof=0)),
            n=('seed', 'nunique'),
    ).reset_index()
    table['series'] = table['model'] + '/' + table['regime'] + table['finetune'].map({True: '/ft', False: ''})
    return table[list(PLOT_COLUMNS)]


def report(csv_paths: Iterable[Union[str, Path]], out_dir: Union[str, Path]) -> List[Path]:
    results = read_results(csv_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (experiment_id, manipulation), group in results.groupby(['experiment_id', 'manipulation'], sort=True):
        path = out_dir / f'{experiment_id}__{manipulation}.csv'
        plot_data(group).to_csv(path, index=False, encoding='utf-8')
        written.append(path)
        logger.info('wrote %s', path)
    return written
