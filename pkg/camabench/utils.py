import json
from pathlib import Path
from typing import Any, Dict, Union

from camabench.errors import ConfigError

N_PARENTS = 5
N_COPARENTS = 5
N_CHILDREN = 10
N_CLASSES = 5
SPLITS = ('train', 'val', 'test')
MEASUREMENT_COLUMNS = (
        tuple(f'a{i}' for i in range(N_PARENTS))
        + tuple(f'c{i}' for i in range(N_COPARENTS))
        + tuple(f'x{i}' for i in range(N_CHILDREN))
        + ('y', 'split')
)

IMAGE_MAGIC = 2051
IMAGE_LABEL_MAGIC = 2049
IMAGE_CLASSES = 10

RESULT_COLUMNS = (
    'experiment_id',
    'model',
    'regime',
    'manipulation',
    'magnitude',
    'finetune_fraction',
    'seed',
    'K',
    'acc_manipulated',
    'acc_clean',
    'wall_time',
)

DEFAULT_CONFIG_PATH = 'bench_config.json'


def get_bench_config(path: Union[str, Path] = DEFAULT_CONFIG_PATH) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as config_json:
            config = json.load(config_json)
    except OSError as e:
        raise ConfigError(f'Could not read bench config "{path}"') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'Bench config "{path}" is not valid JSON: {e}') from e
    if not isinstance(config, dict):
        raise ConfigError(f'Bench config "{path}" must hold a JSON object')

    return config
