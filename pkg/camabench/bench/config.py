"""Experiment configuration: nested sections, every default resolved explicitly.

A config file is a JSON object whose top-level keys are the sections below;
dotted keys (``training.epochs``) address fields for command-line overrides.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from camabench.errors import ConfigError
from camabench.utils import get_bench_config

EXPERIMENT_KINDS = ('shift-sweep', 'attack-sweep', 'finetune-fraction', 'misspec', 'disentangle')
DATA_SOURCES = ('measurement', 'images')
MODEL_KINDS = ('cama-single', 'cama-generic', 'dnn')
REGIMES = ('clean', 'augmented')
SHIFT_MANIPULATIONS = ('shift_coparents', 'shift_children', 'shift_vertical', 'shift_horizontal', 'shift_both')
ATTACK_MANIPULATIONS = ('fgsm', 'pgd')
MANIPULATIONS = SHIFT_MANIPULATIONS + ATTACK_MANIPULATIONS
MEASUREMENT_MANIPULATIONS = ('shift_coparents', 'shift_children') + ATTACK_MANIPULATIONS
IMAGE_MANIPULATIONS = ('shift_vertical', 'shift_horizontal', 'shift_both') + ATTACK_MANIPULATIONS
FRACTION_SWEEP = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class ExperimentSection:
    id: str = 'experiment'
    kind: str = 'shift-sweep'


@dataclass(frozen=True)
class DataSection:
    source: str = 'measurement'
    n: int = 1000
    n_train: int = 450
    n_val: int = 50
    sigma_y: float = 0.1
    sigma_x: float = 0.1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_subset: Optional[int] = 10000
    val_size: int = 1000
    test_subset: Optional[int] = None


@dataclass(frozen=True)
class ModelSection:
    kinds: Tuple[str, ...] = ('cama-generic', 'dnn')
    dim_z: Optional[int] = None
    dim_m: Optional[int] = None
    hidden: Optional[int] = None
    hidden_m: Optional[Tuple[int, ...]] = None
    hidden_merge: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class TrainingSection:
    regimes: Tuple[str, ...] = ('clean',)
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    augment_range: float = 0.5
    augment_axis: str = 'vertical'


@dataclass(frozen=True)
class WeightsSection:
    lam: float = 0.5
    alpha: float = 0.5
    K: int = 16
    U: int = 1


@dataclass(frozen=True)
class FinetuneSection:
    enabled: bool = True
    fraction: Optional[float] = None
    steps: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    use_intervention: bool = False
    manipulation: Optional[str] = None


@dataclass(frozen=True)
class GridSection:
    manipulation: str = 'shift_coparents'
    magnitudes: Tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    fractions: Tuple[float, ...] = FRACTION_SWEEP
    role_maps: Tuple[str, ...] = ('cor', 'relabel:1', 'relabel:2')


@dataclass(frozen=True)
class AttackSection:
    iterations: int = 40
    step_size: Optional[float] = None
    random_start_baseline: bool = True
    random_start_cama: bool = False
    chunk_rows: int = 64


@dataclass(frozen=True)
class OutputSection:
    directory: str = 'results'
    reuse_checkpoints: bool = True
    require_checkpoints: bool = False
    workers: int = 1
    save_finetuned: bool = False
    disentangle_examples: int = 16


SECTIONS = {
    'experiment': ExperimentSection,
    'data': DataSection,
    'model': ModelSection,
    'training': TrainingSection,
    'weights': WeightsSection,
    'finetune': FinetuneSection,
    'grid': GridSection,
    'attack': AttackSection,
    'output': OutputSection,
}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    if isinstance(default, tuple) or name in ('hidden_m', 'hidden_merge'):
        if value is None:
            return None
        if isinstance(value, (str, bytes)) or not isinstance(value, Iterable):
            value = [value]
        return tuple(value)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f'{section}.{name} must be true or false, got {value!r}')
    return value


def _section_from_mapping(section: str, values: Mapping[str, Any]):
    cls = SECTIONS[section]
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f'Unknown keys in section "{section}": {unknown}')
    defaults = cls()
    kwargs = {name: _coerce(section, name, value, getattr(defaults, name)) for name, value in values.items()}
    return cls(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    grid: GridSection = field(default_factory=GridSection)
    attack: AttackSection = field(default_factory=AttackSection)
    output: OutputSection = field(default_factory=OutputSection)
    seeds: Tuple[int, ...] = (0,)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> 'ExperimentConfig':
        unknown = sorted(set(mapping) - set(SECTIONS) - {'seeds'})
        if unknown:
            raise ConfigError(f'Unknown config sections: {unknown}')
        kwargs = {}
        for section in SECTIONS:
            values = mapping.get(section, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f'Config section "{section}" must be an object')
            kwargs[section] = _section_from_mapping(section, values)
        if 'seeds' in mapping:
            kwargs['seeds'] = tuple(int(seed) for seed in _coerce('', 'seeds', mapping['seeds'], ()))
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        return cls.from_mapping(get_bench_config(path))

    def to_mapping(self) -> Dict[str, Any]:
        mapping = {section: asdict(getattr(self, section)) for section in SECTIONS}
        mapping['seeds'] = list(self.seeds)
        return json.loads(json.dumps(mapping))

    def flat(self) -> Dict[str, Any]:
        flat = {}
        for section, values in self.to_mapping().items():
            if isinstance(values, dict):
                flat.update({f'{section}.{name}': value for name, value in values.items()})
            else:
                flat[section] = values
        return flat

    def override(self, assignments: Iterable[str]) -> 'ExperimentConfig':
        """Apply ``section.key=value`` assignments; values are parsed as JSON when possible."""
        mapping = self.to_mapping()
        for assignment in assignments:
            key, sep, text = assignment.partition('=')
            if not sep:
                raise ConfigError(f'Override "{assignment}" is not of the form section.key=value')
            if key == 'seeds':
                mapping['seeds'] = _parse_value(text)
                continue
            section, _, name = key.partition('.')
            if section not in SECTIONS or not name:
                raise ConfigError(f'Override key "{key}" does not name a config field')
            mapping[section][name] = _parse_value(text)
        return ExperimentConfig.from_mapping(mapping)

    def with_seeds(self, seeds: Iterable[int]) -> 'ExperimentConfig':
        return replace(self, seeds=tuple(int(seed) for seed in seeds))

    def arms(self) -> List[Tuple[str, str, str]]:
        """(model kind, regime, role map) triples, one trained model each per seed."""
        roles = self.grid.role_maps if self.experiment.kind == 'misspec' else ('cor',)
        return [
            (model_kind, regime, role)
            for model_kind in self.model.kinds
            for regime in self.training.regimes
            for role in (roles if model_kind.startswith('cama') else ('cor',))
        ]

    def checkpoint_path(self, model_kind: str, regime: str, role: str, seed: int) -> Path:
        tag = model_kind if role == 'cor' else f'{model_kind}-{role.replace(":", "")}'
        return Path(self.output.directory) / 'checkpoints' / f'{self.data.source}_{tag}_{regime}_seed{seed}.ckpt'

    @property
    def cama_kind(self) -> str:
        return 'cama-single' if self.data.source == 'images' else 'cama-generic'

    @property
    def finetune_fraction(self) -> float:
        if self.finetune.fraction is not None:
            return self.finetune.fraction
        return 1.0 if self.grid.manipulation in ATTACK_MANIPULATIONS else 0.5

    def resolved(self) -> 'ExperimentConfig':
        """The same config with every context-dependent default filled in."""
        return replace(self, finetune=replace(self.finetune, fraction=self.finetune_fraction))

    def validate(self) -> 'ExperimentConfig':
        kind = self.experiment.kind
        _one_of('experiment.kind', kind, EXPERIMENT_KINDS)
        _one_of('data.source', self.data.source, DATA_SOURCES)
        _one_of('grid.manipulation', self.grid.manipulation, MANIPULATIONS)
        if not self.seeds:
            raise ConfigError('At least one seed is required')
        if not self.model.kinds:
            raise ConfigError('model.kinds is empty')
        for model_kind in self.model.kinds:
            _one_of('model.kinds', model_kind, MODEL_KINDS)
            if model_kind.startswith('cama') and model_kind != self.cama_kind:
                raise ConfigError(f'{model_kind} does not fit {self.data.source} data; use {self.cama_kind}')
        for regime in self.training.regimes:
            _one_of('training.regimes', regime, REGIMES)
        if not self.training.regimes:
            raise ConfigError('training.regimes is empty')
        if 'augmented' in self.training.regimes and self.data.source != 'images':
            raise ConfigError('The augmented regime shifts images and needs data.source = images')
        _one_of('training.augment_axis', self.training.augment_axis, ('vertical', 'horizontal', 'both'))
        if not 0.0 <= self.training.augment_range <= 1.0:
            raise ConfigError(f'training.augment_range must lie in [0, 1], got {self.training.augment_range}')

        allowed = MEASUREMENT_MANIPULATIONS if self.data.source == 'measurement' else IMAGE_MANIPULATIONS
        _one_of('grid.manipulation', self.grid.manipulation, allowed)
        if self.finetune.manipulation is not None:
            _one_of('finetune.manipulation', self.finetune.manipulation, allowed)
        if kind == 'attack-sweep' and self.grid.manipulation not in ATTACK_MANIPULATIONS:
            raise ConfigError('An attack sweep needs grid.manipulation fgsm or pgd')
        if kind in ('shift-sweep', 'finetune-fraction', 'misspec', 'disentangle') \
                and self.grid.manipulation not in SHIFT_MANIPULATIONS:
            raise ConfigError(f'A {kind} experiment needs a shift manipulation')
        if kind == 'misspec' and self.data.source != 'measurement':
            raise ConfigError('Mis-specification experiments need measurement data')
        if kind == 'disentangle' and self.data.source != 'images':
            raise ConfigError('Disentanglement experiments need image data')

        if not self.grid.magnitudes:
            raise ConfigError('grid.magnitudes is empty')
        if self.grid.manipulation in ATTACK_MANIPULATIONS and any(m < 0 for m in self.grid.magnitudes):
            raise ConfigError(f'Attack epsilons must be non-negative: {self.grid.magnitudes}')
        if self.grid.manipulation.startswith('shift_') and self.data.source == 'images' \
                and any(abs(m) > 1 for m in self.grid.magnitudes):
            raise ConfigError(f'Image shift fractions must lie in [-1, 1]: {self.grid.magnitudes}')
        fractions = list(self.grid.fractions) if kind == 'finetune-fraction' else [self.finetune_fraction]
        if kind == 'finetune-fraction' and not fractions:
            raise ConfigError('grid.fractions is empty')
        for fraction in fractions:
            if not 0.0 < fraction <= 1.0:
                raise ConfigError(f'Fine-tune fraction must lie in (0, 1], got {fraction}')
        if kind == 'misspec':
            if not self.grid.role_maps:
                raise ConfigError('grid.role_maps is empty')
            from camabench.datagen import parse_role_spec
            for spec in self.grid.role_maps:
                parse_role_spec(spec)

        weights = self.weights
        for name in ('lam', 'alpha'):
            value = getattr(weights, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f'weights.{name} must lie in [0, 1], got {value}')
        if weights.K < 1 or weights.U < 1:
            raise ConfigError(f'weights.K and weights.U must be at least 1, got {weights.K} and {weights.U}')
        for name, value in (('training.epochs', self.training.epochs), ('training.batch_size', self.training.batch_size),
                            ('finetune.batch_size', self.finetune.batch_size), ('attack.iterations', self.attack.iterations),
                            ('attack.chunk_rows', self.attack.chunk_rows), ('output.workers', self.output.workers)):
            if value < 1:
                raise ConfigError(f'{name} must be at least 1, got {value}')
        if self.finetune.steps < 0:
            raise ConfigError(f'finetune.steps must be non-negative, got {self.finetune.steps}')

        if self.data.source == 'images':
            for name in ('train_images', 'train_labels', 'test_images', 'test_labels'):
                path = getattr(self.data, name)
                if path is None:
                    raise ConfigError(f'data.{name} is required for image experiments')
                if not Path(path).is_file():
                    raise ConfigError(f'data.{name} "{path}" does not exist')
        elif self.data.n_train + self.data.n_val >= self.data.n:
            raise ConfigError(f'data.n={self.data.n} leaves no test rows after {self.data.n_train}+{self.data.n_val}')
        if self.output.require_checkpoints:
            missing = [
                str(self.checkpoint_path(*arm, seed)) for seed in self.seeds for arm in self.arms()
                if not self.checkpoint_path(*arm, seed).is_file()
            ]
            if missing:
                raise ConfigError(f'Missing checkpoints: {missing}')
        return self


def _one_of(name: str, value: Any, allowed: Tuple[str, ...]) -> None:
    if value not in allowed:
        raise ConfigError(f'{name} must be one of {allowed}, got {value!r}')


def load_config(path: Union[str, Path], overrides: Iterable[str] = (), seeds: Optional[List[int]] = None) -> ExperimentConfig:
    config = ExperimentConfig.load(path).override(overrides)
    if seeds:
        config = config.with_seeds(seeds)
    return config.validate().resolved()
