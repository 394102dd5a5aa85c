"""Experiment driver: train every arm per seed, then evaluate the grid points in worker processes."""
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from camabench import baseline, cama
from camabench.attacks import IMAGE_BOX, UNBOUNDED, AttackConfig, fgsm, make_cama_scorer, measurement_mask, pgd
from camabench.baseline import MlpClassifier, MlpClassifierSpec, classifier_inputs, make_classifier_scorer
from camabench.bench.checkpoint import load_into, save_checkpoint
from camabench.bench.config import ATTACK_MANIPULATIONS, ExperimentConfig
from camabench.cama import CamaModel, CamaSpec, LabeledBatch, ObjectiveWeights
from camabench.datagen import (
    ImageDataset,
    MeasurementDataset,
    MeasurementMechanism,
    augment_shift_range,
    generate_measurement,
    load_idx,
    parse_role_spec,
    shift_children,
    shift_coparents,
    shift_image,
)
from camabench.errors import CamaError
from camabench.ndgrad import AdamConfig
from camabench.stochastics import RngStream
from camabench.utils import IMAGE_CLASSES, N_CLASSES, RESULT_COLUMNS

logger = logging.getLogger(__name__)

DATA_STREAM = 1
EVAL_STREAM = 2
ELBO_STREAM = 3
GRID_STREAM_BASE = 1000

Arm = Tuple[str, str, str]


@dataclass
class ResultRow:
    experiment_id: str
    model: str
    regime: str
    manipulation: str
    magnitude: float
    finetune_fraction: float
    seed: int
    K: int
    acc_manipulated: float
    acc_clean: float
    wall_time: float

    def as_dict(self) -> Dict[str, Union[str, float, int]]:
        return asdict(self)


@dataclass(frozen=True)
class GridPoint:
    index: int
    manipulation: str
    magnitude: float
    fraction: Optional[float]


@dataclass
class TrainedArm:
    model_kind: str
    regime: str
    role: str
    model: Union[CamaModel, MlpClassifier]

    @property
    def is_cama(self) -> bool:
        return self.model_kind.startswith('cama')

    @property
    def label(self) -> str:
        return self.model_kind if self.role == 'cor' else f'{self.model_kind}[{self.role}]'


@dataclass
class PreparedData:
    source: str
    images: Optional[Dict[str, ImageDataset]] = None
    measurement: Optional[MeasurementDataset] = None
    mechanism: Optional[MeasurementMechanism] = None

    def dataset(self, split: str) -> MeasurementDataset:
        return self.measurement.subset(split)

    def batch(self, split: str, role: str = 'cor') -> LabeledBatch:
        if self.source == 'images':
            return self.images[split].to_batch()
        return self.dataset(split).to_batch(parse_role_spec(role))


@dataclass
class RunResult:
    rows: List[ResultRow] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    validation_elbo: Dict[str, float] = field(default_factory=dict)
    csv_path: Optional[Path] = None
    manifest_path: Optional[Path] = None

    @property
    def complete(self) -> bool:
        return not self.failures


def objective_weights(config: ExperimentConfig) -> ObjectiveWeights:
    return ObjectiveWeights(**asdict(config.weights))


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    data = config.data
    if data.source == 'measurement':
        dataset, mechanism = generate_measurement(seed, data.n, data.n_train, data.n_val, data.sigma_y, data.sigma_x)
        return PreparedData('measurement', measurement=dataset, mechanism=mechanism)

    train = load_idx(data.train_images, data.train_labels)
    test = load_idx(data.test_images, data.test_labels)
    perm = RngStream(seed, DATA_STREAM).permutation(len(train))
    if data.train_subset is not None:
        perm = perm[:data.train_subset]
    if data.val_size >= len(perm):
        raise CamaError(f'Validation size {data.val_size} leaves no training images out of {len(perm)}')
    if data.test_subset is not None:
        test = test.take(np.arange(min(data.test_subset, len(test))))
    images = {
        'train': train.take(perm[:-data.val_size]),
        'val': train.take(perm[-data.val_size:]),
        'test': test,
    }
    return PreparedData('images', images=images)


def cama_spec(config: ExperimentConfig, role: str = 'cor') -> CamaSpec:
    overrides = {
        name: value for name, value in (
            ('dim_z', config.model.dim_z),
            ('dim_m', config.model.dim_m),
            ('hidden', config.model.hidden),
            ('hidden_m', config.model.hidden_m),
            ('hidden_merge', config.model.hidden_merge),
        ) if value is not None
    }
    if config.data.source == 'images':
        overrides = {'dim_z': 64, 'dim_m': 32, 'hidden': 500, **overrides}
        return CamaSpec.image(dim_y=IMAGE_CLASSES, **overrides)
    # Linear merge: the decoder stays additive in its y, z, m and c features.
    overrides = {'hidden': 64, 'hidden_m': (64, 64, 64, 64), 'hidden_merge': (), **overrides}
    dim_a, dim_c, dim_x = parse_role_spec(role).dims
    return CamaSpec.measurement(dim_x=dim_x, dim_a=dim_a, dim_c=dim_c, dim_y=N_CLASSES, **overrides)


def classifier_spec(config: ExperimentConfig) -> MlpClassifierSpec:
    if config.data.source == 'images':
        return MlpClassifierSpec.image()
    return MlpClassifierSpec.measurement()


def _fingerprint(config: ExperimentConfig) -> str:
    mapping = config.to_mapping()
    relevant = {section: mapping[section] for section in ('data', 'model', 'training', 'weights')}
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def _template(config: ExperimentConfig, model_kind: str, role: str):
    if model_kind.startswith('cama'):
        return CamaModel.create(cama_spec(config, role), zero=True)
    return MlpClassifier.create(classifier_spec(config), zero=True)


def _load_arm(config: ExperimentConfig, arm: Arm, seed: int, require_match: bool) -> Optional[TrainedArm]:
    path = config.checkpoint_path(*arm, seed)
    if not path.is_file():
        return None
    template = _template(config, arm[0], arm[2])
    store, meta = load_into(path, template.params)
    if meta.get('fingerprint') != _fingerprint(config):
        if require_match:
            logger.warning('checkpoint %s was trained with different settings; using it anyway', path)
        else:
            logger.info('checkpoint %s is stale, retraining', path)
            return None
    return TrainedArm(*arm, type(template)(template.spec, store))


def train_arm(config: ExperimentConfig, data: PreparedData, arm: Arm, arm_index: int, seed: int) -> TrainedArm:
    model_kind, regime, role = arm
    if config.output.reuse_checkpoints or config.output.require_checkpoints:
        loaded = _load_arm(config, arm, seed, require_match=config.output.require_checkpoints)
        if loaded is not None:
            logger.info('loaded %s/%s (seed %d) from checkpoint', loaded.label, regime, seed)
            return loaded

    rng = RngStream(seed).spawn(arm_index)
    train_batch = data.batch('train', role)
    if regime == 'augmented':
        train_batch = augment_shift_range(
                train_batch.x, train_batch.y, config.training.augment_range, rng, config.training.augment_axis,
        )
    val_batch = data.batch('val', role)
    adam = AdamConfig(learning_rate=config.training.learning_rate)
    started = time.perf_counter()
    if model_kind.startswith('cama'):
        model = CamaModel.create(cama_spec(config, role), rng)
        cama.train(
                model, train_batch, objective_weights(config), config.training.epochs, config.training.batch_size, rng,
                val_data=val_batch, adam=adam,
        )
    else:
        model, _ = baseline.train_classifier(
                classifier_spec(config), train_batch, config.training.epochs, rng,
                val_data=val_batch, batch_size=config.training.batch_size, adam=adam,
        )
    trained = TrainedArm(model_kind, regime, role, model)
    logger.info('trained %s/%s (seed %d) in %.1fs', trained.label, regime, seed, time.perf_counter() - started)
    save_checkpoint(
            model.params, config.checkpoint_path(*arm, seed),
            meta={'arm': list(arm), 'seed': seed, 'fingerprint': _fingerprint(config)},
    )
    return trained


def train_arms(config: ExperimentConfig, data: PreparedData, seed: int) -> List[TrainedArm]:
    return [train_arm(config, data, arm, index, seed) for index, arm in enumerate(config.arms())]


def validation_elbo(data: PreparedData, arm: TrainedArm, arm_index: int, seed: int) -> float:
    """Mean joint ELBO on the validation split, including log p(a) + log p(c) for the generic variant."""
    batch = data.batch('val', arm.role)
    rng = RngStream(seed, ELBO_STREAM).spawn(arm_index)
    return float(np.mean(cama.elbo_joint(arm.model, batch, rng, include_observed_priors=True).data))


def grid_points(config: ExperimentConfig) -> List[GridPoint]:
    fraction = config.finetune_fraction if config.finetune.enabled else None
    if config.experiment.kind == 'finetune-fraction':
        pairs = [(m, f) for m in config.grid.magnitudes for f in config.grid.fractions]
    else:
        pairs = [(m, fraction) for m in config.grid.magnitudes]
    return [GridPoint(i, config.grid.manipulation, float(m), f) for i, (m, f) in enumerate(pairs)]


# Manipulations

def _attack_inputs(batch: LabeledBatch) -> np.ndarray:
    return classifier_inputs(batch)


def _from_attack_inputs(batch: LabeledBatch, inputs: np.ndarray) -> LabeledBatch:
    if batch.a is None:
        return batch.with_x(inputs, clean=False)
    dim_a, dim_c = batch.a.shape[1], batch.c.shape[1]
    return LabeledBatch(
            inputs[:, dim_a + dim_c:], inputs[:, :dim_a], inputs[:, dim_a:dim_a + dim_c],
            y=batch.y, clean=np.zeros(len(batch), dtype=bool),
    )


def attack_batch(
        config: ExperimentConfig,
        arm: TrainedArm,
        batch: LabeledBatch,
        method: str,
        epsilon: float,
        rng: RngStream,
) -> LabeledBatch:
    """White-box attack against the arm's own predictor, in chunks of attack.chunk_rows."""
    if arm.is_cama:
        random_start = config.attack.random_start_cama
    else:
        scorer = make_classifier_scorer(arm.model)
        random_start = config.attack.random_start_baseline
    if batch.a is None:
        mask, box = None, IMAGE_BOX
    else:
        mask, box = measurement_mask(batch.a.shape[1], batch.c.shape[1], batch.x.shape[1]), UNBOUNDED
    cfg = AttackConfig(
            epsilon, step_size=config.attack.step_size, iterations=config.attack.iterations,
            random_start=random_start, box=box, mask=mask,
    )
    inputs = _attack_inputs(batch)
    adversarial = np.empty_like(inputs)
    chunk = config.attack.chunk_rows
    for i, start in enumerate(range(0, len(inputs), chunk)):
        rows = slice(start, start + chunk)
        if arm.is_cama:
            scorer = make_cama_scorer(arm.model, objective_weights(config), rng.spawn(i))
        if method == 'fgsm':
            adversarial[rows] = fgsm(scorer, inputs[rows], batch.y[rows], cfg)
        else:
            adversarial[rows] = pgd(scorer, inputs[rows], batch.y[rows], cfg, rng=rng.spawn(GRID_STREAM_BASE + i))
    return _from_attack_inputs(batch, adversarial)


def manipulate(
        config: ExperimentConfig,
        data: PreparedData,
        arm: TrainedArm,
        manipulation: str,
        magnitude: float,
        rng: RngStream,
) -> LabeledBatch:
    """The test set under a manipulation; a, y and the clean test set are never touched."""
    clean = data.batch('test', arm.role)
    if manipulation in ATTACK_MANIPULATIONS:
        return attack_batch(config, arm, clean, manipulation, magnitude, rng)
    if manipulation == 'shift_coparents':
        shifted = shift_coparents(data.dataset('test'), data.mechanism, magnitude)
        return shifted.to_batch(parse_role_spec(arm.role), clean=magnitude == 0)
    if manipulation == 'shift_children':
        shifted = shift_children(data.dataset('test'), magnitude)
        return shifted.to_batch(parse_role_spec(arm.role), clean=magnitude == 0)
    axis = manipulation[len('shift_'):]
    return clean.with_x(shift_image(clean.x, magnitude, axis), clean=magnitude == 0)


# Evaluation

def arm_accuracy(arm: TrainedArm, batch: LabeledBatch, weights: ObjectiveWeights, rng: RngStream) -> float:
    if arm.is_cama:
        return cama.accuracy(arm.model, batch, weights, rng)
    return baseline.accuracy(arm.model, classifier_inputs(batch), batch.y)


def _save_disentangle(config, arm, point, seed, clean, shifted, model, rng) -> Path:
    k = min(config.output.disentangle_examples, len(clean))
    weights = objective_weights(config)
    path = Path(config.output.directory) / 'disentangle' / \
        f'{config.experiment.id}_{arm.regime}_{point.manipulation}_{point.magnitude:g}_seed{seed}.npz'
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
            path,
            originals=clean.x[:k],
            shifted=shifted.x[:k],
            reconstruction=cama.reconstruct(model, shifted.take(np.arange(k)), rng.replay(), weights),
            counterfactual=cama.counterfactual_reconstruct(model, shifted.take(np.arange(k)), rng.replay(), weights),
            labels=clean.y[:k],
    )
    return path


def evaluate_point(
        config: ExperimentConfig,
        data: PreparedData,
        arms: List[TrainedArm],
        point: GridPoint,
        seed: int,
) -> List[ResultRow]:
    rng = RngStream(seed, GRID_STREAM_BASE + point.index)
    weights = objective_weights(config)
    rows = []
    for arm_index, arm in enumerate(arms):
        started = time.perf_counter()
        arm_rng = rng.spawn(arm_index)
        # Shared by every grid point, so clean accuracy of one model is the same in every row.
        eval_rng = RngStream(seed, EVAL_STREAM).spawn(arm_index)
        clean = data.batch('test', arm.role)
        manipulated = manipulate(config, data, arm, point.manipulation, point.magnitude, arm_rng.spawn(0))

        def row(fraction: float, acc_manipulated: float, acc_clean: float) -> ResultRow:
            return ResultRow(
                    config.experiment.id, arm.label, arm.regime, point.manipulation, point.magnitude, fraction,
                    seed, weights.K, acc_manipulated, acc_clean, time.perf_counter() - started,
            )

        rows.append(row(
                0.0,
                arm_accuracy(arm, manipulated, weights, eval_rng.replay()),
                arm_accuracy(arm, clean, weights, eval_rng.replay()),
        ))
        if not arm.is_cama or point.fraction is None:
            continue

        ft_source = manipulated
        ft_manipulation = config.finetune.manipulation
        if ft_manipulation is not None and ft_manipulation != point.manipulation:
            ft_source = manipulate(config, data, arm, ft_manipulation, point.magnitude, arm_rng.spawn(4))
        n_ft = max(1, math.ceil(point.fraction * len(ft_source)))
        ft_rows = arm_rng.spawn(2).permutation(len(ft_source))[:n_ft]
        model = arm.model.copy()
        cama.fine_tune(
                model, data.batch('train', arm.role), ft_source.take(ft_rows).observations, weights,
                config.finetune.steps, arm_rng.spawn(3),
                adam=AdamConfig(learning_rate=config.finetune.learning_rate),
                batch_size=config.finetune.batch_size,
                use_intervention_for_train=config.finetune.use_intervention,
        )
        tuned = TrainedArm(arm.model_kind, arm.regime, arm.role, model)
        rows.append(row(
                point.fraction,
                arm_accuracy(tuned, manipulated, weights, eval_rng.replay()),
                arm_accuracy(tuned, clean, weights, eval_rng.replay()),
        ))
        if config.output.save_finetuned:
            base = config.checkpoint_path(arm.model_kind, arm.regime, arm.role, seed)
            save_checkpoint(
                    model.params,
                    base.with_name(f'{base.stem}_ft-{point.manipulation}-{point.magnitude:g}.ckpt'),
                    meta={'seed': seed, 'point': asdict(point)},
            )
        if config.experiment.kind == 'disentangle':
            _save_disentangle(config, arm, point, seed, clean, manipulated, model, arm_rng.spawn(5))
    return rows


def _evaluate_safely(config, data, arms, point, seed) -> Tuple[GridPoint, List[ResultRow], Optional[str]]:
    started = time.perf_counter()
    logger.info('grid point %d (%s=%g, seed %d) started', point.index, point.manipulation, point.magnitude, seed)
    try:
        rows = evaluate_point(config, data, arms, point, seed)
    except CamaError as e:
        logger.error('grid point %d (seed %d) failed: %s', point.index, seed, e)
        return point, [], f'seed {seed}, point {point.index}: {e}'
    logger.info('grid point %d (seed %d) finished in %.1fs', point.index, seed, time.perf_counter() - started)
    return point, rows, None


def write_results(rows: List[ResultRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.as_dict() for r in rows], columns=list(RESULT_COLUMNS))
    frame.to_csv(path, index=False, encoding='utf-8')
    return path


def run(config: ExperimentConfig) -> RunResult:
    """Train or load every arm per seed, evaluate every grid point, write CSV and manifest."""
    config = config.validate().resolved()
    out_dir = Path(config.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult()
    points = grid_points(config)

    for seed in config.seeds:
        data = prepare_data(config, seed)
        arms = train_arms(config, data, seed)
        for index, arm in enumerate(arms):
            if arm.is_cama:
                key = f'{arm.label}/{arm.regime}/seed{seed}'
                result.validation_elbo[key] = validation_elbo(data, arm, index, seed)
                logger.info('%s validation ELBO %.3f', key, result.validation_elbo[key])
        jobs = [(config, data, arms, point, seed) for point in points]
        if config.output.workers > 1:
            with Pool(config.output.workers) as pool:
                outcomes = pool.starmap(_evaluate_safely, jobs)
        else:
            outcomes = [_evaluate_safely(*job) for job in jobs]
        for _, rows, failure in sorted(outcomes, key=lambda outcome: outcome[0].index):
            result.rows.extend(rows)
            if failure is not None:
                result.failures.append(failure)

    result.csv_path = write_results(result.rows, out_dir / f'{config.experiment.id}.csv')
    manifest = {
        'config': config.to_mapping(),
        'grid': [asdict(point) for point in points],
        'arms': [list(arm) for arm in config.arms()],
        'checkpoints': [str(config.checkpoint_path(*arm, seed)) for seed in config.seeds for arm in config.arms()],
        'results': str(result.csv_path),
        'failures': result.failures,
        'validation_elbo': result.validation_elbo,
    }
    result.manifest_path = out_dir / f'{config.experiment.id}.manifest.json'
    with open(result.manifest_path, 'w', encoding='utf-8') as handle:
        json.dump(manifest, handle, indent=2)
    logger.info('%d result rows written to %s', len(result.rows), result.csv_path)
    return result
