"""FGSM and PGD on a masked input surface.

An attack sees a victim only through a scorer: ``scorer(x, labels)`` returns
the mean cross-entropy of the victim's predictive distribution and its
gradient with respect to ``x``.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from camabench import ndgrad
from camabench.cama import CamaModel, ObjectiveWeights, Observations, class_scores
from camabench.errors import ConfigError, NonFiniteError, ShapeError
from camabench.ndgrad import Graph
from camabench.stochastics import RngStream

logger = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]
Box = Tuple[float, float]

IMAGE_BOX: Box = (0.0, 1.0)
UNBOUNDED: Box = (-np.inf, np.inf)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: Optional[float] = None
    iterations: int = 40
    random_start: bool = False
    box: Box = UNBOUNDED
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f'epsilon must be non-negative, got {self.epsilon}')
        if self.iterations < 1:
            raise ConfigError(f'PGD needs at least one iteration, got {self.iterations}')
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f'PGD step size must be positive, got {self.step_size}')
        if self.mask is not None and not np.any(self.mask):
            raise ConfigError('The attack mask must leave at least one column perturbable')
        if self.step > self.epsilon > 0:
            logger.warning('PGD step size %g exceeds epsilon %g', self.step, self.epsilon)

    @property
    def step(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size

    def column_mask(self, n_columns: int) -> np.ndarray:
        if self.mask is None:
            return np.ones(n_columns, dtype=bool)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (n_columns,):
            raise ShapeError('attack mask', (n_columns,), mask.shape)
        return mask


def measurement_mask(dim_a: int, dim_c: int, dim_x: int) -> np.ndarray:
    """Over concatenated (a, c, x) columns: parents are never perturbed."""
    return np.concatenate([np.zeros(dim_a, dtype=bool), np.ones(dim_c + dim_x, dtype=bool)])


def _gradient(scorer: Scorer, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _, grad = scorer(x, labels)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ShapeError('attack gradient', x.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError('attack gradient', 'Victim returned a non-finite input gradient')
    return grad


def _project(x_adv: np.ndarray, x: np.ndarray, cfg: AttackConfig, mask: np.ndarray) -> np.ndarray:
    delta = np.clip(x_adv - x, -cfg.epsilon, cfg.epsilon) * mask
    return np.where(mask, np.clip(x + delta, *cfg.box), x)


def fgsm(scorer: Scorer, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    mask = cfg.column_mask(x.shape[1])
    grad = _gradient(scorer, x, labels)
    return _project(x + cfg.epsilon * np.sign(grad), x, cfg, mask)


def pgd(
        scorer: Scorer,
        x: np.ndarray,
        labels: np.ndarray,
        cfg: AttackConfig,
        rng: Optional[RngStream] = None,
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    mask = cfg.column_mask(x.shape[1])
    x_adv = x.copy()
    if cfg.random_start:
        if rng is None:
            raise ConfigError('A random PGD start needs an RngStream')
        x_adv = _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape), x, cfg, mask)
    for _ in range(cfg.iterations):
        grad = _gradient(scorer, x_adv, labels)
        x_adv = _project(x_adv + cfg.step * np.sign(grad), x, cfg, mask)
    return x_adv


def cama_attack_loss(
        model: CamaModel,
        inputs: np.ndarray,
        labels: np.ndarray,
        weights: ObjectiveWeights,
        rng: RngStream,
        a: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """Cross-entropy of the single-m, K-z predictive distribution and its input gradient.

    Every call replays `rng` from the start, so repeated calls share their noise
    and the loss is a deterministic function of `inputs`. For the generic model
    `inputs` holds the (c, x) columns and `a` the untouched parents.
    """
    spec = model.spec
    graph = Graph()
    leaf = graph.leaf('inputs', inputs)
    if spec.generic:
        if a is None:
            raise ConfigError('The generic CAMA scorer needs the parent columns')
        c = ndgrad.slice_cols(leaf, 0, spec.dim_c)
        x = ndgrad.slice_cols(leaf, spec.dim_c, spec.dim_c + spec.dim_x)
        obs = Observations(x.data, a, c.data)
    else:
        c, x = None, leaf
        obs = Observations(inputs)
    scores = class_scores(model, obs, weights.K, rng.replay(), model.bind(), x=x, c=c)
    one_hot = np.eye(spec.dim_y)[np.asarray(labels, dtype=np.int64)]
    loss = ndgrad.scale(ndgrad.mean(ndgrad.sum(ndgrad.log_softmax(scores, axis=1) * one_hot, axis=1)), -1.0)
    return loss.item(), ndgrad.backward(graph, loss)['inputs']


def make_cama_scorer(model: CamaModel, weights: ObjectiveWeights, rng: RngStream) -> Scorer:
    """Scorer over the concatenated (a, c, x) columns for generic models, x for single ones."""
    if not model.spec.generic:
        return lambda x, labels: cama_attack_loss(model, x, labels, weights, rng)
    dim_a = model.spec.dim_a

    def scorer(inputs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        loss, grad = cama_attack_loss(model, inputs[:, dim_a:], labels, weights, rng, a=inputs[:, :dim_a])
        return loss, np.concatenate([np.zeros((len(inputs), dim_a)), grad], axis=1)

    return scorer
