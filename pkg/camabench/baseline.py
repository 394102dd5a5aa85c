"""Discriminative MLP classifiers used as the comparison arm."""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from camabench import ndgrad
from camabench.cama import LabeledBatch, Observations
from camabench.errors import ConfigError, ShapeError
from camabench.nets import MlpSpec, apply_mlp, init_mlp
from camabench.ndgrad import AdamConfig, Graph, ParameterStore
from camabench.stochastics import RngStream

logger = logging.getLogger(__name__)

GROUP = 'classifier'


@dataclass(frozen=True)
class MlpClassifierSpec:
    input_dim: int
    hidden: Tuple[int, ...]
    dropout: Tuple[float, ...]
    n_classes: int

    def __post_init__(self):
        if len(self.hidden) != len(self.dropout):
            raise ConfigError(f'{len(self.hidden)} hidden widths but {len(self.dropout)} dropout rates')
        if any(not 0.0 <= rate < 1.0 for rate in self.dropout):
            raise ConfigError(f'Dropout rates must lie in [0, 1): {self.dropout}')

    @classmethod
    def image(cls, input_dim: int = 784, n_classes: int = 10) -> 'MlpClassifierSpec':
        return cls(input_dim, (512, 256, 126, 512), (0.25, 0.25, 0.25, 0.5), n_classes)

    @classmethod
    def measurement(cls, input_dim: int = 20, n_classes: int = 5) -> 'MlpClassifierSpec':
        return cls(input_dim, (64, 16, 32), (0.25, 0.25, 0.5), n_classes)

    @property
    def network(self) -> MlpSpec:
        return MlpSpec(GROUP, (self.input_dim, *self.hidden, self.n_classes), dropout=self.dropout)


@dataclass
class MlpClassifier:
    spec: MlpClassifierSpec
    params: ParameterStore

    @classmethod
    def create(cls, spec: MlpClassifierSpec, rng: Optional[RngStream] = None, zero: bool = False) -> 'MlpClassifier':
        store = ParameterStore()
        init_mlp(store, spec.network, rng, zero=zero)
        return cls(spec, store)


@dataclass
class ClassifierReport:
    epoch_losses: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    seconds: float = 0.0


def classifier_inputs(batch: Observations) -> np.ndarray:
    """Measurement rows are fed as the concatenation of A, C and X."""
    if batch.a is None:
        return batch.x
    return np.concatenate([batch.a, batch.c, batch.x], axis=1)


def _check_inputs(classifier: MlpClassifier, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != classifier.spec.input_dim:
        raise ShapeError('classifier input', (len(x), classifier.spec.input_dim), x.shape)


def _log_probs(params, spec: MlpClassifierSpec, x, dropout_rng: Optional[RngStream] = None):
    return ndgrad.log_softmax(apply_mlp(params, spec.network, x, dropout_rng), axis=1)


def cross_entropy(params, spec: MlpClassifierSpec, x, labels: np.ndarray, dropout_rng: Optional[RngStream] = None):
    one_hot = np.eye(spec.n_classes)[np.asarray(labels, dtype=np.int64)]
    per_row = ndgrad.sum(_log_probs(params, spec, x, dropout_rng) * one_hot, axis=1)
    return ndgrad.scale(ndgrad.mean(per_row), -1.0)


def classify(classifier: MlpClassifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_inputs(classifier, x)
    return np.exp(_log_probs(classifier.params.bind(), classifier.spec, x).data)


def accuracy(classifier: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> float:
    if len(x) == 0:
        return float('nan')
    return float(np.mean(np.argmax(classify(classifier, x), axis=1) == labels))


def input_gradient(classifier: MlpClassifier, x: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy (dropout off) and its gradient with respect to the inputs."""
    x = np.asarray(x, dtype=np.float64)
    _check_inputs(classifier, x)
    graph = Graph()
    loss = cross_entropy(classifier.params.bind(), classifier.spec, graph.leaf('inputs', x), labels)
    return loss.item(), ndgrad.backward(graph, loss)['inputs']


def make_classifier_scorer(classifier: MlpClassifier):
    return lambda x, labels: input_gradient(classifier, x, labels)


def train_classifier(
        spec: MlpClassifierSpec,
        dataset: LabeledBatch,
        epochs: int,
        rng: RngStream,
        val_data: Optional[LabeledBatch] = None,
        batch_size: int = 64,
        adam: AdamConfig = AdamConfig(),
) -> Tuple[MlpClassifier, ClassifierReport]:
    """Minibatch Adam on softmax cross-entropy, keeping the best-validation parameters."""
    started = time.perf_counter()
    classifier = MlpClassifier.create(spec, rng)
    x = classifier_inputs(dataset)
    _check_inputs(classifier, x)
    report = ClassifierReport()
    best_snapshot = None
    n_steps = math.ceil(len(x) / batch_size)

    for epoch in range(epochs):
        perm = rng.permutation(len(x))
        losses = []
        for step in range(n_steps):
            idx = perm[step * batch_size:(step + 1) * batch_size]
            graph = Graph()
            loss = cross_entropy(classifier.params.bind(graph), spec, x[idx], dataset.y[idx], dropout_rng=rng)
            ndgrad.adam_step(classifier.params, ndgrad.backward(graph, loss), adam)
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))

        if val_data is not None and len(val_data):
            acc = accuracy(classifier, classifier_inputs(val_data), val_data.y)
            report.val_accuracy.append(acc)
            if report.best_val_accuracy is None or acc > report.best_val_accuracy:
                report.best_val_accuracy, report.best_epoch = acc, epoch
                best_snapshot = classifier.params.snapshot()
            logger.info('epoch %d: loss %.4f, validation accuracy %.4f', epoch, report.epoch_losses[-1], acc)
        else:
            logger.info('epoch %d: loss %.4f', epoch, report.epoch_losses[-1])

    if best_snapshot is not None:
        classifier.params.restore(best_snapshot)
    report.seconds = time.perf_counter() - started
    return classifier, report
