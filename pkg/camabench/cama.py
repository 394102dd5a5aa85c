"""Causal manipulation augmented generative classifier.

Two variants share one code path:

* ``single``: p(x, y, z, m) = p(m) p(z) p(y) p(x | y, z, m),
  q(z, m | x, y) = q(z | x, y, m) q(m | x).
* ``generic``: measurement data with parents A and co-parents C of the target,
  p(y | a) replaces p(y), the decoder additionally sees c and q(z | .) sees a, c.

The manipulation latent m has the zero vector as its null value; do(m=0)
objectives hard-set it and drop its prior and posterior terms.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from camabench import ndgrad
from camabench.errors import BatchError, ConfigError, MaskError
from camabench.nets import MlpSpec, apply_mlp, init_mlp
from camabench.ndgrad import AdamConfig, Graph, ParameterStore, Tensor
from camabench.stochastics import (
    DiagGaussian,
    RngStream,
    bernoulli_log_lik,
    gaussian_log_prob,
    sample_reparam,
    standard_normal_log_prob,
    uniform_class_log_prior,
    unit_gaussian_log_lik,
)

logger = logging.getLogger(__name__)

NN_Y_P = 'NN_Y^p'
NN_Z_P = 'NN_Z^p'
NN_M_P = 'NN_M^p'
NN_C_P = 'NN_C^p'
NN_MERGE_P = 'NN_merge^p'
NN_M_Q = 'NN_M^q'
NN_Z_Q = 'NN_Z^q'
NN_Y_GIVEN_A = 'NN_YgivenA'

SINGLE_GROUPS = (NN_Y_P, NN_Z_P, NN_M_P, NN_MERGE_P, NN_M_Q, NN_Z_Q)
GENERIC_GROUPS = SINGLE_GROUPS + (NN_C_P, NN_Y_GIVEN_A)
FINETUNE_GROUPS = (NN_M_P, NN_M_Q)

VARIANTS = ('single', 'generic')
LIKELIHOODS = ('bernoulli', 'gaussian')
M_PATH_BIAS = 0.1

# Oracle replacement for the decoder: (x, labels, c) -> per-row log p(x | y, c).
LogLikelihood = Callable[[Tensor, np.ndarray, Optional[np.ndarray]], Tensor]


@dataclass(frozen=True)
class CamaSpec:
    variant: str
    dim_x: int
    dim_y: int
    dim_z: int = 64
    dim_m: int = 32
    dim_a: Optional[int] = None
    dim_c: Optional[int] = None
    hidden: int = 500
    hidden_m: Tuple[int, ...] = (500, 500, 500, 500)
    hidden_merge: Optional[Tuple[int, ...]] = None
    likelihood: str = 'bernoulli'

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f'Unknown CAMA variant "{self.variant}", expected one of {VARIANTS}')
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f'Unknown likelihood "{self.likelihood}", expected one of {LIKELIHOODS}')
        if self.variant == 'single' and (self.dim_a is not None or self.dim_c is not None):
            raise ConfigError('The single-modality variant takes no parent or co-parent dimensions')
        if self.variant == 'generic' and (self.dim_a is None or self.dim_c is None):
            raise ConfigError('The generic variant needs dim_a and dim_c')
        dims = [self.dim_x, self.dim_y, self.dim_z, self.dim_m, self.hidden, *self.hidden_m, *self.merge_widths]
        if self.variant == 'generic':
            dims += [self.dim_a, self.dim_c]
        if not self.hidden_m or any(int(d) < 1 for d in dims):
            raise ConfigError(f'All CAMA dimensions and widths must be positive integers: {self}')

    @classmethod
    def image(cls, dim_x: int = 784, **kwargs) -> 'CamaSpec':
        kwargs.setdefault('dim_y', 10)
        return cls(variant='single', dim_x=dim_x, likelihood='bernoulli', **kwargs)

    @classmethod
    def measurement(cls, dim_x: int = 10, dim_a: int = 5, dim_c: int = 5, **kwargs) -> 'CamaSpec':
        kwargs.setdefault('dim_y', 5)
        return cls(variant='generic', dim_x=dim_x, dim_a=dim_a, dim_c=dim_c, likelihood='gaussian', **kwargs)

    @property
    def generic(self) -> bool:
        return self.variant == 'generic'

    @property
    def merge_widths(self) -> Tuple[int, ...]:
        """Hidden widths of NN_merge^p; an empty tuple makes the merge a single linear layer."""
        return (self.hidden,) if self.hidden_merge is None else tuple(self.hidden_merge)

    @property
    def groups(self) -> Tuple[str, ...]:
        return GENERIC_GROUPS if self.generic else SINGLE_GROUPS

    def networks(self) -> Dict[str, MlpSpec]:
        h = self.hidden
        feature_width = 2 * h + self.hidden_m[-1] + (h if self.generic else 0)
        z_inputs = self.dim_x + self.dim_y + self.dim_m + ((self.dim_a + self.dim_c) if self.generic else 0)
        nets = {
            NN_Y_P: MlpSpec(NN_Y_P, (self.dim_y, h, h), final='relu'),
            NN_Z_P: MlpSpec(NN_Z_P, (self.dim_z, h, h), final='relu'),
            NN_M_P: MlpSpec(NN_M_P, (self.dim_m, *self.hidden_m), final='relu'),
            NN_MERGE_P: MlpSpec(NN_MERGE_P, (feature_width, *self.merge_widths, self.dim_x)),
            NN_M_Q: MlpSpec(NN_M_Q, (self.dim_x, h, h, 2 * self.dim_m)),
            NN_Z_Q: MlpSpec(NN_Z_Q, (z_inputs, h, h, 2 * self.dim_z)),
        }
        if self.generic:
            nets[NN_C_P] = MlpSpec(NN_C_P, (self.dim_c, h, h), final='relu')
            nets[NN_Y_GIVEN_A] = MlpSpec(NN_Y_GIVEN_A, (self.dim_a, h, h, self.dim_y))
        return nets


@dataclass(frozen=True)
class ObjectiveWeights:
    lam: float = 0.5
    alpha: float = 0.5
    K: int = 16
    U: int = 1

    def __post_init__(self):
        for name in ('lam', 'alpha'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f'{name} must lie in [0, 1], got {value}')
        if self.K < 1 or self.U < 1:
            raise ConfigError(f'K and U must be at least 1, got K={self.K}, U={self.U}')


@dataclass
class Observations:
    x: np.ndarray
    a: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        for name in ('a', 'c'):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                setattr(self, name, value)
                if len(value) != len(self.x):
                    raise BatchError(f'Row count of {name} ({len(value)}) differs from x ({len(self.x)})')

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> 'Observations':
        return Observations(
                self.x[idx],
                None if self.a is None else self.a[idx],
                None if self.c is None else self.c[idx],
        )


@dataclass
class LabeledBatch(Observations):
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    clean: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) != len(self.x):
            raise BatchError(f'Row count of y ({len(self.y)}) differs from x ({len(self.x)})')
        self.clean = np.ones(len(self.x), dtype=bool) if self.clean is None else np.asarray(self.clean, dtype=bool)
        if len(self.clean) != len(self.x):
            raise BatchError(f'Row count of clean flags ({len(self.clean)}) differs from x ({len(self.x)})')

    @property
    def all_clean(self) -> bool:
        return bool(self.clean.all())

    @property
    def observations(self) -> Observations:
        return Observations(self.x, self.a, self.c)

    def take(self, idx) -> 'LabeledBatch':
        return LabeledBatch(
                self.x[idx],
                None if self.a is None else self.a[idx],
                None if self.c is None else self.c[idx],
                y=self.y[idx],
                clean=self.clean[idx],
        )

    def clean_rows(self) -> 'LabeledBatch':
        return self.take(np.flatnonzero(self.clean))

    def manipulated_rows(self) -> 'LabeledBatch':
        return self.take(np.flatnonzero(~self.clean))

    def with_x(self, x: np.ndarray, clean: Optional[bool] = None) -> 'LabeledBatch':
        flags = self.clean if clean is None else np.full(len(self.x), clean)
        return LabeledBatch(x, self.a, self.c, y=self.y, clean=flags)

    @classmethod
    def concat(cls, batches: Sequence['LabeledBatch']) -> 'LabeledBatch':
        def stack(name):
            values = [getattr(b, name) for b in batches]
            return None if values[0] is None else np.concatenate(values)

        return cls(
                stack('x'), stack('a'), stack('c'),
                y=np.concatenate([b.y for b in batches]),
                clean=np.concatenate([b.clean for b in batches]),
        )


ObservationsLike = Union[Observations, np.ndarray]


def _as_observations(batch: ObservationsLike) -> Observations:
    return batch if isinstance(batch, Observations) else Observations(batch)


def _silence_m_path(store: ParameterStore, spec: CamaSpec, networks: Mapping[str, MlpSpec]) -> None:
    """Zero every weight through which m reaches the decoder or q(z|.), and start q(m|x) at the prior."""
    last_w, _ = networks[NN_M_Q].param_names()[-1]
    store[last_w][...] = 0.0
    first_w, first_b = networks[NN_M_P].param_names()[0]
    store[first_w][...] = 0.0
    # Positive so the first ReLU stays live and NN_M^p can still learn.
    store[first_b][...] = M_PATH_BIAS
    z_first_w, _ = networks[NN_Z_Q].param_names()[0]
    start = spec.dim_x + spec.dim_y
    store[z_first_w][start:start + spec.dim_m] = 0.0


class CamaModel:
    def __init__(self, spec: CamaSpec, params: ParameterStore):
        self.spec = spec
        self.params = params
        self.networks = spec.networks()
        missing = [group for group in spec.groups if group not in params.groups]
        extra = [group for group in params.groups if group not in spec.groups]
        if missing or extra:
            raise ConfigError(f'Parameter groups do not match the {spec.variant} model: missing={missing}, extra={extra}')

    def __repr__(self):
        return f'CamaModel({self.spec.variant}, dim_x={self.spec.dim_x}, dim_y={self.spec.dim_y})'

    @classmethod
    def create(cls, spec: CamaSpec, rng: Optional[RngStream] = None, zero: bool = False) -> 'CamaModel':
        store = ParameterStore()
        networks = spec.networks()
        for group in spec.groups:
            init_mlp(store, networks[group], rng, zero=zero)
        if not zero:
            _silence_m_path(store, spec, networks)
        return cls(spec, store)

    @property
    def null_m(self) -> np.ndarray:
        return np.zeros(self.spec.dim_m)

    def bind(self, graph: Optional[Graph] = None, groups: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
        return self.params.bind(graph, groups)

    def frozen(self) -> 'CamaModel':
        return CamaModel(self.spec, self.params.freeze())

    def copy(self) -> 'CamaModel':
        return CamaModel(self.spec, self.params.copy())


# Network pieces

def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def _require_covariates(model: CamaModel, obs: Observations) -> None:
    if model.spec.generic and (obs.a is None or obs.c is None):
        raise BatchError('The generic CAMA variant needs parent (a) and co-parent (c) columns')


def _encode_m(model: CamaModel, params, x) -> DiagGaussian:
    out = apply_mlp(params, model.networks[NN_M_Q], x)
    return DiagGaussian.from_params(out, model.spec.dim_m)


def _encode_z(model: CamaModel, params, x, y1h, m, a=None, c=None) -> DiagGaussian:
    parts = [x, y1h, m] + ([a, c] if model.spec.generic else [])
    out = apply_mlp(params, model.networks[NN_Z_Q], ndgrad.concat(parts, axis=1))
    return DiagGaussian.from_params(out, model.spec.dim_z)


def _decode(model: CamaModel, params, y1h, z, m, c=None) -> Tensor:
    """Decoder output before the likelihood head: logits (bernoulli) or the mean (gaussian)."""
    features = [
        apply_mlp(params, model.networks[NN_Y_P], y1h),
        apply_mlp(params, model.networks[NN_Z_P], z),
        apply_mlp(params, model.networks[NN_M_P], m),
    ]
    if model.spec.generic:
        features.append(apply_mlp(params, model.networks[NN_C_P], c))
    return apply_mlp(params, model.networks[NN_MERGE_P], ndgrad.concat(features, axis=1))


def _decoder_mean(model: CamaModel, decoded: Tensor) -> Tensor:
    return ndgrad.sigmoid(decoded) if model.spec.likelihood == 'bernoulli' else decoded


def _log_likelihood(model: CamaModel, x, decoded: Tensor) -> Tensor:
    if model.spec.likelihood == 'bernoulli':
        return bernoulli_log_lik(x, ndgrad.sigmoid(decoded))
    return unit_gaussian_log_lik(x, decoded)


def _log_prior_y(model: CamaModel, params, y1h: np.ndarray, a=None) -> Tensor:
    if not model.spec.generic:
        return uniform_class_log_prior(len(y1h), model.spec.dim_y)
    logits = apply_mlp(params, model.networks[NN_Y_GIVEN_A], a)
    return ndgrad.sum(ndgrad.log_softmax(logits, axis=1) * y1h, axis=1)


# Objectives

@dataclass
class ElboTerms:
    log_px: Tensor
    log_py: Tensor
    log_pz: Tensor
    log_qz: Tensor
    log_pm: Tensor
    log_qm: Tensor

    @property
    def total(self) -> Tensor:
        return self.log_px + self.log_py + self.log_pz - self.log_qz + self.log_pm - self.log_qm

    @property
    def without_m(self) -> Tensor:
        return self.log_px + self.log_py + self.log_pz - self.log_qz


def _z_terms(model, params, x, y1h, m, a, c, rng):
    qz = _encode_z(model, params, x, y1h, m, a, c)
    z, _ = sample_reparam(qz, rng)
    log_px = _log_likelihood(model, x, _decode(model, params, y1h, z, m, c))
    return log_px, _log_prior_y(model, params, y1h, a), standard_normal_log_prob(z), gaussian_log_prob(z, qz)


def elbo_terms(
        model: CamaModel,
        batch: LabeledBatch,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
        x=None,
        force_null_m: bool = False,
        m_value: Optional[np.ndarray] = None,
) -> ElboTerms:
    """Single-sample terms of the labeled ELBO.

    With `force_null_m` (or an explicit `m_value`) q(m|x) is a point mass: no
    m noise is drawn and the m prior/posterior terms are zero.
    """
    _require_covariates(model, batch)
    params = model.bind() if params is None else params
    x = batch.x if x is None else x
    n = len(batch)
    y1h = _one_hot(batch.y, model.spec.dim_y)
    if force_null_m or m_value is not None:
        value = model.null_m if m_value is None else np.asarray(m_value, dtype=np.float64)
        m = ndgrad.constant(np.broadcast_to(value, (n, model.spec.dim_m)))
        log_pm = log_qm = ndgrad.constant(np.zeros(n))
    else:
        qm = _encode_m(model, params, x)
        m, _ = sample_reparam(qm, rng)
        log_pm, log_qm = standard_normal_log_prob(m), gaussian_log_prob(m, qm)
    log_px, log_py, log_pz, log_qz = _z_terms(model, params, x, y1h, m, batch.a, batch.c, rng)
    return ElboTerms(log_px, log_py, log_pz, log_qz, log_pm, log_qm)


def elbo_intervention(
        model: CamaModel,
        batch: LabeledBatch,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
        m_value: Optional[np.ndarray] = None,
) -> Tensor:
    """Per-row ELBO of log p(x, y | do(m = m_value)), the null vector by default."""
    if m_value is None and not batch.all_clean:
        raise BatchError(
                f'{int((~batch.clean).sum())} manipulated rows passed to the intervention ELBO; '
                f'route them to elbo_joint'
        )
    return elbo_terms(model, batch, rng, params, force_null_m=True, m_value=m_value).without_m


def elbo_joint(
        model: CamaModel,
        batch: LabeledBatch,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
        include_observed_priors: bool = False,
) -> Tensor:
    """Per-row ELBO of log p(x, y) with m inferred through q(m | x)."""
    value = elbo_terms(model, batch, rng, params).total
    if include_observed_priors and model.spec.generic:
        value = value + standard_normal_log_prob(batch.a) + standard_normal_log_prob(batch.c)
    return value


def elbo_marginal(
        model: CamaModel,
        x_batch: ObservationsLike,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """Per-row log-sum-exp over classes of the joint ELBO: a lower bound of log p(x).

    One m draw per row is shared by all classes.
    """
    obs = _as_observations(x_batch)
    _require_covariates(model, obs)
    params = model.bind() if params is None else params
    n, n_classes = len(obs), model.spec.dim_y
    qm = _encode_m(model, params, obs.x)
    m, _ = sample_reparam(qm, rng)
    log_m = standard_normal_log_prob(m) - gaussian_log_prob(m, qm)

    rows = np.tile(np.arange(n), n_classes)
    labels = np.repeat(np.arange(n_classes), n)
    tiled = obs.take(rows)
    log_px, log_py, log_pz, log_qz = _z_terms(
            model, params, tiled.x, _one_hot(labels, n_classes), ndgrad.take_rows(m, rows), tiled.a, tiled.c, rng,
    )
    per_class = log_px + log_py + log_pz - log_qz + ndgrad.take_rows(log_m, rows)
    by_row = ndgrad.transpose(ndgrad.reshape(per_class, (n_classes, n)))
    return ndgrad.logsumexp(by_row, axis=1)


def class_scores(
        model: CamaModel,
        x_batch: ObservationsLike,
        K: int,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
        x=None,
        c=None,
        log_likelihood: Optional[LogLikelihood] = None,
) -> Tensor:
    """(n, C) Monte-Carlo estimates of log p(x, y_c) for one m ~ q(m|x) and K z's per class.

    `x` and `c` may be tracked tensors standing in for the batch columns, so the
    scores can be differentiated with respect to the inputs. With an oracle
    `log_likelihood` the scores are exact: log p(y_c | a) + log p(x | y_c, c),
    with neither m nor z drawn.
    """
    obs = _as_observations(x_batch)
    _require_covariates(model, obs)
    if K < 1:
        raise ConfigError(f'K must be at least 1, got {K}')
    params = model.bind() if params is None else params
    x = ndgrad.as_tensor(obs.x if x is None else x)
    n, n_classes = len(obs), model.spec.dim_y
    if log_likelihood is not None:
        return _oracle_scores(model, params, obs, x, c, log_likelihood)
    m, _ = sample_reparam(_encode_m(model, params, x), rng)

    # Row order (class, row, sample) so that samples of one (row, class) are contiguous.
    rows = np.tile(np.repeat(np.arange(n), K), n_classes)
    labels = np.repeat(np.arange(n_classes), n * K)
    a = None if obs.a is None else obs.a[rows]
    if c is not None:
        c = ndgrad.take_rows(c, rows)
    elif obs.c is not None:
        c = obs.c[rows]
    log_px, log_py, log_pz, log_qz = _z_terms(
            model, params, ndgrad.take_rows(x, rows), _one_hot(labels, n_classes), ndgrad.take_rows(m, rows), a, c, rng,
    )
    log_w = ndgrad.reshape(log_px + log_py + log_pz - log_qz, (n_classes * n, K))
    scores = ndgrad.logsumexp(log_w, axis=1) - math.log(K)
    return ndgrad.transpose(ndgrad.reshape(scores, (n_classes, n)))


def _oracle_scores(model: CamaModel, params, obs: Observations, x: Tensor, c, log_likelihood: LogLikelihood) -> Tensor:
    n, n_classes = len(obs), model.spec.dim_y
    rows = np.tile(np.arange(n), n_classes)
    labels = np.repeat(np.arange(n_classes), n)
    if c is None:
        c = obs.c
    c_rows = None if c is None else ndgrad.as_tensor(c).data[rows]
    a_rows = None if obs.a is None else obs.a[rows]
    log_px = log_likelihood(ndgrad.take_rows(x, rows), labels, c_rows)
    log_py = _log_prior_y(model, params, _one_hot(labels, n_classes), a_rows)
    return ndgrad.transpose(ndgrad.reshape(log_px + log_py, (n_classes, n)))


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def predict(
        model: CamaModel,
        x_batch: ObservationsLike,
        weights: ObjectiveWeights,
        rng: RngStream,
        log_likelihood: Optional[LogLikelihood] = None,
        chunk_rows: Optional[int] = None,
) -> np.ndarray:
    """Predictive class probabilities, averaged over U draws of m."""
    if weights.K < 1 or weights.U < 1:
        raise ConfigError(f'K and U must be at least 1, got K={weights.K}, U={weights.U}')
    obs = _as_observations(x_batch)
    params = model.bind()
    chunk_rows = chunk_rows or max(1, 4096 // (weights.K * model.spec.dim_y))
    probs = np.zeros((len(obs), model.spec.dim_y))
    for idx in _chunks(len(obs), chunk_rows):
        part = obs.take(idx)
        for _ in range(weights.U):
            scores = class_scores(model, part, weights.K, rng, params, log_likelihood=log_likelihood)
            probs[idx] += ndgrad.softmax(scores, axis=1).data
    return probs / weights.U


def predict_labels(model: CamaModel, x_batch: ObservationsLike, weights: ObjectiveWeights, rng: RngStream, **kwargs) -> np.ndarray:
    # np.argmax returns the lowest index on ties.
    return np.argmax(predict(model, x_batch, weights, rng, **kwargs), axis=1)


def accuracy(model: CamaModel, batch: LabeledBatch, weights: ObjectiveWeights, rng: RngStream, **kwargs) -> float:
    if len(batch) == 0:
        return float('nan')
    return float(np.mean(predict_labels(model, batch, weights, rng, **kwargs) == batch.y))


def loss_aug(
        model: CamaModel,
        clean_batch: LabeledBatch,
        manip_batch: Optional[LabeledBatch],
        weights: ObjectiveWeights,
        rng: RngStream,
        params: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """lam * E_clean[intervention ELBO] + (1 - lam) * E_manipulated[joint ELBO], to be maximised."""
    lam = weights.lam
    has_manip = manip_batch is not None and len(manip_batch) > 0
    if lam < 1.0 and not has_manip:
        raise BatchError(f'lambda={lam} needs manipulated rows, but the manipulated batch is empty')
    if lam > 0.0 and len(clean_batch) == 0:
        raise BatchError(f'lambda={lam} needs clean rows, but the clean batch is empty')
    if lam > 0.0 and not clean_batch.all_clean:
        raise BatchError('The clean batch contains rows flagged as manipulated')

    clean_term = ndgrad.mean(elbo_intervention(model, clean_batch, rng, params)) if lam > 0.0 else None
    manip_term = ndgrad.mean(elbo_joint(model, manip_batch, rng, params)) if lam < 1.0 else None
    if manip_term is None:
        return clean_term
    if clean_term is None:
        return manip_term
    return ndgrad.scale(clean_term, lam) + ndgrad.scale(manip_term, 1.0 - lam)


def loss_ft(
        model: CamaModel,
        train_batch: LabeledBatch,
        test_batch: ObservationsLike,
        weights: ObjectiveWeights,
        rng: RngStream,
        use_intervention_for_train: bool = False,
        params: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """alpha * E_train[labeled ELBO] + (1 - alpha) * E_test[marginal ELBO], to be maximised."""
    alpha = weights.alpha
    labeled = None
    if alpha > 0.0:
        if use_intervention_for_train and train_batch.all_clean:
            labeled = ndgrad.mean(elbo_intervention(model, train_batch, rng, params))
        else:
            labeled = ndgrad.mean(elbo_joint(model, train_batch, rng, params))
    marginal = ndgrad.mean(elbo_marginal(model, test_batch, rng, params)) if alpha < 1.0 else None
    if marginal is None:
        return labeled
    if labeled is None:
        return marginal
    return ndgrad.scale(labeled, alpha) + ndgrad.scale(marginal, 1.0 - alpha)


# Training and adaptation

@dataclass
class TrainReport:
    epoch_objectives: List[float] = field(default_factory=list)
    step_objectives: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_accuracy: Optional[float] = None
    seconds: float = 0.0


@dataclass
class FineTuneReport:
    objectives: List[float] = field(default_factory=list)
    groups: Tuple[str, ...] = FINETUNE_GROUPS
    seconds: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.objectives)


def _wrapped(perm: np.ndarray, step: int, size: int) -> np.ndarray:
    size = min(size, len(perm))
    return perm[np.arange(step * size, (step + 1) * size) % len(perm)]


def train(
        model: CamaModel,
        dataset: LabeledBatch,
        weights: ObjectiveWeights,
        epochs: int,
        batch_size: int,
        rng: RngStream,
        val_data: Optional[LabeledBatch] = None,
        adam: AdamConfig = AdamConfig(),
        eval_weights: Optional[ObjectiveWeights] = None,
) -> TrainReport:
    """Minibatch Adam ascent on loss_aug; keeps the parameters with the best validation accuracy."""
    started = time.perf_counter()
    clean_idx = np.flatnonzero(dataset.clean)
    manip_idx = np.flatnonzero(~dataset.clean)
    if not len(manip_idx):
        weights = replace(weights, lam=1.0)
    elif not len(clean_idx):
        weights = replace(weights, lam=0.0)
    eval_weights = eval_weights or weights
    n_steps = math.ceil(max(len(clean_idx), len(manip_idx)) / batch_size)
    report = TrainReport()
    best_snapshot = None

    for epoch in range(epochs):
        clean_perm = clean_idx[rng.permutation(len(clean_idx))]
        manip_perm = manip_idx[rng.permutation(len(manip_idx))]
        epoch_values = []
        for step in range(n_steps):
            clean_batch = dataset.take(_wrapped(clean_perm, step, batch_size)) if len(clean_perm) else dataset.take(clean_perm)
            manip_batch = dataset.take(_wrapped(manip_perm, step, batch_size)) if len(manip_perm) else None
            graph = Graph()
            params = model.bind(graph)
            objective = loss_aug(model, clean_batch, manip_batch, weights, rng, params)
            grads = ndgrad.backward(graph, -objective)
            ndgrad.adam_step(model.params, grads, adam)
            epoch_values.append(objective.item())
        report.step_objectives.extend(epoch_values)
        report.epoch_objectives.append(float(np.mean(epoch_values)))

        if val_data is not None and len(val_data):
            acc = accuracy(model, val_data, eval_weights, rng.spawn(epoch))
            report.val_accuracy.append(acc)
            if report.best_val_accuracy is None or acc > report.best_val_accuracy:
                report.best_val_accuracy, report.best_epoch = acc, epoch
                best_snapshot = model.params.snapshot()
            logger.info('epoch %d: objective %.4f, validation accuracy %.4f', epoch, report.epoch_objectives[-1], acc)
        else:
            logger.info('epoch %d: objective %.4f', epoch, report.epoch_objectives[-1])

    if best_snapshot is not None:
        model.params.restore(best_snapshot)
    report.seconds = time.perf_counter() - started
    return report


def fine_tune(
        model: CamaModel,
        train_data: LabeledBatch,
        test_data: ObservationsLike,
        weights: ObjectiveWeights,
        steps: int,
        rng: RngStream,
        adam: AdamConfig = AdamConfig(),
        batch_size: int = 64,
        use_intervention_for_train: bool = False,
        log_every: int = 50,
) -> FineTuneReport:
    """Test-time adaptation of the networks that depend only on m (NN_M^p, NN_M^q)."""
    started = time.perf_counter()
    test_obs = _as_observations(test_data)
    frozen_groups = [group for group in model.spec.groups if group not in FINETUNE_GROUPS]
    before = {group: model.params.checksum(group) for group in frozen_groups}
    report = FineTuneReport()

    for step in range(steps):
        train_idx = rng.integers(0, len(train_data), min(batch_size, len(train_data)))
        test_idx = rng.integers(0, len(test_obs), min(batch_size, len(test_obs)))
        graph = Graph()
        params = model.bind(graph, FINETUNE_GROUPS)
        objective = loss_ft(
                model, train_data.take(train_idx), test_obs.take(test_idx), weights, rng,
                use_intervention_for_train=use_intervention_for_train, params=params,
        )
        grads = ndgrad.backward(graph, -objective)
        ndgrad.adam_step(model.params, model.params.select(grads, FINETUNE_GROUPS), adam, mask=FINETUNE_GROUPS)
        report.objectives.append(objective.item())
        if log_every and (step + 1) % log_every == 0:
            logger.info('fine-tune step %d: objective %.4f', step + 1, report.objectives[-1])

    leaked = [group for group in frozen_groups if model.params.checksum(group) != before[group]]
    if leaked:
        raise MaskError(f'Fine-tuning modified frozen groups {leaked}')
    report.seconds = time.perf_counter() - started
    return report


# Reconstruction

def _reconstruct(model, x_batch, rng, weights, null_m):
    obs = _as_observations(x_batch)
    _require_covariates(model, obs)
    params = model.bind()
    m, _ = sample_reparam(_encode_m(model, params, obs.x), rng)
    labels = predict_labels(model, obs, weights, rng)
    y1h = _one_hot(labels, model.spec.dim_y)
    qz = _encode_z(model, params, obs.x, y1h, m, obs.a, obs.c)
    z, _ = sample_reparam(qz, rng)
    if null_m:
        m = ndgrad.constant(np.zeros((len(obs), model.spec.dim_m)))
    return _decoder_mean(model, _decode(model, params, y1h, z, m, obs.c)).data


def reconstruct(model: CamaModel, x_batch: ObservationsLike, rng: RngStream,
                weights: ObjectiveWeights = ObjectiveWeights()) -> np.ndarray:
    return _reconstruct(model, x_batch, rng, weights, null_m=False)


def counterfactual_reconstruct(model: CamaModel, x_batch: ObservationsLike, rng: RngStream,
                               weights: ObjectiveWeights = ObjectiveWeights()) -> np.ndarray:
    """Decoder mean under (y, z, do(m=0)) with y predicted and z inferred from the input."""
    return _reconstruct(model, x_batch, rng, weights, null_m=True)
