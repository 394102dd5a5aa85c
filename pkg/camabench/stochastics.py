"""Diagonal-Gaussian latents, likelihood terms and seedable random streams."""
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from camabench import ndgrad
from camabench.errors import ShapeError
from camabench.ndgrad import Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
PROB_FLOOR = 1e-7
LOG_2PI = math.log(2.0 * math.pi)

_UINT64 = 2 ** 64


class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Identical keys replay identical draw sequences; distinct stream ids give
    independent streams, so grid points and workers can each own one.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % _UINT64, self.stream % _UINT64], dtype=np.uint64)
        self._generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f'RngStream(seed={self.seed}, stream={self.stream})'

    def spawn(self, child: int) -> 'RngStream':
        state = np.random.SeedSequence([self.seed % _UINT64, self.stream % _UINT64, int(child)])
        return RngStream(self.seed, int(state.generate_state(1, np.uint64)[0]))

    def replay(self) -> 'RngStream':
        """A fresh stream positioned at the start of this stream's sequence."""
        return RngStream(self.seed, self.stream)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._generator.standard_normal(tuple(shape))

    def uniform(self, low: float, high: float, size: Union[int, Sequence[int]]) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size: Union[int, Sequence[int]]) -> np.ndarray:
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def random(self, size: Union[int, Sequence[int]]) -> np.ndarray:
        return self._generator.random(size)


class ClampedLogVariance:
    """Clamps any log-variance assigned to the attribute into [LOG_VAR_MIN, LOG_VAR_MAX]."""

    def __set_name__(self, owner, name):
        self.private_name = f'_{name}'

    def __get__(self, instance, owner):
        if instance is None:
            return self

        return getattr(instance, self.private_name)

    def __set__(self, instance, value) -> None:
        setattr(instance, self.private_name, ndgrad.clip(value, LOG_VAR_MIN, LOG_VAR_MAX))


class DiagGaussian:
    log_var = ClampedLogVariance()

    def __init__(self, mean, log_var):
        mean, log_var = ndgrad.as_tensor(mean), ndgrad.as_tensor(log_var)
        if mean.shape != log_var.shape:
            raise ShapeError('DiagGaussian', mean.shape, log_var.shape)
        self.mean = mean
        self.log_var = log_var

    def __repr__(self):
        return f'DiagGaussian(shape={self.shape})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mean.shape

    @classmethod
    def from_params(cls, params: Tensor, dim: int) -> 'DiagGaussian':
        """Split a (batch, 2*dim) network output into mean and log-variance halves."""
        if params.ndim != 2 or params.shape[1] != 2 * dim:
            raise ShapeError('DiagGaussian.from_params', (params.shape[0], 2 * dim), params.shape)
        return cls(ndgrad.slice_cols(params, 0, dim), ndgrad.slice_cols(params, dim, 2 * dim))

    @classmethod
    def standard(cls, shape: Sequence[int]) -> 'DiagGaussian':
        return cls(np.zeros(shape), np.zeros(shape))


def sample_reparam(
        q: DiagGaussian,
        rng: Optional[RngStream] = None,
        eps: Optional[np.ndarray] = None,
) -> Tuple[Tensor, np.ndarray]:
    if eps is None:
        eps = rng.normal(q.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.shape:
        raise ShapeError('sample_reparam', q.shape, eps.shape)
    std = ndgrad.exp(ndgrad.scale(q.log_var, 0.5))
    return q.mean + std * eps, eps


def gaussian_log_prob(x, q: DiagGaussian) -> Tensor:
    x = ndgrad.as_tensor(x)
    if x.shape != q.shape:
        raise ShapeError('gaussian_log_prob', q.shape, x.shape)
    squared = ndgrad.square(x - q.mean) * ndgrad.exp(-q.log_var)
    per_dim = ndgrad.scale(q.log_var + squared, -0.5)
    return ndgrad.sum(per_dim, axis=1) - 0.5 * LOG_2PI * x.shape[1]


def standard_normal_log_prob(x) -> Tensor:
    x = ndgrad.as_tensor(x)
    return ndgrad.scale(ndgrad.sum(ndgrad.square(x), axis=1), -0.5) - 0.5 * LOG_2PI * x.shape[1]


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    per_dim = ndgrad.square(q.mean) + ndgrad.exp(q.log_var) - q.log_var - 1.0
    return ndgrad.scale(ndgrad.sum(per_dim, axis=1), 0.5)


def bernoulli_log_lik(x, probs) -> Tensor:
    x, probs = ndgrad.as_tensor(x), ndgrad.as_tensor(probs)
    if x.shape != probs.shape:
        raise ShapeError('bernoulli_log_lik', probs.shape, x.shape)
    p = ndgrad.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    per_pixel = x * ndgrad.log(p) + (1.0 - x) * ndgrad.log(1.0 - p)
    return ndgrad.sum(per_pixel, axis=1)


def unit_gaussian_log_lik(x, mean) -> Tensor:
    """Log-density of x under N(mean, I), summed per row."""
    x, mean = ndgrad.as_tensor(x), ndgrad.as_tensor(mean)
    if x.shape != mean.shape:
        raise ShapeError('unit_gaussian_log_lik', mean.shape, x.shape)
    return ndgrad.scale(ndgrad.sum(ndgrad.square(x - mean), axis=1), -0.5) - 0.5 * LOG_2PI * x.shape[1]


def uniform_class_log_prior(n_rows: int, n_classes: int) -> Tensor:
    return ndgrad.constant(np.full(n_rows, -math.log(n_classes)))
