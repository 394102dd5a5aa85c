"""Synthetic measurement data, IDX image ingestion and the manipulations applied to both."""
import gzip
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from camabench import ndgrad
from camabench.cama import LabeledBatch
from camabench.errors import ConfigError, FormatError, MechanismMismatchError, ShapeError
from camabench.ndgrad import Tensor
from camabench.stochastics import LOG_2PI, RngStream
from camabench.utils import (
    IMAGE_LABEL_MAGIC,
    IMAGE_MAGIC,
    MEASUREMENT_COLUMNS,
    N_CHILDREN,
    N_CLASSES,
    N_COPARENTS,
    N_PARENTS,
    SPLITS,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SHIFT_AXES = ('vertical', 'horizontal', 'both')


def parent_scores(a: np.ndarray) -> np.ndarray:
    return 0.2 * np.square(a) - 0.8 * a


@dataclass(frozen=True)
class MeasurementMechanism:
    """Y = argmax(g(A) + noise), X = standardize(f(onehot(Y) ++ C)) + noise.

    f is a per-child quadratic: f_j(v) = sum_k q[j, k] v_k^2 + w[j, k] v_k + b[j].
    """
    seed: int
    q: np.ndarray
    w: np.ndarray
    b: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    sigma_y: float = 0.1
    sigma_x: float = 0.1

    @property
    def n_children(self) -> int:
        return len(self.b)

    def labels(self, a: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        scores = parent_scores(np.asarray(a, dtype=np.float64))
        if noise is not None:
            scores = scores + noise
        return np.argmax(scores, axis=1)

    def raw_children(self, y: np.ndarray, c: np.ndarray) -> np.ndarray:
        v = np.concatenate([np.eye(N_CLASSES)[np.asarray(y, dtype=np.int64)], np.asarray(c, dtype=np.float64)], axis=1)
        return np.square(v) @ self.q.T + v @ self.w.T + self.b

    def children_mean(self, y: np.ndarray, c: np.ndarray) -> np.ndarray:
        return (self.raw_children(y, c) - self.x_mean) / self.x_std

    def log_likelihood(self, x, labels: np.ndarray, c: Optional[np.ndarray]) -> Tensor:
        """Per-row log N(x; children_mean(y, c), sigma_x^2 I), differentiable in x."""
        x = ndgrad.as_tensor(x)
        mean = self.children_mean(labels, c)
        if x.shape != mean.shape:
            raise ShapeError('MeasurementMechanism.log_likelihood', mean.shape, x.shape)
        squared = ndgrad.sum(ndgrad.square(x - mean), axis=1)
        log_norm = 0.5 * x.shape[1] * (LOG_2PI + 2.0 * math.log(self.sigma_x))
        return ndgrad.scale(squared, -0.5 / self.sigma_x ** 2) - log_norm


@dataclass(frozen=True)
class MeasurementDataset:
    a: np.ndarray
    c: np.ndarray
    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    seed: Optional[int] = None
    x_noise: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, split: str) -> 'MeasurementDataset':
        if split not in SPLITS:
            raise ConfigError(f'Unknown split "{split}", expected one of {SPLITS}')
        idx = np.flatnonzero(self.split == split)
        return MeasurementDataset(
                self.a[idx], self.c[idx], self.x[idx], self.y[idx], self.split[idx], self.seed,
                None if self.x_noise is None else self.x_noise[idx],
        )

    def columns(self) -> pd.DataFrame:
        frame = pd.DataFrame(np.concatenate([self.a, self.c, self.x], axis=1), columns=MEASUREMENT_COLUMNS[:-2])
        frame['y'] = self.y
        frame['split'] = self.split
        return frame

    def to_batch(self, role_map: Optional['RoleMap'] = None, clean: bool = True) -> LabeledBatch:
        a, c, x = (role_map or RoleMap.default()).view(self)
        return LabeledBatch(x, a, c, y=self.y, clean=np.full(len(self), clean))


@dataclass(frozen=True)
class RoleMap:
    parents: Tuple[str, ...]
    coparents: Tuple[str, ...]
    children: Tuple[str, ...]
    target: str = 'y'

    def __post_init__(self):
        names = self.parents + self.coparents + self.children
        if len(set(names)) != len(names) or self.target in names:
            raise ConfigError(f'Roles must partition the observed columns: {self}')

    @classmethod
    def default(cls) -> 'RoleMap':
        return cls(
                tuple(f'a{i}' for i in range(N_PARENTS)),
                tuple(f'c{i}' for i in range(N_COPARENTS)),
                tuple(f'x{i}' for i in range(N_CHILDREN)),
        )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return len(self.parents), len(self.coparents), len(self.children)

    def view(self, dataset: MeasurementDataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(A, C, X) matrices assembled from the dataset columns by role."""
        frame = dataset.columns()
        return tuple(frame[list(names)].to_numpy(dtype=np.float64) for names in (self.parents, self.coparents, self.children))


def generate_measurement(
        seed: int,
        n: int = 1000,
        n_train: int = 450,
        n_val: int = 50,
        sigma_y: float = 0.1,
        sigma_x: float = 0.1,
) -> Tuple[MeasurementDataset, MeasurementMechanism]:
    if n_train + n_val > n:
        raise ConfigError(f'Split sizes {n_train}+{n_val} exceed the {n} generated rows')
    rng = RngStream(seed)
    width = N_CLASSES + N_COPARENTS
    q = rng.normal((N_CHILDREN, width))
    w = rng.normal((N_CHILDREN, width))
    b = rng.normal((N_CHILDREN,))

    a = rng.normal((n, N_PARENTS))
    c = rng.normal((n, N_COPARENTS))
    y_noise = sigma_y * rng.normal((n, N_CLASSES))
    x_noise = sigma_x * rng.normal((n, N_CHILDREN))

    mechanism = MeasurementMechanism(seed, q, w, b, np.zeros(N_CHILDREN), np.ones(N_CHILDREN), sigma_y, sigma_x)
    y = mechanism.labels(a, y_noise)
    raw = mechanism.raw_children(y, c)
    std = raw.std(axis=0)
    mechanism = replace(mechanism, x_mean=raw.mean(axis=0), x_std=np.where(std > 0, std, 1.0))
    x = mechanism.children_mean(y, c) + x_noise

    split = np.array(['train'] * n_train + ['val'] * n_val + ['test'] * (n - n_train - n_val))
    logger.debug('generated %d measurement rows from seed %d', n, seed)
    return MeasurementDataset(a, c, x, y, split, seed, x_noise), mechanism


def shift_coparents(dataset: MeasurementDataset, mechanism: MeasurementMechanism, delta: float) -> MeasurementDataset:
    """Intervene on C; X is regenerated through the unchanged C -> X mechanism with the recorded noise."""
    if dataset.seed != mechanism.seed or dataset.x_noise is None:
        raise MechanismMismatchError(
                f'Dataset (seed {dataset.seed}) was not generated by mechanism seed {mechanism.seed}'
        )
    if not np.isfinite(delta):
        raise ConfigError(f'Shift magnitude must be finite, got {delta}')
    if delta == 0:
        return dataset
    c = dataset.c + delta
    x = mechanism.children_mean(dataset.y, c) + dataset.x_noise
    return replace(dataset, c=c, x=x)


def shift_children(dataset: MeasurementDataset, delta: float) -> MeasurementDataset:
    if not np.isfinite(delta):
        raise ConfigError(f'Shift magnitude must be finite, got {delta}')
    if delta == 0:
        return dataset
    return replace(dataset, x=dataset.x + delta)


def misspecify(role_map: RoleMap, mode: str, k: int) -> RoleMap:
    """relabel: the first k children become co-parents. swap: children[i] <-> coparents[i] for i < k."""
    if k < 0:
        raise ConfigError(f'k must be non-negative, got {k}')
    if mode == 'relabel':
        if k > len(role_map.children):
            raise ConfigError(f'Cannot relabel {k} of {len(role_map.children)} children')
        return replace(
                role_map,
                coparents=role_map.coparents + role_map.children[:k],
                children=role_map.children[k:],
        )
    if mode == 'swap':
        if k > min(len(role_map.children), len(role_map.coparents)):
            raise ConfigError(f'Cannot swap {k} child/co-parent pairs in {role_map}')
        return replace(
                role_map,
                coparents=role_map.children[:k] + role_map.coparents[k:],
                children=role_map.coparents[:k] + role_map.children[k:],
        )
    raise ConfigError(f'Unknown mis-specification mode "{mode}"')


def parse_role_spec(spec: str) -> RoleMap:
    """'cor', 'relabel:k' or 'swap:k' applied to the default role map."""
    if spec == 'cor':
        return RoleMap.default()
    mode, _, k = spec.partition(':')
    try:
        return misspecify(RoleMap.default(), mode, int(k))
    except ValueError as e:
        raise ConfigError(f'Bad role map "{spec}", expected cor, relabel:k or swap:k') from e


def save_measurement_csv(dataset: MeasurementDataset, path: PathLike) -> None:
    dataset.columns().to_csv(path, index=False, encoding='utf-8')


def load_measurement_csv(path: PathLike) -> MeasurementDataset:
    frame = pd.read_csv(path, encoding='utf-8')
    missing = [name for name in MEASUREMENT_COLUMNS if name not in frame.columns]
    if missing:
        raise FormatError(f'{path}: missing measurement columns {missing}')
    values = lambda prefix, count: frame[[f'{prefix}{i}' for i in range(count)]].to_numpy(dtype=np.float64)
    return MeasurementDataset(
            values('a', N_PARENTS),
            values('c', N_COPARENTS),
            values('x', N_CHILDREN),
            frame['y'].to_numpy(dtype=np.int64),
            frame['split'].to_numpy(dtype=str),
    )


# Images

@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    side: int

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> 'ImageDataset':
        return ImageDataset(self.images[idx], self.labels[idx], self.side)

    def to_batch(self, clean: bool = True) -> LabeledBatch:
        return LabeledBatch(self.images, y=self.labels, clean=np.full(len(self), clean))


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as handle:
        return handle.read()


def _parse_idx(raw: bytes, magic: int, n_dims: int, path: PathLike) -> Tuple[Tuple[int, ...], np.ndarray]:
    header_size = 4 * (n_dims + 1)
    if len(raw) < header_size:
        raise FormatError(f'{path}: truncated IDX header')
    found, *dims = struct.unpack(f'>{n_dims + 1}I', raw[:header_size])
    if found != magic:
        raise FormatError(f'{path}: bad IDX magic number {found}, expected {magic}')
    expected = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_size)
    if payload.size != expected:
        raise FormatError(f'{path}: expected {expected} data bytes, found {payload.size}')
    return tuple(dims), payload


def load_idx(images_path: PathLike, labels_path: PathLike) -> ImageDataset:
    (count, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), IMAGE_LABEL_MAGIC, 1, labels_path)
    if n_labels != count:
        raise FormatError(f'{images_path} holds {count} images but {labels_path} holds {n_labels} labels')
    if rows != cols:
        raise FormatError(f'{images_path}: images must be square, got {rows}x{cols}')
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    logger.info('loaded %d images of %dx%d from %s', count, rows, cols, images_path)
    return ImageDataset(images, labels.astype(np.int64), rows)


def _side(images: np.ndarray) -> int:
    side = math.isqrt(images.shape[1])
    if side * side != images.shape[1]:
        raise ShapeError('shift_image', (images.shape[0], side * side), images.shape, 'images must be square')
    return side


def _translate(grid: np.ndarray, pixels: int, positive: bool, axis: int) -> np.ndarray:
    out = np.zeros_like(grid)
    side = grid.shape[axis]
    src = [slice(None)] * grid.ndim
    dst = [slice(None)] * grid.ndim
    if positive:
        src[axis], dst[axis] = slice(0, side - pixels), slice(pixels, side)
    else:
        src[axis], dst[axis] = slice(pixels, side), slice(0, side - pixels)
    out[tuple(dst)] = grid[tuple(src)]
    return out


def shift_image(images: np.ndarray, s: float, axis: str = 'vertical') -> np.ndarray:
    """Translate flattened square images by floor(|s| * side + 0.5) pixels with zero fill.

    Positive s moves content down (vertical) or right (horizontal); 'both'
    applies the same translation along both axes.
    """
    if axis not in SHIFT_AXES:
        raise ConfigError(f'Unknown shift axis "{axis}", expected one of {SHIFT_AXES}')
    if abs(s) > 1:
        raise ConfigError(f'Shift fraction must lie in [-1, 1], got {s}')
    images = np.asarray(images, dtype=np.float64)
    side = _side(images)
    pixels = int(math.floor(abs(s) * side + 0.5))
    if pixels == 0:
        return images.copy()
    grid = images.reshape(-1, side, side)
    if axis in ('vertical', 'both'):
        grid = _translate(grid, pixels, s > 0, axis=1)
    if axis in ('horizontal', 'both'):
        grid = _translate(grid, pixels, s > 0, axis=2)
    return grid.reshape(len(images), side * side)


def sample_shift_fractions(rng: RngStream, n: int, shift_range: float) -> np.ndarray:
    return rng.uniform(-shift_range, shift_range, n)


def augment_shift_range(
        images: np.ndarray,
        labels: np.ndarray,
        shift_range: float,
        rng: RngStream,
        axis: str = 'vertical',
) -> LabeledBatch:
    """Originals (clean) followed by one randomly shifted copy of each (manipulated).

    With axis='both' every copy picks the vertical or horizontal axis at random.
    """
    if not 0.0 <= shift_range <= 1.0:
        raise ConfigError(f'Shift range must lie in [0, 1], got {shift_range}')
    if axis not in SHIFT_AXES:
        raise ConfigError(f'Unknown shift axis "{axis}", expected one of {SHIFT_AXES}')
    images = np.asarray(images, dtype=np.float64)
    fractions = sample_shift_fractions(rng, len(images), shift_range)
    axes = np.array([axis] * len(images))
    if axis == 'both':
        axes = np.where(rng.integers(0, 2, len(images)) == 0, 'vertical', 'horizontal')
    shifted = np.stack([shift_image(row[None, :], s, ax)[0] for row, s, ax in zip(images, fractions, axes)]) \
        if len(images) else images.copy()
    return LabeledBatch(
            np.concatenate([images, shifted]),
            y=np.concatenate([labels, labels]),
            clean=np.concatenate([np.ones(len(images), dtype=bool), np.zeros(len(images), dtype=bool)]),
    )
