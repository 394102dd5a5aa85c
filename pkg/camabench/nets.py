"""Dense ReLU networks whose weights live in a ParameterStore group."""
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Tuple

import numpy as np

from camabench import ndgrad
from camabench.errors import ShapeError
from camabench.ndgrad import ParameterStore, Tensor
from camabench.stochastics import RngStream

ACTIVATIONS = {
    'relu': ndgrad.relu,
    'sigmoid': ndgrad.sigmoid,
    'tanh': ndgrad.tanh,
}


@dataclass(frozen=True)
class MlpSpec:
    group: str
    sizes: Tuple[int, ...]
    final: Optional[str] = None
    dropout: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError(f'{self.group}: an MLP needs at least input and output sizes, got {self.sizes}')
        if self.dropout and len(self.dropout) != len(self.sizes) - 2:
            raise ValueError(
                    f'{self.group}: {len(self.dropout)} dropout rates for {len(self.sizes) - 2} hidden layers'
            )

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def param_names(self) -> List[Tuple[str, str]]:
        return [(f'{self.group}/W{i}', f'{self.group}/b{i}') for i in range(self.n_layers)]


def init_mlp(store: ParameterStore, spec: MlpSpec, rng: Optional[RngStream], zero: bool = False) -> None:
    """He-normal weights (Glorot-scaled on a linear output layer), zero biases."""
    for i, (w_name, b_name) in enumerate(spec.param_names()):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        if zero:
            weights = np.zeros((fan_in, fan_out))
        else:
            linear_out = i == spec.n_layers - 1 and spec.final is None
            gain = 1.0 if linear_out else 2.0
            weights = rng.normal((fan_in, fan_out)) * math.sqrt(gain / fan_in)
        store.add(w_name, spec.group, weights)
        store.add(b_name, spec.group, np.zeros(fan_out))


def apply_mlp(
        params: Mapping[str, Tensor],
        spec: MlpSpec,
        x,
        dropout_rng: Optional[RngStream] = None,
) -> Tensor:
    h = ndgrad.as_tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.in_dim:
        raise ShapeError(spec.group, (h.shape[0] if h.ndim else 0, spec.in_dim), h.shape, 'network input')
    for i, (w_name, b_name) in enumerate(spec.param_names()):
        h = ndgrad.matmul(h, params[w_name]) + params[b_name]
        if i < spec.n_layers - 1:
            h = ndgrad.relu(h)
            rate = spec.dropout[i] if spec.dropout else 0.0
            if dropout_rng is not None and rate > 0.0:
                keep = (dropout_rng.random(h.shape) >= rate) / (1.0 - rate)
                h = h * keep
        elif spec.final is not None:
            h = ACTIVATIONS[spec.final](h)
    return h
