import numpy as np
import pytest

from camabench.cama import CamaModel, CamaSpec, LabeledBatch
from camabench.stochastics import RngStream


def numeric_gradient(fn, value: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar fn at `value`, on the listed flat coordinates (all by default)."""
    value = np.array(value, dtype=np.float64)
    grad = np.full(value.shape, np.nan)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        saved = flat[i]
        flat[i] = saved + h
        up = fn(value)
        flat[i] = saved - h
        down = fn(value)
        flat[i] = saved
        out[i] = (up - down) / (2 * h)
    return grad


def assert_gradient_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    mask = ~np.isnan(numeric)
    np.testing.assert_allclose(np.asarray(analytic)[mask], numeric[mask], rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def toy_single_spec():
    return CamaSpec(variant='single', dim_x=4, dim_y=2, dim_z=3, dim_m=2, hidden=8, hidden_m=(8, 8))


@pytest.fixture
def toy_generic_spec():
    return CamaSpec(
            variant='generic', dim_x=4, dim_y=3, dim_z=3, dim_m=2, dim_a=2, dim_c=2,
            hidden=8, hidden_m=(8, 8), likelihood='gaussian',
    )


@pytest.fixture
def zero_model():
    return CamaModel.create(CamaSpec(variant='single', dim_x=4, dim_y=2, dim_z=3, dim_m=2, hidden=6, hidden_m=(6,)),
                            zero=True)


@pytest.fixture
def binary_batch():
    x = np.array([[0, 1, 1, 0], [1, 1, 1, 1], [0, 0, 0, 0], [1, 0, 1, 0]], dtype=np.float64)
    return LabeledBatch(x, y=np.array([0, 1, 1, 0]))


@pytest.fixture
def generic_batch():
    stream = RngStream(7)
    n = 6
    return LabeledBatch(
            stream.normal((n, 4)), stream.normal((n, 2)), stream.normal((n, 2)),
            y=stream.integers(0, 3, n),
    )
