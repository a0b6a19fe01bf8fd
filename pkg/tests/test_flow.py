import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flowtint.errors import DimensionError, DomainError, NumericError
from flowtint.flow import euler_sample, fm_loss, interpolate, target_velocity, time_grid

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_interpolate_examples():
    assert np.allclose(interpolate([0.0], [1.0], 0.5), [0.5])
    assert np.array_equal(interpolate([0.2, 0.8], [1.0, 0.0], 0.0), [0.2, 0.8])
    assert np.allclose(interpolate([1.0, 2.0], [3.0, -1.0], 0.25), [1.5, 1.25])


def test_interpolate_errors():
    with pytest.raises(DimensionError):
        interpolate([0.0, 1.0], [1.0], 0.5)
    with pytest.raises(DomainError):
        interpolate([0.0], [1.0], 1.5)
    with pytest.raises(DomainError):
        interpolate([0.0], [1.0], -0.1)


def test_interpolate_per_sample_time():
    x0 = torch.zeros(3, 2)
    x1 = torch.ones(3, 2)
    out = interpolate(x0, x1, torch.tensor([0.0, 0.5, 1.0]))
    assert torch.equal(out, torch.tensor([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]))


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_interpolate_boundaries(x0, x1):
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       st.floats(0, 1))
def test_interpolate_formula(x0, x1, t):
    assert np.allclose(interpolate(x0, x1, t), (1 - t) * x0 + t * x1, rtol=1e-12, atol=1e-9)


def test_target_velocity_examples():
    assert np.array_equal(target_velocity([0.0], [0.0]), [0.0])
    assert np.array_equal(target_velocity([0.0], [1.0]), [1.0])
    assert np.allclose(target_velocity([0.5, -0.5], [1.0, 1.0]), [0.5, 1.5])
    with pytest.raises(DimensionError):
        target_velocity([0.0], [1.0, 2.0])


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)),
       st.floats(-10, 10))
def test_target_velocity_translation_equivariant(x0, x1, d):
    assert np.allclose(target_velocity(x0 + d, x1 + d), target_velocity(x0, x1), atol=1e-9)


def test_fm_loss_examples():
    assert fm_loss([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert fm_loss([1.0, 0.0], [0.0, 0.0]) == 0.5
    assert fm_loss([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]) == pytest.approx(14 / 3, abs=1e-12)
    with pytest.raises(DimensionError):
        fm_loss([1.0], [1.0, 2.0])


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_fm_loss_nonnegative_and_zero_on_self(a, b):
    assert fm_loss(a, b) >= 0
    assert fm_loss(a, a) == 0


def test_time_grid():
    assert time_grid(1) == [1.0]
    assert time_grid(4) == [1.0, 0.75, 0.5, 0.25]


class StraightField:
    """Exact velocity of the straight path from x1 (t=1) to x0 (t=0)."""

    def __init__(self, x0, x1):
        self.v = x1 - x0

    def __call__(self, x, context, t):
        return self.v.expand_as(x) if x.ndim > self.v.ndim else self.v


def _straight(seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(4, 4, 3, generator=g, dtype=torch.float64)
    x1 = torch.randn(4, 4, 3, generator=g, dtype=torch.float64)
    return x0, x1


def test_euler_one_step_transport():
    x0, x1 = _straight()
    out = euler_sample(StraightField(x0, x1), None, 1, start=x1)
    # x1 - (x1 - x0) is x0 up to one rounding
    assert torch.allclose(out, x0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("steps", [2, 6, 28])
def test_euler_step_count_invariance(steps):
    x0, x1 = _straight(1)
    f = StraightField(x0, x1)
    one = euler_sample(f, None, 1, start=x1)
    many = euler_sample(f, None, steps, start=x1)
    assert torch.allclose(many, one, atol=1e-12)


def test_euler_seeded_determinism():
    x0, x1 = _straight(2)
    f = StraightField(x0, x1)
    a = euler_sample(f, None, 6, seed=5, shape=(4, 4, 3))
    b = euler_sample(f, None, 6, seed=5, shape=(4, 4, 3))
    c = euler_sample(f, None, 6, seed=6, shape=(4, 4, 3))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_euler_batched_seeds_match_single_draws():
    f = lambda x, c, t: torch.zeros_like(x)  # noqa: E731
    batch = euler_sample(f, None, 3, seed=[4, 9], shape=(2, 2, 3))
    assert torch.equal(batch[0], euler_sample(f, None, 3, seed=4, shape=(2, 2, 3)))
    assert torch.equal(batch[1], euler_sample(f, None, 3, seed=9, shape=(2, 2, 3)))


def test_euler_clamps_only_at_the_end():
    # x goes 0.5 -> 1.0 -> 1.5, then back down to 0.5
    seen = []

    def field(x, c, t):
        seen.append(float(x.max()))
        return torch.full_like(x, -2.0 if t > 0.5 else 2.0)

    out = euler_sample(field, None, 4, start=torch.full((1,), 0.5, dtype=torch.float64))
    assert max(seen) > 1.0  # trajectory left [0, 1] unclamped
    assert out.item() == 0.5


def test_euler_nonfinite_reports_step():
    def field(x, c, t):
        return torch.full_like(x, float("nan")) if t < 0.6 else torch.zeros_like(x)

    with pytest.raises(NumericError) as err:
        euler_sample(field, None, 4, start=torch.zeros(2, dtype=torch.float64))
    assert err.value.step == 2


def test_euler_rejects_zero_steps():
    with pytest.raises(DomainError):
        euler_sample(lambda x, c, t: x, None, 0, start=torch.zeros(1))
