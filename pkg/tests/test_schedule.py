import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from residual_lcm.schedule import boundary_coeffs, check_timestep, forward_noise, make_schedule


def exact_alpha_bar(T, beta_start, beta_end):
    """Rational product over decimal-exact betas."""
    b0, b1 = Fraction(str(beta_start)), Fraction(str(beta_end))
    prod, out = Fraction(1), []
    for t in range(T):
        prod *= 1 - (b0 + t * (b1 - b0) / (T - 1))
        out.append(prod)
    return out


def test_default_endpoints():
    s = make_schedule()
    assert s.T == 1000
    assert abs(s.beta[0] - 0.0015) < 1e-12
    assert abs(s.beta[999] - 0.0155) < 1e-12
    assert abs(s.alpha_bar[0] - 0.9985) < 1e-12


def test_linear_midpoint():
    s = make_schedule(1000, 0.0015, 0.0155)
    assert s.beta[499] == pytest.approx(0.0015 + 499 * 0.014 / 999, abs=1e-15)
    assert s.beta[499] == pytest.approx(0.0084930, abs=1e-7)


def test_two_step_products():
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)


def test_alpha_bar_matches_exact_rational_product():
    s = make_schedule(1000, 0.0015, 0.0155)
    exact = exact_alpha_bar(1000, 0.0015, 0.0155)
    err = max(abs(float(e) - a) for e, a in zip(exact, s.alpha_bar))
    assert err < 1e-12


def test_final_alpha_bar_value():
    # the exact product at the last step is about 1.946e-4
    s = make_schedule()
    logsum = math.fsum(math.log1p(-b) for b in s.beta)
    assert s.alpha_bar[-1] == pytest.approx(math.exp(logsum), rel=1e-12)
    assert 1.94e-4 < s.alpha_bar[-1] < 1.95e-4


def test_monotone_and_bounded():
    s = make_schedule()
    assert np.all(np.diff(s.beta) > 0)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    assert s.beta.dtype == np.float64 and s.alpha_bar.dtype == np.float64


def test_tables_are_read_only():
    s = make_schedule()
    with pytest.raises(ValueError):
        s.alpha_bar[0] = 1.0


def test_deterministic():
    a, b = make_schedule(), make_schedule()
    assert a.beta.tobytes() == b.beta.tobytes()
    assert a.alpha_bar.tobytes() == b.alpha_bar.tobytes()


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0),
                                  (2.5, 0.1, 0.2)])
def test_invalid_schedule(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_forward_scalar():
    s = make_schedule(2, 0.1, 0.2)
    out = forward_noise(torch.tensor(1.0, dtype=torch.float64), 0, torch.tensor(1.0, dtype=torch.float64), s)
    assert float(out) == pytest.approx(math.sqrt(0.9) + math.sqrt(0.1), abs=1e-12)
    assert float(out) == pytest.approx(1.26491, abs=1e-5)


def test_forward_zero_cases():
    s = make_schedule()
    z0 = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = 321
    ab = s.alpha_bar[t]
    torch.testing.assert_close(forward_noise(z0, t, torch.zeros_like(z0), s), math.sqrt(ab) * z0)
    torch.testing.assert_close(forward_noise(torch.zeros_like(eps), t, eps, s), math.sqrt(1 - ab) * eps)


def test_forward_per_sample_timesteps():
    s = make_schedule()
    z0 = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([0, 500, 999])
    out = forward_noise(z0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(out[i], forward_noise(z0[i], ti, eps[i], s))


def test_forward_errors():
    s = make_schedule()
    z0 = torch.zeros(4, 2, 2)
    with pytest.raises(ValueError):
        forward_noise(z0, 0, torch.zeros(4, 2, 3), s)
    for bad in (-1, 1000):
        with pytest.raises(ValueError):
            forward_noise(z0, bad, z0, s)
    with pytest.raises(ValueError):
        check_timestep(torch.tensor([0.5]), 10)


def test_noising_statistics():
    s = make_schedule()
    n, t = 100_000, 250
    gen = torch.Generator().manual_seed(3)
    z0 = torch.tensor([0.7, -1.3], dtype=torch.float64)
    eps = torch.randn(n, 2, generator=gen, dtype=torch.float64)
    zt = forward_noise(z0.expand(n, 2), torch.full((n,), t), eps, s)
    ab = s.alpha_bar[t]
    bound = 3 * math.sqrt((1 - ab) / n)
    assert torch.all((zt.mean(0) - math.sqrt(ab) * z0).abs() < bound)
    assert torch.all((zt.var(0) / (1 - ab) - 1).abs() < 0.05)


def test_boundary_exact_at_zero():
    s = make_schedule()
    assert boundary_coeffs(0, 0.5, s) == (1.0, 0.0)
    cs, co = boundary_coeffs(torch.tensor([0, 0]), 0.5, s)
    assert torch.equal(cs, torch.ones(2, dtype=torch.float64))
    assert torch.equal(co, torch.zeros(2, dtype=torch.float64))


def test_boundary_at_sigma_data():
    s = make_schedule(10, 0.01, 0.02, sigma_data=2.0)
    cs, co = boundary_coeffs(2, 2.0, s)
    assert cs == pytest.approx(0.5, abs=1e-15)
    assert co == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_boundary_asymptote_and_monotone():
    s = make_schedule()
    t = torch.arange(1000)
    cs, co = boundary_coeffs(t, 0.5, s)
    assert torch.all((cs > 0) & (cs <= 1)) and torch.all((co >= 0) & (co < 1))
    assert torch.all(cs[1:] <= cs[:-1]) and torch.all(co[1:] >= co[:-1])
    assert cs[-1] < 1e-6 and co[-1] > 1 - 1e-6


def test_boundary_errors():
    s = make_schedule()
    with pytest.raises(ValueError):
        boundary_coeffs(1000, 0.5, s)
    with pytest.raises(ValueError):
        boundary_coeffs(1, 0.0, s)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.floats(1e-5, 0.2), st.floats(1e-4, 0.5))
def test_schedule_properties(T, lo, width):
    hi = min(lo + width, 0.99)
    s = make_schedule(T, lo, hi)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=0, atol=0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert abs(s.beta[-1] - hi) < 1e-12
