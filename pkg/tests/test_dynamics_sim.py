import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridshed.dynamics_sim import (Contingency, build_dynamic_system, contingency_extrema, electrical_power,
                                   frequency_nadir, integrate_swing, is_secure, load_contingencies,
                                   run_fsa_tds, save_contingencies, single_machine, swing_derivative)
from gridshed.grid_model import solve_power_flow


def step_error(dt, horizon=20.0):
    s = single_machine(1.0, 1.0)
    tr = integrate_swing(s, Contingency("load_step", 0, 1.0, t_apply=0.0), dt=dt, horizon=horizon,
                         instability_hz=np.inf)
    ref = -(1 - np.exp(-tr.times / 2.0))          # pu
    return np.max(np.abs((tr.freq[0] - 60.0) / 60.0 - ref))


def test_swing_derivative_examples():
    s = single_machine(1.0, 1.0)
    da, dw = swing_derivative(np.zeros(1), np.zeros(1), s)
    assert da[0] == 0 and dw[0] == 0
    _, dw = swing_derivative(np.zeros(1), np.zeros(1), s, p_dist=np.array([-1.0]))
    assert dw[0] == pytest.approx(0.5)
    _, dw = swing_derivative(np.array([1.0]), np.zeros(1), s, p_dist=np.array([-1.0]))
    assert dw[0] == pytest.approx(0.0)


def test_electrical_power_examples(rng):
    y = np.array([[-10j, 10j], [10j, -10j]])
    np.testing.assert_allclose(electrical_power([0.3, 0.3], [1, 1], y), 0, atol=1e-12)
    assert electrical_power([0.1, 0.0], [1, 1], y)[0] == pytest.approx(10 * np.cos(0.1 - np.pi / 2))
    B = rng.normal(size=(4, 4))
    Y = 1j * (B + B.T)
    for _ in range(20):
        assert electrical_power(rng.normal(size=4), rng.uniform(0.9, 1.1, 4), Y).sum() == pytest.approx(0, abs=1e-9)


def test_no_contingency_is_flat(case9):
    tr = integrate_swing(build_dynamic_system(case9), None, horizon=2.0)
    assert abs(tr.nadir - 60) < 1e-6 and abs(tr.peak - 60) < 1e-6
    assert frequency_nadir(tr) == (tr.nadir, tr.peak)


def test_single_machine_value_at_2s():
    tr = integrate_swing(single_machine(1, 1), Contingency("load_step", 0, 1.0, t_apply=0.0), horizon=2.5,
                         instability_hz=np.inf)
    assert (60 - tr.freq[0, 2000]) / 60 == pytest.approx(1 - np.exp(-1), abs=1e-6)


def test_rk4_error_and_order():
    assert step_error(1e-3) < 1e-3
    assert step_error(0.016) / step_error(0.008) >= 3.5


def test_first_order_limit():
    s = single_machine(1.0, 2.0, freq_base=1.0)
    fmin, _ = contingency_extrema(s, Contingency("load_step", 0, 0.5, t_apply=0.0), horizon=40.0)
    assert fmin == pytest.approx(60 - 0.5 / 2.0, abs=1e-6)


def test_instability_guard_truncates():
    tr = integrate_swing(single_machine(1, 1), Contingency("load_step", 0, 1.0, t_apply=0.0))
    assert tr.unstable and tr.times[-1] < 20.0


def test_dt_guard():
    with pytest.raises(ValueError):
        integrate_swing(single_machine(1, 1), None, dt=0.02)


def test_contingency_validation():
    with pytest.raises(ValueError):
        Contingency("earthquake", 0)
    with pytest.raises(ValueError):
        Contingency("three_phase_fault", 0, fault_duration=0.0)


def test_contingency_roundtrip(tmp_path, conts9):
    save_contingencies(conts9, tmp_path / "c.json")
    assert load_contingencies(tmp_path / "c.json") == conts9


def test_is_secure_strict():
    assert not is_secure(59.5, 60.0)
    assert not is_secure(59.2, 60.0)
    assert is_secure(59.5 + 1e-12, 60.5 - 1e-12)
    assert not is_secure(60.0, 60.5)


def test_fsa_empty_list_is_safe(case9):
    assert run_fsa_tds(case9, []).safe


def test_fsa_matches_manual_composition(case9, conts9):
    pf = solve_power_flow(case9)
    system = build_dynamic_system(case9, pf)
    verdict = run_fsa_tds((case9, pf), conts9)
    manual = []
    for c in conts9:
        fmin, fmax = frequency_nadir(integrate_swing(system, c))
        manual.append(is_secure(fmin, fmax))
    assert verdict.safe == all(manual)
    for (cid, fmin, fmax), c in zip(verdict.per_contingency, conts9):
        tr = integrate_swing(system, c)
        assert (fmin, fmax) == pytest.approx(frequency_nadir(tr), abs=1e-12)


def test_line_trip_changes_trajectory(case9, conts9):
    system = build_dynamic_system(case9)
    tr = integrate_swing(system, conts9[3], horizon=3.0)
    assert tr.peak - tr.nadir > 1e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 8.0), st.floats(0.5, 8.0), st.floats(0.01, 0.3))
def test_single_machine_nadir_bound_property(H, D, dp):
    # first-order response is monotone: the nadir never overshoots dP/D
    s = single_machine(H, D)
    fmin, fmax = contingency_extrema(s, Contingency("load_step", 0, dp, t_apply=0.0), horizon=10.0)
    assert 60 - fmin <= 60 * dp / D + 1e-9
    assert fmax == pytest.approx(60.0)
