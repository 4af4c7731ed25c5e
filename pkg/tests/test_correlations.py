# tests/test_correlations.py
# 输入输出关系、量子回归、ḡ²/ḡ³ 的两种算法

import numpy as np
import pytest
from scipy.linalg import expm

from services.correlations import (
    PulseMoments, add_uncoupled_background, g2_pulsed, g3_zero_pulsed, output_coupling,
    output_operator, pulse_moments, quantum_regression,
)
from services.dynamics import (
    ALPHA_1, ALPHA_2, GAUSS_OFFSET, DriveSpec, Lindbladian, NumericsConfig, TimeGrid, evolve,
    steady_state, substeps,
)
from services.quantum_core import HilbertSpace, QuantumState, build_operators, excited_state, ground_state
from utils import uev_to_rate


@pytest.fixture
def coherent_setup(empty_cavity_params):
    """g = 0：输出为纯相干光"""
    space = HilbertSpace(4, 1)
    ops = build_operators(space)
    numerics = NumericsConfig(n_fock_h=4, n_fock_v=1, auto_truncation=False)
    return empty_cavity_params, ops, numerics


# ==================== 输出场 ====================
def test_output_operator(device_params, small_ops):
    drive = DriveSpec.pulse(1.0)
    b_op = output_operator(0.0, drive, device_params, small_ops)
    beta = np.sqrt(0.95) * drive.input_amplitude(0.0)
    np.testing.assert_allclose(np.diag(b_op), beta, atol=1e-15)
    assert output_coupling(device_params) == pytest.approx(np.sqrt(0.64 * uev_to_rate(90.0)))


# ==================== 量子回归 ====================
def test_quantum_regression_matches_matrix_exponential(device_params):
    space = HilbertSpace(3, 1)
    ops = build_operators(space, device_params.theta)
    drive = DriveSpec.cw(2e-3)
    rho = steady_state(device_params, drive, ops)
    number = ops.a_h.conj().T @ ops.a_h
    t2 = np.array([0.0, 20.0, 150.0])

    values = quantum_regression(rho, 0.0, t2, device_params, drive, ops, ops.a_h, number)

    sup = Lindbladian(device_params, ops, drive).superoperator()
    sandwiched = (ops.a_h @ rho.rho @ ops.a_h.conj().T).ravel()
    d = ops.dim
    for value, t in zip(values, t2):
        propagated = (expm(sup * t) @ sandwiched).reshape(d, d)
        assert value == pytest.approx(np.trace(number @ propagated), abs=1e-9)


def dense_propagate(lindbladian: Lindbladian, y: np.ndarray, t_a: float, t_b: float, max_step: float) -> np.ndarray:
    """稠密矩阵指数逐子步传播：exp(h(α₂L(c₋) + α₁L(c₊))) 之后 exp(h(α₁L(c₋) + α₂L(c₊)))"""
    bounds = substeps(t_a, t_b, max_step)
    for start, end in zip(bounds[:-1], bounds[1:]):
        h = end - start
        early = lindbladian.superoperator(start + (0.5 - GAUSS_OFFSET) * h)
        late = lindbladian.superoperator(start + (0.5 + GAUSS_OFFSET) * h)
        y = expm(h * (ALPHA_2 * early + ALPHA_1 * late)) @ y
        y = expm(h * (ALPHA_1 * early + ALPHA_2 * late)) @ y
    return y


def test_pulsed_quantum_regression_matches_dense_propagation(device_params, small_ops):
    drive = DriveSpec.pulse(0.5, tau=125.0)
    lindbladian = Lindbladian(device_params, small_ops, drive)
    max_step = 5.0
    t_start = -300.0
    t1s = np.linspace(-200.0, 100.0, 10)
    taus = np.linspace(0.0, 135.0, 10)
    d = small_ops.dim
    number = small_ops.a_h.conj().T @ small_ops.a_h

    rho = ground_state(small_ops.space).rho.ravel().astype(complex)
    t_now = t_start
    rho_t1 = []
    for t1 in t1s:
        rho = dense_propagate(lindbladian, rho, t_now, t1, max_step)
        rho_t1.append(rho.reshape(d, d))
        t_now = t1

    grid = TimeGrid(t_start, float(t1s[-1]), t1s, max_step=max_step)
    traj = evolve(ground_state(small_ops.space), grid, device_params, drive, small_ops)
    np.testing.assert_allclose(traj.states, np.array(rho_t1), rtol=1e-8, atol=1e-12)

    computed = np.empty((t1s.size, taus.size), dtype=complex)
    reference = np.empty_like(computed)
    for i, (t1, state) in enumerate(zip(t1s, rho_t1)):
        computed[i] = quantum_regression(QuantumState(state), t1, t1 + taus, device_params, drive, small_ops,
                                         small_ops.a_h, number, max_step=max_step)
        y = (small_ops.a_h @ state @ small_ops.a_h.conj().T).ravel()
        t_now = t1
        for j, t2 in enumerate(t1 + taus):
            y = dense_propagate(lindbladian, y, t_now, t2, max_step)
            reference[i, j] = np.trace(number @ y.reshape(d, d))
            t_now = t2

    assert np.abs(reference).max() > 0
    np.testing.assert_allclose(computed, reference, rtol=1e-8, atol=1e-8 * np.abs(reference).max())


def test_moments_converge_when_grid_is_refined(device_params, small_ops):
    drive = DriveSpec.pulse(0.3)
    rho0 = ground_state(small_ops.space)
    coarse = NumericsConfig(n_fock_h=3, n_fock_v=2, auto_truncation=False)
    fine = NumericsConfig(n_fock_h=3, n_fock_v=2, auto_truncation=False, dt_output=1.0, max_step=1.0)
    coarse_moments = pulse_moments(rho0, drive, device_params, small_ops, numerics=coarse)
    fine_moments = pulse_moments(rho0, drive, device_params, small_ops, numerics=fine)
    assert coarse_moments.n_out == pytest.approx(fine_moments.n_out, rel=1e-3)
    assert coarse_moments.g2 == pytest.approx(fine_moments.g2, rel=1e-3)


def test_quantum_regression_scalar_and_order(device_params, small_ops):
    rho = ground_state(small_ops.space)
    drive = DriveSpec.pulse(0.1)
    value = quantum_regression(rho, 0.0, 0.0, device_params, drive, small_ops,
                               small_ops.identity, small_ops.identity)
    assert value == pytest.approx(1.0)
    with pytest.raises(ValueError):
        quantum_regression(rho, 10.0, 5.0, device_params, drive, small_ops,
                           small_ops.a_h, small_ops.identity)


# ==================== 相干光 ====================
def test_coherent_output_adjoint(coherent_setup):
    params, ops, numerics = coherent_setup
    drive = DriveSpec.pulse(0.5, tau=125.0)
    moments = pulse_moments(ground_state(ops.space), drive, params, ops, numerics=numerics, order=3)
    assert moments.g2 == pytest.approx(1.0, abs=0.01)
    assert moments.g3 == pytest.approx(1.0, abs=0.05)
    # 空腔共振反射 (1 − 2η_top)² = 0.0784，脉冲带宽使平均值略高
    reflectivity = moments.n_out / (params.eta_in * drive.n_in)
    assert 0.0784 < reflectivity < 0.11


def test_coherent_output_grid(coherent_setup):
    params, ops, numerics = coherent_setup
    drive = DriveSpec.pulse(0.5, tau=125.0)
    grid_numerics = NumericsConfig(n_fock_h=4, n_fock_v=1, auto_truncation=False, g2_method='grid')
    result = g2_pulsed(ground_state(ops.space), drive, params, ops, numerics=grid_numerics)
    assert result.method == 'grid'
    assert result.g2_bar == pytest.approx(1.0, abs=0.01)
    G2 = result.G2
    np.testing.assert_allclose(G2, G2.T, atol=1e-12)
    diagonal = np.diag(G2)
    assert np.all(G2 ** 2 <= np.outer(diagonal, diagonal) + 1e-8)
    assert not G2.flags.writeable


def test_windowed_grid_uses_grid_method(coherent_setup):
    params, ops, _ = coherent_setup
    drive = DriveSpec.pulse(0.5, tau=60.0)
    numerics = NumericsConfig(n_fock_h=4, n_fock_v=1, auto_truncation=False, g2_window=100.0)
    result = g2_pulsed(ground_state(ops.space), drive, params, ops, numerics=numerics)
    assert result.method == 'grid'
    assert result.window == 100.0
    # 只积分 |τ| ≤ window，相干光的 ḡ² 因此小于 1
    assert 0.0 < result.g2_bar < 1.0


# ==================== 单光子 ====================
def test_single_photon_source(device_params):
    space = HilbertSpace(2, 2)
    ops = build_operators(space, device_params.theta)
    grid = TimeGrid.uniform(0.0, 1000.0, 2.0)
    rho0 = excited_state(space, 'h')
    drive = DriveSpec.pulse(0.0)
    moments = pulse_moments(rho0, drive, device_params, ops, grid=grid, order=3)
    assert 0.0 < moments.n_out < 1.0
    assert moments.g2 == pytest.approx(0.0, abs=1e-6)
    assert moments.g3 == pytest.approx(0.0, abs=1e-6)
    assert g3_zero_pulsed(rho0, drive, device_params, ops, grid=grid) == pytest.approx(0.0, abs=1e-6)


# ==================== 背景光 ====================
def test_uncoupled_background_algebra(device_params):
    moments = PulseMoments(n_out=0.2, pair=0.0, triple=0.0)
    combined = add_uncoupled_background(moments, DriveSpec.pulse(1.0), device_params)
    assert combined.n_out == pytest.approx(0.25)
    assert combined.pair == pytest.approx(0.0225)
    assert combined.triple == pytest.approx(0.001625)
    assert add_uncoupled_background(PulseMoments(0.2, 0.0), DriveSpec.pulse(1.0), device_params).triple is None


def test_background_keeps_coherent_light_coherent(coherent_setup):
    params, ops, _ = coherent_setup
    numerics = NumericsConfig(n_fock_h=4, n_fock_v=1, auto_truncation=False, include_background=True)
    drive = DriveSpec.pulse(0.5)
    moments = pulse_moments(ground_state(ops.space), drive, params, ops, numerics=numerics)
    assert moments.g2 == pytest.approx(1.0, abs=0.01)


def test_pulse_moments_rejects_order(device_params, small_ops):
    with pytest.raises(ValueError):
        pulse_moments(ground_state(small_ops.space), DriveSpec.pulse(0.1), device_params, small_ops, order=4)


# ==================== 两种算法一致 ====================
@pytest.mark.slow
def test_grid_and_adjoint_agree(device_params):
    space = HilbertSpace(3, 1)
    ops = build_operators(space, device_params.theta)
    drive = DriveSpec.pulse(0.3, tau=125.0)
    rho0 = ground_state(space)
    adjoint = g2_pulsed(rho0, drive, device_params, ops,
                        numerics=NumericsConfig(n_fock_h=3, n_fock_v=1, auto_truncation=False))
    grid = g2_pulsed(rho0, drive, device_params, ops,
                     numerics=NumericsConfig(n_fock_h=3, n_fock_v=1, auto_truncation=False,
                                             g2_method='grid', dt_correlation=4.0))
    assert grid.g2_bar == pytest.approx(adjoint.g2_bar, abs=0.01)
    assert grid.n_out == pytest.approx(adjoint.n_out, rel=1e-3)
