# tests/test_quantum_core.py
# 算符构造、旋转、QD 失谐、态校验

import math

import numpy as np
import pytest

from services.quantum_core import (
    G, H, V, DeviceParams, HilbertSpace, QuantumState, annihilation, basis_state,
    build_operators, check_state, excited_state, exciton_rotation, fss_mixing,
    qd_detunings, validate_state,
)
from utils import StateValidityError


# ==================== 基本算符 ====================
def test_annihilation_small_truncations():
    np.testing.assert_allclose(annihilation(2), [[0, 1], [0, 0]])
    a3 = annihilation(3)
    assert a3[0, 1] == pytest.approx(1.0)
    assert a3[1, 2] == pytest.approx(math.sqrt(2))
    assert np.count_nonzero(a3) == 2
    np.testing.assert_allclose(annihilation(1), [[0]])


@pytest.mark.parametrize('bad', [0, -1, 2.5])
def test_annihilation_rejects_bad_truncation(bad):
    with pytest.raises(ValueError):
        annihilation(bad)


def test_exciton_rotation_15_degrees():
    v, h = exciton_rotation(math.radians(15.0))
    np.testing.assert_allclose(v, [0.9659, 0.2588], atol=1e-4)
    np.testing.assert_allclose(h, [-0.2588, 0.9659], atol=1e-4)
    assert np.dot(v, h) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize('theta, delta_x, delta_y, expected', [
    (0.0, 3.0, 0.0, (0.0, 3.0)),
    (math.pi / 4, 3.0, 1.0, (2.0, 2.0)),
    (math.radians(15.0), 3.0, 0.0, (0.201, 2.799)),
])
def test_qd_detunings(theta, delta_x, delta_y, expected):
    assert qd_detunings(delta_x, delta_y, theta) == pytest.approx(expected, abs=1e-3)


def test_fss_mixing_at_45_degrees():
    assert fss_mixing(1.5, math.pi / 4) == pytest.approx(-0.75)
    assert fss_mixing(3.0, 0.0) == 0.0


# ==================== 全空间算符 ====================
def test_build_operators_dimensions(small_ops):
    assert small_ops.dim == 18
    assert np.trace(small_ops.pi_ex).real == pytest.approx(12.0)
    assert small_ops.a_h.shape == (18, 18)


def test_operator_algebra(small_ops):
    for sigma in (small_ops.sigma_h, small_ops.sigma_v, small_ops.sigma_x, small_ops.sigma_y):
        np.testing.assert_allclose(sigma @ sigma, 0, atol=1e-14)
    np.testing.assert_allclose(small_ops.pi_ex @ small_ops.pi_ex, small_ops.pi_ex, atol=1e-14)
    # [a, a†] = 1 除顶层 Fock 外成立
    commutator = small_ops.a_h @ small_ops.a_h.conj().T - small_ops.a_h.conj().T @ small_ops.a_h
    diagonal = np.real(np.diag(commutator)).reshape(3, 3, 2)
    np.testing.assert_allclose(diagonal[:, :2, :], 1.0, atol=1e-14)


def test_natural_axis_operators_are_rotation_of_cavity_axes():
    ops = build_operators(HilbertSpace(1, 1), math.radians(15.0))
    c, s = math.cos(math.radians(15.0)), math.sin(math.radians(15.0))
    np.testing.assert_allclose(ops.sigma_x, c * ops.sigma_v - s * ops.sigma_h, atol=1e-15)
    np.testing.assert_allclose(ops.sigma_y, s * ops.sigma_v + c * ops.sigma_h, atol=1e-15)


def test_operators_are_read_only(small_ops):
    with pytest.raises(ValueError):
        small_ops.a_h[0, 0] = 1.0


def test_hilbert_space_rejects_zero():
    with pytest.raises(ValueError):
        HilbertSpace(0, 1)


# ==================== 态 ====================
def test_basis_states(small_space, small_ops):
    rho = excited_state(small_space, 'h')
    assert rho.expect(small_ops.pi_ex).real == pytest.approx(1.0)
    assert rho.expect(small_ops.sigma_h.conj().T @ small_ops.sigma_h).real == pytest.approx(1.0)
    photon = basis_state(small_space, G, n_h=2)
    assert photon.expect(small_ops.a_h.conj().T @ small_ops.a_h).real == pytest.approx(2.0)
    with pytest.raises(ValueError):
        basis_state(small_space, V, n_h=3)
    with pytest.raises(ValueError):
        excited_state(small_space, 'x')
    assert H == 1 and V == 2


def test_validate_state_maximally_mixed():
    dim = 18
    diagnostics = validate_state(np.eye(dim) / dim, dim)
    assert diagnostics.hermiticity == pytest.approx(0.0)
    assert diagnostics.trace_defect == pytest.approx(0.0, abs=1e-15)
    assert diagnostics.min_eigenvalue == pytest.approx(1 / dim)
    assert diagnostics.is_valid()


def test_validate_state_reports_trace_defect():
    rho = np.diag([0.51, 0.5])
    diagnostics = validate_state(QuantumState(rho))
    assert diagnostics.trace_defect == pytest.approx(0.01)
    with pytest.raises(StateValidityError):
        check_state(diagnostics, 't=0')


def test_validate_state_flags_negative_and_nonhermitian():
    rho = np.array([[1.1, 0.0], [0.0, -0.1]])
    assert validate_state(rho).min_eigenvalue == pytest.approx(-0.1)
    skew = np.array([[0.5, 0.1], [0.0, 0.5]])
    assert validate_state(skew).hermiticity == pytest.approx(0.1)
    with pytest.raises(ValueError):
        validate_state(np.eye(2) / 2, dim=3)


# ==================== 器件参数 ====================
def test_device_params_defaults():
    params = DeviceParams()
    assert params.theta == pytest.approx(math.radians(15.0))
    assert params.gamma_total == pytest.approx(0.33)
    assert 'eta_top' in params.to_dict()


@pytest.mark.parametrize('field_name, value', [
    ('eta_top', 1.3), ('eta_in', -0.1), ('kappa', 0.0), ('g', -1.0), ('rep_rate', 0.0),
])
def test_device_params_validation_names_field(field_name, value):
    with pytest.raises(ValueError, match=field_name):
        DeviceParams(**{field_name: value})
