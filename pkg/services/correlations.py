# services/correlations.py
# 输出场观测量与强度关联：输入输出关系 + 量子回归定理（QRT）
#
# 输出场算符 B(t) = β(t)·I + c·a_H，其中 β(t) = √η_in⟨b_in⟩(t) 为经典振幅（c-number），
# c = √(η_top κ)。所有关联函数都是 B 的正规编序矩：
#   n_out = ∫ Tr[B†B ρ] dt
#   ḡ² 分子 = ∫∫ G²(t₁,t₂) = 2 ∫_{t₁≤t₂} Tr[B₂†B₂ Φ(t₂,t₁)[B₁ρ₁B₁†]]
#   ḡ³ 分子 = 6 ∫_{t₁≤t₂≤t₃} ...（嵌套 QRT）
#
# 两种算法：
#   - grid   ：均匀 (t₁,t₂) 网格上批量传播夹心矩阵，得到完整 G² 图；支持有限窗口
#   - adjoint：Heisenberg 绘景反向积分 Y(t)=∫_t^T Φ†(s,t)[N(s)]ds，扫描时使用（无 G² 图）

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from services.dynamics import (
    DriveSpec, Lindbladian, NumericsConfig, TimeGrid, Trajectory,
    MagnusPropagator, integrate_master, coupled_amplitude, evolve, pulse_grid,
)
from services.quantum_core import DeviceParams, OperatorSet, QuantumState, check_state, validate_state
from utils import logger, uev_to_rate, IntegrationError

NEGATIVE_NUMERATOR_TOL = -1e-6


# ==================== 结果类型 ====================
@dataclass(frozen=True)
class OutputFlux:
    """⟨b_out†b_out⟩(t)（photons/ps）及其积分 n_out（photons/pulse）"""
    t: np.ndarray
    flux: np.ndarray
    n_out: float


@dataclass(frozen=True)
class PulseMoments:
    """
    单个脉冲输出光子数的阶乘矩：n_out、E₂ = ⟨n(n−1)⟩、E₃ = ⟨n(n−1)(n−2)⟩

    ḡ² = E₂/n²，ḡ³ = E₃/n³。
    """
    n_out: float
    pair: float
    triple: float | None = None

    @property
    def g2(self) -> float:
        return self.pair / self.n_out ** 2 if self.n_out > 0 else float('nan')

    @property
    def g3(self) -> float | None:
        if self.triple is None:
            return None
        return self.triple / self.n_out ** 3 if self.n_out > 0 else float('nan')


@dataclass(frozen=True)
class CorrelationResult:
    """G²(t₁,t₂) 网格（grid 算法才有）与积分后的 ḡ²(0)、可选 ḡ³(0,0)"""
    g2_bar: float
    n_out: float
    method: str
    t: np.ndarray | None = None
    G2: np.ndarray | None = None
    g3_zero: float | None = None
    window: float | None = None


# ==================== 输出场 ====================
def output_coupling(params: DeviceParams) -> float:
    """c = √(η_top κ)，单位 ps^(-1/2)"""
    return math.sqrt(params.eta_top * uev_to_rate(params.kappa))


def output_operator(t: float, drive: DriveSpec, params: DeviceParams, ops: OperatorSet) -> np.ndarray:
    """B(t) = √η_in⟨b_in⟩(t)·I + √(η_top κ)·a_H"""
    beta = complex(coupled_amplitude(drive, params, t))
    return beta * ops.identity + output_coupling(params) * ops.a_h


def output_flux(traj: Trajectory, drive: DriveSpec, params: DeviceParams) -> OutputFlux:
    """
    由轨迹记录的 ⟨a_H⟩、⟨a_H†a_H⟩ 计算输出光通量

    flux = |β|² + 2c·Re(β*⟨a_H⟩) + c²⟨a_H†a_H⟩
    """
    beta = np.asarray(coupled_amplitude(drive, params, traj.t), dtype=complex)
    c = output_coupling(params)
    flux = np.abs(beta) ** 2 + 2 * c * np.real(np.conj(beta) * traj.a_h) + c ** 2 * traj.n_h
    return OutputFlux(t=traj.t, flux=flux, n_out=float(trapezoid(flux, traj.t)))


def steady_state_flux(rho: QuantumState, drive: DriveSpec, params: DeviceParams,
                      ops: OperatorSet) -> float:
    """连续波稳态下的输出光通量 Tr[B†B ρ]（photons/ps）"""
    b_op = output_operator(0.0, drive, params, ops)
    return float(np.real(rho.expect(b_op.conj().T @ b_op)))


# ==================== 量子回归 ====================
def quantum_regression(rho_t1: QuantumState, t1: float, t2, params: DeviceParams, drive: DriveSpec,
                       ops: OperatorSet, sandwich_left: np.ndarray, observable: np.ndarray,
                       sandwich_right: np.ndarray | None = None,
                       max_step: float = 2.0):
    """
    条件期望 Tr[O · Φ(t₂,t₁)[A ρ(t₁) B]]，B 默认取 A†

    例如 A = a、O = a†a 给出 ⟨a†(t₁) a†(t₂) a(t₂) a(t₁)⟩。夹心矩阵不归一，
    用与 evolve 相同的 Magnus 积分器传播（max_step 为子步上限，ps）。

    Args:
        rho_t1: t₁ 时刻的密度矩阵
        t1: 起始时刻（ps）
        t2: 标量或递增数组，均需 ≥ t1
        sandwich_left / sandwich_right: A、B
        observable: O

    Returns:
        complex 或 np.ndarray（与 t2 形状一致）
    """
    scalar = np.ndim(t2) == 0
    t2s = np.atleast_1d(np.asarray(t2, dtype=float))
    if np.any(t2s < t1):
        raise ValueError("quantum_regression 要求 t2 ≥ t1")
    if np.any(np.diff(t2s) < 0):
        raise ValueError("t2 必须单调不减")
    right = sandwich_left.conj().T if sandwich_right is None else sandwich_right
    sandwiched = sandwich_left @ rho_t1.rho @ right

    values = np.empty(t2s.shape, dtype=complex)
    at_start = t2s == t1
    values[at_start] = np.einsum('ij,ji->', observable, sandwiched)
    later = t2s[~at_start]
    if later.size:
        d = ops.dim
        propagator = MagnusPropagator(Lindbladian(params, ops, drive), max_step)
        y, t_now = sandwiched.ravel(), t1
        propagated = np.empty((later.size, d, d), dtype=complex)
        for k, t_k in enumerate(later):
            y = propagator.propagate(y, t_now, float(t_k))
            propagated[k] = y.reshape(d, d)
            t_now = float(t_k)
        values[~at_start] = np.einsum('ij,tji->t', observable, propagated)
    return complex(values[0]) if scalar else values


# ==================== 背景光 ====================
def add_uncoupled_background(moments: PulseMoments, drive: DriveSpec, params: DeviceParams) -> PulseMoments:
    """
    把未耦合进腔模的 (1−η_in) 入射光作为独立相干模式叠加到阶乘矩上

    M = (1−η_in)·n_in；独立 Poisson 分量的阶乘矩按二项式展开合并。
    """
    background = (1 - params.eta_in) * drive.n_in
    n, e2, e3 = moments.n_out, moments.pair, moments.triple
    return PulseMoments(
        n_out=n + background,
        pair=e2 + 2 * n * background + background ** 2,
        triple=None if e3 is None else e3 + 3 * e2 * background + 3 * n * background ** 2 + background ** 3,
    )


def _checked_numerator(value: float, label: str) -> float:
    if value < NEGATIVE_NUMERATOR_TOL:
        raise IntegrationError(f"{label} 分子为负 ({value:.3e})，积分网格可能过粗")
    return max(value, 0.0)


# ==================== grid 算法 ====================
def _grid_correlation(rho0: QuantumState, drive: DriveSpec, params: DeviceParams, ops: OperatorSet,
                      grid: TimeGrid, window: float | None, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    """
    在 grid.t_out 上同时传播 ρ 和所有 X_j = Φ(t,t_j)[B_j ρ_j B_j†]

    Returns:
        (G2 对称矩阵, flux 数组)
    """
    d = ops.dim
    t = grid.t_out
    n = t.size
    propagator = MagnusPropagator(Lindbladian(params, ops, drive), grid.max_step)
    G2 = np.zeros((n, n))
    flux = np.zeros(n)

    rho = rho0.rho.astype(complex)
    sandwiches = np.empty((0, d, d), dtype=complex)
    origins: list[int] = []
    for k in range(n):
        b_op = output_operator(t[k], drive, params, ops)
        number = b_op.conj().T @ b_op
        flux[k] = float(np.real(np.einsum('ij,ji->', number, rho)))

        sandwiches = np.concatenate([sandwiches, (b_op @ rho @ b_op.conj().T)[np.newaxis]])
        origins.append(k)
        G2[origins, k] = np.real(np.einsum('ij,nji->n', number, sandwiches))

        if k == n - 1:
            break
        if window is not None:
            keep = [i for i, j in enumerate(origins) if t[k + 1] - t[j] <= window + 1e-9]
            sandwiches = sandwiches[keep]
            origins = [origins[i] for i in keep]

        stack = np.concatenate([rho[np.newaxis], sandwiches])
        shape = stack.shape
        columns = propagator.propagate(stack.reshape(shape[0], d * d).T, float(t[k]), float(t[k + 1]))
        stack = np.ascontiguousarray(columns.T).reshape(shape)
        rho, sandwiches = stack[0], stack[1:]
        if strict:
            check_state(validate_state(rho), context=f'G² 网格 t={t[k + 1]:.1f} ps')

    G2 = G2 + G2.T - np.diag(np.diag(G2))
    return G2, flux


def _g2_grid(rho0, drive, params, ops, grid, numerics) -> CorrelationResult:
    window = numerics.g2_window
    G2, flux = _grid_correlation(rho0, drive, params, ops, grid, window, numerics.strict_states)
    t = grid.t_out
    weights = G2
    if window is not None:
        weights = np.where(np.abs(t[:, None] - t[None, :]) <= window + 1e-9, G2, 0.0)
    pair = float(trapezoid(trapezoid(weights, t, axis=1), t))
    n_out = float(trapezoid(flux, t))

    moments = PulseMoments(n_out=n_out, pair=_checked_numerator(pair, 'ḡ²'))
    if numerics.include_background:
        moments = add_uncoupled_background(moments, drive, params)
    G2.setflags(write=False)
    return CorrelationResult(g2_bar=moments.g2, n_out=moments.n_out, method='grid',
                             t=t, G2=G2, window=window)


# ==================== adjoint 算法 ====================
def pulse_moments(rho0: QuantumState, drive: DriveSpec, params: DeviceParams, ops: OperatorSet,
                  grid: TimeGrid | None = None, numerics: NumericsConfig | None = None,
                  order: int = 2) -> PulseMoments:
    """
    伴随（Heisenberg 绘景）回归计算输出阶乘矩

    前向积分 ρ(t) 后，从 T 反向积分
        dY/dt = −N(t) − L_t†[Y]，             Y(T) = 0
        dZ/dt = −B†(t) Y B(t) − L_t†[Z]，     Z(T) = 0（order = 3 时）
    E₂ = 2∫Tr[ρ B†YB]dt，E₃ = 6∫Tr[ρ B†ZB]dt。

    Args:
        order: 2 只算 E₂；3 同时算 E₃
    """
    if order not in (2, 3):
        raise ValueError(f"order 只能为 2 或 3，当前为 {order}")
    numerics = numerics or NumericsConfig()
    grid = grid or pulse_grid(drive, params, numerics)
    traj = evolve(rho0, grid, params, drive, ops, strict=numerics.strict_states)
    n_out = output_flux(traj, drive, params).n_out

    d = ops.dim
    lindbladian = Lindbladian(params, ops, drive)
    shape = (order - 1, d, d)

    def backward(t, y):
        adjoint = y.reshape(shape)
        b_op = output_operator(t, drive, params, ops)
        b_dag = b_op.conj().T
        out = -lindbladian.adjoint_rhs(t, adjoint)
        out[0] -= b_dag @ b_op
        if order == 3:
            out[1] -= b_dag @ adjoint[0] @ b_op
        return out.ravel()

    t_out = grid.t_out
    sol = integrate_master(backward, (grid.t_end, grid.t_start), np.zeros(shape, dtype=complex).ravel(),
                           t_out[::-1], grid.atol, grid.rtol)
    adjoints = sol.y.T.reshape((-1,) + shape)[::-1]

    integrands = np.zeros((order - 1, t_out.size))
    for k, (t, rho) in enumerate(zip(t_out, traj.states)):
        b_op = output_operator(t, drive, params, ops)
        sandwiched = b_op @ rho @ b_op.conj().T
        integrands[:, k] = np.real(np.einsum('nij,ji->n', adjoints[k], sandwiched))

    pair = _checked_numerator(2 * float(trapezoid(integrands[0], t_out)), 'ḡ²')
    triple = None
    if order == 3:
        triple = _checked_numerator(6 * float(trapezoid(integrands[1], t_out)), 'ḡ³')
    moments = PulseMoments(n_out=n_out, pair=pair, triple=triple)
    if numerics.include_background:
        moments = add_uncoupled_background(moments, drive, params)
    logger.debug(f"脉冲阶乘矩: n_out={moments.n_out:.4e}, ḡ²={moments.g2:.4f}")
    return moments


# ==================== 对外接口 ====================
def g2_pulsed(rho0: QuantumState, drive: DriveSpec, params: DeviceParams, ops: OperatorSet,
              grid: TimeGrid | None = None, numerics: NumericsConfig | None = None) -> CorrelationResult:
    """
    时间积分的 ḡ²(0) = ∫∫G²(t,t+τ)dt dτ / [∫⟨b_out†b_out⟩dt]²

    numerics.g2_method 为 grid 时返回完整 G² 图（默认步长 dt_correlation）；
    设置了 g2_window 时总是使用 grid 算法。

    Raises:
        IntegrationError: 积分失败或分子明显为负
    """
    numerics = numerics or NumericsConfig()
    method = 'grid' if numerics.g2_window is not None else numerics.g2_method
    if method == 'grid':
        grid = grid or pulse_grid(drive, params, numerics, dt=numerics.dt_correlation)
        result = _g2_grid(rho0, drive, params, ops, grid, numerics)
    else:
        moments = pulse_moments(rho0, drive, params, ops, grid, numerics, order=2)
        result = CorrelationResult(g2_bar=moments.g2, n_out=moments.n_out, method='adjoint')
    logger.info(f"ḡ²(0) = {result.g2_bar:.4f}（{result.method}，n_out = {result.n_out:.4e}）")
    return result


def g3_zero_pulsed(rho0: QuantumState, drive: DriveSpec, params: DeviceParams, ops: OperatorSet,
                   grid: TimeGrid | None = None, numerics: NumericsConfig | None = None) -> float:
    """时间积分的 ḡ³(0,0)，嵌套伴随回归"""
    moments = pulse_moments(rho0, drive, params, ops, grid, numerics, order=3)
    logger.info(f"ḡ³(0,0) = {moments.g3:.4f}")
    return moments.g3
