# services/dynamics.py
# 主方程动力学层：含时 Hamiltonian、Lindblad 超算符、脉冲/连续驱动下的时间演化与稳态
#
# 单位约定（全模块统一）：
#   - 能量与速率以 µeV 给出，进入方程前除以 ħ = 658.2119 µeV·ps 换算为 ps⁻¹
#   - 时间 ps；输入场振幅 ⟨b_in⟩ 单位 ps^(-1/2)，Rabi 频率 Ω 单位 ps⁻¹
#   - 旋转坐标系取激光频率 ω，所有 δ 均为相对 ω 的失谐
#
# 数值约定：
#   - 密度矩阵按行优先（C order）展平：vec(A X B) = (A ⊗ Bᵀ) vec(X)
#   - 密度矩阵演化：四阶无对易子 Magnus 指数积分（Gauss–Legendre 两节点），
#     只有驱动项含时，每个子步都是合法 Lindblad 生成元的指数，完全正定且保迹；
#     指数作用由 scipy expm_multiply 在稀疏超算符上计算
#   - 伴随（Heisenberg）反向积分含源项：scipy solve_ivp 的 DOP853，默认 atol 1e-10 / rtol 1e-8
#   - rhs 支持单个矩阵和 (..., d, d) 堆叠；MagnusPropagator 支持 (d²,) 向量和 (d², m) 列堆叠，供关联函数批量传播

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.linalg import lstsq
from scipy.sparse.linalg import expm_multiply

from services.quantum_core import (
    DeviceParams, HilbertSpace, OperatorSet, QuantumState, StateDiagnostics,
    build_operators, check_state, excited_state, fss_mixing, qd_detunings, validate_state,
)
from utils import (
    logger, uev_to_rate, HBAR_UEV_PS, EV_TO_J, PS_PER_S,
    IntegrationError, SteadyStateError, TruncationError,
)

DRIVE_KINDS = ('cw', 'gaussian_pulse')
FOUR_LN2 = 4 * math.log(2)

# 四阶无对易子 Magnus：Gauss–Legendre 节点偏移与权重
GAUSS_OFFSET = math.sqrt(3) / 6
ALPHA_1 = (3 - 2 * math.sqrt(3)) / 12
ALPHA_2 = (3 + 2 * math.sqrt(3)) / 12


# ==================== 驱动 ====================
@dataclass(frozen=True)
class DriveSpec:
    """
    经典驱动：连续波（photon_flux，单位 photons/ps）或高斯波包（n_in, tau, t0）

    tau 为强度 FWHM（ps）；laser_detuning 为激光相对 H 腔模的失谐 ω − ω_cH（µeV）。
    """
    kind: str = 'gaussian_pulse'
    n_in: float = 0.0
    tau: float = 125.0
    t0: float = 0.0
    photon_flux: float = 0.0
    laser_detuning: float = 0.0

    def __post_init__(self):
        if self.kind not in DRIVE_KINDS:
            raise ValueError(f"kind 必须为 {DRIVE_KINDS} 之一，当前为 {self.kind}")
        if self.n_in < 0:
            raise ValueError(f"n_in 不能为负，当前为 {self.n_in}")
        if self.tau <= 0:
            raise ValueError(f"tau 必须 > 0，当前为 {self.tau}")
        if self.photon_flux < 0:
            raise ValueError(f"photon_flux 不能为负，当前为 {self.photon_flux}")

    @classmethod
    def pulse(cls, n_in: float, tau: float = 125.0, t0: float = 0.0,
              laser_detuning: float = 0.0) -> 'DriveSpec':
        return cls('gaussian_pulse', n_in=n_in, tau=tau, t0=t0, laser_detuning=laser_detuning)

    @classmethod
    def cw(cls, photon_flux: float, laser_detuning: float = 0.0) -> 'DriveSpec':
        return cls('cw', photon_flux=photon_flux, laser_detuning=laser_detuning)

    @classmethod
    def cw_from_power(cls, power: float, omega_laser: float, laser_detuning: float = 0.0) -> 'DriveSpec':
        """连续波功率（W）→ 光子通量 P/ħω（photons/ps）"""
        flux_per_s = power / (omega_laser * EV_TO_J)
        return cls.cw(flux_per_s / PS_PER_S, laser_detuning)

    @property
    def is_cw(self) -> bool:
        return self.kind == 'cw'

    @property
    def is_dark(self) -> bool:
        return (self.photon_flux if self.is_cw else self.n_in) == 0

    def with_detuning(self, laser_detuning: float) -> 'DriveSpec':
        return replace(self, laser_detuning=laser_detuning)

    def input_amplitude(self, t):
        """入射场 ⟨b_in⟩(t)（未乘 √η_in），单位 ps^(-1/2)"""
        if self.is_cw:
            return np.sqrt(self.photon_flux) * np.ones_like(np.asarray(t, dtype=float))
        norm = (FOUR_LN2 / (math.pi * self.tau ** 2)) ** 0.25
        dt = np.asarray(t, dtype=float) - self.t0
        return math.sqrt(self.n_in) * norm * np.exp(-2 * math.log(2) * dt ** 2 / self.tau ** 2)


def coupled_amplitude(drive: DriveSpec, params: DeviceParams, t):
    """与腔模空间重叠部分的入射振幅 √η_in ⟨b_in⟩(t)；脉冲时 ∫|·|² dt = η_in · n_in"""
    return math.sqrt(params.eta_in) * drive.input_amplitude(t)


def rabi_amplitude(drive: DriveSpec, params: DeviceParams, t):
    """经典 Rabi 频率 Ω(t) = √(η_top κ) · √η_in ⟨b_in⟩(t)，单位 ps⁻¹"""
    return math.sqrt(params.eta_top * uev_to_rate(params.kappa)) * coupled_amplitude(drive, params, t)


# ==================== 失谐 ====================
@dataclass(frozen=True)
class LaserDetunings:
    """激光旋转坐标系下的失谐（µeV）"""
    cavity_h: float
    cavity_v: float
    qd_h: float
    qd_v: float
    mixing: float


def laser_detunings(params: DeviceParams, drive: DriveSpec) -> LaserDetunings:
    """
    由激光失谐推出腔模与 QD 各能级的失谐

    δ_H^QD = qd_detuning − Δ_L，且 δ_X − δ_Y = Δ_FSS；由 δ_H^QD = δ_Y + Δ_FSS sin²θ 反解 δ_X、δ_Y，
    再经 qd_detunings 得到 (δ_H^QD, δ_V^QD)。V 腔模比 H 腔模高 cavity_mode_splitting。
    """
    laser = drive.laser_detuning
    target_h = params.qd_detuning - laser
    delta_y = target_h - params.delta_fss * math.sin(params.theta) ** 2
    delta_x = delta_y + params.delta_fss
    qd_h, qd_v = qd_detunings(delta_x, delta_y, params.theta)
    return LaserDetunings(
        cavity_h=-laser,
        cavity_v=-laser + params.cavity_mode_splitting,
        qd_h=qd_h,
        qd_v=qd_v,
        mixing=fss_mixing(params.delta_fss, params.theta),
    )


def static_hamiltonian(params: DeviceParams, ops: OperatorSet, detunings: LaserDetunings) -> np.ndarray:
    """H_QD + H_c + H_i（µeV）"""
    dag = lambda op: op.conj().T
    h_qd = (detunings.qd_h * dag(ops.sigma_h) @ ops.sigma_h
            + detunings.qd_v * dag(ops.sigma_v) @ ops.sigma_v
            + detunings.mixing * (dag(ops.sigma_h) @ ops.sigma_v + dag(ops.sigma_v) @ ops.sigma_h))
    h_c = (detunings.cavity_h * dag(ops.a_h) @ ops.a_h
           + detunings.cavity_v * dag(ops.a_v) @ ops.a_v)
    h_i = -1j * params.g * (ops.a_v @ dag(ops.sigma_v) + ops.a_h @ dag(ops.sigma_h)
                            - dag(ops.a_v) @ ops.sigma_v - dag(ops.a_h) @ ops.sigma_h)
    return h_qd + h_c + h_i


def hamiltonian(t: float, params: DeviceParams, drive: DriveSpec, ops: OperatorSet,
                detunings: LaserDetunings | None = None) -> np.ndarray:
    """完整含时 Hamiltonian H(t) = H_QD + H_c + H_i + H_p(t)（µeV，厄米）"""
    detunings = detunings or laser_detunings(params, drive)
    omega = complex(rabi_amplitude(drive, params, t))
    h_p = 1j * HBAR_UEV_PS * (np.conj(omega) * ops.a_h - omega * ops.a_h.conj().T)
    return static_hamiltonian(params, ops, detunings) + h_p


# ==================== Lindblad 超算符 ====================
class Lindbladian:
    """
    预计算的 Lindblad 生成元 L_t（单位 ps⁻¹）

    dρ/dt = −i(H_eff ρ − ρ H_eff†) + Σ_k L_k ρ L_k†，其中 L_k 已吸收 √rate，
    H_eff = H/ħ − (i/2) Σ_k L_k† L_k。耗散通道：
    D[γ_sp, σ_H]、D[γ_sp, σ_V]、D[γ*, Π_ex]、D[κ, a_H]、D[κ, a_V]。
    """

    def __init__(self, params: DeviceParams, ops: OperatorSet, drive: DriveSpec,
                 detunings: LaserDetunings | None = None):
        self.params = params
        self.ops = ops
        self.drive = drive
        self.detunings = detunings or laser_detunings(params, drive)

        channels = [
            (params.gamma_sp, ops.sigma_h),
            (params.gamma_sp, ops.sigma_v),
            (params.gamma_star, ops.pi_ex),
            (params.kappa, ops.a_h),
            (params.kappa, ops.a_v),
        ]
        self.jumps = [math.sqrt(uev_to_rate(rate)) * op for rate, op in channels if rate > 0]
        self.jumps_dag = [op.conj().T for op in self.jumps]
        decay = sum((l_dag @ l for l, l_dag in zip(self.jumps, self.jumps_dag)),
                    np.zeros((ops.dim, ops.dim), dtype=complex))

        self.h0 = static_hamiltonian(params, ops, self.detunings) / HBAR_UEV_PS
        self.h0_eff = self.h0 - 0.5j * decay
        self._a = ops.a_h
        self._a_dag = ops.a_h.conj().T
        self._constant_drive = drive.is_cw or drive.is_dark
        self._cached_drive = self._drive_term(0.0) if self._constant_drive else None

    @property
    def constant_drive(self) -> bool:
        """连续波或零振幅驱动：生成元不含时"""
        return self._constant_drive

    def rabi(self, t: float) -> complex:
        return complex(rabi_amplitude(self.drive, self.params, t))

    def _drive_term(self, t: float) -> np.ndarray:
        omega = self.rabi(t)
        return 1j * (np.conj(omega) * self._a - omega * self._a_dag)

    def effective_hamiltonian(self, t: float) -> np.ndarray:
        drive_term = self._cached_drive if self._constant_drive else self._drive_term(t)
        return self.h0_eff + drive_term

    def rhs(self, t: float, rho: np.ndarray) -> np.ndarray:
        """dρ/dt，rho 可为 (d, d) 或 (..., d, d) 堆叠"""
        h_eff = self.effective_hamiltonian(t)
        out = -1j * (h_eff @ rho - rho @ h_eff.conj().T)
        for jump, jump_dag in zip(self.jumps, self.jumps_dag):
            out += jump @ rho @ jump_dag
        return out

    def adjoint_rhs(self, t: float, x: np.ndarray) -> np.ndarray:
        """Heisenberg 绘景生成元 L_t†[X] = i[H, X] + Σ (L† X L − ½{L†L, X})"""
        h_eff = self.effective_hamiltonian(t)
        out = 1j * (h_eff.conj().T @ x - x @ h_eff)
        for jump, jump_dag in zip(self.jumps, self.jumps_dag):
            out += jump_dag @ x @ jump
        return out

    def superoperator(self, t: float = 0.0) -> np.ndarray:
        """稠密超算符矩阵（行优先展平），尺寸 d² × d²"""
        d = self.ops.dim
        eye = np.eye(d, dtype=complex)
        h_eff = self.effective_hamiltonian(t)
        sup = -1j * np.kron(h_eff, eye) + 1j * np.kron(eye, h_eff.conj())
        for jump in self.jumps:
            sup += np.kron(jump, jump.conj())
        return sup

    def sparse_parts(self) -> tuple[sparse.csr_matrix, sparse.csr_matrix, sparse.csr_matrix]:
        """
        稀疏超算符分解 L_t = L0 + Re Ω(t)·D_x + Im Ω(t)·D_y

        驱动项 i(Ω* a − Ω a†) = Re Ω · i(a − a†) + Im Ω · (a + a†)，两部分都是厄米算符，
        因此任意实系数组合 c0·L0 + x·D_x + y·D_y（c0 > 0）仍是 Lindblad 生成元。
        """
        d = self.ops.dim
        eye = sparse.identity(d, dtype=complex, format='csr')

        def commutator(k: np.ndarray):
            k = sparse.csr_matrix(k)
            return -1j * sparse.kron(k, eye) + 1j * sparse.kron(eye, k.conj())

        l0 = commutator(self.h0_eff)
        for jump in self.jumps:
            jump = sparse.csr_matrix(jump)
            l0 = l0 + sparse.kron(jump, jump.conj())
        d_x = commutator(1j * (self._a - self._a_dag))
        d_y = commutator(self._a + self._a_dag)
        return l0.tocsr(), d_x.tocsr(), d_y.tocsr()


def lindblad_rhs(rho: QuantumState | np.ndarray, t: float, params: DeviceParams,
                 ops: OperatorSet, drive: DriveSpec) -> np.ndarray:
    """Lindblad 主方程右端 dρ/dt（ps⁻¹）"""
    matrix = rho.rho if isinstance(rho, QuantumState) else np.asarray(rho, dtype=complex)
    return Lindbladian(params, ops, drive).rhs(t, matrix)


# ==================== 数值配置 ====================
@dataclass(frozen=True)
class NumericsConfig:
    """数值参数（截断、容差、网格、关联函数算法、归一化方式）"""
    n_fock_h: int = 6
    n_fock_v: int = 2
    auto_truncation: bool = True
    max_fock: int = 40
    truncation_tol: float = 1e-3
    atol: float = 1e-10
    rtol: float = 1e-8
    dt_output: float = 2.0
    max_step: float = 2.0
    dt_correlation: float = 8.0
    g2_method: str = 'adjoint'
    g2_window: float | None = None
    include_background: bool = False
    normalization: str = 'coupled'
    strict_states: bool = True

    def __post_init__(self):
        if self.n_fock_h < 1 or self.n_fock_v < 1:
            raise ValueError(f"n_fock_h / n_fock_v 必须 ≥ 1，当前为 ({self.n_fock_h}, {self.n_fock_v})")
        if self.max_fock < max(self.n_fock_h, self.n_fock_v):
            raise ValueError(f"max_fock ({self.max_fock}) 小于起始截断")
        for name in ('atol', 'rtol', 'dt_output', 'max_step', 'dt_correlation', 'truncation_tol'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} 必须 > 0，当前为 {getattr(self, name)}")
        if self.g2_method not in ('grid', 'adjoint'):
            raise ValueError(f"g2_method 必须为 'grid' 或 'adjoint'，当前为 {self.g2_method}")
        if self.normalization not in ('coupled', 'incident'):
            raise ValueError(f"normalization 必须为 'coupled' 或 'incident'，当前为 {self.normalization}")
        if self.g2_window is not None and self.g2_window <= 0:
            raise ValueError(f"g2_window 必须 > 0，当前为 {self.g2_window}")

    @property
    def space(self) -> HilbertSpace:
        return HilbertSpace(self.n_fock_h, self.n_fock_v)


# ==================== 时间网格与轨迹 ====================
@dataclass(frozen=True)
class TimeGrid:
    """
    积分区间 + 固定输出网格

    max_step 为 Magnus 子步上限（ps），相邻输出点之间等分；atol / rtol 只用于伴随反向积分。
    """
    t_start: float
    t_end: float
    t_out: np.ndarray
    atol: float = 1e-10
    rtol: float = 1e-8
    max_step: float = 2.0

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"t_start ({self.t_start}) 必须小于 t_end ({self.t_end})")
        if self.max_step <= 0:
            raise ValueError(f"max_step 必须 > 0，当前为 {self.max_step}")
        t_out = np.asarray(self.t_out, dtype=float)
        if t_out.ndim != 1 or t_out.size == 0:
            raise ValueError("t_out 必须为非空一维数组")
        if np.any(np.diff(t_out) <= 0):
            raise ValueError("t_out 必须严格递增")
        if t_out[0] < self.t_start or t_out[-1] > self.t_end:
            raise ValueError("t_out 超出积分区间")
        t_out.setflags(write=False)
        object.__setattr__(self, 't_out', t_out)

    @classmethod
    def uniform(cls, t_start: float, t_end: float, dt: float,
                atol: float = 1e-10, rtol: float = 1e-8, max_step: float = 2.0) -> 'TimeGrid':
        n_points = max(2, int(math.ceil((t_end - t_start) / dt)) + 1)
        return cls(t_start, t_end, np.linspace(t_start, t_end, n_points), atol, rtol, max_step)

    @property
    def dt(self) -> float:
        return float(self.t_out[1] - self.t_out[0]) if self.t_out.size > 1 else 0.0


def purcell_lifetime(params: DeviceParams) -> float | None:
    """共振 Purcell 增强后的激子寿命估计 ħ/(γ_sp + 4g²/κ)（ps）；g = 0 时返回 None"""
    if params.g == 0:
        return None
    return HBAR_UEV_PS / (params.gamma_sp + 4 * params.g ** 2 / params.kappa)


def pulse_window(drive: DriveSpec, params: DeviceParams) -> tuple[float, float]:
    """脉冲积分窗口 [t0 − 4τ, t0 + 4τ + 8/κ + 12 τ_X]"""
    tail = 8 * HBAR_UEV_PS / params.kappa
    lifetime = purcell_lifetime(params)
    if lifetime is not None:
        tail += 12 * lifetime
    return drive.t0 - 4 * drive.tau, drive.t0 + 4 * drive.tau + tail


def pulse_grid(drive: DriveSpec, params: DeviceParams, numerics: NumericsConfig | None = None,
               dt: float | None = None) -> TimeGrid:
    numerics = numerics or NumericsConfig()
    t_start, t_end = pulse_window(drive, params)
    return TimeGrid.uniform(t_start, t_end, dt or numerics.dt_output,
                            numerics.atol, numerics.rtol, numerics.max_step)


@dataclass(frozen=True)
class Trajectory:
    """输出网格上的 (t, ρ(t)) 序列及记录的期望值 ⟨a_H⟩、⟨a_H†a_H⟩"""
    t: np.ndarray
    states: np.ndarray
    a_h: np.ndarray
    n_h: np.ndarray
    worst: StateDiagnostics = field(repr=False)

    def state(self, index: int) -> QuantumState:
        return QuantumState(self.states[index])

    @property
    def final(self) -> QuantumState:
        return self.state(-1)


def integrate_master(fun: Callable, t_span: tuple[float, float], y0: np.ndarray, t_eval: np.ndarray,
                     atol: float, rtol: float):
    """DOP853 自适应积分的统一入口（伴随反向扫描用），失败时抛出 IntegrationError"""
    sol = solve_ivp(fun, t_span, y0, method='DOP853', t_eval=t_eval, rtol=rtol, atol=atol)
    if sol.status < 0:
        t_fail = float(sol.t[-1]) if sol.t.size else float(t_span[0])
        raise IntegrationError(f"主方程积分失败: {sol.message}", t=t_fail)
    return sol


def substeps(t_a: float, t_b: float, max_step: float) -> np.ndarray:
    """[t_a, t_b] 等分为不超过 max_step 的子步，返回含两端的边界数组；t_a == t_b 时只含 t_a"""
    if t_b < t_a:
        raise ValueError(f"只支持正向传播: t_a={t_a}, t_b={t_b}")
    if t_b == t_a:
        return np.array([t_a])
    n = max(1, int(math.ceil((t_b - t_a) / max_step - 1e-12)))
    return np.linspace(t_a, t_b, n + 1)


class MagnusPropagator:
    """
    四阶无对易子 Magnus 指数积分器，作用于行优先展平的 vec(ρ)

    每个子步 [t, t+h] 取 Gauss–Legendre 节点 c± = t + (1/2 ± √3/6)h 处的 Rabi 频率 Ω±，
    依次作用 exp(h(½L0 + ω_a·D)) 与 exp(h(½L0 + ω_b·D))，
    ω_a = α₂Ω₋ + α₁Ω₊，ω_b = α₁Ω₋ + α₂Ω₊。两个指数的生成元都是 GKSL 形式，
    单步映射完全正定且保迹，负本征值只来自舍入。驱动不含时的情形两个因子合并为 exp(hL)，结果精确。

    y 可为 (d²,) 向量，也可为 (d², m) 列堆叠（批量传播多个算符）。
    """

    def __init__(self, lindbladian: Lindbladian, max_step: float = 2.0):
        if max_step <= 0:
            raise ValueError(f"max_step 必须 > 0，当前为 {max_step}")
        self.lindbladian = lindbladian
        self.max_step = max_step
        self.n_steps = 0
        self._l0, self._d_x, self._d_y = lindbladian.sparse_parts()
        self._full = None
        if lindbladian.constant_drive:
            self._full = self._generator(lindbladian.rabi(0.0), 1.0)

    def _generator(self, omega: complex, weight: float = 0.5) -> sparse.csr_matrix:
        gen = weight * self._l0
        if omega.real != 0:
            gen = gen + omega.real * self._d_x
        if omega.imag != 0:
            gen = gen + omega.imag * self._d_y
        return gen

    def step(self, y: np.ndarray, t: float, h: float) -> np.ndarray:
        self.n_steps += 1
        if self._full is not None:
            return expm_multiply(h * self._full, y)
        omega_1 = self.lindbladian.rabi(t + (0.5 - GAUSS_OFFSET) * h)
        omega_2 = self.lindbladian.rabi(t + (0.5 + GAUSS_OFFSET) * h)
        y = expm_multiply(h * self._generator(ALPHA_2 * omega_1 + ALPHA_1 * omega_2), y)
        return expm_multiply(h * self._generator(ALPHA_1 * omega_1 + ALPHA_2 * omega_2), y)

    def propagate(self, y: np.ndarray, t_a: float, t_b: float) -> np.ndarray:
        """y(t_a) → y(t_b)"""
        bounds = substeps(t_a, t_b, self.max_step)
        for start, end in zip(bounds[:-1], bounds[1:]):
            y = self.step(y, float(start), float(end - start))
        if not np.all(np.isfinite(y)):
            raise IntegrationError("Magnus 传播出现非有限值", t=float(t_b))
        return y


def worst_diagnostics(states: np.ndarray) -> StateDiagnostics:
    """整条轨迹上三项缺陷的最坏值"""
    hermiticity, trace_defect, min_eigenvalue = 0.0, 0.0, np.inf
    for rho in states:
        diag = validate_state(rho)
        hermiticity = max(hermiticity, diag.hermiticity)
        trace_defect = max(trace_defect, diag.trace_defect)
        min_eigenvalue = min(min_eigenvalue, diag.min_eigenvalue)
    return StateDiagnostics(hermiticity, trace_defect, float(min_eigenvalue))


def evolve(rho0: QuantumState, grid: TimeGrid, params: DeviceParams, drive: DriveSpec,
           ops: OperatorSet, strict: bool = True) -> Trajectory:
    """
    从 t_start 的 rho0 出发积分主方程，输出到 grid.t_out

    Args:
        rho0: 初始密度矩阵
        grid: 积分区间、输出网格与 Magnus 子步上限
        params / drive / ops: 模型
        strict: True 时任一输出态超出阈值即抛出 StateValidityError

    Returns:
        Trajectory

    Raises:
        IntegrationError: 传播出现非有限值（携带出错时刻）
    """
    d = ops.dim
    if rho0.dim != d:
        raise ValueError(f"初始态维数 {rho0.dim} 与算符维数 {d} 不符")
    propagator = MagnusPropagator(Lindbladian(params, ops, drive), grid.max_step)

    y = rho0.rho.ravel().astype(complex)
    t_now = grid.t_start
    states = np.empty((grid.t_out.size, d, d), dtype=complex)
    for k, t_k in enumerate(grid.t_out):
        y = propagator.propagate(y, t_now, float(t_k))
        states[k] = y.reshape(d, d)
        t_now = float(t_k)
    states.setflags(write=False)

    worst = worst_diagnostics(states)
    if strict:
        check_state(worst, context='evolve 输出网格')
    a_h = np.einsum('ij,tji->t', ops.a_h, states)
    n_op = ops.a_h.conj().T @ ops.a_h
    n_h = np.einsum('ij,tji->t', n_op, states).real
    logger.debug(f"演化完成: {grid.t_out.size} 个输出点, Magnus 子步 {propagator.n_steps}, "
                 f"最坏迹缺陷={worst.trace_defect:.2e}")
    return Trajectory(t=grid.t_out.copy(), states=states, a_h=a_h, n_h=n_h, worst=worst)


# ==================== 稳态 ====================
def steady_state(params: DeviceParams, cw_drive: DriveSpec, ops: OperatorSet,
                 max_refine: int = 5, tol: float = 1e-10) -> QuantumState:
    """
    连续驱动下主方程的不动点：向量化 Lindbladian 的零空间 + 迹条件，最小二乘直接求解

    Raises:
        ValueError: 非连续波驱动
        SteadyStateError: 迭代细化达到上限仍未满足残差要求
    """
    if not cw_drive.is_cw:
        raise ValueError("steady_state 只接受连续波驱动")
    d = ops.dim
    sup = Lindbladian(params, ops, cw_drive).superoperator()
    trace_row = np.eye(d, dtype=complex).ravel()
    system = np.vstack([sup, trace_row[np.newaxis, :]])
    target = np.zeros(d * d + 1, dtype=complex)
    target[-1] = 1.0

    vec, *_ = lstsq(system, target)
    for iteration in range(max_refine + 1):
        rho = vec.reshape(d, d)
        rho = (rho + rho.conj().T) / 2
        rho = rho / np.trace(rho)
        residual = float(np.linalg.norm(sup @ rho.ravel()))
        if residual <= tol * np.linalg.norm(rho):
            logger.debug(f"稳态求解收敛: 残差 {residual:.2e}（细化 {iteration} 次）")
            return QuantumState(rho)
        correction, *_ = lstsq(system, target - system @ vec)
        vec = vec + correction

    raise SteadyStateError(f"稳态求解未收敛: 细化 {max_refine} 次后残差 {residual:.3e}")


# ==================== 截断收敛 ====================
def _relative_change(new: float, old: float) -> float:
    scale = max(abs(new), abs(old))
    return 0.0 if scale == 0 else abs(new - old) / scale


def converge_truncation(experiment: Callable[[int, int], float], start: tuple[int, int] = (1, 1),
                        rel_tol: float = 1e-3, cap: int = 40) -> tuple[int, int]:
    """
    Fock 截断阶梯：返回最小的 (n_fock_h, n_fock_v)，使任一方向再加 1 时观测量相对变化 < rel_tol

    Args:
        experiment: (n_fock_h, n_fock_v) → 标量观测量
        start: 起始截断
        rel_tol: 相对变化阈值
        cap: 截断上限

    Raises:
        TruncationError: 超过上限仍未收敛
    """
    n_h, n_v = start
    cache: dict[tuple[int, int], float] = {}

    def value(h: int, v: int) -> float:
        if (h, v) not in cache:
            cache[(h, v)] = float(experiment(h, v))
        return cache[(h, v)]

    while True:
        if n_h + 1 > cap or n_v + 1 > cap:
            raise TruncationError(f"Fock 截断超过上限 {cap} 仍未收敛 (当前 {n_h}, {n_v})")
        base = value(n_h, n_v)
        change_h = _relative_change(value(n_h + 1, n_v), base)
        change_v = _relative_change(value(n_h, n_v + 1), base)
        logger.debug(f"截断 ({n_h}, {n_v}): Δ_H={change_h:.2e}, Δ_V={change_v:.2e}")
        if change_h < rel_tol and change_v < rel_tol:
            return n_h, n_v
        if change_h >= rel_tol:
            n_h += 1
        if change_v >= rel_tol:
            n_v += 1


# ==================== 激子有效衰减 ====================
@dataclass(frozen=True)
class DecayFit:
    rate: float          # ps⁻¹
    rate_uev: float
    lifetime: float      # ps


def effective_decay_rate(params: DeviceParams, space: HilbertSpace | None = None,
                         t_max: float | None = None, dt: float = 1.0,
                         atol: float = 1e-10, rtol: float = 1e-8) -> DecayFit:
    """
    无驱动下从 |H⟩ 出发的激子布居衰减，对 ln⟨Π_ex⟩ 做线性拟合得到有效速率

    结果只作报告（考虑 FSS、θ 与腔模分裂后的实际值）。
    """
    space = space or HilbertSpace(2, 2)
    ops = build_operators(space, params.theta)
    drive = DriveSpec.pulse(0.0)
    if t_max is None:
        lifetime = purcell_lifetime(params) or HBAR_UEV_PS / max(params.gamma_sp, 1e-12)
        t_max = 6 * lifetime
    grid = TimeGrid.uniform(0.0, t_max, dt, atol, rtol)
    traj = evolve(excited_state(space, 'h'), grid, params, drive, ops)
    population = np.einsum('ij,tji->t', ops.pi_ex, traj.states).real

    mask = population > 1e-3
    if mask.sum() < 3:
        raise ValueError("激子布居衰减过快，无法拟合，请减小 dt")
    slope, _ = np.polyfit(traj.t[mask], np.log(population[mask]), 1)
    rate = -float(slope)
    fit = DecayFit(rate=rate, rate_uev=rate * HBAR_UEV_PS, lifetime=1.0 / rate)
    logger.info(f"激子有效衰减: {fit.rate_uev:.3f} µeV，寿命 {fit.lifetime:.1f} ps")
    return fit
