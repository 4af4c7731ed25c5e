# services/experiments.py
# 实验编排层：功率换算、品质因数、连续波反射谱、脉冲功率扫描、脉宽研究、反射谱拟合
#
# 反射率归一方式：
#   coupled  ：R = n_out / (η_in · n_in)，相对真正耦合进腔模的光（默认）
#   incident ：R = n_out / n_in
# 扫描点之间互相独立，用线程池并发；结果顺序与输入 n_in 顺序一致。

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from services.correlations import PulseMoments, g2_pulsed, output_flux, pulse_moments, steady_state_flux
from services.dynamics import DriveSpec, NumericsConfig, converge_truncation, evolve, pulse_grid, steady_state
from services.quantum_core import DeviceParams, HilbertSpace, build_operators, ground_state
from services.statistics import decompose_output
from utils import logger, resolve_threads, EV_TO_J, QFilterError, SteadyStateError

FITTABLE_FIELDS = ('g', 'kappa', 'gamma_sp', 'gamma_star', 'delta_fss', 'theta', 'eta_top', 'qd_detuning')
MIN_POINTS_PER_PARAMETER = 5


# ==================== 功率与品质因数 ====================
def photons_per_pulse(power: float, rep_rate: float, omega_laser: float) -> float:
    """
    ⟨n_in⟩ = P / (Γ_rep · ħω_laser)

    Args:
        power: 入射平均功率（W）
        rep_rate: 重复频率（Hz）
        omega_laser: 光子能量（eV）
    """
    if rep_rate <= 0:
        raise ValueError(f"rep_rate 必须 > 0，当前为 {rep_rate}")
    if omega_laser <= 0:
        raise ValueError(f"omega_laser 必须 > 0，当前为 {omega_laser}")
    if power < 0:
        raise ValueError(f"power 不能为负，当前为 {power}")
    return power / (rep_rate * omega_laser * EV_TO_J)


@dataclass(frozen=True)
class FiguresOfMerit:
    """
    C = g²/(κγ)，γ = γ_sp/2 + γ*；cooperativity_radiative 只用 γ_sp/2（不含纯退相）

    两个协同度并列给出：主器件上含 γ* 的 C ≈ 12.2，只用 γ_sp/2 的约 13.4。
    """
    cooperativity: float
    purcell: float
    beta: float
    n_c: float
    gamma_total: float
    cooperativity_radiative: float


def figures_of_merit(params: DeviceParams) -> FiguresOfMerit:
    gamma = params.gamma_total
    cooperativity = params.g ** 2 / (params.kappa * gamma) if gamma > 0 else math.inf
    radiative = params.g ** 2 / (params.kappa * params.gamma_sp / 2) if params.gamma_sp > 0 else math.inf
    purcell = 2 * cooperativity
    n_c = params.gamma_sp ** 2 / (8 * params.g ** 2) if params.g > 0 else math.inf
    return FiguresOfMerit(
        cooperativity=cooperativity,
        purcell=purcell,
        beta=purcell / (purcell + 1) if math.isfinite(purcell) else 1.0,
        n_c=n_c,
        gamma_total=gamma,
        cooperativity_radiative=radiative,
    )


def reflectivity(n_out: float, n_in: float, params: DeviceParams, normalization: str = 'coupled') -> float:
    """按配置的归一方式计算反射率（n 可以是光子数或光子通量）"""
    if n_in <= 0:
        raise ValueError(f"n_in 必须 > 0，当前为 {n_in}")
    if normalization == 'coupled':
        return n_out / (params.eta_in * n_in)
    if normalization == 'incident':
        return n_out / n_in
    raise ValueError(f"未知归一方式: {normalization}")


def second_device_params() -> DeviceParams:
    """脉宽研究用的第二个器件（g=19, κ=100, γ_sp=0.94, γ*=0.03, Δ_FSS=10, θ=20°, η_top=0.635）"""
    return DeviceParams(g=19.0, kappa=100.0, gamma_sp=0.94, gamma_star=0.03, delta_fss=10.0,
                        theta=math.radians(20.0), eta_top=0.635)


def _pool(threads: int | None, n_tasks: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=max(1, min(resolve_threads(threads), n_tasks)))


# ==================== 连续波反射谱 ====================
@dataclass(frozen=True)
class SpectrumResult:
    power: float
    detunings: np.ndarray
    reflectivity: np.ndarray
    photon_flux: float
    n_fock_h: int
    n_fock_v: int


def _cw_reflectivity(params: DeviceParams, drive: DriveSpec, space: HilbertSpace, normalization: str) -> float:
    ops = build_operators(space, params.theta)
    try:
        rho = steady_state(params, drive, ops)
    except SteadyStateError as e:
        raise SteadyStateError(f"{e}（激光失谐 {drive.laser_detuning:+.2f} µeV）") from e
    return reflectivity(steady_state_flux(rho, drive, params, ops), drive.photon_flux, params, normalization)


def cw_spectrum(params: DeviceParams, power: float, detunings: Sequence[float],
                numerics: NumericsConfig | None = None, threads: int | None = None) -> SpectrumResult:
    """
    逐个激光失谐求稳态并计算反射率

    Args:
        params: 器件参数
        power: 连续波功率（W）
        detunings: 激光相对 H 腔模的失谐网格（µeV）
        numerics: 截断与归一方式；auto_truncation 时在 QD 共振处收敛截断
        threads: 并发线程数

    Raises:
        SteadyStateError: 某个失谐点稳态不收敛（消息带失谐值）
    """
    numerics = numerics or NumericsConfig()
    detunings = np.asarray(detunings, dtype=float)
    if power <= 0:
        raise ValueError(f"power 必须 > 0，当前为 {power}")
    base = DriveSpec.cw_from_power(power, params.omega_laser)

    n_h, n_v = numerics.n_fock_h, numerics.n_fock_v
    if numerics.auto_truncation:
        on_dot = base.with_detuning(params.qd_detuning)
        n_h, n_v = converge_truncation(
            lambda h, v: _cw_reflectivity(params, on_dot, HilbertSpace(h, v), numerics.normalization),
            start=(1, 1), rel_tol=numerics.truncation_tol, cap=numerics.max_fock)
    space = HilbertSpace(n_h, n_v)

    with _pool(threads, detunings.size) as executor:
        values = list(executor.map(
            lambda d: _cw_reflectivity(params, base.with_detuning(float(d)), space, numerics.normalization),
            detunings))
    logger.info(f"连续波反射谱完成: P = {power:.3e} W, {detunings.size} 点, 截断 ({n_h}, {n_v})")
    return SpectrumResult(power=power, detunings=detunings, reflectivity=np.array(values),
                          photon_flux=base.photon_flux, n_fock_h=n_h, n_fock_v=n_v)


# ==================== 脉冲扫描 ====================
@dataclass(frozen=True)
class SweepPoint:
    n_in: float
    reflectivity: float
    g2: float
    mu_qd: float
    mu_alpha: float
    n_out: float
    n_fock_h: int
    n_fock_v: int
    g3: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @classmethod
    def failed(cls, n_in: float, error: str) -> 'SweepPoint':
        nan = float('nan')
        return cls(n_in, nan, nan, nan, nan, nan, 0, 0, error=error)


@dataclass(frozen=True)
class SweepResult:
    tau: float
    points: tuple[SweepPoint, ...]
    R_max: float
    R_min: float
    contrast: float
    threshold: float | None
    normalization: str = 'coupled'

    def column(self, name: str) -> np.ndarray:
        values = [getattr(point, name) for point in self.points]
        return np.array([np.nan if v is None else v for v in values], dtype=float)

    @property
    def partial(self) -> bool:
        return any(not point.ok for point in self.points)

    @property
    def low_power_g2(self) -> float:
        good = [point for point in self.points if point.ok]
        return good[0].g2 if good else float('nan')

    def summary(self) -> dict:
        return {
            'tau': self.tau,
            'R_max': self.R_max,
            'R_min': self.R_min,
            'contrast': self.contrast,
            'threshold': self.threshold,
            'low_power_g2': self.low_power_g2,
            'normalization': self.normalization,
            'failed_points': [point.n_in for point in self.points if not point.ok],
        }


def _pulse_n_out(params: DeviceParams, drive: DriveSpec, space: HilbertSpace, numerics: NumericsConfig) -> float:
    ops = build_operators(space, params.theta)
    grid = pulse_grid(drive, params, numerics)
    traj = evolve(ground_state(space), grid, params, drive, ops, strict=numerics.strict_states)
    return output_flux(traj, drive, params).n_out


def converged_space(params: DeviceParams, drive: DriveSpec, numerics: NumericsConfig,
                    start: tuple[int, int] = (1, 1)) -> HilbertSpace:
    """auto_truncation 时对 n_out 走截断阶梯，否则直接用配置的截断"""
    if not numerics.auto_truncation:
        return numerics.space
    n_h, n_v = converge_truncation(lambda h, v: _pulse_n_out(params, drive, HilbertSpace(h, v), numerics),
                                   start=start, rel_tol=numerics.truncation_tol, cap=numerics.max_fock)
    return HilbertSpace(n_h, n_v)


def output_statistics(params: DeviceParams, n_in: float, tau: float,
                      numerics: NumericsConfig | None = None, start: tuple[int, int] = (1, 1),
                      laser_detuning: float = 0.0) -> tuple[PulseMoments, HilbertSpace]:
    """单个脉冲的 (n_out, ḡ², ḡ³)，供分解与 Fock 重建使用"""
    numerics = numerics or NumericsConfig()
    drive = DriveSpec.pulse(n_in, tau, laser_detuning=laser_detuning)
    space = converged_space(params, drive, numerics, start)
    ops = build_operators(space, params.theta)
    moments = pulse_moments(ground_state(space), drive, params, ops, numerics=numerics, order=3)
    logger.info(f"输出统计 n_in={n_in}: n_out={moments.n_out:.4e}, ḡ²={moments.g2:.4f}, ḡ³={moments.g3:.4f}")
    return moments, space


def pulsed_point(params: DeviceParams, n_in: float, tau: float, numerics: NumericsConfig | None = None,
                 start: tuple[int, int] = (1, 1), with_g3: bool = False) -> SweepPoint:
    """
    单个 n_in 的脉冲反射率、ḡ² 与分解

    截断阶梯从 start 出发；g2_method 为 grid 时走完整 G² 网格算法。
    """
    numerics = numerics or NumericsConfig()
    if n_in <= 0:
        raise ValueError(f"n_in 必须 > 0，当前为 {n_in}")
    drive = DriveSpec.pulse(n_in, tau)
    space = converged_space(params, drive, numerics, start)
    ops = build_operators(space, params.theta)
    rho0 = ground_state(space)

    g3 = None
    if with_g3 or numerics.g2_method == 'adjoint' and numerics.g2_window is None:
        moments = pulse_moments(rho0, drive, params, ops, numerics=numerics, order=3 if with_g3 else 2)
        n_out, g2, g3 = moments.n_out, moments.g2, moments.g3
    else:
        result = g2_pulsed(rho0, drive, params, ops, numerics=numerics)
        n_out, g2 = result.n_out, result.g2_bar

    decomposition = decompose_output(n_out, g2)
    point = SweepPoint(
        n_in=n_in,
        reflectivity=reflectivity(n_out, n_in, params, numerics.normalization),
        g2=g2,
        mu_qd=decomposition.mu_qd,
        mu_alpha=decomposition.mu_alpha,
        n_out=n_out,
        n_fock_h=space.n_fock_h,
        n_fock_v=space.n_fock_v,
        g3=g3,
    )
    logger.info(f"扫描点 n_in={n_in:.4g}: R={point.reflectivity:.4f}, ḡ²={g2:.4f}, "
                f"截断 ({space.n_fock_h}, {space.n_fock_v})")
    return point


def midpoint_threshold(n_in: np.ndarray, values: np.ndarray) -> float | None:
    """R 首次穿过 (R_max+R_min)/2 处的 n_in，对 log n_in 线性插值；无穿越时返回 None"""
    mid = (np.nanmax(values) + np.nanmin(values)) / 2
    for i in range(len(values) - 1):
        r_a, r_b = values[i], values[i + 1]
        if np.isnan(r_a) or np.isnan(r_b):
            continue
        if r_a >= mid > r_b:
            fraction = (mid - r_a) / (r_b - r_a)
            log_n = math.log(n_in[i]) + fraction * (math.log(n_in[i + 1]) - math.log(n_in[i]))
            return math.exp(log_n)
    return None


def summarize_sweep(tau: float, points: Sequence[SweepPoint], normalization: str = 'coupled') -> SweepResult:
    good = [point for point in points if point.ok]
    if not good:
        nan = float('nan')
        return SweepResult(tau, tuple(points), nan, nan, nan, None, normalization)
    values = np.array([point.reflectivity for point in good])
    n_in = np.array([point.n_in for point in good])
    r_max, r_min = float(values.max()), float(values.min())
    contrast = (r_max - r_min) / r_min if r_min > 0 else math.inf
    return SweepResult(tau=tau, points=tuple(points), R_max=r_max, R_min=r_min, contrast=contrast,
                       threshold=midpoint_threshold(n_in, values), normalization=normalization)


def pulsed_sweep(params: DeviceParams, tau: float, n_in_list: Sequence[float],
                 numerics: NumericsConfig | None = None, threads: int | None = None,
                 with_g3: bool = False) -> SweepResult:
    """
    脉冲功率扫描

    n_in 升序分批并发：每批的截断阶梯从上一批得到的最大截断出发（截断随 n_in 单调增加），
    单线程时即逐点接续。单点失败（截断不收敛等）记录在该点的 error 中，其余点照常计算。

    Raises:
        ValueError: n_in 非正或未排序
    """
    numerics = numerics or NumericsConfig()
    n_in_list = [float(n) for n in n_in_list]
    if not n_in_list:
        raise ValueError("n_in 列表不能为空")
    if any(n <= 0 for n in n_in_list):
        raise ValueError("n_in 必须全部 > 0")
    if any(b < a for a, b in zip(n_in_list, n_in_list[1:])):
        raise ValueError("n_in 列表必须升序")

    def run(n_in: float, start: tuple[int, int]) -> SweepPoint:
        try:
            return pulsed_point(params, n_in, tau, numerics, start, with_g3)
        except QFilterError as e:
            logger.error(f"扫描点 n_in={n_in} 失败: {e}", exc_info=True)
            return SweepPoint.failed(n_in, str(e))

    workers = max(1, min(resolve_threads(threads), len(n_in_list)))
    start = (1, 1) if numerics.auto_truncation else (numerics.n_fock_h, numerics.n_fock_v)
    points: list[SweepPoint] = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for offset in range(0, len(n_in_list), workers):
            batch = n_in_list[offset:offset + workers]
            results = list(executor.map(lambda n: run(n, start), batch))
            points.extend(results)
            good = [point for point in results if point.ok]
            if good:
                start = (max(p.n_fock_h for p in good), max(p.n_fock_v for p in good))

    result = summarize_sweep(tau, points, numerics.normalization)
    threshold = f"{result.threshold:.3g}" if result.threshold is not None else 'n/a'
    logger.info(f"脉冲扫描完成 τ={tau} ps: R_max={result.R_max:.3f}, R_min={result.R_min:.3f}, "
                f"阈值={threshold}, 对比度={result.contrast:.2f}")
    return result


def pulse_length_study(params: DeviceParams, taus: Sequence[float], n_in_list: Sequence[float],
                       numerics: NumericsConfig | None = None, threads: int | None = None) -> dict[float, SweepResult]:
    """同一器件在不同脉宽下的扫描：阈值、对比度与低功率 ḡ²"""
    results = {}
    for tau in taus:
        results[float(tau)] = pulsed_sweep(params, tau, n_in_list, numerics, threads)
        logger.info(f"脉宽 {tau} ps: 低功率 ḡ² = {results[float(tau)].low_power_g2:.3f}")
    return results


def contrast_curve(result: SweepResult) -> np.ndarray:
    """(R − R_min)/R_min，逐点"""
    return (result.column('reflectivity') - result.R_min) / result.R_min


# ==================== 反射谱拟合 ====================
@dataclass(frozen=True)
class FitResult:
    params: DeviceParams
    residual: float
    initial_residual: float
    converged: bool
    message: str
    n_evaluations: int = 0
    free: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            'params': self.params.to_dict(),
            'free': list(self.free),
            'residual': self.residual,
            'initial_residual': self.initial_residual,
            'converged': self.converged,
            'status': 'converged' if self.converged else 'unconverged',
            'message': self.message,
            'n_evaluations': self.n_evaluations,
        }


def _default_bounds(name: str, value: float) -> tuple[float, float]:
    if name in ('eta_top',):
        return 0.0, 1.0
    if name == 'theta':
        return -math.pi / 2, math.pi / 2
    if name == 'qd_detuning':
        return value - 200.0, value + 200.0
    return 0.0, max(10 * abs(value), 1.0)


def fit_cw_spectrum(measured: Sequence[tuple[float, float]], initial: DeviceParams, free: Sequence[str],
                    power: float, numerics: NumericsConfig | None = None,
                    bounds: dict[str, tuple[float, float]] | None = None,
                    max_iter: int = 400, threads: int | None = None) -> FitResult:
    """
    Nelder–Mead 无导数最小二乘拟合连续波反射谱

    初始单纯形由初值加 10% 扰动构成（零值参数用绝对步长），结果确定。

    Args:
        measured: (激光失谐 µeV, R) 列表
        initial: 初始参数
        free: 自由参数名（FITTABLE_FIELDS 子集）
        power: 测量时的连续波功率（W）
        bounds: 参数范围覆盖
        max_iter: 最大迭代次数，达到后返回当前最优并标记 unconverged

    Raises:
        ValueError: 未知自由参数，或数据点少于 5 × 自由参数数
    """
    numerics = replace(numerics or NumericsConfig(), auto_truncation=False)
    data = np.asarray(measured, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError("measured 必须为 (失谐, R) 二元组列表")
    detunings, target = data[:, 0], data[:, 1]
    free = tuple(free)
    unknown = [name for name in free if name not in FITTABLE_FIELDS]
    if unknown:
        raise ValueError(f"不可拟合的参数: {unknown}（可选 {FITTABLE_FIELDS}）")
    if free and len(data) < MIN_POINTS_PER_PARAMETER * len(free):
        raise ValueError(f"数据点 {len(data)} 少于 {MIN_POINTS_PER_PARAMETER} × 自由参数数 {len(free)}")

    def model(values) -> DeviceParams:
        return replace(initial, **{name: float(v) for name, v in zip(free, values)})

    evaluations = 0

    def objective(values) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            spectrum = cw_spectrum(model(values), power, detunings, numerics, threads)
        except (ValueError, QFilterError) as e:
            logger.debug(f"拟合目标函数在 {values} 处失败: {e}")
            return math.inf
        return float(np.sum((spectrum.reflectivity - target) ** 2))

    x0 = np.array([getattr(initial, name) for name in free], dtype=float)
    initial_residual = objective(x0)
    if not free:
        return FitResult(initial, initial_residual, initial_residual, True, '无自由参数', evaluations, free)

    limits = dict(bounds or {})
    box = [limits.get(name, _default_bounds(name, value)) for name, value in zip(free, x0)]
    simplex = np.tile(x0, (len(free) + 1, 1))
    for i, value in enumerate(x0):
        simplex[i + 1, i] += 0.1 * value if value != 0 else 0.1 * (box[i][1] - box[i][0]) / 10

    result = minimize(objective, x0, method='Nelder-Mead', bounds=box,
                      options={'initial_simplex': simplex, 'maxiter': max_iter,
                               'xatol': 1e-4, 'fatol': 1e-10})
    best, residual = result.x, float(result.fun)
    if residual > initial_residual:
        best, residual = x0, initial_residual
    converged = bool(result.success) and math.isfinite(residual)
    if not converged:
        logger.warning(f"反射谱拟合未收敛: {result.message}")
    fitted = model(best)
    logger.info(f"反射谱拟合: 残差 {initial_residual:.3e} → {residual:.3e}（{evaluations} 次评估）")
    return FitResult(fitted, residual, initial_residual, converged, str(result.message), evaluations, free)
