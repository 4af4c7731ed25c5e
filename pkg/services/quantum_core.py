# services/quantum_core.py
# 量子核心层：截断 Hilbert 空间、算符构造、器件参数、密度矩阵校验
#
# 核心职责：
#   - 张量积顺序固定为 激子(3 能级) ⊗ H 腔模 ⊗ V 腔模，全项目统一
#   - 激子能级编号：0 = |G⟩，1 = |H⟩，2 = |V⟩
#   - 所有类型构造后不可变（frozen dataclass + 只读 ndarray），可在线程间共享
#   - 全部使用稠密矩阵（dim ≤ ~200）

import math
from dataclasses import dataclass, field, fields

import numpy as np

from utils import logger, StateValidityError

# ==================== 校验阈值 ====================
HERMITICITY_TOL = 1e-10
TRACE_TOL = 1e-8
MIN_EIGENVALUE_TOL = -1e-9

EXCITON_LEVELS = 3
G, H, V = 0, 1, 2


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=complex)
    array.setflags(write=False)
    return array


# ==================== 领域类型 ====================
@dataclass(frozen=True)
class HilbertSpace:
    """截断空间：dim = 3 · n_fock_h · n_fock_v"""
    n_fock_h: int
    n_fock_v: int

    def __post_init__(self):
        for name in ('n_fock_h', 'n_fock_v'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} 必须为 ≥ 1 的整数，当前为 {value}")

    @property
    def dim(self) -> int:
        return EXCITON_LEVELS * self.n_fock_h * self.n_fock_v


@dataclass(frozen=True)
class DeviceParams:
    """
    QD–微柱腔系统的全部物理常数（主器件默认值）

    能量/速率单位 µeV，θ 单位 rad。κ 的逃逸分配（顶镜 64%、底镜 10%、侧脊 26%）
    只有顶镜部分 eta_top 进入输入输出关系，其余仅作记录。
    qd_detuning 为 H 偶极跃迁相对 H 腔模的能量差（0 表示 QD 调谐进腔共振）。
    """
    g: float = 19.0
    kappa: float = 90.0
    gamma_sp: float = 0.6
    gamma_star: float = 0.03
    delta_fss: float = 3.0
    theta: float = math.radians(15.0)
    eta_top: float = 0.64
    eta_in: float = 0.95
    cavity_mode_splitting: float = 70.0
    omega_laser: float = 1.34
    rep_rate: float = 82e6
    qd_detuning: float = 0.0

    def __post_init__(self):
        for name in ('g', 'kappa', 'gamma_sp', 'gamma_star'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} 不能为负，当前为 {getattr(self, name)}")
        if self.kappa <= 0:
            raise ValueError(f"kappa 必须 > 0，当前为 {self.kappa}")
        for name in ('eta_top', 'eta_in'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} 必须在 [0, 1] 内，当前为 {value}")
        if self.omega_laser <= 0:
            raise ValueError(f"omega_laser 必须 > 0，当前为 {self.omega_laser}")
        if self.rep_rate <= 0:
            raise ValueError(f"rep_rate 必须 > 0，当前为 {self.rep_rate}")

    @property
    def gamma_total(self) -> float:
        """总退相干率 γ = γ_sp/2 + γ*"""
        return self.gamma_sp / 2 + self.gamma_star

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.field_names()}


@dataclass(frozen=True)
class OperatorSet:
    """全空间上的算符集合（dim × dim 复矩阵，只读）"""
    space: HilbertSpace
    theta: float
    sigma_h: np.ndarray
    sigma_v: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    a_h: np.ndarray
    a_v: np.ndarray
    pi_ex: np.ndarray
    identity: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.space.dim


@dataclass(frozen=True)
class QuantumState:
    """密度矩阵 ρ（构造时不强制校验，调用 validate_state 获取缺陷）"""
    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError(f"rho 必须为方阵，当前形状 {rho.shape}")
        object.__setattr__(self, 'rho', _frozen(rho))

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    def expect(self, operator: np.ndarray) -> complex:
        """⟨O⟩ = Tr(O ρ)"""
        return complex(np.einsum('ij,ji->', operator, self.rho))


@dataclass(frozen=True)
class StateDiagnostics:
    hermiticity: float
    trace_defect: float
    min_eigenvalue: float

    def is_valid(self) -> bool:
        return (self.hermiticity <= HERMITICITY_TOL
                and self.trace_defect <= TRACE_TOL
                and self.min_eigenvalue >= MIN_EIGENVALUE_TOL)


# ==================== 基本算符 ====================
def annihilation(n_fock: int) -> np.ndarray:
    """
    玻色湮灭算符 a[k, k+1] = √(k+1)

    Args:
        n_fock: 截断维数（≥ 1；1 表示仅真空）

    Returns:
        np.ndarray: n_fock × n_fock 复矩阵
    """
    if int(n_fock) != n_fock or n_fock < 1:
        raise ValueError(f"n_fock 必须为 ≥ 1 的整数，当前为 {n_fock}")
    return np.diag(np.sqrt(np.arange(1, n_fock, dtype=float)), k=1).astype(complex)


def exciton_rotation(theta: float) -> tuple[np.ndarray, np.ndarray]:
    """
    激子基矢旋转：|V⟩ = cosθ|X⟩ + sinθ|Y⟩，|H⟩ = −sinθ|X⟩ + cosθ|Y⟩

    Returns:
        (v_coeffs, h_coeffs)：在 (|X⟩, |Y⟩) 基下的系数
    """
    c, s = math.cos(theta), math.sin(theta)
    return np.array([c, s]), np.array([-s, c])


def qd_detunings(delta_x: float, delta_y: float, theta: float) -> tuple[float, float]:
    """旋转后的 QD 失谐 (δ_H^QD, δ_V^QD)"""
    c2, s2 = math.cos(theta) ** 2, math.sin(theta) ** 2
    return delta_x * s2 + delta_y * c2, delta_x * c2 + delta_y * s2


def fss_mixing(delta_fss: float, theta: float) -> float:
    """H/V 激子之间的精细结构混合系数 −Δ_FSS cosθ sinθ（µeV）"""
    return -delta_fss * math.cos(theta) * math.sin(theta)


def build_operators(space: HilbertSpace, theta: float = 0.0) -> OperatorSet:
    """
    把激子算符与两个腔模算符嵌入全空间（激子 ⊗ H ⊗ V）

    Args:
        space: 截断空间
        theta: QD 轴与腔轴夹角，用于构造自然轴算符 σ_X、σ_Y

    Returns:
        OperatorSet: 满足 [a, a†] = 1（顶层 Fock 除外）、σ² = 0、pi_ex 为投影
    """
    id_ex = np.eye(EXCITON_LEVELS, dtype=complex)
    id_h = np.eye(space.n_fock_h, dtype=complex)
    id_v = np.eye(space.n_fock_v, dtype=complex)

    def exciton_op(op3: np.ndarray) -> np.ndarray:
        return np.kron(np.kron(op3, id_h), id_v)

    lower_h = np.zeros((3, 3), dtype=complex)
    lower_h[G, H] = 1.0
    lower_v = np.zeros((3, 3), dtype=complex)
    lower_v[G, V] = 1.0

    # |X⟩ = c|V⟩ − s|H⟩，|Y⟩ = s|V⟩ + c|H⟩（旋转的逆）
    (c, s), _ = exciton_rotation(theta)
    lower_x = c * lower_v - s * lower_h
    lower_y = s * lower_v + c * lower_h

    projector = np.zeros((3, 3), dtype=complex)
    projector[H, H] = projector[V, V] = 1.0

    ops = OperatorSet(
        space=space,
        theta=theta,
        sigma_h=_frozen(exciton_op(lower_h)),
        sigma_v=_frozen(exciton_op(lower_v)),
        sigma_x=_frozen(exciton_op(lower_x)),
        sigma_y=_frozen(exciton_op(lower_y)),
        a_h=_frozen(np.kron(np.kron(id_ex, annihilation(space.n_fock_h)), id_v)),
        a_v=_frozen(np.kron(np.kron(id_ex, id_h), annihilation(space.n_fock_v))),
        pi_ex=_frozen(exciton_op(projector)),
        identity=_frozen(np.eye(space.dim, dtype=complex)),
    )
    logger.debug(f"算符构造完成: n_fock_h={space.n_fock_h}, n_fock_v={space.n_fock_v}, dim={space.dim}")
    return ops


# ==================== 常用态 ====================
def basis_state(space: HilbertSpace, exciton: int = G, n_h: int = 0, n_v: int = 0) -> QuantumState:
    """纯态 |exciton⟩⊗|n_h⟩⊗|n_v⟩ 的密度矩阵"""
    if not (0 <= n_h < space.n_fock_h and 0 <= n_v < space.n_fock_v):
        raise ValueError(f"光子数 ({n_h}, {n_v}) 超出截断 ({space.n_fock_h}, {space.n_fock_v})")
    index = (exciton * space.n_fock_h + n_h) * space.n_fock_v + n_v
    rho = np.zeros((space.dim, space.dim), dtype=complex)
    rho[index, index] = 1.0
    return QuantumState(rho)


def ground_state(space: HilbertSpace) -> QuantumState:
    return basis_state(space, G)


def excited_state(space: HilbertSpace, which: str = 'h') -> QuantumState:
    """激子激发态 |H⟩ 或 |V⟩（腔为真空）"""
    levels = {'h': H, 'v': V}
    if which not in levels:
        raise ValueError(f"which 只能为 'h' 或 'v'，当前为 {which}")
    return basis_state(space, levels[which])


# ==================== 态校验 ====================
def validate_state(rho: QuantumState | np.ndarray, dim: int | None = None) -> StateDiagnostics:
    """
    计算密度矩阵的三项缺陷，阈值由调用方决定

    Args:
        rho: 密度矩阵
        dim: 期望维数（给出时做维数检查）

    Returns:
        StateDiagnostics: (厄米缺陷, |Tr ρ − 1|, 最小本征值)

    Raises:
        ValueError: 维数不符
    """
    matrix = rho.rho if isinstance(rho, QuantumState) else np.asarray(rho)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"密度矩阵必须为方阵，当前形状 {matrix.shape}")
    if dim is not None and matrix.shape[0] != dim:
        raise ValueError(f"密度矩阵维数 {matrix.shape[0]} 与空间维数 {dim} 不符")

    hermiticity = float(np.max(np.abs(matrix - matrix.conj().T))) if matrix.size else 0.0
    trace_defect = float(abs(np.trace(matrix) - 1.0))
    hermitian_part = (matrix + matrix.conj().T) / 2
    min_eigenvalue = float(np.linalg.eigvalsh(hermitian_part)[0])
    return StateDiagnostics(hermiticity, trace_defect, min_eigenvalue)


def check_state(diagnostics: StateDiagnostics, context: str = '') -> None:
    """超出默认阈值时抛出 StateValidityError"""
    if diagnostics.is_valid():
        return
    message = (f"密度矩阵无效{f'（{context}）' if context else ''}: "
               f"厄米缺陷={diagnostics.hermiticity:.3e}, 迹缺陷={diagnostics.trace_defect:.3e}, "
               f"最小本征值={diagnostics.min_eigenvalue:.3e}")
    logger.error(message)
    raise StateValidityError(message)
