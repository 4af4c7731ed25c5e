# repositories/config_repo.py
# 运行配置数据访问层：读取 TOML/JSON 配置文件，合并命令行覆盖项，校验并填充默认值
#
# 优先级：命令行 > 配置文件 > 默认值（默认值即主器件参数）
# 未知键一律拒绝（报出完整键名，如 device.eta_tp），不做静默纠错。
# θ 在配置中以弧度给出；也可用 theta_deg 以角度给出（二者不能同时出现）。

import os
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Any, get_args

from services.dynamics import DriveSpec, NumericsConfig
from services.experiments import photons_per_pulse, second_device_params
from services.quantum_core import DeviceParams
from services.tttr import DetectorConfig
from utils import logger, ConfigError

EXPERIMENTS = ('cw-spectrum', 'pulsed-sweep', 'g3-map', 'decompose', 'fock', 'fit', 'clicks')
CLICK_SOURCES = ('poisson', 'single', 'simulated', 'file')
DEVICE_PRESETS = ('main', 'second')
DEFAULT_N_IN = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 30.0)


# ==================== 配置分节 ====================
@dataclass(frozen=True)
class DriveSettings:
    n_in: float = 0.1
    tau: float = 125.0
    t0: float = 0.0
    laser_detuning: float = 0.0
    power: float | None = None      # W；给出时按 photons_per_pulse 换算 n_in


@dataclass(frozen=True)
class SweepSettings:
    n_in: tuple[float, ...] = DEFAULT_N_IN
    taus: tuple[float, ...] = ()    # 非空时做脉宽研究
    with_g3: bool = False


@dataclass(frozen=True)
class SpectrumSettings:
    powers: tuple[float, ...] = (14e-12,)
    detuning_range: tuple[float, float, float] = (-200.0, 200.0, 2.0)

    def detunings(self) -> list[float]:
        lo, hi, step = self.detuning_range
        n_steps = int(math.floor((hi - lo) / step + 1e-9))
        return [lo + i * step for i in range(n_steps + 1)]


@dataclass(frozen=True)
class ClickSettings:
    source: str = 'poisson'         # poisson / single / simulated（由器件模型重建 P(k)）/ file
    mean: float = 0.1               # poisson 源的平均光子数
    n_in: float | None = None       # simulated 源的入射光子数，缺省取 drive.n_in
    n_pulses: int = 1_000_000
    max_periods: int = 5
    csv: bool = False
    input: str | None = None        # source = file 时读取的点击文件


@dataclass(frozen=True)
class FitSettings:
    spectrum_path: str | None = None
    power: float = 14e-12
    free: tuple[str, ...] = ('g', 'gamma_sp')
    max_iter: int = 400


@dataclass(frozen=True)
class AnalysisSettings:
    n_out: float | None = None
    g2: float | None = None
    g3: float | None = None
    n_in: float | None = None


@dataclass(frozen=True)
class OutputSettings:
    dir: str = 'output'
    xlsx: bool = False


@dataclass(frozen=True)
class RunConfig:
    experiment: str = 'pulsed-sweep'
    seed: int = 0
    threads: int | None = None
    device: DeviceParams = field(default_factory=DeviceParams)
    drive: DriveSpec = field(default_factory=lambda: DriveSpec.pulse(0.1))
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    spectrum: SpectrumSettings = field(default_factory=SpectrumSettings)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    clicks: ClickSettings = field(default_factory=ClickSettings)
    fit: FitSettings = field(default_factory=FitSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def to_dict(self) -> dict:
        """清单用的纯字典形式（DriveSpec 以字段展开）"""
        data = {name: getattr(self, name) for name in ('experiment', 'seed', 'threads')}
        for section in ('device', 'numerics', 'sweep', 'spectrum', 'detector', 'clicks', 'fit',
                        'analysis', 'output'):
            data[section] = asdict(getattr(self, section))
        data['drive'] = asdict(self.drive)
        return data


# ==================== 类型转换 ====================
def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    """按默认值类型转换单个配置项，失败时 ConfigError 带完整键名"""
    key = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} 必须为布尔值，当前为 {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} 必须为数值，当前为 {value!r}")
        if isinstance(default, int):
            # TOML 里 1e6 这类写法是浮点
            if not float(value).is_integer():
                raise ConfigError(f"{key} 必须为整数，当前为 {value!r}")
            return int(value)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} 必须为字符串，当前为 {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} 必须为列表，当前为 {value!r}")
        if default and all(isinstance(item, str) for item in default):
            if not all(isinstance(item, str) for item in value):
                raise ConfigError(f"{key} 必须为字符串列表，当前为 {value!r}")
            return tuple(value)
        if any(isinstance(item, bool) or not isinstance(item, (int, float)) for item in value):
            raise ConfigError(f"{key} 必须为数值列表，当前为 {value!r}")
        return tuple(float(item) for item in value)
    return value


def _build(cls, section: str, mapping: dict, base=None):
    """用 mapping 覆盖 base（默认 cls()）的字段，拒绝未知键"""
    base = base if base is not None else cls()
    types = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(mapping) - set(types))
    if unknown:
        raise ConfigError(f"未知配置项: {', '.join(f'{section}.{k}' for k in unknown)}")
    values = {}
    for name, value in mapping.items():
        default = getattr(base, name)
        if default is None and value is not None:
            # 可选字段（X | None）按其非 None 类型校验
            default = 0.0 if float in get_args(types[name]) else ''
        values[name] = value if value is None else _coerce(section, name, value, default)
    try:
        return replace(base, **values)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def _device(mapping: dict) -> DeviceParams:
    mapping = dict(mapping)
    preset = mapping.pop('preset', 'main')
    if preset not in DEVICE_PRESETS:
        raise ConfigError(f"device.preset 必须为 {DEVICE_PRESETS} 之一，当前为 {preset!r}")
    if 'theta_deg' in mapping:
        if 'theta' in mapping:
            raise ConfigError("device.theta 与 device.theta_deg 不能同时给出")
        mapping['theta'] = math.radians(_coerce('device', 'theta_deg', mapping.pop('theta_deg'), 0.0))
    base = second_device_params() if preset == 'second' else DeviceParams()
    return _build(DeviceParams, 'device', mapping, base)


def _drive(settings: DriveSettings, device: DeviceParams) -> DriveSpec:
    n_in = settings.n_in
    if settings.power is not None:
        n_in = photons_per_pulse(settings.power, device.rep_rate, device.omega_laser)
        logger.info(f"drive.power = {settings.power:.3e} W → n_in = {n_in:.4f}")
    try:
        return DriveSpec.pulse(n_in, settings.tau, settings.t0, settings.laser_detuning)
    except ValueError as e:
        raise ConfigError(f"[drive] {e}") from e


# ==================== 读取与合并 ====================
def read_config_file(path: str | None) -> dict:
    """TOML（默认）或 JSON（.json 后缀）→ 嵌套字典；path 为 None 时返回空字典"""
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        if path.lower().endswith('.json'):
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
            return json.loads(text) if text.strip() else {}
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"配置文件解析失败: {path} - {e}") from e


def merge(base: dict, overrides: dict) -> dict:
    """嵌套字典合并，overrides 优先"""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(raw: dict) -> RunConfig:
    """由嵌套字典构造并校验 RunConfig"""
    top_level = {'experiment', 'seed', 'threads'}
    sections = {'device', 'drive', 'numerics', 'sweep', 'spectrum', 'detector', 'clicks', 'fit',
                'analysis', 'output'}
    unknown = sorted(set(raw) - top_level - sections)
    if unknown:
        raise ConfigError(f"未知配置项: {', '.join(unknown)}")
    for name in sections & set(raw):
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] 必须为表（table）")

    experiment = raw.get('experiment', RunConfig.experiment)
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment 必须为 {EXPERIMENTS} 之一，当前为 {experiment!r}")
    seed = raw.get('seed', 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed 必须为非负整数，当前为 {seed!r}")
    threads = raw.get('threads')
    if threads is not None and (isinstance(threads, bool) or not isinstance(threads, int) or threads < 1):
        raise ConfigError(f"threads 必须为正整数，当前为 {threads!r}")

    device = _device(raw.get('device', {}))
    drive = _drive(_build(DriveSettings, 'drive', raw.get('drive', {})), device)
    numerics = _build(NumericsConfig, 'numerics', raw.get('numerics', {}))
    sweep = _build(SweepSettings, 'sweep', raw.get('sweep', {}))
    if not sweep.n_in or any(n <= 0 for n in sweep.n_in):
        raise ConfigError("sweep.n_in 必须为非空正数列表")
    if any(b < a for a, b in zip(sweep.n_in, sweep.n_in[1:])):
        raise ConfigError("sweep.n_in 必须升序")
    spectrum = _build(SpectrumSettings, 'spectrum', raw.get('spectrum', {}))
    if len(spectrum.detuning_range) != 3 or spectrum.detuning_range[2] <= 0 \
            or spectrum.detuning_range[1] < spectrum.detuning_range[0]:
        raise ConfigError(f"spectrum.detuning_range 必须为 [lo, hi, step] 且 step > 0，当前为 {spectrum.detuning_range}")
    if not spectrum.powers or any(p <= 0 for p in spectrum.powers):
        raise ConfigError("spectrum.powers 必须为非空正数列表")
    detector = _build(DetectorConfig, 'detector', raw.get('detector', {}))
    clicks = _build(ClickSettings, 'clicks', raw.get('clicks', {}))
    if clicks.source not in CLICK_SOURCES:
        raise ConfigError(f"clicks.source 必须为 {CLICK_SOURCES} 之一，当前为 {clicks.source!r}")
    if clicks.source == 'file' and not clicks.input:
        raise ConfigError("clicks.source = file 时必须给出 clicks.input")
    if clicks.n_pulses < 0 or clicks.max_periods < 1:
        raise ConfigError("clicks.n_pulses 不能为负，clicks.max_periods 必须 ≥ 1")
    fit = _build(FitSettings, 'fit', raw.get('fit', {}))
    analysis = _build(AnalysisSettings, 'analysis', raw.get('analysis', {}))
    output = _build(OutputSettings, 'output', raw.get('output', {}))

    return RunConfig(experiment=experiment, seed=seed, threads=threads, device=device, drive=drive,
                     numerics=numerics, sweep=sweep, spectrum=spectrum, detector=detector, clicks=clicks,
                     fit=fit, analysis=analysis, output=output)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """
    读取配置文件并合并命令行覆盖项

    Args:
        path: TOML/JSON 配置文件路径（None 或空文件得到全默认配置）
        overrides: 命令行覆盖项（嵌套字典，如 {'drive': {'tau': 95.0}}）

    Returns:
        RunConfig: 校验后的完整配置

    Raises:
        ConfigError: 文件缺失/解析失败、未知键、类型错误或越界（消息带字段名）
    """
    raw = merge(read_config_file(path), overrides or {})
    config = build_config(raw)
    logger.debug(f"配置加载完成: experiment={config.experiment}, seed={config.seed}")
    return config
