# repositories/base.py
# 数据访问层基础模块：输出目录管理 + JSON/CSV 写入 + 运行清单（manifest）
#
# 核心职责：
#   - 统一计算项目根目录与默认输出目录（output/）
#   - 创建输出目录并确认可写，不可写时抛出 ConfigError
#   - JSON 写入：键排序、缩进 2、numpy 标量/数组自动转换，保证同输入字节一致
#   - CSV 写入：统一走 pandas，浮点全精度（%.17g）
#   - manifest.json：配置哈希、种子、依赖版本、耗时、产物列表、partial 标记
#
# 注意事项：
#   - 所有产物必须通过本模块写出，不要在 routes 里直接 open()
#   - manifest 里只有 created_at / wall_time 两个字段随运行变化

import os
import json
import hashlib
import platform
from datetime import datetime
from importlib import metadata

import numpy as np
import pandas as pd

from utils import logger, ConfigError

# ==================== 路径常量 ====================
BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
DEFAULT_OUTPUT_DIR = os.path.join(BASE_DIR, 'output')
MANIFEST_NAME = 'manifest.json'
TRACKED_PACKAGES = ('numpy', 'scipy', 'pandas', 'openpyxl')


def ensure_output_dir(path: str | None = None) -> str:
    """
    创建（如不存在）并校验输出目录可写

    Returns:
        str: 绝对路径

    Raises:
        ConfigError: 目录无法创建或不可写（消息带 output.dir）
    """
    out_dir = os.path.abspath(path or DEFAULT_OUTPUT_DIR)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output.dir 无法创建: {out_dir} - {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output.dir 不可写: {out_dir}")
    logger.debug(f"输出目录: {out_dir}")
    return out_dir


def _to_builtin(value):
    """json.dump 的 default：numpy 类型转内置类型"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (tuple, set)):
        return list(value)
    raise TypeError(f"无法序列化为 JSON 的类型: {type(value).__name__}")


def dumps(data) -> str:
    return json.dumps(data, default=_to_builtin, sort_keys=True, indent=2, ensure_ascii=False)


def write_json(out_dir: str, filename: str, data) -> str:
    path = os.path.join(out_dir, filename)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(dumps(data))
            f.write('\n')
    except OSError as e:
        logger.error(f"写入 JSON 失败: {path} - {e}", exc_info=True)
        raise
    logger.info(f"已写出 {path}")
    return path


def read_json(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_csv(out_dir: str, filename: str, df: pd.DataFrame, index: bool = False) -> str:
    path = os.path.join(out_dir, filename)
    try:
        df.to_csv(path, index=index, float_format='%.17g', lineterminator='\n')
    except OSError as e:
        logger.error(f"写入 CSV 失败: {path} - {e}", exc_info=True)
        raise
    logger.info(f"已写出 {path}（{len(df)} 行）")
    return path


# ==================== 运行清单 ====================
def config_hash(config: dict) -> str:
    """规范化 JSON（键排序）的 SHA-256"""
    canonical = json.dumps(config, default=_to_builtin, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def package_versions() -> dict:
    versions = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(out_dir: str, *, experiment: str, config: dict, seed: int | None,
                   artifacts: list[str], wall_time: float, partial: bool = False,
                   error: str | None = None, threads: int | None = None) -> str:
    """
    写出 manifest.json，足以复现本次运行

    Args:
        config: 合并后的完整配置（字典形式）
        artifacts: 本次写出的产物文件名（相对 out_dir）
        partial: 运行中途失败时为 True
        error: 失败时的诊断信息
    """
    manifest = {
        'experiment': experiment,
        'config_hash': config_hash(config),
        'config': config,
        'seed': seed,
        'threads': threads,
        'versions': package_versions(),
        'created_at': datetime.now().isoformat(timespec='seconds'),
        'wall_time': round(wall_time, 3),
        'artifacts': sorted(set(artifacts)),
        'partial': partial,
        'error': error,
    }
    return write_json(out_dir, MANIFEST_NAME, manifest)
