# repositories/click_repo.py
# 点击流文件读写
#
# 二进制格式（小端）：
#   16 字节文件头 = 8 字节魔数 b"QFCLICK\0" + u32 版本号(1) + u32 保留(0)
#   之后为紧凑记录 (u8 channel, u64 timestamp_ps)，每条 9 字节，按时间戳排序
# CSV 格式：表头 channel,timestamp_ps，每行一次点击

import os
import struct

import numpy as np
import pandas as pd

from services.tttr import CLICK_DTYPE, sort_clicks
from utils import logger, ConfigError, QFilterError

CLICK_MAGIC = b"QFCLICK\0"
CLICK_VERSION = 1
HEADER = struct.Struct('<8sII')
CSV_COLUMNS = ['channel', 'timestamp_ps']
VALID_CHANNELS = (1, 2, 3)


class ClickFileError(QFilterError):
    """点击文件损坏或格式不符"""


def _checked(clicks: np.ndarray, path: str) -> np.ndarray:
    """通道号校验 + 按时间戳排序"""
    unknown = np.setdiff1d(np.unique(clicks['channel']), VALID_CHANNELS)
    if unknown.size:
        raise ConfigError(f"点击文件含未知通道 {unknown.tolist()}（只允许 {list(VALID_CHANNELS)}）: {path}")
    return sort_clicks(clicks)


def write_clicks(out_dir: str, filename: str, clicks: np.ndarray) -> str:
    """写出二进制点击文件，返回完整路径"""
    path = os.path.join(out_dir, filename)
    records = np.ascontiguousarray(clicks, dtype=CLICK_DTYPE)
    with open(path, 'wb') as f:
        f.write(HEADER.pack(CLICK_MAGIC, CLICK_VERSION, 0))
        f.write(records.tobytes())
    logger.info(f"已写出 {path}（{records.size} 次点击）")
    return path


def read_clicks(path: str) -> np.ndarray:
    """
    读取点击文件（按后缀区分 .csv 与二进制）

    Returns:
        np.ndarray: CLICK_DTYPE 结构数组，按时间戳排序

    Raises:
        ClickFileError: 魔数/版本不符或记录被截断
        ConfigError: 通道号不在 {1, 2, 3} 内
    """
    if path.lower().endswith('.csv'):
        return read_clicks_csv(path)
    with open(path, 'rb') as f:
        header = f.read(HEADER.size)
        if len(header) < HEADER.size:
            raise ClickFileError(f"点击文件过短，缺少文件头: {path}")
        magic, version, _ = HEADER.unpack(header)
        if magic != CLICK_MAGIC:
            raise ClickFileError(f"不是点击文件（魔数 {magic!r}）: {path}")
        if version != CLICK_VERSION:
            raise ClickFileError(f"不支持的点击文件版本 {version}: {path}")
        payload = f.read()
    if len(payload) % CLICK_DTYPE.itemsize:
        raise ClickFileError(f"点击文件记录被截断（{len(payload)} 字节）: {path}")
    clicks = _checked(np.frombuffer(payload, dtype=CLICK_DTYPE).copy(), path)
    logger.debug(f"读取 {path}: {clicks.size} 次点击")
    return clicks


def write_clicks_csv(out_dir: str, filename: str, clicks: np.ndarray) -> str:
    path = os.path.join(out_dir, filename)
    df = pd.DataFrame({'channel': clicks['channel'].astype(int),
                       'timestamp_ps': clicks['timestamp'].astype(np.uint64)})
    df.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"已写出 {path}（{len(df)} 行）")
    return path


def read_clicks_csv(path: str) -> np.ndarray:
    df = pd.read_csv(path, dtype={'channel': 'int64', 'timestamp_ps': 'uint64'})
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ClickFileError(f"点击 CSV 缺少列 {missing}: {path}")
    clicks = np.empty(len(df), dtype=CLICK_DTYPE)
    clicks['channel'] = df['channel'].to_numpy()
    clicks['timestamp'] = df['timestamp_ps'].to_numpy()
    return _checked(clicks, path)
