# repositories/result_repo.py
# 结果表数据访问层：把 services 的结果对象整理成 DataFrame 并写出 CSV / Excel
#
# 产物：
#   spectrum.csv：CW 反射谱（power, detuning, R）
#   sweep.csv / .xlsx：脉冲扫描（n_in, R, g2, mu_qd, mu_alpha, ...）
#   g3_map.csv：三重符合图矩阵，行/列表头为 τ₁₂ / τ₂₃ 箱中心（ps）
#   g3_peaks.csv：各格点峰积分与归一值
#   fit_spectrum.csv：拟合前后的谱对比
# 所有写出都经 base.write_csv，保证浮点全精度和确定性

import os
from typing import Sequence

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Font, Alignment
from openpyxl.utils.dataframe import dataframe_to_rows

from repositories.base import write_csv
from services.experiments import SpectrumResult, SweepResult
from services.tttr import CoincidenceMap, PeakTable
from utils import logger, ConfigError

SWEEP_COLUMNS = ['n_in', 'R', 'g2', 'mu_qd', 'mu_alpha', 'n_out', 'g3', 'n_fock_h', 'n_fock_v', 'error']

# Excel 第二行注释，与 SWEEP_COLUMNS 一一对应
SWEEP_COMMENTS = [
    '每脉冲入射光子数', '反射率 n_out/(η n_in)', '积分 ḡ²(0)', '单光子分量平均光子数',
    '相干分量平均光子数', '每脉冲输出光子数', '积分 ḡ³(0)（未计算时为空）',
    'H 模 Fock 截断', 'V 模 Fock 截断', '失败原因（成功时为空）',
]


# ==================== CW 反射谱 ====================
def spectrum_frame(results: Sequence[SpectrumResult]) -> pd.DataFrame:
    frames = [pd.DataFrame({
        'power': result.power,
        'detuning': np.asarray(result.detunings, dtype=float),
        'R': np.asarray(result.reflectivity, dtype=float),
        'photon_flux': result.photon_flux,
    }) for result in results]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=['power', 'detuning', 'R', 'photon_flux'])


def write_spectrum(out_dir: str, results: Sequence[SpectrumResult]) -> str:
    return write_csv(out_dir, 'spectrum.csv', spectrum_frame(results))


def read_spectrum(path: str, power: float | None = None) -> list[tuple[float, float]]:
    """
    读取实测/模拟反射谱，返回 (detuning, R) 列表

    需要 detuning 与 R 两列；含 power 列且给出 power 时只取该功率的行。

    Raises:
        ConfigError: 文件不存在或缺列（消息带 fit.spectrum_path）
    """
    if not path or not os.path.isfile(path):
        raise ConfigError(f"fit.spectrum_path 不存在: {path}")
    df = pd.read_csv(path)
    missing = [c for c in ('detuning', 'R') if c not in df.columns]
    if missing:
        raise ConfigError(f"fit.spectrum_path 缺少列 {missing}: {path}")
    if power is not None and 'power' in df.columns:
        selected = df[np.isclose(df['power'], power, rtol=1e-6, atol=0.0)]
        if selected.empty:
            raise ConfigError(f"fit.spectrum_path 中没有功率 {power:.3e} W 的数据")
        df = selected
    df = df.dropna(subset=['detuning', 'R'])
    logger.info(f"读取反射谱 {path}: {len(df)} 个点")
    return list(zip(df['detuning'].astype(float), df['R'].astype(float)))


def fit_spectrum_frame(measured: Sequence[tuple[float, float]], fitted: Sequence[float],
                       initial: Sequence[float]) -> pd.DataFrame:
    data = np.asarray(measured, dtype=float)
    return pd.DataFrame({
        'detuning': data[:, 0],
        'R_measured': data[:, 1],
        'R_initial': np.asarray(initial, dtype=float),
        'R_fit': np.asarray(fitted, dtype=float),
    })


def write_fit_spectrum(out_dir: str, measured, fitted, initial) -> str:
    return write_csv(out_dir, 'fit_spectrum.csv', fit_spectrum_frame(measured, fitted, initial))


# ==================== 脉冲扫描 ====================
def sweep_frame(results: Sequence[SweepResult]) -> pd.DataFrame:
    """多个 τ 的扫描合并成一张表；不止一个 τ 时在最前面加 tau 列"""
    rows = []
    for result in results:
        for point in result.points:
            rows.append({
                'tau': result.tau,
                'n_in': point.n_in,
                'R': point.reflectivity,
                'g2': point.g2,
                'mu_qd': point.mu_qd,
                'mu_alpha': point.mu_alpha,
                'n_out': point.n_out,
                'g3': point.g3,
                'n_fock_h': point.n_fock_h,
                'n_fock_v': point.n_fock_v,
                'error': point.error or '',
            })
    columns = (['tau'] if len(results) > 1 else []) + SWEEP_COLUMNS
    df = pd.DataFrame(rows, columns=['tau'] + SWEEP_COLUMNS)
    return df[columns]


def write_sweep(out_dir: str, results: Sequence[SweepResult], xlsx: bool = False) -> list[str]:
    """写出 sweep.csv（可选 sweep.xlsx），返回产物文件名列表"""
    df = sweep_frame(results)
    write_csv(out_dir, 'sweep.csv', df)
    artifacts = ['sweep.csv']
    if xlsx:
        write_sweep_xlsx(out_dir, 'sweep.xlsx', df)
        artifacts.append('sweep.xlsx')
    return artifacts


def write_sweep_xlsx(out_dir: str, filename: str, df: pd.DataFrame) -> str:
    """Excel 版扫描表：第一行表头（加粗居中），第二行注释，数据从第三行开始"""
    path = os.path.join(out_dir, filename)
    headers = list(df.columns)
    comments = (['脉冲 FWHM (ps)'] if headers[0] == 'tau' else []) + SWEEP_COMMENTS

    wb = Workbook()
    ws = wb.active
    ws.title = '脉冲扫描'

    ws.append(headers)
    ws.append(comments)
    for r in dataframe_to_rows(df.replace({np.nan: None}), index=False, header=False):
        ws.append(r)

    bold_font = Font(bold=True)
    center_align = Alignment(horizontal="center", vertical="center", wrap_text=True)
    left_align = Alignment(horizontal="left", vertical="center", wrap_text=True)
    for cell in ws[1]:
        cell.font = bold_font
        cell.alignment = center_align
    for cell in ws[2]:
        cell.alignment = left_align

    # 自动调整列宽
    for col in ws.columns:
        max_length = max(len(str(cell.value)) if cell.value is not None else 0 for cell in col)
        ws.column_dimensions[col[0].column_letter].width = min(max_length + 4, 60)

    wb.save(path)
    logger.info(f"已写出 {path}（共 {len(df)} 行）")
    return path


# ==================== 三重符合 ====================
def map_frame(cmap: CoincidenceMap) -> pd.DataFrame:
    """行 = τ₁₂ 箱中心，列 = τ₂₃ 箱中心，单位 ps"""
    centers = cmap.centers
    df = pd.DataFrame(cmap.counts, index=pd.Index(centers, name='tau12_ps'),
                      columns=[f"{c:g}" for c in centers])
    return df


def write_g3_map(out_dir: str, cmap: CoincidenceMap) -> str:
    return write_csv(out_dir, 'g3_map.csv', map_frame(cmap), index=True)


def peaks_frame(table: PeakTable) -> pd.DataFrame:
    return pd.DataFrame({
        'm12': table.m12,
        'm23': table.m23,
        'tau12_ps': table.tau12,
        'tau23_ps': table.tau23,
        'counts': table.counts,
        'g3': table.normalized,
        'correlated': table.correlated.astype(int),
    })


def write_g3_peaks(out_dir: str, table: PeakTable) -> str:
    return write_csv(out_dir, 'g3_peaks.csv', peaks_frame(table))
