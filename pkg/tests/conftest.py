# tests/conftest.py
# 公共 fixture：器件参数、小截断空间、临时输出目录

import math

import pytest

from services.quantum_core import DeviceParams, HilbertSpace, build_operators


@pytest.fixture
def device_params() -> DeviceParams:
    """主器件参数（g=19, κ=90, θ=15°）"""
    return DeviceParams()


@pytest.fixture
def empty_cavity_params() -> DeviceParams:
    """g = 0：QD 与腔完全解耦"""
    return DeviceParams(g=0.0, gamma_star=0.0, delta_fss=0.0, theta=0.0)


@pytest.fixture
def small_space() -> HilbertSpace:
    return HilbertSpace(3, 2)


@pytest.fixture
def small_ops(small_space):
    return build_operators(small_space, math.radians(15.0))


@pytest.fixture
def out_dir(tmp_path) -> str:
    path = tmp_path / 'output'
    path.mkdir()
    return str(path)
