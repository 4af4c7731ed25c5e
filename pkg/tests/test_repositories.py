# tests/test_repositories.py
# 配置加载与校验、点击文件、结果表、manifest

import json
import math
import os

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from repositories.base import config_hash, ensure_output_dir, read_json, write_json, write_manifest
from repositories.click_repo import (
    CLICK_MAGIC, HEADER, ClickFileError, read_clicks, write_clicks, write_clicks_csv,
)
from repositories.config_repo import DEFAULT_N_IN, build_config, load_config, merge
from repositories.result_repo import (
    map_frame, read_spectrum, sweep_frame, write_g3_map, write_spectrum, write_sweep,
)
from services.experiments import SpectrumResult, SweepPoint, summarize_sweep
from services.tttr import CLICK_DTYPE, DetectorConfig, coincidence_map, poisson_distribution, simulate_clicks
from utils import ConfigError


def write_text(tmp_path, name: str, text: str) -> str:
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


# ==================== 配置 ====================
def test_empty_config_gives_device_defaults(tmp_path):
    config = load_config(write_text(tmp_path, 'empty.toml', ''))
    assert config.experiment == 'pulsed-sweep'
    assert config.device.g == 19.0
    assert config.device.theta == pytest.approx(math.radians(15.0))
    assert config.drive.tau == 125.0
    assert config.sweep.n_in == DEFAULT_N_IN
    assert config.detector.rep_period == 12200
    assert load_config(write_text(tmp_path, 'empty.json', '')) == config


def test_toml_sections(tmp_path):
    path = write_text(tmp_path, 'run.toml', """
experiment = "g3-map"
seed = 7

[device]
theta_deg = 20.0
eta_top = 0.6

[drive]
tau = 95

[detector]
dead_time = 20000.0
efficiencies = [0.5, 0.5, 0.5]

[clicks]
source = "single"
n_pulses = 1e5

[numerics]
g2_window = 300
""")
    config = load_config(path)
    assert config.experiment == 'g3-map'
    assert config.seed == 7
    assert config.device.theta == pytest.approx(math.radians(20.0))
    assert config.device.eta_top == 0.6
    assert config.drive.tau == 95.0
    assert config.detector.dead_time == 20000
    assert isinstance(config.detector.dead_time, int)
    assert config.detector.efficiencies == (0.5, 0.5, 0.5)
    assert config.clicks.n_pulses == 100000
    assert config.numerics.g2_window == 300.0


def test_overrides_take_precedence(tmp_path):
    path = write_text(tmp_path, 'run.toml', '[drive]\ntau = 125.0\nn_in = 0.3\n')
    config = load_config(path, {'drive': {'tau': 95.0}, 'seed': 3})
    assert config.drive.tau == 95.0
    assert config.drive.n_in == 0.3
    assert config.seed == 3


def test_merge_is_nested():
    merged = merge({'a': {'x': 1, 'y': 2}, 'b': 1}, {'a': {'y': 3}})
    assert merged == {'a': {'x': 1, 'y': 3}, 'b': 1}


def test_power_converts_to_n_in():
    config = build_config({'drive': {'power': 17.6e-12}})
    assert config.drive.n_in == pytest.approx(1.0, abs=0.01)


def test_second_device_preset():
    config = build_config({'device': {'preset': 'second', 'theta_deg': 25.0}})
    assert config.device.kappa == 100.0
    assert config.device.theta == pytest.approx(math.radians(25.0))


@pytest.mark.parametrize('raw, key', [
    ({'device': {'eta_top': 1.3}}, 'eta_top'),
    ({'device': {'eta_tp': 0.5}}, 'device.eta_tp'),
    ({'numerics': {'g2_method': 'fast'}}, 'g2_method'),
    ({'numerics': {'n_fock_h': 2.5}}, 'numerics.n_fock_h'),
    ({'sweep': {'n_in': [1.0, 0.5]}}, 'sweep.n_in'),
    ({'spectrum': {'detuning_range': [0.0, 10.0, 0.0]}}, 'spectrum.detuning_range'),
    ({'clicks': {'source': 'file'}}, 'clicks.input'),
    ({'clicks': {'source': 'laser'}}, 'clicks.source'),
    ({'drive': {'tau': 'long'}}, 'drive.tau'),
    ({'experiment': 'teleport'}, 'experiment'),
    ({'seed': -1}, 'seed'),
    ({'threads': 0}, 'threads'),
    ({'output': 'out'}, 'output'),
    ({'verbose': True}, 'verbose'),
    ({'device': {'theta': 0.1, 'theta_deg': 5.0}}, 'theta'),
])
def test_invalid_config_names_the_key(raw, key):
    with pytest.raises(ConfigError, match=key):
        build_config(raw)


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.toml'))
    with pytest.raises(ConfigError):
        load_config(write_text(tmp_path, 'broken.toml', '[device\ng = 1'))
    with pytest.raises(ConfigError):
        load_config(write_text(tmp_path, 'broken.json', '{"device": '))


def test_spectrum_detunings():
    config = build_config({'spectrum': {'detuning_range': [-10, 10, 5]}})
    assert config.spectrum.detunings() == [-10.0, -5.0, 0.0, 5.0, 10.0]


def test_to_dict_is_json_serializable():
    config = build_config({})
    data = config.to_dict()
    assert data['drive']['tau'] == 125.0
    assert json.loads(json.dumps(data))['device']['g'] == 19.0
    assert config_hash(data) == config_hash(build_config({}).to_dict())
    assert config_hash(data) != config_hash(build_config({'seed': 1}).to_dict())


# ==================== 点击文件 ====================
@pytest.fixture
def clicks():
    return simulate_clicks(poisson_distribution(0.5), DetectorConfig(), 5_000, seed=1)


def test_binary_click_file(out_dir, clicks):
    path = write_clicks(out_dir, 'clicks.bin', clicks)
    with open(path, 'rb') as f:
        magic, version, reserved = HEADER.unpack(f.read(HEADER.size))
    assert magic == CLICK_MAGIC
    assert version == 1 and reserved == 0
    assert os.path.getsize(path) == HEADER.size + clicks.size * 9
    restored = read_clicks(path)
    assert restored.dtype == CLICK_DTYPE
    assert restored.tobytes() == clicks.tobytes()


def test_csv_click_file(out_dir, clicks):
    path = write_clicks_csv(out_dir, 'clicks.csv', clicks)
    assert open(path, encoding='utf-8').readline().strip() == 'channel,timestamp_ps'
    restored = read_clicks(path)
    np.testing.assert_array_equal(restored['timestamp'], clicks['timestamp'])
    np.testing.assert_array_equal(restored['channel'], clicks['channel'])


def test_corrupt_click_files(out_dir, clicks):
    path = write_clicks(out_dir, 'clicks.bin', clicks)
    with open(path, 'ab') as f:
        f.write(b'\x01\x02')
    with pytest.raises(ClickFileError, match='截断'):
        read_clicks(path)

    bad = os.path.join(out_dir, 'bad.bin')
    with open(bad, 'wb') as f:
        f.write(HEADER.pack(b'NOTCLICK', 1, 0))
    with pytest.raises(ClickFileError):
        read_clicks(bad)

    short = os.path.join(out_dir, 'short.bin')
    with open(short, 'wb') as f:
        f.write(b'QF')
    with pytest.raises(ClickFileError):
        read_clicks(short)


def test_binary_clicks_are_sorted_and_checked(out_dir):
    unsorted = np.array([(2, 500), (1, 100), (3, 300)], dtype=CLICK_DTYPE)
    restored = read_clicks(write_clicks(out_dir, 'unsorted.bin', unsorted))
    assert restored['timestamp'].tolist() == [100, 300, 500]
    assert restored['channel'].tolist() == [1, 3, 2]

    foreign = np.array([(1, 100), (7, 200)], dtype=CLICK_DTYPE)
    with pytest.raises(ConfigError, match='未知通道'):
        read_clicks(write_clicks(out_dir, 'foreign.bin', foreign))
    with pytest.raises(ConfigError):
        read_clicks(write_clicks_csv(out_dir, 'foreign.csv', foreign))


def test_empty_click_file(out_dir):
    path = write_clicks(out_dir, 'empty.bin', np.empty(0, dtype=CLICK_DTYPE))
    assert read_clicks(path).size == 0


# ==================== 结果表 ====================
def make_sweep(tau: float, failed: bool = False):
    points = [
        SweepPoint(0.1, 0.7, 0.3, 0.02, 0.005, 0.0665, 3, 1),
        SweepPoint(1.0, 0.3, 0.8, 0.1, 0.2, 0.285, 5, 2, g3=0.5),
    ]
    if failed:
        points.append(SweepPoint.failed(2.0, 'Fock 截断超过上限'))
    return summarize_sweep(tau, points)


def test_sweep_frame_columns():
    single = sweep_frame([make_sweep(125.0)])
    assert list(single.columns) == ['n_in', 'R', 'g2', 'mu_qd', 'mu_alpha', 'n_out', 'g3',
                                    'n_fock_h', 'n_fock_v', 'error']
    study = sweep_frame([make_sweep(55.0), make_sweep(95.0)])
    assert list(study.columns)[0] == 'tau'
    assert study['tau'].tolist() == [55.0, 55.0, 95.0, 95.0]


def test_write_sweep_csv_and_xlsx(out_dir):
    artifacts = write_sweep(out_dir, [make_sweep(125.0, failed=True)], xlsx=True)
    assert artifacts == ['sweep.csv', 'sweep.xlsx']
    df = pd.read_csv(os.path.join(out_dir, 'sweep.csv'))
    assert len(df) == 3
    assert df['error'].fillna('').tolist()[2] == 'Fock 截断超过上限'
    assert np.isnan(df['R'].iloc[2])

    ws = load_workbook(os.path.join(out_dir, 'sweep.xlsx')).active
    assert ws.title == '脉冲扫描'
    assert ws.cell(row=1, column=1).value == 'n_in'
    assert ws.cell(row=1, column=1).font.bold
    assert ws.cell(row=2, column=1).value == '每脉冲入射光子数'
    assert ws.cell(row=3, column=1).value == pytest.approx(0.1)
    assert ws.max_row == 5


def test_spectrum_round_trip(out_dir):
    results = [
        SpectrumResult(14e-12, np.array([-10.0, 0.0, 10.0]), np.array([0.5, 0.9, 0.5]), 6.5e-5, 2, 1),
        SpectrumResult(2e-9, np.array([-10.0, 0.0, 10.0]), np.array([0.2, 0.3, 0.2]), 9.3e-3, 4, 1),
    ]
    path = write_spectrum(out_dir, results)
    assert read_spectrum(path, power=2e-9) == [(-10.0, 0.2), (0.0, 0.3), (10.0, 0.2)]
    assert len(read_spectrum(path)) == 6
    with pytest.raises(ConfigError, match='fit.spectrum_path'):
        read_spectrum(path, power=1e-6)
    with pytest.raises(ConfigError, match='fit.spectrum_path'):
        read_spectrum(os.path.join(out_dir, 'missing.csv'))


def test_spectrum_requires_columns(tmp_path):
    path = write_text(tmp_path, 'bad.csv', 'x,y\n1,2\n')
    with pytest.raises(ConfigError, match='R'):
        read_spectrum(path)


def test_map_frame_axes(out_dir):
    cmap = coincidence_map(np.empty(0, dtype=CLICK_DTYPE), DetectorConfig(), max_delay=1024)
    df = map_frame(cmap)
    assert df.index.name == 'tau12_ps'
    assert df.shape == (8, 8)
    assert df.columns[0] == '-896'
    assert df.index[-1] == pytest.approx(896.0)
    path = write_g3_map(out_dir, cmap)
    assert open(path, encoding='utf-8').readline().startswith('tau12_ps,-896')


# ==================== 输出目录与清单 ====================
def test_json_is_deterministic(out_dir):
    data = {'b': np.float64(0.5), 'a': np.arange(3), 'c': (1, 2)}
    first = open(write_json(out_dir, 'a.json', data), encoding='utf-8').read()
    second = open(write_json(out_dir, 'b.json', dict(reversed(data.items()))), encoding='utf-8').read()
    assert first == second
    assert read_json(os.path.join(out_dir, 'a.json')) == {'a': [0, 1, 2], 'b': 0.5, 'c': [1, 2]}


def test_manifest_fields(out_dir):
    config = build_config({}).to_dict()
    write_manifest(out_dir, experiment='clicks', config=config, seed=5, artifacts=['b.csv', 'a.json', 'b.csv'],
                   wall_time=1.23456, partial=True, error='boom', threads=2)
    manifest = read_json(os.path.join(out_dir, 'manifest.json'))
    assert manifest['config_hash'] == config_hash(config)
    assert manifest['artifacts'] == ['a.json', 'b.csv']
    assert manifest['partial'] is True
    assert manifest['error'] == 'boom'
    assert manifest['wall_time'] == 1.235
    assert set(manifest['versions']) >= {'python', 'numpy', 'scipy', 'pandas', 'openpyxl'}


def test_output_dir_must_be_writable(tmp_path):
    blocker = tmp_path / 'file'
    blocker.write_text('x')
    with pytest.raises(ConfigError, match='output.dir'):
        ensure_output_dir(str(blocker / 'sub'))
    assert os.path.isdir(ensure_output_dir(str(tmp_path / 'new' / 'dir')))
