# tests/test_tttr.py
# 点击流 Monte Carlo、三重符合图、峰积分、双探测器 ḡ²、端到端重建

import math

import numpy as np
import pytest

from services.statistics import moments_from_distribution, reconstruct_fock
from services.tttr import (
    CLICK_DTYPE, DetectorConfig, _apply_dead_time, channel_times, coincidence_map,
    distribution_from_probabilities, g2_from_clicks, integrate_peaks, poisson_distribution,
    simulate_clicks, single_photon_distribution, sort_clicks,
)
from utils import InsufficientStatisticsError

REP = 12200


def make_clicks(records) -> np.ndarray:
    clicks = np.empty(len(records), dtype=CLICK_DTYPE)
    for i, (channel, timestamp) in enumerate(records):
        clicks[i] = (channel, timestamp)
    return sort_clicks(clicks)


# ==================== 配置与分布 ====================
def test_detector_config_validation():
    config = DetectorConfig()
    assert config.n_channels == 3
    assert config.pulse_offset == REP // 2
    assert DetectorConfig.two_channel().n_channels == 2
    with pytest.raises(ValueError):
        DetectorConfig(arm_probabilities=(0.6, 0.6), efficiencies=(1.0, 1.0))
    with pytest.raises(ValueError):
        DetectorConfig(efficiencies=(1.0, 1.0))
    with pytest.raises(ValueError):
        DetectorConfig(arm_probabilities=(1.0,), efficiencies=(1.0,))
    with pytest.raises(ValueError):
        DetectorConfig(efficiencies=(1.0, 1.2, 1.0))


def test_distributions():
    p = poisson_distribution(0.3)
    assert p.sum() == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.3 * math.exp(-0.3), rel=1e-9)
    assert poisson_distribution(0.0).tolist() == [1.0]
    np.testing.assert_allclose(single_photon_distribution(), [0.0, 1.0])
    np.testing.assert_allclose(distribution_from_probabilities([0.5, 0.5, -1e-12, 0.0]), [0.5, 0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        distribution_from_probabilities([1.1, -0.1])


# ==================== 模拟 ====================
def test_vacuum_gives_empty_stream():
    clicks = simulate_clicks(np.array([1.0]), DetectorConfig(), 10_000, seed=1)
    assert clicks.size == 0
    assert clicks.dtype == CLICK_DTYPE


def test_poisson_click_count():
    n_pulses = 1_000_000
    clicks = simulate_clicks(poisson_distribution(0.1), DetectorConfig(), n_pulses, seed=11)
    expected = 0.1 * n_pulses
    assert abs(clicks.size - expected) < 3 * math.sqrt(expected)
    assert np.all(np.diff(clicks['timestamp'].astype(np.int64)) >= 0)
    assert set(np.unique(clicks['channel'])) == {1, 2, 3}


def test_efficiency_scales_counts():
    config = DetectorConfig(efficiencies=(0.5, 0.5, 0.5))
    clicks = simulate_clicks(poisson_distribution(1.0), config, 200_000, seed=5)
    expected = 0.5 * 200_000
    assert abs(clicks.size - expected) < 4 * math.sqrt(expected)


def test_simulation_is_deterministic_across_threads():
    p = poisson_distribution(0.5)
    a = simulate_clicks(p, DetectorConfig(), 50_000, seed=3, threads=1, block_size=10_000)
    b = simulate_clicks(p, DetectorConfig(), 50_000, seed=3, threads=4, block_size=10_000)
    assert a.tobytes() == b.tobytes()
    c = simulate_clicks(p, DetectorConfig(), 50_000, seed=4, threads=1, block_size=10_000)
    assert a.tobytes() != c.tobytes()


def test_single_photons_never_split():
    clicks = simulate_clicks(single_photon_distribution(), DetectorConfig(), 20_000, seed=2)
    pulses = clicks['timestamp'] // REP
    assert np.unique(pulses).size == clicks.size


def test_dead_time_suppresses_close_clicks():
    config = DetectorConfig(dead_time=3 * REP)
    clicks = simulate_clicks(poisson_distribution(1.0), config, 10_000, seed=8)
    for channel in (1, 2, 3):
        gaps = np.diff(channel_times(clicks, channel))
        assert np.all(gaps >= 3 * REP)


def test_dead_time_measured_from_last_recorded_click():
    clicks = make_clicks([(1, 0), (1, 2), (1, 4), (1, 6), (1, 9), (2, 1), (2, 3)])
    kept = _apply_dead_time(clicks, 3)
    np.testing.assert_array_equal(channel_times(kept, 1), [0, 4, 9])
    np.testing.assert_array_equal(channel_times(kept, 2), [1])
    assert _apply_dead_time(clicks, 0).size == clicks.size


def test_unnormalized_distribution_rejected():
    with pytest.raises(ValueError):
        simulate_clicks(np.array([0.5, 0.4]), DetectorConfig(), 10, seed=0)


# ==================== 三重符合图 ====================
def test_hand_made_triple():
    anchor = 100_000
    clicks = make_clicks([(2, anchor), (1, anchor + REP), (3, anchor - 300)])
    cmap = coincidence_map(clicks, DetectorConfig())
    assert cmap.total == 1
    row, col = np.argwhere(cmap.counts == 1)[0]
    assert cmap.edges[row] <= REP < cmap.edges[row] + cmap.bin_width
    assert cmap.edges[col] <= 300 < cmap.edges[col] + cmap.bin_width


def test_triples_outside_range_are_dropped():
    anchor = 200_000
    clicks = make_clicks([(2, anchor), (1, anchor + 6 * REP), (3, anchor)])
    assert coincidence_map(clicks, DetectorConfig(), max_delay=5 * REP).total == 0


def test_empty_stream_map():
    cmap = coincidence_map(np.empty(0, dtype=CLICK_DTYPE), DetectorConfig())
    assert cmap.total == 0
    assert cmap.counts.shape == (cmap.n_bins, cmap.n_bins)
    with pytest.raises(InsufficientStatisticsError):
        integrate_peaks(cmap, DetectorConfig())


def test_map_must_cover_three_periods():
    cmap = coincidence_map(np.empty(0, dtype=CLICK_DTYPE), DetectorConfig(), max_delay=2 * REP)
    with pytest.raises(ValueError):
        integrate_peaks(cmap, DetectorConfig())


def test_poisson_map_is_uniform():
    config = DetectorConfig()
    clicks = simulate_clicks(poisson_distribution(1.0), config, 200_000, seed=21)
    table = integrate_peaks(coincidence_map(clicks, config), config)
    assert float(np.mean(table.normalized)) == pytest.approx(1.0, abs=0.02)
    assert table.g3_zero == pytest.approx(1.0, abs=0.06)
    assert float(np.mean(table.side_line())) == pytest.approx(1.0, abs=0.03)
    assert table.correlated.sum() == 25


def test_single_photon_map_lines_vanish():
    config = DetectorConfig()
    clicks = simulate_clicks(single_photon_distribution(), config, 100_000, seed=4)
    table = integrate_peaks(coincidence_map(clicks, config), config)
    assert table.g3_zero == 0.0
    assert np.all(table.normalized[table.correlated] == 0.0)
    assert float(np.mean(table.uncorrelated())) == pytest.approx(1.0)
    assert table.g3_zero_stderr > 0


# ==================== 双探测器 ḡ² ====================
def test_g2_from_clicks_poisson_and_single():
    config = DetectorConfig.two_channel()
    poisson_clicks = simulate_clicks(poisson_distribution(1.0), config, 200_000, seed=6)
    estimate = g2_from_clicks(poisson_clicks, config)
    assert estimate.g2 == pytest.approx(1.0, abs=0.02)

    single_clicks = simulate_clicks(single_photon_distribution(), config, 200_000, seed=6)
    estimate = g2_from_clicks(single_clicks, config)
    assert estimate.central_counts == 0
    assert estimate.g2 == 0.0
    assert estimate.g2 + 3 * estimate.stderr < 0.01


def test_g2_from_clicks_empty():
    with pytest.raises(InsufficientStatisticsError):
        g2_from_clicks(np.empty(0, dtype=CLICK_DTYPE), DetectorConfig.two_channel())


def test_normalized_g2_is_loss_invariant():
    p = np.array([0.7, 0.25, 0.045, 0.005])
    lossless = DetectorConfig()
    lossy = DetectorConfig(efficiencies=(0.6, 0.6, 0.6))
    g2_a = g2_from_clicks(simulate_clicks(p, lossless, 1_000_000, seed=9), lossless).g2
    g2_b = g2_from_clicks(simulate_clicks(p, lossy, 1_000_000, seed=10), lossy).g2
    assert g2_a == pytest.approx(g2_b, abs=0.05)


# ==================== 端到端重建 ====================
@pytest.mark.parametrize('distribution', [
    poisson_distribution(0.3, k_max=3),
    single_photon_distribution(),
    np.array([0.7, 0.25, 0.045, 0.005]),
], ids=['poisson', 'single', 'mixture'])
def test_round_trip_reconstruction(distribution):
    config = DetectorConfig()
    n_pulses = 1_000_000
    clicks = simulate_clicks(distribution, config, n_pulses, seed=17)
    table = integrate_peaks(coincidence_map(clicks, config), config)
    g2 = g2_from_clicks(clicks, config).g2
    n_est = clicks.size / n_pulses

    stats = reconstruct_fock(n_est, g2, table.g3_zero)
    expected = np.zeros(4)
    expected[:distribution.size] = distribution
    np.testing.assert_allclose(stats.p, expected, atol=5e-3)

    if distribution[2:].sum() > 0:
        _, g2_true, g3_true = moments_from_distribution(distribution)
        assert g2 == pytest.approx(g2_true, abs=0.05)
        assert table.g3_zero == pytest.approx(g3_true, abs=5 * table.g3_zero_stderr)
