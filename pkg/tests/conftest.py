import math

import numpy as np
import pytest

from fedtwin.model import ChannelState, FrameDecision, HistoryState, ScenarioConfig


def micro_config(**kw):
    """Two DTs, two ESs, two sensors, two subcarriers; small enough to check by hand."""
    base = dict(
        num_partial_dts=2,
        num_ess=2,
        num_sensors=2,
        num_subcarriers=2,
        subcarrier_bandwidth_hz=1e6,
        max_assoc_per_sensor=2,
        log_norm_beta=200e3,
        required_quality=[0.9, 0.8],
        model_size_bits=[1e6, 2e6],
        sensor_tx_power_w=[0.1, 0.2],
        es_tx_power_w=[1.0, 2.0],
        noise_power_w=[1e-7, 2e-7],
        fiber_rate_es_cloud_bps=[2e6, 1e6],
        fiber_rate_cloud_es_bps=[1e6, 2e6],
        fiber_rate_es_es_bps=[[1e9, 3e6], [3e6, 1e9]],
        min_rate_bps=0.0,
        cpu_cycles_per_bit_es=[15.0, 10.0],
        cpu_speed_es_hz=[64e6, 32e6],
        switched_capacitance=[1e-20, 2e-20],
        cpu_cycles_per_bit_cloud=15.0,
        cpu_speed_cloud_hz=3e9,
        cloud_access_rate=1e-3,
        cloud_instr_per_dt=[100.0, 50.0],
        cloud_power_max_w=10.0,
        cloud_power_idle_w=5.0,
        cloud_power_leak_w=2.0,
        gain_weight_xi=10.0,
        cost_weight_kappa=0.1,
        config_cost=1.0,
        frame_deadline_s=7.6,
    )
    base.update(kw)
    return ScenarioConfig(**base)


def micro_channel(t=2):
    gain = np.zeros((2, 2, 2))
    gain[0, 0] = [0.6, 0.2]  # sensor 0 heard at ES 0
    gain[0, 1] = [0.4, 0.2]  # sensor 0 heard at ES 1
    gain[1, 0] = [0.2, 0.4]
    gain[1, 1] = [0.6, 0.4]
    return ChannelState(gain, t, np.full((2, 2), 0.4))


def micro_decision():
    # DT0 on ES0 with sensor 0 on w0; DT1 on ES1 with sensors 0 (w1) and 1 (w0)
    x = np.array([[1, 0], [0, 1]])
    y = np.array([[1, 0], [1, 1]])
    z = np.zeros((2, 2, 2), dtype=np.int64)
    z[0, 0, 0] = 1
    z[1, 0, 1] = 1
    z[1, 1, 0] = 1
    return FrameDecision(x, y, z, np.array([3.0, 5.0]))


def micro_history():
    # frame 2; DT0 previously on ES1 (so it migrates), DT1 previously on ES0
    return HistoryState(
        cumulative_data=np.array([1e5, 2e5]),
        prev_assignment=np.array([[0, 1], [1, 0]]),
        prev_association=np.array([[1, 1], [0, 0]]),
        frame_index=2,
    )


MICRO_DATA = np.array([[300e3, 400e3], [250e3, 500e3]])  # d_{n,c}
MICRO_IMPORTANCE = np.array([0.7, 0.4])


@pytest.fixture
def micro():
    return micro_config(), micro_channel(), micro_decision(), micro_history()


def scalar_rate(cfg, gain, y, z, b, n):
    """Uplink rate from the SINR definition, one term at a time."""
    B, N, W = y.shape[0], y.shape[1], z.shape[2]
    p = cfg.sensor_tx_power_w
    total = 0.0
    for w in range(W):
        if not (y[b, n] and z[b, n, w]):
            continue
        interference = 0.0
        for bb in range(B):
            for nn in range(N):
                if (bb, nn) != (b, n) and y[bb, nn] and z[bb, nn, w]:
                    interference += p[nn] * gain[nn, b, w]
        sinr = p[n] * gain[n, b, w] / (interference + cfg.noise_power_w[b])
        total += cfg.subcarrier_bandwidth_hz * math.log2(1.0 + sinr)
    return total


# (criterion number, line) pairs filled in by the acceptance tests
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
