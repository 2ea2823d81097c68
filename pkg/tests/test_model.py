import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MICRO_DATA, MICRO_IMPORTANCE, micro_channel, micro_config, micro_decision, micro_history, scalar_rate
from fedtwin.model import (
    ChannelState,
    ConfigError,
    DegenerateParameters,
    FrameDecision,
    HistoryState,
    InfeasibleDecision,
    NotAMember,
    ScenarioConfig,
    best_case_rates,
    check_decision,
    evaluate_frame,
    max_training_rounds,
    partial_dt_quality,
    rounds_to_cap,
    sensor_contribution,
    transmission_rates,
)

K_TABLE = (2 - 8 * 0.02) * 0.02 * 2 / 2  # round exponent for L=8, delta=0.02, gamma=2


def test_round_exponent_matches_table_parameters():
    cfg = ScenarioConfig()
    assert cfg.round_exponent == pytest.approx(K_TABLE, rel=1e-15)


def test_rounds_to_cap_frozen_oracles():
    # T* = ceil(-log2(1 - A/G) / k): A/G = 0.5 gives ceil(27.17) = 28, A/G = 0.9 gives ceil(90.27) = 91
    assert math.ceil(-math.log2(0.5) / K_TABLE) == 28
    assert rounds_to_cap(0.5, 1.0, K_TABLE, 200) == 28
    assert rounds_to_cap(0.9, 1.0, K_TABLE, 200) == 91


def test_rounds_to_cap_unreachable_is_clamped():
    assert rounds_to_cap(0.9, 0.9, K_TABLE, 200) == 200
    assert rounds_to_cap(0.9, 0.1, K_TABLE, 17) == 17


def test_rounds_to_cap_degenerate_exponent():
    with pytest.raises(DegenerateParameters):
        rounds_to_cap(0.5, 1.0, 0.0, 200)


@settings(max_examples=300, deadline=None)
@given(
    req=st.floats(0.05, 1.0),
    bits=st.floats(1e3, 1e9),
    t=st.integers(1, 100),
)
def test_quality_cap_boundary(req, bits, t):
    cfg = ScenarioConfig(num_partial_dts=1, num_ess=1, num_sensors=1, required_quality=req)
    g = float(np.log2(bits / (t * cfg.log_norm_beta) + 1.0) ** 2)
    T = max_training_rounds(cfg, bits, t, 0)
    if g <= req:
        assert T == cfg.t_max_clamp
        return
    assert partial_dt_quality(cfg, 0, bits, t, T) == pytest.approx(min(req, g), abs=1e-12)
    assert partial_dt_quality(cfg, 0, bits, t, T) >= req
    if T > 0:
        assert partial_dt_quality(cfg, 0, bits, t, T - 1) < req


def test_max_rounds_unassigned_es_is_zero():
    assert max_training_rounds(ScenarioConfig(), 1e6, 3, None) == 0


def test_config_broadcasts_and_freezes_arrays():
    cfg = ScenarioConfig(sensor_tx_power_w=0.5)
    assert cfg.sensor_tx_power_w.shape == (cfg.num_sensors,)
    with pytest.raises(ValueError):
        cfg.sensor_tx_power_w[0] = 1.0


@pytest.mark.parametrize(
    "kw",
    [
        {"num_ess": 3, "num_partial_dts": 4},
        {"learning_rate_delta": 0.3},
        {"required_quality": 1.5},
        {"noise_power_w": 0.0},
        {"num_sensors": 0},
        {"discount_eta": 1.5},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)


def test_rates_match_scalar_sinr_oracle(micro):
    cfg, ch, d, _ = micro
    rates = transmission_rates(cfg, ch, d)
    for b in range(2):
        for n in range(2):
            assert rates[b, n] == pytest.approx(scalar_rate(cfg, ch.gain, d.association, d.subcarriers, b, n), rel=1e-12)


def test_rate_frozen_value_excludes_own_signal(micro):
    cfg, ch, d, _ = micro
    # ES1 hears sensor 1 on w0 (0.2 W * 0.6) against sensor 0's w0 link to ES0 (0.1 W * 0.4) plus noise 2e-7
    expected = 1e6 * math.log2(1 + 0.12 / (0.04 + 2e-7))
    assert expected == pytest.approx(1999994.5899105032, rel=1e-12)
    assert transmission_rates(cfg, ch, d)[1, 1] == pytest.approx(expected, rel=1e-12)


def test_rate_without_interference_uses_noise_only():
    cfg = micro_config()
    ch = micro_channel()
    z = np.zeros((2, 2, 2), dtype=np.int64)
    z[0, 0, 0] = 1
    d = FrameDecision(np.eye(2, dtype=np.int64), np.array([[1, 0], [0, 0]]), z, np.zeros(2))
    assert transmission_rates(cfg, ch, d)[0, 0] == pytest.approx(1e6 * math.log2(1 + 0.06 / 1e-7), rel=1e-12)


def test_best_case_rates_use_best_subcarrier():
    cfg = micro_config()
    ch = micro_channel()
    r = best_case_rates(cfg, ch)
    assert r[1, 1] == pytest.approx(1e6 * math.log2(1 + 0.2 * 0.6 / 2e-7), rel=1e-12)


def _golden_oracle(cfg, ch, d, h, data, imp):
    """Independent scalar evaluation of the micro-fixture frame."""
    k = cfg.round_exponent
    t = h.frame_index
    x, y = d.assignment, d.association
    es_dt = {0: 0, 1: 1}
    out = {"tau": [], "energy": [], "gain": [], "changed": []}
    for b in (0, 1):
        c = es_dt[b]
        members = [n for n in range(2) if y[b, n]]
        d_c = sum(data[n, c] for n in members)
        rates = {n: scalar_rate(cfg, ch.gain, y, d.subcarriers, b, n) for n in members}
        tau_dtr = max(data[n, c] / rates[n] for n in members)
        e_dtr = sum(cfg.sensor_tx_power_w[n] * data[n, c] / rates[n] for n in members)
        src = int(np.argmax(h.prev_assignment[c]))
        tau_back = h.cumulative_data[c] / cfg.fiber_rate_es_es_bps[src, b] if src != b else 0.0
        e_back = cfg.es_tx_power_w[src] * tau_back
        T = d.training_rounds[b]
        cyc, f = cfg.cpu_cycles_per_bit_es[b], cfg.cpu_speed_es_hz[b]
        tau_cre = T * d_c * cyc / f
        e_cre = cfg.switched_capacitance[b] * f * f * T * cyc
        tau_mtr = cfg.model_size_bits[c] / cfg.fiber_rate_es_cloud_bps[b]
        e_mtr = cfg.es_tx_power_w[b] * cfg.model_size_bits[c] / cfg.fiber_rate_cloud_es_bps[b]
        g = math.log2((h.cumulative_data[c] + d_c) / (t * cfg.log_norm_beta) + 1) ** 2
        q = min(cfg.required_quality[c], g * (1 - 2 ** (-k * T)))
        out["tau"].append(tau_dtr + tau_back + tau_cre + tau_mtr)
        out["energy"].append(e_dtr + e_back + e_cre + e_mtr)
        out["gain"].append(imp[c] * q)
        out["changed"].append(int(any(y[b, n] != h.prev_association[b, n] for n in range(2))))
    tau_i = sum(cfg.model_size_bits) * cfg.cpu_cycles_per_bit_cloud / cfg.cpu_speed_cloud_hz
    e_i = sum(cfg.cloud_access_rate * cfg.cloud_instr_per_dt) * cfg.cloud_power_max_w + tau_i * (
        cfg.cloud_power_idle_w + cfg.cloud_power_leak_w
    )
    total_tau = max(out["tau"]) + tau_i
    total_e = sum(out["energy"]) + e_i
    U = cfg.gain_weight_xi * sum(out["gain"]) - cfg.cost_weight_kappa * total_e
    return total_tau, total_e, U, out


# frozen from the scalar oracle above
GOLDEN_TAU = 3.7379173429296833
GOLDEN_ENERGY = 4.816303067531543
GOLDEN_UTILITY = 1.775675247639015


def test_micro_fixture_golden_record(micro):
    cfg, ch, d, h = micro
    tau, energy, U, _ = _golden_oracle(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE)
    assert tau == pytest.approx(GOLDEN_TAU, rel=1e-12)
    assert energy == pytest.approx(GOLDEN_ENERGY, rel=1e-12)
    assert U == pytest.approx(GOLDEN_UTILITY, rel=1e-12)
    out = evaluate_frame(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE)
    assert out.total_latency == pytest.approx(GOLDEN_TAU, rel=1e-12)
    assert out.total_energy == pytest.approx(GOLDEN_ENERGY, rel=1e-12)
    assert out.frame_utility == pytest.approx(GOLDEN_UTILITY, rel=1e-12)
    assert out.deadline_met
    # both DTs migrated and both ESs changed their association
    assert (out.tau_back > 0).all()
    assert out.es_changed.tolist() == [1, 1]
    assert out.config_changes == 3


def test_totals_are_exact_sums_and_max(micro):
    cfg, ch, d, h = micro
    out = evaluate_frame(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE)
    assert out.total_latency == float(out.es_latency.max()) + out.tau_integration
    assert out.total_energy == float(out.es_energy.sum()) + out.e_integration


def test_decomposition_identities(micro):
    cfg, ch, d, h = micro
    out = evaluate_frame(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE)
    assert abs(out.frame_utility - out.cloud_utility) <= 1e-9
    via_es = out.es_utilities.sum() + cfg.config_cost * out.es_changed.sum() - cfg.cost_weight_kappa * out.e_integration
    assert abs(out.frame_utility - via_es) <= 1e-9


def test_first_frame_has_no_migration():
    cfg = micro_config()
    h = HistoryState.initial(cfg)
    out = evaluate_frame(cfg, micro_channel(1), micro_decision(), h, MICRO_DATA, MICRO_IMPORTANCE)
    assert (out.tau_back == 0).all() and (out.e_back == 0).all()
    assert out.config_changes == int(micro_decision().association.sum())


def test_unassigned_es_costs_nothing():
    cfg = micro_config(num_partial_dts=1, required_quality=0.9, model_size_bits=1e6, cloud_instr_per_dt=100.0)
    x = np.array([[1, 0]])
    d = FrameDecision(x, np.zeros((2, 2), dtype=np.int64), np.zeros((2, 2, 2), dtype=np.int64), np.zeros(2))
    out = evaluate_frame(cfg, micro_channel(1), d, HistoryState.initial(cfg), MICRO_DATA[:, :1], MICRO_IMPORTANCE[:1])
    assert out.es_latency[1] == 0 and out.es_energy[1] == 0 and out.max_rounds[1] == 0


def test_infeasible_decisions_rejected(micro):
    cfg, ch, d, h = micro
    bad = FrameDecision(d.assignment, d.association, np.zeros_like(d.subcarriers), d.training_rounds)
    assert "associated sensor holds no subcarrier" in check_decision(cfg, bad)
    with pytest.raises(InfeasibleDecision):
        evaluate_frame(cfg, ch, bad, h, MICRO_DATA, MICRO_IMPORTANCE)
    too_many = FrameDecision(d.assignment, d.association, d.subcarriers, np.array([1e4, 1e4]))
    with pytest.raises(InfeasibleDecision):
        evaluate_frame(cfg, ch, too_many, h, MICRO_DATA, MICRO_IMPORTANCE)
    double = FrameDecision(np.array([[1, 0], [1, 0]]), d.association, d.subcarriers, d.training_rounds)
    assert "an ES holds more than one partial-DT" in check_decision(cfg, double)


def _random_frame(rng, N=6, B=3, C=2, W=4):
    cfg = ScenarioConfig(
        num_partial_dts=C, num_ess=B, num_sensors=N, num_subcarriers=W,
        sensor_tx_power_w=rng.uniform(0.01, 1.0, N), required_quality=rng.uniform(0.5, 0.99, C),
    )
    ch = ChannelState(rng.choice([0.2, 0.4, 0.6], size=(N, B, W)), 3)
    perm = rng.permutation(B)[:C]
    x = np.zeros((C, B), dtype=np.int64)
    x[np.arange(C), perm] = 1
    y = np.zeros((B, N), dtype=np.int64)
    z = np.zeros((B, N, W), dtype=np.int64)
    for b in perm:
        members = rng.choice(N, size=rng.integers(1, min(N, W) + 1), replace=False)
        ws = rng.permutation(W)
        for i, n in enumerate(members):
            y[b, n] = 1
            z[b, n, ws[i]] = 1
    h = HistoryState(rng.uniform(0, 2e6, C), np.roll(x, 1, axis=1), rng.integers(0, 2, (B, N)), 3)
    data = rng.uniform(200e3, 600e3, (N, C))
    imp = rng.uniform(0, 1, C)
    probe = FrameDecision(x, y, z, np.zeros(B))
    t_star = evaluate_frame(cfg, ch, probe, h, data, imp).max_rounds
    rounds = np.floor(rng.uniform(0, 1, B) * t_star)
    return cfg, ch, FrameDecision(x, y, z, rounds), h, data, imp


def test_contribution_identity_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cfg, ch, d, h, data, imp = _random_frame(rng)
        rates = transmission_rates(cfg, ch, d)
        for b, n in zip(*np.nonzero(d.association)):
            got = sensor_contribution(cfg, ch, d, h, data, imp, b, n, rates=rates)
            # oracle: evaluate the frame with and without n at ES b, same rates table
            y2 = d.association.copy()
            y2[b, n] = 0
            z2 = d.subcarriers.copy()
            z2[b, n] = 0
            full = evaluate_frame(cfg, ch, d, h, data, imp, rates=rates)
            t_full = full.max_rounds[b]
            probe = FrameDecision(d.assignment, y2, z2, np.zeros(cfg.num_ess))
            t_wo = evaluate_frame(cfg, ch, probe, h, data, imp, rates=rates).max_rounds[b]
            r2 = d.training_rounds.copy()
            r2[b] = d.training_rounds[b] * t_wo / t_full if t_full > 0 else 0.0
            wo = evaluate_frame(cfg, ch, FrameDecision(d.assignment, y2, z2, r2), h, data, imp, rates=rates, validate=False)
            assert abs(got - (full.es_utilities[b] - wo.es_utilities[b])) <= 1e-9


def test_contribution_requires_membership(micro):
    cfg, ch, d, h = micro
    with pytest.raises(NotAMember):
        sensor_contribution(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE, 0, 1)


def test_history_advance_accumulates_collected_data(micro):
    cfg, ch, d, h = micro
    out = evaluate_frame(cfg, ch, d, h, MICRO_DATA, MICRO_IMPORTANCE)
    nxt = h.advance(d, out)
    assert nxt.frame_index == 3
    np.testing.assert_allclose(nxt.cumulative_data, h.cumulative_data + [300e3, 400e3 + 500e3])
