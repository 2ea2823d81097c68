"""Per-frame exogenous inputs and episode bookkeeping shared by every policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ChannelState, FrameDecision, FrameOutcome, HistoryState, ScenarioConfig


@dataclass(frozen=True, eq=False)
class FrameInputs:
    channel: ChannelState
    data: np.ndarray  # d_{n,c}(t), shape (N, C), bits
    importance: np.ndarray  # I_c(t), shape (C,)

    @property
    def t(self) -> int:
        return self.channel.frame_index


@dataclass
class EpisodeState:
    config: ScenarioConfig
    history: HistoryState
    prev_decision: FrameDecision | None = None
    prev_outcome: FrameOutcome | None = None

    @classmethod
    def start(cls, config: ScenarioConfig) -> "EpisodeState":
        return cls(config, HistoryState.initial(config))

    @property
    def t(self) -> int:
        return self.history.frame_index

    @property
    def prev_collected(self) -> np.ndarray:
        if self.prev_outcome is None:
            return np.zeros(self.config.num_partial_dts)
        return self.prev_outcome.collected_data

    @property
    def prev_quality(self) -> np.ndarray:
        if self.prev_outcome is None:
            return np.zeros(self.config.num_partial_dts)
        return self.prev_outcome.per_dt_quality

    def advance(self, decision: FrameDecision, outcome: FrameOutcome) -> "EpisodeState":
        return EpisodeState(self.config, self.history.advance(decision, outcome), decision, outcome)


def deadline_penalty(config: ScenarioConfig, outcome: FrameOutcome) -> float:
    return max(config.penalty_psi * (outcome.total_latency - config.frame_deadline_s), 0.0)


def shaped_utility(config: ScenarioConfig, outcome: FrameOutcome) -> float:
    """Per-frame term of the cumulative system utility."""
    return outcome.frame_utility - config.config_cost * outcome.config_changes - deadline_penalty(config, outcome)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
