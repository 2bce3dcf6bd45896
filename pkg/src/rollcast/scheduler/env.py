"""The forecasting environment: the trained model plus the truth dataset.

An episode starts from a true state and walks forward by chosen intervals
until the lead time is exhausted; each step forecasts with the model, is
scored against the dataset truth, and feeds its own forecast back in.
Illegal actions (interval longer than the remaining time) raise, never clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..gridio import Dataset, GridField
from ..metrics import WeightTable, lat_weights, step_reward, trajectory_return
from ..model import ForecastModel


@dataclass(frozen=True)
class EpisodeSpec:
    t0_hours: int
    lead_h: int


@dataclass
class EnvState:
    x_hat: GridField  # current (predicted) state
    date_time_hours: int  # absolute timestamp of x_hat
    travel_h: int
    remaining_h: int
    lead_h: int

    def __post_init__(self):
        if self.travel_h + self.remaining_h != self.lead_h:
            raise ValueError(
                f"travel {self.travel_h} + remaining {self.remaining_h} != lead {self.lead_h}"
            )
        if self.remaining_h < 0:
            raise ValueError("remaining time must be non-negative")

    @property
    def episode_start_hours(self) -> int:
        return self.date_time_hours - self.travel_h


@dataclass
class Transition:
    state: EnvState
    action: int
    reward: float
    next_state: EnvState
    terminal: bool

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass
class Trajectory:
    """Visited timestamps (offsets from episode start), intervals, rewards."""

    timestamps: list = field(default_factory=list)
    intervals: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def append(self, interval: int, reward: float):
        last = self.timestamps[-1] if self.timestamps else 0
        self.timestamps.append(last + interval)
        self.intervals.append(interval)
        self.rewards.append(reward)

    @property
    def return_value(self) -> float:
        return trajectory_return(self.rewards)

    def __len__(self):
        return len(self.intervals)


class ActionSet:
    """Discrete interval actions masked by the remaining time."""

    def __init__(self, intervals):
        self.intervals = tuple(sorted(int(d) for d in intervals))

    def legal(self, remaining_h: int) -> list:
        return [d for d in self.intervals if d <= remaining_h]

    def legal_mask(self, remaining_h: int) -> np.ndarray:
        return np.array([d <= remaining_h for d in self.intervals])

    def index_of(self, action: int) -> int:
        return self.intervals.index(int(action))


class ForecastEnv:
    """Couples a forecast model with the dataset it is scored against."""

    def __init__(self, model: ForecastModel, dataset: Dataset, omega: float,
                 weights: WeightTable | None = None):
        self.model = model
        self.dataset = dataset
        self.omega = float(omega)
        self.weights = weights or lat_weights(dataset.spec)
        self.actions = ActionSet(model.cfg.intervals)

    def reset(self, episode: EpisodeSpec) -> EnvState:
        step_h = min(self.actions.intervals)
        if episode.lead_h <= 0 or episode.lead_h % step_h != 0:
            raise ValueError(
                f"lead {episode.lead_h}h is not reachable in {step_h}h multiples"
            )
        x0 = self.dataset.at(episode.t0_hours)
        self.dataset.at(episode.t0_hours + episode.lead_h)  # target must exist
        return EnvState(
            x_hat=x0,
            date_time_hours=episode.t0_hours,
            travel_h=0,
            remaining_h=episode.lead_h,
            lead_h=episode.lead_h,
        )

    def step(self, state: EnvState, action: int):
        legal = self.actions.legal(state.remaining_h)
        if action not in legal:
            raise ValueError(
                f"illegal action {action}h with {state.remaining_h}h remaining; legal: {legal}"
            )
        with dc.no_grad():
            forecast = self.model.forward(state.x_hat, action).x_hat
        truth = self.dataset.at(state.date_time_hours + action)
        reward = step_reward(forecast.values, truth.values, self.weights, self.omega)
        next_state = EnvState(
            x_hat=forecast,
            date_time_hours=state.date_time_hours + action,
            travel_h=state.travel_h + action,
            remaining_h=state.remaining_h - action,
            lead_h=state.lead_h,
        )
        transition = Transition(state, action, reward, next_state, next_state.remaining_h == 0)
        return transition, next_state


def run_episode(env: ForecastEnv, episode: EpisodeSpec, action_fn):
    """Walk one episode to termination; action_fn maps EnvState -> interval.

    Returns (trajectory, transitions, final_state).
    """
    state = env.reset(episode)
    traj = Trajectory()
    transitions = []
    while state.remaining_h > 0:
        action = int(action_fn(state))
        transition, state = env.step(state, action)
        traj.append(action, transition.reward)
        transitions.append(transition)
    return traj, transitions, state
