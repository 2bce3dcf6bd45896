"""Side-by-side evaluation of rollout policies on identical episode sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..metrics import rmse
from .dqn import DQN
from .env import EpisodeSpec, ForecastEnv, run_episode
from .policies import policy_adaptive, policy_greedy, policy_naive, policy_random


@dataclass
class PolicyResult:
    policy: str
    lead_h: int
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    final_rmse: list = field(default_factory=list)  # aggregate over variables
    final_rmse_by_var: dict = field(default_factory=dict)  # var index -> list

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def stderr_return(self) -> float:
        r = np.asarray(self.returns)
        return float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths))

    @property
    def mean_final_rmse(self) -> float:
        return float(np.mean(self.final_rmse))

    def mean_rmse_for_var(self, v: int) -> float:
        return float(np.mean(self.final_rmse_by_var[v]))


def _fixed_sequence(actions):
    seq = iter(list(actions))
    return lambda state: next(seq)


def evaluate_policies(env: ForecastEnv, episodes, dqn: DQN | None = None,
                      random_seed: int = 0) -> dict:
    """Run naive/greedy/random (and adaptive when a DQN is given) on the same episodes.

    Returns {policy name: PolicyResult}.
    """
    episodes = list(episodes)
    intervals = env.actions.intervals
    names = ["naive", "greedy", "random"] + (["adaptive"] if dqn is not None else [])
    results = {}
    for name in names:
        leads = {e.lead_h for e in episodes}
        lead_label = episodes[0].lead_h if len(leads) == 1 else -1
        res = PolicyResult(policy=name, lead_h=lead_label)
        res.final_rmse_by_var = {v: [] for v in range(env.dataset.spec.num_vars)}
        for i, episode in enumerate(episodes):
            if name == "naive":
                action_fn = _fixed_sequence(policy_naive(episode.lead_h, intervals))
            elif name == "greedy":
                action_fn = _fixed_sequence(policy_greedy(episode.lead_h, intervals))
            elif name == "random":
                action_fn = _fixed_sequence(
                    policy_random(episode.lead_h, seed=random_seed * 100003 + i, intervals=intervals)
                )
            else:
                action_fn = lambda s: policy_adaptive(s, dqn)
            traj, _, final_state = run_episode(env, episode, action_fn)
            truth = env.dataset.at(episode.t0_hours + episode.lead_h)
            res.returns.append(traj.return_value)
            res.lengths.append(len(traj))
            res.final_rmse.append(rmse(final_state.x_hat.values, truth.values, env.weights))
            for v in range(env.dataset.spec.num_vars):
                res.final_rmse_by_var[v].append(
                    rmse(final_state.x_hat.values[v : v + 1], truth.values[v : v + 1], env.weights)
                )
        results[name] = res
    return results
