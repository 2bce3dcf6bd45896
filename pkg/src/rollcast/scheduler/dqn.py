"""Action-value estimation for rollout scheduling.

The Q network consumes the forecaster's own weather embedding (tokenizer +
ring positional table, frozen copies) with a temporal token appended, runs
one multi-head self-attention block, and maps the temporal token to one
value per interval action. A main network learns by temporal-difference
regression against a periodically synced target copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor
from ..encoding import TemporalEmbedding, patchify
from ..model import ForecastModel, _linear, _linear_params
from .env import ActionSet, EnvState, Transition


@dataclass
class DQNConfig:
    gamma: float = 0.99
    sync_every: int = 200  # iterations between target syncs
    buffer_capacity: int = 50_000  # transitions
    batch_size: int = 48
    lr: float = 1e-3
    lr_final_fraction: float = 0.1  # cosine decay floor over the fine-tune run
    eps_start: float = 1.0
    eps_end: float = 0.05
    season_length_days: int = 60
    norm_hours: float = 240.0
    seed: int = 0


NEG_INF = -1e30  # mask value for illegal actions


class QNetwork:
    """One attention block over [weather tokens, temporal token] -> action values."""

    def __init__(self, model: ForecastModel, cfg: DQNConfig, seed: int):
        self.model_cfg = model.cfg
        self.actions = ActionSet(model.cfg.intervals)
        self.num_tokens = model.num_tokens
        self.patch_dim = model.patch_dim
        self.patch_size = model.cfg.patch_size
        D = model.cfg.embed_dim
        self.embed_dim = D
        self.num_heads = model.cfg.num_heads

        # frozen weather-embedding pieces, copied from the pre-trained model
        self._tok_weight = Tensor(model.params()["tokenizer.weight"].data.copy())
        self._tok_bias = Tensor(model.params()["tokenizer.bias"].data.copy())
        self._positional = model.positional.table.copy()
        self._norm_mean = model.norm_mean.copy()
        self._norm_std = model.norm_std.copy()

        rng = np.random.default_rng(seed)
        self.temporal = TemporalEmbedding(D, cfg.season_length_days, cfg.norm_hours, rng)
        self._params = dict(self.temporal.params())
        for name in ("wq", "wk", "wv", "wo"):
            self._params.update(_linear_params(rng, D, D, f"q.attn.{name}"))
        self._params.update(_linear_params(rng, D, len(self.actions.intervals), "q.head"))

    def params(self) -> dict:
        return self._params

    def state_arrays(self) -> dict:
        return {k: p.data for k, p in self._params.items()}

    def load_state_arrays(self, arrays: dict):
        for k, p in self._params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def copy_from(self, other: "QNetwork"):
        for k, p in self._params.items():
            p.data = other._params[k].data.copy()

    def _weather_tokens(self, values: np.ndarray) -> np.ndarray:
        """Frozen embedding of one raw state: (L, D) plain array."""
        xn = (values - self._norm_mean[:, None, None]) / self._norm_std[:, None, None]
        patches = patchify(xn, self.patch_size)
        return patches @ self._tok_weight.data + self._tok_bias.data + self._positional

    def q_values_batch(self, states) -> Tensor:
        """(B, num_actions) action values for a list of EnvStates."""
        B = len(states)
        L = self.num_tokens
        D = self.embed_dim
        weather = np.stack([self._weather_tokens(s.x_hat.values) for s in states])
        z = Tensor(weather.reshape(B * L, D))
        temporal_rows = dc.concat(
            [
                self.temporal(s.date_time_hours, s.travel_h, s.remaining_h, s.lead_h)
                for s in states
            ],
            axis=0,
        )  # (B, D)
        z3 = dc.reshape(z, (B, L, D))
        t3 = dc.reshape(temporal_rows, (B, 1, D))
        full = dc.concat([z3, t3], axis=1)  # (B, L+1, D)
        h = dc.reshape(full, (B * (L + 1), D))
        h = dc.layer_norm(h)
        attn = self._attention(h, B, L + 1)
        h = dc.add(h, attn)
        last = dc.slice_axis(dc.reshape(h, (B, L + 1, D)), 1, L, L + 1)  # temporal token
        return _linear(self._params, "q.head", dc.reshape(last, (B, D)))

    def _attention(self, h: Tensor, batch: int, length: int) -> Tensor:
        D = self.embed_dim
        dh = D // self.num_heads
        q = dc.reshape(_linear(self._params, "q.attn.wq", h), (batch, length, D))
        k = dc.reshape(_linear(self._params, "q.attn.wk", h), (batch, length, D))
        v = dc.reshape(_linear(self._params, "q.attn.wv", h), (batch, length, D))
        heads = []
        for i in range(self.num_heads):
            qh = dc.slice_axis(q, 2, i * dh, (i + 1) * dh)
            kh = dc.slice_axis(k, 2, i * dh, (i + 1) * dh)
            vh = dc.slice_axis(v, 2, i * dh, (i + 1) * dh)
            scores = dc.mul_scalar(dc.matmul(qh, dc.transpose_last2(kh)), 1.0 / np.sqrt(dh))
            heads.append(dc.matmul(dc.softmax(scores, axis=-1), vh))
        cat = dc.reshape(dc.concat(heads, axis=2), (batch * length, D))
        return _linear(self._params, "q.attn.wo", cat)

    def q_values(self, state: EnvState) -> np.ndarray:
        """Plain (num_actions,) values for one state."""
        with dc.no_grad():
            return self.q_values_batch([state]).data[0]

    def masked_q_values(self, state: EnvState) -> np.ndarray:
        """Values with illegal actions forced to a -inf stand-in."""
        q = self.q_values(state)
        mask = self.actions.legal_mask(state.remaining_h)
        return np.where(mask, q, NEG_INF)


class DQN:
    """Main/target pair; the target only ever changes by copying the main."""

    def __init__(self, model: ForecastModel, cfg: DQNConfig):
        self.cfg = cfg
        self.q_main = QNetwork(model, cfg, seed=cfg.seed)
        self.q_target = QNetwork(model, cfg, seed=cfg.seed)
        self.q_target.copy_from(self.q_main)
        self.optimizer = dc.AdamW(self.q_main.params(), lr=cfg.lr)

    def sync_target(self):
        self.q_target.copy_from(self.q_main)

    @property
    def actions(self) -> ActionSet:
        return self.q_main.actions


class ReplayBuffer:
    """Episode store with uniform transition sampling.

    Episodes are kept as (spec, actions, epoch added) so a refresh can replay
    them through the current environment; refreshed transitions replace the
    stale ones and episodes past max_age (or over capacity) are evicted,
    oldest first.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: list = []  # dicts: spec, actions, epoch
        self.transitions: list = []

    def __len__(self):
        return len(self.transitions)

    def add_episode(self, spec, actions, transitions, epoch: int):
        self.episodes.append({"spec": spec, "actions": list(actions), "epoch": epoch})
        self.transitions.extend(transitions)
        self._enforce_capacity()

    def _enforce_capacity(self):
        while self.episodes and len(self.transitions) > self.capacity:
            dropped = self.episodes.pop(0)
            n = len(dropped["actions"])
            self.transitions = self.transitions[n:]

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        idx = rng.integers(0, len(self.transitions), size=batch_size)
        return [self.transitions[i] for i in idx]

    def refresh(self, env, current_epoch: int, max_age: int):
        """Replay stored episodes through the current environment.

        The fine-tuned forecaster changes the environment, so stored
        rewards/next-states go stale; replaying the same action sequences
        regenerates them consistently.
        """
        from .env import run_episode  # local import to avoid a cycle

        self.episodes = [e for e in self.episodes if current_epoch - e["epoch"] <= max_age]
        self.transitions = []
        for e in self.episodes:
            actions = iter(e["actions"])
            _, transitions, _ = run_episode(env, e["spec"], lambda s: next(actions))
            self.transitions.extend(transitions)


# -- temporal-difference updates -------------------------------------------------------


def td_target(reward: float, gamma: float, max_next_q: float, terminal: bool) -> float:
    """One-step bootstrapped target: R + gamma * max_a q(S', a); R alone at terminal."""
    return reward if terminal else reward + gamma * max_next_q


def td_targets(batch, dqn: DQN) -> np.ndarray:
    """Targets for a minibatch, masking illegal next actions and terminals."""
    targets = np.zeros(len(batch))
    non_terminal = [t for t in batch if not t.terminal]
    next_q = {}
    if non_terminal:
        with dc.no_grad():
            qb = dqn.q_target.q_values_batch([t.next_state for t in non_terminal]).data
        for row, t in zip(qb, non_terminal):
            mask = dqn.actions.legal_mask(t.next_state.remaining_h)
            next_q[id(t)] = np.max(np.where(mask, row, NEG_INF))
    for i, t in enumerate(batch):
        targets[i] = td_target(t.reward, dqn.cfg.gamma, next_q.get(id(t), 0.0), t.terminal)
    return targets


def td_update(batch, dqn: DQN) -> float:
    """One gradient step of q_main toward the TD targets; returns the loss."""
    targets = td_targets(batch, dqn)
    dqn.optimizer.zero_grad()
    q = dqn.q_main.q_values_batch([t.state for t in batch])  # (B, A)
    idx = np.array([[dqn.actions.index_of(t.action)] for t in batch])
    q_taken = dc.gather_cols(q, idx)  # (B, 1)
    diff = dc.sub(q_taken, Tensor(targets[:, None]))
    loss = dc.tensor_mean(dc.mul(diff, diff))
    dc.backward(loss)
    dqn.optimizer.step()
    return float(loss.data)
