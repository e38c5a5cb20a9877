"""Recurrent PPO: parallel rollouts, GAE, clipped surrogate updates.

Sixteen environments advance in lockstep against an immutable parameter
snapshot; minibatches are whole environment sequences so the GRU gradient
is truncated only at rollout boundaries.  The learning rate decays
linearly in collected environment steps.  Checkpoints capture parameters,
optimizer moments, recurrent state and full environment snapshots, so a
resumed run reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import tensorcore as tc
from .env import CrowdNavEnv, EnvConfig, Outcome
from .policy import HUMAN_DIM, ROBOT_DIM, PolicyConfig, PolicyNetwork, featurize

__all__ = ["PPOConfig", "RolloutBuffer", "PPOTrainer", "compute_gae", "TRAIN_SEED_TAG"]

# training episode seeds are [base_seed, TAG, env_index, episode_counter];
# evaluation uses plain integers, so the two streams never collide
TRAIN_SEED_TAG = 0


@dataclass(frozen=True)
class PPOConfig:
    num_envs: int = 16
    rollout_len: int = 128
    total_steps: int = 60_000_000
    lr: float = 8e-5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if (self.num_envs * self.rollout_len) % self.minibatches != 0:
            raise ValueError("num_envs * rollout_len must be divisible by minibatches")
        if self.num_envs % self.minibatches != 0:
            raise ValueError("sequence minibatching needs num_envs divisible by minibatches")

    def learning_rate(self, env_steps):
        return self.lr * max(0.0, 1.0 - env_steps / self.total_steps)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class RolloutBuffer:
    """Fixed-capacity (num_envs x rollout_len) transition storage."""

    def __init__(self, num_envs, rollout_len, n_max, num_beams, gru_hidden, dtype=np.float32):
        self.num_envs = num_envs
        self.rollout_len = rollout_len
        shape = (num_envs, rollout_len)
        self.robot = np.zeros(shape + (ROBOT_DIM,), dtype=dtype)
        self.humans = np.zeros(shape + (n_max, HUMAN_DIM), dtype=dtype)
        self.mask = np.zeros(shape + (n_max,), dtype=dtype)
        self.scan = np.zeros(shape + (num_beams,), dtype=dtype)
        self.action = np.zeros(shape, dtype=np.int64)
        self.log_prob = np.zeros(shape, dtype=dtype)
        self.value = np.zeros(shape, dtype=dtype)
        self.reward = np.zeros(shape, dtype=dtype)
        self.done = np.zeros(shape, dtype=dtype)
        self.initial_hidden = np.zeros((num_envs, gru_hidden), dtype=dtype)
        self.bootstrap_value = np.zeros(num_envs, dtype=dtype)
        self.advantage = np.zeros(shape, dtype=dtype)
        self.returns = np.zeros(shape, dtype=dtype)

    @property
    def size(self):
        return self.num_envs * self.rollout_len


def compute_gae(rewards, values, dones, bootstrap_values, gamma, lam, normalize=True):
    """Generalized advantage estimation over (num_envs, T) arrays.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    Returns (advantages, returns); advantages are normalized batch-wide to
    zero mean / unit variance unless ``normalize`` is False.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n_envs, horizon = rewards.shape
    adv = np.zeros_like(rewards)
    last = np.zeros(n_envs)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        nonterminal = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_value * nonterminal - values[:, t]
        last = delta + gamma * lam * nonterminal * last
        adv[:, t] = last
        next_value = values[:, t]
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


class AdamState:
    def __init__(self, params):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


class PPOTrainer:
    """Owns the environments, policy, optimizer and rollout loop."""

    def __init__(self, env_config=None, policy_config=None, ppo_config=None,
                 dtype=np.float32, threads=1):
        self.env_config = env_config or EnvConfig()
        self.ppo = ppo_config or PPOConfig()
        self.policy_config = policy_config or PolicyConfig(
            n_max_humans=(env_config or EnvConfig()).n_max_humans
        )
        self.dtype = np.dtype(dtype)
        self.net = PolicyNetwork(self.policy_config, seed=self.ppo.seed, dtype=dtype)
        self.adam = AdamState(self.net.params)
        self.envs = [CrowdNavEnv(self.env_config) for _ in range(self.ppo.num_envs)]
        self.action_rng = np.random.default_rng([self.ppo.seed, 1])
        self.shuffle_rng = np.random.default_rng([self.ppo.seed, 2])
        self.episode_counters = [0] * self.ppo.num_envs
        self.env_steps = 0
        self.iteration = 0
        self.hidden = self.net.zero_hidden(self.ppo.num_envs)
        self.recent_returns = deque(maxlen=100)
        self.recent_lengths = deque(maxlen=100)
        self.recent_success = deque(maxlen=100)
        self._episode_return = np.zeros(self.ppo.num_envs)
        self._episode_length = np.zeros(self.ppo.num_envs, dtype=np.int64)
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        self._obs = [None] * self.ppo.num_envs
        for i in range(self.ppo.num_envs):
            self._reset_env(i)

    # -- env management --------------------------------------------------------

    def _episode_seed(self, env_idx):
        return [self.ppo.seed, TRAIN_SEED_TAG, env_idx, self.episode_counters[env_idx]]

    def _reset_env(self, env_idx):
        self._obs[env_idx] = self.envs[env_idx].reset(self._episode_seed(env_idx))
        self.episode_counters[env_idx] += 1
        self.hidden[env_idx] = 0.0
        self._episode_return[env_idx] = 0.0
        self._episode_length[env_idx] = 0

    def _featurize_batch(self):
        hw = self.env_config.arena_half_width
        mr = self.env_config.scan.max_range
        feats = [featurize(o, hw, mr) for o in self._obs]
        return (
            np.stack([f[0] for f in feats]),
            np.stack([f[1] for f in feats]),
            np.stack([f[2] for f in feats]),
            np.stack([f[3] for f in feats]),
        )

    def _step_all(self, actions):
        if self._pool is not None:
            return list(self._pool.map(lambda pair: pair[0].step(pair[1]), zip(self.envs, actions)))
        return [env.step(a) for env, a in zip(self.envs, actions)]

    # -- rollouts ---------------------------------------------------------------

    def collect_rollouts(self):
        cfg = self.ppo
        buffer = RolloutBuffer(
            cfg.num_envs,
            cfg.rollout_len,
            self.policy_config.n_max_humans,
            self.policy_config.num_beams,
            self.policy_config.gru_hidden,
            dtype=self.dtype,
        )
        buffer.initial_hidden[:] = self.hidden
        for t in range(cfg.rollout_len):
            robot, humans, mask, scan = self._featurize_batch()
            with tc.no_grad():
                out = self.net.forward(robot, humans, mask, scan, self.hidden)
                dist = tc.Categorical(out.action_logits)
                actions = dist.sample(self.action_rng)
                log_probs = dist.log_prob(actions).data
            buffer.robot[:, t] = robot
            buffer.humans[:, t] = humans
            buffer.mask[:, t] = mask
            buffer.scan[:, t] = scan
            buffer.action[:, t] = actions
            buffer.log_prob[:, t] = log_probs
            buffer.value[:, t] = out.value.data[:, 0]
            self.hidden = out.new_hidden.data.copy()
            results = self._step_all([int(a) for a in actions])
            for i, result in enumerate(results):
                buffer.reward[i, t] = result.reward
                buffer.done[i, t] = float(result.done)
                self._episode_return[i] += result.reward
                self._episode_length[i] += 1
                if result.done:
                    self.recent_returns.append(float(self._episode_return[i]))
                    self.recent_lengths.append(int(self._episode_length[i]))
                    self.recent_success.append(1.0 if result.outcome is Outcome.SUCCESS else 0.0)
                    self._reset_env(i)
                else:
                    self._obs[i] = result.observation
            self.env_steps += cfg.num_envs
        robot, humans, mask, scan = self._featurize_batch()
        with tc.no_grad():
            out = self.net.forward(robot, humans, mask, scan, self.hidden)
        buffer.bootstrap_value[:] = out.value.data[:, 0]
        return buffer

    # -- optimization -------------------------------------------------------------

    def _adam_step(self, lr):
        cfg = self.ppo
        self.adam.t += 1
        b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        bias1 = 1.0 - b1 ** self.adam.t
        bias2 = 1.0 - b2 ** self.adam.t
        for name, t in self.net.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.adam.m[name]
            v = self.adam.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + eps)
            t.data = t.data - (lr * update).astype(t.data.dtype)

    def _minibatch_loss(self, buffer, idx):
        """Replay ``idx`` env sequences through time and build the PPO loss."""
        cfg = self.ppo
        hidden = tc.Tensor(buffer.initial_hidden[idx])
        policy_terms = []
        value_terms = []
        entropy_terms = []
        for t in range(cfg.rollout_len):
            out = self.net.forward(
                buffer.robot[idx, t], buffer.humans[idx, t], buffer.mask[idx, t],
                buffer.scan[idx, t], hidden,
            )
            dist = tc.Categorical(out.action_logits)
            log_prob = dist.log_prob(buffer.action[idx, t])
            ratio = tc.exp(tc.sub(log_prob, buffer.log_prob[idx, t]))
            adv = buffer.advantage[idx, t]
            surr1 = tc.mul(ratio, adv)
            surr2 = tc.mul(tc.clip_(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon), adv)
            policy_terms.append(tc.neg(tc.minimum(surr1, surr2)))
            err = tc.sub(tc.reshape(out.value, (len(idx),)), buffer.returns[idx, t])
            value_terms.append(tc.square(err))
            entropy_terms.append(dist.entropy())
            # cut recurrence where an episode ended inside the rollout
            keep = (1.0 - buffer.done[idx, t])[:, None].astype(self.dtype)
            hidden = tc.mul(out.new_hidden, keep)
        policy_loss = tc.mean_(tc.concat(policy_terms, axis=0))
        value_loss = tc.mean_(tc.concat(value_terms, axis=0))
        entropy = tc.mean_(tc.concat(entropy_terms, axis=0))
        total = tc.add(
            tc.sub(policy_loss, tc.scale(entropy, cfg.entropy_coef)),
            tc.scale(value_loss, cfg.value_coef),
        )
        return total, policy_loss, value_loss, entropy

    def ppo_update(self, buffer):
        cfg = self.ppo
        adv, ret = compute_gae(
            buffer.reward, buffer.value, buffer.done, buffer.bootstrap_value,
            cfg.gamma, cfg.gae_lambda,
        )
        buffer.advantage[:] = adv.astype(self.dtype)
        buffer.returns[:] = ret.astype(self.dtype)
        lr = self.ppo.learning_rate(self.env_steps)
        seq_per_mb = cfg.num_envs // cfg.minibatches
        policy_losses, value_losses, entropies, grad_norms = [], [], [], []
        for _ in range(cfg.epochs):
            perm = self.shuffle_rng.permutation(cfg.num_envs)
            for mb in range(cfg.minibatches):
                idx = np.sort(perm[mb * seq_per_mb : (mb + 1) * seq_per_mb])
                total, p_loss, v_loss, ent = self._minibatch_loss(buffer, idx)
                if not np.isfinite(total.data):
                    raise FloatingPointError(
                        f"non-finite loss at iteration {self.iteration}: "
                        f"policy={p_loss.data} value={v_loss.data} entropy={ent.data}"
                    )
                self.net.params.zero_grad()
                tc.backward(total)
                grad_norms.append(self.net.params.clip_grad_global_norm(cfg.max_grad_norm))
                self._adam_step(lr)
                policy_losses.append(float(p_loss.data))
                value_losses.append(float(v_loss.data))
                entropies.append(float(ent.data))
        self.iteration += 1
        return {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "lr": lr,
            "policy_loss": float(np.mean(policy_losses)),
            "value_loss": float(np.mean(value_losses)),
            "entropy": float(np.mean(entropies)),
            "grad_norm": float(np.mean(grad_norms)),
            "mean_ep_reward": float(np.mean(self.recent_returns)) if self.recent_returns else 0.0,
            "mean_ep_length": float(np.mean(self.recent_lengths)) if self.recent_lengths else 0.0,
            "success_rate": float(np.mean(self.recent_success)) if self.recent_success else 0.0,
            "episodes": len(self.recent_returns),
        }

    def train_iteration(self):
        buffer = self.collect_rollouts()
        return self.ppo_update(buffer)

    # -- checkpointing --------------------------------------------------------------

    def save_checkpoint(self, path):
        arrays = {name: t.data for name, t in self.net.params.items()}
        for name in self.net.params.names():
            arrays[f"adam.m/{name}"] = self.adam.m[name]
            arrays[f"adam.v/{name}"] = self.adam.v[name]
        arrays["state/hidden"] = self.hidden
        meta = {
            "policy_config": self.policy_config.to_dict(),
            "env_config": self.env_config.to_dict(),
            "ppo_config": self.ppo.to_dict(),
            "stats": {
                "iteration": self.iteration,
                "env_steps": self.env_steps,
                "adam_t": self.adam.t,
                "episode_counters": self.episode_counters,
                "recent_returns": list(self.recent_returns),
                "recent_lengths": list(self.recent_lengths),
                "recent_success": list(self.recent_success),
                "episode_return": self._episode_return.tolist(),
                "episode_length": self._episode_length.tolist(),
            },
            "rng": {
                "action": self.action_rng.bit_generator.state,
                "shuffle": self.shuffle_rng.bit_generator.state,
            },
            "env_states": [env.get_state() for env in self.envs],
        }
        tc.save_tensors(path, arrays, meta)

    @classmethod
    def load_checkpoint(cls, path, threads=1, dtype=np.float32):
        arrays, meta = tc.load_tensors(path)
        trainer = cls(
            env_config=EnvConfig.from_dict(meta["env_config"]),
            policy_config=PolicyConfig.from_dict(meta["policy_config"]),
            ppo_config=PPOConfig.from_dict(meta["ppo_config"]),
            dtype=dtype,
            threads=threads,
        )
        params = {
            name: arr for name, arr in arrays.items() if not name.startswith(("adam.", "state/"))
        }
        trainer.net.params.load_state(params)
        for name in trainer.net.params.names():
            trainer.adam.m[name] = arrays[f"adam.m/{name}"].copy()
            trainer.adam.v[name] = arrays[f"adam.v/{name}"].copy()
        stats = meta["stats"]
        trainer.iteration = stats["iteration"]
        trainer.env_steps = stats["env_steps"]
        trainer.adam.t = stats["adam_t"]
        trainer.episode_counters = list(stats["episode_counters"])
        trainer.recent_returns = deque(stats["recent_returns"], maxlen=100)
        trainer.recent_lengths = deque(stats["recent_lengths"], maxlen=100)
        trainer.recent_success = deque(stats["recent_success"], maxlen=100)
        trainer._episode_return = np.array(stats["episode_return"])
        trainer._episode_length = np.array(stats["episode_length"], dtype=np.int64)
        trainer.action_rng.bit_generator.state = meta["rng"]["action"]
        trainer.shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
        trainer.hidden = arrays["state/hidden"].astype(trainer.dtype).copy()
        for env, state in zip(trainer.envs, meta["env_states"]):
            env.set_state(state)
        trainer._obs = [env._observe() for env in trainer.envs]
        return trainer
