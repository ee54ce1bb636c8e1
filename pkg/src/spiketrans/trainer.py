"""Q-learning loop: replay buffer, epsilon-greedy exploration, target network.

The loop performs one gradient step per environment decision step, copies
the online parameters into the target network on a fixed schedule, and
periodically checkpoints and evaluates the greedy policy.  Every random
draw derives from the run seed, so two runs with identical configurations
produce byte-identical metrics files and checkpoints.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, UsageError
from .network import MMDQN, NetworkSpec, build_from_checkpoint, load_checkpoint, save_checkpoint
from .optim import Adam
from .sim import ACTIONS, Observation, ScenarioConfig, make_env
from .tensor import Tape, Tensor, mean_all, square, sub, take_actions

__all__ = [
    "Transition",
    "ReplayBuffer",
    "TrainConfig",
    "EvalMetrics",
    "epsilon_at",
    "select_action",
    "td_loss",
    "train",
    "evaluate",
    "evaluate_checkpoint",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int = 50_000, seed: int = 0):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0
        self._rng = np.random.Generator(
            np.random.Philox(key=np.array([seed & _MASK64, 0xB0FFE2], dtype=np.uint64)))

    def push(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int) -> list[Transition]:
        if len(self._data) < n:
            raise UsageError(f"buffer holds {len(self._data)} transitions, need {n}")
        idx = self._rng.integers(0, len(self._data), size=n)  # with replacement
        return [self._data[i] for i in idx]

    def __len__(self) -> int:
        return len(self._data)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 64
    target_update: int = 100
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 70_000
    total_steps: int = 10_000
    buffer_capacity: int = 50_000
    warmup: int = 1_000
    eval_episodes: int = 20
    checkpoint_every: int = 5_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        for eps in (self.eps_start, self.eps_end):
            if not 0.0 <= eps <= 1.0:
                raise ConfigError("epsilon bounds must lie in [0, 1]")


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    """Piecewise-linear schedule: eps_start at step 0, eps_end from decay on."""
    frac = min(max(step, 0) / cfg.eps_decay_steps, 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def select_action(q_values, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with lowest-index tie-breaking on the greedy branch."""
    if isinstance(q_values, Tensor):
        q_values = q_values.data
    q = np.asarray(q_values).reshape(-1)
    if rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def td_loss(batch: list[Transition], q_net: MMDQN, target_net: MMDQN, gamma: float,
            online_seed: int = 0, target_seed: int = 0) -> Tensor:
    """Mean squared temporal-difference error; gradients land on q_net.

    The bootstrap term uses the target network and is dropped for terminal
    transitions.  The target forward runs without a tape, so no gradient
    ever reaches the target parameters.
    """
    if not batch:
        raise UsageError("td_loss needs a non-empty batch")
    actions = np.array([t.action for t in batch], np.int64)
    rewards = np.array([t.reward for t in batch], np.float32)
    done = np.array([t.done for t in batch], np.float32)

    target_net.eval()
    next_q = target_net.forward_q([t.next_obs for t in batch], encoder_seed=target_seed)
    bootstrap = next_q.data.max(axis=1)
    targets = rewards + gamma * (1.0 - done) * bootstrap

    for _, p in q_net.named_parameters():
        p.grad = None
    tape = Tape()
    with tape:
        q = q_net.forward_q([t.obs for t in batch], encoder_seed=online_seed)
        q_taken = take_actions(q, actions)
        residual = sub(Tensor(targets), q_taken)
        loss = mean_all(square(residual))
    tape.backward(loss)
    return loss


@dataclass
class EvalMetrics:
    avg_reward: float
    crash_frequency: float
    avg_speed: float
    episodes: int = 0
    decision_steps: int = 0

    def as_dict(self) -> dict:
        return {
            "avg_reward": self.avg_reward,
            "crash_frequency": self.crash_frequency,
            "avg_speed": self.avg_speed,
            "episodes": self.episodes,
            "decision_steps": self.decision_steps,
        }


def _eval_encoder_seed(seed: int, episode: int, step: int) -> int:
    return (seed * 0x9E3779B1 + episode * 0x85EBCA77 + step * 0xC2B2AE3D + 1) & _MASK64


def evaluate(net: MMDQN | None, env_cfg: ScenarioConfig, n_episodes: int = 20,
             seed: int = 0, policy: str = "greedy") -> EvalMetrics:
    """Greedy-policy metrics: mean episode return, crashes per decision step,
    and mean ego speed.  ``policy="random"`` measures the random baseline on
    the same episode seeds."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    if policy == "greedy" and net is None:
        raise ConfigError("greedy evaluation needs a network")
    frame_stack = net.spec.frame_stack if net is not None else 1
    env = make_env(replace(env_cfg, seed=seed), frame_stack)
    if net is not None:
        was_training = net.training
        net.eval()
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & _MASK64, 0xEA1], dtype=np.uint64)))
    returns = []
    crashes = 0
    steps_total = 0
    speed_sum = 0.0
    for ep in range(n_episodes):
        obs = env.reset()
        done = False
        ep_return = 0.0
        step = 0
        while not done:
            if policy == "random":
                action = int(rng.integers(len(ACTIONS)))
            else:
                q = net.forward_q(obs, encoder_seed=_eval_encoder_seed(seed, ep, step))
                action = int(np.argmax(q.data.reshape(-1)))
            obs, reward, done, info = env.step(action)
            ep_return += reward
            speed_sum += info["ego_speed"]
            crashes += int(info["crashed"])
            steps_total += 1
            step += 1
        returns.append(ep_return)
    if net is not None and was_training:
        net.train()
    return EvalMetrics(
        avg_reward=float(np.mean(returns)),
        crash_frequency=crashes / steps_total,
        avg_speed=speed_sum / steps_total,
        episodes=n_episodes,
        decision_steps=steps_total,
    )


def evaluate_checkpoint(path, env_cfg: ScenarioConfig, n_episodes: int = 20,
                        seed: int = 0) -> EvalMetrics:
    net = build_from_checkpoint(load_checkpoint(path))
    return evaluate(net, env_cfg, n_episodes=n_episodes, seed=seed)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _fmt(value) -> str:
    return f"{float(value):.8g}"


@dataclass
class TrainResult:
    steps: int
    checkpoints: list = field(default_factory=list)
    metrics_csv: str = ""
    final_loss: float | None = None
    last_eval: EvalMetrics | None = None
    wall_seconds: float = 0.0
    losses_finite: bool = True


def train(cfg: TrainConfig, env_cfg: ScenarioConfig, net_spec: NetworkSpec,
          out_dir: str, eval_seed: int | None = None,
          progress=None) -> TrainResult:
    """Run the full training loop, writing checkpoints and a metrics CSV.

    The CSV has one row per training step with columns
    ``step,loss,epsilon,eval_avg_reward,eval_crash_freq,eval_avg_speed``;
    the eval columns are filled only on checkpoint steps.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.monotonic()

    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    init_seed, explore_seed, buffer_seed, enc_seed = (int(s) for s in seeds)

    env = make_env(env_cfg, net_spec.frame_stack)
    q_net = MMDQN(net_spec, init_seed=init_seed)
    target_net = MMDQN(net_spec, init_seed=init_seed)
    target_net.copy_from(q_net)
    target_net.eval()
    adam = Adam(dict(q_net.named_parameters()), lr=cfg.lr, beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    buffer = ReplayBuffer(cfg.buffer_capacity, seed=buffer_seed)
    explore_rng = np.random.Generator(
        np.random.Philox(key=np.array([explore_seed & _MASK64, 0xAC7], dtype=np.uint64)))
    enc_rng = np.random.Generator(
        np.random.Philox(key=np.array([enc_seed & _MASK64, 0xE2C], dtype=np.uint64)))

    result = TrainResult(steps=cfg.total_steps)
    csv_path = os.path.join(out_dir, "metrics.csv")
    result.metrics_csv = csv_path
    eval_seed = cfg.seed if eval_seed is None else eval_seed

    obs = env.reset()
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "epsilon",
                         "eval_avg_reward", "eval_crash_freq", "eval_avg_speed"])
        for step in range(cfg.total_steps):
            eps = epsilon_at(cfg, step)
            # The exploration branch never consumes the Q-values, so the
            # forward pass is skipped entirely while exploring.
            if explore_rng.random() < eps:
                action = int(explore_rng.integers(net_spec.n_actions))
            else:
                q_net.eval()
                q = q_net.forward_q(obs, encoder_seed=int(enc_rng.integers(2**63)))
                q_net.train()
                action = int(np.argmax(q.data.reshape(-1)))
            next_obs, reward, done, info = env.step(action)
            buffer.push(Transition(obs, action, reward, next_obs, bool(done)))
            obs = env.reset() if done else next_obs

            loss_str = ""
            if len(buffer) >= max(cfg.warmup, cfg.batch_size):
                batch = buffer.sample(cfg.batch_size)
                loss = td_loss(batch, q_net, target_net, cfg.gamma,
                               online_seed=int(enc_rng.integers(2**63)),
                               target_seed=int(enc_rng.integers(2**63)))
                adam.step()
                loss_val = loss.item()
                result.final_loss = loss_val
                if not np.isfinite(loss_val):
                    result.losses_finite = False
                loss_str = _fmt(loss_val)

            step_no = step + 1
            if step_no % cfg.target_update == 0:
                target_net.copy_from(q_net)

            eval_cols = ["", "", ""]
            if cfg.checkpoint_every and step_no % cfg.checkpoint_every == 0:
                ckpt_path = os.path.join(out_dir, f"ckpt_{step_no}.mmdqn")
                save_checkpoint(ckpt_path, q_net, step=step_no, seed=cfg.seed)
                result.checkpoints.append(ckpt_path)
                metrics = evaluate(q_net, env_cfg, n_episodes=cfg.eval_episodes,
                                   seed=eval_seed)
                result.last_eval = metrics
                eval_cols = [_fmt(metrics.avg_reward), _fmt(metrics.crash_frequency),
                             _fmt(metrics.avg_speed)]
            writer.writerow([step_no, loss_str, _fmt(eps)] + eval_cols)
            if progress is not None and step_no % 500 == 0:
                progress(step_no, cfg.total_steps, result.final_loss)

    if cfg.total_steps and (not cfg.checkpoint_every
                            or cfg.total_steps % cfg.checkpoint_every):
        ckpt_path = os.path.join(out_dir, f"ckpt_{cfg.total_steps}.mmdqn")
        save_checkpoint(ckpt_path, q_net, step=cfg.total_steps, seed=cfg.seed)
        result.checkpoints.append(ckpt_path)
    result.wall_seconds = time.monotonic() - t_start
    return result
