"""A small numpy actor-critic with exact gradients, GAE and the PPO update.

Everything runs in float64 so the analytic gradients can be checked against
finite differences.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoHyper:
    learning_rate: float = 3e-4
    n_steps: int = 50
    batch_size: int = 64
    n_epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantage: bool = True
    total_timesteps: int = 5_000_000
    n_envs: int = 128
    bootstrap_truncated: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "n_steps", "batch_size", "n_epochs", "max_grad_norm", "n_envs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip_range < 1:
            raise ValueError("clip_range must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.total_timesteps < 0 or self.ent_coef < 0 or self.vf_coef < 0:
            raise ValueError("total_timesteps and loss coefficients must be nonnegative")


# --------------------------------------------------------------------------- network

def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal(shape if shape[0] >= shape[1] else shape[::-1])
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


def init_params(obs_dim: int, act_dim: int, head: str, rng: np.random.Generator,
                hidden: tuple[int, ...] = (64, 64)) -> dict[str, np.ndarray]:
    if head not in ("gaussian", "bernoulli"):
        raise ValueError(f"unknown head {head!r}")
    out_dim = act_dim if head == "gaussian" else 1
    params: dict[str, np.ndarray] = {}
    for tower, out, gain in (("pi", out_dim, 0.01), ("vf", 1, 1.0)):
        sizes = (obs_dim, *hidden)
        for i in range(len(hidden)):
            params[f"{tower}.W{i}"] = _orthogonal(rng, (sizes[i], sizes[i + 1]), math.sqrt(2))
            params[f"{tower}.b{i}"] = np.zeros(sizes[i + 1])
        k = len(hidden)
        params[f"{tower}.W{k}"] = _orthogonal(rng, (sizes[-1], out), gain)
        params[f"{tower}.b{k}"] = np.zeros(out)
    if head == "gaussian":
        params["log_std"] = np.zeros(act_dim)
    return params


def _n_layers(params, tower):
    return sum(1 for k in params if k.startswith(tower + ".W"))


def _tower_forward(params, tower, x):
    acts = [x]
    h = x
    n = _n_layers(params, tower)
    for i in range(n - 1):
        h = np.tanh(h @ params[f"{tower}.W{i}"] + params[f"{tower}.b{i}"])
        acts.append(h)
    out = h @ params[f"{tower}.W{n - 1}"] + params[f"{tower}.b{n - 1}"]
    return out, acts


def _tower_backward(params, tower, acts, dout, grads):
    n = _n_layers(params, tower)
    g = dout
    for i in range(n - 1, -1, -1):
        grads[f"{tower}.W{i}"] = acts[i].T @ g
        grads[f"{tower}.b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[f"{tower}.W{i}"].T) * (1.0 - acts[i] ** 2)


def head_of(params) -> str:
    return "gaussian" if "log_std" in params else "bernoulli"


def policy_value_forward(params: dict[str, np.ndarray], obs: np.ndarray):
    """Distribution parameters and state values for a batch (or a single) observation.

    Gaussian head: ``((mean, log_std), value)``; Bernoulli head: ``(logit, value)``.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    x = obs[None, :] if single else obs
    if x.shape[1] != params["pi.W0"].shape[0]:
        raise ValueError(f"observation has dimension {x.shape[1]}, network expects {params['pi.W0'].shape[0]}")
    pi_out, _ = _tower_forward(params, "pi", x)
    v, _ = _tower_forward(params, "vf", x)
    v = v[:, 0]
    if head_of(params) == "gaussian":
        log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        dist = (pi_out[0], log_std) if single else (pi_out, log_std)
    else:
        dist = pi_out[0, 0] if single else pi_out[:, 0]
    return dist, (v[0] if single else v)


def log_prob_and_entropy(dist, action):
    """Log-density of ``action`` and the distribution's entropy.

    ``dist`` is ``(mean, log_std)`` for a diagonal Gaussian or a logit for a
    Bernoulli. Gaussian quantities sum over the last axis.
    """
    if isinstance(dist, tuple):
        mean, log_std = dist
        z = (np.asarray(action) - mean) * np.exp(-log_std)
        logp = (-0.5 * z**2 - log_std - _HALF_LOG_2PI).sum(axis=-1)
        ent = np.broadcast_to((log_std + 0.5 + _HALF_LOG_2PI).sum(axis=-1), np.shape(logp))
        return logp, np.array(ent)
    logit = np.asarray(dist, dtype=float)
    a = np.asarray(action, dtype=float)
    sp = np.logaddexp(0.0, logit)
    p = 1.0 / (1.0 + np.exp(-logit))
    return a * logit - sp, sp - logit * p


def sample_action(dist, rng: np.random.Generator):
    if isinstance(dist, tuple):
        mean, log_std = dist
        return mean + np.exp(log_std) * rng.standard_normal(np.shape(mean))
    p = 1.0 / (1.0 + np.exp(-np.asarray(dist)))
    return (rng.random(np.shape(p)) < p).astype(float)


# --------------------------------------------------------------------------- advantages

def gae_advantages(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Generalized advantage estimates and value targets.

    ``dones[t]`` marks that the episode ended after step t, so nothing is
    bootstrapped across it. Arrays are (T,) or (T, n_envs).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must share a shape")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    next_value = np.asarray(bootstrap_value, dtype=float) * np.ones_like(rewards[0])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


# --------------------------------------------------------------------------- loss

def ppo_loss_and_grad(params, obs, actions, old_logp, advantages, returns, hyper: PpoHyper,
                      normalize: bool | None = None):
    """Clipped PPO loss on one minibatch and its exact gradient."""
    normalize = hyper.normalize_advantage if normalize is None else normalize
    obs = np.asarray(obs, dtype=float)
    B = obs.shape[0]
    adv = np.asarray(advantages, dtype=float)
    if normalize and B > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    pi_out, pi_acts = _tower_forward(params, "pi", obs)
    v_out, vf_acts = _tower_forward(params, "vf", obs)
    values = v_out[:, 0]
    grads: dict[str, np.ndarray] = {}
    gaussian = head_of(params) == "gaussian"

    if gaussian:
        raw_ls = params["log_std"]
        log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = np.exp(-2 * log_std)
        diff = np.asarray(actions, dtype=float) - pi_out
        logp = (-0.5 * diff**2 * inv_var - log_std - _HALF_LOG_2PI).sum(axis=1)
        entropy = np.full(B, (log_std + 0.5 + _HALF_LOG_2PI).sum())
    else:
        logit = pi_out[:, 0]
        a = np.asarray(actions, dtype=float).reshape(B)
        sp = np.logaddexp(0.0, logit)
        p = 1.0 / (1.0 + np.exp(-logit))
        logp = a * logit - sp
        entropy = sp - logit * p

    ratio = np.exp(logp - np.asarray(old_logp, dtype=float))
    lo, hi = 1.0 - hyper.clip_range, 1.0 + hyper.clip_range
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()
    value_loss = ((returns - values) ** 2).mean()
    entropy_mean = entropy.mean()
    loss = policy_loss + hyper.vf_coef * value_loss - hyper.ent_coef * entropy_mean

    inside = (ratio >= lo) & (ratio <= hi)
    active = (surr1 <= surr2) | inside
    d_logp = -np.where(active, surr1, 0.0) / B
    d_ent = -hyper.ent_coef / B

    if gaussian:
        d_mean = (d_logp[:, None] * diff * inv_var)
        d_ls = (d_logp[:, None] * (diff**2 * inv_var - 1.0)).sum(axis=0) + d_ent * B
        d_ls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), d_ls, 0.0)
        grads["log_std"] = d_ls
        d_pi = d_mean
    else:
        d_logit = d_logp * (a - p) + d_ent * (-logit * p * (1 - p))
        d_pi = d_logit[:, None]
    _tower_backward(params, "pi", pi_acts, d_pi, grads)
    d_v = (hyper.vf_coef * 2.0 * (values - returns) / B)[:, None]
    _tower_backward(params, "vf", vf_acts, d_v, grads)

    with np.errstate(invalid="ignore"):
        stats = {
            "loss": float(loss),
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy_mean),
            "approx_kl": float(np.mean((ratio - 1) - np.log(ratio))),
            "clip_fraction": float(np.mean(np.abs(ratio - 1) > hyper.clip_range)),
        }
    return float(loss), grads, stats


# --------------------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------------------- rollouts

@dataclass
class RolloutBuffer:
    n_steps: int
    n_envs: int
    obs_dim: int
    act_dim: int
    obs: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    pos: int = 0

    def __post_init__(self):
        T, N = self.n_steps, self.n_envs
        self.obs = np.zeros((T, N, self.obs_dim))
        self.actions = np.zeros((T, N, self.act_dim))
        self.log_probs = np.zeros((T, N))
        self.rewards = np.zeros((T, N))
        self.values = np.zeros((T, N))
        self.dones = np.zeros((T, N))

    @property
    def full(self) -> bool:
        return self.pos == self.n_steps

    def add(self, obs, actions, log_probs, rewards, values, dones):
        t = self.pos
        self.obs[t] = obs
        self.actions[t] = np.asarray(actions).reshape(self.n_envs, self.act_dim)
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self.pos += 1

    def flat(self, advantages, returns):
        n = self.n_steps * self.n_envs
        return (self.obs.reshape(n, self.obs_dim), self.actions.reshape(n, self.act_dim),
                self.log_probs.reshape(n), advantages.reshape(n), returns.reshape(n))


def ppo_update(params, buffer: RolloutBuffer, hyper: PpoHyper, rng: np.random.Generator,
               bootstrap_value=0.0, optimizer: Adam | None = None):
    """Run ``n_epochs`` of minibatch PPO on a full buffer. Mutates and returns ``params``."""
    if not buffer.full:
        raise ValueError("rollout buffer is not full")
    optimizer = optimizer if optimizer is not None else Adam(params, hyper.learning_rate)
    adv, ret = gae_advantages(buffer.rewards, buffer.values, buffer.dones, bootstrap_value,
                              hyper.gamma, hyper.gae_lambda)
    obs, actions, old_logp, adv, ret = buffer.flat(adv, ret)
    gaussian = head_of(params) == "gaussian"
    if not gaussian:
        actions = actions[:, 0]
    n = obs.shape[0]
    history = []
    for _ in range(hyper.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads, stats = ppo_loss_and_grad(params, obs[idx], actions[idx], old_logp[idx],
                                                   adv[idx], ret[idx], hyper)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite PPO loss/gradient: {stats}")
            stats["grad_norm"] = clip_grad_norm(grads, hyper.max_grad_norm)
            optimizer.step(params, grads)
            history.append(stats)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    var_y = np.var(ret)
    summary["explained_variance"] = float(1 - np.var(ret - buffer.values.reshape(-1)) / var_y) if var_y > 0 else 0.0
    return params, summary


class VecEnv:
    """What ``ppo_train`` needs from an environment batch.

    ``reset()`` returns observations (n_envs, obs_dim). ``step(actions)``
    returns ``(obs, rewards, dones, truncated, final_obs)`` where finished
    environments are already reset and ``final_obs`` holds their last
    observation (rows for unfinished environments are ignored).
    """

    n_envs: int
    obs_dim: int
    act_dim: int

    def reset(self) -> np.ndarray: ...

    def step(self, actions: np.ndarray): ...


def ppo_train(params, env: VecEnv, hyper: PpoHyper, rng: np.random.Generator,
              callback: Callable[[dict], None] | None = None):
    """Collect rollouts from ``env`` and update ``params`` until the step budget is spent."""
    if hyper.total_timesteps == 0:
        return params, []
    optimizer = Adam(params, hyper.learning_rate)
    gaussian = head_of(params) == "gaussian"
    act_dim = env.act_dim if gaussian else 1
    obs = env.reset()
    done_steps = 0
    log = []
    ep_returns = np.zeros(env.n_envs)
    finished_returns: list[float] = []
    while done_steps < hyper.total_timesteps:
        buf = RolloutBuffer(hyper.n_steps, env.n_envs, env.obs_dim, act_dim)
        for _ in range(hyper.n_steps):
            dist, values = policy_value_forward(params, obs)
            actions = sample_action(dist, rng)
            logp, _ = log_prob_and_entropy(dist, actions)
            next_obs, rewards, dones, truncated, final_obs = env.step(actions)
            rewards = np.array(rewards, dtype=float)
            ep_returns += rewards
            if hyper.bootstrap_truncated and np.any(truncated):
                idx = np.flatnonzero(truncated)
                _, v_final = policy_value_forward(params, final_obs[idx])
                rewards[idx] += hyper.gamma * v_final
            for i in np.flatnonzero(dones):
                finished_returns.append(float(ep_returns[i]))
                ep_returns[i] = 0.0
            buf.add(obs, actions, logp, rewards, values, dones)
            obs = next_obs
        done_steps += hyper.n_steps * env.n_envs
        _, last_values = policy_value_forward(params, obs)
        params, stats = ppo_update(params, buf, hyper, rng, bootstrap_value=last_values, optimizer=optimizer)
        stats["timesteps"] = done_steps
        stats["mean_episode_return"] = float(np.mean(finished_returns)) if finished_returns else float("nan")
        finished_returns = []
        log.append(stats)
        if callback is not None:
            callback(stats)
    return params, log


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path_or_stream, params, meta: dict) -> None:
    """npz file with the parameters plus a JSON metadata record."""
    record = {"version": CHECKPOINT_VERSION, "head": head_of(params), **meta}
    arrays = {f"param:{k}": v for k, v in params.items()}
    np.savez(path_or_stream, __meta__=np.array(json.dumps(record, sort_keys=True)), **arrays)


def load_checkpoint(path_or_stream) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path_or_stream, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
    return params, meta
