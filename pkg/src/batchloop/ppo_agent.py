"""PPO-clip actor-critic written directly in numpy.

Both networks are ``n_state -> 100 -> 100 -> 1`` multilayer perceptrons with
tanh hidden units. The actor's head is squashed into the admissible flow range
``(0, 10)`` by ``5 (tanh(o) + 1)``; its standard deviation is a free,
state-independent parameter. Gradients are back-propagated by hand and applied
with Adam, one optimiser per network.

Parameters live in a flat ``dict[str, ndarray]`` (``actor.W0``, ``actor.b0``,
..., ``log_std``, ``critic.W0``, ...), which keeps the optimiser and the
checkpoint format trivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError

CHECKPOINT_FORMAT = "batchloop.ppo/1"
LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(5.0)
ACTION_SCALE = 5.0  # mean = ACTION_SCALE * (tanh(o) + 1) spans (0, 10)
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoHyperparams:
    critic_lr: float = 1e-4
    actor_lr: float = 5e-5
    epochs: int = 10
    gamma: float = 0.99
    entropy_weight: float = 0.02
    minibatch: int = 64
    horizon: int = 2048
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    hidden: tuple[int, ...] = (100, 100)
    init_log_std: float = 0.0
    update_mode: str = "batch"  # "batch": after every episode; "horizon": after >= horizon steps

    def validate(self):
        if not 0 < self.clip_eps < 1:
            raise DomainError("clip_eps must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise DomainError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise DomainError("gae_lambda must lie in [0, 1]")
        if self.critic_lr <= 0 or self.actor_lr <= 0:
            raise DomainError("learning rates must be positive")
        if self.epochs < 1 or self.minibatch < 1 or self.horizon < 1:
            raise DomainError("epochs, minibatch and horizon must be >= 1")
        if self.entropy_weight < 0:
            raise DomainError("entropy_weight must be >= 0")
        if self.update_mode not in ("batch", "horizon"):
            raise DomainError(f"unknown update_mode {self.update_mode!r}")


@dataclass
class Transition:
    state: np.ndarray  # normalised
    action: np.ndarray  # pre-clip sample
    log_prob_old: float
    reward: float
    value_old: float
    done: bool


# ------------------------------------------------------------------ networks


def _n_layers(params, prefix) -> int:
    return sum(1 for k in params if k.startswith(prefix + ".W"))


def init_mlp(rng, sizes, prefix) -> dict[str, np.ndarray]:
    """Weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, biases likewise."""
    out = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(n_in)
        out[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        out[f"{prefix}.b{i}"] = rng.uniform(-bound, bound, size=n_out)
    return out


def init_params(n_state: int, hp: PpoHyperparams = PpoHyperparams(), rng=None, n_u: int = 1):
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = (n_state, *hp.hidden)
    params = init_mlp(rng, (*sizes, n_u), "actor")
    params.update(init_mlp(rng, (*sizes, 1), "critic"))
    params["log_std"] = np.full(n_u, float(hp.init_log_std))
    return params


def mlp_forward(params, prefix, x):
    """Returns the linear head output and the hidden activations for backprop."""
    n = _n_layers(params, prefix)
    h = np.atleast_2d(np.asarray(x, dtype=float))
    acts = [h]
    for i in range(n):
        z = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        h = np.tanh(z) if i < n - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(params, prefix, acts, grad_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * output)`` with respect to the layer parameters."""
    n = _n_layers(params, prefix)
    grads = {}
    g = np.asarray(grad_out, dtype=float)
    for i in reversed(range(n)):
        grads[f"{prefix}.W{i}"] = acts[i].T @ g
        grads[f"{prefix}.b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[f"{prefix}.W{i}"].T) * (1.0 - acts[i] ** 2)
    return grads


def _log_std(params):
    return np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def policy_forward(params, states, return_cache=False):
    """Mean in ``(0, 10)`` and standard deviation of the Gaussian policy."""
    o, acts = mlp_forward(params, "actor", states)
    t = np.tanh(o)
    mean = ACTION_SCALE * (t + 1.0)
    std = np.exp(_log_std(params))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise NumericError("non-finite policy output")
    if return_cache:
        return mean, std, (acts, t)
    return mean, std


def actor_backward(params, cache, grad_mean):
    """Parameter gradients of ``sum(grad_mean * mean)`` through the squashing head."""
    acts, t = cache
    return mlp_backward(params, "actor", acts, grad_mean * ACTION_SCALE * (1.0 - t ** 2))


def value_forward(params, states) -> np.ndarray:
    v, _ = mlp_forward(params, "critic", states)
    return v[:, 0]


def gaussian_log_prob(action, mean, std) -> np.ndarray:
    z = (np.atleast_2d(action) - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI, axis=1)


def entropy(params) -> float:
    return float(np.sum(_log_std(params) + 0.5 * (_LOG_2PI + 1.0)))


def sample_action(params, state, rng):
    """Draw ``a ~ N(mean, std)``; returns ``(clipped action, raw sample, log_prob of raw sample)``."""
    mean, std = policy_forward(params, state)
    raw = mean[0] + std * rng.standard_normal(mean.shape[1])
    logp = float(gaussian_log_prob(raw, mean, std)[0])
    return np.clip(raw, 0.0, 2.0 * ACTION_SCALE), raw, logp


# ------------------------------------------------------------- advantages


def compute_advantages(rewards, values, dones, gamma, lam, last_value=0.0, normalize=True):
    """GAE(gamma, lambda) reset at episode boundaries.

    Returns ``(advantages, returns)`` with ``returns = raw advantages + values``;
    the advantages are standardised when ``normalize`` is set.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.size
    adv = np.zeros(n)
    gae = 0.0
    next_value = last_value
    for i in reversed(range(n)):
        nonterminal = 0.0 if dones[i] else 1.0
        delta = rewards[i] + gamma * next_value * nonterminal - values[i]
        gae = delta + gamma * lam * nonterminal * gae
        adv[i] = gae
        next_value = values[i]
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# ------------------------------------------------------------------- losses


def clipped_surrogate(ratio, adv, eps):
    """Per-sample ``min(ratio A, g(eps, A))`` with ``g = (1 + eps) A`` for ``A >= 0`` else ``(1 - eps) A``."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    g = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    return np.minimum(ratio * adv, g)


def ppo_loss_and_grads(params, states, actions, logp_old, adv, returns, hp: PpoHyperparams):
    """Actor loss (negative clipped surrogate minus entropy bonus), critic MSE and their gradients."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    B = states.shape[0]
    mean, std, cache = policy_forward(params, states, return_cache=True)
    logp = gaussian_log_prob(actions, mean, std)
    ratio = np.exp(logp - logp_old)
    surr = clipped_surrogate(ratio, adv, hp.clip_eps)
    ent = entropy(params)
    actor_loss = -float(surr.mean()) - hp.entropy_weight * ent

    # d(-mean surr)/d logp: only the unclipped branch carries gradient
    active = ratio * adv <= np.where(adv >= 0, (1.0 + hp.clip_eps) * adv, (1.0 - hp.clip_eps) * adv)
    dlogp = np.where(active, -ratio * adv / B, 0.0)[:, None]
    z = (actions - mean) / std
    grads = actor_backward(params, cache, dlogp * z / std)
    free = (params["log_std"] > LOG_STD_MIN) & (params["log_std"] < LOG_STD_MAX)
    grads["log_std"] = np.where(free, np.sum(dlogp * (z * z - 1.0), axis=0) - hp.entropy_weight, 0.0)

    v, acts = mlp_forward(params, "critic", states)
    err = v[:, 0] - returns
    critic_loss = float(np.mean(err ** 2))
    grads.update(mlp_backward(params, "critic", acts, (2.0 / B) * err[:, None]))

    info = {
        "actor_loss": actor_loss,
        "critic_loss": critic_loss,
        "entropy": ent,
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > hp.clip_eps)),
    }
    return actor_loss, critic_loss, grads, info


# ---------------------------------------------------------------- optimiser


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, keys):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in keys:
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
                "m": {k: a.tolist() for k, a in self.m.items()},
                "v": {k: a.tolist() for k, a in self.v.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["t"],
                   {k: np.array(a, dtype=float) for k, a in d["m"].items()},
                   {k: np.array(a, dtype=float) for k, a in d["v"].items()})


@dataclass
class RunningNorm:
    """Running mean and variance (parallel Welford update)."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.ones(n), 0.0)

    def update(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8)


def ppo_update(params, transitions, hp: PpoHyperparams, actor_opt: Adam, critic_opt: Adam, rng,
               last_value=0.0):
    """Several epochs of minibatch Adam on the clipped surrogate and the value loss.

    ``params`` is updated in place. On a non-finite loss the parameters are
    restored and :class:`NumericError` names the minibatch.
    """
    if not transitions:
        raise DomainError("no transitions to learn from")
    S = np.array([tr.state for tr in transitions], dtype=float)
    A = np.array([np.atleast_1d(tr.action) for tr in transitions], dtype=float)
    logp_old = np.array([tr.log_prob_old for tr in transitions])
    adv, ret = compute_advantages([tr.reward for tr in transitions], [tr.value_old for tr in transitions],
                                  [tr.done for tr in transitions], hp.gamma, hp.gae_lambda, last_value)
    snapshot = {k: v.copy() for k, v in params.items()}
    actor_keys = [k for k in params if k.startswith("actor.")] + ["log_std"]
    critic_keys = [k for k in params if k.startswith("critic.")]
    n = len(transitions)
    infos = []
    mb_index = 0
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.minibatch):
            idx = order[start:start + hp.minibatch]
            la, lc, grads, info = ppo_loss_and_grads(params, S[idx], A[idx], logp_old[idx], adv[idx], ret[idx], hp)
            if not (np.isfinite(la) and np.isfinite(lc)):
                params.clear()
                params.update(snapshot)
                raise NumericError(f"non-finite PPO loss in minibatch {mb_index}")
            actor_opt.step(params, grads, actor_keys)
            critic_opt.step(params, grads, critic_keys)
            infos.append(info)
            mb_index += 1
    return {k: float(np.mean([i[k] for i in infos])) for k in infos[0]} | {"n_minibatches": mb_index}


# -------------------------------------------------------------------- agent


class PpoAgent:
    """Policy, value function, optimisers, state normaliser and rollout buffer."""

    def __init__(self, n_state: int, hp: PpoHyperparams = PpoHyperparams(), seed: int = 0, n_u: int = 1):
        hp.validate()
        self.n_state, self.n_u, self.hp = n_state, n_u, hp
        self.rng = np.random.default_rng(seed)
        self.params = init_params(n_state, hp, self.rng, n_u)
        self.actor_opt = Adam(hp.actor_lr)
        self.critic_opt = Adam(hp.critic_lr)
        self.norm = RunningNorm.zeros(n_state)
        self.buffer: list[Transition] = []
        self.n_updates = 0

    def observe(self, raw_state, update_norm=True) -> np.ndarray:
        """Normalise a raw state, folding it into the running statistics first."""
        raw_state = np.asarray(raw_state, dtype=float)
        if not np.all(np.isfinite(raw_state)):
            raise NumericError(f"non-finite state {raw_state}")
        if update_norm:
            self.norm.update(raw_state)
        return self.norm(raw_state)

    def act(self, norm_state, deterministic=False):
        """Returns ``(executed action, raw sample, log_prob, value)``."""
        if deterministic:
            mean, std = policy_forward(self.params, norm_state)
            a = mean[0]
            return a.copy(), a.copy(), float(gaussian_log_prob(a, mean, std)[0]), self.value(norm_state)
        a, raw, logp = sample_action(self.params, norm_state, self.rng)
        return a, raw, logp, self.value(norm_state)

    def value(self, norm_state) -> float:
        return float(value_forward(self.params, norm_state)[0])

    def store(self, tr: Transition):
        self.buffer.append(tr)

    def ready(self) -> bool:
        if not self.buffer or not self.buffer[-1].done:
            return False
        return self.hp.update_mode == "batch" or len(self.buffer) >= self.hp.horizon

    def update(self) -> dict:
        info = ppo_update(self.params, self.buffer, self.hp, self.actor_opt, self.critic_opt, self.rng)
        self.buffer = []
        self.n_updates += 1
        return info

    # ------------------------------------------------------------ checkpoint

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "n_state": self.n_state,
            "n_u": self.n_u,
            "hyperparams": asdict(self.hp),
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self.params.items()},
            "actor_opt": self.actor_opt.to_dict(),
            "critic_opt": self.critic_opt.to_dict(),
            "norm": {"mean": self.norm.mean.tolist(), "var": self.norm.var.tolist(), "count": self.norm.count},
            "rng_state": self.rng.bit_generator.state,
            "n_updates": self.n_updates,
        }

    @classmethod
    def from_dict(cls, d) -> "PpoAgent":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise DomainError(f"unsupported checkpoint format {d.get('format')!r}")
        hp = dict(d["hyperparams"])
        hp["hidden"] = tuple(hp["hidden"])
        agent = cls(d["n_state"], PpoHyperparams(**hp), 0, d["n_u"])
        agent.params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        agent.actor_opt = Adam.from_dict(d["actor_opt"])
        agent.critic_opt = Adam.from_dict(d["critic_opt"])
        agent.norm = RunningNorm(np.array(d["norm"]["mean"]), np.array(d["norm"]["var"]), d["norm"]["count"])
        agent.rng.bit_generator.state = d["rng_state"]
        agent.n_updates = d["n_updates"]
        return agent

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PpoAgent":
        return cls.from_dict(json.loads(Path(path).read_text()))
