"""Two-layer tanh MLP with hand-written backprop, used as the IL learner,
the PPO actor (Gaussian head) and the PPO critic."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .sim import Action, SimConfig

FORMAT_VERSION = 1
LOG_STD_MIN = math.log(0.01)
LOG_STD_MAX = math.log(2.0)
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """x -> tanh(W1 x + b1) -> W2 h + b2.  Batches are rows."""

    param_names = ("W1", "b1", "W2", "b2")

    def __init__(self, input_dim: int, hidden_dim: int = 256, output_dim: int = 1,
                 rng: np.random.Generator | None = None, out_gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.W1 = _orthogonal(rng, hidden_dim, input_dim, math.sqrt(2.0))
        self.b1 = np.zeros(hidden_dim)
        self.W2 = _orthogonal(rng, output_dim, hidden_dim, out_gain)
        self.b2 = np.zeros(output_dim)

    @property
    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.param_names}

    def copy(self):
        return copy.deepcopy(self)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input of length {self.input_dim}, got shape {x.shape}")
        return x

    def raw(self, x):
        """Linear output and the cache needed by ``backward``."""
        x = self._check(x)
        h = np.tanh(x @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2, (x, h)

    def __call__(self, x):
        return self.raw(x)[0]

    def backward(self, cache, d_out) -> dict:
        x, h = cache
        x2 = np.atleast_2d(x)
        h2 = np.atleast_2d(h)
        d_out = np.atleast_2d(d_out)
        d_pre = (d_out @ self.W2) * (1.0 - h2 * h2)
        return {
            "W1": d_pre.T @ x2,
            "b1": d_pre.sum(axis=0),
            "W2": d_out.T @ h2,
            "b2": d_out.sum(axis=0),
        }


class MlpPolicy(Mlp):
    """Deterministic head ``tanh(raw)`` in the normalized action box, plus a
    state-independent ``log_std`` for the PPO Gaussian (pre-squash) head."""

    param_names = ("W1", "b1", "W2", "b2", "log_std")

    def __init__(self, input_dim: int, hidden_dim: int = 256, rng=None,
                 steer_max: float = 0.41, v_max: float = 10.0, log_std: float = math.log(0.3),
                 max_range: float = 30.0):
        super().__init__(input_dim, hidden_dim, 2, rng, out_gain=0.01)
        self.log_std = np.full(2, log_std)
        self.steer_max = steer_max
        self.v_max = v_max
        self.max_range = max_range

    @classmethod
    def for_sim(cls, cfg: SimConfig, hidden_dim: int = 256, seed: int = 0) -> "MlpPolicy":
        return cls(cfg.n_beams, hidden_dim, np.random.default_rng(seed), cfg.steer_max, cfg.v_max,
                   max_range=cfg.max_range)

    def forward(self, obs) -> np.ndarray:
        return np.tanh(self.raw(obs)[0])

    def to_action(self, a) -> Action:
        return Action(float(a[0]) * self.steer_max, (float(a[1]) + 1.0) * 0.5 * self.v_max)

    def to_normalized(self, action: Action) -> np.ndarray:
        return np.array([action.steer / self.steer_max, 2.0 * action.speed / self.v_max - 1.0])

    def act(self, observation) -> Action:
        """Action for a simulator observation (scan normalized by max_range)."""
        return self.to_action(self.forward(observation.scan / self.max_range))

    def distribution(self, obs):
        """(mean action, std) of the stochastic head."""
        return self.forward(obs), np.exp(self.log_std)

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def zero_grads(net: Mlp) -> dict:
    return {k: np.zeros_like(v) for k, v in net.params.items()}


def mse_loss_grad(policy: MlpPolicy, obs, targets):
    """Mean squared error over all action components in normalized space."""
    obs = np.atleast_2d(obs)
    targets = np.atleast_2d(targets)
    if len(obs) == 0:
        raise ValueError("empty batch")
    raw, cache = policy.raw(obs)
    a = np.tanh(raw)
    diff = a - targets
    loss = float(np.mean(diff * diff))
    d_raw = 2.0 * diff / diff.size * (1.0 - a * a)
    grads = policy.backward(cache, d_raw)
    grads["log_std"] = np.zeros_like(policy.log_std)
    return loss, grads


def squash_correction(actions) -> np.ndarray:
    a = np.clip(actions, -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
    return -np.sum(np.log1p(-a * a), axis=-1)


def gaussian_log_prob(policy: MlpPolicy, obs, actions, with_grad: bool = False):
    """Log density of squashed actions ``a = tanh(u)``, ``u ~ N(raw, std)``.

    Actions are in the normalized box and are pulled inside (-1, 1) by
    ``SQUASH_EPS`` before ``atanh``.  With ``with_grad`` also returns
    ``(d logp / d raw, d logp / d log_std)`` per sample and the forward cache.
    """
    a = np.clip(np.asarray(actions, dtype=np.float64), -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
    u = np.arctanh(a)
    raw, cache = policy.raw(obs)
    std = np.exp(policy.log_std)
    z = (u - raw) / std
    logp = np.sum(-0.5 * z * z - policy.log_std - HALF_LOG_2PI, axis=-1) + squash_correction(a)
    if not with_grad:
        return logp
    return logp, z / std, z * z - 1.0, cache


def entropy(policy: MlpPolicy) -> float:
    """Entropy of the pre-squash diagonal Gaussian."""
    return float(np.sum(policy.log_std + 0.5 + HALF_LOG_2PI))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        """In-place update of the arrays in ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(net: Mlp, grads: dict, opt: Adam):
    opt.step(net.params, grads)
    if isinstance(net, MlpPolicy):
        net.clamp_log_std()
    return net


# --------------------------------------------------------------------------
# checkpoints


def _net_to_dict(net: Mlp) -> dict:
    d = {
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "output_dim": net.output_dim,
    }
    for k in Mlp.param_names:
        d[k] = getattr(net, k).ravel().tolist()
    return d


def _fill_net(net: Mlp, d: dict, where: str):
    for k in Mlp.param_names:
        target = getattr(net, k)
        try:
            arr = np.array(d[k], dtype=np.float64)
        except KeyError:
            raise CheckpointError(f"{where}: missing field {k!r}") from None
        if arr.size != target.size:
            raise CheckpointError(f"{where}: field {k!r} has {arr.size} values, expected {target.size}")
        setattr(net, k, arr.reshape(target.shape))


def policy_to_dict(policy: MlpPolicy, value_net: Mlp | None = None, meta: dict | None = None) -> dict:
    d = {"format_version": FORMAT_VERSION, "kind": "mlp_policy"}
    d.update(_net_to_dict(policy))
    d["log_std"] = policy.log_std.tolist()
    d["steer_max"] = policy.steer_max
    d["v_max"] = policy.v_max
    d["max_range"] = policy.max_range
    if value_net is not None:
        d["value_net"] = _net_to_dict(value_net)
    if meta:
        d["meta"] = meta
    return d


def save_policy(policy: MlpPolicy, path, value_net: Mlp | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(policy_to_dict(policy, value_net, meta)))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Returns ``(policy, value_net or None, meta)``."""
    text = Path(path).read_bytes().decode("utf-8", errors="replace")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt checkpoint at byte offset {e.pos}: {e.msg}") from None
    if not isinstance(d, dict):
        raise CheckpointError(f"{path}: checkpoint root must be an object")
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {d.get('format_version')!r}")
    try:
        policy = MlpPolicy(int(d["input_dim"]), int(d["hidden_dim"]),
                           steer_max=float(d["steer_max"]), v_max=float(d["v_max"]),
                           max_range=float(d.get("max_range", 30.0)))
        if int(d["output_dim"]) != 2:
            raise CheckpointError(f"{path}: policy output_dim must be 2")
        policy.log_std = np.array(d["log_std"], dtype=np.float64).reshape(2)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad header field: {e}") from None
    _fill_net(policy, d, str(path))
    value_net = None
    if "value_net" in d:
        v = d["value_net"]
        value_net = Mlp(int(v["input_dim"]), int(v["hidden_dim"]), int(v["output_dim"]))
        _fill_net(value_net, v, f"{path} [value_net]")
    return policy, value_net, d.get("meta", {})


def load_policy(path) -> MlpPolicy:
    return load_checkpoint(path)[0]
