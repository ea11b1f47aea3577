"""ReLU MLPs with hand-written backprop, the tanh-squashed Gaussian policy
head, Adam, and the binary checkpoint format.

Layer ``k`` computes ``h @ W[k] + b[k]`` with ``W[k]`` of shape
``(fan_in, fan_out)`` stored row-major; hidden layers use ReLU and the last
layer is linear.  A policy network's output is ``[mean (A), log_std (A)]``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
LOG_2PI = math.log(2 * math.pi)


class Mlp:
    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        assert len(weights) == len(biases)
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, final_scale: float = 1.0, dtype=np.float32) -> "Mlp":
        """Orthogonal init (gain sqrt(2) on hidden layers), zero biases."""
        weights, biases = [], []
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
            q, r = np.linalg.qr(a)
            q = q * np.sign(np.diag(r))
            w = q if fan_in >= fan_out else q.T
            gain = final_scale if k == n_layers - 1 else math.sqrt(2.0)
            weights.append((gain * w).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match network input {self.sizes[0]}")
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0)
            cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients in :meth:`params` order for a loss with d(loss)/d(out) = ``grad_out``."""
        grads: list[np.ndarray] = []
        g = np.asarray(grad_out, dtype=self.dtype)
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = cache[k]
            flat_in = h_in.reshape(-1, h_in.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            grads.append(flat_g.sum(axis=0))
            grads.append(flat_in.T @ flat_g)
            if k > 0:
                g = (g @ self.weights[k].T) * (cache[k] > 0)
        grads.reverse()
        return grads


def init_policy(obs_dim: int, act_dim: int, hidden=(256, 256), rng=None, dtype=np.float32,
                mean_bias=None, log_std_bias: float = 0.0) -> Mlp:
    """Policy net; the output layer is scaled by 0.01 so initial actions sit near ``tanh(mean_bias)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    net = Mlp.init([obs_dim, *hidden, 2 * act_dim], rng, final_scale=0.01, dtype=dtype)
    if mean_bias is not None:
        net.biases[-1][:act_dim] = np.asarray(mean_bias, dtype=dtype)
    net.biases[-1][act_dim:] = log_std_bias
    return net


def init_value(obs_dim: int, hidden=(256, 256), rng=None, dtype=np.float32) -> Mlp:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Mlp.init([obs_dim, *hidden, 1], rng, final_scale=1.0, dtype=dtype)


def split_policy_output(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    act_dim = out.shape[-1] // 2
    mean = out[..., :act_dim]
    log_std = np.clip(out[..., act_dim:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def policy_forward(policy: Mlp, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return split_policy_output(policy(obs))


def value_forward(value: Mlp, priv_obs: np.ndarray) -> np.ndarray:
    return value(priv_obs)[..., 0]


@dataclass
class SquashedGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(action, pre_tanh, log_prob)``."""
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        u = self.mean + np.exp(self.log_std) * eps
        return np.tanh(u), u, self.log_prob(u)

    def gaussian_log_prob(self, u: np.ndarray) -> np.ndarray:
        z = (u - self.mean) * np.exp(-self.log_std)
        return np.sum(-0.5 * z**2 - self.log_std - 0.5 * LOG_2PI, axis=-1)

    def log_prob(self, u: np.ndarray) -> np.ndarray:
        """Density of ``tanh(u)`` including the change-of-variables term."""
        a = np.tanh(u)
        return self.gaussian_log_prob(u) - np.sum(np.log(1.0 - a**2 + TANH_EPS), axis=-1)

    def entropy(self) -> np.ndarray:
        """Pre-squash Gaussian entropy (the squashed one has no closed form)."""
        return np.sum(self.log_std + 0.5 * (1.0 + LOG_2PI), axis=-1)


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-5):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------ checkpoints

MAGIC = b"QPCKPT\x00\n"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as one little-endian blob after a JSON header.

    Layout: 8-byte magic, uint32 format version, uint32 header length,
    UTF-8 JSON header ``{"version", "meta", "arrays": [{name, dtype, shape,
    offset, nbytes}]}``, then the raw C-order data; offsets are relative to
    the end of the header.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header["meta"]


def mlp_arrays(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    out = {}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.W{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return out


def mlp_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> Mlp:
    weights, biases = [], []
    k = 0
    while f"{prefix}.W{k}" in arrays:
        weights.append(arrays[f"{prefix}.W{k}"].copy())
        biases.append(arrays[f"{prefix}.b{k}"].copy())
        k += 1
    if not weights:
        raise KeyError(f"no network named {prefix!r} in checkpoint")
    return Mlp(weights, biases)


def save_policy(path, policy: Mlp, meta: dict | None = None) -> None:
    save_arrays(path, mlp_arrays("policy", policy), meta)


def load_policy(path, prefix: str = "policy") -> Mlp:
    arrays, _ = load_arrays(path)
    return mlp_from_arrays(prefix, arrays)
