"""Payment networks with hand-written reverse-mode gradients, plus Adam.

Two backbones share one interface (``forward_batch`` returning a cache,
``backward`` consuming it):

* ``PaymentNetwork``: per-cell embedding (a 1x1 convolution over the
  counterfactual tensor), per-player embedding over the whole bundle
  column, a shared two-layer MLP, sum-pooling over players and a rectified
  linear decoder. Nothing depends on the number of players.
* ``FlatNet``: a fixed-input two-hidden-layer MLP over flattened features.

Everything is float64.
"""
from __future__ import annotations

import json
import math

import numpy as np

__all__ = [
    "PaymentNetwork",
    "FlatNet",
    "AdamState",
    "adam_step",
    "init_network",
    "init_flat",
    "network_from_dict",
    "NonFiniteError",
    "dump_json",
]

HIDDEN = 64
FLAT_HIDDEN = 128


class NonFiniteError(FloatingPointError):
    pass


def _relu(x):
    return np.maximum(x, 0.0)


def _uniform_fan_in(rng, fan_in, shape):
    # variance 2 / fan_in
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Net:
    kind = ""
    param_names: tuple[str, ...] = ()

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.param_names}

    def __call__(self, x) -> float:
        y, _ = self.forward_batch(np.asarray(x)[None])
        return float(y[0])

    def forward(self, x) -> np.ndarray:
        return self.forward_batch(x)[0]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, **self._config())

    def zero_(self):
        for p in self.params.values():
            p[...] = 0.0
        return self

    def _config(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self._config(), "params": dict(self.params)}


class PaymentNetwork(_Net):
    """Counterfactual-tensor network; input batches have shape (B, K, P, C)."""

    kind = "cnn"
    param_names = ("w_cell", "b_cell", "w_col", "b_col", "w_mlp1", "b_mlp1",
                   "w_mlp2", "b_mlp2", "w_out", "b_out")

    def __init__(self, params, width: int, channels: int, hidden: int = HIDDEN):
        super().__init__(params)
        self.width, self.channels, self.hidden = width, channels, hidden
        expected = {
            "w_cell": (channels, hidden), "w_col": (width * hidden, hidden),
            "w_mlp1": (hidden, hidden), "w_mlp2": (hidden, hidden), "w_out": (hidden, 1),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def _config(self):
        return {"width": self.width, "channels": self.channels, "hidden": self.hidden}

    def forward_batch(self, x: np.ndarray):
        p = self.params
        if x.ndim != 4 or x.shape[1] != self.width or x.shape[3] != self.channels:
            raise ValueError(
                f"expected input (B, {self.width}, players, {self.channels}), got {x.shape}"
            )
        batch, width, players, _ = x.shape
        h = self.hidden
        # 2-d matmuls throughout; stacked matmuls over tiny matrices are slow
        a1 = _relu(x.reshape(-1, self.channels) @ p["w_cell"] + p["b_cell"])
        col = a1.reshape(batch, width, players, h).transpose(0, 2, 1, 3).reshape(-1, width * h)
        a2 = _relu(col @ p["w_col"] + p["b_col"])                 # (B*P, H)
        a3 = _relu(a2 @ p["w_mlp1"] + p["b_mlp1"])
        a4 = _relu(a3 @ p["w_mlp2"] + p["b_mlp2"])
        pooled = a4.reshape(batch, players, h).sum(axis=1)        # (B, H)
        z = pooled @ p["w_out"][:, 0] + p["b_out"][0]
        y = _relu(z)
        return y, (x.shape, x, a1, col, a2, a3, a4, pooled, z)

    def backward(self, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dy * y)`` with respect to every parameter."""
        p = self.params
        shape, x, a1, col, a2, a3, a4, pooled, z = cache
        batch, width, players, _ = shape
        h = self.hidden
        dz = dy * (z > 0)
        g = {"w_out": (pooled.T @ dz)[:, None], "b_out": np.array([dz.sum()])}
        d4 = np.repeat(dz[:, None] * p["w_out"][:, 0], players, axis=0) * (a4 > 0)
        g["w_mlp2"] = a3.T @ d4
        g["b_mlp2"] = d4.sum(axis=0)
        d3 = (d4 @ p["w_mlp2"].T) * (a3 > 0)
        g["w_mlp1"] = a2.T @ d3
        g["b_mlp1"] = d3.sum(axis=0)
        d2 = (d3 @ p["w_mlp1"].T) * (a2 > 0)
        g["w_col"] = col.T @ d2
        g["b_col"] = d2.sum(axis=0)
        dcol = d2 @ p["w_col"].T
        d1 = dcol.reshape(batch, players, width, h).transpose(0, 2, 1, 3).reshape(-1, h) * (a1 > 0)
        g["w_cell"] = x.reshape(-1, self.channels).T @ d1
        g["b_cell"] = d1.sum(axis=0)
        return g


class FlatNet(_Net):
    """Two hidden layers of 128 rectified units, rectified scalar output."""

    kind = "mlp"
    param_names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, params, inputs: int, num_players: int, hidden: int = FLAT_HIDDEN):
        super().__init__(params)
        self.inputs, self.num_players, self.hidden = inputs, num_players, hidden
        if self.params["w1"].shape != (inputs, hidden):
            raise ValueError("w1 shape does not match the configured input size")

    def _config(self):
        return {"inputs": self.inputs, "num_players": self.num_players, "hidden": self.hidden}

    def forward_batch(self, x: np.ndarray):
        p = self.params
        if x.ndim != 2 or x.shape[1] != self.inputs:
            raise ValueError(f"expected input (B, {self.inputs}), got {x.shape}")
        a1 = _relu(x @ p["w1"] + p["b1"])
        a2 = _relu(a1 @ p["w2"] + p["b2"])
        z = a2 @ p["w3"][:, 0] + p["b3"][0]
        return _relu(z), (x, a1, a2, z)

    def backward(self, cache, dy):
        p = self.params
        x, a1, a2, z = cache
        dz = dy * (z > 0)
        g = {"w3": (a2.T @ dz)[:, None], "b3": np.array([dz.sum()])}
        d2 = (dz[:, None] * p["w3"][:, 0]) * (a2 > 0)
        g["w2"] = a1.T @ d2
        g["b2"] = d2.sum(axis=0)
        d1 = (d2 @ p["w2"].T) * (a1 > 0)
        g["w1"] = x.T @ d1
        g["b1"] = d1.sum(axis=0)
        return g


def init_network(width: int, channels: int, seed: int, hidden: int = HIDDEN) -> PaymentNetwork:
    if width < 1 or channels < 1 or hidden < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    params = {
        "w_cell": _uniform_fan_in(rng, channels, (channels, hidden)),
        "b_cell": np.zeros(hidden),
        "w_col": _uniform_fan_in(rng, width * hidden, (width * hidden, hidden)),
        "b_col": np.zeros(hidden),
        "w_mlp1": _uniform_fan_in(rng, hidden, (hidden, hidden)),
        "b_mlp1": np.zeros(hidden),
        "w_mlp2": _uniform_fan_in(rng, hidden, (hidden, hidden)),
        "b_mlp2": np.zeros(hidden),
        # pooled features are >= 0, so a non-negative decoder starts active
        "w_out": np.abs(_uniform_fan_in(rng, hidden, (hidden, 1))),
        "b_out": np.zeros(1),
    }
    return PaymentNetwork(params, width, channels, hidden)


def init_flat(inputs: int, num_players: int, seed: int, hidden: int = FLAT_HIDDEN) -> FlatNet:
    rng = np.random.default_rng(seed)
    params = {
        "w1": _uniform_fan_in(rng, inputs, (inputs, hidden)),
        "b1": np.zeros(hidden),
        "w2": _uniform_fan_in(rng, hidden, (hidden, hidden)),
        "b2": np.zeros(hidden),
        "w3": np.abs(_uniform_fan_in(rng, hidden, (hidden, 1))),
        "b3": np.zeros(1),
    }
    return FlatNet(params, inputs, num_players, hidden)


def network_from_dict(d: dict):
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in d["params"].items()}
    cls = {"cnn": PaymentNetwork, "mlp": FlatNet}[d["kind"]]
    return cls(params, **d["config"])


class AdamState:
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def to_dict(self) -> dict:
        return {"step": self.step, "m": dict(self.m), "v": dict(self.v)}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        state = cls.__new__(cls)
        state.step = int(d["step"])
        state.m = {k: np.asarray(a["data"]).reshape(a["shape"]) for k, a in d["m"].items()}
        state.v = {k: np.asarray(a["data"]).reshape(a["shape"]) for k, a in d["v"].items()}
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k!r} at step {state.step + 1}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def dump_json(obj, indent: str = "") -> str:
    """JSON text with arrays as {"shape", "data"} and floats at 17 significant digits."""
    if isinstance(obj, np.ndarray):
        data = ",".join(_fmt(x) for x in obj.ravel())
        return f'{{"shape": {list(obj.shape)}, "data": [{data}]}}'
    if isinstance(obj, dict):
        inner = indent + "  "
        items = [f"{inner}{_quote(k)}: {dump_json(v, inner)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + indent + "}" if items else "{}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dump_json(v, indent) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise NonFiniteError("cannot serialize a non-finite value")
        return _fmt(obj)
    return _quote(str(obj))


def _quote(s: str) -> str:
    return json.dumps(s)
