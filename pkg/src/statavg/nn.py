"""Dense classifier with optional layer/batch normalization, trained by Adam.

Everything is plain numpy in binary64. Parameters are immutable values:
every operation returns new arrays and never writes into its inputs.

Hidden block orderings:

* ``none``:        dense -> ReLU
* ``layer_norm``:  dense -> ReLU -> LN
* ``batch_norm``:  dense -> BN -> ReLU
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import records

NORM_KINDS = ("none", "layer_norm", "batch_norm")

# Trainable arrays per group kind; everything else in a group is a buffer.
TRAINABLE = {
    "dense": ("weights", "bias"),
    "layer_norm": ("gain", "bias"),
    "batch_norm": ("gain", "bias"),
}
BUFFERS = {"dense": (), "layer_norm": (), "batch_norm": ("running_mean", "running_var")}


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (128, 128, 128)
    norm_kind: str = "none"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be at least 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "norm_kind": self.norm_kind,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "ln_eps": self.ln_eps,
        }


@dataclass(frozen=True)
class ParamGroup:
    kind: str
    arrays: dict

    def trainable(self) -> tuple[str, ...]:
        return TRAINABLE[self.kind]

    def names(self) -> tuple[str, ...]:
        return TRAINABLE[self.kind] + BUFFERS[self.kind]


@dataclass(frozen=True)
class ModelParams:
    spec: ModelSpec
    groups: tuple[ParamGroup, ...]

    def __iter__(self):
        return iter(self.groups)

    def map_trainable(self, fn) -> "ModelParams":
        """New params with ``fn(group_index, name, array)`` applied to every trainable array."""
        groups = []
        for gi, g in enumerate(self.groups):
            arrays = dict(g.arrays)
            for name in g.trainable():
                arrays[name] = fn(gi, name, g.arrays[name])
            groups.append(ParamGroup(g.kind, arrays))
        return ModelParams(self.spec, tuple(groups))

    def num_params(self, trainable_only: bool = True) -> int:
        total = 0
        for g in self.groups:
            names = g.trainable() if trainable_only else g.names()
            total += sum(g.arrays[n].size for n in names)
        return total


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(
        params.spec,
        tuple(ParamGroup(g.kind, {n: np.zeros_like(a) for n, a in g.arrays.items()}) for g in params.groups),
    )


def flatten(params: ModelParams) -> np.ndarray:
    """All arrays (trainable and buffers) concatenated in group order."""
    parts = [g.arrays[n].ravel() for g in params.groups for n in g.names()]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(template: ModelParams, vec: np.ndarray) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0
    groups = []
    for g in template.groups:
        arrays = {}
        for n in g.names():
            a = g.arrays[n]
            arrays[n] = vec[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        groups.append(ParamGroup(g.kind, arrays))
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, model needs {pos}")
    return ModelParams(template.spec, tuple(groups))


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform dense weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    widths = [spec.input_dim, *spec.hidden, spec.num_classes]
    groups = []
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        groups.append(ParamGroup("dense", {
            "weights": rng.uniform(-limit, limit, size=(fan_in, fan_out)),
            "bias": np.zeros(fan_out),
        }))
        if layer == len(widths) - 2:
            break
        if spec.norm_kind == "layer_norm":
            groups.append(ParamGroup("layer_norm", {"gain": np.ones(fan_out), "bias": np.zeros(fan_out)}))
        elif spec.norm_kind == "batch_norm":
            groups.append(ParamGroup("batch_norm", {
                "gain": np.ones(fan_out),
                "bias": np.zeros(fan_out),
                "running_mean": np.zeros(fan_out),
                "running_var": np.ones(fan_out),
            }))
    return ModelParams(spec, tuple(groups))


# ---------------------------------------------------------------------------
# Forward / backward


def _softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - lse
    return np.exp(log_p), log_p


def forward(params: ModelParams, x: np.ndarray, mode: str = "eval"):
    """Class probabilities for a batch.

    Returns ``(probs, cache)``. In ``eval`` mode ``cache`` is None and BN
    uses its running statistics. In ``train`` mode BN uses batch statistics
    and ``cache`` holds the activations for backprop plus the updated BN
    running statistics under ``cache["running"]``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected a batch of width {spec.input_dim}, got shape {x.shape}")
    train = mode == "train"
    if train and spec.norm_kind == "batch_norm" and x.shape[0] < 2:
        raise ValueError("batch normalization in train mode needs at least 2 samples")

    h = x
    steps = []
    running = {}
    for gi, g in enumerate(params.groups):
        a = g.arrays
        if g.kind == "dense":
            out = h @ a["weights"] + a["bias"]
            steps.append(("dense", gi, {"inp": h}))
            is_last = gi == len(params.groups) - 1
            if not is_last and spec.norm_kind != "batch_norm":
                steps.append(("relu", gi, {"mask": out > 0}))
                out = np.maximum(out, 0.0)
            h = out
        elif g.kind == "layer_norm":
            mu = h.mean(axis=1, keepdims=True)
            var = h.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + spec.ln_eps)
            xhat = (h - mu) * inv
            steps.append(("layer_norm", gi, {"xhat": xhat, "inv": inv}))
            h = xhat * a["gain"] + a["bias"]
        elif g.kind == "batch_norm":
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                m = spec.bn_momentum
                n = h.shape[0]
                running[gi] = {
                    "running_mean": (1 - m) * a["running_mean"] + m * mu,
                    # Running variance tracks the unbiased batch estimate.
                    "running_var": (1 - m) * a["running_var"] + m * var * n / (n - 1),
                }
            else:
                mu, var = a["running_mean"], a["running_var"]
            inv = 1.0 / np.sqrt(var + spec.bn_eps)
            xhat = (h - mu) * inv
            steps.append(("batch_norm", gi, {"xhat": xhat, "inv": inv}))
            out = xhat * a["gain"] + a["bias"]
            steps.append(("relu", gi, {"mask": out > 0}))
            h = np.maximum(out, 0.0)

    probs, log_p = _softmax(h)
    if not train:
        return probs, None
    return probs, {"steps": steps, "log_p": log_p, "running": running}


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x, "eval")[0]


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lowest class index."""
    return np.argmax(predict_proba(params, x), axis=1)


def _backprop(params: ModelParams, x: np.ndarray, y: np.ndarray, mode: str):
    if mode != "train":
        raise ValueError("loss_and_grads supports mode='train' only")
    probs, cache = forward(params, x, "train")
    y = np.asarray(y, dtype=np.int64)
    b = x.shape[0]
    if y.shape != (b,) or (b and (y.min() < 0 or y.max() >= params.spec.num_classes)):
        raise ValueError("labels must be valid class indices, one per row")
    loss = float(-cache["log_p"][np.arange(b), y].mean())

    grads = [dict.fromkeys(g.names()) for g in params.groups]
    d = probs.copy()
    d[np.arange(b), y] -= 1.0
    d /= b
    for kind, gi, c in reversed(cache["steps"]):
        a = params.groups[gi].arrays
        if kind == "relu":
            d = d * c["mask"]
        elif kind == "dense":
            grads[gi]["weights"] = c["inp"].T @ d
            grads[gi]["bias"] = d.sum(axis=0)
            d = d @ a["weights"].T
        else:
            xhat, inv = c["xhat"], c["inv"]
            grads[gi]["gain"] = (d * xhat).sum(axis=0)
            grads[gi]["bias"] = d.sum(axis=0)
            dxhat = d * a["gain"]
            axis = 1 if kind == "layer_norm" else 0
            n = xhat.shape[axis]
            d = inv / n * (
                n * dxhat
                - dxhat.sum(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True)
            )

    groups = []
    for gi, g in enumerate(params.groups):
        arrays = {}
        for n in g.names():
            arrays[n] = grads[gi][n] if n in g.trainable() else np.zeros_like(g.arrays[n])
        groups.append(ParamGroup(g.kind, arrays))
    return loss, ModelParams(params.spec, tuple(groups)), cache["running"]


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray, mode: str = "train"):
    """Mean softmax cross-entropy and its gradient (buffers get zero gradient)."""
    loss, grads, _ = _backprop(params, np.asarray(x, dtype=np.float64), y, mode)
    return loss, grads


def with_running_stats(params: ModelParams, running: dict) -> ModelParams:
    if not running:
        return params
    groups = list(params.groups)
    for gi, upd in running.items():
        groups[gi] = ParamGroup(groups[gi].kind, {**groups[gi].arrays, **upd})
    return ModelParams(params.spec, tuple(groups))


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParams, lr: float, **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0, lr, **kw)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every trainable array."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    g_groups = grads.groups
    m_new = state.m.map_trainable(lambda gi, n, m: b1 * m + (1 - b1) * g_groups[gi].arrays[n])
    v_new = state.v.map_trainable(lambda gi, n, v: b2 * v + (1 - b2) * g_groups[gi].arrays[n] ** 2)

    def update(gi, n, p):
        mhat = m_new.groups[gi].arrays[n] / c1
        vhat = v_new.groups[gi].arrays[n] / c2
        return p - state.lr * mhat / (np.sqrt(vhat) + state.eps)

    return params.map_trainable(update), replace(state, m=m_new, v=v_new, t=t)


def train_step(params: ModelParams, state: AdamState, x: np.ndarray, y: np.ndarray):
    """Forward, backward and one Adam step; BN running statistics are advanced."""
    loss, grads, running = _backprop(params, x, y, "train")
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss!r}")
    params, state = adam_step(params, grads, state)
    return with_running_stats(params, running), state, loss


def minibatches(n: int, batch_size: int, rng: np.random.Generator, drop_singleton: bool) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one row is dropped when asked."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if drop_singleton and batches and len(batches[-1]) == 1:
        batches.pop()
    return batches


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(params, x) == y))


# ---------------------------------------------------------------------------
# Serialization


def to_record(params: ModelParams, **extra) -> dict:
    return {
        "version": records.FORMAT_VERSION,
        "kind": "model_params",
        **extra,
        "spec": params.spec.to_dict(),
        "groups": [
            {
                "tag": g.kind,
                "arrays": [{"name": n, "shape": list(g.arrays[n].shape), "values": g.arrays[n].ravel()}
                           for n in g.names()],
            }
            for g in params.groups
        ],
    }


def from_record(rec: dict) -> ModelParams:
    try:
        s = rec["spec"]
        spec = ModelSpec(
            int(s["input_dim"]), int(s["num_classes"]), tuple(s["hidden"]), s["norm_kind"],
            float(s["bn_momentum"]), float(s["bn_eps"]), float(s["ln_eps"]),
        )
        groups = []
        for g in rec["groups"]:
            arrays = {a["name"]: np.array(a["values"], dtype=np.float64).reshape(a["shape"]) for a in g["arrays"]}
            if set(arrays) != set(TRAINABLE[g["tag"]] + BUFFERS[g["tag"]]):
                raise records.RecordError(f"group {g['tag']!r} has arrays {sorted(arrays)}")
            groups.append(ParamGroup(g["tag"], arrays))
    except (KeyError, TypeError, ValueError) as exc:
        raise records.RecordError(f"malformed model record: {exc}") from None
    params = ModelParams(spec, tuple(groups))
    ref = init_params(spec, 0)
    if [(g.kind, {n: a.shape for n, a in g.arrays.items()}) for g in ref.groups] != [
        (g.kind, {n: a.shape for n, a in g.arrays.items()}) for g in params.groups
    ]:
        raise records.RecordError("model record shapes do not match its spec")
    return params


def equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of every array."""
    if a.spec != b.spec or len(a.groups) != len(b.groups):
        return False
    return all(
        ga.kind == gb.kind and ga.arrays.keys() == gb.arrays.keys()
        and all(np.array_equal(ga.arrays[n], gb.arrays[n]) for n in ga.arrays)
        for ga, gb in zip(a.groups, b.groups)
    )

