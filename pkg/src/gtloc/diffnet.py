"""Small dense-network toolkit with hand-written gradients.

Only what the encoders need: stacks of affine layers with optional ReLU,
row-wise l2 normalization, temperature softmax, soft-target cross-entropy,
Adam and a cosine learning-rate schedule. Parameters are plain numpy arrays
kept in a :class:`ParamSet`; float32 is the working precision and float64
is used by the gradient checks.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataError, InvalidInputError, NumericError

CKPT_MAGIC = b"GTLC"
CKPT_VERSION = 1


class ParamSet:
    """Ordered mapping of parameter name to array, with a version counter.

    The version is bumped after every in-place update so that a forward
    cache can tell whether the weights it saw are still current.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, np.ndarray] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.tensors:
            raise InvalidInputError(f"duplicate parameter {name!r}", "diffnet")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self.tensors[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def bump(self):
        self.version += 1

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(dtype)
        for k, v in self.tensors.items():
            out.add(k, v.astype(dtype))
        return out

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite values in place from ``arrays`` (shapes must agree in size)."""
        for k, v in self.tensors.items():
            if k not in arrays:
                raise DataError(f"missing tensor {k!r}", "diffnet")
            src = np.asarray(arrays[k])
            if src.size != v.size:
                raise DataError(
                    f"tensor {k!r} has {src.size} values, expected {v.size}", "diffnet"
                )
            v[...] = src.reshape(v.shape)
        self.bump()


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearLayer:
    """Affine map ``y = x W^T + b`` with an optional ReLU.

    ``weight`` has shape ``(out, in)``. The arrays live in a ParamSet under
    ``<name>.weight`` and ``<name>.bias``.
    """

    name: str
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise InvalidInputError(f"unknown activation {self.activation!r}", "diffnet")

    @property
    def wname(self):
        return self.name + ".weight"

    @property
    def bname(self):
        return self.name + ".bias"

    def init(self, params: ParamSet, rng: np.random.Generator):
        # torch.nn.Linear default: U(-1/sqrt(in), 1/sqrt(in))
        bound = 1.0 / math.sqrt(self.in_dim)
        params.add(self.wname, rng.uniform(-bound, bound, (self.out_dim, self.in_dim)))
        params.add(self.bname, rng.uniform(-bound, bound, self.out_dim))


@dataclass
class MLPCache:
    mlp: "MLP"
    params: ParamSet
    version: int
    inputs: list = field(default_factory=list)
    masks: list = field(default_factory=list)


class MLP:
    """A chain of :class:`LinearLayer` with cached activations for backprop."""

    def __init__(self, layers: list[LinearLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidInputError(
                    f"layer {b.name!r} expects {b.in_dim} inputs but {a.name!r} emits {a.out_dim}",
                    "diffnet",
                )
        self.layers = list(layers)

    @classmethod
    def build(cls, name: str, dims: list[int], final_activation: str = "none") -> "MLP":
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            layers.append(LinearLayer(f"{name}.{i}", a, b, final_activation if last else "relu"))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def param_names(self) -> list[str]:
        out = []
        for layer in self.layers:
            out += [layer.wname, layer.bname]
        return out

    def init(self, params: ParamSet, rng: np.random.Generator):
        for layer in self.layers:
            layer.init(params, rng)

    def forward(self, params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, MLPCache]:
        cache = MLPCache(self, params, params.version)
        h = x
        for layer in self.layers:
            if h.ndim != 2 or h.shape[1] != layer.in_dim:
                raise InvalidInputError(
                    f"layer {layer.name!r} expects (*, {layer.in_dim}) input, got {h.shape}",
                    "diffnet",
                )
            cache.inputs.append(h)
            h = h @ params[layer.wname].T + params[layer.bname]
            if layer.activation == "relu":
                mask = h > 0
                cache.masks.append(mask)
                h = h * mask
            else:
                cache.masks.append(None)
        return h, cache

    def __call__(self, params: ParamSet, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]

    def backward(
        self, cache: MLPCache, upstream: np.ndarray, need_input_grad: bool = True
    ) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
        if cache.mlp is not self or cache.version != cache.params.version:
            raise InvalidInputError("stale or mismatched forward cache", "diffnet")
        params = cache.params
        grads: dict[str, np.ndarray] = {}
        g = upstream
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            mask = cache.masks[i]
            if mask is not None:
                # relu'(0) = 0 falls out of the strict > mask
                g = g * mask
            grads[layer.wname] = g.T @ cache.inputs[i]
            grads[layer.bname] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ params[layer.wname]
            else:
                g = None
        return grads, g


def forward_mlp(layers: list[LinearLayer], params: ParamSet, x: np.ndarray):
    return MLP(layers).forward(params, x)


def backward_mlp(cache: MLPCache, upstream: np.ndarray):
    return cache.mlp.backward(cache, upstream)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; also returns the norms needed by :func:`l2_normalize_backward`."""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norms, eps), norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, g: np.ndarray, eps: float = 1e-12):
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / np.maximum(norms, eps)


# ---------------------------------------------------------------------------
# softmax and cross-entropy
# ---------------------------------------------------------------------------

def softmax_rows(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}", "diffnet")
    z = (m - np.max(m, axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of ``-sum_j q_j log softmax(z)_j``.

    Targets need not sum to one; the gradient w.r.t. the logits is
    ``(sum_j q_j) p - q`` per row, divided by the row count.
    """
    n = logits.shape[0]
    logp = log_softmax_rows(logits)
    loss = -float(np.sum(targets * logp)) / n
    p = np.exp(logp)
    dlogits = (np.sum(targets, axis=-1, keepdims=True) * p - targets) / n
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.t.values(), default=0)


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One Adam update over the parameters that received gradients.

    Weight decay is decoupled: ``p -= lr * wd * p`` alongside the Adam step.
    Parameters without an entry in ``grads`` are left untouched, moments and
    decay included.
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name!r}", "diffnet")
        if g.shape != params[name].shape:
            raise InvalidInputError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}",
                "diffnet",
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}", "diffnet")

    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        m, v = state.m[name], state.v[name]
        t = state.t[name] + 1
        state.t[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        update = mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
    params.bump()


def cosine_lr(step: int, total_steps: int, lr_max: float = 3e-5, lr_min: float = 3e-7) -> float:
    if total_steps <= 0:
        return lr_min
    # past the end the schedule holds at lr_min
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Largest absolute deviation scaled by the larger of the two max-magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write named 2-D float32 tensors to the little-endian checkpoint container.

    Layout: ``GTLC``, u32 version, u32 meta length, JSON meta, u32 count, then
    per tensor u32 name length, name, u32 rows, u32 cols, float32 data. A
    SHA-256 of everything before it closes the file.
    """
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        arr2 = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:])))
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<II", *arr2.shape))
        buf.write(np.ascontiguousarray(arr2, dtype="<f4").tobytes())
    body = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}", "diffnet") from exc
    if len(raw) < 48 or raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)", "diffnet")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch, file is corrupted", "diffnet")
    try:
        version, meta_len = struct.unpack_from("<II", body, 4)
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}", "diffnet")
        off = 12
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            nbytes = rows * cols * 4
            if off + nbytes > len(body):
                raise DataError(f"{path}: truncated tensor {name!r}", "diffnet")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float32)
            off += nbytes
        if off != len(body):
            raise DataError(f"{path}: trailing bytes after last tensor", "diffnet")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})", "diffnet") from exc
    return tensors, meta
