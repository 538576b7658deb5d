"""Small explicit-backprop network substrate on numpy arrays.

Images are NHWC. Every layer has a ``*_forward`` returning ``(out, cache)``
and a ``*_backward`` taking the upstream gradient and that cache. Chains of
layers are described by :class:`LayerSpec` lists and run with
:func:`chain_forward` / :func:`chain_backward`; the Q-network architectures
compose these chains with explicit merge nodes.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""


class StaleCacheError(RuntimeError):
    """A backward pass was given a cache from a different forward pass or parameter set."""


class TrainingDivergenceError(FloatingPointError):
    """Non-finite gradients, losses or targets."""


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | dense | relu | maxpool | mean_merge | concat
    channels: int = 0  # conv2d output channels
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None  # default: kernel // 2
    units: int = 0  # dense output units
    pool: int = 2
    init: str = "he"  # he | xavier

    KINDS = ("conv2d", "dense", "relu", "maxpool", "mean_merge", "concat")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel < 1 or self.channels < 1 or self.stride < 1):
            raise ValueError("conv2d needs kernel, channels, stride >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        """Shape of one example's output given one example's input shape (no batch axis)."""
        if self.kind == "conv2d":
            h, w, _ = in_shape
            return ((h + 2 * self.pad - self.kernel) // self.stride + 1,
                    (w + 2 * self.pad - self.kernel) // self.stride + 1, self.channels)
        if self.kind == "dense":
            return (self.units,)
        if self.kind == "maxpool":
            h, w, c = in_shape
            return (h // self.pool, w // self.pool, c)
        return tuple(in_shape)

    def param_shapes(self, in_shape: Sequence[int]) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv2d":
            return {"w": (self.kernel, self.kernel, in_shape[-1], self.channels), "b": (self.channels,)}
        if self.kind == "dense":
            return {"w": (int(np.prod(in_shape)), self.units), "b": (self.units,)}
        return {}


def chain_shapes(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> list[tuple[int, ...]]:
    shapes = [tuple(in_shape)]
    for spec in specs:
        shapes.append(spec.output_shape(shapes[-1]))
    return shapes


def init_chain(specs: Sequence[LayerSpec], in_shape: Sequence[int], rng: np.random.Generator,
               prefix: str, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform for conv and ReLU-feeding layers, Xavier-uniform otherwise; zero biases."""
    params: dict[str, np.ndarray] = {}
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        for name, pshape in spec.param_shapes(shape).items():
            key = f"{prefix}{i}.{name}"
            if name == "b":
                params[key] = np.zeros(pshape, dtype=dtype)
                continue
            fan_in = int(np.prod(pshape[:-1]))
            fan_out = pshape[-1] * (pshape[0] * pshape[1] if len(pshape) == 4 else 1)
            if spec.init == "he":
                limit = math.sqrt(6.0 / fan_in)
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[key] = rng.uniform(-limit, limit, size=pshape).astype(dtype)
        shape = spec.output_shape(shape)
    return params


def parameter_count(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> int:
    total, shape = 0, tuple(in_shape)
    for spec in specs:
        total += sum(int(np.prod(s)) for s in spec.param_shapes(shape).values())
        shape = spec.output_shape(shape)
    return total


# ---------------------------------------------------------------- primitive layers


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple[int, int]]:
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), (ho, wo)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    if x.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d expects (N, H, W, {w.shape[2]}) input, got {x.shape}")
    k = w.shape[0]
    cols, (ho, wo) = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(x.shape[0], ho, wo, w.shape[-1]), (cols, x.shape, stride, pad)


def conv2d_backward(dout: np.ndarray, cache, w: np.ndarray):
    cols, x_shape, stride, pad = cache
    n, h, wd, c = x_shape
    k, cout = w.shape[0], w.shape[-1]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += dcols[:, :, :, di, dj, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw, db


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects {w.shape[0]} input features, got {flat.shape[1]} from {x.shape}")
    return flat @ w + b, (flat, x.shape)


def dense_backward(dout: np.ndarray, cache, w: np.ndarray):
    flat, x_shape = cache
    return (dout @ w.T).reshape(x_shape), flat.T @ dout, dout.sum(axis=0)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def maxpool_forward(x: np.ndarray, size: int = 2):
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    win = x[:, :ho * size, :wo * size, :].reshape(n, ho, size, wo, size, c)
    out = win.max(axis=(2, 4))
    # First maximum in each window receives the gradient.
    flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    arg = flat.argmax(axis=-1)
    return out, (arg, x.shape, size)


def maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    arg, x_shape, size = cache
    n, h, w, c = x_shape
    ho, wo = h // size, w // size
    onehot = np.zeros((n, ho, wo, c, size * size), dtype=dout.dtype)
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    win = onehot.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :ho * size, :wo * size, :] = win.reshape(n, ho * size, wo * size, c)
    return dx


def mean_merge_forward(xs: Sequence[np.ndarray], weights: Optional[np.ndarray] = None):
    """Weighted mean of k same-shaped tensors; ``weights`` are the 0/1 view selections.

    With weights w the result is sum(w_i x_i) / sum(w_i).
    """
    k = len(xs)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or w.sum() <= 0:
        raise ValueError("mean_merge needs k nonnegative weights with a positive sum")
    dtype = next(x.dtype for c, x in zip(w, xs) if c != 0)
    coef = (w / w.sum()).astype(dtype)
    out = sum(c * x for c, x in zip(coef, xs) if c != 0)
    return out, coef


def mean_merge_backward(dout: np.ndarray, coef: np.ndarray) -> list[np.ndarray]:
    return [c * dout for c in coef]


def concat_forward(xs: Sequence[np.ndarray]):
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_backward(dout: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    return np.split(dout, np.cumsum(widths)[:-1], axis=-1)


# ---------------------------------------------------------------- chains


@dataclass
class ChainCache:
    prefix: str
    entries: list
    token: int


def chain_forward(specs: Sequence[LayerSpec], params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray):
    entries = []
    for i, spec in enumerate(specs):
        name = f"{prefix}{i}"
        try:
            if spec.kind == "conv2d":
                x, c = conv2d_forward(x, params[name + ".w"], params[name + ".b"], spec.stride, spec.pad)
            elif spec.kind == "dense":
                x, c = dense_forward(x, params[name + ".w"], params[name + ".b"])
            elif spec.kind == "relu":
                x, c = relu_forward(x)
            elif spec.kind == "maxpool":
                x, c = maxpool_forward(x, spec.pool)
            else:
                raise ValueError(f"{spec.kind} is a merge node and cannot appear inside a chain")
        except ShapeError as exc:
            raise ShapeError(f"layer {name} ({spec.kind}): {exc}") from None
        entries.append(c)
    return x, ChainCache(prefix, entries, id(params))


def chain_backward(specs: Sequence[LayerSpec], params: Mapping[str, np.ndarray], cache: ChainCache,
                   dout: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate parameter gradients into ``grads`` and return the input gradient."""
    if cache.token != id(params) or len(cache.entries) != len(specs):
        raise StaleCacheError(f"cache for {cache.prefix!r} does not belong to these parameters")
    for i in reversed(range(len(specs))):
        spec, c, name = specs[i], cache.entries[i], f"{cache.prefix}{i}"
        if spec.kind == "conv2d":
            dout, dw, db = conv2d_backward(dout, c, params[name + ".w"])
        elif spec.kind == "dense":
            dout, dw, db = dense_backward(dout, c, params[name + ".w"])
        elif spec.kind == "relu":
            dout = relu_backward(dout, c)
            continue
        else:
            dout = maxpool_backward(dout, c)
            continue
        _accumulate(grads, name + ".w", dw)
        _accumulate(grads, name + ".b", db)
    return dout


def _accumulate(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# ---------------------------------------------------------------- parameters


@dataclass
class QNetworkParams:
    arch: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, json.loads(json.dumps(self.meta)))

    def astype(self, dtype) -> "QNetworkParams":
        return QNetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, dict(self.meta))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def bitwise_equal(self, other: "QNetworkParams") -> bool:
        return (self.arch == other.arch and self.tensors.keys() == other.tensors.keys()
                and all(self.tensors[k].dtype == other.tensors[k].dtype
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors))


def sgd_step(params: QNetworkParams, grads: Mapping[str, np.ndarray], learning_rate: float,
             momentum: float = 0.0, velocity: Optional[dict[str, np.ndarray]] = None):
    """Heavy-ball momentum SGD; returns ``(new_params, new_velocity)`` without touching the inputs.

    v <- momentum * v + g;  w <- w - lr * v
    """
    velocity = velocity or {}
    new_t, new_v = {}, {}
    for key, w in params.tensors.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {key}")
        v = g.astype(w.dtype) if key not in velocity else momentum * velocity[key] + g
        v = v.astype(w.dtype, copy=False)
        new_v[key] = v
        new_t[key] = (w - learning_rate * v).astype(w.dtype, copy=False)
    return QNetworkParams(params.arch, new_t, params.meta), new_v


# ---------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"MVQCKPT\x00"
CKPT_VERSION = 1
_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_params(params: QNetworkParams, path: str | Path, extra: Optional[dict] = None,
                optimizer_state: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Layout: magic, version, arch tag, metadata JSON, layer table, raw little-endian weights.

    Optimizer state (momentum buffers) is appended as a second table when given.
    """
    meta = dict(params.meta)
    if extra:
        meta["extra"] = extra
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _write_str(buf, params.arch)
    _write_str(buf, json.dumps(meta, sort_keys=True))
    for table in (params.tensors, dict(optimizer_state or {})):
        buf.write(struct.pack("<I", len(table)))
        for name, t in table.items():
            _write_str(buf, name)
            buf.write(struct.pack("<BB", _DTYPES[t.dtype], t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for t in table.values():
            buf.write(np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[QNetworkParams, dict[str, np.ndarray]]:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(8) != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arch = _read_str(fh)
    meta = json.loads(_read_str(fh))
    tables = []
    for _ in range(2):
        (count,) = struct.unpack("<I", fh.read(4))
        layout = []
        for _ in range(count):
            name = _read_str(fh)
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            layout.append((name, _DTYPES_INV[code], shape))
        table = {}
        for name, dtype, shape in layout:
            nbytes = int(np.prod(shape)) * dtype.itemsize
            table[name] = np.frombuffer(fh.read(nbytes), dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        tables.append(table)
    return QNetworkParams(arch, tables[0], meta), tables[1]


def load_params(path: str | Path) -> QNetworkParams:
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------- gradient checking


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def finite_difference_check(loss: Callable[[], float], arrays: Mapping[str, np.ndarray],
                            analytic: Mapping[str, np.ndarray], rng: np.random.Generator,
                            coords_per_tensor: int = 6, step: float = 1e-5,
                            pattern: Optional[Callable[[], bytes]] = None) -> dict[str, float]:
    """Central differences on a random subset of coordinates of each array.

    ``loss`` must read the arrays in ``arrays`` (which are perturbed in place
    and restored). When ``pattern`` is given it should return the ReLU
    activation pattern; coordinates whose +/- perturbations straddle a kink
    are replaced by fresh draws. Returns the relative error per array name.
    """
    errors = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        order = rng.permutation(flat.size)
        ana, num = [], []
        for idx in order:
            if len(num) == min(coords_per_tensor, flat.size):
                break
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss()
            sig_up = pattern() if pattern else None
            flat[idx] = orig - step
            down = loss()
            sig_down = pattern() if pattern else None
            flat[idx] = orig
            if pattern and sig_up != sig_down:
                continue
            num.append((up - down) / (2 * step))
            ana.append(np.asarray(analytic[name]).reshape(-1)[idx])
        errors[name] = relative_error(np.array(ana), np.array(num))
    return errors




def layer_gradient_check(kind: str, seed: int = 0, coords_per_tensor: int = 8) -> dict[str, float]:
    """Finite-difference check of one layer kind on a random float64 input, loss sum(dy * y)."""
    rng = np.random.default_rng(seed)
    if kind in ("mean_merge", "concat"):
        if kind == "mean_merge":
            arrays = {f"x{i}": rng.normal(size=(3, 5)) for i in range(3)}
            w = np.array([1.0, 0.0, 1.0]) if seed % 2 else None

            def fwd():
                return mean_merge_forward(list(arrays.values()), w)

            def back(dy, aux):
                return dict(zip(arrays, mean_merge_backward(dy, aux)))
        else:
            arrays = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 4))}

            def fwd():
                return concat_forward(list(arrays.values()))

            def back(dy, aux):
                return dict(zip(arrays, concat_backward(dy, aux)))
        y, aux = fwd()
        dy = rng.normal(size=y.shape)
        return finite_difference_check(lambda: float((fwd()[0] * dy).sum()), arrays, back(dy, aux), rng,
                                       coords_per_tensor)

    spec = {"conv2d": LayerSpec("conv2d", channels=3, kernel=3, stride=2), "dense": LayerSpec("dense", units=4),
            "relu": LayerSpec("relu"), "maxpool": LayerSpec("maxpool")}[kind]
    in_shape = (7,) if kind == "dense" else (6, 6, 2)
    params = init_chain([spec], in_shape, rng, "", np.float64)
    for v in params.values():
        v += rng.normal(0, 0.1, v.shape)
    x = rng.normal(size=(2, *in_shape))
    y, cache = chain_forward([spec], params, "", x)
    dy = rng.normal(size=y.shape)
    grads: dict[str, np.ndarray] = {}
    grads["x"] = chain_backward([spec], params, cache, dy, grads)
    last = {}

    def loss():
        out, c = chain_forward([spec], params, "", x)
        entry = c.entries[0]
        last["pattern"] = (entry[0] if kind == "maxpool" else entry).tobytes() if kind in ("relu", "maxpool") else b""
        return float((out * dy).sum())

    return finite_difference_check(loss, {"x": x, **params}, grads, rng, coords_per_tensor, 1e-5,
                                   lambda: last["pattern"])
