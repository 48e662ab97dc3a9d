"""Differentiable building blocks, Adam, finite-difference checking and the
tensor container format.

Forward ops run on torch tensors and rely on autograd for their backward.
``grad_check`` compares those gradients against central finite differences,
and ``corrupt_backward`` deliberately breaks one op's backward so the checker
can be shown to catch it.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .formats import atomic_write_bytes

OPS = ("conv2d", "downsample2", "upsample2", "linear", "activation", "bilstm", "bce_loss", "mse_loss")

_corrupted: set[str] = set()


class NonFiniteError(FloatingPointError):
    pass


class _BrokenGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return 2.0 * grad + 0.1


@contextlib.contextmanager
def corrupt_backward(*names):
    """Within the block, the listed ops return wrong gradients (forward unchanged)."""
    unknown = set(names) - set(OPS)
    if unknown:
        raise ValueError(f"unknown op(s) {sorted(unknown)}; choose from {OPS}")
    added = set(names) - _corrupted
    _corrupted.update(added)
    try:
        yield
    finally:
        _corrupted.difference_update(added)


def _tap(name, out):
    if name in _corrupted and out.requires_grad:
        return _BrokenGrad.apply(out)
    return out


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------- ops


def conv2d(x, weight, bias=None):
    """3x3 (or any odd) 'same' cross-correlation with zero padding, stride 1.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``.
    """
    if weight.ndim != 4:
        raise ValueError(f"conv weight must be [C_out, C_in, kH, kW], got {tuple(weight.shape)}")
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same padding needs an odd kernel")
    if x.shape[-3] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[-3]}, kernel expects {weight.shape[1]}")
    if x.ndim == 4:  # NHWC is about twice as fast for these shapes on CPU
        x = x.contiguous(memory_format=torch.channels_last)
        weight = weight.contiguous(memory_format=torch.channels_last)
    out = F.conv2d(x, weight, bias, padding=(kh // 2, kw // 2))
    return _tap("conv2d", out)


def downsample2(x):
    """2x2 max-pool."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"downsample2 needs even H and W, got {tuple(x.shape[-2:])}")
    return _tap("downsample2", F.max_pool2d(x, 2))


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    if x.ndim == 3:
        return upsample2(x.unsqueeze(0)).squeeze(0)
    return _tap("upsample2", F.interpolate(x, scale_factor=2, mode="nearest"))


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects last dim {weight.shape[1]}, got {x.shape[-1]}")
    return _tap("linear", F.linear(x, weight, bias))


def activation(x, kind: str):
    if kind == "relu":
        out = torch.relu(x)
    elif kind == "sigmoid":
        out = torch.sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _tap("activation", out)


@lru_cache(maxsize=None)
def _lstm_shell(d_in: int, hidden: int, dtype: torch.dtype):
    shell = torch.nn.LSTM(d_in, hidden, batch_first=True, bidirectional=True).to(dtype)
    shell.requires_grad_(False)
    return shell


def bilstm(x, params: dict, hidden: int):
    """Bidirectional single-layer LSTM over ``[T, D]`` or ``[B, T, D]``.

    ``params`` holds ``w_ih``, ``w_hh`` and ``b`` for each direction (suffixes
    ``_fwd`` / ``_bwd``), torch gate order (input, forget, cell, output).
    Returns ``[.., T, 2 * hidden]`` with the forward direction first.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] == 0:
        raise ValueError("bilstm needs at least one time step")
    shell = _lstm_shell(x.shape[-1], hidden, x.dtype)
    zeros = torch.zeros(4 * hidden, dtype=x.dtype)
    weights = {
        "weight_ih_l0": params["w_ih_fwd"],
        "weight_hh_l0": params["w_hh_fwd"],
        "bias_ih_l0": params["b_fwd"],
        "bias_hh_l0": zeros,
        "weight_ih_l0_reverse": params["w_ih_bwd"],
        "weight_hh_l0_reverse": params["w_hh_bwd"],
        "bias_ih_l0_reverse": params["b_bwd"],
        "bias_hh_l0_reverse": zeros,
    }
    out, _ = functional_call(shell, weights, (x,))
    out = _tap("bilstm", out)
    return out.squeeze(0) if squeeze else out


BCE_CLAMP = 1e-7


def bce_loss(p, y):
    if p.shape != y.shape:
        raise ValueError(f"bce shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()
    return _tap("bce_loss", out)


def mse_loss(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _tap("mse_loss", ((a - b) ** 2).mean())


# --------------------------------------------------------------------------- parameters


@dataclass
class Param:
    value: torch.Tensor
    adam_m: torch.Tensor
    adam_v: torch.Tensor

    @property
    def grad(self):
        return self.value.grad


class ParameterStore:
    """Named trainable tensors with gradient and Adam moment slots."""

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self.entries: OrderedDict[str, Param] = OrderedDict()
        self.step_count = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone().requires_grad_(True)
        self.entries[name] = Param(t, torch.zeros_like(t, requires_grad=False), torch.zeros_like(t, requires_grad=False))
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, prefix: str = ""):
        return [n for n in self.entries if n.startswith(prefix)]

    def values(self):
        return [p.value for p in self.entries.values()]

    def n_params(self) -> int:
        return sum(p.value.numel() for p in self.entries.values())

    def zero_grad(self):
        for p in self.entries.values():
            if p.value.grad is not None:
                p.value.grad.zero_()

    def grads_are_zero(self) -> bool:
        return all(p.value.grad is None or not p.value.grad.any() for p in self.entries.values())

    def to(self, dtype) -> "ParameterStore":
        """Deep copy in another precision (values and optimiser state)."""
        out = ParameterStore(dtype)
        out.step_count = self.step_count
        for name, p in self.entries.items():
            out.add(name, p.value.detach().numpy())
            out.entries[name].adam_m = p.adam_m.to(dtype).clone()
            out.entries[name].adam_v = p.adam_v.to(dtype).clone()
        return out

    def state_arrays(self, include_optimizer: bool = True) -> "OrderedDict[str, np.ndarray]":
        arrays = OrderedDict()
        for name, p in self.entries.items():
            arrays[name] = p.value.detach().numpy()
        if include_optimizer:
            for name, p in self.entries.items():
                arrays[f"adam_m/{name}"] = p.adam_m.numpy()
                arrays[f"adam_v/{name}"] = p.adam_v.numpy()
        return arrays


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update of every entry, then zero the gradients."""
    missing = [n for n, p in store.entries.items() if p.value.grad is None]
    if missing:
        raise ValueError(f"missing gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    step = store.step_count + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    with torch.no_grad():
        for p in store.entries.values():
            g = p.value.grad
            p.adam_m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            p.adam_v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (p.adam_v / c2).sqrt_().add_(eps)
            p.value.addcdiv_(p.adam_m / c1, denom, value=-lr)
            g.zero_()
    store.step_count = step


# --------------------------------------------------------------------------- initialisation


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------- gradient check


def grad_check(f, inputs, n_coords: int = 8, h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between autograd and central differences.

    ``f(*inputs)`` must return a scalar tensor. For each input up to
    ``n_coords`` coordinates are sampled; the step at coordinate ``x`` is
    ``h * max(1, |x|)`` and the error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*inputs)
    if not torch.is_tensor(out) or out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            flat = x.view(-1)
            count = min(n_coords, flat.numel())
            for i in rng.choice(flat.numel(), size=count, replace=False):
                orig = flat[i].item()
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                up = f(*inputs).item()
                flat[i] = orig - step
                down = f(*inputs).item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                a = 0.0 if g is None else g.reshape(-1)[i].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# --------------------------------------------------------------------------- container


_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CorruptCheckpoint(ValueError):
    pass


def save_tensors(path, tensors, metadata=None) -> None:
    """Write the tensor container: u64 LE header size, JSON header, raw LE payload."""
    header, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "f64" if arr.dtype == np.float64 else "f32"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "byte_offset": offset}
        chunks.append(data)
        offset += len(data)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    atomic_write_bytes(path, struct.pack("<Q", len(raw)) + raw + b"".join(chunks))


def load_tensors(path):
    """Inverse of ``save_tensors``; returns ``(OrderedDict name -> array, metadata)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: file too short")
    (size,) = struct.unpack("<Q", blob[:8])
    if 8 + size > len(blob):
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: header runs past end of file")
    try:
        header = json.loads(blob[8 : 8 + size].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"corrupt checkpoint {path}: unreadable header") from exc
    metadata = dict(header.pop("__metadata__", {}))
    payload = memoryview(blob)[8 + size :]
    tensors = OrderedDict()
    for name, info in header.items():
        try:
            dtype = np.dtype(_DTYPES[info["dtype"]])
            shape = tuple(int(s) for s in info["shape"])
            start = int(info["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"corrupt checkpoint {path}: bad entry {name!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start < 0 or start + nbytes > len(payload):
            raise CorruptCheckpoint(f"corrupt checkpoint {path}: tensor {name!r} truncated")
        tensors[name] = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(shape).copy()
    return tensors, metadata
