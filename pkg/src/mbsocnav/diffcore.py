"""Differentiable building blocks for the transition model and the actor-critic.

Tensors, recording and reverse-mode gradients come from torch; this module
pins down the op set the two networks use, their initialisation, shape
contracts, a deterministic Adam, named parameter sets, the bilinear warp
shared with :mod:`mbsocnav.obsmap`, an independent finite-difference checker
and the single-file checkpoint format.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation, TrainingError

torch.use_deterministic_algorithms(True)

relu = torch.relu
tanh = torch.tanh
sigmoid = torch.sigmoid


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    """Temporarily change the default dtype, e.g. ``float64`` for gradient checks."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def _expect_rank(name: str, x: torch.Tensor, rank: int):
    if x.dim() != rank:
        raise ContractViolation(f"{name}: expected rank-{rank} input, got shape {tuple(x.shape)}")


def _expect_channels(name: str, x: torch.Tensor, weight: torch.Tensor, axis: int):
    if x.shape[1] != weight.shape[axis]:
        raise ContractViolation(
            f"{name}: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}")


# -- functional ops ------------------------------------------------------------

def dense(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolation(
            f"dense: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    _expect_rank("conv2d", x, 4)
    _expect_channels("conv2d", x, weight, 1)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def deconv2d(x, weight, bias=None, stride=1, padding=0):
    _expect_rank("deconv2d", x, 4)
    _expect_channels("deconv2d", x, weight, 0)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    _expect_rank("conv3d", x, 5)
    _expect_channels("conv3d", x, weight, 1)
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def conv_recurrent_step(x, state, weight, bias):
    """One convolutional LSTM step; gates ordered input, forget, output, candidate."""
    h, c = state
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ContractViolation(
            f"conv_recurrent_step: input shape {tuple(x.shape)} incompatible with state shape {tuple(h.shape)}")
    pad = weight.shape[-1] // 2
    gates = conv2d(torch.cat([x, h], dim=1), weight, bias, padding=pad)
    i, f, o, g = gates.chunk(4, dim=1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def concat(tensors: Sequence[torch.Tensor], dim: int = 1):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, t.shape)) if k != dim % len(ref)):
            raise ContractViolation(f"concat: shapes {tuple(ref)} and {tuple(t.shape)} disagree off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def bilinear_warp(images: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Sample ``images`` (B, C, H, W) at fractional (row, col) locations (B, H', W').

    Samples outside the image read 0. Integer locations reproduce the source
    value exactly. Output is clamped to [0, 1].
    """
    _expect_rank("bilinear_warp", images, 4)
    if rows.shape != cols.shape or rows.dim() != 3 or rows.shape[0] != images.shape[0]:
        raise ContractViolation(
            f"bilinear_warp: image shape {tuple(images.shape)} incompatible with coordinate shape {tuple(rows.shape)}")
    b, ch, h, w = images.shape
    rows = rows.to(images.dtype)
    cols = cols.to(images.dtype)
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    fr = (rows - r0).unsqueeze(1)
    fc = (cols - c0).unsqueeze(1)
    r0 = r0.long()
    c0 = c0.long()
    flat = images.reshape(b, ch, h * w)

    def tap(r, c):
        ok = ((r >= 0) & (r < h) & (c >= 0) & (c < w)).unsqueeze(1)
        idx = (r.clamp(0, h - 1) * w + c.clamp(0, w - 1)).reshape(b, 1, -1).expand(b, ch, -1)
        val = torch.gather(flat, 2, idx).reshape(b, ch, *rows.shape[1:])
        return torch.where(ok, val, torch.zeros((), dtype=images.dtype))

    out = (tap(r0, c0) * (1 - fr) * (1 - fc) + tap(r0, c0 + 1) * (1 - fr) * fc
           + tap(r0 + 1, c0) * fr * (1 - fc) + tap(r0 + 1, c0 + 1) * fr * fc)
    return out.clamp(0.0, 1.0)


def warp_coordinates(ego: np.ndarray, height: int, width: int, resolution: float,
                     snap: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for each output cell of a grid whose robot moved by ``ego``.

    ``ego`` is (B, 3) of (x, y, theta): the new robot pose in the old frame.
    Coordinates within ``snap`` of an integer are rounded so whole-cell motions
    sample exactly.
    """
    ego = np.asarray(ego, dtype=np.float64).reshape(-1, 3)
    r = np.arange(height, dtype=np.float64)[:, None]
    c = np.arange(width, dtype=np.float64)[None, :]
    x_new = (height - 1 - r) * resolution
    y_new = (width // 2 - c) * resolution
    cos = np.cos(ego[:, 2])[:, None, None]
    sin = np.sin(ego[:, 2])[:, None, None]
    x_old = ego[:, 0, None, None] + cos * x_new - sin * y_new
    y_old = ego[:, 1, None, None] + sin * x_new + cos * y_new
    rows = (height - 1) - x_old / resolution
    cols = (width // 2) - y_old / resolution
    for a in (rows, cols):
        near = np.rint(a)
        np.copyto(a, near, where=np.abs(a - near) < snap)
    return rows, cols


# -- layers --------------------------------------------------------------------

def _uniform_(t: torch.Tensor, bound: float, gen: Optional[torch.Generator]):
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)
    return t


class Dense(nn.Module):
    def __init__(self, n_in, n_out, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter(_uniform_(torch.empty(n_out, n_in), bound, generator))
        self.bias = nn.Parameter(_uniform_(torch.empty(n_out), bound, generator))

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = nn.Parameter(_uniform_(torch.empty(c_out, c_in, kernel, kernel), bound, generator))
        self.bias = nn.Parameter(_uniform_(torch.empty(c_out), bound, generator))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Deconv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = nn.Parameter(_uniform_(torch.empty(c_in, c_out, kernel, kernel), bound, generator))
        self.bias = nn.Parameter(_uniform_(torch.empty(c_out), bound, generator))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return deconv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, generator=None):
        super().__init__()
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        bound = 1.0 / math.sqrt(c_in * k[0] * k[1] * k[2])
        self.weight = nn.Parameter(_uniform_(torch.empty(c_out, c_in, *k), bound, generator))
        self.bias = nn.Parameter(_uniform_(torch.empty(c_out), bound, generator))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvLSTMCell(nn.Module):
    """4-gate convolutional LSTM; the forget-gate bias starts at +1."""

    def __init__(self, c_in, hidden, kernel=3, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt((c_in + hidden) * kernel * kernel)
        self.hidden = hidden
        self.weight = nn.Parameter(_uniform_(torch.empty(4 * hidden, c_in + hidden, kernel, kernel),
                                             bound, generator))
        bias = torch.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.bias = nn.Parameter(bias)

    def initial_state(self, x):
        z = x.new_zeros(x.shape[0], self.hidden, *x.shape[2:])
        return z, z

    def forward(self, x, state=None):
        if state is None:
            state = self.initial_state(x)
        return conv_recurrent_step(x, state, self.weight, self.bias)


# -- parameters, gradients, optimiser ------------------------------------------

class ParamSet:
    """Named view over trainable tensors; the tensors are shared, not copied."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self._t = dict(tensors)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParamSet":
        return cls({prefix + n: p for n, p in module.named_parameters()})

    def __getitem__(self, name):
        return self._t[name]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def grads(self) -> dict[str, Optional[torch.Tensor]]:
        return {n: p.grad for n, p in self._t.items()}

    def zero_grad(self):
        for p in self._t.values():
            p.grad = None

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self._t.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self._t.items():
            h.update(n.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def copy_from(self, other: "ParamSet"):
        with torch.no_grad():
            for (n, p), (m, q) in zip(self._t.items(), other._t.items()):
                if p.shape != q.shape:
                    raise ContractViolation(f"copy_from: {n} {tuple(p.shape)} vs {m} {tuple(q.shape)}")
                p.copy_(q)

    def soft_update(self, online: "ParamSet", tau: float):
        """``self ← (1 - tau) * self + tau * online``, elementwise."""
        with torch.no_grad():
            for p, q in zip(self._t.values(), online._t.values()):
                p.copy_((1 - tau) * p + tau * q)


def backward(loss: torch.Tensor, wrt: Optional[ParamSet] = None):
    """Accumulate d(loss)/d(param) into ``.grad``; only for ``wrt`` when given."""
    if loss.numel() != 1:
        raise ContractViolation(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise ContractViolation("backward: nothing recorded for this loss")
    if wrt is None:
        loss.backward()
        return
    params = list(wrt._t.values())
    for p, g in zip(params, torch.autograd.grad(loss, params, allow_unused=True)):
        if g is not None:
            p.grad = g if p.grad is None else p.grad + g


class Adam:
    """Adam with bias correction; raises on non-finite gradients, zeroes them after stepping."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    def step(self):
        grads = self.params.grads()
        for n, g in grads.items():
            if g is not None and not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {n}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        with torch.no_grad():
            for n, p in self.params.items():
                g = grads[n]
                if g is None:
                    g = torch.zeros_like(p)
                self.m[n].mul_(b1).add_(g, alpha=1 - b1)
                self.v[n].mul_(b2).addcmul_(g, g, value=1 - b2)
                p.sub_(self.lr * (self.m[n] / c1) / ((self.v[n] / c2).sqrt() + self.eps))
        self.params.zero_grad()

    def state_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for n in self.m:
            out[f"{prefix}m/{n}"] = self.m[n]
            out[f"{prefix}v/{n}"] = self.v[n]
        return out

    def load_state_tensors(self, prefix: str, arrays: Mapping[str, np.ndarray], t: int):
        with torch.no_grad():
            for n in self.m:
                self.m[n].copy_(torch.from_numpy(arrays[f"{prefix}m/{n}"]))
                self.v[n].copy_(torch.from_numpy(arrays[f"{prefix}v/{n}"]))
        self.t = t


# -- finite differences --------------------------------------------------------

def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                            eps: float = 1e-3, max_coords: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None, floor: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences, coordinate-wise.

    ``fn`` recomputes a scalar from the current contents of ``tensors``.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and len(idx) > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(idx, size=max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                worst = max(worst, _rel_err(g.view(-1)[i].item(), (up - down) / (2 * eps), floor))
    return worst


def directional_fd_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                         eps: float = 1e-3, n_dirs: int = 4,
                         rng: Optional[np.random.Generator] = None, floor: float = 1e-9) -> float:
    """Worst relative error of ``∇f · u`` against ``(f(θ+εu) − f(θ−εu)) / 2ε`` over random unit ``u``."""
    rng = rng or np.random.default_rng(0)
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, analytic)]
    worst = 0.0
    with torch.no_grad():
        originals = [t.clone() for t in tensors]
        for _ in range(n_dirs):
            dirs = [torch.from_numpy(rng.standard_normal(t.shape)).to(t.dtype) for t in tensors]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            exact = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))
            for t, o, d in zip(tensors, originals, dirs):
                t.copy_(o + eps * d)
            up = fn().item()
            for t, o, d in zip(tensors, originals, dirs):
                t.copy_(o - eps * d)
            down = fn().item()
            for t, o in zip(tensors, originals):
                t.copy_(o)
            worst = max(worst, _rel_err(exact, (up - down) / (2 * eps), floor))
    return worst


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, tensors: Mapping[str, "torch.Tensor | np.ndarray"],
                    hyper: Optional[dict] = None, rng_state: Optional[dict] = None) -> None:
    """Write ``[u64 header length][JSON header][float32 LE arrays in header order]``."""
    arrays = {}
    for n, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arrays[n] = np.ascontiguousarray(a, dtype="<f4")
    header = {
        "format": "mbsocnav-ckpt-1",
        "names": list(arrays),
        "shapes": [list(a.shape) for a in arrays.values()],
        "hyper": hyper or {},
        "rng_state": rng_state,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(a.tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode())


def load_checkpoint(path, names: Optional[Iterable[str]] = None,
                    prefix: Optional[str] = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays (optionally only ``names`` or those starting with ``prefix``) and the header."""
    wanted = set(names) if names is not None else None
    out = {}
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            keep = (wanted is None or name in wanted) and (prefix is None or name.startswith(prefix))
            if keep:
                out[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()
            else:
                fh.seek(4 * count, io.SEEK_CUR)
    if wanted is not None and wanted - set(out):
        raise ContractViolation(f"checkpoint {path} lacks {sorted(wanted - set(out))}")
    return out, header


def load_into(module_params: ParamSet, arrays: Mapping[str, np.ndarray], prefix: str = ""):
    with torch.no_grad():
        for n, p in module_params.items():
            a = arrays[prefix + n]
            if tuple(a.shape) != tuple(p.shape):
                raise ContractViolation(f"{prefix + n}: checkpoint shape {a.shape} vs parameter {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a).to(p.dtype))
