"""Dense-tensor autodiff layer used by the renderer and the prior network.

This module pins the numeric contract the rest of the package relies on:

* tensors are dense, up to 4-D, float32 by default (float64 under
  ``precision("float64")``, used by the gradient-check tests);
* reductions (mean/sum) accumulate in float64 regardless of storage dtype;
* ``grid_sample`` uses transparent padding: bilinear taps outside the
  texture contribute zero, so an all-outside grid yields exactly zero and
  zero texture gradient;
* a graph can be backpropagated once; a second ``backward`` raises.

The kernels are delegated to torch (CPU); the surface and semantics here
are what the package tests against, with finite differences as the
independent oracle.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np
import torch

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_default_dtype = torch.float32

# torch leaf id -> Tensor wrapper, used to discover leaves during backward()
_leaf_registry: "weakref.WeakValueDictionary[int, Tensor]" = weakref.WeakValueDictionary()


def set_precision(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision '{name}'")
    _default_dtype = _DTYPES[name]


def get_precision() -> str:
    return "float32" if _default_dtype == torch.float32 else "float64"


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the storage dtype (e.g. 'float64' for grad checks)."""
    prev = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    """Wrapper around a torch tensor exposing the package's op surface."""

    __slots__ = ("_t", "_backward_done", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _raw: torch.Tensor | None = None):
        if _raw is not None:
            self._t = _raw
        else:
            if isinstance(data, Tensor):
                data = data._t.detach()
            t = torch.as_tensor(np.asarray(data), dtype=_default_dtype).clone()
            if t.dim() > 4:
                raise ValueError("tensors are limited to 4 dimensions")
            t.requires_grad_(requires_grad)
            self._t = t
        self._backward_done = False
        if self._t.requires_grad and self._t.is_leaf:
            _leaf_registry[id(self._t)] = self

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return tuple(self._t.shape)

    @property
    def requires_grad(self) -> bool:
        return self._t.requires_grad

    @property
    def is_leaf(self) -> bool:
        return self._t.is_leaf

    def numpy(self) -> np.ndarray:
        return self._t.detach().cpu().numpy()

    def item(self) -> float:
        return float(self._t.detach().item())

    def detach(self) -> "Tensor":
        return _wrap(self._t.detach())

    def set_data(self, values: np.ndarray) -> None:
        """Overwrite a leaf's storage in place (used by the optimizer)."""
        if not self._t.is_leaf:
            raise ValueError("set_data is only valid on leaf tensors")
        with torch.no_grad():
            src = torch.as_tensor(np.asarray(values), dtype=self._t.dtype)
            if src.shape != self._t.shape:
                raise ValueError(f"shape mismatch: {tuple(src.shape)} vs {self.shape}")
            self._t.copy_(src)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return _wrap(self._t[key])

    def reshape(self, *shape) -> "Tensor":
        return _wrap(self._t.reshape(*shape))

    def expand(self, *shape) -> "Tensor":
        return _wrap(self._t.expand(*shape))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(t: torch.Tensor) -> Tensor:
    return Tensor(None, _raw=t)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _wrap(torch.as_tensor(value, dtype=like._t.dtype))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a._t.shape, b._t.shape)
    except RuntimeError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape) -> Tensor:
    return _wrap(torch.zeros(shape, dtype=_default_dtype))


def ones(*shape) -> Tensor:
    return _wrap(torch.ones(shape, dtype=_default_dtype))


# ---------------------------------------------------------------------------
# Elementwise family
# ---------------------------------------------------------------------------

def add(x: Tensor, y) -> Tensor:
    y = _coerce(y, x)
    _check_broadcast(x, y, "add")
    return _wrap(x._t + y._t)


def sub(x: Tensor, y) -> Tensor:
    y = _coerce(y, x)
    _check_broadcast(x, y, "sub")
    return _wrap(x._t - y._t)


def mul(x: Tensor, y) -> Tensor:
    y = _coerce(y, x)
    _check_broadcast(x, y, "mul")
    return _wrap(x._t * y._t)


def sigmoid(x: Tensor) -> Tensor:
    return _wrap(torch.sigmoid(x._t))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return _wrap(torch.nn.functional.leaky_relu(x._t, negative_slope=slope))


def absolute(x: Tensor) -> Tensor:
    return _wrap(torch.abs(x._t))


def square(x: Tensor) -> Tensor:
    return _wrap(x._t * x._t)


def _reduce(x: Tensor, fn: str) -> Tensor:
    # Accumulate in float64, return in the storage dtype.
    acc = getattr(x._t.double(), fn)()
    return _wrap(acc.to(x._t.dtype))


def mean(x: Tensor) -> Tensor:
    return _reduce(x, "mean")


def tsum(x: Tensor) -> Tensor:
    return _reduce(x, "sum")


def concat(tensors, dim: int = 0) -> Tensor:
    return _wrap(torch.cat([t._t for t in tensors], dim=dim))


def stack(tensors, dim: int = 0) -> Tensor:
    return _wrap(torch.stack([t._t for t in tensors], dim=dim))


# ---------------------------------------------------------------------------
# Convolution / resampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation over (C, H, W) or batched (N, C, H, W) input.

    The kernel size must be odd; default padding keeps (stride 1) or
    halves (stride 2) the spatial resolution.
    """
    if kernel._t.dim() != 4:
        raise ValueError("kernel must be (C_out, C_in, k, k)")
    k = kernel._t.shape[-1]
    if k % 2 == 0 or kernel._t.shape[-2] != k:
        raise ValueError("kernel must be square with odd size")
    squeeze = x._t.dim() == 3
    xt = x._t.unsqueeze(0) if squeeze else x._t
    if xt.dim() != 4:
        raise ValueError("input must be (C, H, W) or (N, C, H, W)")
    if xt.shape[1] != kernel._t.shape[1]:
        raise ValueError(
            f"incompatible channels: input {xt.shape[1]} vs kernel {kernel._t.shape[1]}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = (k - 1) // 2 if padding is None else padding
    out = torch.nn.functional.conv2d(
        xt, kernel._t, bias=None if bias is None else bias._t,
        stride=stride, padding=pad)
    return _wrap(out.squeeze(0) if squeeze else out)


def resize_half(x: Tensor) -> Tensor:
    """2x2 average pooling; spatial dimensions must be even."""
    squeeze = x._t.dim() == 3
    xt = x._t.unsqueeze(0) if squeeze else x._t
    if xt.shape[-1] % 2 or xt.shape[-2] % 2:
        raise ValueError(f"resize_half needs even dimensions, got {x.shape}")
    out = torch.nn.functional.avg_pool2d(xt, 2)
    return _wrap(out.squeeze(0) if squeeze else out)


def resize_double(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling."""
    squeeze = x._t.dim() == 3
    xt = x._t.unsqueeze(0) if squeeze else x._t
    out = torch.nn.functional.interpolate(
        xt, scale_factor=2, mode="bilinear", align_corners=False)
    return _wrap(out.squeeze(0) if squeeze else out)


def grid_sample(texture: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of `texture` at normalized grid coordinates.

    texture: (C, H, W) or (N, C, H, W); grid: (H', W', 2) or (N, H', W', 2)
    with grid[..., 0] = x and grid[..., 1] = y in [-1, 1]. Taps outside the
    texture contribute zero (transparent padding). Differentiable w.r.t.
    both texture and grid.
    """
    squeeze = texture._t.dim() == 3
    tt = texture._t.unsqueeze(0) if squeeze else texture._t
    gt = grid._t.unsqueeze(0) if grid._t.dim() == 3 else grid._t
    if gt.shape[-1] != 2:
        raise ValueError("grid last dimension must be 2")
    out = torch.nn.functional.grid_sample(
        tt, gt, mode="bilinear", padding_mode="zeros", align_corners=False)
    return _wrap(out.squeeze(0) if squeeze else out)


_lattice_cache: dict = {}


def _canvas_lattice(h: int, w: int, dtype) -> torch.Tensor:
    """(H, W, 3) homogeneous pixel-center coordinates in normalized space."""
    key = (h, w, dtype)
    hit = _lattice_cache.get(key)
    if hit is None:
        ys = (2.0 * torch.arange(h, dtype=dtype) + 1.0) / h - 1.0
        xs = (2.0 * torch.arange(w, dtype=dtype) + 1.0) / w - 1.0
        v, u = torch.meshgrid(ys, xs, indexing="ij")
        hit = torch.stack([u, v, torch.ones_like(u)], dim=-1)
        _lattice_cache[key] = hit
    return hit


def affine_grid(affine: Tensor, canvas: tuple) -> Tensor:
    """Evaluate inverse-warp affines on the canvas pixel lattice.

    affine: (..., 6) rows (a11, a12, a13, a21, a22, a23); returns a
    (..., H, W, 2) sampling grid of normalized texture coordinates.
    """
    if affine._t.shape[-1] != 6:
        raise ValueError("affine last dimension must be 6")
    h, w = canvas
    lattice = _canvas_lattice(h, w, affine._t.dtype)  # (H, W, 3)
    mats = affine._t.reshape(*affine._t.shape[:-1], 2, 3)
    grid = torch.tensordot(lattice, mats, dims=([2], [-1]))  # (H, W, ..., 2)
    if mats.dim() == 3:  # batched (T, 2, 3)
        grid = grid.permute(2, 0, 1, 3)
    return _wrap(grid)


def identity_grid(h: int, w: int) -> Tensor:
    """The sampling grid that reproduces a texture at native resolution."""
    lattice = _canvas_lattice(h, w, _default_dtype)
    return _wrap(lattice[..., :2].clone())


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _discover_leaves(root: torch.Tensor) -> list:
    leaves, seen, stack_ = [], set(), [root.grad_fn]
    while stack_:
        fn = stack_.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            var = fn.variable
            wrapper = _leaf_registry.get(id(var))
            if wrapper is not None:
                leaves.append(wrapper)
        for nxt, _ in getattr(fn, "next_functions", ()):
            stack_.append(nxt)
    leaves.sort(key=lambda t: id(t._t))
    return leaves


def backward(loss: Tensor, leaves=None) -> dict:
    """Reverse-mode gradients of a scalar loss, keyed by leaf tensor.

    Leaves not on any path to the loss get zero gradients. A graph may be
    backpropagated exactly once; a second call raises RuntimeError.
    """
    if loss.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already called on this graph")
    loss._backward_done = True
    if leaves is None:
        leaves = _discover_leaves(loss._t)
    leaves = list(leaves)
    if not leaves:
        return {}
    for leaf in leaves:
        if not (leaf._t.is_leaf and leaf._t.requires_grad):
            raise ValueError("backward leaves must be requires_grad leaf tensors")
    grads = torch.autograd.grad(
        loss._t, [leaf._t for leaf in leaves], allow_unused=True,
        retain_graph=False)
    out = {}
    for leaf, g in zip(leaves, grads):
        if g is None:
            g = torch.zeros_like(leaf._t)
        out[leaf] = g.detach().cpu().numpy()
    return out


@contextlib.contextmanager
def no_grad():
    with torch.no_grad():
        yield
