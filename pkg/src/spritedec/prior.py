"""Shared convolutional texture prior mapping per-sprite codes to textures.

Encoder-decoder with skip concatenation (3 down / 3 up levels by default,
base 32 channels, leaky-relu activations, final 1x1 convolution) plus a
code passthrough: the pre-sigmoid output is ``gain * (z - 0.5)`` plus the
convolutional head, so a freshly initialized prior reproduces its input
code almost exactly. One parameter set serves every sprite's code.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg

TEXTURE_CHANNELS = 4


@dataclass(frozen=True)
class PriorArch:
    levels: int = 3
    base_channels: int = 32
    kernel: int = 3
    leaky_slope: float = 0.2
    passthrough_gain: float = 8.0

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")


def _layer_specs(arch: PriorArch):
    """(name, out_channels, in_channels, kernel) in parameter order."""
    enc = [arch.base_channels * (2 ** i) for i in range(arch.levels)]
    dec = [max(arch.base_channels, c // 2) for c in enc]
    specs = []
    prev = TEXTURE_CHANNELS
    for i, ch in enumerate(enc):
        specs.append((f"enc{i}", ch, prev, arch.kernel))
        prev = ch
    specs.append(("bottleneck", enc[-1], enc[-1], arch.kernel))
    prev = enc[-1]
    for i in reversed(range(arch.levels)):
        specs.append((f"dec{i}", dec[i], prev + enc[i], arch.kernel))
        prev = dec[i]
    specs.append(("head", TEXTURE_CHANNELS, dec[0], 1))
    return specs


def param_count(arch: PriorArch) -> int:
    return sum(co * ci * k * k + co for _, co, ci, k in _layer_specs(arch))


@dataclass
class PriorParams:
    """Shared prior weights; `tensors` maps layer name to weight/bias leaves."""

    arch: PriorArch
    tensors: dict = field(default_factory=dict)

    def leaves(self):
        return [self.tensors[name] for name in sorted(self.tensors)]

    def count(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.tensors.values())


def init_prior(seed: int, arch: PriorArch = PriorArch()) -> PriorParams:
    """Seeded uniform fan-in-scaled initialization of all layers."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = PriorParams(arch=arch)
    for name, co, ci, k in _layer_specs(arch):
        bound = 1.0 / np.sqrt(ci * k * k)
        w = rng.uniform(-bound, bound, size=(co, ci, k, k))
        b = rng.uniform(-bound, bound, size=(co,))
        params.tensors[f"{name}.w"] = tg.tensor(w, requires_grad=True)
        params.tensors[f"{name}.b"] = tg.tensor(b, requires_grad=True)
    return params


def _check_spatial(arch: PriorArch, shape) -> None:
    h, w = shape[-2], shape[-1]
    div = 2 ** arch.levels
    if h % div or w % div:
        raise ValueError(
            f"code spatial size {h}x{w} must be divisible by {div} "
            f"(levels={arch.levels})")


def forward_batch(params: PriorParams, codes: tg.Tensor) -> tg.Tensor:
    """Map a (K, 4, H, W) code batch to (K, 4, H, W) textures in (0, 1)."""
    arch = params.arch
    _check_spatial(arch, codes.shape)
    p = params.tensors

    def conv(name, x):
        return tg.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])

    act = lambda x: tg.leaky_relu(x, arch.leaky_slope)
    skips = []
    x = codes
    for i in range(arch.levels):
        feat = act(conv(f"enc{i}", x))
        skips.append(feat)
        x = tg.resize_half(feat)
    x = act(conv("bottleneck", x))
    for i in reversed(range(arch.levels)):
        x = tg.concat([tg.resize_double(x), skips[i]], dim=1)
        x = act(conv(f"dec{i}", x))
    head = conv("head", x)
    passthrough = (codes - 0.5) * arch.passthrough_gain
    return tg.sigmoid(head + passthrough)


def texture_forward(params: PriorParams, code: tg.Tensor) -> tg.Tensor:
    """Single-code forward: (4, H, W) -> (4, H, W)."""
    out = forward_batch(params, code.reshape(1, *code.shape))
    return out[0]


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian uint64 header length, JSON header
# (arch + tensor shapes in order), float32 payload.
# ---------------------------------------------------------------------------

def save_prior(params: PriorParams, path) -> Path:
    path = Path(path)
    names = sorted(params.tensors)
    header = {
        "arch": {
            "levels": params.arch.levels,
            "base_channels": params.arch.base_channels,
            "kernel": params.arch.kernel,
            "leaky_slope": params.arch.leaky_slope,
            "passthrough_gain": params.arch.passthrough_gain,
        },
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(
                params.tensors[n].numpy(), dtype="<f4").tobytes())
    return path


def load_prior(path) -> PriorParams:
    path = Path(path)
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arch = PriorArch(**header["arch"])
        params = PriorParams(arch=arch)
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            params.tensors[entry["name"]] = tg.tensor(
                data.astype(np.float64), requires_grad=True)
    return params
