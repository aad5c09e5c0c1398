"""Minimal fully-convolutional network: forward, exact gradients, Adam.

The architecture family is fixed: a stack of 3x3 same-padding convolutions
with ReLU on hidden layers and a linear output head. Gradients are analytic
and implemented for exactly this family; there is no autodiff graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import convops, tensorio
from .errors import ConfigError, FormatError, ShapeError

try:
    from . import _kernels
except ImportError:  # extension build failed; numpy engine handles everything
    _kernels = None

RELU = "relu"
LINEAR = "linear"

WS = convops.DEFAULT_WS


def reset_workspace() -> None:
    """Recycle pooled buffers; invalidates caches from prior forward passes."""
    WS.reset()


def fast_engine_available() -> bool:
    return _kernels is not None


def _use_fast(p, x) -> bool:
    return (
        _kernels is not None
        and p.dtype == np.float32
        and x.dtype == np.float32
    )

CKPT_MAGIC = b"SCIOCKPT"
CKPT_VERSION = 1


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray    # (out_ch,)
    activation: str

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass
class ConvNetParams:
    layers: list[ConvLayer]

    def __post_init__(self):
        prev = None
        for i, layer in enumerate(self.layers):
            if layer.kernel.ndim != 4 or layer.kernel.shape[2:] != (3, 3):
                raise ConfigError(f"layer {i}: kernel must be (out, in, 3, 3)")
            if layer.bias.shape != (layer.out_channels,):
                raise ConfigError(f"layer {i}: bias shape mismatch")
            if prev is not None and layer.in_channels != prev:
                raise ConfigError(
                    f"layer {i}: expects {layer.in_channels} channels, "
                    f"previous layer emits {prev}"
                )
            if layer.activation not in (RELU, LINEAR):
                raise ConfigError(f"layer {i}: unknown activation '{layer.activation}'")
            if not np.isfinite(layer.kernel).all() or not np.isfinite(layer.bias).all():
                raise ConfigError(f"layer {i}: non-finite weights")
            prev = layer.out_channels

    @property
    def input_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def dtype(self):
        return self.layers[0].kernel.dtype

    def copy(self) -> "ConvNetParams":
        return ConvNetParams(
            [ConvLayer(l.kernel.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


@dataclass(frozen=True)
class ArchConfig:
    """Channel plan of the network; hidden layers use ReLU, the head is linear."""

    input_channels: int
    hidden_channels: tuple[int, ...] = (32, 32, 16)
    output_channels: int = 1

    def __post_init__(self):
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if any(c < 1 for c in self.hidden_channels):
            raise ConfigError("hidden channel counts must be >= 1")

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.input_channels, *self.hidden_channels, self.output_channels)


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ConvNetParams:
    """He fan-in initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)
    chans = arch.channels
    layers = []
    for i in range(len(chans) - 1):
        c_in, c_out = chans[i], chans[i + 1]
        std = np.sqrt(2.0 / (c_in * 9))
        kernel = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
        bias = np.zeros(c_out, dtype=dtype)
        act = RELU if i < len(chans) - 2 else LINEAR
        layers.append(ConvLayer(kernel, bias, act))
    return ConvNetParams(layers)


def _check_input(p: ConvNetParams, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x)
    want = 4 if batched else 3
    if x.ndim != want:
        raise ShapeError(f"input must be {want}-D, got shape {x.shape}")
    if x.shape[0] != p.input_channels:
        raise ShapeError(
            f"network expects {p.input_channels} input channels, got {x.shape[0]}"
        )
    return x


def forward_batch(p: ConvNetParams, x: np.ndarray, keep_cache: bool = False):
    """Run the stack on a (C, N, H, W) batch.

    Returns ``(out, cache)``; ``out`` is (out_ch, N, H, W). With
    ``keep_cache`` the per-layer buffers needed by :func:`backward_batch` are
    retained; they stay valid until the next :func:`reset_workspace`. Without
    ``keep_cache`` the workspace is recycled immediately and the returned
    output is an independent array.
    """
    x = _check_input(p, x, batched=True)
    if x.dtype != p.dtype:
        x = x.astype(p.dtype)
    if not keep_cache:
        WS.reset()
    cache = [] if keep_cache else None
    cur = np.ascontiguousarray(x)
    fast = _use_fast(p, x)
    for layer in p.layers:
        if fast:
            c, n, h, w = cur.shape
            xp = WS.get_padded((c, n, h + 2, w + 2))
            xp[:, :, 1:-1, 1:-1] = cur
            out = WS.get((layer.out_channels, n, h, w))
            _kernels.fwd(xp, layer.kernel, layer.bias, out,
                         1 if layer.activation == RELU else 0)
            entry = (xp, out)
        else:
            out, cols = convops.conv_forward(cur, layer.kernel, layer.bias, ws=WS)
            if layer.activation == RELU:
                np.maximum(out, 0, out=out)
            entry = (cols, out)
        if keep_cache:
            cache.append(entry)
        cur = out
    if not keep_cache:
        cur = cur.copy()
    return cur, cache


def forward(p: ConvNetParams, x: np.ndarray) -> np.ndarray:
    """Single-sample forward: (C, H, W) in, (H, W) single-channel map out."""
    x = _check_input(p, x, batched=False)
    out, _ = forward_batch(p, x[:, None], keep_cache=False)
    if p.output_channels == 1:
        return out[0, 0]
    return out[:, 0]


def backward_batch(
    p: ConvNetParams,
    x: np.ndarray,
    cache,
    grad_out: np.ndarray,
    need_input_grads: bool = True,
):
    """Exact gradients of ``<grad_out, forward(p, x)>`` for a cached forward.

    Returns ``(param_grads, input_grads)`` where ``param_grads`` is a list of
    (dkernel, dbias) per layer and ``input_grads`` matches ``x``'s shape (or
    is None when not requested).
    """
    if grad_out.shape[0] != p.output_channels:
        raise ShapeError(
            f"grad_out has {grad_out.shape[0]} channels, network emits {p.output_channels}"
        )
    g = np.ascontiguousarray(grad_out, dtype=p.dtype)
    param_grads: list = [None] * len(p.layers)
    for i in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[i]
        first, act = cache[i]
        if layer.activation == RELU:
            masked = WS.get(g.shape, g.dtype)
            np.multiply(g, act > 0, out=masked)
            g = masked
        need_dx = need_input_grads or i > 0
        if first.ndim == 4:  # fast-engine cache: padded input
            dk = np.zeros_like(layer.kernel)
            db = np.zeros_like(layer.bias)
            _kernels.dw(first, g, dk, db)
            if need_dx:
                o, n, h, w = g.shape
                gp = WS.get_padded((o, n, h + 2, w + 2))
                gp[:, :, 1:-1, 1:-1] = g
                dx = WS.get((layer.in_channels, n, h, w))
                _kernels.dx(gp, layer.kernel, dx)
            else:
                dx = None
        else:
            dk, db, dx = convops.conv_backward(g, first, layer.kernel, need_dx, ws=WS)
        param_grads[i] = (dk, db)
        g = dx
    return param_grads, (g if need_input_grads else None)


def input_grad_batch(p: ConvNetParams, cache, grad_out: np.ndarray) -> np.ndarray:
    """Input gradient through a frozen network (no parameter gradients)."""
    g = np.ascontiguousarray(grad_out, dtype=p.dtype)
    for i in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[i]
        first, act = cache[i]
        if layer.activation == RELU:
            masked = WS.get(g.shape, g.dtype)
            np.multiply(g, act > 0, out=masked)
            g = masked
        if first.ndim == 4:
            o, n, h, w = g.shape
            gp = WS.get_padded((o, n, h + 2, w + 2))
            gp[:, :, 1:-1, 1:-1] = g
            dx = WS.get((layer.in_channels, n, h, w))
            _kernels.dx(gp, layer.kernel, dx)
            g = dx
        else:
            g = convops.conv_input_grad(g, layer.kernel, ws=WS)
    return g


def backward(p: ConvNetParams, x: np.ndarray, grad_out: np.ndarray):
    """Single-sample gradients of ``<grad_out, forward(p, x)>``."""
    x = _check_input(p, x, batched=False)
    if x.dtype != p.dtype:
        x = x.astype(p.dtype)
    WS.reset()
    xb = np.ascontiguousarray(x[:, None])
    _, cache = forward_batch(p, xb, keep_cache=True)
    go = np.asarray(grad_out, dtype=p.dtype)
    if p.output_channels == 1 and go.ndim == 2:
        go = go[None]
    if go.ndim != 3:
        raise ShapeError(f"grad_output must be (H, W) or (out_ch, H, W), got {go.shape}")
    grads, dx = backward_batch(p, xb, cache, go[:, None], need_input_grads=True)
    return grads, dx[:, 0].copy()


def zero_grads(p: ConvNetParams) -> list:
    return [
        (np.zeros_like(l.kernel), np.zeros_like(l.bias)) for l in p.layers
    ]


def accumulate_grads(total: list, part: list) -> None:
    for (tk, tb), (pk, pb) in zip(total, part):
        tk += pk
        tb += pb


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list  # per layer: (kernel moment, bias moment)
    v: list
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(p: ConvNetParams, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        m=zero_grads(p),
        v=zero_grads(p),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(p: ConvNetParams, s: AdamState, grads: list) -> None:
    """Standard Adam update with bias correction; mutates ``p`` and ``s``."""
    if len(grads) != len(p.layers):
        raise ShapeError(f"expected {len(p.layers)} gradient pairs, got {len(grads)}")
    s.step += 1
    b1, b2 = s.beta1, s.beta2
    c1 = 1.0 - b1**s.step
    c2 = 1.0 - b2**s.step
    for layer, (mk, mb), (vk, vb), (gk, gb) in zip(p.layers, s.m, s.v, grads):
        if gk.shape != layer.kernel.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shape mismatch")
        for param, m, v, g in ((layer.kernel, mk, vk, gk), (layer.bias, mb, vb, gb)):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            param -= (s.lr / c1) * m / (np.sqrt(v / c2) + s.eps)


# --- checkpointing ------------------------------------------------------------


def save_checkpoint(p: ConvNetParams, s: AdamState | None, path) -> None:
    """Write params (and optional optimizer state) to a checkpoint file."""
    desc = {
        "channels": [p.input_channels] + [l.out_channels for l in p.layers],
        "activations": [l.activation for l in p.layers],
        "dtype": "f8" if p.dtype == np.float64 else "f4",
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(bytes([CKPT_VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for layer in p.layers:
            tensorio.write_tensor_stream(f, layer.kernel)
            tensorio.write_tensor_stream(f, layer.bias)
        if s is None:
            f.write(b"\x00")
        else:
            f.write(b"\x01")
            f.write(struct.pack("<Q", s.step))
            f.write(struct.pack("<dddd", s.lr, s.beta1, s.beta2, s.eps))
            for (mk, mb), (vk, vb) in zip(s.m, s.v):
                for t in (mk, mb, vk, vb):
                    tensorio.write_tensor_stream(f, t)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(ConvNetParams, AdamState | None)``."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if len(magic) < 8 or magic != CKPT_MAGIC:
            raise FormatError("magic", f"expected {CKPT_MAGIC!r}, got {magic!r}")
        version = f.read(1)
        if len(version) < 1 or version[0] != CKPT_VERSION:
            raise FormatError("version", f"unsupported checkpoint version {version!r}")
        raw_len = f.read(4)
        if len(raw_len) < 4:
            raise FormatError("descriptor", "truncated length")
        (blob_len,) = struct.unpack("<I", raw_len)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("descriptor", "truncated block")
        try:
            desc = json.loads(blob.decode("utf-8"))
            channels = desc["channels"]
            activations = desc["activations"]
        except (ValueError, KeyError) as e:
            raise FormatError("descriptor", str(e)) from None
        layers = []
        for i in range(len(channels) - 1):
            kernel = tensorio.read_tensor_stream(f)
            bias = tensorio.read_tensor_stream(f)
            if kernel.shape != (channels[i + 1], channels[i], 3, 3):
                raise FormatError("descriptor", f"layer {i} kernel shape {kernel.shape}")
            layers.append(ConvLayer(kernel, bias, activations[i]))
        params = ConvNetParams(layers)
        flag = f.read(1)
        if len(flag) < 1:
            raise FormatError("optimizer flag", "truncated")
        state = None
        if flag == b"\x01":
            raw = f.read(8 + 32)
            if len(raw) < 40:
                raise FormatError("optimizer state", "truncated")
            (step,) = struct.unpack("<Q", raw[:8])
            lr, beta1, beta2, eps = struct.unpack("<dddd", raw[8:])
            m, v = [], []
            for _ in params.layers:
                mk = tensorio.read_tensor_stream(f)
                mb = tensorio.read_tensor_stream(f)
                vk = tensorio.read_tensor_stream(f)
                vb = tensorio.read_tensor_stream(f)
                m.append((mk, mb))
                v.append((vk, vb))
            state = AdamState(step=step, m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        elif flag != b"\x00":
            raise FormatError("optimizer flag", f"unexpected byte {flag!r}")
        return params, state
