"""Batched 3x3 same-padding convolution primitives.

Arrays are channel-major ``(C, N, H, W)`` so the im2col matrix and the GEMM
output are built without transposes. Large intermediates come from a
:class:`Workspace` arena: buffers are handed out in call order and recycled
wholesale at ``reset()``, which callers invoke once per training tile. That
keeps every buffer cache-resident and avoids allocator churn, which dominates
the runtime otherwise.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_TAPS = tuple((k // 3, k % 3) for k in range(9))


class Workspace:
    """Arena of reusable arrays, handed out per (shape, dtype) in call order.

    Arrays stay valid until the next :meth:`reset`; callers that retain
    buffers across resets must copy them first. Not thread-safe; use one
    workspace per process/thread.
    """

    def __init__(self):
        self._pools: dict = {}
        self._counts: dict = {}

    def get(self, shape, dtype=np.float32) -> np.ndarray:
        key = (tuple(shape), np.dtype(dtype).str)
        idx = self._counts.get(key, 0)
        pool = self._pools.setdefault(key, [])
        if idx >= len(pool):
            pool.append(np.empty(shape, dtype))
        self._counts[key] = idx + 1
        return pool[idx]

    def get_padded(self, shape, dtype=np.float32) -> np.ndarray:
        """Buffer whose one-pixel spatial ring is zeroed; interior is garbage."""
        buf = self.get(shape, dtype)
        buf[:, :, 0, :] = 0
        buf[:, :, -1, :] = 0
        buf[:, :, :, 0] = 0
        buf[:, :, :, -1] = 0
        return buf

    def reset(self):
        for key in self._counts:
            self._counts[key] = 0

    def clear(self):
        self._pools.clear()
        self._counts.clear()


DEFAULT_WS = Workspace()


def pad_spatial(x: np.ndarray, ws: Workspace | None = None) -> np.ndarray:
    """Zero-pad (C, N, H, W) by one pixel on each spatial side."""
    c, n, h, w = x.shape
    if ws is None:
        xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    else:
        xp = ws.get_padded((c, n, h + 2, w + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def im2col(xp: np.ndarray, ws: Workspace | None = None) -> np.ndarray:
    """Gather 3x3 neighborhoods: (C, N, H+2, W+2) -> (C, 9, N*H*W)."""
    c, n, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    if ws is None:
        cols = np.empty((c, 9, n * h * w), dtype=xp.dtype)
    else:
        cols = ws.get((c, 9, n * h * w), xp.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        np.copyto(
            cols[:, k].reshape(c, n, h, w),
            xp[:, :, dy : dy + h, dx : dx + w],
        )
    return cols


def col2im(dcols: np.ndarray, n: int, h: int, w: int, ws: Workspace | None = None) -> np.ndarray:
    """Scatter-add column gradients back to the (C, N, H, W) input grid."""
    c = dcols.shape[0]
    if ws is None:
        dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    else:
        dxp = ws.get((c, n, h + 2, w + 2), dcols.dtype)
        dxp[:] = 0
    for k, (dy, dx) in enumerate(_TAPS):
        dxp[:, :, dy : dy + h, dx : dx + w] += dcols[:, k].reshape(c, n, h, w)
    if ws is None:
        return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])
    out = ws.get((c, n, h, w), dcols.dtype)
    np.copyto(out, dxp[:, :, 1:-1, 1:-1])
    return out


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                 ws: Workspace | None = None):
    """3x3 same-padding convolution.

    Returns ``(out, cols)`` where ``out`` is (O, N, H, W) and ``cols`` is the
    im2col matrix, reusable by :func:`conv_backward`.
    """
    c, n, h, w = x.shape
    o, ck = kernel.shape[0], kernel.shape[1]
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, got {c}")
    cols = im2col(pad_spatial(x, ws), ws)
    out = ws.get((o, n, h, w), x.dtype) if ws is not None else np.empty((o, n, h, w), x.dtype)
    np.matmul(kernel.reshape(o, c * 9), cols.reshape(c * 9, -1), out=out.reshape(o, -1))
    out += bias.reshape(o, 1, 1, 1)
    return out, cols


def conv_backward(
    grad_out: np.ndarray,
    cols: np.ndarray,
    kernel: np.ndarray,
    need_input_grad: bool = True,
    ws: Workspace | None = None,
):
    """Gradients of a 3x3 convolution given the forward's im2col matrix.

    ``grad_out`` is (O, N, H, W). Returns ``(dkernel, dbias, dx)`` with ``dx``
    None when ``need_input_grad`` is false.
    """
    o, n, h, w = grad_out.shape
    c = kernel.shape[1]
    g2 = grad_out.reshape(o, -1)
    dkernel = (g2 @ cols.reshape(c * 9, -1).T).reshape(kernel.shape)
    dbias = g2.sum(axis=1)
    dx = None
    if need_input_grad:
        dx = conv_input_grad(grad_out, kernel, ws)
    return dkernel, dbias, dx


def conv_input_grad(grad_out: np.ndarray, kernel: np.ndarray,
                    ws: Workspace | None = None) -> np.ndarray:
    """Input gradient alone, for backprop through a frozen layer."""
    o, n, h, w = grad_out.shape
    c = kernel.shape[1]
    if ws is None:
        dcols = kernel.reshape(o, c * 9).T @ grad_out.reshape(o, -1)
    else:
        dcols = ws.get((c * 9, n * h * w), grad_out.dtype)
        np.matmul(kernel.reshape(o, c * 9).T, grad_out.reshape(o, -1), out=dcols)
    return col2im(dcols.reshape(c, 9, -1), n, h, w, ws)
