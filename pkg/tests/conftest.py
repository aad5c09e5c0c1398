"""Shared oracles and instance builders for the test suite."""

import numpy as np
import pytest

from poseloop.net import ArchConfig, ConvNetParams, forward, init_params


def sample_gradcheck_instance(seed, h=1e-3, margin_factor=4.0, in_channels=2,
                              hidden=2, size=8):
    """Random 2-layer instance whose hidden pre-activations stay clear of the
    ReLU kink under central differences of step ``h``.

    Central differences only estimate a derivative where the function is
    smooth on the whole [x-h, x+h] interval, so instances where a
    perturbation could flip a ReLU are resampled.
    """
    rng = np.random.default_rng(seed)
    arch = ArchConfig(input_channels=in_channels, hidden_channels=(hidden,),
                      output_channels=1)
    for attempt in range(500):
        p = init_params(arch, int(rng.integers(2**31)), dtype=np.float64)
        x = rng.standard_normal((in_channels, size, size))
        grad_out = rng.standard_normal((size, size))
        # largest pre-activation shift a +-h parameter or input nudge can cause
        reach = h * max(
            np.abs(x).max() * 1.0,
            9 * in_channels * np.abs(p.layers[0].kernel).max(),
        )
        pre = _layer0_preact(p, x)
        if np.abs(pre).min() > margin_factor * reach:
            return p, x, grad_out
    raise AssertionError("could not sample a kink-free gradcheck instance")


def _layer0_preact(p: ConvNetParams, x):
    from poseloop import convops

    out, _ = convops.conv_forward(x[:, None], p.layers[0].kernel, p.layers[0].bias)
    return out


def fd_param_grads(p: ConvNetParams, x, grad_out, h=1e-3):
    """Central-difference oracle for every parameter of the network."""

    def scalar():
        return float(np.sum(grad_out * forward(p, x)))

    grads = []
    for layer in p.layers:
        layer_grads = []
        for arr in (layer.kernel, layer.bias):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = scalar()
                arr[idx] = old - h
                fm = scalar()
                arr[idx] = old
                g[idx] = (fp - fm) / (2 * h)
            layer_grads.append(g)
        grads.append(tuple(layer_grads))
    return grads


def fd_input_grads(p: ConvNetParams, x, grad_out, h=1e-3):
    def scalar():
        return float(np.sum(grad_out * forward(p, x)))

    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = scalar()
        x[idx] = old - h
        fm = scalar()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(n))))
