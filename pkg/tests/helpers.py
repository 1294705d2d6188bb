"""Independent reference routines shared by the test modules."""

import numpy as np

from unfold_rpca.core import Tensor


def naive_conv2d(x, weight, bias):
    """Direct nested-loop 3x3 cross-correlation, zero padding 1."""
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = bias[o]
                    for c in range(cin):
                        for ky in range(3):
                            for kx in range(3):
                                yi, xj = i + ky - 1, j + kx - 1
                                if 0 <= yi < h and 0 <= xj < w:
                                    acc += weight[o, c, ky, kx] * x[b, c, yi, xj]
                    out[b, o, i, j] = acc
    return out


def finite_difference_check(loss_fn, tensors, rng, n_coords, h=1e-6):
    """
    Compare autodiff against central differences at random coordinates.

    ``loss_fn`` rebuilds the scalar loss from the current ``tensors`` values.
    Returns the worst relative error seen. Relative error uses
    ``|a - n| / max(|a|, |n|, 1e-8)`` so coordinates with a vanishing
    derivative are judged on an absolute 1e-8 scale.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for _ in range(n_coords):
        which = rng.integers(len(tensors))
        t = tensors[which]
        idx = tuple(rng.integers(s) for s in t.shape)
        original = t.data[idx]
        t.data[idx] = original + h
        plus = loss_fn().item()
        t.data[idx] = original - h
        minus = loss_fn().item()
        t.data[idx] = original
        numeric = (plus - minus) / (2 * h)
        a = analytic[which][idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def as_param(array):
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)
