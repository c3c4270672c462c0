"""3x3 'same' convolutions (cross-correlation, zero padding) with their adjoints."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x):
    # (N, C, H, W) -> (N*H*W, C*9)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3(x, weight, bias=None, cols=None):
    """x: (N, Cin, H, W); weight: (Cout, Cin, 3, 3) -> (N, Cout, H, W)."""
    n, _, h, w = x.shape
    cout = weight.shape[0]
    if cols is None:
        cols = _cols(x)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)


def conv3x3_adjoint(dy, weight):
    """Adjoint of ``conv3x3`` w.r.t. its input."""
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv3x3(dy, np.ascontiguousarray(flipped))


def conv3x3_weight_grad(x, dy, cols=None):
    """Gradient w.r.t. the weight, given upstream ``dy`` (N, Cout, H, W)."""
    if cols is None:
        cols = _cols(x)
    cout = dy.shape[1]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (dy2.T @ cols).reshape(cout, x.shape[1], 3, 3)


cols3x3 = _cols
