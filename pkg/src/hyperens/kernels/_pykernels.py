"""Numpy reference implementations of the hot kernels.

Used when the compiled extension is unavailable, and as the comparison
baseline in the benchmark. Shapes follow the NHWC convention throughout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, size, stride):
    # (b, h_out, w_out, c_in, size, size)
    win = sliding_window_view(x, (size, size), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, kernel, stride=1):
    size = kernel.shape[0]
    win = _windows(x, size, stride)
    # kernel (l, l, ci, co) -> (ci, l, l, co) to line up with window axes
    return np.tensordot(win, kernel.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))


def conv2d_backward_kernel(x, grad_out, size, stride=1):
    win = _windows(x, size, stride)
    gk = np.tensordot(win, grad_out, axes=([0, 1, 2], [0, 1, 2]))  # (ci, l, l, co)
    return np.ascontiguousarray(gk.transpose(1, 2, 0, 3))


def conv2d_backward_input(grad_out, kernel, input_shape, stride=1):
    size = kernel.shape[0]
    gx = np.zeros(input_shape, dtype=np.float64)
    h_out, w_out = grad_out.shape[1], grad_out.shape[2]
    for i in range(size):
        for j in range(size):
            contrib = grad_out @ kernel[i, j].T  # (b, h_out, w_out, ci)
            gx[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += contrib
    return gx


def greedy_scores(true_probs, running_sum, count, floor=1e-12):
    """NLL of ``(running_sum + true_probs[j]) / (count + 1)`` for every candidate j."""
    avg = (running_sum[None, :] + true_probs) / (count + 1.0)
    return -np.mean(np.log(np.maximum(avg, floor)), axis=1)
