"""Pure-numpy implementations of the numeric kernels.

Contract shared with the compiled backend: float64 C-contiguous arrays,
2-D for the row-wise kernels, 1-D for the elementwise ones. Callers
(see ``scmd.autodiff``) handle reshaping and argument validation.
"""

import numpy as np

NAME = "numpy"


# ---- elementwise (1-D) ----

def ewise_add(x, y):
    return x + y


def ewise_sub(x, y):
    return x - y


def ewise_mul(x, y):
    return x * y


def scalar_mul(x, c):
    return x * c


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    return np.where(x > 0.0, g, 0.0)


def log(x):
    return np.log(x)


def log_grad(x, g):
    return g / x


def reduce_sum(x):
    return float(x.sum())


# ---- matrix (2-D) ----

def matmul(a, b):
    return a @ b


def matmul_grad_a(g, b):
    return g @ b.T


def matmul_grad_b(a, g):
    return a.T @ g


def add_bias(x, b):
    return x + b


def bias_grad(g):
    return g.sum(axis=0)


def row_sum(a):
    return a.sum(axis=1)


def gather_rows(a, idx):
    return a[idx]


def scatter_rows_add(out, idx, g):
    np.add.at(out, idx, g)


def take_per_row(a, idx):
    return a[np.arange(a.shape[0]), idx]


def put_per_row_add(out, idx, g):
    np.add.at(out, (np.arange(out.shape[0]), idx), g)


def softmax_rows(z, t):
    a = z / t
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(y, g, t):
    s = (g * y).sum(axis=1, keepdims=True)
    return y * (g - s) / t


def log_softmax_rows(z, t):
    a = z / t
    a = a - a.max(axis=1, keepdims=True)
    return a - np.log(np.exp(a).sum(axis=1, keepdims=True))


def log_softmax_rows_grad(lp, g, t):
    p = np.exp(lp)
    s = g.sum(axis=1, keepdims=True)
    return (g - p * s) / t


def l2_normalize_rows(v):
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    return v / norms, norms


def l2_normalize_rows_grad(u, norms, g):
    s = (g * u).sum(axis=1, keepdims=True)
    return (g - u * s) / norms


# ---- optimizer updates (in place) ----

def adam_step(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    if wd != 0.0:
        p *= 1.0 - wd
    if lr != 0.0:
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_momentum_step(p, g, buf, lr, momentum, wd):
    buf *= momentum
    buf += g
    if wd != 0.0:
        p *= 1.0 - wd
    if lr != 0.0:
        p -= lr * buf
