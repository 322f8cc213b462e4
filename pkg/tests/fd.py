"""Central finite differences, independent of the autodiff path."""

import numpy as np

from defectvit.tensor import Tensor


def numeric_grad(f, arrays, index, eps=1e-3):
    """d f(*arrays) / d arrays[index], f returning a python float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(*base)
        x[idx] = orig - eps
        fm = f(*base)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def autodiff_grads(build, arrays):
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    out.backward()
    return [t.grad for t in ts]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, arrays, eps=1e-3):
    """Max relative error between reverse-mode and central-difference grads."""

    def scalar(*arrs):
        return float(build(*[Tensor(a, dtype=np.float64) for a in arrs]).data)

    grads = autodiff_grads(build, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        num = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, rel_err(grads[i], num))
    return worst
