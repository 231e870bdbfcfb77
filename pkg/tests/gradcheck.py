"""Central finite-difference gradient checks for tape-built functions."""
import numpy as np

from pacconformal.diffmath import Tape


def tape_grad(f, *arrays):
    tape = Tape()
    vs = [tape.variable(a) for a in arrays]
    out = f(*vs)
    return float(np.asarray(out.value)), tape.backward(out, vs)


def fd_grad(f, arrays, which, h=1e-5):
    x = np.array(arrays[which], dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        vals = []
        for sgn in (1.0, -1.0):
            flat[i] = old + sgn * h
            args = list(arrays)
            args[which] = x
            vals.append(float(np.asarray(f(*args))))
        flat[i] = old
        g.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def max_grad_error(f, *arrays, h=1e-5):
    """Largest relative error between tape and finite-difference gradients over all inputs.

    ``f`` must accept either tape variables or plain arrays.
    """
    _, grads = tape_grad(f, *arrays)
    worst = 0.0
    for k, g in enumerate(grads):
        worst = max(worst, relative_error(g, fd_grad(lambda *a: _plain(f(*a)), arrays, k, h)))
    return worst


def _plain(v):
    return v.value if hasattr(v, "value") else v
