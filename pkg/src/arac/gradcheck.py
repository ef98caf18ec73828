"""Central finite-difference checks of analytic gradients."""
import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f, tensor, h=1e-4):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``tensor.data``.

    ``tensor.data`` is perturbed in place and restored element by element.
    """
    x = tensor.data
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is ~0 from dividing by noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def analytic_grads(f, tensors):
    for t in tensors:
        t.zero_grad()
    f().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(f, named_tensors, h=1e-4, floor=1e-6):
    """Return ``{name: max relative error}`` comparing backward to finite differences."""
    names = list(named_tensors)
    tensors = [named_tensors[n] for n in names]
    grads = analytic_grads(f, tensors)
    return {n: relative_error(g, numerical_grad(f, t, h), floor)
            for n, t, g in zip(names, tensors, grads)}


def random_weights(shape, seed=0, dtype=np.float64):
    """Fixed random projection used to turn an op output into a scalar loss."""
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(dtype))


def parameter_group(name):
    """``read.0.attn.w_q`` -> ``read.0``; ``classifier.w`` -> ``classifier``."""
    parts = name.split(".")
    return ".".join(parts[:2]) if len(parts) > 2 and parts[1].isdigit() else parts[0]


def check_model_gradients(model, batch, h=1e-4, floor=1e-6):
    """Per-parameter max relative error of d(bce o forward) against finite differences."""
    from .training import bce_with_logits

    def loss():
        logits, _ = model.forward(batch)
        return bce_with_logits(logits, batch.targets)

    return check_gradients(loss, dict(model.named_parameters()), h, floor)


def group_errors(errors):
    out = {}
    for name, err in errors.items():
        g = parameter_group(name)
        out[g] = max(out.get(g, 0.0), err)
    return out


def check_elementwise_ops(h=1e-5, floor=1e-6, seed=0):
    """``{op: max relative error}`` for the float64 elementwise ops."""
    from . import tensor as T
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    a = Tensor(rng.normal(size=shape), requires_grad=True)
    b = Tensor(rng.normal(size=shape), requires_grad=True)
    # keep relu inputs away from the kink so central differences stay one-sided
    a.data[np.abs(a.data) < 1e-2] += 0.1
    w = random_weights(shape, seed + 1)
    cases = {
        "add": lambda: T.add(a, b), "sub": lambda: T.sub(a, b), "mul": lambda: T.mul(a, b),
        "neg": lambda: T.neg(a), "scale": lambda: T.scale(a, 0.7),
        "add_constant": lambda: T.add_constant(a, 1.5), "sigmoid": lambda: T.sigmoid(a),
        "relu": lambda: T.relu(a),
    }
    out = {}
    for op, fn in cases.items():
        loss = lambda fn=fn: T.sum(T.mul(fn(), w))
        out[op] = max(check_gradients(loss, {"a": a, "b": b}, h, floor).values())
    return out
