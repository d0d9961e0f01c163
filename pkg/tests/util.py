"""Shared oracles for the test suite.

The gradient checker below is the independent oracle for every reverse-mode
gradient in the package: central finite differences on the scalar output,
never routed through backward() itself. For large parameter tensors a
random subset of coordinates is perturbed.
"""

import numpy as np

from deformplan.autodiff import Tensor


def finite_difference_entries(fn, arrays, index, entries, step=1e-5):
    """Central differences of ``fn(arrays) -> float`` at selected flat entries."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    flat = base[index].reshape(-1)
    grads = np.zeros(len(entries))
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(base)
        flat[i] = orig - step
        lo = fn(base)
        flat[i] = orig
        grads[j] = (hi - lo) / (2.0 * step)
    return grads


def check_gradients(build, arrays, rtol=1e-4, step=1e-5, atol=1e-7, max_entries=None, seed=0):
    """Compare backward() grads of ``build`` against finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor. Each input gets
    requires_grad and is checked independently. When ``max_entries`` is
    set, at most that many randomly chosen coordinates per input are
    perturbed (the backward gradient is still computed in full).
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward()

    def as_scalar(arrs):
        tensors = [Tensor(a) for a in arrs]
        return build(tensors).item()

    picker = np.random.default_rng(seed)
    for k, leaf in enumerate(leaves):
        got = leaf.grad
        assert got is not None, f"input {k} received no gradient"
        size = got.size
        if max_entries is not None and size > max_entries:
            entries = picker.choice(size, size=max_entries, replace=False)
        else:
            entries = np.arange(size)
        fd = finite_difference_entries(as_scalar, arrays, k, entries, step=step)
        got_sel = got.reshape(-1)[entries]
        err = np.abs(got_sel - fd)
        rel = err / np.maximum(np.maximum(np.abs(fd), np.abs(got_sel)), 1e-12)
        bad = (err > atol) & (rel > rtol)
        assert not bad.any(), (
            f"gradient mismatch on input {k}: max rel err "
            f"{rel[err > atol].max() if (err > atol).any() else 0:.3e}"
        )
