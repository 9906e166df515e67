"""Shared oracles for the test suites: finite differences and error metrics."""

from __future__ import annotations

import numpy as np

from modalseg.tensor import Tensor, backward, no_grad

FD_EPS = 1e-6
FD_TOL = 1e-4


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build, arrays, tol=FD_TOL, eps=FD_EPS):
    """Compare tape gradients of a scalar loss against central differences.

    ``build`` maps one Tensor per input array to a scalar loss tensor.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss)

    def value_at(replaced: int, arr: np.ndarray) -> float:
        args = [Tensor(a) for a in arrays]
        args[replaced] = Tensor(arr)
        with no_grad():
            return build(*args).item()

    for k, (leaf, arr) in enumerate(zip(leaves, arrays)):
        assert leaf.grad is not None, f"input {k} got no gradient"
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            num[idx] = (value_at(k, plus) - value_at(k, minus)) / (2 * eps)
        err = max_rel_err(leaf.grad, num)
        assert err < tol, f"input {k}: gradient mismatch, rel err {err:.3g}"


def check_param_grad(loss_fn, params: dict, pname: str, tol=FD_TOL, eps=FD_EPS):
    """Finite-difference check for one named parameter of a param dict.

    ``loss_fn(params)`` must rebuild the scalar loss from current param data.
    The analytic gradient must already be populated on the parameter.
    """
    target = params[pname]
    assert target.grad is not None, f"{pname} got no gradient"
    base = target.data.copy()
    num = np.zeros_like(base)
    try:
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (+1, -1):
                probe = base.copy()
                probe[idx] += sign * eps
                target.data = probe
                with no_grad():
                    vals.append(loss_fn(params).item())
            num[idx] = (vals[0] - vals[1]) / (2 * eps)
    finally:
        target.data = base
    err = max_rel_err(target.grad, num)
    assert err < tol, f"{pname}: gradient mismatch, rel err {err:.3g}"
