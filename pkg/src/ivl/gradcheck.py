"""Finite-difference checking of analytic gradients.

The program under test is re-run in 64-bit precision; every element of every
leaf is perturbed by +/-eps and the central difference is compared against the
gradient produced by the reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, no_grad


class NonDeterministicError(ValueError):
    """The checked program produced different values on identical passes."""


MAX_LEAF_ELEMENTS = 10_000


@dataclass
class LeafReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name}: max rel err {self.max_rel_err:.3e} at {self.worst_index}"


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    leaves: list = field(default_factory=list)

    @property
    def passed(self):
        return all(l.passed for l in self.leaves)

    def __str__(self):
        return "\n".join(str(l) for l in self.leaves)


def grad_check(f, leaves, eps=1e-3, tol=1e-4, names=None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*leaves)`` to central differences.

    ``leaves`` are Tensors; they are cloned to float64 before checking, so the
    caller's 32-bit tensors are untouched. ``f`` must be deterministic; this is
    verified with two identical forward passes.
    """
    if names is None:
        names = [f"leaf{i}" for i in range(len(leaves))]
    work = [Tensor(np.asarray(l.data, dtype=np.float64).copy(), requires_grad=True)
            for l in leaves]

    out = f(*work)
    with no_grad():
        out2 = f(*work)
    if not np.array_equal(np.asarray(out.data), np.asarray(out2.data)):
        raise NonDeterministicError("program is not deterministic: two identical forward passes differ")
    if out.size != 1:
        raise ShapeError(f"grad_check requires a scalar program output, got shape {out.shape}")
    out.backward()

    report = GradCheckReport(eps=eps, tol=tol)
    for name, leaf in zip(names, work):
        if leaf.size > MAX_LEAF_ELEMENTS:
            raise ValueError(f"leaf {name} has {leaf.size} elements; per-element perturbation capped at {MAX_LEAF_ELEMENTS}")
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*work).data)
                flat[i] = orig - eps
                fm = float(f(*work).data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * eps)
        err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-2)
        worst = int(err.argmax()) if err.size else 0
        max_err = float(err.reshape(-1)[worst]) if err.size else 0.0
        report.leaves.append(LeafReport(
            name=name,
            max_rel_err=max_err,
            worst_index=tuple(np.unravel_index(worst, leaf.shape)) if leaf.shape else (),
            passed=max_err < tol,
        ))
    return report
