"""Gradient-integrity self-test: finite-difference checks for every
differentiable op and every encoder preset, across several seeds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .layers import ChannelNorm, ENCODER_PRESETS, build_encoder
from .tensor import Tensor


def _fixed_weight(rng):
    """A reduction ``out -> scalar`` with random weights drawn once, so the
    program stays deterministic across repeated calls while the gradient
    exercises every output element differently."""
    cache = {}

    def reduce(out):
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        w = Tensor(np.asarray(cache[out.shape], dtype=out.dtype))
        return T.tsum(T.mul(out, w))

    return reduce


def _rand(rng, shape, away_from_zero=False):
    x = rng.standard_normal(shape).astype(np.float32)
    if away_from_zero:
        # keep |x| >= 0.1 so kinked ops are checked away from the kink
        x = np.where(np.abs(x) < 0.1, np.where(x < 0, x - 0.1, x + 0.1), x)
    return Tensor(x, requires_grad=True)


def _op_cases(rng):
    """name -> (program, leaves); each program reduces to a scalar Tensor."""
    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    pos = Tensor(np.abs(rng.standard_normal((3, 4))).astype(np.float32) + 0.5, requires_grad=True)
    m1 = _rand(rng, (3, 5))
    m2 = _rand(rng, (5, 4))
    img = _rand(rng, (2, 3, 6, 7))
    kern = _rand(rng, (4, 3, 3, 3))
    kbias = _rand(rng, (4,))
    targets = rng.integers(0, 4, size=5)
    idx = rng.integers(0, 3, size=6)
    ws = _fixed_weight(rng)

    return {
        "add": (lambda x, y: ws(T.add(x, y)), [a, b]),
        "sub": (lambda x, y: ws(T.sub(x, y)), [a, b]),
        "mul": (lambda x, y: ws(T.mul(x, y)), [a, b]),
        "div": (lambda x, y: ws(T.div(x, y)), [a, pos]),
        "neg": (lambda x: ws(T.neg(x)), [a]),
        "matmul": (lambda x, y: ws(T.matmul(x, y)), [m1, m2]),
        "relu": (lambda x: ws(T.relu(x)), [_rand(rng, (4, 5), away_from_zero=True)]),
        "tanh": (lambda x: ws(T.tanh(x)), [a]),
        "sigmoid": (lambda x: ws(T.sigmoid(x)), [a]),
        "exp": (lambda x: ws(T.exp(x)), [a]),
        "log": (lambda x: ws(T.log(x)), [pos]),
        "sqrt": (lambda x: ws(T.sqrt(x)), [pos]),
        "sum": (lambda x: T.tsum(x), [a]),
        "sum_axis": (lambda x: ws(T.tsum(x, axis=0)), [a]),
        "mean": (lambda x: ws(T.tmean(x, axis=1)), [a]),
        "reshape": (lambda x: ws(T.reshape(x, (4, 3))), [a]),
        "transpose": (lambda x: ws(T.transpose(x, (1, 0))), [a]),
        "slice": (lambda x: ws(T.tslice(x, idx)), [a]),
        "concat": (lambda x, y: ws(T.concat([x, y], axis=1)), [a, b]),
        "softmax": (lambda x: ws(T.softmax(x, axis=1)), [a]),
        "cross_entropy": (lambda z: T.cross_entropy(z, targets, reduction="mean"),
                          [_rand(rng, (5, 4))]),
        "mse": (lambda x, y: T.mse(x, y), [a, b]),
        "conv2d": (lambda x, w, c: ws(T.conv2d(x, w, c)), [img, kern, kbias]),
        "conv2d_stride": (lambda x, w, c: ws(T.conv2d(x, w, c, stride=2)), [img, kern, kbias]),
        "conv2d_dilated": (lambda x, w, c: ws(T.conv2d(x, w, c, dilation=2)), [img, kern, kbias]),
        "maxpool2x2": (lambda x: ws(T.maxpool2x2(x)), [_rand(rng, (2, 2, 5, 6))]),
        "global_max_pool": (lambda x: ws(T.global_max_pool(x)), [_rand(rng, (2, 3, 4, 5))]),
        "upsample_to": (lambda x: ws(T.upsample_to(x, (7, 9))), [_rand(rng, (1, 2, 3, 4))]),
    }


def _param_slots(encoder, max_size=64, max_slots=4):
    """(owner, attribute) pairs for a spread of small parameters, so they can
    be swapped for float64 clones during the check."""
    slots = []
    for layer in encoder.layers:
        for attr, val in vars(layer).items():
            if isinstance(val, Tensor) and val.requires_grad and val.size <= max_size:
                slots.append((layer, attr))
            elif isinstance(val, ChannelNorm):
                for sub_attr, sub in vars(val).items():
                    if isinstance(sub, Tensor) and sub.size <= max_size:
                        slots.append((val, sub_attr))
    if len(slots) <= max_slots:
        return slots
    picks = np.linspace(0, len(slots) - 1, max_slots).astype(int)
    return [slots[i] for i in picks]


def _check_encoder(preset, seed, eps=1e-5, tol=1e-3):
    rng = np.random.default_rng(seed)
    enc = build_encoder(preset, 2, rng, init="he")
    slots = _param_slots(enc)
    x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32), requires_grad=True)
    ws = _fixed_weight(rng)

    def f(xi, *qs):
        for (owner, attr), q in zip(slots, qs):
            setattr(owner, attr, q)
        return ws(enc(xi))

    leaves = [x] + [getattr(owner, attr) for owner, attr in slots]
    names = ["input"] + [f"{type(owner).__name__}.{attr}" for owner, attr in slots]
    return grad_check(f, leaves, eps=eps, tol=tol, names=names)


@dataclass
class SelfTestResult:
    checks: list = field(default_factory=list)  # (name, seed, passed, max_rel_err)
    elapsed: float = 0.0

    @property
    def passed(self):
        return all(ok for _, _, ok, _ in self.checks)

    def lines(self):
        out = [f"{'ok  ' if ok else 'FAIL'} {name} (seed {seed}): max rel err {err:.3e}"
               for name, seed, ok, err in self.checks]
        out.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.checks)} checks "
                   f"in {self.elapsed:.1f}s")
        return out


def run_selftest(seeds=(0, 1, 2, 3, 4), corrupt_op=None,
                 encoder_presets=None) -> SelfTestResult:
    """Run every op and encoder gradient check across the given seeds.

    ``corrupt_op`` deliberately breaks the named op's backward pass for the
    duration of the run (negative control)."""
    result = SelfTestResult()
    t0 = time.time()
    if corrupt_op is not None:
        T.set_corrupt(corrupt_op)
    try:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for name, (f, leaves) in _op_cases(rng).items():
                report = grad_check(f, leaves, eps=1e-3, tol=1e-4)
                worst = max((l.max_rel_err for l in report.leaves), default=0.0)
                result.checks.append((f"op:{name}", seed, report.passed, worst))
        presets = encoder_presets if encoder_presets is not None else sorted(ENCODER_PRESETS)
        for preset in presets:
            for seed in seeds:
                report = _check_encoder(preset, seed)
                worst = max((l.max_rel_err for l in report.leaves), default=0.0)
                result.checks.append((f"encoder:{preset}", seed, report.passed, worst))
    finally:
        if corrupt_op is not None:
            T.set_corrupt(corrupt_op, enabled=False)
    result.elapsed = time.time() - t0
    return result
