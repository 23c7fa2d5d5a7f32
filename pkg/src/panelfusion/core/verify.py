"""Gradient verification suite over every differentiable primitive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .gradcheck import grad_check
from .tensor import Tensor

DENSE_TOL = 1e-4
DEFAULT_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _cases(r: np.random.Generator):
    """(name, tolerance, fn, input) for one random draw; each fn maps a tensor to a scalar."""

    def t(*shape, pos=False):
        a = r.normal(size=shape)
        return Tensor(np.abs(a) + 0.5 if pos else a, dtype=np.float64)

    fixed: dict[tuple, Tensor] = {}

    def weigh(out):
        # random but fixed projection per output shape, so f stays deterministic
        if out.shape not in fixed:
            fixed[out.shape] = Tensor(r.normal(size=out.shape), dtype=np.float64)
        return (out * fixed[out.shape]).sum()

    a, b = t(3, 4), t(4, 2)
    x_lin, w_lin, b_lin = t(5, 4), t(3, 4), t(3)
    x_conv, w_conv, b_conv = t(2, 5, 5), t(3, 2, 3, 3), t(3)
    target = t(3, 3, 3)
    q, k, v = t(2, 4), t(3, 4), t(3, 5)
    x_gn, g_gn, b_gn = t(4, 3, 3), t(4), t(4)
    table = t(6, 3)
    ids = r.integers(0, 6, size=5)
    u, w = t(7), t(7)
    logits = t(4, 5)
    labels = r.integers(0, 5, size=4)
    wts = {name: Tensor(r.normal(size=shape), dtype=np.float64) for name, shape in
           [("lin", (5, 3)), ("attn", (2, 5)), ("gn", (4, 3, 3)), ("up", (2, 6, 6)), ("pool", (2, 2, 2))]}

    return [
        ("matmul.a", DENSE_TOL, lambda a_: weigh(ops.matmul(a_, b)), a),
        ("matmul.b", DENSE_TOL, lambda b_: weigh(ops.matmul(a, b_)), b),
        ("linear.x", DENSE_TOL, lambda x_: (ops.linear(x_, w_lin, b_lin) * wts["lin"]).sum(), x_lin),
        ("linear.w", DENSE_TOL, lambda w_: (ops.linear(x_lin, w_, b_lin) * wts["lin"]).sum(), w_lin),
        ("linear.b", DENSE_TOL, lambda b_: (ops.linear(x_lin, w_lin, b_) * wts["lin"]).sum(), b_lin),
        ("conv2d.x", DEFAULT_TOL, lambda x_: ops.mse(ops.conv2d(x_, w_conv, b_conv, padding=0), target), x_conv),
        ("conv2d.w", DEFAULT_TOL, lambda w_: ops.mse(ops.conv2d(x_conv, w_, b_conv, padding=0), target), w_conv),
        ("conv2d.stride2", DEFAULT_TOL, lambda x_: weigh(ops.conv2d(x_, w_conv, b_conv, stride=2, padding=1)), x_conv),
        ("attention.q", DEFAULT_TOL, lambda q_: (ops.attention(q_, k, v) * wts["attn"]).sum(), q),
        ("attention.k", DEFAULT_TOL, lambda k_: (ops.attention(q, k_, v) * wts["attn"]).sum(), k),
        ("attention.v", DEFAULT_TOL, lambda v_: (ops.attention(q, k, v_) * wts["attn"]).sum(), v),
        ("group_norm.x", DEFAULT_TOL, lambda x_: (ops.group_norm(x_, 2, g_gn, b_gn) * wts["gn"]).sum(), x_gn),
        ("group_norm.gamma", DEFAULT_TOL, lambda g_: (ops.group_norm(x_gn, 2, g_, b_gn) * wts["gn"]).sum(), g_gn),
        ("group_norm.beta", DEFAULT_TOL, lambda b_: (ops.group_norm(x_gn, 2, g_gn, b_) * wts["gn"]).sum(), b_gn),
        ("silu", DEFAULT_TOL, lambda x_: weigh(ops.silu(x_)), t(3, 4)),
        ("softmax", DEFAULT_TOL, lambda x_: weigh(ops.softmax(x_, axis=1)), t(3, 4)),
        ("log_softmax", DEFAULT_TOL, lambda x_: weigh(ops.log_softmax(x_, axis=1)), t(3, 4)),
        ("embed", DEFAULT_TOL, lambda tb: weigh(ops.embed(ids, tb)), table),
        ("mse", DEFAULT_TOL, lambda x_: ops.mse(x_, w), u),
        ("cosine_sim", DEFAULT_TOL, lambda x_: ops.cosine_sim(x_, w), u),
        ("l2_normalize", DEFAULT_TOL, lambda x_: weigh(ops.l2_normalize(x_, axis=1)), t(3, 4)),
        ("cross_entropy", DEFAULT_TOL, lambda x_: ops.cross_entropy(x_, labels), logits),
        ("upsample2x", DEFAULT_TOL, lambda x_: (ops.upsample2x(x_) * wts["up"]).sum(), t(2, 3, 3)),
        ("avg_pool2x", DEFAULT_TOL, lambda x_: (ops.avg_pool2x(x_) * wts["pool"]).sum(), t(2, 4, 4)),
        ("concat", DEFAULT_TOL, lambda x_: weigh(ops.concat([x_, w.reshape(1, 7), x_ * x_], axis=0)), t(1, 7)),
        ("elementwise", DEFAULT_TOL,
         lambda x_: weigh(((x_ * x_ + 1.0) / (x_.exp() + 2.0)).sqrt() + x_.log() - x_ ** 3), t(2, 3, pos=True)),
        ("reduce_reshape", DEFAULT_TOL,
         lambda x_: weigh(x_.transpose(1, 0).reshape(2, 6).mean(axis=1)) + (x_[1:, ::2] ** 2).sum(), t(4, 3)),
    ]


def run_gradcheck_suite(seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        r = np.random.default_rng(seed)
        for name, tol, fn, x in _cases(r):
            results.append(CheckResult(name, seed, grad_check(fn, x), tol))
    return results
