"""Central finite-difference checks for every differentiable op."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import etlayer, seeding
from .geom import GridSpec

STEP = 1e-6
RTOL = 1e-5


@dataclass
class CheckResult:
    op: str
    shape: tuple
    rel_error: float
    ok: bool


def numeric_grad(f, x: np.ndarray, h=STEP):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check(op_name, build, inputs, rng, rtol=RTOL, shape=None, numeric_scale=1.0):
    """Compare analytic and numeric gradients of ``sum(build(*inputs) * w)``
    for a fixed random ``w``; returns one :class:`CheckResult` per op/shape.

    ``numeric_scale`` multiplies the numeric gradient before comparison
    (gradient reversal must equal ``-lam`` times the identity's gradient).
    """
    ts = [ad.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*ts)
    w = rng.normal(size=out.shape)
    loss = ad.tsum(ad.mul(out, w))
    ad.backward(loss)

    def f():
        return float(np.sum(build(*[ad.Tensor(t.data) for t in ts]).data * w))

    worst = 0.0
    for t in ts:
        num = numeric_scale * numeric_grad(f, t.data)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return CheckResult(op_name, shape or tuple(np.shape(inputs[0])), worst, worst <= rtol)


def _away_from(x, bad, margin):
    """Nudge entries off a non-differentiable point."""
    close = np.abs(x - bad) < margin
    return np.where(close, bad + np.sign(x - bad + 1e-12) * margin, x)


def _cases(rng):
    def r(*s):
        return rng.normal(size=s)

    for b, i, o in [(1, 3, 2), (2, 4, 3), (3, 2, 5), (4, 5, 1), (2, 6, 4)]:
        yield "dense", ad.dense, [r(b, i), r(i, o), r(o)], 1.0
    for shp, k, stride, pad in [((1, 5, 5, 2), 3, 1, 1), ((2, 6, 7, 1), 3, 2, 1), ((1, 4, 6, 3), 1, 1, 0), ((2, 7, 5, 2), 3, 2, 0), ((1, 6, 6, 2), 2, 2, 0)]:
        cout = 2
        yield f"conv2d(stride={stride},pad={pad})", (lambda x, K, b, s=stride, p=pad: ad.conv2d(x, K, b, s, p)), [r(*shp), r(k, k, shp[3], cout), r(cout)], 1.0
    for shp, size in [((1, 2, 2, 1), 2), ((2, 3, 2, 2), 2), ((1, 3, 3, 1), (5, 5)), ((1, 2, 3, 2), (4, 7)), ((2, 4, 4, 1), (7, 7))]:
        yield "upconv2d", (lambda x, K, b, f=size: ad.upconv2d(x, K, b, f)), [r(*shp), r(3, 3, shp[3], 2), r(2)], 1.0
    for s in [(3,), (2, 4), (2, 3, 2), (5, 1), (1, 2, 2, 3)]:
        yield "relu", ad.relu, [_away_from(r(*s), 0.0, 1e-3)], 1.0
        yield "sigmoid", ad.sigmoid, [3 * r(*s)], 1.0
        yield "mse_loss", ad.mse_loss, [r(*s), r(*s)], 1.0
        p = rng.uniform(0.05, 0.95, size=s)
        lbl = (rng.uniform(size=s) > 0.5).astype(float)
        yield "bce_loss", (lambda q, y=lbl: ad.bce_loss(q, y)), [p], 1.0
        lam = float(rng.uniform(0.1, 2.0))
        yield "grad_reverse", (lambda x, lam=lam: ad.grad_reverse(x, lam)), [r(*s)], -lam
    grid = GridSpec(7, 6, (-0.84, -0.72), 0.24)
    for k in range(5):
        pose = (float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-np.pi, np.pi)))
        shp = (1 + k % 2, 6, 7, 1 + k % 3)
        yield "et_forward", (lambda z, p=pose: etlayer.et_layer(z, [p] * z.shape[0], grid)), [r(*shp)], 1.0


def run_suite(seed: int = 0, rtol: float = RTOL, log=None):
    """Run every check; returns ``(results, seconds)``."""
    rng = seeding.rng(seed, "gradcheck")
    t0 = time.time()
    results = []
    for name, fn, inputs, scale in _cases(rng):
        res = check(name, fn, inputs, rng, rtol, numeric_scale=scale)
        results.append(res)
        if log:
            log(f"{'ok  ' if res.ok else 'FAIL'} {res.op:28s} {str(res.shape):18s} rel={res.rel_error:.2e}")
    return results, time.time() - t0
