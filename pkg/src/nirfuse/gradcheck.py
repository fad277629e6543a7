"""Central finite-difference checks of the tape gradients.

A check projects the op output(s) onto fixed random directions, giving a
scalar ``f``; the analytic gradient of ``f`` from :func:`backward` is compared
against ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every input element.

Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
keeps elements whose true gradient is ~0 from dividing roundoff by roundoff.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConvKernel, Tape, Tensor4

STEP = 1e-5
FLOOR = 1e-4
OPS_TOL = 1e-4
NET_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


def _as_tuple(out) -> tuple:
    return out if isinstance(out, tuple) else (out,)


def finite_difference_check(fn: Callable, inputs: Sequence[Tensor4], rng: np.random.Generator,
                            step: float = STEP, floor: float = FLOOR,
                            max_elements: int | None = None) -> tuple:
    """Return (max relative error, number of elements checked).

    ``fn(*inputs)`` returns a Tensor4 or a tuple of them. Inputs with
    ``requires_grad`` are checked. ``max_elements`` subsamples elements per
    input tensor.
    """
    inputs = list(inputs)
    first = _as_tuple(fn(*inputs))
    dirs = [rng.standard_normal(o.shape) for o in first]

    def scalar(outs) -> Tensor4:
        terms = [T.sum_all(T.ew_mul(o, Tensor4(d))) for o, d in zip(_as_tuple(outs), dirs)]
        return T.add_all(terms)

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = scalar(fn(*inputs))
    T.backward(tape, loss, [t for t in inputs if t.requires_grad])

    worst, count = 0.0, 0
    for t in inputs:
        if not t.requires_grad:
            continue
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(scalar(fn(*inputs)).data.reshape(()))
            flat[i] = orig - step
            fm = float(scalar(fn(*inputs)).data.reshape(()))
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
            count += 1
    return worst, count


def _rand(rng, shape, grad=True, away_from_zero=False) -> Tensor4:
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep PReLU kinks out of the finite-difference stencil
        x = np.where(np.abs(x) < 1e-2, np.sign(x + 1e-12) * 1e-2, x)
    return Tensor4(x, requires_grad=grad)


def _random_shape(rng, min_hw=2, even=False):
    b = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    h = int(rng.integers(min_hw, 9))
    w = int(rng.integers(min_hw, 9))
    if even:
        h, w = h - h % 2, w - w % 2
    return b, c, h, w


def _op_cases(rng) -> list:
    cases = []

    for k in (1, 3, 5):
        b, c, h, w = _random_shape(rng)
        o = int(rng.integers(1, 5))
        ker = ConvKernel.init(o, c, k, rng)
        ker.bias.data[...] = rng.standard_normal(ker.bias.shape)
        x = _rand(rng, (b, c, h, w))
        cases.append((f"conv2d k={k}", lambda x, *_, ker=ker: T.conv2d(x, ker),
                      [x] + ker.parameters()))

    for k in (1, 3, 5):
        b, c, h, w = _random_shape(rng)
        ker = ConvKernel.init(c, c, k, rng, depthwise=True)
        ker.bias.data[...] = rng.standard_normal(ker.bias.shape)
        x = _rand(rng, (b, c, h, w))
        cases.append((f"dwconv2d k={k}", lambda x, *_, ker=ker: T.dwconv2d(x, ker),
                      [x] + ker.parameters()))

    shape = _random_shape(rng)
    c = shape[1] + 1
    shape = (shape[0], c) + shape[2:]
    pc = (1, c, 1, 1)
    cases.append(("layer_norm", T.layer_norm,
                  [_rand(rng, shape), _rand(rng, pc), _rand(rng, pc)]))

    shape = _random_shape(rng)
    cases.append(("prelu", T.prelu,
                  [_rand(rng, shape, away_from_zero=True),
                   Tensor4(rng.uniform(0.05, 0.5, (1, shape[1], 1, 1)), requires_grad=True)]))

    b, c, h, w = _random_shape(rng)
    c2 = int(rng.integers(1, 5))
    cases.append(("channel_concat", T.channel_concat,
                  [_rand(rng, (b, c, h, w)), _rand(rng, (b, c2, h, w))]))

    b, c, h, w = _random_shape(rng)
    c = max(c, 2)
    cut = int(rng.integers(1, c))
    cases.append(("channel_split", lambda x, cut=cut: T.channel_split(x, cut),
                  [_rand(rng, (b, c, h, w))]))

    shape = _random_shape(rng)
    cases.append(("paired_softmax", T.paired_softmax, [_rand(rng, shape), _rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("ew_mul", T.ew_mul, [_rand(rng, shape), _rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("ew_add", T.ew_add, [_rand(rng, shape), _rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("ew_sub", T.ew_sub, [_rand(rng, shape), _rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("scale", lambda x: T.scale(x, 0.37), [_rand(rng, shape)]))

    shape = _random_shape(rng, even=True)
    cases.append(("downsample2x", T.downsample2x, [_rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("upsample_nearest2x", T.upsample_nearest2x, [_rand(rng, shape)]))
    b, c, h, w = _random_shape(rng)
    up = ConvKernel.init(int(rng.integers(1, 5)), c, 1, rng)
    cases.append(("upsample2x", lambda x, *_, up=up: T.upsample2x(x, up),
                  [_rand(rng, (b, c, h, w))] + up.parameters()))

    shape = _random_shape(rng)
    cases.append(("sum_all", T.sum_all, [_rand(rng, shape)]))
    shape = _random_shape(rng)
    cases.append(("rms_diff", T.rms_diff, [_rand(rng, shape), _rand(rng, shape)]))
    return cases


def _sfm_cases(rng) -> list:
    from .modulation import block_1x1, block_kxk, gmm_forward, lmm_forward, sfm_forward, sfm_init

    cases = []
    c = 3
    shape = (2, c, 6, 6)
    p = sfm_init(c, kernel_size=3, blocks_gmm=1, blocks_lmm=1, seed=int(rng.integers(1 << 31)))
    _jitter(p.parameters(), rng)
    gmm, lmm = p.stages
    b1 = gmm.blocks[0]
    cases.append(("block_1x1", lambda x, *_: block_1x1(x, b1),
                  [_rand(rng, (2, 2 * c, 5, 5))] + b1.parameters()))
    bk = lmm.blocks[0]
    cases.append(("block_kxk", lambda x, *_: block_kxk(x, bk),
                  [_rand(rng, (2, 2 * c, 5, 5))] + bk.parameters()))
    cases.append(("gmm_forward", lambda fn, fr, *_: _pair(gmm_forward(fn, fr, gmm)),
                  [_rand(rng, shape), _rand(rng, shape)] + gmm.parameters()))
    cases.append(("lmm_forward", lambda fn, fr, *_: _pair(lmm_forward(fn, fr, lmm)),
                  [_rand(rng, shape), _rand(rng, shape)] + lmm.parameters()))
    cases.append(("sfm_forward", lambda fn, fr, *_: sfm_forward(fn, fr, p),
                  [_rand(rng, shape), _rand(rng, shape)] + p.parameters()))
    return cases


def _pair(w):
    return (w.w_n, w.w_r)


def _jitter(params, rng, amount=0.3):
    # move norm/activation parameters off their symmetric init values
    for t in params:
        t.data[...] = t.data + amount * rng.standard_normal(t.shape)


def _net_cases(rng) -> list:
    from .net import NetConfig, net_forward, net_init
    from .losses import gt_pyramid, multiscale_loss

    cases = []
    for mode in ("single", "sum", "sfm"):
        cfg = NetConfig(scales=2, base_channels=4, blocks_per_scale=1, fusion_mode=mode,
                        sfm_kernel_size=3, seed=int(rng.integers(1 << 31)))
        net = net_init(cfg)
        _jitter(net.parameters(), rng, amount=0.1)
        rgb = Tensor4(rng.uniform(0, 1, (1, 3, 8, 8)))
        nir = Tensor4(rng.uniform(0, 1, (1, 1, 8, 8)))
        gt = gt_pyramid(Tensor4(rng.uniform(0, 1, (1, 3, 8, 8))), net.n_outputs)

        def fn(*_, net=net, rgb=rgb, nir=nir, gt=gt):
            return multiscale_loss(net_forward(net, rgb, nir), gt)

        cases.append((f"net fusion={mode}", fn, net.parameters()))
    return cases


SCOPES = {"ops": (_op_cases, OPS_TOL), "sfm": (_sfm_cases, OPS_TOL), "net": (_net_cases, NET_TOL)}


def run(scope: str, seed: int = 0, max_elements: int | None = None,
        report: Callable[[str], None] | None = None) -> List[CheckResult]:
    """Run every gradient check in ``scope`` ("ops", "sfm" or "net")."""
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)}")
    build, tol = SCOPES[scope]
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in build(rng):
        t0 = time.perf_counter()
        err, n = finite_difference_check(fn, inputs, rng, max_elements=max_elements)
        res = CheckResult(name, err, n, tol)
        results.append(res)
        if report is not None:
            status = "PASS" if res.passed else "FAIL"
            report(f"{status}  {name:<24s} max_rel_err={err:.3e}  n={n}  "
                   f"({time.perf_counter() - t0:.2f}s)")
    return results
