"""Finite-difference checks over every differentiable op and composite block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, comprehensive_attention, lwsa
from .gradcheck import GradCheckReport, gradient_check
from .ksco import KSCO, Aggregate
from .nn_ops import conv2d, pool2d, resize_bilinear
from .stet import STET, TextureFFN
from .stft import STFT
from .tensor import Tensor
from .training import dice_loss

MODULES = ("core", "ksco", "attention", "stft", "stet", "loss", "model")
F64 = np.float64


@dataclass
class Case:
    name: str
    module: str
    build: Callable[[np.random.Generator], tuple[Callable, list]]
    max_coords: int | None = None
    expect_fail: bool = False
    # large graphs sum many terms; a wider step keeps cancellation noise below
    # the tiny per-coordinate gradients (kinks are frozen, so this is safe)
    eps_scale: float = 1.0


@dataclass
class CaseResult:
    name: str
    module: str
    report: GradCheckReport
    seconds: float
    expect_fail: bool = False

    @property
    def ok(self) -> bool:
        return self.report.passed != self.expect_fail


def _get_path(obj, path: str):
    for part in path.split("."):
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj


def _set_path(obj, path: str, value) -> None:
    head, _, last = path.rpartition(".")
    parent = _get_path(obj, head) if head else obj
    if last.isdigit():
        parent[int(last)] = value
    else:
        setattr(parent, last, value)


def module_case(module, inputs: list[np.ndarray], loss: Callable, params: list[str] | None = None):
    """Check ``loss(module, *inputs)`` w.r.t. the inputs and the named parameters."""
    params = params if params is not None else [n for n, _ in module.named_parameters()]
    values = list(inputs) + [_get_path(module, n).data for n in params]
    n_in = len(inputs)

    def f(*tensors):
        for name, t in zip(params, tensors[n_in:]):
            _set_path(module, name, t)
        return loss(module, *tensors[:n_in])

    return f, values


def _mean(fn):
    return lambda *xs: fn(*xs).mean()


def _weighted(shape_out, rng):
    """Scalarize by a fixed random projection so every output coordinate matters."""
    w = Tensor(rng.normal(size=shape_out))
    return lambda y: (y * w).sum()


# ---------------------------------------------------------------------------
# core primitives

def _unary(op, positive=False):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        proj = _weighted((3, 4), rng)
        return (lambda a: proj(op(a))), [x]
    return build


def _binary(op, safe_b=False):
    def build(rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 1)) if not safe_b else np.sign(rng.normal(size=(3, 1))) * (1 + rng.random((3, 1)))
        proj = _weighted((2, 3, 4), rng)
        return (lambda x, y: proj(op(x, y))), [a, b]
    return build


def _core_cases() -> list[Case]:
    cases = [
        Case("add", "core", _binary(T.add)),
        Case("sub", "core", _binary(T.sub)),
        Case("mul", "core", _binary(T.mul)),
        Case("div", "core", _binary(T.div, safe_b=True)),
        Case("exp", "core", _unary(T.exp)),
        Case("abs", "core", _unary(T.absolute)),
        Case("negate", "core", _unary(T.neg)),
        Case("sigmoid", "core", _unary(T.sigmoid)),
        Case("relu", "core", _unary(T.relu)),
        Case("log", "core", _unary(T.log, positive=True)),
        Case("scalar-ops", "core", _unary(lambda a: (a * 2.5 - 1.0) / 3.0 + 0.5)),
    ]

    def matmul(rng):
        proj = _weighted((3, 2), rng)
        return (lambda a, b: proj(a @ b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]

    def softmax(rng):
        proj = _weighted((5,), rng)
        return (lambda a: proj(T.softmax(a, axis=0))), [rng.normal(size=5)]

    def softmax_rows(rng):
        proj = _weighted((3, 4), rng)
        return (lambda a: proj(T.softmax(a, axis=-1))), [rng.normal(size=(3, 4))]

    def conv(stride, pad, dil, k, size):
        def build(rng):
            x = rng.normal(size=(2, size, size))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            return _mean(lambda x, w, b: T.sigmoid(conv2d(x, w, b, stride, pad, dil))), [x, w, b]
        return build

    def pool(kind, win, stride):
        def build(rng):
            x = rng.normal(size=(2, 2, 4, 4))
            return _mean(lambda a: T.exp(pool2d(kind, a, win, stride))), [x]
        return build

    def resize(rng):
        proj = _weighted((1, 8, 8), rng)
        return (lambda a: proj(resize_bilinear(a, factor=2))), [rng.normal(size=(1, 4, 4))]

    def resize_odd(rng):
        proj = _weighted((2, 5, 3), rng)
        return (lambda a: proj(resize_bilinear(a, size=(5, 3)))), [rng.normal(size=(2, 3, 4))]

    def movement(rng):
        proj = _weighted((4, 6), rng)

        def f(a, b):
            c = T.concat([a, b], axis=0)                    # 6×4
            return proj(c.reshape(4, 6).permute(1, 0).reshape(6, 4).permute(1, 0))
        return f, [rng.normal(size=(2, 4)), rng.normal(size=(4, 4))]

    def reductions(rng):
        def f(a):
            return (a.sum(axis=0) * a.mean(axis=1, keepdims=True)).sum() + a.max(axis=1).sum() \
                + a.min(axis=(0, 2)).sum() + a.max() - a.min()
        return f, [rng.normal(size=(3, 4, 2))]

    def indexing(rng):
        proj = _weighted((2, 3), rng)
        return (lambda a: proj(a[1:3, ::2])), [rng.normal(size=(4, 6))]

    cases += [
        Case("matmul", "core", matmul),
        Case("softmax", "core", softmax),
        Case("softmax-rows", "core", softmax_rows),
        Case("conv2d-3x3-pad1", "core", conv(1, 1, 1, 3, 5)),
        Case("conv2d-dil2-7x7", "core", conv(1, 2, 2, 3, 7)),
        Case("conv2d-stride2", "core", conv(2, 1, 1, 3, 5)),
        Case("conv2d-1x1", "core", conv(1, 0, 1, 1, 4)),
        Case("avgpool", "core", pool("avg", 2, 2)),
        Case("maxpool", "core", pool("max", 2, 2)),
        Case("global-avgpool", "core", pool("global-avg", None, None)),
        Case("resize-x2", "core", resize),
        Case("resize-size", "core", resize_odd),
        Case("concat-reshape-permute", "core", movement),
        Case("reductions", "core", reductions),
        Case("getitem", "core", indexing),
    ]
    return cases


# ---------------------------------------------------------------------------
# composites

def _ksco_cases() -> list[Case]:
    def aggregate(rng):
        mod = Aggregate(rng, 4, F64)
        return module_case(mod, [rng.normal(size=(4, 5, 5))], lambda m, x: m(x).mean())

    def pipeline(rng):
        mod = KSCO(rng, 4, 8, dtype=F64)
        return module_case(mod, [rng.normal(size=(4, 6, 6))], lambda m, x: m(x).s.mean())

    def batched(rng):
        mod = KSCO(rng, 3, 6, dtype=F64)
        return module_case(mod, [rng.normal(size=(2, 3, 4, 4))], lambda m, x: m(x).s.mean())

    return [Case("aggregate", "ksco", aggregate), Case("ksco-pipeline", "ksco", pipeline),
            Case("ksco-batched", "ksco", batched)]


def _attention_cases() -> list[Case]:
    def ca(rng):
        proj = _weighted((2, 3, 3), rng)
        return (lambda x: proj(comprehensive_attention(x))), [rng.normal(size=(2, 3, 3))]

    def lwsa_self(rng):
        mod = AttentionParams(rng, 2, 2, 2, F64)
        proj = _weighted((2, 4, 4), rng)
        return module_case(mod, [rng.normal(size=(2, 4, 4))], lambda m, x: proj(lwsa(x, x, x, m)))

    def lwsa_cross(rng):
        mod = AttentionParams(rng, 4, 2, 2, F64)
        proj = _weighted((4, 4, 4), rng)
        shape = (4, 4, 4)
        return module_case(mod, [rng.normal(size=shape) for _ in range(3)],
                           lambda m, q, k, v: proj(lwsa(q, k, v, m)))

    return [Case("comprehensive-attention", "attention", ca), Case("lwsa-self", "attention", lwsa_self),
            Case("lwsa-cross", "attention", lwsa_cross)]


def _stft_cases() -> list[Case]:
    def stft(gating, ca):
        def build(rng):
            mod = STFT(rng, 4, 6, heads=2, window=2, enable_ca=ca, enable_gating=gating, dtype=F64)
            return module_case(mod, [rng.normal(size=(4, 4, 4))], lambda m, x: m(x)[0].mean())
        return build

    return [Case("stft", "stft", stft(True, True)), Case("stft-no-gating", "stft", stft(False, True)),
            Case("stft-no-ca", "stft", stft(True, False))]


def _stet_cases() -> list[Case]:
    def tffn(rng):
        mod = TextureFFN(rng, 4, dtype=F64)
        proj = _weighted((4, 5, 5), rng)
        return module_case(mod, [rng.normal(size=(4, 5, 5))], lambda m, x: proj(m(x)))

    def _stet_module(rng, enable_tffn=True):
        # bottleneck 2×2 with 4 levels → Q grid 4×4; encoder scales 16/8/4
        q_op = KSCO(rng, 3, 4, dtype=F64)
        mod = STET(rng, 4, (2, 2, 2), 4, heads=2, window=2, enable_tffn=enable_tffn, dtype=F64)
        mod.q_op = q_op
        shapes = [(3, 2, 2), (2, 16, 16), (2, 8, 8), (2, 4, 4)]
        return mod, [rng.normal(size=s) for s in shapes]

    def msee(rng):
        mod, inputs = _stet_module(rng)

        def loss(m, b, e1, e2, e3):
            q, k, _ = m.multiscale_embedding(m.q_op(b), [e1, e2, e3])
            return q.mean() + k.mean()
        return module_case(mod, inputs, loss)

    def stet(enable_tffn):
        def build(rng):
            mod, inputs = _stet_module(rng, enable_tffn)
            proj = _weighted((4, 4, 4), rng)
            return module_case(mod, inputs, lambda m, b, e1, e2, e3: proj(m(m.q_op(b), [e1, e2, e3])))
        return build

    def stet_desk(rng):
        # desk config shapes: 8×8 bottleneck (16 levels), encoder 8@64², 16@32², 32@16², d_model 8, window 4
        q_op = KSCO(rng, 64, 16, dtype=F64)
        mod = STET(rng, 16, (8, 16, 32), 8, heads=2, window=4, dtype=F64)
        mod.q_op = q_op
        shapes = [(64, 8, 8), (8, 64, 64), (16, 32, 32), (32, 16, 16)]
        proj = _weighted((8, 16, 16), rng)
        return module_case(mod, [rng.normal(size=s) for s in shapes],
                           lambda m, b, e1, e2, e3: proj(m(m.q_op(b), [e1, e2, e3])))

    return [Case("texture-ffn", "stet", tffn), Case("multiscale-embedding", "stet", msee, max_coords=40),
            Case("stet", "stet", stet(True), max_coords=40), Case("stet-no-tffn", "stet", stet(False), max_coords=40),
            Case("stet-desk-shapes", "stet", stet_desk, max_coords=12, eps_scale=10.0)]


def _model_cases() -> list[Case]:
    def tiny(rng):
        from .config import ModelConfig
        from .model import TextureUNet
        cfg = ModelConfig(input_size=(16, 16), base_channels=2, depth=3, n_levels_stft=4, n_levels_stet=4,
                          heads=2, window=2, seed=int(rng.integers(1 << 30)))
        mod = TextureUNet(cfg, F64)
        target = (rng.random((1, 1, 16, 16)) > 0.5).astype(float)
        return module_case(mod, [rng.random((1, 3, 16, 16))], lambda m, x: dice_loss(T.sigmoid(m(x)), target))

    return [Case("model-tiny", "model", tiny, max_coords=25, eps_scale=10.0)]


def _loss_cases() -> list[Case]:
    def dice(rng):
        target = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        return (lambda z: dice_loss(T.sigmoid(z), target)), [rng.normal(size=(2, 1, 4, 4))]

    def dice_flat(rng):
        target = (rng.random(6) > 0.5).astype(float)
        return (lambda p: dice_loss(p, target)), [rng.random(6)]

    return [Case("dice-loss", "loss", dice), Case("dice-loss-prob", "loss", dice_flat)]


class _BrokenSquare:
    """x² whose registered gradient is x instead of 2x (negative control)."""

    @staticmethod
    def apply(a: Tensor) -> Tensor:
        return Tensor._make(a.data ** 2, (a,), lambda g: (g * a.data,), "broken-square")


def negative_control() -> Case:
    return Case("broken-square", "core", lambda rng: ((lambda a: _BrokenSquare.apply(a).sum()), [rng.normal(size=4)]),
                expect_fail=True)


def all_cases() -> list[Case]:
    return _core_cases() + _ksco_cases() + _attention_cases() + _stft_cases() + _stet_cases() + _loss_cases() + _model_cases()


def run_suite(module: str = "all", tol: float = 1e-4, eps: float = 1e-5, seed: int = 0,
              include_negative: bool = False) -> list[CaseResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from all, {', '.join(MODULES)}")
    cases = [c for c in all_cases() if module in ("all", c.module)]
    if include_negative:
        cases.append(negative_control())
    results = []
    for i, case in enumerate(cases):
        rng = np.random.default_rng([seed, i])
        f, inputs = case.build(rng)
        start = time.perf_counter()
        report = gradient_check(f, inputs, eps=eps * case.eps_scale, tol=tol, max_coords=case.max_coords, seed=seed)
        results.append(CaseResult(case.name, case.module, report, time.perf_counter() - start, case.expect_fail))
    return results


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'module':<10} {'operation':<26} {'max_rel_err':>12} {'coords':>7}  status"]
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        if r.expect_fail:
            status += " (expected)" if not r.report.passed else " (UNEXPECTED)"
        lines.append(f"{r.module:<10} {r.name:<26} {r.report.max_rel_error:>12.3e} {r.report.n_coords:>7}  {status}")
    return "\n".join(lines)
