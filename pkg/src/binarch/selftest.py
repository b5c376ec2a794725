"""Quick build check: packed-kernel bit-exactness and finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .binary import ScaleFactor, binary_conv2d, sign
from .nn import BatchNorm2d
from .tensor import Tensor, backward, default_dtype


def kernel_cases(n: int, seed: int = 0) -> Iterator[dict]:
    """Random conv configs over the group/kernel/dilation grid, with word-boundary receptive fields."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        g = int(rng.choice([1, 2, 3, 12]))
        k = int(rng.choice([3, 5]))
        d = int(rng.choice([1, 2]))
        # cg*k*k lands near multiples of 64 for some cases
        cg = int(rng.choice([1, 2, 3, 7, 8, 13])) if i % 2 else int(rng.integers(1, 6))
        og = int(rng.integers(1, 3))
        size = int(rng.integers(d * (k - 1) + 1, d * (k - 1) + 6))
        yield dict(n=int(rng.integers(1, 3)), groups=g, kernel=k, dilation=d, cin=g * cg, cout=g * og,
                   size=size, stride=int(rng.choice([1, 2])), padding=int(rng.integers(0, d * (k - 1) // 2 + 1)),
                   seed=int(rng.integers(2 ** 31)))


def check_kernel_case(c: dict) -> bool:
    """Packed XNOR/popcount path equals float conv on pre-signed operands, bit for bit."""
    rng = np.random.default_rng(c["seed"])
    x = rng.normal(size=(c["n"], c["cin"], c["size"], c["size"]))
    w = rng.normal(size=(c["cout"], c["cin"] // c["groups"], c["kernel"], c["kernel"]))
    alpha = ScaleFactor(c["cout"], 1.0)
    kw = dict(groups=c["groups"], dilation=c["dilation"], stride=c["stride"], padding=c["padding"])
    with default_dtype("float64"):
        got = binary_conv2d(Tensor(x), Tensor(w), alpha, packed=True, **kw).data
        ref = F.conv2d(Tensor(sign(x)), Tensor(sign(w)), None, c["stride"], c["padding"], c["dilation"],
                       c["groups"]).data
    return bool(np.array_equal(got, ref))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


def grad_check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences of ``sum(out * probe)``."""
    with default_dtype("float64"):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(leaves)
        probe = np.random.default_rng(123).normal(size=out.shape)
        loss = (out * Tensor(probe)).sum()
        backward(loss)
        worst = 0.0
        for leaf, arr in zip(leaves, arrays):
            def f():
                with default_dtype("float64"):
                    return float((build([Tensor(a) for a in arrays]).data * probe).sum())
            num = numeric_grad(f, arr, eps)
            worst = max(worst, rel_error(leaf.grad, num))
    return worst


def _grad_suite() -> list[tuple[str, float]]:
    rng = np.random.default_rng(7)
    out = []
    x = rng.normal(size=(2, 6, 5, 5))
    w = rng.normal(size=(6, 2, 3, 3))
    out.append(("conv2d grouped dilated", grad_check(
        lambda t: F.conv2d(t[0], t[1], None, 1, 2, 2, 3), [x.copy(), w.copy()])))
    bn = BatchNorm2d(6)
    out.append(("batch_norm", grad_check(lambda t: bn(t[0]), [x.copy()])))
    out.append(("prelu", grad_check(lambda t: F.prelu(t[0], t[1]), [x.copy(), rng.uniform(0.1, 0.5, 6)])))
    # the sign-STE surrogate is checked through the scale, whose gradient is exact
    a = ScaleFactor(6, rng.uniform(0.5, 1.5, 6))

    def scaled(t):
        a.raw = t[0]
        return binary_conv2d(Tensor(x), Tensor(w), a, groups=3, padding=1, packed=False)

    out.append(("binary conv scale", grad_check(scaled, [rng.uniform(0.5, 1.5, 6)])))
    out.append(("max_pool2d", grad_check(lambda t: F.max_pool2d(t[0], 3, 1, 1), [x.copy()])))
    return out


def run(n_kernel: int = 200, tol: float = 1e-4, log: Callable[[str], None] = print) -> bool:
    ok = True
    bad = [c for c in kernel_cases(n_kernel) if not check_kernel_case(c)]
    log(f"kernel bit-exactness: {n_kernel - len(bad)}/{n_kernel} {'PASS' if not bad else 'FAIL'}")
    ok &= not bad
    for name, err in _grad_suite():
        passed = err <= tol
        ok &= passed
        log(f"gradient {name}: rel err {err:.2e} {'PASS' if passed else 'FAIL'}")
    return bool(ok)
