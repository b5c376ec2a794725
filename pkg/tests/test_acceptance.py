"""Acceptance criteria C1-C9 at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary and when
run as a script). Expensive searches and trainings are cached per session and
shared between criteria: the T=0.2 bin-proposed searches feed C3, C4, C5 and C6.
"""

import functools
import math
import time

import numpy as np
import pytest

from binarch import selftest
from binarch.binary import ScaleFactor, binary_conv2d
from binarch.cell import ArchParams, NetworkConfig, SearchCell, mixed_edge_forward, mixing_weights
from binarch.cost import RESNET18_TOTAL_FLOPS, reference_imagenet, resnet18_stem
from binarch.config import RunConfig
from binarch.data import decode_cifar, encode_cifar, synthetic_cifar
from binarch.genotype import EvalNetwork, parse, random_genotype, serialize
from binarch.ops import MODES, OP_ORDER, GroupConfig, OpKind, make_op
from binarch.search import SearchDiverged, run_search
from binarch.tensor import Tensor, backward, default_dtype
from binarch.train import two_phase_train_eval

from conftest import away_from, grad_check
from oracles import central_diff, conv2d_loops, rel_err, sign_pm1, softmax_exact
from test_tensor import GRAD_CASES

RESULTS: list[str] = []
SEEDS = (0, 1, 2)
CONV_KINDS = [k for k in OP_ORDER if k.is_conv]


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)


# shared experiment runs --------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def desk_data():
    return RunConfig.desk().datasets()


@functools.lru_cache(maxsize=None)
def search(mode: str, temperature: float, seed: int):
    """Derived genotype of one desk-scale search, or None if it diverged."""
    overrides = [f"seed={seed}"]
    if temperature != 0.2:
        overrides += [f"search.t_normal={temperature}", f"search.t_reduce={temperature}"]
    cfg = RunConfig.desk().with_overrides(overrides)
    search_ds, _, _ = desk_data()
    try:
        return run_search(cfg.search_config(2), search_ds, MODES[mode], seed).genotype
    except SearchDiverged:
        return None


@functools.lru_cache(maxsize=None)
def evaluate_genotype(text: str, seed: int = 0) -> dict:
    """Identical two-phase protocol for every genotype: binary activations, then binary weights."""
    cfg = RunConfig.desk()
    _, train, test = desk_data()
    with default_dtype(cfg.dtype):
        net = EvalNetwork(parse(text), cfg.network_config(2), np.random.default_rng(seed))
    try:
        return two_phase_train_eval(net, train, test, cfg.train_config(), np.random.default_rng(seed))
    except FloatingPointError:
        return {"acc_binary_act": math.nan, "acc_fully_binary": math.nan, "gap_points": math.nan}


def proposed(seed):
    return search("bin-proposed", 0.2, seed)


def conv_skip_fractions(genotypes):
    conv = np.mean([g.op_fraction(CONV_KINDS) for g in genotypes])
    skip = np.mean([g.op_fraction([OpKind.IDENTITY]) for g in genotypes])
    return conv, skip


# C1 ------------------------------------------------------------------------------


def test_c1_kernel_oracle_equivalence():
    t0 = time.perf_counter()
    cases = list(selftest.kernel_cases(1000, seed=2024))
    bad = [c for c in cases if not selftest.check_kernel_case(c)]
    took = time.perf_counter() - t0
    groups = {c["groups"] for c in cases}
    ok = not bad and took < 120 and groups == {1, 2, 3, 12}
    report("C1", ok, f"{len(cases) - len(bad)}/{len(cases)} configs bit-exact in {took:.1f}s")
    assert ok


# C2 ------------------------------------------------------------------------------


def _extra_grad_cases():
    """Cases beyond the primitive suite: STE paths, scale factors, mixed edges and whole cells.

    Whole cells hold many ReLU/PReLU kinks, so their central differences use a 1e-6 step.
    """
    out = []
    for seed in range(4):
        rng = np.random.default_rng(100 + seed)
        x = away_from(rng.normal(size=(2, 4, 5, 5)) * 1.2, (-1.0, 1.0), 0.02)
        w = away_from(rng.normal(size=(4, 2, 3, 3)), (0.0,), 0.02)
        a = rng.uniform(0.5, 1.5, 4)

        def ste_case(x=x, w=w, a=a, seed=seed):
            # the STE input gradient equals the true gradient of the hardtanh surrogate
            xt = Tensor(x.copy(), requires_grad=True)
            y = binary_conv2d(xt, Tensor(w), ScaleFactor(4, a), groups=2, padding=1, packed=False)
            probe = np.random.default_rng(seed).normal(size=y.shape)
            backward((y * Tensor(probe)).sum())
            ref = central_diff(lambda: float((conv2d_loops(np.clip(x, -1, 1), sign_pm1(w), 1, 1, 1, 2)
                                              * a.reshape(1, -1, 1, 1) * probe).sum()), x, 1e-6)
            return rel_err(xt.grad, ref)

        def scale_case(x=x, w=w):
            sf = ScaleFactor(4)

            def build(t):
                sf.raw = t[0]
                return binary_conv2d(Tensor(x), Tensor(w), sf, groups=2, dilation=2, padding=2)
            return grad_check(build, [np.array([0.7, -1.3, 0.4, 2.0])])

        def edge_case(seed=seed):
            r = np.random.default_rng(200 + seed)
            ops = [make_op(k, 6, 1, MODES["real"], GroupConfig(3), r) for k in OP_ORDER]
            return grad_check(lambda l: mixed_edge_forward(l[0], ops, l[1], (0.2, 1.0)[seed % 2]),
                              [r.normal(size=(2, 6, 4, 4)), r.normal(size=8)])

        def cell_case(seed=seed):
            r = np.random.default_rng(300 + seed)
            arch = ArchParams.initial(2, r, 0.5)
            cfg = NetworkConfig(init_channels=6, n_nodes=2, groups=GroupConfig(3), mode=MODES["real"])
            cell = SearchCell(arch, 6, 6, 6, bool(seed % 2), False, cfg, r)
            return grad_check(lambda l: cell(l[0], l[1], mixing_weights(l[2], 0.2)),
                              [r.normal(size=(2, 6, 4, 4)), r.normal(size=(2, 6, 4, 4)),
                               arch.alpha[bool(seed % 2)].data.copy()], eps=1e-6)

        def binary_cell_alpha_case(seed=seed):
            r = np.random.default_rng(400 + seed)
            arch = ArchParams.initial(1, r, 0.5)
            cfg = NetworkConfig(init_channels=6, n_nodes=1, groups=GroupConfig(3), mode=MODES["bin-proposed"])
            cell = SearchCell(arch, 6, 6, 6, False, False, cfg, r)
            s0, s1 = Tensor(r.normal(size=(2, 6, 4, 4))), Tensor(r.normal(size=(2, 6, 4, 4)))
            return grad_check(lambda l: cell(s0, s1, mixing_weights(l[0], 0.2)), [arch.alpha_normal.data.copy()],
                              eps=1e-6)

        out += [("sign_ste", ste_case), ("scale_factor", scale_case), ("mixed_edge", edge_case),
                ("search_cell", cell_case), ("binary_cell_alpha", binary_cell_alpha_case)]
    return out


def test_c2_gradient_suite():
    t0 = time.perf_counter()
    errors = [(name, grad_check(build, arrays)) for name, build, arrays in GRAD_CASES]
    errors += [(name, fn()) for name, fn in _extra_grad_cases()]
    took = time.perf_counter() - t0
    worst = max(errors, key=lambda e: e[1])
    failed = [n for n, e in errors if not e <= 1e-4]
    ok = not failed and len(errors) >= 100 and took < 300
    report("C2", ok, f"{len(errors) - len(failed)}/{len(errors)} cases within 1e-4 "
                     f"(worst {worst[1]:.1e} in {worst[0]}) in {took:.0f}s")
    assert ok, failed


# C3 ------------------------------------------------------------------------------


def test_c3a_temperature_grid_properties():
    rng = np.random.default_rng(7)
    temps = [0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0]
    bad = 0
    rows = 0
    for _ in range(500):
        a = rng.normal(size=8) * rng.uniform(0.1, 3.0)
        top = np.sort(a)
        if top[-1] - top[-2] < 1e-6:
            continue
        rows += 1
        probs = [np.array(softmax_exact(a.tolist(), t)) for t in temps]
        pmax = [p.max() for p in probs]
        if any(int(p.argmax()) != int(a.argmax()) for p in probs):
            bad += 1
        elif not all(x > y + 1e-12 or abs(x - 1.0) <= 1e-9 for x, y in zip(pmax, pmax[1:])):
            bad += 1
    ok = bad == 0
    report("C3a", ok, f"argmax invariant and max-prob decreasing in T on {rows - bad}/{rows} logit rows")
    assert ok


@pytest.mark.slow
def test_c3b_low_temperature_favours_convs():
    low = [proposed(s) for s in SEEDS]
    high = [search("bin-proposed", 1.0, s) for s in SEEDS]
    ok_runs = all(g is not None for g in low + high)
    if not ok_runs:
        report("C3b", False, "a search diverged")
        pytest.fail("a search diverged")
    conv_lo, skip_lo = conv_skip_fractions(low)
    conv_hi, skip_hi = conv_skip_fractions(high)
    ok = skip_lo < skip_hi and conv_lo > conv_hi
    report("C3b", ok, f"T=0.2 conv {conv_lo:.3f} skip {skip_lo:.3f} vs T=1.0 conv {conv_hi:.3f} "
                      f"skip {skip_hi:.3f} (need skip strictly lower and conv strictly higher)")
    assert ok


# C4 ------------------------------------------------------------------------------


def _mode_accuracies(mode):
    accs, diverged = [], 0
    for s in SEEDS:
        g = proposed(s) if mode == "bin-proposed" else search(mode, 0.2, s)
        if g is None:
            diverged += 1
            continue
        acc = evaluate_genotype(serialize(g))["acc_fully_binary"]
        if math.isnan(acc):
            diverged += 1
        else:
            accs.append(acc)
    return accs, diverged


@pytest.mark.slow
def test_c4_search_strategy_ablation():
    res = {m: _mode_accuracies(m) for m in ("bin-proposed", "bin-w-real-a", "bin-full")}
    mean = {m: (float(np.mean(a)) if a else -math.inf) for m, (a, _) in res.items()}
    prop_accs, prop_div = res["bin-proposed"]
    proposed_ok = prop_div == 0 and mean["bin-proposed"] >= max(mean["bin-w-real-a"], mean["bin-full"])
    full_unstable = res["bin-full"][1] >= 1 or mean["bin-full"] < min(mean["bin-proposed"], mean["bin-w-real-a"])
    ok = proposed_ok and full_unstable
    detail = ", ".join(f"{m} mean {100 * mean[m]:.1f}% ({res[m][1]} diverged)" for m in res)
    report("C4", ok, detail)
    assert ok


# C5 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_c5_derived_beats_random():
    derived = [evaluate_genotype(serialize(proposed(s)))["acc_fully_binary"] for s in SEEDS]
    randoms = [evaluate_genotype(serialize(random_genotype(2, np.random.default_rng(1000 + i))))["acc_fully_binary"]
               for i in range(5)]
    d, r = float(np.nanmean(derived)), float(np.nanmean(randoms))
    ok = d >= r
    report("C5", ok, f"derived mean {100 * d:.1f}% vs random mean {100 * r:.1f}%")
    assert ok


# C6 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_weight_binarization_gap():
    gaps = [evaluate_genotype(serialize(proposed(s)))["gap_points"] for s in SEEDS]
    ok = all(g <= 5.0 for g in gaps)
    report("C6", ok, "gaps " + ", ".join(f"{g:.1f}" for g in gaps) + " points (need each <= 5)")
    assert ok


# C7 ------------------------------------------------------------------------------


def test_c7a_resnet_stem():
    macs = resnet18_stem().flops
    ratio = macs / RESNET18_TOTAL_FLOPS
    ok = macs == 49 * 3 * 64 * 112 * 112 and 0.06 <= ratio <= 0.07
    # the commonly quoted 117,964,800 is not equal to 49*3*64*112*112; the formula value is asserted
    report("C7a", ok, f"stem {macs:,} MACs = 49*3*64*112*112, ratio {100 * ratio:.2f}%")
    assert ok


def test_c7b_imagenet_cost():
    rep = reference_imagenet()
    df, db = rep.flops / 0.805e8 - 1, rep.bops / 1.149e9 - 1
    ok = abs(df) <= 0.2 and abs(db) <= 0.2
    report("C7b", ok, f"FLOPs {rep.flops / 1e8:.3f}e8 ({100 * df:+.1f}%), BOPs {rep.bops / 1e9:.3f}e9 "
                      f"({100 * db:+.1f}%)")
    assert ok


# C8 ------------------------------------------------------------------------------


def test_c8_search_determinism(tmp_path, capsys):
    from binarch.cli import main
    argv = ["search", "--synthetic", "--seed", "11", "--threads", "1", "--set", "search.epochs=2",
            "--set", "search.warmup_epochs=1", "--set", "data.n_images=400"]
    blobs = []
    for name in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / name)]) == 0
        blobs.append([(tmp_path / name / f).read_bytes() for f in ("genotype.json", "metrics.csv")])
    capsys.readouterr()
    ok = blobs[0] == blobs[1] and len(blobs[0][1]) > 0
    report("C8", ok, "two single-thread searches with seed 11 wrote byte-identical genotype and metrics files")
    assert ok


# C9 ------------------------------------------------------------------------------


def test_c9_round_trips(tmp_path):
    rng = np.random.default_rng(99)
    gen_ok = sum(parse(serialize(g)) == g for g in (random_genotype(int(rng.integers(1, 6)), rng)
                                                  for _ in range(1000)))
    imgs, labels = synthetic_cifar(64, seed=5)
    raw = encode_cifar(imgs, labels)
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(raw)
    rec = np.frombuffer(path.read_bytes(), np.uint8).reshape(-1, 3073)
    dec_i, dec_l = decode_cifar(path.read_bytes())
    cifar_ok = (len(raw) == 64 * 3073 and np.array_equal(dec_l, rec[:, 0]) and np.array_equal(dec_l, labels)
                and np.array_equal(dec_i.reshape(64, -1), rec[:, 1:]) and np.array_equal(dec_i, imgs))
    ok = gen_ok == 1000 and cifar_ok
    report("C9", ok, f"{gen_ok}/1000 genotype round-trips; CIFAR records bit-exact: {cifar_ok}")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
