import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from binarch import data as D
from binarch import functional as F
from binarch.binary import binary_dot, pack_signs, packed_conv_counts
from binarch.cell import softmax_np
from binarch.cost import count_conv
from binarch.genotype import parse, random_genotype, serialize
from binarch.tensor import Tensor

from oracles import conv2d_loops, sign_pm1

seeds = st.integers(0, 2 ** 31 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(1, 300))
def test_binary_dot_equals_signed_dot(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n)
    assert binary_dot(pack_signs(a), pack_signs(b), n) == int(sign_pm1(a) @ sign_pm1(b))


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from([1, 2, 3]), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]),
       st.sampled_from([1, 2]), st.integers(1, 9))
def test_packed_counts_match_loops(seed, g, k, d, stride, cg):
    rng = np.random.default_rng(seed)
    size = d * (k - 1) + 1 + int(rng.integers(0, 4))
    xs = sign_pm1(rng.normal(size=(1, g * cg, size, size)))
    ws = sign_pm1(rng.normal(size=(g, cg, k, k)))
    pad = d * (k - 1) // 2
    assert np.array_equal(packed_conv_counts(xs, ws, stride, pad, d, g), conv2d_loops(xs, ws, stride, pad, d, g))


@settings(max_examples=60, deadline=None)
@given(seeds, st.sampled_from([1, 2]), st.sampled_from([1, 3]), st.integers(4, 9))
def test_conv_macs_match_output_size(seed, g, k, size):
    rng = np.random.default_rng(seed)
    cin, cout = 2 * g, g * int(rng.integers(1, 3))
    x = rng.normal(size=(1, cin, size, size))
    w = rng.normal(size=(cout, cin // g, k, k))
    y = F.conv2d(Tensor(x), Tensor(w), None, 1, k // 2, 1, g)
    assert count_conv((cin, size, size), cout, k, 1, k // 2, 1, g) == y.data[0].size * k * k * cin // g


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(0.05, 5.0))
def test_softmax_is_distribution_and_shift_invariant(logits, t):
    a = np.array(logits)
    p = softmax_np(a, t)
    assert abs(p.sum() - 1.0) <= 1e-12 and np.all(p >= 0)
    assert np.allclose(softmax_np(a + 3.0, t), p, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(1, 6))
def test_genotype_round_trip(seed, nodes):
    g = random_genotype(nodes, np.random.default_rng(seed))
    assert parse(serialize(g)) == g


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 8), st.integers(1, 32))
def test_cutout_zero_count(seed, n, length):
    rng = np.random.default_rng(seed)
    out = D.cutout(np.ones((n, 1, 32, 32)), length, rng)
    # the clipped square never exceeds length^2 and is never empty
    zeros = (out == 0).reshape(n, -1).sum(axis=1)
    assert np.all(zeros <= length * length) and np.all(zeros >= ((length + 1) // 2) ** 2)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.05, 0.95), st.integers(2, 200))
def test_split_partitions(seed, frac, n):
    ds = D.Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.zeros(n, int), 1)
    a, b = D.split(ds, frac, seed)
    ids = np.concatenate([a.images.ravel(), b.images.ravel()])
    assert sorted(ids.tolist()) == list(range(n)) and len(a) == round(frac * n)
