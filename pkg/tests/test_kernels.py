import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperens import kernels

BACKENDS = kernels.backends()


def naive_conv(x, k, stride):
    b, h, w, ci = x.shape
    l, co = k.shape[0], k.shape[3]
    ho, wo = (h - l) // stride + 1, (w - l) // stride + 1
    out = np.zeros((b, ho, wo, co))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                patch = x[n, i * stride:i * stride + l, j * stride:j * stride + l, :]
                out[n, i, j] = np.tensordot(patch, k, axes=3)
    return out


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_compiled_backend_built():
    assert "cython" in BACKENDS, "extension missing: run `python setup.py build_ext --inplace`"


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_loops(impl, gen, stride):
    x, k = gen.normal(size=(2, 7, 6, 3)), gen.normal(size=(3, 3, 3, 4))
    np.testing.assert_allclose(kernels.conv2d_forward(x, k, stride, impl=impl),
                               naive_conv(x, k, stride), atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_is_adjoint(impl, gen, stride):
    # <conv(x, k), g> is bilinear, so both backward maps are its partial adjoints
    x, k = gen.normal(size=(2, 7, 7, 2)), gen.normal(size=(3, 3, 2, 3))
    out = naive_conv(x, k, stride)
    g = gen.normal(size=out.shape)
    gk = kernels.conv2d_backward_kernel(x, g, 3, stride, impl=impl)
    gx = kernels.conv2d_backward_input(g, k, x.shape, stride, impl=impl)
    assert np.isclose(np.sum(gk * k), np.sum(out * g), atol=1e-10)
    assert np.isclose(np.sum(gx * x), np.sum(out * g), atol=1e-10)
    e = np.zeros_like(k)
    e[1, 2, 0, 1] = 1.0
    assert np.isclose(gk[1, 2, 0, 1], np.sum(naive_conv(x, e, stride) * g), atol=1e-10)


@given(st.integers(1, 5), st.integers(1, 30), st.integers(0, 4), st.integers(0, 2**31))
def test_greedy_scores_backends_agree(m, n, count, seed):
    g = np.random.default_rng(seed)
    probs = g.uniform(0.0, 1.0, size=(m, n))
    probs[g.random(probs.shape) < 0.1] = 0.0
    running = g.uniform(0.0, count, size=n) if count else np.zeros(n)
    ref = kernels.greedy_scores(probs, running, count, impl=BACKENDS["python"])
    for impl in BACKENDS.values():
        np.testing.assert_allclose(kernels.greedy_scores(probs, running, count, impl=impl), ref,
                                   rtol=1e-12)
    expect = [-np.mean(np.log(np.maximum((running + p) / (count + 1), 1e-12))) for p in probs]
    np.testing.assert_allclose(ref, expect, rtol=1e-12)


def test_backends_agree_on_conv(gen):
    x, k = gen.normal(size=(3, 9, 8, 4)), gen.normal(size=(2, 2, 4, 5))
    g = gen.normal(size=(3, 8, 7, 5))
    outs = [(kernels.conv2d_forward(x, k, impl=i), kernels.conv2d_backward_kernel(x, g, 2, impl=i),
             kernels.conv2d_backward_input(g, k, x.shape, impl=i)) for i in BACKENDS.values()]
    for other in outs[1:]:
        for a, b in zip(outs[0], other):
            np.testing.assert_allclose(a, b, atol=1e-10)


def test_non_contiguous_inputs_accepted(impl, gen):
    x = gen.normal(size=(2, 6, 6, 3)).transpose(0, 2, 1, 3)
    k = gen.normal(size=(3, 3, 3, 2))
    np.testing.assert_allclose(kernels.conv2d_forward(x, k, impl=impl), naive_conv(x, k, 1),
                               atol=1e-12)
