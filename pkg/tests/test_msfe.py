import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from structnet.errors import ConfigError, ShapeError
from structnet.mfra import AddFusion
from structnet.msfe import (
    ENCODER_KERNELS, GatedBridge, KernelPredictor, MSFEBridge, bridge_msfe, bridge_variant, conv_skip, gated_conv,
    partial_conv, predict_kernel_eta, propagate_mask,
)

ONES3 = torch.ones(1, 1, 3, 3)


def test_worked_examples():
    assert bridge_msfe(torch.ones(1, 1, 3, 3), torch.zeros(1, 1, 3, 3), ONES3)[0, 0, 1, 1].item() == 1.0
    assert (bridge_msfe(torch.rand(1, 1, 3, 3), torch.ones(1, 1, 3, 3), ONES3) == 0).all()
    b = torch.arange(1.0, 10.0).view(1, 1, 3, 3)
    m = torch.zeros(1, 1, 3, 3)
    m[0, 0, 1, 1] = 1
    assert bridge_msfe(b, m, ONES3)[0, 0, 1, 1].item() == 5.0


def test_literal_alpha_flag():
    b = torch.arange(1.0, 10.0).view(1, 1, 3, 3)
    m = torch.zeros(1, 1, 3, 3)
    m[0, 0, 1, 1] = 1
    # numerator 40 over a single shadow position
    assert bridge_msfe(b, m, ONES3, literal_alpha=True)[0, 0, 1, 1].item() == 40.0


def test_loop_oracle_random(rng):
    b = torch.from_numpy(rng.random((1, 2, 6, 6)))
    m = torch.from_numpy((rng.random((1, 1, 6, 6)) < 0.4).astype(float))
    w = torch.from_numpy(rng.standard_normal((3, 2, 3, 3)))
    out = bridge_msfe(b, m, w)
    for o in range(3):
        for i in range(6):
            for j in range(6):
                num = cnt = 0.0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        y, x = i + di, j + dj
                        if not (0 <= y < 6 and 0 <= x < 6) or m[0, 0, y, x] == 1:
                            continue
                        cnt += 1
                        num += sum(float(b[0, c, y, x] * w[o, c, di + 1, dj + 1]) for c in range(2))
                expected = num / cnt if cnt else 0.0
                assert abs(out[0, o, i, j].item() - expected) < 1e-12


def test_shadow_values_ignored(rng):
    b = torch.from_numpy(rng.random((1, 1, 5, 5)))
    m = torch.zeros(1, 1, 5, 5)
    m[0, 0, 1:3, 2:4] = 1
    w = torch.from_numpy(rng.standard_normal((1, 1, 3, 3)))
    b2 = b.clone()
    b2[m.bool()] = 1e3
    assert torch.allclose(bridge_msfe(b, m.double(), w), bridge_msfe(b2, m.double(), w), atol=0, rtol=0)


def test_gradcheck():
    gen = torch.Generator().manual_seed(2)
    b = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    m = (torch.rand(1, 1, 4, 4, generator=gen) < 0.3).double()
    w = torch.randn(1, 1, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda b_, w_: bridge_msfe(b_, m, w_), (b, w), rtol=1e-3)


def test_shape_errors():
    with pytest.raises(ShapeError):
        bridge_msfe(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 5, 4), ONES3)
    with pytest.raises(ShapeError):
        bridge_msfe(torch.ones(1, 2, 4, 4), torch.zeros(1, 1, 4, 4), ONES3)


def test_per_sample_matches_shared(rng):
    b = torch.from_numpy(rng.random((2, 3, 8, 8)))
    m = torch.from_numpy((rng.random((2, 1, 8, 8)) < 0.5).astype(float))
    k = torch.from_numpy(rng.standard_normal((2, 3, 5, 5)))
    out = bridge_msfe(b, m, k, stride=2, per_sample=True)
    assert out.shape == (2, 3, 4, 4)
    for n in range(2):
        for c in range(3):
            ref = bridge_msfe(b[n:n + 1, c:c + 1], m[n:n + 1], k[n, c].view(1, 1, 5, 5), stride=2)
            assert torch.allclose(out[n, c], ref[0, 0], atol=1e-12)


def test_propagate_mask_examples():
    assert not propagate_mask(torch.zeros(1, 1, 8, 8), 3).any()
    m = torch.zeros(1, 1, 4, 4)
    m[0, 0, 1, 1] = 1
    assert propagate_mask(m, 3).tolist() == [[[[1, 1], [1, 1]]]]
    assert propagate_mask(torch.ones(1, 1, 8, 8), 7).eq(1).all()
    assert propagate_mask(torch.ones(1, 1, 8, 8), 5, stride=1).shape == (1, 1, 8, 8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=64, max_size=64), st.integers(0, 63), st.sampled_from(ENCODER_KERNELS))
def test_propagate_mask_monotone(bits, extra, k):
    m = torch.tensor(bits, dtype=torch.float32).view(1, 1, 8, 8)
    m2 = m.clone()
    m2.view(-1)[extra] = 1
    a, b = propagate_mask(m, k), propagate_mask(m2, k)
    assert (b >= a).all()


def test_kernel_predictor_shapes_and_zero_case():
    pred = KernelPredictor(64, 64, 7)
    x = torch.randn(2, 64, 16, 16)
    k = predict_kernel_eta(x, pred)
    assert k.shape == (2, 64, 7, 7)
    with pytest.raises(ShapeError):
        pred(torch.randn(1, 3, 16, 16))
    zero = KernelPredictor(4, 4, 3)
    for p in zero.parameters():
        torch.nn.init.zeros_(p)
    kz = zero(torch.randn(1, 4, 8, 8))
    assert (kz == 0).all()
    out = bridge_msfe(torch.rand(1, 4, 8, 8), torch.zeros(1, 1, 8, 8), kz, per_sample=True)
    assert (out == 0).all()


def test_kernel_depends_on_input():
    pred = KernelPredictor(3, 3, 5)
    a, b = pred(torch.randn(1, 3, 16, 16)), pred(torch.randn(1, 3, 16, 16))
    assert not torch.allclose(a, b)


def test_msfe_bridge_module_shape():
    bridge = MSFEBridge(8, 3, 16, 5, stride=2)
    out = bridge(torch.randn(2, 8, 16, 16), torch.rand(2, 3, 16, 16), torch.zeros(2, 1, 16, 16))
    assert out.shape == (2, 16, 8, 8)


def test_variants():
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    w = torch.randn(3, 2, 3, 3, dtype=torch.float64)
    xw = torch.nn.functional.conv2d(x, w, padding=1)
    out = gated_conv(x, w, torch.zeros_like(w))
    assert torch.allclose(out, 0.5 * xw, atol=1e-15)

    count = torch.nn.functional.conv2d(torch.ones(1, 1, 5, 5, dtype=torch.float64),
                                       torch.ones(1, 1, 3, 3, dtype=torch.float64), padding=1)
    assert torch.allclose(partial_conv(x, torch.zeros(1, 1, 5, 5, dtype=torch.float64), w), xw / count, atol=1e-14)

    ident = torch.zeros(2, 2, 3, 3)
    ident[0, 0, 1, 1] = ident[1, 1, 1, 1] = 1
    b = torch.randn(1, 2, 6, 6)
    assert torch.equal(conv_skip(b, ident), b)

    with pytest.raises(ConfigError):
        bridge_variant("bogus", x, x, None, {})


def test_gated_bridge_zero_gate_halves():
    g = GatedBridge(2, 4, 4, 2, 1)
    torch.nn.init.zeros_(g.gate.weight)
    torch.nn.init.zeros_(g.gate.bias)
    xw = torch.randn(1, 4, 4, 4)
    assert torch.equal(g(torch.randn(1, 2, 8, 8), xw), 0.5 * xw)


def test_additive_composition_exact():
    xw, b = torch.randn(1, 4, 6, 6), torch.randn(1, 4, 6, 6)
    assert torch.equal(AddFusion()(xw, b), xw + b)
