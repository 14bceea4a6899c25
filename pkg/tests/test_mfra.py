import pytest
import torch

from structnet.errors import ConfigError, ShapeError
from structnet.mfra import MFRA, effective_dilation, fuse_variant, make_fusion, mfra_fuse


def test_weights_are_a_softmax():
    mod = MFRA(4)
    xw, b = torch.randn(2, 4, 12, 12), torch.randn(2, 4, 12, 12)
    w = mod.fusion_weights(xw, b)
    assert w.shape == (2, 4, 12, 12)
    assert (w >= 0).all() and (w <= 1).all()
    assert (w.sum(1) - 1).abs().max() < 1e-6


def test_shape_trace_and_branch_contribution():
    mod = MFRA(8, 16)
    xw, b = torch.randn(1, 8, 32, 32), torch.randn(1, 8, 32, 32)
    out = mfra_fuse(xw, b, mod)
    assert out.shape == (1, 16, 32, 32)
    branches = mod.branch_features(xw, b)
    assert [t.shape for t in branches] == [(1, 16, 32, 32)] * 4
    assert all(t.abs().sum() > 0 for t in branches)
    assert mod.last_weights.shape == (1, 4, 32, 32)


@pytest.mark.parametrize("s", range(4))
def test_one_hot_returns_branch(s):
    mod = MFRA(3)
    xw, b = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    w = torch.zeros(1, 4, 16, 16)
    w[:, s] = 1
    assert torch.equal(mod(xw, b, w), mod.branch_features(xw, b)[s])


def test_gradcheck_8x8():
    mod = MFRA(2).double()
    xw = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, y: mod(x, y), (xw, b), rtol=1e-3, atol=1e-6)


def test_add_variant():
    xw, b = torch.full((1, 2, 4, 4), 2.0), torch.full((1, 2, 4, 4), 3.0)
    assert torch.equal(fuse_variant("add", xw, b), torch.full((1, 2, 4, 4), 5.0))
    with pytest.raises(ConfigError):
        fuse_variant("aspp", xw, b)
    with pytest.raises(ConfigError):
        make_fusion("aspp", 2)


def test_v1_equals_uniform_weights_times_four():
    full, v1 = MFRA(3, mode="mfra"), MFRA(3, mode="mfra_v1")
    v1.load_state_dict({k: v for k, v in full.state_dict().items() if not k.startswith("phi")})
    xw, b = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    uniform = torch.full((1, 4, 16, 16), 0.25)
    assert torch.allclose(v1(xw, b), 4 * full(xw, b, uniform), atol=1e-6)


def test_v2_differs_only_in_branch_four():
    torch.manual_seed(3)
    full, v2 = MFRA(3, mode="mfra"), MFRA(3, mode="mfra_v2")
    shared = {k: v for k, v in full.state_dict().items() if not k.startswith("branches.3")}
    v2.load_state_dict(shared, strict=False)
    for m in (full, v2):
        torch.nn.init.zeros_(m.branches[3].conv.weight)
        torch.nn.init.zeros_(m.branches[3].conv.bias)
    xw, b = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    assert torch.allclose(full(xw, b), v2(xw, b), atol=0)
    assert v2.branches[3].conv.in_channels == 6 and full.branches[3].conv.in_channels == 3


def test_permutation_consistency():
    mod = MFRA(2)
    xw, b = torch.randn(1, 2, 16, 16), torch.randn(1, 2, 16, 16)
    branches = mod.branch_features(xw, b)
    w = mod.fusion_weights(xw, b)
    perm = [2, 0, 3, 1]
    from structnet.mfra import combine
    assert torch.allclose(combine(branches, w), combine([branches[p] for p in perm], w[:, perm]), atol=1e-6)


def test_misaligned_shapes():
    with pytest.raises(ShapeError):
        MFRA(2)(torch.randn(1, 2, 8, 8), torch.randn(1, 2, 4, 4))


def test_effective_dilation():
    assert effective_dilation(24, 64) == 24
    assert effective_dilation(24, 16) == 7
    assert effective_dilation(6, 2) == 1
