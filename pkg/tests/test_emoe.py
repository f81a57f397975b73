import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emoe_tracker.emoe import Emoe, EmoeBlock, Expert, assemble
from emoe_tracker.model import EMoETracker


def central_diff_grad(f, params, eps=1e-6):
    """Central finite differences of a scalar function for every element of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = f().item()
                flat[i] = old - eps
                down = f().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def test_expert_shape_and_independence():
    torch.manual_seed(0)
    blk = EmoeBlock(16, 3)
    x = torch.randn(2, 10, 16)
    h1, h2 = blk.expert_forward(x, 1), blk.expert_forward(x, 2)
    assert h1.shape == x.shape
    assert not torch.allclose(h1, h2)
    with pytest.raises(ValueError):
        blk.expert_forward(x, 0)
    with pytest.raises(ValueError):
        blk.expert_forward(x, 4)


def test_zeroed_expert_outputs_bias_pattern():
    e = Expert(8)
    with torch.no_grad():
        for m in e.modules():
            if isinstance(m, torch.nn.Conv1d):
                m.weight.zero_()
    x = torch.randn(2, 5, 8)
    expect = e.conv_out.bias.expand(2, 5, 8)
    torch.testing.assert_close(e(x), expect)


def test_assemble_one_hot_and_half():
    feats = [torch.randn(2, 4, 3) for _ in range(3)]
    one_hot = torch.tensor([[1.0, 0, 0], [1.0, 0, 0]])
    torch.testing.assert_close(assemble(feats, one_hot), feats[0], rtol=0, atol=0)
    half = torch.full((2, 3), 0.5)
    torch.testing.assert_close(assemble(feats, half), 0.5 * (feats[0] + feats[1] + feats[2]))
    with pytest.raises(ValueError):
        assemble(feats[:2], half)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 6), st.integers(0, 10_000))
def test_assemble_matches_direct_resummation(k, b, n, seed):
    g = torch.Generator().manual_seed(seed)
    feats = [torch.randn(b, n, 4, generator=g, dtype=torch.float64) for _ in range(k)]
    w = torch.rand(b, k, generator=g, dtype=torch.float64)
    expect = torch.zeros(b, n, 4, dtype=torch.float64)
    for bi in range(b):
        for t in range(k):
            expect[bi] += w[bi, t].item() * feats[t][bi]
    torch.testing.assert_close(assemble(feats, w), expect, rtol=0, atol=1e-6)


def test_single_expert_reduction():
    torch.manual_seed(3)
    blk = EmoeBlock(8, 1).eval()
    x = torch.randn(1, 6, 8)
    p, scores, feats = blk(x)
    assert scores.shape == (1, 1) and 0 < scores.item() < 1
    torch.testing.assert_close(p, scores.item() * feats[0])


def test_scores_inside_unit_interval():
    torch.manual_seed(4)
    blk = EmoeBlock(8, 4)
    _, scores, _ = blk(100 * torch.randn(3, 7, 8))
    assert ((scores > 0) & (scores < 1)).all()


def test_gradient_matches_finite_differences():
    torch.manual_seed(5)
    blk = EmoeBlock(8, 2).double().eval()
    x = torch.randn(1, 8, 8, dtype=torch.float64)
    params = [p for e in blk.experts for p in e.parameters()]
    f = lambda: blk(x)[0].mean()  # noqa: E731
    blk.zero_grad()
    f().backward()
    numeric = central_diff_grad(f, params)
    for p, g in zip(params, numeric):
        err = (p.grad - g).norm() / max(g.norm().item(), 1e-12)
        assert err < 1e-4


@pytest.mark.parametrize("interval,count", [(1, 4), (2, 2)])
def test_collect_scores_cardinality(make_tiny_config, interval, count):
    cfg = make_tiny_config(model__depth=4, emoe__insert_interval=interval)
    m = EMoETracker(cfg)
    with pytest.raises(RuntimeError):
        m.emoe.collect_scores()
    m(torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8), torch.rand(2, 2, 8, 8), torch.rand(2, 2, 8, 8))
    scores = m.emoe.collect_scores()
    assert len(scores) == count
    for w in scores:
        assert w.shape == (2, 2)
        assert ((w > 0) & (w < 1)).all()


def test_emoe_rejects_unknown_layer():
    em = Emoe(8, 2, (2, 4))
    with pytest.raises(ValueError):
        em.block(3)


def test_all_emoe_parameters_trainable(make_tiny_config):
    m = EMoETracker(make_tiny_config())
    assert all(p.requires_grad for p in m.emoe.parameters())
