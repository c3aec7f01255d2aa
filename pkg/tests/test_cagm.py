import pytest
import torch

from sar2opt.cagm import (CAGM, AttentionBlock, CAGMConfig, CAGMUNet, ConditionEncoder, ConditionSet, ConvBlock,
                          EmbedBlock, film)


def _small(**kw):
    cfg = dict(num_classes=4, base_channels=8, channel_multipliers=(1, 2), attention_levels=(1,),
               groups=4, embed_dim=16)
    cfg.update(kw)
    return CAGMConfig(**cfg)


def _randomise(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)


def test_film_identity_and_value():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(film(x, torch.ones(3), torch.zeros(3)), x)
    out = film(torch.full((1, 1, 1, 1), 2.0), torch.tensor([3.0]), torch.tensor([0.5]))
    assert float(out) == 6.5
    with pytest.raises(ValueError):
        film(x, torch.ones(4), torch.zeros(4))


def test_film_per_sample():
    x = torch.ones(2, 2, 1, 1)
    out = film(x, torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.zeros(2, 2))
    assert out[:, :, 0, 0].tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_attention_weights_are_row_stochastic():
    torch.manual_seed(0)
    att = AttentionBlock(8, 4)
    w, _ = att.attention_weights(torch.randn(2, 8, 4, 4))
    assert w.shape == (2, 16, 16)
    assert torch.allclose(w.sum(-1), torch.ones(2, 16), atol=1e-6)
    assert (w >= 0).all()


def test_cagm_block_identity_at_init():
    torch.manual_seed(0)
    block = CAGM(8, 8, 16, 4, attention=True)
    enc = ConditionEncoder(4, 16)
    x = torch.randn(3, 8, 4, 4)
    emb = enc(torch.tensor([1, 5, 9]), ConditionSet.make(None, [0, 1, 2], [0.0, 45.0, 90.0]))
    assert torch.allclose(block(x, emb), x, atol=1e-6)


def _emb(enc, classes, angles, t=(10, 10)):
    return enc(torch.tensor(t), ConditionSet.make(None, classes, angles))


def test_embed_block_responds_to_class_and_angle():
    torch.manual_seed(0)
    blk, enc = EmbedBlock(8, 16), ConditionEncoder(4, 16)
    _randomise(blk)
    x = torch.randn(1, 8, 4, 4).expand(2, -1, -1, -1)
    a = blk(x, _emb(enc, [0, 1], [30.0, 30.0]))
    assert (a[0] - a[1]).abs().max() > 1e-3
    b = blk(x, _emb(enc, [2, 2], [30.0, 200.0]))
    assert (b[0] - b[1]).abs().max() > 1e-3


def test_embed_block_ignores_conditions_when_disabled():
    torch.manual_seed(0)
    blk, enc = EmbedBlock(8, 16, use_class_angle=False), ConditionEncoder(4, 16)
    _randomise(blk)
    x = torch.randn(1, 8, 4, 4).expand(2, -1, -1, -1)
    out = blk(x, _emb(enc, [0, 3], [10.0, 250.0]))
    assert torch.allclose(out[0], out[1])


def test_angle_encoding_periodic_and_null():
    torch.manual_seed(0)
    enc = ConditionEncoder(4, 16)
    assert torch.allclose(enc.encode_angle(0.0), enc.encode_angle(360.0), atol=1e-6)
    assert torch.allclose(enc.encode_angle(-90.0), enc.encode_angle(270.0), atol=1e-6)
    assert torch.equal(enc.encode_angle(None), enc.angle.null)
    nan = enc.angle(torch.tensor([float("nan"), 10.0]), 2)
    assert torch.equal(nan[0], enc.angle.null)


def test_condition_set_drop_and_normalise():
    c = ConditionSet.make(torch.zeros(3, 1, 4, 4), [0, 1, 2], [370.0, -10.0, 5.0])
    assert c.angle_deg.tolist() == pytest.approx([10.0, 350.0, 5.0])
    d = c.drop(torch.tensor([False, True, False]))
    assert d.class_id.tolist() == [0, -1, 2]
    assert torch.isnan(d.angle_deg[1]) and not torch.isnan(d.angle_deg[0])
    assert d.sar_null.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        ConditionSet.make(None, None, None)


def test_config_validation():
    with pytest.raises(ValueError):
        CAGMConfig(base_channels=10, groups=4)
    with pytest.raises(ValueError):
        CAGMConfig(embed_dim=0)
    with pytest.raises(ValueError):
        CAGMConfig(channel_multipliers=(1, 2), attention_levels=(2,))


def test_unet_shapes_and_errors():
    torch.manual_seed(0)
    net = CAGMUNet(_small())
    x = torch.randn(2, 3, 8, 8)
    cond = ConditionSet.make(torch.randn(2, 1, 8, 8), [0, 3], [0.0, 90.0])
    assert net(x, torch.tensor([1, 7]), cond).shape == (2, 3, 8, 8)
    assert net(x, 5, ConditionSet.empty(2)).shape == (2, 3, 8, 8)
    with pytest.raises(ValueError):
        net(torch.randn(2, 3, 7, 8), 1, ConditionSet.empty(2))
    with pytest.raises(ValueError):
        net(x, 1, ConditionSet.empty(3))


def test_unet_zero_output_at_init_and_blocks_identity():
    torch.manual_seed(0)
    net = CAGMUNet(_small())
    out = net(torch.randn(2, 3, 8, 8), 3, ConditionSet.make(None, [0, 1], [0.0, 1.0]))
    assert torch.count_nonzero(out) == 0
    assert len(net.cagm_blocks()) == 5


def test_unet_uses_sar_and_null_flag():
    torch.manual_seed(0)
    net = CAGMUNet(_small())
    _randomise(net)
    x = torch.randn(1, 3, 8, 8)
    s1, s2 = torch.randn(1, 1, 8, 8), torch.randn(1, 1, 8, 8)
    o1 = net(x, 4, ConditionSet.make(s1, [1], [0.0]))
    o2 = net(x, 4, ConditionSet.make(s2, [1], [0.0]))
    assert (o1 - o2).abs().max() > 1e-4
    # a dropped SAR image is not seen by the network
    n1 = net(x, 4, ConditionSet.make(s1, [1], [0.0]).drop(torch.tensor([True])))
    n2 = net(x, 4, ConditionSet.make(s2, [1], [0.0]).drop(torch.tensor([True])))
    assert torch.allclose(n1, n2)
    assert torch.allclose(n1, net(x, 4, ConditionSet.empty(1)), atol=1e-6)


def test_unet_gradients_reach_condition_parameters():
    torch.manual_seed(0)
    net = CAGMUNet(_small())
    _randomise(net)
    out = net(torch.randn(2, 3, 8, 8), torch.tensor([2, 3]),
              ConditionSet.make(torch.randn(2, 1, 8, 8), [0, 1], [10.0, 20.0]))
    out.pow(2).mean().backward()
    assert net.encoder.class_table.weight.grad.abs().sum() > 0
    assert net.encoder.angle.mlp[0].weight.grad.abs().sum() > 0


# ---- finite-difference and composition oracles (float64)

def _rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@torch.no_grad()
def _fd_grad(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (4, 4)])
def test_conv_block_preserves_shape(h, w):
    assert ConvBlock(4, 6, 2)(torch.randn(2, 4, h, w)).shape == (2, 6, h, w)


def test_conv_block_matches_hand_rolled_norm_swish():
    blk = ConvBlock(4, 4, 2)
    with torch.no_grad():
        blk.conv.weight.zero_()
        blk.conv.bias.zero_()
        for c in range(4):
            blk.conv.weight[c, c, 1, 1] = 1.0
    x = torch.randn(2, 4, 5, 5)
    groups = x.reshape(2, 2, -1)
    mean, var = groups.mean(-1, keepdim=True), groups.var(-1, unbiased=False, keepdim=True)
    normed = ((groups - mean) / torch.sqrt(var + 1e-5)).reshape_as(x)
    expected = normed * torch.sigmoid(normed)
    assert torch.allclose(blk(x), expected, atol=1e-5)


def test_conv_block_finite_difference():
    torch.manual_seed(0)
    blk = ConvBlock(4, 4, 2).double()
    x = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    blk(x).sum().backward()
    fd = _fd_grad(lambda z: blk(z).sum(), x.detach().clone())
    assert _rel_err(x.grad, fd) < 1e-4


def test_attention_single_token_reduces_to_value_projection():
    torch.manual_seed(0)
    att = AttentionBlock(4, 2, zero_init=False)
    x = torch.randn(3, 4, 1, 1)
    w, v = att.attention_weights(x)
    assert torch.equal(w, torch.ones(3, 1, 1))
    assert torch.allclose(att(x), x + att.proj(v.reshape(3, 4, 1, 1)), atol=1e-6)


def test_film_degenerate_cases():
    x = torch.randn(2, 3, 2, 2)
    beta = torch.tensor([0.5, -1.0, 2.0])
    assert torch.equal(film(x, torch.zeros(3), beta), beta[None, :, None, None].expand_as(x))
    assert float(film(torch.full((1, 1, 1, 1), 0.5), torch.tensor([2.0]), torch.tensor([-1.0]))) == 0.0


def test_embed_block_affine_composition():
    blk, enc = EmbedBlock(3, 8), ConditionEncoder(4, 8)
    with torch.no_grad():
        # class head: gamma = 1 + 1 = 2, beta = 0; angle head: gamma = 1, beta = 1
        blk.class_film.bias[:3] = 1.0
        blk.angle_film.bias[3:] = 1.0
    x = torch.randn(2, 3, 4, 4)
    out = blk(x, _emb(enc, [0, 1], [5.0, 50.0]))
    assert torch.allclose(out, 2 * x + 1, atol=1e-6)


def test_class_conditioning_reaches_features_after_one_step():
    torch.manual_seed(0)
    blk, enc = EmbedBlock(4, 8), ConditionEncoder(4, 8)
    opt = torch.optim.SGD(list(blk.parameters()) + list(enc.parameters()), lr=0.1)
    x = torch.randn(2, 4, 3, 3)
    loss = (blk(x, _emb(enc, [0, 1], [20.0, 20.0])) - torch.randn(2, 4, 3, 3)).pow(2).mean()
    loss.backward()
    opt.step()
    x1 = torch.randn(1, 4, 3, 3).expand(2, -1, -1, -1)
    out = blk(x1, _emb(enc, [0, 2], [20.0, 20.0]))
    assert (out[0] - out[1]).detach().abs().sum() > 0


def test_cagm_block_finite_difference():
    torch.manual_seed(0)
    block = CAGM(2, 2, 8, 1, attention=True).double()
    enc = ConditionEncoder(3, 8).double()
    _randomise(block)
    emb = enc(torch.tensor([4]), ConditionSet.make(None, [1], [33.0]))
    emb = type(emb)(*(e.detach().double() for e in (emb.t_emb, emb.class_emb, emb.angle_emb)))
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    f = lambda z: (block(z, emb) ** 2).sum()
    f(x).backward()
    fd = _fd_grad(f, x.detach().clone())
    assert _rel_err(x.grad, fd) < 1e-4


@torch.no_grad()
def test_angle_encoding_distinct_and_continuous():
    torch.manual_seed(0)
    enc = ConditionEncoder(4, 16).double()
    e0, e180 = enc.encode_angle(0.0), enc.encode_angle(180.0)
    assert (e0 - e180).abs().max() > 1e-6
    # Lipschitz bound of the perceptron in degrees, estimated from a dense sweep
    grid = torch.linspace(0, 360, 3601, dtype=torch.float64)
    embs = enc.angle(grid, len(grid))
    lip = float((embs[1:] - embs[:-1]).norm(dim=1).max() / 0.1)
    for theta in (0.0, 17.3, 179.9, 359.99):
        d = float((enc.encode_angle(theta + 1e-3) - enc.encode_angle(theta)).norm())
        assert d <= 2 * lip * 1e-3 + 1e-12


def test_unet_full_size_shape_and_both_branches():
    torch.manual_seed(0)
    net = CAGMUNet(CAGMConfig(num_classes=6, base_channels=8, groups=4, embed_dim=16))
    x = torch.randn(1, 3, 64, 64)
    cond = ConditionSet.make(torch.randn(1, 1, 64, 64), [2], [77.0])
    assert net(x, 10, cond).shape == (1, 3, 64, 64)
    assert net(x, 10, cond.null()).shape == (1, 3, 64, 64)


def test_unet_loss_gradient_finite_difference():
    torch.manual_seed(0)
    net = CAGMUNet(_small()).double()
    _randomise(net, seed=3)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)
    target = torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)
    cond = ConditionSet.make(torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64), [0, 3], [12.0, 250.0])
    cond.angle_deg = cond.angle_deg.double()
    t = torch.tensor([3, 40])

    def loss():
        return ((net(x, t, cond) - target) ** 2).mean()

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    sizes = torch.tensor([p.numel() for p in params])
    offsets = torch.cumsum(sizes, 0) - sizes
    picks = torch.randperm(int(sizes.sum()), generator=g)[:1000]
    ad, fd = [], []
    eps = 1e-6
    with torch.no_grad():
        for flat in picks.tolist():
            k = int((offsets <= flat).nonzero().max())
            p, idx = params[k], flat - int(offsets[k])
            view = p.view(-1)
            ad.append(float(p.grad.view(-1)[idx]))
            old = float(view[idx])
            view[idx] = old + eps
            hi = float(loss())
            view[idx] = old - eps
            lo = float(loss())
            view[idx] = old
            fd.append((hi - lo) / (2 * eps))
    assert _rel_err(torch.tensor(ad), torch.tensor(fd)) < 1e-3
