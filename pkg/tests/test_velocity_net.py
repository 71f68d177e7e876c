import numpy as np
import pytest
import torch

from mffm.tensor_core import DimensionError
from mffm.velocity_net import (
    NetConfig,
    build_net,
    load_state_arrays,
    loss_and_gradients,
    n_params,
    sinusoidal_time_embedding,
    state_arrays,
)


def test_config_validation_and_sizing():
    with pytest.raises(ValueError):
        NetConfig(hidden=16)
    with pytest.raises(ValueError):
        NetConfig(n_blocks=1)
    with pytest.raises(ValueError):
        NetConfig(hidden=48, n_groups=7)
    with pytest.raises(ValueError):
        NetConfig(padding="zeros")
    c = NetConfig.sized(1, 41, 3)
    assert c.hidden == 48 and c.n_groups == 8
    assert NetConfig.sized(1, 36, 2).hidden == 40 and NetConfig.sized(1, 36, 2).n_groups == 8
    assert NetConfig.sized(1, 56, 2).n_groups == 8
    assert NetConfig.sized(1, 72, 2).n_groups == 8


def test_time_embedding():
    e = sinusoidal_time_embedding(torch.tensor([0.0, 0.5]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0, :4].numpy(), 0.0)
    np.testing.assert_array_equal(e[0, 4:].numpy(), 1.0)
    assert e[1, 0].item() == pytest.approx(np.sin(0.5))
    with pytest.raises(ValueError):
        sinusoidal_time_embedding(0.0, 7)


def test_zero_head_gives_zero_velocity():
    net = build_net(NetConfig(hidden=32, n_blocks=3), seed=0)
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    assert torch.count_nonzero(net(x, 0.3, x)) == 0
    assert len(net.down) == 2 and len(net.up) == 1


def test_shape_checks():
    net = build_net(NetConfig(), seed=0)
    x = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    with pytest.raises(DimensionError):
        net(x, 0.5, torch.zeros(1, 1, 16, 16, dtype=torch.float64))
    with pytest.raises(DimensionError):
        net(torch.zeros(1, 2, 8, 8, dtype=torch.float64), 0.5, torch.zeros(1, 2, 8, 8, dtype=torch.float64))


def test_build_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_net(NetConfig(), seed=7)
    after = torch.rand(1)
    assert torch.equal(before, after)
    b = build_net(NetConfig(), seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_network_uses_time_and_conditioning():
    net = build_net(NetConfig(), seed=1)
    with torch.no_grad():
        for p in net.head.parameters():
            p.normal_(0, 0.1)
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    c = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    v = net(x, 0.2, c)
    assert not torch.allclose(v, net(x, 0.8, c))
    assert not torch.allclose(v, net(x, 0.2, 2 * c))
    # per-element times are accepted
    v2 = net(x, torch.tensor([0.2, 0.2], dtype=torch.float64), c)
    assert torch.equal(v, v2)


def test_loss_gradients_match_finite_differences():
    net = build_net(NetConfig(hidden=32, n_blocks=2), seed=3)
    with torch.no_grad():
        for p in net.head.parameters():
            p.normal_(0, 0.2)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 1, 6, 6, generator=g, dtype=torch.float64)
    c = torch.randn(2, 1, 6, 6, generator=g, dtype=torch.float64)
    y = torch.randn(2, 1, 6, 6, generator=g, dtype=torch.float64)
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    _, grads = loss_and_gradients(net, x, t, c, y)
    rng = np.random.default_rng(0)
    params = dict(net.named_parameters())
    for name in ["lift.weight", "down.0.film.weight", "up.0.conv2.bias", "head.weight", "time_mlp.0.weight"]:
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + 1e-5
            lp = torch.mean((net(x, t, c) - y) ** 2).item()
            p[idx] = old - 1e-5
            lm = torch.mean((net(x, t, c) - y) ** 2).item()
            p[idx] = old
        fd = (lp - lm) / 2e-5
        assert grads[name][idx].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_state_round_trip_keeps_dtype():
    net = build_net(NetConfig(), seed=4, dtype=torch.float32)
    arrays = state_arrays(net, prefix="level_0/")
    assert all(k.startswith("level_0/") for k in arrays)
    assert all(a.dtype == np.float32 for a in arrays.values())
    other = build_net(NetConfig(), seed=5, dtype=torch.float32)
    load_state_arrays(other, arrays, prefix="level_0/")
    for p, q in zip(net.state_dict().values(), other.state_dict().values()):
        assert torch.equal(p, q)
    assert n_params(net) == sum(a.size for a in arrays.values())
