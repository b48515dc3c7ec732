import numpy as np
import pytest
from hypothesis import given, strategies as st

from claps.nn import (MAGIC, VERSION, Adam, CorruptNetError, Mlp, NetVersionError, backprop,
                      forward, ibp_forward, init_mlp, layer_norms, lipschitz_bound, lipschitz_grad, load_net,
                      local_lipschitz, net_bytes, net_from_bytes, save_net)
from claps.spectrl import DimensionError

HEADS = ["identity", "softplus", "tanh"]


def make_net(seed, head=None, d=2):
    rng = np.random.default_rng(seed)
    head = head or HEADS[seed % 3]
    depth = int(rng.integers(1, 4))
    sizes = [d] + [int(rng.integers(1, 9)) for _ in range(depth - 1)] + [int(rng.integers(1, 3))]
    net = init_mlp(sizes, head, rng, out_lo=-np.ones(sizes[-1]) * 2, out_hi=np.ones(sizes[-1]))
    for b in net.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    return net


seeds = st.integers(0, 2**31 - 1)


def test_forward_shapes_and_dimension_check():
    net = make_net(0, "identity")
    assert forward(net, np.zeros(2)).shape == (net.out_dim,)
    assert forward(net, np.zeros((5, 2))).shape == (5, net.out_dim)
    with pytest.raises(DimensionError):
        forward(net, np.zeros(3))


def test_tanh_head_stays_in_box():
    net = make_net(2, "tanh")
    y = forward(net, np.random.default_rng(0).normal(0, 100, (1000, 2)))
    assert np.all(y >= -2) and np.all(y <= 1)


@given(seeds, seeds)
def test_ibp_contains_samples(net_seed, box_seed):
    net = make_net(net_seed)
    rng = np.random.default_rng(box_seed)
    lo = rng.uniform(-2, 2, 2)
    hi = lo + rng.uniform(0, 1, 2)
    ylo, yhi = ibp_forward(net, lo, hi)
    x = rng.uniform(lo, hi, size=(200, 2))
    y = forward(net, np.vstack([x, lo, hi]))
    assert np.all(y >= ylo) and np.all(y <= yhi)


def test_ibp_point_box_is_tight():
    net = make_net(4, "identity")
    x = np.array([0.3, -0.7])
    lo, hi = ibp_forward(net, x, x)
    assert np.allclose(lo, forward(net, x)) and np.allclose(hi, forward(net, x))


def test_ibp_rejects_inverted_box():
    with pytest.raises(ValueError):
        ibp_forward(make_net(0), np.ones(2), np.zeros(2))


@given(seeds, seeds)
def test_lipschitz_bounds_difference_quotients(net_seed, pt_seed):
    net = make_net(net_seed)
    rng = np.random.default_rng(pt_seed)
    x = rng.uniform(-3, 3, (100, 2))
    y = x + rng.normal(0, rng.choice([1e-3, 0.1, 1.0]), (100, 2))
    num = np.abs(forward(net, x) - forward(net, y)).sum(axis=1)
    den = np.abs(x - y).sum(axis=1)
    L = lipschitz_bound(net)
    assert np.all(num <= L * den * (1 + 1e-9) + 1e-12)


@given(seeds, seeds)
def test_local_lipschitz_sound_and_below_global(net_seed, box_seed):
    net = make_net(net_seed)
    rng = np.random.default_rng(box_seed)
    lo = rng.uniform(-2, 2, 2)
    hi = lo + rng.uniform(0, 0.5, 2)
    L = local_lipschitz(net, lo[None], hi[None])[0]
    assert L <= lipschitz_bound(net) * (1 + 1e-9)
    x = rng.uniform(lo, hi, (100, 2))
    y = rng.uniform(lo, hi, (100, 2))
    num = np.abs(forward(net, x) - forward(net, y)).sum(axis=1)
    den = np.abs(x - y).sum(axis=1)
    assert np.all(num <= L * den * (1 + 1e-9) + 1e-12)


def test_zero_network_has_zero_lipschitz():
    net = Mlp([np.zeros((4, 2)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)])
    assert lipschitz_bound(net) == 0.0


def test_layer_norms_are_column_sums():
    W1 = np.array([[1.0, -2.0], [3.0, 0.5]])
    W2 = np.array([[1.0, -1.0]])
    net = Mlp([W1, W2], [np.zeros(2), np.zeros(1)])
    assert layer_norms(net) == [4.0, 1.0]
    assert lipschitz_bound(net) == 4.0


@given(seeds)
def test_backprop_matches_finite_differences(seed):
    net = make_net(seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(0, 1, (7, 2))
    target = rng.normal(0, 1, (7, net.out_dim))

    def loss_fn(out):
        r = out - target
        return 0.5 * float((r ** 2).sum()), r

    _, grads = backprop(net, loss_fn, x)
    params = net.params()
    h = 1e-6
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = loss_fn(forward(net, x))
            p[idx] = old - h
            dn, _ = loss_fn(forward(net, x))
            p[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(1.0, abs(fd))


def test_lipschitz_grad_matches_finite_differences():
    net = make_net(5, "tanh")
    total, grads = lipschitz_grad(net)
    assert total == pytest.approx(lipschitz_bound(net))
    h = 1e-7
    for p, g in zip(net.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = lipschitz_bound(net)
            p[idx] = old - h
            dn = lipschitz_bound(net)
            p[idx] = old
            fd = (up - dn) / (2 * h)
            # the bound is piecewise linear in each entry; compare where it is smooth
            if abs(up + dn - 2 * total) < 1e-9:
                assert fd == pytest.approx(g[idx], rel=1e-4, abs=1e-6)


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -2.0])]
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step([2 * p[0]])
    assert np.allclose(p[0], 0.0, atol=1e-2)


@pytest.mark.parametrize("head", HEADS)
def test_serialization_round_trip(tmp_path, head):
    net = make_net(7, head)
    blob = net_bytes(net)
    back = net_from_bytes(blob)
    assert net_bytes(back) == blob
    save_net(net, tmp_path / "n.bin")
    assert net_bytes(load_net(tmp_path / "n.bin")) == blob


def test_serialization_errors():
    blob = net_bytes(make_net(1))
    with pytest.raises(CorruptNetError):
        net_from_bytes(blob[:-3])
    with pytest.raises(CorruptNetError):
        net_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CorruptNetError):
        net_from_bytes(blob + b"\0")
    bad = bytearray(blob)
    bad[len(MAGIC):len(MAGIC) + 4] = (VERSION + 1).to_bytes(4, "little")
    with pytest.raises(NetVersionError):
        net_from_bytes(bytes(bad))
