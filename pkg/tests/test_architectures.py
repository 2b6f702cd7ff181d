import numpy as np
import pytest

from afinet import afi, ops
from afinet.architectures import (BlockParams, BlockSpec, NetworkConfig, afi_mobilenetv2_block_forward,
                                  afi_resnet_block_forward, build_network, build_resnet, plan,
                                  resnet_block_forward)
from afinet.errors import ConfigError
from afinet.tensor import Tape, Tensor, precision


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def f64_block(spec, seed=0, r=4):
    with precision(np.float64):
        return BlockParams.build(spec, r, np.random.default_rng(seed))


def bn(layer, x):
    return ops.batch_norm(x, layer.gamma, layer.beta, None, True)


def conv(layer, x):
    return ops.conv2d(x, layer.weight, layer.stride, layer.pad, layer.groups)


# -- single blocks against manual primitive composition


def test_standard_block_zero_kernels_is_relu():
    p = f64_block(BlockSpec("standard", 4, 4))
    p.k1.weight.data[...] = 0
    p.k2.weight.data[...] = 0
    x = rand(np.random.default_rng(0), 2, 4, 5, 5)
    np.testing.assert_array_equal(resnet_block_forward(x, p).data, np.maximum(x.data, 0))


@pytest.mark.parametrize("cin,stride", [(4, 1), (4, 2)])
def test_standard_block_matches_composition(cin, stride):
    cout = cin if stride == 1 else 2 * cin
    p = f64_block(BlockSpec("standard", cin, cout, stride))
    x = rand(np.random.default_rng(1), 2, cin, 6, 6)
    h = ops.relu(bn(p.bn1, conv(p.k1, x)))
    short = x if p.shortcut is None else bn(p.shortcut[1], conv(p.shortcut[0], x))
    ref = ops.relu(ops.add(short, bn(p.bn2, conv(p.k2, h))))
    out = resnet_block_forward(x, p)
    np.testing.assert_allclose(out.data, ref.data, rtol=1e-12)
    if stride == 2:
        assert out.shape == (2, 2 * cin, 3, 3)


def test_stride_two_implies_projection():
    assert BlockSpec("standard", 16, 32, 2).projection
    assert BlockSpec("afi-basic", 16, 32, 2, mix="self").projection
    assert not BlockSpec("standard", 16, 16, 1).projection


def test_afi_block_first_in_stage_concatenates_x_twice():
    spec = BlockSpec("afi-basic", 8, 8, 1, mix="self")
    p = f64_block(spec)
    x = rand(np.random.default_rng(2), 2, 8, 4, 4)
    out, X = afi_resnet_block_forward(x, p, [])
    assert X.shape == (2, 4, 4, 4)
    ref = ops.relu(ops.add(x, bn(p.bn2, conv(p.k2, ops.concat_channels(X, X)))))
    np.testing.assert_allclose(out.data, ref.data, rtol=1e-12)


def test_afi_block_zero_scoring_weights_mixes_the_mean():
    spec = BlockSpec("afi-basic", 8, 8, 1, has_afi=True, afi_input_arity=3, mix="previous")
    p = f64_block(spec)
    p.afi.w1.data[...] = 0
    p.afi.w2.data[...] = 0
    rng = np.random.default_rng(3)
    stack = [rand(rng, 2, 4, 4, 4) for _ in range(3)]
    x = rand(rng, 2, 8, 4, 4)
    taps = {}
    out, X = afi_resnet_block_forward(x, p, stack, taps=taps, tag="b")
    mean = Tensor(np.mean([s.data for s in stack], axis=0), dtype=np.float64)
    np.testing.assert_allclose(taps["b.afi"].data, mean.data, rtol=1e-12)
    ref = ops.relu(ops.add(x, bn(p.bn2, conv(p.k2, ops.concat_channels(X, mean)))))
    np.testing.assert_allclose(out.data, ref.data, rtol=1e-12)


def test_afi_block_rejects_mismatched_stack():
    spec = BlockSpec("afi-basic", 8, 8, 1, has_afi=True, mix="previous")
    p = f64_block(spec)
    rng = np.random.default_rng(4)
    with pytest.raises(ConfigError):
        afi_resnet_block_forward(rand(rng, 2, 8, 4, 4), p, [rand(rng, 2, 3, 4, 4)])


def test_half_width_contract():
    p = f64_block(BlockSpec("afi-basic", 32, 32, 1, has_afi=True, mix="inclusive"))
    assert p.k1.weight.shape[0] == 16
    assert p.k2.weight.shape[1] == 32
    odd = f64_block(BlockSpec("afi-basic", 7, 7, 1, mix="self"))
    assert odd.k1.weight.shape[0] == 3 and odd.k2.weight.shape[1] == 6


@pytest.mark.parametrize("stride,cin,cout,residual", [(1, 8, 8, True), (2, 8, 16, False), (1, 8, 16, False)])
def test_mbv2_block_matches_composition(stride, cin, cout, residual):
    spec = BlockSpec("afi-mbv2", cin, cout, stride, has_afi=True, mix="inclusive", expansion=2)
    assert spec.residual == residual
    p = f64_block(spec)
    rng = np.random.default_rng(5)
    x = rand(rng, 2, cin, 6, 6)
    stack = [rand(rng, 2, spec.half, 6, 6)]
    out, X = afi_mobilenetv2_block_forward(x, p, stack)
    Xr = ops.relu(bn(p.bn1, conv(p.k1, x)))
    R, _ = afi.afi_forward(stack + [Xr], p.afi)
    h = ops.relu(bn(p.bndw, conv(p.kdw, ops.concat_channels(Xr, R))))
    ref = bn(p.bn2, conv(p.k2, h))
    if residual:
        ref = ops.add(x, ref)
    np.testing.assert_allclose(out.data, ref.data, rtol=1e-12)
    assert p.kdw.groups == 2 * spec.half


# -- network construction


def test_plan_table2_and_paper_text():
    t2 = plan(NetworkConfig(5, preset="table-2"))
    for stage in t2:
        assert stage[0].kind == "standard"
        assert [b.afi_input_arity for b in stage[1:]] == [1, 2, 3, 4]
        assert [b.ledger_arity for b in stage[1:]] == [2, 3, 4, 5]
    pt = plan(NetworkConfig(5, preset="paper-text"))
    for stage in pt:
        assert all(b.kind == "afi-basic" for b in stage)
        assert [b.has_afi for b in stage] == [False, False, True, True, True]
        assert [b.mix for b in stage[:2]] == ["self", "previous"]
        assert [b.afi_input_arity for b in stage[2:]] == [2, 3, 4]


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(2, afi_stages={4})
    with pytest.raises(ConfigError):
        NetworkConfig(2, preset="other")
    with pytest.raises(ConfigError):
        NetworkConfig.from_depth(30)
    assert NetworkConfig.from_depth(110).blocks_per_stage == 18


def test_parameter_totals_cifar100():
    assert build_network(NetworkConfig(5, num_classes=100)).num_params() == 378_228
    assert build_network(NetworkConfig(5, num_classes=100, afi_stages=())).num_params() == 472_756


def test_forward_shapes_afi_resnet_20():
    net = build_network(NetworkConfig.from_depth(20, num_classes=7))
    x = Tensor(np.random.default_rng(0).standard_normal((8, 3, 32, 32)))
    assert net(x).shape == (8, 7)


@pytest.mark.parametrize("preset", ["table-2", "paper-text"])
def test_smallest_network_forward_backward(preset):
    net = build_network(NetworkConfig(1, num_classes=3, preset=preset))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)))
    with Tape() as tape:
        loss = ops.cross_entropy(net(x), [0, 2])
    tape.backward(loss, params=net.parameters())
    assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in net.parameters())


@pytest.mark.parametrize("preset", ["table-2", "paper-text"])
def test_empty_afi_stages_equals_plain_resnet(preset):
    a = build_network(NetworkConfig(2, preset=preset, afi_stages=(), seed=3))
    b = build_resnet(2, seed=3)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 16, 16)).astype(np.float32))
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_stage_stacks_do_not_cross_resolution_changes():
    net = build_network(NetworkConfig(3, preset="paper-text"))
    taps = {}
    net(Tensor(np.random.default_rng(0).standard_normal((2, 3, 16, 16))), taps)
    for s, hw in ((1, 16), (2, 8), (3, 4)):
        for b in (1, 2, 3):
            assert taps[f"stage{s}.block{b}.mid"].shape[2:] == (hw, hw)
            assert taps[f"stage{s}.block{b}.afi"].shape == taps[f"stage{s}.block{b}.mid"].shape


def test_paper_text_second_block_passes_first_feature_through():
    net = build_network(NetworkConfig(3, preset="paper-text"))
    taps = {}
    net(Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8))), taps)
    np.testing.assert_array_equal(taps["stage1.block2.afi"].data, taps["stage1.block1.mid"].data)


def test_state_dict_round_trip():
    a = build_network(NetworkConfig(1, seed=0))
    b = build_network(NetworkConfig(1, seed=1))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32))
    a(x)  # move running stats off their defaults
    b.load_state_dict(a.state_dict())
    a.eval(), b.eval()
    np.testing.assert_array_equal(a(x).data, b(x).data)
