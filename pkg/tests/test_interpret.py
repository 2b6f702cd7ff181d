import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afinet import interpret, ops
from afinet.architectures import NetworkConfig, build_network
from afinet.data import synthetic_dataset
from afinet.errors import ConfigError, ContractError
from afinet.interpret import ActivationStats, Heatmap, class_selectivity_index
from afinet.tensor import Tensor


def test_csi_examples():
    np.testing.assert_allclose(class_selectivity_index(np.array([[0.0, 2.0, 0.0]])), [1.0])
    np.testing.assert_allclose(class_selectivity_index(np.array([[1.5, 1.5, 1.5]])), [0.0])
    np.testing.assert_allclose(class_selectivity_index(np.array([[3.0, 1.0]])), [0.5])
    assert class_selectivity_index(np.zeros((1, 4)))[0] == 0.0


def test_csi_contract():
    with pytest.raises(ContractError):
        class_selectivity_index(np.array([[1.0, -0.1]]))
    with pytest.raises(ContractError):
        class_selectivity_index(np.ones((3, 1)))
    with pytest.raises(ContractError):
        ActivationStats.empty(2, 3).mu


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_csi_range_on_random_stats(seed):
    rng = np.random.default_rng(seed)
    mu = rng.exponential(size=(4, int(rng.integers(2, 12)))) * rng.choice([0, 1], size=(4, 1))
    csi = class_selectivity_index(mu)
    assert np.all(csi >= 0) and np.all(csi <= 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_csi_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    mu = rng.exponential(size=(5, 6)) + 1e-3
    np.testing.assert_allclose(class_selectivity_index(mu * lam), class_selectivity_index(mu), atol=1e-6)


def test_stats_fold_and_merge_are_consistent():
    rng = np.random.default_rng(0)
    acts = np.abs(rng.standard_normal((20, 3, 4, 4)))
    labels = np.arange(20) % 4
    whole = ActivationStats.empty(3, 4)
    whole.update(acts, labels)
    left, right = ActivationStats.empty(3, 4), ActivationStats.empty(3, 4)
    left.update(acts[:7], labels[:7])
    right.update(acts[7:], labels[7:])
    np.testing.assert_allclose(left.merge(right).mu, whole.mu)
    expected = np.stack([acts[labels == k].mean(axis=(0, 2, 3)) for k in range(4)], axis=1)
    np.testing.assert_allclose(whole.mu, expected)


def test_collect_on_network_tags():
    ds = synthetic_dataset(32, 4, 0)
    net = build_network(NetworkConfig(2, num_classes=4))
    stats = interpret.collect_activation_stats(net, ds, "stage1.block2.afi")
    assert stats.sums.shape == (8, 4) and stats.counts.tolist() == [8, 8, 8, 8]
    csi = class_selectivity_index(stats)
    assert csi.shape == (8,) and np.all((0 <= csi) & (csi <= 1))
    with pytest.raises(ConfigError):
        interpret.collect_activation_stats(net, ds, "stage9.block1.out")


def test_csi_csv_format():
    text = interpret.csi_csv(np.array([0.5, 0.25]))
    assert text == "filter_id,csi\n0,0.5\n1,0.25\n"


# -- Grad-CAM


@pytest.fixture(scope="module")
def net_and_image():
    net = build_network(NetworkConfig(1, num_classes=3))
    image = synthetic_dataset(8, 4, 0).images[0]
    return net, image


def test_gradcam_channel_mean_score_gives_relu_of_that_channel(net_and_image):
    net, image = net_and_image
    tag, k = "stage2.block1.out", 5

    def score(logits, taps):
        return ops.mean(ops.select(taps[tag], (0, k)))

    heat = interpret.grad_cam(net, image, 0, tag, score_fn=score)
    taps = {}
    net.eval()
    net(Tensor(image[None]), taps)
    a = np.maximum(taps[tag].data[0, k].astype(np.float64), 0)
    expected = interpret._normalize(a)
    expected = interpret.bilinear_resize(expected, 32, 32)
    np.testing.assert_allclose(heat.grid, np.clip(expected, 0, 1), atol=1e-6)


def test_gradcam_scaled_score_gives_same_heatmap(net_and_image):
    net, image = net_and_image
    tag = "stage3.block1.out"
    base = interpret.grad_cam(net, image, 1, tag)
    scaled = interpret.grad_cam(net, image, 1, tag, score_fn=lambda logits, taps: ops.scale(logits[0, 1], 3.5))
    np.testing.assert_allclose(scaled.grid, base.grid, atol=1e-5)


def test_gradcam_contract(net_and_image):
    net, image = net_and_image
    heat = interpret.grad_cam(net, image, 2, "stage1.block1.mid")
    assert heat.grid.shape == (32, 32)
    assert heat.grid.min() >= 0 and heat.grid.max() <= 1
    again = interpret.grad_cam(net, image, 2, "stage1.block1.mid")
    np.testing.assert_array_equal(heat.grid, again.grid)
    assert all(p.grad is None for p in net.parameters())
    with pytest.raises(ConfigError):
        interpret.grad_cam(net, image, 0, "nope")


def test_gradcam_zero_gradient_is_all_zero(net_and_image):
    net, image = net_and_image
    heat = interpret.grad_cam(net, image, 0, "stage1.block1.mid",
                              score_fn=lambda logits, taps: ops.scale(ops.sum(logits), 0.0))
    assert np.all(heat.grid == 0)


def test_bilinear_resize_properties():
    a = np.arange(12, dtype=float).reshape(3, 4)
    np.testing.assert_array_equal(interpret.bilinear_resize(a, 3, 4), a)
    np.testing.assert_allclose(interpret.bilinear_resize(np.full((2, 2), 0.7), 8, 8), 0.7)
    up = interpret.bilinear_resize(np.array([[0.0, 1.0]]), 1, 4)
    np.testing.assert_allclose(up, [[0.0, 0.25, 0.75, 1.0]])


def test_pgm_round_trip(tmp_path):
    grid = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "h.pgm"
    interpret.write_pgm(path, Heatmap(grid))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(interpret.read_pgm(path), np.rint(grid * 255).astype(np.uint8))
