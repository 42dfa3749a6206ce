import numpy as np
import pytest

from lsda.boxes import Box, boxes_to_array
from lsda.exceptions import ConfigError, DivergenceError, ValidationError
from lsda.model import CategoryPartition, WeightMatrix, init_network
from lsda.train import (
    BACKGROUND,
    ArchConfig,
    FreezeMask,
    RegionPool,
    TrainConfig,
    finetune,
    full_image_inputs,
    gradient_check,
    label_regions,
    loss_and_grads,
    pretrain,
    pretrain_arrays,
    sample_detection_batch,
    training_accuracy,
)


def test_label_regions_examples():
    gt = boxes_to_array([Box(0, 0, 10, 10)])
    lab = np.array([3])
    boxes = boxes_to_array([Box(0, 0, 10, 10), Box(20, 20, 30, 30), Box(0, 3, 10, 13), Box(0, 4, 10, 14)])
    assert label_regions(boxes, gt, lab, 0.5).tolist() == [3, BACKGROUND, 3, BACKGROUND]


def test_freeze_mask_parsing():
    m = FreezeMask.parse("bgrnd+fc6+fc7+fcB")
    assert m.trainable == frozenset({"background", "fc6", "fc7", "fcB"})
    assert m.label == "bgrnd+fc6+fc7+fcB"
    assert m.trains_delta
    with pytest.raises(ConfigError):
        FreezeMask.parse("fc6")
    with pytest.raises(ConfigError):
        FreezeMask.parse("bgrnd+fcA")
    net = init_network(CategoryPartition.create("abcd", 2), 8, (6, 5, 4))
    assert FreezeMask.parse("bgrnd+layers").layer_indices(net) == {0, 1, 2}
    assert FreezeMask.parse("bgrnd+fc6").layer_indices(net) == {1}
    with pytest.raises(ConfigError):
        FreezeMask.parse("bgrnd+layer_7").layer_indices(net)


# --- gradients ---------------------------------------------------------------------------------

def toy_arrays(seed=0, n=60, d=12, K=4):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(K, d))
    y = np.arange(n) % K
    X = np.abs(centres[y] + 0.3 * rng.normal(size=(n, d)))
    return X, y


def test_single_example_linear_closed_form():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5))
    W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    _, _, _, _, dW, db = loss_and_grads([], [], W, b, x, np.array([1]))
    z = W @ x[0] + b
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    onehot = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(dW, np.outer(p - onehot, x[0]), atol=1e-14)
    np.testing.assert_allclose(db, p - onehot, atol=1e-14)


def test_gradient_check_trained_toy():
    X, y = toy_arrays()
    part = CategoryPartition.create("abcd", 2)
    net = pretrain_arrays(X, y, part, TrainConfig(epochs=20, batch_size=10), ArchConfig(hidden=(16, 8)))
    assert gradient_check(net, X[:16], y[:16], n_coords=200) < 1e-4
    assert gradient_check(net, X[:16], y[:16], n_coords=200, weight_decay=1e-3) < 1e-4
    det = net.replace(head=net.head.to_detector(WeightMatrix(np.full((1, 8), 0.1), [0.2])))
    assert gradient_check(det, X[:16], np.where(y[:16] == 3, 4, y[:16]), n_coords=200) < 1e-4


def test_gradient_check_zero_network():
    part = CategoryPartition.create("abcd", 2)
    net = init_network(part, 6, (5,), seed=0)
    zero = net.replace(layers=(WeightMatrix.zeros(5, 6),),
                       head=net.head.replace(fcA=WeightMatrix.zeros(2, 5), fcB=WeightMatrix.zeros(2, 5)))
    assert gradient_check(zero, np.zeros((3, 6)), np.array([0, 1, 2]), n_coords=42) < 1e-6


# --- pretraining -----------------------------------------------------------------------------

def test_pretrain_zero_epochs_and_determinism():
    X, y = toy_arrays(1)
    part = CategoryPartition.create("abcd", 2)
    arch = ArchConfig(hidden=(10, 6))
    init = init_network(part, X.shape[1], arch.hidden, seed=5)
    assert pretrain_arrays(X, y, part, TrainConfig(epochs=0, seed=5), arch).bit_equal(init)
    a = pretrain_arrays(X, y, part, TrainConfig(epochs=3, seed=5), arch)
    b = pretrain_arrays(X, y, part, TrainConfig(epochs=3, seed=5), arch)
    assert a.bit_equal(b)
    assert not a.bit_equal(init)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_names_epoch():
    X, y = toy_arrays(2)
    X = X * 1e200
    part = CategoryPartition.create("abcd", 2)
    with pytest.raises(DivergenceError, match="epoch"):
        pretrain_arrays(X, y, part, TrainConfig(epochs=5, lr=10.0), ArchConfig(hidden=(10,)))


def test_pretrain_missing_category():
    X, y = toy_arrays(3)
    part = CategoryPartition.create("abcde", 2)
    with pytest.raises(ValidationError):
        pretrain_arrays(X, y, part, TrainConfig(epochs=1), ArchConfig(hidden=(4,)))


def test_loss_moving_average_non_increasing():
    X, y = toy_arrays(4, n=120)
    part = CategoryPartition.create("abcd", 2)
    history = []
    pretrain_arrays(X, y, part, TrainConfig(epochs=30, batch_size=16), ArchConfig(hidden=(16, 8)), history)
    losses = np.array([r.loss for r in history])
    avg = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(avg) <= 1e-12)


def test_pretrain_synthetic_accuracy(synthetic_data):
    root, man = synthetic_data
    history = []
    net = pretrain(man["classification"], root, TrainConfig(epochs=30), ArchConfig(), history)
    X, y = full_image_inputs(man["classification"], root)
    assert training_accuracy(net, X, y) >= 0.9
    assert history[-1].accuracy >= 0.9


# --- detection fine-tuning -------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_setup(synthetic_data):
    root, man = synthetic_data
    arch = ArchConfig(hidden=(24, 12, 12), input_size=12)
    cfg = TrainConfig(epochs=3, batch_size=32, seed=3)
    pre = pretrain(man["classification"], root, cfg, arch)
    pool = RegionPool.from_manifest(man["detection"], root, cfg, arch)
    return pre, pool, cfg


def test_pool_and_batch_composition(toy_setup):
    _, pool, cfg = toy_setup
    assert len(pool.positives) > 0 and len(pool.backgrounds) > 0
    rng = np.random.default_rng(0)
    X, labels = sample_detection_batch(pool, cfg, rng)
    assert len(labels) == cfg.batch_size
    assert np.sum(labels != BACKGROUND) == round(0.25 * cfg.batch_size)
    assert np.all(labels[labels != BACKGROUND] < 4)


def test_batch_scarce_positives_duplicated_at_most_twice():
    X = np.arange(10, dtype=float).reshape(10, 1)
    labels = np.array([0, 1, 2] + [BACKGROUND] * 7)
    pool = RegionPool(X, labels)
    cfg = TrainConfig(batch_size=32)
    bx, bl = sample_detection_batch(pool, cfg, np.random.default_rng(0))
    pos_rows = bx[bl != BACKGROUND, 0]
    assert np.bincount(pos_rows.astype(int)).max() <= 2
    assert len(pos_rows) == 6
    with pytest.raises(ValidationError):
        sample_detection_batch(RegionPool(X[:3], labels[:3]), cfg, np.random.default_rng(0))


MASKS = ["bgrnd", "bgrnd+fc6", "bgrnd+fc7", "bgrnd+fcB", "bgrnd+fc6+fc7", "bgrnd+fc6+fc7+fcB",
         "bgrnd+layers+fcB", "bgrnd+layers"]


@pytest.mark.parametrize("mask_text", MASKS)
def test_frozen_blocks_bit_identical(toy_setup, mask_text):
    pre, pool, cfg = toy_setup
    mask = FreezeMask.parse(mask_text)
    ft, dB = finetune(pre, pool, mask, cfg.replace(epochs=1))
    trained = mask.layer_indices(pre)
    for i, (a, b) in enumerate(zip(pre.layers, ft.layers)):
        assert a.bit_equal(b) == (i not in trained), f"layer {i}"
    assert ft.head.fcA.bit_equal(pre.head.fcA)
    assert ft.head.fcB.bit_equal(pre.head.fcB)
    assert ft.head.deltaB.bit_equal(dB)
    assert bool(np.any(dB.values)) == mask.trains_delta
    assert not np.any(ft.head.deltaA.values)
    assert np.any(ft.head.background.values)
    assert ft.state == "detector"


def test_zero_epochs_zero_delta(toy_setup):
    pre, pool, cfg = toy_setup
    ft, dB = finetune(pre, pool, FreezeMask.parse("bgrnd+layers+fcB"), cfg.replace(epochs=0))
    assert dB.bit_equal(WeightMatrix.zeros(4, 12))
    assert ft.head.background.bit_equal(WeightMatrix.zeros(1, 12))


def test_direct_and_delta_parameterizations_agree(toy_setup):
    pre, pool, cfg = toy_setup
    mask = FreezeMask.parse("bgrnd+layers+fcB")
    c5 = cfg.replace(epochs=5)
    a, dA = finetune(pre, pool, mask, c5, parameterization="delta")
    b, dB = finetune(pre, pool, mask, c5, parameterization="direct")
    rows_a = pre.head.fcB.values + dA.values
    rows_b = pre.head.fcB.values + dB.values
    assert np.max(np.abs(rows_a - rows_b)) < 1e-9
    for la, lb in zip(a.layers, b.layers):
        assert np.max(np.abs(la.values - lb.values)) < 1e-9


def test_finetune_determinism_and_errors(toy_setup):
    pre, pool, cfg = toy_setup
    mask = FreezeMask.parse("bgrnd+fc7+fcB")
    a = finetune(pre, pool, mask, cfg)
    b = finetune(pre, pool, mask, cfg)
    assert a[0].bit_equal(b[0]) and a[1].bit_equal(b[1])
    with pytest.raises(ValidationError):
        finetune(a[0], pool, mask, cfg)
    with pytest.raises(ConfigError):
        finetune(pre, pool, mask, cfg, parameterization="sideways")


def test_oracle_finetune_trains_all_rows(toy_setup, synthetic_data):
    pre, _, cfg = toy_setup
    root, man = synthetic_data
    arch = ArchConfig(hidden=(24, 12, 12), input_size=12)
    pool = RegionPool.from_manifest(man["oracle_detection"], root, cfg, arch)
    with pytest.raises(ValidationError):
        finetune(pre, pool, FreezeMask.parse("bgrnd+fcB"), cfg.replace(epochs=1))
    ft, dB = finetune(pre, pool, FreezeMask.parse("bgrnd+fcB"), cfg.replace(epochs=1), trained_categories=range(8))
    assert np.any(ft.head.deltaA.values)
    assert ft.head.fcA.bit_equal(pre.head.fcA)
