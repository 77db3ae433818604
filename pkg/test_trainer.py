"""
Trainer Test
Covers the learning-rate schedule, SGD updates, batching, the monitor split and a short training run
"""

import os
import sys

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from architectures import build_mnist2d
from checkpoint import encode_checkpoint
from errors import ContractViolation, NumericalError, UsageError
from network import Network
from tensor_core import Tensor, cross_entropy
from trainer import (
    BatchSampler, LrSchedule, OptimizerConfig, TrainingData, augment_flip, lr_at_epoch, sgd_step,
    split_train_monitor, train, train_step,
)


def _param(values, name="w"):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


def _tiny_mnist(n, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, (n, 1, 28, 28)).astype(np.float32)
    labels = rng.integers(0, 10, n)
    return TrainingData(images, labels)


def test_learning_rate_schedule():
    schedule = LrSchedule()
    rates = [lr_at_epoch(schedule, e) for e in range(1, 6)]
    assert_allclose(rates, [0.1, 0.1, 0.01, 0.001, 0.0001], rtol=1e-12)
    for epoch in (0, 6):
        try:
            lr_at_epoch(schedule, epoch)
        except ContractViolation:
            continue
        raise AssertionError(f"epoch {epoch} was accepted")


def test_plain_sgd_step():
    p = _param([1.0, -2.0])
    config = OptimizerConfig(momentum=0.0, weight_decay=0.0)
    sgd_step([p], {"w": np.array([0.5, 1.0])}, config, 0.1)
    assert_allclose(p.data, [0.95, -2.1])


def test_pure_decay_step():
    p = _param([4.0, -3.0])
    sgd_step([p], {"w": np.zeros(2)}, OptimizerConfig(weight_decay=5e-4), 0.1)
    assert_allclose(p.data, np.array([4.0, -3.0]) * (1 - 5e-5), rtol=1e-14)


def test_two_momentum_steps():
    g = np.array([0.2, -1.0])
    p = _param([1.0, 1.0])
    config = OptimizerConfig(momentum=0.9, weight_decay=0.0)
    sgd_step([p], {"w": g}, config, 0.1)
    sgd_step([p], {"w": g}, config, 0.1)
    # v1 = g, v2 = 0.9 g + g
    assert_allclose(p.data, 1.0 - 0.1 * g - 0.1 * 1.9 * g, rtol=1e-12)


def test_slopes_skip_weight_decay():
    slopes = _param([0.25, 0.25], name="layer0.0.prelu.slopes")
    sgd_step([slopes], {"layer0.0.prelu.slopes": np.zeros(2)}, OptimizerConfig(), 0.1)
    assert_array_equal(slopes.data, [0.25, 0.25])


def test_missing_gradient_rejected():
    try:
        sgd_step([_param([1.0])], {}, OptimizerConfig(), 0.1)
    except ContractViolation as e:
        assert "'w'" in str(e)
        return
    raise AssertionError("missing gradient was accepted")


def test_sampler_covers_every_index_once():
    sampler = BatchSampler(241, batch_size=120, seed=3)
    batches = sampler.batches(1)
    assert [len(b) for b in batches] == [120, 121]
    assert_array_equal(np.sort(np.concatenate(batches)), np.arange(241))
    assert_array_equal(np.concatenate(sampler.batches(1)), np.concatenate(batches))
    assert not np.array_equal(np.concatenate(sampler.batches(2)), np.concatenate(batches))


def test_sampler_merges_lone_trailing_sample():
    for n, batch_size in ((1, 4), (8, 7), (15, 7), (22, 7), (50, 7), (361, 120)):
        batches = BatchSampler(n, batch_size, seed=n).batches(2)
        assert_array_equal(np.sort(np.concatenate(batches)), np.arange(n))
        assert n == 1 or min(len(b) for b in batches) >= 2
        assert len(batches) == max(1, n // batch_size)


def test_split_exact_fraction_and_determinism():
    labels = np.zeros(100, dtype=np.int64)
    train_idx, monitor_idx = split_train_monitor(labels, 0.95, seed=4)
    assert len(train_idx) == 95 and len(monitor_idx) == 5
    again = split_train_monitor(labels, 0.95, seed=4)
    assert_array_equal(train_idx, again[0])
    assert_array_equal(monitor_idx, again[1])


def test_split_is_disjoint_and_complete():
    rng = np.random.default_rng(5)
    labels = np.concatenate([np.full(40, 0), np.full(25, 1), rng.integers(2, 30, 60)])
    train_idx, monitor_idx = split_train_monitor(labels, 0.95, seed=1)
    assert not set(train_idx) & set(monitor_idx)
    assert_array_equal(np.sort(np.concatenate([train_idx, monitor_idx])), np.arange(len(labels)))
    # identities with enough samples keep their share on both sides
    assert np.sum(labels[train_idx] == 0) == 38
    assert np.sum(labels[monitor_idx] == 0) == 2


def test_split_rejects_empty_dataset():
    try:
        split_train_monitor(np.zeros(0, dtype=np.int64))
    except ContractViolation:
        return
    raise AssertionError("empty dataset was accepted")


def test_flip_augmentation():
    batch = np.random.default_rng(6).standard_normal((5, 1, 4, 3))
    flipped = augment_flip(batch, 1.0)
    assert_array_equal(flipped, batch[..., ::-1])
    assert_array_equal(augment_flip(batch, 0.0), batch)
    assert_array_equal(augment_flip(flipped, 1.0), batch)


def test_zero_learning_rate_keeps_parameters():
    network = Network(build_mnist2d(), seed=1)
    data = _tiny_mnist(6)
    before = {t.name: t.data.copy() for t in network.parameters()}
    train_step(network, data.images, data.labels, OptimizerConfig(), 0.0)
    for tensor in network.parameters():
        assert_array_equal(tensor.data, before[tensor.name])


def test_one_step_lowers_batch_loss():
    network = Network(build_mnist2d(), seed=2)
    data = _tiny_mnist(8, seed=2)
    optimizer = OptimizerConfig(momentum=0.0, weight_decay=0.0)
    before = train_step(network, data.images, data.labels, optimizer, 1e-3)
    network.train()
    after = cross_entropy(network.forward(Tensor(data.images)).logits, data.labels).item()
    assert after < before, f"loss went from {before} to {after}"


def test_short_training_run():
    data = _tiny_mnist(24, seed=3)
    schedule = LrSchedule(total_epochs=2, base_lr=0.01)
    logs = []
    for _ in range(2):
        network = Network(build_mnist2d(), seed=7)
        result = train(network, data, OptimizerConfig(), schedule, BatchSampler(len(data), 8, seed=7),
                       monitor=data.subset(np.arange(6)), quiet=True)
        logs.append(result.metrics_log())
        assert len(result.history) == 2
        assert [m.lr for m in result.history] == [0.01, 0.01]
        assert all(np.isfinite(m.train_loss) for m in result.history)
        assert 0.0 <= result.final.monitor_acc <= 1.0
        assert all(state.mode == "eval" for _, state in network.feature_norm_states())
    assert logs[0] == logs[1]
    assert all(len(line.split("\t")) == 4 for line in logs[0].splitlines())


def test_identical_seeds_give_identical_checkpoints():
    data = _tiny_mnist(17, seed=4)
    payloads = []
    for _ in range(2):
        network = Network(build_mnist2d(center_loss=True), seed=11)
        train(network, data, OptimizerConfig(), LrSchedule(total_epochs=2, base_lr=0.01),
              BatchSampler(len(data), 8, seed=11), quiet=True)
        payloads.append(encode_checkpoint(network.state_dict(include_head=True)))
    assert payloads[0] == payloads[1]


def test_zero_epochs_is_usage_error():
    try:
        train(Network(build_mnist2d()), _tiny_mnist(4), OptimizerConfig(), LrSchedule(total_epochs=0),
              BatchSampler(4, 2), quiet=True)
    except UsageError as e:
        assert "nothing to train" in str(e)
        return
    raise AssertionError("zero epochs was accepted")


def test_divergence_names_batch():
    network = Network(build_mnist2d(), seed=0)
    for tensor in network.parameters():
        if tensor.name.startswith("head."):
            tensor.data[:] = np.nan
    try:
        train(network, _tiny_mnist(4), OptimizerConfig(), LrSchedule(total_epochs=1),
              BatchSampler(4, 2, augment=False), quiet=True)
    except NumericalError as e:
        assert "epoch 1, batch 0" in str(e)
        return
    raise AssertionError("NaN loss did not abort training")


TESTS = [
    test_learning_rate_schedule,
    test_plain_sgd_step,
    test_pure_decay_step,
    test_two_momentum_steps,
    test_slopes_skip_weight_decay,
    test_missing_gradient_rejected,
    test_sampler_covers_every_index_once,
    test_sampler_merges_lone_trailing_sample,
    test_split_exact_fraction_and_determinism,
    test_split_is_disjoint_and_complete,
    test_split_rejects_empty_dataset,
    test_flip_augmentation,
    test_zero_learning_rate_keeps_parameters,
    test_one_step_lowers_batch_loss,
    test_short_training_run,
    test_identical_seeds_give_identical_checkpoints,
    test_zero_epochs_is_usage_error,
    test_divergence_names_batch,
]


def main():
    print("=" * 70)
    print("TRAINER TESTS")
    print("=" * 70)

    results = {}
    for test in TESTS:
        try:
            test()
            results[test.__name__] = True
        except Exception as e:
            print(f"✗ {test.__name__}: {type(e).__name__}: {e}")
            results[test.__name__] = False

    print("\n" + "=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)
    for name, passed in results.items():
        print(f"{name}: {'✓ PASSED' if passed else '✗ FAILED'}")

    all_passed = all(results.values())
    print("\n" + ("✓ ALL TRAINER TESTS PASSED" if all_passed else "✗ SOME TESTS FAILED"))
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
