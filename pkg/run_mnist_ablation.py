"""
MNIST feature-normalization ablation.

Trains the 2-D MNIST network in four configurations (plain softmax, +FN, +CL,
+FN+CL) for each seed with the same recipe, then writes a results table of test
accuracy and angular scatter ratio R plus one "x y label" dump per run, and
evaluates the acceptance checks against that table (acceptance.tsv).

    python run_mnist_ablation.py --mnist-dir data/mnist --seeds 1,2,3 --out runs/ablation
"""

import os
import sys

from dataclasses import dataclass

import click
import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from architectures import build_mnist2d
from checkpoint import atomic_write_text, save_head, save_model
from datasets import load_mnist_normalized
from network import Network, evaluate_accuracy
from trainer import BatchSampler, LrSchedule, OptimizerConfig, TrainingData, split_train_monitor, train
from verification import angular_scatter

MIN_MONITOR_ACCURACY = 0.97
CENTER_LOSS_R_BAND = 0.25

CONFIGURATIONS = {
    "softmax": dict(feature_norm=False, center_loss=False),
    "fn": dict(feature_norm=True, center_loss=False),
    "cl": dict(feature_norm=False, center_loss=True),
    "fn_cl": dict(feature_norm=True, center_loss=True),
}


def run_one(name, seed, train_data, test_images, test_labels, epochs, batch_size, out_dir, quiet):
    spec = build_mnist2d(**CONFIGURATIONS[name])
    network = Network(spec, seed=seed)
    train_idx, monitor_idx = split_train_monitor(train_data.labels, 0.95, seed)
    result = train(
        network,
        train_data.subset(train_idx),
        OptimizerConfig(),
        LrSchedule(total_epochs=epochs),
        BatchSampler(len(train_idx), batch_size, seed),
        monitor=train_data.subset(monitor_idx),
        quiet=quiet,
    )
    features = network.embed(test_images)
    run_dir = os.path.join(out_dir, f"{name}_seed{seed}")
    save_model(os.path.join(run_dir, "features.dvck"), network)
    save_head(os.path.join(run_dir, "head.dvck"), network)
    atomic_write_text(
        os.path.join(run_dir, "features2d.txt"),
        "".join(f"{x:.6f} {y:.6f} {int(label)}\n" for (x, y), label in zip(features, test_labels)),
    )
    accuracy = evaluate_accuracy(network, test_images, test_labels)
    return AblationRow(name, seed, accuracy, angular_scatter(features, test_labels).ratio, result.final.monitor_acc)


@dataclass
class AblationRow:
    config: str
    seed: int
    test_acc: float
    ratio: float
    monitor_acc: float

    def line(self):
        return f"{self.config}\t{self.seed}\t{self.test_acc:.6f}\t{self.ratio:.6f}\t{self.monitor_acc:.6f}"


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{self.name}\t{'pass' if self.passed else 'fail'}\t{self.detail}"


def acceptance_checks(rows):
    """
    Compare configurations over the seeds they share. A check whose
    configurations were not run is left out.
    """
    table = {(r.config, r.seed): r for r in rows}
    seeds = sorted({r.seed for r in rows})

    def paired(a, b):
        return [s for s in seeds if (a, s) in table and (b, s) in table]

    checks = []
    for seed in paired("fn", "softmax"):
        fn, plain = table["fn", seed].ratio, table["softmax", seed].ratio
        checks.append(Check(f"R(fn) > R(softmax), seed {seed}", fn > plain, f"{fn:.4f} vs {plain:.4f}"))
    for seed in paired("fn_cl", "fn"):
        both, fn = table["fn_cl", seed].ratio, table["fn", seed].ratio
        gap = abs(both - fn) / fn if fn > 0 else float("inf")
        checks.append(Check(f"R(fn_cl) within {CENTER_LOSS_R_BAND:.0%} of R(fn), seed {seed}",
                            gap <= CENTER_LOSS_R_BAND, f"{both:.4f} vs {fn:.4f} ({gap:.1%} apart)"))
    shared = paired("fn", "softmax")
    if shared:
        fn = float(np.mean([table["fn", s].test_acc for s in shared]))
        plain = float(np.mean([table["softmax", s].test_acc for s in shared]))
        checks.append(Check("mean acc(fn) > mean acc(softmax)", fn > plain, f"{fn:.4f} vs {plain:.4f}"))
    for r in rows:
        checks.append(Check(f"monitor acc >= {MIN_MONITOR_ACCURACY:g}, {r.config} seed {r.seed}",
                            r.monitor_acc >= MIN_MONITOR_ACCURACY, f"{r.monitor_acc:.4f}"))
    return checks


@click.command()
@click.option("--mnist-dir", default="data/mnist", type=click.Path(file_okay=False))
@click.option("--seeds", default="1,2,3", help="Comma-separated seeds.")
@click.option("--configs", default=",".join(CONFIGURATIONS), help="Subset of softmax,fn,cl,fn_cl.")
@click.option("--epochs", default=5, type=int)
@click.option("--batch", "batch_size", default=120, type=int)
@click.option("--limit", default=None, type=int, help="Use only the first N training images.")
@click.option("--out", "out_dir", default="runs/ablation", type=click.Path(file_okay=False))
@click.option("--quiet", is_flag=True)
def main(mnist_dir, seeds, configs, epochs, batch_size, limit, out_dir, quiet):
    """Train every configuration for every seed and tabulate accuracy and R."""
    seeds = [int(s) for s in seeds.split(",") if s.strip()]
    names = [c.strip() for c in configs.split(",") if c.strip()]
    unknown = [n for n in names if n not in CONFIGURATIONS]
    if unknown:
        raise click.BadParameter(f"unknown configuration(s): {', '.join(unknown)}", param_hint="--configs")

    images, labels = load_mnist_normalized(mnist_dir, "train", limit)
    test_images, test_labels = load_mnist_normalized(mnist_dir, "test")
    train_data = TrainingData(images, labels)

    rows = []
    for name in names:
        for seed in seeds:
            print("\n" + "=" * 70)
            print(f"{name.upper()} - seed {seed}")
            print("=" * 70)
            row = run_one(name, seed, train_data, test_images, test_labels, epochs, batch_size, out_dir, quiet)
            print(f"✓ test accuracy {row.test_acc:.4f}, R = {row.ratio:.4f}, monitor accuracy {row.monitor_acc:.4f}")
            rows.append(row)

    atomic_write_text(os.path.join(out_dir, "results.tsv"),
                      "config\tseed\ttest_acc\tR\tmonitor_acc\n" + "".join(r.line() + "\n" for r in rows))

    print("\n" + "=" * 70)
    print("ABLATION SUMMARY")
    print("=" * 70)
    for name in names:
        accs = [r.test_acc for r in rows if r.config == name]
        ratios = [r.ratio for r in rows if r.config == name]
        print(f"{name:8s} test acc {np.mean(accs):.4f}  R {np.mean(ratios):.4f}")

    checks = acceptance_checks(rows)
    atomic_write_text(os.path.join(out_dir, "acceptance.tsv"),
                      "check\tresult\tdetail\n" + "".join(c.line() + "\n" for c in checks))
    print("\n" + "=" * 70)
    print("ACCEPTANCE CHECKS")
    print("=" * 70)
    for check in checks:
        print(f"{'✓' if check.passed else '✗'} {check.name}: {check.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"\n{len(checks) - failed}/{len(checks)} checks passed")
    sys.exit(0 if failed == 0 else 1)


if __name__ == "__main__":
    main()
