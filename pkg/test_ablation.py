"""
Ablation Acceptance Test
Checks the acceptance table built from per-run accuracy and scatter results
"""

import os
import sys

from click.testing import CliRunner

ROOT = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(ROOT, 'src'))
sys.path.insert(0, ROOT)

from run_mnist_ablation import AblationRow, acceptance_checks, main as ablation_main


def _rows(fn_ratio=3.0, fn_cl_ratio=3.3, monitor=0.98):
    rows = []
    for seed in (1, 2, 3):
        rows += [
            AblationRow("softmax", seed, 0.970, 1.5, monitor),
            AblationRow("fn", seed, 0.985, fn_ratio, monitor),
            AblationRow("cl", seed, 0.980, 2.0, monitor),
            AblationRow("fn_cl", seed, 0.986, fn_cl_ratio, monitor),
        ]
    return rows


def _by_name(checks):
    return {c.name: c for c in checks}


def test_all_checks_pass_on_expected_ordering():
    checks = acceptance_checks(_rows())
    # three seeds for each ratio check, one accuracy check, one monitor check per run
    assert len(checks) == 3 + 3 + 1 + 12
    assert all(c.passed for c in checks)
    print("✓ expected ordering passes every check")


def test_scatter_ratio_must_improve_with_fn():
    rows = _rows()
    rows[5] = AblationRow("fn", 2, 0.985, 1.2, 0.98)
    checks = _by_name(acceptance_checks(rows))
    assert not checks["R(fn) > R(softmax), seed 2"].passed
    assert checks["R(fn) > R(softmax), seed 1"].passed
    print("✓ a seed where FN lowers R fails")


def test_center_loss_band():
    inside = _by_name(acceptance_checks(_rows(fn_cl_ratio=3.75)))
    outside = _by_name(acceptance_checks(_rows(fn_cl_ratio=3.9)))
    name = "R(fn_cl) within 25% of R(fn), seed 1"
    assert inside[name].passed
    assert not outside[name].passed
    assert "30.0% apart" in outside[name].detail
    print("✓ FN+CL scatter ratio judged against a 25% band")


def test_accuracy_ordering_uses_seed_means():
    rows = _rows()
    rows[1] = AblationRow("fn", 1, 0.900, 3.0, 0.98)
    checks = _by_name(acceptance_checks(rows))
    assert not checks["mean acc(fn) > mean acc(softmax)"].passed
    print("✓ accuracy ordering compares three-seed means")


def test_monitor_accuracy_floor():
    checks = acceptance_checks(_rows(monitor=0.96))
    monitor = [c for c in checks if c.name.startswith("monitor acc")]
    assert len(monitor) == 12 and not any(c.passed for c in monitor)
    assert _by_name(acceptance_checks(_rows(monitor=0.97)))["monitor acc >= 0.97, fn seed 3"].passed
    print("✓ monitor accuracy below 0.97 fails")


def test_missing_configurations_skip_their_checks():
    rows = [r for r in _rows() if r.config in ("softmax", "cl")]
    checks = acceptance_checks(rows)
    assert all(c.name.startswith("monitor acc") for c in checks)
    assert acceptance_checks([]) == []
    print("✓ checks need both configurations they compare")


def test_unknown_configuration_rejected():
    result = CliRunner().invoke(ablation_main, ["--configs", "softmax,bogus"])
    assert result.exit_code == 2
    assert "bogus" in result.output
    print("✓ unknown configuration rejected before loading data")


TESTS = [
    test_all_checks_pass_on_expected_ordering,
    test_scatter_ratio_must_improve_with_fn,
    test_center_loss_band,
    test_accuracy_ordering_uses_seed_means,
    test_monitor_accuracy_floor,
    test_missing_configurations_skip_their_checks,
    test_unknown_configuration_rejected,
]


def main():
    print("=" * 70)
    print("ABLATION ACCEPTANCE TESTS")
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
    print("\n" + ("✓ ALL ABLATION TESTS PASSED" if all_passed else "✗ SOME TESTS FAILED"))
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
