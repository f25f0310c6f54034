"""The twelve acceptance criteria at their stated sizes and tolerances.

Each test prints one PASS/FAIL line.  The full run takes roughly ten minutes.
"""
import pytest

from fastslow import acceptance
from fastslow.cli import main


@pytest.fixture(scope="module")
def ctx():
    return acceptance.Context(acceptance.FULL, seed=0, workers=1)


def report(capsys, res):
    with capsys.disabled():
        print("\n" + res.line() + f" [{res.seconds:.1f} s]")
    return res


@pytest.mark.slow
@pytest.mark.parametrize("number", range(1, 12))
def test_criterion(ctx, capsys, number):
    res = report(capsys, acceptance.CRITERIA[number](ctx))
    assert res.passed, res.value


@pytest.mark.slow
def test_criterion_12_reproducibility(ctx, capsys, tmp_path):
    res = acceptance.CRITERIA[12](ctx)
    # the verify command itself: two runs with one seed, then another worker count
    runs = []
    for i, workers in enumerate(("1", "1", "2")):
        out = tmp_path / f"v{i}"
        main(["verify", "--quick", "--only", "2", "5", "6", "7", "--seed", "3",
              "--workers", workers, "--out", str(out)])
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    files_equal = runs[0] == runs[1] == runs[2] and len(runs[0]) == 2
    res = acceptance.CriterionResult(
        12, res.name, res.passed and files_equal,
        f"{res.value}; verify outputs {'byte-identical' if files_equal else 'differ'}",
        res.tolerance, res.seconds)
    report(capsys, res)
    assert res.passed, res.value
