"""Acceptance criteria, one test per criterion, each printing a verdict line.

Every tolerance here is fixed by the project contract; nothing is calibrated
at runtime.  Monte Carlo criteria run at their pinned default seeds.
"""

import filecmp
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from postulatelab import checks, engine, model
from postulatelab.checks import (
    BornParams,
    born_convergence_curve,
    check_outcome_subspace_closure,
    chi_norm_exact,
    conditional_factorization_check,
    default_closure_setup,
    hoeffding_bound,
    overlap_statistics,
    postulate_b_sweep,
    random_projector_family,
    sequential_frequency_check,
)
from postulatelab.cli import SUITE_CONVERGENCE_NS, _default_qubit_collapse
from postulatelab.engine import RepeatedMeasurementConfig, collapse_branch_ledger, cross_validate
from postulatelab.linalg import SpaceLabel, Subspace, random_state, spawn_seed
from postulatelab.model import (
    ExperimentAssembly,
    Microsystem,
    UnitaryCompletionError,
    build_apparatus,
    measurement_step,
)


def verdict(number: int, name: str, passed: bool, detail: str = "") -> None:
    import conftest

    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number} [{name}]: {status} {detail}".rstrip()
    print(line)
    conftest.ACCEPTANCE_VERDICTS.append(line)
    assert passed, f"criterion {number} ({name}) failed: {detail}"


def test_criterion_1_hoeffding_bound_on_full_grid():
    worst_gap = -math.inf
    points = 0
    for p in checks.DEFAULT_GRID_PS:
        for eps in checks.DEFAULT_GRID_EPSILONS:
            for n in checks.DEFAULT_GRID_NS:
                params = BornParams(p, eps, n)
                gap = chi_norm_exact(params) - hoeffding_bound(params)
                worst_gap = max(worst_gap, gap)
                points += 1
    extreme = chi_norm_exact(BornParams(0.5, 0.1, 10_000))
    ok = worst_gap <= 0.0 and extreme < 1e-80 and points == 27 * 4
    verdict(
        1,
        "hoeffding-grid",
        ok,
        f"points={points} worst_gap={worst_gap:.3e} chi(0.5,0.1,1e4)={extreme:.3e}",
    )


def test_criterion_2_born_convergence():
    p, eps = 0.3, 0.05
    rows = born_convergence_curve(p, eps, SUITE_CONVERGENCE_NS)
    first_small = next((r.n for r in rows if r.chi_exact < 1e-3), None)
    onset = 2.0 / eps**2
    tail = [r for r in rows if r.n >= onset]
    monotone = all(
        b.chi_exact < a.chi_exact * (1.0 + 1e-12) and b.chi_exact != a.chi_exact
        for a, b in zip(tail, tail[1:])
    )
    ok = first_small is not None and first_small <= 5000 and monotone
    verdict(
        2,
        "born-convergence",
        ok,
        f"first_n_below_1e-3={first_small} monotone_from_{int(onset)}={monotone}",
    )


def test_criterion_3_dense_ledger_equivalence():
    started = time.monotonic()
    config = RepeatedMeasurementConfig(p=0.3, macrostate_dim=4, seed=7)
    worst = 0.0
    for n in (1, 2, 3):
        report = cross_validate(config, n)
        assert report.multiplicity_match
        worst = max(worst, report.max_discrepancy)
    elapsed = time.monotonic() - started
    ok = worst <= 1e-9 and elapsed < 60.0
    verdict(3, "dense-vs-ledger", ok, f"max_discrepancy={worst:.3e} elapsed={elapsed:.1f}s")


def test_criterion_4_postulate_a():
    micro, apparatus = default_closure_setup(12345)
    closure = check_outcome_subspace_closure(micro, apparatus, 100, 12345, tol=1e-10)

    space = SpaceLabel("s", 2)
    overlap = 0.3
    tilted = np.array([overlap, math.sqrt(1 - overlap**2)], dtype=complex)
    bad_micro = Microsystem(
        space,
        {
            "1": Subspace(space, np.array([[1.0], [0.0]], dtype=complex)),
            "2": Subspace(space, tilted[:, None]),
        },
        certify=False,
    )
    bad_apparatus = build_apparatus(2, 4, 5)
    bad_assembly = ExperimentAssembly([bad_micro, bad_apparatus])
    rejected = False
    completion_defect = 0.0
    try:
        measurement_step(bad_assembly, bad_apparatus, bad_micro)
    except UnitaryCompletionError as err:
        rejected = True
        completion_defect = err.defect
    ok = closure.passed and rejected and completion_defect > 1e-6
    verdict(
        4,
        "postulate-a",
        ok,
        f"closure_defect={closure.defect:.3e} completion_defect={completion_defect:.3e}",
    )


def test_criterion_5_postulate_b():
    apparatus_seeds = [spawn_seed(12345, "apparatus", i) for i in range(5)]
    report = postulate_b_sweep(50, apparatus_seeds, 12345, tol=1e-9)
    ok = report.passed and report.details["runs"] == 250
    verdict(5, "postulate-b", ok, f"runs={report.details['runs']} worst={report.defect:.3e}")


def test_criterion_6_postulate_d():
    worst_weight_diff = 0.0
    worst_total = 0.0
    worst_fact = 0.0
    rank_profiles = [(1, 3), (2, 2), (3, 1), (1, 1, 2), (2, 1, 1)]
    space = SpaceLabel("s", 4)
    for i in range(100):
        rng = np.random.default_rng(spawn_seed(999, "instance", i))
        ranks_a = rank_profiles[int(rng.integers(len(rank_profiles)))]
        ranks_b = rank_profiles[int(rng.integers(len(rank_profiles)))]
        first = random_projector_family(
            space, ranks_a, [str(j) for j in range(len(ranks_a))], spawn_seed(999, i, "f")
        )
        second = random_projector_family(
            space, ranks_b, [chr(97 + j) for j in range(len(ranks_b))], spawn_seed(999, i, "g")
        )
        psi = random_state(space, spawn_seed(999, i, "psi"))
        ledger = collapse_branch_ledger(psi, first, second)
        # direct projector algebra, computed independently of the ledger path
        total = 0.0
        for branch in ledger.branches:
            lam, xi = branch.outcomes
            sandwich = first[lam].matrix @ second[xi].matrix @ first[lam].matrix
            direct = float(np.vdot(psi.amplitudes, sandwich @ psi.amplitudes).real)
            worst_weight_diff = max(worst_weight_diff, abs(branch.weight - direct))
            total += direct
        worst_total = max(worst_total, abs(total - 1.0))
        fact = conditional_factorization_check(psi, first, second)
        worst_fact = max(worst_fact, fact.defect)

    psi_q, first_q, second_q = _default_qubit_collapse()
    freq = sequential_frequency_check(psi_q, first_q, second_q, 100_000, spawn_seed(999, "mc"))
    targets = {
        ("1", "alpha"): 0.5,
        ("1", "beta"): 0.5,
        ("2", "alpha"): 0.0,
        ("2", "beta"): 0.0,
    }
    ledger_q = collapse_branch_ledger(psi_q, first_q, second_q)
    analytic_ok = all(
        abs(ledger_q.weight_of(k) - v) <= 1e-12 for k, v in targets.items()
    )
    ok = (
        worst_weight_diff <= 1e-10
        and worst_total <= 1e-10
        and worst_fact <= 1e-10
        and freq.passed
        and analytic_ok
    )
    verdict(
        6,
        "postulate-d",
        ok,
        f"weights={worst_weight_diff:.3e} total={worst_total:.3e} "
        f"factorization={worst_fact:.3e} mc_bands={freq.passed}",
    )


def test_criterion_7_generic_orthogonality():
    means = []
    ok = True
    detail_parts = []
    for d in (64, 1024, 4096):
        summary = overlap_statistics(d, 10_000, spawn_seed(12345, "overlap", d))
        gap = abs(summary.mean - summary.expected_mean)
        band = 3.0 * summary.std_error
        ok = ok and gap <= band
        means.append(summary.mean)
        detail_parts.append(f"d={d}:|mean-1/d|={gap:.2e}<=3se={band:.2e}")
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    ok = ok and decreasing
    verdict(7, "generic-overlap", ok, " ".join(detail_parts) + f" decreasing={decreasing}")


@pytest.mark.parametrize("thread_counts", [("1", "4")])
def test_criterion_8_suite_determinism(tmp_path, thread_counts):
    outputs = []
    for i, threads in enumerate(thread_counts):
        out_dir = tmp_path / f"run{i}"
        env = dict(os.environ)
        env["OMP_NUM_THREADS"] = threads
        env["OPENBLAS_NUM_THREADS"] = threads
        result = subprocess.run(
            [
                sys.executable,
                "-m",
                "postulatelab",
                "suite",
                "--seed",
                "12345",
                "--out",
                str(out_dir),
            ],
            env=env,
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stdout + result.stderr
        outputs.append(out_dir)

    names = sorted(p.name for p in outputs[0].iterdir())
    assert names == sorted(p.name for p in outputs[1].iterdir())
    match, mismatch, errors = filecmp.cmpfiles(
        outputs[0], outputs[1], names, shallow=False
    )
    identical = not mismatch and not errors
    verdict(
        8,
        "suite-determinism",
        identical,
        f"files={len(names)} mismatched={mismatch} thread_counts={thread_counts}",
    )
    summary = json.loads((outputs[0] / "summary.json").read_text())
    assert summary["all_passed"] is True
