"""Verification-procedure tests: tails and bounds, closure, determinism of
student verdicts, sequential frequencies, factorization, generic overlaps."""

import math
from fractions import Fraction

import numpy as np
import pytest

from postulatelab import _binomial
from postulatelab.checks import (
    BornParams,
    CheckReport,
    born_convergence_curve,
    check_outcome_subspace_closure,
    check_postulate_b,
    chi_norm_exact,
    conditional_factorization_check,
    default_closure_setup,
    default_postulate_b_setup,
    frequency_band_mass,
    hoeffding_bound,
    hoeffding_grid_check,
    orthogonality_residual,
    overlap_statistics,
    postulate_b_sweep,
    random_projector_family,
    sequential_frequency_check,
)
from postulatelab.engine import collapse_branch_ledger
from postulatelab.linalg import (
    Projector,
    SpaceLabel,
    StateVector,
    Subspace,
    basis_state,
    random_state,
    spawn_seed,
)
from postulatelab.model import (
    ExperimentAssembly,
    STUDENT_RULES,
    build_apparatus,
    build_microsystem,
    build_student,
    measurement_step,
    readout_step,
    realizes,
)


def exact_tail_fraction(p_frac: Fraction, eps_frac: Fraction, n: int) -> Fraction:
    """Independent oracle: the two-sided tail as an exact rational, summing
    C(n,m) p^m (1-p)^(n-m) term by term over m <= n(p-eps) or m >= n(p+eps)."""
    lo = n * (p_frac - eps_frac)
    hi = n * (p_frac + eps_frac)
    total = Fraction(0)
    for m in range(n + 1):
        if Fraction(m) <= lo or Fraction(m) >= hi:
            total += (
                math.comb(n, m) * p_frac**m * (1 - p_frac) ** (n - m)
            )
    return total


class TestChiNormExact:
    def test_empty_tails(self):
        assert chi_norm_exact(BornParams(0.5, 0.6, 10)) == 0.0

    def test_single_repetition_everything_in_tail(self):
        # m=0 sits at or below n(p-eps)=0.4; m=1 sits at or above 0.6.
        assert chi_norm_exact(BornParams(0.5, 0.1, 1)) == pytest.approx(1.0, abs=1e-15)

    def test_against_exact_rational_oracle(self):
        val = chi_norm_exact(BornParams(0.3, 0.1, 100))
        oracle = exact_tail_fraction(Fraction(3, 10), Fraction(1, 10), 100)
        assert val == pytest.approx(float(oracle), rel=1e-10)

    def test_against_direct_per_m_float_sum(self):
        p, eps, n = 0.3, 0.1, 100
        direct = 0.0
        for m in range(n + 1):
            if _binomial.in_tail(m, n, p, eps):
                direct += math.comb(n, m) * p**m * (1 - p) ** (n - m)
        assert chi_norm_exact(BornParams(p, eps, n)) == pytest.approx(direct, rel=1e-12)

    def test_degenerate_p_one(self):
        for n in (1, 10, 1000):
            assert chi_norm_exact(BornParams(1.0, 0.05, n)) == 0.0

    def test_degenerate_p_zero(self):
        for n in (1, 10, 1000):
            assert chi_norm_exact(BornParams(0.0, 0.05, n)) == 0.0

    def test_boundary_counts_included(self):
        # n(p-eps) = 4 and n(p+eps) = 6 are integers: both boundary counts
        # belong to the tail, so chi = 1 - P(m = 5).
        val = chi_norm_exact(BornParams(0.5, 0.1, 10))
        expected = 1.0 - math.comb(10, 5) / 2**10
        assert val == pytest.approx(expected, rel=1e-12)

    def test_complementary_to_frequency_band(self):
        for p, eps, n in [(0.3, 0.05, 777), (0.5, 0.1, 10), (0.9, 0.02, 1000)]:
            params = BornParams(p, eps, n)
            assert chi_norm_exact(params) + frequency_band_mass(params) == pytest.approx(
                1.0, abs=1e-12
            )

    def test_monotone_in_epsilon(self):
        for eps_small, eps_big in [(0.02, 0.05), (0.05, 0.1)]:
            a = chi_norm_exact(BornParams(0.4, eps_small, 500))
            b = chi_norm_exact(BornParams(0.4, eps_big, 500))
            assert b <= a

    def test_params_validation(self):
        with pytest.raises(ValueError):
            BornParams(1.5, 0.1, 10)
        with pytest.raises(ValueError):
            BornParams(0.5, 0.0, 10)
        with pytest.raises(ValueError):
            BornParams(0.5, 0.1, 0)


class TestHoeffdingBound:
    def test_direct_evaluation(self):
        assert hoeffding_bound(BornParams(0.5, 0.1, 100)) == pytest.approx(
            2 * math.exp(-2), rel=1e-15
        )
        assert 2 * math.exp(-2) == pytest.approx(0.270671, abs=1e-6)

    def test_monotone_decreasing_in_n(self):
        values = [hoeffding_bound(BornParams(0.5, 0.1, n)) for n in (10, 100, 1000, 10000)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_bounds_exact_tail_on_subgrid(self):
        for p in (0.1, 0.5, 0.9):
            for eps in (0.02, 0.1):
                for n in (10, 1000):
                    params = BornParams(p, eps, n)
                    assert chi_norm_exact(params) <= hoeffding_bound(params)

    def test_grid_check_passes(self):
        report = hoeffding_grid_check(ps=(0.2, 0.7), epsilons=(0.05,), n_values=(10, 100))
        assert report.passed
        assert report.details["points"] == 4


class TestConvergenceCurve:
    def test_rows_below_bound_and_vanishing(self):
        rows = born_convergence_curve(0.5, 0.1, [10, 100, 1000, 10000])
        for row in rows:
            assert row.chi_exact <= row.bound
        assert rows[-1].chi_exact < 1e-80

    def test_validation(self):
        with pytest.raises(ValueError, match="nonempty"):
            born_convergence_curve(0.5, 0.1, [])
        with pytest.raises(ValueError, match="ascending"):
            born_convergence_curve(0.5, 0.1, [100, 10])
        with pytest.raises(ValueError, match="positive integers"):
            born_convergence_curve(0.5, 0.1, [0, 10])


class TestClosure:
    def test_default_setup_hundred_trials(self):
        micro, apparatus = default_closure_setup(42)
        report = check_outcome_subspace_closure(micro, apparatus, 100, 42)
        assert report.passed
        assert report.defect <= 1e-10

    def test_pure_eigenstate_zero_defect(self):
        micro = build_microsystem(2, {"1": 1, "2": 1})
        apparatus = build_apparatus(2, 4, 5)
        assembly = ExperimentAssembly([micro, apparatus])
        op = measurement_step(assembly, apparatus, micro)
        state = assembly.product_state(
            [basis_state(micro.space, 0), apparatus.ready.subspace.random_member(1)]
        )
        ok, defect = realizes(op.apply(state), assembly, apparatus, "1")
        assert ok and defect <= 1e-14

    def test_wrong_macrostate_is_detected(self):
        micro = build_microsystem(2, {"1": 1, "2": 1})
        apparatus = build_apparatus(2, 4, 5)
        assembly = ExperimentAssembly([micro, apparatus])
        op = measurement_step(assembly, apparatus, micro)
        state = assembly.product_state(
            [basis_state(micro.space, 1), apparatus.ready.subspace.random_member(1)]
        )
        ok, defect = realizes(op.apply(state), assembly, apparatus, "1")
        assert not ok
        assert defect == pytest.approx(1.0, abs=1e-12)


class TestOrthogonalityResidual:
    def test_exact_block_apparatus_gives_zero_residual(self):
        micro, apparatus = default_closure_setup(3)
        pair = (
            micro.outcome_subspaces["1"].random_member(1),
            micro.outcome_subspaces["2"].random_member(2),
        )
        ready = apparatus.ready.subspace.random_member(3)
        result = orthogonality_residual(pair, ("1", "2"), ready, apparatus)
        assert result.apparatus_overlap == 0.0
        assert result.residual <= 1e-12

    def test_tiny_overlap_pair_implied_bound(self):
        micro, apparatus = default_closure_setup(3)
        u = micro.outcome_subspaces["1"].random_member(1)
        v = micro.outcome_subspaces["2"].random_member(2)
        # contaminate v with a 1e-12 component along u
        amps = v.amplitudes + 1e-12 * u.amplitudes
        v_tilted = StateVector(micro.space, amps / np.linalg.norm(amps))
        ready = apparatus.ready.subspace.random_member(3)
        result = orthogonality_residual((u, v_tilted), ("1", "2"), ready, apparatus)
        assert result.implied_micro_bound <= 1e-11

    def test_same_outcome_rejected(self):
        micro, apparatus = default_closure_setup(3)
        u = micro.outcome_subspaces["1"].random_member(1)
        ready = apparatus.ready.subspace.random_member(3)
        with pytest.raises(ValueError, match="distinct"):
            orthogonality_residual((u, u), ("1", "1"), ready, apparatus)

    def test_ready_state_must_be_in_ready_block(self):
        micro, apparatus = default_closure_setup(3)
        pair = (
            micro.outcome_subspaces["1"].random_member(1),
            micro.outcome_subspaces["2"].random_member(2),
        )
        outside = apparatus.outcomes["1"].subspace.random_member(4)
        with pytest.raises(ValueError, match="ready block"):
            orthogonality_residual(pair, ("1", "2"), outside, apparatus)


class TestPostulateB:
    def test_eigenstate_zero_defect(self):
        micro, apparatus, student = default_postulate_b_setup(7)
        report = check_postulate_b(basis_state(micro.space, 0), micro, apparatus, student)
        assert report.passed
        assert report.defect == 0.0

    def test_balanced_superposition(self):
        micro, apparatus, student = default_postulate_b_setup(7)
        psi = StateVector(micro.space, np.array([1, 1]) / math.sqrt(2), normalized=True)
        report = check_postulate_b(psi, micro, apparatus, student)
        assert report.defect <= 1e-10
        assert report.details["true_block_mass"] == pytest.approx(1.0, abs=1e-10)

    def test_fifty_random_superpositions(self):
        micro, apparatus, student = default_postulate_b_setup(7)
        for i in range(50):
            psi = random_state(micro.space, spawn_seed(3, "psi", i))
            report = check_postulate_b(psi, micro, apparatus, student)
            assert report.defect <= 1e-9

    def test_defect_invariant_across_apparatus_seeds(self):
        report = postulate_b_sweep(10, [101, 102, 103, 104, 105], seed=9)
        assert report.passed
        assert report.defect <= 1e-9
        assert report.details["runs"] == 50

    def test_rejects_input_outside_outcome_span(self):
        micro = build_microsystem(3, {"1": 1, "2": 1})
        apparatus = build_apparatus(2, 4, 5)
        student = build_student((apparatus.outcome_labels,), "any-outcome", 4, 6)
        psi = basis_state(micro.space, 2)
        with pytest.raises(ValueError, match="outside the outcome subspaces"):
            check_postulate_b(psi, micro, apparatus, student)


class TestSequentialFrequencies:
    def qubit(self):
        space = SpaceLabel("qubit", 2)
        psi = StateVector(space, np.array([1.0, 0.0], dtype=complex), normalized=True)
        first = {
            "1": Projector(space, np.diag([1.0, 0.0]).astype(complex)),
            "2": Projector(space, np.diag([0.0, 1.0]).astype(complex)),
        }
        plus = 0.5 * np.array([[1, 1], [1, 1]], dtype=complex)
        minus = 0.5 * np.array([[1, -1], [-1, 1]], dtype=complex)
        second = {"alpha": Projector(space, plus), "beta": Projector(space, minus)}
        return psi, first, second

    def test_qubit_bands(self):
        psi, first, second = self.qubit()
        report = sequential_frequency_check(psi, first, second, 100_000, seed=5)
        assert report.passed
        rows = {tuple(r["outcomes"]): r for r in report.details["branches"]}
        assert abs(rows[("1", "alpha")]["frequency"] - 0.5) <= 4 * math.sqrt(
            0.25 / 100_000
        )

    def test_zero_weight_branches_never_sampled(self):
        psi, first, second = self.qubit()
        report = sequential_frequency_check(psi, first, second, 100_000, seed=5)
        rows = {tuple(r["outcomes"]): r for r in report.details["branches"]}
        assert rows[("2", "alpha")]["frequency"] == 0.0
        assert rows[("2", "beta")]["frequency"] == 0.0

    def test_random_qutrit_instance(self):
        space = SpaceLabel("s", 3)
        first = random_projector_family(space, (1, 2), ("1", "2"), seed=41)
        second = random_projector_family(space, (2, 1), ("a", "b"), seed=42)
        psi = random_state(space, 43)
        report = sequential_frequency_check(psi, first, second, 100_000, seed=44)
        assert report.passed


class TestConditionalFactorization:
    def test_qubit_analytic(self):
        space = SpaceLabel("qubit", 2)
        psi = StateVector(space, np.array([1.0, 0.0], dtype=complex), normalized=True)
        first = {
            "1": Projector(space, np.diag([1.0, 0.0]).astype(complex)),
            "2": Projector(space, np.diag([0.0, 1.0]).astype(complex)),
        }
        plus = 0.5 * np.array([[1, 1], [1, 1]], dtype=complex)
        minus = 0.5 * np.array([[1, -1], [-1, 1]], dtype=complex)
        second = {"alpha": Projector(space, plus), "beta": Projector(space, minus)}
        report = conditional_factorization_check(psi, first, second, outcome="1")
        assert report.passed
        # the identity here reads 0.5 = 1.0 * 0.5
        ledger = collapse_branch_ledger(psi, first, second)
        assert ledger.weight_of(("1", "alpha")) == pytest.approx(0.5, abs=1e-12)

    def test_hundred_random_instances_dim_four(self):
        space = SpaceLabel("s", 4)
        for i in range(100):
            first = random_projector_family(space, (2, 2), ("1", "2"), spawn_seed(7, i, "f"))
            second = random_projector_family(
                space, (1, 3), ("a", "b"), spawn_seed(7, i, "g")
            )
            psi = random_state(space, spawn_seed(7, i, "psi"))
            report = conditional_factorization_check(psi, first, second)
            assert report.defect <= 1e-10

    def test_vanishing_outcome_rejected(self):
        space = SpaceLabel("qubit", 2)
        psi = StateVector(space, np.array([1.0, 0.0], dtype=complex), normalized=True)
        first = {
            "1": Projector(space, np.diag([1.0, 0.0]).astype(complex)),
            "2": Projector(space, np.diag([0.0, 1.0]).astype(complex)),
        }
        with pytest.raises(ValueError, match="vanishing"):
            conditional_factorization_check(psi, first, first, outcome="2")

    def test_conditional_state_is_normalized(self):
        space = SpaceLabel("s", 4)
        first = random_projector_family(space, (2, 2), ("1", "2"), seed=3)
        psi = random_state(space, 4)
        w = first["1"].expectation(psi)
        conditional = first["1"].apply(psi).amplitudes / math.sqrt(w)
        assert np.linalg.norm(conditional) == pytest.approx(1.0, abs=1e-12)


class TestOverlapStatistics:
    def test_one_dimensional_space(self):
        summary = overlap_statistics(1, 200, seed=1, n_subspace_pairs=4)
        assert summary.mean == pytest.approx(1.0, abs=1e-12)
        assert summary.max == pytest.approx(1.0, abs=1e-12)
        assert summary.expected_mean == 1.0

    def test_mean_matches_haar_within_three_sigma(self):
        summary = overlap_statistics(64, 10_000, seed=2)
        assert abs(summary.mean - 1 / 64) <= 3 * summary.std_error

    def test_mean_decreases_with_dimension(self):
        small = overlap_statistics(64, 4_000, seed=3)
        large = overlap_statistics(4096, 4_000, seed=3)
        assert large.mean < small.mean

    def test_histogram_accounts_for_every_pair(self):
        summary = overlap_statistics(16, 5_000, seed=4)
        assert sum(summary.histogram_counts) + summary.histogram_overflow == 5_000

    def test_subspace_cosines_bounded(self):
        summary = overlap_statistics(128, 100, seed=5, subspace_dim=8, n_subspace_pairs=8)
        assert 0.0 < summary.subspace_max_cos_max <= 1.0 + 1e-12


class TestStudentRuleComplementarity:
    def test_frequency_rule_matches_tail_mask(self):
        # The student band (strict inequality) and the chi tail (closed
        # inequality) must partition the outcomes with no gap or overlap.
        p, eps, n = 0.5, 0.1, 10
        rule = STUDENT_RULES["frequency-within-margin"](target="1", p=p, epsilon=eps)
        mask = _binomial.tail_mask(n, p, eps)
        for m in range(n + 1):
            tup = tuple("1" if i < m else "2" for i in range(n))
            assert rule(tup) == (not mask[m])

    def test_dense_student_tail_split_matches_chi(self):
        # Two copies measured densely, then a frequency-counting student
        # reads both apparatuses: the squared norm landing in her false-
        # verdict block must equal the exact tail mass.  p=0.3, eps=0.3 puts
        # m=0 exactly on the lower cutoff, exercising boundary inclusion.
        p, eps = 0.3, 0.3
        micros = [
            build_microsystem(2, {"1": 1, "2": 1}, space_id=f"s{i}") for i in range(2)
        ]
        apparatuses = [
            build_apparatus(2, 2, 30 + i, space_id=f"A{i}") for i in range(2)
        ]
        student = build_student(
            tuple(a.outcome_labels for a in apparatuses),
            "frequency-within-margin",
            2,
            77,
            rule_params={"target": "1", "p": p, "epsilon": eps},
            true_label="C-true",
            false_label="C-false",
        )
        assembly = ExperimentAssembly([*micros, *apparatuses, student])
        psi_parts = []
        for micro, apparatus in zip(micros, apparatuses):
            psi_parts.append(
                StateVector(
                    micro.space,
                    np.array([math.sqrt(p), math.sqrt(1 - p)], dtype=complex),
                    normalized=True,
                )
            )
        state = assembly.product_state(
            psi_parts
            + [a.ready.subspace.random_member(i) for i, a in enumerate(apparatuses)]
            + [student.ready.subspace.random_member(9)]
        )
        for micro, apparatus in zip(micros, apparatuses):
            state = measurement_step(assembly, apparatus, micro).apply(state)
        state = readout_step(assembly, student, apparatuses).apply(state)
        axis = assembly.axis_of(student.space.id)
        false_frame = student.outcomes["C-false"].subspace.frame
        arr = np.moveaxis(state.amplitudes.reshape(assembly.dims), axis, 0)
        false_mass = float(
            np.sum(np.abs(false_frame.conj().T @ arr.reshape(arr.shape[0], -1)) ** 2)
        )
        chi = chi_norm_exact(BornParams(p, eps, 2))
        assert chi == pytest.approx((1 - p) ** 2 + p**2, rel=1e-12)
        assert false_mass == pytest.approx(chi, abs=1e-10)


class TestCheckReport:
    def test_consistency_enforced(self):
        with pytest.raises(ValueError, match="inconsistent"):
            CheckReport("x", True, 2.0, 1.0, {})

    def test_from_defect_and_to_dict(self):
        report = CheckReport.from_defect("x", 0.5, 1.0, {"k": 1})
        assert report.passed
        payload = report.to_dict()
        assert payload == {
            "name": "x",
            "passed": True,
            "defect": 0.5,
            "tolerance": 1.0,
            "details": {"k": 1},
        }
