"""Executable pass/fail verification procedures for the four measurement
postulates, plus the generic-overlap study behind the macrostate picture.

Outcome-closure and determinism checks drive the dense engine; the frequency
checks work on exact binomial tails evaluated in log-space.  Every check is a
pure function of (inputs, seed) with fixed summation orders, so reports are
reproducible across runs and thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _binomial
from .linalg import (
    Projector,
    SpaceLabel,
    StateVector,
    Subspace,
    haar_unitary,
    spawn_seed,
)
from .engine import collapse_branch_ledger
from .model import (
    Apparatus,
    ExperimentAssembly,
    GradStudent,
    Microsystem,
    _block_norm_sq,
    build_apparatus,
    build_microsystem,
    build_student,
    measurement_step,
    readout_step,
    realizes,
)

#: Default parameter grid for the tail-vs-bound study: covers the crossover
#: where the exponential bound becomes tight in the exponent.
DEFAULT_GRID_PS: tuple[float, ...] = tuple(i / 10 for i in range(1, 10))
DEFAULT_GRID_EPSILONS: tuple[float, ...] = (0.02, 0.05, 0.1)
DEFAULT_GRID_NS: tuple[int, ...] = (10, 100, 1000, 10000)


@dataclass(frozen=True)
class BornParams:
    """Target probability p, error margin epsilon, repetition count n."""

    p: float
    epsilon: float
    n: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


@dataclass
class CheckReport:
    """Uniform result record: passed is defined as defect <= tolerance."""

    name: str
    passed: bool
    defect: float
    tolerance: float
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.passed != (self.defect <= self.tolerance):
            raise ValueError(
                f"inconsistent report: passed={self.passed} but defect "
                f"{self.defect!r} vs tolerance {self.tolerance!r}"
            )

    @classmethod
    def from_defect(
        cls, name: str, defect: float, tolerance: float, details: dict | None = None
    ) -> "CheckReport":
        return cls(name, defect <= tolerance, defect, tolerance, details or {})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "defect": self.defect,
            "tolerance": self.tolerance,
            "details": self.details,
        }


def chi_norm_exact(params: BornParams) -> float:
    """Exact mass of the two-sided frequency tail after n repetitions.

    Lower tail m <= n(p - eps), upper tail m >= n(p + eps), boundary counts
    included; evaluated by summing C(n, m) p^m (1-p)^(n-m) in log-space over
    the tail in a fixed order.
    """
    mask = _binomial.tail_mask(params.n, params.p, params.epsilon)
    if not mask.any():
        return 0.0
    log_pmf = _binomial.log_pmf(params.n, params.p)[mask]
    if np.all(np.isneginf(log_pmf)):
        return 0.0
    return float(np.exp(logsumexp(log_pmf)))


def frequency_band_mass(params: BornParams) -> float:
    """Mass of the strict frequency band |m/n - p| < eps (the tail's complement)."""
    mask = _binomial.tail_mask(params.n, params.p, params.epsilon)
    if mask.all():
        return 0.0
    log_pmf = _binomial.log_pmf(params.n, params.p)[~mask]
    if np.all(np.isneginf(log_pmf)):
        return 0.0
    return float(np.exp(logsumexp(log_pmf)))


def hoeffding_bound(params: BornParams) -> float:
    """The Gaussian-type bound 2 exp(-2 n eps^2) on the two-sided tail."""
    return 2.0 * math.exp(-2.0 * params.n * params.epsilon**2)


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    chi_exact: float
    bound: float


def born_convergence_curve(
    p: float, epsilon: float, n_list: Sequence[int]
) -> list[ConvergenceRow]:
    """Exact tail mass and its exponential bound along an ascending n grid."""
    if len(n_list) == 0:
        raise ValueError("n_list must be nonempty")
    if any(int(n) != n or n < 1 for n in n_list):
        raise ValueError("n_list entries must be positive integers")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly ascending")
    rows = []
    for n in n_list:
        params = BornParams(p, epsilon, int(n))
        rows.append(ConvergenceRow(int(n), chi_norm_exact(params), hoeffding_bound(params)))
    return rows


def hoeffding_grid_check(
    ps: Sequence[float] = DEFAULT_GRID_PS,
    epsilons: Sequence[float] = DEFAULT_GRID_EPSILONS,
    n_values: Sequence[int] = DEFAULT_GRID_NS,
) -> CheckReport:
    """Verify chi_norm_exact <= hoeffding_bound on the whole parameter grid."""
    worst_gap = -math.inf
    worst_point: dict | None = None
    count = 0
    for p in ps:
        for eps in epsilons:
            for n in n_values:
                params = BornParams(p, eps, n)
                chi = chi_norm_exact(params)
                bound = hoeffding_bound(params)
                count += 1
                if chi - bound > worst_gap:
                    worst_gap = chi - bound
                    worst_point = {
                        "p": p, "epsilon": eps, "n": n, "chi": chi, "bound": bound,
                    }
    return CheckReport.from_defect(
        "hoeffding-grid",
        worst_gap,
        0.0,
        {"points": count, "worst": worst_point},
    )


def default_closure_setup(seed: int) -> tuple[Microsystem, Apparatus]:
    """A microsystem with two 2-dimensional outcome subspaces (rotated off the
    coordinate axes) and a matching 12-dimensional apparatus."""
    micro = build_microsystem(
        5, {"1": 2, "2": 2}, rotate_seed=spawn_seed(seed, "rotate")
    )
    apparatus = build_apparatus(2, 4, spawn_seed(seed, "apparatus"))
    return micro, apparatus


def check_outcome_subspace_closure(
    micro: Microsystem,
    apparatus: Apparatus,
    trials: int,
    seed: int,
    tol: float = 1e-10,
) -> CheckReport:
    """Random superpositions inside one outcome subspace must leave the
    apparatus realizing that outcome; the defect is the worst block leak."""
    assembly = ExperimentAssembly([micro, apparatus])
    op = measurement_step(assembly, apparatus, micro)
    labels = micro.outcome_labels
    worst = 0.0
    for t in range(trials):
        label = labels[t % len(labels)]
        sub = micro.outcome_subspaces[label]
        rng = np.random.default_rng(spawn_seed(seed, "trial", t))
        coeffs = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        u = sub.random_member(spawn_seed(seed, "member", t, 0))
        v = sub.random_member(spawn_seed(seed, "member", t, 1))
        amps = coeffs[0] * u.amplitudes + coeffs[1] * v.amplitudes
        norm = np.linalg.norm(amps)
        if norm < 1e-12:
            continue
        superposition = StateVector(micro.space, amps / norm, normalized=True)
        ready = apparatus.ready.subspace.random_member(spawn_seed(seed, "ready", t))
        state = assembly.product_state([superposition, ready])
        _, defect = realizes(op.apply(state), assembly, apparatus, label, tol)
        worst = max(worst, defect)
    return CheckReport.from_defect(
        "postulate-a-closure", worst, tol, {"trials": trials}
    )


@dataclass(frozen=True)
class OrthogonalityResidual:
    """The unitarity identity for two micro states assigned to different
    outcomes: residual = |<s|s'>| * |1 - <A|A'>| must vanish, and since the
    post-measurement apparatus states never coincide, the residual implies a
    bound on the micro overlap itself."""

    residual: float
    micro_overlap: complex
    apparatus_overlap: complex
    implied_micro_bound: float


def orthogonality_residual(
    micro_states: tuple[StateVector, StateVector],
    labels: tuple[str, str],
    ready_state: StateVector,
    apparatus: Apparatus,
) -> OrthogonalityResidual:
    """Evaluate the inner-product identity for one micro pair and one ready state."""
    if labels[0] == labels[1]:
        raise ValueError(f"need two distinct outcomes, got {labels[0]!r} twice")
    if abs(ready_state.norm_sq() - 1.0) > 1e-10:
        raise ValueError("ready state must be normalized")
    in_ready = _frame_norm_sq(ready_state, apparatus.ready.subspace)
    if abs(in_ready - ready_state.norm_sq()) > 1e-10:
        raise ValueError("ready state must lie in the apparatus ready block")
    s_a, s_b = micro_states
    micro_overlap = complex(np.vdot(s_a.amplitudes, s_b.amplitudes))
    images = [
        apparatus.embedded_isometry(lab) @ ready_state.amplitudes for lab in labels
    ]
    apparatus_overlap = complex(np.vdot(images[0], images[1]))
    residual = abs(micro_overlap) * abs(1.0 - apparatus_overlap)
    gap = abs(1.0 - apparatus_overlap)
    implied = residual / gap if gap > 1e-15 else math.inf
    return OrthogonalityResidual(residual, micro_overlap, apparatus_overlap, implied)


def _frame_norm_sq(v: StateVector, sub: Subspace) -> float:
    return float(np.sum(np.abs(sub.frame.conj().T @ v.amplitudes) ** 2))


def default_postulate_b_setup(
    apparatus_seed: int, student_seed: int = 11
) -> tuple[Microsystem, Apparatus, GradStudent]:
    """Qubit microsystem, 12-dimensional apparatus, and a student whose
    verdict is 'the needle points at an allowed outcome'."""
    micro = build_microsystem(2, {"1": 1, "2": 1})
    apparatus = build_apparatus(2, 4, apparatus_seed)
    student = build_student(
        (apparatus.outcome_labels,), "any-outcome", 4, student_seed
    )
    return micro, apparatus, student


def check_postulate_b(
    psi: StateVector,
    micro: Microsystem,
    apparatus: Apparatus,
    student: GradStudent,
    tol: float = 1e-9,
    seed: int = 0,
) -> CheckReport:
    """Measure psi, let the student read the apparatus, and demand that no
    amplitude ends in the student's false-verdict block.

    The defect is the squared norm of the final component in the false block;
    the prediction is deterministic, so the defect must vanish for any input
    in the span of the outcome subspaces (inputs outside it are rejected).
    """
    weight_in = sum(
        _frame_norm_sq(psi, sub) for sub in micro.outcome_subspaces.values()
    )
    if abs(weight_in - psi.norm_sq()) > 1e-10:
        raise ValueError(
            "psi has weight outside the outcome subspaces; the deterministic "
            "prediction only covers measurable inputs"
        )
    assembly = ExperimentAssembly([micro, apparatus, student])
    measure = measurement_step(assembly, apparatus, micro)
    readout = readout_step(assembly, student, [apparatus])
    ready_a = apparatus.ready.subspace.random_member(spawn_seed(seed, "ready-A"))
    ready_g = student.ready.subspace.random_member(spawn_seed(seed, "ready-G"))
    state = assembly.product_state([psi, ready_a, ready_g])
    final = readout.apply(measure.apply(state))
    axis = assembly.axis_of(student.space.id)
    false_mass = _block_norm_sq(
        final.amplitudes,
        assembly.dims,
        axis,
        student.outcomes[student.false_label].subspace.frame,
    )
    true_mass = _block_norm_sq(
        final.amplitudes,
        assembly.dims,
        axis,
        student.outcomes[student.true_label].subspace.frame,
    )
    _, true_defect = realizes(final, assembly, student, student.true_label, tol)
    return CheckReport.from_defect(
        "postulate-b",
        false_mass,
        tol,
        {
            "true_block_mass": true_mass,
            "outside_true_block_norm": true_defect,
        },
    )


def postulate_b_sweep(
    n_states: int,
    apparatus_seeds: Sequence[int],
    seed: int,
    tol: float = 1e-9,
) -> CheckReport:
    """Worst false-block defect over random input superpositions and apparatus
    seeds; the prediction must be independent of the isometry choice."""
    worst = 0.0
    runs = 0
    for a_seed in apparatus_seeds:
        micro, apparatus, student = default_postulate_b_setup(a_seed)
        for i in range(n_states):
            rng = np.random.default_rng(spawn_seed(seed, "psi", a_seed, i))
            z = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            psi = StateVector(micro.space, z / np.linalg.norm(z), normalized=True)
            report = check_postulate_b(
                psi, micro, apparatus, student, tol, seed=spawn_seed(seed, "run", a_seed, i)
            )
            worst = max(worst, report.defect)
            runs += 1
    return CheckReport.from_defect(
        "postulate-b-sweep",
        worst,
        tol,
        {"states": n_states, "apparatus_seeds": list(apparatus_seeds), "runs": runs},
    )


def sequential_frequency_check(
    psi: StateVector,
    first: Mapping[str, Projector],
    second: Mapping[str, Projector],
    n_samples: int,
    seed: int,
    n_sigma: float = 4.0,
) -> CheckReport:
    """Sample outcome pairs from the branch weights and compare empirical
    frequencies against the weights, branch by branch, within n_sigma bands."""
    ledger = collapse_branch_ledger(psi, first, second)
    counts = ledger.sample_counts(n_samples, seed)
    worst = -math.inf
    rows = []
    for branch in ledger.branches:
        w = branch.weight
        freq = counts[branch.outcomes] / n_samples
        band = n_sigma * math.sqrt(w * (1.0 - w) / n_samples)
        gap = abs(freq - w) - band
        worst = max(worst, gap)
        rows.append(
            {
                "outcomes": list(branch.outcomes),
                "weight": w,
                "frequency": freq,
                "band": band,
            }
        )
    return CheckReport.from_defect(
        "sequential-frequencies",
        worst,
        0.0,
        {"n_samples": n_samples, "n_sigma": n_sigma, "branches": rows},
    )


def conditional_factorization_check(
    psi: StateVector,
    first: Mapping[str, Projector],
    second: Mapping[str, Projector],
    outcome: str | None = None,
    tol: float = 1e-10,
) -> CheckReport:
    """Verify the projector-algebra identity behind apparent collapse:
    <psi|P_λ P_ξ P_λ|psi> = <psi|P_λ|psi> * <psi'|P_ξ|psi'> with psi' the
    normalized projection of psi onto outcome λ.

    With ``outcome`` given, only that λ is checked and a vanishing weight is
    rejected (the conditional state is undefined); otherwise every λ with
    weight above 1e-12 is checked.
    """
    weights = {lam: p.expectation(psi) for lam, p in first.items()}
    if outcome is not None:
        if outcome not in first:
            raise ValueError(f"unknown outcome {outcome!r}")
        if weights[outcome] <= 1e-12:
            raise ValueError(
                f"outcome {outcome!r} has vanishing weight; conditional state undefined"
            )
        targets = [outcome]
    else:
        targets = [lam for lam, w in weights.items() if w > 1e-12]
        if not targets:
            raise ValueError("every first-family outcome has vanishing weight")
    worst = 0.0
    for lam in targets:
        w = weights[lam]
        projected = first[lam].apply(psi)
        conditional = StateVector(
            psi.space, projected.amplitudes / math.sqrt(w)
        )
        for xi, p_xi in second.items():
            lhs = float(np.sum(np.abs(p_xi.matrix @ projected.amplitudes) ** 2))
            rhs = w * p_xi.expectation(conditional)
            worst = max(worst, abs(lhs - rhs))
    return CheckReport.from_defect(
        "conditional-factorization", worst, tol, {"outcomes_checked": targets}
    )


def random_projector_family(
    space: SpaceLabel, ranks: Sequence[int], labels: Sequence[str], seed: int
) -> dict[str, Projector]:
    """A complete orthogonal projector family with the given rank profile,
    drawn from a seeded Haar basis."""
    if sum(ranks) != space.dim:
        raise ValueError(f"ranks {list(ranks)} must sum to the dimension {space.dim}")
    if len(ranks) != len(labels):
        raise ValueError("need one label per rank")
    basis = haar_unitary(space.dim, np.random.default_rng(seed))
    family: dict[str, Projector] = {}
    start = 0
    for label, rank in zip(labels, ranks):
        block = basis[:, start : start + rank]
        family[label] = Projector(space, block @ block.conj().T)
        start += rank
    return family


@dataclass(frozen=True)
class OverlapSummary:
    """Monte Carlo statistics of |<u|v>|^2 for independent random unit pairs,
    plus worst principal-angle cosines between independent random subspaces.

    The histogram bins the scaled overlap dim*|<u|v>|^2 on [0, 10] in 20 equal
    bins (counts above 10 land in ``histogram_overflow``), which makes the
    shape comparable across dimensions.
    """

    dim: int
    n_pairs: int
    mean: float
    std_error: float
    max: float
    expected_mean: float
    histogram_edges: tuple[float, ...]
    histogram_counts: tuple[int, ...]
    histogram_overflow: int
    subspace_dim: int
    n_subspace_pairs: int
    subspace_max_cos_mean: float
    subspace_max_cos_max: float

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_pairs": self.n_pairs,
            "mean": self.mean,
            "std_error": self.std_error,
            "max": self.max,
            "expected_mean": self.expected_mean,
            "histogram_edges": list(self.histogram_edges),
            "histogram_counts": list(self.histogram_counts),
            "histogram_overflow": self.histogram_overflow,
            "subspace_dim": self.subspace_dim,
            "n_subspace_pairs": self.n_subspace_pairs,
            "subspace_max_cos_mean": self.subspace_max_cos_mean,
            "subspace_max_cos_max": self.subspace_max_cos_max,
        }


def overlap_statistics(
    d: int,
    n_pairs: int,
    seed: int,
    subspace_dim: int | None = None,
    n_subspace_pairs: int = 32,
) -> OverlapSummary:
    """How orthogonal are independent random directions in d dimensions?

    Samples Haar-like unit-vector pairs and reports mean/max/histogram of the
    squared overlap (the analytic mean is 1/d), then samples pairs of random
    subspaces and reports the largest principal-angle cosine between them.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    rng = np.random.default_rng(spawn_seed(seed, "pairs"))
    chunk = max(1, min(n_pairs, 4_194_304 // max(1, d)))
    total = 0
    acc_sum = 0.0
    acc_sq = 0.0
    running_max = 0.0
    edges = np.linspace(0.0, 10.0, 21)
    hist = np.zeros(20, dtype=np.int64)
    overflow = 0
    while total < n_pairs:
        size = min(chunk, n_pairs - total)
        u = rng.standard_normal((size, d)) + 1j * rng.standard_normal((size, d))
        v = rng.standard_normal((size, d)) + 1j * rng.standard_normal((size, d))
        nu = np.einsum("ij,ij->i", u.conj(), u).real
        nv = np.einsum("ij,ij->i", v.conj(), v).real
        ov = np.abs(np.einsum("ij,ij->i", u.conj(), v)) ** 2 / (nu * nv)
        acc_sum += float(ov.sum())
        acc_sq += float((ov**2).sum())
        running_max = max(running_max, float(ov.max()))
        scaled = d * ov
        inside = scaled <= 10.0
        hist += np.histogram(scaled[inside], bins=edges)[0]
        overflow += int((~inside).sum())
        total += size
    mean = acc_sum / n_pairs
    var = max(0.0, acc_sq / n_pairs - mean * mean)
    std_error = math.sqrt(var / n_pairs)

    k = subspace_dim if subspace_dim is not None else max(1, min(d // 16, 64))
    if not 1 <= k <= d:
        raise ValueError(f"subspace_dim must lie in [1, {d}], got {k}")
    space = SpaceLabel(f"overlap[{d}]", d)
    cos_max_values = []
    for i in range(n_subspace_pairs):
        s1 = Subspace.random(space, k, spawn_seed(seed, "subspace", i, 0))
        s2 = Subspace.random(space, k, spawn_seed(seed, "subspace", i, 1))
        sv = np.linalg.svd(s1.frame.conj().T @ s2.frame, compute_uv=False)
        cos_max_values.append(float(sv.max()))
    return OverlapSummary(
        dim=d,
        n_pairs=n_pairs,
        mean=mean,
        std_error=std_error,
        max=running_max,
        expected_mean=1.0 / d,
        histogram_edges=tuple(float(e) for e in edges),
        histogram_counts=tuple(int(c) for c in hist),
        histogram_overflow=overflow,
        subspace_dim=k,
        n_subspace_pairs=n_subspace_pairs,
        subspace_max_cos_mean=float(np.mean(cos_max_values)),
        subspace_max_cos_max=float(np.max(cos_max_values)),
    )
