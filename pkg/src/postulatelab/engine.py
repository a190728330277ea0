"""Two evolution engines and the bridge between them.

Dense engine: explicit state vectors on the joint space, operators applied as
structured block maps.  Ledger engine: exact combinatorial bookkeeping of the
orthogonal branches of a repeated measurement, with weights carried in
log-space so repetition counts around 10^4 stay accurate (branch weights
p^m (1-p)^(N-m) underflow doubles there, and binomial multiplicities are
tracked through log-gamma for the same reason).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _binomial
from .linalg import (
    Projector,
    StateVector,
    family_completeness_defect,
    family_orthogonality_defect,
    spawn_seed,
)
from .model import (
    ExperimentAssembly,
    build_apparatus,
    build_microsystem,
    measurement_step,
)

#: Dense joint dimensions above this are rejected by cross_validate.
DENSE_BUDGET = 200_000


@dataclass(frozen=True, eq=False)
class DenseState:
    """A state vector tied to the assembly whose joint space it lives in."""

    assembly: ExperimentAssembly
    vector: StateVector

    def __post_init__(self) -> None:
        if self.vector.space != self.assembly.joint_space:
            raise ValueError("vector does not live in the assembly's joint space")
        if self.vector.norm_sq() > 1.0 + 1e-9:
            raise ValueError(f"state norm^2 {self.vector.norm_sq()!r} exceeds 1")


def evolve_dense(state: DenseState, op) -> DenseState:
    """Apply an evolution operator; norm is preserved and the map is linear."""
    if op.assembly is not state.assembly:
        raise ValueError("operator belongs to a different assembly")
    return DenseState(state.assembly, op.apply(state.vector))


@dataclass(frozen=True)
class Branch:
    """One orthogonal term class of the post-measurement decomposition.

    ``weight`` is the squared norm of a single term; ``multiplicity`` counts
    identical-weight terms collapsed into this record; ``log_mass`` is
    log(multiplicity * weight), kept exact in log-space.
    """

    outcomes: tuple[str, ...]
    multiplicity: int
    weight: float
    log_mass: float

    def __post_init__(self) -> None:
        if self.multiplicity < 1:
            raise ValueError("multiplicity must be >= 1")
        if not (self.weight >= 0.0):
            raise ValueError("weight must be nonnegative")


class BranchLedger:
    """An ordered list of branches whose masses must total 1 (unitarity)."""

    def __init__(self, branches: Sequence[Branch], total_tol: float = 1e-9):
        if not branches:
            raise ValueError("ledger needs at least one branch")
        self.branches = tuple(branches)
        total = self.total_weight()
        if abs(total - 1.0) > total_tol:
            raise ValueError(
                f"branch masses total {total!r}, expected 1 within {total_tol}"
            )

    def __len__(self) -> int:
        return len(self.branches)

    def total_weight(self) -> float:
        """Sum of multiplicity * weight over all branches, evaluated in
        log-space with a fixed summation order."""
        masses = np.array([b.log_mass for b in self.branches])
        if np.all(np.isneginf(masses)):
            return 0.0
        return float(np.exp(logsumexp(masses)))

    def weight_of(self, outcomes: tuple[str, ...]) -> float:
        for b in self.branches:
            if b.outcomes == outcomes:
                return b.weight
        raise KeyError(f"no branch with outcomes {outcomes}")

    def masses(self) -> np.ndarray:
        """Per-branch mass (multiplicity * weight), in branch order."""
        return np.exp(np.array([b.log_mass for b in self.branches]))

    def marginal(self, position: int) -> dict[str, float]:
        """Total mass per outcome label at one position of the outcome tuple."""
        out: dict[str, float] = {}
        for b in self.branches:
            label = b.outcomes[position]
            out[label] = out.get(label, 0.0) + math.exp(b.log_mass)
        return out

    def sample_counts(self, n_samples: int, seed: int) -> dict[tuple[str, ...], int]:
        """Draw outcome tuples by inverse CDF over the fixed branch order.

        Zero-weight branches occupy zero-length intervals and are never drawn.
        """
        if n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        cum = np.cumsum(self.masses())
        rng = np.random.default_rng(seed)
        u = rng.random(n_samples) * cum[-1]
        idx = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
        counts = {b.outcomes: 0 for b in self.branches}
        for i, c in zip(*np.unique(idx, return_counts=True)):
            counts[self.branches[int(i)].outcomes] = int(c)
        return counts

    def to_csv(self, stream: IO[str]) -> None:
        """Write rows (outcome_tuple, multiplicity, weight, cumulative_weight)."""
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["outcome_tuple", "multiplicity", "weight", "cumulative_weight"])
        cumulative = 0.0
        for b in self.branches:
            cumulative += math.exp(b.log_mass)
            writer.writerow([",".join(b.outcomes), b.multiplicity, repr(b.weight), repr(cumulative)])


def born_branch_ledger(p: float, n_repeats: int) -> BranchLedger:
    """The exact branch ledger of n_repeats identical two-outcome measurements.

    One branch per count m of first-outcome results: multiplicity C(N, m),
    weight p^m (1-p)^(N-m).  Weights are computed in log-space and
    exponentiated; masses stay in log-space.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p!r}")
    if n_repeats < 1:
        raise ValueError(f"need at least one repetition, got {n_repeats}")
    log_w = _binomial.log_outcome_weight(n_repeats, p)
    log_mass = _binomial.log_comb(n_repeats) + log_w
    branches = []
    for m in range(n_repeats + 1):
        branches.append(
            Branch(
                outcomes=(f"m={m}",),
                multiplicity=math.comb(n_repeats, m),
                weight=float(np.exp(log_w[m])),
                log_mass=float(log_mass[m]),
            )
        )
    return BranchLedger(branches)


def collapse_branch_ledger(
    psi: StateVector,
    first: Mapping[str, Projector],
    second: Mapping[str, Projector],
    family_tol: float = 1e-10,
) -> BranchLedger:
    """Branches of two successive measurements on the same microsystem.

    One branch per outcome pair (λ, ξ) with weight <psi| P_λ P_ξ P_λ |psi>.
    Both projector families must be pairwise orthogonal and complete (sum to
    the identity); completeness is what makes the total weight 1.
    """
    if abs(psi.norm_sq() - 1.0) > 1e-10:
        raise ValueError(f"psi must be normalized, norm^2 = {psi.norm_sq()!r}")
    for name, family in (("first", first), ("second", second)):
        for label, proj in family.items():
            if proj.ambient != psi.space:
                raise ValueError(f"{name} family projector {label!r} is on the wrong space")
        completeness = family_completeness_defect(family)
        if completeness > family_tol:
            raise ValueError(
                f"{name} projector family does not sum to identity "
                f"(defect {completeness:.3e}); total weight would not be 1"
            )
        orthogonality = family_orthogonality_defect(family)
        if orthogonality > family_tol:
            raise ValueError(
                f"{name} projector family is not pairwise orthogonal "
                f"(defect {orthogonality:.3e})"
            )
    branches = []
    for lam, p_lam in first.items():
        v = p_lam.matrix @ psi.amplitudes
        for xi, p_xi in second.items():
            w = float(np.sum(np.abs(p_xi.matrix @ v) ** 2))
            branches.append(
                Branch(
                    outcomes=(lam, xi),
                    multiplicity=1,
                    weight=w,
                    log_mass=math.log(w) if w > 0.0 else -math.inf,
                )
            )
    return BranchLedger(branches, total_tol=1e-10)


@dataclass(frozen=True)
class RepeatedMeasurementConfig:
    """Parameters of the repeated qubit-measurement experiment used for
    dense-vs-ledger cross-validation."""

    p: float = 0.3
    macrostate_dim: int = 4
    seed: int = 7
    n_max_dense: int = 3
    dense_budget: int = DENSE_BUDGET

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p!r}")


@dataclass(frozen=True)
class CrossValidationReport:
    """Dense-engine branch norms compared against the exact ledger."""

    n_copies: int
    p: float
    joint_dim: int
    max_discrepancy: float
    total_dense_weight: float
    branch_weights: dict[tuple[str, ...], float]
    multiplicity_match: bool


def cross_validate(
    config: RepeatedMeasurementConfig, n_copies: int
) -> CrossValidationReport:
    """Run n_copies of (qubit, apparatus) densely and compare every branch
    norm with the ledger weight p^m (1-p)^(N-m).

    Rejects when the dense joint dimension exceeds the configured budget or
    n_copies exceeds the configured dense copy limit.
    """
    if n_copies < 1:
        raise ValueError("n_copies must be >= 1")
    if n_copies > config.n_max_dense:
        raise ValueError(
            f"n_copies {n_copies} exceeds the dense copy limit {config.n_max_dense}"
        )
    pair_dim = 2 * 3 * config.macrostate_dim
    joint_dim = pair_dim**n_copies
    if joint_dim > config.dense_budget:
        raise ValueError(
            f"dense joint dimension {joint_dim} exceeds budget {config.dense_budget}"
        )

    micros = []
    apparatuses = []
    for i in range(n_copies):
        micros.append(
            build_microsystem(2, {"1": 1, "2": 1}, space_id=f"s{i}")
        )
        apparatuses.append(
            build_apparatus(
                2,
                config.macrostate_dim,
                spawn_seed(config.seed, "apparatus", i),
                space_id=f"A{i}",
            )
        )
    members: list[object] = []
    for s, a in zip(micros, apparatuses):
        members.extend([s, a])
    assembly = ExperimentAssembly(members)

    amp = math.sqrt(config.p)
    psi_parts = []
    for i in range(n_copies):
        psi = StateVector(
            micros[i].space,
            np.array([amp, math.sqrt(1.0 - config.p)], dtype=np.complex128),
            normalized=True,
        )
        ready = apparatuses[i].ready.subspace.random_member(
            spawn_seed(config.seed, "ready", i)
        )
        psi_parts.extend([psi, ready])
    state = DenseState(assembly, assembly.product_state(psi_parts))

    for s, a in zip(micros, apparatuses):
        state = evolve_dense(state, measurement_step(assembly, a, s))

    ledger = born_branch_ledger(config.p, n_copies)
    expected_by_m = {m: ledger.branches[m].weight for m in range(n_copies + 1)}
    tuple_count_by_m = {m: 0 for m in range(n_copies + 1)}
    branch_weights: dict[tuple[str, ...], float] = {}
    max_disc = 0.0
    total = 0.0
    for tup in itertools.product("12", repeat=n_copies):
        vec = state.vector.amplitudes
        for a, label in zip(apparatuses, tup):
            frame = a.outcomes[label].subspace.frame
            axis = assembly.axis_of(a.space.id)
            vec = _project_axis(vec, assembly.dims, axis, frame)
        w = float(np.sum(np.abs(vec) ** 2))
        branch_weights[tup] = w
        m = tup.count("1")
        tuple_count_by_m[m] += 1
        total += w
        max_disc = max(max_disc, abs(w - expected_by_m[m]))
    multiplicity_match = all(
        tuple_count_by_m[m] == ledger.branches[m].multiplicity
        for m in range(n_copies + 1)
    )
    max_disc = max(max_disc, abs(total - 1.0))
    return CrossValidationReport(
        n_copies=n_copies,
        p=config.p,
        joint_dim=joint_dim,
        max_discrepancy=max_disc,
        total_dense_weight=total,
        branch_weights=branch_weights,
        multiplicity_match=multiplicity_match,
    )


def _project_axis(
    vec: np.ndarray, dims: Sequence[int], axis: int, frame: np.ndarray
) -> np.ndarray:
    """Project one tensor axis onto the block spanned by ``frame``."""
    arr = np.moveaxis(vec.reshape(dims), axis, 0)
    flat = arr.reshape(arr.shape[0], -1)
    out = (frame @ (frame.conj().T @ flat)).reshape(arr.shape)
    return np.moveaxis(out, 0, axis).reshape(-1)
