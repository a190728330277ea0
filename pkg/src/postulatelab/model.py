"""Experiment building blocks: microsystems, apparatuses, grad students, and
the environment, plus the three unitary evolution rules that couple them.

Macrostates of one macrosystem are built on exactly orthogonal coordinate
blocks.  Genericity of "almost orthogonal" high-dimensional subspaces is a
statistical claim quantified separately (see checks.overlap_statistics); the
model makes the idealization exact so block bookkeeping is exact.

Evolution operators are unitary on the full joint space.  The measurement and
readout rules only prescribe the action on part of the space; the completion
used here is the involution that swaps the ready block with the triggered
outcome block (via the outcome isometry and its adjoint) and acts as identity
on every block the rule does not mention.  Strict identity on the whole
complement would collide with the image of the prescribed action, so the swap
is the minimal reproducible completion.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _binomial
from .linalg import (
    Isometry,
    SpaceLabel,
    StateVector,
    Subspace,
    direct_sum_frames,
    haar_unitary,
    random_isometry,
    spawn_seed,
)


class UnitaryCompletionError(ValueError):
    """Raised when the requested evolution rule admits no unitary extension.

    ``defect`` is the measured max entry of |M†M - I| for the attempted
    completion.
    """

    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect


@dataclass(frozen=True, eq=False)
class Macrostate:
    """An observable coarse configuration: a labeled subspace of a macrosystem."""

    label: str
    subspace: Subspace


@dataclass(frozen=True, eq=False)
class Microsystem:
    """A low-dimensional system to be measured, with labeled outcome subspaces.

    Outcome subspaces must be pairwise orthogonal; their union need not span
    the whole space.  Pass certify=False to skip the orthogonality check when
    deliberately constructing a defective instance (the evolution builders
    will then reject it on unitarity grounds).
    """

    space: SpaceLabel
    outcome_subspaces: dict[str, Subspace]
    certify: bool = True

    def __post_init__(self) -> None:
        if not self.outcome_subspaces:
            raise ValueError("microsystem needs at least one outcome subspace")
        for label, sub in self.outcome_subspaces.items():
            if sub.ambient != self.space:
                raise ValueError(f"outcome {label!r} lives in a different space")
        if self.certify and len(self.outcome_subspaces) > 1:
            report = direct_sum_frames(list(self.outcome_subspaces.values()))
            if not report.ok:
                raise ValueError(
                    f"outcome subspaces are not orthogonal: max overlap "
                    f"{report.max_overlap:.3e} at pair {report.worst_pair}"
                )

    @property
    def outcome_labels(self) -> tuple[str, ...]:
        return tuple(self.outcome_subspaces.keys())

    def outcome_projector(self, label: str) -> np.ndarray:
        f = self.outcome_subspaces[label].frame
        return f @ f.conj().T


def build_microsystem(
    dim: int,
    outcome_dims: Mapping[str, int],
    rotate_seed: int | None = None,
    space_id: str = "s",
) -> Microsystem:
    """A microsystem with outcome subspaces on consecutive coordinate blocks.

    With ``rotate_seed`` set, all frames are rotated by one seeded global
    unitary; mutual orthogonality is preserved exactly while the frames stop
    being axis-aligned.
    """
    total = sum(outcome_dims.values())
    if total > dim:
        raise ValueError(f"outcome dims sum to {total} > space dim {dim}")
    space = SpaceLabel(space_id, dim)
    rotation = None
    if rotate_seed is not None:
        rotation = haar_unitary(dim, np.random.default_rng(rotate_seed))
    subspaces: dict[str, Subspace] = {}
    start = 0
    for label, k in outcome_dims.items():
        if k < 1:
            raise ValueError(f"outcome {label!r} must have dimension >= 1")
        frame = np.zeros((dim, k), dtype=np.complex128)
        frame[start : start + k] = np.eye(k)
        if rotation is not None:
            frame = rotation @ frame
        subspaces[label] = Subspace(space, frame)
        start += k
    return Microsystem(space, subspaces)


def _validate_macrosystem_blocks(
    space: SpaceLabel, ready: Macrostate, outcomes: Mapping[str, Macrostate]
) -> int:
    dims = {ready.label: ready.subspace.dim}
    dims.update({lab: ms.subspace.dim for lab, ms in outcomes.items()})
    sizes = set(dims.values())
    if len(sizes) != 1:
        raise ValueError(f"macrostate dimensions must all be equal, got {dims}")
    m = sizes.pop()
    if space.dim < (1 + len(outcomes)) * m:
        raise ValueError(
            f"space dim {space.dim} too small for {1 + len(outcomes)} "
            f"macrostates of dimension {m}"
        )
    report = direct_sum_frames(
        [ready.subspace] + [ms.subspace for ms in outcomes.values()]
    )
    if not report.ok:
        raise ValueError(
            f"macrostate frames overlap: {report.max_overlap:.3e} at "
            f"pair {report.worst_pair}"
        )
    return m


@dataclass(frozen=True, eq=False)
class Apparatus:
    """A macrosystem with a ready macrostate, outcome macrostates, and one
    outcome isometry (ready block -> outcome block) per outcome."""

    space: SpaceLabel
    ready: Macrostate
    outcomes: dict[str, Macrostate]
    isometries: dict[str, Isometry]

    def __post_init__(self) -> None:
        if set(self.outcomes) != set(self.isometries):
            raise ValueError("outcome and isometry label sets differ")
        m = _validate_macrosystem_blocks(self.space, self.ready, self.outcomes)
        for label, iso in self.isometries.items():
            if iso.target is not self.outcomes[label].subspace:
                if not np.array_equal(iso.target.frame, self.outcomes[label].subspace.frame):
                    raise ValueError(f"isometry {label!r} does not target its outcome block")
            if iso.source is None or not np.array_equal(
                iso.source.frame, self.ready.subspace.frame
            ):
                raise ValueError(f"isometry {label!r} must originate in the ready block")
            if iso.from_dim != m:
                raise ValueError(f"isometry {label!r} has wrong dimension")

    @property
    def macrostate_dim(self) -> int:
        return self.ready.subspace.dim

    @property
    def outcome_labels(self) -> tuple[str, ...]:
        return tuple(self.outcomes.keys())

    def macrostates(self) -> tuple[Macrostate, ...]:
        return (self.ready, *self.outcomes.values())

    def macrostate(self, label: str) -> Macrostate:
        if label == self.ready.label:
            return self.ready
        if label in self.outcomes:
            return self.outcomes[label]
        known = [self.ready.label, *self.outcomes]
        raise ValueError(f"unknown macrostate {label!r}; known: {known}")

    def embedded_isometry(self, label: str) -> np.ndarray:
        """Ambient matrix sending the ready block into outcome block ``label``."""
        return self.isometries[label].embedded()


def build_apparatus(
    n_outcomes: int,
    macrostate_dim: int,
    seed: int,
    labels: Sequence[str] | None = None,
    space_id: str = "A",
) -> Apparatus:
    """An apparatus on (1 + n_outcomes) * macrostate_dim dimensions.

    The ready macrostate occupies the first coordinate block, outcome
    macrostates the following blocks; outcome isometries are seeded random
    unitaries between block coordinates.
    """
    if n_outcomes < 2:
        raise ValueError(f"need at least 2 outcomes, got {n_outcomes}")
    if macrostate_dim < 1:
        raise ValueError(f"macrostate_dim must be >= 1, got {macrostate_dim}")
    if labels is None:
        labels = [str(i) for i in range(1, n_outcomes + 1)]
    if len(labels) != n_outcomes or len(set(labels)) != n_outcomes:
        raise ValueError("labels must be distinct and match n_outcomes")
    m = macrostate_dim
    space = SpaceLabel(space_id, (1 + n_outcomes) * m)
    ready_sub = Subspace.from_indices(space, range(m))
    ready = Macrostate("ready", ready_sub)
    outcomes: dict[str, Macrostate] = {}
    isometries: dict[str, Isometry] = {}
    for i, label in enumerate(labels):
        block = Subspace.from_indices(space, range((i + 1) * m, (i + 2) * m))
        outcomes[label] = Macrostate(label, block)
        isometries[label] = random_isometry(
            m, block, spawn_seed(seed, "isometry", space_id, label), source=ready_sub
        )
    return Apparatus(space, ready, outcomes, isometries)


@dataclass(frozen=True, eq=False)
class GradStudent:
    """A macrosystem that records a boolean verdict about apparatus outcomes.

    ``table`` tabulates the verdict function over the full product alphabet of
    the observed apparatuses; ``alphabet`` fixes that product (one label tuple
    per apparatus, in reading order).
    """

    space: SpaceLabel
    ready: Macrostate
    outcomes: dict[str, Macrostate]
    isometries: dict[str, Isometry]
    alphabet: tuple[tuple[str, ...], ...]
    table: dict[tuple[str, ...], str]
    verdict_labels: tuple[str, str]
    rule_name: str = "custom"
    rule_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.outcomes) != set(self.isometries):
            raise ValueError("outcome and isometry label sets differ")
        if set(self.verdict_labels) != set(self.outcomes) or len(self.verdict_labels) != 2:
            raise ValueError("verdict_labels must name the two outcome blocks")
        _validate_macrosystem_blocks(self.space, self.ready, self.outcomes)
        expected = set(itertools.product(*self.alphabet))
        if set(self.table) != expected:
            raise ValueError("verdict table does not cover the outcome alphabet")
        bad = {v for v in self.table.values()} - set(self.outcomes)
        if bad:
            raise ValueError(f"verdict table uses unknown labels {sorted(bad)}")

    @property
    def true_label(self) -> str:
        return self.verdict_labels[0]

    @property
    def false_label(self) -> str:
        return self.verdict_labels[1]

    @property
    def macrostate_dim(self) -> int:
        return self.ready.subspace.dim

    def macrostates(self) -> tuple[Macrostate, ...]:
        return (self.ready, *self.outcomes.values())

    def macrostate(self, label: str) -> Macrostate:
        if label == self.ready.label:
            return self.ready
        if label in self.outcomes:
            return self.outcomes[label]
        known = [self.ready.label, *self.outcomes]
        raise ValueError(f"unknown macrostate {label!r}; known: {known}")

    def embedded_isometry(self, label: str) -> np.ndarray:
        return self.isometries[label].embedded()


def _rule_any_outcome() -> Callable[[tuple[str, ...]], bool]:
    return lambda tup: True


def _rule_parity_even(target: str = "1") -> Callable[[tuple[str, ...]], bool]:
    return lambda tup: tup.count(target) % 2 == 0


def _rule_frequency_within_margin(
    target: str, p: float, epsilon: float
) -> Callable[[tuple[str, ...]], bool]:
    # True on |m/N - p| < epsilon, the strict complement of the two-sided tail.
    def rule(tup: tuple[str, ...]) -> bool:
        return not _binomial.in_tail(tup.count(target), len(tup), p, epsilon)

    return rule


#: Named student rules, usable from serialized experiment descriptions.
STUDENT_RULES: dict[str, Callable[..., Callable[[tuple[str, ...]], bool]]] = {
    "any-outcome": _rule_any_outcome,
    "parity-even": _rule_parity_even,
    "frequency-within-margin": _rule_frequency_within_margin,
}


def build_student(
    outcome_alphabets: Sequence[Sequence[str]],
    rule: str | Callable[[tuple[str, ...]], bool],
    macrostate_dim: int,
    seed: int,
    rule_params: Mapping[str, object] | None = None,
    true_label: str = "B-true",
    false_label: str = "B-false",
    space_id: str = "G",
) -> GradStudent:
    """A grad student whose verdict function is tabulated at build time.

    ``rule`` is either a callable tuple -> bool or the name of an entry in
    STUDENT_RULES (instantiated with ``rule_params``).  A rule that fails on
    any tuple of the product alphabet rejects the build.
    """
    params = dict(rule_params or {})
    if isinstance(rule, str):
        if rule not in STUDENT_RULES:
            raise ValueError(f"unknown student rule {rule!r}; known: {sorted(STUDENT_RULES)}")
        rule_name = rule
        fn = STUDENT_RULES[rule](**params)
    else:
        rule_name = "custom"
        fn = rule
    alphabet = tuple(tuple(a) for a in outcome_alphabets)
    if not alphabet or any(not a for a in alphabet):
        raise ValueError("outcome alphabets must be nonempty")
    table: dict[tuple[str, ...], str] = {}
    for tup in itertools.product(*alphabet):
        try:
            verdict = fn(tup)
        except Exception as exc:
            raise ValueError(f"student rule undefined on outcome tuple {tup}") from exc
        if not isinstance(verdict, bool):
            raise ValueError(f"student rule returned non-boolean {verdict!r} on {tup}")
        table[tup] = true_label if verdict else false_label

    m = macrostate_dim
    space = SpaceLabel(space_id, 3 * m)
    ready_sub = Subspace.from_indices(space, range(m))
    ready = Macrostate("ready", ready_sub)
    outcomes: dict[str, Macrostate] = {}
    isometries: dict[str, Isometry] = {}
    for i, label in enumerate((true_label, false_label)):
        block = Subspace.from_indices(space, range((i + 1) * m, (i + 2) * m))
        outcomes[label] = Macrostate(label, block)
        isometries[label] = random_isometry(
            m, block, spawn_seed(seed, "isometry", space_id, label), source=ready_sub
        )
    return GradStudent(
        space,
        ready,
        outcomes,
        isometries,
        alphabet,
        table,
        (true_label, false_label),
        rule_name,
        params,
    )


@dataclass(frozen=True, eq=False)
class Environment:
    """The rest of the world: a high-dimensional passive subsystem."""

    space: SpaceLabel

    def __post_init__(self) -> None:
        if self.space.dim < 2:
            raise ValueError("environment dimension must be >= 2")


def build_environment(dim: int, space_id: str = "E") -> Environment:
    return Environment(SpaceLabel(space_id, dim))


class ExperimentAssembly:
    """An ordered collection of subsystems; the joint space is their tensor
    product in declared order (left factor major)."""

    def __init__(self, members: Sequence[object]):
        if not members:
            raise ValueError("assembly needs at least one subsystem")
        ids = [m.space.id for m in members]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate space ids in assembly: {ids}")
        self.members = tuple(members)
        self.dims = tuple(m.space.dim for m in members)
        self._axis = {m.space.id: i for i, m in enumerate(members)}
        total = 1
        for d in self.dims:
            total *= d
        self.joint_space = SpaceLabel(f"joint[{','.join(ids)}]", total)

    @property
    def joint_dim(self) -> int:
        return self.joint_space.dim

    def axis_of(self, space_id: str) -> int:
        if space_id not in self._axis:
            raise ValueError(f"space {space_id!r} is not part of this assembly")
        return self._axis[space_id]

    def product_state(self, parts: Sequence[StateVector]) -> StateVector:
        """The joint product state of one factor per subsystem, in order."""
        if len(parts) != len(self.members):
            raise ValueError(f"need {len(self.members)} factors, got {len(parts)}")
        for part, member in zip(parts, self.members):
            if part.space != member.space:
                raise ValueError(
                    f"factor for {member.space.id!r} lives in {part.space!r}"
                )
        vec = parts[0].amplitudes
        for part in parts[1:]:
            vec = np.kron(vec, part.amplitudes)
        return StateVector(
            self.joint_space, vec, normalized=all(p.normalized for p in parts)
        )


def _apply_to_axes(
    vec: np.ndarray, dims: Sequence[int], axes: Sequence[int], mat: np.ndarray
) -> np.ndarray:
    """Apply a square matrix to the product of the given tensor axes."""
    arr = vec.reshape(dims)
    k = len(axes)
    front = np.moveaxis(arr, axes, range(k))
    lead = front.shape[:k]
    flat = front.reshape(int(np.prod(lead)), -1)
    out = (mat @ flat).reshape(front.shape)
    return np.moveaxis(out, range(k), axes).reshape(-1)


def _block_norm_sq(
    vec: np.ndarray, dims: Sequence[int], axis: int, frame: np.ndarray
) -> float:
    """Squared norm of the component whose ``axis`` factor lies in ``frame``."""
    arr = np.moveaxis(vec.reshape(dims), axis, 0)
    flat = arr.reshape(arr.shape[0], -1)
    coords = frame.conj().T @ flat
    return float(np.sum(np.abs(coords) ** 2))


def _block_residual_norm(
    vec: np.ndarray, dims: Sequence[int], axis: int, frame: np.ndarray
) -> float:
    """Norm of the component whose ``axis`` factor lies outside ``frame``.

    Computed by subtracting the in-block projection entrywise; the roundoff
    floor is ~1e-15 regardless of how close the state is to the block
    (sqrt(norm^2 - inside^2) would amplify cancellation error to ~1e-8).
    """
    arr = np.moveaxis(vec.reshape(dims), axis, 0)
    flat = arr.reshape(arr.shape[0], -1)
    residual = flat - frame @ (frame.conj().T @ flat)
    return float(np.linalg.norm(residual))


def _embed_matrix(
    mat: np.ndarray, acted_pos: Sequence[int], target_dims: Sequence[int]
) -> np.ndarray:
    """Embed a matrix acting on the subsystems at ``acted_pos`` (in that
    order) into the ordered product over all of ``target_dims``."""
    n = len(target_dims)
    rest = [i for i in range(n) if i not in acted_pos]
    rest_dim = 1
    for i in rest:
        rest_dim *= target_dims[i]
    big = np.kron(mat, np.eye(rest_dim))
    order = list(acted_pos) + rest
    dims_in_order = [target_dims[i] for i in order]
    t = big.reshape(dims_in_order + dims_in_order)
    inv = np.argsort(order)
    perm = [int(i) for i in inv] + [n + int(i) for i in inv]
    d = 1
    for x in target_dims:
        d *= x
    return t.transpose(perm).reshape(d, d)


#: Acted dimension above which dense operator matrices must not be materialized.
DENSE_MATRIX_LIMIT = 10_000


class DenseOp:
    """A unitary acting on a subset of subsystems, stored densely on them.

    Application reshapes the joint state and contracts only the acted axes,
    so the full joint matrix is never materialized.
    """

    def __init__(
        self, assembly: ExperimentAssembly, space_ids: Sequence[str], matrix: np.ndarray
    ):
        axes = [assembly.axis_of(sid) for sid in space_ids]
        if sorted(axes) != axes:
            raise ValueError("space_ids must be listed in assembly order")
        acted_dim = 1
        for a in axes:
            acted_dim *= assembly.dims[a]
        matrix = np.asarray(matrix, dtype=np.complex128)
        if matrix.shape != (acted_dim, acted_dim):
            raise ValueError(
                f"matrix must be {acted_dim}x{acted_dim} for spaces {space_ids}"
            )
        self.assembly = assembly
        self.space_ids = tuple(space_ids)
        self.axes = tuple(axes)
        self.matrix = _readonly_matrix(matrix)

    def apply(self, state: StateVector) -> StateVector:
        if state.space != self.assembly.joint_space:
            raise ValueError("state does not live in the assembly's joint space")
        out = _apply_to_axes(state.amplitudes, self.assembly.dims, self.axes, self.matrix)
        return StateVector(self.assembly.joint_space, out, normalized=state.normalized)

    def to_matrix(self, space_ids: Sequence[str] | None = None) -> np.ndarray:
        """Dense matrix over the given superset of subsystems (test scale only)."""
        if space_ids is None:
            return self.matrix.copy()
        target_axes = [self.assembly.axis_of(sid) for sid in space_ids]
        if sorted(target_axes) != target_axes:
            raise ValueError("space_ids must be listed in assembly order")
        if not set(self.axes) <= set(target_axes):
            raise ValueError("space_ids must contain all acted subsystems")
        dims = [self.assembly.dims[a] for a in target_axes]
        total = 1
        for d in dims:
            total *= d
        if total > DENSE_MATRIX_LIMIT:
            raise ValueError(f"refusing to materialize a {total}x{total} matrix")
        pos = [target_axes.index(a) for a in self.axes]
        return _embed_matrix(self.matrix, pos, dims)

    def unitarity_defect(self) -> float:
        eye = np.eye(self.matrix.shape[0])
        return float(np.abs(self.matrix.conj().T @ self.matrix - eye).max())


def _readonly_matrix(m: np.ndarray) -> np.ndarray:
    m = m.copy()
    m.setflags(write=False)
    return m


class BlockReadoutOp:
    """Structured readout operator: identity plus, per joint outcome tuple,
    (outcome-block projectors on the apparatuses) ⊗ (student verdict move).

    Stored and applied as block maps, never materialized on the joint space;
    to_matrix() is available at test scale.
    """

    def __init__(
        self,
        assembly: ExperimentAssembly,
        apparatus_ids: Sequence[str],
        student_id: str,
        block_projectors: Sequence[Mapping[str, np.ndarray]],
        terms: Sequence[tuple[tuple[str, ...], np.ndarray]],
    ):
        self.assembly = assembly
        self.apparatus_ids = tuple(apparatus_ids)
        self.student_id = student_id
        self.apparatus_axes = tuple(assembly.axis_of(a) for a in apparatus_ids)
        self.student_axis = assembly.axis_of(student_id)
        self.block_projectors = block_projectors
        self.terms = list(terms)

    @property
    def space_ids(self) -> tuple[str, ...]:
        acted = [*self.apparatus_ids, self.student_id]
        acted.sort(key=lambda sid: self.assembly.axis_of(sid))
        return tuple(acted)

    def apply(self, state: StateVector) -> StateVector:
        if state.space != self.assembly.joint_space:
            raise ValueError("state does not live in the assembly's joint space")
        dims = self.assembly.dims
        out = state.amplitudes.copy()
        for tup, delta in self.terms:
            piece = state.amplitudes
            for axis, projs, label in zip(
                self.apparatus_axes, self.block_projectors, tup
            ):
                piece = _apply_to_axes(piece, dims, (axis,), projs[label])
            piece = _apply_to_axes(piece, dims, (self.student_axis,), delta)
            out = out + piece
        return StateVector(self.assembly.joint_space, out, normalized=state.normalized)

    def to_matrix(self, space_ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.space_ids if space_ids is None else tuple(space_ids)
        target_axes = [self.assembly.axis_of(sid) for sid in ids]
        if sorted(target_axes) != target_axes:
            raise ValueError("space_ids must be listed in assembly order")
        acted = {*self.apparatus_axes, self.student_axis}
        if not acted <= set(target_axes):
            raise ValueError("space_ids must contain all acted subsystems")
        dims = [self.assembly.dims[a] for a in target_axes]
        total = 1
        for d in dims:
            total *= d
        if total > DENSE_MATRIX_LIMIT:
            raise ValueError(f"refusing to materialize a {total}x{total} matrix")
        out = np.eye(total, dtype=np.complex128)
        for tup, delta in self.terms:
            factor_by_axis = {
                axis: projs[label]
                for axis, projs, label in zip(
                    self.apparatus_axes, self.block_projectors, tup
                )
            }
            factor_by_axis[self.student_axis] = delta
            term = None
            for axis, d in zip(target_axes, dims):
                f = factor_by_axis.get(axis, np.eye(d))
                term = f if term is None else np.kron(term, f)
            out = out + term
        return out

    def unitarity_defect(self) -> float:
        m = self.to_matrix()
        return float(np.abs(m.conj().T @ m - np.eye(m.shape[0])).max())


def compose(op_after, op_before) -> DenseOp:
    """The single operator equal to applying op_before, then op_after.

    Materializes both on the union of their acted subsystems, so this is for
    test-scale dimensions only.
    """
    if op_after.assembly is not op_before.assembly:
        raise ValueError("operators belong to different assemblies")
    assembly = op_after.assembly
    union = sorted(
        set(op_after.space_ids) | set(op_before.space_ids),
        key=assembly.axis_of,
    )
    m = op_after.to_matrix(union) @ op_before.to_matrix(union)
    return DenseOp(assembly, union, m)


def _swap_block_unitary(
    space_dim: int,
    ready: Macrostate,
    outcome: Macrostate,
    isometry: Isometry,
) -> np.ndarray:
    """Unitary on one macrosystem: isometry on ready -> outcome, its adjoint
    back, identity on every other block."""
    t = isometry.embedded()
    p_ready = ready.subspace.frame @ ready.subspace.frame.conj().T
    p_out = outcome.subspace.frame @ outcome.subspace.frame.conj().T
    return t + t.conj().T + (np.eye(space_dim) - p_ready - p_out)


def measurement_step(
    assembly: ExperimentAssembly,
    apparatus: Apparatus,
    microsystem: Microsystem,
    unitarity_tol: float = 1e-9,
) -> DenseOp:
    """The measurement interaction between one microsystem and one apparatus.

    On (outcome subspace λ) ⊗ (ready block): applies the outcome isometry to
    the apparatus factor, leaving the microsystem factor untouched.  Micro
    states orthogonal to every outcome subspace are left alone.  The unitary
    completion swaps ready and outcome blocks (see module docstring).

    Rejects with UnitaryCompletionError when the assembled operator fails
    norm preservation, which happens exactly when the micro outcome subspaces
    are not mutually orthogonal: no unitary realizes the rule then.
    """
    micro_labels = set(microsystem.outcome_labels)
    if micro_labels != set(apparatus.outcome_labels):
        raise ValueError(
            f"outcome label mismatch: microsystem {sorted(micro_labels)} vs "
            f"apparatus {sorted(apparatus.outcome_labels)}"
        )
    s_axis = assembly.axis_of(microsystem.space.id)
    a_axis = assembly.axis_of(apparatus.space.id)
    ds, da = microsystem.space.dim, apparatus.space.dim

    def ordered_kron(micro_part: np.ndarray, app_part: np.ndarray) -> np.ndarray:
        if s_axis < a_axis:
            return np.kron(micro_part, app_part)
        return np.kron(app_part, micro_part)

    total_micro = np.zeros((ds, ds), dtype=np.complex128)
    matrix = np.zeros((ds * da, ds * da), dtype=np.complex128)
    for label in microsystem.outcome_labels:
        pi = microsystem.outcome_projector(label)
        swap = _swap_block_unitary(
            da, apparatus.ready, apparatus.outcomes[label], apparatus.isometries[label]
        )
        matrix += ordered_kron(pi, swap)
        total_micro += pi
    matrix += ordered_kron(np.eye(ds) - total_micro, np.eye(da))

    defect = float(np.abs(matrix.conj().T @ matrix - np.eye(ds * da)).max())
    if defect > unitarity_tol:
        raise UnitaryCompletionError(
            f"measurement rule admits no unitary completion for microsystem "
            f"{microsystem.space.id!r}: |M†M - I| = {defect:.3e} (outcome "
            f"subspaces are presumably not orthogonal)",
            defect,
        )
    ids = (
        (microsystem.space.id, apparatus.space.id)
        if s_axis < a_axis
        else (apparatus.space.id, microsystem.space.id)
    )
    return DenseOp(assembly, ids, matrix)


def readout_step(
    assembly: ExperimentAssembly,
    student: GradStudent,
    apparatus_list: Sequence[Apparatus],
) -> BlockReadoutOp:
    """The student reads the apparatuses and records her verdict.

    For apparatuses jointly in outcome blocks (λ1..λk) and the student in her
    ready block, the student moves to the block named by her verdict table;
    any configuration outside the joint outcome blocks is left alone.
    """
    alphabets = tuple(a.outcome_labels for a in apparatus_list)
    if alphabets != student.alphabet:
        raise ValueError(
            f"apparatus outcome alphabets {alphabets} do not match the "
            f"student's tabulated alphabet {student.alphabet}"
        )
    dg = student.space.dim
    block_projectors = []
    for a in apparatus_list:
        projs = {}
        for label in a.outcome_labels:
            f = a.outcomes[label].subspace.frame
            projs[label] = f @ f.conj().T
        block_projectors.append(projs)
    deltas: dict[str, np.ndarray] = {}
    for verdict in student.outcomes:
        g = _swap_block_unitary(
            dg, student.ready, student.outcomes[verdict], student.isometries[verdict]
        )
        deltas[verdict] = g - np.eye(dg)
    terms = []
    for tup in itertools.product(*student.alphabet):
        terms.append((tup, deltas[student.table[tup]]))
    return BlockReadoutOp(
        assembly,
        [a.space.id for a in apparatus_list],
        student.space.id,
        block_projectors,
        terms,
    )


def environment_step(
    assembly: ExperimentAssembly,
    macrosystem: Apparatus | GradStudent,
    environment: Environment,
    seed: int,
) -> DenseOp:
    """One round of macrostate-preserving scrambling with the environment.

    Block-diagonal unitary: an independent seeded random unitary on each
    (macrostate block) ⊗ (environment) product, identity on the remainder.
    Never mixes macrostate blocks, but generically entangles the macrosystem
    with the environment inside a block.
    """
    s_axis = assembly.axis_of(macrosystem.space.id)
    e_axis = assembly.axis_of(environment.space.id)
    ds, de = macrosystem.space.dim, environment.space.dim

    def ordered_kron(sys_part: np.ndarray, env_part: np.ndarray) -> np.ndarray:
        if s_axis < e_axis:
            return np.kron(sys_part, env_part)
        return np.kron(env_part, sys_part)

    matrix = np.zeros((ds * de, ds * de), dtype=np.complex128)
    coverage = np.zeros((ds, ds), dtype=np.complex128)
    for macro in macrosystem.macrostates():
        v = macro.subspace.frame
        rng = np.random.default_rng(spawn_seed(seed, "env-block", macro.label))
        block_u = haar_unitary(macro.subspace.dim * de, rng)
        embed = ordered_kron(v, np.eye(de))
        matrix += embed @ block_u @ embed.conj().T
        coverage += v @ v.conj().T
    matrix += ordered_kron(np.eye(ds) - coverage, np.eye(de))
    ids = (
        (macrosystem.space.id, environment.space.id)
        if s_axis < e_axis
        else (environment.space.id, macrosystem.space.id)
    )
    return DenseOp(assembly, ids, matrix)


def realizes(
    state: StateVector,
    assembly: ExperimentAssembly,
    macrosystem: Apparatus | GradStudent,
    macrostate_label: str,
    tol: float = 1e-10,
) -> tuple[bool, float]:
    """Whether the joint state lies in (macrostate block) ⊗ (everything else).

    Returns (verdict, defect) where defect is the norm of the component
    outside the block; the verdict is defect <= tol.
    """
    if state.space != assembly.joint_space:
        raise ValueError("state does not live in the assembly's joint space")
    macro = macrosystem.macrostate(macrostate_label)
    axis = assembly.axis_of(macrosystem.space.id)
    defect = _block_residual_norm(
        state.amplitudes, assembly.dims, axis, macro.subspace.frame
    )
    return defect <= tol, defect


@dataclass(frozen=True)
class BuiltExperiment:
    """The subsystems of a standard single-apparatus experiment, assembled in
    the fixed order (microsystem, apparatus[, student][, environment])."""

    micro: Microsystem
    apparatus: Apparatus
    student: GradStudent | None
    environment: Environment | None
    assembly: ExperimentAssembly


_LAYOUT_KEYS = {
    "micro_dim",
    "micro_outcome_dims",
    "micro_rotate_seed",
    "apparatus_macrostate_dim",
    "apparatus_seed",
    "student_rule",
    "student_rule_params",
    "student_macrostate_dim",
    "student_seed",
    "student_true_label",
    "student_false_label",
    "environment_dim",
}


@dataclass(frozen=True)
class ExperimentLayout:
    """JSON-serializable description of a standard experiment, so a run can be
    reproduced from a config file (dims, seeds, outcome alphabet, and the
    student's verdict function as a named rule)."""

    micro_dim: int = 2
    micro_outcome_dims: Mapping[str, int] = field(
        default_factory=lambda: {"1": 1, "2": 1}
    )
    micro_rotate_seed: int | None = None
    apparatus_macrostate_dim: int = 4
    apparatus_seed: int = 1
    student_rule: str | None = None
    student_rule_params: Mapping[str, object] = field(default_factory=dict)
    student_macrostate_dim: int = 4
    student_seed: int = 2
    student_true_label: str = "B-true"
    student_false_label: str = "B-false"
    environment_dim: int | None = None

    def to_dict(self) -> dict:
        return {
            "micro_dim": self.micro_dim,
            "micro_outcome_dims": dict(self.micro_outcome_dims),
            "micro_rotate_seed": self.micro_rotate_seed,
            "apparatus_macrostate_dim": self.apparatus_macrostate_dim,
            "apparatus_seed": self.apparatus_seed,
            "student_rule": self.student_rule,
            "student_rule_params": dict(self.student_rule_params),
            "student_macrostate_dim": self.student_macrostate_dim,
            "student_seed": self.student_seed,
            "student_true_label": self.student_true_label,
            "student_false_label": self.student_false_label,
            "environment_dim": self.environment_dim,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "ExperimentLayout":
        unknown = set(data) - _LAYOUT_KEYS
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**data)  # type: ignore[arg-type]

    def build(self) -> BuiltExperiment:
        micro = build_microsystem(
            self.micro_dim, dict(self.micro_outcome_dims), self.micro_rotate_seed
        )
        apparatus = build_apparatus(
            len(self.micro_outcome_dims),
            self.apparatus_macrostate_dim,
            self.apparatus_seed,
            labels=list(self.micro_outcome_dims),
        )
        student = None
        if self.student_rule is not None:
            student = build_student(
                (apparatus.outcome_labels,),
                self.student_rule,
                self.student_macrostate_dim,
                self.student_seed,
                rule_params=self.student_rule_params,
                true_label=self.student_true_label,
                false_label=self.student_false_label,
            )
        environment = (
            build_environment(self.environment_dim)
            if self.environment_dim is not None
            else None
        )
        members: list[object] = [micro, apparatus]
        if student is not None:
            members.append(student)
        if environment is not None:
            members.append(environment)
        return BuiltExperiment(
            micro, apparatus, student, environment, ExperimentAssembly(members)
        )
