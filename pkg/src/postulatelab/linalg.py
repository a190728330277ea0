"""Complex linear algebra substrate: labeled Hilbert spaces, state vectors,
subspace frames, projectors, isometries, and seeded rotation-invariant sampling.

Everything here is immutable after construction and every operation is a pure
function of its inputs (seeds included), so values can be shared freely across
threads.  Subspaces are stored as orthonormal-column frames rather than
projectors: frames keep isometry construction and block bookkeeping exact.

Tensor index convention (shared by every module built on top of this one):
the left factor is the slow/major index, i.e. (u ⊗ v)[i*dim_v + j] = u[i]*v[j].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

#: Entrywise tolerance for orthonormality after orthonormalization
#: (double-precision QR-grade accuracy with headroom).
ORTHO_TOL = 1e-10


def spawn_seed(master: int, *tokens: object) -> int:
    """Derive an independent child seed from a master seed and a token path.

    The derivation hashes the decimal master seed and the str() of each token,
    so it is stable across processes and platforms.  Adding a new token path
    never perturbs the streams of existing ones.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for t in tokens:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "big")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpaceLabel:
    """A named finite-dimensional Hilbert space."""

    id: str
    dim: int

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("space id must be a nonempty string")
        if self.dim < 1:
            raise ValueError(f"space dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True, eq=False)
class StateVector:
    """A vector of complex amplitudes living in a labeled space.

    ``normalized=True`` asserts unit norm at construction time
    (|norm^2 - 1| <= 1e-10) and is propagated by norm-preserving operations.
    """

    space: SpaceLabel
    amplitudes: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        amps = np.array(self.amplitudes, dtype=np.complex128)
        if amps.ndim != 1 or amps.shape[0] != self.space.dim:
            raise ValueError(
                f"amplitudes must be a length-{self.space.dim} vector for "
                f"space {self.space.id!r}, got shape {amps.shape}"
            )
        if not np.all(np.isfinite(amps.view(np.float64))):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", _readonly(amps))
        if self.normalized and abs(self.norm_sq() - 1.0) > 1e-10:
            raise ValueError(
                f"state marked normalized but norm^2 = {self.norm_sq()!r}"
            )

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def scaled(self, factor: complex) -> "StateVector":
        return StateVector(self.space, self.amplitudes * factor)

    def unit(self) -> "StateVector":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize the zero vector")
        return StateVector(self.space, self.amplitudes / n, normalized=True)


def basis_state(space: SpaceLabel, index: int) -> StateVector:
    """The computational basis vector e_index."""
    if not 0 <= index < space.dim:
        raise ValueError(f"basis index {index} out of range for dim {space.dim}")
    amps = np.zeros(space.dim, dtype=np.complex128)
    amps[index] = 1.0
    return StateVector(space, amps, normalized=True)


def inner_product(u: StateVector, v: StateVector) -> complex:
    """<u|v>, conjugate-linear in u."""
    if u.space != v.space:
        raise ValueError(
            f"inner product requires matching spaces: {u.space} vs {v.space}"
        )
    return complex(np.vdot(u.amplitudes, v.amplitudes))


def tensor_product(u: StateVector, v: StateVector) -> StateVector:
    """u ⊗ v with the left factor as the major index."""
    space = SpaceLabel(f"({u.space.id}*{v.space.id})", u.space.dim * v.space.dim)
    return StateVector(
        space,
        np.kron(u.amplitudes, v.amplitudes),
        normalized=u.normalized and v.normalized,
    )


def random_state(space: SpaceLabel, seed: int) -> StateVector:
    """A seeded Haar-like random unit vector.

    Components are drawn i.i.d. complex standard Gaussian and the vector is
    normalized, which makes the distribution invariant under unitary rotation.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(space.dim) + 1j * rng.standard_normal(space.dim)
    return StateVector(space, z / np.linalg.norm(z), normalized=True)


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """A Haar-distributed unitary: QR of a complex Gaussian with the phase fix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim)))
    q, r = np.linalg.qr(z)
    d = np.diagonal(r).copy()
    phases = np.where(np.abs(d) == 0.0, 1.0, d / np.abs(d))
    return q * phases


@dataclass(frozen=True, eq=False)
class Subspace:
    """A subspace of an ambient space, stored as an orthonormal-column frame."""

    ambient: SpaceLabel
    frame: np.ndarray

    def __post_init__(self) -> None:
        f = np.array(self.frame, dtype=np.complex128)
        if f.ndim != 2 or f.shape[0] != self.ambient.dim:
            raise ValueError(
                f"frame must have {self.ambient.dim} rows, got shape {f.shape}"
            )
        k = f.shape[1]
        if not 1 <= k <= self.ambient.dim:
            raise ValueError(f"frame must have between 1 and dim columns, got {k}")
        gram_defect = np.abs(f.conj().T @ f - np.eye(k)).max()
        if gram_defect > ORTHO_TOL:
            raise ValueError(
                f"frame columns not orthonormal: defect {gram_defect:.3e} > {ORTHO_TOL}"
            )
        object.__setattr__(self, "frame", _readonly(f))

    @property
    def dim(self) -> int:
        return self.frame.shape[1]

    @classmethod
    def from_indices(cls, space: SpaceLabel, indices: Sequence[int]) -> "Subspace":
        """The coordinate subspace spanned by the given basis indices."""
        frame = np.zeros((space.dim, len(indices)), dtype=np.complex128)
        for col, idx in enumerate(indices):
            if not 0 <= idx < space.dim:
                raise ValueError(f"basis index {idx} out of range for dim {space.dim}")
            frame[idx, col] = 1.0
        return cls(space, frame)

    @classmethod
    def span(cls, space: SpaceLabel, vectors: Sequence[np.ndarray]) -> "Subspace":
        """Orthonormalize the given vectors (QR) and take their span."""
        cols = np.column_stack([np.asarray(v, dtype=np.complex128) for v in vectors])
        if cols.shape[0] != space.dim:
            raise ValueError(f"vectors must have length {space.dim}")
        q, r = np.linalg.qr(cols)
        small = np.abs(np.diagonal(r)) < 1e-12 * max(1.0, np.abs(cols).max())
        if small.any():
            raise ValueError("vectors are linearly dependent; span is rank-deficient")
        return cls(space, q)

    @classmethod
    def random(cls, space: SpaceLabel, dim: int, seed: int) -> "Subspace":
        """A seeded Haar-random dim-dimensional subspace.

        Reduced QR of a tall Gaussian matrix; the resulting frame spans a
        uniformly distributed subspace without paying for a full unitary.
        """
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((space.dim, dim)) + 1j * rng.standard_normal(
            (space.dim, dim)
        )
        q, r = np.linalg.qr(z)
        d = np.diagonal(r).copy()
        phases = np.where(np.abs(d) == 0.0, 1.0, d / np.abs(d))
        return cls(space, q * phases)

    def member(self, coords: np.ndarray) -> StateVector:
        """The ambient vector with the given frame coordinates."""
        coords = np.asarray(coords, dtype=np.complex128)
        if coords.shape != (self.dim,):
            raise ValueError(f"coords must have shape ({self.dim},)")
        return StateVector(self.ambient, self.frame @ coords)

    def random_member(self, seed: int) -> StateVector:
        """A seeded random unit vector inside this subspace."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(self.dim) + 1j * rng.standard_normal(self.dim)
        return StateVector(
            self.ambient, self.frame @ (z / np.linalg.norm(z)), normalized=True
        )

    def coords_of(self, v: StateVector) -> np.ndarray:
        """Frame coordinates of the component of v inside this subspace."""
        if v.space != self.ambient:
            raise ValueError("vector does not live in the ambient space")
        return self.frame.conj().T @ v.amplitudes


@dataclass(frozen=True, eq=False)
class Projector:
    """An orthogonal projector on an ambient space."""

    ambient: SpaceLabel
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.complex128)
        d = self.ambient.dim
        if m.shape != (d, d):
            raise ValueError(f"projector matrix must be {d}x{d}, got {m.shape}")
        herm = np.abs(m - m.conj().T).max()
        if herm > 1e-10:
            raise ValueError(f"projector not Hermitian: defect {herm:.3e}")
        idem = np.abs(m @ m - m).max()
        if idem > 1e-10:
            raise ValueError(f"projector not idempotent: defect {idem:.3e}")
        tr = m.trace().real
        if abs(tr - round(tr)) > 1e-8:
            raise ValueError(f"projector trace {tr!r} is not an integer rank")
        object.__setattr__(self, "matrix", _readonly(m))

    @property
    def rank(self) -> int:
        return int(round(self.matrix.trace().real))

    def apply(self, v: StateVector) -> StateVector:
        if v.space != self.ambient:
            raise ValueError("vector does not live in the projector's space")
        return StateVector(self.ambient, self.matrix @ v.amplitudes)

    def expectation(self, v: StateVector) -> float:
        """<v|P|v>, guaranteed real for a projector."""
        return float(np.vdot(v.amplitudes, self.matrix @ v.amplitudes).real)


def projector_from_subspace(s: Subspace) -> Projector:
    """P = frame · frame†, the orthogonal projector onto the subspace."""
    return Projector(s.ambient, s.frame @ s.frame.conj().T)


@dataclass(frozen=True, eq=False)
class Isometry:
    """An inner-product-preserving map between two equal-dimension subspaces.

    ``matrix`` maps source-frame coordinates to target-frame coordinates; with
    equal dimensions it is a square unitary.  ``source`` may be None for an
    isometry whose domain is abstract coordinates not yet tied to a frame.
    """

    target: Subspace
    matrix: np.ndarray
    source: Subspace | None = None

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != self.target.dim:
            raise ValueError(
                f"matrix must have {self.target.dim} rows, got shape {m.shape}"
            )
        if m.shape[1] != self.target.dim:
            raise ValueError(
                f"isometry must be square between equal-dimension subspaces, "
                f"got shape {m.shape}"
            )
        defect = np.abs(m.conj().T @ m - np.eye(m.shape[1])).max()
        if defect > ORTHO_TOL:
            raise ValueError(f"matrix is not an isometry: defect {defect:.3e}")
        if self.source is not None and self.source.dim != m.shape[1]:
            raise ValueError(
                f"source dimension {self.source.dim} does not match matrix "
                f"columns {m.shape[1]}"
            )
        object.__setattr__(self, "matrix", _readonly(m))

    @property
    def from_dim(self) -> int:
        return self.matrix.shape[1]

    def with_source(self, source: Subspace) -> "Isometry":
        return Isometry(self.target, self.matrix, source)

    def embedded(self) -> np.ndarray:
        """The ambient-coordinates map: target_frame · matrix · source_frame†.

        Sends vectors in the source subspace to their images in the target
        subspace and annihilates the source's orthogonal complement.
        """
        if self.source is None:
            raise ValueError("embedded() requires a source subspace")
        return self.target.frame @ self.matrix @ self.source.frame.conj().T

    def apply_coords(self, coords: np.ndarray) -> StateVector:
        """Image of source-frame coordinates, as an ambient target vector."""
        coords = np.asarray(coords, dtype=np.complex128)
        return StateVector(self.target.ambient, self.target.frame @ (self.matrix @ coords))


def random_isometry(
    from_dim: int, to: Subspace, seed: int, source: Subspace | None = None
) -> Isometry:
    """A seeded random isometry onto the subspace ``to``.

    The matrix is obtained by orthonormalizing a seeded complex Gaussian
    matrix, so it is Haar-distributed and deterministic per seed.
    """
    if from_dim != to.dim:
        raise ValueError(
            f"from_dim {from_dim} must equal the target dimension {to.dim}"
        )
    rng = np.random.default_rng(seed)
    return Isometry(to, haar_unitary(to.dim, rng), source)


@dataclass(frozen=True)
class FrameOverlapReport:
    """Result of certifying that frames are pairwise orthogonal."""

    ok: bool
    max_overlap: float
    worst_pair: tuple[int, int] | None
    tolerance: float


def direct_sum_frames(
    parts: Sequence[Subspace], tol: float = ORTHO_TOL
) -> FrameOverlapReport:
    """Certify that the given subspaces of one ambient space are pairwise
    orthogonal, reporting the largest cross-frame inner product found."""
    if not parts:
        raise ValueError("need at least one subspace")
    ambient = parts[0].ambient
    for s in parts[1:]:
        if s.ambient != ambient:
            raise ValueError("all parts must share the ambient space")
    if sum(s.dim for s in parts) > ambient.dim:
        raise ValueError("total part dimension exceeds the ambient dimension")
    max_overlap = 0.0
    worst: tuple[int, int] | None = None
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            overlap = float(np.abs(parts[i].frame.conj().T @ parts[j].frame).max())
            if overlap > max_overlap:
                max_overlap = overlap
                worst = (i, j)
    return FrameOverlapReport(max_overlap <= tol, max_overlap, worst, tol)


def family_completeness_defect(family: Mapping[str, Projector]) -> float:
    """Max entry of |sum of projectors - identity|."""
    if not family:
        raise ValueError("projector family is empty")
    projectors = list(family.values())
    ambient = projectors[0].ambient
    total = np.zeros((ambient.dim, ambient.dim), dtype=np.complex128)
    for p in projectors:
        if p.ambient != ambient:
            raise ValueError("projector family mixes ambient spaces")
        total = total + p.matrix
    return float(np.abs(total - np.eye(ambient.dim)).max())


def family_orthogonality_defect(family: Mapping[str, Projector]) -> float:
    """Max entry of |P_i P_j| over distinct pairs in the family."""
    projectors = list(family.values())
    worst = 0.0
    for i in range(len(projectors)):
        for j in range(i + 1, len(projectors)):
            worst = max(
                worst, float(np.abs(projectors[i].matrix @ projectors[j].matrix).max())
            )
    return worst
