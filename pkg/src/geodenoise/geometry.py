"""Molecular geometry data model.

Covers XYZ ingestion and serialization, pairwise distance extraction,
rigid-body transforms, Gaussian coordinate perturbation for building a
noisy second view of a molecule, and shared-atom-subset masks. All values
are plain numpy arrays in double precision; functions are pure given their
inputs and a caller-owned random generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .elements import SYMBOL_TO_NUMBER, symbol_for

__all__ = [
    "MoleculeGeometry",
    "GeometryPair",
    "DistanceSet",
    "RigidTransform",
    "AtomMask",
    "XyzParseError",
    "parse_xyz",
    "serialize_xyz",
    "pairwise_distances",
    "apply_rigid_transform",
    "perturb_coordinates",
    "sample_atom_mask",
    "random_rotation",
]


class XyzParseError(ValueError):
    """Malformed XYZ input; carries the 1-based line number of the defect."""

    def __init__(self, message: str, line_number: int):
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True, eq=False)
class MoleculeGeometry:
    """Atomic numbers plus 3D coordinates in angstrom.

    Arrays are treated as read-only after construction; share freely
    across threads.
    """

    atom_types: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        types = np.asarray(self.atom_types, dtype=np.int64)
        coords = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "atom_types", types)
        object.__setattr__(self, "coords", coords)
        if types.ndim != 1 or types.size < 1:
            raise ValueError("atom_types must be a non-empty 1-D sequence")
        if np.any(types < 1):
            raise ValueError("atomic numbers must be >= 1")
        if coords.ndim != 2 or coords.shape != (types.size, 3):
            raise ValueError(
                f"coords must have shape ({types.size}, 3), got {coords.shape}"
            )
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")

    @property
    def n(self) -> int:
        return self.atom_types.size

    def subset(self, indices: np.ndarray) -> "MoleculeGeometry":
        idx = np.asarray(indices, dtype=np.int64)
        return MoleculeGeometry(self.atom_types[idx], self.coords[idx])

    def permute(self, perm: np.ndarray) -> "MoleculeGeometry":
        return self.subset(perm)


@dataclass(frozen=True, eq=False)
class GeometryPair:
    """Two views of one molecule: an original and a coordinate-noised copy."""

    g1: MoleculeGeometry
    g2: MoleculeGeometry
    coord_noise_sigma: float

    def __post_init__(self):
        if self.g1.n != self.g2.n:
            raise ValueError("views must have the same atom count")
        if not np.array_equal(self.g1.atom_types, self.g2.atom_types):
            raise ValueError("views must share atom types")


@dataclass(frozen=True, eq=False)
class DistanceSet:
    """Unordered pairwise distances, one entry per pair, ordered by (i, j)."""

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    cutoff: float | None = None

    def __post_init__(self):
        if not (self.i.shape == self.j.shape == self.d.shape):
            raise ValueError("index and distance arrays must align")
        if np.any(self.d < 0):
            raise ValueError("distances must be non-negative")
        if self.cutoff is not None and self.d.size and np.any(self.d > self.cutoff):
            raise ValueError("stored distance exceeds cutoff")

    def __len__(self) -> int:
        return self.d.size

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [
            (int(a), int(b), float(x))
            for a, b, x in zip(self.i, self.j, self.d)
        ]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation plus translation; rejects improper or skewed matrices."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if rot.shape != (3, 3) or tr.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-12:
            raise ValueError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-12:
            raise ValueError("rotation matrix must have determinant +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class AtomMask:
    """Shared subset of atoms kept in both views of a pair.

    Keeps ceil((1 - ratio) * n) atoms, never fewer than one.
    """

    kept_indices: np.ndarray
    ratio: float

    def __post_init__(self):
        idx = np.asarray(self.kept_indices, dtype=np.int64)
        object.__setattr__(self, "kept_indices", idx)
        if idx.size < 1:
            raise ValueError("mask must keep at least one atom")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("kept_indices must be strictly increasing")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("mask ratio must lie in [0, 1)")

    @property
    def size(self) -> int:
        return self.kept_indices.size


def parse_xyz(text: str) -> list[MoleculeGeometry]:
    """Parse standard XYZ text into molecules, one per frame.

    A frame is an atom-count line, a comment line, then `Element x y z`
    lines. Frames may follow back-to-back; blank lines between frames are
    tolerated. Errors report the offending 1-based line number.
    """
    lines = text.splitlines()
    molecules: list[MoleculeGeometry] = []
    pos = 0
    while pos < len(lines):
        if lines[pos].strip() == "":
            pos += 1
            continue
        try:
            count = int(lines[pos].strip())
        except ValueError:
            raise XyzParseError(
                f"malformed atom-count line at line {pos + 1}: {lines[pos]!r}",
                pos + 1,
            ) from None
        if count < 1:
            raise XyzParseError(
                f"atom count must be positive at line {pos + 1}", pos + 1
            )
        if pos + 1 >= len(lines):
            raise XyzParseError(
                f"truncated frame: missing comment line at line {pos + 2}", pos + 2
            )
        body = lines[pos + 2 : pos + 2 + count]
        if len(body) < count:
            raise XyzParseError(
                f"truncated frame: expected {count} atom lines after line {pos + 2}",
                len(lines) + 1,
            )
        types = np.empty(count, dtype=np.int64)
        coords = np.empty((count, 3), dtype=np.float64)
        for k, raw in enumerate(body):
            lineno = pos + 3 + k
            parts = raw.split()
            if len(parts) < 4:
                raise XyzParseError(
                    f"expected 'Element x y z' at line {lineno}, got {raw!r}", lineno
                )
            symbol = parts[0]
            if symbol not in SYMBOL_TO_NUMBER:
                raise XyzParseError(f"unknown element {symbol} at line {lineno}", lineno)
            types[k] = SYMBOL_TO_NUMBER[symbol]
            try:
                coords[k] = [float(v) for v in parts[1:4]]
            except ValueError:
                raise XyzParseError(
                    f"non-numeric coordinate at line {lineno}: {raw!r}", lineno
                ) from None
        molecules.append(MoleculeGeometry(types, coords))
        pos += 2 + count
    return molecules


def serialize_xyz(molecules, comments=None) -> str:
    """Emit multi-frame XYZ text with 10 significant digits per coordinate."""
    if isinstance(molecules, MoleculeGeometry):
        molecules = [molecules]
    out = []
    for k, mol in enumerate(molecules):
        comment = "" if comments is None else comments[k]
        out.append(str(mol.n))
        out.append(comment)
        for z, (x, y, w) in zip(mol.atom_types, mol.coords):
            out.append(f"{symbol_for(int(z))} {x:.10g} {y:.10g} {w:.10g}")
    return "\n".join(out) + "\n"


def pairwise_distances(g: MoleculeGeometry, cutoff: float | None = None) -> DistanceSet:
    """All unordered pair distances with i < j, ordered by (i, j).

    With a cutoff, only pairs at distance <= cutoff are stored. A single
    atom yields an empty set.
    """
    n = g.n
    i_idx, j_idx = np.triu_indices(n, k=1)
    diff = g.coords[i_idx] - g.coords[j_idx]
    d = np.sqrt(np.sum(diff * diff, axis=1))
    if cutoff is not None:
        keep = d <= cutoff
        i_idx, j_idx, d = i_idx[keep], j_idx[keep], d[keep]
    return DistanceSet(i_idx.astype(np.int64), j_idx.astype(np.int64), d, cutoff)


def apply_rigid_transform(g: MoleculeGeometry, t: RigidTransform) -> MoleculeGeometry:
    coords = g.coords @ t.rotation.T + t.translation
    return MoleculeGeometry(g.atom_types, coords)


def perturb_coordinates(
    g: MoleculeGeometry, sigma: float, rng: np.random.Generator
) -> GeometryPair:
    """Build the second view by adding i.i.d. Gaussian noise per coordinate.

    Noise is Normal(0, sigma^2) independently for every coordinate
    component; atom types are shared between the views.
    """
    if sigma < 0:
        raise ValueError("coordinate noise sigma must be non-negative")
    eps = rng.normal(0.0, sigma, size=g.coords.shape)
    g2 = MoleculeGeometry(g.atom_types, g.coords + eps)
    return GeometryPair(g, g2, sigma)


def sample_atom_mask(n: int, r: float, rng: np.random.Generator) -> AtomMask:
    """Uniformly sample the kept subset of size n - floor(r * n)."""
    if n < 1:
        raise ValueError("atom count must be >= 1")
    if not 0.0 <= r < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    kept_count = n - math.floor(r * n)
    kept = np.sort(rng.choice(n, size=kept_count, replace=False))
    return AtomMask(kept, r)


def random_rotation(rng: np.random.Generator) -> RigidTransform:
    """Uniform random proper rotation with a Gaussian translation."""
    # QR of a Gaussian matrix, sign-fixed to a positive diagonal, gives a
    # Haar-distributed orthogonal matrix; flip one axis if det is -1.
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    # Re-orthonormalize to push round-off below the validation tolerance.
    u, _, vt = np.linalg.svd(q)
    q = u @ vt
    if np.linalg.det(q) < 0:
        u[:, -1] = -u[:, -1]
        q = u @ vt
    return RigidTransform(q, rng.normal(0.0, 2.0, size=3))
