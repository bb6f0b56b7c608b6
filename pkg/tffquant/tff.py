"""
Tight fusion frame construction.

A tight fusion frame over R^d is a set of ``k`` subspaces of dimension
``rho`` whose weighted orthogonal projections sum to the identity. Three
construction routes are supported:

* **trivial**: ``k = 1, rho = d``, a single subspace equal to R^d.
* **complex**: Spectral Tetris builds a unit-norm tight frame of ``d/2``
  vectors in C^(rho/2), modulation by the k-th roots of unity turns it into
  ``k`` orthogonal blocks, and the entrywise complex-to-real map doubles
  every dimension.
* **real**: Spectral Tetris builds a unit-norm tight frame of ``k*rho``
  vectors in R^d directly, and column ``j`` joins subspace ``j mod k``.

All constructions are deterministic. The seeded orthogonal rotation that
:class:`FusionFrame` applies on top uses numpy's PCG64 generator, so a
frame is fully described by its :class:`FrameParams`.
"""

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import sparse

from tffquant.__version__ import CONSTRUCTION_VERSION, PRNG_NAME
from tffquant.errors import ConfigError, ConstructionError, FormatError

LOG = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1


class Verdict(NamedTuple):
    """
    Outcome of :func:`validate_params`. Truthy when the parameters are
    admissible.
    """

    valid: bool
    reason: str

    def __bool__(self):
        return self.valid


def validate_params(k, rho, d):
    """
    Check the necessary conditions for a tight fusion frame of ``k``
    subspaces of dimension ``rho`` in R^d.

    Admissible means ``k*rho >= d`` and either the trivial case
    ``k = 1, rho = d`` or Spectral Tetris feasibility ``d >= 2*rho``. These
    conditions are necessary; :func:`construction_route` decides whether a
    concrete construction exists.

    :param int k: Number of subspaces.
    :param int rho: Subspace dimension.
    :param int d: Ambient dimension.
    :rtype: Verdict
    """
    if min(k, rho, d) < 1:
        return Verdict(False, f"k, rho and d must be positive, got ({k}, {rho}, {d})")
    if k * rho < d:
        return Verdict(
            False, f"k*rho = {k * rho} < d = {d}: the subspaces cannot span R^{d}"
        )
    if k == 1 and rho == d:
        return Verdict(True, "trivial frame")
    if d < 2 * rho:
        return Verdict(
            False, f"Spectral Tetris needs d >= 2*rho, got d = {d}, rho = {rho}"
        )
    return Verdict(True, "ok")


def _tetris_walk(rows, cols):
    """
    Placement plan of Spectral Tetris for a ``rows x cols`` unit-norm tight
    frame. Yields ``(row, col, x)``: ``x is None`` for a single entry 1,
    otherwise a 2x2 block T(x) occupying rows ``row, row+1`` and columns
    ``col, col+1``. Row masses are tracked as exact fractions.
    """
    if rows < 1 or cols < 2 * rows:
        raise ConstructionError(
            f"Spectral Tetris needs d >= 2*rho, got rho = {rows}, d = {cols}"
        )
    target = Fraction(cols, rows)
    carried = Fraction(0)
    col = 0
    for row in range(rows):
        remaining = target - carried
        carried = Fraction(0)
        while remaining >= 1:
            yield row, col, None
            remaining -= 1
            col += 1
        if remaining > 0:
            if row + 1 >= rows:
                raise ConstructionError(
                    f"Spectral Tetris ran out of rows for ({rows}, {cols})"
                )
            yield row, col, remaining
            carried = 2 - remaining
            col += 2
    if col != cols:
        raise ConstructionError(
            f"Spectral Tetris filled {col} of {cols} columns for ({rows}, {cols})"
        )


@lru_cache(maxsize=4096)
def tetris_support_width(rows, cols):
    """
    Widest row support, in columns, of the Spectral Tetris frame of size
    ``rows x cols``. Row supports are contiguous, so modulation by the k-th
    roots of unity is tight exactly when this width is at most ``k``.

    :rtype: int
    """
    first = [None] * rows
    last = [0] * rows
    for row, col, x in _tetris_walk(rows, cols):
        spans = [(row, col)] if x is None else [(row, col), (row, col + 1)]
        if x is not None:
            spans += [(row + 1, col), (row + 1, col + 1)]
        for r, c in spans:
            if first[r] is None:
                first[r] = c
            last[r] = c
    return max(last[r] - first[r] + 1 for r in range(rows))


def spectral_tetris(rho, d):
    """
    Spectral Tetris construction of a unit-norm tight frame of ``d``
    vectors in a ``rho``-dimensional space.

    :param int rho: Number of rows.
    :param int d: Number of columns, at least ``2*rho``.
    :rtype: numpy.ndarray
    :returns: ``rho x d`` matrix with unit-norm columns and
        ``F @ F.T == (d/rho) I``.
    """
    untf = np.zeros((rho, d))
    for row, col, x in _tetris_walk(rho, d):
        if x is None:
            untf[row, col] = 1.0
            continue
        upper = math.sqrt(float(x) / 2.0)
        lower = math.sqrt(float(2 - x) / 2.0)
        untf[row, col : col + 2] = upper
        untf[row + 1, col] = lower
        untf[row + 1, col + 1] = -lower
    return untf


def modulation_is_tight(untf, k):
    """
    Whether modulating ``untf`` by the k-th roots of unity yields ``k``
    mutually orthogonal blocks: no row may hold two nonzero entries whose
    column indices differ by a multiple of ``k``.

    :param numpy.ndarray untf: Frame matrix, one vector per column.
    :param int k: Number of blocks.
    :rtype: bool
    """
    for row in np.asarray(untf):
        cols = np.flatnonzero(row)
        if cols.size < 2:
            continue
        diffs = np.subtract.outer(cols, cols)
        if np.any((diffs != 0) & (diffs % k == 0)):
            return False
    return True


def modulate(untf, k):
    """
    Modulate a unit-norm tight frame by the k-th roots of unity.

    Block ``i`` is ``sqrt(rho/d) * untf * [w^(i*n)]_n`` with
    ``w = exp(2*pi*1j/k)``; when :func:`modulation_is_tight` holds, each
    block has orthonormal rows.

    :param numpy.ndarray untf: ``rho x d`` unit-norm tight frame.
    :param int k: Number of blocks.
    :rtype: numpy.ndarray
    :returns: complex array of shape ``(k, rho, d)``.
    """
    rho, d = untf.shape
    columns = np.arange(d)
    phases = np.outer(np.arange(k), columns) % k
    roots = np.exp(2j * np.pi * phases / k)
    return math.sqrt(rho / d) * untf[None, :, :] * roots[:, None, :]


def complex_to_real(matrix):
    """
    Entrywise map ``x + iy -> [[x, -y], [y, x]]``. Orthonormality of rows
    and columns is preserved, and every trailing dimension doubles.

    :param numpy.ndarray matrix: complex array, at least 2-D.
    :rtype: numpy.ndarray
    """
    matrix = np.asarray(matrix, dtype=np.complex128)
    if matrix.ndim < 2:
        raise ConfigError("complex_to_real needs at least a 2-D array")
    rows, cols = matrix.shape[-2:]
    out = np.empty(matrix.shape[:-2] + (2 * rows, 2 * cols))
    out[..., 0::2, 0::2] = matrix.real
    out[..., 0::2, 1::2] = -matrix.imag
    out[..., 1::2, 0::2] = matrix.imag
    out[..., 1::2, 1::2] = matrix.real
    return out


def random_rotation(d, seed):
    """
    Haar-distributed orthogonal matrix, from the QR factorization of a
    seeded Gaussian matrix with the signs of ``diag(R)`` folded into Q.
    In one dimension the only rotation is ``[[1]]``.

    :param int d: Dimension.
    :param int seed: 64-bit seed for numpy's PCG64.
    :rtype: numpy.ndarray
    """
    if d == 1:
        return np.ones((1, 1))
    rng = np.random.Generator(np.random.PCG64(seed))
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def construction_route(k, rho, d):
    """
    Name of the construction that realizes ``(k, rho, d)``.

    :rtype: str
    :returns: ``"trivial"``, ``"complex"``, ``"real"``, or None when no
        supported construction exists.
    """
    if k == 1 and rho == d:
        return "trivial"
    if not validate_params(k, rho, d):
        return None
    if d % 2 == 0 and rho % 2 == 0 and tetris_support_width(rho // 2, d // 2) <= k:
        return "complex"
    if k * rho >= 2 * d and tetris_support_width(d, k * rho) <= k:
        return "real"
    return None


def frame_seed(seed, boundary):
    """
    Seed of the frame at layer boundary ``boundary``.

    :rtype: int
    """
    return (seed ^ boundary) & SEED_MASK


def as_fraction(value):
    """
    Convert a redundancy given as int, float, str (``"1.1"`` or ``"11/10"``)
    or Fraction into an exact Fraction.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**6)
    try:
        return Fraction(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"not a redundancy: {value!r}") from exc


@dataclass(frozen=True)
class FrameParams:
    """
    Parameters that fully determine a :class:`FusionFrame`.

    :param int k: Number of subspaces.
    :param int rho: Subspace dimension.
    :param int d: Ambient dimension.
    :param int seed: Rotation seed, ``0 <= seed < 2**64``.
    :param bool rotated: Whether the seeded rotation is applied.
    """

    k: int
    rho: int
    d: int
    seed: int = 0
    rotated: bool = True

    def __post_init__(self):
        if not 0 <= self.seed <= SEED_MASK:
            raise ConfigError(f"frame seed must fit in 64 bits, got {self.seed}")
        if construction_route(self.k, self.rho, self.d) is None:
            verdict = validate_params(self.k, self.rho, self.d)
            reason = verdict.reason if not verdict else "no tight construction"
            raise ConstructionError(
                f"cannot build a fusion frame with (k, rho, d) = "
                f"({self.k}, {self.rho}, {self.d}): {reason}"
            )

    @property
    def size(self):
        """Number of frame coefficients, ``k*rho``."""
        return self.k * self.rho

    @property
    def redundancy(self):
        """Exact redundancy ``k*rho/d``."""
        return Fraction(self.size, self.d)

    @property
    def weight(self):
        """Parseval weight ``sqrt(d/(k*rho))``."""
        return math.sqrt(self.d / self.size)

    @property
    def route(self):
        return construction_route(self.k, self.rho, self.d)


def _unrotated_blocks(params):
    """
    Orthonormal bases (``k x d x rho``) of the unweighted, unrotated
    subspaces.
    """
    k, rho, d = params.k, params.rho, params.d
    route = params.route
    if route == "trivial":
        return np.eye(d)[None, :, :]
    if route == "complex":
        blocks = complex_to_real(modulate(spectral_tetris(rho // 2, d // 2), k))
        return np.ascontiguousarray(blocks.transpose(0, 2, 1))
    untf = spectral_tetris(d, k * rho)
    return np.stack([untf[:, i::k] for i in range(k)])


class FusionFrame:
    """
    Tight fusion frame with Parseval weights and an optional seeded
    rotation. Instances are immutable; build them with
    :meth:`from_params` or :func:`build_fusion_frame`.

    :param FrameParams params: Frame parameters.
    """

    def __init__(self, params):
        self.params = params
        self.weight = params.weight
        self.blocks = _unrotated_blocks(params)
        self.rotation = (
            random_rotation(params.d, params.seed) if params.rotated else None
        )
        structure = self.weight * np.hstack(list(self.blocks))
        self.structure = sparse.csr_matrix(structure)
        if self.rotation is None:
            self.vectorized = structure
        else:
            self.vectorized = self.rotation @ structure
        for array in (self.blocks, self.vectorized):
            array.setflags(write=False)
        if self.rotation is not None:
            self.rotation.setflags(write=False)

    @classmethod
    def from_params(cls, params, rotate=True):
        """
        Rebuild a frame from its parameters. Deterministic: the same
        parameters always give bit-identical matrices on one platform.

        :param FrameParams params: Frame parameters.
        :param bool rotate: False drops the seeded rotation.
        """
        if not rotate and params.rotated:
            params = replace(params, rotated=False)
        return cls(params)

    @property
    def k(self):
        return self.params.k

    @property
    def rho(self):
        return self.params.rho

    @property
    def d(self):
        return self.params.d

    @property
    def redundancy(self):
        return self.params.redundancy

    @property
    def bases(self):
        """
        Weighted orthonormal bases ``P_i`` (``d x rho``), one per subspace.
        """
        rho = self.rho
        return [self.vectorized[:, i * rho : (i + 1) * rho] for i in range(self.k)]

    def __repr__(self):
        return (
            f"FusionFrame(k={self.k}, rho={self.rho}, d={self.d}, "
            f"seed={self.params.seed}, route={self.params.route!r})"
        )


def build_fusion_frame(d, target_redundancy, seed=0, rotate=True):
    """
    Build the frame whose redundancy ``k*rho/d`` is the largest value not
    exceeding ``target_redundancy``. Ties go to the larger ``rho``. When
    nothing beats the trivial frame, ``(1, d, d)`` is returned.

    :param int d: Ambient dimension.
    :param target_redundancy: Requested redundancy, at least 1.
    :param int seed: Rotation seed.
    :param bool rotate: Apply the seeded rotation.
    :rtype: FusionFrame
    """
    if d < 1:
        raise ConfigError(f"dimension must be positive, got {d}")
    target = as_fraction(target_redundancy)
    if target < 1:
        raise ConfigError(f"redundancy must be at least 1, got {target}")
    best_r, best_rho, best_k = Fraction(1), d, 1
    for rho in range(1, d // 2 + 1):
        k = math.floor(target * d / rho)
        while k >= 1:
            r = Fraction(k * rho, d)
            if r < best_r or (r == best_r and rho <= best_rho):
                break
            if construction_route(k, rho, d) is not None:
                best_r, best_rho, best_k = r, rho, k
                break
            k -= 1
    params = FrameParams(best_k, best_rho, d, seed, rotate)
    if best_r != target:
        LOG.debug("redundancy %s requested for d=%d, %s realized", target, d, best_r)
    LOG.info(
        "fusion frame k=%d rho=%d d=%d r=%s route=%s",
        best_k,
        best_rho,
        d,
        best_r,
        params.route,
    )
    return FusionFrame(params)


_DESCRIPTOR_KEYS = (
    "k",
    "rho",
    "d",
    "redundancy",
    "weight",
    "rotation_seed",
    "rotated",
    "prng_name",
    "construction_version",
)


def write_descriptor(params):
    """
    Text manifest of a frame: one ``key = value`` per line.

    :param FrameParams params: Frame parameters.
    :rtype: str
    """
    redundancy = params.redundancy
    values = {
        "k": params.k,
        "rho": params.rho,
        "d": params.d,
        "redundancy": f"{redundancy.numerator}/{redundancy.denominator}",
        "weight": repr(params.weight),
        "rotation_seed": params.seed,
        "rotated": "true" if params.rotated else "false",
        "prng_name": PRNG_NAME,
        "construction_version": CONSTRUCTION_VERSION,
    }
    return "".join(f"{key} = {values[key]}\n" for key in _DESCRIPTOR_KEYS)


def read_descriptor(text):
    """
    Parse a manifest produced by :func:`write_descriptor`.

    :param str text: Manifest text.
    :rtype: FrameParams
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"descriptor line {lineno} is not 'key = value'")
        values[key.strip()] = value.strip()
    missing = [key for key in ("k", "rho", "d", "rotation_seed") if key not in values]
    if missing:
        raise FormatError(f"descriptor is missing {', '.join(missing)}")
    if values.get("prng_name", PRNG_NAME) != PRNG_NAME:
        raise FormatError(f"descriptor uses unknown PRNG {values['prng_name']!r}")
    version = values.get("construction_version", str(CONSTRUCTION_VERSION))
    if version != str(CONSTRUCTION_VERSION):
        raise FormatError(
            f"descriptor construction version {version} is not {CONSTRUCTION_VERSION}"
        )
    try:
        k, rho, d, seed = (
            int(values[key]) for key in ("k", "rho", "d", "rotation_seed")
        )
    except ValueError as exc:
        raise FormatError(f"bad descriptor value: {exc}") from exc
    rotated = values.get("rotated", "true").lower() == "true"
    return FrameParams(k, rho, d, seed, rotated)
