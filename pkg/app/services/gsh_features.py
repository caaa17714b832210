"""Cubic-symmetrized generalized spherical harmonics as texture descriptors.

Wigner-D convention: ZYZ Euler angles of the active rotation
``R = Rz(alpha) Ry(beta) Rz(gamma)`` and
``D^l_{mn} = exp(-i m alpha) d^l_{mn}(beta) exp(-i n gamma)``, which makes
``q -> D^l(q)`` a unitary representation: ``D(q1 * q2) = D(q1) D(q2)``.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from math import factorial, sqrt

import numpy as np

from app.exceptions import InternalConsistencyException, InvalidArgumentException
from app.services.odf_histogram import WeightedOrientationSet
from app.services.orientation_space import cubic_symmetry, normalize

logger = logging.getLogger(__name__)

L_MAX = 8
FEATURE_DEGREES = (4, 6, 8)
EXPECTED_MULTIPLICITY = {0: 1, 1: 0, 2: 0, 3: 0, 4: 1, 5: 0, 6: 1, 7: 0, 8: 1}
RANK_TOL = 1e-8
N_COEFFICIENTS = sum(l + 1 for l in FEATURE_DEGREES)


def quaternion_to_euler(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ZYZ Euler angles (alpha, beta, gamma); well defined at beta = 0 and pi."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    beta = 2.0 * np.arctan2(np.hypot(x, y), np.hypot(w, z))
    half_sum = np.arctan2(z, w)
    half_dif = np.arctan2(-x, y)
    return half_sum + half_dif, beta, half_sum - half_dif


def euler_to_quaternion(
    alpha: np.ndarray, beta: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, float), np.asarray(beta, float), np.asarray(gamma, float)
    )
    half_sum = 0.5 * (alpha + gamma)
    half_dif = 0.5 * (alpha - gamma)
    cb, sb = np.cos(0.5 * beta), np.sin(0.5 * beta)
    q = np.stack(
        [
            cb * np.cos(half_sum),
            -sb * np.sin(half_dif),
            sb * np.cos(half_dif),
            cb * np.sin(half_sum),
        ],
        axis=-1,
    )
    return normalize(q)


@lru_cache(maxsize=None)
def _small_d_terms(l: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Factorial-sum expansion of d^l(beta) as powers of cos(beta/2), sin(beta/2)."""
    size = 2 * l + 1
    coefficients, cos_powers, sin_powers, targets = [], [], [], []
    for row, mp in enumerate(range(-l, l + 1)):
        for col, m in enumerate(range(-l, l + 1)):
            norm = sqrt(
                factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m)
            )
            for s in range(max(0, m - mp), min(l + m, l - mp) + 1):
                denom = (
                    factorial(l + m - s)
                    * factorial(s)
                    * factorial(mp - m + s)
                    * factorial(l - mp - s)
                )
                coefficients.append((-1) ** (mp - m + s) * norm / denom)
                cos_powers.append(2 * l + m - mp - 2 * s)
                sin_powers.append(mp - m + 2 * s)
                targets.append(row * size + col)

    scatter = np.zeros((len(targets), size * size))
    scatter[np.arange(len(targets)), targets] = coefficients
    return (
        np.array(cos_powers),
        np.array(sin_powers),
        scatter,
        np.arange(-l, l + 1),
    )


def wigner_small_d(l: int, beta: np.ndarray) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    cos_powers, sin_powers, scatter, _ = _small_d_terms(l)
    c = np.cos(0.5 * beta)[:, None]
    s = np.sin(0.5 * beta)[:, None]
    terms = c**cos_powers * s**sin_powers
    size = 2 * l + 1
    return (terms @ scatter).reshape(len(beta), size, size)


def wigner_D(l: int, q: np.ndarray) -> np.ndarray:
    """D^l matrices of the rotations q, shape (n, 2l+1, 2l+1)."""
    alpha, beta, gamma = quaternion_to_euler(q)
    orders = np.arange(-l, l + 1)
    left = np.exp(-1j * orders[None, :] * alpha[:, None])
    right = np.exp(-1j * orders[None, :] * gamma[:, None])
    return left[:, :, None] * wigner_small_d(l, beta) * right[:, None, :]


def _conjugation_map(u: np.ndarray, l: int) -> np.ndarray:
    """(Lambda u*)_n = (-1)^n conj(u_{-n})."""
    signs = (-1.0) ** np.arange(-l, l + 1)
    return signs * np.conj(u[::-1])


def _fix_phase(u: np.ndarray, l: int) -> np.ndarray:
    phase = np.angle(np.vdot(u, _conjugation_map(u, l)))
    u = u * np.exp(0.5j * phase)
    lead = int(np.argmax(np.abs(u)))
    if u[lead].real < 0:
        u = -u
    if not np.allclose(_conjugation_map(u, l), u, atol=1e-8):
        raise InternalConsistencyException(
            "Invariant vector violates the realness relation", degree=l
        )
    return u


@dataclass(frozen=True)
class GSHBasis:
    l_max: int
    multiplicities: dict[int, int]
    vectors: dict[int, np.ndarray]

    def evaluate(self, l: int, q: np.ndarray) -> np.ndarray:
        """Basis values T_l^mu(q) for mu = -l..l, shape (n, 2l+1)."""
        if l not in self.vectors:
            raise InvalidArgumentException("No invariant harmonics for degree", degree=l)
        return sqrt(2 * l + 1) * (wigner_D(l, q) @ self.vectors[l])


def build_cubic_basis(l_max: int = L_MAX) -> GSHBasis:
    if l_max != L_MAX:
        raise InvalidArgumentException("Only l_max = 8 is supported", l_max=l_max)

    symmetry = cubic_symmetry()
    multiplicities: dict[int, int] = {}
    vectors: dict[int, np.ndarray] = {}
    for l in range(l_max + 1):
        projector = wigner_D(l, symmetry).mean(axis=0)
        left, singular, _ = np.linalg.svd(projector)
        rank = int(np.sum(singular > RANK_TOL))
        if rank != EXPECTED_MULTIPLICITY[l]:
            raise InternalConsistencyException(
                "Unexpected number of cubic invariant harmonics",
                degree=l,
                rank=rank,
                expected=EXPECTED_MULTIPLICITY[l],
            )
        multiplicities[l] = rank
        if rank == 1:
            u = _fix_phase(left[:, 0], l)
            u.setflags(write=False)
            vectors[l] = u

    logger.debug(
        "Cubic harmonic basis built multiplicities=%s",
        multiplicities,
        extra={"multiplicities": multiplicities},
    )
    return GSHBasis(l_max, multiplicities, vectors)


@lru_cache(maxsize=1)
def get_cubic_basis() -> GSHBasis:
    return build_cubic_basis(L_MAX)


@dataclass(frozen=True, eq=False)
class GSHFeatureVector:
    coefficients: np.ndarray

    @property
    def real(self) -> np.ndarray:
        """Interleaved (re, im) encoding, 42 reals."""
        return np.column_stack(
            [self.coefficients.real, self.coefficients.imag]
        ).ravel()


def feature_labels() -> list[str]:
    labels = []
    for l in FEATURE_DEGREES:
        for nu in range(l + 1):
            labels.extend([f"c{l}_{nu}_re", f"c{l}_{nu}_im"])
    return labels


def compute_full_coefficients(
    basis: GSHBasis, texture: WeightedOrientationSet
) -> dict[int, np.ndarray]:
    """All coefficients C_l^nu, nu = -l..l, for every degree with an invariant."""
    fractions = texture.fractions
    return {
        l: fractions @ np.conj(basis.evaluate(l, texture.orientations))
        for l in basis.vectors
    }


def compute_features(
    basis: GSHBasis, texture: WeightedOrientationSet
) -> GSHFeatureVector:
    full = compute_full_coefficients(basis, texture)
    coefficients = np.concatenate([full[l][l:] for l in FEATURE_DEGREES])
    return GSHFeatureVector(coefficients)
