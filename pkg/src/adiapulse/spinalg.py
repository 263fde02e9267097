"""Exact two-level algebra: Pauli operators, closed-form eigenprojectors,
operator norms and Bloch-vector conversions.

All operations are pure functions; matrices are plain ``numpy`` arrays of
dtype complex.  Effective fields are length-3 real arrays ``(bx, by, bz)``
in angular-frequency units (rad/s), and the Hamiltonian convention is
``H(b) = -(bx*sx + by*sy + bz*sz)/2`` so that the ``+b`` Bloch direction is
the low-energy eigenstate.
"""

from __future__ import annotations

import numpy as np

from .errors import AmbiguousAlignment, DegenerateField

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)
PAULI = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])

SPIN_UP = np.array([1.0, 0.0], dtype=complex)
SPIN_DOWN = np.array([0.0, 1.0], dtype=complex)

# Relative degeneracy threshold: |b| <= EPS_FIELD_REL * field_scale counts as
# a closed gap.  The scale is the caller's characteristic frequency.
EPS_FIELD_REL = 1e-9

# Both eigenstate overlaps within EPS_ALIGN of 1/2 counts as ambiguous.
EPS_ALIGN = 1e-6


def pauli_hamiltonian(b: np.ndarray) -> np.ndarray:
    """Two-level Hamiltonian ``-(b . sigma)/2`` for an effective field b.

    Eigenvalues are ``-|b|/2`` (state along +b) and ``+|b|/2`` (along -b).
    """
    bx, by, bz = (float(c) for c in b)
    return np.array(
        [
            [-0.5 * bz, -0.5 * (bx - 1j * by)],
            [-0.5 * (bx + 1j * by), 0.5 * bz],
        ],
        dtype=complex,
    )


def field_magnitude(b: np.ndarray) -> float:
    bx, by, bz = (float(c) for c in b)
    return float(np.sqrt(bx * bx + by * by + bz * bz))


def eigenprojector(b: np.ndarray, sign: int, *, field_scale: float = 1.0) -> np.ndarray:
    """Projector onto the eigenstate of ``pauli_hamiltonian(b)`` along ``sign*b``.

    ``P = (1 + sign * b.sigma/|b|)/2``; satisfies ``P^2 = P``, ``P^+ = P``,
    ``tr P = 1`` and ``H P = -sign*(|b|/2) P``.

    Raises
    ------
    DegenerateField
        If ``|b| <= EPS_FIELD_REL * field_scale`` (zero gap).
    """
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    n = field_magnitude(b)
    if n <= EPS_FIELD_REL * field_scale:
        raise DegenerateField(f"|b| = {n:.3e} below degeneracy threshold")
    bx, by, bz = (float(c) / n for c in b)
    s = float(sign)
    return np.array(
        [
            [0.5 * (1.0 + s * bz), 0.5 * s * (bx - 1j * by)],
            [0.5 * s * (bx + 1j * by), 0.5 * (1.0 - s * bz)],
        ],
        dtype=complex,
    )


def select_sign(
    b0: np.ndarray,
    psi0: np.ndarray,
    *,
    field_scale: float = 1.0,
    align_tol: float = EPS_ALIGN,
) -> tuple[int, float]:
    """Pick the eigenprojector sign whose eigenstate best matches ``psi0`` at t=0.

    Returns ``(sign, overlap)`` with ``overlap = <psi0|P_sign|psi0>``.

    Raises
    ------
    AmbiguousAlignment
        If both overlaps are within ``align_tol`` of 1/2, i.e. the initial
        state favors neither eigenstate by a usable margin.
    DegenerateField
        Propagated from the projector when the gap is closed.
    """
    p_plus = eigenprojector(b0, +1, field_scale=field_scale)
    o_plus = float(np.real(np.vdot(psi0, p_plus @ psi0)))
    o_minus = 1.0 - o_plus
    if abs(o_plus - 0.5) <= align_tol and abs(o_minus - 0.5) <= align_tol:
        raise AmbiguousAlignment(
            f"initial state overlaps both eigenstates equally ({o_plus:.6f} / {o_minus:.6f})"
        )
    if o_plus >= o_minus:
        return +1, o_plus
    return -1, o_minus


def operator_norm(a: np.ndarray) -> float:
    """Largest absolute eigenvalue of a Hermitian operator (spectral norm)."""
    a = np.asarray(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError("operator must be square")
    return float(np.max(np.abs(np.linalg.eigvalsh(a)))) if a.size else 0.0


def is_hermitian(a: np.ndarray, tol: float = 1e-12) -> bool:
    a = np.asarray(a)
    return bool(np.all(np.abs(a - a.conj().T) <= tol))


def bloch_vector(state_or_density: np.ndarray) -> np.ndarray:
    """Pauli expectation values ``(<sx>, <sy>, <sz>)``.

    Accepts a length-2 state vector or a 2x2 density matrix.  For a pure
    state this returns the unit Bloch vector (no spin-1/2 factor).
    """
    a = np.asarray(state_or_density, dtype=complex)
    if a.ndim == 1:
        c0, c1 = a
        w = np.conj(c0) * c1
        return np.array([2.0 * w.real, 2.0 * w.imag, abs(c0) ** 2 - abs(c1) ** 2])
    return np.array(
        [
            float(np.trace(a @ SIGMA_X).real),
            float(np.trace(a @ SIGMA_Y).real),
            float(np.trace(a @ SIGMA_Z).real),
        ]
    )


def state_from_bloch(theta: float, phi: float) -> np.ndarray:
    """Pure state at polar angle theta and azimuth phi on the Bloch sphere."""
    return np.array(
        [np.cos(theta / 2.0), np.exp(1j * phi) * np.sin(theta / 2.0)], dtype=complex
    )


def as_state(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Validate and return a normalized two-level state vector."""
    v = np.asarray(v, dtype=complex).reshape(-1)
    if v.shape != (2,):
        raise ValueError("state must have two amplitudes")
    n2 = float(np.real(np.vdot(v, v)))
    if abs(n2 - 1.0) > tol:
        raise ValueError(f"state norm^2 = {n2} deviates from 1 beyond {tol}")
    return v
