"""Block-matrix propagation of time-ordered integrals.

The propagator of the block upper-triangular generator

    L(b, t) = -i * [[H(b), iP(b),  0    ],
                    [0,    H(b),  dH(t)],
                    [0,    0,     H(b) ]]

carries, besides the bare propagator U(t) on its diagonal, the first-order
interaction-frame integrals of the eigenprojector P and of a perturbation
dH in its upper blocks -- exactly the quantities needed by the adiabaticity
and sensitivity metrics.  Integrating the blocks as one ODE with an adaptive
Runge-Kutta method gives all of them (and, through the analytic inverse of
the block triangle, their functional derivatives) in a single pass.

Reduced generators are used when possible: ``[[H, iP], [0, H]]`` when no
perturbation metric is requested, ``[[H, dH], [0, H]]`` for a perturbation
without the projector (also on the doubled space of a spin pair), and plain
``H`` when only the propagator is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DegenerateField, SolverFailure
from .spinalg import (
    EPS_FIELD_REL,
    IDENTITY_2,
    PAULI,
    SIGMA_X,
    SIGMA_Z,
    eigenprojector,
    operator_norm,
    pauli_hamiltonian,
)

# Block layouts: which interaction-frame integrals ride along with U.
LAYOUT_PLAIN = "u"            # [U]
LAYOUT_PROJECTOR = "up"       # [U, projector term]
LAYOUT_PERTURBATION = "uq"    # [U, perturbation term]
LAYOUT_FULL = "upq"           # [U, projector, perturbation, mixed]

_N_BLOCKS = {LAYOUT_PLAIN: 1, LAYOUT_PROJECTOR: 2, LAYOUT_PERTURBATION: 2, LAYOUT_FULL: 4}
_CHAIN_LEN = {LAYOUT_PLAIN: 1, LAYOUT_PROJECTOR: 2, LAYOUT_PERTURBATION: 2, LAYOUT_FULL: 3}


# ---------------------------------------------------------------------------
# Perturbation descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """A perturbing Hamiltonian dH(b, t) entering the generator's last block.

    ``matrix(b, t)`` returns the (dim x dim) Hermitian matrix.  When the
    matrix depends on the field, ``matrix_db(b, t, axis)`` must return its
    partial derivative with respect to b_axis.  ``op_norm_const`` short-cuts
    the norm integral for time-independent norms; otherwise ``op_norm`` (and
    ``op_norm_db`` for gradients) are integrated on the quadrature grid.
    ``pair=True`` marks operators acting on two copies of the spin, in which
    case the surrounding propagator blocks live on the doubled space.
    """

    label: str
    matrix: Callable[[np.ndarray, float], np.ndarray]
    dim: int = 2
    pair: bool = False
    constant: np.ndarray | None = None
    matrix_db: Callable[[np.ndarray, float, int], np.ndarray] | None = None
    op_norm_const: float | None = None
    op_norm: Callable[[np.ndarray, float], float] | None = None
    op_norm_db: Callable[[np.ndarray, float, int], float] | None = None


def sigma_z_perturbation() -> Perturbation:
    """Static sigma_z perturbation (Larmor inhomogeneity proxy)."""
    return Perturbation(
        label="sigma_z",
        matrix=lambda b, t: SIGMA_Z,
        constant=SIGMA_Z,
        op_norm_const=1.0,
    )


def dipolar_pair_perturbation() -> Perturbation:
    """Secular like-spin dipolar coupling ``2 sz.sz - sx.sx - sy.sy`` on a pair."""
    mat = (
        2.0 * np.kron(SIGMA_Z, SIGMA_Z)
        - np.kron(SIGMA_X, SIGMA_X)
        - np.kron(PAULI[1], PAULI[1])
    )
    return Perturbation(
        label="dipolar_pair",
        matrix=lambda b, t: mat,
        dim=4,
        pair=True,
        constant=mat,
        op_norm_const=operator_norm(mat),
    )


def custom_matrix_perturbation(matrix: np.ndarray, *, label: str = "custom", pair: bool = False) -> Perturbation:
    """Constant user-supplied Hermitian perturbation."""
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.shape not in ((2, 2), (4, 4)):
        raise ValueError("custom perturbation must be 2x2 or 4x4")
    if not np.allclose(matrix, matrix.conj().T, atol=1e-12):
        raise ValueError("custom perturbation must be Hermitian")
    if pair and matrix.shape != (4, 4):
        raise ValueError("pair perturbations must be 4x4")
    return Perturbation(
        label=label,
        matrix=lambda b, t: matrix,
        dim=matrix.shape[0],
        pair=pair,
        constant=matrix,
        op_norm_const=operator_norm(matrix),
    )


def rabi_proportional_perturbation() -> Perturbation:
    """Drive-amplitude noise proxy ``dH = bx(t) * sigma_x``."""
    return Perturbation(
        label="rabi_proportional",
        matrix=lambda b, t: float(b[0]) * SIGMA_X,
        matrix_db=lambda b, t, axis: SIGMA_X if axis == 0 else np.zeros((2, 2), dtype=complex),
        op_norm=lambda b, t: abs(float(b[0])),
        op_norm_db=lambda b, t, axis: (math.copysign(1.0, float(b[0])) if axis == 0 else 0.0),
    )


# ---------------------------------------------------------------------------
# Generator assembly
# ---------------------------------------------------------------------------

def assemble_generator(
    b: np.ndarray,
    t: float,
    sign: int,
    perturbation: Perturbation | None,
    *,
    field_scale: float = 1.0,
) -> np.ndarray:
    """Full 6x6 generator ``-i [[H, iP, 0], [0, H, dH], [0, 0, H]]``.

    The (1,2) block equals P(b) (since ``-i * iP = P``) and the (2,3) block
    equals ``-i dH(t)``; strictly-lower blocks are zero.
    """
    h = pauli_hamiltonian(b)
    p = eigenprojector(b, sign, field_scale=field_scale)
    gen = np.zeros((6, 6), dtype=complex)
    for k in range(3):
        gen[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = -1j * h
    gen[0:2, 2:4] = p
    if perturbation is not None:
        if perturbation.pair:
            raise ValueError("pair perturbations do not fit the single-spin 6x6 generator")
        gen[2:4, 4:6] = -1j * perturbation.matrix(np.asarray(b, dtype=float), t)
    return gen


def _pair_lift(h: np.ndarray) -> np.ndarray:
    return np.kron(h, IDENTITY_2) + np.kron(IDENTITY_2, h)


def _dh_dbaxis(dim: int, pair: bool) -> np.ndarray:
    """Constant dH/db_axis blocks, stacked over axis: shape (3, dim, dim)."""
    if pair:
        return np.stack([-0.5 * _pair_lift(s) for s in PAULI])
    if dim != 2:
        raise ValueError("only single-spin or pair Hamiltonians are supported")
    return np.stack([-0.5 * s for s in PAULI])


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

@dataclass
class DysonBlocks:
    """Upper-triangle blocks of the block propagator at one time.

    ``u`` is the bare propagator; ``projector_term`` and
    ``perturbation_term`` are the first-order interaction-frame integrals of
    iP and dH; ``mixed_term`` is their nested second-order integral.  Absent
    blocks (reduced layouts) are None.
    """

    u: np.ndarray
    projector_term: np.ndarray | None = None
    perturbation_term: np.ndarray | None = None
    mixed_term: np.ndarray | None = None


@dataclass
class VanLoanTrajectory:
    """Dense-output solution of the block ODE on [0, T]."""

    field: object
    x: np.ndarray
    duration: float
    sign: int
    perturbation: Perturbation | None
    layout: str
    dim: int
    rtol: float
    atol: float
    field_scale: float
    gradient_nodes: int
    quadrature: str
    method: str
    _sol: object = dc_field(repr=False, default=None)
    _terminal: np.ndarray | None = dc_field(repr=False, default=None)

    @property
    def n_blocks(self) -> int:
        return _N_BLOCKS[self.layout]

    @property
    def step_times(self) -> np.ndarray:
        return self._sol.ts

    def blocks_at(self, t: float) -> np.ndarray:
        """Stacked state blocks at time t, shape (n_blocks, dim, dim)."""
        return np.asarray(self._sol(float(t))).reshape(self.n_blocks, self.dim, self.dim)

    def blocks_many(self, ts: np.ndarray) -> np.ndarray:
        """Stacked state blocks at many times, shape (K, n_blocks, dim, dim)."""
        ts = np.asarray(ts, dtype=float)
        raw = np.asarray(self._sol(ts))  # (state, K)
        return raw.T.reshape(ts.size, self.n_blocks, self.dim, self.dim)

    def terminal_blocks(self) -> np.ndarray:
        if self._terminal is None:
            self._terminal = self.blocks_at(self.duration)
        return self._terminal

    def unitarity_defect(self, t: float | None = None) -> float:
        u = self.blocks_at(self.duration if t is None else t)[0]
        return float(np.linalg.norm(u.conj().T @ u - np.eye(self.dim)))


def propagate(
    field,
    x,
    *,
    duration: float | None = None,
    sign: int = +1,
    perturbation: Perturbation | None = None,
    include_projector: bool = True,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    method: str = "DOP853",
    field_scale: float | None = None,
    gradient_nodes: int = 256,
    quadrature: str = "gauss",
) -> VanLoanTrajectory:
    """Integrate the block propagator of a field map over [0, T].

    ``field`` must provide ``field(x, t) -> (3,)``; for gradients it must
    also provide ``jacobian_many(x, ts) -> (K, 3, N)``.  The layout of the
    integrated blocks follows from ``include_projector`` and
    ``perturbation``; pair perturbations exclude the projector (their metric
    is evaluated on a separate doubled-space trajectory).

    Raises
    ------
    DegenerateField
        If the gap closes (|b| below threshold) at any solver evaluation,
        reported with the offending time.  Only checked when the projector
        block is integrated, where the eigenbasis is actually needed.
    SolverFailure
        If the adaptive integrator gives up.
    """
    x = np.asarray(x, dtype=float)
    t_end = float(duration if duration is not None else field.duration)
    if t_end <= 0:
        raise ValueError("duration must be positive")
    if field_scale is None:
        field_scale = getattr(field, "field_scale", None)
    if field_scale is None:
        probes = [np.linalg.norm(field.field(x, f * t_end)) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
        field_scale = max(max(probes), 1e-300)
    field_scale = float(field_scale)
    eps = EPS_FIELD_REL * field_scale

    if perturbation is not None and perturbation.pair and include_projector:
        raise ValueError("projector and pair perturbation cannot share one generator")

    pair = bool(perturbation is not None and perturbation.pair)
    dim = 4 if pair else 2
    if perturbation is None:
        layout = LAYOUT_PROJECTOR if include_projector else LAYOUT_PLAIN
    elif include_projector:
        layout = LAYOUT_FULL
    else:
        layout = LAYOUT_PERTURBATION
    nb = _N_BLOCKS[layout]

    s = float(sign)
    field_fn = field.field
    pert_const = perturbation.constant if perturbation is not None else None
    pert_fn = perturbation.matrix if perturbation is not None else None

    def _hamiltonian(b):
        bx, by, bz = b
        return np.array(
            [[-0.5 * bz, -0.5 * (bx - 1j * by)], [-0.5 * (bx + 1j * by), 0.5 * bz]]
        )

    def _projector(b, t):
        bx, by, bz = b
        n = math.sqrt(bx * bx + by * by + bz * bz)
        if n <= eps:
            raise DegenerateField(f"|b| = {n:.3e} at t = {t:.6e}: gap closed", t=t)
        c = s / (2.0 * n)
        return np.array(
            [[0.5 + c * bz, c * (bx - 1j * by)], [c * (bx + 1j * by), 0.5 - c * bz]]
        )

    if layout == LAYOUT_PLAIN:

        def rhs(t, y):
            h = _hamiltonian(field_fn(x, t))
            if pair:
                h = _pair_lift(h)
            return (-1j * (h @ y.reshape(dim, dim))).reshape(-1)

    elif layout == LAYOUT_PROJECTOR:

        def rhs(t, y):
            b = field_fn(x, t)
            yv = y.reshape(2, 2, 2)
            out = -1j * (_hamiltonian(b) @ yv)
            out[1] += _projector(b, t) @ yv[0]
            return out.reshape(-1)

    elif layout == LAYOUT_PERTURBATION:

        def rhs(t, y):
            b = field_fn(x, t)
            h = _hamiltonian(b)
            if pair:
                h = _pair_lift(h)
            yv = y.reshape(2, dim, dim)
            out = -1j * (h @ yv)
            dh = pert_const if pert_const is not None else pert_fn(b, t)
            out[1] += -1j * (dh @ yv[0])
            return out.reshape(-1)

    else:  # LAYOUT_FULL

        def rhs(t, y):
            b = field_fn(x, t)
            yv = y.reshape(4, 2, 2)
            out = -1j * (_hamiltonian(b) @ yv)
            p = _projector(b, t)
            out[1] += p @ yv[0]
            out[3] += p @ yv[2]
            dh = pert_const if pert_const is not None else pert_fn(b, t)
            out[2] += -1j * (dh @ yv[0])
            return out.reshape(-1)

    y0 = np.zeros((nb, dim, dim), dtype=complex)
    y0[0] = np.eye(dim)
    try:
        res = solve_ivp(
            rhs,
            (0.0, t_end),
            y0.reshape(-1),
            method=method,
            rtol=rtol,
            atol=atol,
            dense_output=True,
        )
    except DegenerateField:
        raise
    if not res.success:
        raise SolverFailure(f"integration failed: {res.message}")

    return VanLoanTrajectory(
        field=field,
        x=x,
        duration=t_end,
        sign=sign,
        perturbation=perturbation,
        layout=layout,
        dim=dim,
        rtol=rtol,
        atol=atol,
        field_scale=field_scale,
        gradient_nodes=gradient_nodes,
        quadrature=quadrature,
        method=method,
        _sol=res.sol,
    )


def propagate_unitary(field, x, **kwargs) -> VanLoanTrajectory:
    """Propagator-only integration (no auxiliary blocks)."""
    kwargs.setdefault("include_projector", False)
    return propagate(field, x, perturbation=None, **kwargs)


def extract_blocks(traj: VanLoanTrajectory, t: float) -> DysonBlocks:
    """Named upper-triangle blocks of the block propagator at time t."""
    blocks = traj.blocks_at(t)
    if traj.layout == LAYOUT_PLAIN:
        return DysonBlocks(u=blocks[0])
    if traj.layout == LAYOUT_PROJECTOR:
        return DysonBlocks(u=blocks[0], projector_term=blocks[1])
    if traj.layout == LAYOUT_PERTURBATION:
        return DysonBlocks(u=blocks[0], perturbation_term=blocks[1])
    return DysonBlocks(
        u=blocks[0],
        projector_term=blocks[1],
        perturbation_term=blocks[2],
        mixed_term=blocks[3],
    )


# ---------------------------------------------------------------------------
# Assembled propagator matrices and analytic inverses
# ---------------------------------------------------------------------------

def _assemble_many(layout: str, dim: int, blocks: np.ndarray) -> np.ndarray:
    """Full (K, D, D) propagator matrices from stacked blocks (K, nb, d, d)."""
    k = blocks.shape[0]
    n_chain = _CHAIN_LEN[layout]
    big = n_chain * dim
    v = np.zeros((k, big, big), dtype=complex)
    for i in range(n_chain):
        v[:, i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = blocks[:, 0]
    if layout in (LAYOUT_PROJECTOR, LAYOUT_PERTURBATION):
        v[:, 0:dim, dim : 2 * dim] = blocks[:, 1]
    elif layout == LAYOUT_FULL:
        v[:, 0:dim, dim : 2 * dim] = blocks[:, 1]
        v[:, dim : 2 * dim, 2 * dim : 3 * dim] = blocks[:, 2]
        v[:, 0:dim, 2 * dim : 3 * dim] = blocks[:, 3]
    return v


def _inverse_many(layout: str, dim: int, blocks: np.ndarray) -> np.ndarray:
    """Analytic inverse of the block triangle (no numeric inversion).

    Diagonal blocks invert as U^+, off-diagonals follow by back-substitution:
    for [[U, A], [0, U]] the (1,2) block of the inverse is ``-U^+ A U^+``;
    the three-block chain adds ``-U^+ C U^+`` and
    ``U^+ A U^+ C U^+ - U^+ B U^+``.
    """
    k = blocks.shape[0]
    u = blocks[:, 0]
    ui = np.conj(np.transpose(u, (0, 2, 1)))
    n_chain = _CHAIN_LEN[layout]
    big = n_chain * dim
    v = np.zeros((k, big, big), dtype=complex)
    for i in range(n_chain):
        v[:, i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = ui
    if layout in (LAYOUT_PROJECTOR, LAYOUT_PERTURBATION):
        v[:, 0:dim, dim : 2 * dim] = -ui @ blocks[:, 1] @ ui
    elif layout == LAYOUT_FULL:
        x12 = -ui @ blocks[:, 1] @ ui
        x23 = -ui @ blocks[:, 2] @ ui
        v[:, 0:dim, dim : 2 * dim] = x12
        v[:, dim : 2 * dim, 2 * dim : 3 * dim] = x23
        v[:, 0:dim, 2 * dim : 3 * dim] = -x12 @ blocks[:, 2] @ ui - ui @ blocks[:, 3] @ ui
    return v


def _generator_partials_many(
    traj: VanLoanTrajectory, bs: np.ndarray, ts: np.ndarray
) -> np.ndarray:
    """d(generator)/db_axis at many times, shape (3, K, D, D)."""
    layout, dim, sign = traj.layout, traj.dim, traj.sign
    pert = traj.perturbation
    k = bs.shape[0]
    n_chain = _CHAIN_LEN[layout]
    big = n_chain * dim
    dh_const = _dh_dbaxis(dim, bool(pert is not None and pert.pair))  # (3, dim, dim)

    out = np.zeros((3, k, big, big), dtype=complex)
    for axis in range(3):
        for i in range(n_chain):
            out[axis, :, i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = (
                -1j * dh_const[axis]
            )

    if layout in (LAYOUT_PROJECTOR, LAYOUT_FULL):
        norms = np.linalg.norm(bs, axis=1)
        eps = EPS_FIELD_REL * traj.field_scale
        if np.any(norms <= eps):
            idx = int(np.argmin(norms))
            raise DegenerateField(
                f"|b| = {norms[idx]:.3e} at quadrature node t = {ts[idx]:.6e}", t=float(ts[idx])
            )
        bsig = np.einsum("ka,aij->kij", bs, PAULI)
        for axis in range(3):
            dp = (sign / (2.0 * norms))[:, None, None] * (
                PAULI[axis][None, :, :]
                - (bs[:, axis] / norms**2)[:, None, None] * bsig
            )
            out[axis, :, 0:dim, dim : 2 * dim] = dp

    if pert is not None and pert.matrix_db is not None:
        row = (dim, 2 * dim) if layout == LAYOUT_FULL else (0, dim)
        col = (2 * dim, 3 * dim) if layout == LAYOUT_FULL else (dim, 2 * dim)
        for axis in range(3):
            for j in range(k):
                out[axis, j, row[0] : row[1], col[0] : col[1]] = -1j * pert.matrix_db(
                    bs[j], float(ts[j]), axis
                )
    return out


def generator_partial(
    b: np.ndarray,
    t: float,
    sign: int,
    perturbation: Perturbation | None,
    axis: int,
    *,
    field_scale: float = 1.0,
) -> np.ndarray:
    """Partial derivative of the full 6x6 generator with respect to b_axis.

    Diagonal blocks carry ``-i * dH/db_axis = i * sigma_axis / 2``; the (1,2)
    block carries ``dP/db_axis = sign*(sigma_axis - b_axis (b.sigma)/|b|^2)/(2|b|)``;
    the (2,3) block carries ``-i * d(dH)/db_axis`` when the perturbation
    depends on the field (zero otherwise).
    """
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0 (x), 1 (y) or 2 (z)")
    b = np.asarray(b, dtype=float)
    n = float(np.linalg.norm(b))
    if n <= EPS_FIELD_REL * field_scale:
        raise DegenerateField(f"|b| = {n:.3e}: gap closed", t=t)
    gen = np.zeros((6, 6), dtype=complex)
    dh = -0.5 * PAULI[axis]
    for k in range(3):
        gen[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = -1j * dh
    bsig = np.einsum("a,aij->ij", b, PAULI)
    gen[0:2, 2:4] = (sign / (2.0 * n)) * (PAULI[axis] - (b[axis] / n**2) * bsig)
    if perturbation is not None and perturbation.matrix_db is not None:
        gen[2:4, 4:6] = -1j * perturbation.matrix_db(b, t, axis)
    return gen


def functional_derivative(traj: VanLoanTrajectory, t: float, axis: int) -> np.ndarray:
    """Response of the terminal propagator to a field kick at time t.

    Evaluates ``V_T V_t^{-1} (dL/db_axis)(t) V_t`` with the inverse taken
    analytically from the block-triangular structure.
    """
    t = float(t)
    blocks_t = traj.blocks_at(t)[None, ...]
    v_t = _assemble_many(traj.layout, traj.dim, blocks_t)[0]
    v_t_inv = _inverse_many(traj.layout, traj.dim, blocks_t)[0]
    v_end = _assemble_many(traj.layout, traj.dim, traj.terminal_blocks()[None, ...])[0]
    b = traj.field.field(traj.x, t)
    d_gen = _generator_partials_many(traj, np.asarray(b, dtype=float)[None, :], np.array([t]))
    return v_end @ v_t_inv @ d_gen[axis, 0] @ v_t


def quadrature_nodes(kind: str, n: int, duration: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for integrals over [0, duration].

    ``trapezoid``: uniform grid including endpoints; ``gauss``:
    Gauss-Legendre.
    """
    if n < 2:
        raise ValueError("need at least 2 quadrature nodes")
    if kind == "trapezoid":
        nodes = np.linspace(0.0, duration, n)
        h = duration / (n - 1)
        weights = np.full(n, h)
        weights[0] = weights[-1] = h / 2.0
        return nodes, weights
    if kind == "gauss":
        xs, ws = np.polynomial.legendre.leggauss(n)
        return 0.5 * duration * (xs + 1.0), 0.5 * duration * ws
    raise ValueError(f"unknown quadrature kind {kind!r}")


def parameter_gradient(
    traj: VanLoanTrajectory,
    jacobian: np.ndarray | None = None,
    quadrature: tuple[str, int] | None = None,
) -> np.ndarray:
    """Gradient of the terminal block propagator with respect to the controls.

    Approximates ``dV_T/dx_n = int_0^T sum_axis (dV_T/db_axis)(t) *
    (db_axis/dx_n)(t) dt`` on the quadrature grid; returns an array of shape
    (N, D, D).  ``jacobian`` may pre-supply the field Jacobian evaluated on
    the nodes (shape (K, 3, N)); by default it comes from
    ``traj.field.jacobian_many``.
    """
    kind, n_nodes = quadrature if quadrature is not None else (traj.quadrature, traj.gradient_nodes)
    nodes, weights = quadrature_nodes(kind, n_nodes, traj.duration)

    blocks = traj.blocks_many(nodes)
    v = _assemble_many(traj.layout, traj.dim, blocks)
    v_inv = _inverse_many(traj.layout, traj.dim, blocks)
    v_end = _assemble_many(traj.layout, traj.dim, traj.terminal_blocks()[None, ...])[0]

    bs = traj.field.field_many(traj.x, nodes)
    if jacobian is None:
        jacobian = traj.field.jacobian_many(traj.x, nodes)
    jacobian = np.asarray(jacobian, dtype=float)
    if jacobian.shape[0] != nodes.size or jacobian.shape[1] != 3:
        raise ValueError("jacobian must have shape (n_nodes, 3, N)")

    d_gen = _generator_partials_many(traj, bs, nodes)  # (3, K, D, D)
    kicked = np.einsum("ij,akjl,klm->akim", v_end, v_inv @ d_gen, v)
    return np.einsum("akij,kan,k->nij", kicked, jacobian, weights)


def norm_integral_and_gradient(
    traj: VanLoanTrajectory,
    quadrature: tuple[str, int] | None = None,
) -> tuple[float, np.ndarray | None]:
    """Integral of the perturbation operator norm over [0, T] and its gradient.

    For constant-norm perturbations the analytic value ``T * norm`` is
    returned with a zero gradient awaiting no quadrature.  Otherwise the norm
    (and, if available, its field derivative chained with the Jacobian) is
    integrated on the gradient grid.
    """
    pert = traj.perturbation
    if pert is None:
        raise ValueError("trajectory has no perturbation")
    if pert.op_norm_const is not None:
        return traj.duration * pert.op_norm_const, None
    if pert.op_norm is None:
        raise ValueError(f"perturbation {pert.label!r} supplies no operator norm")
    kind, n_nodes = quadrature if quadrature is not None else (traj.quadrature, traj.gradient_nodes)
    nodes, weights = quadrature_nodes(kind, n_nodes, traj.duration)
    bs = traj.field.field_many(traj.x, nodes)
    norms = np.array([pert.op_norm(bs[j], float(nodes[j])) for j in range(nodes.size)])
    total = float(np.dot(weights, norms))
    if pert.op_norm_db is None:
        return total, None
    jac = traj.field.jacobian_many(traj.x, nodes)
    dnorm = np.array(
        [[pert.op_norm_db(bs[j], float(nodes[j]), a) for a in range(3)] for j in range(nodes.size)]
    )  # (K, 3)
    grad = np.einsum("k,ka,kan->n", weights, dnorm, jac)
    return total, grad


def dump_trajectory_json(traj: VanLoanTrajectory, path: str | Path, times: np.ndarray | None = None) -> None:
    """Write node times and flattened blocks (row-major, re/im interleaved)."""
    ts = np.asarray(times, dtype=float) if times is not None else traj.step_times
    blocks = traj.blocks_many(ts)
    names = {
        LAYOUT_PLAIN: ["u"],
        LAYOUT_PROJECTOR: ["u", "projector_term"],
        LAYOUT_PERTURBATION: ["u", "perturbation_term"],
        LAYOUT_FULL: ["u", "projector_term", "perturbation_term", "mixed_term"],
    }[traj.layout]
    payload = {
        "duration": traj.duration,
        "dim": traj.dim,
        "layout": traj.layout,
        "sign": traj.sign,
        "rtol": traj.rtol,
        "atol": traj.atol,
        "times": ts.tolist(),
        "blocks": {
            name: [
                np.stack([blk.real, blk.imag], axis=-1).reshape(-1).tolist()
                for blk in blocks[:, i]
            ]
            for i, name in enumerate(names)
        },
    }
    Path(path).write_text(json.dumps(payload))
