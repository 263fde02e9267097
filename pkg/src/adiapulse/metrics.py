"""Control metrics, their analytic gradients and the weighted ensemble target.

Three scalar scores on [0, 1] grade a candidate parameter vector x:

* final-state fidelity  |<psi_T| U(x,T) |psi_0>|^2,
* adiabaticity          (1/T) <psi_0| U(T)^+ (projector term) |psi_0>, the
  time-averaged population in the tracked instantaneous eigenstate,
* perturbation immunity 1 - ||(perturbation term) |psi_0>||^2 / norm^2 with
  norm = integral of the perturbation's operator norm.

Each optimization-set member evaluates a weighted combination; the ensemble
target is the member-weighted sum.  Gradients chain the metric partials
through the block-propagator parameter gradient, so one trajectory (plus one
doubled-space trajectory for pair perturbations) per member yields the whole
gradient.  Derivations of the metric partials live in docs/derivations.md.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AmbiguousAlignment,
    DegenerateField,
    MemberEvaluationError,
    NonRealMetric,
    ZeroPerturbation,
)
from .spinalg import EPS_FIELD_REL, SPIN_DOWN, SPIN_UP, as_state, bloch_vector, select_sign
from . import vanloan
from .vanloan import (
    DysonBlocks,
    Perturbation,
    VanLoanTrajectory,
    extract_blocks,
    norm_integral_and_gradient,
    parameter_gradient,
    propagate,
)

_UNIT_SLACK = 1e-8


def _clamp_unit(value: float, name: str) -> float:
    if value > 1.0 + _UNIT_SLACK or value < -_UNIT_SLACK:
        warnings.warn(
            f"{name} = {value!r} outside [0, 1] beyond solver slack; clamping",
            RuntimeWarning,
            stacklevel=3,
        )
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True)
class MetricWeights:
    """Convex weights of the combined single-member target."""

    p0: float
    p_ad: float
    p_per: float = 0.0

    def __post_init__(self):
        for name, p in (("p0", self.p0), ("p_ad", self.p_ad), ("p_per", self.p_per)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} = {p} outside [0, 1]")
        if abs(self.p0 + self.p_ad + self.p_per - 1.0) > 1e-12:
            raise ValueError("metric weights must sum to 1")


@dataclass
class EnsembleMember:
    """One member of the optimization set.

    The field map is already specialized to the member (its Rabi scale,
    Larmor offset, ...).  ``sign`` fixes which field eigenstate is tracked;
    None selects it from the initial state's overlap at t = 0 on every
    evaluation (ties resolve to +1).
    """

    label: str
    field: object
    weights: MetricWeights
    weight: float
    psi0: np.ndarray = dc_field(default_factory=lambda: SPIN_UP.copy())
    psi_target: np.ndarray = dc_field(default_factory=lambda: SPIN_DOWN.copy())
    perturbation: Perturbation | None = None
    sign: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"member weight {self.weight} outside [0, 1]")
        self.psi0 = as_state(self.psi0)
        self.psi_target = as_state(self.psi_target)
        if self.weights.p_per > 0.0 and self.perturbation is None:
            raise ValueError(f"member {self.label!r}: p_per > 0 requires a perturbation")


@dataclass
class MemberMetrics:
    """Metric values of one member (None where not applicable)."""

    phi0: float
    phi_ad: float | None
    phi_per: float | None
    phi: float
    alpha_max: float | None = None

    def as_dict(self) -> dict:
        return {
            "phi0": self.phi0,
            "phi_ad": self.phi_ad,
            "phi_per": self.phi_per,
            "phi": self.phi,
            "alpha_max_deg": None if self.alpha_max is None else np.degrees(self.alpha_max),
        }


@dataclass
class MetricReport:
    """Per-member metrics keyed by label, plus the weighted total."""

    members: dict[str, MemberMetrics]
    total: float

    def to_json(self, indent: int | None = 2) -> str:
        payload = {
            "total": self.total,
            "members": {label: m.as_dict() for label, m in self.members.items()},
        }
        return json.dumps(payload, indent=indent)


def fidelity_metric(u: np.ndarray, psi0: np.ndarray, psi_target: np.ndarray) -> float:
    """Final-state overlap |<psi_target|U|psi0>|^2."""
    z = np.vdot(psi_target, u @ psi0)
    return _clamp_unit(float(np.abs(z) ** 2), "fidelity")


def adiabaticity_metric(
    blocks: DysonBlocks,
    psi0: np.ndarray,
    duration: float,
    *,
    imag_tol: float = 1e-6,
) -> float:
    """Time-averaged population in the tracked instantaneous eigenstate.

    Computed as ``(1/T) <psi0| U(T)^+ (projector term) |psi0>``; the exact
    value is real (it is an integral of populations), so an imaginary residue
    above ``imag_tol`` signals a solver or sign misconfiguration.
    """
    if blocks.projector_term is None:
        raise ValueError("blocks carry no projector term")
    val = complex(np.vdot(psi0, blocks.u.conj().T @ blocks.projector_term @ psi0)) / duration
    if abs(val.imag) > imag_tol:
        raise NonRealMetric(
            f"adiabaticity imaginary residue {val.imag:.3e} exceeds {imag_tol:.1e}"
        )
    return _clamp_unit(val.real, "adiabaticity")


def perturbation_metric(
    blocks: DysonBlocks,
    psi0: np.ndarray,
    perturbation: Perturbation,
    duration: float,
    *,
    norm_integral: float | None = None,
) -> float:
    """First-order immunity to the perturbation, normalized to [0, 1].

    ``1 - ||(perturbation term)|psi>||^2 / N^2`` with N the integral of the
    perturbation's operator norm over the pulse.  For pair perturbations
    ``|psi> = |psi0> x |psi0>``.  Scale-invariant: rescaling the perturbation
    leaves the metric unchanged.
    """
    if blocks.perturbation_term is None:
        raise ValueError("blocks carry no perturbation term")
    if norm_integral is None:
        if perturbation.op_norm_const is None:
            raise ValueError("non-constant perturbation norm requires norm_integral")
        norm_integral = duration * perturbation.op_norm_const
    if norm_integral <= 0.0:
        raise ZeroPerturbation("perturbation norm integral vanishes; set p_per = 0 instead")
    psi = np.kron(psi0, psi0) if perturbation.pair else psi0
    dev = blocks.perturbation_term @ psi
    return _clamp_unit(1.0 - float(np.real(np.vdot(dev, dev))) / norm_integral**2, "perturbation metric")


def combined_target(
    phi0: float,
    phi_ad: float | None,
    phi_per: float | None,
    weights: MetricWeights,
) -> float:
    """Convex combination ``p0*phi0 + p_ad*phi_ad + p_per*phi_per``."""
    total = weights.p0 * phi0
    if weights.p_ad > 0.0:
        if phi_ad is None:
            raise ValueError("p_ad > 0 but no adiabaticity value")
        total += weights.p_ad * phi_ad
    if weights.p_per > 0.0:
        if phi_per is None:
            raise ValueError("p_per > 0 but no perturbation value")
        total += weights.p_per * phi_per
    return total


def max_tip_angle(
    traj: VanLoanTrajectory,
    psi0: np.ndarray,
    n_samples: int = 512,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Largest angle between the Bloch vector and the effective field.

    Samples the trajectory uniformly; returns ``(alpha_max, times, alpha(t))``
    in radians.  A diagnostic only -- it does not enter the optimization
    target.
    """
    ts = np.linspace(0.0, traj.duration, n_samples)
    us = traj.blocks_many(ts)[:, 0]
    if traj.dim != 2:
        raise ValueError("tip angle is defined for single-spin trajectories")
    states = us @ psi0
    w = np.conj(states[:, 0]) * states[:, 1]
    m = np.stack(
        [2.0 * w.real, 2.0 * w.imag, np.abs(states[:, 0]) ** 2 - np.abs(states[:, 1]) ** 2],
        axis=1,
    )
    bs = traj.field.field_many(traj.x, ts)
    norms = np.linalg.norm(bs, axis=1)
    eps = EPS_FIELD_REL * traj.field_scale
    if np.any(norms <= eps):
        idx = int(np.argmin(norms))
        raise DegenerateField(
            f"|b| = {norms[idx]:.3e} at sample t = {ts[idx]:.6e}", t=float(ts[idx])
        )
    cosang = np.sum(bs * m, axis=1) / (norms * np.linalg.norm(m, axis=1))
    alphas = np.arccos(np.clip(cosang, -1.0, 1.0))
    return float(np.max(alphas)), ts, alphas


def member_sign(member: EnsembleMember, x: np.ndarray) -> int:
    """Eigenstate sign for a member: fixed if set, else from the t=0 overlap."""
    if member.sign is not None:
        return member.sign
    b0 = member.field.field(x, 0.0)
    scale = getattr(member.field, "field_scale", 1.0)
    try:
        sgn, _ = select_sign(b0, member.psi0, field_scale=scale)
    except AmbiguousAlignment:
        sgn = +1
    return sgn


@dataclass
class MemberEvaluation:
    metrics: MemberMetrics
    gradient: np.ndarray | None
    trajectory: VanLoanTrajectory


def evaluate_member(
    member: EnsembleMember,
    x: np.ndarray,
    *,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    gradient_nodes: int = 256,
    quadrature: str = "gauss",
    need_gradient: bool = False,
    all_metrics: bool = False,
    alpha_samples: int = 0,
) -> MemberEvaluation:
    """Metrics (and optionally the gradient) of one optimization-set member.

    Only metrics with positive weight are computed unless ``all_metrics`` is
    set; ``alpha_samples > 0`` adds the tip-angle diagnostic.  Pair
    perturbations are evaluated on a second, doubled-space trajectory.
    """
    x = np.asarray(x, dtype=float)
    w = member.weights
    want_ad = w.p_ad > 0.0 or all_metrics
    want_per = member.perturbation is not None and (w.p_per > 0.0 or all_metrics)
    pair = bool(member.perturbation is not None and member.perturbation.pair)
    pert_single = member.perturbation if (want_per and not pair) else None

    sign = member_sign(member, x) if want_ad else +1
    traj = propagate(
        member.field,
        x,
        sign=sign,
        perturbation=pert_single,
        include_projector=want_ad,
        rtol=rtol,
        atol=atol,
        gradient_nodes=gradient_nodes,
        quadrature=quadrature,
    )
    blocks = extract_blocks(traj, traj.duration)
    phi0 = fidelity_metric(blocks.u, member.psi0, member.psi_target)
    phi_ad = adiabaticity_metric(blocks, member.psi0, traj.duration) if want_ad else None

    phi_per = None
    pair_traj = None
    norm_total = norm_grad = None
    if want_per:
        if pair:
            pair_traj = propagate(
                member.field,
                x,
                perturbation=member.perturbation,
                include_projector=False,
                rtol=rtol,
                atol=atol,
                gradient_nodes=gradient_nodes,
                quadrature=quadrature,
            )
            pert_blocks = extract_blocks(pair_traj, pair_traj.duration)
            norm_total, norm_grad = norm_integral_and_gradient(pair_traj)
        else:
            pert_blocks = blocks
            norm_total, norm_grad = norm_integral_and_gradient(traj)
        phi_per = perturbation_metric(
            pert_blocks, member.psi0, member.perturbation, traj.duration, norm_integral=norm_total
        )

    phi = combined_target(phi0, phi_ad, phi_per, w)

    alpha = None
    if alpha_samples > 0:
        alpha, _, _ = max_tip_angle(traj, member.psi0, n_samples=alpha_samples)

    gradient = None
    if need_gradient:
        gradient = np.zeros(x.size)
        grad_v = parameter_gradient(traj)
        d = traj.dim
        d_u = grad_v[:, 0:d, 0:d]
        if w.p0 > 0.0:
            z = np.vdot(member.psi_target, blocks.u @ member.psi0)
            overlap_d = np.einsum("i,nij,j->n", np.conj(member.psi_target), d_u, member.psi0)
            gradient += w.p0 * 2.0 * np.real(np.conj(z) * overlap_d)
        if w.p_ad > 0.0:
            d_a = grad_v[:, 0:d, d : 2 * d]
            a_psi = blocks.projector_term @ member.psi0
            u_psi = blocks.u @ member.psi0
            du_psi = np.einsum("nij,j->ni", d_u, member.psi0)
            da_psi = np.einsum("nij,j->ni", d_a, member.psi0)
            term = np.einsum("ni,i->n", np.conj(du_psi), a_psi) + np.einsum(
                "i,ni->n", np.conj(u_psi), da_psi
            )
            gradient += w.p_ad * np.real(term) / traj.duration
        if w.p_per > 0.0:
            if pair:
                grad_pair = parameter_gradient(pair_traj)
                dp = pair_traj.dim
                d_c = grad_pair[:, 0:dp, dp : 2 * dp]
                psi = np.kron(member.psi0, member.psi0)
                c_term = extract_blocks(pair_traj, pair_traj.duration).perturbation_term
            else:
                if traj.layout == vanloan.LAYOUT_FULL:
                    d_c = grad_v[:, d : 2 * d, 2 * d : 3 * d]
                else:
                    d_c = grad_v[:, 0:d, d : 2 * d]
                psi = member.psi0
                c_term = blocks.perturbation_term
            c_psi = c_term @ psi
            dc_psi = np.einsum("nij,j->ni", d_c, psi)
            dnum = 2.0 * np.real(np.einsum("i,ni->n", np.conj(c_psi), dc_psi))
            g_per = -dnum / norm_total**2
            if norm_grad is not None:
                num = float(np.real(np.vdot(c_psi, c_psi)))
                g_per = g_per + (2.0 * num / norm_total**3) * norm_grad
            gradient += w.p_per * g_per

    return MemberEvaluation(
        metrics=MemberMetrics(phi0=phi0, phi_ad=phi_ad, phi_per=phi_per, phi=phi, alpha_max=alpha),
        gradient=gradient,
        trajectory=traj,
    )


class _Kahan:
    """Compensated summation; keeps member reductions order-stable."""

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, value):
        y = np.asarray(value) - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


def validate_member_weights(members: Sequence[EnsembleMember]) -> None:
    total = sum(m.weight for m in members)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"member weights sum to {total!r}, expected 1")


def ensemble_target_and_gradient(
    members: Sequence[EnsembleMember],
    x: np.ndarray,
    *,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    gradient_nodes: int = 256,
    quadrature: str = "gauss",
    executor=None,
    all_metrics: bool = False,
    alpha_samples: int = 0,
) -> tuple[float, np.ndarray, MetricReport]:
    """Weighted ensemble target and its gradient over the optimization set.

    Members are evaluated independently (optionally on ``executor``) and
    reduced in member order with compensated summation, so the result is
    deterministic regardless of scheduling.  Member errors are re-raised as
    :class:`MemberEvaluationError` carrying the member label.
    """
    validate_member_weights(members)
    x = np.asarray(x, dtype=float)

    def _eval(member: EnsembleMember) -> MemberEvaluation:
        try:
            return evaluate_member(
                member,
                x,
                rtol=rtol,
                atol=atol,
                gradient_nodes=gradient_nodes,
                quadrature=quadrature,
                need_gradient=True,
                all_metrics=all_metrics,
                alpha_samples=alpha_samples,
            )
        except Exception as exc:  # tagged with the member label for callers
            raise MemberEvaluationError(member.label, exc) from exc

    if executor is None:
        evaluations = [_eval(m) for m in members]
    else:
        evaluations = list(executor.map(_eval, members))

    phi_acc = _Kahan()
    grad_acc = _Kahan(x.size)
    report: dict[str, MemberMetrics] = {}
    for member, ev in zip(members, evaluations):
        phi_acc.add(member.weight * ev.metrics.phi)
        grad_acc.add(member.weight * ev.gradient)
        report[member.label] = ev.metrics
    total = float(phi_acc.total)
    return total, grad_acc.total, MetricReport(members=report, total=total)
