"""Parameterized control-waveform families.

Each family maps a parameter vector ``x`` and a time ``t`` in ``[0, T]`` to an
effective field ``b = (bx, by, bz)`` in rad/s, together with the analytic
``3 x N`` Jacobian ``db/dx`` needed for gradient-based pulse searches.
Amplitude and bandwidth limits are embedded through tanh soft clipping, so the
optimization itself is unconstrained.

Families
--------
* ``PolyAfpAnsatz`` -- even/odd polynomial amplitude and frequency-sweep
  waveforms pinned to the z axis at both ends (full-passage inversions).
* ``ArbitraryStateAnsatz`` -- three clipped bridge polynomials whose endpoint
  fields align exactly with chosen initial/final Bloch directions.
* ``WurstWaveform`` / ``SechTanhWaveform`` -- standard analytic references,
  with their scalar shape parameter exposed as the single control parameter.
* ``ConstantFieldAnsatz`` -- b == x, mainly for oracles and tests.
* ``TabulatedWaveform`` -- cubic interpolation of externally sampled pulses.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError

# Tolerance (relative to duration) for time arguments nominally outside [0, T];
# adaptive solvers and finite differences probe the endpoints inexactly.
_TIME_SLACK = 1e-9


def _check_time(t: float, duration: float) -> float:
    slack = _TIME_SLACK * duration
    if t < -slack or t > duration + slack:
        raise DomainError(f"t = {t} outside pulse interval [0, {duration}]")
    return min(max(t, 0.0), duration)


def _check_times(ts: np.ndarray, duration: float) -> np.ndarray:
    ts = np.asarray(ts, dtype=float)
    slack = _TIME_SLACK * duration
    if np.any(ts < -slack) or np.any(ts > duration + slack):
        raise DomainError(f"times outside pulse interval [0, {duration}]")
    return np.clip(ts, 0.0, duration)


def _sech2(a: np.ndarray) -> np.ndarray:
    # 1/cosh^2 with overflow guard; exactly 0 once cosh would overflow.
    a = np.asarray(a, dtype=float)
    out = np.zeros_like(a)
    small = np.abs(a) < 350.0
    out[small] = 1.0 / np.cosh(a[small]) ** 2
    return out


def _as_params(x, n_params: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (n_params,):
        raise DomainError(f"parameter vector has length {x.size}, expected {n_params}")
    return x


@dataclass(frozen=True)
class PolyAfpAnsatz:
    """Soft-clipped even/odd polynomial full-passage waveform.

    ``bx = omega1_max * tanh(a_x)`` with ``a_x`` an even polynomial in
    ``u = 1 - 2t/T`` vanishing at t in {0, T} (first ``N/2`` parameters), and
    ``bz = delta_omega_max * tanh(a_z)`` with ``a_z`` odd in ``u`` (last
    ``N/2`` parameters); ``by = 0``.  The field therefore starts and ends on
    the z axis for every parameter vector.
    """

    n_params: int
    duration: float
    omega1_max: float
    delta_omega_max: float

    def __post_init__(self):
        if self.n_params < 2 or self.n_params % 2:
            raise DomainError("n_params must be even and >= 2")
        if self.duration <= 0 or self.omega1_max <= 0 or self.delta_omega_max <= 0:
            raise DomainError("duration, omega1_max and delta_omega_max must be positive")

    @property
    def field_scale(self) -> float:
        return math.hypot(self.omega1_max, self.delta_omega_max)

    def _polys(self, x: np.ndarray, u):
        m = self.n_params // 2
        v = u * u
        acc_x = 0.0
        for j in range(m - 1, -1, -1):
            acc_x = v * (x[j] + acc_x)
        a_x = float(np.sum(x[:m])) - acc_x
        acc_z = 0.0
        for j in range(self.n_params - 1, m - 1, -1):
            acc_z = x[j] + v * acc_z
        a_z = u * acc_z
        return a_x, a_z

    def field(self, x, t: float) -> np.ndarray:
        x = _as_params(x, self.n_params)
        t = _check_time(t, self.duration)
        u = 1.0 - 2.0 * t / self.duration
        a_x, a_z = self._polys(x, u)
        return np.array(
            [
                self.omega1_max * math.tanh(a_x),
                0.0,
                self.delta_omega_max * math.tanh(a_z),
            ]
        )

    def field_many(self, x, ts) -> np.ndarray:
        x = _as_params(x, self.n_params)
        ts = _check_times(ts, self.duration)
        u = 1.0 - 2.0 * ts / self.duration
        a_x, a_z = self._polys(x, u)
        out = np.zeros((ts.size, 3))
        out[:, 0] = self.omega1_max * np.tanh(a_x)
        out[:, 2] = self.delta_omega_max * np.tanh(a_z)
        return out

    def jacobian(self, x, t: float) -> np.ndarray:
        return self.jacobian_many(x, np.atleast_1d(t))[0]

    def jacobian_many(self, x, ts) -> np.ndarray:
        x = _as_params(x, self.n_params)
        ts = _check_times(ts, self.duration)
        m = self.n_params // 2
        u = 1.0 - 2.0 * ts / self.duration
        v = u * u
        a_x, a_z = self._polys(x, u)
        # Basis terms: 1 - u^(2n) for the even block, u^(2n-1) = u * v^(n-1)
        # for the odd one.
        jac = np.zeros((ts.size, 3, self.n_params))
        jac[:, 0, :m] = (
            self.omega1_max
            * _sech2(a_x)[:, None]
            * (1.0 - v[:, None] ** np.arange(1, m + 1))
        )
        jac[:, 2, m:] = (
            self.delta_omega_max
            * _sech2(a_z)[:, None]
            * (u[:, None] * v[:, None] ** np.arange(0, m))
        )
        return jac


def poly_afp_field(ansatz: PolyAfpAnsatz, x, t: float) -> np.ndarray:
    """Effective field of the polynomial full-passage ansatz at time t."""
    return ansatz.field(x, t)


def poly_afp_jacobian(ansatz: PolyAfpAnsatz, x, t: float) -> np.ndarray:
    """Analytic 3 x N Jacobian of ``poly_afp_field`` with respect to x."""
    return ansatz.jacobian(x, t)


def bridge_polynomial(x, m: int, m_prime: int, xi: float, xi_prime: float, t: float, duration: float) -> float:
    """Polynomial connecting ``(0, xi)`` to ``(T, xi_prime)`` exactly.

    ``f(t) = (t/T)(1 - t/T) * sum_{n=m+1}^{m'} x_n (1 - 2t/T)^(n-m-1)
    + (t/T)(xi' - xi) + xi`` -- a line through the endpoints plus the most
    general polynomial with roots at t in {0, T} built from the parameter
    slice ``x[m:m']``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if not (0 <= m < m_prime <= x.size):
        raise DomainError(f"invalid slice indices m={m}, m'={m_prime} for {x.size} parameters")
    t = _check_time(t, duration)
    tau = t / duration
    u = 1.0 - 2.0 * tau
    acc = 0.0
    for j in range(m_prime - 1, m - 1, -1):
        acc = x[j] + u * acc
    return tau * (1.0 - tau) * acc + tau * (xi_prime - xi) + xi


@dataclass(frozen=True)
class ArbitraryStateAnsatz:
    """Clipped bridge-polynomial waveform connecting two Bloch directions.

    Each field component is a tanh-clipped bridge polynomial whose endpoint
    values are fixed so that ``b(x, 0) = (omega1_max/sqrt(2)) * n_start`` and
    ``b(x, T) = (omega1_max/sqrt(2)) * n_end`` exactly, independent of x.
    Parameters are split evenly between the three components (N % 3 == 0).
    """

    n_params: int
    duration: float
    omega1_max: float
    delta_omega_max: float
    n_start: tuple[float, float, float]
    n_end: tuple[float, float, float]

    def __post_init__(self):
        if self.n_params < 3 or self.n_params % 3:
            raise DomainError("n_params must be a positive multiple of 3")
        if self.duration <= 0 or self.omega1_max <= 0 or self.delta_omega_max <= 0:
            raise DomainError("duration, omega1_max and delta_omega_max must be positive")
        for name, vec in (("n_start", self.n_start), ("n_end", self.n_end)):
            v = np.asarray(vec, dtype=float)
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise DomainError(f"{name} must be a unit vector")
        # Build endpoint tanh^-1 coefficients once; DomainError if out of range.
        object.__setattr__(self, "_bounds", self._endpoint_coefficients())

    def _endpoint_coefficients(self):
        zc = self.omega1_max / (math.sqrt(2.0) * self.delta_omega_max)
        coeffs = []
        for vec in (self.n_start, self.n_end):
            nx, ny, nz = (float(c) for c in vec)
            for name, arg in (("x", nx), ("y", ny), ("z", zc * nz)):
                if not -1.0 < arg < 1.0:
                    raise DomainError(
                        f"soft-clip endpoint out of range: atanh argument {arg} for {name} component"
                    )
            coeffs.append((math.atanh(nx), math.atanh(ny), math.atanh(zc * nz)))
        return tuple(coeffs)

    @property
    def field_scale(self) -> float:
        return math.hypot(self.omega1_max, self.delta_omega_max)

    def _components(self, x: np.ndarray, tau, u):
        (a0, b0, g0), (a1, b1, g1) = self._bounds
        m = self.n_params // 3
        window = tau * (1.0 - tau)
        args = []
        for k, (lo, hi) in enumerate(((a0, a1), (b0, b1), (g0, g1))):
            acc = 0.0
            for j in range((k + 1) * m - 1, k * m - 1, -1):
                acc = x[j] + u * acc
            args.append(window * acc + tau * (hi - lo) + lo)
        return args

    def field(self, x, t: float) -> np.ndarray:
        x = _as_params(x, self.n_params)
        t = _check_time(t, self.duration)
        tau = t / self.duration
        fx, fy, fz = self._components(x, tau, 1.0 - 2.0 * tau)
        amp = self.omega1_max / math.sqrt(2.0)
        return np.array(
            [amp * math.tanh(fx), amp * math.tanh(fy), self.delta_omega_max * math.tanh(fz)]
        )

    def field_many(self, x, ts) -> np.ndarray:
        x = _as_params(x, self.n_params)
        ts = _check_times(ts, self.duration)
        tau = ts / self.duration
        fx, fy, fz = self._components(x, tau, 1.0 - 2.0 * tau)
        amp = self.omega1_max / math.sqrt(2.0)
        return np.stack(
            [amp * np.tanh(fx), amp * np.tanh(fy), self.delta_omega_max * np.tanh(fz)], axis=1
        )

    def jacobian(self, x, t: float) -> np.ndarray:
        return self.jacobian_many(x, np.atleast_1d(t))[0]

    def jacobian_many(self, x, ts) -> np.ndarray:
        x = _as_params(x, self.n_params)
        ts = _check_times(ts, self.duration)
        m = self.n_params // 3
        tau = ts / self.duration
        u = 1.0 - 2.0 * tau
        fx, fy, fz = self._components(x, tau, u)
        window = tau * (1.0 - tau)
        upow = window[:, None] * u[:, None] ** np.arange(0, m)
        amp = self.omega1_max / math.sqrt(2.0)
        jac = np.zeros((ts.size, 3, self.n_params))
        jac[:, 0, :m] = amp * _sech2(fx)[:, None] * upow
        jac[:, 1, m : 2 * m] = amp * _sech2(fy)[:, None] * upow
        jac[:, 2, 2 * m :] = self.delta_omega_max * _sech2(fz)[:, None] * upow
        return jac


def arbitrary_state_field(ansatz: ArbitraryStateAnsatz, x, t: float) -> np.ndarray:
    """Effective field of the arbitrary-state ansatz at time t."""
    return ansatz.field(x, t)


@dataclass(frozen=True)
class WurstWaveform:
    """WURST amplitude envelope with a linear frequency sweep.

    ``bx = omega1_max * (1 - |cos(pi t/T)|^k)``,
    ``bz = delta_omega_max * (2t/T - 1)``.  The single control parameter is
    the envelope index k (``x = [k]``); pass ``x=None`` to use the stored
    default.
    """

    duration: float
    omega1_max: float
    delta_omega_max: float
    index: float = 20.0
    n_params: int = dataclasses.field(default=1, init=False)

    def __post_init__(self):
        if self.duration <= 0 or self.omega1_max <= 0 or self.delta_omega_max <= 0:
            raise DomainError("duration, omega1_max and delta_omega_max must be positive")
        if self.index <= 0:
            raise DomainError("WURST index must be positive")

    @property
    def field_scale(self) -> float:
        return math.hypot(self.omega1_max, self.delta_omega_max)

    def _index(self, x) -> float:
        if x is None:
            return self.index
        return float(_as_params(x, 1)[0])

    def field(self, x, t: float) -> np.ndarray:
        t = _check_time(t, self.duration)
        k = self._index(x)
        tau = t / self.duration
        c = abs(math.cos(math.pi * tau))
        return np.array(
            [
                self.omega1_max * (1.0 - c**k),
                0.0,
                self.delta_omega_max * (2.0 * tau - 1.0),
            ]
        )

    def field_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        k = self._index(x)
        tau = ts / self.duration
        c = np.abs(np.cos(np.pi * tau))
        out = np.zeros((ts.size, 3))
        out[:, 0] = self.omega1_max * (1.0 - c**k)
        out[:, 2] = self.delta_omega_max * (2.0 * tau - 1.0)
        return out

    def jacobian(self, x, t: float) -> np.ndarray:
        return self.jacobian_many(x, np.atleast_1d(t))[0]

    def jacobian_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        k = self._index(x)
        tau = ts / self.duration
        c = np.abs(np.cos(np.pi * tau))
        jac = np.zeros((ts.size, 3, 1))
        pos = c > 0.0
        jac[pos, 0, 0] = -self.omega1_max * c[pos] ** k * np.log(c[pos])
        return jac


@dataclass(frozen=True)
class SechTanhWaveform:
    """Hyperbolic-secant amplitude with tanh frequency sweep.

    ``bx = omega1_max * sech(beta*(2t/T - 1))``,
    ``bz = delta_omega_max * tanh(beta*(2t/T - 1))/tanh(beta)``.  The single
    control parameter is the truncation factor beta (``x = [beta]``).
    """

    duration: float
    omega1_max: float
    delta_omega_max: float
    beta: float = 5.3
    n_params: int = dataclasses.field(default=1, init=False)

    def __post_init__(self):
        if self.duration <= 0 or self.omega1_max <= 0 or self.delta_omega_max <= 0:
            raise DomainError("duration, omega1_max and delta_omega_max must be positive")
        if self.beta <= 0:
            raise DomainError("sech truncation beta must be positive")

    @property
    def field_scale(self) -> float:
        return math.hypot(self.omega1_max, self.delta_omega_max)

    def _beta(self, x) -> float:
        if x is None:
            return self.beta
        return float(_as_params(x, 1)[0])

    def field(self, x, t: float) -> np.ndarray:
        t = _check_time(t, self.duration)
        beta = self._beta(x)
        u = 2.0 * t / self.duration - 1.0
        return np.array(
            [
                self.omega1_max / math.cosh(beta * u),
                0.0,
                self.delta_omega_max * math.tanh(beta * u) / math.tanh(beta),
            ]
        )

    def field_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        beta = self._beta(x)
        u = 2.0 * ts / self.duration - 1.0
        out = np.zeros((ts.size, 3))
        out[:, 0] = self.omega1_max / np.cosh(beta * u)
        out[:, 2] = self.delta_omega_max * np.tanh(beta * u) / math.tanh(beta)
        return out

    def jacobian(self, x, t: float) -> np.ndarray:
        return self.jacobian_many(x, np.atleast_1d(t))[0]

    def jacobian_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        beta = self._beta(x)
        u = 2.0 * ts / self.duration - 1.0
        th = math.tanh(beta)
        jac = np.zeros((ts.size, 3, 1))
        jac[:, 0, 0] = -self.omega1_max * u * np.tanh(beta * u) / np.cosh(beta * u)
        jac[:, 2, 0] = (
            self.delta_omega_max
            * (u * _sech2(beta * u) * th - np.tanh(beta * u) * (1.0 - th * th))
            / th**2
        )
        return jac


def baseline_field(waveform, t: float) -> np.ndarray:
    """Effective field of an analytic reference waveform at its default shape."""
    return waveform.field(None, t)


@dataclass(frozen=True)
class ConstantFieldAnsatz:
    """Time-independent field b == x; Jacobian is the 3x3 identity."""

    duration: float
    n_params: int = dataclasses.field(default=3, init=False)

    def __post_init__(self):
        if self.duration <= 0:
            raise DomainError("duration must be positive")

    def field(self, x, t: float) -> np.ndarray:
        _check_time(t, self.duration)
        return _as_params(x, 3).copy()

    def field_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        return np.tile(_as_params(x, 3), (ts.size, 1))

    def jacobian(self, x, t: float) -> np.ndarray:
        _check_time(t, self.duration)
        return np.eye(3)

    def jacobian_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        return np.tile(np.eye(3), (ts.size, 1, 1))


@dataclass(frozen=True)
class OffsetField:
    """Wraps a field map, adding a constant resonance offset to bz.

    Used for optimization-set members at distinct Larmor offsets and for
    carrier-detuning sweeps; the Jacobian is unchanged.
    """

    base: object
    offset: float

    @property
    def n_params(self) -> int:
        return self.base.n_params

    @property
    def duration(self) -> float:
        return self.base.duration

    @property
    def field_scale(self) -> float:
        return getattr(self.base, "field_scale", 1.0) + abs(self.offset)

    def field(self, x, t: float) -> np.ndarray:
        b = self.base.field(x, t)
        b[2] += self.offset
        return b

    def field_many(self, x, ts) -> np.ndarray:
        b = self.base.field_many(x, ts)
        b[:, 2] += self.offset
        return b

    def jacobian(self, x, t: float) -> np.ndarray:
        return self.base.jacobian(x, t)

    def jacobian_many(self, x, ts) -> np.ndarray:
        return self.base.jacobian_many(x, ts)


@dataclass(frozen=True)
class RabiScaledField:
    """Wraps a field map, scaling the transverse components (bx, by).

    Models a spin that sees the designed drive waveform attenuated or
    amplified by a position-dependent factor, while the frequency sweep (bz)
    is reproduced exactly.
    """

    base: object
    scale: float

    @property
    def n_params(self) -> int:
        return self.base.n_params

    @property
    def duration(self) -> float:
        return self.base.duration

    @property
    def field_scale(self) -> float:
        return max(self.scale, 1.0) * getattr(self.base, "field_scale", 1.0)

    def field(self, x, t: float) -> np.ndarray:
        b = self.base.field(x, t)
        b[0] *= self.scale
        b[1] *= self.scale
        return b

    def field_many(self, x, ts) -> np.ndarray:
        b = self.base.field_many(x, ts)
        b[:, :2] *= self.scale
        return b

    def jacobian(self, x, t: float) -> np.ndarray:
        j = self.base.jacobian(x, t)
        j[:2] *= self.scale
        return j

    def jacobian_many(self, x, ts) -> np.ndarray:
        j = self.base.jacobian_many(x, ts)
        j[:, :2] *= self.scale
        return j


class TabulatedWaveform:
    """Cubic interpolation of a sampled waveform (t, bx, by, bz).

    Accepts no control parameters (``n_params == 0``); the canonical pulse
    interchange format for running sweeps and train simulations on externally
    produced pulses.
    """

    def __init__(self, times: np.ndarray, fields: np.ndarray):
        from scipy.interpolate import CubicSpline

        times = np.asarray(times, dtype=float)
        fields = np.asarray(fields, dtype=float)
        if times.ndim != 1 or times.size < 4:
            raise DomainError("need at least 4 samples for cubic interpolation")
        if fields.shape != (times.size, 3):
            raise DomainError("fields must have shape (n_samples, 3)")
        if abs(times[0]) > _TIME_SLACK * times[-1]:
            raise DomainError("sample times must start at 0")
        if np.any(np.diff(times) <= 0):
            raise DomainError("sample times must be strictly increasing")
        self.duration = float(times[-1])
        self.n_params = 0
        self.field_scale = float(np.max(np.linalg.norm(fields, axis=1)))
        self._spline = CubicSpline(times, fields, axis=0)

    def field(self, x, t: float) -> np.ndarray:
        t = _check_time(t, self.duration)
        return np.asarray(self._spline(t), dtype=float)

    def field_many(self, x, ts) -> np.ndarray:
        ts = _check_times(ts, self.duration)
        return np.asarray(self._spline(ts), dtype=float)


def with_omega1(ansatz, omega1_max: float):
    """Copy of an ansatz with a different maximum Rabi frequency."""
    return dataclasses.replace(ansatz, omega1_max=float(omega1_max))


def frequency_scaled(ansatz, factor: float):
    """Rescale all frequencies by ``factor`` and the duration by ``1/factor``.

    The parameter vector is unchanged: tanh arguments are dimensionless, so
    the same x describes the same pulse at any overall frequency scale.
    """
    if factor <= 0:
        raise DomainError("scale factor must be positive")
    return dataclasses.replace(
        ansatz,
        duration=ansatz.duration / factor,
        omega1_max=ansatz.omega1_max * factor,
        delta_omega_max=ansatz.delta_omega_max * factor,
    )


def sample_waveform(field_map, x, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly sample a field map; returns ``(times, fields)``."""
    if n_samples < 2:
        raise DomainError("need at least 2 samples")
    ts = np.linspace(0.0, field_map.duration, n_samples)
    return ts, field_map.field_many(x, ts)


def write_waveform_csv(
    path: str | Path,
    field_map,
    x,
    n_samples: int,
    header_lines: Iterable[str] = (),
) -> None:
    """Export a sampled waveform as CSV with columns t_s, bx/by/bz in rad/s."""
    ts, bs = sample_waveform(field_map, x, n_samples)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["t_s", "bx_rad_s", "by_rad_s", "bz_rad_s"])
        for t, b in zip(ts, bs):
            writer.writerow([f"{t:.12e}", f"{b[0]:.12e}", f"{b[1]:.12e}", f"{b[2]:.12e}"])


def read_waveform_csv(path: str | Path) -> TabulatedWaveform:
    """Load a waveform CSV (as written by :func:`write_waveform_csv`)."""
    times, fields = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if row[0] == "t_s":
                continue
            times.append(float(row[0]))
            fields.append([float(row[1]), float(row[2]), float(row[3])])
    return TabulatedWaveform(np.asarray(times), np.asarray(fields))
