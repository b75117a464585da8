"""Flows, variational flows, jet transport and section events.

Thin, typed wrappers over the compiled Dormand-Prince 8(5,3) core in
_dp853. Vector fields and section functions are selected by integer
tags (see _field_kernels) so that every integration path is a single
cached native call; the dataclasses here carry those tags plus their
parameters and give them a friendly callable surface.

Backward integration negates the field. Event times are reported signed:
positive for forward integration, negative for backward, while the
magnitude is always the elapsed time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import _dp853 as dp
from . import _field_kernels as fk
from .exceptions import DomainError, EventNotFoundError, IntegrationError
from .jets import JetState

__all__ = [
    "Tolerances",
    "VectorField",
    "EventSpec",
    "EventRecord",
    "harmonic_field",
    "as_variational",
    "plane_section",
    "integrate_time",
    "integrate_with_stm",
    "integrate_to_event",
    "collect_events",
    "flow_jet",
    "batch_integrate_time",
    "batch_integrate_to_event",
    "configure_workers",
]

WORKERS_ENV = "APSIDAL_WORKERS"


def configure_workers(n: int | None = None) -> int:
    """Cap the compiled-kernel thread count.

    Order of precedence: explicit argument, the APSIDAL_WORKERS
    environment variable, then everything numba was started with.
    Returns the number of threads now in use.
    """
    limit = numba.config.NUMBA_NUM_THREADS
    if n is None:
        raw = os.environ.get(WORKERS_ENV, "")
        n = int(raw) if raw.strip() else limit
    n = max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


@dataclass(frozen=True)
class Tolerances:
    """Integrator tolerances; both default to 1e-12 per the method's
    operating point, configurable from the run configuration."""

    abs: float = 1e-12
    rel: float = 1e-12
    max_steps: int = 1_000_000


@dataclass(frozen=True)
class VectorField:
    """A compiled autonomous field plus its jet-transport twin."""

    name: str
    dimension: int
    kind: int
    params: np.ndarray
    jet_kind: int = -1
    var_kind: int = -1
    state_dimension: int = 0  # state part when kind is a variational field

    def eval(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        out = np.empty(self.dimension)
        fk.rhs(self.kind, self.params, state, out)
        return out

    def eval_jet(self, jstate: JetState) -> JetState:
        """Right-hand side of the coefficient equations at a jet state."""
        if self.jet_kind < 0:
            raise DomainError(f"field {self.name!r} has no jet transport")
        n = jstate.degree + 1
        flat = jstate.flat()
        out = np.empty(flat.size)
        fk.rhs(self.jet_kind, np.append(self.params, float(n)), flat, out)
        return JetState.from_flat(out, jstate.components)


def harmonic_field(omega: float = 1.0) -> VectorField:
    """Reference oscillator (x' = p, p' = -omega^2 x) used to validate
    the integrator and the section machinery."""
    return VectorField(name="harmonic", dimension=2,
                       kind=fk.FIELD_HARMONIC,
                       params=np.array([float(omega)]),
                       jet_kind=fk.FIELD_HARMONIC_JET)


def as_variational(field_: VectorField) -> VectorField:
    """View of the field's state+STM system as a field in its own right,
    so the event machinery can stop variational flows on sections."""
    if field_.var_kind < 0:
        raise DomainError(f"field {field_.name!r} has no variational flow")
    n = field_.state_dimension
    return VectorField(name=field_.name + "+stm", dimension=n * (n + 1),
                       kind=field_.var_kind, params=field_.params)


@dataclass(frozen=True)
class EventSpec:
    """A section crossing: sigma root, crossing direction, extra test.

    direction is the required sign of d(sigma)/dt along the forward
    flow at the crossing: +1 increasing, -1 decreasing, 0 either.
    eps_exclude ignores roots within that time of the start so return
    maps can launch from the section itself.
    """

    sigma_kind: int
    sigma_params: np.ndarray
    direction: int = 0
    extra_kind: int = fk.EXTRA_NONE
    extra_params: np.ndarray = field(
        default_factory=lambda: np.zeros(1))
    guard_kind: int = fk.GUARD_NONE
    guard_params: np.ndarray = field(
        default_factory=lambda: np.zeros(1))
    max_time: float = 4.0 * np.pi
    eps_exclude: float = 1e-10
    sigma_tol: float = 1e-12

    def sigma(self, state: np.ndarray) -> float:
        return float(fk.section_value(self.sigma_kind, self.sigma_params,
                                      np.asarray(state, dtype=np.float64)))

    def sigma_dot(self, state: np.ndarray, field_: VectorField) -> float:
        return float(fk.section_rate(self.sigma_kind, self.sigma_params,
                                     field_.kind, field_.params,
                                     np.asarray(state, dtype=np.float64)))

    def with_max_time(self, max_time: float) -> "EventSpec":
        return replace(self, max_time=float(max_time))

    def accepts(self, state: np.ndarray) -> bool:
        return bool(fk.extra_accept(self.extra_kind, self.extra_params,
                                    np.asarray(state, dtype=np.float64)))


def plane_section(index: int, offset: float = 0.0,
                  direction: int = 0, **kw) -> EventSpec:
    """Coordinate-plane section state[index] == offset."""
    return EventSpec(sigma_kind=fk.SECTION_PLANE,
                     sigma_params=np.array([float(index), float(offset)]),
                     direction=direction, **kw)


@dataclass(frozen=True)
class EventRecord:
    """One detected crossing."""

    time: float          # signed: negative when found integrating backward
    state: np.ndarray
    sigma_residual: float
    guard_min: float     # running minimum of the guard diagnostic


_FAIL_TEXT = {
    dp.FAIL_MAX_STEPS: "step budget exhausted",
    dp.FAIL_UNDERFLOW: "step size underflow (singular approach?)",
    dp.FAIL_NONFINITE: "vector field returned non-finite values",
}


def _check(status: int, context: str) -> None:
    if status in _FAIL_TEXT:
        raise IntegrationError(f"{context}: {_FAIL_TEXT[status]}")


def integrate_time(field_: VectorField, state: np.ndarray, t: float,
                   tol: Tolerances = Tolerances()) -> np.ndarray:
    """Flow the state for a signed time t."""
    y0 = np.asarray(state, dtype=np.float64)
    if y0.shape != (field_.dimension,):
        raise DomainError(f"state has shape {y0.shape}, field wants "
                          f"({field_.dimension},)")
    sign = 1.0 if t >= 0 else -1.0
    status, y = dp.flow_fixed(field_.kind, field_.params, y0, sign,
                              abs(float(t)), tol.rel, tol.abs,
                              tol.max_steps)
    _check(status, f"integrate_time({field_.name}, t={t})")
    return y


def integrate_with_stm(field_: VectorField, state: np.ndarray, t: float,
                       tol: Tolerances = Tolerances()
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Flow the state and the state transition matrix for signed time t."""
    if field_.var_kind < 0:
        raise DomainError(f"field {field_.name!r} has no variational flow")
    n = field_.state_dimension
    y0 = np.zeros(n * (n + 1))
    y0[:n] = np.asarray(state, dtype=np.float64)
    y0[n:] = np.eye(n).ravel()
    sign = 1.0 if t >= 0 else -1.0
    status, y = dp.flow_fixed(field_.var_kind, field_.params, y0, sign,
                              abs(float(t)), tol.rel, tol.abs,
                              tol.max_steps)
    _check(status, f"integrate_with_stm({field_.name}, t={t})")
    return y[:n].copy(), y[n:].reshape(n, n).copy()


def integrate_to_event(field_: VectorField, state: np.ndarray,
                       event: EventSpec, forward: bool = True,
                       tol: Tolerances = Tolerances()) -> EventRecord:
    """First admissible section crossing along the flow.

    Raises EventNotFoundError when no crossing of the requested kind
    occurs within event.max_time, IntegrationError when the integrator
    itself fails (close encounters surface this way).
    """
    y0 = np.asarray(state, dtype=np.float64)
    sign = 1.0 if forward else -1.0
    status, t_ev, y_ev, sres, gmin = dp.flow_event(
        field_.kind, field_.params, y0, sign,
        event.max_time, event.sigma_kind, event.sigma_params,
        event.direction, event.extra_kind, event.extra_params,
        event.guard_kind, event.guard_params, event.eps_exclude,
        event.sigma_tol, tol.rel, tol.abs, tol.max_steps)
    _check(status, f"integrate_to_event({field_.name})")
    if status == dp.NO_EVENT:
        raise EventNotFoundError(
            f"no section crossing within {event.max_time} time units")
    return EventRecord(time=sign * t_ev, state=y_ev,
                       sigma_residual=float(sres), guard_min=float(gmin))


def collect_events(field_: VectorField, state: np.ndarray,
                   event: EventSpec, total_time: float,
                   forward: bool = True,
                   tol: Tolerances = Tolerances()) -> list[EventRecord]:
    """All crossings with elapsed time in (0, total_time], in order.

    Restarts from each crossing, so the eps_exclude window applies
    after every event just as it does at the start.
    """
    records: list[EventRecord] = []
    elapsed = 0.0
    y = np.asarray(state, dtype=np.float64)
    sgn = 1.0 if forward else -1.0
    while True:
        remaining = total_time - elapsed
        if remaining <= event.eps_exclude:
            break
        try:
            rec = integrate_to_event(field_, y,
                                     event.with_max_time(remaining),
                                     forward=forward, tol=tol)
        except EventNotFoundError:
            break
        elapsed += abs(rec.time)
        records.append(EventRecord(time=sgn * elapsed, state=rec.state,
                                   sigma_residual=rec.sigma_residual,
                                   guard_min=rec.guard_min))
        y = rec.state
    return records


def flow_jet(field_: VectorField, jstate: JetState, t: float,
             tol: Tolerances = Tolerances()) -> JetState:
    """Jet transport: flow a polynomial initial condition for time t.

    The coefficient vector of every component series is advanced as one
    stacked ODE, truncated at the jet's degree throughout.
    """
    if field_.jet_kind < 0:
        raise DomainError(f"field {field_.name!r} has no jet transport")
    n = jstate.degree + 1
    params = np.append(field_.params, float(n))
    sign = 1.0 if t >= 0 else -1.0
    status, y = dp.flow_fixed(field_.jet_kind, params, jstate.flat(), sign,
                              abs(float(t)), tol.rel, tol.abs,
                              tol.max_steps)
    _check(status, f"flow_jet({field_.name}, degree={jstate.degree})")
    return JetState.from_flat(y, jstate.components)


def batch_integrate_time(field_: VectorField, states: np.ndarray,
                         times: np.ndarray | float,
                         tol: Tolerances = Tolerances()
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Flow a batch of states, each for its own signed time.

    Returns (statuses, final_states); statuses follow the _dp853 codes
    with 0 meaning success. Rows are independent, so failures are
    reported per row instead of raised.
    """
    Y0 = np.ascontiguousarray(states, dtype=np.float64)
    ts = np.broadcast_to(np.asarray(times, dtype=np.float64),
                         (Y0.shape[0],)).copy()
    if np.any(ts < 0) and np.any(ts > 0):
        raise DomainError("batch times must share a sign")
    sign = -1.0 if np.any(ts < 0) else 1.0
    statuses, out = dp.flow_fixed_batch(field_.kind, field_.params, Y0,
                                        sign, np.abs(ts), tol.rel, tol.abs,
                                        tol.max_steps)
    return statuses, out


def batch_integrate_to_event(field_: VectorField, states: np.ndarray,
                             event: EventSpec, forward: bool = True,
                             tol: Tolerances = Tolerances()):
    """Event integration over a batch of independent initial states.

    Returns (statuses, times, states, sigma_residuals, guard_mins);
    statuses: 0 found, 1 no event, >1 integrator failure. Times are
    signed like integrate_to_event.
    """
    Y0 = np.ascontiguousarray(states, dtype=np.float64)
    sign = 1.0 if forward else -1.0
    statuses, times, out, residuals, guards = dp.flow_event_batch(
        field_.kind, field_.params, Y0, sign, event.max_time,
        event.sigma_kind, event.sigma_params, event.direction,
        event.extra_kind, event.extra_params, event.guard_kind,
        event.guard_params, event.eps_exclude, event.sigma_tol,
        tol.rel, tol.abs, tol.max_steps)
    return statuses, sign * times, out, residuals, guards
