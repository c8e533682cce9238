"""Explicit Euler integration of the autonomous field and robustness sweeps.

``x_{n+1} = x_n + (T/N) * psi(x_n)``.  With ``T = 1`` this is the scaled
residual update of an N-layer network with shared weights.

Sweeps over the step count and the horizon keep ``dt = T/N``: changing ``T``
rescales the step rather than appending steps at a fixed ``dt``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import diffcore as dc
from .container import atomic_write_text
from .diffcore import Tensor
from .dynamics import OdeBlockParams, psi

DIVERGENCE_LIMIT = 1e6
DEFAULT_STEPS = 24
DEFAULT_HORIZON = 1.0

Field = Union[OdeBlockParams, Callable[[Tensor], Tensor]]


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"state diverged at step {step}")
        self.step = step


def as_field(f: Field) -> Callable[[Tensor], Tensor]:
    """Turn parameters (or an arbitrary Tensor -> Tensor callable) into ``x -> psi(x)``."""
    if isinstance(f, OdeBlockParams):
        return lambda x: psi(x, f)
    return f


@dataclass
class Trajectory:
    """States ``x_0 .. x_N``; only ``x_0`` and ``x_N`` when not recorded."""

    states: list
    N: int
    T: float
    recorded: bool = True

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def final(self):
        return self.states[-1]

    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def __len__(self) -> int:
        return self.N + 1


def _check(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > DIVERGENCE_LIMIT:
        raise DivergenceError(step)


def euler_integrate(
    x0,
    field: Field,
    N: int = DEFAULT_STEPS,
    T: float = DEFAULT_HORIZON,
    record: bool = True,
    on_step: Callable[[int, Tensor], None] | None = None,
) -> Trajectory:
    """Integrate ``x' = field(x)`` from ``x0`` with N Euler steps over ``[0, T]``.

    A Tensor ``x0`` yields Tensor states (differentiable under an active
    :class:`~odeflow.diffcore.Graph`); an array yields arrays.
    ``on_step(n, x_n)`` is called before each step is applied.
    """
    if N < 1:
        raise dc.ContractError(f"N must be >= 1, got {N}")
    if not T > 0:
        raise dc.ContractError(f"T must be positive, got {T}")
    f = as_field(field)
    as_array = not isinstance(x0, Tensor)
    x = dc.as_tensor(x0)
    _check(x.data, 0)
    dt = T / N
    states = [x]
    for n in range(N):
        if on_step is not None:
            on_step(n, x)
        x = dc.add(x, dc.scale(f(x), dt))
        _check(x.data, n + 1)
        if record or n == N - 1:
            states.append(x)
    if as_array:
        states = [s.data for s in states]
    return Trajectory(states, N, T, record)


def state_at_fraction(traj: Trajectory, s: float):
    """State at step ``round(s * N)``, rounding halves up."""
    if not traj.recorded:
        raise dc.ContractError("trajectory was integrated with record=False")
    if not 0.0 <= s <= 1.0:
        raise dc.ContractError(f"fraction {s} outside [0, 1]")
    return traj.states[int(math.floor(s * traj.N + 0.5))]


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    N: int
    T: float
    predictions: np.ndarray | None
    cls_drift: np.ndarray | None
    agreement: float | None
    accuracy: float | None = None
    error: str | None = None


def _final_cls(x0, field, N, T) -> np.ndarray:
    final = euler_integrate(x0, field, N, T, record=False).final
    return np.asarray(final)[..., 0, :]


def _sweep(x0, field, grid, head, ref, labels) -> list[SweepRow]:
    ref_cls = _final_cls(x0, field, *ref)
    ref_pred = np.argmax(head(ref_cls), axis=-1)
    rows = []
    for N, T in grid:
        try:
            cls = _final_cls(x0, field, N, T)
        except DivergenceError as e:
            rows.append(SweepRow(N, T, None, None, None, None, f"diverged at step {e.step}"))
            continue
        pred = np.argmax(head(cls), axis=-1)
        drift = np.linalg.norm(cls - ref_cls, axis=-1)
        acc = None if labels is None else float(np.mean(pred == labels))
        rows.append(SweepRow(N, T, pred, drift, float(np.mean(pred == ref_pred)), acc))
    return rows


def step_sweep(
    x0,
    field: Field,
    N_list: Sequence[int],
    T: float,
    head: Callable[[np.ndarray], np.ndarray],
    N_ref: int = DEFAULT_STEPS,
    labels=None,
) -> list[SweepRow]:
    """Re-integrate at each step count and compare with the training step count.

    ``head`` maps CLS rows ``(..., D)`` to logits.  ``cls_drift`` is the
    per-sample distance to the CLS obtained with ``N_ref`` steps; ``agreement``
    is the fraction of samples whose prediction matches the ``N_ref`` one.
    Divergent rows carry an error message instead of aborting the sweep.
    """
    if not len(N_list):
        raise dc.ContractError("N_list is empty")
    return _sweep(x0, field, [(int(n), T) for n in N_list], head, (N_ref, T), labels)


def horizon_sweep(
    x0,
    field: Field,
    T_list: Sequence[float],
    N_per_T: Sequence[int],
    head: Callable[[np.ndarray], np.ndarray],
    ref: tuple[int, float] = (DEFAULT_STEPS, DEFAULT_HORIZON),
    labels=None,
) -> list[SweepRow]:
    """Evaluate every ``(T, N)`` pair of the grid against the ``ref = (N, T)`` run."""
    if not len(T_list) or not len(N_per_T):
        raise dc.ContractError("empty horizon grid")
    grid = [(int(n), float(t)) for t in T_list for n in N_per_T]
    return _sweep(x0, field, grid, head, ref, labels)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "T", "agreement", "accuracy", "mean_cls_drift", "error"])
    for r in rows:
        drift = "" if r.cls_drift is None else repr(float(np.mean(r.cls_drift)))
        w.writerow([
            r.N,
            repr(r.T),
            "" if r.agreement is None else repr(r.agreement),
            "" if r.accuracy is None else repr(r.accuracy),
            drift,
            r.error or "",
        ])
    return buf.getvalue()


def trajectory_csv(traj: Trajectory) -> str:
    """CLS trajectory as CSV: ``step, t, cls_0 .. cls_{D-1}``.

    States are ``(n, D)`` or a batch holding one sample.  Unrecorded
    trajectories list only the first and final steps.
    """
    states = [np.asarray(s.data if isinstance(s, Tensor) else s) for s in traj.states]
    steps = list(range(traj.N + 1)) if traj.recorded else [0, traj.N]
    dim = states[0].shape[-1]
    if states[0].ndim < 2 or states[0][..., 0, :].size != dim:
        raise dc.ContractError(f"need a single-sample trajectory, got states of shape {states[0].shape}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t"] + [f"cls_{i}" for i in range(dim)])
    for n, s in zip(steps, states):
        w.writerow([n, repr(n * traj.dt)] + [repr(float(v)) for v in s[..., 0, :].reshape(-1)])
    return buf.getvalue()


def write_trajectory_csv(path: str | os.PathLike, traj: Trajectory) -> None:
    atomic_write_text(path, trajectory_csv(traj))
