"""Stability diagnostics for the learned flow.

Jacobian-vector products use forward differences; vector-Jacobian products go
through the tape.  Norms of token states treat the whole ``(n_tokens, D)``
matrix as one vector: Euclidean distances are Frobenius norms, and the
acceleration bound ``C_N`` uses the largest absolute entry.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import diffcore as dc
from .diffcore import Tensor
from .dynamics import HeadMaps, OdeBlockParams, spectral_norm
from .integrator import Field, Trajectory, as_field, euler_integrate

JVP_STEP = 1e-6
CN_STEP = 1e-5


def _eval(f, x: np.ndarray) -> np.ndarray:
    return f(Tensor(x)).data


def jvp_fd(f, x: np.ndarray, v: np.ndarray, h: float = JVP_STEP, fx: np.ndarray | None = None) -> np.ndarray:
    """Forward-difference ``J_f(x) v``."""
    if fx is None:
        fx = _eval(f, x)
    return (_eval(f, x + h * v) - fx) / h


def vjp(f, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``u^T J_f(x)`` by reverse-mode differentiation."""
    xt = Tensor(x, requires_grad=True)
    with dc.Graph() as g:
        y = f(xt)
    dc.pullback(g, y, u)
    return np.zeros_like(x) if xt.grad is None else xt.grad


def jacobian_norm(f, x: np.ndarray, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> float:
    """``||J_f(x)||_2`` by power iteration on ``J^T J``."""
    x = np.asarray(x, dtype=np.float64)
    fx = _eval(f, x)
    v = np.random.default_rng(seed).standard_normal(x.shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        jv = jvp_fd(f, x, v, fx=fx)
        new = float(np.linalg.norm(jv))
        u = vjp(f, x, jv)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return new
        v = u / nu
        if abs(new - sigma) <= tol * max(new, 1e-300):
            sigma = new
            break
        sigma = new
    return sigma


def local_lipschitz(
    field: Field,
    x0,
    eps: float = 1e-2,
    n_samples: int = 4,
    seed: int = 0,
    iters: int = 100,
) -> float:
    """Largest Jacobian spectral norm over ``x0`` and random points of the eps-ball.

    The first sampled point is ``x0`` itself; the others are uniform in the ball.
    """
    if eps <= 0 or n_samples < 1:
        raise dc.ContractError("eps must be positive and n_samples >= 1")
    f = as_field(field)
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = 0.0
    for i in range(n_samples):
        x = x0
        if i:
            u = rng.standard_normal(x0.shape)
            u /= np.linalg.norm(u)
            x = x0 + eps * rng.uniform() ** (1.0 / x0.size) * u
        best = max(best, jacobian_norm(f, x, iters=iters, seed=seed + i))
    return best


def jasmin_loss(maps: Sequence, k: int = 2) -> Tensor:
    """Sum over recorded maps and heads of ``max_i log(g_1(P_i) / g_k(P_i))``.

    ``g_j`` is the j-th largest entry of attention row ``P_i``.  Each element of
    ``maps`` is a :class:`HeadMaps` or a ``(..., H, n, n)`` tensor; leading
    batch axes are averaged.
    """
    if k <= 1:
        raise dc.ContractError("k must be > 1")
    total = None
    for m in maps:
        P = m.P if isinstance(m, HeadMaps) else dc.as_tensor(m)
        if P.shape[-1] < k:
            raise dc.ContractError(f"attention rows have {P.shape[-1]} entries, need >= {k}")
        srt = dc.sort_desc(P)
        ratio = dc.sub(dc.log(srt[..., 0]), dc.log(srt[..., k - 1]))
        worst = dc.amax(ratio, axis=-1)  # (..., H)
        term = dc.sum(worst, axis=-1)
        if term.ndim:
            term = dc.mean(term)
        total = term if total is None else dc.add(total, term)
    return Tensor(0.0) if total is None else total


def bound_prop1(L: float, c_n: float, N: int) -> float:
    """Euler approximation-error bound: ``e^(L-1) c_n / (2 N L)``, or ``c_n / (2N)`` at L = 0."""
    if L < 0 or c_n < 0 or N < 1:
        raise dc.ContractError("need L >= 0, c_n >= 0, N >= 1")
    if L > 0:
        return math.exp(L - 1.0) * c_n / (2.0 * N * L)
    return c_n / (2.0 * N)


@dataclass(frozen=True)
class BoundInputs:
    R: float
    L: float
    N: int
    d: int
    norm_wv: float
    norm_wkq: float

    def __post_init__(self):
        if not (self.R > 0 and self.L > 0 and self.N >= 1 and self.d >= 1):
            raise dc.ContractError(f"invalid bound inputs {self}")


def bound_closed_form(b: BoundInputs) -> float:
    """Closed-form error bound from radius, Lipschitz constant and weight norms."""
    pre = (math.exp(b.L) - 1.0) / (2.0 * b.L * b.N)
    sd = math.sqrt(b.d)
    return pre * (b.R**2 * b.norm_wv * (b.R * b.norm_wkq + sd)) / (b.N**2 * sd)


def block_norms(p: OdeBlockParams) -> tuple[float, float]:
    """``(max_h ||W_V^h||_2, max_h ||W_K^h (W_Q^h)^T||_2)``."""
    wv = max(spectral_norm(p.wv.data[h]) for h in range(p.heads))
    wkq = max(
        spectral_norm(p.wk.data[h] @ p.wq.data[h].T) for h in range(p.heads)
    )
    return wv, wkq


def closed_form_for(p: OdeBlockParams, N: int, R: float = 10.0, L: float = 0.5) -> float:
    wv, wkq = block_norms(p)
    return bound_closed_form(BoundInputs(R, L, N, p.head_dim, wv, wkq))


def estimate_cn_sup(field: Field, traj: Trajectory, h: float = CN_STEP, norm: str = "l2") -> float:
    """``max_n ||J(x_n) psi(x_n)||`` over the recorded states.

    ``norm="l2"`` measures each state's second derivative in the Euclidean
    norm, the norm the discretization error uses; ``norm="max"`` takes the
    largest absolute entry instead.  The directional derivative is a central
    difference along ``psi(x_n)``, scaled so the perturbation has size ``h``.
    """
    if not traj.recorded:
        raise dc.ContractError("trajectory must be recorded")
    if traj.N < 2:
        raise dc.ContractError("need N >= 2")
    if norm not in ("l2", "max"):
        raise dc.ContractError(f"norm must be 'l2' or 'max', got {norm!r}")
    measure = np.linalg.norm if norm == "l2" else (lambda a: np.max(np.abs(a)))
    f = as_field(field)
    best = 0.0
    for x in traj.states:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        v = _eval(f, x)
        vn = float(measure(v))
        if vn == 0.0:
            continue
        u = v / vn
        dd = (_eval(f, x + h * u) - _eval(f, x - h * u)) / (2.0 * h) * vn
        best = max(best, float(measure(dd)))
    return best


def empirical_err(field: Field, x0, N_coarse: int, N_ref: int, T: float = 1.0) -> float:
    """Largest distance between coarse Euler states and a fine reference run."""
    if N_ref < 8 * N_coarse or N_ref % N_coarse:
        raise dc.ContractError("N_ref must be a multiple of N_coarse and >= 8 * N_coarse")
    x0 = np.asarray(x0, dtype=np.float64)
    coarse = euler_integrate(x0, field, N_coarse, T).states
    ref = euler_integrate(x0, field, N_ref, T).states
    m = N_ref // N_coarse
    return max(float(np.linalg.norm(ref[n * m] - coarse[n])) for n in range(N_coarse + 1))


def lyapunov_max(
    field: Field,
    x0,
    N: int = 24,
    T: float = 1.0,
    renorm_every: int = 1,
    seed: int = 0,
    h: float = JVP_STEP,
) -> tuple[float, float]:
    """Maximal Lyapunov exponent along the Euler trajectory (Benettin).

    A unit perturbation follows the linearized Euler map; its growth is
    renormalized every ``renorm_every`` steps and the logs accumulated.
    Returns ``(lambda_max, lyapunov_time)`` with ``inf`` time for
    non-positive exponents.
    """
    if not (N >= renorm_every >= 1):
        raise dc.ContractError("need N >= renorm_every >= 1")
    f = as_field(field)
    x = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dx = rng.standard_normal(x.shape)
    dx /= np.linalg.norm(dx)
    base = float(np.linalg.norm(dx))  # growth is measured against this, so no change gives log 1 = 0
    dt = T / N
    log_sum = 0.0
    for n in range(N):
        fx = _eval(f, x)
        dx = dx + dt * jvp_fd(f, x, dx, h=h, fx=fx)
        x = x + dt * fx
        r = float(np.linalg.norm(dx))
        if (n + 1) % renorm_every == 0 or n == N - 1 or r < 1e-300:
            if r == 0.0:
                log_sum += math.log(1e-300)
                dx = rng.standard_normal(x.shape)
                dx /= np.linalg.norm(dx)
                base = float(np.linalg.norm(dx))
                continue
            log_sum += math.log(r / base)
            dx = dx / r
            base = float(np.linalg.norm(dx))
    lam = log_sum / T
    return lam, (1.0 / lam if lam > 0 else math.inf)


def separation_ratio(field: Field, x0, delta, N: int = 24, T: float = 1.0) -> float:
    """``||x_N - x'_N|| / ||x_0 - x'_0||`` for ``x'_0 = x_0 + delta``."""
    x0 = np.asarray(x0, dtype=np.float64)
    a = euler_integrate(x0, field, N, T, record=False).final
    b = euler_integrate(x0 + delta, field, N, T, record=False).final
    return float(np.linalg.norm(a - b) / np.linalg.norm(delta))


# ---------------------------------------------------------------- reports


@dataclass
class StabilityReport:
    lipschitz_local: float
    c_n_sup: float
    bound_prop1: float
    bound_closed_form: float
    err_empirical: float
    lambda_max: float
    lyapunov_time: float

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "lipschitz_local": d["lipschitz_local"],
            "cn_sup": d["c_n_sup"],
            "bound_prop1": d["bound_prop1"],
            "bound_closed_form": d["bound_closed_form"],
            "err_empirical": d["err_empirical"],
            "lambda_max": d["lambda_max"],
            "lyapunov_time": "inf" if math.isinf(self.lyapunov_time) else self.lyapunov_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def stability_report(
    p: OdeBlockParams,
    x0,
    N: int = 24,
    T: float = 1.0,
    R: float = 10.0,
    L_assumed: float = 0.5,
    ref_factor: int = 64,
    eps: float = 1e-2,
    n_samples: int = 4,
    seed: int = 0,
) -> StabilityReport:
    """All diagnostics for one initial state under the block ``p``."""
    x0 = np.asarray(x0, dtype=np.float64)
    L = local_lipschitz(p, x0, eps=eps, n_samples=n_samples, seed=seed)
    traj = euler_integrate(x0, p, N, T)
    cn = estimate_cn_sup(p, traj) if N >= 2 else 0.0
    lam, ltime = lyapunov_max(p, x0, N, T, seed=seed)
    return StabilityReport(
        lipschitz_local=L,
        c_n_sup=cn,
        bound_prop1=bound_prop1(L, cn, N),
        bound_closed_form=closed_form_for(p, N, R, L_assumed),
        err_empirical=empirical_err(p, x0, N, ref_factor * N, T),
        lambda_max=lam,
        lyapunov_time=ltime,
    )


@dataclass
class ClassLyapunov:
    label: int
    mean_lambda: float
    accuracy: float
    count: int


def per_class_lyapunov(
    p: OdeBlockParams,
    x0s: np.ndarray,
    labels: np.ndarray,
    predictions: np.ndarray,
    N: int = 24,
    T: float = 1.0,
    num_classes: int | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[ClassLyapunov]:
    """Mean maximal exponent and accuracy per class.

    ``x0s`` are the embedded initial states, one per sample.  Classes without
    samples are skipped with a warning.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)

    def one(i):
        return lyapunov_max(p, x0s[i], N, T, seed=seed)[0]

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            lams = np.array(list(ex.map(one, range(len(labels)))))
    else:
        lams = np.array([one(i) for i in range(len(labels))])
    n_cls = int(num_classes if num_classes is not None else labels.max() + 1)
    rows = []
    for c in range(n_cls):
        sel = labels == c
        if not sel.any():
            warnings.warn(f"class {c} has no samples; omitted")
            continue
        rows.append(ClassLyapunov(c, float(lams[sel].mean()), float(np.mean(predictions[sel] == c)),
                                  int(sel.sum())))
    return rows


def lyapunov_accuracy_spearman(rows: Sequence[ClassLyapunov]) -> float:
    """Rank correlation between per-class mean exponent and accuracy (nan if undefined)."""
    if len(rows) < 2:
        return math.nan
    lam = [r.mean_lambda for r in rows]
    acc = [r.accuracy for r in rows]
    if np.ptp(lam) == 0 or np.ptp(acc) == 0:
        return math.nan
    return float(stats.spearmanr(lam, acc).statistic)


def per_class_csv(rows: Sequence[ClassLyapunov]) -> str:
    lines = ["class,mean_lambda,accuracy,count"]
    lines += [f"{r.label},{r.mean_lambda!r},{r.accuracy!r},{r.count}" for r in rows]
    return "\n".join(lines) + "\n"
