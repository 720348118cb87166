"""Clock-transition location, characterisation and model calibration.

Fields in this module are in mT, frequencies in GHz. Level indices are
0-based, so the 8th and 9th levels in ascending order are the pair ``(7, 8)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize, minimize_scalar

from .constants import MT
from .spin_core import SpinSystemParams, build_hamiltonian, fix_phases

CT_PAIR = (7, 8)
PRESCAN_STEP_MT = 0.1
FD_STEP_MT = 0.01
#: Gaps below this (GHz) count as true crossings, not anticrossings.
MIN_CT_GAP = 1e-3


class GridTooCoarseError(RuntimeError):
    """Adiabatic tracking lost state identity between consecutive grid points."""


class CalibrationError(RuntimeError):
    def __init__(self, message: str, best_residual: float, best_params: SpinSystemParams | None = None):
        super().__init__(f"{message} (best residual {best_residual:.3e})")
        self.best_residual = best_residual
        self.best_params = best_params


@dataclass(frozen=True)
class CTPoint:
    b_min_mt: float
    f_ct: float
    level_pair: tuple[int, int]
    df_db: float
    d2f_db2: float


def field_terms(params: SpinSystemParams, voltage: float = 0.0, direction=(0.0, 0.0, 1.0)):
    """Return ``(H0, H1)`` with ``H(B) = H0 + B[T] * H1`` along ``direction``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    h0 = build_hamiltonian(params, np.zeros(3), voltage).matrix
    h1 = build_hamiltonian(params, d, voltage).matrix - h0
    return h0, h1


def energies_on_grid(params: SpinSystemParams, b_mt, voltage: float = 0.0) -> NDArray[np.float64]:
    """Ascending eigenvalues at each field (mT, along z); shape ``(n_fields, dim)``."""
    h0, h1 = field_terms(params, voltage)
    b = np.atleast_1d(np.asarray(b_mt, dtype=float)) * MT
    return np.linalg.eigvalsh(h0[None] + b[:, None, None] * h1[None])


def gap_function(params: SpinSystemParams, level_pair=CT_PAIR, voltage: float = 0.0) -> Callable:
    """Vectorised ``f(B_mT) = E_hi - E_lo`` for the ascending-order pair."""
    h0, h1 = field_terms(params, voltage)
    lo, hi = level_pair

    def gap(b_mt):
        b = np.atleast_1d(np.asarray(b_mt, dtype=float)) * MT
        ev = np.linalg.eigvalsh(h0[None] + b[:, None, None] * h1[None])
        out = ev[:, hi] - ev[:, lo]
        return out if np.ndim(b_mt) else float(out[0])

    return gap


def central_derivatives(fn: Callable, x: float, h: float = FD_STEP_MT) -> tuple[float, float]:
    fm, f0, fp = (float(v) for v in np.atleast_1d(fn(np.array([x - h, x, x + h]))))
    return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2


# --------------------------------------------------------------------------


@dataclass
class LevelDiagram:
    b_mt: NDArray[np.float64]
    energies: NDArray[np.float64]  # ascending at each field
    tracked: NDArray[np.float64]  # columns follow adiabatic branches
    order: NDArray[np.int64]  # tracked[:, k] = energies[i, order[i, k]]
    min_overlap: float


def _clusters(values: NDArray, tol: float) -> NDArray[np.int64]:
    labels = np.zeros(len(values), dtype=int)
    for i in range(1, len(values)):
        labels[i] = labels[i - 1] + (values[i] - values[i - 1] > tol)
    return labels


def level_diagram(
    params: SpinSystemParams,
    b_mt: Sequence[float],
    voltage: float = 0.0,
    overlap_threshold: float = 0.9,
) -> LevelDiagram:
    """Energies on a monotone field grid with overlap-based branch tracking.

    Degenerate clusters are compared as subspaces, so exact degeneracies (for
    instance at zero field) do not count as lost identity.
    """
    from scipy.optimize import linear_sum_assignment

    b = np.asarray(b_mt, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("field grid must be a non-empty 1-D sequence")
    if b.size > 1 and not (np.all(np.diff(b) > 0) or np.all(np.diff(b) < 0)):
        raise ValueError("field grid must be strictly monotone")
    h0, h1 = field_terms(params, voltage)
    ev, vecs = np.linalg.eigh(h0[None] + (b * MT)[:, None, None] * h1[None])
    n, dim = ev.shape
    order = np.zeros((n, dim), dtype=int)
    order[0] = np.arange(dim)
    min_overlap = 1.0
    scale = max(1.0, float(np.abs(ev).max()))
    prev_vec = vecs[0]
    prev_cl = _clusters(ev[0], 1e-9 * scale)
    for i in range(1, n):
        cl = _clusters(ev[i], 1e-9 * scale)
        ov = np.abs(prev_vec.conj().T @ vecs[i]) ** 2  # (tracked k, new j)
        rows, cols = linear_sum_assignment(-ov)
        assign = np.empty(dim, dtype=int)
        assign[rows] = cols
        for k in range(dim):
            j = assign[k]
            ko = prev_cl == prev_cl[k]
            jn = cl == cl[j]
            w = ov[np.ix_(ko, jn)].sum() / min(ko.sum(), jn.sum())
            min_overlap = min(min_overlap, min(w, 1.0))
            if w < overlap_threshold:
                raise GridTooCoarseError(
                    f"overlap {w:.3f} < {overlap_threshold} between {b[i - 1]:g} and {b[i]:g} mT; refine the grid"
                )
        order[i] = assign
        prev_vec = vecs[i][:, assign]
        prev_cl = cl[assign]
    tracked = np.take_along_axis(ev, order, axis=1)
    return LevelDiagram(b, ev, tracked, order, min_overlap)


def find_anticrossings(
    params: SpinSystemParams,
    level_pair: tuple[int, int] = CT_PAIR,
    b_range: tuple[float, float] = (0.0, 50.0),
    voltage: float = 0.0,
    step: float = PRESCAN_STEP_MT,
    fd_step: float = FD_STEP_MT,
    xtol: float = 1e-5,
) -> list[CTPoint]:
    """Local gap minima of a level pair inside ``b_range`` (mT).

    A pre-scan at ``step`` brackets interior minima; each is refined by
    bounded Brent minimisation to ``xtol`` mT. Derivatives use central
    differences with ``fd_step``. No minimum in range gives an empty list.
    """
    lo, hi = sorted(b_range)
    n = max(int(np.ceil((hi - lo) / step)), 2) + 1
    grid = np.linspace(lo, hi, n)
    gap = gap_function(params, level_pair, voltage)
    g = gap(grid)
    out = []
    for i in range(1, n - 1):
        if g[i] <= g[i - 1] and g[i] < g[i + 1]:
            res = minimize_scalar(
                lambda x: gap(x), bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                options={"xatol": xtol},
            )
            bmin = float(res.x)
            d1, d2 = central_derivatives(gap, bmin, fd_step)
            out.append(CTPoint(bmin, float(gap(bmin)), tuple(level_pair), d1, d2))
    return out


def first_ct(params: SpinSystemParams, b_range=(0.0, 50.0), **kw) -> CTPoint | None:
    pts = [p for p in find_anticrossings(params, b_range=b_range, **kw) if p.f_ct > MIN_CT_GAP]
    if not pts:
        return None
    return min(pts, key=lambda p: abs(p.b_min_mt))


# --------------------------------------------------------------------------
# Calibration

OBSERVABLES = ("b_min_mt", "f_ct")


@dataclass(frozen=True)
class CalibrationTarget:
    """Named observables mapped to ``(target, weight)``; see ``OBSERVABLES``."""

    targets: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        if not self.targets:
            raise ValueError("at least one calibration target is required")
        for name, (_, w) in self.targets.items():
            if name not in OBSERVABLES:
                raise ValueError(f"unknown observable {name!r}; known: {OBSERVABLES}")
            if not w > 0:
                raise ValueError(f"weight for {name!r} must be positive")


@dataclass
class CalibrationResult:
    params: SpinSystemParams
    residual: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    observables: dict[str, float] = field(default_factory=dict)

    def report(self) -> str:
        lines = [f"residual: {self.residual:.6e}", f"iterations: {self.iterations}"]
        lines += [f"observable {k}: {v:.10g}" for k, v in self.observables.items()]
        lines += [f"history[{i}]: {h:.6e}" for i, h in enumerate(self.history)]
        return "\n".join(lines)


def get_param(params: SpinSystemParams, name: str) -> float:
    if name == "gap":
        return params.cf.get((4, 4), 0.0)
    if name.startswith("cf:"):
        k, q = (int(v) for v in name[3:].split(","))
        return params.cf.get((k, q), 0.0)
    return float(getattr(params, name))


def set_param(params: SpinSystemParams, name: str, value: float) -> SpinSystemParams:
    if name == "gap":
        return params.with_cf((4, 4), value)
    if name.startswith("cf:"):
        k, q = (int(v) for v in name[3:].split(","))
        return params.with_cf((k, q), value)
    return params.replace(**{name: value})


def ct_observables(params: SpinSystemParams, b_range=(0.0, 50.0), step=PRESCAN_STEP_MT) -> dict[str, float]:
    pt = first_ct(params, b_range=b_range, step=step)
    if pt is None:
        return {"b_min_mt": np.nan, "f_ct": np.nan}
    return {"b_min_mt": pt.b_min_mt, "f_ct": pt.f_ct}


def calibrate(
    params: SpinSystemParams,
    targets: CalibrationTarget,
    free_params: Sequence[str],
    tol: float = 1e-7,
    max_iter: int = 400,
    b_range=(0.0, 50.0),
    step: float = PRESCAN_STEP_MT,
) -> CalibrationResult:
    """Fit ``free_params`` so the first-CT observables hit ``targets``.

    Residuals are weighted relative errors (absolute where the target is 0);
    the reported residual is their RMS. Nelder-Mead on parameters scaled by
    their starting values. ``CalibrationError`` carries the best residual when
    ``tol`` is not reached within ``max_iter`` iterations.
    """
    free = list(free_params)
    if not free:
        raise ValueError("no free parameters")
    if len(free) > len(targets.targets):
        raise ValueError("more free parameters than targets")
    x0 = np.array([get_param(params, p) for p in free])
    scale = np.where(x0 != 0, np.abs(x0), 1.0)
    names = list(targets.targets)

    def build(u):
        p = params
        for name, val in zip(free, u * scale):
            p = set_param(p, name, float(val))
        return p

    cache: dict[tuple, float] = {}

    def residual(u) -> float:
        key = tuple(np.round(u, 15))
        if key in cache:
            return cache[key]
        obs = ct_observables(build(u), b_range, step)
        r = []
        for name in names:
            target, w = targets.targets[name]
            v = obs[name]
            r.append(w * ((v - target) / abs(target) if target != 0 else v - target))
        r = np.asarray(r)
        val = float(np.sqrt(np.mean(r**2))) if np.all(np.isfinite(r)) else np.inf
        cache[key] = val
        return val

    u0 = x0 / scale
    history = [residual(u0)]
    if history[0] < tol:
        return CalibrationResult(params, history[0], history, 0, ct_observables(params, b_range, step))

    def callback(uk):
        history.append(min(residual(uk), history[-1]))

    res = minimize(
        residual, u0, method="Nelder-Mead", callback=callback,
        options={"xatol": 1e-12, "fatol": tol * 1e-3, "maxiter": max_iter, "initial_simplex": None},
    )
    best = build(res.x)
    best_r = residual(res.x)
    if not best_r < tol:
        raise CalibrationError("calibration did not converge", best_r, best)
    return CalibrationResult(best, best_r, history, int(res.nit), ct_observables(best, b_range, step))


# --------------------------------------------------------------------------
# Higher-order flatness


@dataclass
class ProtectionProfile:
    b_mt: NDArray[np.float64]
    f: NDArray[np.float64]
    df_db: NDArray[np.float64]
    d2f_db2: NDArray[np.float64]

    def flat_points(self, tol1: float, tol2: float) -> NDArray[np.bool_]:
        """Points where both the first and second derivatives are below threshold."""
        return (np.abs(self.df_db) < tol1) & (np.abs(self.d2f_db2) < tol2)


def protection_profile_fn(freq: Callable, b_mt: Sequence[float], h: float = FD_STEP_MT) -> ProtectionProfile:
    """Derivative table of an arbitrary transition frequency ``freq(B_mT)``."""
    b = np.asarray(b_mt, dtype=float)
    f0 = np.array([float(freq(x)) for x in b])
    fp = np.array([float(freq(x + h)) for x in b])
    fm = np.array([float(freq(x - h)) for x in b])
    return ProtectionProfile(b, f0, (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h**2)


def protection_profile(
    params: SpinSystemParams, transition=CT_PAIR, b_mt: Sequence[float] = (24.0,), voltage: float = 0.0,
    h: float = FD_STEP_MT,
) -> ProtectionProfile:
    return protection_profile_fn(gap_function(params, transition, voltage), b_mt, h)
