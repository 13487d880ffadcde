"""Control-indexed coefficient families and the Cordes machinery.

A family holds the callables (A, b, c, f) indexed by a control alpha from a
finite ControlGrid, together with ellipticity diagnostics gathered from a
sampling sweep.  On top of it live:

* ``cordes_slack``  -- sampled verification of the Cordes inequality
      |A|^2 + |b|^2/(2 lam) + c^2/lam^2 <= (tr A + c/lam)^2 / (n + delta),
* ``select_lambda`` -- grid search producing a CordesCertificate (lam, delta),
* ``gamma_at``      -- the renormalization gamma = (tr A + c/lam) / lhs,
* ``bellman_max``   -- the pointwise Bellman maximum
      F_gamma = sup_alpha gamma^alpha (-A:M - b.q + c v - f),
* ``l_lambda``      -- the linear operator -div w + lam u.

Callables are wrapped so that both pointwise and numpy-vectorized
implementations work; all operations are pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ControlGrid",
    "CoefficientFamily",
    "CordesCertificate",
    "make_control_grid",
    "make_family",
    "cordes_slack",
    "select_lambda",
    "gamma_at",
    "bellman_max",
    "l_lambda",
    "uniform_y_grid",
    "get_family",
    "FAMILY_REGISTRY",
    "BENCHMARK_B",
]

_DIM = 2


@dataclass(frozen=True)
class ControlGrid:
    """Finite discretization of the compact control set."""

    values: np.ndarray

    def __len__(self):
        return len(self.values)


def make_control_grid(values) -> ControlGrid:
    vals = np.unique(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise ValueError("control grid must be nonempty")
    vals.setflags(write=False)
    return ControlGrid(vals)


def default_control_grid(affine_in_alpha: bool, n: int = 33) -> ControlGrid:
    """Endpoints for affine families, a uniform grid otherwise (Lambda=[0,1])."""
    if affine_in_alpha:
        return make_control_grid([0.0, 1.0])
    return make_control_grid(np.linspace(0.0, 1.0, n))


def _vectorized(fn, trailing):
    """Wrap a coefficient callable so it accepts batched y of shape (..., 2)."""

    def call(x, y, alpha):
        y = np.asarray(y, dtype=float)
        batch = y.shape[:-1]
        want = batch + trailing
        try:
            out = np.asarray(fn(x, y, alpha), dtype=float)
            if out.shape == want:
                return out
            if out.shape == trailing:   # constant coefficient
                return np.broadcast_to(out, want).copy()
        except Exception:
            pass
        flat = y.reshape(-1, _DIM)
        out = np.array([fn(x, p, alpha) for p in flat], dtype=float)
        return out.reshape(want)

    return call


@dataclass(frozen=True)
class CoefficientFamily:
    """Coefficients (A, b, c, f) over a discretized control set.

    ``A(x, y, alpha)`` returns a symmetric 2x2 matrix (batched over y),
    ``b`` a 2-vector, ``c`` a positive scalar, ``f`` a scalar.  For cell
    problems ``x`` is a frozen macroscopic point; x-independent families
    ignore it.  ``zeta1``/``zeta2`` are ellipticity bounds and ``c_min`` the
    smallest zeroth-order value observed in the construction sweep.
    """

    A: callable
    b: callable
    c: callable
    f: callable
    controls: ControlGrid
    x_dependent: bool = False
    affine_in_alpha: bool = False
    name: str | None = None
    zeta1: float = field(default=np.nan)
    zeta2: float = field(default=np.nan)
    c_min: float = field(default=np.nan)


def uniform_y_grid(n: int) -> np.ndarray:
    """n x n lattice {i/n} x {j/n} covering the periodicity cell."""
    g = np.arange(n) / n
    Y1, Y2 = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([Y1.ravel(), Y2.ravel()])


def make_family(A, b, c, f, controls: ControlGrid | None = None,
                x_dependent: bool = False, affine_in_alpha: bool = False,
                name: str | None = None, sweep_n: int = 16,
                sweep_x=None) -> CoefficientFamily:
    """Build a CoefficientFamily and record ellipticity diagnostics.

    The sweep samples A, c on a ``sweep_n`` x ``sweep_n`` grid for every
    control; nonsymmetric A or nonpositive c raise immediately, while a
    failed ellipticity bound is only recorded (``zeta1 <= 0``) so that
    ``select_lambda`` can report it with a proper diagnostic.
    """
    if controls is None:
        controls = default_control_grid(affine_in_alpha)
    Av = _vectorized(A, (_DIM, _DIM))
    bv = _vectorized(b, (_DIM,))
    cv = _vectorized(c, ())
    fv = _vectorized(f, ())

    ys = uniform_y_grid(sweep_n)
    xs = [sweep_x] if (sweep_x is not None or not x_dependent) else [
        np.array([0.0, 0.0]), np.array([0.5, 0.5]), np.array([1.0, 1.0])]
    zeta1, zeta2 = np.inf, -np.inf
    c_min = np.inf
    for x in xs:
        for alpha in controls.values:
            Am = Av(x, ys, alpha)
            if not np.allclose(Am, np.swapaxes(Am, -1, -2), atol=1e-12):
                raise ValueError("A must be symmetric")
            tr = Am[..., 0, 0] + Am[..., 1, 1]
            det = (Am[..., 0, 0] * Am[..., 1, 1]
                   - Am[..., 0, 1] * Am[..., 1, 0])
            disc = np.sqrt(np.maximum(tr ** 2 - 4.0 * det, 0.0))
            zeta1 = min(zeta1, float(np.min((tr - disc) / 2.0)))
            zeta2 = max(zeta2, float(np.max((tr + disc) / 2.0)))
            cvals = cv(x, ys, alpha)
            c_min = min(c_min, float(np.min(cvals)))
    if c_min <= 0.0:
        raise ValueError(f"zeroth-order coefficient must be positive "
                         f"(sampled min {c_min:g})")
    return CoefficientFamily(Av, bv, cv, fv, controls, x_dependent,
                             affine_in_alpha, name, zeta1, zeta2, c_min)


@dataclass(frozen=True)
class CordesCertificate:
    """Verified Cordes parameters with the sampled slack margin."""

    lam: float
    delta: float
    margin: float
    sample_description: str = ""

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.margin < 0.0:
            raise ValueError("certificate margin must be nonnegative")


def _cordes_samples(family: CoefficientFamily, y_points, x=None):
    """Per-(alpha, point) ingredients |A|^2, tr A, |b|^2, c of the condition."""
    ys = np.asarray(y_points, dtype=float)
    if ys.ndim != 2 or ys.shape[1] != _DIM:
        raise ValueError("y_points must have shape (n, 2)")
    if ys.shape[0] == 0:
        raise ValueError("sample grid must be nonempty")
    fa2, tra, b2, cs = [], [], [], []
    for alpha in family.controls.values:
        Am = family.A(x, ys, alpha)
        bm = family.b(x, ys, alpha)
        fa2.append(np.sum(Am ** 2, axis=(-2, -1)))
        tra.append(Am[..., 0, 0] + Am[..., 1, 1])
        b2.append(np.sum(bm ** 2, axis=-1))
        cs.append(family.c(x, ys, alpha))
    return (np.concatenate(fa2), np.concatenate(tra),
            np.concatenate(b2), np.concatenate(cs))


def cordes_slack(family: CoefficientFamily, lam: float, delta: float,
                 y_points, x=None) -> float:
    """Smallest sampled slack RHS - LHS of the Cordes inequality.

    A nonnegative value certifies the condition on the sample grid.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    fa2, tra, b2, cs = _cordes_samples(family, y_points, x)
    lhs = fa2 + b2 / (2.0 * lam) + cs ** 2 / lam ** 2
    rhs = (tra + cs / lam) ** 2 / (_DIM + delta)
    return float(np.min(rhs - lhs))


_DELTA_CAP = 1.0 - 1e-9
_DELTA_CUSHION = 1e-10


def select_lambda(family: CoefficientFamily, y_points=None, x=None,
                  lam_grid=None) -> CordesCertificate:
    """Grid-search (lam, delta) maximizing delta with nonnegative slack.

    For each lam, the largest admissible delta is
    min over samples of (tr A + c/lam)^2 / LHS(lam) - n; the returned pair
    maximizes delta over the lam grid (ties broken by the smallest lam) and
    is shaved by a tiny cushion so the reported margin stays nonnegative
    under roundoff.
    """
    if not np.isfinite(family.zeta1) or family.zeta1 <= 0.0:
        raise ValueError(
            f"family is not uniformly elliptic (sampled zeta1 = "
            f"{family.zeta1:g}); the Cordes condition cannot hold")
    if y_points is None:
        y_points = uniform_y_grid(64)
    if lam_grid is None:
        lam_grid = np.logspace(-3.0, 3.0, 241)
    fa2, tra, b2, cs = _cordes_samples(family, y_points, x)

    best_delta, best_lam = -np.inf, None
    for lam in lam_grid:
        lhs = fa2 + b2 / (2.0 * lam) + cs ** 2 / lam ** 2
        if np.any(lhs <= 0.0):
            continue
        dmax = float(np.min((tra + cs / lam) ** 2 / lhs)) - _DIM
        if dmax > best_delta + 1e-15:
            best_delta, best_lam = dmax, float(lam)
    if best_lam is None or best_delta < 1e-6:
        raise ValueError(
            f"no Cordes certificate found: best sampled delta "
            f"{best_delta:g} over lam in [{lam_grid[0]:g}, {lam_grid[-1]:g}]")
    delta = min(best_delta, _DELTA_CAP)
    delta -= _DELTA_CUSHION * (1.0 + abs(delta))
    margin = cordes_slack(family, best_lam, delta, y_points, x)
    desc = f"{len(y_points)} y-points x {len(family.controls)} controls"
    return CordesCertificate(best_lam, delta, max(margin, 0.0), desc)


def gamma_at(family: CoefficientFamily, certificate: CordesCertificate,
             x, y, alpha):
    """Renormalization gamma(y, alpha) > 0; batched over y."""
    lam = certificate.lam
    ys = np.asarray(y, dtype=float)
    Am = family.A(x, ys, alpha)
    bm = family.b(x, ys, alpha)
    cm = family.c(x, ys, alpha)
    denom = (np.sum(Am ** 2, axis=(-2, -1))
             + np.sum(bm ** 2, axis=-1) / (2.0 * lam) + cm ** 2 / lam ** 2)
    if np.any(denom <= 0.0):
        raise ValueError("nonpositive Cordes denominator: "
                         "ellipticity violated at a sample point")
    return (Am[..., 0, 0] + Am[..., 1, 1] + cm / lam) / denom


def bellman_residual_per_control(family: CoefficientFamily,
                                 certificate: CordesCertificate,
                                 x, ys, M, q, v):
    """gamma^a (-A:M - b.q + c v - f) for every control, stacked on axis 0.

    ``ys`` has shape (n, 2); M, q, v broadcast as (n, 2, 2), (n, 2), (n,).
    """
    ys = np.asarray(ys, dtype=float)
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    rows = []
    for alpha in family.controls.values:
        Am = family.A(x, ys, alpha)
        bm = family.b(x, ys, alpha)
        cm = family.c(x, ys, alpha)
        fm = family.f(x, ys, alpha)
        gam = gamma_at(family, certificate, x, ys, alpha)
        resid = (-np.sum(Am * M, axis=(-2, -1)) - np.sum(bm * q, axis=-1)
                 + cm * v - fm)
        rows.append(gam * resid)
    return np.stack(rows, axis=0)


def bellman_max(family: CoefficientFamily, certificate: CordesCertificate,
                x, y, M, q, v):
    """Pointwise Bellman maximum over the ControlGrid.

    Returns ``(value, alpha)`` for a single point or arrays of values and
    maximizing controls for batched input; ties pick the smallest alpha.
    """
    ys = np.asarray(y, dtype=float)
    single = ys.ndim == 1
    if single:
        ys = ys[None, :]
        M = np.asarray(M, dtype=float)[None, ...]
        q = np.asarray(q, dtype=float)[None, ...]
        v = np.atleast_1d(np.asarray(v, dtype=float))
    vals = bellman_residual_per_control(family, certificate, x, ys, M, q, v)
    idx = np.argmax(vals, axis=0)   # first maximum = smallest alpha
    value = np.take_along_axis(vals, idx[None, :], axis=0)[0]
    alpha = family.controls.values[idx]
    if single:
        return float(value[0]), float(alpha[0])
    return value, alpha


def l_lambda(div_w, u, lam):
    """The linear operator -div w + lam u (elementwise)."""
    return -np.asarray(div_w, dtype=float) + lam * np.asarray(u, dtype=float)


# ----------------------------------------------------------------------------
# named families

BENCHMARK_B = np.array([[2.0, -1.0], [-1.0, 4.0]])
BENCHMARK_B.setflags(write=False)


def _bench_a1(y):
    return (np.sin(2.0 * np.pi * y[..., 0]) ** 2
            * np.cos(2.0 * np.pi * y[..., 1]) ** 2 + 1.0)


def _benchmark_family(oscillating: bool = True) -> CoefficientFamily:
    def A(x, y, alpha):
        y = np.asarray(y, dtype=float)
        mult = 1.0 + alpha * _bench_a1(y) if oscillating \
            else np.ones(y.shape[:-1])
        return mult[..., None, None] * BENCHMARK_B

    def b(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (2,))

    def scalar_one(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.ones(y.shape[:-1])

    name = "fo-benchmark" if oscillating else "fo-benchmark-const"
    return make_family(A, b, scalar_one, scalar_one, affine_in_alpha=True,
                       name=name)


FAMILY_REGISTRY = {
    "fo-benchmark": lambda: _benchmark_family(oscillating=True),
    "fo-benchmark-const": lambda: _benchmark_family(oscillating=False),
}

_family_cache: dict[str, CoefficientFamily] = {}


def get_family(name: str) -> CoefficientFamily:
    """Look up a named coefficient family from the registry."""
    if name not in FAMILY_REGISTRY:
        raise KeyError(f"unknown family {name!r}; "
                       f"known: {sorted(FAMILY_REGISTRY)}")
    if name not in _family_cache:
        _family_cache[name] = FAMILY_REGISTRY[name]()
    return _family_cache[name]
