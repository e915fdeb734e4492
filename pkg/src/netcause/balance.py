"""Distribution-balance measures on (representation, treatment pair) samples.

The entropic transport solver runs in the log domain with epsilon scaling.
Its value is exposed to the autodiff engine as a single op whose gradient
with respect to the cost matrix is the optimal plan (envelope theorem), so
no Sinkhorn iteration is unrolled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .engine import autodiff as ad


class NonConvergence(RuntimeWarning):
    pass


class TooLarge(ValueError):
    pass


class InvalidMass(ValueError):
    pass


@dataclass
class JointSample:
    r: np.ndarray
    t: np.ndarray
    z: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.r = np.atleast_2d(np.asarray(self.r, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        self.mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        n = self.r.shape[0]
        if not (self.t.size == self.z.size == self.mass.size == n):
            raise InvalidMass("r, t, z and mass must have one entry per row")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1) > 1e-9:
            raise InvalidMass("mass must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, r, t, z) -> "JointSample":
        n = np.atleast_2d(r).shape[0]
        return cls(r, t, z, np.full(n, 1.0 / n))

    def __len__(self):
        return self.r.shape[0]

    def points(self, alpha: float = 1.0) -> np.ndarray:
        return np.column_stack([self.r, alpha * self.t, alpha * self.z])


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float
    marginal_error: float = 0.0
    iterations: int = 0


def product_sample(joint: JointSample, seed: int = 0) -> JointSample:
    """Break the r-(t, z) link by permuting treatment pairs jointly; mass becomes uniform."""
    n = len(joint)
    if n < 2:
        raise InvalidMass("product sample needs at least 2 rows")
    perm = np.random.default_rng(seed).permutation(n)
    return JointSample.uniform(joint.r.copy(), joint.t[perm], joint.z[perm])


def cost_matrix(xa: np.ndarray, xb: np.ndarray, metric: str = "sqeuclidean") -> np.ndarray:
    c = ad.sqdist(xa, xb).value
    if metric == "sqeuclidean":
        return c
    if metric == "euclidean":
        return np.sqrt(c)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# entropic transport


def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    # scipy.special.logsumexp is several times slower on the small dense blocks used here
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_log(a, b, C, eps: float, iters: int = 200, tol: float = 1e-9,
                 init=None, scaling: bool = True, stage_iters: int = 50):
    """Log-domain Sinkhorn for min <P, C> + eps KL(P | a b^T).

    Returns (value, P, f, g, marginal_error, iterations) where value is the
    dual objective <f, a> + <g, b> - eps (sum P - 1).  ``init`` = (f, g)
    warm-starts the potentials and disables epsilon scaling.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    sa, sb = a > 0, b > 0
    a_s, b_s, C_s = a[sa], b[sb], C[np.ix_(sa, sb)]
    la, lb = np.log(a_s), np.log(b_s)
    if init is not None:
        f, g = init[0][sa].copy(), init[1][sb].copy()
        schedule = []
    else:
        f, g = np.zeros(a_s.size), np.zeros(b_s.size)
        schedule = []
        if scaling:
            e = max(float(C_s.max()) if C_s.size else 0.0, eps)
            while e > eps * 1.5:
                schedule.append(e)
                e *= 0.5
    used = 0

    def _row_error(f, g, e):
        logP = (f[:, None] + g[None, :] - C_s) / e + la[:, None] + lb[None, :]
        return float(np.abs(np.exp(logsumexp(logP, axis=1)) - a_s).sum())

    def sweep(e, f, g):
        f = -e * logsumexp((g[None, :] - C_s) / e + lb[None, :], axis=1)
        g = -e * logsumexp((f[:, None] - C_s) / e + la[:, None], axis=0)
        return f, g

    for e in schedule:
        for k in range(stage_iters):
            if used >= iters:
                break
            f, g = sweep(e, f, g)
            used += 1
            if k % 5 == 4 and _row_error(f, g, e) < 1e-3 * e:
                break
    err = np.inf
    final = 0
    # at least one sweep at the target eps, so the plan below never mixes scales
    while used < iters or final == 0:
        f, g = sweep(eps, f, g)
        used += 1
        final += 1
        if used % 5 == 0 or used >= iters:
            err = _row_error(f, g, eps)
            if err < tol:
                break
    logP = (f[:, None] + g[None, :] - C_s) / eps + la[:, None] + lb[None, :]
    P_s = np.exp(logP)
    err = float(np.abs(P_s.sum(1) - a_s).sum())
    value = float(f @ a_s + g @ b_s - eps * (P_s.sum() - 1.0))
    P = np.zeros(C.shape)
    P[np.ix_(sa, sb)] = P_s
    f_full = np.zeros(a.size)
    g_full = np.zeros(b.size)
    f_full[sa], g_full[sb] = f, g
    return value, P, f_full, g_full, err, used


def entropic_ot(C, a, b, eps: float, iters: int = 200, tol: float = 1e-9,
                init=None, warn_tol: float = 1e-4, info: dict | None = None,
                cache: dict | None = None, key: str = "ab",
                warm_iters: int | None = None) -> ad.Tensor:
    """Differentiable entropic OT value.

    ``C`` may be a Tensor (gradient = plan), ``a``/``b`` may be Tensors
    (gradient = dual potential corrected for any residual marginal error).
    With ``cache``, potentials are stored under ``key`` and reused as a warm
    start on the next call with the same key.
    """
    C, a, b = ad.as_tensor(C), ad.as_tensor(a), ad.as_tensor(b)
    if init is None and cache is not None:
        init = cache.get(key)
        if init is not None and warm_iters is not None:
            iters = warm_iters
    value, P, f, g, err, used = sinkhorn_log(a.value, b.value, C.value, eps, iters, tol, init)
    if cache is not None:
        cache[key] = (f, g)
    if err > warn_tol:
        warnings.warn(f"Sinkhorn marginal violation {err:.2e} after {used} iterations",
                      NonConvergence, stacklevel=2)
    if info is not None:
        info.update(plan=P, f=f, g=g, error=err, iterations=used)
    av, bv = a.value, b.value

    def back(grad):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(av > 0, f - eps * (P.sum(1) / av - 1.0), 0.0)
            gb = np.where(bv > 0, g - eps * (P.sum(0) / bv - 1.0), 0.0)
        return grad * P, grad * ga, grad * gb

    return ad.custom(value, (C, a, b), back, "entropic_ot")


def sinkhorn_divergence(xa, xb, mass_a, mass_b, eps: float, iters: int = 200,
                        tol: float = 1e-9, debias: bool = True, cost_scale=None,
                        info: dict | None = None, cache: dict | None = None,
                        warn_tol: float = 1e-4, warm_iters: int | None = None) -> ad.Tensor:
    """Debiased entropic Wasserstein between two weighted point clouds (Tensors allowed).

    ``cost_scale`` divides the squared-Euclidean cost (treated as a constant).
    ``cache`` keeps dual potentials between calls; warm-started solves are
    capped at ``warm_iters`` sweeps while cold solves get the full ``iters``.
    """
    xa, xb = ad.as_tensor(xa), ad.as_tensor(xb)
    scale = 1.0 if cost_scale is None else float(cost_scale)
    cab = ad.sqdist(xa, xb) * (1.0 / scale)
    sub_info = {} if info is not None else None
    out = entropic_ot(cab, mass_a, mass_b, eps, iters, tol, info=sub_info, cache=cache,
                      key="ab", warn_tol=warn_tol, warm_iters=warm_iters)
    if info is not None:
        info.update(sub_info)
    if debias:
        caa = ad.sqdist(xa, xa) * (1.0 / scale)
        cbb = ad.sqdist(xb, xb) * (1.0 / scale)
        out = out - 0.5 * entropic_ot(caa, mass_a, mass_a, eps, iters, tol, cache=cache,
                                      key="aa", warn_tol=warn_tol, warm_iters=warm_iters) \
                  - 0.5 * entropic_ot(cbb, mass_b, mass_b, eps, iters, tol, cache=cache,
                                      key="bb", warn_tol=warn_tol, warm_iters=warm_iters)
    return out


def sinkhorn_wasserstein(a: JointSample, b: JointSample, eps: float = 0.05, iters: int = 200,
                         alpha: float = 1.0, metric: str = "sqeuclidean", debias: bool = True,
                         tol: float = 1e-9):
    """Entropic transport distance between two joint samples and the cross plan."""
    xa, xb = a.points(alpha), b.points(alpha)
    if metric == "sqeuclidean":
        info = {}
        d = sinkhorn_divergence(xa, xb, a.mass, b.mass, eps, iters, tol, debias, info=info)
        C = cost_matrix(xa, xb)
    else:
        C = cost_matrix(xa, xb, metric)
        info = {}
        d = entropic_ot(C, a.mass, b.mass, eps, iters, tol, info=info)
        if debias:
            d = d - 0.5 * entropic_ot(cost_matrix(xa, xa, metric), a.mass, a.mass, eps, iters, tol) \
                  - 0.5 * entropic_ot(cost_matrix(xb, xb, metric), b.mass, b.mass, eps, iters, tol)
    P = info["plan"]
    plan = TransportPlan(P, float((P * C).sum()), info["error"], info["iterations"])
    return float(d.value), plan


# ---------------------------------------------------------------------------
# exact transport


def exact_transport(mass_a, mass_b, C, max_size: int = 4096) -> tuple[float, np.ndarray]:
    """Exact optimal transport by linear programming (HiGHS)."""
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n * m > max_size:
        raise TooLarge(f"{n}x{m} transport problem exceeds {max_size} variables")
    a = np.asarray(mass_a, dtype=np.float64)
    b = np.asarray(mass_b, dtype=np.float64)
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    res = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun), res.x.reshape(n, m)


def exact_transport_oracle(a: JointSample, b: JointSample, metric: str = "sqeuclidean",
                           alpha: float = 1.0) -> float:
    C = cost_matrix(a.points(alpha), b.points(alpha), metric)
    return exact_transport(a.mass, b.mass, C)[0]


# ---------------------------------------------------------------------------
# HSIC


def _median_bandwidth(X: np.ndarray) -> float:
    d = np.sqrt(cost_matrix(X, X))
    iu = np.triu_indices(X.shape[0], k=1)
    pos = d[iu][d[iu] > 0]
    if pos.size == 0:
        return 0.0
    med = float(np.median(d[iu]))
    return med if med > 0 else float(pos.mean())


def rbf_gram(X: np.ndarray, bandwidth: float | None = None) -> np.ndarray | None:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    s = _median_bandwidth(X) if bandwidth is None else bandwidth
    if s == 0:
        return None
    return np.exp(-cost_matrix(X, X) / (2.0 * s * s))


def _centered(K: np.ndarray, mass: np.ndarray) -> np.ndarray:
    Km = K @ mass
    return K - Km[None, :] - Km[:, None] + mass @ Km


def hsic_from_grams(K, L, mass) -> float:
    if K is None or L is None:
        return 0.0
    return float(mass @ (_centered(K, mass) * _centered(L, mass)) @ mass)


def hsic(Xf, Yf, mass=None) -> float:
    """Weighted biased HSIC with RBF kernels and median-heuristic bandwidths.

    With uniform mass this is tr(K H L H) / n^2.  Identical points on either
    side give a constant kernel and HSIC 0.
    """
    Xf = np.asarray(Xf, dtype=np.float64)
    n = Xf.shape[0]
    if n < 4:
        raise ValueError("HSIC needs at least 4 samples")
    mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=np.float64)
    if abs(mass.sum() - 1) > 1e-9 or np.any(mass < 0):
        raise InvalidMass("mass must be non-negative and sum to 1")
    return hsic_from_grams(rbf_gram(Xf), rbf_gram(Yf), mass)


def hsic_permutation_null(Xf, Yf, n_perm: int = 200, seed: int = 0, mass=None) -> np.ndarray:
    """HSIC values after permuting the rows of ``Yf`` (kernels computed once)."""
    Xf = np.asarray(Xf, dtype=np.float64)
    n = Xf.shape[0]
    mass = np.full(n, 1.0 / n) if mass is None else np.asarray(mass, dtype=np.float64)
    K, L = rbf_gram(Xf), rbf_gram(Yf)
    if K is None or L is None:
        return np.zeros(n_perm)
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for k in range(n_perm):
        p = rng.permutation(n)
        out[k] = hsic_from_grams(K, L[np.ix_(p, p)], mass)
    return out
