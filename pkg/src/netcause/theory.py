"""Exact numerical audits of the generalization bounds on enumerable scenarios.

A scenario has finitely many covariate points x (each with its own
representation point r(x)), binary individual treatment t and a few exposure
levels z.  Every expectation is a finite sum, the 1-Lipschitz IPM is a small
transport LP, so each inequality can be checked without sampling error.

Conventions used throughout:

* psi(t, z | x) = e(t | x) * phi(z | x) is the true joint propensity;
  psi_eta uses the estimated tables.
* loss(x, t, z) = (m - h)^2 + noise variance, the expected squared error.
* eps_F averages the loss over p(x, t, z); eps_CF over p(x) p(t, z).
* eps_F^eta averages it over p(t, z) q(x | t, z) with
  q(x | t, z) proportional to p(x | t, z) / psi_eta(t, z | x).
* eps_PEHE averages the squared effect error over every ordered couple of
  treatment pairs drawn independently from p(t, z).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

TOL = 1e-9


class InfeasibleLP(RuntimeError):
    pass


class InvalidScenario(ValueError):
    pass


@dataclass
class DiscreteScenario:
    px: np.ndarray            # (nx,) covariate probabilities
    rep: np.ndarray           # (nx, dr) representation point of each x
    z_levels: np.ndarray      # (nz,) exposure values
    e: np.ndarray             # (nx,) true P(t = 1 | x)
    phi: np.ndarray           # (nx, nz) true P(z | x)
    m: np.ndarray             # (nx, 2, nz) outcome means
    h: np.ndarray             # (nx, 2, nz) hypothesis
    noise: np.ndarray         # (nx, 2, nz) outcome noise variance
    e_eta: np.ndarray         # (nx,) estimated P(t = 1 | x)
    phi_eta: np.ndarray       # (nx, nz) estimated P(z | x)
    seed: int | None = None

    def __post_init__(self):
        nx, nz = self.phi.shape
        if not np.isclose(self.px.sum(), 1.0, atol=1e-12) or np.any(self.px <= 0):
            raise InvalidScenario("p(x) must be positive and sum to 1")
        for name in ("phi", "phi_eta"):
            tab = getattr(self, name)
            if np.any(tab <= 0) or not np.allclose(tab.sum(1), 1.0, atol=1e-12):
                raise InvalidScenario(f"{name} rows must be positive and sum to 1")
        for name in ("e", "e_eta"):
            v = getattr(self, name)
            if np.any(v <= 0) or np.any(v >= 1):
                raise InvalidScenario(f"{name} must lie strictly inside (0, 1)")
        for name in ("m", "h", "noise"):
            if getattr(self, name).shape != (nx, 2, nz):
                raise InvalidScenario(f"{name} must have shape {(nx, 2, nz)}")
        if self.rep.shape[0] != nx or self.z_levels.shape != (nz,):
            raise InvalidScenario("rep / z_levels do not match the tables")

    @property
    def pairs(self) -> list:
        return [(t, float(z)) for t in (0, 1) for z in self.z_levels]

    def joint_propensity(self, estimated: bool = False) -> np.ndarray:
        """psi(t, z | x) as an (nx, 2, nz) array."""
        e = self.e_eta if estimated else self.e
        phi = self.phi_eta if estimated else self.phi
        return np.stack([1 - e, e], axis=1)[:, :, None] * phi[:, None, :]

    def p_pair(self) -> np.ndarray:
        """Marginal p(t, z) as (2, nz)."""
        return np.einsum("x,xtz->tz", self.px, self.joint_propensity())

    def loss_table(self) -> np.ndarray:
        return (self.m - self.h) ** 2 + self.noise

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def _positive_simplex(rng, shape, floor):
    p = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]) + floor
    return p / p.sum(-1, keepdims=True)


def random_scenario(seed: int, nx: int | None = None, nz: int | None = None, dr: int = 2,
                    noisy: bool = True, perturb: float = 0.5) -> DiscreteScenario:
    """Seeded random scenario with at most 8 covariate points and 6 treatment pairs."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
    nx = nx or int(rng.integers(2, 9))
    nz = nz or int(rng.integers(1, 4))
    if nx > 8 or 2 * nz > 6:
        raise InvalidScenario("scenarios are limited to 8 points and 6 treatment pairs")
    px = _positive_simplex(rng, (nx,), 0.05)
    rep = rng.normal(size=(nx, dr))
    e = rng.uniform(0.1, 0.9, nx)
    phi = _positive_simplex(rng, (nx, nz), 0.1)
    m = rng.normal(size=(nx, 2, nz)) + rep[:, :1, None]
    h = m + rng.normal(scale=0.7, size=m.shape)
    noise = rng.uniform(0.0, 0.5, m.shape) if noisy else np.zeros(m.shape)
    logit = np.log(e / (1 - e)) + rng.normal(scale=perturb, size=nx)
    e_eta = 1.0 / (1.0 + np.exp(-logit))
    phi_eta = phi * np.exp(rng.normal(scale=perturb, size=phi.shape))
    phi_eta /= phi_eta.sum(1, keepdims=True)
    return DiscreteScenario(px, rep, np.linspace(0.0, 1.0, nz) if nz > 1 else np.array([0.5]),
                            e, phi, m, h, noise, e_eta, phi_eta, seed)


# ---------------------------------------------------------------------------
# distributions over the joint support (r(x), t, z)


def joint_points(s: DiscreteScenario) -> np.ndarray:
    """One row per (x, t, z) in C order: [r(x), t, z]."""
    rows = []
    for i in range(len(s.px)):
        for t in (0, 1):
            for z in s.z_levels:
                rows.append(np.concatenate([s.rep[i], [t, z]]))
    return np.asarray(rows)


def reweighted_covariates(s: DiscreteScenario, weights: str = "estimated") -> np.ndarray:
    """q(x | t, z) under balancing weights 1/psi, as an (nx, 2, nz) array.

    ``weights`` is "true", "estimated" or "none" (plain p(x | t, z)).
    """
    psi = s.joint_propensity()
    factual = s.px[:, None, None] * psi
    if weights == "none":
        q = factual
    elif weights in ("true", "estimated"):
        q = factual / s.joint_propensity(estimated=(weights == "estimated"))
    else:
        raise ValueError(f"unknown weights {weights!r}")
    return q / q.sum(axis=0, keepdims=True)


def _distribution(s: DiscreteScenario, kind: str) -> np.ndarray:
    p_tz = s.p_pair()
    if kind == "product":
        d = s.px[:, None, None] * p_tz[None]
    elif kind == "factual":
        d = s.px[:, None, None] * s.joint_propensity()
    else:
        d = reweighted_covariates(s, kind) * p_tz[None]
    return d.ravel()


def exact_losses(s: DiscreteScenario) -> dict:
    """eps_F, eps_CF, eps_F^eta, eps_PEHE and sigma_Y by exact summation."""
    loss = s.loss_table().ravel()
    p_tz = s.p_pair().ravel()
    err = (s.h - s.m).reshape(len(s.px), -1)
    diff = err[:, :, None] - err[:, None, :]
    pehe = float(np.einsum("x,a,b,xab->", s.px, p_tz, p_tz, diff ** 2))
    return {
        "eps_F": float(_distribution(s, "factual") @ loss),
        "eps_CF": float(_distribution(s, "product") @ loss),
        "eps_F_eta": float(_distribution(s, "estimated") @ loss),
        "eps_PEHE": pehe,
        "sigma_Y": float(_distribution(s, "product") @ s.noise.ravel()),
    }


# ---------------------------------------------------------------------------
# Wasserstein-1 over the joint support


def _euclidean(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def w1_lp(points: np.ndarray, p, q) -> float:
    """Kantorovich-Rubinstein distance between two distributions on the same support."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    keep = (p > 0) | (q > 0)
    points, p, q = points[keep], p[keep], q[keep]
    n = len(p)
    if n == 1:
        return 0.0
    D = _euclidean(points)
    rows = np.kron(np.eye(n), np.ones((1, n)))
    cols = np.kron(np.ones((1, n)), np.eye(n))
    res = linprog(D.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasibleLP(res.message)
    return max(float(res.fun), 0.0)


def _spanning_trees(n: int):
    edges = list(itertools.combinations(range(n), 2))
    for subset in itertools.combinations(edges, n - 1):
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                a = parent[a]
            return a

        ok = True
        for a, b in subset:
            ra, rb = find(a), find(b)
            if ra == rb:
                ok = False
                break
            parent[ra] = rb
        if ok:
            yield subset


def w1_dual_bruteforce(points: np.ndarray, p, q) -> float:
    """max_f sum f (p - q) over 1-Lipschitz f, by enumerating the polytope's vertices.

    A vertex has n - 1 tight constraints f_a - f_b = +-d_ab forming a spanning
    tree; every tree and sign pattern is tried and infeasible candidates are
    dropped.  Only meant for supports of at most 4 points.
    """
    points = np.asarray(points, float)
    n = len(points)
    if n > 4:
        raise ValueError("brute-force dual is limited to 4 support points")
    if n == 1:
        return 0.0
    D = _euclidean(points)
    delta = np.asarray(p, float) - np.asarray(q, float)
    best = -np.inf
    for tree in _spanning_trees(n):
        for signs in itertools.product((-1.0, 1.0), repeat=n - 1):
            f = np.full(n, np.nan)
            f[0] = 0.0
            pending = list(zip(tree, signs))
            while pending:
                rest = []
                for (a, b), sg in pending:
                    if not np.isnan(f[a]):
                        f[b] = f[a] + sg * D[a, b]
                    elif not np.isnan(f[b]):
                        f[a] = f[b] - sg * D[a, b]
                    else:
                        rest.append(((a, b), sg))
                pending = rest
            if np.all(np.abs(f[:, None] - f[None, :]) <= D + 1e-12):
                best = max(best, float(f @ delta))
    return best


def lipschitz_constant(points: np.ndarray, values) -> float:
    """Smallest B with |v_a - v_b| <= B |x_a - x_b| over all distinct support points."""
    values = np.asarray(values, float)
    D = _euclidean(points)
    dv = np.abs(values[:, None] - values[None, :])
    off = ~np.eye(len(values), dtype=bool)
    if np.any((D[off] == 0) & (dv[off] > 0)):
        return np.inf
    mask = off & (D > 0)
    return float((dv[mask] / D[mask]).max()) if mask.any() else 0.0


def odds_ratio_bound(true, estimated) -> float:
    """Gamma = max over entries of max(OR, 1 / OR), with OR the estimated-to-true odds ratio."""
    true, estimated = np.asarray(true, float), np.asarray(estimated, float)
    log_or = np.log(estimated / (1 - estimated)) - np.log(true / (1 - true))
    return float(np.exp(np.abs(log_or).max()))


def _gamma_z(s: DiscreteScenario) -> float:
    if s.phi.shape[1] == 1:
        return 1.0   # a single exposure level is estimated perfectly
    return odds_ratio_bound(s.phi, s.phi_eta)


def diameter(points: np.ndarray) -> float:
    return float(_euclidean(np.asarray(points, float)).max())


# ---------------------------------------------------------------------------
# bound reports


@dataclass
class BoundReport:
    name: str
    chain: list
    labels: list
    seed: int | None = None
    terms: dict = field(default_factory=dict)
    scenario: dict | None = None

    @property
    def lhs(self) -> float:
        return self.chain[0]

    @property
    def rhs(self) -> float:
        return self.chain[-1]

    @property
    def slack(self) -> float:
        return float(min(b - a for a, b in zip(self.chain, self.chain[1:])))

    @property
    def passed(self) -> bool:
        return all(a <= b + TOL for a, b in zip(self.chain, self.chain[1:]))

    def to_dict(self) -> dict:
        out = {"inequality": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
               "passed": self.passed, "scenario_seed": self.seed,
               "chain": dict(zip(self.labels, self.chain)), "terms": self.terms}
        if not self.passed:
            out["scenario"] = self.scenario
        return out


def _ipm(s: DiscreteScenario, kind: str) -> float:
    return w1_lp(joint_points(s), _distribution(s, "product"), _distribution(s, kind))


def _b_phi(s: DiscreteScenario) -> float:
    return lipschitz_constant(joint_points(s), s.loss_table().ravel())


def check_lemma1(s: DiscreteScenario, function_class: str = "lipschitz") -> BoundReport:
    """eps_CF <= eps_F^eta + B_Phi * IPM(p(r) p(t, z), p(t, z) q_eta(r | t, z))."""
    if function_class != "lipschitz":
        raise ValueError("only the 1-Lipschitz class is supported")
    L = exact_losses(s)
    B = _b_phi(s)
    ipm = _ipm(s, "estimated")
    rhs = L["eps_F_eta"] + (B * ipm if ipm > 0 else 0.0)
    return BoundReport("lemma1", [L["eps_CF"], rhs], ["eps_CF", "eps_F_eta + B*IPM"], s.seed,
                       {"B_phi": B, "ipm": ipm, **L}, s.to_dict())


def check_theorem2(s: DiscreteScenario) -> BoundReport:
    """W(p(t, z) q_eta(r | t, z), p(r) p(t, z)) <= diam(R) sqrt(log Gamma_t + log Gamma_z)."""
    g_t = odds_ratio_bound(s.e, s.e_eta)
    g_z = _gamma_z(s)
    w = _ipm(s, "estimated")
    bound = diameter(s.rep) * np.sqrt(np.log(g_t) + np.log(g_z))
    return BoundReport("theorem2", [w, float(bound)], ["wasserstein", "diam*sqrt(log Gt + log Gz)"],
                       s.seed, {"gamma_t": g_t, "gamma_z": g_z, "diam": diameter(s.rep)},
                       s.to_dict())


def check_theorem1_and_3(s: DiscreteScenario) -> tuple[BoundReport, BoundReport]:
    """PEHE chain with estimated weights, and the oracle-weight witness ordering.

    Theorem-1 chain: eps_PEHE / 4 <= eps_CF - sigma_Y <= eps_F^eta + B IPM_eta - sigma_Y.
    Witness chain: eps_CF - sigma_Y <= eps_F^oracle + B IPM_oracle - sigma_Y
                   <= eps_F + B IPM(p(r | t, z) p(t, z), p(r) p(t, z)) - sigma_Y.
    """
    L = exact_losses(s)
    B = _b_phi(s)
    ipm_eta = _ipm(s, "estimated")
    ipm_true = _ipm(s, "true")
    ipm_plain = _ipm(s, "none")
    loss = s.loss_table().ravel()
    eps_oracle = float(_distribution(s, "true") @ loss)

    def bterm(ipm):
        return B * ipm if ipm > 0 else 0.0

    sig = L["sigma_Y"]
    thm1 = BoundReport("theorem1", [L["eps_PEHE"] / 4, L["eps_CF"] - sig,
                                    L["eps_F_eta"] + bterm(ipm_eta) - sig],
                       ["eps_PEHE/4", "eps_CF - sigma_Y", "eps_F_eta + B*IPM - sigma_Y"],
                       s.seed, {"B_phi": B, "ipm": ipm_eta, **L}, s.to_dict())
    thm3 = BoundReport("theorem3", [L["eps_CF"] - sig, eps_oracle + bterm(ipm_true) - sig,
                                    L["eps_F"] + bterm(ipm_plain) - sig],
                       ["eps_CF - sigma_Y", "weighted rhs (oracle)", "unweighted rhs"],
                       s.seed, {"B_phi": B, "ipm_oracle": ipm_true, "ipm_unweighted": ipm_plain,
                                "eps_F_oracle": eps_oracle}, s.to_dict())
    return thm1, thm3


def audit(n_scenarios: int = 100, seed: int = 0) -> list[BoundReport]:
    """Every check on ``n_scenarios`` seeded random scenarios."""
    reports = []
    for i in range(n_scenarios):
        s = random_scenario(seed * 100_003 + i)
        reports.append(check_lemma1(s))
        reports.append(check_theorem2(s))
        reports.extend(check_theorem1_and_3(s))
    return reports


def write_theory_report(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_reports": len(reports),
        "violations": sum(not r.passed for r in reports),
        "reports": [r.to_dict() for r in reports],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
