"""Semi-synthetic network data: features, treatments, exposures and outcomes.

Treatment and outcome rules follow the usual semi-synthetic protocol for
networked interference:

    ps_i = sigmoid(b1 * w1.x_i + b2 * mean_{j in N_i} w2.x_j),  t_i = [ps_i > mean(ps)]
    z_i  = mean_{j in N_i} t_j
    y_i  = b3 t_i + b4 z_i + b5 w3.x_i + b6 mean_{j in N_i} w4.x_j + eps_i

with b2 = k b1, b4 = k b3, b6 = k b5 for interference degree k.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, IsolatedUnit, build_graph, read_edge_list, write_edge_list


class BadDimensions(ValueError):
    pass


class ShapeMismatch(BadDimensions):
    pass


class MissingOracle(RuntimeError):
    pass


@dataclass
class GenConfig:
    k: float = 1.0
    beta1: float = 0.5
    beta3: float = 1.0
    beta5: float = 0.5
    feature_dim: int = 10
    seed: int = 0
    # w1, w2 ~ N(-2, 3) and w3, w4 ~ N(1, 2); second parameter read as a variance
    treat_weight_mean: float = -2.0
    treat_weight_var: float = 3.0
    outcome_weight_mean: float = 1.0
    outcome_weight_var: float = 2.0
    noise_scale: float = 1.0
    variance_convention: str = "variance"

    @property
    def beta2(self) -> float:
        return self.k * self.beta1

    @property
    def beta4(self) -> float:
        return self.k * self.beta3

    @property
    def beta6(self) -> float:
        return self.k * self.beta5

    def echo(self) -> dict:
        d = asdict(self)
        d.update(beta2=self.beta2, beta4=self.beta4, beta6=self.beta6)
        return d


@dataclass
class Oracle:
    """Potential outcomes y_i(t, z) = base_i + b3 t + b4 z with frozen noise in base_i."""

    base: np.ndarray
    beta3: float
    beta4: float

    def __call__(self, t, z) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return self.base + self.beta3 * t + self.beta4 * z

    def effect(self, pair, ref) -> np.ndarray:
        return self(*pair) - self(*ref)

    def subset(self, units) -> "Oracle":
        return Oracle(self.base[units], self.beta3, self.beta4)


@dataclass
class NetworkDataset:
    graph: Graph
    X: np.ndarray
    t: np.ndarray
    z: np.ndarray
    y: np.ndarray
    ps: np.ndarray | None = None
    oracle: Oracle | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return self.X.shape[0]

    def require_oracle(self) -> Oracle:
        if self.oracle is None:
            raise MissingOracle("dataset carries no potential-outcome oracle")
        return self.oracle

    def subset(self, units) -> "NetworkDataset":
        """Units restricted to ``units`` on their induced subgraph; z keeps its full-graph value."""
        units = np.asarray(units, dtype=np.int64)
        return NetworkDataset(
            graph=self.graph.induced_subgraph(units),
            X=self.X[units], t=self.t[units], z=self.z[units], y=self.y[units],
            ps=None if self.ps is None else self.ps[units],
            oracle=None if self.oracle is None else self.oracle.subset(units),
            meta=dict(self.meta, parent_units=int(self.n_units)),
        )


# ---------------------------------------------------------------------------
# features and graphs


def sample_features(n: int, d: int = 10, seed: int = 0) -> np.ndarray:
    if n < 1 or d < 1:
        raise BadDimensions(f"need n, d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF0]))
    return rng.standard_normal((n, d))


def load_features_csv(path, d: int | None = None) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    skip = 0 if _is_numeric_row(first) else 1
    X = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if d is not None and X.shape[1] != d:
        raise BadDimensions(f"{path}: expected {d} columns, found {X.shape[1]}")
    if X.shape[0] < 1:
        raise BadDimensions(f"{path}: no rows")
    return X


def _is_numeric_row(line: str) -> bool:
    try:
        [float(v) for v in line.strip().split(",")]
    except ValueError:
        return False
    return True


def small_world_graph(n: int, mean_degree: int = 10, rewire: float = 0.1, seed: int = 0) -> Graph:
    import networkx as nx

    g = nx.connected_watts_strogatz_graph(n, mean_degree, rewire, tries=100, seed=seed)
    return build_graph(n, list(g.edges()))


# ---------------------------------------------------------------------------
# simulation


def draw_weights(cfg: GenConfig, d: int) -> dict:
    """w1..w4, drawn from a stream that depends on ``cfg.seed`` only (not on k)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA1]))
    sd_t = np.sqrt(cfg.treat_weight_var)
    sd_y = np.sqrt(cfg.outcome_weight_var)
    return {
        "w1": rng.normal(cfg.treat_weight_mean, sd_t, d),
        "w2": rng.normal(cfg.treat_weight_mean, sd_t, d),
        "w3": rng.normal(cfg.outcome_weight_mean, sd_y, d),
        "w4": rng.normal(cfg.outcome_weight_mean, sd_y, d),
    }


def _check_degrees(graph: Graph):
    if np.any(graph.degree == 0):
        raise IsolatedUnit(f"{int(np.sum(graph.degree == 0))} units have no neighbors; "
                           "exposure is undefined")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def simulate_treatments(X: np.ndarray, graph: Graph, cfg: GenConfig, weights: dict | None = None):
    """Return (t, z, ps). Ties ps_i == mean(ps) go to control."""
    _check_degrees(graph)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != graph.n_units:
        raise BadDimensions(f"X has {X.shape[0]} rows for {graph.n_units} units")
    w = weights or draw_weights(cfg, X.shape[1])
    logit = cfg.beta1 * (X @ w["w1"]) + cfg.beta2 * graph.neighbor_mean(X @ w["w2"])
    ps = _sigmoid(logit)
    t = (ps > ps.mean()).astype(np.float64)
    z = graph.neighbor_mean(t)
    if np.any(ps < 1e-6) or np.any(ps > 1 - 1e-6):
        warnings.warn("propensity scores within 1e-6 of 0 or 1: overlap is weak", RuntimeWarning,
                      stacklevel=2)
    return t, z, ps


def simulate_outcomes(X: np.ndarray, graph: Graph, t, z, cfg: GenConfig,
                      weights: dict | None = None):
    """Return (y, oracle); the oracle reuses each unit's frozen noise draw."""
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = graph.n_units
    if X.shape[0] != n or t.shape != (n,) or z.shape != (n,):
        raise ShapeMismatch(f"shapes X{X.shape}, t{t.shape}, z{z.shape} for {n} units")
    _check_degrees(graph)
    w = weights or draw_weights(cfg, X.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE5]))
    noise = cfg.noise_scale * rng.standard_normal(n)
    base = cfg.beta5 * (X @ w["w3"]) + cfg.beta6 * graph.neighbor_mean(X @ w["w4"]) + noise
    oracle = Oracle(base, cfg.beta3, cfg.beta4)
    return oracle(t, z), oracle


def generate_dataset(graph: Graph, X: np.ndarray, cfg: GenConfig) -> NetworkDataset:
    w = draw_weights(cfg, X.shape[1])
    t, z, ps = simulate_treatments(X, graph, cfg, w)
    y, oracle = simulate_outcomes(X, graph, t, z, cfg, w)
    meta = {"config": cfg.echo(), "seed": cfg.seed,
            "weight_spread": "variance" if cfg.variance_convention == "variance" else "sd",
            "weights": {k: v.tolist() for k, v in w.items()}}
    return NetworkDataset(graph, np.asarray(X, dtype=np.float64), t, z, y, ps, oracle, meta)


def true_propensity_weights(ds: NetworkDataset) -> np.ndarray:
    """Raw inverse joint propensities under independent Bernoulli(ps) treatments.

    The individual part is ps or 1-ps for the observed arm; the exposure part is
    the Poisson-binomial probability of the observed treated-neighbor count.
    """
    if ds.ps is None:
        raise MissingOracle("dataset has no true propensity scores")
    g = ds.graph
    e_obs = np.where(ds.t == 1, ds.ps, 1 - ds.ps)
    phi = np.empty(ds.n_units)
    for i in range(ds.n_units):
        p = ds.ps[g.neighbors(i)]
        dist = np.array([1.0])
        for pj in p:
            dist = np.convolve(dist, [1 - pj, pj])
        phi[i] = dist[int(round(ds.z[i] * p.size))]
    return 1.0 / (np.clip(e_obs, 1e-3, 1 - 1e-3) * np.maximum(phi, 1e-6))


# ---------------------------------------------------------------------------
# disk format


def _fmt(x) -> str:
    return format(float(x), ".17g")


def save_dataset(ds: NetworkDataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    d = ds.X.shape[1]
    rows = [",".join(f"x{j}" for j in range(d))]
    rows += [",".join(_fmt(v) for v in row) for row in ds.X]
    (out / "features.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_edge_list(ds.graph, out / "edges.txt")
    cols = ["unit", "t", "z", "y"]
    has_oracle = ds.oracle is not None
    if ds.ps is not None:
        cols.append("ps")
    if has_oracle:
        cols.append("y00")
    lines = [",".join(cols)]
    for i in range(ds.n_units):
        vals = [str(i), _fmt(ds.t[i]), _fmt(ds.z[i]), _fmt(ds.y[i])]
        if ds.ps is not None:
            vals.append(_fmt(ds.ps[i]))
        if has_oracle:
            vals.append(_fmt(ds.oracle.base[i]))
        lines.append(",".join(vals))
    (out / "assign.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = dict(ds.meta)
    meta["n_units"] = ds.n_units
    meta["feature_dim"] = d
    if has_oracle:
        meta["oracle"] = {"beta3": ds.oracle.beta3, "beta4": ds.oracle.beta4}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_dataset(directory) -> NetworkDataset:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    X = load_features_csv(src / "features.csv")
    graph = read_edge_list(src / "edges.txt", n_units=X.shape[0])
    table = np.genfromtxt(src / "assign.csv", delimiter=",", names=True)
    cols = table.dtype.names
    if table.shape[0] != X.shape[0]:
        raise BadDimensions("assign.csv and features.csv disagree on unit count")
    oracle = None
    if "y00" in cols and "oracle" in meta:
        oracle = Oracle(np.asarray(table["y00"], dtype=np.float64),
                        meta["oracle"]["beta3"], meta["oracle"]["beta4"])
    return NetworkDataset(
        graph=graph, X=X,
        t=np.asarray(table["t"], dtype=np.float64),
        z=np.asarray(table["z"], dtype=np.float64),
        y=np.asarray(table["y"], dtype=np.float64),
        ps=np.asarray(table["ps"], dtype=np.float64) if "ps" in cols else None,
        oracle=oracle, meta=meta,
    )
