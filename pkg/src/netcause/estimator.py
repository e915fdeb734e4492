"""Weighting regression with balanced representations on network data.

Pipeline per unit i: GCN aggregation of neighbor features, concatenation with
x_i, representation r_i = Phi(x_agg_i), outcome prediction h(r_i, t_i, z_i).
Training alternates one propensity step (individual + neighborhood models)
with one outcome step on

    L_Y = sum_i w_i (y_i - h(r_i, t_i, z_i))^2 + lam * W(p(r) p(t, z), w p(r, t, z))

where w are softmax-normalized balancing weights (uniform when reweighting is
off) and W is a debiased entropic Wasserstein distance.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .balance import sinkhorn_divergence
from .engine import autodiff as ad
from .engine.autodiff import NonFinite
from .engine.checkpoint import save_checkpoint
from .engine.nn import MLP, glorot_uniform
from .engine.optim import Adam
from .graph import Graph, gcn_matrix
from .propensity import (IndividualPSModel, NeighborhoodPSModel, PropensityConfig,
                         balancing_weights)
from .synth import NetworkDataset

log = logging.getLogger(__name__)

VARIANTS = ("none", "reweight", "repre", "both")
LAMBDA_GRID = (0.1, 0.2, 0.5)
EFFECT_PAIRS = {
    "main": ((1.0, 0.0), (0.0, 0.0)),
    "spillover": ((0.0, 1.0), (0.0, 0.0)),
    "total": ((1.0, 1.0), (0.0, 0.0)),
}


class OutOfRangeExposure(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EstimatorConfig:
    lam: float = 0.1
    gcn_dim: int = 10
    hidden: int = 32
    lr: float = 1e-3
    epochs: int = 300
    variant: str = "both"
    seed: int = 0
    beta: float = 1e-3
    rho: float = 0.05
    n_bins: int = 10
    eps_reg: float = 0.05
    sinkhorn_iters: int = 200
    alpha: float = 4.0
    ot_max_points: int = 256
    ot_refresh: int = 25
    ot_tol: float = 1e-4
    warm_iters: int = 30
    select_every: int = 0   # >0: keep the epoch with the best validation loss
    prop_steps: int = 1
    outcome_steps: int = 1
    debias: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.variant in ("none", "reweight"):
            self.lam = 0.0

    @property
    def uses_weights(self) -> bool:
        return self.variant in ("reweight", "both")

    @property
    def uses_ipm(self) -> bool:
        return self.variant in ("repre", "both")

    def propensity_config(self) -> PropensityConfig:
        return PropensityConfig(hidden=self.hidden, rho=self.rho, beta=self.beta, lr=self.lr,
                                n_bins=self.n_bins, seed=self.seed)

    def echo(self) -> dict:
        return asdict(self)


class EstimatorModel:
    """GCN feature module, representation map Phi and outcome predictor h."""

    def __init__(self, n_features: int, cfg: EstimatorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0]))
        self.gcn_weight = ad.parameter(glorot_uniform(rng, n_features, cfg.gcn_dim), "gcn.weight")
        width = n_features + cfg.gcn_dim
        self.phi = MLP([width, cfg.hidden, cfg.hidden, cfg.hidden],
                       ["relu", "relu", "linear"], rng, name="Phi")
        self.h = MLP([cfg.hidden + 2, cfg.hidden, cfg.hidden, 1],
                     ["relu", "relu", "linear"], rng, name="h")
        self.e_model: IndividualPSModel | None = None
        self.phi_model: NeighborhoodPSModel | None = None

    def parameters(self) -> dict:
        return {"gcn.weight": self.gcn_weight, **self.phi.parameters(), **self.h.parameters()}

    def aggregate(self, X, A) -> ad.Tensor:
        neigh = ad.sigmoid(ad.spmm(A, ad.matmul(ad.as_tensor(X), self.gcn_weight)))
        return ad.concat([ad.as_tensor(X), neigh], axis=1)

    def represent(self, X_agg) -> ad.Tensor:
        return self.phi(X_agg)

    def predict(self, r, t, z) -> ad.Tensor:
        tz = np.column_stack([np.asarray(t, float), np.asarray(z, float)])
        return ad.reshape(self.h(ad.concat([r, tz], axis=1)), (-1,))

    def outcome(self, ds: NetworkDataset, t, z) -> np.ndarray:
        """h(Phi(x_agg), t, z) for every unit of ``ds`` (aggregation on its own graph)."""
        n = ds.n_units
        t = np.broadcast_to(np.asarray(t, float), (n,))
        z = np.broadcast_to(np.asarray(z, float), (n,))
        r = self.represent(self.aggregate(ds.X, gcn_matrix(ds.graph, isolated="zero")))
        return self.predict(r, t, z).value

    def save(self, path) -> None:
        save_checkpoint(self.parameters(), path)


def aggregate_features(X, graph: Graph, gcn_weight, isolated: str = "error") -> np.ndarray:
    """[x_i || sigmoid(sum_j c_ij W^T x_j)] with c_ij = 1/sqrt(d_i d_j)."""
    A = gcn_matrix(graph, isolated=isolated)
    X = np.asarray(X, dtype=np.float64)
    neigh = ad.sigmoid(ad.spmm(A, ad.matmul(X, ad.as_tensor(gcn_weight))))
    return np.hstack([X, neigh.value])


# ---------------------------------------------------------------------------
# losses


@dataclass
class OTBatch:
    """Rows used for the Wasserstein term and the permutation forming the product sample."""

    index: np.ndarray
    perm: np.ndarray
    potentials: dict = field(default_factory=dict)

    @classmethod
    def draw(cls, n: int, max_points: int, rng: np.random.Generator) -> "OTBatch":
        idx = np.sort(rng.choice(n, size=max_points, replace=False)) if n > max_points \
            else np.arange(n)
        return cls(idx, rng.permutation(idx.size))


def wasserstein_term(r: ad.Tensor, t, z, weights, batch: OTBatch, cfg: EstimatorConfig,
                     info: dict | None = None) -> ad.Tensor:
    """Distance between the weighted factual joint (r, t, z) and its permuted product sample."""
    rs = ad.take_rows(r, batch.index)
    mu = ad.mean(rs, axis=0, keepdims=True)
    centered = rs - mu
    sd = ad.sqrt(ad.mean(ad.square(centered), axis=0, keepdims=True) + 1e-8)
    rz = centered / sd
    tz = cfg.alpha * np.column_stack([np.asarray(t, float)[batch.index],
                                      np.asarray(z, float)[batch.index]])
    xa = ad.concat([rz, tz], axis=1)
    xb = ad.concat([rz, tz[batch.perm]], axis=1)
    m = np.asarray(weights, float)[batch.index]
    m = m / m.sum()
    u = np.full(batch.index.size, 1.0 / batch.index.size)
    # eps is relative to the mean cost; the distance is reported in cost units
    scale = float(ad.sqdist(xa.value, xb.value).value.mean()) or 1.0
    return scale * sinkhorn_divergence(xa, xb, m, u, cfg.eps_reg, cfg.sinkhorn_iters, tol=cfg.ot_tol,
                               debias=cfg.debias, cost_scale=scale, info=info,
                               cache=batch.potentials, warn_tol=np.inf,
                               warm_iters=cfg.warm_iters)


def loss_LY(model: EstimatorModel, X, A, t, z, y, weights, lam: float,
            batch: OTBatch | None = None):
    """Returns (total, factual, wasserstein) tensors; weights enter as constants."""
    cfg = model.cfg
    w = np.asarray(weights, dtype=np.float64)
    r = model.represent(model.aggregate(X, A))
    pred = model.predict(r, t, z)
    factual = ad.weighted_sum(ad.square(pred - np.asarray(y, float)), w)
    if lam > 0:
        if batch is None:
            batch = OTBatch(np.arange(len(w)), np.random.default_rng(cfg.seed).permutation(len(w)))
        wass = wasserstein_term(r, t, z, w, batch, cfg)
        return factual + lam * wass, factual, wass
    return factual, factual, ad.Tensor(0.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def column(self, key) -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self.records], dtype=np.float64)


def current_weights(model: EstimatorModel, ds: NetworkDataset, A=None) -> np.ndarray:
    """Normalized balancing weights for ``ds`` (uniform without propensity models)."""
    if model.e_model is None:
        return np.full(ds.n_units, 1.0 / ds.n_units)
    A = gcn_matrix(ds.graph, isolated="zero") if A is None else A
    X_agg = model.aggregate(ds.X, A).value
    return balancing_weights(model.e_model, model.phi_model, X_agg, ds.t, ds.z,
                             model.e_model.cfg.e_clip, model.phi_model.cfg.phi_floor).normalized


def _all_parameters(model: EstimatorModel) -> dict:
    groups = {"outcome": model.parameters()}
    if model.e_model is not None:
        groups["e"] = model.e_model.parameters()
        groups["phi"] = model.phi_model.parameters()
    return {f"{g}/{k}": v for g, params in groups.items() for k, v in params.items()}


def _snapshot(model: EstimatorModel) -> dict:
    return {k: v.value.copy() for k, v in _all_parameters(model).items()}


def _restore(model: EstimatorModel, snap: dict) -> None:
    for k, v in _all_parameters(model).items():
        v.value[...] = snap[k]


def train(ds: NetworkDataset, cfg: EstimatorConfig, callback=None,
          valid: NetworkDataset | None = None):
    """Alternating optimization; returns (model, TrainLog).

    Each outer iteration runs ``prop_steps`` updates of both propensity models
    on the current (detached) aggregated features, refreshes the balancing
    weights, then runs ``outcome_steps`` updates of GCN, Phi and h on L_Y.
    With ``valid`` and ``cfg.select_every > 0`` the parameters from the
    checkpointed epoch with the lowest validation loss are restored at the end.
    """
    A = gcn_matrix(ds.graph, isolated="zero")
    X, t, z, y = ds.X, ds.t, ds.z, ds.y
    n = ds.n_units
    model = EstimatorModel(X.shape[1], cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    if cfg.uses_weights:
        pcfg = cfg.propensity_config()
        model.e_model = IndividualPSModel(X.shape[1] + cfg.gcn_dim, pcfg)
        model.phi_model = NeighborhoodPSModel(X.shape[1] + cfg.gcn_dim, pcfg)
    lam = cfg.lam if cfg.uses_ipm else 0.0
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC3]))
    trace = TrainLog(config=cfg.echo())
    uniform = np.full(n, 1.0 / n)
    batch = None
    best = None
    selecting = valid is not None and cfg.select_every > 0
    for epoch in range(cfg.epochs):
        rec = {"epoch": epoch}
        try:
            if cfg.uses_weights:
                X_agg = model.aggregate(X, A).value
                for _ in range(cfg.prop_steps):
                    rec["loss_T"] = model.e_model.step(X_agg, t)
                    rec["loss_Z"] = model.phi_model.step(X_agg, z)
                w = balancing_weights(model.e_model, model.phi_model, X_agg, t, z,
                                      model.e_model.cfg.e_clip,
                                      model.phi_model.cfg.phi_floor).normalized
            else:
                w = uniform
            if lam > 0 and (batch is None or epoch % cfg.ot_refresh == 0):
                batch = OTBatch.draw(n, cfg.ot_max_points, rng)
            for _ in range(cfg.outcome_steps):
                total, factual, wass = loss_LY(model, X, A, t, z, y, w, lam, batch)
                opt.zero_grad()
                total.backward()
                opt.step()
        except NonFinite as exc:
            raise TrainingDiverged(f"non-finite value at epoch {epoch} "
                                   f"(variant={cfg.variant}, lam={cfg.lam}): {exc}") from exc
        rec.update(loss=total.item(), factual=factual.item(), wasserstein=wass.item(),
                   weight_max=float(w.max()))
        if selecting and ((epoch + 1) % cfg.select_every == 0 or epoch + 1 == cfg.epochs):
            rec["valid_loss"] = validation_loss(model, valid)
            if best is None or rec["valid_loss"] < best[0]:
                best = (rec["valid_loss"], epoch, _snapshot(model))
        trace.records.append(rec)
        if callback is not None:
            callback(epoch, model, rec)
    if best is not None:
        _restore(model, best[2])
        trace.best_epoch = best[1]
    return model, trace


def validation_loss(model: EstimatorModel, ds: NetworkDataset) -> float:
    """Weighted factual loss on a held-out split, with inductively computed weights."""
    w = current_weights(model, ds) if model.cfg.uses_weights else np.full(ds.n_units,
                                                                          1.0 / ds.n_units)
    pred = model.outcome(ds, ds.t, ds.z)
    return float(np.dot(w, (ds.y - pred) ** 2))


def train_with_selection(train_ds: NetworkDataset, valid_ds: NetworkDataset,
                         cfg: EstimatorConfig, lambdas=LAMBDA_GRID):
    """Fit one model per lambda (only if the variant uses the IPM) and keep the best on validation."""
    grid = lambdas if cfg.uses_ipm else (0.0,)
    best = None
    for lam in grid:
        model, trace = train(train_ds, replace(cfg, lam=lam), valid=valid_ds)
        score = validation_loss(model, valid_ds)
        log.debug("variant=%s lam=%s valid=%.5f", cfg.variant, lam, score)
        if best is None or score < best[2]:
            best = (model, trace, score, lam)
    return best


# ---------------------------------------------------------------------------
# prediction


def _check_pair(pair):
    t, z = pair
    if t not in (0, 1):
        raise OutOfRangeExposure(f"individual treatment must be 0 or 1, got {t}")
    if not 0.0 <= z <= 1.0:
        raise OutOfRangeExposure(f"exposure must lie in [0, 1], got {z}")


def predict_ite(model, ds: NetworkDataset, pair, ref) -> np.ndarray:
    """Per-unit h(Phi(x), t, z) - h(Phi(x), t', z').

    ``model`` is anything with ``outcome(ds, t, z) -> ndarray``.
    """
    _check_pair(pair)
    _check_pair(ref)
    return model.outcome(ds, *pair) - model.outcome(ds, *ref)


def predict_effects(model, ds: NetworkDataset) -> dict:
    return {name: predict_ite(model, ds, *pairs) for name, pairs in EFFECT_PAIRS.items()}


def true_effects(ds: NetworkDataset) -> dict:
    oracle = ds.require_oracle()
    return {name: oracle.effect(*pairs) for name, pairs in EFFECT_PAIRS.items()}


def counterfactual_rmse(model, ds: NetworkDataset) -> float:
    """RMSE of outcomes under flipped own treatment and flipped neighbor treatments (z -> 1 - z)."""
    oracle = ds.require_oracle()
    t_cf, z_cf = 1.0 - ds.t, 1.0 - ds.z
    y_cf = oracle(t_cf, z_cf)
    y_hat = model.outcome(ds, t_cf, z_cf)
    return float(np.sqrt(np.mean((y_hat - y_cf) ** 2)))
