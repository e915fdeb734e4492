"""Individual and neighborhood propensity models and the balancing weights they imply.

Both models share a sparse encoder: three dense layers whose last layer is
sigmoid-activated and pulled toward a target mean activation rho by a KL
penalty.  The individual decoder is logistic; the neighborhood decoder emits
B + 1 knot heights of a piecewise-linear density on [0, 1].
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .engine import autodiff as ad
from .engine.nn import MLP, Linear
from .engine.optim import Adam

log = logging.getLogger(__name__)


class ActivationOutOfRange(ValueError):
    pass


class DegenerateLabels(UserWarning):
    pass


@dataclass
class PropensityConfig:
    hidden: int = 32
    rho: float = 0.05
    beta: float = 1e-3
    lr: float = 1e-3
    epochs: int = 300
    n_bins: int = 10
    seed: int = 0
    e_clip: float = 1e-3
    phi_floor: float = 1e-6


def sparsity_penalty(activations, rho: float) -> ad.Tensor:
    """sum_j KL(rho || rho_hat_j) with rho_hat_j the mean activation of hidden unit j."""
    a = ad.as_tensor(activations)
    if np.any(a.value < 0) or np.any(a.value > 1):
        raise ActivationOutOfRange("activations must lie in [0, 1]")
    rho_hat = ad.clip(ad.mean(a, axis=0), 1e-7, 1 - 1e-7)
    kl = rho * (np.log(rho) - ad.log(rho_hat)) \
        + (1 - rho) * (np.log(1 - rho) - ad.log(1.0 - rho_hat))
    return ad.sum(kl)


class SparseEncoder:
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str):
        self.mlp = MLP([n_in, hidden, hidden, hidden], ["relu", "relu", "sigmoid"], rng, name=name)

    def __call__(self, X) -> ad.Tensor:
        return self.mlp(X)

    def parameters(self) -> dict:
        return self.mlp.parameters()


def _as_input(X) -> ad.Tensor:
    return ad.Tensor(X.value) if isinstance(X, ad.Tensor) else ad.Tensor(np.asarray(X, float))


class IndividualPSModel:
    """P(t = 1 | x) via sparse encoder + logistic decoder."""

    def __init__(self, n_in: int, cfg: PropensityConfig | None = None, constant: float | None = None):
        self.cfg = cfg or PropensityConfig()
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0xE1]))
        self.encoder = SparseEncoder(n_in, self.cfg.hidden, rng, "g1")
        self.decoder = Linear(self.cfg.hidden, 1, rng, name="e")
        self.constant = constant
        self.optimizer = Adam(self.parameters(), lr=self.cfg.lr)

    def parameters(self) -> dict:
        return {**self.encoder.parameters(), **self.decoder.parameters()}

    def _forward(self, X):
        code = self.encoder(_as_input(X))
        return ad.reshape(self.decoder(code), (-1,)), code

    def loss(self, X, t):
        """Mean cross-entropy plus beta * sparsity; returns (total, ce, kl) tensors."""
        t = np.asarray(t, dtype=np.float64)
        logits, code = self._forward(X)
        ce = ad.mean(ad.softplus(logits) - logits * t)
        kl = sparsity_penalty(code, self.cfg.rho)
        return ce + self.cfg.beta * kl, ce, kl

    def step(self, X, t) -> float:
        if self.constant is not None:
            return float("nan")
        self.optimizer.zero_grad()
        total, _, _ = self.loss(X, t)
        total.backward()
        self.optimizer.step()
        return total.item()

    def predict(self, X) -> np.ndarray:
        n = np.shape(X.value if isinstance(X, ad.Tensor) else X)[0]
        if self.constant is not None:
            return np.full(n, self.constant)
        logits, _ = self._forward(X)
        return ad.sigmoid(logits).value

    def prob_observed(self, X, t) -> np.ndarray:
        """Probability of each unit's observed arm, clamped to [e_clip, 1 - e_clip]."""
        c = self.cfg.e_clip
        e = np.clip(self.predict(X), c, 1 - c)
        return np.where(np.asarray(t) == 1, e, 1 - e)


def interpolation_matrix(z, n_bins: int) -> np.ndarray:
    """Row i holds the linear-interpolation weights of z_i on the B + 1 knots."""
    z = np.asarray(z, dtype=np.float64)
    pos = np.clip(z, 0.0, 1.0) * n_bins
    k = np.minimum(np.floor(pos).astype(np.int64), n_bins - 1)
    u = pos - k
    M = np.zeros((z.size, n_bins + 1))
    rows = np.arange(z.size)
    M[rows, k] = 1.0 - u
    M[rows, k + 1] += u
    return M


class NeighborhoodPSModel:
    """Conditional density phi(z | x) on [0, 1], piecewise linear on a uniform B-segment grid.

    Knot heights are softmax-normalized and then divided by the trapezoid
    area, so every conditional density integrates to exactly 1.
    """

    def __init__(self, n_in: int, cfg: PropensityConfig | None = None):
        self.cfg = cfg or PropensityConfig()
        self.n_bins = self.cfg.n_bins
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 0xF2]))
        self.encoder = SparseEncoder(n_in, self.cfg.hidden, rng, "g2")
        self.decoder = Linear(self.cfg.hidden, self.n_bins + 1, rng, name="phi")
        self.optimizer = Adam(self.parameters(), lr=self.cfg.lr)
        w = np.full(self.n_bins + 1, 1.0 / self.n_bins)
        w[[0, -1]] *= 0.5
        self._trapezoid = w

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_bins + 1)

    def parameters(self) -> dict:
        return {**self.encoder.parameters(), **self.decoder.parameters()}

    def _heights(self, X):
        code = self.encoder(_as_input(X))
        return ad.softmax_rows(self.decoder(code)), code

    def knot_density(self, X) -> np.ndarray:
        """Density values at the knots, one row per input."""
        H, _ = self._heights(X)
        return H.value / (H.value @ self._trapezoid)[:, None]

    def log_density(self, X, z):
        H, code = self._heights(X)
        M = interpolation_matrix(z, self.n_bins)
        interp = ad.sum(H * M, axis=1)
        area = ad.reshape(H @ self._trapezoid[:, None], (-1,))
        return ad.log(interp) - ad.log(area), code

    def density(self, X, z) -> np.ndarray:
        return np.exp(self.log_density(X, z)[0].value)

    def loss(self, X, z):
        """Negative mean log-likelihood plus beta * sparsity; returns (total, nll, kl)."""
        logp, code = self.log_density(X, z)
        nll = -ad.mean(logp)
        kl = sparsity_penalty(code, self.cfg.rho)
        return nll + self.cfg.beta * kl, nll, kl

    def step(self, X, z) -> float:
        self.optimizer.zero_grad()
        total, _, _ = self.loss(X, z)
        total.backward()
        self.optimizer.step()
        return total.item()


def train_individual_ps(X_agg, t, cfg: PropensityConfig | None = None):
    """Fit e(t; x) for ``cfg.epochs`` full-batch steps; returns (model, loss history)."""
    cfg = cfg or PropensityConfig()
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("treatments must be binary")
    n_in = np.shape(X_agg)[1]
    if t.min() == t.max():
        warnings.warn("all treatments identical; predicting the base rate", DegenerateLabels,
                      stacklevel=2)
        base = float(np.clip(t.mean(), cfg.e_clip, 1 - cfg.e_clip))
        return IndividualPSModel(n_in, cfg, constant=base), []
    model = IndividualPSModel(n_in, cfg)
    history = [model.step(X_agg, t) for _ in range(cfg.epochs)]
    return model, history


def train_neighborhood_ps(X_agg, z, cfg: PropensityConfig | None = None):
    """Fit phi(z; x) for ``cfg.epochs`` full-batch steps; returns (model, loss history)."""
    cfg = cfg or PropensityConfig()
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0) or np.any(z > 1):
        raise ValueError("exposures must lie in [0, 1]")
    model = NeighborhoodPSModel(np.shape(X_agg)[1], cfg)
    history = [model.step(X_agg, z) for _ in range(cfg.epochs)]
    return model, history


@dataclass
class BalancingWeights:
    raw: np.ndarray
    normalized: np.ndarray

    @property
    def log_raw(self) -> np.ndarray:
        return np.log(self.raw)


def normalize_weights(raw) -> np.ndarray:
    """Softmax over units with log-raw-weight logits (i.e. raw / sum(raw))."""
    logits = np.log(np.asarray(raw, dtype=np.float64))
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def balancing_weights(e_model, phi_model, X_agg, t, z, e_clip: float = 1e-3,
                      phi_floor: float = 1e-6) -> BalancingWeights:
    """w_i = 1 / (phi(z_i | x_i) * P(t_i | x_i)), plus softmax-normalized copy.

    ``e_model`` needs ``predict(X) -> P(t=1|x)``; ``phi_model`` needs
    ``density(X, z)``.
    """
    t = np.asarray(t)
    e = np.clip(e_model.predict(X_agg), e_clip, 1 - e_clip)
    e_obs = np.where(t == 1, e, 1 - e)
    phi = np.maximum(phi_model.density(X_agg, z), phi_floor)
    raw = 1.0 / (e_obs * phi)
    spread = raw.max() / np.median(raw)
    if spread > 100:
        log.info("extreme balancing weights: max/median = %.1f", spread)
    return BalancingWeights(raw, normalize_weights(raw))
