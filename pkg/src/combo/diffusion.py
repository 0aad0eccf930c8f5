"""Gaussian diffusion machinery: schedules, samplers, composition, losses.

Timesteps are 1-based (``1..T``).  ``NoiseSchedule.alpha_bars[0] == 1`` so
``alpha_bars[t]`` can be indexed directly by the diffusion step.

Composition of per-condition noise predictions follows the guided product
rule ``eps_u + sum_i w * (eps_i - eps_u)``.  For Gaussians the rule is exact at
the data level, which :func:`product_of_gaussians` and :func:`gaussian_eps`
make testable without any learned model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tinynet as tn


class ScheduleError(ValueError):
    pass


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray          # index t-1
    alpha_bars: np.ndarray     # index t, alpha_bars[0] == 1

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def abar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t)]

    @property
    def posterior_variance(self) -> np.ndarray:
        """DDPM sampling variances ``sigma_t^2`` (index t-1)."""
        ab = self.alpha_bars
        return self.betas * (1.0 - ab[:-1]) / (1.0 - ab[1:])

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.posterior_variance)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"diffusion step out of range 1..{self.T}: {t}")
        return t


def linear_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, alpha_bars)


def _bcast(v, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` scalar or per-row."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    t = sched.check_t(t)
    ab = _bcast(sched.abar(t), x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def compose_noise(eps_uncond, eps_conds: Sequence, omega: float):
    """Guided composition ``eps_u + sum_i omega * (eps_i - eps_u)``."""
    if len(eps_conds) == 0:
        raise CompositionError("need at least one conditional prediction")
    if omega <= 0:
        raise CompositionError("guidance weight must be positive")
    total = 0.0
    for e in eps_conds:
        if np.shape(e) != np.shape(eps_uncond):
            raise CompositionError("conditional and unconditional predictions differ in shape")
        total = total + e
    # expanded form: the unconditional coefficient is exactly 0 for one condition at weight 1
    return (1.0 - len(eps_conds) * omega) * eps_uncond + omega * total


def predict_start(x_t, t, eps, sched: NoiseSchedule):
    ab = _bcast(sched.abar(t), np.ndim(x_t))
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def eps_from_start(x_t, t, x_start, sched: NoiseSchedule):
    ab = _bcast(sched.abar(t), np.ndim(x_t))
    return (x_t - np.sqrt(ab) * x_start) / np.sqrt(1.0 - ab)


def ddim_timesteps(T: int, steps: int) -> list:
    if not 1 <= steps <= T:
        raise ScheduleError(f"ddim steps must be in 1..{T}")
    ts = sorted({int(round(T * i / steps)) for i in range(1, steps + 1)})
    return [t for t in ts if t >= 1]


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def sample(eps_fn: EpsFn, shape, sched: NoiseSchedule, *, sampler: str = "ddim",
           ddim_steps: int | None = None, rng: np.random.Generator, eta: float = 0.0,
           clip: float | None = None, x_T: np.ndarray | None = None,
           callback: Callable | None = None, corrector_steps: int = 0,
           corrector_step: float = 0.02) -> np.ndarray:
    """Reverse diffusion from standard Gaussian noise.

    ``eps_fn(x_t, t)`` returns the (already composed) noise prediction.
    ``clip`` bounds the implied clean sample at every step.  ``callback(x, t)``
    may replace the running sample after each transition to step ``t``
    (used for clamping observed cells).

    ``corrector_steps`` > 0 appends unadjusted Langevin moves driven by the
    step-1 score.  Summed scores of noised factors are not the score of the
    noised product, so plain ancestral sampling of a composition is biased
    whenever the factors disagree in covariance; at the lowest noise level
    the composed score is (almost) exact and the moves remove that bias.
    """
    x = _reverse(eps_fn, shape, sched, sampler, ddim_steps, rng, eta, clip, x_T, callback)
    scale = np.sqrt(1.0 - sched.alpha_bars[1])
    for _ in range(corrector_steps):
        score = -eps_fn(x, 1) / scale
        x = x + 0.5 * corrector_step * score + np.sqrt(corrector_step) * rng.standard_normal(shape)
        if callback is not None:
            x = callback(x, 0)
    return x


def _reverse(eps_fn, shape, sched, sampler, ddim_steps, rng, eta, clip, x_T, callback):
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=float)
    if sampler == "ddpm":
        steps = list(range(sched.T, 0, -1))
        for t in steps:
            eps = eps_fn(x, t)
            x0 = predict_start(x, t, eps, sched)
            if clip is not None:
                x0 = np.clip(x0, -clip, clip)
            ab_t, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
            beta = sched.betas[t - 1]
            mean = (beta * np.sqrt(ab_prev) / (1 - ab_t)) * x0 + \
                   ((1 - ab_prev) * np.sqrt(1 - beta) / (1 - ab_t)) * x
            if t > 1:
                x = mean + np.sqrt(sched.posterior_variance[t - 1]) * rng.standard_normal(shape)
            else:
                x = mean
            if callback is not None:
                x = callback(x, t - 1)
        return x
    if sampler != "ddim":
        raise ValueError(f"unknown sampler {sampler!r}")
    ts = ddim_timesteps(sched.T, ddim_steps or sched.T)
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        eps = eps_fn(x, t)
        x0 = predict_start(x, t, eps, sched)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = eps_from_start(x, t, x0, sched)
        ab_t, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t_prev]
        sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape)
        if callback is not None:
            x = callback(x, t_prev)
    return x


# ---------------------------------------------------------------------------
# learned denoisers

class DenoiserModel:
    """Noise predictor ``eps(X_t, t | cond_state, action)``.

    ``cond_state`` is a per-cell condition (B, N, Cs).  ``action`` is a flat
    condition vector (B, A) or None for the null (classifier-free) condition.
    Two optional derived maps are appended to ``cond_state``:

    * ``spatial`` (A, N * m): linear maps from the action vector to m per-cell
      channels, e.g. "this is the target cell" or "this is the actor's hand";
    * ``referent`` ``(start, stop, R)``: the action's piece block
      ``action[:, start:stop]`` times ``R`` selects state channels, and the
      map is their (0/1-rescaled) sum per cell, i.e. "the piece the action
      refers to is here".

    Both vanish for the null action.
    """

    def __init__(self, net: tn.Network, spatial: np.ndarray | None = None,
                 referent: tuple | None = None):
        self.net = net
        self.spatial = spatial
        self.referent = referent
        a = net.arch
        self.n_cells, self.n_channels = a["cells"], a["x_ch"]
        self.action_dim = a.get("vec_dim", 0)
        self.n_spatial = 0 if spatial is None else spatial.shape[1] // self.n_cells
        self.n_derived = self.n_spatial + (referent is not None)

    @property
    def state_channels(self) -> int:
        return self.net.arch["cond_ch"] - self.n_derived

    def _inputs(self, cond_state, action):
        cond_state = np.asarray(cond_state, dtype=float)
        batch = cond_state.shape[0]
        if self.action_dim:
            if action is None:
                action = np.zeros((batch, self.action_dim))
            action = np.asarray(action, dtype=float)
        parts = [cond_state]
        if self.spatial is not None:
            parts.append((action @ self.spatial).reshape(batch, self.n_cells, self.n_spatial))
        if self.referent is not None:
            start, stop, sel = self.referent
            w = action[:, start:stop] @ sel
            parts.append(np.einsum("bnc,bc->bn", (cond_state + 1.0) * 0.5, w)[..., None])
        cond = np.concatenate(parts, axis=-1) if len(parts) > 1 else cond_state
        return cond, action

    def eps(self, x_t, t, cond_state, action=None) -> tn.Tensor:
        cond, vec = self._inputs(cond_state, action)
        t = np.broadcast_to(np.asarray(t), (np.shape(x_t)[0],))
        return self.net.forward(x=x_t, t=t, cond=cond, vec=vec)

    def eps_np(self, x_t, t, cond_state, action=None) -> np.ndarray:
        with tn.no_grad():
            return self.eps(x_t, t, cond_state, action).data


def guided_eps_fn(model: DenoiserModel, cond_state: np.ndarray, actions: np.ndarray,
                  omega: float, shared_uncond: bool = True) -> EpsFn:
    """Composed noise prediction for a batch of samples.

    ``cond_state`` is (B, N, Cs); ``actions`` is (B, n, A) with one condition
    per agent.  All ``n + 1`` branches are evaluated in one batched call.
    """
    cond_state = np.asarray(cond_state, dtype=float)
    actions = np.asarray(actions, dtype=float)
    b, n = actions.shape[:2]
    if n == 0:
        raise CompositionError("need at least one action condition")
    rows_cond = np.repeat(cond_state, n + 1, axis=0)
    rows_act = np.concatenate([np.zeros((b, 1, actions.shape[2])), actions], axis=1) \
        .reshape(b * (n + 1), -1)

    def fn(x_t, t):
        rows_x = np.repeat(x_t, n + 1, axis=0)
        eps = model.eps_np(rows_x, t, rows_cond, rows_act)
        eps = eps.reshape((b, n + 1) + eps.shape[1:])
        return compose_noise(eps[:, 0], [eps[:, i + 1] for i in range(n)], omega)

    return fn


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossScaleMatrix:
    """Per-agent, per-cell loss coefficients (n, N)."""

    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if self.coef.ndim != 2 or np.any(self.coef <= 0):
            raise ValueError("loss scale matrix must be 2-D with strictly positive entries")

    @classmethod
    def uniform(cls, n_agents: int, n_cells: int) -> "LossScaleMatrix":
        return cls(np.ones((n_agents, n_cells)))

    @classmethod
    def from_regions(cls, n_cells: int, regions: Sequence, inside: float = 2.0,
                     outside: float = 1.0) -> "LossScaleMatrix":
        c = np.full((len(regions), n_cells), outside)
        for i, cells in enumerate(regions):
            c[i, sorted(cells)] = inside
        return cls(c)


def _draw(batch_size: int, sched: NoiseSchedule, shape, rng: np.random.Generator):
    t = rng.integers(1, sched.T + 1, size=batch_size)
    eps = rng.standard_normal(shape)
    return t, eps


def single_loss_tensor(model: DenoiserModel, batch: dict, scale: LossScaleMatrix | None,
                       sched: NoiseSchedule, rng: np.random.Generator,
                       p_null: float = 0.1) -> tn.Tensor:
    """ADLS-weighted noise-prediction loss with classifier-free condition dropout.

    ``batch`` keys: ``target`` (B, N, K), ``cond`` (B, N, Cs), ``action``
    (B, A) or None, ``agent`` (B,) acting agent per row.  An optional
    ``weight`` (B, N) overrides the scale-matrix rows.
    """
    target = np.asarray(batch["target"], dtype=float)
    b = target.shape[0]
    t, eps = _draw(b, sched, target.shape, rng)
    x_t = forward_noise(target, t, eps, sched)
    action = batch.get("action")
    if action is not None and p_null > 0:
        keep = rng.random(b) >= p_null
        action = np.asarray(action, dtype=float) * keep[:, None]
    pred = model.eps(x_t, t, batch["cond"], action)
    if batch.get("weight") is not None:
        w = np.asarray(batch["weight"], dtype=float)[:, :, None]
    elif scale is not None:
        w = scale.coef[np.asarray(batch["agent"])][:, :, None]
    else:
        w = None
    return tn.mse(pred, eps, w)


def loss_single(model: DenoiserModel, batch: dict, scale: LossScaleMatrix | None,
                sched: NoiseSchedule, rng: np.random.Generator, p_null: float = 0.1):
    """Returns ``(loss, grads)`` for one stage-one batch."""
    model.net.zero_grad()
    loss = single_loss_tensor(model, batch, scale, sched, rng, p_null)
    loss.backward()
    return float(loss.data), model.net.grads()


def composed_loss_tensor(model: DenoiserModel, batch: dict, sched: NoiseSchedule,
                         rng: np.random.Generator, form: str = "mean") -> tn.Tensor:
    """Denoising loss on the composite of ``n`` per-agent predictions, (B, n) joint actions.

    ``form="mean"`` regresses ``mean_i eps(X_t, t | cond, a_i)``; ``form="guided"``
    regresses the sampler's own composite at unit weight,
    ``eps_null + sum_i (eps_i - eps_null)``, with the null branch included in the graph.
    """
    target = np.asarray(batch["target"], dtype=float)
    actions = np.asarray(batch["actions"], dtype=float)
    b, n = actions.shape[:2]
    if n < 2:
        raise CompositionError("composed loss needs joint actions of at least two agents")
    if form not in ("mean", "guided"):
        raise ValueError(f"unknown composed loss form {form!r}")
    t, eps = _draw(b, sched, target.shape, rng)
    x_t = forward_noise(target, t, eps, sched)
    if form == "guided":
        actions = np.concatenate([actions, np.zeros((b, 1, actions.shape[2]))], axis=1)
    k = actions.shape[1]
    rows_x = np.repeat(x_t, k, axis=0)
    rows_c = np.repeat(np.asarray(batch["cond"], dtype=float), k, axis=0)
    pred = model.eps(rows_x, np.repeat(t, k), rows_c, actions.reshape(b * k, -1))
    pred = tn.reshape(pred, (b, k) + target.shape[1:])
    if form == "mean":
        return tn.mse(tn.mean(pred, axis=1), eps)
    conds = tn.tsum(tn.getitem(pred, (slice(None), slice(0, n))), axis=1)
    null = tn.getitem(pred, (slice(None), n))
    return tn.mse(tn.add(conds, tn.mul(null, 1.0 - n)), eps)


def loss_composed(model: DenoiserModel, batch: dict, sched: NoiseSchedule,
                  rng: np.random.Generator, form: str = "mean"):
    model.net.zero_grad()
    loss = composed_loss_tensor(model, batch, sched, rng, form)
    loss.backward()
    return float(loss.data), model.net.grads()


# ---------------------------------------------------------------------------
# analytic Gaussian oracle

@dataclass(frozen=True)
class GaussianFactor:
    mean: np.ndarray
    var: np.ndarray          # diagonal covariance

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        v = np.broadcast_to(np.asarray(self.var, dtype=float), m.shape).copy()
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "var", v)

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.var


def product_of_gaussians(prior: GaussianFactor | None, factors: Sequence[GaussianFactor]) -> GaussianFactor:
    """Closed form of ``prior * prod_i (factor_i / prior)`` for diagonal Gaussians.

    ``prior=None`` is the flat-prior limit (zero prior precision).
    """
    if not factors:
        raise CompositionError("need at least one factor")
    dim = factors[0].mean.shape
    lam_p = np.zeros(dim) if prior is None else prior.precision
    h_p = np.zeros(dim) if prior is None else prior.precision * prior.mean
    lam = lam_p.copy()
    h = h_p.copy()
    for f in factors:
        lam += f.precision - lam_p
        h += f.precision * f.mean - h_p
    if np.any(lam <= 0):
        raise CompositionError("composed precision is not positive; the product is improper")
    return GaussianFactor(h / lam, 1.0 / lam)


def gaussian_eps(factor: GaussianFactor, x_t: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction for data distributed as ``factor``."""
    ab = _bcast(sched.abar(t), np.ndim(x_t))
    var_t = ab * factor.var + (1.0 - ab)
    return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * factor.mean) / var_t


def composed_gaussian_eps_fn(prior: GaussianFactor, factors: Sequence[GaussianFactor],
                             sched: NoiseSchedule, omega: float = 1.0) -> EpsFn:
    """Composed noise prediction built from exact Gaussian scores."""
    def fn(x_t, t):
        return compose_noise(gaussian_eps(prior, x_t, t, sched),
                             [gaussian_eps(f, x_t, t, sched) for f in factors], omega)

    return fn
