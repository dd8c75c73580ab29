"""Analytically tractable pre-trained diffusions over Gaussian-mixture data.

The forward (noising) reference process is variance-preserving,

    dz_tau = -z_tau/2 dtau + dw_tau,   z_0 ~ p_data(.|c),

so z_tau | z_0 ~ N(a z_0, (1-a^2) I) with a(tau) = exp(-tau/2), and every
forward marginal q_tau is itself a Gaussian mixture in closed form. The
pre-trained sampler is the time reversal x_t := z_{T-t},

    dx_t = { x_t/2 + grad log q_{T-t}(x_t | c) } dt + dw_t,

whose drift, score Jacobian, clean-data posterior p(z_0 | z_tau = x) and
posterior mean (the denoised estimate) are all available exactly. Label
oracles p(y | x, c) are smooth tempered-softmax bin memberships of a scalar
feature, so log-probabilities are finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .sde import ConfigurationError, GaussianInit, NoiseSchedule, SimulationError, TimeGrid

Array = np.ndarray

NULL_ID = -1  # unconditional token for contexts and labels

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MixtureLaw:
    """Isotropic Gaussian mixture: weights w_k, means mu_k in R^d, stds s_k."""

    weights: Array
    means: Array
    stds: Array

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.asarray(self.stds, dtype=float)
        if w.ndim != 1 or len(w) < 1:
            raise ConfigurationError("mixture needs at least one component")
        if np.any(w < 0):
            raise ConfigurationError("mixture weights must be nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-12:
            if total <= 0:
                raise ConfigurationError("mixture weights sum to zero")
            w = w / total
        if np.any(s <= 0):
            raise ConfigurationError("component stds must be positive")
        if m.shape[0] != len(w) or s.shape != (len(w),):
            raise ConfigurationError(f"inconsistent mixture shapes: w{w.shape} mu{m.shape} s{s.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _log_components(self, x: Array) -> Array:
        """log w_k + log N(x; mu_k, s_k^2 I), shape (n, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        diff = x[:, None, :] - self.means[None, :, :]
        var = self.stds**2
        sq = np.sum(diff * diff, axis=2) / var[None, :]
        return np.log(self.weights)[None, :] - 0.5 * (sq + d * np.log(var)[None, :] + d * _LOG_2PI)

    def logpdf(self, x: Array) -> Array:
        lc = self._log_components(x)
        m = lc.max(axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(lc - m), axis=1, keepdims=True)))[:, 0]

    def pdf(self, x: Array) -> Array:
        return np.exp(self.logpdf(x))

    def responsibilities(self, x: Array) -> Array:
        lc = self._log_components(x)
        lc -= lc.max(axis=1, keepdims=True)
        e = np.exp(lc)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, x: Array) -> Array:
        """grad_x log pdf, computed with log-sum-exp stabilized responsibilities."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        var = self.stds**2
        diff = self.means[None, :, :] - x[:, None, :]
        lc = np.log(self.weights)[None, :] - 0.5 * (
            np.sum(diff * diff, axis=2) / var[None, :] + d * (np.log(var)[None, :] + _LOG_2PI)
        )
        lc -= lc.max(axis=1, keepdims=True)
        r = np.exp(lc)
        r /= r.sum(axis=1, keepdims=True)
        return np.sum(r[:, :, None] * diff / var[None, :, None], axis=1)

    def score_jacobian(self, x: Array) -> Array:
        """Hessian of log pdf, shape (n, d, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        r = self.responsibilities(x)
        var = self.stds**2
        u = (self.means[None, :, :] - x[:, None, :]) / var[None, :, None]
        s = np.sum(r[:, :, None] * u, axis=1)
        outer = np.einsum("nk,nki,nkj->nij", r, u, u)
        trace = np.einsum("nk,k->n", r, 1.0 / var)
        eye = np.eye(d)[None, :, :]
        return outer - trace[:, None, None] * eye - np.einsum("ni,nj->nij", s, s)

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.stds[comp, None] * z

    def sample_from_noise(self, uniform: Array, normals: Array) -> Array:
        """Inverse-CDF component choice from a U(0,1) plus one normal vector per draw."""
        edges = np.cumsum(self.weights)
        comp = np.searchsorted(edges, uniform, side="right").clip(max=self.n_components - 1)
        return self.means[comp] + self.stds[comp, None] * normals

    def cdf(self, x: Array) -> Array:
        if self.dim != 1:
            raise ConfigurationError("cdf only defined for 1-D mixtures")
        x = np.asarray(x, dtype=float).reshape(-1)
        z = (x[:, None] - self.means[None, :, 0]) / (self.stds[None, :] * np.sqrt(2.0))
        return np.sum(self.weights[None, :] * 0.5 * (1.0 + erf(z)), axis=1)

    def mean(self) -> Array:
        return np.sum(self.weights[:, None] * self.means, axis=0)

    def diffused(self, scale: float, extra_var: float) -> "MixtureLaw":
        """Law of scale * X + N(0, extra_var I) for X ~ self; still a mixture."""
        return MixtureLaw(
            weights=self.weights.copy(),
            means=scale * self.means,
            stds=np.sqrt(scale**2 * self.stds**2 + extra_var),
        )


def pooled(laws: Sequence[MixtureLaw]) -> MixtureLaw:
    """Equal-weight pool of several mixtures (the unconditional data law)."""
    w = np.concatenate([law.weights / len(laws) for law in laws])
    m = np.concatenate([law.means for law in laws], axis=0)
    s = np.concatenate([law.stds for law in laws])
    return MixtureLaw(w, m, s)


@dataclass(frozen=True)
class LabelOracle:
    """Soft class membership p(y | x, c) over bins of a scalar feature s(x).

    Bin scores are the negative distance of s to each bin interval,
    base_j(s) = -max(0, b_{j-1} - s, s - b_j), and p(.|x) is the tempered
    softmax softmax(sharpness * base). Probabilities are strictly positive,
    so log p is finite everywhere; sharpness -> 0 gives the uniform law and
    the argmax class equals the geometric threshold bin of s(x) exactly
    (which is what hard-bin evaluation uses). With `context_boundaries`
    unset the oracle is independent of the context (the
    conditional-independence mode).
    """

    boundaries: Array
    sharpness: float
    feature_axis: int = 0
    context_boundaries: tuple | None = None  # optional per-context boundary arrays

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or len(b) < 1 or np.any(np.diff(b) <= 0):
            raise ConfigurationError("boundaries must be strictly increasing, at least one")
        object.__setattr__(self, "boundaries", b)
        if self.sharpness < 0:
            raise ConfigurationError("sharpness must be >= 0")
        if self.context_boundaries is not None:
            cb = tuple(np.asarray(a, dtype=float) for a in self.context_boundaries)
            for a in cb:
                if len(a) != len(b):
                    raise ConfigurationError("per-context boundaries must share the class count")
            object.__setattr__(self, "context_boundaries", cb)

    @property
    def n_classes(self) -> int:
        return len(self.boundaries) + 1

    @property
    def context_dependent(self) -> bool:
        return self.context_boundaries is not None

    def feature(self, x: Array) -> Array:
        return np.atleast_2d(np.asarray(x, dtype=float))[:, self.feature_axis]

    def _bounds_for(self, contexts: Array | None, n: int) -> Array:
        if self.context_boundaries is None:
            return np.broadcast_to(self.boundaries, (n, len(self.boundaries)))
        if contexts is None:
            raise ConfigurationError("context-dependent oracle needs contexts")
        stacked = np.stack(self.context_boundaries)
        return stacked[np.asarray(contexts)]

    def base_scores_from_feature(self, s: Array, contexts: Array | None = None) -> Array:
        """-distance(s, bin_j) per class for raw feature values of any shape."""
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        if self.context_boundaries is not None:
            ctx = np.broadcast_to(np.asarray(contexts), s.shape).reshape(-1)
            b = self._bounds_for(ctx, len(flat))
        else:
            b = self.boundaries[None, :]
        below = b - flat[:, None]  # > 0 when s is below boundary j
        above = flat[:, None] - b  # > 0 when s is above boundary j
        scores = np.zeros((len(flat), self.n_classes))
        scores[:, 1:] = np.minimum(scores[:, 1:], -below)  # penalty for s < lower edge
        scores[:, :-1] = np.minimum(scores[:, :-1], -above)  # penalty for s > upper edge
        return scores.reshape(s.shape + (self.n_classes,))

    def base_scores(self, x: Array, contexts: Array | None = None) -> Array:
        """-distance(s(x), bin_j) per class; zero inside the bin."""
        if self.context_boundaries is not None:
            return self.base_scores_from_feature(self.feature(x), contexts)
        return self.base_scores_from_feature(self.feature(x))

    def log_probs_from_feature(self, s: Array, contexts: Array | None = None) -> Array:
        z = self.sharpness * self.base_scores_from_feature(s, contexts)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def log_prob_of_feature(self, y: int, s: Array, contexts: Array | None = None) -> Array:
        """log p(y | s) on raw feature values, any shape (for quadrature)."""
        return self.log_probs_from_feature(s, contexts)[..., y]

    def log_probs(self, x: Array, contexts: Array | None = None) -> Array:
        z = self.sharpness * self.base_scores(x, contexts)
        z -= z.max(axis=1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))

    def probs(self, x: Array, contexts: Array | None = None) -> Array:
        return np.exp(self.log_probs(x, contexts))

    def log_prob_of(self, y: Array | int, x: Array, contexts: Array | None = None) -> Array:
        lp = self.log_probs(x, contexts)
        y = np.broadcast_to(np.asarray(y), (lp.shape[0],))
        return lp[np.arange(lp.shape[0]), y]

    def grad_log_prob_of(self, y: Array | int, x: Array, contexts: Array | None = None) -> Array:
        """grad_x log p(y | x, c); nonzero only along the feature axis."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        s = self.feature(x)
        b = self._bounds_for(contexts, n)
        # d base_j / ds: +1 below the bin, -1 above it, 0 inside
        dbase = np.zeros((n, self.n_classes))
        dbase[:, 1:] += (s[:, None] < b).astype(float)
        dbase[:, :-1] -= (s[:, None] > b).astype(float)
        p = self.probs(x, contexts)
        y = np.broadcast_to(np.asarray(y), (n,))
        picked = dbase[np.arange(n), y]
        ds = self.sharpness * (picked - np.sum(p * dbase, axis=1))
        out = np.zeros_like(x)
        out[:, self.feature_axis] = ds
        return out

    def hard_bin(self, x: Array, contexts: Array | None = None) -> Array:
        """Arg-max class; equals the geometric bin of the feature.

        Points exactly on a boundary belong to the lower bin, matching the
        softmax arg-max tie-break.
        """
        s = self.feature(x)
        if self.context_boundaries is None:
            return np.searchsorted(self.boundaries, s, side="left")
        b = self._bounds_for(contexts, len(s))
        return np.sum(b < s[:, None], axis=1)

    def sample_labels(self, x: Array, rng: np.random.Generator, contexts: Array | None = None) -> Array:
        p = self.probs(x, contexts)
        cum = np.cumsum(p, axis=1)
        u = rng.uniform(size=p.shape[0])
        return np.minimum(np.sum(u[:, None] > cum, axis=1), self.n_classes - 1)


@dataclass(frozen=True)
class MixtureInit:
    """Initial law sampling the exact forward-time-T prior of each context."""

    laws: tuple

    @property
    def dim(self) -> int:
        return self.laws[0].dim

    def from_noise(self, contexts: Array, uniform: Array, normals: Array) -> Array:
        out = np.empty_like(normals)
        contexts = np.asarray(contexts)
        for c in np.unique(contexts):
            mask = contexts == c
            law = self.laws[int(c)] if c != NULL_ID else pooled(list(self.laws))
            out[mask] = law.sample_from_noise(uniform[mask], normals[mask])
        return out


class DiffusionWorld:
    """Pre-trained conditional diffusion with closed-form everything.

    Contexts index distinct mixture data laws; context NULL_ID means the
    pooled (unconditional) law. Reverse time t runs over [0, T] with terminal
    samples at t = T; forward time is tau = T - t.
    """

    def __init__(
        self,
        data_laws: Sequence[MixtureLaw],
        grid: TimeGrid,
        oracles: Sequence[LabelOracle] = (),
    ):
        if not data_laws:
            raise ConfigurationError("need at least one context data law")
        dims = {law.dim for law in data_laws}
        if len(dims) != 1:
            raise ConfigurationError("all context laws must share the dimension")
        self.data_laws = tuple(data_laws)
        self.grid = grid
        self.oracles = tuple(oracles)
        self._pooled = pooled(list(data_laws))

    @property
    def dim(self) -> int:
        return self.data_laws[0].dim

    @property
    def n_contexts(self) -> int:
        return len(self.data_laws)

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    @property
    def pooled_law(self) -> MixtureLaw:
        return self._pooled

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.constant(1.0)

    def law(self, context: int) -> MixtureLaw:
        return self._pooled if context == NULL_ID else self.data_laws[context]

    # -- forward-process scalars ------------------------------------------------
    def alpha(self, tau: float) -> float:
        """Mean scale a(tau) = exp(-tau/2) of the VP kernel."""
        return float(np.exp(-0.5 * tau))

    def kernel_var(self, tau: float) -> float:
        """Var(z_tau | z_0) = 1 - a^2(tau), computed stably for small tau."""
        return float(-np.expm1(-tau))

    def marginal(self, tau: float, context: int) -> MixtureLaw:
        """Closed-form forward marginal q_tau(.|c)."""
        return self.law(context).diffused(self.alpha(tau), self.kernel_var(tau))

    # -- reverse-time quantities --------------------------------------------------
    def _per_context(self, x: Array, contexts: Array, fn) -> Array:
        contexts = np.asarray(contexts)
        uniq = np.unique(contexts)
        if len(uniq) == 1:
            return fn(x, int(uniq[0]))
        first = None
        for c in uniq:
            mask = contexts == c
            val = fn(x[mask], int(c))
            if first is None:
                first = np.empty((x.shape[0],) + val.shape[1:])
            first[mask] = val
        return first

    def score(self, t: float, x: Array, contexts: Array) -> Array:
        """grad_x log q_{T-t}(x | c) for the reverse-time state x_t."""
        tau = self.horizon - t
        return self._per_context(
            np.atleast_2d(x), contexts, lambda xs, c: self.marginal(tau, c).score(xs)
        )

    def score_jacobian(self, t: float, x: Array, contexts: Array) -> Array:
        tau = self.horizon - t
        return self._per_context(
            np.atleast_2d(x), contexts, lambda xs, c: self.marginal(tau, c).score_jacobian(xs)
        )

    def pre_drift(self, t: float, x: Array, contexts: Array) -> Array:
        """Reverse drift f_pre(t, c, x) = x/2 + score(T-t, x | c)."""
        x = np.atleast_2d(x)
        return 0.5 * x + self.score(t, x, contexts)

    def pre_drift_jac(self, t: float, x: Array, contexts: Array) -> Array:
        x = np.atleast_2d(x)
        eye = np.eye(self.dim)[None, :, :]
        return 0.5 * eye + self.score_jacobian(t, x, contexts)

    def marginal_score_at(self, taus: Array, x: Array, contexts: Array) -> Array:
        """grad log q_tau(x | c) with a separate forward time per row."""
        taus = np.asarray(taus, dtype=float).reshape(-1)
        x = np.atleast_2d(x)
        a = np.exp(-0.5 * taus)[:, None]
        kv = (-np.expm1(-taus))[:, None]
        out = np.empty_like(x)
        contexts = np.asarray(contexts)
        for c in np.unique(contexts):
            mask = contexts == c
            law = self.law(int(c))
            mu = law.means[None, :, :]  # (1, K, d)
            var = (a[mask] ** 2) * (law.stds**2)[None, :] + kv[mask]  # (nc, K)
            diff = a[mask][:, :, None] * mu - x[mask][:, None, :]  # (nc, K, d)
            lc = (
                np.log(law.weights)[None, :]
                - 0.5 * (np.sum(diff * diff, axis=2) / var + self.dim * (np.log(var) + _LOG_2PI))
            )
            lc -= lc.max(axis=1, keepdims=True)
            r = np.exp(lc)
            r /= r.sum(axis=1, keepdims=True)
            out[mask] = np.sum(r[:, :, None] * diff / var[:, :, None], axis=1)
        return out

    def drift_fn(self):
        """DriftFn adapter for the sde module (labels ignored)."""
        return lambda t, contexts, labels, x: self.pre_drift(t, x, contexts)

    # -- clean-data posterior -----------------------------------------------------
    def posterior_stats(self, t: float, x: Array, contexts: Array):
        """Batched posterior of z_0 given z_{T-t} = x, per path.

        Returns (resp (n, K), means (n, K, d), vars (n, K)); K is padded to the
        max component count when contexts mix different laws.
        """
        tau = self.horizon - t
        a = self.alpha(tau)
        kv = self.kernel_var(tau)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        contexts = np.asarray(contexts)
        kmax = max(self.law(int(c)).n_components for c in np.unique(contexts))
        n = x.shape[0]
        resp = np.zeros((n, kmax))
        means = np.zeros((n, kmax, self.dim))
        povar = np.full((n, kmax), 1e-300)
        for c in np.unique(contexts):
            mask = contexts == c
            law = self.law(int(c))
            k = law.n_components
            if kv <= 0.0:  # tau = 0: point mass at x
                resp[mask, 0] = 1.0
                means[mask, 0, :] = x[mask]
                continue
            marg = law.diffused(a, kv)
            resp[np.ix_(mask, range(k))] = marg.responsibilities(x[mask])
            prec = 1.0 / law.stds**2 + a**2 / kv
            pv = 1.0 / prec
            m = pv[None, :, None] * (
                law.means[None, :, :] / (law.stds**2)[None, :, None] + (a / kv) * x[mask][:, None, :]
            )
            means[np.ix_(mask, range(k))] = m
            povar[np.ix_(mask, range(k))] = pv[None, :]
        return resp, means, povar

    def posterior_x0(self, t: float, x: Array, context: int) -> MixtureLaw:
        """Exact Gaussian-mixture posterior of the clean data given x_t = x."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        resp, means, povar = self.posterior_stats(t, x, np.array([context]))
        keep = resp[0] > 0
        return MixtureLaw(resp[0][keep], means[0][keep], np.sqrt(np.maximum(povar[0][keep], 1e-300)))

    def denoised_mean(self, t: float, x: Array, contexts: Array) -> Array:
        """E[x_T | x_t = x, c], the reconstruction-guidance denoiser."""
        resp, means, _ = self.posterior_stats(t, x, contexts)
        return np.einsum("nk,nkd->nd", resp, means)

    def denoised_mean_jac(self, t: float, x: Array, contexts: Array) -> Array:
        """Jacobian of the denoised mean: (I + (1-a^2) H_logq) / a."""
        tau = self.horizon - t
        a = self.alpha(tau)
        kv = self.kernel_var(tau)
        eye = np.eye(self.dim)[None, :, :]
        return (eye + kv * self.score_jacobian(t, np.atleast_2d(x), contexts)) / a

    # -- label oracles -------------------------------------------------------------
    def oracle_label_probs(self, x: Array, contexts: Array | None = None, axis: int = 0) -> Array:
        return self.oracles[axis].probs(x, contexts)

    def joint_oracle_log_prob(self, labels: Array, x: Array, contexts: Array | None = None) -> Array:
        """Sum of per-axis oracle log-probabilities for label tuples (n, m)."""
        labels = np.atleast_2d(labels)
        total = np.zeros(np.atleast_2d(x).shape[0])
        for axis, oracle in enumerate(self.oracles):
            total += oracle.log_prob_of(labels[:, axis], x, contexts)
        return total

    def joint_oracle_grad(self, labels: Array, x: Array, contexts: Array | None = None) -> Array:
        labels = np.atleast_2d(labels)
        grad = np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))
        for axis, oracle in enumerate(self.oracles):
            grad += oracle.grad_log_prob_of(labels[:, axis], x, contexts)
        return grad

    def label_cells(self):
        """All joint label tuples, slowest axis first."""
        sizes = [o.n_classes for o in self.oracles]
        grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
        return [tuple(int(g.flat[i]) for g in grids) for i in range(grids[0].size)]

    # -- initial laws ---------------------------------------------------------------
    def gaussian_init(self) -> GaussianInit:
        return GaussianInit(dim=self.dim)

    def prior_init(self) -> MixtureInit:
        """Exact q_T prior per context; makes the SDE terminal law exactly p_data."""
        return MixtureInit(laws=tuple(self.marginal(self.horizon, c) for c in range(self.n_contexts)))

    def init_law(self, name: str):
        if name == "gaussian":
            return self.gaussian_init()
        if name == "exact_prior":
            return self.prior_init()
        raise ConfigurationError(f"unknown init law {name!r}")


class ScoreNet:
    """Parametric approximation s(tau, x; c) of the forward-marginal score.

    Contexts enter as a one-hot block. In oracle-injected (residual) mode the
    net output is added to the analytic score through a zero-initialized final
    layer, so the model starts exactly at the optimum.
    """

    def __init__(
        self,
        world: DiffusionWorld,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
        residual: bool = False,
    ):
        from .neural import Mlp, ParamVector  # local import: worlds is lower in the stack

        self.world = world
        self.horizon = world.horizon
        self.n_contexts = world.n_contexts
        in_dim = 1 + world.dim + world.n_contexts
        self.net = Mlp([in_dim, *hidden, world.dim], rng, zero_final=residual)
        self.residual = residual
        self._pv_cls = ParamVector

    def param_vector(self):
        return self._pv_cls(list(self.net.param_items("score")))

    def _features(self, tau, x: Array, contexts: Array) -> Array:
        x = np.atleast_2d(x)
        n = x.shape[0]
        tcol = np.broadcast_to(np.asarray(tau, dtype=float), (n,))[:, None] / self.horizon
        onehot = np.zeros((n, self.n_contexts))
        onehot[np.arange(n), np.asarray(contexts)] = 1.0
        return np.concatenate([tcol, x, onehot], axis=1)

    def score_with_cache(self, tau, x: Array, contexts: Array):
        out, cache = self.net.forward(self._features(tau, x, contexts))
        if self.residual:
            out = out + self._analytic(tau, x, contexts)
        return out, cache

    def score(self, tau, x: Array, contexts: Array) -> Array:
        return self.score_with_cache(tau, x, contexts)[0]

    def score_backward(self, cache, dout: Array):
        din, grads = self.net.backward(cache, dout)
        return din[:, 1 : 1 + self.world.dim], grads

    def score_jac(self, tau, x: Array, contexts: Array) -> Array:
        jac = self.net.input_jacobian(self._features(tau, x, contexts))[:, :, 1 : 1 + self.world.dim]
        if self.residual:
            taus = np.broadcast_to(np.asarray(tau, dtype=float), (np.atleast_2d(x).shape[0],))
            if len(np.unique(taus)) != 1:
                raise ConfigurationError("residual score jacobian needs a shared tau")
            jac = jac + self.world.score_jacobian(self.horizon - float(taus[0]), x, contexts)
        return jac

    def _analytic(self, tau, x: Array, contexts: Array) -> Array:
        taus = np.broadcast_to(np.asarray(tau, dtype=float), (np.atleast_2d(x).shape[0],))
        return self.world.marginal_score_at(taus, x, contexts)

    def grid_error(self, taus=(0.5, 2.0, 4.0), n_grid: int = 101, span: float = 4.0) -> float:
        """Mean absolute error against the analytic score over a state grid."""
        errs = []
        if self.world.dim == 1:
            grid = np.linspace(-span, span, n_grid)[:, None]
        else:
            side = np.linspace(-span, span, int(np.sqrt(n_grid)) + 1)
            grid = np.stack(np.meshgrid(side, side, indexing="ij"), axis=-1).reshape(-1, self.world.dim)
        for c in range(self.n_contexts):
            ctx = np.full(len(grid), c)
            for tau in taus:
                approx = self.score(tau, grid, ctx)
                exact = self.world.marginal(tau, c).score(grid)
                errs.append(np.abs(approx - exact).mean())
        return float(np.mean(errs))


def fit_score_by_denoising(
    world: DiffusionWorld,
    net: ScoreNet,
    stream_seed: int,
    steps: int = 20_000,
    batch: int = 128,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    weighting: str = "kernel_var",
    tau_min: float = 1e-3,
) -> list[float]:
    """Denoising-regression fit of the score net.

    Targets are the conditional forward-kernel scores -(z - a z0)/(1 - a^2);
    the loss weighting lambda(tau) is the kernel variance by default ("zero"
    makes every gradient vanish and leaves the net unchanged). Aborts on a
    divergent loss.
    """
    from .neural import AdamW

    if weighting not in ("kernel_var", "zero"):
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=stream_seed, spawn_key=(6,))))
    pv = net.param_vector()
    opt = AdamW(pv, lr=lr, weight_decay=weight_decay)
    losses = []
    T = world.horizon
    for step in range(steps):
        contexts = gen.integers(0, world.n_contexts, size=batch)
        z0 = np.empty((batch, world.dim))
        for c in np.unique(contexts):
            mask = contexts == c
            z0[mask] = world.law(int(c)).sample(int(mask.sum()), gen)
        tau = gen.uniform(tau_min, T, size=batch)
        a = np.exp(-0.5 * tau)[:, None]
        kv = (-np.expm1(-tau))[:, None]
        eps = gen.standard_normal(z0.shape)
        z = a * z0 + np.sqrt(kv) * eps
        target = -eps / np.sqrt(kv)
        lam = kv[:, 0] if weighting == "kernel_var" else np.zeros(batch)
        pred, cache = net.score_with_cache(tau, z, contexts)
        resid = pred - target
        loss = float(np.mean(lam * np.sum(resid * resid, axis=1)))
        losses.append(loss)
        if not np.isfinite(loss) or loss > 1e8:
            raise SimulationError(f"divergent denoising loss {loss} at step {step}")
        dpred = (2.0 / batch) * lam[:, None] * resid
        _, net_grads = net.net.backward(cache, dpred)
        grads = {}
        for i, (gw, gb) in enumerate(net_grads):
            grads[f"score.w{i}"] = gw
            grads[f"score.b{i}"] = gb
        opt.step(pv.pack(grads))
    return losses


def make_world_w1(horizon: float = 5.0, steps: int = 256, sharpness: float = 4.0) -> DiffusionWorld:
    """1-D two-mode world with a 4-class feature-bin oracle on s(x) = x."""
    grid = TimeGrid(horizon=horizon, steps=steps)
    ctx0 = MixtureLaw(weights=[0.55, 0.45], means=[[-2.0], [2.0]], stds=[0.5, 0.5])
    ctx1 = MixtureLaw(weights=[0.45, 0.55], means=[[-2.2], [1.8]], stds=[0.45, 0.55])
    oracle = LabelOracle(boundaries=[-1.5, 0.0, 1.5], sharpness=sharpness)
    return DiffusionWorld([ctx0, ctx1], grid, oracles=[oracle])


def make_world_w2(horizon: float = 5.0, steps: int = 192, sharpness: float = 4.0) -> DiffusionWorld:
    """2-D four-mode world with two binary soft-sign oracles (one per axis)."""
    grid = TimeGrid(horizon=horizon, steps=steps)
    law = MixtureLaw(
        weights=[0.40, 0.30, 0.22, 0.08],
        means=[[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0], [2.0, 2.0]],
        stds=[0.6, 0.6, 0.6, 0.6],
    )
    o1 = LabelOracle(boundaries=[0.0], sharpness=sharpness, feature_axis=0)
    o2 = LabelOracle(boundaries=[0.0], sharpness=sharpness, feature_axis=1)
    return DiffusionWorld([law], grid, oracles=[o1, o2])
