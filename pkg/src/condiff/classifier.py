"""Conditional class-probability models trained by maximum likelihood.

p_hat(y | x, c) is a small MLP over [x, context embedding] (or [x] alone in
the conditional-independence mode), trained with cross-entropy and
post-calibrated by temperature scaling on a validation split. Multi-task
labels use one model per axis; the joint log-probability is the sum of the
per-axis log-probabilities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .neural import AdamW, EmbeddingTable, Mlp, ParamVector
from .sde import ConfigurationError, RngStream, rollout_terminal
from .worlds import DiffusionWorld

Array = np.ndarray


def sample_offline_dataset(
    world: DiffusionWorld,
    size: int,
    stream: RngStream,
    init_law: str = "exact_prior",
) -> OfflineDataset:
    """Stand-in offline data: x from the pre-trained sampler, y from the oracles.

    Contexts are drawn uniformly; each label axis is sampled from its oracle's
    conditional law at the terminal state.
    """
    label_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=stream.seed, spawn_key=(3, stream.stream_id))))
    contexts = label_rng.integers(0, world.n_contexts, size=size)
    xs = rollout_terminal(
        world.drift_fn(),
        world.noise_schedule(),
        world.grid,
        world.init_law(init_law),
        contexts,
        np.zeros(size, dtype=int),
        stream,
    )
    labels = np.stack(
        [o.sample_labels(xs, label_rng, contexts if o.context_dependent else None) for o in world.oracles],
        axis=1,
    )
    return OfflineDataset(contexts, xs, labels)


@dataclass
class OfflineDataset:
    """Records (c, x, y); labels may have several axes (n, m)."""

    contexts: Array
    xs: Array
    labels: Array

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=int)
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        labels = np.asarray(self.labels, dtype=int)
        self.labels = labels[:, None] if labels.ndim == 1 else labels
        n = len(self.contexts)
        if self.xs.shape[0] != n or self.labels.shape[0] != n:
            raise ConfigurationError("dataset arrays disagree on the record count")

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def dim(self) -> int:
        return self.xs.shape[1]

    def split(self, train_fraction: float, rng: np.random.Generator):
        """Disjoint train/validation split by shuffled indices."""
        if not (0.0 < train_fraction < 1.0):
            raise ConfigurationError("train fraction must be in (0, 1)")
        idx = rng.permutation(len(self))
        cut = max(1, int(round(train_fraction * len(self))))
        cut = min(cut, len(self) - 1)
        tr, va = idx[:cut], idx[cut:]
        pick = lambda i: OfflineDataset(self.contexts[i], self.xs[i], self.labels[i])
        return pick(tr), pick(va)

    def save_text(self, path) -> None:
        """One record per line: context <TAB> label[,label..] <TAB> x1,x2,..."""
        with open(path, "w", encoding="utf-8") as f:
            for c, y, x in zip(self.contexts, self.labels, self.xs):
                ys = ",".join(str(int(v)) for v in y)
                xs = ",".join(f"{v:.17g}" for v in x)
                f.write(f"{int(c)}\t{ys}\t{xs}\n")

    @staticmethod
    def load_text(path) -> "OfflineDataset":
        contexts, labels, xs = [], [], []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                c, ys, vals = line.split("\t")
                contexts.append(int(c))
                labels.append([int(v) for v in ys.split(",")])
                xs.append([float(v) for v in vals.split(",")])
        if not contexts:
            raise ConfigurationError(f"no records in {path}")
        return OfflineDataset(np.array(contexts), np.array(xs), np.array(labels))


def _log_softmax(z: Array) -> Array:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


class ClassifierModel:
    """MLP classifier with optional context embedding and a temperature."""

    def __init__(
        self,
        input_dim: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
        n_contexts: int = 0,
        embed_dim: int = 4,
    ):
        if n_classes < 2:
            raise ConfigurationError("need at least two classes")
        self.n_classes = n_classes
        self.input_dim = input_dim
        self.context_table = EmbeddingTable(n_contexts, embed_dim) if n_contexts > 0 else None
        in_dim = input_dim + (embed_dim if self.context_table else 0)
        self.net = Mlp([in_dim, *hidden, n_classes], rng)
        self.temperature = 1.0

    @property
    def uses_context(self) -> bool:
        return self.context_table is not None

    def param_vector(self) -> ParamVector:
        parts = list(self.net.param_items("net"))
        if self.context_table is not None:
            # break the zero-embedding symmetry through training, rows start at zero
            parts.append(("embed.context", self.context_table.trainable))
        return ParamVector(parts)

    def _features(self, x: Array, contexts: Array | None) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.context_table is None:
            return x
        if contexts is None:
            raise ConfigurationError("model is context-conditional but no contexts given")
        return np.concatenate([x, self.context_table.lookup(contexts)], axis=1)

    def logits(self, x: Array, contexts: Array | None = None) -> Array:
        return self.net(self._features(x, contexts))

    def log_probs(self, x: Array, contexts: Array | None = None) -> Array:
        return _log_softmax(self.logits(x, contexts) / self.temperature)

    def probs(self, x: Array, contexts: Array | None = None) -> Array:
        return np.exp(self.log_probs(x, contexts))

    def log_prob_of(self, y: Array | int, x: Array, contexts: Array | None = None) -> Array:
        lp = self.log_probs(x, contexts)
        y = np.broadcast_to(np.asarray(y), (lp.shape[0],))
        return lp[np.arange(lp.shape[0]), y]

    def log_prob_and_grad(self, y: Array | int, x: Array, contexts: Array | None = None):
        """(log p_hat(y|x,c), grad_x log p_hat) through the network tape."""
        feats = self._features(x, contexts)
        z, cache = self.net.forward(feats)
        lp = _log_softmax(z / self.temperature)
        n = z.shape[0]
        y = np.broadcast_to(np.asarray(y), (n,))
        picked = lp[np.arange(n), y]
        # d log p_y / d z = (onehot - softmax) / temperature
        dz = -np.exp(lp)
        dz[np.arange(n), y] += 1.0
        dz /= self.temperature
        dfeat, _ = self.net.backward(cache, dz)
        return picked, dfeat[:, : self.input_dim]

    def predict(self, x: Array, contexts: Array | None = None) -> Array:
        return self.logits(x, contexts).argmax(axis=1)


class FactoredClassifier:
    """One ClassifierModel per label axis; joint log-prob is the sum."""

    def __init__(self, models: list[ClassifierModel]):
        if not models:
            raise ConfigurationError("need at least one axis model")
        self.models = list(models)

    def log_prob_of(self, labels: Array, x: Array, contexts: Array | None = None) -> Array:
        labels = np.atleast_2d(labels)
        total = np.zeros(np.atleast_2d(x).shape[0])
        for k, model in enumerate(self.models):
            total += model.log_prob_of(labels[:, k], x, contexts)
        return total

    def log_prob_and_grad(self, x: Array, contexts: Array | None, labels: Array):
        labels = np.atleast_2d(labels)
        value = np.zeros(np.atleast_2d(x).shape[0])
        grad = np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))
        for k, model in enumerate(self.models):
            ctx = contexts if model.uses_context else None
            v, g = model.log_prob_and_grad(labels[:, k], x, ctx)
            value += v
            grad += g
        return value, grad


def train_mle(
    model: ClassifierModel,
    dataset: OfflineDataset,
    rng: np.random.Generator,
    epochs: int = 30,
    batch_size: int = 256,
    lr: float = 1e-3,
    weight_decay: float = 0.1,
    label_axis: int = 0,
) -> list[float]:
    """Cross-entropy MLE; returns the per-epoch mean training loss curve."""
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    pv = model.param_vector()
    opt = AdamW(pv, lr=lr, weight_decay=weight_decay, groups={"embed": {"weight_decay": 0.0}} if model.uses_context else None)
    n = len(dataset)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = dataset.xs[idx]
            y = dataset.labels[idx, label_axis]
            ctx = dataset.contexts[idx] if model.uses_context else None
            feats = model._features(x, ctx)
            z, cache = model.net.forward(feats)
            lp = _log_softmax(z)
            loss = -lp[np.arange(len(idx)), y].mean()
            if not np.isfinite(loss):
                raise ConfigurationError("non-finite training loss")
            dz = np.exp(lp)
            dz[np.arange(len(idx)), y] -= 1.0
            dz /= len(idx)
            dfeat, net_grads = model.net.backward(cache, dz)
            grads = {}
            for i, (gw, gb) in enumerate(net_grads):
                grads[f"net.w{i}"] = gw
                grads[f"net.b{i}"] = gb
            if model.uses_context:
                grads["embed.context"] = model.context_table.backward(ctx, dfeat[:, model.input_dim :])
            opt.step(pv.pack(grads))
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / n)
    return losses


def expected_calibration_error(probs: Array, labels: Array, bins: int = 15) -> float:
    """Standard top-label ECE over equal-width confidence bins."""
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    ece = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (conf > lo) & (conf <= hi) if lo > 0 else (conf >= lo) & (conf <= hi)
        if mask.any():
            ece += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


@dataclass(frozen=True)
class CalibrationReport:
    temperature: float
    nll_before: float
    nll_after: float
    ece_before: float
    ece_after: float


def calibrate_temperature(
    model: ClassifierModel,
    validation: OfflineDataset,
    label_axis: int = 0,
    bounds: tuple[float, float] = (0.05, 20.0),
) -> CalibrationReport:
    """Fit the temperature by bounded 1-D NLL minimization on validation data.

    Temperature scaling cannot change the arg-max class. If the search fails
    or does not improve the validation NLL, the temperature stays at 1 with a
    warning.
    """
    if len(validation) == 0:
        raise ConfigurationError("empty validation split")
    if len(validation) < 16:
        warnings.warn("very small validation split: temperature fit will be noisy", RuntimeWarning)
    ctx = validation.contexts if model.uses_context else None
    z = model.logits(validation.xs, ctx)
    y = validation.labels[:, label_axis]
    rows = np.arange(len(y))

    def nll(log_tau: float) -> float:
        lp = _log_softmax(z / np.exp(log_tau))
        return float(-lp[rows, y].mean())

    nll_one = nll(0.0)
    try:
        res = minimize_scalar(nll, bounds=(np.log(bounds[0]), np.log(bounds[1])), method="bounded")
        tau = float(np.exp(res.x))
        nll_fit = float(res.fun)
    except Exception as exc:  # bracket failure: keep tau = 1
        warnings.warn(f"temperature search failed ({exc}); keeping tau = 1", RuntimeWarning)
        tau, nll_fit = 1.0, nll_one
    if nll_fit > nll_one:
        warnings.warn("temperature fit did not improve validation NLL; keeping tau = 1", RuntimeWarning)
        tau, nll_fit = 1.0, nll_one

    probs_before = np.exp(_log_softmax(z))
    probs_after = np.exp(_log_softmax(z / tau))
    report = CalibrationReport(
        temperature=tau,
        nll_before=nll_one,
        nll_after=nll_fit,
        ece_before=expected_calibration_error(probs_before, y),
        ece_after=expected_calibration_error(probs_after, y),
    )
    model.temperature = tau
    return report
