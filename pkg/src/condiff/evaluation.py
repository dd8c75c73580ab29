"""Ground-truth target densities and the classification-style eval protocol.

The target law reweights the pre-trained terminal density by the gamma-th
power of the oracle label likelihood,

    p_target(x | c, y) = p(y | x, c)^gamma p_pre(x | c) / C(c, y),

computed on a quadrature grid from the closed-form mixture. Sampler output is
scored against it with binned total variation and 1-Wasserstein distance, and
with the hard-bin protocol: per-condition accuracy (binomial standard error),
macro F1 and a confusion matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sde import ConfigurationError
from .worlds import DiffusionWorld

Array = np.ndarray


class GridCoverageError(ConfigurationError):
    """Too much pre-trained mass falls outside the quadrature grid."""


@dataclass
class TargetDensity:
    """Normalized quadrature target on a uniform grid (1-D) or lattice (2-D)."""

    context: int
    label: tuple
    gamma: float
    axes: tuple  # per-dimension grid points
    density: Array  # normalized: sums to 1 against the cell measure
    cell: float  # dx (1-D) or dA (2-D)
    normalizer: float  # C(c, y), the unnormalized mass

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> Array:
        if self.dim == 1:
            return self.axes[0][:, None]
        g0, g1 = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.stack([g0.reshape(-1), g1.reshape(-1)], axis=-1)

    def mass(self) -> float:
        return float(self.density.sum() * self.cell)

    def mean(self) -> Array:
        pts = self.points()
        return (pts * self.density.reshape(-1, 1)).sum(axis=0) * self.cell

    def mass_where(self, predicate) -> float:
        """Probability of {x : predicate(x)} under the target."""
        keep = predicate(self.points()).astype(float)
        return float((keep * self.density.reshape(-1)).sum() * self.cell)

    def cdf_1d(self) -> Array:
        if self.dim != 1:
            raise ConfigurationError("cdf only defined for 1-D targets")
        g = self.axes[0]
        p = self.density
        inner = np.cumsum((p[1:] + p[:-1]) * 0.5 * np.diff(g))
        return np.concatenate([[0.0], inner]) / max(inner[-1], 1e-300)

    def bin_masses(self, edges: Array) -> Array:
        if self.dim != 1:
            raise ConfigurationError("bin masses on edges only defined for 1-D targets")
        cdf = self.cdf_1d()
        return np.diff(np.interp(edges, self.axes[0], cdf))


def target_density(
    world: DiffusionWorld,
    context: int,
    label,
    gamma: float,
    points_1d: int = 2048,
    points_2d: int = 256,
    span: float = 6.0,
    coverage_tol: float = 1e-4,
) -> TargetDensity:
    """Quadrature-normalized target; raises GridCoverageError on a short grid."""
    law = world.data_laws[context]
    label = tuple(int(v) for v in np.atleast_1d(label))
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    lo = law.means.min(axis=0) - span * law.stds.max()
    hi = law.means.max(axis=0) + span * law.stds.max()
    if world.dim == 1:
        axes = (np.linspace(lo[0], hi[0], points_1d),)
        pts = axes[0][:, None]
        cell = float(axes[0][1] - axes[0][0])
    elif world.dim == 2:
        axes = (np.linspace(lo[0], hi[0], points_2d), np.linspace(lo[1], hi[1], points_2d))
        g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
        pts = np.stack([g0.reshape(-1), g1.reshape(-1)], axis=-1)
        cell = float((axes[0][1] - axes[0][0]) * (axes[1][1] - axes[1][0]))
    else:
        raise ConfigurationError("target densities support d <= 2")

    # outside-grid mass of the pre-trained law bounds the target's lost mass
    outside = 1.0
    if world.dim == 1:
        cdf = law.cdf(np.array([lo[0], hi[0]]))
        outside = float(cdf[0] + 1.0 - cdf[1])
    else:
        # isotropic components: per-axis Gaussian bounds, union bound
        outside = 0.0
        for w_k, m_k, s_k in zip(law.weights, law.means, law.stds):
            from scipy.special import erf

            inside = 1.0
            for j in range(2):
                a = 0.5 * (1 + erf((hi[j] - m_k[j]) / (s_k * np.sqrt(2))))
                b = 0.5 * (1 + erf((lo[j] - m_k[j]) / (s_k * np.sqrt(2))))
                inside *= a - b
            outside += w_k * (1.0 - inside)
    if outside > coverage_tol:
        raise GridCoverageError(
            f"pre-trained mass {outside:.2e} outside the grid exceeds {coverage_tol}; widen the grid"
        )

    ctx = np.full(len(pts), context) if world.oracles and world.oracles[0].context_dependent else None
    log_unnorm = law.logpdf(pts)
    for k, oracle in enumerate(world.oracles):
        log_unnorm = log_unnorm + gamma * oracle.log_prob_of(label[k], pts, ctx)
    unnorm = np.exp(log_unnorm)
    normalizer = float(unnorm.sum() * cell)
    if normalizer <= 0:
        raise ConfigurationError(f"degenerate target for (c={context}, y={label}, gamma={gamma})")
    if world.dim == 1:
        density = unnorm / normalizer
    else:
        density = (unnorm / normalizer).reshape(len(axes[0]), len(axes[1]))
    return TargetDensity(
        context=context,
        label=label,
        gamma=gamma,
        axes=axes,
        density=density,
        cell=cell,
        normalizer=normalizer,
    )


def tv_distance(samples: Array, target: TargetDensity, bins: int = 100) -> float:
    """Total variation between binned samples and the binned target in [0, 1].

    Mass outside the grid range is collected into one overflow cell on each
    side so disjoint supports give TV -> 1.
    """
    samples = np.atleast_2d(samples)
    if len(samples) < 1000:
        raise ConfigurationError("need at least 10^3 samples for a stable TV estimate")
    if target.dim == 1:
        g = target.axes[0]
        edges = np.linspace(g[0], g[-1], bins + 1)
        tgt = target.bin_masses(edges)
        hist, _ = np.histogram(samples[:, 0], bins=edges)
        emp = hist / len(samples)
    else:
        per_axis = max(4, int(np.sqrt(bins)))
        e0 = np.linspace(target.axes[0][0], target.axes[0][-1], per_axis + 1)
        e1 = np.linspace(target.axes[1][0], target.axes[1][-1], per_axis + 1)
        hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=(e0, e1))
        emp = (hist / len(samples)).reshape(-1)
        idx0 = np.clip(np.searchsorted(e0, target.axes[0], side="right") - 1, 0, per_axis - 1)
        idx1 = np.clip(np.searchsorted(e1, target.axes[1], side="right") - 1, 0, per_axis - 1)
        tgt2 = np.zeros((per_axis, per_axis))
        mass = target.density * target.cell
        np.add.at(
            tgt2,
            (np.broadcast_to(idx0[:, None], mass.shape), np.broadcast_to(idx1[None, :], mass.shape)),
            mass,
        )
        tgt = tgt2.reshape(-1)
    inside_gap = 0.5 * np.abs(emp - tgt).sum()
    outside_gap = 0.5 * abs((1.0 - emp.sum()) - (1.0 - tgt.sum()))
    return float(min(1.0, inside_gap + outside_gap))


def wasserstein1(samples: Array, target: TargetDensity, directions: int = 64, seed: int = 0) -> float:
    """W1 via the CDF gap (1-D) or a seeded sliced average (2-D)."""
    samples = np.atleast_2d(samples)
    if target.dim == 1:
        g = target.axes[0]
        cdf_t = target.cdf_1d()
        xs = np.sort(samples[:, 0])
        cdf_s = np.searchsorted(xs, g, side="right") / len(xs)
        return float(np.trapezoid(np.abs(cdf_s - cdf_t), g))
    rng = np.random.default_rng(seed)
    pts = target.points()
    w_t = target.density.reshape(-1) * target.cell
    w_t = w_t / w_t.sum()
    total = 0.0
    for _ in range(directions):
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        total += _weighted_w1(samples @ u, None, pts @ u, w_t)
    return float(total / directions)


def _weighted_w1(a_vals, a_w, b_vals, b_w):
    """W1 between two weighted empirical laws on the line via quantile matching."""
    if a_w is None:
        a_w = np.full(len(a_vals), 1.0 / len(a_vals))
    order_a = np.argsort(a_vals)
    order_b = np.argsort(b_vals)
    av, aw = np.asarray(a_vals)[order_a], np.asarray(a_w)[order_a]
    bv, bw = np.asarray(b_vals)[order_b], np.asarray(b_w)[order_b]
    grid = np.unique(np.concatenate([av, bv]))
    ca = np.cumsum(aw)[np.clip(np.searchsorted(av, grid, side="right") - 1, 0, len(av) - 1)]
    ca = np.where(np.searchsorted(av, grid, side="right") == 0, 0.0, ca)
    cb = np.cumsum(bw)[np.clip(np.searchsorted(bv, grid, side="right") - 1, 0, len(bv) - 1)]
    cb = np.where(np.searchsorted(bv, grid, side="right") == 0, 0.0, cb)
    return float(np.sum(np.abs(ca - cb)[:-1] * np.diff(grid)))


@dataclass
class EvalReport:
    """Per-condition counts/accuracy, pooled confusion matrix, macro F1."""

    conditions: list  # ordered (context, label-tuple)
    counts: Array
    accuracy: Array
    accuracy_se: Array
    confusion: Array  # rows: condition index, cols: predicted joint cell
    cell_index: dict  # label-tuple -> column
    macro_f1: float
    mean_oracle_logprob: Array
    incomplete: bool = False
    distances: dict = field(default_factory=dict)  # (c, y) -> {"tv":, "w1":}

    def accuracy_of(self, context, label) -> float:
        key = (context, tuple(int(v) for v in np.atleast_1d(label)))
        return float(self.accuracy[self.conditions.index(key)])

    def to_rows(self):
        rows = []
        for i, (c, y) in enumerate(self.conditions):
            row = {
                "context": c,
                "label": "/".join(str(v) for v in y),
                "n": int(self.counts[i]),
                "accuracy": float(self.accuracy[i]),
                "accuracy_se": float(self.accuracy_se[i]),
                "mean_oracle_logprob": float(self.mean_oracle_logprob[i]),
            }
            dist = self.distances.get((c, y), {})
            row.update({k: float(v) for k, v in dist.items()})
            rows.append(row)
        return rows


def _f1_from_confusion(confusion: Array) -> float:
    """Macro F1 over predicted classes, rows = true condition cells."""
    k = confusion.shape[1]
    f1s = []
    for j in range(min(confusion.shape[0], k)):
        tp = confusion[j, j]
        fp = confusion[:, j].sum() - tp
        fn = confusion[j, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(f1s))


def classification_report(
    world: DiffusionWorld,
    samples_by_condition: dict,
    min_samples: int = 100,
    targets: dict | None = None,
    tv_bins: int = 100,
) -> EvalReport:
    """Hard-bin protocol over per-condition samples.

    `samples_by_condition` maps (context, label-tuple) to a sample array.
    Each sample is assigned the arg-max oracle class on every axis; accuracy
    is exact joint-label agreement with a binomial standard error. Macro F1
    is computed per context from the pooled confusion matrix and averaged.
    When quadrature `targets` are supplied, TV and W1 distances are attached
    per condition.
    """
    cells = world.label_cells()
    cell_index = {tuple(cell): i for i, cell in enumerate(cells)}
    expected = [(c, tuple(cell)) for c in range(world.n_contexts) for cell in cells]
    incomplete = False
    conditions, counts, accs, ses, logps = [], [], [], [], []
    confusion = np.zeros((len(expected), len(cells)), dtype=int)
    distances = {}
    for idx, key in enumerate(expected):
        c, y = key
        if key not in samples_by_condition:
            incomplete = True
            conditions.append(key)
            counts.append(0)
            accs.append(np.nan)
            ses.append(np.nan)
            logps.append(np.nan)
            continue
        xs = np.atleast_2d(samples_by_condition[key])
        n = len(xs)
        if n < min_samples:
            incomplete = True
        ctx = np.full(n, c)
        pred_bins = [o.hard_bin(xs, ctx if o.context_dependent else None) for o in world.oracles]
        pred = np.stack(pred_bins, axis=1)
        cols = np.array([cell_index[tuple(row)] for row in pred])
        np.add.at(confusion[idx], cols, 1)
        hit = (cols == cell_index[y]).astype(float)
        acc = hit.mean()
        conditions.append(key)
        counts.append(n)
        accs.append(acc)
        ses.append(np.sqrt(acc * (1 - acc) / n))
        logps.append(float(world.joint_oracle_log_prob(np.tile(y, (n, 1)), xs, ctx).mean()))
        if targets and key in targets and n >= 1000:
            distances[key] = {
                "tv": tv_distance(xs, targets[key], bins=tv_bins),
                "w1": wasserstein1(xs, targets[key]),
            }

    per_context_f1 = []
    k = len(cells)
    for c in range(world.n_contexts):
        block = confusion[c * k : (c + 1) * k]
        if block.sum() > 0:
            per_context_f1.append(_f1_from_confusion(block))
    macro = float(np.mean(per_context_f1)) if per_context_f1 else float("nan")
    return EvalReport(
        conditions=conditions,
        counts=np.array(counts),
        accuracy=np.array(accs),
        accuracy_se=np.array(ses),
        confusion=confusion,
        cell_index=cell_index,
        macro_f1=macro,
        mean_oracle_logprob=np.array(logps),
        incomplete=incomplete,
        distances=distances,
    )
