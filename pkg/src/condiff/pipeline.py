"""Stage orchestration: world -> dataset -> classifier -> finetune -> baselines -> eval.

Each stage is idempotent given its inputs, reads its dependencies from disk,
derives its randomness from (config seed, stage name) alone, and records its
outputs in the run manifest, so a resumed run produces byte-identical outputs
to an uninterrupted one. Data files carry no timestamps; the spec-shaped
training log keeps its wallclock column and is the one documented exception
to byte-identical reruns.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (
    ClassifierModel,
    FactoredClassifier,
    OfflineDataset,
    calibrate_temperature,
    sample_offline_dataset,
    train_mle,
)
from .config import ExperimentConfig, build_world
from .evaluation import classification_report, target_density, tv_distance, wasserstein1
from .finetune import AugmentedDrift, ExploratoryDistribution, FinetuneConfig, finetune
from .guidance import (
    classifier_free_finetune,
    sample_doob,
    sample_mixed_guidance,
    sample_reconstruction,
    smc_sample,
    stepwise_best_of_n,
)
from .neural import load_checkpoint, restore_into, save_checkpoint
from .sde import ConfigurationError, RngStream, rollout_terminal
from .worlds import DiffusionWorld

STAGES = ("dataset", "classifier", "finetune", "baselines", "eval")

FLOAT_FMT = "%.12g"


def stage_seed(cfg: ExperimentConfig, stage: str) -> int:
    """Stable per-stage seed independent of execution history."""
    ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(100 + STAGES.index(stage),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class RunManifest:
    """Config hash, code version, per-stage status and outputs; enough to
    resume or exactly re-run any stage."""

    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = path
        self.data = {
            "config_hash": cfg.hash(),
            "world_fingerprint": _world_fingerprint(cfg),
            "code_version": __version__,
            "stages": {},
        }
        if path.exists():
            with open(path) as f:
                old = json.load(f)
            if old.get("config_hash") == self.data["config_hash"]:
                self.data = old

    def mark(self, stage: str, status: str, outputs: list[str], seed: int) -> None:
        self.data["stages"][stage] = {"status": status, "seed": seed, "outputs": sorted(outputs)}
        self.save()

    def done(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or entry["status"] != "done":
            return False
        return all((self.path.parent / p).exists() for p in entry["outputs"])

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")


def _world_fingerprint(cfg: ExperimentConfig) -> str:
    import hashlib

    blob = json.dumps({"world": asdict(cfg.world), "init_law": cfg.init_law}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, float):
                    cells.append(FLOAT_FMT % v)
                else:
                    cells.append(str(v))
            f.write(",".join(cells) + "\n")


def save_samples(path: Path, context: int, label: tuple, xs: np.ndarray) -> None:
    header = ["context"] + [f"y{k}" for k in range(len(label))] + [f"x{j}" for j in range(xs.shape[1])]
    rows = [[context, *label, *map(float, x)] for x in xs]
    _write_csv(path, header, rows)


def load_samples(path: Path) -> np.ndarray:
    data = np.genfromtxt(path, delimiter=",", names=True)
    xcols = [n for n in data.dtype.names if n.startswith("x")]
    return np.stack([data[c] for c in xcols], axis=1)


def write_histogram_svg(path: Path, samples: np.ndarray, target=None, bins: int = 60) -> None:
    """Tiny static SVG histogram with an optional target-density overlay."""
    vals = samples[:, 0]
    lo, hi = float(vals.min()), float(vals.max())
    if target is not None:
        lo, hi = float(target.axes[0][0]), float(target.axes[0][-1])
    hist, edges = np.histogram(vals, bins=bins, range=(lo, hi), density=True)
    w, h, pad = 640, 360, 40
    ymax = max(hist.max(), (target.density.max() if target is not None else 0.0)) * 1.05 or 1.0
    sx = lambda x: pad + (x - lo) / (hi - lo) * (w - 2 * pad)
    sy = lambda y: h - pad - y / ymax * (h - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>',
    ]
    for v, a, b in zip(hist, edges[:-1], edges[1:]):
        parts.append(
            f'<rect x="{sx(a):.2f}" y="{sy(v):.2f}" width="{max(sx(b)-sx(a)-0.5, 0.5):.2f}" '
            f'height="{max(h-pad-sy(v), 0):.2f}" fill="#7aa6c2"/>'
        )
    if target is not None:
        pts = " ".join(f"{sx(x):.2f},{sy(d):.2f}" for x, d in zip(target.axes[0], target.density))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="1.5"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


# -- stage implementations ----------------------------------------------------------


def _conditions(world: DiffusionWorld):
    return [(c, tuple(cell)) for c in range(world.n_contexts) for cell in world.label_cells()]


def _cell_tag(context: int, label: tuple) -> str:
    return f"c{context}_y" + "-".join(str(v) for v in label)


def stage_dataset(cfg: ExperimentConfig, out: Path, world: DiffusionWorld) -> list[str]:
    seed = stage_seed(cfg, "dataset")
    ds = sample_offline_dataset(world, cfg.dataset.size, RngStream(seed), init_law=cfg.init_law)
    ds.save_text(out / "dataset.txt")
    return ["dataset.txt"]


def _build_axis_classifier(cfg: ExperimentConfig, world: DiffusionWorld, axis: int, rng) -> ClassifierModel:
    return ClassifierModel(
        input_dim=world.dim,
        n_classes=world.oracles[axis].n_classes,
        rng=rng,
        hidden=tuple(cfg.classifier.hidden),
        n_contexts=world.n_contexts if cfg.classifier.use_context else 0,
        embed_dim=cfg.classifier.embed_dim,
    )


def _classifier_ckpt_meta(cfg: ExperimentConfig, world: DiffusionWorld, axis: int, model: ClassifierModel) -> dict:
    return {
        "axis": axis,
        "n_classes": model.n_classes,
        "hidden": list(cfg.classifier.hidden),
        "use_context": cfg.classifier.use_context,
        "embed_dim": cfg.classifier.embed_dim,
        "temperature": model.temperature,
    }


def load_classifier(cfg: ExperimentConfig, world: DiffusionWorld, out: Path) -> FactoredClassifier:
    models = []
    for axis in range(len(world.oracles)):
        path = out / f"classifier_axis{axis}.npz"
        if not path.exists():
            raise ConfigurationError(f"missing classifier checkpoint {path}; run the classifier stage")
        ckpt = load_checkpoint(path)
        rng = np.random.default_rng(0)  # layout only; weights overwritten
        model = _build_axis_classifier(cfg, world, axis, rng)
        restore_into(model.param_vector(), ckpt)
        model.temperature = float(ckpt["header"]["meta"]["temperature"])
        models.append(model)
    return FactoredClassifier(models)


def stage_classifier(cfg: ExperimentConfig, out: Path, world: DiffusionWorld) -> list[str]:
    seed = stage_seed(cfg, "classifier")
    ds = OfflineDataset.load_text(out / "dataset.txt")
    rng = np.random.default_rng(seed)
    train, val = ds.split(cfg.dataset.train_fraction, rng)
    outputs = []
    calib_rows = []
    for axis in range(len(world.oracles)):
        model = _build_axis_classifier(cfg, world, axis, np.random.default_rng(seed + 17 * axis))
        losses = train_mle(
            model,
            train,
            np.random.default_rng(seed + 31 * axis),
            epochs=cfg.classifier.epochs,
            batch_size=cfg.classifier.batch,
            lr=cfg.classifier.lr,
            weight_decay=cfg.classifier.weight_decay,
            label_axis=axis,
        )
        if cfg.classifier.calibrate:
            report = calibrate_temperature(model, val, label_axis=axis)
            calib_rows.append(
                [axis, report.temperature, report.nll_before, report.nll_after, report.ece_before, report.ece_after]
            )
        else:
            calib_rows.append([axis, 1.0, float("nan"), float("nan"), float("nan"), float("nan")])
        name = f"classifier_axis{axis}.npz"
        save_checkpoint(out / name, model.param_vector(), meta=_classifier_ckpt_meta(cfg, world, axis, model))
        _write_csv(out / f"classifier_loss_axis{axis}.csv", ["epoch", "loss"], list(enumerate(losses)))
        outputs += [name, f"classifier_loss_axis{axis}.csv"]
    _write_csv(
        out / "calibration.csv",
        ["axis", "temperature", "nll_before", "nll_after", "ece_before", "ece_after"],
        calib_rows,
    )
    return outputs + ["calibration.csv"]


def _finetune_cfg(cfg: ExperimentConfig) -> FinetuneConfig:
    trunc = cfg.finetune.truncation
    if trunc not in ("uniform", "full"):
        trunc = int(trunc)
    return FinetuneConfig(
        gamma=cfg.finetune.gamma,
        batch=cfg.finetune.batch,
        updates=cfg.finetune.updates,
        lr_net=cfg.finetune.lr_net,
        lr_embed=cfg.finetune.lr_embed,
        lr_schedule=cfg.finetune.lr_schedule,
        lr_floor_frac=cfg.finetune.lr_floor_frac,
        ema=cfg.finetune.ema,
        weight_decay=cfg.finetune.weight_decay,
        embed_dim=cfg.finetune.embed_dim,
        hidden=tuple(cfg.finetune.hidden),
        truncation=trunc,
        reward=cfg.finetune.reward,
        init_law=cfg.init_law,
        seed=stage_seed(cfg, "finetune"),
        checkpoint_every=cfg.finetune.checkpoint_every,
    )


def build_augmented(cfg: ExperimentConfig, world: DiffusionWorld, seed: int) -> AugmentedDrift:
    return AugmentedDrift(
        world,
        np.random.default_rng(seed),
        embed_dim=cfg.finetune.embed_dim,
        hidden=tuple(cfg.finetune.hidden),
    )


def load_augmented(cfg: ExperimentConfig, world: DiffusionWorld, path: Path) -> AugmentedDrift:
    if not path.exists():
        raise ConfigurationError(f"missing checkpoint {path}; run the finetune stage")
    ckpt = load_checkpoint(path)
    aug = build_augmented(cfg, world, seed=0)
    restore_into(aug.param_vector, ckpt)
    return aug


def stage_finetune(cfg: ExperimentConfig, out: Path, world: DiffusionWorld) -> list[str]:
    fcfg = _finetune_cfg(cfg)
    classifier = load_classifier(cfg, world, out) if cfg.finetune.reward == "classifier" else None
    aug = build_augmented(cfg, world, seed=fcfg.seed)
    pi = ExploratoryDistribution.for_world(world)
    result = finetune(world, classifier, aug, pi, fcfg)
    save_checkpoint(out / "finetuned.npz", aug.param_vector, meta={"gamma": fcfg.gamma})
    outputs = ["finetuned.npz", "training_log.csv"]
    final = aug.param_vector.flatten()
    for update, vec in result.snapshots:
        aug.param_vector.assign(vec)
        name = f"finetuned_u{update}.npz"
        save_checkpoint(out / name, aug.param_vector, meta={"gamma": fcfg.gamma, "update": update})
        outputs.append(name)
    aug.param_vector.assign(final)
    _write_csv(
        out / "training_log.csv",
        ["update", "mean_reward", "mean_kl", "grad_norm", "wallclock"],
        result.log_rows(),
    )
    return outputs


def _gen_method_samples(cfg, world, method, classifier, aug, cf_aug, context, label, n, seed):
    gamma = cfg.finetune.gamma
    stream = RngStream(seed)
    contexts = np.full(n, context)
    labels = np.tile(np.asarray(label), (n, 1))
    sched = world.noise_schedule()
    if method == "pretrained":
        return rollout_terminal(
            world.drift_fn(), sched, world.grid, world.init_law(cfg.init_law), contexts, labels, stream
        )
    if method == "finetuned":
        return rollout_terminal(
            aug.drift, sched, world.grid, world.init_law(cfg.init_law), contexts, labels, stream
        )
    if method == "doob":
        g = cfg.baselines.doob_gamma if cfg.baselines.doob_gamma >= 0 else gamma
        return sample_doob(world, "oracle", list(label), context, g, n, stream, init_law=cfg.init_law)
    if method == "reconstruction":
        g = cfg.baselines.reconstruction_gamma if cfg.baselines.reconstruction_gamma >= 0 else gamma
        return sample_reconstruction(world, classifier, list(label), context, g, n, stream, init_law=cfg.init_law)
    if method == "smc":
        chunks = []
        got = 0
        run = 0
        while got < n:
            take = min(cfg.baselines.smc_particles, n - got) if got else cfg.baselines.smc_particles
            xs = smc_sample(
                world,
                classifier,
                list(label),
                context,
                gamma,
                cfg.baselines.smc_particles,
                RngStream(seed, stream_id=run),
                ess_fraction=cfg.baselines.smc_ess_fraction,
                init_law=cfg.init_law,
            )
            chunks.append(xs[:take])
            got += len(xs[:take])
            run += 1
        return np.concatenate(chunks)[:n]
    if method == "best_of_n":
        return stepwise_best_of_n(
            world, classifier, list(label), context, cfg.baselines.best_of_n, n, stream, init_law=cfg.init_law
        )
    if method == "classifier_free":
        return rollout_terminal(
            cf_aug.drift, sched, world.grid, world.init_law(cfg.init_law), contexts, labels, stream
        )
    raise ConfigurationError(f"unknown method {method!r}")


def stage_baselines(cfg: ExperimentConfig, out: Path, world: DiffusionWorld) -> list[str]:
    seed = stage_seed(cfg, "baselines")
    methods = list(cfg.baselines.methods)
    need_classifier = {"reconstruction", "smc", "best_of_n", "classifier_free"} & set(methods)
    need_classifier = need_classifier or cfg.finetune.reward == "classifier"
    classifier = load_classifier(cfg, world, out) if need_classifier else None
    aug = load_augmented(cfg, world, out / "finetuned.npz") if "finetuned" in methods or "mixed" in methods else None
    outputs = []
    (out / "samples").mkdir(exist_ok=True)

    cf_aug = None
    if "classifier_free" in methods:
        cf_aug = build_augmented(cfg, world, seed=seed + 5)
        losses = classifier_free_finetune(
            world,
            classifier,
            cf_aug,
            cfg.baselines.classifier_free_budget,
            RngStream(seed + 6),
            updates=cfg.baselines.classifier_free_updates,
            init_law=cfg.init_law,
        )
        save_checkpoint(out / "classifier_free.npz", cf_aug.param_vector, meta={})
        _write_csv(out / "classifier_free_loss.csv", ["update", "loss"], list(enumerate(losses)))
        outputs += ["classifier_free.npz", "classifier_free_loss.csv"]

    conditions = _conditions(world)
    for method in methods:
        if method == "mixed":
            continue  # handled below with its gamma sweep
        n = cfg.eval.samples_per_condition
        if method in cfg.eval.tv_methods:
            n = max(n, cfg.eval.tv_samples)
        for idx, (c, y) in enumerate(conditions):
            xs = _gen_method_samples(
                cfg, world, method, classifier, aug, cf_aug, c, y, n, seed + 1000 * (1 + methods.index(method)) + idx
            )
            name = f"samples/{method}_{_cell_tag(c, y)}.csv"
            save_samples(out / name, c, y, xs)
            outputs.append(name)

    if "mixed" in methods:
        for g1, g2 in cfg.baselines.mixed_gammas:
            for idx, (c, y) in enumerate(conditions):
                stream = RngStream(seed + 777, stream_id=idx)
                xs = sample_mixed_guidance(
                    world, aug, list(y), c, g1, g2, cfg.eval.samples_per_condition, stream, init_law=cfg.init_law
                )
                name = f"samples/mixed_{g1:g}_{g2:g}_{_cell_tag(c, y)}.csv"
                save_samples(out / name, c, y, xs)
                outputs.append(name)
    return outputs


def stage_eval(cfg: ExperimentConfig, out: Path, world: DiffusionWorld) -> list[str]:
    conditions = _conditions(world)
    gamma = cfg.finetune.gamma
    targets = {
        (c, y): target_density(
            world, c, y, gamma, points_1d=cfg.eval.grid_points_1d, points_2d=cfg.eval.grid_points_2d
        )
        for c, y in conditions
    }
    outputs = []
    for (c, y), tgt in targets.items():
        name = f"density_{_cell_tag(c, y)}.csv"
        if world.dim == 1:
            rows = list(zip(map(float, tgt.axes[0]), map(float, tgt.density)))
            _write_csv(out / name, ["x", "density"], rows)
            outputs.append(name)

    methods = [m for m in cfg.baselines.methods if m != "mixed"]
    metric_rows = []
    acc_by_method = {}
    for method in methods:
        samples = {}
        for c, y in conditions:
            path = out / f"samples/{method}_{_cell_tag(c, y)}.csv"
            if path.exists():
                samples[(c, y)] = load_samples(path)
        report = classification_report(
            world,
            {k: v[: cfg.eval.samples_per_condition] for k, v in samples.items()},
            targets=None,
        )
        acc_by_method[method] = report
        # distances on the full (possibly larger) sample files
        for (c, y) in conditions:
            tv = w1 = float("nan")
            if method in cfg.eval.tv_methods and (c, y) in samples and len(samples[(c, y)]) >= 1000:
                tv = tv_distance(samples[(c, y)], targets[(c, y)], bins=cfg.eval.tv_bins)
                w1 = wasserstein1(samples[(c, y)], targets[(c, y)])
            i = report.conditions.index((c, y))
            metric_rows.append(
                [
                    method,
                    c,
                    "/".join(map(str, y)),
                    int(report.counts[i]),
                    float(report.accuracy[i]),
                    float(report.accuracy_se[i]),
                    report.macro_f1,
                    float(report.mean_oracle_logprob[i]),
                    tv,
                    w1,
                ]
            )
        conf_name = f"confusion_{method}.csv"
        header = ["context", "label"] + ["pred_" + "-".join(map(str, cell)) for cell in world.label_cells()]
        rows = [
            [c, "/".join(map(str, y)), *map(int, report.confusion[i])]
            for i, (c, y) in enumerate(report.conditions)
        ]
        _write_csv(out / conf_name, header, rows)
        outputs.append(conf_name)

    _write_csv(
        out / "metrics.csv",
        ["method", "context", "label", "n", "accuracy", "accuracy_se", "macro_f1", "mean_oracle_logprob", "tv", "w1"],
        metric_rows,
    )
    outputs.append("metrics.csv")

    # histograms for 1-D worlds: finetuned + pretrained vs target, SVG + data
    if world.dim == 1:
        for method in [m for m in ("pretrained", "finetuned") if m in methods]:
            for c, y in conditions:
                path = out / f"samples/{method}_{_cell_tag(c, y)}.csv"
                if path.exists():
                    xs = load_samples(path)
                    tgt = targets[(c, y)]
                    name = f"histogram_{method}_{_cell_tag(c, y)}.svg"
                    write_histogram_svg(out / name, xs, tgt)
                    outputs.append(name)
                    lo, hi = float(tgt.axes[0][0]), float(tgt.axes[0][-1])
                    hist, edges = np.histogram(xs[:, 0], bins=60, range=(lo, hi), density=True)
                    centers = 0.5 * (edges[:-1] + edges[1:])
                    hname = f"histogram_{method}_{_cell_tag(c, y)}.csv"
                    _write_csv(out / hname, ["bin_center", "density"], list(zip(map(float, centers), map(float, hist))))
                    outputs.append(hname)

    lines = [f"run {cfg.hash()}  world={cfg.world.preset or 'inline'}  gamma={gamma}"]
    for method in methods:
        rep = acc_by_method[method]
        accs = rep.accuracy[np.isfinite(rep.accuracy)]
        lines.append(
            f"{method:>16}: mean accuracy {accs.mean():.3f}  macro F1 {rep.macro_f1:.3f}"
            + ("  [incomplete]" if rep.incomplete else "")
        )
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append("report.txt")
    return outputs


_STAGE_FNS = {
    "dataset": stage_dataset,
    "classifier": stage_classifier,
    "finetune": stage_finetune,
    "baselines": stage_baselines,
    "eval": stage_eval,
}


def plan(cfg: ExperimentConfig) -> str:
    world = build_world(cfg.world)
    lines = [
        f"config hash: {cfg.hash()}",
        f"world: {cfg.world.preset or 'inline'} (d={world.dim}, contexts={world.n_contexts}, "
        f"labels={'x'.join(str(o.n_classes) for o in world.oracles)}, T={world.horizon}, L={world.grid.steps})",
        f"init law: {cfg.init_law}",
        f"output dir: {cfg.output_dir}",
        "stages:",
    ]
    for s in STAGES:
        lines.append(f"  {s}: seed {stage_seed(cfg, s)}")
    lines.append(f"methods: {', '.join(cfg.baselines.methods)}")
    return "\n".join(lines)


def run_pipeline(
    cfg: ExperimentConfig,
    stages: list[str] | None = None,
    resume: bool = False,
    out_dir: str | None = None,
    log=print,
) -> int:
    """Execute the selected stages in dependency order; returns an exit code.

    `stages=[]` is a dry run: validate, print the plan, no compute. With
    `resume=True`, stages already marked done (with outputs present) are
    skipped.
    """
    if stages is not None and len(stages) == 0:
        log(plan(cfg))
        return 0
    selected = list(STAGES) if stages is None else [s for s in STAGES if s in stages]
    if stages is not None:
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ConfigurationError(f"unknown stages {sorted(unknown)}; valid: {STAGES}")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json", cfg)
    world = build_world(cfg.world)
    for stage in selected:
        if resume and manifest.done(stage):
            log(f"[{stage}] already done, skipping")
            continue
        seed = stage_seed(cfg, stage)
        log(f"[{stage}] running (seed {seed})")
        try:
            outputs = _STAGE_FNS[stage](cfg, out, world)
        except Exception as exc:
            manifest.mark(stage, f"failed: {type(exc).__name__}", [], seed)
            log(f"[{stage}] FAILED: {exc}")
            return 1
        manifest.mark(stage, "done", outputs, seed)
        log(f"[{stage}] done ({len(outputs)} outputs)")
    return 0


def compare_runs(run_dirs: list[str], log=print) -> list[dict]:
    """Consolidated method-vs-metric table across runs sharing a world."""
    tables = []
    fingerprints = set()
    for d in run_dirs:
        mpath = Path(d) / "manifest.json"
        if not mpath.exists():
            raise ConfigurationError(f"{d}: no manifest.json")
        with open(mpath) as f:
            manifest = json.load(f)
        fingerprints.add(manifest["world_fingerprint"])
        if len(fingerprints) > 1:
            raise ConfigurationError("runs use different worlds or init laws; refusing to compare")
        metrics = Path(d) / "metrics.csv"
        if not metrics.exists():
            raise ConfigurationError(f"{d}: no metrics.csv (eval stage not run)")
        with open(metrics) as f:
            header = f.readline().strip().split(",")
            for line in f:
                cells = line.strip().split(",")
                tables.append({"run": str(d), **dict(zip(header, cells))})
    by_method: dict = {}
    for row in tables:
        key = (row["run"], row["method"])
        entry = by_method.setdefault(
            key, {"run": row["run"], "method": row["method"], "accuracy": [], "macro_f1": [], "tv": [], "w1": []}
        )
        entry["accuracy"].append(float(row["accuracy"]))
        entry["macro_f1"].append(float(row["macro_f1"]))
        for k in ("tv", "w1"):
            v = float(row[k])
            if np.isfinite(v):
                entry[k].append(v)
    rows = []
    for (run, method), e in sorted(by_method.items()):
        rows.append(
            {
                "run": run,
                "method": method,
                "accuracy": float(np.mean(e["accuracy"])),
                "macro_f1": float(np.mean(e["macro_f1"])),
                "tv": float(np.mean(e["tv"])) if e["tv"] else float("nan"),
                "w1": float(np.mean(e["w1"])) if e["w1"] else float("nan"),
            }
        )
    log(f"{'run':<24} {'method':<16} {'accuracy':>9} {'macro_f1':>9} {'tv':>8} {'w1':>8}")
    for r in rows:
        log(
            f"{r['run']:<24} {r['method']:<16} {r['accuracy']:>9.4f} {r['macro_f1']:>9.4f} "
            f"{r['tv']:>8.4f} {r['w1']:>8.4f}"
        )
    return rows
