"""End-to-end orchestration: poison, train, repair, evaluate, sweep.

Every stage writes its artifact to the run directory and is recomputed only
when the file is missing, so single-stage CLI calls compose into the same
deterministic pipeline.  The repair stages are data-free by construction:
`defend` accepts a model and generator configs, never a dataset handle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    PoisonSpec,
    apply_trigger,
    gen_synthetic,
    load_dataset,
    make_asr_testset,
    poison,
    save_dataset,
)
from .errors import EmptyInputError, ValidationError
from .fusion import (
    FusionConfig,
    FusionResult,
    align_and_fuse,
    fuse_models,
    vanilla_fuse,
    weight_norm_report,
)
from .ioutil import atomic_write_text
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    ReLU,
    TrainConfig,
    clone_model,
    forward,
    init_conv,
    init_dense,
    load_model,
    save_model,
    train,
)
from .tensors import Rng
from .unlearn import (
    NwcReport,
    PruneResult,
    UnlearnConfig,
    compute_nwc,
    nwc_correlation,
    prune_top_gamma,
    random_unlearn,
    unlearn_on_samples,
)

SCHEMA_VERSION = 1

ACC_DROP_LIMIT = 10.0  # percentage points
ASR_LIMIT = 20.0  # percent


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataConfig:
    class_count: int = 10
    per_class: int = 500
    test_per_class: int = 100
    shape: tuple[int, int, int] = (1, 16, 16)
    noise: float = 0.15
    jitter: int = 2


@dataclass
class ArchSpec:
    kind: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (256, 128, 64)
    channels: tuple[int, ...] = (16, 32)

    def validate(self):
        if self.kind not in ("mlp", "cnn"):
            raise ValidationError(f"unknown architecture {self.kind!r}")


@dataclass
class SweepConfig:
    gammas: tuple[float, ...] = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
    steps: tuple[int, ...] = (5, 20, 40)
    lambdas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    ceilings: tuple[int, ...] = (1, 3, 5, 7, 9)
    u2r_seeds: int = 3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.2, epochs=30))
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    gamma: float = 0.05
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0

    def resolve(self) -> "RunConfig":
        """Copy with every stage seed derived from the master seed."""
        base = self.seed * 1000
        return replace(
            self,
            train=replace(self.train, seed=base + 2),
            unlearn=replace(self.unlearn, seed=base + 3),
            fusion=replace(self.fusion, seed=base + 4),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, default=list) + "\n"


# ---------------------------------------------------------------------------
# models and evaluation

def build_model(arch: ArchSpec, input_shape: tuple[int, int, int], class_count: int, seed: int) -> Model:
    arch.validate()
    rng = Rng(seed)
    if arch.kind == "mlp":
        layers = [Flatten()]
        in_dim = int(np.prod(input_shape))
        for k, width in enumerate(arch.hidden):
            layers += [init_dense(width, in_dim, rng.stream("dense", k)), ReLU()]
            in_dim = width
        layers.append(init_dense(class_count, in_dim, rng.stream("dense", len(arch.hidden))))
    else:
        layers = []
        c_in, side = input_shape[0], input_shape[1]
        for k, c_out in enumerate(arch.channels):
            layers += [init_conv(c_out, c_in, 3, rng.stream("conv", k), stride=2, padding=1), ReLU()]
            c_in, side = c_out, (side + 2 - 3) // 2 + 1
        layers += [Flatten(), init_dense(class_count, c_in * side * side, rng.stream("head"))]
    return Model(layers, class_count, input_shape, {"name": arch.kind, "seed": seed})


@dataclass
class EvalReport:
    acc: float  # percent correct on the clean test set
    asr: float  # percent of triggered non-target images predicted as the target
    acc_drop: float  # points below the no-defense accuracy
    success: bool  # acc_drop < 10 points and asr < 20 percent

    def to_json(self) -> str:
        payload = dict(asdict(self), schema_version=SCHEMA_VERSION)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(raw["acc"], raw["asr"], raw["acc_drop"], raw["success"])


def _accuracy_percent(model: Model, ds: Dataset, batch: int = 1024) -> float:
    hits = 0
    for start in range(0, len(ds), batch):
        logits = forward(model, ds.images[start : start + batch])
        hits += int((logits.argmax(axis=1) == ds.labels[start : start + batch]).sum())
    return 100.0 * hits / len(ds)


def evaluate(model: Model, clean_test: Dataset, asr_test: Dataset, reference_acc: float | None = None) -> EvalReport:
    """Clean accuracy, attack success rate, and the success flag.

    `reference_acc` is the same-seed no-defense accuracy; without it the drop
    is measured against the model itself (zero).
    """
    if len(clean_test) == 0 or len(asr_test) == 0:
        raise EmptyInputError("evaluation needs non-empty clean and triggered test sets")
    acc = _accuracy_percent(model, clean_test)
    asr = _accuracy_percent(model, asr_test)  # asr labels all carry the target
    drop = 0.0 if reference_acc is None else reference_acc - acc
    return EvalReport(acc, asr, drop, bool(drop < ACC_DROP_LIMIT and asr < ASR_LIMIT))


# ---------------------------------------------------------------------------
# the data-free defense stage

@dataclass
class DefenseArtifacts:
    unlearned: Model
    unlearn_losses: list[float]
    nwc: NwcReport
    prune: PruneResult
    fusion: FusionResult


def defend(bd_model: Model, unlearn_cfg: UnlearnConfig, gamma: float, fusion_cfg: FusionConfig) -> DefenseArtifacts:
    """Run both repair stages from the model alone (no dataset access)."""
    unlearned, losses = random_unlearn(bd_model, unlearn_cfg)
    nwc = compute_nwc(bd_model, unlearned)
    prune = prune_top_gamma(bd_model, nwc, gamma)
    fusion = align_and_fuse(prune, bd_model, nwc, fusion_cfg)
    return DefenseArtifacts(unlearned, losses, nwc, prune, fusion)


# ---------------------------------------------------------------------------
# staged runner with file-backed memoization

class PipelineRunner:
    """Lazily computes pipeline artifacts under a run directory."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path):
        self.cfg = cfg.resolve()
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "config.json", self.cfg.to_json())
        self._cache: dict[str, object] = {}

    # -- data ---------------------------------------------------------------
    def _dataset(self, name: str, build) -> Dataset:
        if name not in self._cache:
            path = self.out / f"{name}.otbd"
            if path.exists():
                self._cache[name] = load_dataset(path)
            else:
                ds = build()
                save_dataset(ds, path)
                self._cache[name] = ds
        return self._cache[name]

    def clean_train(self) -> Dataset:
        d = self.cfg.data
        return self._dataset(
            "clean_train",
            lambda: gen_synthetic(d.class_count, d.per_class, d.shape, self.cfg.seed, d.noise, d.jitter, "train"),
        )

    def clean_test(self) -> Dataset:
        d = self.cfg.data
        return self._dataset(
            "clean_test",
            lambda: gen_synthetic(d.class_count, d.test_per_class, d.shape, self.cfg.seed, d.noise, d.jitter, "test"),
        )

    def poisoned_train(self) -> Dataset:
        if "poisoned_train" not in self._cache:
            path = self.out / "poisoned_train.otbd"
            idx_path = self.out / "poison_indices.json"
            if path.exists() and idx_path.exists():
                self._cache["poisoned_train"] = load_dataset(path)
                self._cache["poison_indices"] = np.asarray(json.loads(idx_path.read_text()), dtype=np.int64)
            else:
                ds, idx = poison(self.clean_train(), self.cfg.poison, seed=self.cfg.seed * 1000 + 1)
                save_dataset(ds, path)
                atomic_write_text(idx_path, json.dumps(idx.tolist()) + "\n")
                self._cache["poisoned_train"] = ds
                self._cache["poison_indices"] = idx
        return self._cache["poisoned_train"]

    def poison_indices(self) -> np.ndarray:
        self.poisoned_train()
        return self._cache["poison_indices"]

    def asr_test(self) -> Dataset:
        return self._dataset("asr_test", lambda: make_asr_testset(self.clean_test(), self.cfg.poison))

    # -- models -------------------------------------------------------------
    def _model(self, name: str, build) -> Model:
        if name not in self._cache:
            path = self.out / f"{name}.otbr"
            if path.exists():
                self._cache[name] = load_model(path)
            else:
                model = build()
                save_model(model, path)
                self._cache[name] = model
        return self._cache[name]

    def backdoored(self) -> Model:
        def build():
            ds = self.poisoned_train()
            model = build_model(self.cfg.arch, self.cfg.data.shape, self.cfg.data.class_count, self.cfg.seed * 1000 + 2)
            history = train(model, ds.images, ds.labels, self.cfg.train)
            atomic_write_text(self.out / "train_history.json", json.dumps(history) + "\n")
            model.meta["role"] = "backdoored"
            return model

        return self._model("bd_model", build)

    def defense(self) -> DefenseArtifacts:
        if "defense" not in self._cache:
            bd = self.backdoored()
            art = defend(bd, self.cfg.unlearn, self.cfg.gamma, self.cfg.fusion)
            save_model(art.unlearned, self.out / "unlearned.otbr")
            atomic_write_text(self.out / "unlearn_losses.json", json.dumps(art.unlearn_losses) + "\n")
            art.nwc.save(self.out / "nwc.csv")
            save_model(art.prune.pruned_model, self.out / "pruned_compact.otbr")
            save_model(art.prune.masked_model, self.out / "pruned_masked.otbr")
            prune_meta = {
                "first_pruned_layer": art.prune.first_pruned_layer,
                "gamma": art.prune.gamma,
                "kept_indices": {str(k): v.tolist() for k, v in art.prune.kept_indices.items()},
                "pruned_indices": {str(k): v.tolist() for k, v in art.prune.pruned_indices.items()},
            }
            atomic_write_text(self.out / "prune_meta.json", json.dumps(prune_meta, sort_keys=True, indent=2) + "\n")
            save_model(art.fusion.fused_model, self.out / "fused.otbr")
            save_model(art.fusion.transported_model, self.out / "transported.otbr")
            art.fusion.trace.save(self.out / "trace.csv")
            self._cache["defense"] = art
        return self._cache["defense"]

    # -- reports ------------------------------------------------------------
    def _report(self, name: str, model_getter, reference_acc=None) -> EvalReport:
        key = f"report_{name}"
        if key not in self._cache:
            path = self.out / f"report_{name}.json"
            report = evaluate(model_getter(), self.clean_test(), self.asr_test(), reference_acc)
            atomic_write_text(path, report.to_json())
            self._cache[key] = report
        return self._cache[key]

    def no_defense_report(self) -> EvalReport:
        return self._report("no_defense", self.backdoored)

    def pruned_report(self) -> EvalReport:
        base = self.no_defense_report()
        return self._report("pruned", lambda: self.defense().prune.pruned_model, base.acc)

    def fused_report(self) -> EvalReport:
        base = self.no_defense_report()
        return self._report("fused", lambda: self.defense().fusion.fused_model, base.acc)

    def run(self) -> dict[str, EvalReport]:
        reports = {
            "no_defense": self.no_defense_report(),
            "pruned": self.pruned_report(),
            "fused": self.fused_report(),
        }
        summary = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.cfg.seed,
            "gamma": self.cfg.gamma,
            "reports": {k: asdict(v) for k, v in reports.items()},
        }
        atomic_write_text(self.out / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
        return reports


def run_pipeline(cfg: RunConfig, out_dir: str | Path) -> dict[str, EvalReport]:
    return PipelineRunner(cfg, out_dir).run()


# ---------------------------------------------------------------------------
# sweeps

def _csv_row(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def run_ablation(runner: PipelineRunner, axis: str) -> str:
    """One CSV table per sweep axis; reuses the trained model where valid."""
    cfg = runner.cfg
    clean, asr = runner.clean_test(), runner.asr_test()
    bd = runner.backdoored()
    base_acc = runner.no_defense_report().acc
    rows: list[str] = []

    def add(value, model):
        report = evaluate(model, clean, asr, base_acc)
        rows.append(_csv_row([value, report.acc, report.asr, report.acc_drop, int(report.success)]))

    if axis == "fusionScheme":
        art = runner.defense()
        add("V1", art.prune.pruned_model)
        add("V2", vanilla_fuse(art.prune.masked_model, bd, cfg.fusion.lam))
        add("V3", art.fusion.fused_model)
    elif axis == "targetScheme":
        art = runner.defense()
        for scheme in ("u2u", "u2r", "u2n"):
            if scheme == "u2r":
                accs, asrs = [], []
                for k in range(cfg.sweep.u2r_seeds):
                    fcfg = replace(cfg.fusion, target_scheme="u2r", seed=cfg.fusion.seed + k)
                    fused = align_and_fuse(art.prune, bd, art.nwc, fcfg).fused_model
                    rep = evaluate(fused, clean, asr, base_acc)
                    accs.append(rep.acc)
                    asrs.append(rep.asr)
                acc, asr_mean = float(np.mean(accs)), float(np.mean(asrs))
                drop = base_acc - acc
                success = drop < ACC_DROP_LIMIT and asr_mean < ASR_LIMIT
                rows.append(_csv_row([scheme, acc, asr_mean, drop, int(success)]))
            else:
                fused = align_and_fuse(art.prune, bd, art.nwc, replace(cfg.fusion, target_scheme=scheme)).fused_model
                add(scheme, fused)
    elif axis == "gammaI":
        for steps in cfg.sweep.steps:
            unlearned, _ = random_unlearn(bd, replace(cfg.unlearn, steps=steps))
            nwc = compute_nwc(bd, unlearned)
            for gamma in cfg.sweep.gammas:
                prune = prune_top_gamma(bd, nwc, gamma)
                fused = align_and_fuse(prune, bd, nwc, cfg.fusion).fused_model
                report = evaluate(fused, clean, asr, base_acc)
                rows.append(
                    _csv_row([steps, gamma, report.acc, report.asr, report.acc_drop, int(report.success)])
                )
    elif axis == "lambda":
        art = runner.defense()
        transported = art.fusion.transported_model
        for lam in cfg.sweep.lambdas:
            add(lam, fuse_models(transported, bd, lam))
    elif axis == "G":
        for ceiling in cfg.sweep.ceilings:
            unlearned, _ = random_unlearn(bd, replace(cfg.unlearn, label_ceiling=ceiling))
            nwc = compute_nwc(bd, unlearned)
            prune = prune_top_gamma(bd, nwc, cfg.gamma)
            fused = align_and_fuse(prune, bd, nwc, cfg.fusion).fused_model
            add(ceiling, fused)
    else:
        raise ValidationError(f"unknown ablation axis {axis!r}")

    if axis == "gammaI":
        header = "steps,gamma,acc,asr,acc_drop,success"
    else:
        header = f"{axis},acc,asr,acc_drop,success"
    table = header + "\n" + "\n".join(rows) + "\n"
    atomic_write_text(runner.out / f"ablation_{axis}.csv", table)
    return table


# ---------------------------------------------------------------------------
# correlation experiment (random- vs poison-unlearning scores)

def correlation_experiment(runner: PipelineRunner) -> dict:
    """Spearman correlation between random- and poison-unlearning scores.

    Poison unlearning ascends on the actual poisoned training samples; this
    is measurement-only and never feeds the defense path.
    """
    bd = runner.backdoored()
    poisoned = runner.poisoned_train()
    idx = runner.poison_indices()
    if idx.size == 0:
        raise ValidationError("correlation experiment needs a poisoned subset")

    random_ul, _ = random_unlearn(bd, runner.cfg.unlearn)
    nwc_random = compute_nwc(bd, random_ul)

    poison_cfg = replace(runner.cfg.unlearn, seed=runner.cfg.unlearn.seed + 1)
    poison_ul, _ = unlearn_on_samples(bd, poisoned.images[idx], poisoned.labels[idx], poison_cfg)
    nwc_poison = compute_nwc(bd, poison_ul)

    corr = nwc_correlation(nwc_random, nwc_poison)
    scatter = ["layer_index,neuron_index,nwc_random,nwc_poison"]
    for key, v in nwc_random.entries.items():
        scatter.append(f"{key[0]},{key[1]},{v!r},{nwc_poison.entries[key]!r}")
    atomic_write_text(runner.out / "correlation_scatter.csv", "\n".join(scatter) + "\n")

    payload = {
        "schema_version": SCHEMA_VERSION,
        "pooled": corr.pooled,
        "per_layer": {str(k): v for k, v in corr.per_layer.items()},
    }
    atomic_write_text(runner.out / "correlation.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


# ---------------------------------------------------------------------------
# diagnostics

def layer_activations(model: Model, batch, layer_index: int) -> np.ndarray:
    """Mean activation per neuron (channels averaged over space) after `layer_index`."""
    from .nn import _layer_forward

    x = np.asarray(batch, dtype=np.float32)
    for i, layer in enumerate(model.layers):
        x, _ = _layer_forward(layer, x, want_cache=False)
        if i == layer_index:
            break
    if x.ndim == 4:
        return x.mean(axis=(0, 2, 3)).astype(np.float64)
    return x.mean(axis=0).astype(np.float64)


def diagnostics(runner: PipelineRunner, layer_index: int | None = None) -> dict[str, str]:
    """Weight-norm series and clean-vs-triggered activation comparison."""
    bd = runner.backdoored()
    art = runner.defense()
    norms = weight_norm_report(bd, art.prune.masked_model, art.fusion.transported_model)
    norms.save(runner.out / "weight_norms.csv")

    if layer_index is None:
        layer_index = bd.parametric_indices()[-2]  # last hidden layer
    clean = runner.clean_test().images
    triggered = apply_trigger(clean, runner.cfg.poison)
    lines = ["model,input,neuron_index,mean_activation"]
    for name, model in (("backdoored", bd), ("fused", art.fusion.fused_model)):
        for tag, batch in (("clean", clean), ("triggered", triggered)):
            acts = layer_activations(model, batch, layer_index)
            lines += [f"{name},{tag},{j},{acts[j]!r}" for j in range(len(acts))]
    table = "\n".join(lines) + "\n"
    atomic_write_text(runner.out / f"activations_layer{layer_index}.csv", table)
    return {"weight_norms": str(runner.out / "weight_norms.csv"), "activations": table}
