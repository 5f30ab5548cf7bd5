"""Stage 1: reverse training on generated noise, per-neuron weight-change
scores, and top-fraction structured pruning.

A neuron's score is the L1 distance between its row (incoming weights plus
bias) before and after unlearning.  Pruning removes whole rows and the
matching incoming columns of the next parametric layer, and also produces a
full-width masked twin (rows and biases zeroed) that is forward-equivalent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NoiseBatchSpec, gen_noise_batch
from .errors import (
    AlignmentError,
    InfeasiblePruneError,
    UnsupportedLayerError,
    ValidationError,
)
from .ioutil import atomic_write_text
from .nn import (
    Conv2D,
    Dense,
    Model,
    TrainConfig,
    clone_model,
    neuron_count,
    neuron_view,
    sgd_step,
)
from .tensors import Rng, row_l1_distance


@dataclass
class UnlearnConfig:
    steps: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3  # ascent explodes well before step 20 at 1e-2 on desk-scale nets
    label_ceiling: int | None = None  # None: class_count - 1
    seed: int = 0

    def validate(self):
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")


def random_unlearn(model: Model, cfg: UnlearnConfig) -> tuple[Model, list[float]]:
    """Gradient-ascent steps on cross-entropy over fresh noise batches.

    One freshly generated batch per step (steps x batch_size pairs total).
    The input model is untouched; returns the unlearned copy and the
    per-step loss trace.
    """
    cfg.validate()
    ceiling = model.class_count - 1 if cfg.label_ceiling is None else cfg.label_ceiling
    spec = NoiseBatchSpec(model.input_shape, cfg.batch_size, ceiling, cfg.seed)
    spec.validate(model.class_count)
    out = clone_model(model)
    ascend = TrainConfig(cfg.learning_rate, cfg.batch_size, epochs=1, seed=cfg.seed, objective_sign=-1)
    rng = Rng(cfg.seed)
    losses = []
    for step in range(cfg.steps):
        images, labels = gen_noise_batch(spec, rng=rng.stream("unlearn-noise", step))
        losses.append(sgd_step(out, images, labels, ascend, step_index=step))
    return out, losses


def unlearn_on_samples(
    model: Model,
    images,
    labels,
    cfg: UnlearnConfig,
) -> tuple[Model, list[float]]:
    """Gradient ascent over batches drawn (with replacement) from a fixed set.

    Same step/batch/lr schedule as `random_unlearn`, but the batches come from
    the given samples instead of generated noise; used by the correlation
    experiment to unlearn on poisoned data.
    """
    cfg.validate()
    n = images.shape[0]
    if n == 0:
        raise ValidationError("cannot unlearn on an empty sample set")
    out = clone_model(model)
    ascend = TrainConfig(cfg.learning_rate, cfg.batch_size, epochs=1, seed=cfg.seed, objective_sign=-1)
    rng = Rng(cfg.seed)
    losses = []
    for step in range(cfg.steps):
        idx = rng.stream("sample-batch", step).integers(0, n, size=cfg.batch_size)
        losses.append(sgd_step(out, images[idx], labels[idx], ascend, step_index=step))
    return out, losses


# ---------------------------------------------------------------------------
# neuron weight-change report

@dataclass
class NwcReport:
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def layer_indices(self) -> list[int]:
        seen: list[int] = []
        for layer, _ in self.entries:
            if not seen or seen[-1] != layer:
                seen.append(layer)
        return seen

    def per_layer(self, layer_index: int) -> np.ndarray:
        vals = [v for (l, _), v in self.entries.items() if l == layer_index]
        return np.asarray(vals, dtype=np.float64)

    def pooled(self) -> np.ndarray:
        return np.asarray(list(self.entries.values()), dtype=np.float64)

    def to_csv(self) -> str:
        lines = ["layer_index,neuron_index,nwc"]
        lines += [f"{l},{j},{v!r}" for (l, j), v in self.entries.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "NwcReport":
        entries: dict[tuple[int, int], float] = {}
        rows = [line for line in text.strip().splitlines()[1:] if line]
        for row in rows:
            l, j, v = row.split(",")
            entries[(int(l), int(j))] = float(v)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "NwcReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv(fh.read())


def _same_architecture(a: Model, b: Model) -> bool:
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        if isinstance(la, (Dense, Conv2D)) and la.weights.shape != lb.weights.shape:
            return False
    return True


def compute_nwc(bd_model: Model, ul_model: Model) -> NwcReport:
    """Per-neuron L1 distance between the two models' neuron rows."""
    if not _same_architecture(bd_model, ul_model):
        raise AlignmentError("models must share an architecture to compare neuron rows")
    report = NwcReport()
    for li in bd_model.parametric_indices():
        dist = row_l1_distance(neuron_view(ul_model, li).rows, neuron_view(bd_model, li).rows)
        for j, v in enumerate(dist):
            report.entries[(li, j)] = float(v)
    return report


# ---------------------------------------------------------------------------
# pruning

@dataclass
class PruneResult:
    pruned_model: Model  # compact: rows and matching incoming columns removed
    masked_model: Model  # full width: pruned rows and biases zeroed
    kept_indices: dict[int, np.ndarray]
    pruned_indices: dict[int, np.ndarray]
    first_pruned_layer: int | None
    gamma: float


def _incoming_spread(model: Model, prev_index: int, layer_index: int) -> int:
    """Input columns of `layer_index` contributed by each neuron of `prev_index`."""
    layer = model.layers[layer_index]
    prev_units = neuron_count(model.layers[prev_index])
    if isinstance(layer, Conv2D):
        if layer.weights.shape[1] != prev_units:
            raise AlignmentError(f"layer {layer_index}: in_ch != previous neuron count")
        return 1
    in_dim = layer.weights.shape[1]
    if in_dim % prev_units:
        raise AlignmentError(f"layer {layer_index}: input dim {in_dim} not a multiple of {prev_units}")
    return in_dim // prev_units


def _select_columns(layer, kept_prev: np.ndarray, spread: int):
    if isinstance(layer, Conv2D):
        return layer.weights[:, kept_prev]
    cols = (kept_prev[:, None] * spread + np.arange(spread)).reshape(-1)
    return layer.weights[:, cols]


def prune_top_gamma(model: Model, nwc: NwcReport, gamma: float, scope: str = "global") -> PruneResult:
    """Remove the highest-scoring fraction of neurons (output layer exempt).

    Global scope ranks every prunable neuron's score in one descending list
    (ties broken by ascending layer then neuron index); per-layer scope takes
    the top fraction inside each layer separately.
    """
    if not 0 <= gamma < 1:
        raise ValidationError("gamma must lie in [0, 1)")
    if scope not in ("global", "per_layer"):
        raise ValidationError(f"unknown pruning scope {scope!r}")

    parametric = model.parametric_indices()
    prunable = parametric[:-1]  # class-output neurons are never pruned
    pool = [(li, j) for li in prunable for j in range(neuron_count(model.layers[li]))]
    missing = [key for key in pool if key not in nwc.entries]
    if missing:
        raise ValidationError(f"nwc report is missing entries, e.g. {missing[0]}")

    pruned: dict[int, set[int]] = {li: set() for li in prunable}
    if scope == "global":
        count = int(np.floor(gamma * len(pool)))
        ranked = sorted(pool, key=lambda key: (-nwc.entries[key], key[0], key[1]))
        for li, j in ranked[:count]:
            pruned[li].add(j)
    else:
        for li in prunable:
            m = neuron_count(model.layers[li])
            count = int(np.floor(gamma * m))
            ranked = sorted(range(m), key=lambda j: (-nwc.entries[(li, j)], j))
            pruned[li].update(ranked[:count])

    for li in prunable:
        if len(pruned[li]) == neuron_count(model.layers[li]):
            raise InfeasiblePruneError(li)

    kept_indices: dict[int, np.ndarray] = {}
    pruned_indices: dict[int, np.ndarray] = {}
    for li in parametric:
        gone = pruned.get(li, set())
        m = neuron_count(model.layers[li])
        kept_indices[li] = np.asarray(sorted(set(range(m)) - gone), dtype=np.int64)
        pruned_indices[li] = np.asarray(sorted(gone), dtype=np.int64)
    pruned_layers = [li for li in prunable if len(pruned[li])]
    first = min(pruned_layers) if pruned_layers else None

    masked = clone_model(model)
    for li in prunable:
        gone = pruned_indices[li]
        if gone.size:
            masked.layers[li].weights[gone] = 0.0
            masked.layers[li].bias[gone] = 0.0
    masked.meta = dict(model.meta, pruned="masked")

    compact = clone_model(model)
    for pos, li in enumerate(parametric):
        layer = compact.layers[li]
        if pos > 0:
            prev_li = parametric[pos - 1]
            spread = _incoming_spread(model, prev_li, li)
            layer.weights = np.ascontiguousarray(_select_columns(layer, kept_indices[prev_li], spread))
        kept = kept_indices[li]
        layer.weights = np.ascontiguousarray(layer.weights[kept])
        layer.bias = np.ascontiguousarray(layer.bias[kept])
    compact.meta = dict(model.meta, pruned="compact")
    compact = Model(compact.layers, compact.class_count, compact.input_shape, compact.meta)

    return PruneResult(compact, masked, kept_indices, pruned_indices, first, gamma)


# ---------------------------------------------------------------------------
# rank correlation

def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("inputs must be equal-length vectors")
    if len(x) < 3:
        raise ValidationError("rank correlation is undefined for fewer than 3 points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0.0:
        return float("nan")  # a constant ranking carries no order information
    return float((rx * ry).sum() / denom)


@dataclass
class CorrelationReport:
    per_layer: dict[int, float]
    pooled: float


def nwc_correlation(a: NwcReport, b: NwcReport) -> CorrelationReport:
    """Spearman correlation between two score reports, per layer and pooled."""
    if list(a.entries.keys()) != list(b.entries.keys()):
        raise AlignmentError("reports cover different neurons")
    per_layer = {li: spearman(a.per_layer(li), b.per_layer(li)) for li in a.layer_indices()}
    return CorrelationReport(per_layer, spearman(a.pooled(), b.pooled()))
