"""Stage 2: align the pruned model to the backdoored model layer by layer
with optimal transport, then blend the two parameter sets.

Layer traversal starts at the first pruned layer.  Per layer: re-express the
pruned layer's incoming weights in the backdoored model's neuron basis using
the previous plan (contracting over input channels for conv kernels), build
the marginals (uniform source; weight-change-proportional target by default),
solve the transport problem on squared-Euclidean row distances, push the
pruned rows onto the backdoored neuron positions, and blend with coefficient
lam.  Bias columns ride along with their rows; they are not incoming edges.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DegenerateMarginalError, ValidationError
from .ioutil import atomic_write_text
from .nn import Conv2D, Dense, Model, clone_model, is_parametric, neuron_count, neuron_view
from .otsolve import TransportPlan, solve_exact, solve_sinkhorn
from .tensors import DTYPE, Rng, pairwise_sq_euclidean
from .unlearn import NwcReport, PruneResult

BETA_FLOOR = 1e-12

U2N = "u2n"
U2U = "u2u"
U2R = "u2r"


@dataclass
class FusionConfig:
    lam: float = 0.5  # weight on the transported model in the blend
    target_scheme: str = U2N
    cost_source: str = "aligned"  # aligned | raw
    final_layer_mode: str = "transport"  # transport | identity
    solver: str = "exact"  # exact | sinkhorn
    sinkhorn_epsilon: float = 0.01
    start_layer: int | None = None  # default: the first pruned layer
    seed: int = 0  # drives the u2r target draws

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if self.target_scheme not in (U2N, U2U, U2R):
            raise ValidationError(f"unknown target scheme {self.target_scheme!r}")
        if self.cost_source not in ("aligned", "raw"):
            raise ValidationError(f"unknown cost source {self.cost_source!r}")
        if self.final_layer_mode not in ("transport", "identity"):
            raise ValidationError(f"unknown final layer mode {self.final_layer_mode!r}")
        if self.solver not in ("exact", "sinkhorn"):
            raise ValidationError(f"unknown solver {self.solver!r}")


@dataclass
class LayerTrace:
    layer_index: int
    n: int
    m: int
    mode: str  # transport | identity
    plan: TransportPlan
    alpha: np.ndarray
    beta: np.ndarray
    objective: float
    cost_min: float
    cost_max: float
    aligned_checksum: str
    beta_fallback_uniform: bool = False
    beta_floored: bool = False


@dataclass
class AlignmentTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        header = (
            "layer_index,n,m,mode,objective,plan_nnz,row_residual,col_residual,"
            "beta_fallback_uniform,beta_floored,aligned_checksum"
        )
        lines = [header]
        for t in self.layers:
            row_res = float(np.abs(t.plan.plan.sum(axis=1) - t.alpha).max())
            col_res = float(np.abs(t.plan.plan.sum(axis=0) - t.beta).max())
            nnz = int((t.plan.plan > 0).sum())
            lines.append(
                f"{t.layer_index},{t.n},{t.m},{t.mode},{t.objective!r},{nnz},"
                f"{row_res!r},{col_res!r},{int(t.beta_fallback_uniform)},{int(t.beta_floored)},"
                f"{t.aligned_checksum}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())


@dataclass
class FusionResult:
    fused_model: Model
    transported_model: Model  # the lam=1 endpoint, at full width
    trace: AlignmentTrace


def build_marginals(
    kept_count: int,
    full_count: int,
    layer_nwc: np.ndarray | None,
    scheme: str = U2N,
    rng: Rng | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Source is uniform over kept neurons; target depends on the scheme."""
    if kept_count < 1 or full_count < 1:
        raise ValidationError("marginals need at least one neuron on each side")
    alpha = np.full(kept_count, 1.0 / kept_count, dtype=np.float64)
    if scheme == U2U:
        beta = np.full(full_count, 1.0 / full_count, dtype=np.float64)
    elif scheme == U2R:
        if rng is None:
            raise ValidationError("u2r target needs a seeded generator")
        draws = rng.uniform((full_count,), 0.0, 1.0).astype(np.float64) + 1e-9
        beta = draws / draws.sum()
    elif scheme == U2N:
        if layer_nwc is None or len(layer_nwc) != full_count:
            raise ValidationError("u2n target needs one score per backdoored neuron")
        total = float(np.asarray(layer_nwc, dtype=np.float64).sum())
        if total <= 0.0:
            raise DegenerateMarginalError("all weight-change scores are zero for this layer")
        beta = np.asarray(layer_nwc, dtype=np.float64) / total
    else:
        raise ValidationError(f"unknown target scheme {scheme!r}")
    return alpha, beta


def _blend_arrays(lam: float, transported: np.ndarray, backdoored: np.ndarray) -> np.ndarray:
    # endpoints must be bit-exact copies, so never go through the arithmetic
    if lam == 0.0:
        return backdoored.copy()
    if lam == 1.0:
        return transported.copy()
    out = lam * transported.astype(np.float64) + (1.0 - lam) * backdoored.astype(np.float64)
    return out.astype(DTYPE)


def fuse_models(transported: Model, backdoored: Model, lam: float) -> Model:
    """Elementwise blend of equally shaped models (the final fusion step)."""
    out = clone_model(backdoored)
    for li in backdoored.parametric_indices():
        t, b = transported.layers[li], backdoored.layers[li]
        if t.weights.shape != b.weights.shape:
            raise AlignmentError(f"layer {li}: widths differ, {t.weights.shape} vs {b.weights.shape}")
        out.layers[li].weights = _blend_arrays(lam, t.weights, b.weights)
        out.layers[li].bias = _blend_arrays(lam, t.bias, b.bias)
    out.meta = dict(backdoored.meta, fusion=f"lam={lam}")
    return out


def vanilla_fuse(masked_model: Model, bd_model: Model, lam: float) -> Model:
    """Blend the full-width masked pruned model straight into the backdoored one."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("lam must lie in [0, 1]")
    fused = fuse_models(masked_model, bd_model, lam)
    fused.meta = dict(bd_model.meta, fusion=f"vanilla,lam={lam}")
    return fused


def _incoming_spread(model: Model, prev_li: int, li: int) -> int:
    layer = model.layers[li]
    prev_units = neuron_count(model.layers[prev_li])
    if isinstance(layer, Conv2D):
        return 1
    in_dim = layer.weights.shape[1]
    if in_dim % prev_units:
        raise AlignmentError(f"layer {li}: input dim {in_dim} not a multiple of {prev_units}")
    return in_dim // prev_units


def _align_incoming(pn_layer, incoming_map: np.ndarray | None, spread: int) -> np.ndarray:
    """Re-express incoming weights in the backdoored previous-layer basis (float64)."""
    w = pn_layer.weights.astype(np.float64)
    if incoming_map is None:
        return w
    if isinstance(pn_layer, Conv2D):
        if w.shape[1] != incoming_map.shape[0]:
            raise AlignmentError(f"in_ch {w.shape[1]} does not match previous plan {incoming_map.shape}")
        return np.einsum("nchw,cm->nmhw", w, incoming_map)
    n, in_dim = w.shape
    units = incoming_map.shape[0]
    if in_dim != units * spread:
        raise AlignmentError(f"input dim {in_dim} does not match previous plan {incoming_map.shape} x {spread}")
    mixed = np.einsum("ncs,cm->nms", w.reshape(n, units, spread), incoming_map)
    return mixed.reshape(n, incoming_map.shape[1] * spread)


def _rows_with_bias(weights64: np.ndarray, bias) -> np.ndarray:
    flat = weights64.reshape(weights64.shape[0], -1)
    return np.concatenate([flat, np.asarray(bias, dtype=np.float64)[:, None]], axis=1)


def _raw_rows_full_width(pn_layer, kept_prev: np.ndarray | None, spread: int, full_prev: int | None) -> np.ndarray:
    """Compact rows embedded at full incoming width (zeros at pruned positions)."""
    w = pn_layer.weights.astype(np.float64)
    if kept_prev is None or full_prev is None or len(kept_prev) == full_prev:
        return _rows_with_bias(w, pn_layer.bias)
    if isinstance(pn_layer, Conv2D):
        full = np.zeros((w.shape[0], full_prev) + w.shape[2:], dtype=np.float64)
        full[:, kept_prev] = w
        return _rows_with_bias(full, pn_layer.bias)
    n = w.shape[0]
    full = np.zeros((n, full_prev * spread), dtype=np.float64)
    cols = (kept_prev[:, None] * spread + np.arange(spread)).reshape(-1)
    full[:, cols] = w
    return _rows_with_bias(full, pn_layer.bias)


def _identity_plan(count: int) -> TransportPlan:
    marg = np.full(count, 1.0 / count, dtype=np.float64)
    return TransportPlan(np.eye(count, dtype=np.float64) / count, marg, marg, 0.0, "exact")


def align_and_fuse(
    prune: PruneResult,
    bd_model: Model,
    nwc: NwcReport,
    cfg: FusionConfig,
) -> FusionResult:
    """Run the full per-layer alignment loop and blend into the repaired model.

    With nothing pruned (and no start override) every layer's transport is the
    identity, so the transported model equals the backdoored one exactly and
    the blend returns it unchanged.
    """
    cfg.validate()
    pn_model = prune.pruned_model
    parametric = bd_model.parametric_indices()
    if pn_model.parametric_indices() != parametric or len(pn_model.layers) != len(bd_model.layers):
        raise AlignmentError("pruned and backdoored models must share a layer layout")

    start = cfg.start_layer if cfg.start_layer is not None else prune.first_pruned_layer
    trace = AlignmentTrace()
    if start is None:
        trace.notes.append("no pruned layer: identity transport everywhere")
        transported = clone_model(bd_model)
        return FusionResult(clone_model(bd_model), transported, trace)
    if start not in parametric:
        raise ValidationError(f"start layer {start} is not a parametric layer")
    if prune.first_pruned_layer is not None and start > prune.first_pruned_layer:
        raise ValidationError("start layer cannot skip past the first pruned layer")

    transported = clone_model(bd_model)
    rng = Rng(cfg.seed)
    incoming_map: np.ndarray | None = None  # None: upstream basis untouched
    for pos, li in enumerate(parametric):
        if li < start:
            continue
        bd_layer = bd_model.layers[li]
        pn_layer = pn_model.layers[li]
        if type(bd_layer) is not type(pn_layer):
            raise AlignmentError(f"layer {li}: kinds differ")
        m = neuron_count(bd_layer)
        n = neuron_count(pn_layer)
        if n > m:
            raise AlignmentError(f"layer {li}: pruned layer wider than backdoored ({n} > {m})")
        prev_li = parametric[pos - 1] if pos > 0 else None
        spread = _incoming_spread(bd_model, prev_li, li) if prev_li is not None else 1

        aligned64 = _align_incoming(pn_layer, incoming_map, spread)
        aligned_rows = _rows_with_bias(aligned64, pn_layer.bias)
        bd_rows = neuron_view(bd_model, li).rows.astype(np.float64)
        if aligned_rows.shape[1] != bd_rows.shape[1]:
            raise AlignmentError(
                f"layer {li}: aligned width {aligned_rows.shape[1]} vs backdoored {bd_rows.shape[1]}"
            )

        is_last = li == parametric[-1]
        fallback = False
        if is_last and cfg.final_layer_mode == "identity":
            if n != m:
                raise AlignmentError("identity mode on the output layer needs equal widths")
            alpha, beta = build_marginals(n, m, None, U2U)
            plan = _identity_plan(m)
            mode = "identity"
            cost_min = cost_max = 0.0
        else:
            layer_nwc = nwc.per_layer(li)
            try:
                alpha, beta = build_marginals(
                    n, m, layer_nwc, cfg.target_scheme, rng=rng.stream("u2r", li)
                )
            except DegenerateMarginalError:
                # all-zero scores cannot be normalized; fall back to uniform
                alpha, beta = build_marginals(n, m, None, U2U)
                fallback = True
                trace.notes.append(f"layer {li}: degenerate target scores, uniform fallback")
            if cfg.cost_source == "aligned":
                src_rows = aligned_rows
            else:
                kept_prev = prune.kept_indices.get(prev_li) if prev_li is not None else None
                full_prev = neuron_count(bd_model.layers[prev_li]) if prev_li is not None else None
                src_rows = _raw_rows_full_width(pn_layer, kept_prev, spread, full_prev)
            cost = pairwise_sq_euclidean(src_rows, bd_rows)
            if cfg.solver == "exact":
                plan = solve_exact(alpha, beta, cost)
            else:
                plan = solve_sinkhorn(alpha, beta, cost, cfg.sinkhorn_epsilon)
            mode = "transport"
            cost_min, cost_max = float(cost.min()), float(cost.max())

        beta_floored = bool((beta < BETA_FLOOR).any())
        beta_safe = np.maximum(beta, BETA_FLOOR)
        moved_rows = (plan.plan.T @ aligned_rows) / beta_safe[:, None]

        kernel_shape = (m,) + bd_layer.weights.shape[1:]
        transported.layers[li].weights = moved_rows[:, :-1].reshape(kernel_shape).astype(DTYPE)
        transported.layers[li].bias = moved_rows[:, -1].astype(DTYPE)

        trace.layers.append(
            LayerTrace(
                layer_index=li,
                n=n,
                m=m,
                mode=mode,
                plan=plan,
                alpha=alpha,
                beta=beta,
                objective=plan.objective,
                cost_min=cost_min,
                cost_max=cost_max,
                aligned_checksum=hashlib.sha256(
                    np.ascontiguousarray(aligned_rows, dtype="<f8").tobytes()
                ).hexdigest(),
                beta_fallback_uniform=fallback,
                beta_floored=beta_floored,
            )
        )
        incoming_map = plan.plan / beta_safe[None, :]

    transported.meta = dict(bd_model.meta, transported=cfg.target_scheme)
    fused = fuse_models(transported, bd_model, cfg.lam)
    fused.meta = dict(bd_model.meta, fusion=f"ot,{cfg.target_scheme},lam={cfg.lam}")
    return FusionResult(fused, transported, trace)


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class WeightNormReport:
    layers: dict[int, dict[str, np.ndarray]]

    def to_csv(self) -> str:
        lines = ["layer_index,neuron_index,backdoored,pruned,transported"]
        for li, cols in self.layers.items():
            for j in range(len(cols["backdoored"])):
                lines.append(
                    f"{li},{j},{cols['backdoored'][j]!r},{cols['pruned'][j]!r},{cols['transported'][j]!r}"
                )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def _row_norms(model: Model, li: int) -> np.ndarray:
    rows = neuron_view(model, li).rows.astype(np.float64)
    return np.sqrt((rows**2).sum(axis=1))


def weight_norm_report(bd_model: Model, masked_model: Model, transported_model: Model) -> WeightNormReport:
    """Per-neuron row norms for the three models, aligned by position."""
    layers = {}
    for li in bd_model.parametric_indices():
        layers[li] = {
            "backdoored": _row_norms(bd_model, li),
            "pruned": _row_norms(masked_model, li),
            "transported": _row_norms(transported_model, li),
        }
    return WeightNormReport(layers)
