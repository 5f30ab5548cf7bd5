import numpy as np
import pytest

from helpers import make_cnn, make_mlp
from otrepair.errors import DegenerateMarginalError, ValidationError
from otrepair.fusion import (
    FusionConfig,
    align_and_fuse,
    build_marginals,
    fuse_models,
    vanilla_fuse,
    weight_norm_report,
)
from otrepair.nn import Conv2D, Dense, clone_model, forward, neuron_count, params_equal
from otrepair.otsolve import check_plan
from otrepair.tensors import Rng
from otrepair.unlearn import NwcReport, PruneResult, UnlearnConfig, compute_nwc, prune_top_gamma, random_unlearn


def _no_prune_result(source_model):
    kept = {li: np.arange(neuron_count(source_model.layers[li])) for li in source_model.parametric_indices()}
    empty = {li: np.empty(0, dtype=np.int64) for li in kept}
    return PruneResult(source_model, source_model, kept, empty, None, 0.0)


def _real_prune(model, gamma=0.2, seed=9):
    peer, _ = random_unlearn(model, UnlearnConfig(steps=3, batch_size=16, seed=seed))
    nwc = compute_nwc(model, peer)
    return prune_top_gamma(model, nwc, gamma), nwc


def test_build_marginals_uniform_source():
    alpha, _ = build_marginals(4, 4, None, "u2u")
    assert alpha.tolist() == [0.25, 0.25, 0.25, 0.25]


def test_build_marginals_nwc_normalization():
    _, beta = build_marginals(2, 2, np.array([3.0, 1.0]), "u2n")
    assert beta.tolist() == [0.75, 0.25]


def test_build_marginals_uniform_target():
    _, beta = build_marginals(3, 5, None, "u2u")
    assert beta.tolist() == [0.2] * 5


def test_build_marginals_random_target_is_seeded():
    a = build_marginals(3, 6, None, "u2r", rng=Rng(4))[1]
    b = build_marginals(3, 6, None, "u2r", rng=Rng(4))[1]
    assert np.array_equal(a, b)
    assert (a > 0).all()
    assert a.sum() == pytest.approx(1.0)


def test_build_marginals_degenerate_scores():
    with pytest.raises(DegenerateMarginalError):
        build_marginals(2, 2, np.zeros(2), "u2n")


def test_fusion_endpoints_are_bitwise():
    model = make_mlp(seed=1)
    prune, nwc = _real_prune(model)
    for lam, pick in ((0.0, "backdoored"), (1.0, "transported")):
        result = align_and_fuse(prune, model, nwc, FusionConfig(lam=lam))
        reference = model if pick == "backdoored" else result.transported_model
        assert params_equal(result.fused_model, reference)


def test_fusion_is_exact_linear_blend():
    model = make_mlp(seed=2)
    prune, nwc = _real_prune(model)
    lam = 0.3
    result = align_and_fuse(prune, model, nwc, FusionConfig(lam=lam))
    for li in model.parametric_indices():
        t = result.transported_model.layers[li].weights.astype(np.float64)
        b = model.layers[li].weights.astype(np.float64)
        expected = (lam * t + (1 - lam) * b).astype(np.float32)
        assert np.array_equal(result.fused_model.layers[li].weights, expected)


def test_no_pruning_without_override_returns_backdoored():
    model = make_mlp(seed=3)
    nwc = compute_nwc(model, model)
    result = align_and_fuse(_no_prune_result(model), model, nwc, FusionConfig(lam=0.7))
    assert params_equal(result.fused_model, model)
    assert result.trace.layers == []


@pytest.mark.parametrize("builder,seed", [(make_mlp, 4), (make_cnn, 5)])
def test_self_alignment_idempotence(builder, seed):
    model = builder(seed=seed)
    peer, _ = random_unlearn(model, UnlearnConfig(steps=2, batch_size=8, seed=1))
    nwc = compute_nwc(model, peer)
    start = model.parametric_indices()[0]
    for lam in (0.0, 0.5, 1.0):
        cfg = FusionConfig(lam=lam, target_scheme="u2u", cost_source="aligned", start_layer=start)
        result = align_and_fuse(_no_prune_result(model), model, nwc, cfg)
        for li in model.parametric_indices():
            diff = np.abs(
                result.fused_model.layers[li].weights.astype(np.float64)
                - model.layers[li].weights.astype(np.float64)
            ).max()
            assert diff < 1e-6, (li, lam)
        for trace in result.trace.layers:
            m = trace.m
            assert np.allclose(trace.plan.plan, np.eye(m) / m, atol=1e-12)


def _permute_hidden(model, layer_index, next_index, perm):
    """Permute a hidden layer's neurons with the matching next-layer columns."""
    out = clone_model(model)
    layer = out.layers[layer_index]
    layer.weights = layer.weights[perm].copy()
    layer.bias = layer.bias[perm].copy()
    nxt = out.layers[next_index]
    if isinstance(nxt, Conv2D):
        nxt.weights = nxt.weights[:, perm].copy()
    else:
        units = len(perm)
        spread = nxt.weights.shape[1] // units
        cols = (np.asarray(perm)[:, None] * spread + np.arange(spread)).reshape(-1)
        nxt.weights = nxt.weights[:, cols].copy()
    return out


@pytest.mark.parametrize("builder,seed", [(make_mlp, 6), (make_cnn, 7)])
def test_permuted_source_transports_back(builder, seed):
    model = builder(seed=seed)
    parametric = model.parametric_indices()
    source = model
    rng = Rng(seed)
    for pos in range(len(parametric) - 1):
        li, nxt = parametric[pos], parametric[pos + 1]
        perm = rng.stream("perm", pos).permutation(neuron_count(model.layers[li]))
        source = _permute_hidden(source, li, nxt, perm)

    nwc = compute_nwc(model, model)  # all zero; u2u scheme ignores it
    cfg = FusionConfig(lam=1.0, target_scheme="u2u", start_layer=parametric[0])
    result = align_and_fuse(_no_prune_result(source), model, nwc, cfg)

    x = Rng(100 + seed).uniform((100,) + model.input_shape)
    got = forward(result.transported_model, x)
    want = forward(source, x)
    assert np.abs(got - want).max() <= 1e-4


def test_u2n_mass_law_and_plan_feasibility():
    model = make_mlp(seed=8)
    prune, nwc = _real_prune(model, gamma=0.25)
    result = align_and_fuse(prune, model, nwc, FusionConfig())
    assert result.trace.layers, "pruning should trigger at least one fused layer"
    for trace in result.trace.layers:
        report = check_plan(trace.plan)
        assert report.passed and report.tolerance == 1e-8
        if not trace.beta_fallback_uniform and trace.mode == "transport":
            scores = nwc.per_layer(trace.layer_index)
            expected = scores / scores.sum()
            assert np.abs(trace.beta - expected).max() <= 1e-12


def test_fused_architecture_matches_backdoored():
    model = make_cnn(seed=9)
    prune, nwc = _real_prune(model, gamma=0.25)
    result = align_and_fuse(prune, model, nwc, FusionConfig())
    for li in model.parametric_indices():
        assert result.fused_model.layers[li].weights.shape == model.layers[li].weights.shape
        assert result.transported_model.layers[li].weights.shape == model.layers[li].weights.shape


def test_final_layer_identity_mode_keeps_output_rows_separate():
    model = make_mlp(seed=10)
    prune, nwc = _real_prune(model, gamma=0.2)
    cfg = FusionConfig(final_layer_mode="identity")
    result = align_and_fuse(prune, model, nwc, cfg)
    last = result.trace.layers[-1]
    assert last.mode == "identity"
    assert np.allclose(last.plan.plan, np.eye(last.m) / last.m)


def test_raw_cost_source_runs_with_same_aligned_rows():
    model = make_mlp(seed=11)
    prune, nwc = _real_prune(model, gamma=0.25)
    aligned = align_and_fuse(prune, model, nwc, FusionConfig(cost_source="aligned"))
    raw = align_and_fuse(prune, model, nwc, FusionConfig(cost_source="raw"))
    # the cost source changes only the matching, never the transported rows' basis
    assert aligned.trace.layers[0].aligned_checksum == raw.trace.layers[0].aligned_checksum
    for trace in raw.trace.layers:
        assert check_plan(trace.plan).passed


def test_sinkhorn_solver_plans_feasible_and_never_beat_exact():
    model = make_mlp(seed=12)
    prune, nwc = _real_prune(model, gamma=0.2)
    exact = align_and_fuse(prune, model, nwc, FusionConfig(solver="exact"))
    entropic = align_and_fuse(prune, model, nwc, FusionConfig(solver="sinkhorn", sinkhorn_epsilon=0.01))
    for te, ts in zip(exact.trace.layers, entropic.trace.layers):
        assert check_plan(ts.plan).passed
        assert ts.objective >= te.objective - 1e-9  # exact solver is the optimum


def test_vanilla_fuse_endpoint_and_midpoint():
    model = make_mlp(seed=13)
    prune, _ = _real_prune(model, gamma=0.25)
    masked = prune.masked_model
    full = vanilla_fuse(masked, model, 1.0)
    assert params_equal(full, masked)
    mid = vanilla_fuse(masked, model, 0.5)
    li = prune.first_pruned_layer
    row = prune.pruned_indices[li][0]
    expected = (0.5 * model.layers[li].weights[row].astype(np.float64)).astype(np.float32)
    assert np.array_equal(mid.layers[li].weights[row], expected)


def test_fuse_models_rejects_width_mismatch():
    model = make_mlp(seed=14)
    prune, _ = _real_prune(model, gamma=0.25)
    from otrepair.errors import AlignmentError

    with pytest.raises(AlignmentError):
        fuse_models(prune.pruned_model, model, 0.5)


def test_lam_out_of_range_rejected():
    with pytest.raises(ValidationError):
        FusionConfig(lam=1.5).validate()


def test_weight_norm_report_zeroes_and_identity():
    model = make_mlp(seed=15)
    prune, nwc = _real_prune(model, gamma=0.25)
    result = align_and_fuse(prune, model, nwc, FusionConfig())
    report = weight_norm_report(model, prune.masked_model, result.transported_model)
    li = prune.first_pruned_layer
    for j in prune.pruned_indices[li]:
        assert report.layers[li]["pruned"][j] == 0.0
        assert report.layers[li]["transported"][j] > 0.0  # mass moved back in
    csv = report.to_csv()
    assert csv.startswith("layer_index,neuron_index,backdoored,pruned,transported")
