"""Scratch harness for desk-scale tuning: print the whole trend table."""
import sys
import time
from dataclasses import replace

import numpy as np

from otrepair.data import PoisonSpec
from otrepair.fusion import FusionConfig, align_and_fuse, fuse_models, vanilla_fuse
from otrepair.pipeline import ArchSpec, DataConfig, RunConfig, PipelineRunner, evaluate, run_ablation
from otrepair.nn import TrainConfig
from otrepair.unlearn import UnlearnConfig, compute_nwc, prune_top_gamma, random_unlearn


def main(trigger="patch", epochs=30, gamma=0.05, out="runs/tune"):
    t0 = time.time()
    cfg = RunConfig(
        data=DataConfig(),
        poison=PoisonSpec(trigger_kind=trigger),
        arch=ArchSpec(kind="mlp"),
        train=TrainConfig(learning_rate=0.1, epochs=epochs),
        unlearn=UnlearnConfig(),
        gamma=gamma,
        fusion=FusionConfig(),
        seed=0,
    )
    runner = PipelineRunner(cfg, f"{out}-{trigger}")
    base = runner.no_defense_report()
    print(f"[{time.time()-t0:6.1f}s] no-defense: ACC={base.acc:.2f} ASR={base.asr:.2f}")

    art = runner.defense()
    print(f"[{time.time()-t0:6.1f}s] unlearn losses: {art.unlearn_losses[0]:.3f} -> {art.unlearn_losses[-1]:.3f}")
    ul_rep = evaluate(art.unlearned, runner.clean_test(), runner.asr_test(), base.acc)
    print(f"           unlearned model: ACC={ul_rep.acc:.2f} ASR={ul_rep.asr:.2f}")
    v1 = runner.pruned_report()
    print(f"[{time.time()-t0:6.1f}s] V1 pruned:  ACC={v1.acc:.2f} ASR={v1.asr:.2f} success={v1.success}")
    v2m = vanilla_fuse(art.prune.masked_model, runner.backdoored(), cfg.fusion.lam)
    v2 = evaluate(v2m, runner.clean_test(), runner.asr_test(), base.acc)
    print(f"[{time.time()-t0:6.1f}s] V2 vanilla: ACC={v2.acc:.2f} ASR={v2.asr:.2f} success={v2.success}")
    v3 = runner.fused_report()
    print(f"[{time.time()-t0:6.1f}s] V3 otfuse:  ACC={v3.acc:.2f} ASR={v3.asr:.2f} success={v3.success}")

    print("\nlambda sweep:")
    transported = art.fusion.transported_model
    for lam in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        rep = evaluate(fuse_models(transported, runner.backdoored(), lam), runner.clean_test(), runner.asr_test(), base.acc)
        print(f"  lam={lam:.1f}: ACC={rep.acc:.2f} ASR={rep.asr:.2f}")

    print("\ntarget schemes:")
    for scheme in ("u2u", "u2r", "u2n"):
        fcfg = replace(cfg.fusion, target_scheme=scheme)
        fused = align_and_fuse(art.prune, runner.backdoored(), art.nwc, fcfg).fused_model
        rep = evaluate(fused, runner.clean_test(), runner.asr_test(), base.acc)
        print(f"  {scheme}: ACC={rep.acc:.2f} ASR={rep.asr:.2f}")

    print(f"\ntotal {time.time()-t0:.1f}s")


if __name__ == "__main__":
    main(*sys.argv[1:2], *(int(a) for a in sys.argv[2:3]), *(float(a) for a in sys.argv[3:4]))
