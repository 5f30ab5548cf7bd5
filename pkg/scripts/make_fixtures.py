"""Regenerate the committed test fixtures (reference container + logits).

Run from the repo root: python3 scripts/make_fixtures.py
"""
from pathlib import Path

import numpy as np

from otrepair.data import gen_synthetic
from otrepair.nn import Dense, Flatten, Model, ReLU, forward, init_dense, save_model
from otrepair.tensors import Rng

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    rng = Rng(2024)
    layers = [
        Flatten(),
        init_dense(12, 36, rng.stream("d0")),
        ReLU(),
        init_dense(4, 12, rng.stream("d1")),
    ]
    model = Model(layers, 4, (1, 6, 6), {"name": "ref-fixture", "seed": 2024})
    save_model(model, FIXTURES / "ref_model.otbr")

    batch = gen_synthetic(4, 3, shape=(1, 6, 6), seed=99, split="fixture").images
    np.save(FIXTURES / "ref_batch.npy", batch)
    np.save(FIXTURES / "ref_logits.npy", forward(model, batch))
    print("fixtures written to", FIXTURES)


if __name__ == "__main__":
    main()
