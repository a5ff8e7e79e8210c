"""Triple classification on the synthetic KB: does type-constrained sampling pay off?

Negatives for validation and test corrupt the head or tail with an entity
seen in that argument position for some relation. Thresholds are tuned per
relation on validation and applied to test.

    python demos/triple_classification.py
"""

import tempfile
from pathlib import Path

from rpe.evaluate import generate_classification_negatives, triple_classification, tune_thresholds
from rpe.kb import build_type_index
from rpe.paths import mine_evidence
from rpe.synthetic import compositional_kb
from rpe.trainer import TrainConfig, Trainer

shared = dict(n=50, m=50, margin_rel=2.0, margin_path=2.0, batch_size=100, seed=1, lam=1.0)

store = compositional_kb(num_entities=200, fanout=3, seed=0).add_inverses()
evidence = mine_evidence(store, max_len=2, eta=0.05)
types = build_type_index(store)
vx, vy = generate_classification_negatives(store.valid, store, types, seed=11)
tx, ty = generate_classification_negatives(store.test, store, types, seed=12)

with tempfile.TemporaryDirectory() as tmp:
    for sampling in ("type_constrained", "uniform"):
        warm = Trainer(store, TrainConfig(mode="initial", lr=0.01, epochs=150, sampling=sampling, **shared),
                       evidence).fit()
        ckpt = Path(tmp) / f"{sampling}.ckpt"
        warm.save(ckpt)
        cfg = TrainConfig(mode="pc+acom", lr=0.001, epochs=150, sampling=sampling, init="rpe_initial_warmstart",
                          warm_start=str(ckpt), **shared)
        params = Trainer(store, cfg, evidence).fit()
        th = tune_thresholds(vx, vy, params, evidence)
        print(f"pc+acom, {sampling:<16} sampling: accuracy "
              f"{triple_classification(tx, ty, params, th, evidence):.1f}% on {len(tx)} test triples")
