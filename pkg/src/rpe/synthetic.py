"""Small synthetic knowledge bases with a known composition rule."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .kb import TripleStore


def compositional_kb(num_entities: int = 200, fanout: int = 2, coverage: float = 0.8, holdout: float = 0.2,
                     seed: int = 0) -> TripleStore:
    """Three-layer KB where r3 = r1 o r2 on a fraction of the composable pairs.

    Entities are split into layers A, B and C. Every a in A links by r1 to
    ``fanout`` random b in B and every b links by r2 to ``fanout`` random c
    in C. A ``coverage`` share of the composable (a, c) pairs carry r3; a
    ``holdout`` share of those r3 triples is withheld, half as validation
    and half as test. Relations are named r1, r2, r3 with ids 0, 1, 2.
    """
    rng = np.random.default_rng(seed)
    na = num_entities // 3
    nb = num_entities // 3
    A = np.arange(na)
    B = np.arange(na, na + nb)
    C = np.arange(na + nb, num_entities)
    r1 = {(int(a), int(b)) for a in A for b in rng.choice(B, size=fanout, replace=False)}
    r2 = {(int(b), int(c)) for b in B for c in rng.choice(C, size=fanout, replace=False)}
    succ = {}
    for b, c in r2:
        succ.setdefault(b, []).append(c)
    composable = sorted({(a, c) for a, b in r1 for c in succ.get(b, ())})
    keep = rng.permutation(len(composable))[: int(round(coverage * len(composable)))]
    r3 = [composable[i] for i in sorted(keep)]
    order = rng.permutation(len(r3))
    n_out = int(round(holdout * len(r3)))
    out = [r3[i] for i in sorted(order[:n_out])]
    inside = [r3[i] for i in sorted(order[n_out:])]
    half = len(out) // 2

    train = [(a, 0, b) for a, b in sorted(r1)] + [(b, 1, c) for b, c in sorted(r2)] + [(a, 2, c) for a, c in inside]
    valid = [(a, 2, c) for a, c in out[:half]]
    test = [(a, 2, c) for a, c in out[half:]]
    store = TripleStore(entities=[f"e{i}" for i in range(num_entities)], relations=["r1", "r2", "r3"])
    store.num_base_relations = 3
    store.add_triples(train, "train")
    store.add_triples(valid, "valid")
    store.add_triples(test, "test")
    return store


def random_graph(num_entities: int, num_relations: int, num_edges: int, rng: np.random.Generator):
    """Uniformly random multigraph edges as an (k, 3) int array."""
    edges = {(int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities)))
             for _ in range(num_edges)}
    return np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 3)


def write_dataset(store: TripleStore, directory) -> Path:
    """Write the original-relation triples of ``store`` as train/valid/test.txt."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {"train": store.base_train(), "valid": store.valid, "test": store.test}
    for split, triples in splits.items():
        labels = store.labels.get(split)
        with open(directory / f"{split}.txt", "w", encoding="utf-8") as fh:
            for i, (h, r, t) in enumerate(triples.tolist()):
                line = f"{store.entities[h]}\t{store.relations[r]}\t{store.entities[t]}"
                if labels is not None and len(labels) == len(triples):
                    line += f"\t{int(labels[i])}"
                fh.write(line + "\n")
    return directory
