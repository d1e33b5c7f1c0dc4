"""Shared random generators for the test suite."""

from __future__ import annotations

import random

from fexgraph.feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize

RANGES = (60, 300, 900, 3600, 86400)


def random_spec(rng: random.Random, *, max_features: int = 12, n_types: int = 5, ranges=RANGES) -> ModelSpec:
    types = [f"e{i}" for i in range(n_types)]
    feats = []
    for i in range(rng.randint(1, max_features)):
        kind = rng.choice(list(CompKind))
        attrs = tuple(rng.sample(["x", "y", "z"], rng.randint(1, 3))) if kind is CompKind.CONCAT else (rng.choice("xyz"),)
        feats.append(
            FeatureSpec(
                f"f{i:02d}",
                tuple(rng.sample(types, rng.choice([1, 1, 1, 2, 3]))),
                rng.choice(ranges),
                attrs,
                CompFunc(kind, rng.choice([None, 5]) if kind is CompKind.CONCAT else None),
            )
        )
    return normalize(ModelSpec("rand", tuple(feats)))


def overlapping_spec(n: int, event: str = "e", range_s: int = 3600, kind: CompKind = CompKind.SUM) -> ModelSpec:
    """``n`` features with identical conditions on one event type."""
    return normalize(
        ModelSpec("overlap", tuple(FeatureSpec(f"f{i:03d}", (event,), range_s, ("x",), CompFunc(kind)) for i in range(n)))
    )
