"""Per-word visualness scores from image-feature bundles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .data_io import WordImageBundle


def word_visualness(bundle: WordImageBundle) -> float:
    """Negative mean distance of a word's image features to their centroid.

    Zero spread (all rows identical, or a single row) gives exactly 0;
    otherwise the score is strictly negative.
    """
    feats = bundle.features
    if not np.all(np.isfinite(feats)):
        raise ValueError(f"non-finite features for {bundle.token!r}")
    center = feats.mean(axis=0)
    dists = np.linalg.norm(feats - center, axis=1)
    return -float(dists.mean()) + 0.0  # normalize -0.0 to 0.0


@dataclass(frozen=True)
class VisualnessTable:
    """Token -> visualness score map with a median fallback for absent tokens."""

    scores: dict
    fallback: float = field(default=0.0)

    def __post_init__(self):
        coerced = {}
        for tok, v in self.scores.items():
            v = float(v)
            if not np.isfinite(v) or v > 0:
                raise ValueError(f"visualness for {tok!r} must be finite and <= 0, got {v}")
            coerced[tok] = v
        object.__setattr__(self, "scores", coerced)
        fallback = float(np.median(list(coerced.values()))) if coerced else 0.0
        object.__setattr__(self, "fallback", fallback)

    def __len__(self):
        return len(self.scores)

    def __contains__(self, token: str) -> bool:
        return token in self.scores

    def score(self, token: str) -> float:
        return self.scores.get(token, self.fallback)

    def to_json(self) -> str:
        return json.dumps({"fallback": self.fallback, "scores": self.scores}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str | IO[str]) -> "VisualnessTable":
        obj = json.loads(text if isinstance(text, str) else text.read())
        return cls(scores={str(k): float(v) for k, v in obj["scores"].items()})


def build_visualness_table(bundles: Iterable[WordImageBundle]) -> VisualnessTable:
    """Score every bundle; duplicate tokens are rejected."""
    scores: dict = {}
    for bundle in bundles:
        if bundle.token in scores:
            raise ValueError(f"duplicate bundle token {bundle.token!r}")
        scores[bundle.token] = word_visualness(bundle)
    return VisualnessTable(scores=scores)


def histogram(table: VisualnessTable, bins: int = 20) -> list[tuple[float, float, int]]:
    """Bucketed score counts as (bucket_lo, bucket_hi, count) rows."""
    if not table.scores:
        return []
    values = np.array(list(table.scores.values()))
    counts, edges = np.histogram(values, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
