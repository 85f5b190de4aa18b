"""Closed-form ridge models between visual and semantic spaces."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data_io import ComputeError, FeatureMatrix, InputError, load_feature_matrix, save_feature_matrix
from .prototypes import PrototypeSet

S2V = "s2v"  # semantic -> visual
V2S = "v2s"  # visual -> semantic


@dataclass
class RidgeModel:
    """Fitted weights, K x D for s2v or D x K for v2s, with the exact lambda*N regularizer."""

    direction: str
    weights: np.ndarray
    lam: float
    n_train: int

    def __post_init__(self):
        if self.direction not in (S2V, V2S):
            raise ValueError(f"direction must be {S2V!r} or {V2S!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("model weights must be finite")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_feature_matrix(FeatureMatrix(data=self.weights, labels=None), path)
        sidecar = {"direction": self.direction, "lambda": self.lam, "n_train": self.n_train}
        path.with_suffix(".meta.json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RidgeModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        m = load_feature_matrix(path)
        return cls(meta["direction"], m.data, float(meta["lambda"]), int(meta["n_train"]))


def _group_by_class(X: FeatureMatrix, prototypes: PrototypeSet):
    """Class-wise sufficient statistics: prototype rows, sample counts and feature sums.

    Classes are visited in prototype-set order so the accumulation is
    deterministic; T itself is never materialized.
    """
    if X.labels is None:
        raise InputError("feature matrix has no labels; cannot fit")
    present = set(X.labels)
    for label in X.labels:
        if label not in prototypes:
            raise InputError(f"label {label!r} has no prototype")
    ids = [cid for cid in prototypes.class_ids if cid in present]
    idx_of = {cid: i for i, cid in enumerate(ids)}
    row_idx = np.array([idx_of[lab] for lab in X.labels], dtype=np.intp)
    counts = np.bincount(row_idx, minlength=len(ids)).astype(np.float64)
    sums = np.zeros((len(ids), X.dim))
    np.add.at(sums, row_idx, X.data)
    S = prototypes.vectors[[prototypes.index_of(c) for c in ids]]
    return S, counts, sums


def _solve_spd(A: np.ndarray, B: np.ndarray, lam: float) -> np.ndarray:
    try:
        return cho_solve(cho_factor(A, lower=True), B)
    except LinAlgError:
        if lam == 0.0:
            raise ComputeError(
                "normal-equation system is singular at lambda=0; use lambda > 0"
            ) from None
        raise ComputeError("normal-equation system is not positive definite") from None


def fit_ridge_s2v(X: FeatureMatrix, prototypes: PrototypeSet, lam: float) -> RidgeModel:
    """Solve (T'T + lam*N*I) Theta = T'X with T the per-sample prototype rows.

    T'T and T'X are accumulated class-wise, and the K x K symmetric
    system is solved by Cholesky factorization.
    """
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    S, counts, sums = _group_by_class(X, prototypes)
    n = X.rows
    A = (S * counts[:, None]).T @ S + lam * n * np.eye(prototypes.dim)
    B = S.T @ sums
    theta = _solve_spd(A, B, lam)
    return RidgeModel(direction=S2V, weights=theta, lam=lam, n_train=n)


def fit_ridge_v2s(X: FeatureMatrix, prototypes: PrototypeSet, lam: float) -> RidgeModel:
    """Ridge from the visual to the semantic space: (X'X + lam*N*I) W = X'T."""
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    S, _, sums = _group_by_class(X, prototypes)
    n = X.rows
    A = X.data.T @ X.data + lam * n * np.eye(X.dim)
    B = sums.T @ S
    weights = _solve_spd(A, B, lam)
    return RidgeModel(direction=V2S, weights=weights, lam=lam, n_train=n)


def fit_ridge(X: FeatureMatrix, prototypes: PrototypeSet, lam: float, direction: str = S2V) -> RidgeModel:
    if direction == S2V:
        return fit_ridge_s2v(X, prototypes, lam)
    if direction == V2S:
        return fit_ridge_v2s(X, prototypes, lam)
    raise InputError(f"unknown direction {direction!r}")


def ridge_loss(model: RidgeModel, X: FeatureMatrix, prototypes: PrototypeSet) -> float:
    """Mean squared residual plus lambda * ||weights||_F^2, per the fitted objective."""
    S, counts, sums = _group_by_class(X, prototypes)
    n = X.rows
    W = model.weights
    if model.direction == S2V:
        proj = S @ W  # per-class projection into visual space
        residual = (
            float((X.data**2).sum())
            - 2.0 * float((proj * sums).sum())
            + float((counts * (proj**2).sum(axis=1)).sum())
        )
    else:
        XW = X.data @ W
        residual = (
            float((counts * (S**2).sum(axis=1)).sum())
            - 2.0 * float((S * (sums @ W)).sum())
            + float((XW**2).sum())
        )
    return residual / n + model.lam * float((W**2).sum())


def _candidate_distances(model: RidgeModel, rows: np.ndarray, candidates: PrototypeSet) -> np.ndarray:
    """Squared distances (n x C) from each row to each candidate, per Eq.-4-style scoring."""
    if model.direction == S2V:
        if candidates.dim != model.weights.shape[0]:
            raise InputError(
                f"candidate dim {candidates.dim} does not match model semantic dim {model.weights.shape[0]}"
            )
        if rows.shape[1] != model.weights.shape[1]:
            raise InputError(
                f"sample dim {rows.shape[1]} does not match model visual dim {model.weights.shape[1]}"
            )
        points = rows
        targets = candidates.vectors @ model.weights  # C x D
    else:
        if rows.shape[1] != model.weights.shape[0]:
            raise InputError(
                f"sample dim {rows.shape[1]} does not match model visual dim {model.weights.shape[0]}"
            )
        if candidates.dim != model.weights.shape[1]:
            raise InputError(
                f"candidate dim {candidates.dim} does not match model semantic dim {model.weights.shape[1]}"
            )
        points = rows @ model.weights  # n x K
        targets = candidates.vectors
    d2 = (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ targets.T
        + (targets**2).sum(axis=1)[None, :]
    )
    return d2


def rank_candidates(model: RidgeModel, rows: np.ndarray, candidates: PrototypeSet) -> np.ndarray:
    """Candidate indices sorted by ascending distance per row; ties keep candidate order."""
    if len(candidates) == 0:
        raise InputError("candidate set is empty")
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    d2 = _candidate_distances(model, rows, candidates)
    return np.argsort(d2, axis=1, kind="stable")


def predict(model: RidgeModel, x: np.ndarray, candidates: PrototypeSet, k: int = 1) -> list[str]:
    """Ranked list of the k candidate class_ids closest to the sample."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    order = rank_candidates(model, x, candidates)[0]
    return [candidates.class_ids[i] for i in order[:k]]


def predict_batch(
    model: RidgeModel, X: FeatureMatrix | np.ndarray, candidates: PrototypeSet, k: int = 1
) -> list[list[str]]:
    rows = X.data if isinstance(X, FeatureMatrix) else X
    order = rank_candidates(model, rows, candidates)
    ids: Sequence[str] = candidates.class_ids
    return [[ids[i] for i in row[:k]] for row in order]
