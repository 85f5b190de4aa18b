"""Learned attention over definition words, trained with the ridge solve in the loop."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .data_io import ClassCatalog, ComputeError, EmbeddingTable, FeatureMatrix, InputError
from .prototypes import (
    PrototypeSet,
    build_prototype_set,
    classname_prototype,
    embedded_definition_tokens,
    _normalize,
    _softmax,
)
from .ridge import _solve_spd, fit_ridge_s2v, ridge_loss

MAX_HALVINGS = 30


@dataclass
class AttentionModel:
    """Learned visualness predictor theta with its training trace."""

    theta: np.ndarray
    training_log: list
    seed: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta": [float(t) for t in self.theta],
                "seed": self.seed,
                "training_log": [float(v) for v in self.training_log],
            }
        )

    @classmethod
    def from_json(cls, text: str | IO[str]) -> "AttentionModel":
        obj = json.loads(text if isinstance(text, str) else text.read())
        return cls(np.array(obj["theta"], dtype=np.float64), list(obj["training_log"]), int(obj["seed"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "AttentionModel":
        return cls.from_json(Path(path).read_text())


def attention_forward(theta: np.ndarray, catalog: ClassCatalog, emb: EmbeddingTable) -> PrototypeSet:
    """Prototypes from softmax(theta . w) word weights at unit temperature."""
    return build_prototype_set(catalog, emb, "Def_attention", theta=theta)


def attention_loss(
    theta: np.ndarray, X: FeatureMatrix, catalog: ClassCatalog, emb: EmbeddingTable, lam: float
) -> float:
    """Ridge objective at the closed-form solution for the prototypes induced by theta."""
    protos = attention_forward(theta, catalog, emb)
    model = fit_ridge_s2v(X, protos, lam)
    return ridge_loss(model, X, protos)


class _Problem:
    """Per-class data reused across loss/gradient evaluations."""

    def __init__(self, X: FeatureMatrix, catalog: ClassCatalog, emb: EmbeddingTable):
        if X.labels is None:
            raise InputError("feature matrix has no labels; cannot fit")
        present = set(X.labels)
        for label in X.labels:
            if label not in catalog:
                raise InputError(f"label {label!r} is not in the class catalog")
        self.dim = emb.dim
        self.n = X.rows
        self.class_ids = [rec.class_id for rec in catalog if rec.class_id in present]
        idx_of = {cid: i for i, cid in enumerate(self.class_ids)}
        row_idx = np.array([idx_of[lab] for lab in X.labels], dtype=np.intp)
        self.counts = np.bincount(row_idx, minlength=len(self.class_ids)).astype(np.float64)
        self.sums = np.zeros((len(self.class_ids), X.dim))
        np.add.at(self.sums, row_idx, X.data)
        self.token_mats = []  # W_c or None when the class fell back to its classname
        self.fallbacks = []
        for cid in self.class_ids:
            rec = catalog.get(cid)
            _, W = embedded_definition_tokens(rec, emb)
            if W.shape[0]:
                self.token_mats.append(W)
                self.fallbacks.append(None)
            else:
                self.token_mats.append(None)
                self.fallbacks.append(_normalize(classname_prototype(rec, emb)))

    def forward(self, theta: np.ndarray):
        """Per-class softmax weights, unnormalized sums and normalized prototypes."""
        acts, raw_norms, S = [], [], np.empty((len(self.class_ids), self.dim))
        for i, W in enumerate(self.token_mats):
            if W is None:
                acts.append(None)
                raw_norms.append(None)
                S[i] = self.fallbacks[i]
                continue
            a = _softmax(W @ theta)
            u = a @ W
            nu = np.linalg.norm(u)
            if nu == 0.0:
                raise ComputeError("zero-norm prototype in attention forward pass")
            acts.append(a)
            raw_norms.append(nu)
            S[i] = u / nu
        return acts, raw_norms, S


def attention_grad(
    theta: np.ndarray, X: FeatureMatrix, catalog: ClassCatalog, emb: EmbeddingTable, lam: float
) -> np.ndarray:
    """Exact gradient of :func:`attention_loss` with respect to theta.

    Differentiates through the visualness map, the softmax, the weighted
    sum, the sphere normalization and the closed-form ridge solve, using
    the identity d(A^-1) = -A^-1 dA A^-1 on the K x K system.
    """
    theta = np.asarray(theta, dtype=np.float64)
    problem = _Problem(X, catalog, emb)
    return _grad(problem, theta, lam)


def _solve_theta(problem: _Problem, S: np.ndarray, lam: float) -> np.ndarray:
    A = (S * problem.counts[:, None]).T @ S + lam * problem.n * np.eye(problem.dim)
    B = S.T @ problem.sums
    return _solve_spd(A, B, lam)


def _grad(problem: _Problem, theta: np.ndarray, lam: float) -> np.ndarray:
    acts, raw_norms, S = problem.forward(theta)
    big_theta = _solve_theta(problem, S, lam)
    H = big_theta @ big_theta.T  # K x K
    grad = np.zeros_like(theta)
    for i, W in enumerate(problem.token_mats):
        if W is None:
            continue  # fallback prototypes are constant in theta
        a, nu, s = acts[i], raw_norms[i], S[i]
        q = (-2.0 / problem.n) * (big_theta @ problem.sums[i] - problem.counts[i] * (H @ s))
        p = (q - s * (s @ q)) / nu  # back through the sphere normalization
        z = W @ p
        jz = a * z - a * (a @ z)  # softmax Jacobian applied to z
        grad += W.T @ jz
    return grad


def train_attention(
    X: FeatureMatrix,
    catalog: ClassCatalog,
    emb: EmbeddingTable,
    lam: float,
    epochs: int = 50,
    seed: int = 0,
    init: str = "zero",
) -> AttentionModel:
    """Full-batch gradient descent on theta with a backtracking line search.

    Each epoch takes one gradient step, halving the step until the loss
    does not increase (at most 30 halvings); if every trial fails, theta
    is left unchanged for that epoch. `init="zero"` starts exactly at the
    uniform-weights solution; `init="random"` draws theta from a Gaussian
    with standard deviation 0.01 using the seed.
    """
    if epochs < 1:
        raise InputError(f"epochs must be >= 1, got {epochs}")
    if init == "zero":
        theta = np.zeros(emb.dim)
    elif init == "random":
        theta = np.random.default_rng(seed).normal(0.0, 0.01, emb.dim)
    else:
        raise InputError(f"init must be 'zero' or 'random', got {init!r}")

    current = attention_loss(theta, X, catalog, emb, lam)
    log = [current]
    step = 1.0
    for epoch in range(1, epochs + 1):
        grad = attention_grad(theta, X, catalog, emb, lam)
        if not np.all(np.isfinite(grad)):
            raise ComputeError(f"non-finite gradient at epoch {epoch}")
        trial = step * 2.0
        for _ in range(MAX_HALVINGS + 1):
            candidate = theta - trial * grad
            loss = attention_loss(candidate, X, catalog, emb, lam)
            if loss <= current:
                theta, current, step = candidate, loss, trial
                break
            trial /= 2.0
        log.append(current)
    return AttentionModel(theta=theta, training_log=log, seed=seed)
