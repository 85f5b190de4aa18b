"""Class prototype construction: classname, definition and combined strategies."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Optional

import numpy as np

from .data_io import (
    ClassCatalog,
    ClassRecord,
    ComputeError,
    EmbeddingTable,
    FeatureMatrix,
    InputError,
    load_feature_matrix,
    save_feature_matrix,
    tokenize_definition,
)
from .visualness import VisualnessTable

METHODS = (
    "Classname",
    "Classname+Parent",
    "Def_average",
    "Def_visualness",
    "Def_attention",
    "Classname+Def_average",
    "Classname+Def_visualness",
    "Classname+Def_visualness+Parent",
)

UNIT_NORM_TOL = 1e-9


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ComputeError("cannot normalize a zero-norm prototype")
    return v / n


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def classname_prototype(rec: ClassRecord, emb: EmbeddingTable) -> np.ndarray:
    """Mean of lemma prototypes, each the mean of its embedded words.

    Words missing from the table are skipped within a lemma; lemmas with
    no embedded word are skipped; a class with no embeddable lemma falls
    back to the embedding of "thing".
    """
    lemma_protos = []
    for tokens in rec.lemmas:
        vecs = [v for v in (emb.lookup(t) for t in tokens) if v is not None]
        if vecs:
            lemma_protos.append(np.mean(vecs, axis=0))
    if lemma_protos:
        return np.mean(lemma_protos, axis=0)
    thing = emb.lookup("thing")
    if thing is None:
        raise InputError(
            f"class {rec.class_id!r} has no embeddable lemma and 'thing' is missing from the table"
        )
    return thing.copy()


def embedded_definition_tokens(
    rec: ClassRecord, emb: EmbeddingTable
) -> tuple[list[str], np.ndarray]:
    """Definition tokens that have embeddings, with their stacked vectors."""
    tokens = []
    vecs = []
    for tok in tokenize_definition(rec.definition):
        v = emb.lookup(tok)
        if v is not None:
            tokens.append(tok)
            vecs.append(v)
    if not tokens:
        return [], np.empty((0, emb.dim))
    return tokens, np.stack(vecs)


def def_average_prototype(rec: ClassRecord, emb: EmbeddingTable) -> np.ndarray:
    """Unweighted mean of embedded definition tokens; classname fallback if none."""
    _, W = embedded_definition_tokens(rec, emb)
    if W.shape[0] == 0:
        return classname_prototype(rec, emb)
    return W.mean(axis=0)


@dataclass(frozen=True)
class WeightReport:
    """Per-class attention weights over retained definition tokens."""

    class_id: str
    pairs: list  # (token, weight), weights sum to 1

    def __post_init__(self):
        if self.pairs:
            total = sum(w for _, w in self.pairs)
            if abs(total - 1.0) > 1e-9 or any(w < 0 for _, w in self.pairs):
                raise ValueError(f"weights for {self.class_id!r} must be >= 0 and sum to 1")


def _weighted_prototype(
    rec: ClassRecord, emb: EmbeddingTable, scores_of
) -> tuple[np.ndarray, Optional[WeightReport]]:
    tokens, W = embedded_definition_tokens(rec, emb)
    if not tokens:
        return classname_prototype(rec, emb), None
    weights = _softmax(np.asarray(scores_of(tokens, W), dtype=np.float64))
    vec = weights @ W
    report = WeightReport(rec.class_id, list(zip(tokens, (float(w) for w in weights))))
    return vec, report


def def_weighted_prototype(
    rec: ClassRecord, emb: EmbeddingTable, vis: VisualnessTable, tau: float
) -> tuple[np.ndarray, Optional[WeightReport]]:
    """Visualness-weighted mean: softmax(v / tau) over embedded definition tokens."""
    if tau <= 0:
        raise InputError(f"temperature must be > 0, got {tau}")
    return _weighted_prototype(
        rec, emb, lambda tokens, W: [vis.score(t) / tau for t in tokens]
    )


def def_attention_prototype(
    rec: ClassRecord, emb: EmbeddingTable, theta: np.ndarray
) -> tuple[np.ndarray, Optional[WeightReport]]:
    """Learned-attention mean: softmax(theta . w) at unit temperature."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (emb.dim,):
        raise InputError(f"theta has shape {theta.shape}, expected ({emb.dim},)")
    return _weighted_prototype(rec, emb, lambda tokens, W: W @ theta)


def combine(s_primary: np.ndarray, s_secondary: np.ndarray, mu: float) -> np.ndarray:
    """Renormalized convex combination; the first argument carries weight mu."""
    if not 0.0 <= mu <= 1.0:
        raise InputError(f"mu must lie in [0, 1], got {mu}")
    if s_primary.shape != s_secondary.shape:
        raise InputError("combined prototypes must share a dimension")
    for name, s in (("primary", s_primary), ("secondary", s_secondary)):
        if abs(np.linalg.norm(s) - 1.0) > 1e-6:
            raise InputError(f"{name} prototype is not l2-normalized")
    if mu == 1.0:
        return s_primary.copy()
    if mu == 0.0:
        return s_secondary.copy()
    return _normalize(mu * s_primary + (1.0 - mu) * s_secondary)


@dataclass
class PrototypeSet:
    """C x K matrix of l2-normalized class prototypes with build metadata."""

    class_ids: list
    vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("prototype vectors must be 2-D")
        if len(self.class_ids) != self.vectors.shape[0]:
            raise ValueError("class_ids length must match the number of rows")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class_ids must be unique")
        if self.vectors.shape[0]:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise ValueError("every prototype must have unit l2-norm")
        self._index = {cid: i for i, cid in enumerate(self.class_ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.class_ids)

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._index

    def index_of(self, class_id: str) -> int:
        return self._index[class_id]

    def vector(self, class_id: str) -> np.ndarray:
        return self.vectors[self._index[class_id]]

    def subset(self, class_ids: Iterable[str]) -> "PrototypeSet":
        ids = list(class_ids)
        rows = [self._index[c] for c in ids]
        return PrototypeSet(ids, self.vectors[rows].copy(), dict(self.meta))

    def save(self, path: str | Path) -> None:
        """Write the packed vector file plus a `.meta.json` sidecar."""
        path = Path(path)
        save_feature_matrix(FeatureMatrix(data=self.vectors, labels=list(self.class_ids)), path)
        path.with_suffix(".meta.json").write_text(json.dumps(self.meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeSet":
        path = Path(path)
        m = load_feature_matrix(path)
        if m.labels is None:
            raise InputError(f"prototype file {path} has no class_id labels")
        sidecar = path.with_suffix(".meta.json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        vectors = m.data
        if vectors.shape[0]:
            # restore exact unit norms lost to 32-bit storage
            vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        return cls(m.labels, vectors, meta)


def build_prototype_set(
    catalog: ClassCatalog,
    emb: EmbeddingTable,
    method: str,
    *,
    vis: Optional[VisualnessTable] = None,
    tau: Optional[float] = None,
    mu_def: Optional[float] = None,
    mu_parent: float = 0.25,
    theta: Optional[np.ndarray] = None,
    return_reports: bool = False,
):
    """Build one normalized prototype per catalog class with the given method.

    For +Parent methods the parent prototype is built with the same base
    method and parameters as the child and combined as
    combine(child, parent, 1 - mu_parent); classes without an in-catalog
    parent keep the child prototype unchanged.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    has_parent = method.endswith("+Parent")
    base = method[: -len("+Parent")] if has_parent else method
    needs_vis = "Def_visualness" in base
    needs_mu = base.startswith("Classname+Def")
    is_attention = base == "Def_attention"

    if needs_vis:
        if vis is None:
            raise InputError(f"method {method!r} requires a visualness table")
        if tau is None:
            raise InputError(f"method {method!r} requires a temperature tau")
        if tau <= 0:
            raise InputError(f"temperature must be > 0, got {tau}")
    elif tau is not None:
        warnings.warn(f"method {method!r} does not use tau; ignoring it")
    if needs_mu:
        if mu_def is None:
            raise InputError(f"method {method!r} requires mu_def")
        if not 0.0 <= mu_def <= 1.0:
            raise InputError(f"mu_def must lie in [0, 1], got {mu_def}")
    elif mu_def is not None:
        warnings.warn(f"method {method!r} does not use mu_def; ignoring it")
    if has_parent and not 0.0 <= mu_parent <= 1.0:
        raise InputError(f"mu_parent must lie in [0, 1], got {mu_parent}")
    if is_attention:
        theta = np.zeros(emb.dim) if theta is None else np.asarray(theta, dtype=np.float64)
    elif theta is not None:
        warnings.warn(f"method {method!r} does not use theta; ignoring it")

    reports: list[WeightReport] = []

    def base_prototype(rec: ClassRecord) -> np.ndarray:
        if base == "Classname":
            return _normalize(classname_prototype(rec, emb))
        if base == "Def_average":
            return _normalize(def_average_prototype(rec, emb))
        if base == "Def_visualness":
            vec, report = def_weighted_prototype(rec, emb, vis, tau)
        elif base == "Def_attention":
            vec, report = def_attention_prototype(rec, emb, theta)
        else:  # Classname+Def_average / Classname+Def_visualness
            if base == "Classname+Def_average":
                def_vec, report = def_average_prototype(rec, emb), None
            else:
                def_vec, report = def_weighted_prototype(rec, emb, vis, tau)
            if report is not None:
                reports.append(report)
            return combine(
                _normalize(def_vec), _normalize(classname_prototype(rec, emb)), mu_def
            )
        if report is not None:
            reports.append(report)
        return _normalize(vec)

    base_vecs = {rec.class_id: base_prototype(rec) for rec in catalog}
    rows = []
    for rec in catalog:
        child = base_vecs[rec.class_id]
        if has_parent and rec.parent_id is not None and rec.parent_id in base_vecs:
            child = combine(child, base_vecs[rec.parent_id], 1.0 - mu_parent)
        rows.append(child)
    vectors = np.stack(rows) if rows else np.empty((0, emb.dim))
    meta = {
        "method": method,
        "tau": tau if needs_vis else None,
        "mu_def": mu_def if needs_mu else None,
        "mu_parent": mu_parent if has_parent else None,
    }
    proto_set = PrototypeSet([rec.class_id for rec in catalog], vectors, meta)
    if return_reports:
        return proto_set, reports
    return proto_set


def weight_reports_to_csv(reports: Iterable[WeightReport]) -> str:
    """Render reports as `class_id,token,weight` rows."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["class_id", "token", "weight"])
    for report in reports:
        for token, weight in report.pairs:
            writer.writerow([report.class_id, token, repr(weight)])
    return out.getvalue()
