"""Parsers and serializers for embeddings, class catalogs and packed feature files."""
from __future__ import annotations

import io
import json
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Optional
from urllib.parse import quote, unquote

import numpy as np

MAGIC = b"ZSF1"
BUNDLE_EXT = ".zf"

_TOKEN_RE = re.compile(r"(?:[^\W_]|')+")
_LEMMA_SPLIT_RE = re.compile(r"[ _]+")


class InputError(Exception):
    """Bad user-supplied data or parameters (CLI exit code 2)."""


class ComputeError(Exception):
    """Numerical failure during computation (CLI exit code 1)."""


class ParseError(InputError):
    """Malformed text input; message carries the line number when known."""


class FormatError(InputError):
    """Malformed packed feature file."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class LabelCountError(FormatError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> K-dimensional vector map. Vectors are float64, all finite."""

    dim: int
    entries: dict

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("embedding dim must be positive")
        for tok, vec in self.entries.items():
            if not tok:
                raise ValueError("empty token in embedding table")
            if vec.shape != (self.dim,):
                raise ValueError(f"vector for {tok!r} has length {vec.shape[0]}, expected {self.dim}")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def get(self, token: str):
        return self.entries.get(token)

    def lookup(self, token: str):
        """Lowercase-first lookup, falling back to the original casing."""
        vec = self.entries.get(token.lower())
        if vec is None:
            vec = self.entries.get(token)
        return vec


def parse_embedding_table(stream: IO[str] | str) -> EmbeddingTable:
    """Parse a text embedding table (`token v1 ... vK` per line).

    A first line consisting of exactly two integers is treated as a
    `count dim` header and skipped. The dimension is inferred from the
    first data line. Duplicate tokens keep their first occurrence and
    are reported through a single warning.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    entries: dict = {}
    dim = None
    duplicates = 0
    n_line = 0
    for n_line, line in enumerate(stream, start=1):
        fields = line.split()
        if not fields:
            continue
        if n_line == 1 and len(fields) == 2 and _is_int(fields[0]) and _is_int(fields[1]):
            continue  # header
        token, values = fields[0], fields[1:]
        if dim is None:
            if not values:
                raise ParseError(f"line {n_line}: no values for token {token!r}")
            dim = len(values)
        if len(values) != dim:
            raise ParseError(f"line {n_line}: expected {dim} values, got {len(values)}")
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"line {n_line}: {exc}") from None
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"line {n_line}: non-finite value for token {token!r}")
        if token in entries:
            duplicates += 1
            continue
        entries[token] = vec
    if dim is None:
        raise ParseError("empty embedding input" if n_line == 0 else "no data lines in embedding input")
    if duplicates:
        warnings.warn(f"{duplicates} duplicate token(s) in embedding table, kept first occurrences")
    return EmbeddingTable(dim=dim, entries=entries)


def serialize_embedding_table(table: EmbeddingTable) -> str:
    """Render a table back to the text format, round-trippable via repr floats."""
    lines = []
    for token, vec in table.entries.items():
        lines.append(token + " " + " ".join(repr(float(v)) for v in vec))
    return "\n".join(lines) + "\n"


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def tokenize_definition(raw: str) -> list[str]:
    """Lowercase and split on any character that is not a letter, digit or apostrophe."""
    return _TOKEN_RE.findall(raw.lower())


@dataclass(frozen=True)
class ClassRecord:
    class_id: str
    lemmas: list  # list of list-of-tokens
    definition: str
    parent_id: Optional[str] = None


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class records with unique ids and acyclic parent links.

    Parents referenced but not present in the catalog are kept in
    `external_parents` rather than rejected.
    """

    classes: list
    external_parents: frozenset = field(default=frozenset())

    def __post_init__(self):
        by_id = {}
        for rec in self.classes:
            if rec.class_id in by_id:
                raise ValueError(f"duplicate class_id {rec.class_id!r}")
            by_id[rec.class_id] = rec
        object.__setattr__(self, "_by_id", by_id)
        external = {
            rec.parent_id
            for rec in self.classes
            if rec.parent_id is not None and rec.parent_id not in by_id
        }
        object.__setattr__(self, "external_parents", frozenset(external))
        cycle = _find_parent_cycle(self.classes, by_id)
        if cycle:
            raise ValueError("parent cycle: " + " -> ".join(cycle))

    def __len__(self):
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._by_id

    def get(self, class_id: str) -> Optional[ClassRecord]:
        return self._by_id.get(class_id)

    @property
    def class_ids(self) -> list[str]:
        return [rec.class_id for rec in self.classes]

    def subset(self, class_ids: Iterable[str]) -> "ClassCatalog":
        keep = set(class_ids)
        return ClassCatalog([rec for rec in self.classes if rec.class_id in keep])


def _find_parent_cycle(classes, by_id) -> Optional[list]:
    color = {}  # 0 visiting, 1 done
    for rec in classes:
        path = []
        node = rec.class_id
        while node is not None and node in by_id and color.get(node) != 1:
            if color.get(node) == 0:
                i = path.index(node)
                return path[i:] + [node]
            color[node] = 0
            path.append(node)
            node = by_id[node].parent_id
        for seen in path:
            color[seen] = 1
    return None


def parse_class_catalog(stream: IO[str] | str) -> ClassCatalog:
    """Parse a JSON-lines class catalog.

    Each line is an object with keys class_id, lemmas, definition and
    parent (null for roots). Lemma strings are split on underscores and
    spaces into tokens.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    records = []
    for n_line, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {n_line}: invalid JSON ({exc.msg})") from None
        for key in ("class_id", "lemmas", "definition", "parent"):
            if key not in obj:
                raise ParseError(f"line {n_line}: missing key {key!r}")
        lemmas = []
        for lemma in obj["lemmas"]:
            if not isinstance(lemma, str):
                raise ParseError(f"line {n_line}: lemma is not a string")
            tokens = [t for t in _LEMMA_SPLIT_RE.split(lemma) if t]
            if tokens:
                lemmas.append(tokens)
        if not lemmas:
            raise ParseError(f"line {n_line}: class {obj['class_id']!r} has no usable lemma")
        records.append(
            ClassRecord(
                class_id=obj["class_id"],
                lemmas=lemmas,
                definition=obj["definition"],
                parent_id=obj["parent"],
            )
        )
    try:
        return ClassCatalog(records)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def serialize_class_catalog(catalog: ClassCatalog) -> str:
    lines = []
    for rec in catalog:
        lines.append(
            json.dumps(
                {
                    "class_id": rec.class_id,
                    "lemmas": [" ".join(toks) for toks in rec.lemmas],
                    "definition": rec.definition,
                    "parent": rec.parent_id,
                },
                ensure_ascii=False,
            )
        )
    return "\n".join(lines) + "\n"


@dataclass
class FeatureMatrix:
    """N x D feature rows with optional per-row class_id labels.

    Data is float64 in memory; the packed file stores 32-bit floats.
    """

    data: np.ndarray
    labels: Optional[list] = None
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("feature data must be 2-D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contains non-finite values")
        if self.rows == 0 and self.labels is None:
            self.labels = []
        if self.labels is not None:
            if len(self.labels) != self.rows:
                raise ValueError(f"{len(self.labels)} labels for {self.rows} rows")
            for lab in self.labels:
                if "\n" in lab:
                    raise ValueError("labels must not contain newlines")
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.data, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("matrix flagged normalized but rows are not unit-norm")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_feature_matrix(m: FeatureMatrix) -> bytes:
    """Pack a matrix: magic, u32 dim, u64 rows, f32 data, labels block."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQ", m.dim, m.rows)
    out += np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    labels_blob = b"" if not m.labels else "\n".join(m.labels).encode("utf-8")
    out += struct.pack("<Q", len(labels_blob))
    out += labels_blob
    return bytes(out)


def read_feature_matrix(stream: IO[bytes] | bytes) -> FeatureMatrix:
    """Read a packed feature file; inverse of :func:`write_feature_matrix`."""
    buf = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise TruncatedPayloadError("truncated header")
    dim, rows = struct.unpack_from("<IQ", buf, 4)
    off = 16
    payload = rows * dim * 4
    if len(buf) < off + payload:
        raise TruncatedPayloadError(
            f"payload needs {payload} bytes, only {len(buf) - off} present"
        )
    data = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=off)
    data = data.reshape(rows, dim).astype(np.float64)
    off += payload
    if len(buf) < off + 8:
        raise TruncatedPayloadError("missing labels block length")
    (label_len,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) < off + label_len:
        raise TruncatedPayloadError("truncated labels block")
    blob = buf[off : off + label_len]
    off += label_len
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after labels block")
    if label_len == 0:
        labels = [] if rows == 0 else None
    else:
        labels = blob.decode("utf-8").split("\n")
        if len(labels) != rows:
            raise LabelCountError(f"{len(labels)} labels for {rows} rows")
    return FeatureMatrix(data=data, labels=labels)


def save_feature_matrix(m: FeatureMatrix, path: str | Path) -> None:
    Path(path).write_bytes(write_feature_matrix(m))


def load_feature_matrix(path: str | Path) -> FeatureMatrix:
    return read_feature_matrix(Path(path).read_bytes())


@dataclass(frozen=True)
class WordImageBundle:
    """Pre-extracted image features (M x D_img) for a single word."""

    token: str
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bundle for {self.token!r} needs at least one feature row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"bundle for {self.token!r} contains non-finite values")


def bundle_filename(token: str) -> str:
    return quote(token, safe="") + BUNDLE_EXT


def load_word_image_bundles(directory: str | Path) -> list[WordImageBundle]:
    """Load every `<percent-encoded-token>.zf` file in a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"bundle directory not found: {directory}")
    bundles = []
    seen: dict = {}
    for path in sorted(directory.glob("*" + BUNDLE_EXT)):
        token = unquote(path.name[: -len(BUNDLE_EXT)])
        if token in seen:
            raise InputError(f"duplicate token {token!r} from {path.name} and {seen[token]}")
        seen[token] = path.name
        try:
            matrix = load_feature_matrix(path)
            if matrix.labels:
                raise FormatError("word bundle must have an empty labels block")
            bundles.append(WordImageBundle(token=token, features=matrix.data))
        except (OSError, FormatError, ValueError) as exc:
            raise InputError(f"unreadable bundle file {path}: {exc}") from None
    return bundles


def save_word_image_bundle(bundle: WordImageBundle, directory: str | Path) -> Path:
    path = Path(directory) / bundle_filename(bundle.token)
    save_feature_matrix(FeatureMatrix(data=bundle.features, labels=None), path)
    return path
