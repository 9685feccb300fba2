"""Embedding store over documentation snippets and scenario examples.

The default embedder hashes character trigrams into a fixed number of
buckets, counts them, and L2-normalizes the result. It is deterministic and
needs no network, which keeps retrieval reproducible in tests.

Store files hold one entry per line::

    id <TAB> tag1,tag2 <TAB> base64(float64 little-endian embedding) <TAB> text

Tabs, newlines and backslashes inside text are backslash-escaped.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import socket
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

NGRAM = 3
DEFAULT_DIMENSION = 512


class EmbedderUnreachable(RuntimeError):
    pass


class StoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "hash-ngram"
    dimension: int = DEFAULT_DIMENSION
    address: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("hash-ngram", "external"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if self.kind == "external" and not self.address:
            raise ValueError("external embedder needs an address")


def char_ngrams(text: str, n: int = NGRAM) -> list[str]:
    text = text.lower()
    return [text[i : i + n] for i in range(len(text) - n + 1)]


def _bucket(gram: str, dimension: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


def hash_ngram_embedding(text: str, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    vec = np.zeros(dimension, dtype=np.float64)
    for gram in char_ngrams(text):
        vec[_bucket(gram, dimension)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _external_embedding(text: str, spec: EmbedderSpec) -> np.ndarray:
    from .token_model import PROTOCOL_VERSION, parse_address

    host, port = parse_address(spec.address)
    msg = json.dumps({"v": PROTOCOL_VERSION, "op": "embed", "text": text}) + "\n"
    try:
        with socket.create_connection((host, port), timeout=30) as sock:
            sock.sendall(msg.encode("utf-8"))
            line = sock.makefile("rb").readline()
    except OSError as exc:
        raise EmbedderUnreachable(f"cannot reach embedder at {spec.address}: {exc}") from exc
    resp = json.loads(line) if line else {}
    if "embedding" not in resp:
        raise EmbedderUnreachable(resp.get("error", "embedder returned no embedding"))
    vec = np.array(resp["embedding"], dtype=np.float64)
    if vec.size != spec.dimension:
        raise ValueError(f"embedder returned dimension {vec.size}, expected {spec.dimension}")
    return vec


def embed(text: str, spec: EmbedderSpec = EmbedderSpec()) -> np.ndarray:
    if not text:
        raise ValueError("cannot embed empty text")
    if spec.kind == "external":
        return _external_embedding(text, spec)
    return hash_ngram_embedding(text, spec.dimension)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class KnowledgeEntry:
    id: str
    text: str
    embedding: np.ndarray
    tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"entry {self.id!r} has empty text")
        if "\t" in self.id or "\n" in self.id or not self.id:
            raise ValueError(f"invalid entry id {self.id!r}")
        emb = np.array(self.embedding, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "tags", frozenset(self.tags))


@dataclass(frozen=True)
class Hit:
    entry: KnowledgeEntry
    score: float


class KnowledgeStore:
    """Immutable set of entries with exact (brute-force) cosine retrieval."""

    def __init__(self, entries: Iterable[KnowledgeEntry] = (), spec: EmbedderSpec = EmbedderSpec()) -> None:
        self.spec = spec
        entries = tuple(entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids")
        for e in entries:
            if e.embedding.shape != (spec.dimension,):
                raise ValueError(f"entry {e.id!r} has dimension {e.embedding.size}, store expects {spec.dimension}")
            if not np.any(e.embedding):
                raise ValueError(f"entry {e.id!r} has a zero embedding")
        self.entries = entries
        if entries:
            mat = np.stack([e.embedding for e in entries])
            self._unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        else:
            self._unit = np.zeros((0, spec.dimension))

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_texts(
        cls,
        items: Iterable[tuple[str, str] | tuple[str, str, Iterable[str]]],
        spec: EmbedderSpec = EmbedderSpec(),
    ) -> KnowledgeStore:
        entries = []
        for item in items:
            entry_id, text = item[0], item[1]
            tags = item[2] if len(item) > 2 else ()
            entries.append(KnowledgeEntry(entry_id, text, embed(text, spec), frozenset(tags)))
        return cls(entries, spec)

    def with_entries(self, extra: Iterable[KnowledgeEntry]) -> KnowledgeStore:
        return KnowledgeStore(self.entries + tuple(extra), self.spec)

    def retrieve_top_k(self, query: str | np.ndarray, k: int) -> list[Hit]:
        if not self.entries:
            raise ValueError("retrieval from an empty store")
        if k < 1:
            raise ValueError("k must be at least 1")
        q = embed(query, self.spec) if isinstance(query, str) else np.asarray(query, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0:
            raise ValueError("query embedding is zero")
        scores = self._unit @ (q / qn)
        order = sorted(range(len(self.entries)), key=lambda i: (-scores[i], self.entries[i].id))
        return [Hit(self.entries[i], float(scores[i])) for i in order[:k]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(dump_store(self).encode("utf-8"))
        return h.hexdigest()


def retrieve_top_k(query: str, store: KnowledgeStore, k: int) -> list[Hit]:
    return store.retrieve_top_k(query, k)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    it = iter(text)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
        else:
            out.append(ch)
    return "".join(out)


def dump_store(store: KnowledgeStore) -> str:
    lines = []
    for e in store.entries:
        emb = base64.b64encode(e.embedding.astype("<f8").tobytes()).decode("ascii")
        lines.append(f"{e.id}\t{','.join(sorted(e.tags))}\t{emb}\t{_escape(e.text)}")
    return "".join(line + "\n" for line in lines)


def parse_store(text: str, spec: EmbedderSpec | None = None) -> KnowledgeStore:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise StoreFormatError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        entry_id, tags, emb, body = parts
        try:
            vec = np.frombuffer(base64.b64decode(emb, validate=True), dtype="<f8").astype(np.float64)
        except ValueError as exc:
            raise StoreFormatError(f"line {lineno}: bad embedding: {exc}") from exc
        entries.append(KnowledgeEntry(entry_id, _unescape(body), vec, frozenset(t for t in tags.split(",") if t)))
    if spec is None:
        spec = EmbedderSpec(dimension=entries[0].embedding.size if entries else DEFAULT_DIMENSION)
    return KnowledgeStore(entries, spec)


def load_store(path: str | Path, spec: EmbedderSpec | None = None) -> KnowledgeStore:
    return parse_store(Path(path).read_text(encoding="utf-8"), spec)


def save_store(store: KnowledgeStore, path: str | Path) -> None:
    Path(path).write_text(dump_store(store), encoding="utf-8")


def build_store(docs: Sequence[dict], spec: EmbedderSpec = EmbedderSpec(), embedder: Callable[[str], np.ndarray] | None = None) -> KnowledgeStore:
    """Build a store from ``{"id", "text", "tags"}`` dicts, skipping texts with no n-grams."""
    entries = []
    for doc in docs:
        vec = embedder(doc["text"]) if embedder else embed(doc["text"], spec)
        if not np.any(vec):
            log.warning("skipping %s: zero embedding", doc["id"])
            continue
        entries.append(KnowledgeEntry(doc["id"], doc["text"], vec, frozenset(doc.get("tags", ()))))
    return KnowledgeStore(entries, spec)
