"""Logit sources: the contract, two deterministic test models, and a remote client.

A backend answers two questions for a :class:`PromptBundle`: what are the
next-token logits with the context attached, and what are they without it.
Everything downstream (the contrastive decoder, the pipeline) only sees
that pair of vectors.

Model fixture files are line-oriented plain text. Blank lines and lines
starting with ``#`` are ignored. The first directive names the model kind::

    model table
    vocab Two Four Three <eos>
    default : 0 0 0 0
    default noctx : 0 0 0 0
    rule ctx at=0 : 2.0 1.9 0.0 -5
    rule noctx at=0 : 0.5 3.0 0.0 -5
    rule any after=Two query=retry : -5 -5 -5 5

Table rules are tried in file order and the first match wins. A rule line is
``rule CHANNEL [at=N] [after=T1,T2] [query=WORD] [context=WORD] : logits``
where CHANNEL is ``ctx`` (context-conditioned pass only), ``noctx``
(context-free pass only) or ``any``. ``at`` matches the prefix length,
``after`` matches the tail of the prefix, and ``query``/``context`` are
substring tests on the bundle text.

A row may also be written sparsely as ``#INDEX=VALUE`` pairs; unlisted
entries are 0.

A bigram model is declared with ``model bigram`` followed by an optional
``vocab`` line and one or more ``corpus`` lines of whitespace-separated words.
"""

from __future__ import annotations

import base64
import heapq
import json
import math
import socket
import socketserver
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

PROTOCOL_VERSION = 1


class BackendError(Exception):
    """Base class for logit-source failures."""


class BackendUnreachable(BackendError):
    pass


class VocabularyMismatch(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class FixtureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("vocabulary is empty")
        if len(set(self.tokens)) != len(self.tokens):
            dupes = sorted(t for t, n in Counter(self.tokens).items() if n > 1)
            raise ValueError(f"duplicate tokens in vocabulary: {dupes}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index  # type: ignore[attr-defined]

    def index(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except KeyError:
            raise VocabularyMismatch(f"token {token!r} not in vocabulary") from None

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index(w) for w in words)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class PromptBundle:
    """Context ``c``, query ``x`` and generated prefix ``y_<t`` for one step."""

    context_text: str = ""
    query_text: str = ""
    prefix: tuple[int, ...] = ()
    context_attachments: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(int(i) for i in self.prefix))
        object.__setattr__(self, "context_attachments", tuple(self.context_attachments))

    @property
    def has_context(self) -> bool:
        return bool(self.context_text) or bool(self.context_attachments)

    def without_context(self) -> PromptBundle:
        return PromptBundle(query_text=self.query_text, prefix=self.prefix)

    def with_prefix(self, prefix: Sequence[int]) -> PromptBundle:
        return PromptBundle(
            context_text=self.context_text,
            query_text=self.query_text,
            prefix=tuple(prefix),
            context_attachments=self.context_attachments,
        )

    def validate(self, vocab: Vocabulary) -> None:
        for i in self.prefix:
            if not 0 <= i < vocab.size:
                raise VocabularyMismatch(f"prefix index {i} outside vocabulary of size {vocab.size}")


@dataclass(frozen=True)
class TokenDistribution:
    logits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.logits, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("logits must be a non-empty vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    def __len__(self) -> int:
        return self.logits.size

    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


@runtime_checkable
class LogitSource(Protocol):
    vocabulary: Vocabulary

    def logits_with_context(self, bundle: PromptBundle) -> TokenDistribution: ...

    def logits_without_context(self, bundle: PromptBundle) -> TokenDistribution: ...


def detokenize(source: LogitSource, ids: Sequence[int]) -> str:
    """Turn generated ids into text; backends may override via ``detokenize``."""
    custom = getattr(source, "detokenize", None)
    if custom is not None:
        return custom(ids)
    return " ".join(source.vocabulary.decode(ids))


def _words(text: str) -> list[str]:
    return text.split()


# -- table model ---------------------------------------------------------------


@dataclass(frozen=True)
class TableRule:
    channel: str
    logits: tuple[float, ...]
    at: int | None = None
    after: tuple[str, ...] = ()
    query: str | None = None
    context: str | None = None

    def matches(self, channel: str, bundle: PromptBundle, prefix_words: list[str]) -> bool:
        if self.channel != "any" and self.channel != channel:
            return False
        if self.at is not None and len(prefix_words) != self.at:
            return False
        if self.after:
            n = len(self.after)
            if len(prefix_words) < n or tuple(prefix_words[-n:]) != self.after:
                return False
        if self.query is not None and self.query not in bundle.query_text:
            return False
        if self.context is not None and self.context not in bundle.context_text:
            return False
        return True


class TableModel:
    """Explicit prefix -> logits rules with per-channel default rows."""

    def __init__(
        self,
        vocabulary: Vocabulary | Sequence[str],
        rules: Sequence[TableRule] = (),
        default: Sequence[float] | None = None,
        default_noctx: Sequence[float] | None = None,
    ) -> None:
        self.vocabulary = vocabulary if isinstance(vocabulary, Vocabulary) else Vocabulary(tuple(vocabulary))
        n = self.vocabulary.size
        if default is None:
            default = [0.0] * n
        self.default = self._check_row(default)
        self.default_noctx = self._check_row(default_noctx) if default_noctx is not None else self.default
        self.rules = tuple(rules)
        self._by_length: dict[int, list[tuple[int, TableRule]]] = {}
        self._floating: list[tuple[int, TableRule]] = []
        for order, rule in enumerate(self.rules):
            if rule.channel not in ("ctx", "noctx", "any"):
                raise FixtureFormatError(f"unknown rule channel {rule.channel!r}")
            self._check_row(rule.logits)
            if rule.at is None:
                self._floating.append((order, rule))
            else:
                self._by_length.setdefault(rule.at, []).append((order, rule))

    def _check_row(self, row: Sequence[float]) -> tuple[float, ...]:
        row = tuple(float(v) for v in row)
        if len(row) != self.vocabulary.size:
            raise VocabularyMismatch(f"logit row has {len(row)} entries, vocabulary has {self.vocabulary.size}")
        return row

    def _lookup(self, channel: str, bundle: PromptBundle) -> TokenDistribution:
        bundle.validate(self.vocabulary)
        words = self.vocabulary.decode(bundle.prefix)
        # rules pinned to this prefix length, interleaved with unpinned ones in file order
        candidates = heapq.merge(self._by_length.get(len(words), ()), self._floating, key=lambda pair: pair[0])
        for _, rule in candidates:
            if rule.matches(channel, bundle, words):
                return TokenDistribution(np.array(rule.logits))
        return TokenDistribution(np.array(self.default if channel == "ctx" else self.default_noctx))

    def logits_with_context(self, bundle: PromptBundle) -> TokenDistribution:
        if not bundle.has_context:
            return self.logits_without_context(bundle)
        return self._lookup("ctx", bundle)

    def logits_without_context(self, bundle: PromptBundle) -> TokenDistribution:
        return self._lookup("noctx", bundle.without_context())

    @classmethod
    def scripted(
        cls,
        scripts: dict[str, str],
        stop_token: str = "<eos>",
        peak: float = 10.0,
    ) -> TableModel:
        """Build a replay model: when the query contains a key, emit its text word by word.

        Both channels carry the same rows, so the contrastive combination leaves
        the replayed argmax untouched at any alpha.
        """
        vocab: list[str] = []
        for text in scripts.values():
            for w in _words(text):
                if w not in vocab:
                    vocab.append(w)
        if stop_token not in vocab:
            vocab.append(stop_token)
        voc = Vocabulary(tuple(vocab))
        rules = []
        for key, text in scripts.items():
            for pos, word in enumerate(_words(text) + [stop_token]):
                row = [0.0] * voc.size
                row[voc.index(word)] = peak
                rules.append(TableRule("any", tuple(row), at=pos, query=key))
        stop_row = [0.0] * voc.size
        stop_row[voc.index(stop_token)] = peak
        return cls(voc, rules, default=stop_row)


# -- bigram model --------------------------------------------------------------


class BigramModel:
    """Add-one smoothed bigram counts over a whitespace-word corpus.

    The conditioning history is context words, then query words, then the
    prefix; the last in-vocabulary word selects the bigram row. With no usable
    history the smoothed unigram distribution is returned.
    """

    def __init__(self, corpus: Sequence[str] | str, vocabulary: Sequence[str] | None = None) -> None:
        if isinstance(corpus, str):
            corpus = [corpus]
        sentences = [_words(line) for line in corpus]
        if vocabulary is None:
            vocabulary = []
            for sent in sentences:
                for w in sent:
                    if w not in vocabulary:
                        vocabulary.append(w)
        self.vocabulary = Vocabulary(tuple(vocabulary))
        n = self.vocabulary.size
        self.counts = np.zeros((n, n), dtype=np.int64)
        self.unigrams = np.zeros(n, dtype=np.int64)
        for sent in sentences:
            ids = [self.vocabulary.index(w) for w in sent]
            for i in ids:
                self.unigrams[i] += 1
            for a, b in zip(ids, ids[1:]):
                self.counts[a, b] += 1

    def _row(self, history: list[str]) -> TokenDistribution:
        n = self.vocabulary.size
        for w in reversed(history):
            if w in self.vocabulary:
                row = self.counts[self.vocabulary.index(w)]
                return TokenDistribution(np.log((row + 1.0) / (row.sum() + n)))
        return TokenDistribution(np.log((self.unigrams + 1.0) / (self.unigrams.sum() + n)))

    def logits_with_context(self, bundle: PromptBundle) -> TokenDistribution:
        bundle.validate(self.vocabulary)
        history = _words(bundle.context_text) + _words(bundle.query_text) + self.vocabulary.decode(bundle.prefix)
        return self._row(history)

    def logits_without_context(self, bundle: PromptBundle) -> TokenDistribution:
        return self.logits_with_context(bundle.without_context())


# -- fixture files -------------------------------------------------------------


def _parse_floats(text: str, lineno: int, size: int | None = None) -> tuple[float, ...]:
    parts = text.split()
    try:
        if parts and all(p.startswith("#") for p in parts):
            if size is None:
                raise FixtureFormatError(f"line {lineno}: sparse row before vocab line")
            row = [0.0] * size
            for p in parts:
                idx, _, val = p[1:].partition("=")
                row[int(idx)] = float(val)
            values = tuple(row)
        else:
            values = tuple(float(v) for v in parts)
    except (ValueError, IndexError):
        raise FixtureFormatError(f"line {lineno}: bad logit value") from None
    if not all(math.isfinite(v) for v in values):
        raise FixtureFormatError(f"line {lineno}: non-finite logit")
    return values


def parse_model_fixture(text: str) -> TableModel | BigramModel:
    kind = None
    vocab: list[str] | None = None
    corpus: list[str] = []
    rules: list[TableRule] = []
    default = default_noctx = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(" ")
        if kind is None:
            if head != "model" or rest.strip() not in ("table", "bigram"):
                raise FixtureFormatError(f"line {lineno}: expected 'model table' or 'model bigram'")
            kind = rest.strip()
        elif head == "vocab":
            vocab = rest.split()
        elif head == "corpus" and kind == "bigram":
            corpus.append(rest)
        elif head == "default" and kind == "table":
            spec, sep, values = rest.rpartition(":")
            if not sep:
                raise FixtureFormatError(f"line {lineno}: missing ':'")
            row = _parse_floats(values, lineno, len(vocab) if vocab else None)
            if spec.strip() == "noctx":
                default_noctx = row
            elif spec.strip() in ("", "ctx", "any"):
                default = row
                if spec.strip() == "any":
                    default_noctx = row
            else:
                raise FixtureFormatError(f"line {lineno}: bad default channel {spec.strip()!r}")
        elif head == "rule" and kind == "table":
            spec, sep, values = rest.rpartition(":")
            if not sep:
                raise FixtureFormatError(f"line {lineno}: missing ':'")
            parts = spec.split()
            if not parts:
                raise FixtureFormatError(f"line {lineno}: rule needs a channel")
            kwargs: dict = {}
            for part in parts[1:]:
                key, eq, val = part.partition("=")
                if not eq:
                    raise FixtureFormatError(f"line {lineno}: bad rule condition {part!r}")
                if key == "at":
                    kwargs["at"] = int(val)
                elif key == "after":
                    kwargs["after"] = tuple(val.split(","))
                elif key in ("query", "context"):
                    kwargs[key] = val
                else:
                    raise FixtureFormatError(f"line {lineno}: unknown rule condition {key!r}")
            rules.append(TableRule(parts[0], _parse_floats(values, lineno, len(vocab) if vocab else None), **kwargs))
        else:
            raise FixtureFormatError(f"line {lineno}: unexpected directive {head!r}")
    if kind is None:
        raise FixtureFormatError("empty model fixture")
    if kind == "bigram":
        if not corpus:
            raise FixtureFormatError("bigram model needs at least one corpus line")
        return BigramModel(corpus, vocab)
    if vocab is None:
        raise FixtureFormatError("table model needs a vocab line")
    return TableModel(vocab, rules, default, default_noctx)


def load_model(path: str | Path) -> TableModel | BigramModel:
    return parse_model_fixture(Path(path).read_text(encoding="utf-8"))


def dump_table_model(model: TableModel) -> str:
    def row(values) -> str:
        nonzero = [(i, v) for i, v in enumerate(values) if v != 0.0]
        if nonzero and len(nonzero) * 4 < len(values):
            return " ".join(f"#{i}={float(v)!r}" for i, v in nonzero)
        return " ".join(repr(float(v)) for v in values)

    lines = ["model table", "vocab " + " ".join(model.vocabulary.tokens), f"default : {row(model.default)}"]
    if model.default_noctx != model.default:
        lines.append(f"default noctx : {row(model.default_noctx)}")
    for r in model.rules:
        conds = [r.channel]
        if r.at is not None:
            conds.append(f"at={r.at}")
        if r.after:
            conds.append("after=" + ",".join(r.after))
        if r.query is not None:
            conds.append(f"query={r.query}")
        if r.context is not None:
            conds.append(f"context={r.context}")
        lines.append(f"rule {' '.join(conds)} : {row(r.logits)}")
    return "\n".join(lines) + "\n"


# -- remote protocol -----------------------------------------------------------


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


def encode_request(bundle: PromptBundle, with_context: bool) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "context": bundle.context_text if with_context else None,
        "attachments": [base64.b64encode(a).decode("ascii") for a in bundle.context_attachments] if with_context else [],
        "query": bundle.query_text,
        "prefix": list(bundle.prefix),
    }


def decode_request(msg: dict) -> PromptBundle:
    return PromptBundle(
        context_text=msg.get("context") or "",
        query_text=msg.get("query", ""),
        prefix=tuple(msg.get("prefix", ())),
        context_attachments=tuple(base64.b64decode(a) for a in msg.get("attachments") or ()),
    )


class _Connection:
    def __init__(self, host: str, port: int, timeout: float) -> None:
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BackendUnreachable(f"cannot reach {host}:{port}: {exc}") from exc
        self.reader = self.sock.makefile("rb")
        self.lock = threading.Lock()

    def call(self, msg: dict) -> dict:
        data = (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")
        with self.lock:
            try:
                self.sock.sendall(data)
                line = self.reader.readline()
            except OSError as exc:
                raise BackendUnreachable(str(exc)) from exc
        if not line:
            raise BackendUnreachable("connection closed by backend")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response: {exc}") from exc
        if not isinstance(resp, dict) or resp.get("v") != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version mismatch: expected {PROTOCOL_VERSION}, got {resp.get('v') if isinstance(resp, dict) else resp!r}")
        if "error" in resp:
            raise BackendError(resp["error"])
        return resp

    def close(self) -> None:
        self.reader.close()
        self.sock.close()


def remote_backend_handshake(address: str, timeout: float = 10.0) -> Vocabulary:
    conn = _Connection(*parse_address(address), timeout)
    try:
        return _vocab_from(conn.call({"v": PROTOCOL_VERSION, "op": "vocab"}))
    finally:
        conn.close()


def _vocab_from(resp: dict) -> Vocabulary:
    tokens = resp.get("tokens")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise ProtocolError("handshake response lacks a token list")
    try:
        return Vocabulary(tuple(tokens))
    except ValueError as exc:
        raise VocabularyMismatch(str(exc)) from exc


class RemoteBackend:
    """Client for a logit server speaking the newline-delimited JSON protocol.

    Requests on one instance are serialized over a single connection; open
    several instances for parallel sessions.
    """

    def __init__(self, address: str, timeout: float = 30.0) -> None:
        self.address = address
        self._conn = _Connection(*parse_address(address), timeout)
        self.vocabulary = _vocab_from(self._conn.call({"v": PROTOCOL_VERSION, "op": "vocab"}))

    def _logits(self, bundle: PromptBundle, with_context: bool) -> TokenDistribution:
        bundle.validate(self.vocabulary)
        resp = self._conn.call(encode_request(bundle, with_context))
        logits = resp.get("logits")
        if not isinstance(logits, list):
            raise ProtocolError("response lacks logits")
        if len(logits) != self.vocabulary.size:
            raise VocabularyMismatch(f"backend returned {len(logits)} logits for vocabulary of {self.vocabulary.size}")
        try:
            return TokenDistribution(np.array(logits, dtype=np.float64))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc

    def logits_with_context(self, bundle: PromptBundle) -> TokenDistribution:
        if not bundle.has_context:
            return self._logits(bundle, False)
        return self._logits(bundle, True)

    def logits_without_context(self, bundle: PromptBundle) -> TokenDistribution:
        return self._logits(bundle, False)

    def detokenize(self, ids: Sequence[int]) -> str:
        try:
            resp = self._conn.call({"v": PROTOCOL_VERSION, "op": "detokenize", "tokens": list(ids)})
        except BackendError:
            return " ".join(self.vocabulary.decode(ids))
        text = resp.get("text")
        return text if isinstance(text, str) else " ".join(self.vocabulary.decode(ids))

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> RemoteBackend:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class _ServerState:
    backend: LogitSource
    embedder: object | None = None
    extra: dict = field(default_factory=dict)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        state: _ServerState = self.server.state  # type: ignore[attr-defined]
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                resp = _dispatch(state, json.loads(line))
            except Exception as exc:  # errors travel back over the wire
                resp = {"v": PROTOCOL_VERSION, "error": f"{type(exc).__name__}: {exc}"}
            self.wfile.write((json.dumps(resp, separators=(",", ":")) + "\n").encode("utf-8"))
            self.wfile.flush()


def _dispatch(state: _ServerState, msg: dict) -> dict:
    if msg.get("v") != PROTOCOL_VERSION:
        return {"v": PROTOCOL_VERSION, "error": f"protocol version mismatch: expected {PROTOCOL_VERSION}"}
    op = msg.get("op")
    if op == "vocab":
        return {"v": PROTOCOL_VERSION, "tokens": list(state.backend.vocabulary.tokens)}
    if op == "detokenize":
        return {"v": PROTOCOL_VERSION, "text": " ".join(state.backend.vocabulary.decode(msg["tokens"]))}
    if op == "embed":
        if state.embedder is None:
            return {"v": PROTOCOL_VERSION, "error": "no embedder configured"}
        return {"v": PROTOCOL_VERSION, "embedding": [float(x) for x in state.embedder(msg["text"])]}
    if op is not None:
        return {"v": PROTOCOL_VERSION, "error": f"unknown op {op!r}"}
    bundle = decode_request(msg)
    if msg.get("context") is None:
        dist = state.backend.logits_without_context(bundle)
    else:
        dist = state.backend.logits_with_context(bundle)
    return {"v": PROTOCOL_VERSION, "logits": [float(x) for x in dist.logits]}


class LogitServer(socketserver.ThreadingTCPServer):
    """Serve any local backend over the wire protocol (also used as a test double)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, backend: LogitSource, address: tuple[str, int] = ("127.0.0.1", 0), embedder=None) -> None:
        super().__init__(address, _Handler)
        self.state = _ServerState(backend, embedder)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
