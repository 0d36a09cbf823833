"""Exhaustive top-k cosine retrieval over agreement-clause embeddings."""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .domain import AgreementClause

DEFAULT_K = 5
HASH_DIM = 64


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise RetrievalError("embedding must have positive dimension")
        if not np.all(np.isfinite(arr)):
            raise RetrievalError("embedding has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EmbeddingVector) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


def _norm_text(text: str) -> str:
    return re.sub(r"\s+", " ", unicodedata.normalize("NFC", text)).strip()


class HashEmbeddingProvider:
    """Deterministic test provider: a seeded pseudo-random unit vector per text."""

    def __init__(self, dim: int = HASH_DIM):
        self.dim = dim
        self.provider_id = f"hash-{dim}"

    def embed(self, text: str) -> EmbeddingVector:
        norm = _norm_text(text)
        if not norm:
            raise RetrievalError("cannot embed empty text")
        seed = int.from_bytes(hashlib.sha256(norm.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return EmbeddingVector(v / np.linalg.norm(v))


class HttpEmbeddingProvider:
    """OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str = "", dim: int | None = None,
                 client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.dim = dim or 0
        self.provider_id = f"http:{model}"
        self._client = client or httpx.Client(timeout=60.0)

    @classmethod
    def from_env(cls, profile: str) -> HttpEmbeddingProvider:
        prefix = f"COALNEG_{profile.upper().replace('-', '_')}_"
        try:
            return cls(os.environ[prefix + "BASE_URL"], os.environ[prefix + "EMBED_MODEL"],
                       os.environ.get(prefix + "API_KEY", ""))
        except KeyError as exc:
            raise RetrievalError(f"embedding profile {profile!r} missing {exc.args[0]}") from None

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise RetrievalError("cannot embed empty text")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(f"{self.base_url}/embeddings",
                                     json={"model": self.model, "input": text}, headers=headers)
            resp.raise_for_status()
            vec = EmbeddingVector(resp.json()["data"][0]["embedding"])
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise RetrievalError(f"embedding request failed: {exc}") from exc
        if self.dim and vec.dim != self.dim:
            raise RetrievalError(f"provider returned dim {vec.dim}, expected {self.dim}")
        self.dim = vec.dim
        return vec


def embed(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    return provider.embed(text)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise RetrievalError(f"dimension mismatch: {a.dim} vs {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise RetrievalError("cosine of a zero-norm vector is undefined")
    value = float(np.dot(a.values, b.values)) / (na * nb)
    return min(1.0, max(-1.0, value))


class ClauseIndex:
    """Immutable id → vector store; rows share one dimension."""

    def __init__(self, entries: Iterable[tuple[str, EmbeddingVector]], provider_id: str = ""):
        ids: list[str] = []
        rows: list[np.ndarray] = []
        for cid, vec in entries:
            if cid in ids:
                raise RetrievalError(f"duplicate clause id {cid!r}")
            if rows and vec.dim != rows[0].shape[0]:
                raise RetrievalError(f"clause {cid!r} has dim {vec.dim}, index has {rows[0].shape[0]}")
            ids.append(cid)
            rows.append(vec.values)
        self.ids: tuple[str, ...] = tuple(ids)
        self.provider_id = provider_id
        self.matrix = np.vstack(rows) if rows else np.zeros((0, 0))
        self.matrix.setflags(write=False)
        self._norms = np.linalg.norm(self.matrix, axis=1) if rows else np.zeros(0)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1]) if len(self.ids) else 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> list[tuple[str, EmbeddingVector]]:
        return [(cid, EmbeddingVector(row)) for cid, row in zip(self.ids, self.matrix)]

    def vector(self, clause_id: str) -> EmbeddingVector:
        return EmbeddingVector(self.matrix[self.ids.index(clause_id)])

    def scaled(self, factor: float) -> ClauseIndex:
        return ClauseIndex(((cid, EmbeddingVector(v.values * factor)) for cid, v in self.entries),
                           self.provider_id)

    def save(self, path: str | os.PathLike) -> Path:
        """Binary record file: JSON header line, then (id, float64 vector) records."""
        path = Path(path)
        header = {"format": "coalneg-clause-index", "version": 1, "dim": self.dim,
                  "provider_id": self.provider_id, "count": len(self)}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            for cid, row in zip(self.ids, self.matrix):
                raw = cid.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(np.asarray(row, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> ClauseIndex:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            if header.get("format") != "coalneg-clause-index":
                raise RetrievalError(f"{path}: not a clause index file")
            dim, count = int(header["dim"]), int(header["count"])
            entries = []
            for _ in range(count):
                head = fh.read(4)
                if len(head) < 4:
                    raise RetrievalError(f"{path}: expected {count} records, found {len(entries)}")
                (n,) = struct.unpack("<I", head)
                cid = fh.read(n).decode("utf-8")
                raw = fh.read(8 * dim)
                if len(raw) != 8 * dim:
                    raise RetrievalError(f"{path}: truncated record for {cid!r}")
                entries.append((cid, EmbeddingVector(np.frombuffer(raw, dtype="<f8"))))
        return cls(entries, header.get("provider_id", ""))


def build_index(clauses: Sequence[AgreementClause], provider: EmbeddingProvider) -> ClauseIndex:
    return ClauseIndex(((c.id, provider.embed(c.text)) for c in clauses), provider.provider_id)


def top_k(query: EmbeddingVector, index: ClauseIndex, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    """The ``min(k, len(index))`` best clauses by cosine, ties broken by ascending id."""
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("cannot query an empty index")
    if query.dim != index.dim:
        raise RetrievalError(f"dimension mismatch: query {query.dim} vs index {index.dim}")
    qn = float(np.linalg.norm(query.values))
    if qn == 0.0 or np.any(index._norms == 0.0):
        raise RetrievalError("cosine of a zero-norm vector is undefined")
    scores = np.clip((index.matrix @ query.values) / (index._norms * qn), -1.0, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]
