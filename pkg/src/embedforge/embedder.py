"""Deterministic hashed n-gram bi-encoder.

The encoder is intentionally tiny and fully linear: hashed byte n-grams are
looked up in a token table, mean-pooled, projected, and L2-normalized. Text
is first wrapped by its role prefix ("query: " / "passage: ") or by the
instruction template, so the same machinery serves plain and
instruction-conditioned encoding.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import InstructionOnPassage, ZeroVector

QUERY_PREFIX = "query: "
PASSAGE_PREFIX = "passage: "
# Template applied when a query carries a task instruction.
INSTRUCTION_TEMPLATE = "Instruct: {instruction}\nQuery: {text}"

ROLE_QUERY = "query"
ROLE_PASSAGE = "passage"
ROLE_SYMMETRIC = "symmetric"
_ROLES = (ROLE_QUERY, ROLE_PASSAGE, ROLE_SYMMETRIC)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

# Default (vocab buckets, pooled width, output dimension) per size class.
SIZE_DEFAULTS = {
    "small": (4096, 64, 128),
    "base": (8192, 96, 192),
    "large": (16384, 128, 256),
}


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """Seeded 64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET ^ (seed & _U64)
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class TokenizerConfig:
    """Hashed byte n-gram tokenizer settings."""

    n_gram_sizes: tuple[int, ...] = (3, 4)
    vocab_size: int = 4096
    hash_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not self.n_gram_sizes or any(n < 1 for n in self.n_gram_sizes):
            raise ValueError(f"n_gram_sizes must be nonempty with entries >= 1: {self.n_gram_sizes}")
        object.__setattr__(self, "n_gram_sizes", tuple(sorted(set(self.n_gram_sizes))))


@dataclass(frozen=True)
class InputRole:
    """Encoding role plus optional task instruction (queries only)."""

    role: str
    instruction: str | None = None

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.instruction is not None and self.role != ROLE_QUERY:
            raise InstructionOnPassage(
                f"instruction is only permitted with role={ROLE_QUERY!r}, got {self.role!r}"
            )


QUERY = InputRole(ROLE_QUERY)
PASSAGE = InputRole(ROLE_PASSAGE)
SYMMETRIC = InputRole(ROLE_SYMMETRIC)


def format_input(role: InputRole, text: str) -> str:
    """Apply the role prefix or instruction template to raw text."""
    if role.instruction is not None:
        if role.role != ROLE_QUERY:
            raise InstructionOnPassage("instruction is only permitted on queries")
        return INSTRUCTION_TEMPLATE.format(instruction=role.instruction, text=text)
    if role.role == ROLE_PASSAGE:
        return PASSAGE_PREFIX + text
    return QUERY_PREFIX + text


def _window_hashes(data: np.ndarray, n: int, seed: int) -> np.ndarray:
    """FNV-1a hashes of all length-n byte windows (vectorized over windows)."""
    count = data.size - n + 1
    h = np.full(count, np.uint64(_FNV_OFFSET ^ (seed & _U64)), dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    for j in range(n):
        h ^= data[j : j + count]
        h *= prime
    return h


@lru_cache(maxsize=65536)
def tokenize(cfg: TokenizerConfig, text: str) -> tuple[int, ...]:
    """Hashed byte n-gram ids in text order, smaller n first at each position."""
    raw = text.encode("utf-8")
    if not raw:
        return ()
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.uint64)
    vocab = np.uint64(cfg.vocab_size)
    per_size = [
        (n, _window_hashes(data, n, cfg.hash_seed) % vocab)
        for n in cfg.n_gram_sizes
        if n <= data.size
    ]
    ids: list[int] = []
    for pos in range(data.size):
        for n, hashed in per_size:
            if pos < hashed.size:
                ids.append(int(hashed[pos]))
    return tuple(ids)


@dataclass
class EmbeddingModel:
    """Tokenizer config plus the two trainable float32 tensors.

    token_table is (vocab_size, hidden); projection is (hidden, dim). Row 0
    of the token table doubles as the pooled fallback for token-less input.
    """

    tokenizer: TokenizerConfig
    token_table: np.ndarray
    projection: np.ndarray
    size_class: str = "small"

    def __post_init__(self):
        if self.token_table.shape[0] != self.tokenizer.vocab_size:
            raise ValueError(
                f"token_table rows {self.token_table.shape[0]} != vocab_size "
                f"{self.tokenizer.vocab_size}"
            )
        if self.token_table.shape[1] != self.projection.shape[0]:
            raise ValueError("token_table width and projection height disagree")
        if self.projection.shape[1] < 2:
            raise ValueError("output dimension must be >= 2")
        for name in ("token_table", "projection"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def hidden_dim(self) -> int:
        return self.token_table.shape[1]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"token_table": self.token_table, "projection": self.projection}


def init_model(
    size_class: str = "small",
    seed: int = 0,
    tokenizer: TokenizerConfig | None = None,
    hidden_dim: int | None = None,
    output_dim: int | None = None,
) -> EmbeddingModel:
    """Freshly initialized model, uniform in [-1/sqrt(h), 1/sqrt(h)]."""
    if size_class not in SIZE_DEFAULTS:
        raise ValueError(f"size_class must be one of {sorted(SIZE_DEFAULTS)}, got {size_class!r}")
    vocab, hidden, dim = SIZE_DEFAULTS[size_class]
    if tokenizer is None:
        tokenizer = TokenizerConfig(vocab_size=vocab)
    hidden = hidden if hidden_dim is None else hidden_dim
    dim = dim if output_dim is None else output_dim
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)
    token_table = rng.uniform(-bound, bound, (tokenizer.vocab_size, hidden)).astype(np.float32)
    projection = rng.uniform(-bound, bound, (hidden, dim)).astype(np.float32)
    return EmbeddingModel(tokenizer, token_table, projection, size_class)


def widened(model: EmbeddingModel) -> tuple[np.ndarray, np.ndarray]:
    """Float64 views of the parameters, cached until the arrays are replaced.

    Training swaps in fresh arrays each step (never mutates in place), so
    identity of the float32 arrays is a sound cache key.
    """
    cache = getattr(model, "_wide_cache", None)
    table, proj = model.token_table, model.projection
    if cache is not None and cache[0] is table and cache[1] is proj:
        return cache[2], cache[3]
    t64, p64 = table.astype(np.float64), proj.astype(np.float64)
    model._wide_cache = (table, proj, t64, p64)
    return t64, p64


@dataclass
class ForwardPass:
    """Intermediate activations kept for analytic backpropagation."""

    ids: list[tuple[int, ...]]
    pooling: sparse.csr_matrix  # (n, vocab) mean-pooling weights
    pooled: np.ndarray          # (n, hidden) float64
    projected: np.ndarray       # (n, dim) float64, pre-normalization
    norms: np.ndarray           # (n,)
    embeddings: np.ndarray      # (n, dim) unit rows


def forward_batch(
    model: EmbeddingModel,
    role: InputRole | Sequence[InputRole],
    texts: Sequence[str],
) -> ForwardPass:
    """Encode texts keeping intermediates. Arithmetic is float64 throughout.

    role is either one InputRole for every text or one per text (used for
    instruction-conditioned batches). Every stage is row-independent
    (sparse pooling rows, per-row projection), so results do not depend on
    batch composition or worker count.
    """
    table, proj = widened(model)
    n = len(texts)
    roles = list(role) if isinstance(role, (list, tuple)) else [role] * n
    if len(roles) != n:
        raise ValueError(f"{len(roles)} roles for {n} texts")
    ids_list: list[tuple[int, ...]] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for i, text in enumerate(texts):
        ids = tokenize(model.tokenizer, format_input(roles[i], text))
        ids_list.append(ids)
        if ids:
            weight = 1.0 / len(ids)
            rows.extend([i] * len(ids))
            cols.extend(ids)
            vals.extend([weight] * len(ids))
        else:
            rows.append(i)
            cols.append(0)
            vals.append(1.0)
    pooling = sparse.csr_matrix(
        (np.asarray(vals), (np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))),
        shape=(n, model.tokenizer.vocab_size),
    )
    pooled = pooling @ table
    projected = np.empty((n, proj.shape[1]))
    for i in range(n):
        projected[i] = pooled[i] @ proj
    norms = np.sqrt(np.einsum("ij,ij->i", projected, projected))
    if np.any(norms == 0.0):
        raise ZeroVector("encoder produced a zero vector; model parameters are degenerate")
    embeddings = projected / norms[:, None]
    return ForwardPass(ids_list, pooling, pooled, projected, norms, embeddings)


def encode(model: EmbeddingModel, role: InputRole, text: str) -> np.ndarray:
    """Unit-norm float64 embedding of one text."""
    return forward_batch(model, role, [text]).embeddings[0]


def encode_batch(
    model: EmbeddingModel,
    role: InputRole,
    texts: Sequence[str],
    workers: int = 1,
) -> np.ndarray:
    """Encode many texts; elementwise identical to encode() in any worker count."""
    texts = list(texts)
    if not texts:
        return np.empty((0, model.output_dim))
    if workers <= 1 or len(texts) <= 64:
        return forward_batch(model, role, texts).embeddings
    chunks = [texts[i : i + 64] for i in range(0, len(texts), 64)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: forward_batch(model, role, c).embeddings, chunks))
    return np.concatenate(parts, axis=0)
