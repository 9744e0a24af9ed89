"""Skip-gram token embeddings over packet corpora."""

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .packet_model import Granularity, TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_DIM = 32
DEFAULT_WINDOW = 2
NEGATIVE_SAMPLES = 5
MONITOR_PAIRS = 4096


class EmbeddingError(ValueError):
    pass


@dataclass
class SkipGramModel:
    w_hidden: torch.Tensor
    w_out: torch.Tensor
    window: int
    granularity: Granularity
    loss_history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.w_hidden.shape[1])

    @property
    def vocab_size(self) -> int:
        return int(self.w_hidden.shape[0])

    def predict_context(self, center: int) -> torch.Tensor:
        """softmax(W_out^T . W_h^T . onehot(center)): distribution over context tokens."""
        with torch.no_grad():
            return torch.softmax(self.w_hidden[center] @ self.w_out, dim=-1)

    def embedding(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.w_hidden.detach().cpu().numpy().copy(), self.granularity)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    table: np.ndarray
    granularity: Granularity

    def __post_init__(self):
        source = np.asarray(self.table)
        table = np.array(source, dtype=np.float64 if source.dtype == np.float64 else np.float32)
        if table.ndim != 2:
            raise EmbeddingError(f"embedding table must be 2-d, got shape {table.shape}")
        if not np.all(np.isfinite(table)):
            raise EmbeddingError("embedding table has non-finite entries")
        table.flags.writeable = False
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    @property
    def vocab_size(self) -> int:
        return int(self.table.shape[0])

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.table, dtype=dtype)


def build_training_pairs(corpus: Sequence[TokenSequence], window: int) -> Iterator[tuple[int, int]]:
    if window < 1:
        raise EmbeddingError(f"window must be >= 1, got {window}")
    for seq in corpus:
        tokens = seq.tokens
        length = len(tokens)
        for t in range(length):
            for j in range(-window, window + 1):
                if j == 0 or not 0 <= t + j < length:
                    continue
                yield int(tokens[t]), int(tokens[t + j])


def training_pair_arrays(tokens: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pairs over an (N, T) token matrix; same multiset as build_training_pairs."""
    if window < 1:
        raise EmbeddingError(f"window must be >= 1, got {window}")
    tokens = np.asarray(tokens, dtype=np.int64)
    centers, contexts = [], []
    for j in range(1, window + 1):
        if j >= tokens.shape[1]:
            break
        left, right = tokens[:, :-j].reshape(-1), tokens[:, j:].reshape(-1)
        centers.extend([left, right])
        contexts.extend([right, left])
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def pair_count(length: int, window: int) -> int:
    w = min(window, max(length - 1, 0))
    return 2 * w * length - w * (w + 1)


def skipgram_loss(w_hidden: torch.Tensor, w_out: torch.Tensor, centers: torch.Tensor, contexts: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of context tokens under the full softmax."""
    logits = w_hidden[centers] @ w_out
    return F.cross_entropy(logits, contexts)


def negative_sampling_loss(
    w_hidden: torch.Tensor,
    w_out: torch.Tensor,
    centers: torch.Tensor,
    contexts: torch.Tensor,
    negatives: torch.Tensor,
) -> torch.Tensor:
    hidden = w_hidden[centers]
    positive = (hidden * w_out[:, contexts].T).sum(-1)
    negative = torch.einsum("bd,dbk->bk", hidden, w_out[:, negatives])
    return -(F.logsigmoid(positive) + F.logsigmoid(-negative).sum(-1)).mean()


def _unigram_table(tokens: np.ndarray, vocab_size: int) -> torch.Tensor:
    counts = np.bincount(tokens.reshape(-1), minlength=vocab_size).astype(np.float64)
    weights = counts ** 0.75
    return torch.tensor(weights / weights.sum(), dtype=torch.float64)


def train_skipgram(
    corpus: Sequence[TokenSequence] | np.ndarray,
    d: int = DEFAULT_DIM,
    window: int = DEFAULT_WINDOW,
    epochs: int = 5,
    lr: float = 0.01,
    seed: int = 0,
    granularity: Granularity | None = None,
    batch_size: int = 1024,
    negatives: int = NEGATIVE_SAMPLES,
    dtype: torch.dtype = torch.float32,
) -> SkipGramModel:
    """Train W_h (V x d) and W_out (d x V); full softmax for one_byte, negative sampling for two_byte."""
    if isinstance(corpus, np.ndarray):
        if granularity is None:
            raise EmbeddingError("granularity is required when the corpus is a token matrix")
        tokens = corpus.astype(np.int64)
        granularity = Granularity(granularity)
    else:
        if not len(corpus):
            raise EmbeddingError("skip-gram training needs a nonempty corpus")
        granularity = Granularity(granularity or corpus[0].granularity)
        if any(seq.granularity is not granularity for seq in corpus):
            raise EmbeddingError("corpus mixes token granularities")
        lengths = {len(seq) for seq in corpus}
        if len(lengths) == 1:
            tokens = np.stack([seq.tokens for seq in corpus])
        else:
            tokens = None
    if d < 1:
        raise EmbeddingError(f"embedding dimension must be >= 1, got {d}")
    vocab_size = granularity.vocab_size

    if tokens is not None:
        if tokens.size == 0:
            raise EmbeddingError("skip-gram training needs a nonempty corpus")
        if tokens.min() < 0 or tokens.max() >= vocab_size:
            raise EmbeddingError(f"corpus token outside vocabulary of size {vocab_size}")
        centers, contexts = training_pair_arrays(tokens, window)
        flat_tokens = tokens
    else:
        pairs = list(build_training_pairs(corpus, window))
        flat_tokens = np.concatenate([seq.tokens for seq in corpus])
        if flat_tokens.max() >= vocab_size:
            raise EmbeddingError(f"corpus token outside vocabulary of size {vocab_size}")
        centers = np.array([c for c, _ in pairs], dtype=np.int64)
        contexts = np.array([x for _, x in pairs], dtype=np.int64)

    generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    bound = 0.5 / d
    w_hidden = (torch.rand(vocab_size, d, generator=generator, dtype=dtype) * 2 - 1) * bound
    w_out = (torch.rand(d, vocab_size, generator=generator, dtype=dtype) * 2 - 1) * bound
    model = SkipGramModel(w_hidden, w_out, window, granularity)
    if centers.size == 0:
        logger.warning("Skip-gram corpus yields no training pairs; returning initialized model")
        return model

    w_hidden.requires_grad_(True)
    w_out.requires_grad_(True)
    optimizer = torch.optim.Adam([w_hidden, w_out], lr=lr)
    centers_t = torch.from_numpy(centers)
    contexts_t = torch.from_numpy(contexts)
    full_softmax = granularity is Granularity.ONE_BYTE
    noise = None if full_softmax else _unigram_table(flat_tokens, vocab_size)

    monitor = torch.randperm(centers_t.shape[0], generator=generator)[:MONITOR_PAIRS]

    def monitored_loss() -> float:
        with torch.no_grad():
            if full_softmax:
                return float(skipgram_loss(w_hidden, w_out, centers_t[monitor], contexts_t[monitor]))
            sampled = torch.multinomial(
                noise, monitor.shape[0] * negatives, replacement=True,
                generator=torch.Generator().manual_seed(int(seed) ^ 0x5EED),
            ).view(-1, negatives)
            return float(negative_sampling_loss(w_hidden, w_out, centers_t[monitor], contexts_t[monitor], sampled))

    for epoch in range(int(epochs)):
        order = torch.randperm(centers_t.shape[0], generator=generator)
        for start in range(0, order.shape[0], batch_size):
            batch = order[start:start + batch_size]
            optimizer.zero_grad()
            if full_softmax:
                loss = skipgram_loss(w_hidden, w_out, centers_t[batch], contexts_t[batch])
            else:
                sampled = torch.multinomial(noise, batch.shape[0] * negatives, replacement=True, generator=generator)
                loss = negative_sampling_loss(
                    w_hidden, w_out, centers_t[batch], contexts_t[batch], sampled.view(-1, negatives)
                )
            loss.backward()
            optimizer.step()
        model.loss_history.append(monitored_loss())
        logger.info("Skip-gram epoch %d/%d loss=%.5f", epoch + 1, epochs, model.loss_history[-1])

    model.w_hidden = w_hidden.detach()
    model.w_out = w_out.detach()
    return model


def embed_sequence(seq: TokenSequence, emb: EmbeddingMatrix) -> np.ndarray:
    if seq.granularity is not emb.granularity:
        raise EmbeddingError(
            f"granularity mismatch: sequence is {seq.granularity.value}, table is {emb.granularity.value}"
        )
    return emb.table[seq.tokens]
