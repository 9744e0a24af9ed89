"""Convolutional substitute detector: P(benign) for a token sequence."""

import logging
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import EmbeddingMatrix
from .packet_model import TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS = (3, 4, 5)
DEFAULT_FILTERS = 64
DEFAULT_BATCH = 64
DISC_LR = 1e-3


class DiscriminatorError(ValueError):
    pass


class PacketDiscriminator(nn.Module):
    """One convolution bank per window size, max-over-time pooling, linear head, sigmoid."""

    def __init__(
        self,
        embed_dim: int,
        windows: Sequence[int] = DEFAULT_WINDOWS,
        filters: int = DEFAULT_FILTERS,
        dropout: float = 0.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if not windows or min(windows) < 1:
            raise DiscriminatorError(f"window sizes must be >= 1, got {list(windows)}")
        if not 0.0 <= dropout < 1.0:
            raise DiscriminatorError(f"dropout must be in [0, 1), got {dropout}")
        self.embed_dim = int(embed_dim)
        self.windows = tuple(int(w) for w in windows)
        self.filters = int(filters)
        self.dropout = float(dropout)
        rng = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        self.convs = nn.ModuleList(
            nn.Conv1d(self.embed_dim, self.filters, w, dtype=dtype) for w in self.windows
        )
        self.head = nn.Linear(len(self.windows) * self.filters, 1, dtype=dtype)
        with torch.no_grad():
            for layer in [*self.convs, self.head]:
                bound = 1.0 / math.sqrt(layer.weight[0].numel())
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=rng, dtype=dtype) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=rng, dtype=dtype) * 2 - 1) * bound)
        self.dropout_rng = torch.Generator().manual_seed((int(seed) ^ 0xD50F) & 0x7FFFFFFFFFFFFFFF)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    @property
    def min_length(self) -> int:
        return max(self.windows)

    def pooled_features(self, embedded: torch.Tensor) -> torch.Tensor:
        x = embedded.transpose(1, 2)
        return torch.cat([torch.relu(conv(x)).amax(dim=2) for conv in self.convs], dim=1)

    def forward(self, embedded: torch.Tensor) -> torch.Tensor:
        """Logits (N,) for embedded sequences (N, T, d)."""
        if embedded.shape[1] < self.min_length:
            raise DiscriminatorError(f"sequence of {embedded.shape[1]} tokens is shorter than window {self.min_length}")
        features = self.pooled_features(embedded)
        if self.training and self.dropout > 0.0:
            keep = torch.rand(features.shape, generator=self.dropout_rng, dtype=features.dtype) >= self.dropout
            features = features * keep / (1.0 - self.dropout)
        return self.head(features).squeeze(1)

    def logits(self, tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
        return self(table.to(self.dtype)[tokens])

    def benign_probability(self, tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(tokens, table))

    def state_tensors(self, prefix: str = "disc/") -> dict:
        return {prefix + name: p.detach().cpu().numpy() for name, p in self.named_parameters()}

    def load_state_tensors(self, tensors: dict, prefix: str = "disc/") -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                key = prefix + name
                if key not in tensors:
                    raise DiscriminatorError(f"checkpoint is missing tensor {key}")
                value = torch.as_tensor(np.asarray(tensors[key]), dtype=p.dtype)
                if value.shape != p.shape:
                    raise DiscriminatorError(f"{key}: checkpoint shape {tuple(value.shape)} != {tuple(p.shape)}")
                p.copy_(value)


def _table(emb: EmbeddingMatrix | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(emb, EmbeddingMatrix):
        return emb.as_tensor(dtype)
    return torch.as_tensor(emb, dtype=dtype)


def _tokens(sequences) -> torch.Tensor:
    if isinstance(sequences, torch.Tensor):
        return sequences.long()
    if isinstance(sequences, np.ndarray):
        return torch.from_numpy(sequences.astype(np.int64))
    if not len(sequences):
        return torch.zeros(0, 0, dtype=torch.long)
    return torch.from_numpy(np.stack([seq.tokens for seq in sequences]))


def discriminate(disc: PacketDiscriminator, seq: TokenSequence, emb: EmbeddingMatrix | torch.Tensor) -> float:
    table = _table(emb, disc.dtype)
    with torch.no_grad():
        was_training = disc.training
        disc.eval()
        try:
            return float(disc.benign_probability(torch.from_numpy(seq.tokens.copy())[None, :], table)[0])
        finally:
            disc.train(was_training)


def discriminator_loss(
    disc: PacketDiscriminator,
    table: torch.Tensor,
    benign: torch.Tensor,
    malicious: torch.Tensor,
) -> torch.Tensor:
    """-sum log D(x) over benign x minus sum log(1 - D(y)) over malicious y."""
    loss = torch.zeros((), dtype=disc.dtype)
    if benign.shape[0]:
        loss = loss - F.logsigmoid(disc.logits(benign, table)).sum()
    if malicious.shape[0]:
        loss = loss - F.logsigmoid(-disc.logits(malicious, table)).sum()
    return loss


def make_optimizer(disc: PacketDiscriminator, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.9, 0.999))


def train_discriminator(
    disc: PacketDiscriminator,
    benign_set,
    malicious_set,
    emb: EmbeddingMatrix | torch.Tensor,
    epochs: int,
    lr: float = DISC_LR,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[float]:
    """Minimize the benign/malicious cross-entropy with class-balanced minibatches.

    Returns the full-set loss measured at the end of every epoch.
    """
    benign = _tokens(benign_set)
    malicious = _tokens(malicious_set)
    if not benign.shape[0] or not malicious.shape[0]:
        raise DiscriminatorError(
            f"discriminator training needs both classes, got benign={benign.shape[0]} malicious={malicious.shape[0]}"
        )
    table = _table(emb, disc.dtype)
    optimizer = optimizer or make_optimizer(disc, lr)
    rng = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    disc.dropout_rng.manual_seed((int(seed) ^ 0xD50F) & 0x7FFFFFFFFFFFFFFF)
    half = max(batch_size // 2, 1)
    n_batches = math.ceil(max(benign.shape[0], malicious.shape[0]) / half)
    trace = []
    for epoch in range(int(epochs)):
        disc.train()
        order_benign = torch.randperm(benign.shape[0], generator=rng)
        order_malicious = torch.randperm(malicious.shape[0], generator=rng)
        for b in range(n_batches):
            slots = torch.arange(b * half, (b + 1) * half)
            batch_benign = benign[order_benign[slots % benign.shape[0]]]
            batch_malicious = malicious[order_malicious[slots % malicious.shape[0]]]
            optimizer.zero_grad()
            loss = discriminator_loss(disc, table, batch_benign, batch_malicious)
            loss.backward()
            optimizer.step()
        disc.eval()
        with torch.no_grad():
            trace.append(float(discriminator_loss(disc, table, benign, malicious)))
        logger.info("Discriminator epoch %d/%d loss=%.5f", epoch + 1, epochs, trace[-1])
    disc.eval()
    return trace
