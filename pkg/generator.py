"""LSTM packet policy: sampling under constraint masks, MLE pretraining and policy-gradient updates."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .embedding import EmbeddingMatrix
from .packet_model import ConstraintMask, Granularity, TokenSequence, stack_masks
from .utils import counter_uniforms

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 64
MLE_LR = 1e-3
PG_LR = 1e-4
ADAM_BETAS = (0.9, 0.999)
GATES = ("f", "i", "c", "o")


class GeneratorError(ValueError):
    pass


class PacketGenerator(nn.Module):
    """Gate weights act on the concatenation [x_t; h_{t-1}]."""

    def __init__(
        self,
        vocab_size: int,
        embed_dim: int,
        hidden: int = DEFAULT_HIDDEN,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.vocab_size = int(vocab_size)
        self.embed_dim = int(embed_dim)
        self.hidden = int(hidden)
        rng = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)

        def normal(*shape) -> nn.Parameter:
            return nn.Parameter(torch.randn(*shape, generator=rng, dtype=dtype) * 0.1)

        fan_in = self.embed_dim + self.hidden
        self.W_f = normal(self.hidden, fan_in)
        self.W_i = normal(self.hidden, fan_in)
        self.W_c = normal(self.hidden, fan_in)
        self.W_o = normal(self.hidden, fan_in)
        self.b_f = nn.Parameter(torch.zeros(self.hidden, dtype=dtype))
        self.b_i = nn.Parameter(torch.zeros(self.hidden, dtype=dtype))
        self.b_c = nn.Parameter(torch.zeros(self.hidden, dtype=dtype))
        self.b_o = nn.Parameter(torch.zeros(self.hidden, dtype=dtype))
        self.out_weight = normal(self.vocab_size, self.hidden)
        self.out_bias = nn.Parameter(torch.zeros(self.vocab_size, dtype=dtype))
        self.start = normal(self.embed_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.W_f.dtype

    def state_tensors(self, prefix: str = "gen/") -> dict:
        return {prefix + name: p.detach().cpu().numpy() for name, p in self.named_parameters()}

    def load_state_tensors(self, tensors: dict, prefix: str = "gen/") -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                key = prefix + name
                if key not in tensors:
                    raise GeneratorError(f"checkpoint is missing tensor {key}")
                value = torch.as_tensor(np.asarray(tensors[key]), dtype=p.dtype)
                if value.shape != p.shape:
                    raise GeneratorError(f"{key}: checkpoint shape {tuple(value.shape)} != {tuple(p.shape)}")
                p.copy_(value)


@dataclass
class GeneratorState:
    h: torch.Tensor
    c: torch.Tensor
    t: int
    prefix: torch.Tensor


@dataclass(frozen=True, eq=False)
class PolicySample:
    tokens: TokenSequence
    step_logprobs: np.ndarray
    masked_flags: np.ndarray


@dataclass
class PolicyBatch:
    """A batch of sampled sequences, all (B, T)."""

    tokens: torch.Tensor
    logprobs: torch.Tensor
    flags: torch.Tensor
    forced: torch.Tensor

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def sample(self, row: int, granularity: Granularity) -> PolicySample:
        return PolicySample(
            TokenSequence(self.tokens[row].cpu().numpy(), granularity),
            self.logprobs[row].cpu().numpy(),
            self.flags[row].cpu().numpy(),
        )


def as_table(emb: EmbeddingMatrix | torch.Tensor | np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(emb, EmbeddingMatrix):
        return emb.as_tensor(dtype)
    return torch.as_tensor(emb, dtype=dtype)


def lstm_step(gen: PacketGenerator, state: GeneratorState, x: torch.Tensor) -> tuple[GeneratorState, torch.Tensor]:
    """One LSTM transition; returns the new state and the output logits of h_t."""
    if not torch.isfinite(x).all():
        raise GeneratorError("non-finite LSTM input")
    z = torch.cat([x, state.h], dim=-1)
    f = torch.sigmoid(z @ gen.W_f.T + gen.b_f)
    i = torch.sigmoid(z @ gen.W_i.T + gen.b_i)
    c_tilde = torch.tanh(z @ gen.W_c.T + gen.b_c)
    c = f * state.c + i * c_tilde
    o = torch.sigmoid(z @ gen.W_o.T + gen.b_o)
    h = o * torch.tanh(c)
    logits = h @ gen.out_weight.T + gen.out_bias
    return GeneratorState(h, c, state.t, state.prefix), logits


def zero_state(gen: PacketGenerator, batch: int) -> GeneratorState:
    h = torch.zeros(batch, gen.hidden, dtype=gen.dtype)
    return GeneratorState(h, h.clone(), 0, torch.zeros(batch, 0, dtype=torch.long))


def initial_state(gen: PacketGenerator, batch: int) -> GeneratorState:
    """State after consuming the learned start vector; ready to emit token 0."""
    state, _ = lstm_step(gen, zero_state(gen, batch), gen.start.expand(batch, -1))
    return state


def advance(gen: PacketGenerator, state: GeneratorState, tokens: torch.Tensor, table: torch.Tensor) -> GeneratorState:
    new_state, _ = lstm_step(gen, state, table[tokens])
    new_state.prefix = torch.cat([state.prefix, tokens[:, None]], dim=1)
    new_state.t = state.t + 1
    return new_state


def output_logits(gen: PacketGenerator, state: GeneratorState) -> torch.Tensor:
    return state.h @ gen.out_weight.T + gen.out_bias


def next_token_distribution(gen: PacketGenerator, state: GeneratorState) -> torch.Tensor:
    return torch.softmax(output_logits(gen, state), dim=-1)


def inverse_cdf_sample(probs: torch.Tensor, uniforms: torch.Tensor) -> torch.Tensor:
    cdf = torch.cumsum(probs, dim=-1)
    index = torch.searchsorted(cdf, uniforms.to(cdf.dtype).unsqueeze(-1).contiguous(), right=True).squeeze(-1)
    return index.clamp_(max=probs.shape[-1] - 1)


def rollout_policy(
    gen: PacketGenerator,
    table: torch.Tensor,
    state: GeneratorState,
    forced: torch.Tensor,
    flags: torch.Tensor,
    uniforms: torch.Tensor,
    start: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Emit positions start..T-1 from ``state``; masked positions take the forced token.

    Forced tokens still feed the LSTM. Their log-probability is recorded as 0.
    Returns (tokens, logprobs) for the emitted positions only.
    """
    length = forced.shape[1]
    tokens, logprobs = [], []
    for t in range(start, length):
        log_probs = torch.log_softmax(output_logits(gen, state), dim=-1)
        sampled = inverse_cdf_sample(log_probs.exp(), uniforms[:, t])
        token = torch.where(flags[:, t], forced[:, t], sampled)
        chosen = log_probs.gather(1, token[:, None]).squeeze(1)
        logprobs.append(torch.where(flags[:, t], torch.zeros_like(chosen), chosen))
        tokens.append(token)
        if t + 1 < length:
            state = advance(gen, state, token, table)
    if not tokens:
        empty = torch.zeros(forced.shape[0], 0)
        return empty.long(), empty.to(gen.dtype)
    return torch.stack(tokens, dim=1), torch.stack(logprobs, dim=1)


def sample_batch(
    gen: PacketGenerator,
    table: torch.Tensor,
    forced: torch.Tensor | np.ndarray,
    flags: torch.Tensor | np.ndarray,
    seed: int,
    row_ids: np.ndarray | None = None,
) -> PolicyBatch:
    forced = torch.as_tensor(np.asarray(forced), dtype=torch.long)
    flags = torch.as_tensor(np.asarray(flags), dtype=torch.bool)
    batch, length = forced.shape
    if row_ids is None:
        row_ids = np.arange(batch)
    uniforms = torch.from_numpy(counter_uniforms(seed, np.asarray(row_ids)[:, None], np.arange(length)[None, :]))
    with torch.no_grad():
        tokens, logprobs = rollout_policy(gen, table, initial_state(gen, batch), forced, flags, uniforms, 0)
    return PolicyBatch(tokens, logprobs, flags, forced)


def sample_masked(
    gen: PacketGenerator,
    emb: EmbeddingMatrix | torch.Tensor,
    masks: Sequence[ConstraintMask],
    seed: int,
    row_ids: np.ndarray | None = None,
) -> PolicyBatch:
    forced, flags = stack_masks(masks)
    return sample_batch(gen, as_table(emb, gen.dtype), forced, flags, seed, row_ids)


def sample_sequence(
    gen: PacketGenerator,
    emb: EmbeddingMatrix,
    mask: ConstraintMask,
    length: int,
    seed: int,
) -> PolicySample:
    expected = mask.token_flags.shape[0]
    if int(length) != expected:
        raise GeneratorError(f"requested {length} tokens but the mask covers {expected}")
    return sample_masked(gen, emb, [mask], seed).sample(0, mask.granularity)


def teacher_forced(
    gen: PacketGenerator,
    tokens: torch.Tensor,
    table: torch.Tensor,
    keep_states: bool = False,
) -> tuple[torch.Tensor, list]:
    """Logits (B, T, V) where step t predicts tokens[:, t] from tokens[:, :t].

    With ``keep_states`` also returns the states after consuming tokens[:, :t+1]
    for t = 0..T-2 (the rollout starting points).
    """
    batch, length = tokens.shape
    state = initial_state(gen, batch)
    logits, states = [], []
    for t in range(length):
        logits.append(output_logits(gen, state))
        if t + 1 < length:
            state = advance(gen, state, tokens[:, t], table)
            if keep_states:
                states.append(state)
    return torch.stack(logits, dim=1), states


def _token_matrix(corpus, vocab_size: int) -> torch.Tensor:
    if isinstance(corpus, torch.Tensor):
        matrix = corpus.long()
    elif isinstance(corpus, np.ndarray):
        matrix = torch.from_numpy(corpus.astype(np.int64))
    else:
        if not len(corpus):
            raise GeneratorError("MLE pretraining needs a nonempty corpus")
        matrix = torch.from_numpy(np.stack([seq.tokens for seq in corpus]))
    if matrix.numel() == 0:
        raise GeneratorError("MLE pretraining needs a nonempty corpus")
    if matrix.min() < 0 or matrix.max() >= vocab_size:
        raise GeneratorError(f"corpus token outside vocabulary of size {vocab_size}")
    return matrix


def sequence_nll(gen: PacketGenerator, tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood under teacher forcing."""
    logits, _ = teacher_forced(gen, tokens, table)
    return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens.reshape(-1))


def make_optimizer(gen: PacketGenerator, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(gen.parameters(), lr=lr, betas=ADAM_BETAS)


def mle_pretrain(
    gen: PacketGenerator,
    corpus,
    emb: EmbeddingMatrix | torch.Tensor,
    epochs: int,
    lr: float = MLE_LR,
    seed: int = 0,
    batch_size: int = 64,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[float]:
    """Teacher-forced maximum likelihood; updates ``gen`` in place and returns per-epoch mean loss."""
    tokens = _token_matrix(corpus, gen.vocab_size)
    table = as_table(emb, gen.dtype)
    optimizer = optimizer or make_optimizer(gen, lr)
    rng = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    history = []
    for epoch in range(int(epochs)):
        order = torch.randperm(tokens.shape[0], generator=rng)
        total, batches = 0.0, 0
        for start in range(0, order.shape[0], batch_size):
            batch = tokens[order[start:start + batch_size]]
            optimizer.zero_grad()
            loss = sequence_nll(gen, batch, table)
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        history.append(total / max(batches, 1))
        logger.info("MLE epoch %d/%d nll=%.5f", epoch + 1, epochs, history[-1])
    return history


def policy_gradient_loss(
    gen: PacketGenerator,
    table: torch.Tensor,
    tokens: torch.Tensor,
    flags: torch.Tensor,
    q_values: torch.Tensor,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """-sum_t log G(y_t|s_t) * Q(s_t, y_t) over free positions, averaged over the batch.

    ``weights`` replaces the batch mean with a weighted sum (used for exact expectations).
    """
    logits, _ = teacher_forced(gen, tokens, table)
    log_probs = torch.log_softmax(logits, dim=-1).gather(2, tokens[:, :, None]).squeeze(2)
    free = (~flags).to(log_probs.dtype)
    per_sequence = (log_probs * q_values.to(log_probs.dtype) * free).sum(dim=1)
    if weights is None:
        return -per_sequence.mean()
    return -(per_sequence * weights.to(per_sequence.dtype)).sum()


class MovingAverageBaseline:
    """Exponential moving average of the mean reward, subtracted from Q when enabled."""

    def __init__(self, decay: float = 0.9, value: float | None = None):
        self.decay = float(decay)
        self.value = value

    def apply(self, q_values: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
        free = ~flags
        mean = float(q_values[free].mean()) if bool(free.any()) else 0.0
        baseline = mean if self.value is None else self.value
        self.value = mean if self.value is None else self.decay * self.value + (1 - self.decay) * mean
        return q_values - baseline


def policy_gradient_update(
    gen: PacketGenerator,
    batch: PolicyBatch,
    q_values: torch.Tensor | np.ndarray,
    emb: EmbeddingMatrix | torch.Tensor,
    lr: float = PG_LR,
    optimizer: torch.optim.Optimizer | None = None,
    baseline: MovingAverageBaseline | None = None,
) -> float:
    """One Adam step descending the sampled-trajectory estimate of the generator loss."""
    q_values = torch.as_tensor(np.asarray(q_values) if not isinstance(q_values, torch.Tensor) else q_values)
    if q_values.shape != batch.tokens.shape:
        raise GeneratorError(f"q_values shape {tuple(q_values.shape)} != samples shape {tuple(batch.tokens.shape)}")
    if baseline is not None:
        q_values = baseline.apply(q_values, batch.flags)
    optimizer = optimizer or make_optimizer(gen, lr)
    optimizer.zero_grad()
    loss = policy_gradient_loss(gen, as_table(emb, gen.dtype), batch.tokens, batch.flags, q_values)
    loss.backward()
    optimizer.step()
    return loss.item()
