"""Monte Carlo completion of partial packets and per-position action values."""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .embedding import EmbeddingMatrix
from .generator import (
    PacketGenerator,
    PolicyBatch,
    PolicySample,
    advance,
    as_table,
    initial_state,
    rollout_policy,
    teacher_forced,
)
from .packet_model import ConstraintMask, TokenSequence
from .utils import counter_uniforms

logger = logging.getLogger(__name__)

DEFAULT_ROLLOUTS = 16
MAX_EXACT_COMPLETIONS = 1 << 16


class RolloutError(ValueError):
    pass


class BenignScorer(Protocol):
    def benign_probability(self, tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class RolloutConfig:
    m: int = DEFAULT_ROLLOUTS
    exact: bool = False

    def __post_init__(self):
        if int(self.m) < 1:
            raise RolloutError(f"rollout count m must be >= 1, got {self.m}")


@dataclass(frozen=True, eq=False)
class RewardTable:
    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.size and (q.min() < 0.0 or q.max() > 1.0):
            raise RolloutError("action values must lie in [0, 1]")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    def __len__(self) -> int:
        return int(self.q.shape[-1])


@contextmanager
def scoring_mode(disc: BenignScorer):
    """Score without dropout or autograd; restores the scorer's train flag afterwards."""
    was_training = bool(getattr(disc, "training", False))
    if was_training:
        disc.eval()
    try:
        with torch.no_grad():
            yield disc
    finally:
        if was_training:
            disc.train(True)


def _mask_arrays(mask: ConstraintMask) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.from_numpy(mask.template_tokens().tokens.copy())[None, :],
        torch.from_numpy(mask.token_flags.copy())[None, :],
    )


def mc_complete(
    prefix: TokenSequence | np.ndarray,
    gen: PacketGenerator,
    emb: EmbeddingMatrix | torch.Tensor,
    mask: ConstraintMask,
    length: int,
    seed: int,
    keys: tuple = (),
) -> TokenSequence:
    """Extend ``prefix`` to ``length`` tokens under the policy, honoring ``mask``.

    ``keys`` address the uniforms (seed, *keys, position); batched action values
    use keys (sample_id, t, m), so a single call reproduces one of their completions.
    """
    tokens = np.asarray(prefix.tokens if isinstance(prefix, TokenSequence) else prefix, dtype=np.int64)
    forced, flags = _mask_arrays(mask)
    if int(length) != flags.shape[1]:
        raise RolloutError(f"requested {length} tokens but the mask covers {flags.shape[1]}")
    t = tokens.shape[0]
    if t > length:
        raise RolloutError(f"prefix of {t} tokens exceeds sequence length {length}")
    pinned = flags[0, :t].numpy()
    if np.any(tokens[pinned] != forced[0, :t].numpy()[pinned]):
        raise RolloutError("prefix violates the constraint mask")
    if t == length:
        return TokenSequence(tokens, mask.granularity)

    table = as_table(emb, gen.dtype)
    uniforms = torch.from_numpy(counter_uniforms(seed, *keys, np.arange(length)).reshape(1, length))
    with torch.no_grad():
        state = initial_state(gen, 1)
        for token in tokens:
            state = advance(gen, state, torch.tensor([int(token)]), table)
        suffix, _ = rollout_policy(gen, table, state, forced, flags, uniforms, t)
    return TokenSequence(np.concatenate([tokens, suffix[0].numpy()]), mask.granularity)


def batch_action_values(
    gen: PacketGenerator,
    emb: EmbeddingMatrix | torch.Tensor,
    batch: PolicyBatch,
    disc: BenignScorer,
    config: RolloutConfig,
    seed: int,
    sample_ids: np.ndarray | None = None,
) -> torch.Tensor:
    """Q (B, T): q[:, T-1] = D(y); q[:, t] = mean over m of D(completion of y[:, :t+1])."""
    tokens = batch.tokens
    size, length = tokens.shape
    if sample_ids is None:
        sample_ids = np.arange(size)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    table = as_table(emb, gen.dtype)
    if config.exact:
        with scoring_mode(disc):
            rows = [
                exact_action_values(gen, table, tokens[i], batch.forced[i], batch.flags[i], disc)
                for i in range(size)
            ]
        return torch.stack(rows)

    m = int(config.m)
    q = torch.zeros(size, length, dtype=torch.float64)
    with scoring_mode(disc):
        q[:, length - 1] = disc.benign_probability(tokens, table).to(torch.float64)
        _, states = teacher_forced(gen, tokens, table, keep_states=True)
        forced = batch.forced.repeat_interleave(m, dim=0)
        flags = batch.flags.repeat_interleave(m, dim=0)
        rollout_ids = np.arange(m)
        positions = np.arange(length)
        for t, state in enumerate(states):
            state.h = state.h.repeat_interleave(m, dim=0)
            state.c = state.c.repeat_interleave(m, dim=0)
            state.prefix = state.prefix.repeat_interleave(m, dim=0)
            uniforms = counter_uniforms(
                seed, sample_ids[:, None, None], t, rollout_ids[None, :, None], positions[None, None, :]
            ).reshape(size * m, length)
            suffix, _ = rollout_policy(gen, table, state, forced, flags, torch.from_numpy(uniforms), t + 1)
            completed = torch.cat([tokens[:, : t + 1].repeat_interleave(m, dim=0), suffix], dim=1)
            rewards = disc.benign_probability(completed, table).to(torch.float64)
            q[:, t] = rewards.view(size, m).mean(dim=1)
    return q


def action_values(
    sample: PolicySample,
    gen: PacketGenerator,
    emb: EmbeddingMatrix | torch.Tensor,
    mask: ConstraintMask,
    disc: BenignScorer,
    config: RolloutConfig,
    seed: int,
    sample_id: int = 0,
) -> RewardTable:
    forced, flags = _mask_arrays(mask)
    tokens = torch.from_numpy(sample.tokens.tokens.copy())[None, :]
    if tokens.shape[1] != flags.shape[1]:
        raise RolloutError(f"sample has {tokens.shape[1]} tokens, mask covers {flags.shape[1]}")
    batch = PolicyBatch(tokens, torch.from_numpy(sample.step_logprobs.copy())[None, :], flags, forced)
    q = batch_action_values(gen, emb, batch, disc, config, seed, np.array([sample_id]))
    return RewardTable(q[0].numpy())


def exact_action_values(
    gen: PacketGenerator,
    table: torch.Tensor,
    tokens: torch.Tensor,
    forced: torch.Tensor,
    flags: torch.Tensor,
    disc: BenignScorer,
) -> torch.Tensor:
    """Q by enumerating every completion with its exact policy probability. Tiny instances only."""
    length = tokens.shape[0]
    vocab = range(gen.vocab_size)
    q = torch.zeros(length, dtype=torch.float64)
    with torch.no_grad():
        q[length - 1] = disc.benign_probability(tokens[None, :], table).to(torch.float64)[0]
        for t in range(length - 1):
            choices = [[int(forced[p])] if bool(flags[p]) else vocab for p in range(t + 1, length)]
            count = int(np.prod([len(c) for c in choices]))
            if count > MAX_EXACT_COMPLETIONS:
                raise RolloutError(f"exact rollout would enumerate {count} completions")
            suffixes = torch.tensor(list(itertools.product(*choices)), dtype=torch.long)
            completed = torch.cat([tokens[: t + 1].expand(count, -1), suffixes], dim=1)
            logits, _ = teacher_forced(gen, completed, table)
            log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1).gather(2, completed[:, :, None]).squeeze(2)
            # forced positions are emitted with probability one
            free = ~flags[t + 1:]
            weights = (log_probs[:, t + 1:] * free.to(torch.float64)).sum(dim=1).exp()
            rewards = disc.benign_probability(completed, table).to(torch.float64)
            q[t] = (weights * rewards).sum()
    return q
