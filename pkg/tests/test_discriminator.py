import numpy as np
import pytest
import torch

from trafficgan.discriminator import (
    DiscriminatorError,
    PacketDiscriminator,
    discriminate,
    discriminator_loss,
    train_discriminator,
)
from trafficgan.embedding import EmbeddingMatrix
from trafficgan.packet_model import Granularity, TokenSequence


def _ramp_table() -> torch.Tensor:
    values = np.arange(256) / 255.0 * 2 - 1
    return torch.tensor(np.stack([values, np.full(256, 0.5)], axis=1), dtype=torch.float32)


def _classes(rows: int = 64, length: int = 8, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    benign = torch.randint(0, 128, (rows, length), generator=gen)
    malicious = torch.randint(128, 256, (rows, length), generator=gen)
    return benign, malicious


def test_probabilities_are_in_unit_interval():
    disc = PacketDiscriminator(2, windows=(2, 3), filters=4, seed=1)
    benign, _ = _classes(rows=5)
    probs = disc.benign_probability(benign, _ramp_table())
    assert probs.shape == (5,)
    assert torch.all((probs > 0) & (probs < 1))


def test_loss_is_summed_cross_entropy():
    disc = PacketDiscriminator(2, windows=(2,), filters=3, seed=2)
    table = _ramp_table()
    benign, malicious = _classes(rows=6)
    loss = discriminator_loss(disc, table, benign, malicious)
    with torch.no_grad():
        p_benign = disc.benign_probability(benign, table).double()
        p_malicious = disc.benign_probability(malicious, table).double()
    expected = -(torch.log(p_benign).sum() + torch.log1p(-p_malicious).sum())
    assert float(loss) == pytest.approx(float(expected), rel=1e-5)
    assert float(discriminator_loss(disc, table, benign[:0], malicious[:0])) == 0.0


def test_training_separates_the_classes():
    disc = PacketDiscriminator(2, windows=(2, 3), filters=8, seed=3)
    table = _ramp_table()
    benign, malicious = _classes()
    with torch.no_grad():
        initial = float(discriminator_loss(disc, table, benign, malicious))
    trace = train_discriminator(disc, benign, malicious, table, epochs=40, lr=1e-2, seed=4, batch_size=16)
    assert len(trace) == 40
    assert trace[-1] < 0.5 * initial
    test_benign, test_malicious = _classes(rows=50, seed=9)
    with torch.no_grad():
        correct = (disc.benign_probability(test_benign, table) > 0.5).sum() + (
            disc.benign_probability(test_malicious, table) < 0.5
        ).sum()
    assert int(correct) >= 90
    assert not disc.training


def test_training_is_seeded():
    table = _ramp_table()
    benign, malicious = _classes(rows=20)
    traces = []
    for _ in range(2):
        disc = PacketDiscriminator(2, windows=(2, 3), filters=4, dropout=0.2, seed=5)
        traces.append(train_discriminator(disc, benign, malicious, table, epochs=3, seed=6, batch_size=8))
    assert traces[0] == traces[1]


def test_training_needs_both_classes():
    disc = PacketDiscriminator(2, windows=(2,), filters=2)
    benign, _ = _classes(rows=4)
    with pytest.raises(DiscriminatorError):
        train_discriminator(disc, benign, [], _ramp_table(), epochs=1)


def test_unbalanced_classes_are_cycled():
    disc = PacketDiscriminator(2, windows=(2,), filters=2, seed=1)
    benign, malicious = _classes(rows=30)
    trace = train_discriminator(disc, benign[:3], malicious, _ramp_table(), epochs=2, batch_size=8)
    assert len(trace) == 2 and all(np.isfinite(trace))


def test_short_sequences_are_rejected():
    disc = PacketDiscriminator(2, windows=(2, 5), filters=2)
    assert disc.min_length == 5
    with pytest.raises(DiscriminatorError):
        disc.benign_probability(torch.zeros(1, 4, dtype=torch.long), _ramp_table())


def test_constructor_validation():
    with pytest.raises(DiscriminatorError):
        PacketDiscriminator(2, windows=())
    with pytest.raises(DiscriminatorError):
        PacketDiscriminator(2, dropout=1.0)


def test_dropout_only_in_training_mode():
    disc = PacketDiscriminator(2, windows=(2,), filters=16, dropout=0.5, seed=2)
    benign, _ = _classes(rows=4)
    table = _ramp_table()
    disc.eval()
    with torch.no_grad():
        assert torch.equal(disc.logits(benign, table), disc.logits(benign, table))
        disc.train()
        assert not torch.equal(disc.logits(benign, table), disc.logits(benign, table))


def test_discriminate_single_sequence_restores_mode():
    disc = PacketDiscriminator(2, windows=(2,), filters=2, seed=1)
    disc.train()
    emb = EmbeddingMatrix(_ramp_table().numpy(), Granularity.ONE_BYTE)
    value = discriminate(disc, TokenSequence([1, 2, 3, 4], Granularity.ONE_BYTE), emb)
    assert 0.0 < value < 1.0
    assert disc.training


def test_state_tensors_round_trip():
    a = PacketDiscriminator(2, windows=(2, 3), filters=4, seed=1)
    b = PacketDiscriminator(2, windows=(2, 3), filters=4, seed=2)
    b.load_state_tensors(a.state_tensors())
    benign, _ = _classes(rows=3)
    assert torch.equal(a.logits(benign, _ramp_table()), b.logits(benign, _ramp_table()))
    with pytest.raises(DiscriminatorError):
        PacketDiscriminator(2, windows=(2,), filters=4).load_state_tensors(a.state_tensors())


def test_loss_gradient_matches_finite_differences():
    disc = PacketDiscriminator(4, windows=(2, 3), filters=3, seed=6, dtype=torch.float64)
    table = torch.tensor(np.random.default_rng(1).normal(size=(256, 4)), dtype=torch.float64)
    benign, malicious = _classes(rows=3, length=6, seed=2)
    disc.zero_grad()
    discriminator_loss(disc, table, benign, malicious).backward()

    eps = 1e-6
    with torch.no_grad():
        for name, param in disc.named_parameters():
            flat = param.view(-1)
            analytic = param.grad.view(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + eps
                up = float(discriminator_loss(disc, table, benign, malicious))
                flat[i] = original - eps
                down = float(discriminator_loss(disc, table, benign, malicious))
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                assert abs(numeric - float(analytic[i])) <= 1e-6 + 1e-4 * abs(numeric), (name, i)
