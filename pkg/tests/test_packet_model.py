import numpy as np
import pytest

from trafficgan.packet_model import (
    ConstraintMask,
    Granularity,
    Label,
    NormalizedPacket,
    Origin,
    PacketError,
    RawPacket,
    TokenSequence,
    apply_mask,
    build_mask,
    bytes_to_tokens,
    detokenize,
    mask_violations,
    normalize_packet,
    renormalize,
    stack_masks,
    tokenize,
)


def _packet(data: bytes, label=Label.MALICIOUS) -> NormalizedPacket:
    return NormalizedPacket(data, label)


def test_normalize_truncates_and_pads():
    long = normalize_packet(RawPacket(bytes(range(256)) * 2, Label.BENIGN), 300)
    assert long.length == 300
    assert long.data == (bytes(range(256)) * 2)[:300]

    short = normalize_packet(RawPacket(b"\x01\x02\x03", Label.BENIGN), 300)
    assert short.data[:3] == b"\x01\x02\x03"
    assert short.data[3:] == bytes(297)


def test_normalize_requires_a_label():
    with pytest.raises(PacketError):
        normalize_packet(RawPacket(b"\x01"), 10)
    assert normalize_packet(RawPacket(b"\x01"), 10, label=Label.BENIGN).label is Label.BENIGN


@pytest.mark.parametrize("length", [0, -3])
def test_normalize_rejects_bad_length(length):
    with pytest.raises(PacketError):
        normalize_packet(RawPacket(b"\x01", Label.BENIGN), length)


def test_raw_packet_must_not_be_empty():
    with pytest.raises(PacketError):
        RawPacket(b"")


def test_two_byte_tokens_are_big_endian_pairs():
    pkt = _packet(bytes([0x01, 0x02, 0xFF, 0x00]))
    seq = tokenize(pkt, Granularity.TWO_BYTE)
    assert seq.tokens.tolist() == [0x0102, 0xFF00]
    assert detokenize(seq, 4).data == pkt.data


def test_tokenize_detokenize_identity(rng):
    data = rng.integers(0, 256, size=300, dtype=np.uint8).tobytes()
    pkt = _packet(data)
    for granularity in Granularity:
        seq = tokenize(pkt, granularity)
        assert len(seq) == 300 // granularity.bytes_per_token
        back = detokenize(seq, 300)
        assert back.data == data
        assert back.origin is Origin.GENERATED


def test_two_byte_rejects_odd_length():
    with pytest.raises(PacketError):
        tokenize(_packet(b"\x01\x02\x03"), Granularity.TWO_BYTE)
    with pytest.raises(PacketError):
        bytes_to_tokens(np.zeros(5, dtype=np.uint8), Granularity.TWO_BYTE)


def test_token_sequence_range_checked():
    with pytest.raises(PacketError):
        TokenSequence([256], Granularity.ONE_BYTE)
    assert len(TokenSequence([65535], Granularity.TWO_BYTE)) == 1


def test_detokenize_length_mismatch():
    seq = TokenSequence([1, 2, 3], Granularity.ONE_BYTE)
    with pytest.raises(PacketError):
        detokenize(seq, 4)


def test_apply_mask_forces_template_tokens(rng):
    template = _packet(rng.integers(0, 256, size=20, dtype=np.uint8).tobytes())
    mask = build_mask(template, [0, 5, 19])
    free = TokenSequence(rng.integers(0, 256, size=20), Granularity.ONE_BYTE)
    masked = apply_mask(free, mask)
    pkt = detokenize(masked, 20)
    assert mask_violations(pkt, mask) == []
    unmasked = [i for i in range(20) if i not in (0, 5, 19)]
    assert np.array_equal(masked.tokens[unmasked], free.tokens[unmasked])


def test_full_mask_reproduces_template(rng):
    template = _packet(rng.integers(0, 256, size=12, dtype=np.uint8).tobytes())
    mask = build_mask(template, range(12))
    seq = apply_mask(TokenSequence(np.zeros(12), Granularity.ONE_BYTE), mask)
    assert detokenize(seq, 12).data == template.data


def test_empty_mask_is_identity():
    template = _packet(bytes(8))
    mask = build_mask(template, [])
    seq = TokenSequence(np.arange(8), Granularity.ONE_BYTE)
    assert apply_mask(seq, mask) == seq
    assert mask.mu == 0


def test_two_byte_mask_pins_whole_tokens():
    template = _packet(bytes(range(8)))
    mask = build_mask(template, [3], Granularity.TWO_BYTE)
    assert mask.positions == frozenset({2, 3})
    assert mask.token_flags.tolist() == [False, True, False, False]


def test_constraint_mask_validates_positions():
    template = _packet(bytes(8))
    with pytest.raises(PacketError):
        build_mask(template, [8])
    with pytest.raises(PacketError):
        ConstraintMask(frozenset({2}), template, Granularity.TWO_BYTE)


def test_mask_violations_reports_positions():
    template = _packet(bytes(6))
    mask = build_mask(template, [1, 4])
    assert mask_violations(_packet(bytes([0, 9, 0, 0, 7, 0])), mask) == [1, 4]


def test_stack_masks_shapes():
    template = _packet(bytes(range(6)))
    masks = [build_mask(template, [0]), build_mask(template, [1, 2])]
    forced, flags = stack_masks(masks)
    assert forced.shape == flags.shape == (2, 6)
    assert flags.sum(axis=1).tolist() == [1, 2]


def test_normalized_packet_rejects_unlabeled():
    with pytest.raises(PacketError):
        NormalizedPacket(b"\x00", Label.UNLABELED)


@pytest.mark.parametrize("size", [3, 16, 40])
def test_renormalizing_a_normalized_packet_changes_nothing(size, rng):
    raw = RawPacket(rng.integers(0, 256, size=size, dtype=np.uint8).tobytes(), Label.BENIGN)
    once = normalize_packet(raw, 16)
    again = renormalize(once, 16)
    assert again.data == once.data
    assert again.label is once.label
    assert again.origin is once.origin


@pytest.mark.parametrize("granularity", [Granularity.ONE_BYTE, Granularity.TWO_BYTE])
def test_apply_mask_is_a_fixpoint(granularity, rng):
    template = _packet(rng.integers(0, 256, size=16, dtype=np.uint8).tobytes())
    mask = build_mask(template, [1, 6, 9, 14], granularity)
    free = TokenSequence(rng.integers(0, granularity.vocab_size, size=len(mask.token_flags)), granularity)
    once = apply_mask(free, mask)
    assert apply_mask(once, mask) == once
