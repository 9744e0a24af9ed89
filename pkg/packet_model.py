"""Packet representation: fixed-length normalization, tokenization and constraint masks."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

DEFAULT_PACKET_LENGTH = 300
PADDING_BYTE = 0x00
PADDING_TOKEN = 0


class PacketError(ValueError):
    pass


class Label(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    UNLABELED = "unlabeled"

    @property
    def code(self) -> int:
        # NIDS class index; malicious is the positive class.
        return 1 if self is Label.MALICIOUS else 0

    @classmethod
    def from_code(cls, code: int) -> "Label":
        return cls.MALICIOUS if int(code) == 1 else cls.BENIGN


class Origin(str, Enum):
    CAPTURED = "captured"
    SYNTHETIC = "synthetic"
    GENERATED = "generated"


class Granularity(str, Enum):
    ONE_BYTE = "one_byte"
    TWO_BYTE = "two_byte"

    @property
    def bytes_per_token(self) -> int:
        return 1 if self is Granularity.ONE_BYTE else 2

    @property
    def vocab_size(self) -> int:
        return 256 if self is Granularity.ONE_BYTE else 65536

    def sequence_length(self, packet_length: int) -> int:
        if self is Granularity.TWO_BYTE and packet_length % 2:
            raise PacketError(f"two_byte granularity needs an even packet length, got {packet_length}")
        return packet_length // self.bytes_per_token


@dataclass(frozen=True)
class Vocabulary:
    granularity: Granularity
    padding_token: int = PADDING_TOKEN

    @property
    def size(self) -> int:
        return self.granularity.vocab_size


@dataclass(frozen=True)
class RawPacket:
    data: bytes
    label: Label = Label.UNLABELED
    capture_ts: float | None = None

    def __post_init__(self):
        if not isinstance(self.data, (bytes, bytearray)):
            raise PacketError(f"packet data must be bytes, got {type(self.data).__name__}")
        if len(self.data) < 1:
            raise PacketError("raw packet must contain at least one byte")
        object.__setattr__(self, "data", bytes(self.data))
        object.__setattr__(self, "label", Label(self.label))

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class NormalizedPacket:
    data: bytes
    label: Label
    origin: Origin = Origin.CAPTURED

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        label = Label(self.label)
        if label is Label.UNLABELED:
            raise PacketError("normalized packets must be labeled benign or malicious")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def length(self) -> int:
        return len(self.data)

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray
    granularity: Granularity

    def __post_init__(self):
        granularity = Granularity(self.granularity)
        tokens = np.array(self.tokens, dtype=np.int64).reshape(-1)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= granularity.vocab_size):
            raise PacketError(
                f"token out of vocabulary range [0, {granularity.vocab_size - 1}] "
                f"for {granularity.value}"
            )
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "granularity", granularity)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.granularity is other.granularity and np.array_equal(self.tokens, other.tokens)

    def __hash__(self) -> int:
        return hash((self.granularity, self.tokens.tobytes()))


@dataclass(frozen=True)
class ConstraintMask:
    positions: frozenset
    template: NormalizedPacket
    granularity: Granularity = Granularity.ONE_BYTE
    _token_flags: np.ndarray = field(init=False, repr=False, compare=False)
    _template_tokens: "TokenSequence" = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        granularity = Granularity(self.granularity)
        object.__setattr__(self, "granularity", granularity)
        length = self.template.length
        step = granularity.bytes_per_token
        flags = np.zeros(granularity.sequence_length(length), dtype=bool)
        for position in self.positions:
            if not 0 <= position < length:
                raise PacketError(f"mask position {position} outside [0, {length})")
            if step == 2 and (position ^ 1) not in self.positions:
                raise PacketError(f"two_byte mask must pin whole tokens; position {position ^ 1} missing")
            flags[position // step] = True
        flags.flags.writeable = False
        object.__setattr__(self, "_token_flags", flags)
        object.__setattr__(self, "_template_tokens", tokenize(self.template, granularity))

    @property
    def mu(self) -> int:
        return len(self.positions)

    @property
    def packet_length(self) -> int:
        return self.template.length

    @property
    def token_flags(self) -> np.ndarray:
        return self._token_flags

    def template_tokens(self) -> TokenSequence:
        return self._template_tokens


def normalize_packet(
    raw: RawPacket,
    length: int = DEFAULT_PACKET_LENGTH,
    label: Label | None = None,
    origin: Origin = Origin.CAPTURED,
) -> NormalizedPacket:
    """Truncate or zero-pad ``raw`` to exactly ``length`` bytes."""
    if int(length) < 1:
        raise PacketError(f"packet length must be >= 1, got {length}")
    length = int(length)
    resolved = Label(label) if label is not None else raw.label
    if resolved is Label.UNLABELED:
        raise PacketError("cannot normalize an unlabeled packet without an explicit label")
    body = raw.data[:length]
    return NormalizedPacket(body + bytes(length - len(body)), resolved, origin)


def renormalize(pkt: NormalizedPacket, length: int) -> NormalizedPacket:
    return normalize_packet(RawPacket(pkt.data, pkt.label), length, origin=pkt.origin)


def bytes_to_tokens(data: np.ndarray, granularity: Granularity) -> np.ndarray:
    """Tokenize a (..., P) uint8 array. Two-byte tokens are big-endian pairs."""
    granularity = Granularity(granularity)
    array = np.asarray(data, dtype=np.int64)
    if granularity is Granularity.ONE_BYTE:
        return array
    if array.shape[-1] % 2:
        raise PacketError(f"two_byte granularity needs an even packet length, got {array.shape[-1]}")
    return array[..., 0::2] * 256 + array[..., 1::2]


def tokens_to_bytes(tokens: np.ndarray, granularity: Granularity) -> np.ndarray:
    granularity = Granularity(granularity)
    array = np.asarray(tokens, dtype=np.int64)
    if array.size and (array.min() < 0 or array.max() >= granularity.vocab_size):
        raise PacketError(f"token out of vocabulary range for {granularity.value}")
    if granularity is Granularity.ONE_BYTE:
        return array.astype(np.uint8)
    out = np.empty(array.shape[:-1] + (array.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = array // 256
    out[..., 1::2] = array % 256
    return out


def tokenize(pkt: NormalizedPacket, granularity: Granularity) -> TokenSequence:
    return TokenSequence(bytes_to_tokens(pkt.as_array(), granularity), granularity)


def detokenize(
    seq: TokenSequence,
    length: int,
    label: Label = Label.MALICIOUS,
) -> NormalizedPacket:
    expected = seq.granularity.sequence_length(int(length))
    if len(seq) != expected:
        raise PacketError(f"{len(seq)} tokens cannot form a {length}-byte packet under {seq.granularity.value}")
    data = tokens_to_bytes(seq.tokens, seq.granularity).tobytes()
    return NormalizedPacket(data, label, Origin.GENERATED)


def build_mask(
    template: NormalizedPacket,
    positions: Iterable[int],
    granularity: Granularity = Granularity.ONE_BYTE,
) -> ConstraintMask:
    """Pin ``positions`` of ``template``; under two_byte odd positions pull in their pair partner."""
    granularity = Granularity(granularity)
    length = template.length
    granularity.sequence_length(length)
    expanded = set()
    for position in positions:
        position = int(position)
        if position < 0 or position >= length:
            raise PacketError(f"mask position {position} outside [0, {length})")
        expanded.add(position)
        if granularity is Granularity.TWO_BYTE:
            expanded.add(position ^ 1)
    return ConstraintMask(frozenset(expanded), template, granularity)


def apply_mask(seq: TokenSequence, mask: ConstraintMask) -> TokenSequence:
    if seq.granularity is not mask.granularity:
        raise PacketError(
            f"granularity mismatch: sequence is {seq.granularity.value}, mask is {mask.granularity.value}"
        )
    if len(seq) != mask.token_flags.shape[0]:
        raise PacketError(f"sequence has {len(seq)} tokens, mask covers {mask.token_flags.shape[0]}")
    tokens = np.where(mask.token_flags, mask.template_tokens().tokens, seq.tokens)
    return TokenSequence(tokens, seq.granularity)


def mask_violations(pkt: NormalizedPacket, mask: ConstraintMask) -> list[int]:
    """Byte positions where ``pkt`` differs from the mask template."""
    if pkt.length != mask.packet_length:
        raise PacketError(f"packet length {pkt.length} differs from mask length {mask.packet_length}")
    data = pkt.data
    template = mask.template.data
    return sorted(position for position in mask.positions if data[position] != template[position])


def stack_packets(packets: Sequence[NormalizedPacket]) -> np.ndarray:
    """(N, P) uint8 view of a packet list."""
    if not packets:
        return np.zeros((0, 0), dtype=np.uint8)
    return np.frombuffer(b"".join(p.data for p in packets), dtype=np.uint8).reshape(len(packets), -1)


def stack_masks(masks: Sequence[ConstraintMask]) -> tuple[np.ndarray, np.ndarray]:
    """Forced-token and flag arrays, both (N, T), for a batch of masks."""
    forced = np.stack([m.template_tokens().tokens for m in masks])
    flags = np.stack([m.token_flags for m in masks])
    return forced, flags
