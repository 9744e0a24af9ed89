"""Packet sources: classic pcap files, synthetic corpora and the ATKD dataset container."""

import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scapy.data import MTU
from scapy.error import Scapy_Exception
from scapy.utils import RawPcapReader, RawPcapWriter

from .packet_model import (
    Label,
    NormalizedPacket,
    Origin,
    RawPacket,
    normalize_packet,
    stack_packets,
)
from .utils import sha256_file

logger = logging.getLogger(__name__)

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
PCAP_GLOBAL_HEADER = 24
PCAP_RECORD_HEADER = 16
LINKTYPE_ETHERNET = 1

DATASET_MAGIC = b"ATKD"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHII")

SPLIT_TAGS = ("train", "test", "all")


class PcapFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PcapRecord:
    ts_sec: int
    ts_usec: int
    captured_len: int
    original_len: int
    payload: bytes
    nanosecond: bool = False

    @property
    def timestamp(self) -> float:
        scale = 1e-9 if self.nanosecond else 1e-6
        return self.ts_sec + self.ts_usec * scale


def _open_reader(path: str | Path) -> RawPcapReader:
    try:
        return RawPcapReader(str(path))
    except Scapy_Exception as e:
        raise PcapFormatError(f"{path}: {e}") from e


def read_pcap_records(path: str | Path) -> list[PcapRecord]:
    """Every record of a classic pcap file, validated against its record header."""
    size = Path(path).stat().st_size
    records = []
    offset = PCAP_GLOBAL_HEADER
    with _open_reader(path) as reader:
        nanosecond = bool(getattr(reader, "nano", False))
        snaplen = int(getattr(reader, "snaplen", 0) or 0)
        for index, (data, meta) in enumerate(reader):
            start = offset + PCAP_RECORD_HEADER
            if len(data) < min(meta.caplen, MTU):
                raise PcapFormatError(
                    f"{path}: record {index} claims {meta.caplen} bytes at offset {start}, "
                    f"only {len(data)} remain"
                )
            if meta.caplen > meta.wirelen:
                raise PcapFormatError(
                    f"{path}: record {index} captured_len {meta.caplen} exceeds original_len {meta.wirelen}"
                )
            if snaplen and meta.caplen > snaplen:
                logger.warning("%s: record %d exceeds snaplen %d (%d bytes)", path, index, snaplen, meta.caplen)
            records.append(PcapRecord(meta.sec, meta.usec, meta.caplen, meta.wirelen, bytes(data), nanosecond))
            offset = start + meta.caplen
    # the reader stops quietly on a short record header
    if offset < size:
        raise PcapFormatError(f"{path}: record {len(records)} header truncated at offset {offset}")
    return records


def read_pcap(
    path: str | Path,
    strip_offset: int = 0,
    label: Label = Label.UNLABELED,
) -> list[RawPacket]:
    """One RawPacket per record, in capture order.

    ``strip_offset`` drops that many leading bytes (e.g. 14 for Ethernet) so the
    remaining frame starts at the network layer; by default full frames are kept.
    """
    packets = []
    skipped = 0
    for record in read_pcap_records(path):
        payload = record.payload[strip_offset:]
        if not payload:
            skipped += 1
            continue
        packets.append(RawPacket(payload, label, record.timestamp))
    if skipped:
        logger.warning("%s: skipped %d records with no bytes after strip offset %d", path, skipped, strip_offset)
    logger.info("Read %d packets from %s", len(packets), path)
    return packets


def write_pcap(
    path: str | Path,
    payloads: Iterable[bytes],
    byteorder: str = "<",
    snaplen: int = 65535,
    linktype: int = LINKTYPE_ETHERNET,
    timestamps: Sequence[float] | None = None,
) -> Path:
    if byteorder not in ("<", ">"):
        raise PcapFormatError(f"byteorder must be '<' or '>', got {byteorder!r}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with RawPcapWriter(str(target), linktype=linktype, endianness=byteorder, snaplen=snaplen, sync=True) as writer:
        writer.write_header(None)
        for index, payload in enumerate(payloads):
            ts = float(timestamps[index]) if timestamps is not None else float(index)
            ts_sec = int(ts)
            ts_usec = int(round((ts - ts_sec) * 1e6))
            writer.write_packet(bytes(payload), sec=ts_sec, usec=ts_usec)
    return target


@dataclass(frozen=True)
class LabeledDataset:
    packets: tuple
    split_tag: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "packets", tuple(self.packets))
        if self.split_tag not in SPLIT_TAGS:
            raise DatasetError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        lengths = {p.length for p in self.packets}
        if len(lengths) > 1:
            raise DatasetError(f"packets of mixed lengths {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.packets)

    @property
    def packet_length(self) -> int:
        return self.packets[0].length if self.packets else 0

    @property
    def class_counts(self) -> dict:
        counts = {Label.BENIGN: 0, Label.MALICIOUS: 0}
        for packet in self.packets:
            counts[packet.label] += 1
        return counts

    @cached_property
    def byte_matrix(self) -> np.ndarray:
        matrix = stack_packets(self.packets)
        matrix.flags.writeable = False
        return matrix

    @cached_property
    def label_codes(self) -> np.ndarray:
        return np.array([p.label.code for p in self.packets], dtype=np.int64)

    def with_label(self, label: Label) -> list:
        return [p for p in self.packets if p.label is label]


@dataclass(frozen=True)
class SynthSpec:
    n_benign: int
    n_malicious: int
    length: int
    signature_positions: tuple
    signature_values: dict = field(
        default_factory=lambda: {Label.BENIGN: (0, 127), Label.MALICIOUS: (128, 255)}
    )
    noise_seed: int = 0
    min_length: int | None = None
    jitter: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "signature_positions", tuple(int(p) for p in self.signature_positions))
        values = {Label(k): (int(v[0]), int(v[1])) for k, v in dict(self.signature_values).items()}
        object.__setattr__(self, "signature_values", values)
        if self.n_benign < 0 or self.n_malicious < 0 or self.n_benign + self.n_malicious < 1:
            raise DatasetError("synthetic corpus needs non-negative counts and at least one packet")
        if self.length < 1:
            raise DatasetError(f"packet length must be >= 1, got {self.length}")
        for position in self.signature_positions:
            if not 0 <= position < self.length:
                raise DatasetError(f"signature position {position} outside [0, {self.length})")
        for label in (Label.BENIGN, Label.MALICIOUS):
            if label not in values:
                raise DatasetError(f"signature_values missing a range for {label.value}")
            lo, hi = values[label]
            if not 0 <= lo <= hi <= 255:
                raise DatasetError(f"{label.value} signature range ({lo}, {hi}) is not a byte range")
        (b_lo, b_hi), (m_lo, m_hi) = values[Label.BENIGN], values[Label.MALICIOUS]
        if b_lo <= m_hi and m_lo <= b_hi:
            raise DatasetError(
                f"benign range ({b_lo}, {b_hi}) overlaps malicious range ({m_lo}, {m_hi}); "
                "classes would be inseparable at the signature"
            )

    def mask_priority(self) -> list[int]:
        """Byte positions in the order a growing mask pins them: signature bytes, then the rest."""
        signature = sorted(set(self.signature_positions))
        rest = [p for p in range(self.length) if p not in signature]
        return signature + rest


def default_signature_positions(length: int) -> tuple:
    """Sixteen (or fewer) signature bytes placed after an 8-byte header region."""
    start = min(8, max(0, length - 1))
    stop = min(length, start + 16)
    return tuple(range(start, stop))


def synthesize_corpus(spec: SynthSpec) -> LabeledDataset:
    """Desk-scale labeled corpus whose classes differ only at the signature bytes."""
    rng = np.random.default_rng(spec.noise_seed)
    length = spec.length
    signature = np.array(spec.signature_positions, dtype=np.int64)
    floor = int(signature.max()) + 1 if signature.size else 1
    min_length = max(floor, int(spec.min_length or max(1, length // 2)))
    min_length = min(min_length, length)

    # Background byte profile shared by both classes.
    profile = rng.integers(0, 256, size=length)
    labels = [Label.BENIGN] * spec.n_benign + [Label.MALICIOUS] * spec.n_malicious
    count = len(labels)

    noise = rng.normal(0.0, spec.jitter, size=(count, length))
    matrix = np.clip(np.rint(profile[None, :] + noise), 0, 255).astype(np.int64)
    for row, label in enumerate(labels):
        lo, hi = spec.signature_values[label]
        if signature.size:
            matrix[row, signature] = rng.integers(lo, hi + 1, size=signature.size)
    lengths = rng.integers(min_length, length + 1, size=count)
    matrix[np.arange(length)[None, :] >= lengths[:, None]] = 0

    order = rng.permutation(count)
    packets = [
        NormalizedPacket(matrix[i].astype(np.uint8).tobytes(), labels[i], Origin.SYNTHETIC)
        for i in order
    ]
    dataset = LabeledDataset(tuple(packets), "all")
    logger.info(
        "Synthesized corpus: benign=%d malicious=%d P=%d seed=%d",
        spec.n_benign,
        spec.n_malicious,
        length,
        spec.noise_seed,
    )
    return dataset


def split_dataset(
    ds: LabeledDataset,
    train_fraction: float,
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; each class keeps ``train_fraction`` of its packets (rounded half up)."""
    if not 0.0 < float(train_fraction) < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    codes = ds.label_codes
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in (Label.BENIGN, Label.MALICIOUS):
        members = np.flatnonzero(codes == label.code)
        if members.size == 0:
            continue
        if members.size < 2:
            raise DatasetError(f"class {label.value} has {members.size} member; stratification needs 2")
        n_train = int(members.size * float(train_fraction) + 0.5)
        n_train = min(max(n_train, 1), members.size - 1)
        shuffled = rng.permutation(members)
        train_idx.extend(shuffled[:n_train].tolist())
        test_idx.extend(shuffled[n_train:].tolist())
    train = LabeledDataset(tuple(ds.packets[i] for i in sorted(train_idx)), "train")
    test = LabeledDataset(tuple(ds.packets[i] for i in sorted(test_idx)), "test")
    logger.info(
        "Split dataset: train=%s test=%s",
        {k.value: v for k, v in train.class_counts.items()},
        {k.value: v for k, v in test.class_counts.items()},
    )
    return train, test


def ingest_pcaps(
    benign_paths: Sequence[str | Path],
    malicious_paths: Sequence[str | Path],
    length: int,
    strip_offset: int = 0,
) -> LabeledDataset:
    packets = []
    for label, paths in ((Label.BENIGN, benign_paths), (Label.MALICIOUS, malicious_paths)):
        for path in paths:
            for raw in read_pcap(path, strip_offset=strip_offset, label=label):
                packets.append(normalize_packet(raw, length))
    if not packets:
        raise DatasetError("no packets found in the given capture files")
    return LabeledDataset(tuple(packets), "all")


def write_dataset(path: str | Path, ds: LabeledDataset, provenance: dict | None = None) -> Path:
    if not len(ds):
        raise DatasetError("refusing to write an empty dataset")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.packet_length, len(ds))
    body = b"".join(bytes([p.label.code]) + p.data for p in ds.packets)
    target.write_bytes(header + body)

    manifest = {
        "format": "ATKD",
        "version": DATASET_VERSION,
        "packet_length": ds.packet_length,
        "count": len(ds),
        "class_counts": {k.value: v for k, v in ds.class_counts.items()},
        "split_tag": ds.split_tag,
        "sha256": sha256_file(target),
        "provenance": provenance or {},
    }
    manifest_path(target).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Wrote dataset %s (%d packets)", target, len(ds))
    return target


def manifest_path(path: str | Path) -> Path:
    target = Path(path)
    return target.with_name(target.name + ".manifest.json")


def read_dataset(path: str | Path, origin: Origin = Origin.CAPTURED) -> LabeledDataset:
    data = Path(path).read_bytes()
    if len(data) < _DATASET_HEADER.size:
        raise DatasetError(f"{path}: shorter than the dataset header")
    magic, version, length, count = _DATASET_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    record = 1 + length
    expected = _DATASET_HEADER.size + count * record
    if len(data) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {count} records, found {len(data)}")
    packets = []
    offset = _DATASET_HEADER.size
    for index in range(count):
        code = data[offset]
        if code not in (0, 1):
            raise DatasetError(f"{path}: record {index} has invalid label byte {code}")
        packets.append(NormalizedPacket(data[offset + 1:offset + record], Label.from_code(code), origin))
        offset += record
    return LabeledDataset(tuple(packets), "all")
