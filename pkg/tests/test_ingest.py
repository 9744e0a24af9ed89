import json
import struct

import numpy as np
import pytest

from trafficgan.ingest import (
    DatasetError,
    PCAP_MAGIC_NSEC,
    PCAP_MAGIC_USEC,
    LabeledDataset,
    PcapFormatError,
    SynthSpec,
    default_signature_positions,
    ingest_pcaps,
    manifest_path,
    read_dataset,
    read_pcap,
    read_pcap_records,
    split_dataset,
    synthesize_corpus,
    write_dataset,
    write_pcap,
)
from trafficgan.packet_model import Label, NormalizedPacket, Origin


@pytest.mark.parametrize("byteorder", ["<", ">"])
def test_pcap_reads_both_byte_orders(tmp_path, byteorder):
    payloads = [b"\x01\x02\x03", b"\xff" * 70, b"\x10"]
    path = write_pcap(tmp_path / "x.pcap", payloads, byteorder=byteorder, timestamps=[1.5, 2.0, 3.25])
    packets = read_pcap(path, label=Label.BENIGN)
    assert [p.data for p in packets] == payloads
    assert [p.capture_ts for p in packets] == pytest.approx([1.5, 2.0, 3.25])
    assert all(p.label is Label.BENIGN for p in packets)


def test_pcap_nanosecond_magic(tmp_path):
    header = struct.pack("<IHHiIII", PCAP_MAGIC_NSEC, 2, 4, 0, 0, 65535, 1)
    record = struct.pack("<IIII", 7, 500_000_000, 2, 2) + b"\xaa\xbb"
    path = tmp_path / "ns.pcap"
    path.write_bytes(header + record)
    (rec,) = read_pcap_records(path)
    assert rec.nanosecond
    assert rec.timestamp == pytest.approx(7.5)


def test_pcap_strip_offset(tmp_path):
    path = write_pcap(tmp_path / "e.pcap", [bytes(14) + b"\x45\x00", bytes(10)])
    packets = read_pcap(path, strip_offset=14)
    assert [p.data for p in packets] == [b"\x45\x00"]


def test_pcap_truncated_record_names_index(tmp_path):
    path = write_pcap(tmp_path / "t.pcap", [b"abcd", b"efgh"])
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(PcapFormatError, match="record 1"):
        read_pcap_records(path)


def test_pcap_truncated_record_header(tmp_path):
    path = write_pcap(tmp_path / "h.pcap", [b"abcd"])
    path.write_bytes(path.read_bytes() + b"\x00" * 6)
    with pytest.raises(PcapFormatError, match="record 1 header"):
        read_pcap_records(path)


def test_written_pcap_has_classic_layout(tmp_path):
    path = write_pcap(tmp_path / "w.pcap", [b"xyz"], byteorder=">", snaplen=1500, timestamps=[4.25])
    data = path.read_bytes()
    assert struct.unpack(">IHHiIII", data[:24]) == (PCAP_MAGIC_USEC, 2, 4, 0, 0, 1500, 1)
    assert struct.unpack(">IIII", data[24:40]) == (4, 250000, 3, 3)
    assert data[40:] == b"xyz"


def test_pcap_bad_magic(tmp_path):
    path = tmp_path / "bad.pcap"
    path.write_bytes(b"\x00" * 24)
    with pytest.raises(PcapFormatError):
        read_pcap_records(path)


def test_pcap_captured_longer_than_original(tmp_path):
    header = struct.pack("<IHHiIII", PCAP_MAGIC_USEC, 2, 4, 0, 0, 65535, 1)
    record = struct.pack("<IIII", 0, 0, 4, 2) + b"abcd"
    path = tmp_path / "c.pcap"
    path.write_bytes(header + record)
    with pytest.raises(PcapFormatError, match="original_len"):
        read_pcap_records(path)


def test_ingest_pcaps_labels_and_normalizes(tmp_path):
    benign = write_pcap(tmp_path / "b.pcap", [b"\x01" * 5, b"\x02" * 500])
    malicious = write_pcap(tmp_path / "m.pcap", [b"\x03" * 40])
    ds = ingest_pcaps([benign], [malicious], length=32)
    assert len(ds) == 3
    assert ds.packet_length == 32
    assert ds.class_counts == {Label.BENIGN: 2, Label.MALICIOUS: 1}


def test_split_reproduces_paper_scale_counts():
    packets = [NormalizedPacket(b"\x00", Label.BENIGN)] * 18532 + [NormalizedPacket(b"\x01", Label.MALICIOUS)] * 40000
    train, test = split_dataset(LabeledDataset(tuple(packets)), 0.75, seed=3)
    assert train.class_counts == {Label.BENIGN: 13899, Label.MALICIOUS: 30000}
    assert test.class_counts == {Label.BENIGN: 4633, Label.MALICIOUS: 10000}


def test_split_is_deterministic_and_disjoint(small_corpus):
    a_train, a_test = split_dataset(small_corpus, 0.75, seed=5)
    b_train, _ = split_dataset(small_corpus, 0.75, seed=5)
    assert a_train.packets == b_train.packets
    assert len(a_train) + len(a_test) == len(small_corpus)
    assert a_train.split_tag == "train" and a_test.split_tag == "test"


def test_split_needs_two_members_per_class():
    ds = LabeledDataset((NormalizedPacket(b"\x00", Label.BENIGN), NormalizedPacket(b"\x01", Label.MALICIOUS)))
    with pytest.raises(DatasetError):
        split_dataset(ds, 0.5, seed=0)


def test_synthetic_classes_differ_only_at_signature():
    spec = SynthSpec(200, 200, 64, default_signature_positions(64), noise_seed=1)
    ds = synthesize_corpus(spec)
    matrix = ds.byte_matrix.astype(int)
    codes = ds.label_codes
    signature = list(spec.signature_positions)
    assert matrix[codes == 0][:, signature].max() <= 127
    assert matrix[codes == 1][:, signature].min() >= 128
    assert all(p.origin is Origin.SYNTHETIC for p in ds.packets)


def test_synthetic_corpus_is_seeded():
    spec = SynthSpec(20, 20, 32, default_signature_positions(32), noise_seed=9)
    assert synthesize_corpus(spec).packets == synthesize_corpus(spec).packets


def test_synth_spec_rejects_overlapping_ranges():
    with pytest.raises(DatasetError):
        SynthSpec(1, 1, 32, (8,), signature_values={Label.BENIGN: (0, 200), Label.MALICIOUS: (100, 255)})


def test_mask_priority_pins_signature_first():
    spec = SynthSpec(1, 1, 32, default_signature_positions(32))
    order = spec.mask_priority()
    assert sorted(order) == list(range(32))
    assert order[:16] == list(range(8, 24))
    assert order[16:] == [*range(8), *range(24, 32)]


def test_dataset_container_round_trip(tmp_path, small_corpus):
    path = write_dataset(tmp_path / "d.atkd", small_corpus, {"source": "test"})
    back = read_dataset(path)
    assert [p.data for p in back.packets] == [p.data for p in small_corpus.packets]
    assert [p.label for p in back.packets] == [p.label for p in small_corpus.packets]
    manifest = json.loads(manifest_path(path).read_text())
    assert manifest["count"] == len(small_corpus)
    assert manifest["provenance"] == {"source": "test"}


def test_dataset_rejects_bad_label_byte(tmp_path, small_corpus):
    path = write_dataset(tmp_path / "d.atkd", small_corpus)
    data = bytearray(path.read_bytes())
    data[14] = 7
    path.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match="label byte"):
        read_dataset(path)


def test_byte_matrix_shape(small_corpus):
    assert small_corpus.byte_matrix.shape == (240, 32)
    assert small_corpus.byte_matrix.dtype == np.uint8
