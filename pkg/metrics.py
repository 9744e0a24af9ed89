"""Attack metrics: MAPE between embedding norm profiles, AFR, ASR and ASIR."""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import EmbeddingMatrix
from .packet_model import Granularity, Label, TokenSequence

EPSILON = 1e-8
CSV_HEADER = ("epoch", "nids_kind", "mu", "embedding_mode", "afr", "asr", "asir", "mape")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    nids_kind: str
    mu: int
    embedding_mode: str
    afr: float
    asr: float
    asir: float
    mape: float

    def __post_init__(self):
        if self.afr + self.asr != 100.0:
            raise MetricError(f"afr {self.afr} and asr {self.asr} do not sum to 100")
        if self.mape < 0:
            raise MetricError(f"mape must be >= 0, got {self.mape}")

    def as_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict) -> "MetricRecord":
        try:
            return cls(
                epoch=int(row["epoch"]),
                nids_kind=str(row["nids_kind"]),
                mu=int(row["mu"]),
                embedding_mode=str(row["embedding_mode"]),
                afr=float(row["afr"]),
                asr=float(row["asr"]),
                asir=float(row["asir"]),
                mape=float(row["mape"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MetricError(f"malformed metric row {row!r}: {e}") from e


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        if np.any(self.minimum > self.maximum):
            raise MetricError("normalization minimum exceeds maximum")

    def normalize(self, vectors: np.ndarray) -> np.ndarray:
        span = self.maximum - self.minimum
        span = np.where(span > 0, span, 1.0)
        return (vectors - self.minimum) / span


def normalization_stats(emb: EmbeddingMatrix) -> NormalizationStats:
    table = emb.table.astype(np.float64)
    return NormalizationStats(table.min(axis=0), table.max(axis=0))


def normalized_norms(emb: EmbeddingMatrix, stats: NormalizationStats) -> np.ndarray:
    """L2 norm of every min-max normalized vocabulary row, shape (V,)."""
    return np.linalg.norm(stats.normalize(emb.table.astype(np.float64)), axis=1)


def _percentage_error(x_norms: np.ndarray, y_norms: np.ndarray) -> np.ndarray:
    denominator = np.where(x_norms == 0.0, EPSILON, x_norms)
    return 100.0 * np.mean(np.abs((x_norms - y_norms) / denominator), axis=-1)


def mape(x: TokenSequence, y: TokenSequence, emb: EmbeddingMatrix, stats: NormalizationStats) -> float:
    """Mean absolute percentage error of normalized embedding norms; ``x`` is the reference."""
    if x.granularity is not y.granularity or x.granularity is not emb.granularity:
        raise MetricError("mape needs sequences and table of one granularity")
    if len(x) != len(y):
        raise MetricError(f"mape needs equal lengths, got {len(x)} and {len(y)}")
    if not len(x):
        raise MetricError("mape of empty sequences is undefined")
    norms = normalized_norms(emb, stats)
    return float(_percentage_error(norms[x.tokens], norms[y.tokens]))


def mape_batch(
    reference: np.ndarray,
    generated: np.ndarray,
    emb: EmbeddingMatrix,
    stats: NormalizationStats | None = None,
) -> np.ndarray:
    """Row-wise mape over two (N, T) token matrices."""
    reference = np.asarray(reference, dtype=np.int64)
    generated = np.asarray(generated, dtype=np.int64)
    if reference.shape != generated.shape or reference.ndim != 2:
        raise MetricError(f"mape_batch needs matching (N, T) matrices, got {reference.shape} and {generated.shape}")
    norms = normalized_norms(emb, stats or normalization_stats(emb))
    return _percentage_error(norms[reference], norms[generated])


def _codes(labels: Sequence[Label] | np.ndarray) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        return labels.astype(np.int64).reshape(-1)
    return np.array([Label(label).code for label in labels], dtype=np.int64)


def afr(labels: Sequence[Label] | np.ndarray) -> float:
    """Percent of attack attempts the detector still flags as malicious."""
    codes = _codes(labels)
    if not codes.size:
        raise MetricError("afr of an empty label list is undefined")
    return 100.0 * int(codes.sum()) / codes.size


def asr(labels: Sequence[Label] | np.ndarray) -> float:
    return 100.0 - afr(labels)


def asir(asr_attack: float, asr_original: float) -> float:
    for name, value in (("asr_attack", asr_attack), ("asr_original", asr_original)):
        if not 0.0 <= value <= 100.0:
            raise MetricError(f"{name} must be in [0, 100], got {value}")
    return asr_attack - asr_original


def write_metric_rows(path: str | Path, records: Iterable[MetricRecord], append: bool = True) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    new_file = not append or not target.exists() or target.stat().st_size == 0
    with target.open("a" if append else "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_HEADER, lineterminator="\n")
        if new_file:
            writer.writeheader()
        for record in records:
            writer.writerow({k: _csv_value(v) for k, v in record.as_row().items()})
    return target


def _csv_value(value):
    return repr(value) if isinstance(value, float) else value


def read_metric_rows(path: str | Path) -> list[MetricRecord]:
    target = Path(path)
    try:
        handle = target.open(newline="", encoding="utf-8")
    except OSError as e:
        raise MetricError(f"cannot read metrics file {target}: {e}") from e
    with handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise MetricError(f"{target}: expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        return [MetricRecord.from_row(row) for row in reader]


def mode_name(granularity: Granularity) -> str:
    return Granularity(granularity).value
