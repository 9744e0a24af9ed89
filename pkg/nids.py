"""Black-box intrusion detectors.

Only ``predict`` and ``evaluate_nids`` are meant to be called once a model is
trained; nothing outside this module reads the fitted estimator.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import joblib
import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score, precision_score, recall_score
from sklearn.neural_network import MLPClassifier
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier

from .ingest import LabeledDataset
from .packet_model import Label, NormalizedPacket, stack_packets

logger = logging.getLogger(__name__)

DEFAULT_EXTRACTOR = "byte_scaled"


class NidsError(RuntimeError):
    pass


class NidsKind(str, Enum):
    MLP = "mlp"
    SVM = "svm"
    DT = "dt"
    LR = "lr"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            lowered = value.strip().lower()
            for member in cls:
                if member.value == lowered:
                    return member
        return None


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    source_packet_id: int | None = None

    def __len__(self) -> int:
        return int(self.values.shape[0])


def _byte_scaled(matrix: np.ndarray) -> np.ndarray:
    return matrix.astype(np.float64) / 255.0


def _byte_histogram(matrix: np.ndarray) -> np.ndarray:
    counts = np.zeros((matrix.shape[0], 256), dtype=np.float64)
    rows = np.repeat(np.arange(matrix.shape[0]), matrix.shape[1])
    np.add.at(counts, (rows, matrix.reshape(-1).astype(np.int64)), 1.0)
    return counts / max(matrix.shape[1], 1)


# id -> (versioned id, vectorized extractor over an (N, P) uint8 matrix)
FEATURE_EXTRACTORS: dict[str, tuple[str, Callable[[np.ndarray], np.ndarray]]] = {
    "byte_scaled": ("byte_scaled/v1", _byte_scaled),
    "byte_histogram": ("byte_histogram/v1", _byte_histogram),
}


def _extractor(name: str) -> tuple[str, Callable[[np.ndarray], np.ndarray]]:
    try:
        return FEATURE_EXTRACTORS[name]
    except KeyError:
        raise NidsError(f"unknown feature extractor {name!r}; known: {sorted(FEATURE_EXTRACTORS)}") from None


def extract_features(pkt: NormalizedPacket, extractor: str = DEFAULT_EXTRACTOR, packet_id: int | None = None) -> FeatureVector:
    _, fn = _extractor(extractor)
    return FeatureVector(fn(pkt.as_array()[None, :])[0], packet_id)


def feature_matrix(packets: Sequence[NormalizedPacket] | np.ndarray, extractor: str = DEFAULT_EXTRACTOR) -> np.ndarray:
    matrix = packets if isinstance(packets, np.ndarray) else stack_packets(packets)
    _, fn = _extractor(extractor)
    return fn(np.asarray(matrix, dtype=np.uint8))


def _make_estimator(kind: NidsKind, seed: int):
    if kind is NidsKind.MLP:
        return MLPClassifier(hidden_layer_sizes=(64,), activation="relu", solver="adam", max_iter=300, random_state=seed)
    if kind is NidsKind.SVM:
        return SVC(kernel="rbf", C=1.0, gamma="scale", random_state=seed)
    if kind is NidsKind.DT:
        return DecisionTreeClassifier(criterion="gini", max_depth=None, random_state=seed)
    # lbfgs with the default L2 penalty
    return LogisticRegression(C=1.0, max_iter=1000, random_state=seed)


@dataclass(frozen=True)
class NidsReport:
    accuracy: float
    precision: float
    recall: float

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall}


@dataclass(eq=False)
class NidsModel:
    kind: NidsKind
    extractor: str
    n_features: int
    seed: int
    _estimator: object = field(repr=False)
    metrics: dict = field(default_factory=dict)

    @property
    def extractor_id(self) -> str:
        return _extractor(self.extractor)[0]

    @property
    def hyperparameters(self) -> dict:
        params = self._estimator.get_params()
        return {k: v for k, v in sorted(params.items()) if isinstance(v, (int, float, str, bool, tuple, type(None)))}

    def fingerprint(self) -> str:
        """Content hash of the fitted estimator."""
        return joblib.hash(self._estimator)

    def predict_matrix(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise NidsError(f"{self.kind.value} expects {self.n_features} features, got shape {features.shape}")
        return np.asarray(self._estimator.predict(features), dtype=np.int64)

    def predict_packets(self, packets: Sequence[NormalizedPacket] | np.ndarray) -> np.ndarray:
        """Class codes (1 = malicious) for packets or an (N, P) byte matrix."""
        return self.predict_matrix(feature_matrix(packets, self.extractor))


def train_nids(
    kind: NidsKind | str,
    train: LabeledDataset,
    seed: int,
    test: LabeledDataset | None = None,
    extractor: str = DEFAULT_EXTRACTOR,
) -> NidsModel:
    kind = NidsKind(kind)
    counts = train.class_counts
    if not counts[Label.BENIGN] or not counts[Label.MALICIOUS]:
        raise NidsError(
            f"training set must contain both classes, got benign={counts[Label.BENIGN]} "
            f"malicious={counts[Label.MALICIOUS]}"
        )
    features = feature_matrix(train.byte_matrix, extractor)
    estimator = _make_estimator(kind, int(seed) % (2 ** 32))
    estimator.fit(features, train.label_codes)
    model = NidsModel(kind, extractor, int(features.shape[1]), int(seed), estimator)
    model.metrics["train"] = evaluate_nids(model, train).as_dict()
    if test is not None and len(test):
        model.metrics["test"] = evaluate_nids(model, test).as_dict()
    logger.info("Trained NIDS %s: %s", kind.value, model.metrics)
    return model


def predict(model: NidsModel, batch: Sequence[FeatureVector]) -> list[Label]:
    if not batch:
        return []
    lengths = {len(fv) for fv in batch}
    if lengths != {model.n_features}:
        raise NidsError(f"{model.kind.value} expects {model.n_features} features, got lengths {sorted(lengths)}")
    codes = model.predict_matrix(np.stack([fv.values for fv in batch]))
    return [Label.from_code(c) for c in codes]


def classification_report(true_codes: np.ndarray, predicted_codes: np.ndarray) -> NidsReport:
    return NidsReport(
        accuracy=float(accuracy_score(true_codes, predicted_codes)),
        precision=float(precision_score(true_codes, predicted_codes, pos_label=1, zero_division=0)),
        recall=float(recall_score(true_codes, predicted_codes, pos_label=1, zero_division=0)),
    )


def evaluate_nids(model: NidsModel, test: LabeledDataset) -> NidsReport:
    if not len(test):
        raise NidsError("cannot evaluate on an empty dataset")
    return classification_report(test.label_codes, model.predict_packets(test.byte_matrix))


def transplant_detection_rate(
    model: NidsModel,
    benign: Sequence[NormalizedPacket],
    malicious: Sequence[NormalizedPacket],
    positions: Sequence[int],
    seed: int,
) -> float:
    """Share of benign packets flagged malicious after copying ``positions`` from random malicious packets."""
    if not benign or not malicious:
        raise NidsError("transplant check needs benign and malicious packets")
    rng = np.random.default_rng(seed)
    hosts = stack_packets(benign).copy()
    donors = stack_packets(malicious)[rng.integers(0, len(malicious), size=len(benign))]
    index = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if index.size:
        hosts[:, index] = donors[:, index]
    return float(model.predict_packets(hosts).mean())


def sidecar_path(path: str | Path) -> Path:
    target = Path(path)
    return target.with_name(target.name + ".json")


def save_nids(model: NidsModel, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(model._estimator, target)
    meta = {
        "kind": model.kind.value,
        "extractor": model.extractor,
        "extractor_id": model.extractor_id,
        "n_features": model.n_features,
        "seed": model.seed,
        "metrics": model.metrics,
        "hyperparameters": {k: repr(v) for k, v in model.hyperparameters.items()},
    }
    sidecar_path(target).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return target


def load_nids(path: str | Path, expected_extractor: str | None = None) -> NidsModel:
    target = Path(path)
    try:
        meta = json.loads(sidecar_path(target).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise NidsError(f"cannot read NIDS metadata for {target}: {e}") from e
    if expected_extractor is not None:
        expected_id = _extractor(expected_extractor)[0]
        if meta.get("extractor_id") != expected_id:
            raise NidsError(
                f"{target}: model was trained with extractor {meta.get('extractor_id')!r}, "
                f"configuration expects {expected_id!r}"
            )
    estimator = joblib.load(target)
    return NidsModel(
        NidsKind(meta["kind"]),
        meta["extractor"],
        int(meta["n_features"]),
        int(meta["seed"]),
        estimator,
        dict(meta.get("metrics", {})),
    )
