import json
from pathlib import Path

from .utils import env_seed

PACKET_LENGTH_KEY = "packet.length"
GRANULARITY_KEY = "packet.granularity"
MASK_MU_KEY = "mask.mu"
MASK_POSITIONS_KEY = "mask.positions"
EMBEDDING_DIM_KEY = "embedding.dim"
EMBEDDING_WINDOW_KEY = "embedding.window"
EMBEDDING_EPOCHS_KEY = "embedding.epochs"
EMBEDDING_LR_KEY = "embedding.lr"
EMBEDDING_PATH_KEY = "embedding.path"
GENERATOR_HIDDEN_KEY = "generator.hidden"
GENERATOR_MLE_LR_KEY = "generator.mle_lr"
GENERATOR_PG_LR_KEY = "generator.pg_lr"
GENERATOR_MLE_EPOCHS_KEY = "generator.mle_epochs"
GENERATOR_BASELINE_KEY = "generator.baseline"
ROLLOUT_M_KEY = "rollout.m"
ROLLOUT_LAG_KEY = "rollout.lag"
DISC_WINDOWS_KEY = "discriminator.windows"
DISC_FILTERS_KEY = "discriminator.filters"
DISC_BATCH_KEY = "discriminator.batch_size"
DISC_DROPOUT_KEY = "discriminator.dropout"
DISC_LR_KEY = "discriminator.lr"
DISC_PRETRAIN_EPOCHS_KEY = "discriminator.pretrain_epochs"
G_STEPS_KEY = "train.g_steps"
D_STEPS_KEY = "train.d_steps"
K_KEY = "train.k"
SAMPLE_BATCH_KEY = "train.batch"
ADVERSARIAL_BATCH_KEY = "train.adversarial_batch"
EVAL_BATCH_KEY = "train.eval_batch"
EPOCHS_KEY = "run.epochs"
SEED_KEY = "run.seed"
EARLY_STOP_KEY = "run.early_stop"
DATA_SOURCE_KEY = "data.source"
DATASET_PATH_KEY = "data.dataset"
BENIGN_PCAPS_KEY = "data.benign_pcaps"
MALICIOUS_PCAPS_KEY = "data.malicious_pcaps"
STRIP_OFFSET_KEY = "data.strip_offset"
TRAIN_FRACTION_KEY = "data.train_fraction"
SYNTH_BENIGN_KEY = "synth.n_benign"
SYNTH_MALICIOUS_KEY = "synth.n_malicious"
SYNTH_JITTER_KEY = "synth.jitter"
NIDS_KIND_KEY = "nids.kind"
NIDS_EXTRACTOR_KEY = "nids.extractor"
NIDS_EVAL_KINDS_KEY = "nids.eval_kinds"
NIDS_PATH_KEY = "nids.path"

GRANULARITIES = {"one_byte", "two_byte"}
DATA_SOURCES = {"synth", "dataset", "pcap"}
NIDS_KINDS = {"mlp", "svm", "dt", "lr"}
EXTRACTORS = {"byte_scaled", "byte_histogram"}

DEFAULTS = {
    PACKET_LENGTH_KEY: 300,
    GRANULARITY_KEY: "one_byte",
    MASK_MU_KEY: 20,
    MASK_POSITIONS_KEY: None,
    EMBEDDING_DIM_KEY: 32,
    EMBEDDING_WINDOW_KEY: 2,
    EMBEDDING_EPOCHS_KEY: 5,
    EMBEDDING_LR_KEY: 0.01,
    EMBEDDING_PATH_KEY: None,
    GENERATOR_HIDDEN_KEY: 64,
    GENERATOR_MLE_LR_KEY: 1e-3,
    GENERATOR_PG_LR_KEY: 1e-4,
    GENERATOR_MLE_EPOCHS_KEY: 10,
    GENERATOR_BASELINE_KEY: False,
    ROLLOUT_M_KEY: 16,
    ROLLOUT_LAG_KEY: 0,
    DISC_WINDOWS_KEY: [3, 4, 5],
    DISC_FILTERS_KEY: 64,
    DISC_BATCH_KEY: 64,
    DISC_DROPOUT_KEY: 0.0,
    DISC_LR_KEY: 1e-3,
    DISC_PRETRAIN_EPOCHS_KEY: 3,
    G_STEPS_KEY: 1,
    D_STEPS_KEY: 3,
    K_KEY: 3,
    SAMPLE_BATCH_KEY: 64,
    ADVERSARIAL_BATCH_KEY: 256,
    EVAL_BATCH_KEY: 512,
    EPOCHS_KEY: 30,
    SEED_KEY: None,
    EARLY_STOP_KEY: False,
    DATA_SOURCE_KEY: "synth",
    DATASET_PATH_KEY: None,
    BENIGN_PCAPS_KEY: [],
    MALICIOUS_PCAPS_KEY: [],
    STRIP_OFFSET_KEY: 0,
    TRAIN_FRACTION_KEY: 0.75,
    SYNTH_BENIGN_KEY: 2000,
    SYNTH_MALICIOUS_KEY: 2000,
    SYNTH_JITTER_KEY: 12,
    NIDS_KIND_KEY: "dt",
    NIDS_EXTRACTOR_KEY: "byte_scaled",
    NIDS_EVAL_KINDS_KEY: [],
    NIDS_PATH_KEY: None,
}

ALIASES = {
    "mu": MASK_MU_KEY,
    "nids": NIDS_KIND_KEY,
    "epochs": EPOCHS_KEY,
    "seed": SEED_KEY,
    "granularity": GRANULARITY_KEY,
    "length": PACKET_LENGTH_KEY,
}


class ConfigError(ValueError):
    pass


def _to_int(key: str, value, min_value: int | None = None, max_value: int | None = None) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    try:
        number = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    if isinstance(value, float) and value != number:
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if min_value is not None and number < min_value:
        raise ConfigError(f"{key} must be >= {min_value}, got {number}")
    if max_value is not None and number > max_value:
        raise ConfigError(f"{key} must be <= {max_value}, got {number}")
    return number


def _to_float(key: str, value, min_value: float | None = None, max_value: float | None = None, open_min: bool = False) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {value!r}") from None
    if min_value is not None and (number <= min_value if open_min else number < min_value):
        raise ConfigError(f"{key} must be {'>' if open_min else '>='} {min_value}, got {number}")
    if max_value is not None and number > max_value:
        raise ConfigError(f"{key} must be <= {max_value}, got {number}")
    return number


def _to_choice(key: str, value, allowed: set[str]) -> str:
    token = str(value or "").strip().lower()
    if token in allowed:
        return token
    raise ConfigError(f"{key} must be one of {sorted(allowed)}, got {value!r}")


def _to_bool(key: str, value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        token = value.strip().lower()
        if token in {"1", "true", "yes", "on"}:
            return True
        if token in {"0", "false", "no", "off"}:
            return False
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    raise ConfigError(f"{key} must be a boolean, got {value!r}")


def _to_list(key: str, value) -> list:
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (list, tuple)):
        return list(value)
    raise ConfigError(f"{key} must be a list, got {value!r}")


def _to_int_list(key: str, value, min_value: int | None = None) -> list[int]:
    return [_to_int(key, item, min_value) for item in _to_list(key, value)]


def _to_optional_path(key: str, value) -> str | None:
    if value in (None, ""):
        return None
    return str(value)


_COERCERS = {
    PACKET_LENGTH_KEY: lambda k, v: _to_int(k, v, 1),
    GRANULARITY_KEY: lambda k, v: _to_choice(k, v, GRANULARITIES),
    MASK_MU_KEY: lambda k, v: _to_int(k, v, 0),
    MASK_POSITIONS_KEY: lambda k, v: None if v is None else _to_int_list(k, v, 0),
    EMBEDDING_DIM_KEY: lambda k, v: _to_int(k, v, 1),
    EMBEDDING_WINDOW_KEY: lambda k, v: _to_int(k, v, 1),
    EMBEDDING_EPOCHS_KEY: lambda k, v: _to_int(k, v, 0),
    EMBEDDING_LR_KEY: lambda k, v: _to_float(k, v, 0.0, open_min=True),
    EMBEDDING_PATH_KEY: _to_optional_path,
    GENERATOR_HIDDEN_KEY: lambda k, v: _to_int(k, v, 1),
    GENERATOR_MLE_LR_KEY: lambda k, v: _to_float(k, v, 0.0, open_min=True),
    GENERATOR_PG_LR_KEY: lambda k, v: _to_float(k, v, 0.0, open_min=True),
    GENERATOR_MLE_EPOCHS_KEY: lambda k, v: _to_int(k, v, 0),
    GENERATOR_BASELINE_KEY: _to_bool,
    ROLLOUT_M_KEY: lambda k, v: _to_int(k, v, 1),
    ROLLOUT_LAG_KEY: lambda k, v: _to_int(k, v, 0),
    DISC_WINDOWS_KEY: lambda k, v: _to_int_list(k, v, 1),
    DISC_FILTERS_KEY: lambda k, v: _to_int(k, v, 1),
    DISC_BATCH_KEY: lambda k, v: _to_int(k, v, 2),
    DISC_DROPOUT_KEY: lambda k, v: _to_float(k, v, 0.0, 0.99),
    DISC_LR_KEY: lambda k, v: _to_float(k, v, 0.0, open_min=True),
    DISC_PRETRAIN_EPOCHS_KEY: lambda k, v: _to_int(k, v, 0),
    G_STEPS_KEY: lambda k, v: _to_int(k, v, 1),
    D_STEPS_KEY: lambda k, v: _to_int(k, v, 1),
    K_KEY: lambda k, v: _to_int(k, v, 1),
    SAMPLE_BATCH_KEY: lambda k, v: _to_int(k, v, 1),
    ADVERSARIAL_BATCH_KEY: lambda k, v: _to_int(k, v, 1),
    EVAL_BATCH_KEY: lambda k, v: _to_int(k, v, 1),
    EPOCHS_KEY: lambda k, v: _to_int(k, v, 0),
    SEED_KEY: lambda k, v: None if v is None else _to_int(k, v, 0),
    EARLY_STOP_KEY: _to_bool,
    DATA_SOURCE_KEY: lambda k, v: _to_choice(k, v, DATA_SOURCES),
    DATASET_PATH_KEY: _to_optional_path,
    BENIGN_PCAPS_KEY: lambda k, v: [str(p) for p in _to_list(k, v)],
    MALICIOUS_PCAPS_KEY: lambda k, v: [str(p) for p in _to_list(k, v)],
    STRIP_OFFSET_KEY: lambda k, v: _to_int(k, v, 0),
    TRAIN_FRACTION_KEY: lambda k, v: _to_float(k, v, 0.0, 1.0, open_min=True),
    SYNTH_BENIGN_KEY: lambda k, v: _to_int(k, v, 0),
    SYNTH_MALICIOUS_KEY: lambda k, v: _to_int(k, v, 0),
    SYNTH_JITTER_KEY: lambda k, v: _to_float(k, v, 0.0),
    NIDS_KIND_KEY: lambda k, v: _to_choice(k, v, NIDS_KINDS),
    NIDS_EXTRACTOR_KEY: lambda k, v: _to_choice(k, v, EXTRACTORS),
    NIDS_EVAL_KINDS_KEY: lambda k, v: [_to_choice(k, item, NIDS_KINDS) for item in _to_list(k, v)],
    NIDS_PATH_KEY: _to_optional_path,
}


def _canonical_key(key: str) -> str:
    key = str(key).strip()
    key = ALIASES.get(key, key)
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")
    return key


def load_config_file(path: str | Path) -> dict:
    """Flat dotted-key JSON object; a run manifest contributes its ``config`` object."""
    source = Path(path)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {source}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config {source} is not valid JSON: {e}") from e
    if isinstance(payload, dict) and isinstance(payload.get("config"), dict) and "status" in payload:
        payload = payload["config"]
    if not isinstance(payload, dict):
        raise ConfigError(f"config {source} must hold a JSON object")
    return payload


def parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        overrides[_canonical_key(key)] = value
    return overrides


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    merged = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            merged[_canonical_key(key)] = value
    config = {key: _COERCERS[key](key, value) for key, value in merged.items()}
    if config[SEED_KEY] is None:
        config[SEED_KEY] = env_seed()
    _check_consistency(config)
    return config


def _check_consistency(config: dict) -> None:
    length = config[PACKET_LENGTH_KEY]
    if config[GRANULARITY_KEY] == "two_byte" and length % 2:
        raise ConfigError(f"{PACKET_LENGTH_KEY} must be even for two_byte granularity, got {length}")
    if config[MASK_MU_KEY] > length:
        raise ConfigError(f"{MASK_MU_KEY} must be <= {PACKET_LENGTH_KEY} ({length}), got {config[MASK_MU_KEY]}")
    positions = config[MASK_POSITIONS_KEY]
    if positions is not None:
        if len(set(positions)) != config[MASK_MU_KEY]:
            raise ConfigError(
                f"{MASK_POSITIONS_KEY} lists {len(set(positions))} distinct positions but {MASK_MU_KEY} is {config[MASK_MU_KEY]}"
            )
        if max(positions, default=0) >= length:
            raise ConfigError(f"{MASK_POSITIONS_KEY} must be < {length}, got {max(positions)}")
        if config[GRANULARITY_KEY] == "two_byte":
            unpaired = sorted(p for p in set(positions) if p ^ 1 not in positions)
            if unpaired:
                raise ConfigError(
                    f"{MASK_POSITIONS_KEY} must list whole byte pairs for two_byte granularity; "
                    f"missing the partners of {unpaired}"
                )
    if config[GRANULARITY_KEY] == "two_byte" and config[MASK_MU_KEY] % 2:
        raise ConfigError(f"{MASK_MU_KEY} must be even for two_byte granularity, got {config[MASK_MU_KEY]}")
    tokens = length // (2 if config[GRANULARITY_KEY] == "two_byte" else 1)
    if not config[DISC_WINDOWS_KEY]:
        raise ConfigError(f"{DISC_WINDOWS_KEY} must list at least one window size")
    if max(config[DISC_WINDOWS_KEY]) > tokens:
        raise ConfigError(f"{DISC_WINDOWS_KEY} must be <= the sequence length {tokens}, got {max(config[DISC_WINDOWS_KEY])}")
    if config[DATA_SOURCE_KEY] == "dataset" and not config[DATASET_PATH_KEY]:
        raise ConfigError(f"{DATASET_PATH_KEY} is required when {DATA_SOURCE_KEY} is dataset")
    if config[DATA_SOURCE_KEY] == "pcap" and not (config[BENIGN_PCAPS_KEY] and config[MALICIOUS_PCAPS_KEY]):
        raise ConfigError(f"{BENIGN_PCAPS_KEY} and {MALICIOUS_PCAPS_KEY} are required when {DATA_SOURCE_KEY} is pcap")


def save_config(path: str | Path, config: dict) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    return target
