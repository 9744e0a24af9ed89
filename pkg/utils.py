import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
# three live in the Philox counter, one in the upper key word
MAX_LEADING_KEYS = 4

SEED_ENV_VAR = "ATTACKGAN_SEED"
DEFAULT_SEED = 1234


def ensure_dir(path: str | Path) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def env_seed(default: int = DEFAULT_SEED) -> int:
    raw = os.environ.get(SEED_ENV_VAR, "").strip()
    if not raw:
        return int(default)
    try:
        return int(raw, 0) & _MASK64
    except ValueError:
        return int(default)


def _entropy_words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        return [0, int(part) & _MASK64]
    raw = str(part).encode("utf-8")
    return [1, len(raw), int.from_bytes(raw, "little")]


def derive_seed(*parts) -> int:
    """Stable 64-bit seed for a named random stream, e.g. (run_seed, "rollout", epoch)."""
    entropy = [len(parts)]
    for part in parts:
        entropy.extend(_entropy_words(part))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def counter_uniforms(seed: int, *keys) -> np.ndarray:
    """Uniforms in [0, 1) addressed by integer keys instead of draw order.

    The last key is an offset into a Philox stream whose counter holds the
    leading keys, so the value at a key tuple depends only on (seed, keys) and
    results do not change with batching, chunking or scheduling.
    """
    if not keys:
        return np.float64(np.random.Generator(np.random.Philox(key=int(seed) & _MASK64)).random())
    arrays = np.broadcast_arrays(*[np.asarray(key, dtype=np.int64) for key in keys])
    shape = arrays[0].shape
    *leading, offsets = [a.reshape(-1) for a in arrays]
    if len(leading) > MAX_LEADING_KEYS:
        raise ValueError(f"counter_uniforms takes at most {MAX_LEADING_KEYS + 1} keys, got {len(keys)}")
    if offsets.size and offsets.min() < 0:
        raise ValueError("the last counter key must be non-negative")
    out = np.empty(offsets.size, dtype=np.float64)
    if not offsets.size:
        return out.reshape(shape)
    words = np.zeros((offsets.size, MAX_LEADING_KEYS), dtype=np.uint64)
    for index, key in enumerate(leading):
        words[:, index] = key.astype(np.uint64)
    streams, which, counts = np.unique(words, axis=0, return_inverse=True, return_counts=True)
    groups = np.split(np.argsort(which.reshape(-1), kind="stable"), np.cumsum(counts)[:-1])
    for stream, hits in zip(streams, groups):
        counter = np.zeros(4, dtype=np.uint64)
        counter[1:] = stream[:3]
        key = np.array([int(seed) & _MASK64, int(stream[3])], dtype=np.uint64)
        draws = np.random.Generator(np.random.Philox(key=key, counter=counter)).random(int(offsets[hits].max()) + 1)
        out[hits] = draws[offsets[hits]]
    return out.reshape(shape)


def sha256_file(path: str | Path, chunk_size: int = 1024 * 1024) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        while True:
            chunk = handle.read(chunk_size)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def format_duration(seconds: float) -> str:
    if seconds is None or not math.isfinite(seconds) or seconds < 0:
        return "--:--"
    total_seconds = int(round(seconds))
    hours = total_seconds // 3600
    minutes = (total_seconds % 3600) // 60
    secs = total_seconds % 60
    if hours > 0:
        return f"{hours}:{minutes:02d}:{secs:02d}"
    return f"{minutes:02d}:{secs:02d}"


def runtime_versions() -> dict:
    versions = {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
    }
    for module_name in ("torch", "sklearn", "joblib", "matplotlib"):
        try:
            module = __import__(module_name)
            versions[module_name] = getattr(module, "__version__", "unknown")
        except Exception as e:
            versions[module_name] = f"unavailable ({e})"
    return versions
