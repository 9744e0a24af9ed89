import importlib.util
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

# Same registration as main.py: the checkout folder becomes the "trafficgan" package.
if "trafficgan" not in sys.modules:
    _spec = importlib.util.spec_from_file_location(
        "trafficgan",
        str(ROOT / "__init__.py"),
        submodule_search_locations=[str(ROOT)],
    )
    _pkg = importlib.util.module_from_spec(_spec)
    _pkg.__path__ = [str(ROOT)]
    _pkg.__package__ = "trafficgan"
    sys.modules["trafficgan"] = _pkg
    _spec.loader.exec_module(_pkg)

import numpy as np  # noqa: E402

from trafficgan.ingest import SynthSpec, default_signature_positions, synthesize_corpus  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_corpus():
    spec = SynthSpec(
        n_benign=120,
        n_malicious=120,
        length=32,
        signature_positions=default_signature_positions(32),
        noise_seed=7,
    )
    return synthesize_corpus(spec)


def tiny_config(**overrides) -> dict:
    """Flat config for a seconds-long run on a synthetic corpus."""
    config = {
        "packet.length": 16,
        "mask.mu": 4,
        "embedding.dim": 4,
        "embedding.epochs": 1,
        "generator.hidden": 8,
        "generator.mle_epochs": 1,
        "rollout.m": 2,
        "discriminator.windows": [2, 3],
        "discriminator.filters": 4,
        "discriminator.pretrain_epochs": 1,
        "train.d_steps": 1,
        "train.k": 1,
        "train.batch": 8,
        "train.adversarial_batch": 16,
        "train.eval_batch": 32,
        "run.epochs": 2,
        "run.seed": 11,
        "synth.n_benign": 60,
        "synth.n_malicious": 60,
        "nids.kind": "dt",
    }
    config.update(overrides)
    return config
