"""Adversarial training loop: pretraining, g-steps, d-steps, evaluation and run artifacts."""

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import settings as keys
from .checkpoint import load_tensors, optimizer_tensors, restore_optimizer, save_tensors
from .discriminator import PacketDiscriminator, make_optimizer as make_disc_optimizer, train_discriminator
from .embedding import EmbeddingMatrix, train_skipgram
from .generator import (
    MovingAverageBaseline,
    PacketGenerator,
    make_optimizer as make_gen_optimizer,
    mle_pretrain,
    policy_gradient_update,
    sample_batch,
)
from .ingest import (
    LabeledDataset,
    SynthSpec,
    default_signature_positions,
    ingest_pcaps,
    manifest_path as dataset_manifest_path,
    read_dataset,
    split_dataset,
    synthesize_corpus,
)
from .metrics import (
    MetricRecord,
    afr,
    asir,
    mape_batch,
    normalization_stats,
    read_metric_rows,
    write_metric_rows,
)
from .nids import NidsKind, NidsModel, load_nids, save_nids, train_nids
from .packet_model import (
    Granularity,
    Label,
    build_mask,
    bytes_to_tokens,
    renormalize,
    stack_packets,
    tokens_to_bytes,
)
from .rollout import RolloutConfig, batch_action_values
from .utils import derive_seed, ensure_dir, format_duration, runtime_versions, sha256_file, sha256_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
EVALUATION_NAME = "evaluation.json"
CHECKPOINT_DIR = "checkpoints"
EMBEDDING_FILE = "embedding.atkg"
BEST_NAME = "best"
EARLY_STOP_TOLERANCE = 1e-3
EARLY_STOP_WINDOW = 3

STATUS_RUNNING = "RUNNING"
STATUS_COMPLETED = "COMPLETED"
STATUS_FAILED = "FAILED"


class RunError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    packet_length: int
    granularity: Granularity
    mu: int
    mask_positions: tuple | None
    embed_dim: int
    embed_window: int
    embed_epochs: int
    embed_lr: float
    embedding_path: str | None
    hidden: int
    mle_lr: float
    pg_lr: float
    mle_epochs: int
    baseline: bool
    rollout_m: int
    rollout_lag: int
    disc_windows: tuple
    disc_filters: int
    disc_batch: int
    disc_dropout: float
    disc_lr: float
    disc_pretrain_epochs: int
    g_steps: int
    d_steps: int
    k: int
    sample_batch: int
    adversarial_batch: int
    eval_batch: int
    epochs: int
    seed: int
    early_stop: bool
    data_source: str
    dataset_path: str | None
    benign_pcaps: tuple
    malicious_pcaps: tuple
    strip_offset: int
    train_fraction: float
    synth_benign: int
    synth_malicious: int
    synth_jitter: float
    nids_kind: NidsKind
    nids_extractor: str
    nids_eval_kinds: tuple
    nids_path: str | None
    values: dict = field(repr=False, compare=False, default_factory=dict)

    @classmethod
    def from_config(cls, config: dict) -> "RunConfig":
        """Build from a resolved flat configuration (see settings.resolve_config)."""
        c = keys.resolve_config(config)
        positions = c[keys.MASK_POSITIONS_KEY]
        primary = NidsKind(c[keys.NIDS_KIND_KEY])
        eval_kinds = [primary] + [NidsKind(k) for k in c[keys.NIDS_EVAL_KINDS_KEY]]
        return cls(
            packet_length=c[keys.PACKET_LENGTH_KEY],
            granularity=Granularity(c[keys.GRANULARITY_KEY]),
            mu=c[keys.MASK_MU_KEY],
            mask_positions=None if positions is None else tuple(sorted(set(positions))),
            embed_dim=c[keys.EMBEDDING_DIM_KEY],
            embed_window=c[keys.EMBEDDING_WINDOW_KEY],
            embed_epochs=c[keys.EMBEDDING_EPOCHS_KEY],
            embed_lr=c[keys.EMBEDDING_LR_KEY],
            embedding_path=c[keys.EMBEDDING_PATH_KEY],
            hidden=c[keys.GENERATOR_HIDDEN_KEY],
            mle_lr=c[keys.GENERATOR_MLE_LR_KEY],
            pg_lr=c[keys.GENERATOR_PG_LR_KEY],
            mle_epochs=c[keys.GENERATOR_MLE_EPOCHS_KEY],
            baseline=c[keys.GENERATOR_BASELINE_KEY],
            rollout_m=c[keys.ROLLOUT_M_KEY],
            rollout_lag=c[keys.ROLLOUT_LAG_KEY],
            disc_windows=tuple(c[keys.DISC_WINDOWS_KEY]),
            disc_filters=c[keys.DISC_FILTERS_KEY],
            disc_batch=c[keys.DISC_BATCH_KEY],
            disc_dropout=c[keys.DISC_DROPOUT_KEY],
            disc_lr=c[keys.DISC_LR_KEY],
            disc_pretrain_epochs=c[keys.DISC_PRETRAIN_EPOCHS_KEY],
            g_steps=c[keys.G_STEPS_KEY],
            d_steps=c[keys.D_STEPS_KEY],
            k=c[keys.K_KEY],
            sample_batch=c[keys.SAMPLE_BATCH_KEY],
            adversarial_batch=c[keys.ADVERSARIAL_BATCH_KEY],
            eval_batch=c[keys.EVAL_BATCH_KEY],
            epochs=c[keys.EPOCHS_KEY],
            seed=c[keys.SEED_KEY],
            early_stop=c[keys.EARLY_STOP_KEY],
            data_source=c[keys.DATA_SOURCE_KEY],
            dataset_path=c[keys.DATASET_PATH_KEY],
            benign_pcaps=tuple(c[keys.BENIGN_PCAPS_KEY]),
            malicious_pcaps=tuple(c[keys.MALICIOUS_PCAPS_KEY]),
            strip_offset=c[keys.STRIP_OFFSET_KEY],
            train_fraction=c[keys.TRAIN_FRACTION_KEY],
            synth_benign=c[keys.SYNTH_BENIGN_KEY],
            synth_malicious=c[keys.SYNTH_MALICIOUS_KEY],
            synth_jitter=c[keys.SYNTH_JITTER_KEY],
            nids_kind=primary,
            nids_extractor=c[keys.NIDS_EXTRACTOR_KEY],
            nids_eval_kinds=tuple(dict.fromkeys(eval_kinds)),
            nids_path=c[keys.NIDS_PATH_KEY],
            values=c,
        )

    @property
    def sequence_length(self) -> int:
        return self.granularity.sequence_length(self.packet_length)

    def stream(self, *parts) -> int:
        """Seed of a named random stream derived from the run seed."""
        return derive_seed(self.seed, *parts)


@dataclass
class TemplatePool:
    """Malicious packets serving as mask templates, with their forced tokens precomputed."""

    masks: list
    forced: np.ndarray
    flags: np.ndarray
    template_bytes: np.ndarray

    @classmethod
    def build(cls, packets, positions, granularity: Granularity) -> "TemplatePool":
        if not packets:
            raise RunError("no malicious packets available as mask templates")
        masks = [build_mask(p, positions, granularity) for p in packets]
        forced = np.stack([m.template_tokens().tokens for m in masks])
        flags = np.stack([m.token_flags for m in masks])
        return cls(masks, forced, flags, stack_packets(packets))

    def __len__(self) -> int:
        return len(self.masks)

    def draw(self, count: int, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).integers(0, len(self), size=count)


@dataclass
class RunState:
    epoch: int
    cfg: RunConfig
    train: LabeledDataset
    test: LabeledDataset
    positions: tuple
    train_templates: TemplatePool
    test_templates: TemplatePool
    emb: EmbeddingMatrix
    table: torch.Tensor
    detectors: dict
    gen: PacketGenerator
    rollout_gen: PacketGenerator
    disc: PacketDiscriminator
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    baseline: MovingAverageBaseline | None
    asr_original: dict
    history: list = field(default_factory=list)
    disc_trace: list = field(default_factory=list)
    best: dict = field(default_factory=lambda: {"epoch": None, "afr": None})
    timings: list = field(default_factory=list)
    mle_history: list = field(default_factory=list)

    @property
    def nids(self) -> NidsModel:
        return self.detectors[self.cfg.nids_kind]

    def json_state(self) -> dict:
        return {
            "epoch": self.epoch,
            "disc_trace": self.disc_trace,
            "best": self.best,
            "baseline": None if self.baseline is None else self.baseline.value,
            "timings": self.timings,
        }


def load_corpus(cfg: RunConfig) -> tuple[LabeledDataset, list[int]]:
    """Labeled corpus and its byte positions in mask-priority order."""
    length = cfg.packet_length
    if cfg.data_source == "synth":
        spec = synth_spec(cfg)
        return synthesize_corpus(spec), spec.mask_priority()
    if cfg.data_source == "dataset":
        ds = read_dataset(cfg.dataset_path)
        if ds.packet_length != length:
            logger.warning("Dataset packet length %d differs from %d; renormalizing", ds.packet_length, length)
            ds = LabeledDataset(tuple(renormalize(p, length) for p in ds.packets), ds.split_tag)
        return ds, list(range(length))
    ds = ingest_pcaps(cfg.benign_pcaps, cfg.malicious_pcaps, length, cfg.strip_offset)
    return ds, list(range(length))


def synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(
        n_benign=cfg.synth_benign,
        n_malicious=cfg.synth_malicious,
        length=cfg.packet_length,
        signature_positions=default_signature_positions(cfg.packet_length),
        noise_seed=cfg.stream("synth"),
        jitter=cfg.synth_jitter,
    )


def input_provenance(cfg: RunConfig) -> dict:
    if cfg.data_source == "synth":
        spec = synth_spec(cfg)
        return {
            "synth": {
                "n_benign": spec.n_benign,
                "n_malicious": spec.n_malicious,
                "signature_positions": list(spec.signature_positions),
                "seed": spec.noise_seed,
            }
        }
    if cfg.data_source == "dataset":
        provenance = {"dataset": {"path": cfg.dataset_path, "sha256": sha256_file(cfg.dataset_path)}}
        sidecar = dataset_manifest_path(cfg.dataset_path)
        if sidecar.exists():
            provenance["dataset"]["manifest_sha256"] = sha256_file(sidecar)
        return provenance
    return {"pcaps": {str(p): sha256_file(p) for p in (*cfg.benign_pcaps, *cfg.malicious_pcaps)}}


def select_positions(order, mu: int, granularity: Granularity) -> tuple:
    """The first ``mu`` byte positions of ``order``; two_byte takes whole pairs."""
    chosen: list[int] = []
    for position in order:
        if len(chosen) >= mu:
            break
        if position in chosen:
            continue
        chosen.append(position)
        if granularity is Granularity.TWO_BYTE and (position ^ 1) not in chosen:
            chosen.append(position ^ 1)
    return tuple(sorted(chosen))


def nids_seed(cfg: RunConfig, kind: NidsKind) -> int:
    return cfg.stream("nids", kind.value) & 0xFFFFFFFF


def embedding_tokens(ds: LabeledDataset, granularity: Granularity) -> np.ndarray:
    return bytes_to_tokens(ds.byte_matrix, granularity)


def _new_models(cfg: RunConfig, emb: EmbeddingMatrix):
    vocab = cfg.granularity.vocab_size
    gen = PacketGenerator(vocab, emb.dim, cfg.hidden, seed=cfg.stream("generator_init"))
    disc = PacketDiscriminator(
        emb.dim, cfg.disc_windows, cfg.disc_filters, cfg.disc_dropout, seed=cfg.stream("discriminator_init")
    )
    return gen, disc


def _prepare_data(cfg: RunConfig):
    corpus, order = load_corpus(cfg)
    train, test = split_dataset(corpus, cfg.train_fraction, cfg.stream("split"))
    positions = cfg.mask_positions if cfg.mask_positions is not None else select_positions(order, cfg.mu, cfg.granularity)
    train_templates = TemplatePool.build(train.with_label(Label.MALICIOUS), positions, cfg.granularity)
    test_templates = TemplatePool.build(test.with_label(Label.MALICIOUS), positions, cfg.granularity)
    # two_byte masks pin whole tokens, so the effective set can grow
    positions = tuple(sorted(train_templates.masks[0].positions))
    return train, test, positions, train_templates, test_templates


def _original_asr(detectors: dict, test_templates: TemplatePool) -> dict:
    return {
        kind: 100.0 - afr(model.predict_packets(test_templates.template_bytes))
        for kind, model in detectors.items()
    }


def _sample(state: RunState, pool: TemplatePool, count: int, seed: int):
    index = pool.draw(count, derive_seed(seed, "templates"))
    batch = sample_batch(state.gen, state.table, pool.forced[index], pool.flags[index], seed)
    return batch, index


def _check_masks(generated: np.ndarray, pool: TemplatePool, index: np.ndarray, positions) -> None:
    columns = np.asarray(positions, dtype=np.int64)
    if not columns.size:
        return
    mismatch = generated[:, columns] != pool.template_bytes[index][:, columns]
    if mismatch.any():
        row = int(np.flatnonzero(mismatch.any(axis=1))[0])
        raise RunError(f"generated packet {row} violates its constraint mask at {int(mismatch.sum())} byte(s)")


def pretrain_phase(cfg: RunConfig, out_dir: str | Path | None = None) -> RunState:
    """NIDS, embeddings, generator MLE, then discriminator pretraining on NIDS-labeled sets."""
    train, test, positions, train_templates, test_templates = _prepare_data(cfg)

    detectors = {}
    for kind in cfg.nids_eval_kinds:
        if kind is cfg.nids_kind and cfg.nids_path:
            detectors[kind] = load_nids(cfg.nids_path, expected_extractor=cfg.nids_extractor)
        else:
            detectors[kind] = train_nids(kind, train, nids_seed(cfg, kind), test, cfg.nids_extractor)
        logger.info("NIDS %s test metrics: %s", kind.value, detectors[kind].metrics.get("test"))

    if cfg.embedding_path:
        emb = load_embedding(cfg.embedding_path, cfg.granularity)
    else:
        model = train_skipgram(
            embedding_tokens(train, cfg.granularity),
            d=cfg.embed_dim,
            window=cfg.embed_window,
            epochs=cfg.embed_epochs,
            lr=cfg.embed_lr,
            seed=cfg.stream("embedding"),
            granularity=cfg.granularity,
        )
        emb = model.embedding()
    table = emb.as_tensor(torch.float32)

    gen, disc = _new_models(cfg, emb)
    malicious_tokens = bytes_to_tokens(stack_packets(train.with_label(Label.MALICIOUS)), cfg.granularity)
    mle_history = mle_pretrain(
        gen, malicious_tokens, table, cfg.mle_epochs, lr=cfg.mle_lr, seed=cfg.stream("mle"), batch_size=cfg.sample_batch
    )
    state = RunState(
        epoch=0,
        cfg=cfg,
        train=train,
        test=test,
        positions=positions,
        train_templates=train_templates,
        test_templates=test_templates,
        emb=emb,
        table=table,
        detectors=detectors,
        gen=gen,
        rollout_gen=copy.deepcopy(gen) if cfg.rollout_lag else gen,
        disc=disc,
        gen_opt=make_gen_optimizer(gen, cfg.pg_lr),
        disc_opt=make_disc_optimizer(disc, cfg.disc_lr),
        baseline=MovingAverageBaseline() if cfg.baseline else None,
        asr_original=_original_asr(detectors, test_templates),
        mle_history=mle_history,
    )

    if cfg.disc_pretrain_epochs:
        _discriminator_step(state, cfg.stream("d_pretrain"), cfg.disc_pretrain_epochs)
    if out_dir is not None:
        save_pretrained(state, out_dir)
    logger.info(
        "Pretraining done: positions=%d asr_original=%s",
        len(positions),
        {k.value: v for k, v in state.asr_original.items()},
    )
    return state


def _discriminator_step(state: RunState, seed: int, epochs: int) -> float | None:
    """Generate, let the NIDS label generated plus benign packets, fit D on its verdicts."""
    cfg = state.cfg
    batch, _ = _sample(state, state.train_templates, cfg.adversarial_batch, derive_seed(seed, "generate"))
    generated = batch.tokens.numpy()
    benign = bytes_to_tokens(stack_packets(state.train.with_label(Label.BENIGN)), cfg.granularity)
    combined = np.concatenate([benign, generated]) if benign.size else generated
    verdicts = state.nids.predict_packets(tokens_to_bytes(combined, cfg.granularity))
    predicted_benign = combined[verdicts == 0]
    predicted_malicious = combined[verdicts == 1]
    if not len(predicted_benign) or not len(predicted_malicious):
        logger.warning(
            "Skipping discriminator step: NIDS labeled benign=%d malicious=%d",
            len(predicted_benign),
            len(predicted_malicious),
        )
        return None
    trace = train_discriminator(
        state.disc,
        predicted_benign,
        predicted_malicious,
        state.table,
        epochs,
        lr=cfg.disc_lr,
        seed=derive_seed(seed, "fit"),
        batch_size=cfg.disc_batch,
        optimizer=state.disc_opt,
    )
    return trace[-1]


def _generator_step(state: RunState, seed: int) -> float:
    cfg = state.cfg
    batch, _ = _sample(state, state.train_templates, cfg.sample_batch, derive_seed(seed, "sample"))
    q = batch_action_values(
        state.rollout_gen,
        state.table,
        batch,
        state.disc,
        RolloutConfig(cfg.rollout_m),
        derive_seed(seed, "rollout"),
    )
    return policy_gradient_update(
        state.gen, batch, q, state.table, optimizer=state.gen_opt, baseline=state.baseline
    )


def evaluate_generator(state: RunState, epoch: int, seed: int, count: int | None = None) -> list[MetricRecord]:
    """One metric row per evaluated NIDS kind from a fresh batch on test templates."""
    cfg = state.cfg
    pool = state.test_templates
    batch, index = _sample(state, pool, count or cfg.eval_batch, seed)
    generated_tokens = batch.tokens.numpy()
    generated = tokens_to_bytes(generated_tokens, cfg.granularity)
    _check_masks(generated, pool, index, state.positions)
    mape_value = float(mape_batch(pool.forced[index], generated_tokens, state.emb, normalization_stats(state.emb)).mean())
    records = []
    for kind, model in state.detectors.items():
        failure = afr(model.predict_packets(generated))
        success = 100.0 - failure
        records.append(
            MetricRecord(
                epoch=epoch,
                nids_kind=kind.value,
                mu=len(state.positions),
                embedding_mode=cfg.granularity.value,
                afr=failure,
                asr=success,
                asir=asir(success, state.asr_original[kind]),
                mape=mape_value,
            )
        )
    return records


def _snapshot(state: RunState) -> dict:
    return {
        "gen": copy.deepcopy(state.gen.state_dict()),
        "rollout_gen": copy.deepcopy(state.rollout_gen.state_dict()),
        "disc": copy.deepcopy(state.disc.state_dict()),
        "gen_opt": copy.deepcopy(state.gen_opt.state_dict()),
        "disc_opt": copy.deepcopy(state.disc_opt.state_dict()),
        "json": copy.deepcopy(state.json_state()),
        "history": len(state.history),
    }


def _rollback(state: RunState, snap: dict) -> None:
    state.gen.load_state_dict(snap["gen"])
    state.rollout_gen.load_state_dict(snap["rollout_gen"])
    state.disc.load_state_dict(snap["disc"])
    state.gen_opt.load_state_dict(snap["gen_opt"])
    state.disc_opt.load_state_dict(snap["disc_opt"])
    _apply_json_state(state, snap["json"])
    del state.history[snap["history"]:]


def _apply_json_state(state: RunState, payload: dict) -> None:
    state.epoch = int(payload["epoch"])
    state.disc_trace = list(payload.get("disc_trace", []))
    state.best = dict(payload.get("best") or {"epoch": None, "afr": None})
    state.timings = list(payload.get("timings", []))
    if state.baseline is not None:
        state.baseline.value = payload.get("baseline")


def adversarial_epoch(state: RunState, cfg: RunConfig | None = None) -> RunState:
    """g-steps of policy gradient, d-steps of NIDS-labeled discriminator fitting, then evaluation.

    The epoch is atomic: on failure every trainable piece of state is restored.
    """
    if cfg is not None:
        state.cfg = cfg
    cfg = state.cfg
    epoch = state.epoch + 1
    snap = _snapshot(state)
    started = time.perf_counter()
    try:
        for step in range(cfg.g_steps):
            loss = _generator_step(state, cfg.stream("g_step", epoch, step))
            logger.debug("Epoch %d g-step %d loss=%.6f", epoch, step, loss)
        if cfg.rollout_lag and epoch % cfg.rollout_lag == 0:
            state.rollout_gen.load_state_dict(state.gen.state_dict())
        last_loss = None
        for step in range(cfg.d_steps):
            value = _discriminator_step(state, cfg.stream("d_step", epoch, step), cfg.k)
            last_loss = value if value is not None else last_loss
        if last_loss is not None:
            state.disc_trace.append(last_loss)
        records = evaluate_generator(state, epoch, cfg.stream("eval", epoch))
    except Exception:
        logger.exception("Adversarial epoch %d failed; rolling back", epoch)
        _rollback(state, snap)
        raise
    state.history.extend(records)
    state.epoch = epoch
    state.timings.append(round(time.perf_counter() - started, 3))
    primary = next(r for r in records if r.nids_kind == cfg.nids_kind.value)
    if state.best["afr"] is None or primary.afr < state.best["afr"]:
        state.best = {"epoch": epoch, "afr": primary.afr}
    logger.info(
        "Epoch %d/%d afr=%.2f asir=%.2f mape=%.2f (%s)",
        epoch,
        cfg.epochs,
        primary.afr,
        primary.asir,
        primary.mape,
        format_duration(state.timings[-1]),
    )
    return state


def discriminator_plateaued(trace: list, tolerance: float = EARLY_STOP_TOLERANCE, window: int = EARLY_STOP_WINDOW) -> bool:
    if len(trace) < window + 1:
        return False
    recent = trace[-(window + 1):]
    return all(abs(b - a) <= tolerance * max(abs(a), 1e-12) for a, b in zip(recent, recent[1:]))


# --- artifacts -------------------------------------------------------------


def checkpoint_dir(out_dir: str | Path) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR


def _checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}"


def load_embedding(path: str | Path, granularity: Granularity) -> EmbeddingMatrix:
    tensors = load_tensors(path, expected_module="embedding")
    if "emb/table" not in tensors:
        raise RunError(f"{path}: no emb/table tensor")
    emb = EmbeddingMatrix(tensors["emb/table"], granularity)
    if emb.vocab_size != granularity.vocab_size:
        raise RunError(f"{path}: table has {emb.vocab_size} rows, {granularity.value} needs {granularity.vocab_size}")
    return emb


def save_embedding(path: str | Path, emb: EmbeddingMatrix) -> Path:
    return save_tensors(path, "embedding", {"emb/table": emb.table})


def nids_path(out_dir: str | Path, kind: NidsKind) -> Path:
    return checkpoint_dir(out_dir) / f"nids_{kind.value}.joblib"


def save_pretrained(state: RunState, out_dir: str | Path) -> None:
    directory = ensure_dir(checkpoint_dir(out_dir))
    for kind, model in state.detectors.items():
        save_nids(model, nids_path(out_dir, kind))
    save_embedding(directory / EMBEDDING_FILE, state.emb)
    save_state(state, out_dir, _checkpoint_name(0))


def save_state(state: RunState, out_dir: str | Path, name: str) -> Path:
    directory = ensure_dir(checkpoint_dir(out_dir))
    tensors = {}
    tensors.update(state.gen.state_tensors("gen/"))
    tensors.update(state.disc.state_tensors("disc/"))
    if state.rollout_gen is not state.gen:
        tensors.update(state.rollout_gen.state_tensors("rollout/"))
    tensors.update(optimizer_tensors(state.gen_opt, dict(state.gen.named_parameters()), "opt/gen/"))
    tensors.update(optimizer_tensors(state.disc_opt, dict(state.disc.named_parameters()), "opt/disc/"))
    target = save_tensors(directory / f"{name}.atkg", "run", tensors)
    (directory / f"{name}.json").write_text(json.dumps(state.json_state(), indent=2), encoding="utf-8")
    return target


def latest_checkpoint(out_dir: str | Path) -> int | None:
    epochs = []
    for path in checkpoint_dir(out_dir).glob("epoch_*.atkg"):
        try:
            epochs.append(int(path.stem.split("_", 1)[1]))
        except ValueError:
            logger.warning("Ignoring unexpected checkpoint file %s", path)
    return max(epochs) if epochs else None


def restore_state(cfg: RunConfig, out_dir: str | Path, name: str | None = None) -> RunState:
    """Rebuild a run from its directory; data and splits are re-derived from the config."""
    if name is None:
        latest = latest_checkpoint(out_dir)
        if latest is None:
            raise RunError(f"no checkpoints under {checkpoint_dir(out_dir)}")
        name = _checkpoint_name(latest)
    directory = checkpoint_dir(out_dir)
    train, test, positions, train_templates, test_templates = _prepare_data(cfg)
    detectors = {kind: load_nids(nids_path(out_dir, kind), cfg.nids_extractor) for kind in cfg.nids_eval_kinds}
    emb = load_embedding(directory / EMBEDDING_FILE, cfg.granularity)
    gen, disc = _new_models(cfg, emb)
    tensors = load_tensors(directory / f"{name}.atkg", expected_module="run")
    gen.load_state_tensors(tensors, "gen/")
    disc.load_state_tensors(tensors, "disc/")
    disc.eval()
    rollout_gen = gen
    if cfg.rollout_lag:
        rollout_gen = copy.deepcopy(gen)
        if any(key.startswith("rollout/") for key in tensors):
            rollout_gen.load_state_tensors(tensors, "rollout/")
    gen_opt = make_gen_optimizer(gen, cfg.pg_lr)
    disc_opt = make_disc_optimizer(disc, cfg.disc_lr)
    restore_optimizer(gen_opt, dict(gen.named_parameters()), tensors, "opt/gen/")
    restore_optimizer(disc_opt, dict(disc.named_parameters()), tensors, "opt/disc/")
    state = RunState(
        epoch=0,
        cfg=cfg,
        train=train,
        test=test,
        positions=positions,
        train_templates=train_templates,
        test_templates=test_templates,
        emb=emb,
        table=emb.as_tensor(torch.float32),
        detectors=detectors,
        gen=gen,
        rollout_gen=rollout_gen,
        disc=disc,
        gen_opt=gen_opt,
        disc_opt=disc_opt,
        baseline=MovingAverageBaseline() if cfg.baseline else None,
        asr_original=_original_asr(detectors, test_templates),
    )
    _apply_json_state(state, json.loads((directory / f"{name}.json").read_text(encoding="utf-8")))
    metrics_file = Path(out_dir) / METRICS_NAME
    if metrics_file.exists():
        state.history = [r for r in read_metric_rows(metrics_file) if r.epoch <= state.epoch]
    logger.info("Restored %s at epoch %d", name, state.epoch)
    return state


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: str | Path, payload: dict) -> Path:
    target = Path(out_dir) / MANIFEST_NAME
    temp = target.with_name(target.name + ".tmp")
    temp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    temp.replace(target)
    return target


def read_manifest(out_dir: str | Path) -> dict:
    target = Path(out_dir) / MANIFEST_NAME
    try:
        return json.loads(target.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise RunError(f"cannot read run manifest {target}: {e}") from e


def run_experiment(cfg: RunConfig, out_dir: str | Path, resume: bool = False) -> Path:
    """Pretrain, then run ``cfg.epochs`` adversarial epochs; returns the metrics CSV path."""
    out = ensure_dir(out_dir)
    metrics_file = out / METRICS_NAME
    provenance = input_provenance(cfg)
    manifest = {
        "status": STATUS_RUNNING,
        "config": cfg.values,
        "config_hash": sha256_json(cfg.values),
        "seeds": {"run": cfg.seed},
        "inputs": provenance,
        "inputs_hash": sha256_json(provenance),
        "versions": runtime_versions(),
        "started": _utc_now(),
    }

    state = None
    try:
        if resume and latest_checkpoint(out) is not None:
            state = restore_state(cfg, out)
            write_metric_rows(metrics_file, state.history, append=False)
        else:
            state = pretrain_phase(cfg, out)
            write_metric_rows(metrics_file, [], append=False)
        fingerprints = {kind.value: model.fingerprint() for kind, model in state.detectors.items()}
        manifest["nids_fingerprints"] = fingerprints
        manifest["mask_positions"] = list(state.positions)
        manifest["asr_original"] = {k.value: v for k, v in state.asr_original.items()}
        write_manifest(out, manifest)

        while state.epoch < cfg.epochs:
            adversarial_epoch(state, cfg)
            write_metric_rows(metrics_file, [r for r in state.history if r.epoch == state.epoch])
            save_state(state, out, _checkpoint_name(state.epoch))
            if state.best["epoch"] == state.epoch:
                save_state(state, out, BEST_NAME)
            manifest.update(epoch=state.epoch, best=state.best, epoch_seconds=state.timings)
            write_manifest(out, manifest)
            if cfg.early_stop and discriminator_plateaued(state.disc_trace):
                logger.info("Discriminator loss plateaued; stopping after epoch %d", state.epoch)
                manifest["early_stopped"] = state.epoch
                break

        after = {kind.value: model.fingerprint() for kind, model in state.detectors.items()}
        if after != fingerprints:
            raise RunError("NIDS parameters changed during adversarial training")
    except Exception as e:
        manifest.update(status=STATUS_FAILED, error=f"{type(e).__name__}: {e}", finished=_utc_now())
        if state is not None:
            manifest.update(epoch=state.epoch, best=state.best)
        write_manifest(out, manifest)
        raise
    manifest.update(status=STATUS_COMPLETED, finished=_utc_now())
    write_manifest(out, manifest)
    logger.info("Run complete: %d epochs, best epoch %s", state.epoch, state.best["epoch"])
    return metrics_file


def evaluate_run(run_dir: str | Path, which: str = "final", count: int | None = None, seed: int | None = None) -> Path:
    """Re-measure a finished run on a fresh evaluation batch; writes evaluation.json."""
    manifest = read_manifest(run_dir)
    cfg = RunConfig.from_config(manifest["config"])
    name = BEST_NAME if which == "best" else None
    if which == "best" and not (checkpoint_dir(run_dir) / f"{BEST_NAME}.atkg").exists():
        raise RunError(f"{run_dir} has no best checkpoint")
    state = restore_state(cfg, run_dir, name)
    stream = cfg.stream("evaluate", which) if seed is None else int(seed)
    records = evaluate_generator(state, state.epoch, stream, count)
    payload = {
        "checkpoint": which,
        "epoch": state.epoch,
        "count": count or cfg.eval_batch,
        "seed": stream,
        "records": [r.as_row() for r in records],
    }
    target = Path(run_dir) / EVALUATION_NAME
    target.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Evaluation written to %s", target)
    return target
