"""Supervised training and noisy student self-training.

Every random draw in the data path comes from a generator keyed on
(seed, epoch, step, slot, stream), so batches do not depend on the number
of loader workers or on anything consumed earlier.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment as A
from .data import TrackStore, _atomic_write, logmel_batch, random_crop
from .dsp import CHUNK_SECONDS, Waveform, chunk_samples
from .errors import ConfigError, DataError, DivergenceError, ParameterError
from .eval import evaluate_model
from .models import build_model, load_model, model_checkpoint, param_count
from .tensor import Adam, no_grad, save_checkpoint
from .tensor import functional as F

log = logging.getLogger(__name__)

LABELED, UNLABELED = 0, 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    chunk_seconds: float = CHUNK_SECONDS
    augment: A.AugmentSpec = field(default_factory=A.AugmentSpec)
    seed: int = 0
    workers: int = 0
    max_seconds: float | None = None  # wall-clock budget; breaks bit-reproducibility when it triggers

    def __post_init__(self):
        if self.patience < 1:
            raise ParameterError("patience must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be >= 1")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


@dataclass
class NoisyStudentConfig:
    teacher_checkpoint: str | None = None
    student_model: str = "transformer"
    student_config: dict | None = None  # None: same architecture as the teacher
    unlabeled_ratio: float = 1.0
    iterations: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.unlabeled_ratio < 0:
            raise ParameterError("unlabeled_ratio must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_roc_auc: float
    val_pr_auc: float
    wall_time: float
    l1: float | None = None
    l2: float | None = None


class TrainLog:
    """Per-epoch records, optionally appended to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list = []
        self.path = Path(path) if path else None
        if self.path and self.path.exists():
            self.path.unlink()

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    def __len__(self):
        return len(self.records)


class EarlyStopping:
    """Tracks the best (lowest) value; stops after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: object
    log: TrainLog
    best_epoch: int
    best_val_loss: float
    checkpoint: Path | None = None


# -- example preparation -------------------------------------------------

_WORKER_STORE = None


def _init_worker(store):
    global _WORKER_STORE
    _WORKER_STORE = store


def _example_rng(seed, epoch, step, slot, stream):
    return np.random.default_rng([seed, epoch, step, slot, stream])


def make_example(store: TrackStore, track_id: str, n_samples: int, chain: A.AugmentChain | None,
                 rng: np.random.Generator, keep_clean: bool = False) -> tuple:
    """Random crop, then the augmented view (and optionally the clean one) as waveforms."""
    clip, _ = random_crop(store.audio(track_id), n_samples, rng)
    clean = clip.astype(np.float64)
    noisy = clean if chain is None else A.apply_chain(Waveform(clean, store.sr), chain, rng).samples
    return noisy, (clean if keep_clean else None)


def _prepare(job):
    track_id, n, chain, key, keep_clean = job
    noisy, clean = make_example(_WORKER_STORE, track_id, n, chain, _example_rng(*key), keep_clean)
    return noisy, clean


class BatchMaker:
    """Builds feature batches in-process or with a pool of forked workers."""

    def __init__(self, store: TrackStore, workers: int = 0):
        self.store = store
        self.pool = None
        if workers > 0:
            ctx = mp.get_context("fork")
            self.pool = ctx.Pool(workers, initializer=_init_worker, initargs=(store,))

    def __call__(self, jobs) -> tuple:
        global _WORKER_STORE
        if self.pool is None:
            _WORKER_STORE = self.store
            out = [_prepare(j) for j in jobs]
        else:
            out = self.pool.map(_prepare, jobs, chunksize=max(1, len(jobs) // 8))
        noisy = logmel_batch(np.stack([o[0] for o in out]), self.store.sr)
        clean = None
        if out and out[0][1] is not None:
            clean = logmel_batch(np.stack([o[1] for o in out]), self.store.sr)
        return noisy, clean

    def close(self):
        if self.pool is not None:
            self.pool.close()
            self.pool.join()
            self.pool = None


def preload(store: TrackStore, track_ids):
    for t in track_ids:
        store.audio(t)


# -- losses --------------------------------------------------------------


def _check_finite(loss, step):
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(step, value)
    return value


def generate_pseudo_labels(teacher, z_clean: np.ndarray) -> np.ndarray:
    """Soft labels from the frozen teacher on clean inputs; no graph is recorded."""
    was_training = teacher.training
    teacher.eval()
    try:
        with no_grad():
            return teacher(z_clean).data.copy()
    finally:
        teacher.train(was_training)


def noisy_student_losses(student, x_aug, y, z_aug, psi) -> tuple:
    """(l1, l2): BCE on augmented labeled data, BCE of the augmented unlabeled view against psi."""
    l1 = F.bce_loss(student(x_aug), y)
    l2 = F.bce_loss(student(z_aug), psi)
    return l1, l2


def noisy_student_step(student, optimizer, x_aug, y, z_clean, z_aug, teacher, step: int = 0) -> tuple:
    psi = generate_pseudo_labels(teacher, z_clean)
    optimizer.zero_grad()
    l1, l2 = noisy_student_losses(student, x_aug, y, z_aug, psi)
    total = l1 + l2
    _check_finite(total, step)
    total.backward()
    optimizer.step()
    return float(l1.data), float(l2.data)


# -- loops ---------------------------------------------------------------


def _labeled_ids(store: TrackStore):
    ids = store.pool("train", "labeled")
    if not ids:
        raise DataError("no labeled training tracks")
    store.pool("valid", "labeled")
    return ids


def _epoch_batches(ids, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(len(ids))
    return [[ids[i] for i in order[s : s + batch_size]] for s in range(0, len(ids), batch_size)]


def _save_best(model, out_dir, metadata):
    if out_dir is None:
        return None
    return save_checkpoint(model_checkpoint(model, metadata), Path(out_dir) / "best.ckpt")


def _run(model, store, cfg: TrainConfig, step_fn, out_dir=None, metadata=None, log_name="train_log.jsonl"):
    """Shared epoch loop: train steps, clean validation, early stopping on validation BCE."""
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    train_log = TrainLog(out_dir / log_name if out_dir else None)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    started = time.perf_counter()
    ckpt_path = None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        losses, l1s, l2s = step_fn(epoch)
        report = evaluate_model(model, store, "valid", cfg.chunk_seconds, batch_size=cfg.batch_size)
        rec = EpochRecord(
            epoch, float(np.mean(losses)), report.bce, report.macro_roc_auc, report.macro_pr_auc,
            round(time.perf_counter() - started, 3),
            float(np.mean(l1s)) if l1s else None, float(np.mean(l2s)) if l2s else None,
        )
        train_log.append(rec)
        log.info("epoch %d train %.4f val %.4f roc %.4f", epoch, rec.train_loss, rec.val_loss, rec.val_roc_auc)
        if stopper.update(report.bce, epoch):
            best_state = model.state_dict()
            ckpt_path = _save_best(model, out_dir, {**(metadata or {}), "epoch": epoch, "val_bce": report.bce})
        if stopper.should_stop:
            break
        if cfg.max_seconds is not None and time.perf_counter() - started > cfg.max_seconds:
            log.warning("wall-clock budget of %.0f s reached after epoch %d", cfg.max_seconds, epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    if out_dir and ckpt_path:
        shutil.copyfile(ckpt_path, out_dir / "model.ckpt")
        ckpt_path = out_dir / "model.ckpt"
    return TrainResult(model, train_log, stopper.best_epoch, stopper.best, ckpt_path)


def train_supervised(model, store: TrackStore, cfg: TrainConfig, out_dir=None, metadata=None) -> TrainResult:
    """Augmented random crops, BCE against hard labels, Adam; best model by validation BCE."""
    ids = _labeled_ids(store)
    preload(store, ids)
    chain = A.AugmentChain.build(cfg.augment, cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    n = chunk_samples(cfg.chunk_seconds, store.sr)
    maker = BatchMaker(store, cfg.workers)
    step = [0]

    def epoch_steps(epoch):
        losses = []
        for b, batch_ids in enumerate(_epoch_batches(ids, cfg.batch_size, cfg.seed, epoch)):
            jobs = [(t, n, chain, (cfg.seed, epoch, b, i, LABELED), False) for i, t in enumerate(batch_ids)]
            x, _ = maker(jobs)
            y = store.labels(batch_ids)
            opt.zero_grad()
            loss = F.bce_loss(model(x), y)
            step[0] += 1
            losses.append(_check_finite(loss, step[0]))
            loss.backward()
            opt.step()
        return losses, [], []

    try:
        return _run(model, store, cfg, epoch_steps, out_dir, {"role": "teacher", "seed": cfg.seed, **(metadata or {})})
    finally:
        maker.close()


def train_student(student, teacher, store: TrackStore, cfg: TrainConfig, unlabeled_ratio: float = 1.0,
                  out_dir=None, metadata=None) -> TrainResult:
    """One noisy student round: labeled and unlabeled batches interleaved every step."""
    ids = _labeled_ids(store)
    unl = store.pool("unlabeled", "unlabeled")
    preload(store, ids + unl)
    teacher.eval()
    chain = A.AugmentChain.build(cfg.augment, cfg.seed)
    opt = Adam(student.parameters(), lr=cfg.lr)
    n = chunk_samples(cfg.chunk_seconds, store.sr)
    n_unl = max(1, int(round(unlabeled_ratio * cfg.batch_size))) if unlabeled_ratio > 0 else 0
    maker = BatchMaker(store, cfg.workers)
    step = [0]

    def epoch_steps(epoch):
        losses, l1s, l2s = [], [], []
        for b, batch_ids in enumerate(_epoch_batches(ids, cfg.batch_size, cfg.seed, epoch)):
            jobs = [(t, n, chain, (cfg.seed, epoch, b, i, LABELED), False) for i, t in enumerate(batch_ids)]
            x, _ = maker(jobs)
            y = store.labels(batch_ids)
            step[0] += 1
            if n_unl == 0:
                opt.zero_grad()
                loss = F.bce_loss(student(x), y)
                losses.append(_check_finite(loss, step[0]))
                loss.backward()
                opt.step()
                continue
            pick = np.random.default_rng([cfg.seed, epoch, b, 0x0D1]).integers(0, len(unl), n_unl)
            ujobs = [(unl[j], n, chain, (cfg.seed, epoch, b, i, UNLABELED), True) for i, j in enumerate(pick)]
            z_aug, z_clean = maker(ujobs)
            l1, l2 = noisy_student_step(student, opt, x, y, z_clean, z_aug, teacher, step[0])
            l1s.append(l1)
            l2s.append(l2)
            losses.append(l1 + l2)
        return losses, l1s, l2s

    try:
        return _run(student, store, cfg, epoch_steps, out_dir, {"role": "student", "seed": cfg.seed, **(metadata or {})})
    finally:
        maker.close()


def weights_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train_noisy_student(ns: NoisyStudentConfig, store: TrackStore, cfg: TrainConfig, out_dir=None,
                        teacher=None) -> TrainResult:
    """Iterated noisy student training; each round's student becomes the next round's teacher."""
    if teacher is None:
        if not ns.teacher_checkpoint or not Path(ns.teacher_checkpoint).exists():
            raise ConfigError(f"teacher checkpoint not found: {ns.teacher_checkpoint!r}")
        teacher, _ = load_model(ns.teacher_checkpoint)
    teacher.eval()
    result = None
    lineage = []
    for it in range(1, ns.iterations + 1):
        config = ns.student_config if ns.student_config is not None else teacher.cfg.to_dict()
        model_type = ns.student_model if ns.student_config is not None else teacher.model_type
        student = build_model(model_type, config, seed=cfg.seed + 1000 * it)
        lineage.append({"iteration": it, "teacher_sha256": weights_digest(teacher),
                        "teacher_params": param_count(teacher), "student_params": param_count(student)})
        sub = Path(out_dir) / f"iter{it}" if out_dir else None
        result = train_student(student, teacher, store, cfg, ns.unlabeled_ratio, sub,
                               {"iteration": it, "lineage": list(lineage)})
        teacher = result.model
        teacher.eval()
    if out_dir and result.checkpoint:
        shutil.copyfile(result.checkpoint, Path(out_dir) / "model.ckpt")
        result.checkpoint = Path(out_dir) / "model.ckpt"
        _atomic_write(Path(out_dir) / "lineage.json", json.dumps(lineage, indent=2, sort_keys=True) + "\n")
    return result
