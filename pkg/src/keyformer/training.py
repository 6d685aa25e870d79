"""Triplet training: sampling, loss, Adam, epoch loop, checkpoints.

Each batch holds uniformly sampled (anchor, positive, negative) triplets:
anchor and positive are two distinct sessions of one subject, the negative
comes from a different subject. The loss per triplet is
max(0, d(a,p) - d(a,n) + margin) with Euclidean d, averaged over the batch.
After every epoch the model is scored on the validation subjects (Global
EER at E=1) and the checkpoint is kept whenever that EER strictly improves.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evaluation, tensor as T
from .data import FeatureSequence
from .errors import CheckpointError, ContractError, TrainingError
from .model import ModelConfig, ModelWeights, embed_batch, embed_sessions, shape_manifest
from .tensor import RngState, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KEYFORMER-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 1000
    batches_per_epoch: int = 29
    batch_size: int = 1024
    learning_rate: float = 0.001
    margin: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.margin < 0:
            raise ContractError(f"margin must be >= 0, got {self.margin}")
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class TripletBatch:
    anchors: List[FeatureSequence]
    positives: List[FeatureSequence]
    negatives: List[FeatureSequence]


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter shapes."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, weights: ModelWeights) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in weights.items()},
                   v={n: np.zeros_like(t.data) for n, t in weights.items()},
                   step=0)


@dataclass
class Checkpoint:
    weights: ModelWeights
    train_config: Optional[TrainConfig] = None
    adam: Optional[AdamState] = None
    epoch: int = 0
    best_val_eer: Optional[float] = None
    rng_state: Optional[dict] = None
    global_threshold: Optional[float] = None

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_eer: float
    val_eer: float
    wall_ms: float


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: List[EpochLog]


# ---------------------------------------------------------------------------
# sampling and loss


def eligible_anchor_subjects(by_subject: Dict[str, List[FeatureSequence]]) -> List[str]:
    return [s for s, sess in by_subject.items() if len(sess) >= 2]


def sample_triplets(by_subject: Dict[str, List[FeatureSequence]], batch_size: int,
                    rng: RngState) -> TripletBatch:
    """Uniform triplets: anchor subject, two distinct sessions, foreign negative."""
    anchors_pool = eligible_anchor_subjects(by_subject)
    subjects = [s for s, sess in by_subject.items() if sess]
    if len(anchors_pool) < 1 or len(subjects) < 2:
        raise ContractError(
            "triplet sampling needs >= 2 subjects and >= 2 sessions for anchors")
    a_list, p_list, n_list = [], [], []
    for _ in range(batch_size):
        subj = anchors_pool[int(rng.integers(0, len(anchors_pool)))]
        sessions = by_subject[subj]
        i = int(rng.integers(0, len(sessions)))
        j = int(rng.integers(0, len(sessions) - 1))
        if j >= i:
            j += 1
        other = subj
        while other == subj:
            other = subjects[int(rng.integers(0, len(subjects)))]
        neg_sessions = by_subject[other]
        k = int(rng.integers(0, len(neg_sessions)))
        a_list.append(sessions[i])
        p_list.append(sessions[j])
        n_list.append(neg_sessions[k])
    return TripletBatch(a_list, p_list, n_list)


def _pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    # sqrt of sum of squares per row; tiny stabiliser keeps the gradient
    # finite when a pair of embeddings coincides
    return T.sqrt(T.tsum(T.square(T.sub(a, b)), axis=1) + 1e-12)


def triplet_loss(ea: Tensor, ep: Tensor, en: Tensor, margin: float) -> Tensor:
    """Mean over the batch of max(0, d(a,p) - d(a,n) + margin)."""
    if not (ea.shape == ep.shape == en.shape):
        raise ContractError(
            f"embedding shape mismatch: {ea.shape}, {ep.shape}, {en.shape}")
    if ea.ndim == 1:
        ea, ep, en = (T.reshape(t, (1, -1)) for t in (ea, ep, en))
    d_ap = _pairwise_distance(ea, ep)
    d_an = _pairwise_distance(ea, en)
    return T.mean(T.relu(T.add(T.sub(d_ap, d_an), margin)))


# ---------------------------------------------------------------------------
# optimizer


def adam_step(weights: ModelWeights, grads: Dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> AdamState:
    """Standard Adam with bias correction; updates weights in place."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {name} {w.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w.data -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(w.data.dtype)
    return state


# ---------------------------------------------------------------------------
# epoch loop


def _stack(seqs: Sequence[FeatureSequence]) -> np.ndarray:
    return np.stack([fs.values for fs in seqs]).astype(T.default_dtype())


def _epoch_batch_loss(weights: ModelWeights, batch: TripletBatch, margin: float,
                      rng: RngState) -> Tuple[float, Dict[str, np.ndarray]]:
    x = np.concatenate([_stack(batch.anchors), _stack(batch.positives),
                        _stack(batch.negatives)])
    n = len(batch.anchors)
    emb = embed_batch(weights, Tensor(x), training=True, rng=rng)
    loss = triplet_loss(T.slice_rows(emb, 0, n), T.slice_rows(emb, n, 2 * n),
                        T.slice_rows(emb, 2 * n, 3 * n), margin)
    value = float(loss.data)
    if not np.isfinite(value):
        culprit = T.first_nonfinite(loss) or "loss"
        raise TrainingError(f"non-finite loss; first offending tensor: {culprit}")
    backward(loss)
    grads = {}
    for name, w in weights.items():
        if w.grad is not None:
            grads[name] = w.grad
            w.grad = None
    return value, grads


def eval_global_eer(weights: ModelWeights,
                    by_subject: Dict[str, List[FeatureSequence]], E: int = 1) -> float:
    """Global EER over the given subjects, embedding only needed sessions."""
    embs = {}
    for subject, sessions in by_subject.items():
        need = sessions[:E] + sessions[-evaluation.NUM_TEST_SESSIONS:]
        mat = embed_sessions(weights, need)
        embs[subject] = [mat[i] for i in range(mat.shape[0])]
    return evaluation.global_eer(evaluation.build_scores(embs, E)).eer


def train(weights: ModelWeights,
          train_subjects: Dict[str, List[FeatureSequence]],
          val_subjects: Dict[str, List[FeatureSequence]],
          cfg: TrainConfig,
          eval_hook: Optional[Callable[[int, ModelWeights], float]] = None,
          resume_from: Optional[Checkpoint] = None,
          checkpoint_path=None,
          log_path=None) -> TrainResult:
    """Run the triplet-training loop with per-epoch validation selection.

    Args:
        weights: initial model (mutated in place as training progresses).
        train_subjects / val_subjects: subject -> ordered sessions.
        cfg: optimisation hyperparameters; cfg.seed drives all sampling.
        eval_hook: optional replacement for the validation metric
            (epoch, weights) -> EER; defaults to Global EER at E=1.
        resume_from: continue from a saved training checkpoint.
        checkpoint_path: if set, best checkpoints are written here.
        log_path: if set, per-epoch log lines are appended here as JSON.

    Returns:
        TrainResult with the best checkpoint, final state and epoch log.
    """
    cfg.validate()
    weights.set_requires_grad(True)
    if eval_hook is None:
        eval_hook = lambda _e, w: eval_global_eer(w, val_subjects, E=1)

    # fixed deterministic subset of training subjects for the train-EER curve
    train_ids = sorted(train_subjects)
    sub_rng = RngState(cfg.seed).child("train-eer-subset")
    sub_rng.shuffle(train_ids)
    eer_subset = {s: train_subjects[s] for s in train_ids[:max(1, len(val_subjects))]}

    if resume_from is not None:
        adam = resume_from.adam or AdamState.init(weights)
        start_epoch = resume_from.epoch
        best_eer = resume_from.best_val_eer if resume_from.best_val_eer is not None else np.inf
        rng = RngState(cfg.seed)
        if resume_from.rng_state is not None:
            rng.set_state(resume_from.rng_state)
    else:
        adam = AdamState.init(weights)
        start_epoch = 0
        best_eer = np.inf
        rng = RngState(cfg.seed)

    best_cp: Optional[Checkpoint] = None
    logs: List[EpochLog] = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.batches_per_epoch):
            batch = sample_triplets(train_subjects, cfg.batch_size, rng)
            value, grads = _epoch_batch_loss(weights, batch, cfg.margin, rng)
            adam_step(weights, grads, adam, cfg)
            losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        train_eer = eval_global_eer(weights, eer_subset, E=1) if eer_subset else 1.0
        val_eer = float(eval_hook(epoch, weights))
        wall_ms = (time.perf_counter() - t0) * 1000.0
        entry = EpochLog(epoch, mean_loss, train_eer, val_eer, wall_ms)
        logs.append(entry)
        log.info("epoch %d: loss=%.4f train_eer=%.4f val_eer=%.4f (%.0f ms)",
                 epoch, mean_loss, train_eer, val_eer, wall_ms)
        if log_path is not None:
            with Path(log_path).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(vars(entry)) + "\n")
        if val_eer < best_eer:
            best_eer = val_eer
            best_cp = Checkpoint(weights=weights.copy(), train_config=cfg,
                                 adam=_copy_adam(adam), epoch=epoch,
                                 best_val_eer=best_eer, rng_state=rng.get_state())
            if checkpoint_path is not None:
                save_checkpoint(best_cp, checkpoint_path)

    final = Checkpoint(weights=weights.copy(), train_config=cfg,
                       adam=_copy_adam(adam), epoch=cfg.epochs,
                       best_val_eer=float(best_eer) if np.isfinite(best_eer) else None,
                       rng_state=rng.get_state())
    weights.set_requires_grad(False)
    if best_cp is None:
        best_cp = final
    return TrainResult(best=best_cp, final=final, log=logs)


def _copy_adam(state: AdamState) -> AdamState:
    return AdamState(m={k: v.copy() for k, v in state.m.items()},
                     v={k: v.copy() for k, v in state.v.items()},
                     step=state.step)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# ASCII header line: magic, version, header-byte-length. Then a JSON header
# (model/train config, tensor manifest incl. optimizer moments, rng state,
# epoch, best validation EER, global threshold), then raw little-endian f4
# data for each manifest entry in order, then a sha256 trailer over all
# preceding bytes.


def save_checkpoint(cp: Checkpoint, path) -> None:
    cfg = cp.weights.config
    manifest = [[n, list(s)] for n, s in cp.weights.manifest()]
    blobs = [np.ascontiguousarray(t.data, dtype="<f4").tobytes()
             for _n, t in cp.weights.items()]
    if cp.adam is not None:
        for kind, table in (("m", cp.adam.m), ("v", cp.adam.v)):
            for n, arr in table.items():
                manifest.append([f"adam.{kind}.{n}", list(arr.shape)])
                blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "train_config": None if cp.train_config is None else vars(cp.train_config),
        "manifest": manifest,
        "adam_step": None if cp.adam is None else cp.adam.step,
        "epoch": cp.epoch,
        "best_val_eer": cp.best_val_eer,
        "rng_state": _encode_rng(cp.rng_state),
        "global_threshold": cp.global_threshold,
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    head_line = b"%s %d %d\n" % (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    payload = head_line + header_bytes + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload + digest)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 48 or not raw.startswith(CHECKPOINT_MAGIC + b" "):
        raise CheckpointError(f"{path}: not a checkpoint file")
    digest = raw[-32:]
    payload = raw[:-32]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    nl = payload.index(b"\n")
    parts = payload[:nl].split()
    version, header_len = int(parts[1]), int(parts[2])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(payload[nl + 1:nl + 1 + header_len].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["model_config"])
    expected = [[n, list(s)] for n, s in shape_manifest(cfg)]
    manifest = header["manifest"]
    weight_entries = [e for e in manifest if not e[0].startswith("adam.")]
    if weight_entries != expected:
        raise CheckpointError(
            f"{path}: shape manifest mismatch; expected {len(expected)} weight tensors "
            f"per config, found {len(weight_entries)} "
            f"(first difference: {_first_diff(expected, weight_entries)})")

    offset = nl + 1 + header_len
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: tensor data truncated at {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after tensors")

    weights = ModelWeights(cfg, {
        n: Tensor(tensors[n].astype(T.default_dtype())) for n, _s in expected})
    adam = None
    if header.get("adam_step") is not None:
        adam = AdamState(
            m={n: tensors[f"adam.m.{n}"] for n, _s in expected},
            v={n: tensors[f"adam.v.{n}"] for n, _s in expected},
            step=int(header["adam_step"]))
    tc = None
    if header.get("train_config"):
        tc = TrainConfig(**header["train_config"])
    return Checkpoint(weights=weights, train_config=tc, adam=adam,
                      epoch=int(header.get("epoch", 0)),
                      best_val_eer=header.get("best_val_eer"),
                      rng_state=_decode_rng(header.get("rng_state")),
                      global_threshold=header.get("global_threshold"))


def _first_diff(a, b):
    for x, y in zip(a, b):
        if x != y:
            return f"{x} vs {y}"
    return f"length {len(a)} vs {len(b)}"


def _encode_rng(state: Optional[dict]) -> Optional[dict]:
    if state is None:
        return None
    enc = json.loads(json.dumps(state, default=str))
    return enc


def _decode_rng(state: Optional[dict]) -> Optional[dict]:
    if state is None:
        return None
    inner = state.get("state", {})
    fixed = {k: int(v) if isinstance(v, str) else v for k, v in inner.items()}
    out = dict(state)
    out["state"] = fixed
    return out
