"""Fine-tuning protocol: document segmentation, pair sampling from the
first-stage run, pairwise cross-entropy, Adam with gradient accumulation,
early stopping, and 5-fold cross-validation plans.

Micro-batches of two pairs are summed and their gradients accumulated
until the effective batch is reached; one Adam step then applies the mean
gradient, so learning-rate semantics do not depend on batch size.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .attnmat import TranslationAttentionMatrix, build_mtr, build_placebo
from .evalrep import Qrels, map_at
from .model import MartModel, score_last_int
from .textprep import TokenizedSequence, Vocab, encode_pair
from .xresource import TranslationTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainPair:
    query_id: str
    positive: str
    negative: str

    def __post_init__(self) -> None:
        if self.positive == self.negative:
            raise ValueError("positive and negative must differ")


@dataclass(frozen=True)
class FoldPlan:
    """Per fold (train, validation, test) query-id splits.

    Test chunks partition the query set; within a fold the three parts are
    disjoint and the ratio is 60/20/20 up to divisibility (earlier chunks
    take the remainder).
    """

    folds: tuple[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        all_ids: set[str] = set()
        total = 0
        for train, val, test in self.folds:
            parts = set(train) | set(val) | set(test)
            if len(parts) != len(train) + len(val) + len(test):
                raise ValueError("fold parts overlap")
            all_ids.update(test)
            total += len(test)
        if total != len(all_ids):
            raise ValueError("test chunks overlap across folds")

    def __len__(self) -> int:
        return len(self.folds)


def make_folds(query_ids: Sequence[str], seed: int, n_folds: int = 5) -> FoldPlan:
    """Shuffle and split queries into rotating test/validation/train folds."""
    ids = list(query_ids)
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} queries, got {len(ids)}")
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    chunks = [list(c) for c in np.array_split(ids, n_folds)]
    folds = []
    for f in range(n_folds):
        test = chunks[f]
        val = chunks[(f + 1) % n_folds]
        train = [q for g, c in enumerate(chunks) if g not in (f, (f + 1) % n_folds) for q in c]
        folds.append((tuple(train), tuple(val), tuple(test)))
    return FoldPlan(folds=tuple(folds))


def prepare_doc_input(
    query_words: Sequence[str],
    doc_words: Sequence[str],
    vocab: Vocab,
    max_len: int = 512,
    doc_cap: int = 800,
) -> list[TokenizedSequence]:
    """Encode a query/document pair, splitting the document if needed.

    The document is truncated to its first ``doc_cap`` words. If the
    encoded pair exceeds ``max_len`` tokens the document words are split
    evenly in two, each half paired with the full query.
    """
    doc = list(doc_words[:doc_cap])
    seq = encode_pair(query_words, doc, vocab)
    if seq.m <= max_len:
        return [seq]
    if encode_pair(query_words, [], vocab).m > max_len:
        raise ValueError("query alone exceeds the model's maximum length")
    half = math.ceil(len(doc) / 2)
    return [
        encode_pair(query_words, doc[:half], vocab),
        encode_pair(query_words, doc[half:], vocab),
    ]


def sample_pairs(
    qrels: Qrels,
    firststage_run: Mapping[str, Sequence[tuple[str, float]]],
    seed,
    negatives_per_positive: int = 1,
    candidate_depth: int = 500,
    query_ids: Sequence[str] | None = None,
) -> list[TrainPair]:
    """One training pair per positive, negatives drawn uniformly from the
    non-relevant top candidates of the first stage.

    Queries whose candidate pool has no negative are skipped with a
    warning. Fixed seeds reproduce identical pair lists.
    """
    rng = np.random.default_rng(seed)
    qids = sorted(firststage_run) if query_ids is None else [q for q in sorted(query_ids) if q in firststage_run]
    pairs: list[TrainPair] = []
    for qid in qids:
        positives = sorted(qrels.relevant_docs(qid))
        if not positives:
            continue
        pool = [
            doc
            for doc, _ in firststage_run[qid][:candidate_depth]
            if not qrels.is_relevant(qid, doc)
        ]
        if not pool:
            log.warning("query %s has no negative candidates; skipped", qid)
            continue
        for pos in positives:
            for _ in range(negatives_per_positive):
                neg = pool[int(rng.integers(len(pool)))]
                pairs.append(TrainPair(query_id=qid, positive=pos, negative=neg))
    return pairs


def pairwise_ce_loss(s_pos: T.Tensor, s_neg: T.Tensor) -> T.Tensor:
    """log(1 + exp(s_neg - s_pos)), the pairwise cross-entropy loss."""
    return T.softplus(T.sub(s_neg, s_pos))


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: Mapping[str, T.Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, T.Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 2e-5,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.value.shape} for {name}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** state.t)
        v_hat = state.v[name] / (1.0 - b2 ** state.t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


class EarlyStopper:
    """Stops after ``patience`` updates without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_step = 0
        self._step = 0

    def update(self, metric: float) -> bool:
        """Record a metric; return True when training should stop."""
        self._step += 1
        if metric > self.best:
            self.best = metric
            self.best_step = self._step
        return self._step - self.best_step >= self.patience


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 2e-5
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    patience: int = 20
    micro_batch_pairs: int = 2
    effective_batch_pairs: int = 16
    negatives_per_positive: int = 1
    rerank_depth: int = 100
    candidate_depth: int = 500
    doc_cap: int = 800

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)!r}" for k in self.__dataclass_fields__]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainerConfig":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        kwargs = {}
        for name in cls.__dataclass_fields__:
            if name not in kv:
                continue
            default = getattr(cls, name)
            kwargs[name] = float(kv[name]) if isinstance(default, float) else int(kv[name])
        return cls(**kwargs)


class EncodedStore:
    """Caches encoded segments and attention matrices per (query, doc).

    The attention matrices depend only on the inputs and the mode, never
    on model parameters, so they are shared across epochs and reranking
    passes.
    """

    def __init__(
        self,
        vocab: Vocab,
        table: TranslationTable | None,
        queries: Mapping[str, Sequence[str]],
        docs: Mapping[str, Sequence[str]],
        mode: str = "mart",
        max_len: int = 512,
        doc_cap: int = 800,
    ):
        if mode not in ("mart", "placebo", "vanilla"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "mart" and table is None:
            raise ValueError("mart mode needs a translation table")
        self.vocab = vocab
        self.table = table
        self.queries = queries
        self.docs = docs
        self.mode = mode
        self.max_len = max_len
        self.doc_cap = doc_cap
        self._cache: dict[tuple[str, str], tuple[list[TokenizedSequence], list[TranslationAttentionMatrix]]] = {}

    def encoded(self, qid: str, doc_id: str):
        key = (qid, doc_id)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        segments = prepare_doc_input(
            self.queries[qid], self.docs[doc_id], self.vocab, self.max_len, self.doc_cap
        )
        if self.mode == "mart":
            mtrs = [build_mtr(seq, self.table) for seq in segments]
        else:
            mtrs = [build_placebo(seq.m) for seq in segments]
        self._cache[key] = (segments, mtrs)
        return segments, mtrs


@dataclass
class TrainData:
    store: EncodedStore
    qrels: Qrels
    firststage_run: Mapping[str, Sequence[tuple[str, float]]]
    train_qids: tuple[str, ...]
    val_qids: tuple[str, ...]


@dataclass
class TrainResult:
    best_epoch: int
    best_val_map: float
    log_rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_state: dict[str, np.ndarray] = field(default_factory=dict)


def snapshot_params(model: MartModel) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in model.parameters().items()}


def restore_params(model: MartModel, state: Mapping[str, np.ndarray]) -> None:
    for k, p in model.parameters().items():
        p.value[...] = state[k]


def rerank(
    model: MartModel,
    store: EncodedStore,
    firststage_run: Mapping[str, Sequence[tuple[str, float]]],
    query_ids: Sequence[str],
    depth: int = 100,
) -> dict[str, list[tuple[str, float]]]:
    """Score the top first-stage documents with the model, ties broken by
    ascending doc id."""
    out: dict[str, list[tuple[str, float]]] = {}
    for qid in sorted(query_ids):
        candidates = firststage_run.get(qid, ())[:depth]
        scored = []
        for doc_id, _ in candidates:
            segments, mtrs = store.encoded(qid, doc_id)
            s = float(score_last_int(model, segments, mtrs).value.reshape(()))
            scored.append((doc_id, s))
        scored.sort(key=lambda it: (-it[1], it[0]))
        out[qid] = scored
    return out


def write_training_log(path: str | Path, rows: Sequence[tuple[int, float, float, float]]) -> None:
    """CSV of (epoch, train loss, validation MAP, wall seconds)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_map,wall_time\n")
        for epoch, loss, val_map, wall in rows:
            fh.write(f"{epoch},{loss:.6f},{val_map:.6f},{wall:.3f}\n")


def train(
    model: MartModel,
    data: TrainData,
    cfg: TrainerConfig,
    seed: int,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Fine-tune with resampled pairs per epoch and MAP-based early stop.

    Per epoch: sample pairs for the training queries, accumulate summed
    micro-batch gradients into an effective batch, apply one Adam step per
    batch, then re-rank the validation queries and track the best MAP.
    """
    params = model.parameters()
    opt = AdamState.init(params)
    stopper = EarlyStopper(cfg.patience)
    drop_rng = np.random.default_rng([seed, 7919])
    result = TrainResult(best_epoch=0, best_val_map=-math.inf)
    buffers = {k: np.zeros_like(p.value) for k, p in params.items()}

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        pairs = sample_pairs(
            data.qrels,
            data.firststage_run,
            seed=[seed, epoch],
            negatives_per_positive=cfg.negatives_per_positive,
            candidate_depth=cfg.candidate_depth,
            query_ids=data.train_qids,
        )
        if not pairs:
            raise ValueError("no training pairs could be sampled")
        order = np.random.default_rng([seed, epoch, 1]).permutation(len(pairs))
        pairs = [pairs[i] for i in order]

        total_loss = 0.0
        pending = 0

        def apply_step(n_pairs: int) -> None:
            grads = {k: buf / n_pairs for k, buf in buffers.items()}
            adam_step(params, grads, opt, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
            for buf in buffers.values():
                buf[...] = 0.0

        for start in range(0, len(pairs), cfg.micro_batch_pairs):
            micro = pairs[start : start + cfg.micro_batch_pairs]
            losses = []
            for pair in micro:
                seg_p, mtr_p = data.store.encoded(pair.query_id, pair.positive)
                seg_n, mtr_n = data.store.encoded(pair.query_id, pair.negative)
                s_pos = score_last_int(model, seg_p, mtr_p, training=True, rng=drop_rng)
                s_neg = score_last_int(model, seg_n, mtr_n, training=True, rng=drop_rng)
                losses.append(pairwise_ce_loss(s_pos, s_neg))
            micro_loss = losses[0]
            for extra in losses[1:]:
                micro_loss = T.add(micro_loss, extra)
            micro_loss = T.sum_all(micro_loss)
            T.backward(micro_loss)
            total_loss += float(micro_loss.value)
            for k, p in params.items():
                if p.grad is not None:
                    buffers[k] += p.grad
                    p.zero_grad()
            pending += len(micro)
            if pending >= cfg.effective_batch_pairs:
                apply_step(pending)
                pending = 0
        if pending:
            apply_step(pending)

        val_run = rerank(model, data.store, data.firststage_run, data.val_qids, cfg.rerank_depth)
        val_map = map_at(val_run, data.qrels, cutoff=cfg.rerank_depth)
        wall = time.perf_counter() - t0
        result.log_rows.append((epoch, total_loss / len(pairs), val_map, wall))
        log.info("epoch %d: loss %.4f, val MAP %.4f", epoch, total_loss / len(pairs), val_map)

        if val_map > result.best_val_map:
            result.best_val_map = val_map
            result.best_epoch = epoch
            result.best_state = snapshot_params(model)
        if stopper.update(val_map):
            log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
            break

    if log_path is not None:
        write_training_log(log_path, result.log_rows)
    return result
