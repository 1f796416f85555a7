"""Optimization and evaluation: categorical CE over the item vocabulary,
bias-corrected Adam, top-K ranking metrics, and the early-stopping loop.

Determinism: all randomness (shuffling, dropout, stochastic depth) flows
from counter-based generators derived from the run seed, so a fixed seed
reproduces the numeric history bitwise.  Evaluation draws no randomness.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, make_batches
from .errors import ContractError, DivergenceError, NumericError
from .grela import GrelaModel, forward, mask_padding_logit
from .numerics import Tape, Tensor, make_rng, record


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    eval_metric: str = "ndcg@10"
    topk: tuple = (5, 10)
    eval_batch_size: int = 256
    mask_seen: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ContractError("batch sizes must be positive")


@dataclass
class MetricsReport:
    split: str
    epoch: int
    metrics: dict  # hr@K / ndcg@K / mrr@K
    wall_time: float = 0.0
    loss: float | None = None

    def __post_init__(self):
        for key, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"metric {key}={value} outside [0, 1]")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean -log softmax(logits)[target] with the padding slot excluded from
    the softmax support.  Padding targets violate the contract."""
    targets = np.asarray(targets)
    b, v = logits.shape
    if targets.shape != (b,):
        raise ContractError(f"targets must be ({b},), got {targets.shape}")
    if np.any(targets < 1) or np.any(targets >= v):
        raise ContractError("targets must be real item ids (padding excluded)")
    x = logits.data[:, 1:]
    m = x.max(axis=1)
    lse = m + np.log(np.exp(x - m[:, None]).sum(axis=1))
    picked = x[np.arange(b), targets - 1]
    out = Tensor(np.mean(lse - picked))

    def bwd(g):
        p = np.exp(x - m[:, None])
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), targets - 1] -= 1.0
        full = np.zeros_like(logits.data)
        full[:, 1:] = p * (float(g) / b)
        return (full,)

    return record(out, (logits,), bwd)


class AdamState:
    """First/second moment buffers per parameter name."""

    def __init__(self):
        self.m = {}
        self.v = {}


def adam_step(params, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update over (name, tensor) pairs.

    Parameters without a gradient this step keep decaying moments.  A
    non-finite gradient aborts, naming the parameter.
    """
    if t < 1:
        raise ContractError(f"step index must be >= 1, got {t}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    if cfg.clip_norm > 0:
        total = 0.0
        for _, p in params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for _, p in params:
                if p.grad is not None:
                    p.grad *= scale
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def rank_metrics(logits_row: np.ndarray, target: int, k: int):
    """(hr, ndcg, mrr) at cutoff k; ties broken by ascending item id.

    Rank r counts real items strictly better plus equal-scored items with a
    smaller id; padding slot 0 never competes.
    """
    if target < 1 or target >= logits_row.shape[0]:
        raise ContractError(f"target {target} is not a real item id")
    scores = logits_row[1:]
    ids = np.arange(1, logits_row.shape[0])
    s_t = logits_row[target]
    r = 1 + int((scores > s_t).sum()) + int(((scores == s_t) & (ids < target)).sum())
    hit = 1.0 if r <= k else 0.0
    return hit, hit / np.log2(r + 1.0), hit / r


def _batch_ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    scores = logits[:, 1:]
    ids = np.arange(1, logits.shape[1])
    s_t = logits[np.arange(len(targets)), targets]
    greater = (scores > s_t[:, None]).sum(axis=1)
    ties = ((scores == s_t[:, None]) & (ids[None, :] < targets[:, None])).sum(axis=1)
    return 1 + greater + ties


def evaluate(model: GrelaModel, ds: InteractionDataset, split: str,
             topk=(5, 10), batch_size: int = 256,
             mask_seen: bool = False, epoch: int = 0) -> MetricsReport:
    """Full-ranking evaluation: every item is scored, no candidate sampling.

    Users are visited in fixed dataset order and reduced deterministically.
    ``mask_seen`` optionally pushes items already in the context to the
    bottom of the ranking.
    """
    start = time.perf_counter()
    sums = {f"{name}@{k}": 0.0 for k in topk for name in ("hr", "ndcg", "mrr")}
    count = 0
    for ids, targets in make_batches(ds, split, batch_size,
                                     n_positions=min(ds.max_len, model.config.max_len)):
        logits = mask_padding_logit(forward(model, ids, training=False).data)
        if mask_seen:
            for row in range(len(targets)):
                seen = ids[row][ids[row] != 0]
                logits[row, seen] = -np.inf
        ranks = _batch_ranks(logits, targets)
        for k in topk:
            hit = (ranks <= k)
            sums[f"hr@{k}"] += float(hit.sum())
            sums[f"ndcg@{k}"] += float((hit / np.log2(ranks + 1.0)).sum())
            sums[f"mrr@{k}"] += float((hit / ranks).sum())
        count += len(targets)
    if count == 0:
        raise ContractError(f"split {split!r} has no evaluation samples")
    metrics = {key: value / count for key, value in sums.items()}
    return MetricsReport(split=split, epoch=epoch, metrics=metrics,
                         wall_time=time.perf_counter() - start)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -np.inf
    epochs_run: int = 0


def train(model: GrelaModel, ds: InteractionDataset, cfg: TrainConfig) -> TrainResult:
    """Epoch loop: shuffled CE steps, per-epoch validation, best-checkpoint
    tracking, early stop after ``patience`` epochs without improvement.

    On divergence (non-finite loss) the best parameters are restored into
    the model before the error is raised.
    """
    metric_key = cfg.eval_metric.lower()
    params = model.parameters()
    state = AdamState()
    result = TrainResult()
    best_state = model.state_arrays()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epoch_start = time.perf_counter()
        drop_rng = make_rng((cfg.seed, 2, epoch))
        losses = []
        for ids, targets in make_batches(ds, "train", cfg.batch_size,
                                         n_positions=model.config.max_len,
                                         shuffle_seed=(cfg.seed, 1, epoch)):
            try:
                with Tape() as tape:
                    logits = forward(model, ids, training=True, rng=drop_rng)
                    loss = cross_entropy(logits, targets)
                    loss_val = loss.item()
                    if not np.isfinite(loss_val):
                        raise NumericError("loss is not finite")
                    model.zero_grads()
                    tape.backward(loss)
                step += 1
                adam_step(params, state, step, cfg)
            except NumericError as exc:
                model.load_state_arrays(best_state)
                raise DivergenceError(
                    f"training diverged at epoch {epoch} step {step + 1} ({exc}); "
                    f"best parameters (epoch {result.best_epoch}) retained",
                    history=result.history) from None
            losses.append(loss_val)
        report = evaluate(model, ds, "valid", topk=cfg.topk,
                          batch_size=cfg.eval_batch_size,
                          mask_seen=cfg.mask_seen, epoch=epoch)
        report.loss = float(np.mean(losses)) if losses else None
        report.wall_time = time.perf_counter() - epoch_start
        result.history.append(report)
        result.epochs_run = epoch
        if metric_key not in report.metrics:
            raise ContractError(
                f"eval_metric {cfg.eval_metric!r} not in {sorted(report.metrics)}")
        value = report.metrics[metric_key]
        if value > result.best_metric:
            result.best_metric = value
            result.best_epoch = epoch
            best_state = model.state_arrays()
        elif epoch - result.best_epoch >= cfg.patience:
            break
    model.load_state_arrays(best_state)
    return result


# ---------------------------------------------------------------------------
# structured output
# ---------------------------------------------------------------------------


def history_records(result: TrainResult) -> list:
    records = []
    for rep in result.history:
        rec = {"split": rep.split, "epoch": rep.epoch, "loss": rep.loss,
               "wall_time": rep.wall_time}
        rec.update(rep.metrics)
        records.append(rec)
    return records


def write_history_jsonl(result: TrainResult, path):
    """One JSON record per epoch (line-delimited)."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in history_records(result):
            f.write(json.dumps(rec) + "\n")


def write_report_table(reports, path, topk=(5, 10)):
    """Tab-separated table with the usual HR/NDCG/MRR column layout."""
    cols = ["split", "epoch"]
    for k in topk:
        cols += [f"HR@{k}", f"NDCG@{k}", f"MRR@{k}"]
    lines = ["\t".join(cols)]
    for rep in reports:
        row = [rep.split, str(rep.epoch)]
        for k in topk:
            row += [f"{rep.metrics[f'{name}@{k}']:.4f}"
                    for name in ("hr", "ndcg", "mrr")]
        lines.append("\t".join(row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
