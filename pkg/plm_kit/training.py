"""
Training loops for the encoder: masked-LM pretraining and task fine-tuning.

Long-running functions take an ``on_event(event, **kwargs)`` callback; the
CLI renders these events, tests usually ignore them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from plm_kit import tensor as T
from plm_kit.config import FinetuneConfig, MaskingPolicy, OptimizerConfig
from plm_kit.data_io import Dataset, TaskKind, TaskSpec, batch_iter
from plm_kit.encoder import (
    EncoderModel,
    TaskHead,
    encode_batch,
    encode_ids,
    features_for_head,
    head_forward,
    mlm_logits,
)
from plm_kit.errors import EmptyDataError, NumericError, TaskMismatchError, UndefinedMetricError
from plm_kit.metrics import MetricResult, accuracy, auc_roc, spearman_rho
from plm_kit.optim import AdamHyper, AdamState, adam_step
from plm_kit.rng import permutation
from plm_kit.tensor import IGNORE_INDEX, Tensor
from plm_kit.tokenizer import encode_many, mask_ids

EventFn = Callable[..., None]


def _noop(*args, **kwargs) -> None:
    pass


@dataclass
class TrainRunReport:
    stage: str
    losses: list[float] = field(default_factory=list)
    metrics: dict[str, MetricResult] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    components: dict[str, list[float]] = field(default_factory=dict)
    undefined_metrics: dict[str, str] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.losses)

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            "stage": self.stage,
            "steps": self.steps,
            "losses": self.losses,
            "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
            "components": self.components,
            "undefined_metrics": self.undefined_metrics,
            "config": self.config,
            "seed": self.seed,
        }
        if include_timing:
            data["wall_clock_s"] = self.wall_clock_s
        return data


def check_finite(loss: Tensor, stage: str, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"{stage}: loss became {value} at step {step}")
    return value


# ── Masked-LM pretraining ─────────────────────────────────


def masked_token_accuracy(
    model: EncoderModel,
    sequences: Sequence[str],
    policy: MaskingPolicy,
    seed: int = 0,
    rounds: int = 1,
    batch_size: int = 32,
) -> MetricResult:
    """Fraction of corrupted positions whose original residue is the argmax prediction."""
    if not sequences:
        raise EmptyDataError("no sequences to evaluate")
    rng = np.random.default_rng(seed)
    correct = total = 0
    with T.no_grad():
        for _ in range(rounds):
            for start in range(0, len(sequences), batch_size):
                batch = encode_many(sequences[start : start + batch_size], model.config.max_len)
                corrupted, labels = mask_ids(batch.ids, policy, rng)
                selected = labels != IGNORE_INDEX
                if not selected.any():
                    continue
                hidden = encode_ids(model, corrupted, batch.attention_mask)
                predicted = mlm_logits(model, hidden).data.argmax(axis=-1)
                correct += int((predicted[selected] == labels[selected]).sum())
                total += int(selected.sum())
    if total == 0:
        raise UndefinedMetricError("masking selected no positions; raise select_rate or rounds")
    return MetricResult("masked_token_accuracy", correct / total, total)


def _holdout_split(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = permutation(n, seed)
    n_hold = min(math.floor(n * fraction + 1e-9), n - 1)
    return sorted(order[n_hold:]), sorted(order[:n_hold])


def pretrain(
    model: EncoderModel,
    corpus: Sequence[str],
    policy: MaskingPolicy,
    hyper: AdamHyper,
    steps: int,
    batch_size: int,
    holdout_fraction: float = 0.1,
    eval_rounds: int = 3,
    seed: int = 0,
    on_event: Optional[EventFn] = None,
    log_every: int = 50,
) -> TrainRunReport:
    on_event = on_event or _noop
    if not corpus:
        raise EmptyDataError("pretraining corpus is empty")
    train_idx, hold_idx = _holdout_split(len(corpus), holdout_fraction, seed)
    train = [corpus[i] for i in train_idx]
    holdout = [corpus[i] for i in hold_idx]

    report = TrainRunReport(stage="pretrain", seed=seed, config={
        "encoder": vars(model.config).copy(),
        "masking": vars(policy).copy(),
        "optimizer": vars(hyper).copy(),
        "steps": steps,
        "batch_size": batch_size,
        "holdout_fraction": holdout_fraction,
    })
    on_event("pretrain_start", steps=steps, corpus_size=len(train), holdout_size=len(holdout))
    started = time.perf_counter()

    params = model.parameters()
    state = AdamState.create(params, hyper)
    mask_rng = np.random.default_rng([seed, policy.seed])
    dropout_rng = np.random.default_rng([seed, model.config.seed, 1])

    epoch = 0
    order: list[int] = []
    for step in range(1, steps + 1):
        if not order:
            order = permutation(len(train), seed + epoch)
            epoch += 1
        chunk, order = order[:batch_size], order[batch_size:]
        batch = encode_many([train[i] for i in chunk], model.config.max_len)
        corrupted, labels = mask_ids(batch.ids, policy, mask_rng)

        hidden = encode_ids(model, corrupted, batch.attention_mask, True, dropout_rng)
        logits = mlm_logits(model, hidden)
        loss = T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), labels.reshape(-1))
        value = check_finite(loss, "pretrain", step)

        T.zero_grad(params.values())
        T.backward(loss)
        adam_step(params, state)

        report.losses.append(value)
        if step % log_every == 0 or step == steps:
            on_event("step", stage="pretrain", step=step, total=steps, loss=value)

    T.zero_grad(params.values())
    if steps > 0:
        report.metrics["train"] = masked_token_accuracy(model, train, policy, seed, eval_rounds)
        if holdout:
            report.metrics["holdout"] = masked_token_accuracy(
                model, holdout, policy, seed, eval_rounds
            )
    report.wall_clock_s = time.perf_counter() - started
    on_event("pretrain_done", report=report)
    return report


# ── Fine-tuning ───────────────────────────────────────────


@dataclass
class Predictions:
    kind: TaskKind
    scores: np.ndarray
    targets: np.ndarray
    predicted: Optional[np.ndarray] = None


def task_loss(head: TaskHead, output: Tensor, labels: np.ndarray) -> Tensor:
    if head.kind is TaskKind.SEQUENCE_REGRESSION:
        return T.mse_loss(output, labels)
    if head.kind is TaskKind.TOKEN_CLASSIFICATION:
        return T.cross_entropy(T.reshape(output, (-1, output.shape[-1])), labels.reshape(-1))
    return T.cross_entropy(output, labels)


def _check_kinds(head: TaskHead, spec: TaskSpec) -> None:
    if head.kind is not spec.kind:
        raise TaskMismatchError(
            f"task '{spec.name}' is {spec.kind.value} but the head is {head.kind.value}"
        )
    if spec.kind is TaskKind.SEQUENCE_CLASSIFICATION and spec.num_classes != head.num_classes:
        raise TaskMismatchError(
            f"task '{spec.name}' has {spec.num_classes} classes, head outputs {head.num_classes}"
        )


def predict(
    model: EncoderModel,
    head: TaskHead,
    dataset: Dataset,
    split: str = "test",
    batch_size: int = 32,
) -> Predictions:
    """Eval-mode predictions over one split, in split order."""
    _check_kinds(head, dataset.spec)
    scores, targets = [], []
    with T.no_grad():
        for batch in batch_iter(dataset, split, batch_size, model.config.max_len):
            hidden = encode_batch(model, batch.tokens)
            out = head_forward(head, features_for_head(head, hidden, batch.tokens.attention_mask))
            if head.kind is TaskKind.TOKEN_CLASSIFICATION:
                probs = T.softmax(out, axis=-1).data[..., 1]
                keep = batch.labels != IGNORE_INDEX
                scores.append(probs[keep])
                targets.append(batch.labels[keep])
            else:
                scores.append(out.data)
                targets.append(batch.labels)
    result = Predictions(head.kind, np.concatenate(scores), np.concatenate(targets))
    if head.kind is TaskKind.SEQUENCE_CLASSIFICATION:
        result.predicted = result.scores.argmax(axis=-1)
    return result


def score_predictions(spec: TaskSpec, predictions: Predictions) -> MetricResult:
    """The task's designated metric on collected predictions."""
    support = int(predictions.targets.shape[0])
    if spec.kind is TaskKind.SEQUENCE_CLASSIFICATION:
        value = accuracy(predictions.predicted, predictions.targets)
    elif spec.kind is TaskKind.TOKEN_CLASSIFICATION:
        value = auc_roc(predictions.scores, predictions.targets)
    else:
        value = spearman_rho(predictions.scores, predictions.targets)
    return MetricResult(spec.metric.value, float(value), support)


def finetune(
    model: EncoderModel,
    head: TaskHead,
    dataset: Dataset,
    cfg: FinetuneConfig,
    optimizer: Optional[OptimizerConfig] = None,
    seed: int = 0,
    on_event: Optional[EventFn] = None,
) -> TrainRunReport:
    """Train ``head`` (and the encoder unless frozen) on the train split, score valid/test."""
    on_event = on_event or _noop
    optimizer = optimizer or OptimizerConfig()
    _check_kinds(head, dataset.spec)
    if not dataset.splits.get("train"):
        raise EmptyDataError(f"dataset '{dataset.spec.name}' has an empty train split")

    frozen = cfg.freeze_encoder
    enc_params = model.parameters()
    head_params = head.parameters()

    def hyper(lr: float) -> AdamHyper:
        return AdamHyper(lr=lr, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)

    head_state = AdamState.create(head_params, hyper(cfg.head_lr))
    # the MLM output layer is not on the task path
    enc_trainable = {k: p for k, p in enc_params.items() if not k.startswith("mlm.")}
    enc_state = None if frozen else AdamState.create(enc_trainable, hyper(cfg.encoder_lr))
    dropout_rng = np.random.default_rng([seed, model.config.seed, 2])

    report = TrainRunReport(stage="finetune", seed=seed, config={
        "task": dataset.spec.to_dict(),
        "finetune": vars(cfg).copy(),
        "optimizer": vars(optimizer).copy(),
        "encoder": vars(model.config).copy(),
    })
    on_event(
        "finetune_start",
        task=dataset.spec.name,
        epochs=cfg.epochs,
        train_size=len(dataset.splits["train"]),
        frozen=frozen,
    )
    started = time.perf_counter()

    saved_flags = {name: p.requires_grad for name, p in enc_params.items()}
    try:
        if frozen:
            for p in enc_params.values():
                p.requires_grad = False
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            epoch_losses = []
            batches = batch_iter(
                dataset, "train", cfg.batch_size, model.config.max_len, shuffle_seed=seed + epoch
            )
            for batch in batches:
                step += 1
                hidden = encode_batch(model, batch.tokens, not frozen, dropout_rng)
                features = features_for_head(head, hidden, batch.tokens.attention_mask)
                loss = task_loss(head, head_forward(head, features), batch.labels)
                value = check_finite(loss, "finetune", step)

                T.zero_grad(head_params.values())
                T.zero_grad(enc_params.values())
                T.backward(loss)
                adam_step(head_params, head_state)
                if enc_state is not None:
                    adam_step(enc_trainable, enc_state)
                report.losses.append(value)
                epoch_losses.append(value)
            on_event("epoch_end", epoch=epoch, total=cfg.epochs, loss=float(np.mean(epoch_losses)))
    finally:
        for name, p in enc_params.items():
            p.requires_grad = saved_flags[name]
            p.grad = None
        for p in head_params.values():
            p.grad = None

    model.head = head
    model.task = dataset.spec
    for split_name in ("valid", "test"):
        if dataset.splits.get(split_name):
            preds = predict(model, head, dataset, split_name)
            try:
                report.metrics[split_name] = score_predictions(dataset.spec, preds)
            except UndefinedMetricError as e:
                # trained weights stay usable; the split just has no score
                report.undefined_metrics[split_name] = str(e)
                on_event("metric_undefined", split=split_name, reason=str(e))
    report.wall_clock_s = time.perf_counter() - started
    on_event("finetune_done", report=report)
    return report
