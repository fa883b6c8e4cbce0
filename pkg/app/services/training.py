"""
Training loops, gradient verification and scoring for `EncoderModel`.

Both tasks share one loop: a seeded permutation per epoch, mini-batches of
`batch_size` and Adam updates. With the same seed, data and batch order the
trained weights are bit-identical.
"""
import logging
import time
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from ..exceptions import DataError, TrainingDivergedError, UntrainedModelError
from ..schemas.catalog import Catalog, LabeledSequence
from ..schemas.config import TrainParams
from .encoder import EncoderModel, balanced_class_weights
from .tokenizer import TokenBatch

logger = logging.getLogger(__name__)

SCORE_BATCH_SIZE = 256


class TrainReport(BaseModel):
    task: str
    epoch_losses: List[float]
    final_loss: float
    steps: int
    wall_clock_seconds: float
    seed: int


class GradCheckReport(BaseModel):
    max_relative_error: float
    errors: Dict[str, float]


class AdamOptimizer:
    def __init__(self, params: TrainParams):
        self.lr = params.learning_rate
        self.beta1 = params.beta1
        self.beta2 = params.beta2
        self.eps = params.eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, model: EncoderModel, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name in sorted(model.params):
            if name in model.frozen:
                continue
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            model.params[name] -= update.astype(model.params[name].dtype)


def _train(
    model: EncoderModel,
    data: TokenBatch,
    task: str,
    params: TrainParams,
    sample_weights: Optional[np.ndarray] = None,
) -> TrainReport:
    rng = np.random.default_rng(params.seed)
    optimizer = AdamOptimizer(params)
    started = time.perf_counter()
    epoch_losses: List[float] = []
    steps = 0
    for epoch in range(params.epochs):
        order = rng.permutation(data.size)
        batch_losses = []
        for start in range(0, data.size, params.batch_size):
            idx = order[start : start + params.batch_size]
            weights = None if sample_weights is None else sample_weights[idx]
            loss, grads = model.loss_and_gradients(data.take(idx), task, weights, training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"{task} loss is not finite at epoch {epoch + 1}, step {steps + 1}")
            optimizer.step(model, grads)
            steps += 1
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
        logger.info(f"{task} epoch {epoch + 1}/{params.epochs}: loss {epoch_losses[-1]:.5f}")

    bad = [name for name, value in model.params.items() if not np.isfinite(value).all()]
    if bad:
        raise TrainingDivergedError(f"non-finite weights after training: {bad[:3]}")
    model.trained.add(task)
    return TrainReport(
        task=task,
        epoch_losses=epoch_losses,
        final_loss=epoch_losses[-1],
        steps=steps,
        wall_clock_seconds=time.perf_counter() - started,
        seed=params.seed,
    )


def train_next_item(
    model: EncoderModel, sequences: Sequence[LabeledSequence], catalog: Catalog, params: TrainParams
) -> tuple:
    """Minimize cross-entropy of the SKU at position i + 1 given the prefix up to i."""
    if not sequences:
        raise DataError("no sequences to train on")
    data = model.encode(sequences, catalog, canonical=False)
    if not (data.targets >= 0).any():
        raise DataError("no sequence has a next item to predict")
    logger.info(f"Training next-item model on {len(sequences)} sequences")
    report = _train(model, data, "next_item", params)
    return model, report


def sample_weights_for(model: EncoderModel, labels: np.ndarray) -> Optional[np.ndarray]:
    if not model.config.class_weighting:
        return None
    return balanced_class_weights(labels)[labels]


def train_classifier(
    model: EncoderModel, sequences: Sequence[LabeledSequence], catalog: Catalog, params: TrainParams
) -> tuple:
    """Minimize (optionally class-weighted) cross-entropy of the CLS head."""
    labels = np.array([seq.target for seq in sequences], dtype=np.int64)
    if any(seq.label is None for seq in sequences):
        raise DataError("classifier training needs labeled sequences")
    if len(np.unique(labels)) < 2:
        raise DataError("classifier training needs both core and negative sequences")
    data = model.encode(sequences, catalog)
    weights = sample_weights_for(model, labels)
    logger.info(
        f"Training classifier on {len(sequences)} windows "
        f"({int(labels.sum())} core, weighting={'on' if weights is not None else 'off'})"
    )
    report = _train(model, data, "classifier", params, weights)
    return model, report


def grad_check(
    model: EncoderModel,
    batch: TokenBatch,
    task: Optional[str] = None,
    sample_weights: Optional[np.ndarray] = None,
    entries_per_tensor: int = 3,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on a random subset of
    entries of every non-frozen tensor.
    """
    if model.dtype != np.float64:
        raise DataError("grad_check needs a float64 model")
    if task is None:
        task = "both" if model.has_item_head else "classifier"
    _, grads = model.loss_and_gradients(batch, task, sample_weights)
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name in sorted(model.params):
        if name in model.frozen:
            continue
        tensor = model.params[name]
        flat = tensor.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries_per_tensor, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            original = flat[i]
            flat[i] = original + step
            plus = model.loss(batch, task, sample_weights)
            flat[i] = original - step
            minus = model.loss(batch, task, sample_weights)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(grads[name].reshape(-1)[i])
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, rel)
        errors[name] = worst
    max_error = max(errors.values(), default=0.0)
    logger.info(f"Gradient check over {len(errors)} tensors: max relative error {max_error:.3e}")
    return GradCheckReport(max_relative_error=max_error, errors=errors)


# ---------------------------------------------------------------- inference


def _require_classifier(model: EncoderModel) -> None:
    if "classifier" not in model.trained:
        raise UntrainedModelError("classifier head has not been trained")


def score_batch(
    model: EncoderModel, sequences: Sequence[LabeledSequence], catalog: Catalog, batch_size: int = SCORE_BATCH_SIZE
) -> np.ndarray:
    """Designer-class probability of every sequence."""
    _require_classifier(model)
    scores = np.zeros(len(sequences), dtype=np.float64)
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        scores[start : start + len(chunk)] = model.class_probabilities(model.encode(chunk, catalog))[:, 1]
    return scores


def score_consumer(model: EncoderModel, sequence: LabeledSequence, catalog: Catalog) -> float:
    return float(score_batch(model, [sequence], catalog)[0])


def next_item_accuracy(model: EncoderModel, sequences: Sequence[LabeledSequence], catalog: Catalog) -> float:
    """Top-1 accuracy of the next-item head over all positions with a next event."""
    batch = model.encode(sequences, catalog, canonical=False)
    output, _ = model.forward(batch, heads=["item"])
    valid = batch.targets >= 0
    if not valid.any():
        return 0.0
    predicted = output.item_logits.argmax(axis=-1)
    return float((predicted[valid] == batch.targets[valid]).mean())
