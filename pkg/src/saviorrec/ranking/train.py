"""CTR loss, ranker training and batched prediction."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateBatchError, DivergenceError, UndefinedMetricError
from ..evalkit import auc
from ..numerics import Adagrad, Tensor, backward, bce_with_logits, no_grad
from .features import RankingData
from .model import FrozenItemInputs, RankerConfig, RankerParams, ctr_logits

log = logging.getLogger(__name__)


def ctr_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy, evaluated in logit space."""
    return bce_with_logits(logits, labels)


@dataclass
class RankerHistory:
    epoch_loss: list = field(default_factory=list)
    eval_auc: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    stream_hash: str = ""

    def records(self) -> list[dict]:
        return [{"epoch": i, "train_loss": loss, "eval_auc": a}
                for i, (loss, a) in enumerate(zip(self.epoch_loss, self.eval_auc))]


def sample_stream(n: int, epochs: int, batch_size: int, seed: int):
    """Deterministic minibatch order shared by every ablation with the same seed."""
    rng = np.random.default_rng([seed, 23])
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def predict(params: RankerParams, items: FrozenItemInputs, data: RankingData, batch_size: int = 4096) -> np.ndarray:
    """Logits for every sample of ``data``, in order."""
    out = np.empty(len(data))
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out[idx] = ctr_logits(data.batch(idx), params, items).data
    return out


def train_ranker(train: RankingData, params: RankerParams, items: FrozenItemInputs, config: RankerConfig,
                 seed: int, eval_data: RankingData | None = None) -> tuple[RankerParams, RankerHistory]:
    labels = train.label
    if labels.size == 0 or labels.min() == labels.max():
        raise DegenerateBatchError("training labels are constant; CTR training needs both clicks and non-clicks")
    steps_per_epoch = -(-len(train) // config.batch_size)
    opt = Adagrad(params.parameters(), config.lr_start, config.lr_end,
                  horizon=max(1, config.epochs * steps_per_epoch))
    history = RankerHistory()
    digest = hashlib.sha256()
    stream = sample_stream(len(train), config.epochs, config.batch_size, seed)
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps_per_epoch):
            idx = next(stream)
            digest.update(idx.astype("<i8").tobytes())
            batch = train.batch(idx)
            opt.zero_grad()
            loss = ctr_loss(ctr_logits(batch, params, items), batch["label"])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"ranker loss became {loss.item()} at epoch {epoch}",
                                      checkpoint=params.state_dict())
            backward(loss)
            opt.step()
            losses.append(loss.item())
        history.step_losses.extend(losses)
        history.epoch_loss.append(float(np.mean(losses)))
        score = None
        if eval_data is not None:
            try:
                score = auc(predict(params, items, eval_data, config.eval_batch_size), eval_data.label)
            except UndefinedMetricError:
                score = None
        history.eval_auc.append(score)
        log.info("ranker[%s] epoch %d loss %.4f eval auc %s", config.ablation, epoch, history.epoch_loss[-1], score)
    history.stream_hash = digest.hexdigest()[:16]
    return params, history
