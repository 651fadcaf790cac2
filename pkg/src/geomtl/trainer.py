"""Training loop: seeded shuffled mixed-group batches, Adam, day-wise fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import Adam
from .towers import Batch, TwoTowerModel
from .worldgen import EmbeddingTable, Interactions

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256  # production: 8192
    learning_rate: float = 0.001  # same as production
    epochs: int = 5
    seed: int = 0
    incremental: bool = True
    incremental_epochs: int = 1
    carry_optimizer: bool = True

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm needs two rows)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.incremental_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunManifest:
    variant: str
    model_kind: str
    dataset_id: str
    config: dict
    stages: list[dict] = field(default_factory=list)
    loss_curve: list[tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_curve"] = [list(r) for r in self.loss_curve]
        return d

    def loss_csv(self) -> str:
        lines = ["stage,epoch,batch,loss"]
        for stage, epoch, batch, loss in self.loss_curve:
            lines.append(f"{stage},{epoch},{batch},{loss!r}")
        return "\n".join(lines) + "\n"

    def epoch_means(self, stage: str = "base") -> list[float]:
        out: dict[int, list[float]] = {}
        for s, e, _, loss in self.loss_curve:
            if s == stage:
                out.setdefault(e, []).append(loss)
        return [float(np.mean(out[e])) for e in sorted(out)]


@dataclass
class Features:
    """Embedding lookups plus the territory -> group map used to build batches."""

    users: EmbeddingTable
    titles: EmbeddingTable
    group_map: np.ndarray

    def batch(self, inter: Interactions, rows=None) -> Batch:
        if rows is not None:
            inter = inter.select(rows)
        return Batch(
            self.users.lookup(inter.user_id),
            self.titles.lookup(inter.title_id),
            inter.label,
            self.group_map[inter.territory],
            inter.territory,
        )


def _ensure_optimizer(model: TwoTowerModel, config: TrainConfig, fresh: bool = False) -> None:
    if model.optimizer is None or fresh:
        model.optimizer = Adam(lr=config.learning_rate)
    else:
        model.optimizer.lr = config.learning_rate


def _run_epochs(model, data: Interactions, feats: Features, config: TrainConfig, epochs: int,
                seed_key, stage: str, curve: list) -> None:
    # one gather up front; also surfaces missing ids before any update happens
    full = feats.batch(data)
    n = len(full)
    for epoch in range(epochs):
        rng = np.random.default_rng([config.seed, *seed_key, epoch])
        order = rng.permutation(n)
        starts = range(0, n, config.batch_size)
        for b, start in enumerate(starts):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue  # short tail: batch-norm needs two rows
            batch = Batch(full.user_embs[idx], full.title_embs[idx], full.labels[idx],
                          full.group_ids[idx], full.territory_ids[idx])
            loss = model.train_step(batch)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at stage={stage} epoch={epoch} batch={b}; "
                    f"rows={idx[:16].tolist()}..., labels={batch.labels[:16].tolist()}"
                )
            curve.append((stage, epoch, b, float(loss)))


def train(model: TwoTowerModel, data: Interactions, feats: Features, config: TrainConfig,
          variant: str = "", dataset_id: str = "") -> tuple[TwoTowerModel, RunManifest]:
    """Base training over ``data``; returns the model and its manifest."""
    config.validate()
    if len(data) == 0:
        raise TrainingError("training set is empty")
    _ensure_optimizer(model, config)
    manifest = RunManifest(variant=variant, model_kind=model.kind, dataset_id=dataset_id, config=asdict(config))
    _run_epochs(model, data, feats, config, config.epochs, (0,), "base", manifest.loss_curve)
    manifest.stages.append({"name": "base", "days_seen": sorted(set(data.day.tolist()))})
    model.eval()
    return model, manifest


def incremental_step(model: TwoTowerModel, day_data: Interactions, feats: Features, config: TrainConfig,
                     manifest: RunManifest | None = None) -> TwoTowerModel:
    """Fine-tune on one day of training-user data, keeping optimizer state by default."""
    if len(day_data) == 0:
        log.warning("incremental step skipped: no data for this day")
        return model
    day = int(day_data.day.max())
    _ensure_optimizer(model, config, fresh=not config.carry_optimizer)
    curve = manifest.loss_curve if manifest is not None else []
    _run_epochs(model, day_data, feats, config, config.incremental_epochs, (1, day), f"day{day}", curve)
    model.eval()
    return model


def score(model: TwoTowerModel, inter: Interactions, feats: Features, chunk: int = 8192) -> np.ndarray:
    """Inference-mode propensity scores for every interaction row."""
    model.eval()
    out = np.empty(len(inter))
    for start in range(0, len(inter), chunk):
        rows = np.arange(start, min(start + chunk, len(inter)))
        out[rows] = model.score(feats.batch(inter, rows))
    return out


def evaluation_schedule(model: TwoTowerModel, split, feats: Features, config: TrainConfig,
                        manifest: RunManifest | None = None):
    """Yield ``(day, model, days_seen)`` for each test day in order.

    Before test day ``i`` the model is fine-tuned on day ``i-1`` training
    data when that day lies after the base window; the first test day uses
    the base model, whose last training day is already ``i-1``.
    """
    seen = set()
    if manifest is not None and manifest.stages:
        seen = set(manifest.stages[0]["days_seen"])
    for day in sorted(split.tests):
        prev = day - 1
        if config.incremental and prev in split.incremental and prev not in seen:
            incremental_step(model, split.incremental[prev], feats, config, manifest)
            seen.add(prev)
        if seen and max(seen) >= day:
            raise TrainingError(f"leakage: model for day {day} has seen day {max(seen)}")
        if manifest is not None:
            manifest.stages.append({"name": f"eval_day{day}", "days_seen": sorted(seen)})
        yield day, model, sorted(seen)
