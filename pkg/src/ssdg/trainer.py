"""Self-supervised pretraining: SGD, the AVG multi-task loop, FT stages and DeepCluster."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from . import gabor
from .checkpoint import save_checkpoint
from .data import stable_seed
from .errors import ConfigError, NumericalError
from .nets import BackboneConfig, FeatureExtractor, TaskHead, build_backbone, build_head, reinit_head
from .pretext import expand_rotations, reassign_pseudolabels, sobel_view

log = logging.getLogger(__name__)

TASK_IDS = ("R", "G", "DC")
NORM_EPS = 1e-8
LOSS_LOG_COLUMNS = ("step", "epoch", "task_id", "raw_loss", "normalized_loss", "lr")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lr_decay_factor: float = 0.1
    lr_step_epochs: int = 10
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.lr_step_epochs < 1:
            raise ConfigError("lr_step_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_step_epochs)


DEEPCLUSTER_OPTIM = OptimConfig(lr=0.05, weight_decay=1e-5)


def sgd_update(params: dict, grads: dict, slots: dict, config: OptimConfig,
               lr: float | None = None) -> None:
    """In-place heavy-ball SGD: ``v = mu*v + (g + wd*p)``; ``p -= lr*v``.

    ``slots`` holds the momentum buffers keyed like ``params`` and is filled on
    first use.  Parameters whose gradient is ``None`` are left untouched.
    """
    lr = config.lr if lr is None else lr
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in tensor {name!r}")
            d = g + config.weight_decay * p if config.weight_decay else g.clone()
            v = slots.get(name)
            if v is None:
                v = slots[name] = torch.zeros_like(p)
            v.mul_(config.momentum).add_(d)
            p.sub_(lr * v)


class SGD:
    """Thin stateful wrapper around :func:`sgd_update` for named parameters."""

    def __init__(self, named_params, config: OptimConfig):
        self.params = dict(named_params)
        self.config = config
        self.slots: dict = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        sgd_update(self.params, {n: p.grad for n, p in self.params.items()},
                   self.slots, self.config, lr=lr)


class LossNormalizer:
    """Detached EMA of a task's raw loss, seeded by the first observation."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.value: float | None = None

    def update(self, raw: float) -> float:
        if self.value is None:
            self.value = raw
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * raw
        return self.value


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------

class Task:
    """One pretext task: an input transform, a head and a loss."""

    id = ""

    def __init__(self, head: TaskHead):
        self.head = head
        self.normalizer = LossNormalizer()

    def prepare(self, images: torch.Tensor) -> None:
        """Hook run once on the training pool before training."""

    def start_epoch(self, extractor, images, epoch: int, seed: int) -> None:
        """Hook run before each epoch in which the task is active."""

    def batch(self, images: torch.Tensor, idx: torch.Tensor):
        raise NotImplementedError

    def loss(self, out, target) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, extractor, images, idx):
        """Return ``(z, raw_loss)`` for one batch; ``z`` is the extractor output."""
        x, target = self.batch(images, idx)
        z = extractor(x)
        return z, self.loss(self.head(z), target)

    @torch.no_grad()
    def evaluate(self, extractor, images) -> dict:
        return {}


class RotationTask(Task):
    id = "R"

    def batch(self, images, idx):
        return expand_rotations(images[idx])

    def loss(self, out, target):
        return F.cross_entropy(out, target)

    @torch.no_grad()
    def evaluate(self, extractor, images, batch_size: int = 256) -> dict:
        correct = total = 0
        loss_sum = 0.0
        for s in range(0, len(images), batch_size):
            x, y = expand_rotations(images[s:s + batch_size])
            logits = self.head(extractor(x))
            loss_sum += F.cross_entropy(logits, y, reduction="sum").item()
            correct += (logits.argmax(1) == y).sum().item()
            total += len(y)
        return {"rotation_acc": correct / total, "rotation_val_loss": loss_sum / total}


class GaborTask(Task):
    id = "G"

    def __init__(self, head: TaskHead, config: gabor.GaborBankConfig | None = None):
        super().__init__(head)
        self.config = config or gabor.GaborBankConfig()
        self.bank = gabor.build_gabor_bank(self.config)
        self.targets = None

    def _targets(self, images, batch_size: int = 512):
        return torch.cat([gabor.make_targets(images[s:s + batch_size], self.config, self.bank)
                          for s in range(0, len(images), batch_size)])

    def prepare(self, images):
        self.targets = self._targets(images)

    def batch(self, images, idx):
        if self.targets is None:
            self.prepare(images)
        return images[idx], self.targets[idx]

    def loss(self, out, target):
        return gabor.reconstruction_loss(out, target)

    @torch.no_grad()
    def evaluate(self, extractor, images, batch_size: int = 256) -> dict:
        targets = self._targets(images)
        total = 0.0
        for s in range(0, len(images), batch_size):
            pred = self.head(extractor(images[s:s + batch_size]))
            total += self.loss(pred, targets[s:s + batch_size]).item() * len(pred)
        return {"gabor_val_loss": total / len(images)}


class ClusterTask(Task):
    """DeepCluster: k-means pseudo-labels on the Sobel view, recomputed every epoch."""

    id = "DC"

    def __init__(self, head: TaskHead, k: int, pca_dim: int | None = 256):
        super().__init__(head)
        if k < 2:
            raise ConfigError("k", "DeepCluster needs k >= 2")
        self.k = k
        self.pca_dim = pca_dim
        self.labels = None
        self.cluster_state = None
        self.label_history: list = []

    def start_epoch(self, extractor, images, epoch, seed):
        if len(images) < self.k:
            raise ConfigError("k", f"k={self.k} exceeds the {len(images)} training samples")
        labels, state = reassign_pseudolabels(extractor, images, self.k,
                                              seed=stable_seed(seed, "kmeans", epoch),
                                              pca_dim=self.pca_dim)
        state.epoch = epoch
        self.labels = torch.from_numpy(labels)
        self.cluster_state = state
        self.label_history.append(labels)
        reinit_head(self.head, stable_seed(seed, "reinit", epoch))

    def batch(self, images, idx):
        return sobel_view(images[idx]), self.labels[idx]

    def loss(self, out, target):
        return F.cross_entropy(out, target)


def build_task(task_id: str, extractor: FeatureExtractor, *, seed: int = 0, hidden: int = 4096,
               k: int = 32, gabor_config: gabor.GaborBankConfig | None = None,
               pca_dim: int | None = 256) -> Task:
    head_seed = stable_seed(seed, "head", task_id)
    rep = extractor.rep_dim
    if task_id == "R":
        return RotationTask(build_head("rotation", rep, 4, hidden=hidden, seed=head_seed))
    if task_id == "G":
        head = build_head("decoder", rep, 1, backbone=extractor.config, seed=head_seed)
        return GaborTask(head, gabor_config)
    if task_id == "DC":
        return ClusterTask(build_head("cluster", rep, k, hidden=hidden, seed=head_seed), k, pca_dim)
    raise ConfigError("tasks", f"unknown task id {task_id!r}; expected one of {TASK_IDS}")


# --------------------------------------------------------------------------
# training state and loops
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    extractor: FeatureExtractor
    tasks: dict
    seed: int = 0
    epoch: int = 0
    step: int = 0
    optimizer: SGD | None = None
    history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def named_parameters(self, task_ids) -> dict:
        named = {f"extractor.{n}": p for n, p in self.extractor.named_parameters()}
        for tid in task_ids:
            named.update({f"head.{tid}.{n}": p for n, p in self.tasks[tid].head.named_parameters()})
        return named

    def state_tensors(self) -> dict:
        out = {f"extractor.{n}": t for n, t in self.extractor.state_dict().items()}
        for tid, task in self.tasks.items():
            out.update({f"head.{tid}.{n}": t for n, t in task.head.state_dict().items()})
        return out


def init_state(task_ids, backbone: BackboneConfig, seed: int = 0, **task_kwargs) -> TrainState:
    task_ids = list(task_ids)
    if not task_ids:
        raise ConfigError("tasks", "at least one task is required")
    if len(set(task_ids)) != len(task_ids):
        raise ConfigError("tasks", "each task may appear only once")
    torch.manual_seed(stable_seed(seed, "torch"))
    extractor = build_backbone(backbone, seed=stable_seed(seed, "extractor"))
    tasks = {tid: build_task(tid, extractor, seed=seed, **task_kwargs) for tid in task_ids}
    return TrainState(extractor=extractor, tasks=tasks, seed=seed)


def epoch_order(seed: int, epoch: int, n: int) -> torch.Tensor:
    """Sample order of one epoch; a pure function of ``(seed, epoch)``."""
    g = torch.Generator().manual_seed(stable_seed(seed, "order", epoch))
    return torch.randperm(n, generator=g)


def _set_train(state: TrainState, task_ids, mode: bool):
    state.extractor.train(mode)
    for tid in task_ids:
        state.tasks[tid].head.train(mode)


def multitask_backward(state: TrainState, task_ids, images, idx) -> dict:
    """Forward/backward of one batch under the AVG rule.

    The extractor receives the gradient of the mean of the normalized task
    losses; each head receives the gradient of its own raw loss.  With a single
    task no normalization is applied.  Returns ``{task_id: (raw, normalized)}``.
    """
    k = len(task_ids)
    total = 0.0
    out = {}
    for tid in task_ids:
        task = state.tasks[tid]
        z, raw = task.forward(state.extractor, images, idx)
        raw_value = raw.item()
        if not math.isfinite(raw_value):
            raise NumericalError(f"task {tid} produced a non-finite loss ({raw_value})")
        if k > 1:
            ema = task.normalizer.update(raw_value)
            scale = 1.0 / (ema + NORM_EPS)
            z.register_hook(lambda g, c=scale / k: g * c)
        else:
            scale = 1.0
        out[tid] = (raw_value, raw_value * scale)
        total = total + raw
    total.backward()
    return out


def run_epoch(state: TrainState, task_ids, images: torch.Tensor, optim: OptimConfig,
              epoch: int, val_images: torch.Tensor | None = None) -> dict:
    """One pass over ``images`` with ``task_ids`` active; ``epoch`` drives the lr schedule."""
    task_ids = list(task_ids)
    if not task_ids:
        raise ConfigError("stages", "a stage needs at least one task")
    lr = optim.lr_at(epoch)
    for tid in task_ids:
        state.tasks[tid].start_epoch(state.extractor, images, state.epoch, state.seed)
    _set_train(state, task_ids, True)
    order = epoch_order(state.seed, state.epoch, len(images))
    sums = {tid: 0.0 for tid in task_ids}
    n_batches = 0
    for s in range(0, len(order), optim.batch_size):
        idx = order[s:s + optim.batch_size]
        state.optimizer.zero_grad()
        losses = multitask_backward(state, task_ids, images, idx)
        state.optimizer.step(lr)
        for tid, (raw, norm) in losses.items():
            state.history.append(dict(step=state.step, epoch=state.epoch, task_id=tid,
                                      raw_loss=raw, normalized_loss=norm, lr=lr))
            sums[tid] += norm
        state.step += 1
        n_batches += 1
    metrics = {"epoch": state.epoch, "lr": lr}
    metrics.update({f"{tid}_train_loss": sums[tid] / n_batches for tid in task_ids})
    if val_images is not None and len(val_images):
        _set_train(state, task_ids, False)
        for tid in task_ids:
            metrics.update(state.tasks[tid].evaluate(state.extractor, val_images))
    state.metrics.append(metrics)
    log.info("epoch %d  %s", state.epoch,
             "  ".join(f"{k}={v:.4f}" for k, v in metrics.items() if isinstance(v, float)))
    state.epoch += 1
    return metrics


def _prepare(state: TrainState, task_ids, images, optim: OptimConfig):
    for tid in task_ids:
        state.tasks[tid].prepare(images)
    state.optimizer = SGD(state.named_parameters(task_ids), optim)


def train_stage(state: TrainState, task_ids, images, optim: OptimConfig,
                val_images=None, epochs: int | None = None, patience: int | None = None,
                on_epoch: Callable | None = None) -> TrainState:
    """Train ``task_ids`` jointly (AVG when more than one) with a fresh optimizer.

    With ``patience`` set, stops once the stage score (sum of the tasks'
    validation losses, lower is better) has not improved for that many epochs.
    """
    _prepare(state, task_ids, images, optim)
    epochs = optim.epochs if epochs is None else epochs
    best, stale = math.inf, 0
    for local_epoch in range(epochs):
        metrics = run_epoch(state, task_ids, images, optim, local_epoch, val_images)
        if on_epoch is not None:
            on_epoch(state, metrics)
        if patience is not None:
            score = stage_score(metrics, task_ids)
            if score < best - 1e-9:
                best, stale = score, 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("stage %s converged after %d epochs", "+".join(task_ids), local_epoch + 1)
                    break
    return state


def stage_score(metrics: dict, task_ids) -> float:
    keys = {"R": "rotation_val_loss", "G": "gabor_val_loss", "DC": "DC_train_loss"}
    total = 0.0
    for tid in task_ids:
        total += metrics.get(keys[tid], metrics.get(f"{tid}_train_loss"))
    return total


def multitask_epoch_avg(state: TrainState, images, optim: OptimConfig, task_ids=None,
                        val_images=None) -> TrainState:
    """One AVG epoch over all (or the given) tasks, reusing the state's optimizer."""
    task_ids = list(task_ids or state.tasks)
    if state.optimizer is None:
        _prepare(state, task_ids, images, optim)
    run_epoch(state, task_ids, images, optim, state.epoch, val_images)
    return state


def deepcluster_train(state: TrainState, images, k: int | None = None,
                      optim: OptimConfig = DEEPCLUSTER_OPTIM, val_images=None,
                      on_epoch=None) -> TrainState:
    """Cluster, re-initialize the cluster head's last layer, train one epoch; repeat."""
    if "DC" not in state.tasks:
        raise ConfigError("tasks", "state has no DC task")
    if k is not None and k != state.tasks["DC"].k:
        raise ConfigError("k", f"state was built with k={state.tasks['DC'].k}")
    return train_stage(state, ["DC"], images, optim, val_images, on_epoch=on_epoch)


def sequential_schedule(stages, state: TrainState, images, optim: OptimConfig,
                        dc_optim: OptimConfig = DEEPCLUSTER_OPTIM, val_images=None,
                        patience: int = 3, on_epoch=None, on_stage_end=None) -> TrainState:
    """Train each stage until convergence, then freeze its dropped heads and move on."""
    stages = [list(s) for s in stages]
    if not stages:
        raise ConfigError("stages", "schedule has no stages")
    for i, stage in enumerate(stages):
        if not stage:
            raise ConfigError("stages", f"stage {i} is empty")
        unknown = set(stage) - set(state.tasks)
        if unknown:
            raise ConfigError("stages", f"stage {i} names tasks not in the state: {sorted(unknown)}")
    for i, stage in enumerate(stages):
        log.info("FT stage %d: %s", i, "+".join(stage))
        for tid, task in state.tasks.items():
            task.head.requires_grad_(tid in stage)
        stage_optim = dc_optim if stage == ["DC"] else optim
        train_stage(state, stage, images, stage_optim, val_images, patience=patience, on_epoch=on_epoch)
        if on_stage_end is not None:
            on_stage_end(state, i)
    return state


def ft_stages(task_ids) -> list[list[str]]:
    """Default FT composition: DeepCluster first, the remaining tasks jointly afterwards."""
    task_ids = [t for t in TASK_IDS if t in task_ids]
    if "DC" in task_ids and len(task_ids) > 1:
        return [["DC"], [t for t in task_ids if t != "DC"]]
    return [[t] for t in task_ids]


# --------------------------------------------------------------------------
# top-level pretraining entry point
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    tasks: tuple = ("R",)
    strategy: str = "avg"
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig("small", 16, 32))
    optim: OptimConfig = field(default_factory=OptimConfig)
    dc_optim: OptimConfig = DEEPCLUSTER_OPTIM
    gabor: gabor.GaborBankConfig = field(default_factory=gabor.GaborBankConfig)
    head_hidden: int = 256
    k: int = 32
    pca_dim: int = 256
    patience: int = 3
    stages: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        tasks = tuple(t.upper() for t in self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if not tasks:
            raise ConfigError("tasks", "at least one task is required")
        for t in tasks:
            if t not in TASK_IDS:
                raise ConfigError("tasks", f"unknown task {t!r}")
        if self.strategy not in ("avg", "ft"):
            raise ConfigError("strategy", f"expected 'avg' or 'ft', got {self.strategy!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["gabor"] = self.gabor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = BackboneConfig(**d["backbone"])
        for key in ("optim", "dc_optim"):
            if key in d:
                d[key] = OptimConfig(**d[key])
        if "gabor" in d:
            d["gabor"] = gabor.GaborBankConfig.from_dict(d["gabor"])
        if d.get("stages") is not None:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown pretraining config key")
        return cls(**d)


def init_label(tasks, strategy) -> str:
    return "ssl:" + "+".join(t for t in TASK_IDS if t in tasks) + f"({strategy})"


def pretrain(images: torch.Tensor, config: PretrainConfig, val_images=None,
             checkpoint_path=None, on_epoch=None) -> TrainState:
    """Stage-1 training on an unlabelled pool with the AVG or FT strategy."""
    state = init_state(config.tasks, config.backbone, seed=config.seed, hidden=config.head_hidden,
                       k=config.k, gabor_config=config.gabor, pca_dim=config.pca_dim)
    meta = dict(backbone=config.backbone.to_dict(), tasks=list(config.tasks),
                strategy=config.strategy, init=init_label(config.tasks, config.strategy))

    def checkpoint(st, metrics):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, st.state_tensors(), dict(meta, epoch=st.epoch))
        if on_epoch is not None:
            on_epoch(st, metrics)

    def stage_end(st, i):
        if checkpoint_path is not None:
            p = Path(checkpoint_path)
            save_checkpoint(p.with_name(f"{p.stem}.stage{i}{p.suffix}"), st.state_tensors(),
                            dict(meta, epoch=st.epoch, stage=i))

    if config.strategy == "avg":
        train_stage(state, list(config.tasks), images, config.optim, val_images, on_epoch=checkpoint)
    else:
        stages = config.stages or ft_stages(config.tasks)
        sequential_schedule(stages, state, images, config.optim, config.dc_optim, val_images,
                            patience=config.patience, on_epoch=checkpoint, on_stage_end=stage_end)
    return state


def write_loss_log(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
