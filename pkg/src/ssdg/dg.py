"""Domain-generalization fine-tuning: ERM, IRMv1, leave-one-domain-out and cross-domain runs."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, prefixed
from .data import DomainDataset, stable_seed
from .errors import ConfigError, DataError, NumericalError, SSDGError
from .nets import BackboneConfig, Classifier, FeatureExtractor, build_backbone, build_head
from .trainer import SGD, OptimConfig

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("target", "method", "init", "best_target_acc", "source_selected_target_acc",
                  "final_target_acc", "epochs", "config_hash", "seed")


@dataclass(frozen=True)
class DGConfig:
    """Fine-tuning settings.  The IRM penalty weight and warm-up are placeholders, not tuned values."""

    epochs: int = 30
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 64
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig("small", 16, 32))
    irm_penalty_weight: float = 1e4
    irm_warmup_frac: float = 0.1
    irm_rescale: bool = True
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.irm_penalty_weight < 0:
            raise ConfigError("irm_penalty_weight", "must be >= 0")
        if not 0 <= self.irm_warmup_frac <= 1:
            raise ConfigError("irm_warmup_frac", "must lie in [0, 1]")

    def optim(self) -> OptimConfig:
        # constant learning rate: the step never decays within a run
        return OptimConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           lr_decay_factor=1.0, lr_step_epochs=10 ** 9, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DGConfig":
        d = dict(d)
        if "backbone" in d and isinstance(d["backbone"], dict):
            d["backbone"] = BackboneConfig(**d["backbone"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown fine-tuning config key")
        return cls(**d)

    def hash(self) -> str:
        """Hash of every setting except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return config_hash(d)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def derive_run_seed(cfg_hash: str, target_name: str, seed: int) -> int:
    """Per-run RNG seed keyed by (config hash, target, seed) so sweeps are order-independent."""
    return stable_seed(cfg_hash, target_name, seed)


@dataclass
class ExperimentResult:
    target: str
    sources: list
    method: str
    init: str
    config_hash: str
    seed: int
    source_val_acc: list = field(default_factory=list)
    target_acc: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    step_penalties: list = field(default_factory=list)

    @property
    def best_target_acc(self) -> float:
        return max(self.target_acc)

    @property
    def source_selected_target_acc(self) -> float:
        """Target accuracy at the epoch with the best source-validation accuracy."""
        if not self.source_val_acc:
            return float("nan")
        return self.target_acc[int(np.argmax(self.source_val_acc))]

    def row(self) -> dict:
        return dict(target=self.target, method=self.method, init=self.init,
                    best_target_acc=self.best_target_acc,
                    source_selected_target_acc=self.source_selected_target_acc,
                    final_target_acc=self.target_acc[-1], epochs=len(self.target_acc) - 1,
                    config_hash=self.config_hash, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(best_target_acc=self.best_target_acc,
                 source_selected_target_acc=self.source_selected_target_acc)
        return d


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(p) == 0:
        raise SSDGError("accuracy of an empty prediction set is undefined")
    if len(p) != len(y):
        raise SSDGError(f"{len(p)} predictions for {len(y)} labels")
    return float((p == y).mean())


# --------------------------------------------------------------------------
# model construction
# --------------------------------------------------------------------------

def load_extractor(init, backbone: BackboneConfig, seed: int) -> tuple[FeatureExtractor, str]:
    """Resolve ``init`` (``"random"``, a checkpoint path, or a module) to an extractor and a label."""
    if isinstance(init, nn.Module):
        return copy.deepcopy(init), getattr(init, "init_label", "custom")
    if init is None or str(init) == "random":
        return build_backbone(backbone, seed=stable_seed(seed, "extractor")), "random"
    tensors, meta = load_checkpoint(init)
    cfg = BackboneConfig(**meta["backbone"]) if "backbone" in meta else backbone
    extractor = build_backbone(cfg, seed=stable_seed(seed, "extractor"))
    state = prefixed(tensors, "extractor")
    if not state:
        raise DataError(f"checkpoint {init} holds no extractor tensors")
    extractor.load_state_dict(state)
    return extractor, meta.get("init", "ssl")


def build_classifier(init, num_classes: int, config: DGConfig, run_seed: int) -> tuple[Classifier, str]:
    extractor, label = load_extractor(init, config.backbone, run_seed)
    head = build_head("dg", extractor.rep_dim, num_classes, seed=stable_seed(run_seed, "head"))
    return Classifier(extractor, head), label


@torch.no_grad()
def predict(model: nn.Module, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(images)
    out = [model(x[s:s + batch_size]).argmax(1) for s in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


def _check_domains(sources, target):
    if not sources:
        raise ConfigError("sources", "at least one source domain is required")
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise ConfigError("sources", f"duplicate source domains {names}")
    if target.name in names:
        raise ConfigError("target", f"target {target.name!r} is also a source")
    for d in sources:
        if list(d.class_names) != list(target.class_names):
            raise DataError(f"class mismatch between {d.name!r} {d.class_names} "
                            f"and {target.name!r} {target.class_names}")


def _evaluate(model, sources, target, result: ExperimentResult, config: DGConfig):
    val = [d for d in sources if len(d.val_idx)]
    if val:
        xs = np.concatenate([d.images[d.val_idx] for d in val])
        ys = np.concatenate([d.labels[d.val_idx] for d in val])
        result.source_val_acc.append(accuracy(predict(model, xs, config.eval_batch_size), ys))
    result.target_acc.append(accuracy(predict(model, target.images, config.eval_batch_size),
                                      target.labels))


def _new_result(sources, target, method, label, cfg_hash, config) -> ExperimentResult:
    return ExperimentResult(target=target.name, sources=[s.name for s in sources], method=method,
                            init=label, config_hash=cfg_hash, seed=config.seed)


def _check_loss(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise NumericalError(f"{what} became non-finite ({loss.item()})")


def pooled_order(run_seed: int, epoch: int, n: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(stable_seed(run_seed, "order", epoch))
    return torch.randperm(n, generator=g)


def erm_finetune(init, sources, target: DomainDataset, config: DGConfig = DGConfig()) -> ExperimentResult:
    """Fit extractor and a fresh linear head by pooled cross-entropy over the source training splits.

    Sources are pooled in name order and shuffled per epoch with
    :func:`pooled_order`, so results do not depend on the order they are passed in.
    Accuracy index 0 is measured before the first update.
    """
    _check_domains(sources, target)
    sources = sorted(sources, key=lambda d: d.name)
    cfg_hash = config.hash()
    run_seed = derive_run_seed(cfg_hash, target.name, config.seed)
    torch.manual_seed(run_seed)
    model, label = build_classifier(init, target.num_classes, config, run_seed)
    result = _new_result(sources, target, "ERM", label, cfg_hash, config)
    x = torch.from_numpy(np.concatenate([d.images[d.train_idx] for d in sources]))
    y = torch.from_numpy(np.concatenate([d.labels[d.train_idx] for d in sources]))
    opt = SGD(model.named_parameters(), config.optim())
    _evaluate(model, sources, target, result, config)
    for epoch in range(config.epochs):
        model.train()
        order = pooled_order(run_seed, epoch, len(x))
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(x[idx]), y[idx])
            _check_loss(loss, "ERM loss")
            loss.backward()
            opt.step(config.lr)
            result.step_losses.append(loss.item())
        _evaluate(model, sources, target, result, config)
        log.debug("ERM %s epoch %d target acc %.4f", target.name, epoch + 1, result.target_acc[-1])
    result.model = model  # kept off the dataclass fields so to_dict stays JSON-friendly
    return result


def cross_domain(source: DomainDataset, target: DomainDataset, init,
                 config: DGConfig = DGConfig()) -> ExperimentResult:
    """Single-source transfer: ERM fine-tuning on one domain, evaluated on another."""
    return erm_finetune(init, [source], target, config)


# --------------------------------------------------------------------------
# IRM
# --------------------------------------------------------------------------

def irm_penalty(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Squared gradient of the risk w.r.t. a scalar logit multiplier, taken at 1."""
    scale = torch.ones((), dtype=logits.dtype, device=logits.device, requires_grad=True)
    risk = F.cross_entropy(logits * scale, labels)
    (grad,) = torch.autograd.grad(risk, [scale], create_graph=True)
    return grad.pow(2)


def penalty_weight_at(step: int, total_steps: int, config: DGConfig) -> float:
    """Linear warm-up from 0 to the full weight over the first ``irm_warmup_frac`` of steps."""
    warmup = math.ceil(config.irm_warmup_frac * total_steps)
    if warmup <= 0:
        return config.irm_penalty_weight
    return config.irm_penalty_weight * min(1.0, step / warmup)


class EnvironmentSampler:
    """Endless per-environment mini-batch streams, reshuffled whenever one is exhausted."""

    def __init__(self, sizes, batch_size: int, run_seed: int):
        self.sizes = list(sizes)
        self.batch_size = batch_size
        self.gens = [torch.Generator().manual_seed(stable_seed(run_seed, "env", e))
                     for e in range(len(self.sizes))]
        self.orders = [torch.randperm(n, generator=g) for n, g in zip(self.sizes, self.gens)]
        self.pos = [0] * len(self.sizes)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(max(self.sizes) / self.batch_size)

    def next(self) -> list[torch.Tensor]:
        out = []
        for e, n in enumerate(self.sizes):
            if self.pos[e] >= n:
                self.orders[e] = torch.randperm(n, generator=self.gens[e])
                self.pos[e] = 0
            out.append(self.orders[e][self.pos[e]:self.pos[e] + self.batch_size])
            self.pos[e] += self.batch_size
        return out


def irm_finetune(init, sources, target: DomainDataset, config: DGConfig = DGConfig()) -> ExperimentResult:
    """IRMv1 fine-tuning with one environment per source domain.

    Each step draws one mini-batch per environment (``batch_size // n_envs``
    samples each) and minimizes the summed environment risks plus the weighted
    summed penalties.  While the weight exceeds 1 the objective is divided by it.
    """
    _check_domains(sources, target)
    if len(sources) < 2:
        raise ConfigError("sources", "IRM needs at least two source environments")
    sources = sorted(sources, key=lambda d: d.name)
    cfg_hash = config.hash()
    run_seed = derive_run_seed(cfg_hash, target.name, config.seed)
    torch.manual_seed(run_seed)
    model, label = build_classifier(init, target.num_classes, config, run_seed)
    result = _new_result(sources, target, "IRM", label, cfg_hash, config)
    envs = [d.tensors(d.train_idx) for d in sources]
    sampler = EnvironmentSampler([len(e[1]) for e in envs],
                                 max(1, config.batch_size // len(envs)), run_seed)
    total_steps = sampler.steps_per_epoch * config.epochs
    opt = SGD(model.named_parameters(), config.optim())
    _evaluate(model, sources, target, result, config)
    step = 0
    for epoch in range(config.epochs):
        model.train()
        for _ in range(sampler.steps_per_epoch):
            batches = sampler.next()
            x = torch.cat([envs[e][0][idx] for e, idx in enumerate(batches)])
            logits = model(x).split([len(idx) for idx in batches])
            risk = 0.0
            penalty = 0.0
            for e, idx in enumerate(batches):
                labels = envs[e][1][idx]
                risk = risk + F.cross_entropy(logits[e], labels)
                penalty = penalty + irm_penalty(logits[e], labels)
            weight = penalty_weight_at(step, total_steps, config)
            loss = risk + weight * penalty
            if config.irm_rescale and weight > 1.0:
                loss = loss / weight
            _check_loss(loss, "IRM objective")
            opt.zero_grad()
            loss.backward()
            opt.step(config.lr)
            result.step_losses.append(loss.item())
            result.step_penalties.append(penalty.item())
            step += 1
        _evaluate(model, sources, target, result, config)
    result.model = model
    return result


# --------------------------------------------------------------------------
# sweeps and reporting
# --------------------------------------------------------------------------

METHODS = {"erm": erm_finetune, "irm": irm_finetune}


@dataclass
class SweepResult:
    results: list

    @property
    def average(self) -> float:
        return float(np.mean([r.best_target_acc for r in self.results]))

    @property
    def average_source_selected(self) -> float:
        return float(np.mean([r.source_selected_target_acc for r in self.results]))

    def rows(self) -> list[dict]:
        rows = [r.row() for r in self.results]
        first = self.results[0]
        rows.append(dict(target="average", method=first.method, init=first.init,
                         best_target_acc=self.average,
                         source_selected_target_acc=self.average_source_selected,
                         final_target_acc=float(np.mean([r.target_acc[-1] for r in self.results])),
                         epochs=rows[0]["epochs"], config_hash=first.config_hash, seed=first.seed))
        return rows

    def by_target(self) -> dict:
        return {r.target: r for r in self.results}


def _run_one(args):
    method, init, sources, target, config = args
    torch.set_num_threads(1)
    return METHODS[method](init, sources, target, config)


def leave_one_out_sweep(domains, method: str = "erm", init="random",
                        config: DGConfig = DGConfig(), jobs: int = 1) -> SweepResult:
    """Hold out each domain in turn and fine-tune on the others."""
    method = method.lower()
    if method not in METHODS:
        raise ConfigError("method", f"unknown method {method!r}; expected erm or irm")
    if len(domains) < 2:
        raise ConfigError("domains", "leave-one-out needs at least two domains")
    jobs_args = [(method, init, [d for d in domains if d is not t], t, config) for t in domains]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, jobs_args))
    else:
        results = [METHODS[method](*a[1:]) for a in jobs_args]
    for r in results:
        log.info("%s target=%s init=%s best=%.4f", r.method, r.target, r.init, r.best_target_acc)
    return SweepResult(results)


def write_results(results, csv_path, json_path=None) -> None:
    """One CSV row per result (plus an average row for sweeps) and a JSON sidecar with traces."""
    if isinstance(results, SweepResult):
        rows, records = results.rows(), [r.to_dict() for r in results.results]
    else:
        results = list(results) if isinstance(results, (list, tuple)) else [results]
        rows, records = [r.row() for r in results], [r.to_dict() for r in results]
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(records, indent=1))
