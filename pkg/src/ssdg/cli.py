"""Command-line entry point: ``ssdg <subcommand> ...``.

Subcommands: ``synth``, ``pretrain``, ``finetune``, ``sweep``, ``gradcam`` and
``gabor-preview``.  Settings come from an optional JSON config file; flags given
on the command line override the file.  Every run writes ``config.resolved.json``
next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_domain_tree, load_image, pooled_images, save_domain_tree, synth_domains
from .dg import METHODS, DGConfig, leave_one_out_sweep, write_results
from .errors import ConfigError, DataError, NumericalError, SSDGError
from .explain import gradcam, render_overlay
from .gabor import GaborBankConfig, make_target
from .nets import BackboneConfig, Classifier, build_backbone, build_head
from .trainer import PretrainConfig, pretrain, write_loss_log

log = logging.getLogger("ssdg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED = "config.resolved.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to exit code 1 instead
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return d


def override(d: dict, **flags) -> dict:
    """Flags that were given (not None) replace file values; dotted keys reach nested dicts."""
    d = json.loads(json.dumps(d))
    for key, value in flags.items():
        if value is None:
            continue
        *outer, last = key.split(".")
        node = d
        for k in outer:
            node = node.setdefault(k, {})
        node[last] = value
    return d


def write_resolved(out_dir, command: str, settings: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED
    path.write_text(json.dumps(dict(command=command, version=__version__, **settings),
                               indent=1, sort_keys=True, default=str))
    return path


def _tasks(text: str) -> list[str]:
    return [t.strip().upper() for t in text.split(",") if t.strip()]


def _load_domains(data, size: int, split_seed: int):
    return load_domain_tree(data, size=size, seed=split_seed)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    domains = synth_domains(args.seed, n_per_class=args.n, size=args.size)
    save_domain_tree(domains, args.out)
    write_resolved(args.out, "synth", dict(seed=args.seed, n_per_class=args.n, size=args.size,
                                           domains=[d.name for d in domains],
                                           classes=list(domains[0].class_names)))
    print(f"wrote {sum(len(d) for d in domains)} images in {len(domains)} domains to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    d = override(read_config(args.config), tasks=_tasks(args.tasks) if args.tasks else None,
                 strategy=args.strategy, seed=args.seed, **{"optim.epochs": args.epochs,
                                                            "optim.batch_size": args.batch_size})
    config = PretrainConfig.from_dict(d)
    domains = _load_domains(args.data, config.backbone.input_size, args.split_seed)
    out = Path(args.out)
    losses = out.with_suffix(".losses.csv")
    write_resolved(out.parent, "pretrain", dict(data=str(args.data), split_seed=args.split_seed,
                                                 checkpoint=str(out), loss_log=str(losses),
                                                 config=config.to_dict()))

    def report(state, metrics):
        shown = {k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)}
        log.info("epoch %d %s", state.epoch, shown)

    state = pretrain(pooled_images(domains, "train"), config, val_images=pooled_images(domains, "val"),
                     checkpoint_path=out, on_epoch=report)
    write_loss_log(state.history, losses)
    final = state.metrics[-1] if state.metrics else {}
    if "rotation_acc" in final:
        print(f"final rotation_acc {final['rotation_acc']:.4f}")
    print(f"checkpoint {out}\nloss log {losses}")
    return EXIT_OK


def _dg_config(args) -> DGConfig:
    d = override(read_config(args.config), seed=args.seed, epochs=args.epochs, lr=args.lr,
                 batch_size=args.batch_size)
    return DGConfig.from_dict(d)


def _find(domains, name):
    for d in domains:
        if d.name == name:
            return d
    raise DataError(f"domain {name!r} not found; have {[d.name for d in domains]}")


def save_classifier(path, model: Classifier, class_names, init: str) -> Path:
    tensors = {k: v for k, v in model.state_dict().items()}
    meta = dict(kind="classifier", backbone=model.extractor.config.to_dict(),
                class_names=list(class_names), init=init)
    return save_checkpoint(path, tensors, meta)


def load_classifier(path) -> tuple[Classifier, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise DataError(f"{path} is not a fine-tuned classifier checkpoint")
    backbone = BackboneConfig(**meta["backbone"])
    extractor = build_backbone(backbone)
    model = Classifier(extractor, build_head("dg", extractor.rep_dim, len(meta["class_names"])))
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def write_step_log(result, path) -> Path:
    """Per-step fine-tuning objective (and IRM penalty when present)."""
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "penalty"])
        penalties = result.step_penalties or [""] * len(result.step_losses)
        for i, (loss, pen) in enumerate(zip(result.step_losses, penalties)):
            writer.writerow([i, repr(loss), repr(pen) if pen != "" else ""])
    return path


def cmd_finetune(args) -> int:
    config = _dg_config(args)
    domains = _load_domains(args.data, config.backbone.input_size, args.split_seed)
    target = _find(domains, args.target)
    names = args.sources.split(",") if args.sources else [d.name for d in domains if d is not target]
    sources = [_find(domains, n) for n in names]
    out = Path(args.out)
    write_resolved(out.parent, "finetune", dict(
        data=str(args.data), split_seed=args.split_seed, target=target.name,
        sources=[s.name for s in sources], method=args.method, init=str(args.init),
        config=config.to_dict(), config_hash=config.hash()))
    result = METHODS[args.method](args.init, sources, target, config)
    write_results([result], out, out.with_suffix(".json"))
    write_step_log(result, out.with_suffix(".losses.csv"))
    save_classifier(out.with_suffix(".ckpt"), result.model, target.class_names, result.init)
    print(f"{result.method} target={target.name} best_target_acc={result.best_target_acc:.4f} "
          f"source_selected={result.source_selected_target_acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _dg_config(args)
    domains = _load_domains(args.data, config.backbone.input_size, args.split_seed)
    out = Path(args.out)
    write_resolved(out, "sweep", dict(data=str(args.data), split_seed=args.split_seed,
                                      method=args.method, init=str(args.init), jobs=args.jobs,
                                      config=config.to_dict(), config_hash=config.hash()))
    sweep = leave_one_out_sweep(domains, args.method, args.init, config, jobs=args.jobs)
    write_results(sweep, out / "results.csv", out / "results.json")
    for row in sweep.rows():
        print(f"{row['target']:>12s} {row['best_target_acc']:.4f}")
    return EXIT_OK


def _class_index(value: str, class_names) -> int:
    if value in class_names:
        return list(class_names).index(value)
    try:
        idx = int(value)
    except ValueError:
        raise DataError(f"class {value!r} not found; have {list(class_names)}") from None
    if not 0 <= idx < len(class_names):
        raise DataError(f"class index {idx} outside [0, {len(class_names)})")
    return idx


def cmd_gradcam(args) -> int:
    model, meta = load_classifier(args.ckpt)
    size = meta["backbone"]["input_size"]
    domain = _find(_load_domains(args.data, size, args.split_seed), args.domain)
    if list(domain.class_names) != list(meta["class_names"]):
        raise DataError(f"checkpoint classes {meta['class_names']} differ from data {domain.class_names}")
    cls = _class_index(args.class_name, domain.class_names)
    out = Path(args.out)
    write_resolved(out, "gradcam", dict(ckpt=str(args.ckpt), data=str(args.data), domain=domain.name,
                                        class_name=domain.class_names[cls], layer=args.layer,
                                        limit=args.limit, target=args.target))
    ids = np.flatnonzero(domain.labels == cls)[:args.limit]
    with torch.no_grad():
        preds = model(torch.from_numpy(domain.images[ids])).argmax(1).numpy()
    for sample, pred in zip(ids, preds):
        explained = cls if args.target == "true" else int(pred)
        heat = gradcam(model, domain.images[sample], explained, layer=args.layer)
        overlay = render_overlay(domain.images[sample], heat)
        name = (f"{domain.name}_{sample:05d}_pred-{domain.class_names[pred]}"
                f"_true-{domain.class_names[cls]}.png")
        Image.fromarray(overlay).save(out / name)
    print(f"wrote {len(ids)} overlays to {out}")
    return EXIT_OK


def cmd_gabor_preview(args) -> int:
    config = GaborBankConfig.from_dict(read_config(args.config))
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image {path} not found")
    if args.size:
        img = load_image(path, args.size).transpose(1, 2, 0)
    else:
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    target = make_target(img, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((target * 255).astype(np.uint8), mode="L").save(out)
    write_resolved(out.parent, "gabor-preview", dict(image=str(path), out=str(out), size=args.size,
                                                     gabor=config.to_dict()))
    print(f"{out}: {int(target.sum())} of {target.size} pixels on")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _dg_flags(p):
    p.add_argument("--data", required=True, help="domain tree root/<domain>/<class>/<image>")
    p.add_argument("--method", choices=sorted(METHODS), default="erm")
    p.add_argument("--init", default="random", help="'random' or a pretraining checkpoint")
    p.add_argument("--config", help="JSON fine-tuning config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--log-level", default="INFO")
    parser = Parser(prog="ssdg", description="Self-supervised pretraining and domain generalization")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    add = lambda name, help: sub.add_parser(name, help=help, parents=[common])

    p = add("synth", "write the synthetic multi-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=40, help="images per class and domain")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = add("pretrain", "self-supervised stage-1 training")
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", help="comma list of r, g, dc")
    p.add_argument("--strategy", choices=("avg", "ft"))
    p.add_argument("--config", help="JSON pretraining config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = add("finetune", "one domain-generalization run")
    _dg_flags(p)
    p.add_argument("--target", required=True)
    p.add_argument("--sources", help="comma list; default all other domains")
    p.add_argument("--out", required=True, help="result CSV path")
    p.set_defaults(func=cmd_finetune)

    p = add("sweep", "leave-one-domain-out table")
    _dg_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = add("gradcam", "GradCAM overlays for one class of one domain")
    p.add_argument("--ckpt", required=True, help="classifier checkpoint written by finetune")
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--class", dest="class_name", required=True, help="class name or index")
    p.add_argument("--out", required=True)
    p.add_argument("--layer")
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--target", choices=("true", "pred"), default="true",
                   help="explain the true or the predicted class")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcam)

    p = add("gabor-preview", "binary Gabor target map of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--config", help="JSON Gabor bank config")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="resize before filtering")
    p.set_defaults(func=cmd_gabor_preview)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "ssdg: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SSDGError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
