"""Command-line runner: every experiment is a config file plus a subcommand.

Exit codes: 0 on success, 1 for configuration problems (all of them listed
before any work starts), 2 for failures at runtime.  Each run owns one output
directory, refuses to clobber it unless told to, and leaves a manifest there
recording what produced the artifacts.
"""

from __future__ import annotations

import argparse
import datetime
import json
import shutil
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_classifier_config,
    build_dataset,
    build_spec,
    build_train_config,
    class_names_for,
    config_hash,
    load_config,
)
from .data import LabeledDataset
from .evaluation import (
    GanSampler,
    NoiseSampler,
    ReplaySampler,
    build_sample_bank,
    emit_sample_grid,
    evaluate_generator,
)
from .experiments import augmentation_experiment, placement_sweep
from .train import Trainer, load_generator

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_hash: str
    seed: int
    out: str
    code_version: str
    started: str
    finished: str | None = None

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out: Path, overwrite: bool, keep: bool = False) -> None:
    # a directory holding only a manifest is a failed run's trace, fair to reuse
    if out.exists() and any(p.name != "manifest.json" for p in out.iterdir()):
        if keep:
            return
        if not overwrite:
            raise ConfigError(
                [f"config error at out: {out} is not empty (pass --overwrite to replace it)"]
            )
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _save_png(img: np.ndarray, path: Path) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((img * 255).round().astype(np.uint8)).save(path, format="PNG")


def _write_dataset_folder(ds: LabeledDataset, out: Path) -> int:
    written = 0
    for by_class, name in zip(ds.indices_by_class(), ds.class_names):
        for j, i in enumerate(by_class):
            _save_png(ds[i][0], out / name / f"{j:05d}.png")
            written += 1
    return written


def _check_eval_resolution(cfg: dict) -> None:
    dres, nres = cfg["data"]["resolution"], cfg["network"]["max_resolution"]
    if dres != nres:
        raise ConfigError(
            [
                f"config error at data.resolution: evaluation needs the data resolution "
                f"({dres}) equal to network.max_resolution ({nres})"
            ]
        )


def _sampler_factory(args, cfg: dict, train_ds: LabeledDataset):
    """Per-seed sample source from either a checkpoint or a stub flag."""
    if args.checkpoint:
        g, _ = load_generator(args.checkpoint)
        if g.spec.max_resolution != cfg["data"]["resolution"]:
            raise ConfigError(
                [
                    f"config error at data.resolution: checkpoint generates "
                    f"{g.spec.max_resolution}px but the data is {cfg['data']['resolution']}px"
                ]
            )
        if g.spec.n_classes != train_ds.n_classes:
            raise ConfigError(
                [
                    f"config error at data: checkpoint covers {g.spec.n_classes} classes, "
                    f"dataset has {train_ds.n_classes}"
                ]
            )
        return lambda s: GanSampler(g, seed=s)
    if args.stub == "replay":
        return lambda s: ReplaySampler(train_ds, seed=s)
    return lambda s: NoiseSampler(cfg["data"]["resolution"], seed=s)


# -- commands --------------------------------------------------------------


def cmd_train(args, cfg: dict, seed: int, out: Path) -> None:
    train_ds, _ = build_dataset(cfg["data"], seed)
    tcfg = build_train_config(cfg["train"], seed)
    if args.resume:
        ckpts = sorted(out.glob("ckpt_*.ckpt"))
        if not ckpts:
            raise FileNotFoundError(f"nothing to resume: no checkpoints under {out}")
        trainer = Trainer.load(ckpts[-1], tcfg, train_ds, out)
        print(f"resuming from {ckpts[-1].name} at {trainer.images_shown} images")
    else:
        spec = build_spec(cfg["network"], train_ds.n_classes)
        trainer = Trainer(spec, tcfg, train_ds, out)
    t0 = time.monotonic()
    trainer.train()
    print(
        f"trained {trainer.step_count} steps / {trainer.images_shown} images "
        f"in {time.monotonic() - t0:.0f}s; final checkpoint {trainer.last_checkpoint}"
    )


def cmd_generate(args, cfg: dict, seed: int, out: Path) -> None:
    g, _ = load_generator(args.checkpoint)
    names = class_names_for(cfg["data"])
    if len(names) != g.spec.n_classes:
        raise ValueError(
            f"checkpoint covers {g.spec.n_classes} classes but the config names {len(names)}"
        )
    per_class = args.per_class or cfg["eval"]["bank_per_class"]
    bank = build_sample_bank(GanSampler(g, seed=seed), g.spec.n_classes, per_class, names)
    n = _write_dataset_folder(bank.dataset, out)
    grid = emit_sample_grid(bank, out / "grid.png")
    print(f"wrote {n} samples plus {grid}")


def cmd_eval(args, cfg: dict, seed: int, out: Path) -> None:
    _check_eval_resolution(cfg)
    train_ds, val_ds = build_dataset(cfg["data"], seed)
    ccfg = build_classifier_config(cfg["eval"], cfg["data"]["resolution"])
    sampler = _sampler_factory(args, cfg, train_ds)(seed)
    bank = build_sample_bank(
        sampler, train_ds.n_classes, cfg["eval"]["bank_per_class"], train_ds.class_names
    )
    report = evaluate_generator(bank, train_ds, val_ds, ccfg, seed=seed)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    print(
        f"gan_train {report.gan_train:.4f}  gan_test {report.gan_test:.4f}  "
        f"real baseline {report.real_baseline:.4f}; report in {out / 'report.json'}"
    )


def cmd_sweep(args, cfg: dict, seed: int, out: Path) -> None:
    _check_eval_resolution(cfg)
    train_ds, val_ds = build_dataset(cfg["data"], seed)
    spec = build_spec({**cfg["network"], "attention_stages": []}, train_ds.n_classes)
    report = placement_sweep(
        train_ds,
        val_ds,
        spec,
        build_train_config(cfg["train"], seed),
        build_classifier_config(cfg["eval"], cfg["data"]["resolution"]),
        out,
        stages=tuple(cfg["sweep"]["stages"]),
        bank_per_class=cfg["eval"]["bank_per_class"],
        last_k=cfg["eval"]["last_k"],
        eval_seed=seed,
        max_steps=cfg["sweep"]["max_steps"],
    )
    print(report.to_csv().rstrip())
    print(f"table in {out / 'sweep.csv'}")


def cmd_augment_exp(args, cfg: dict, seed: int, out: Path) -> None:
    _check_eval_resolution(cfg)
    train_ds, val_ds = build_dataset(cfg["data"], seed)
    exp = cfg["augment_experiment"]
    report = augmentation_experiment(
        train_ds,
        val_ds,
        _sampler_factory(args, cfg, train_ds),
        build_classifier_config(cfg["eval"], cfg["data"]["resolution"]),
        n_real_per_class=exp["n_real_per_class"],
        n_synth_per_class=exp["n_synth_per_class"],
        seeds=tuple(exp["seeds"]),
    )
    report.write_csv(out / "augment.csv")
    print(report.to_csv().rstrip())
    print(f"table in {out / 'augment.csv'}")


def cmd_toy(args, cfg: dict, seed: int, out: Path) -> None:
    from .data import isic_scaled_counts, make_toy_dataset

    data = cfg["data"]
    counts = tuple(data["counts"] or isic_scaled_counts())
    ds = make_toy_dataset(counts=counts, resolution=data["resolution"], seed=seed)
    n = _write_dataset_folder(ds, out)
    histogram = ", ".join(f"{name}={c}" for name, c in zip(ds.class_names, ds.counts()))
    print(f"wrote {n} images under {out} ({histogram})")


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "augment-exp": cmd_augment_exp,
    "toy": cmd_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sapgan",
        description="Progressive attention GAN: training, sampling, and evaluation protocols.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="overrides the config output directory")
        p.add_argument(
            "--overwrite", action="store_true", help="replace a non-empty output directory"
        )
        return p

    p = add("train", "train a GAN per the config")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    p = add("generate", "sample a trained generator into an image folder")
    p.add_argument("--checkpoint", required=True, help="checkpoint to sample from")
    p.add_argument("--per-class", type=int, default=None, dest="per_class")

    p = add("eval", "score a generator (or a stub) against the configured data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    src.add_argument("--stub", choices=("replay", "noise"), help="oracle stub instead of a model")

    add("sweep", "train and score one GAN per attention placement")

    p = add("augment-exp", "compare real-only, GAN-augmented, and standard-augmented training")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", default=None, help="generator supplying synthetic images")
    src.add_argument("--stub", choices=("replay", "noise"), help="oracle stub instead of a model")

    add("toy", "write the procedural dataset as an image folder")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg["seed"]
        out = args.out or cfg["out"]
        if not out:
            raise ConfigError(
                ["config error at out: no output directory (set `out` in the config or pass --out)"]
            )
        out = Path(out)
        _prepare_out(out, overwrite=args.overwrite, keep=getattr(args, "resume", False))
        manifest = RunManifest(
            command=args.command,
            config_path=str(args.config),
            config_hash=config_hash(args.config),
            seed=seed,
            out=str(out),
            code_version=__version__,
            started=_now(),
        )
        manifest.write(out)
        COMMANDS[args.command](args, cfg, seed, out)
        manifest.finished = _now()
        manifest.write(out)
        return EXIT_OK
    except ConfigError as e:
        for line in e.errors:
            print(line, file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001  (boundary: every failure needs an exit code)
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
