"""``dcor-subspaces`` command line: one binary, one subcommand per experiment step.

Settings come from built-in defaults, then an optional YAML file
(``--config``), then command-line flags.  Unknown config keys are rejected.
Every JSON output carries the hash of the resolved settings, a fingerprint
of the package source and the seed.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import encoder as enc
from . import gan, metrics, synthdata, toyopt
from .errors import ConfigError, DisentangleError, NumericalAbort
from .layout import SubspaceLayout

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DCOR_SUBSPACES_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Required:
    """Marker for settings without a default; survives deep copies."""

    def __deepcopy__(self, memo):
        return self

    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

_GAN_DEFAULTS = {k: v for k, v in vars(gan.GanTrainConfig()).items() if k != "seed"}
_GAN_DEFAULTS["betas"] = list(_GAN_DEFAULTS["betas"])

SCHEMAS = {
    "toy": {
        "pattern": "nonlinear_sine", "measure": "dcor", "n_points": 1000, "noise_scale": 0.05,
        "steps": 500, "learning_rate": 0.05, "seed": 0, "out": "toy",
    },
    "make-data": {
        "n": 6000, "resolution": 32, "correlation": 0.7, "seed": 0, "out": "data",
    },
    "train-encoder": {
        "data": REQUIRED, "subspaces": {"attribute": 4, "camera": 12}, "lambda_dc": 0.5, "epochs": 20,
        "batch_size": 256, "learning_rate": 1e-3, "weight_decay": 8e-3, "widths": [16, 32, 64, 64],
        "seed": 0, "out": "encoder",
    },
    "train-gan": {
        "data": REQUIRED, "subspaces": {"attribute": 4, "camera": 12, "identity": 16},
        "checkpoint_every": 200, "out": "gan", "seed": 0, **_GAN_DEFAULTS,
    },
    "eval": {
        "checkpoint": REQUIRED, "data": REQUIRED, "k": 30, "split": "test", "seed": 0, "out": "eval",
    },
    "swap-grid": {
        "checkpoint": REQUIRED, "data": REQUIRED, "image_ids": [0, 1, 2], "subspace": "identity",
        "split": "test", "noise_seed": 0, "seed": 0, "out": "swap_grid",
    },
    "swap-eval": {
        "checkpoint": REQUIRED, "data": REQUIRED, "factor": "attribute", "epochs": 8, "batch_size": 64,
        "noise_seed": 0, "seed": 0, "out": "swap_eval",
    },
}


# provenance

def code_fingerprint() -> str:
    """Git-style blob hashes of the package sources, folded into one digest."""
    root = Path(__file__).resolve().parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        digest.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return digest.hexdigest()[:16]


def config_hash(settings: dict) -> str:
    """Digest of the resolved settings; the output location is not part of an experiment."""
    content = {k: v for k, v in settings.items() if k != "out"}
    return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()[:16]


def resume_key(settings: dict) -> str:
    """Hash of the settings that must match for a run to be resumed (length may grow)."""
    return config_hash({k: v for k, v in settings.items() if k not in ("epochs", "steps", "checkpoint_every")})


def provenance(settings: dict) -> dict:
    return {"config_hash": config_hash(settings), "code_fingerprint": code_fingerprint(), "seed": settings["seed"]}


def write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# settings

def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping of settings")
    return data


def resolve_settings(command: str, file_settings: dict, flag_settings: dict) -> dict:
    schema = SCHEMAS[command]
    unknown = sorted(set(file_settings) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    settings = copy.deepcopy(schema)
    settings.update(file_settings)
    settings.update({k: v for k, v in flag_settings.items() if v is not None})
    missing = [k for k, v in settings.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"{command} needs {', '.join(missing)}")
    return settings


def output_dir(settings: dict, force: bool = False, resume: bool = False) -> Path:
    out = Path(settings["out"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    if out.exists() and any(out.iterdir()) and not (force or resume):
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _layout(subspaces: dict, splits: dict) -> SubspaceLayout:
    if not isinstance(subspaces, dict) or not subspaces:
        raise ConfigError("subspaces must map names to dimensions")
    labels = next(iter(splits.values())).labels
    classes = {}
    for name in subspaces:
        if name in labels:
            classes[name] = int(max(int(np.max(s.labels[name])) for s in splits.values())) + 1
    return SubspaceLayout(tuple(subspaces), tuple(subspaces.values()), classes)


def _read_splits(path) -> dict:
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"dataset directory {path} does not exist")
    return synthdata.read_dataset(path)


def _load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    kind = torch.load(path, map_location="cpu", weights_only=False).get("kind")
    if kind == "encoder":
        return "encoder", enc.load_encoder(path)
    if kind == "gan":
        return "gan", gan.load_gan(path)
    raise ConfigError(f"{path} is neither an encoder nor a GAN checkpoint")


def _embed(kind, model, images) -> dict:
    if kind == "encoder":
        return model.model.layout.as_dict(enc.encode(model.model, images))
    return {k: v.numpy() for k, v in gan.encode_image(model.discriminator, model.layout, images).parts().items()}


# commands

def cmd_toy(settings: dict, out: Path) -> dict:
    pair = toyopt.generate_pattern(settings["pattern"], settings["n_points"], settings["noise_scale"], settings["seed"])
    result = toyopt.optimize_points(pair, toyopt.ToyOptConfig(
        measure=settings["measure"], steps=settings["steps"], learning_rate=settings["learning_rate"],
        seed=settings["seed"]))
    payload = {**result.to_dict(), **provenance(settings)}
    write_json(out / "trajectory.json", payload)
    save_pair_plot(result, out / "pairs.png")
    return {"final_dcor": result.final_dcor}


def save_pair_plot(result: toyopt.ToyResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pairs = result.initial.coupled or [(0, 0)]
    fig, axes = plt.subplots(2, len(pairs), figsize=(3 * len(pairs), 6), squeeze=False)
    for row, (cloud, title) in enumerate([(result.initial, "before"), (result.final, "after")]):
        for col, (i, j) in enumerate(pairs):
            ax = axes[row, col]
            ax.scatter(cloud.w1[:, i], cloud.w2[:, j], s=2, alpha=0.5)
            ax.set_title(f"{title}: w1[{i}] vs w2[{j}]", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_make_data(settings: dict, out: Path) -> dict:
    confound = synthdata.ConfoundSpec(settings["correlation"])
    batch = synthdata.sample_dataset(settings["n"], confound, settings["resolution"], settings["seed"])
    splits = synthdata.split_by_identity(batch, settings["seed"])
    synthdata.write_dataset(splits, out, {**settings, **provenance(settings)})
    return {split: len(part) for split, part in splits.items()}


def _test_dcor(embeddings: dict, seed: int) -> list:
    return metrics.pairwise_dcor_report(embeddings, seed=seed).tolist()


def cmd_train_encoder(settings: dict, out: Path, resume: bool = False) -> dict:
    splits = _read_splits(settings["data"])
    layout = _layout(settings["subspaces"], splits)
    config = enc.EncoderTrainConfig(
        lambda_dc=settings["lambda_dc"], batch_size=settings["batch_size"], learning_rate=settings["learning_rate"],
        weight_decay=settings["weight_decay"], epochs=settings["epochs"], widths=tuple(settings["widths"]),
        seed=settings["seed"])
    state_path = out / "encoder_state.pt"
    state = None
    if resume:
        if not state_path.exists():
            raise ConfigError(f"nothing to resume in {out}")
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        if state["resume_key"] != resume_key(settings):
            raise ConfigError("settings differ from the run being resumed")
    log_file = open(out / "log.jsonl", "a" if resume else "w")

    def progress(epoch, train_log, val_log):
        log_file.write(json.dumps({"epoch": epoch, "train": train_log, "val": val_log}, sort_keys=True) + "\n")
        log_file.flush()

    def checkpoint(s):
        torch.save({**s, "resume_key": resume_key(settings)}, state_path)

    try:
        trained = enc.train_encoder(splits, layout, config, progress, checkpoint, state)
    finally:
        log_file.close()
    enc.save_encoder(trained, out / "encoder.pt")
    test = splits["test"]
    summary = {
        "best_epoch": trained.best_epoch,
        "test_pairwise_dcor": _test_dcor(_embed("encoder", trained, test.images), settings["seed"]),
        "subspaces": list(layout.names),
        **provenance(settings),
    }
    write_json(out / "summary.json", summary)
    return summary


def _gan_config(settings: dict) -> gan.GanTrainConfig:
    keys = set(_GAN_DEFAULTS) | {"seed"}
    return gan.GanTrainConfig(**{k: settings[k] for k in keys})


def cmd_train_gan(settings: dict, out: Path, resume: bool = False) -> dict:
    splits = _read_splits(settings["data"])
    layout = _layout(settings["subspaces"], splits)
    ckpt = out / "gan.pt"
    if resume:
        if not ckpt.exists():
            raise ConfigError(f"nothing to resume in {out}")
        bundle = gan.load_gan(ckpt)
        expected = {**vars(_gan_config(settings)), "steps": bundle.config.steps}
        if bundle.layout != layout or vars(bundle.config) != expected:
            raise ConfigError("settings differ from the run being resumed")
    else:
        bundle = gan.build_gan(layout, splits["train"].resolution, _gan_config(settings))
    remaining = max(0, settings["steps"] - bundle.step)
    log_file = open(out / "log.jsonl", "a" if resume else "w")

    def progress(rec):
        log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    def checkpoint(b):
        log_file.flush()
        gan.save_gan(b, ckpt)

    try:
        gan.train_gan(bundle, splits["train"], remaining, progress, checkpoint, settings["checkpoint_every"])
    except NumericalAbort:
        log_file.close()
        raise
    log_file.close()
    gan.save_gan(bundle, ckpt)
    test = splits["test"]
    summary = {
        "steps": bundle.step,
        "test_pairwise_dcor": _test_dcor(_embed("gan", bundle, test.images), settings["seed"]),
        "subspaces": list(layout.names),
        **provenance(settings),
    }
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval(settings: dict, out: Path) -> dict:
    kind, model = _load_checkpoint(settings["checkpoint"])
    splits = _read_splits(settings["data"])
    train, test = splits["train"], splits[settings["split"]]
    report = metrics.knn_confusion(_embed(kind, model, train.images), train.labels,
                                   _embed(kind, model, test.images), test.labels, k=settings["k"])
    report.pairwise_dcor = _test_dcor(_embed(kind, model, test.images), settings["seed"])
    report.metadata.update({"split": settings["split"], "checkpoint_kind": kind, **provenance(settings)})
    (out / "report.json").write_text(report.to_json() + "\n")
    metrics.save_confusion_heatmap(report, out / "confusion.png")
    return {"confusion": report.confusion}


def vessel_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.packbits(synthdata.detect_vessels(image)).tobytes()).hexdigest()[:16]


def cmd_swap_grid(settings: dict, out: Path) -> dict:
    from PIL import Image

    kind, bundle = _load_checkpoint(settings["checkpoint"])
    if kind != "gan":
        raise ConfigError("swap grids need a GAN checkpoint")
    part = _read_splits(settings["data"])[settings["split"]]
    ids = list(settings["image_ids"])
    if not ids or max(ids) >= len(part) or min(ids) < 0:
        raise ConfigError(f"image ids must lie in [0, {len(part)})")
    grid, manifest = gan.swap_grid(bundle, part.images[ids], settings["subspace"], settings["noise_seed"])
    n, _, c, h, w = grid.shape
    tiles = grid.transpose(0, 3, 1, 4, 2).reshape(n * h, n * w, c)
    Image.fromarray(np.round(tiles * 255).astype(np.uint8)).save(out / "grid.png")
    for row in manifest:
        row["image_id"] = {"target": ids[row["target"]], "donor": ids[row["donor"]]}
        row["vessel_hash"] = vessel_hash(grid[row["row"], row["column"]])
    write_json(out / "manifest.json", {"cells": manifest, **provenance(settings)})
    return {"cells": len(manifest)}


def cmd_swap_eval(settings: dict, out: Path) -> dict:
    kind, bundle = _load_checkpoint(settings["checkpoint"])
    if kind != "gan":
        raise ConfigError("swap evaluation needs a GAN checkpoint")
    splits = _read_splits(settings["data"])
    report = metrics.swap_classifier_eval(bundle, splits["train"], splits["test"], settings["factor"],
                                          metrics.SwapClassifierConfig(
                                              epochs=settings["epochs"], batch_size=settings["batch_size"],
                                              noise_seed=settings["noise_seed"], seed=settings["seed"]))
    report.metadata.update(provenance(settings))
    (out / "swap_eval.json").write_text(report.to_json() + "\n")
    return report.to_dict()


COMMANDS = {
    "toy": cmd_toy,
    "make-data": cmd_make_data,
    "train-encoder": cmd_train_encoder,
    "train-gan": cmd_train_gan,
    "eval": cmd_eval,
    "swap-grid": cmd_swap_grid,
    "swap-eval": cmd_swap_eval,
}
RESUMABLE = {"train-encoder", "train-gan"}


# argument parsing

def _add_flags(parser: argparse.ArgumentParser, command: str):
    parser.add_argument("--config", help="YAML file with settings for this command")
    parser.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    if command in RESUMABLE:
        parser.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    for key, default in SCHEMAS[command].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=key, type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
        elif isinstance(default, list):
            kind = type(default[0]) if default else float
            parser.add_argument(flag, dest=key, nargs="+", type=kind, default=None)
        elif isinstance(default, dict):
            parser.add_argument(flag, dest=key, type=_parse_subspaces, default=None,
                                help="comma list of name=dim, e.g. attribute=4,camera=12")
        elif default is REQUIRED:
            parser.add_argument(flag, dest=key, default=None)
        elif default is None:
            parser.add_argument(flag, dest=key, type=float, default=None)
        else:
            parser.add_argument(flag, dest=key, type=type(default), default=None)
    if command == "make-data":
        parser.add_argument("--correlation-strength", dest="correlation", type=float, default=None)


def _parse_subspaces(text: str) -> dict:
    out = {}
    for item in text.split(","):
        name, _, dim = item.partition("=")
        if not name or not dim.isdigit():
            raise argparse.ArgumentTypeError(f"bad subspace entry {item!r}")
        out[name.strip()] = int(dim)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcor-subspaces", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        _add_flags(sub.add_parser(command), command)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command
    flags = {k: getattr(args, k) for k in SCHEMAS[command]}
    resume = getattr(args, "resume", False)
    try:
        file_settings = load_config_file(args.config) if args.config else {}
        settings = resolve_settings(command, file_settings, flags)
        torch.manual_seed(settings["seed"])
        out = output_dir(settings, args.force, resume)
        fn = COMMANDS[command]
        result = fn(settings, out, resume) if command in RESUMABLE else fn(settings, out)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} {json.dumps(exc.diagnostics, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DisentangleError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"command": command, "out": str(out), **result}, default=str))
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
