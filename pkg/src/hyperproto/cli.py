"""Command-line entry point wiring all pipeline stages.

Subcommands: embed, synth, train, eval, project, explain. Every command
resolves its configuration from built-in defaults, an optional JSON config
file (--config), and command-line flags, in that order of precedence. The
resolved configuration is printed as one JSON line before any work starts,
together with its sha256 hash; every output file carries that hash (JSON
files embed a "config_hash" field, JSONL files start with a config line,
PGM heatmaps carry it as a header comment, and binary artifacts get a
<name>.meta.json sidecar).

Exit codes: 0 success, 2 usage error (bad flags, missing inputs, config
contradictions), 1 runtime failure. Failures print a single JSON line to
stderr: {"error": <kind>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import torch

from . import ToolkitError
from .embed import (
    EmbedConfig,
    child_parent_win_fraction,
    load_templates_file,
    median_child_margin,
    save_templates,
    train_embeddings,
)
from .evalmetrics import (
    full_report,
    predictions_to_jsonl,
    report_to_csv,
    report_to_json,
)
from .explain import explain_clip, render
from .hierarchy import parse_hierarchy
from .protonet import (
    ConfigurationError,
    ModelConfig,
    load_checkpoint_file,
    save_checkpoint,
)
from .tensorio import generate_synthetic, load_grid_file, load_manifest, write_dataset
from .train import (
    TrainConfig,
    predict_manifest,
    project_prototypes,
    run_training,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ToolkitError):
    pass


# defaults for the per-command config sections; "seed" lives only at the
# top level and is pushed into the section configs during resolution
_EMBED_KEYS = [f.name for f in dataclasses.fields(EmbedConfig) if f.name != "seed"]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)
               if f.name not in ("seed", "variant", "model")]
_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "seed"]

_SYNTH_DEFAULTS = {
    "split": "train",
    "clips_per_class": 20,
    "clips_per_video": 2,
    "dims": [4, 4, 2, 64],
    "noise_sigma": 0.5,
}

_COMMAND_KEYS = {
    "embed": {"hierarchy", "out", "seed", "embed"},
    "synth": {"hierarchy", "out", "seed", "synth"},
    "train": {"manifest", "templates", "out", "seed", "variant", "train", "model"},
    "eval": {"manifest", "templates", "checkpoint", "out", "seed"},
    "project": {"manifest", "templates", "checkpoint", "out", "seed", "variant"},
    "explain": {"manifest", "templates", "checkpoint", "out", "seed", "clips",
                "top_k"},
}

_REQUIRED_PATH_KEYS = {
    "embed": ["hierarchy"],
    "synth": ["hierarchy"],
    "train": ["manifest"],
    "eval": ["manifest", "checkpoint"],
    "project": ["manifest", "checkpoint"],
    "explain": ["manifest", "checkpoint"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperproto",
        description="Hierarchy-aware prototype video classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("embed", "train hierarchy template points and write a template file"),
        ("synth", "generate a labeled synthetic feature-grid dataset"),
        ("train", "train a prototype model on a dataset manifest"),
        ("eval", "evaluate a checkpoint and write accuracy reports"),
        ("project", "project prototypes of a checkpoint onto training patches"),
        ("explain", "render multi-level explanations for clips"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="global random seed")
        p.add_argument("--hierarchy", help="hierarchy JSON file")
        p.add_argument("--manifest", help="dataset manifest JSON file")
        p.add_argument("--templates", help="template file (.hptm)")
        p.add_argument("--checkpoint", help="model checkpoint file (.hpms)")
        p.add_argument("--out", help="output file (embed) or directory")
        p.add_argument("--variant", choices=["base", "cpg"],
                       help="prototype ownership variant")
        p.add_argument("--prototypes-per-class", type=int,
                       help="prototypes owned by each child class")
        p.add_argument("--ancestor-prototypes", type=int,
                       help="prototypes owned by each ancestor class")
        p.add_argument("--clips", help="comma-separated clip ids (explain)")
        p.add_argument("--top-k", type=int,
                       help="prototypes per level in explanations")
    return parser


def _section(defaults: Dict, overrides: Dict, section: str) -> Dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        if key == "seed":
            raise UsageError(
                f"set the top-level \"seed\", not {section}.seed"
            )
        if key not in merged:
            raise UsageError(f"unknown key {section}.{key}")
        merged[key] = value
    return merged


def resolve_config(args: argparse.Namespace) -> Dict:
    """Merge defaults, the optional config file, and flags into one dict."""
    command = args.command
    file_cfg: Dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - _COMMAND_KEYS[command]
        if unknown:
            raise UsageError(
                f"config keys {sorted(unknown)} are not used by '{command}'"
            )

    cfg: Dict = {"command": command, "seed": 0}
    for key in ("hierarchy", "manifest", "templates", "checkpoint", "out"):
        if key in _COMMAND_KEYS[command]:
            cfg[key] = file_cfg.get(key)
        if getattr(args, key, None) is not None:
            if key not in _COMMAND_KEYS[command]:
                raise UsageError(f"--{key} is not used by '{command}'")
            cfg[key] = getattr(args, key)
    if "seed" in file_cfg:
        cfg["seed"] = int(file_cfg["seed"])
    if args.seed is not None:
        cfg["seed"] = args.seed

    if command == "embed":
        defaults = {k: getattr(EmbedConfig(), k) for k in _EMBED_KEYS}
        cfg["embed"] = _section(defaults, file_cfg.get("embed", {}), "embed")
    elif command == "synth":
        cfg["synth"] = _section(_SYNTH_DEFAULTS, file_cfg.get("synth", {}),
                                "synth")
    elif command in ("train", "project"):
        cfg["variant"] = file_cfg.get("variant", "cpg")
        if args.variant is not None:
            cfg["variant"] = args.variant
    if command == "train":
        defaults = {k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS}
        cfg["train"] = _section(defaults, file_cfg.get("train", {}), "train")
        model_cfg = dict(file_cfg.get("model", {}))
        if args.prototypes_per_class is not None:
            model_cfg["prototypes_per_child"] = args.prototypes_per_class
        if args.ancestor_prototypes is not None:
            model_cfg["prototypes_per_ancestor"] = args.ancestor_prototypes
        for key in model_cfg:
            if key == "seed":
                raise UsageError("set the top-level \"seed\", not model.seed")
            if key not in _MODEL_KEYS:
                raise UsageError(f"unknown key model.{key}")
        cfg["model"] = model_cfg
    if command == "explain":
        clips = file_cfg.get("clips")
        if args.clips is not None:
            clips = [c for c in args.clips.split(",") if c]
        cfg["clips"] = clips
        cfg["top_k"] = int(file_cfg.get("top_k", 1))
        if args.top_k is not None:
            cfg["top_k"] = args.top_k

    for key in ("variant", "prototypes_per_class", "ancestor_prototypes",
                "clips", "top_k"):
        flag = key.replace("_", "-")
        if getattr(args, key, None) is not None and command not in {
            "variant": ("train", "project"),
            "prototypes_per_class": ("train",),
            "ancestor_prototypes": ("train",),
            "clips": ("explain",),
            "top_k": ("explain",),
        }[key]:
            raise UsageError(f"--{flag} is not used by '{command}'")

    if not cfg.get("out"):
        raise UsageError("an output location is required (--out)")
    for key in _REQUIRED_PATH_KEYS[command]:
        value = cfg.get(key)
        if not value:
            raise UsageError(f"--{key} is required for '{command}'")
        if not Path(value).is_file():
            raise UsageError(f"{key} file not found: {value}")
    if cfg.get("templates") and not Path(cfg["templates"]).is_file():
        raise UsageError(f"templates file not found: {cfg['templates']}")
    return cfg


def config_hash(cfg: Dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _write_sidecar(artifact: Path, cfg_hash: str) -> None:
    sidecar = artifact.with_name(artifact.name + ".meta.json")
    sidecar.write_text(json.dumps(
        {"config_hash": cfg_hash, "file": artifact.name},
        indent=2, sort_keys=True) + "\n")


def _jsonl_with_config(body: str, cfg_hash: str) -> str:
    head = json.dumps({"kind": "config", "config_hash": cfg_hash},
                      sort_keys=True)
    return head + "\n" + body


def _load_tree(path: str):
    return parse_hierarchy(Path(path).read_text())


def _emit(payload: Dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_embed(cfg: Dict, cfg_hash: str) -> None:
    tree = _load_tree(cfg["hierarchy"])
    embed_cfg = EmbedConfig(seed=cfg["seed"], **cfg["embed"])
    try:
        embed_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    templates, trace = train_embeddings(tree, embed_cfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_templates(templates, out)
    _write_sidecar(out, cfg_hash)
    trace_path = out.with_name(out.name + ".trace.json")
    trace_path.write_text(json.dumps(
        {"config_hash": cfg_hash, "trace": trace}, indent=2, sort_keys=True,
    ) + "\n")
    _emit({
        "templates": str(out),
        "trace": str(trace_path),
        "win_fraction": child_parent_win_fraction(
            templates, tree,
            negatives_per_positive=embed_cfg.negatives_per_positive,
            seed=embed_cfg.seed),
        "median_margin": median_child_margin(templates, tree),
    })


def cmd_synth(cfg: Dict, cfg_hash: str) -> None:
    tree = _load_tree(cfg["hierarchy"])
    section = cfg["synth"]
    dims = tuple(int(v) for v in section["dims"])
    if len(dims) != 4:
        raise UsageError(f"synth.dims must have four entries, got {section['dims']}")
    manifest, grids = generate_synthetic(
        tree, clips_per_class=int(section["clips_per_class"]), dims=dims,
        noise_sigma=float(section["noise_sigma"]), seed=cfg["seed"],
        split=section["split"], clips_per_video=int(section["clips_per_video"]),
    )
    manifest_path = write_dataset(manifest, grids, cfg["out"])
    payload = json.loads(manifest_path.read_text())
    payload["config_hash"] = cfg_hash
    manifest_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit({"manifest": str(manifest_path), "clips": len(manifest.clips)})


def _load_model(cfg: Dict):
    templates = load_templates_file(cfg["templates"]) if cfg.get("templates") \
        else None
    return load_checkpoint_file(cfg["checkpoint"], templates)


def cmd_train(cfg: Dict, cfg_hash: str) -> None:
    manifest = load_manifest(cfg["manifest"])
    model_cfg = None
    if cfg["model"]:
        kwargs = dict(cfg["model"])
        kwargs.setdefault("in_channels", manifest.dims[3])
        if "prototype_dims" in kwargs:
            kwargs["prototype_dims"] = tuple(kwargs["prototype_dims"])
        kwargs.setdefault(
            "prototypes_per_ancestor", 0 if cfg["variant"] == "base" else 5)
        model_cfg = ModelConfig(seed=cfg["seed"], **kwargs)
    train_cfg = TrainConfig(seed=cfg["seed"], variant=cfg["variant"],
                            model=model_cfg, **cfg["train"])
    try:
        train_cfg.validate()
        if model_cfg is not None:
            model_cfg.resolved().validate()
            if model_cfg.in_channels != manifest.dims[3]:
                raise ConfigurationError(
                    f"model expects {model_cfg.in_channels} input channels, "
                    f"manifest grids carry {manifest.dims[3]}"
                )
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    euclidean = model_cfg is not None and model_cfg.euclidean_head
    templates = None
    if not euclidean:
        if not cfg.get("templates"):
            raise UsageError("--templates is required unless the model config "
                             "sets euclidean_head")
        templates = load_templates_file(cfg["templates"])

    model, report = run_training(manifest, templates, train_cfg)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.hpms"
    save_checkpoint(model, checkpoint_path)
    _write_sidecar(checkpoint_path, cfg_hash)
    report_path = out_dir / "train_report.jsonl"
    report_path.write_text(_jsonl_with_config(report.to_jsonl(), cfg_hash))
    outputs = {"checkpoint": str(checkpoint_path), "report": str(report_path),
               "epochs": len(report.epoch_records())}
    if train_cfg.train_templates and model.templates is not None:
        tuned_path = out_dir / "templates_tuned.hptm"
        save_templates(model.templates, tuned_path)
        _write_sidecar(tuned_path, cfg_hash)
        outputs["templates_tuned"] = str(tuned_path)
    _emit(outputs)


def cmd_eval(cfg: Dict, cfg_hash: str) -> None:
    manifest = load_manifest(cfg["manifest"])
    model = _load_model(cfg)
    preds = predict_manifest(model, manifest)
    report = full_report(preds, manifest.tree)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report_json = json.loads(report_to_json(report))
    report_json["config_hash"] = cfg_hash
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report_json, indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / "report.csv"
    csv_path.write_text(report_to_csv(report) + f"# config_hash {cfg_hash}\n")
    preds_path = out_dir / "predictions.jsonl"
    preds_path.write_text(_jsonl_with_config(predictions_to_jsonl(preds), cfg_hash))
    _emit({
        "report": str(report_path),
        "clip_accuracy": report.clip_accuracy,
        "video_accuracy": report.video_accuracy,
    })


def cmd_project(cfg: Dict, cfg_hash: str) -> None:
    manifest = load_manifest(cfg["manifest"])
    model = _load_model(cfg)
    events = project_prototypes(model, manifest, manifest.tree, cfg["variant"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.hpms"
    save_checkpoint(model, checkpoint_path)
    _write_sidecar(checkpoint_path, cfg_hash)
    events_path = out_dir / "projection_events.jsonl"
    body = "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)
    events_path.write_text(_jsonl_with_config(body, cfg_hash))
    _emit({
        "checkpoint": str(checkpoint_path),
        "events": str(events_path),
        "projected": sum(1 for e in events if e["status"] == "projected"),
        "skipped": sum(1 for e in events if e["status"] != "projected"),
    })


def cmd_explain(cfg: Dict, cfg_hash: str) -> None:
    manifest = load_manifest(cfg["manifest"])
    model = _load_model(cfg)
    clip_ids = cfg["clips"]
    if clip_ids is None:
        clip_ids = sorted(rec.clip_id for rec in manifest.clips)
    known = {rec.clip_id for rec in manifest.clips}
    missing = [c for c in clip_ids if c not in known]
    if missing:
        raise UsageError(f"clips not in manifest: {missing}")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for clip_id in clip_ids:
        record = manifest.clip(clip_id)
        grid = load_grid_file(manifest.grid_path(record))
        explanation = explain_clip(grid, clip_id, model, manifest.tree,
                                   k=cfg["top_k"])
        render(explanation, out_dir, comment=f"config_hash {cfg_hash}",
               metadata={"config_hash": cfg_hash})
    _emit({"out": str(out_dir), "clips": clip_ids})


_HANDLERS = {
    "embed": cmd_embed,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "project": cmd_project,
    "explain": cmd_explain,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    cfg_hash = config_hash(cfg)
    print(json.dumps({"resolved_config": cfg, "config_hash": cfg_hash},
                     sort_keys=True))
    try:
        _HANDLERS[args.command](cfg, cfg_hash)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except (ToolkitError, ValueError, OSError) as exc:
        return _fail("runtime", str(exc), EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
