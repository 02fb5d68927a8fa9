"""Command-line entry point: ``tidyscore {gen-data,train,eval,tidy,render}``.

Every command accepts ``--config FILE`` (JSON).  Keys use the flag names
(dashes or underscores); a nested object under the command name overrides
the top level for that command; explicit flags override both.  A run
manifest written by an earlier run is also accepted as a config file.

Exit codes: 0 success, 1 usage or invalid input, 2 I/O or corrupt data,
3 infeasible request, 4 language model unavailable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__, datagen, grounding, oracle, planner, raster, scene, trainer
from .errors import (
    CapacityExceeded,
    ConfigError,
    CorruptCheckpoint,
    CorruptDataset,
    DanglingReference,
    GroundingInfeasible,
    InvalidScene,
    LayoutInfeasible,
    LlmError,
    LlmUnavailable,
    ParseFailure,
    TidyError,
)
from .scorer import ENCODER_KINDS, score

log = logging.getLogger("tidyscore")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INFEASIBLE, EXIT_LLM = 0, 1, 2, 3, 4
MANIFEST_VERSION = 1
LLM_HINT = "hint: rerun with --planner rules for a fully offline episode"
MODE_ALIASES = {"object-centric": "object-centric", "direct": "direct-coordinates"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this CLI reserves 2 for I/O."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# option tables: name -> (default, type); flags default to None so that the
# config file can fill whatever the user did not type


GEN_DATA = {
    "out": (None, str),
    "trajectories": (300, int),
    "steps": (12, int),
    "local": (4, int),
    "seed": (0, int),
    "workers": (1, int),
    "templates": ("rows,grid", str),
}
TRAIN = {
    "data": (None, str),
    "encoder": ("features", str),
    "out": (None, str),
    "metrics": (None, str),
    "lr": (1e-3, float),
    "batch_size": (64, int),
    "epochs": (50, int),
    "patience": (5, int),
    "val_fraction": (0.15, float),
    "seed": (0, int),
}
EVAL = {
    "data": (None, str),
    "ckpt": (None, str),
    "encoder": (None, str),
    "out": (None, str),
    "split": ("held-out", str),
    "val_fraction": (0.15, float),
    "seed": (0, int),
}
TIDY = {
    "scene": (None, str),
    "ckpt": (None, str),
    "planner": ("rules", str),
    "mode": ("object-centric", str),
    "grounding": ("score", str),
    "out": (None, str),
    "seed": (0, int),
    "samples": (64, int),
    "sample_solution": ([], list),
    "llm_url": ("https://api.openai.com/v1", str),
    "llm_model": ("gpt-4", str),
    "api_key_env": ("TIDY_LLM_API_KEY", str),
    "llm_timeout": (60.0, float),
    "llm_retries": (2, int),
    "llm_backoff": (1.0, float),
    "temperature": (0.0, float),
}
RENDER = {"scene": (None, str), "out": (None, str)}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_options(p: argparse.ArgumentParser, table: dict, choices: dict | None = None, helps: dict | None = None):
    choices, helps = choices or {}, helps or {}
    for name, (default, typ) in table.items():
        kw: dict[str, Any] = {"default": None, "help": helps.get(name, "")}
        if default not in (None, []):
            kw["help"] = (kw["help"] + f" (default: {default})").strip()
        if typ is list:
            kw.update(action="append", metavar="FILE")
        else:
            kw["type"] = typ
        if name in choices:
            kw["choices"] = choices[name]
        p.add_argument(_flag(name), **kw)
    p.add_argument("--config", help="JSON file merged under the flags")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tidyscore", description="Learned tidiness scoring and table-tidying episodes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a preference dataset from random walks")
    _add_options(
        g,
        GEN_DATA,
        helps={
            "out": "output directory",
            "trajectories": "number of random-walk trajectories",
            "steps": "global walk length T",
            "local": "local variants per state M",
            "seed": "master seed",
            "workers": "worker processes (output is identical for any value)",
            "templates": "comma-separated tidy templates from " + ",".join(datagen.TEMPLATES),
        },
    )

    t = sub.add_parser("train", help="fit a scorer on a dataset")
    _add_options(
        t,
        TRAIN,
        choices={"encoder": ENCODER_KINDS},
        helps={"out": "checkpoint path", "metrics": "per-epoch metrics JSON (default: metrics.json next to --out)"},
    )

    e = sub.add_parser("eval", help="pairwise accuracy and oracle agreement of a checkpoint")
    _add_options(
        e,
        EVAL,
        choices={"encoder": ENCODER_KINDS, "split": ("held-out", "all")},
        helps={
            "encoder": "expected encoder; a mismatching checkpoint is an error",
            "out": "report path (the report is always printed)",
            "split": "evaluate on the trainer's held-out trajectories or on every pair",
            "val_fraction": "must match the value used for training",
            "seed": "must match the value used for training",
        },
    )

    d = sub.add_parser("tidy", help="plan and ground one tidying episode")
    _add_options(
        d,
        TIDY,
        choices={
            "planner": ("llm", "rules"),
            "mode": tuple(MODE_ALIASES),
            "grounding": grounding.STRATEGIES,
        },
        helps={
            "scene": "scene JSON (default: the bundled demo scene)",
            "ckpt": "scorer checkpoint, required for --grounding score",
            "out": "output directory",
            "seed": "grounding seed",
            "samples": "candidates per action",
            "sample_solution": "example plan text added to the prompt (at most two)",
            "api_key_env": "environment variable holding the API key",
        },
    )

    r = sub.add_parser("render", help="write a scene as a PPM image")
    _add_options(r, RENDER, helps={"scene": "scene JSON (default: the bundled demo scene)", "out": "PPM path"})
    return p


def _read_config(path: str | None, command: str) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CliError(EXIT_USAGE, f"{path}: config must be a JSON object")
    if {"command", "config", "format_version"} <= doc.keys():
        doc = doc["config"]
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict) and k != "config"}
    section = doc.get(command, {})
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve(args: argparse.Namespace, table: dict) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = _read_config(args.config, args.command)
    unknown = sorted(set(cfg) - set(table))
    if unknown:
        log.warning("config keys ignored by %s: %s", args.command, ", ".join(unknown))
    out = {}
    for name, (default, typ) in table.items():
        value = getattr(args, name)
        if value is None:
            value = cfg.get(name, default)
        if value is not None and typ is not list:
            try:
                value = typ(value)
            except (TypeError, ValueError) as exc:
                raise CliError(EXIT_USAGE, f"{name}: {exc}") from exc
        out[name] = value
    return out


def _require(opts: dict, *names: str) -> None:
    missing = [_flag(n) for n in names if not opts.get(n)]
    if missing:
        raise CliError(EXIT_USAGE, "missing required option(s): " + ", ".join(missing))


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path: Path, command: str, opts: dict, seed: int | None, artifacts: dict[str, str]) -> None:
    _write_json(
        path,
        {
            "command": command,
            "config": opts,
            "master_seed": seed,
            "artifacts": artifacts,
            "format_version": MANIFEST_VERSION,
            "version": __version__,
        },
    )


def load_scene_file(path: str | None) -> scene.SceneState:
    if path is None:
        text = resources.files("tidyscore").joinpath("data/demo_scene.json").read_text(encoding="utf-8")
        return scene.loads(text)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read scene {path}: {exc}") from exc
    try:
        return scene.loads(text)
    except InvalidScene as exc:
        raise CliError(EXIT_USAGE, f"{path}: {exc}") from exc


def _load_ckpt(path: str):
    try:
        return trainer.load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc


def _load_data(path: str) -> datagen.Dataset:
    try:
        return datagen.load_dataset(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    opts = resolve(args, GEN_DATA)
    _require(opts, "out")
    meta = datagen.DatasetMeta(
        master_seed=opts["seed"],
        trajectory_count=opts["trajectories"],
        walk_steps=opts["steps"],
        variants_per_step=opts["local"],
        templates=tuple(t.strip() for t in opts["templates"].split(",") if t.strip()),
    )
    out = datagen.generate_dataset(meta, opts["out"], workers=max(1, opts["workers"]))
    artifacts = {name: str(out / name) for name in ("meta.json", "scenes.jsonl", "pairs.jsonl") if (out / name).exists()}
    write_manifest(out / "manifest.json", "gen-data", opts, opts["seed"], artifacts)
    log.info("dataset written to %s", out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    opts = resolve(args, TRAIN)
    _require(opts, "data", "out")
    dataset = _load_data(opts["data"])
    config = trainer.TrainConfig(
        encoder_kind=opts["encoder"],
        learning_rate=opts["lr"],
        batch_size=opts["batch_size"],
        max_epochs=opts["epochs"],
        early_stop_patience=opts["patience"],
        val_fraction=opts["val_fraction"],
        seed=opts["seed"],
    )
    model, history = trainer.train(config, dataset)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(model, out)
    metrics = Path(opts["metrics"]) if opts["metrics"] else out.parent / "metrics.json"
    best = max(history, key=lambda r: r["val_accuracy"], default=None)
    _write_json(metrics, {"config": config.to_dict(), "history": history, "best": best})
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "train",
        opts,
        opts["seed"],
        {"checkpoint": str(out), "metrics": str(metrics)},
    )
    print(json.dumps({"epochs": len(history), "best": best}))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    opts = resolve(args, EVAL)
    _require(opts, "data", "ckpt")
    model = _load_ckpt(opts["ckpt"])
    if opts["encoder"] and opts["encoder"] != model.encoder_kind:
        raise CliError(
            EXIT_IO, f"checkpoint {opts['ckpt']} holds a {model.encoder_kind} scorer, not {opts['encoder']}"
        )
    dataset = _load_data(opts["data"])
    if opts["split"] == "all":
        pairs = dataset.pairs
    else:
        pairs = trainer.held_out_pairs(dataset, opts["val_fraction"], opts["seed"])
    report = {"encoder": model.encoder_kind, "split": opts["split"], **trainer.evaluate(model, pairs, dataset)}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if opts["out"]:
        out = Path(opts["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", opts, opts["seed"], {"report": str(out)})
    return EXIT_OK


def _plan(opts: dict, state: scene.SceneState, out: Path) -> planner.PlanProposal:
    mode = MODE_ALIASES[opts["mode"]]
    if opts["planner"] == "rules":
        if mode != "object-centric":
            raise CliError(EXIT_USAGE, "the rules planner only produces object-centric plans")
        return planner.fallback_plan(state)
    samples = []
    for path in opts["sample_solution"] or []:
        try:
            samples.append(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read sample solution {path}: {exc}") from exc
    prompt = planner.build_prompt(
        planner.describe_scene(state), mode, samples, state.table_width, state.table_depth
    )
    (out / "prompt.txt").write_text(prompt, encoding="utf-8")
    config = planner.LlmConfig(
        base_url=opts["llm_url"],
        model_name=opts["llm_model"],
        api_key_env=opts["api_key_env"],
        timeout_seconds=opts["llm_timeout"],
        max_retries=opts["llm_retries"],
        temperature=opts["temperature"],
        backoff_seconds=opts["llm_backoff"],
    )
    reply = planner.llm_complete(config, prompt)
    (out / "llm_response.txt").write_text(reply, encoding="utf-8")
    return planner.parse_plan(reply)


def cmd_tidy(args: argparse.Namespace) -> int:
    opts = resolve(args, TIDY)
    _require(opts, "out")
    state = load_scene_file(opts["scene"])
    model = None
    if opts["ckpt"]:
        model = _load_ckpt(opts["ckpt"])
    elif opts["grounding"] == "score":
        raise CliError(EXIT_USAGE, "--grounding score needs --ckpt")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)

    plan = _plan(opts, state, out)
    (out / "plan.txt").write_text(planner.serialize_plan(plan), encoding="utf-8")
    config = grounding.GroundingConfig(strategy=opts["grounding"], samples=opts["samples"], seed=opts["seed"])
    episode = grounding.tidy_episode(state, plan, model, config)

    _write_json(out / "plan.json", episode.plan_json())
    (out / "trace.jsonl").write_text(episode.trace_jsonl(), encoding="utf-8")
    (out / "before.ppm").write_bytes(raster.to_ppm(state))
    (out / "after.ppm").write_bytes(raster.to_ppm(episode.final_scene))
    (out / "final_scene.json").write_text(
        json.dumps(scene.scene_to_dict(episode.final_scene), indent=2) + "\n", encoding="utf-8"
    )
    report = {
        "method": {"planner": opts["planner"], "mode": opts["mode"], "grounding": opts["grounding"]},
        "rules": list(plan.rules),
        "planned_actions": len(plan.actions),
        "applied_actions": len(episode.actions),
        "skipped_actions": episode.skipped,
        "disorder_before": oracle.disorder(state).as_dict(),
        "disorder_after": oracle.disorder(episode.final_scene).as_dict(),
    }
    if model is not None:
        report["score_before"] = score(model, raster.rasterize(state))
        report["score_after"] = score(model, raster.rasterize(episode.final_scene))
    _write_json(out / "report.json", report)
    names = ["plan.txt", "plan.json", "trace.jsonl", "before.ppm", "after.ppm", "final_scene.json", "report.json"]
    names += [n for n in ("prompt.txt", "llm_response.txt") if (out / n).exists()]
    write_manifest(out / "manifest.json", "tidy", opts, opts["seed"], {n: str(out / n) for n in sorted(names)})
    print(
        f"disorder {report['disorder_before']['total']:.4f} -> {report['disorder_after']['total']:.4f}; "
        f"{len(episode.actions)}/{len(plan.actions)} actions applied"
    )
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    opts = resolve(args, RENDER)
    _require(opts, "out")
    state = load_scene_file(opts["scene"])
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(raster.to_ppm(state))
    write_manifest(out.with_name(out.name + ".manifest.json"), "render", opts, None, {"image": str(out)})
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "tidy": cmd_tidy,
    "render": cmd_render,
}


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (LlmUnavailable, LlmError)):
        return EXIT_LLM
    if isinstance(exc, (LayoutInfeasible, GroundingInfeasible, CapacityExceeded, ParseFailure)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (CorruptCheckpoint, CorruptDataset, DanglingReference, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"tidyscore {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (TidyError, OSError) as exc:
        code = _exit_code(exc)
        print(f"tidyscore {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_LLM or isinstance(exc, ConfigError):
            print(LLM_HINT, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
