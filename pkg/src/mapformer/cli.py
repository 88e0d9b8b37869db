"""Command line entrypoint: gen, train, eval, analyze, verify.

Configs are JSON trees; ``--set a.b=value`` overrides any leaf. Every command
writes a run manifest before doing work. Outputs land under ``$MAPFORMER_OUT``
(default ``./runs``) unless an explicit path is given.

Exit codes: 0 success, 1 a verified property or probe failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import torch

from . import __version__
from .analysis import (
    ProbeError,
    action_cosine_matrix,
    export_attention,
    probe_path,
    probe_roles,
    torus_export,
    write_json,
    write_matrix_csv,
)
from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from .experiments import EVAL_SEED_OFFSET, PRESETS, build_model, get_preset
from .tasks import (
    TaskError,
    generate_one,
    header_path,
    read_dataset,
    task_config,
    write_dataset,
)
from .train import evaluate, train
from .verify import SUITES, run_suite

OUT_ENV = "MAPFORMER_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mapformer")

# gen task name -> experiment preset stem; "paper-<split>" / "desk-<split>" pick a split
GEN_TASKS = {
    "copy": ("copy", "copy"),
    "nav1d": ("nav", "nav1d"),
    "nav2d": ("nav", "nav2d"),
    "nav3d": ("nav", "nav3d"),
    "mampa": ("nav", "mampa"),
    "rotation_nav": ("rotation_nav", "rot4d"),
}


class UsageError(Exception):
    pass


# -- config plumbing ---------------------------------------------------------------


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree: dict, pairs: list[str] | None) -> dict:
    """Set dotted-path leaves, e.g. ``model.n_heads=2``; values parse as JSON when possible."""
    tree = copy.deepcopy(tree)
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(value)
    return tree


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def code_hash() -> str:
    """Content hash over the package sources, stable across checkouts."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seeds: dict, outputs: dict) -> dict:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "code_hash": code_hash(),
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": outputs,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def finish_manifest(path: Path, **fields) -> None:
    manifest = json.loads(path.read_text())
    manifest.update(fields, finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


# -- gen ---------------------------------------------------------------------------


def resolve_gen_config(task: str, preset: str | None, cfg_file: dict, overrides: list[str]):
    if task not in GEN_TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {sorted(GEN_TASKS)}")
    kind, stem = GEN_TASKS[task]
    tree: dict = {}
    if preset:
        scale, _, split = preset.partition("-")
        name = f"{scale}-{stem}"
        if name not in PRESETS or split not in PRESETS[name].splits:
            known = [f"{p.split('-')[0]}-{s}" for p, v in PRESETS.items()
                     if p.endswith("-" + stem) for s in v.splits]
            raise UsageError(f"no preset {preset!r} for task {task}; known: {known}")
        tree = asdict(PRESETS[name].splits[split])
    tree = apply_overrides(deep_merge(tree, cfg_file), overrides)
    try:
        return kind, task_config(kind, tree)
    except (TypeError, TaskError) as exc:
        raise UsageError(f"bad {task} config: {exc}") from exc


def cmd_gen(args) -> int:
    kind, cfg = resolve_gen_config(args.task, args.preset, load_config(args.config), args.set)
    out = Path(args.out)
    header = {"task": kind, "name": args.task, "preset": args.preset, "config": asdict(cfg),
              "vocab": cfg.vocab.to_dict(), "seed": args.seed, "n": args.n}
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen", header,
                   {"data": args.seed}, {"dataset": str(out), "header": str(header_path(out))})
    eps = (generate_one(kind, cfg, args.seed, i) for i in range(args.n))
    written = write_dataset(out, eps, header)
    print(f"episodes {written['n_episodes']} targets {written['n_targets']} -> {out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------


def train_tree(args) -> dict:
    base = {"preset": None, "variant": None, "seed": 0, "model": {}, "train": {},
            "data": {"train": None, "eval": {}}, "max_steps": None}
    tree = deep_merge(base, load_config(args.config))
    for key in ("preset", "variant", "seed", "max_steps"):
        val = getattr(args, key, None)
        if val is not None:
            tree[key] = val
    if args.data:
        tree["data"]["train"] = args.data
    for pair in args.eval_data or []:
        name, _, path = pair.partition("=")
        if not path:
            raise UsageError(f"--eval-data expects name=path, got {pair!r}")
        tree["data"]["eval"][name] = path
    tree = apply_overrides(tree, args.set)
    if not tree["preset"] or not tree["variant"]:
        raise UsageError("train needs a preset and a variant (flags or config)")
    if tree["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {tree['preset']!r}; known: {sorted(PRESETS)}")
    return tree


def _dataset_vocab(header: dict) -> int | None:
    vocab = header.get("vocab") or {}
    return vocab.get("size")


def cmd_train(args) -> int:
    tree = train_tree(args)
    preset = get_preset(tree["preset"])
    preset = replace(preset, model={**preset.model, **tree["model"]})
    try:
        tcfg = replace(preset.train, seed=int(tree["seed"]), **tree["train"])
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from exc
    run_id = args.run_id or f"{preset.name}-{tree['variant']}-s{tree['seed']}"
    out = Path(args.out) if args.out else out_root() / run_id
    ckpt_path, metrics_path, manifest_path = out / "checkpoint.zip", out / "metrics.jsonl", out / "manifest.json"
    tree["train"] = asdict(tcfg)
    tree["model"] = dict(preset.model)
    write_manifest(manifest_path, "train", tree, {"train": tcfg.seed, "eval": tcfg.seed + EVAL_SEED_OFFSET},
                   {"checkpoint": str(ckpt_path), "metrics": str(metrics_path)})

    start_step, opt_state = 0, None
    if args.resume:
        model = load_checkpoint(args.resume)
        meta = read_meta(args.resume)
        start_step = int(meta["extra"].get("train_step", 0))
        opt_file = Path(args.resume).with_name("optimizer.pt")
        if opt_file.exists():
            opt_state = torch.load(opt_file, weights_only=True)
    else:
        try:
            model = build_model(preset, tree["variant"], tcfg.seed, tcfg.precision)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"cannot build model: {exc}") from exc
    vocab_size = model.config.vocab_size

    skip = start_step * tcfg.batch_size
    if tree["data"]["train"]:
        header, episodes = read_dataset(tree["data"]["train"])
        if _dataset_vocab(header) not in (None, vocab_size):
            raise UsageError(f"dataset vocab {_dataset_vocab(header)} does not match model vocab {vocab_size}")
        dataset = episodes[skip:]
    else:
        split_cfg = preset.train_split
        if split_cfg.vocab.size != vocab_size:
            raise UsageError(f"preset vocab {split_cfg.vocab.size} does not match model vocab {vocab_size}")
        dataset = (generate_one(preset.task, split_cfg, tcfg.seed, i) for i in range(skip, tcfg.n_sequences))

    eval_sets = {}
    for name, path in tree["data"]["eval"].items():
        header, eps = read_dataset(path)
        if _dataset_vocab(header) not in (None, vocab_size):
            raise UsageError(f"eval set {name} vocab does not match model vocab {vocab_size}")
        eval_sets[name] = eps

    t0 = time.time()
    model, metrics, opt = train(model, dataset, tcfg, eval_sets=eval_sets or None,
                                metrics_path=metrics_path, start_step=start_step,
                                optimizer_state=opt_state, max_steps=tree["max_steps"])
    save_checkpoint(ckpt_path, model, extra={"train_step": model.train_step, "preset": preset.name,
                                             "variant": tree["variant"], "seed": tcfg.seed})
    torch.save(opt.state_dict(), out / "optimizer.pt")
    finish_manifest(manifest_path, train_step=model.train_step, seconds=round(time.time() - t0, 2))
    print(f"trained {model.train_step} steps -> {ckpt_path}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------


def format_table(results: dict) -> str:
    rows = [("split", "accuracy", "n_targets", "loss")]
    for split, r in results.items():
        acc = "-" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        loss = "-" if r["loss"] is None else f"{r['loss']:.4f}"
        rows.append((split, acc, str(r["n_targets"]), loss))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    meta = read_meta(args.checkpoint)
    sets: dict = {}
    for item in args.datasets:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name.split(".")[0], item
        header, eps = read_dataset(path)
        if _dataset_vocab(header) not in (None, model.config.vocab_size):
            raise UsageError(f"dataset {name} vocab does not match the checkpoint")
        sets[name] = eps
    if args.preset:
        preset = get_preset(args.preset)
        seed = int(meta["extra"].get("seed", 0)) + EVAL_SEED_OFFSET
        for split, cfg in preset.splits.items():
            sets[split] = [generate_one(preset.task, cfg, seed, i) for i in range(args.n_eval)]
    if not sets:
        raise UsageError("eval needs datasets (name=path) or --preset")
    out = Path(args.json) if args.json else Path(args.checkpoint).with_name("eval.json")
    write_manifest(out.with_name(out.stem + ".manifest.json"), "eval",
                   {"checkpoint": args.checkpoint, "datasets": args.datasets, "preset": args.preset,
                    "n_eval": args.n_eval}, {}, {"results": str(out)})
    results = {name: evaluate(model, eps) for name, eps in sets.items()}
    out.write_text(json.dumps(results, indent=2, sort_keys=True))
    print(format_table(results))
    return EXIT_OK


# -- analyze -----------------------------------------------------------------------

PROBES = ("roles", "cosines", "attention", "torus")


def action_labels(vocab: dict) -> list[str]:
    n = vocab["n_actions"]
    if n == 2:
        return ["right", "left"]
    if n == 4:
        return ["right", "left", "up", "down"]
    return [f"{'+-'[i % 2]}axis{i // 2}" for i in range(n)]


def cmd_analyze(args) -> int:
    model = load_checkpoint(args.checkpoint)
    header, episodes = read_dataset(args.dataset)
    if not episodes:
        raise UsageError("dataset is empty")
    episodes = episodes[: args.episodes]
    probes = [p.strip() for p in args.probes.split(",") if p.strip()]
    unknown = set(probes) - set(PROBES)
    if unknown:
        raise UsageError(f"unknown probes {sorted(unknown)}; choose from {list(PROBES)}")
    root = Path(args.out) if args.out else out_root()
    run_id = args.run_id or Path(args.checkpoint).resolve().parent.name
    write_manifest(root / run_id / "analyze.manifest.json", "analyze",
                   {"checkpoint": args.checkpoint, "dataset": args.dataset, "probes": probes,
                    "episodes": len(episodes), "layer": args.layer, "freqs": args.freqs}, {},
                   {"root": str(root / run_id)})
    vocab = header.get("vocab")
    written = []
    try:
        if "roles" in probes:
            p = probe_path(root, run_id, "roles", "all", "json")
            write_json(p, probe_roles(model, episodes, args.layer))
            written.append(p)
        if "cosines" in probes:
            if not vocab or not vocab.get("action_ids"):
                raise ProbeError("cosine probe needs a dataset header with action ids")
            mat = action_cosine_matrix(model, vocab["action_ids"], args.layer)
            p = probe_path(root, run_id, "cosines", "actions", "csv")
            write_matrix_csv(p, mat)
            write_json(probe_path(root, run_id, "cosines", "actions", "json"),
                       {"labels": action_labels(vocab), "action_ids": vocab["action_ids"], "matrix": mat})
            written.append(p)
        for i, ep in enumerate(episodes):
            eid = f"ep{i:04d}"
            if "attention" in probes:
                res = export_attention(model, ep, args.layer)
                for name, arr in res["maps"].items():
                    for h in range(arr.shape[0]):
                        p = probe_path(root, run_id, "attention", f"{eid}_{name}_head{h}", "csv")
                        write_matrix_csv(p, arr[h].tolist())
                        written.append(p)
                write_json(probe_path(root, run_id, "attention", f"{eid}_flags", "json"),
                           {"flagged_rows": res["flagged_rows"], "targets": res["targets"]})
            if "torus" in probes:
                fa, fb = (int(x) for x in args.freqs.split(","))
                arr = torus_export(model, ep, (fa, fb), args.head, args.layer)
                p = probe_path(root, run_id, "torus", eid, "csv")
                write_matrix_csv(p, arr.tolist())
                written.append(p)
    except ProbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(written)} probe files under {root / run_id}")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    suites = args.suite or list(SUITES)
    checks = []
    for s in suites:
        t0 = time.time()
        got = run_suite(s, seed=args.seed)
        for c in got:
            print(c.line())
        print(f"-- {s}: {sum(c.passed for c in got)}/{len(got)} passed in {time.time() - t0:.1f}s")
        checks.extend(got)
    if args.json:
        Path(args.json).write_text(json.dumps([c.to_dict() for c in checks], indent=2))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mapformer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a task dataset")
    g.add_argument("task", choices=sorted(GEN_TASKS))
    g.add_argument("--preset", help="split preset such as paper-train or desk-ood_long")
    g.add_argument("--config", help="JSON file with task config fields")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--preset")
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="JSON config tree (preset, variant, seed, model, train, data)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lr=1e-3")
    t.add_argument("--data", help="training dataset; generated from the preset when omitted")
    t.add_argument("--eval-data", action="append", metavar="NAME=PATH")
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--run-id")
    t.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<run-id>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on datasets")
    e.add_argument("checkpoint")
    e.add_argument("datasets", nargs="*", metavar="NAME=PATH")
    e.add_argument("--preset", help="also generate and score every split of this preset")
    e.add_argument("--n-eval", dest="n_eval", type=int, default=256)
    e.add_argument("--json", help="results file (default next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="run probes on a checkpoint")
    a.add_argument("checkpoint")
    a.add_argument("dataset")
    a.add_argument("--probes", default=",".join(PROBES))
    a.add_argument("--episodes", type=int, default=4)
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--head", type=int, default=0)
    a.add_argument("--freqs", default="0,1")
    a.add_argument("--run-id")
    a.add_argument("--out", help=f"output root (default ${OUT_ENV})")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="run oracle/property suites")
    v.add_argument("--suite", action="append", choices=SUITES)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json")
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
