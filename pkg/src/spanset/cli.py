"""Command line entry point: ``spanset gen | train | eval | render | curves``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Configs are JSON files; command-line flags override file values, and the
``SPANSET_SEED`` environment variable overrides every seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, kernels
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .corpus import CorpusError, CorpusSpec, generate, load_corpus, save_corpus
from .losses import LossWeights
from .metrics import evaluate
from .model import ConfigError, VidGTR, desk_config, ModelConfig
from .trainer import AdamState, DivergenceError, TrainConfig, detect_phase, read_curve, train, write_curve

log = logging.getLogger("spanset")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _env_seed() -> int | None:
    raw = os.environ.get("SPANSET_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"SPANSET_SEED must be an integer, got {raw!r}") from exc


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(inputs: list[Path]) -> dict[str, str]:
    return {str(p): _sha256(p) for p in inputs}


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path] | dict[str, str],
                   outputs: list[Path], seconds: float) -> Path:
    """One manifest per artifact directory; the hash covers config, kernel backend
    and input bytes. Backends agree to rounding only, so the backend is part of it.

    ``inputs`` may be pre-hashed when a command overwrites one of its inputs.
    """
    hashes = inputs if isinstance(inputs, dict) else hash_inputs(inputs)
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
    h.update(kernels.BACKEND.encode())
    for name in sorted(hashes):
        h.update(hashes[name].encode())
    manifest = {
        "command": command,
        "version": __version__,
        "backend": kernels.BACKEND,
        "config": config,
        "inputs": hashes,
        "content_hash": h.hexdigest(),
        "outputs": sorted(str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p) for p in outputs),
        "seconds": round(seconds, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_corpus(path: str) -> tuple[list, CorpusSpec]:
    try:
        samples, spec = load_corpus(path)
    except CorpusError as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"corpus {path} is empty")
    return samples, spec


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    raw = _read_json(args.spec)
    raw.update(_overrides(args, {"n_samples": "n_samples", "seed": "seed", "first_id": "first_id"}))
    env = _env_seed()
    if env is not None:
        raw["seed"] = env
    try:
        spec = CorpusSpec.from_dict(raw)
        spec.validate()
    except (CorpusError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if spec.n_samples == 0:
        raise UsageError("n_samples must be positive")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = generate(spec)
    save_corpus(out, samples, spec)
    outputs = [out, Path(str(out) + ".header.json")]
    write_manifest(out.parent, "gen", {"corpus": spec.to_dict()}, [], outputs, time.perf_counter() - t0)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _model_config(raw: dict, args, n_queries: int, spec: CorpusSpec) -> ModelConfig:
    base = desk_config().to_dict()
    base.update({"d_in": spec.d_in, "frame_count": spec.T, "max_queries": max(spec.k_max, n_queries)})
    base.update(raw)
    base.update(_overrides(args, {"proposals_per_query": "proposals_per_query", "d_model": "d_model"}))
    try:
        return ModelConfig.from_dict(base)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _train_config(raw: dict, args) -> TrainConfig:
    d = dict(raw)
    d.update(_overrides(args, {"lr": "lr", "steps": "total_steps", "batch_size": "batch_size", "seed": "seed"}))
    w = dict(d.get("weights", {}))
    w.update(_overrides(args, {"lambda_l1": "lambda_l1", "lambda_iou": "lambda_iou", "lambda_sg": "lambda_sg"}))
    d["weights"] = LossWeights(**w)
    env = _env_seed()
    if env is not None:
        d["seed"] = env
    if "lr_drop_step" not in raw and "total_steps" in d:
        d["lr_drop_step"] = None
    try:
        return TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    samples, spec = _load_corpus(args.corpus)
    raw = _read_json(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    curve_path = out / "curves.csv"
    start, opt, ck = 0, None, None
    train_raw = dict(raw.get("train", {}))
    if args.resume:
        try:
            ck = load_checkpoint(args.resume)
        except CheckpointError as exc:
            raise DataError(str(exc)) from exc
        if ck.train_config is not None:
            train_raw = {**ck.train_config.to_dict(), **train_raw}
    tcfg = _train_config(train_raw, args)
    input_hashes = hash_inputs([Path(args.corpus)] + ([Path(args.resume)] if args.resume else []))
    if ck is not None:
        model = restore_model(ck)
        mcfg = ck.model_config
        start, opt = ck.step, ck.optimizer
        if start > tcfg.total_steps:
            raise UsageError(f"checkpoint step {start} beyond total_steps {tcfg.total_steps}")
    else:
        mcfg = _model_config(raw.get("model", {}), args, max(s.K for s in samples), spec)
        model_seed = tcfg.seed if args.model_seed is None else args.model_seed
        model = VidGTR(mcfg, seed=model_seed)
    stop = tcfg.total_steps if args.stop_at is None else min(args.stop_at, tcfg.total_steps)
    if stop < start:
        raise UsageError(f"--stop-at {stop} is before the resume step {start}")
    config = {"corpus_spec": spec.to_dict(), "model": mcfg.to_dict(), "train": tcfg.to_dict(),
              "resume_step": start, "stop_step": stop}
    # rows logged before the resume point survive; anything later is replayed
    prior = [r for r in read_curve(curve_path) if r["step"] < start] if start and curve_path.exists() else []
    log.info("training %d -> %d steps on %d samples", start, stop, len(samples))
    progress = max(1, tcfg.total_steps // 20)
    opt = opt or AdamState()
    new_rows: list[dict] = []

    def snapshot(step: int) -> None:
        write_curve(curve_path, prior + new_rows)
        save_checkpoint(ckpt_path, model, step=step, train_config=tcfg, optimizer=opt)

    def on_step(row):
        new_rows.append(row)
        if args.verbose and row["step"] % progress == 0:
            log.info("step %d total %.4f sg %.4f", row["step"], row["total"], row["set_guidance"])
        if args.checkpoint_every and (row["step"] + 1) % args.checkpoint_every == 0 and row["step"] + 1 < stop:
            snapshot(row["step"] + 1)

    try:
        res = train(model, samples, tcfg, start_step=start, optimizer=opt, on_step=on_step, stop_step=stop)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
    new_rows = res.curve
    snapshot(stop)
    rows = prior + new_rows
    phase = detect_phase(rows, len(rows))
    (out / "phase.json").write_text(json.dumps(phase.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", config, input_hashes,
                   [ckpt_path, curve_path, out / "phase.json"], time.perf_counter() - t0)
    print(f"trained steps {start}..{stop} in {res.seconds:.1f}s; phase cliff={phase.cliff}")
    return EXIT_OK


def _restore(path: str, spec: CorpusSpec):
    try:
        ck = load_checkpoint(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    cfg = ck.model_config
    if cfg.d_in != spec.d_in or cfg.frame_count != spec.T or cfg.max_queries < spec.k_max:
        raise DataError(
            f"checkpoint expects d_in={cfg.d_in}, T={cfg.frame_count}, K<={cfg.max_queries}; "
            f"corpus has d_in={spec.d_in}, T={spec.T}, K<={spec.k_max}")
    try:
        return restore_model(ck)
    except ConfigError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    samples, spec = _load_corpus(args.corpus)
    model = _restore(args.checkpoint, spec)
    rep = evaluate(model, samples)
    out = Path(args.out) if args.out else None
    print(rep.table(), end="")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_csv())
        write_manifest(out.parent, "eval", {"corpus_spec": spec.to_dict()},
                       [Path(args.checkpoint), Path(args.corpus)], [out], time.perf_counter() - t0)
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import render

    t0 = time.perf_counter()
    samples, spec = _load_corpus(args.corpus)
    model = _restore(args.checkpoint, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        paths = render(model, samples, args.sample_id, out)
    except KeyError as exc:
        raise DataError(f"unknown sample id {args.sample_id}") from exc
    write_manifest(out.parent, "render", {"sample_id": args.sample_id},
                   [Path(args.checkpoint), Path(args.corpus)], list(paths.values()), time.perf_counter() - t0)
    for p in paths.values():
        print(p)
    return EXIT_OK


def _curves_svg(rows: list[dict], phase) -> str:
    width, height, pad = 720, 300, 50
    n = len(rows)
    keys = (("set_guidance", "#d62728"), ("l1", "#1f77b4"), ("giou", "#2ca02c"))
    top = max(max(r[k] for r in rows) for k, _ in keys) or 1.0
    parts = [f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>']
    for k, color in keys:
        pts = " ".join(
            f"{pad + i / max(n - 1, 1) * (width - 2 * pad):.2f},{height - pad - r[k] / top * (height - 2 * pad):.2f}"
            for i, r in enumerate(rows))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1" class="{k}"/>')
    if phase.cliff:
        i = next((j for j, r in enumerate(rows) if r["step"] >= phase.sg_drop_step), 0)
        x = pad + i / max(n - 1, 1) * (width - 2 * pad)
        parts.append(f'<line x1="{x:.2f}" y1="{pad}" x2="{x:.2f}" y2="{height - pad}" stroke="#000" '
                     f'stroke-dasharray="4 3" class="cliff"/>')
    body = "\n".join(parts)
    return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n{body}\n</svg>\n'


def cmd_curves(args) -> int:
    path = Path(args.curves)
    if not path.exists():
        raise DataError(f"curve file not found: {path}")
    try:
        rows = read_curve(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed curve file ({exc})") from exc
    if not rows:
        raise DataError(f"{path} has no rows")
    phase = detect_phase(rows, len(rows))
    print(json.dumps(phase.to_dict(), sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(_curves_svg(rows, phase))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spanset", description="Set-prediction span grounding on synthetic corpora.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--spec", help="JSON corpus spec")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--first-id", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help='JSON with optional "model" and "train" objects')
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="halt (and checkpoint) at this step")
    t.add_argument("--checkpoint-every", type=int, help="checkpoint interval in steps")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--model-seed", type=int)
    t.add_argument("--lambda-l1", type=float)
    t.add_argument("--lambda-iou", type=float)
    t.add_argument("--lambda-sg", type=float)
    t.add_argument("--proposals-per-query", type=int)
    t.add_argument("--d-model", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="SVG of spans and attention for one sample")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--sample-id", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("curves", help="phase report (and optional SVG) from curves.csv")
    c.add_argument("curves")
    c.add_argument("--out")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
