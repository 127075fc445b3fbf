"""Operator entry point: batch subcommands over the discovery / rollout /
training pipeline, emitting CSV metrics, JSON-lines manifests and
trajectories, PPM images, and SVEC caches."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import cache as cache_io
from .errors import SieveError
from .grounding import DiscoveryParams, discover_evidence
from .metrics import (
    ablate_random_embeddings,
    answer_accuracy,
    k_sweep,
    layer_sweep,
    write_sweep_outputs,
)
from .model import Model, ModelConfig, build_model
from .rollout import SamplerParams, dump_trajectories, run_rollout
from .synth_data import generate_dataset, load_dataset, write_ppm
from .trainer import TrainConfig, populate_cache, train, write_metrics_csv

log = logging.getLogger("sieve")

_MODEL_KEYS = {
    "d_model": int, "n_layers": int, "n_heads": int, "patch_size": int,
    "image_side": int, "max_seq": int,
    "mid_layers": lambda s: tuple(int(x) for x in s.split(",")),
}
_TRAIN_KEYS = {
    "prompts_per_batch": int, "group_size": int, "steps": int,
    "learning_rate": float, "clip_eps": float, "kl_coeff": float,
    "momentum": float, "max_turns": int, "temperature": float,
    "per_turn_budget": int, "min_think": int,
    "act_enabled": lambda s: s.lower() in ("1", "true", "yes"),
    "warmup_steps": int, "warmup_lr": float, "refresh_period": int,
}
_DISCOVERY_KEYS = {
    "tau": float, "block_size": int, "k": int, "margin_blocks": int,
    "center": lambda s: s.lower() in ("1", "true", "yes"),
    "source_space": str, "threshold": float, "max_anchors": int,
}
VALID_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS, **_DISCOVERY_KEYS}


def parse_config_file(path) -> dict:
    """Flat key=value config; unknown keys are rejected with the valid set."""
    values = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SieveError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in VALID_KEYS:
            raise SieveError(
                f"{path}:{line_no}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(VALID_KEYS))
            )
        values[key] = VALID_KEYS[key](value)
    return values


def _split_config(values: dict, seed: int):
    model_kwargs = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    disc_kwargs = {k: v for k, v in values.items() if k in _DISCOVERY_KEYS}
    model_cfg = ModelConfig(seed=seed, **model_kwargs)
    train_cfg = TrainConfig(seed=seed, **train_kwargs)
    disc = DiscoveryParams(**disc_kwargs)
    return model_cfg, train_cfg, disc


def _echo_config(values: dict, seed: int, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"seed={seed}"] + [
        f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}"
        for k, v in sorted(values.items())
    ]
    tmp = out_dir / ".effective_config.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(out_dir / "effective_config.txt")


def save_weights(model: Model, path) -> None:
    """Deterministic container: one JSON header line, then raw float64."""
    names = sorted(model.params)
    header = {
        "version": model.version,
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    path = Path(path)
    tmp = path.with_name("." + path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    tmp.replace(path)


def load_weights(path, config: ModelConfig) -> Model:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            params[name] = np.frombuffer(
                fh.read(count * 8), dtype="<f8"
            ).reshape(shape).copy()
    model = Model(config, params)
    model.version = header["version"]
    return model


def draw_box(image: np.ndarray, bbox_pixels, color) -> None:
    """1-pixel stroke of a (row0, col0, row1, col1) half-open box."""
    r0, c0, r1, c1 = bbox_pixels
    h, w = image.shape[:2]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise SieveError(f"box {bbox_pixels} outside {h}x{w} image")
    image[r0, c0:c1] = color
    image[r1 - 1, c0:c1] = color
    image[r0:r1, c0] = color
    image[r0:r1, c1 - 1] = color


def visualize(sample, snapshots, out_path) -> None:
    """Green stroke on the matched bbox, red on the expanded region, plus a
    JSON sidecar of the coordinates."""
    image = sample.image.copy()
    boxes = []
    for snap in snapshots:
        draw_box(image, snap.region.bbox_pixels, (255, 0, 0))
        if snap.matched is not None:
            draw_box(image, snap.matched.bbox_pixels, (0, 255, 0))
        boxes.append(
            {
                "anchor": list(snap.anchor),
                "expanded_pixels": list(snap.region.bbox_pixels),
                "matched_pixels": (
                    list(snap.matched.bbox_pixels) if snap.matched else None
                ),
            }
        )
    out_path = Path(out_path)
    write_ppm(image, out_path)
    sidecar = out_path.with_name(out_path.name + ".json")
    tmp = sidecar.with_name("." + sidecar.name + ".tmp")
    tmp.write_text(json.dumps(boxes, indent=2))
    tmp.replace(sidecar)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sieve")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, required=True)
        p.add_argument("--threads", type=int, default=1)
        if data:
            p.add_argument("--data", type=str, required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--n", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", type=str, default=None)

    p = sub.add_parser("discover", help="run evidence discovery, save SVEC cache")
    common(p)
    p.add_argument("--n", type=int, default=0, help="limit samples (0 = all)")
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("rollout", help="run rollouts, dump trajectories")
    common(p)
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--max-turns", type=int, default=None)

    p = sub.add_parser("train", help="GRPO-lite training loop")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n", type=int, default=0)

    p = sub.add_parser("eval", help="greedy answer accuracy")
    common(p)
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--weights", type=str, default=None)
    p.add_argument("--max-turns", type=int, default=None)

    p = sub.add_parser("sweep-layers", help="per-layer mean IHR")
    common(p)
    p.add_argument("--layers", type=str, default=None, help="comma list")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--k", type=int, default=1)

    p = sub.add_parser("sweep-k", help="answer accuracy per top-k")
    common(p)
    p.add_argument("--k", type=str, default="1,2,3,4,5,6,7", help="comma list")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--weights", type=str, default=None)

    p = sub.add_parser("ablate-random", help="random-embedding insertion ablation")
    common(p)
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--weights", type=str, default=None)

    p = sub.add_parser("visualize", help="annotated evidence regions")
    common(p)
    p.add_argument("--sample-id", type=str, required=True)

    p = sub.add_parser("cache-dump", help="human-readable SVEC summary")
    p.add_argument("--cache", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--threads", type=int, default=1)
    return parser


def _load_inputs(args):
    values = parse_config_file(args.config) if args.config else {}
    model_cfg, train_cfg, disc = _split_config(values, args.seed)
    samples = load_dataset(args.data)
    limit = getattr(args, "n", 0)
    if limit:
        samples = samples[:limit]
    return values, model_cfg, train_cfg, disc, samples


def dispatch(argv) -> int:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}[
        os.environ.get("SIEVE_LOG", "error")
    ]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        return _run(args)
    except SieveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _run(args) -> int:
    out = Path(args.out) if args.out else None

    if args.command == "gen-data":
        values = parse_config_file(args.config) if args.config else {}
        _echo_config(values, args.seed, out)
        records = generate_dataset(
            args.n, args.seed, out, image_side=values.get("image_side", 64)
        )
        print(f"wrote {len(records)} samples to {out}")
        return 0

    if args.command == "cache-dump":
        sidecar = Path(args.cache + ".json")
        text = (
            sidecar.read_text()
            if sidecar.exists()
            else json.dumps(_summarize_cache(args.cache), indent=2)
        )
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)
        return 0

    values, model_cfg, train_cfg, disc, samples = _load_inputs(args)
    _echo_config(values, args.seed, out)
    model = build_model(model_cfg)
    weights = getattr(args, "weights", None)
    if weights:
        model = load_weights(weights, model_cfg)

    if args.command == "discover":
        if args.k is not None:
            disc = DiscoveryParams(**{**disc.__dict__, "k": args.k})
        cache = populate_cache(model, samples, disc)
        cache_io.save(cache, out / "evidence.svec")
        print(f"cached {len(cache)} entries")
        return 0

    if args.command == "rollout":
        cache = populate_cache(model, samples, disc)
        max_turns = args.max_turns or train_cfg.max_turns
        sampler = SamplerParams(
            temperature=train_cfg.temperature, seed=args.seed,
            per_turn_budget=train_cfg.per_turn_budget,
        )
        trajs = [
            run_rollout(model, s, cache, max_turns, sampler) for s in samples
        ]
        dump_trajectories(trajs, model, out / "trajectories.jsonl")
        print(f"rolled out {len(trajs)} trajectories")
        return 0

    if args.command == "train":
        if args.steps is not None:
            train_cfg = TrainConfig(**{**_public_fields(train_cfg), "steps": args.steps})
        model, metrics = train(model, samples, train_cfg, discovery=disc)
        write_metrics_csv(metrics, out / "metrics.csv")
        save_weights(model, out / "weights.bin")
        print(f"trained {train_cfg.steps} steps")
        return 0

    if args.command == "eval":
        cache = populate_cache(model, samples, disc)
        max_turns = args.max_turns or train_cfg.max_turns
        sampler = SamplerParams(
            temperature=0.0, seed=args.seed,
            per_turn_budget=train_cfg.per_turn_budget,
        )
        acc = answer_accuracy(model, samples, cache, max_turns, sampler)
        (out / "eval.json").write_text(json.dumps({"accuracy": acc}, indent=2))
        print(f"accuracy {acc:.4f}")
        return 0

    if args.command == "sweep-layers":
        layers = (
            [int(x) for x in args.layers.split(",")]
            if args.layers
            else list(range(1, model_cfg.n_layers + 1))
        )
        rows = layer_sweep(model, samples, layers, k=args.k, params=disc)
        write_sweep_outputs(rows, out, "layer_sweep")
        print(f"swept {len(rows)} layers")
        return 0

    if args.command == "sweep-k":
        k_values = [int(x) for x in args.k.split(",")]
        sampler = SamplerParams(
            temperature=0.0, seed=args.seed,
            per_turn_budget=train_cfg.per_turn_budget,
        )
        rows = k_sweep(
            model, samples, k_values, max_turns=train_cfg.max_turns,
            sampler=sampler, params=disc,
        )
        write_sweep_outputs(rows, out, "k_sweep")
        print(f"swept {len(rows)} k values")
        return 0

    if args.command == "ablate-random":
        sampler = SamplerParams(
            temperature=0.0, seed=args.seed,
            per_turn_budget=train_cfg.per_turn_budget,
        )
        row = ablate_random_embeddings(
            model, samples, args.seed, max_turns=train_cfg.max_turns,
            sampler=sampler, params=disc,
        )
        write_sweep_outputs([row], out, "ablate_random")
        print(
            f"discovered {row['discovered_accuracy']:.4f} "
            f"random {row['random_accuracy']:.4f}"
        )
        return 0

    if args.command == "visualize":
        matches = [s for s in samples if s.sample_id == args.sample_id]
        if not matches:
            raise SieveError(f"sample {args.sample_id!r} not in dataset")
        sample = matches[0]
        snapshots = discover_evidence(model, sample.image, sample.question, disc)
        visualize(sample, snapshots, out / f"{sample.sample_id}_evidence.ppm")
        print(f"wrote annotated image with {len(snapshots)} regions")
        return 0

    raise SieveError(f"unhandled command {args.command}")


def _public_fields(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclass_fields(cfg)}


def _summarize_cache(path) -> dict:
    loaded = cache_io.load(path)
    return {
        "entries": [
            {
                "sample_id": key,
                "model_version": e.model_version,
                "refresh_count": e.refresh_count,
                "snapshots": len(e.snapshots),
            }
            for key, e in ((k, loaded.lookup(k)) for k in loaded.sample_ids())
        ]
    }


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
