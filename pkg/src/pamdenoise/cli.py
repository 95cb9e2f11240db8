"""Command-line front end: phantom, synth, train, denoise, eval, gradcheck, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, noise
from . import io as pio
from . import metrics, selfcheck, trainer
from .model import Generator, infer, parse_scale

log = logging.getLogger("pamdenoise")

RUN_MANIFEST = "run_manifest.json"
DATASET_MANIFEST = "dataset.json"
TILE_MULTIPLE = 16
DEFAULT_OVERLAP = 16


class CliError(Exception):
    """Reported as a one-line message with exit code 2."""


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("PAMDENOISE_THREADS", "1")))
    except ValueError:
        return 1


def _sub_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _write_run_manifest(out: Path, command: str, args: argparse.Namespace, seeds: dict, artifacts, **extra) -> None:
    rel = sorted(Path(os.path.relpath(a, out)).as_posix() for a in artifacts)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    pio.dump_json(out / RUN_MANIFEST, pio.run_manifest(command, config, seeds, rel, **extra))


# ---------------------------------------------------------------- phantom


def cmd_phantom(args) -> int:
    h, w = args.size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, seeds = [], []
    for i in range(args.count):
        for attempt in range(100):
            seed = _sub_seed(args.seed, i, attempt)
            try:
                img = noise.gen_phantom(noise.PhantomSpec(args.kind, (h, w), seed=seed))
                break
            except noise.PhantomError as exc:
                if "below minimum" in str(exc) or "unknown" in str(exc):
                    raise CliError(str(exc)) from exc
        else:
            raise CliError(f"could not draw a non-empty phantom for index {i}")
        path = out / f"phantom_{i:04d}.pgm"
        pio.write_pgm(path, img)
        written.append(path)
        seeds.append(seed)
    _write_run_manifest(out, "phantom", args, {"seed": args.seed, "per_image": seeds}, written)
    print(f"wrote {len(written)} phantoms to {out}")
    return 0


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    clean_dir = Path(args.clean_dir)
    files = sorted(clean_dir.glob("*.pgm")) if clean_dir.is_dir() else []
    if not files:
        raise CliError(f"no .pgm images in {clean_dir}")
    levels = [noise.Level(v.strip()) for v in args.levels.split(",") if v.strip()]
    if not levels:
        raise CliError("--levels is empty")
    if args.pairs_per_image < 1:
        raise CliError("--pairs-per-image must be >= 1")
    out = Path(args.out)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(exist_ok=True)

    jobs = []
    for i, f in enumerate(files):
        for li, lv in enumerate(levels):
            for k in range(args.pairs_per_image):
                jobs.append((i, f, lv, k, _sub_seed(args.seed, i, li, k)))
    cleans = [pio.read_pgm(f) for f in files]

    def work(job):
        i, _, lv, _, seed = job
        spec = noise.NoiseSpec(level=lv) if args.zero_noise else noise.sample_noise_spec(lv, seed)
        raw, _ = noise.make_pair(cleans[i], spec, seed, args.depth, args.pulse_sigma, clip=False)
        return spec, raw

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(work, jobs))  # map keeps job order
    scale = noise.dataset_scale([r for _, r in results]) if args.renormalize else 1.0

    artifacts, rows = [], []
    for i, f in enumerate(files):
        dst = out / "clean" / f.name
        pio.write_pgm(dst, cleans[i])
        artifacts.append(dst)
    for (i, f, lv, k, seed), (spec, raw) in zip(jobs, results):
        dst = out / "noisy" / f"{f.stem}_{lv.value}_{k:02d}.pgm"
        pio.write_pgm(dst, noise.map_project(raw[..., None], scale, clip=True))
        artifacts.append(dst)
        rows.append({
            "clean_path": f"clean/{f.name}",
            "noisy_path": f"noisy/{dst.name}",
            "level": lv.value,
            "seed": seed,
            "noise": spec.to_dict(),
        })
    pio.dump_json(out / DATASET_MANIFEST, rows)
    artifacts.append(out / DATASET_MANIFEST)
    _write_run_manifest(out, "synth", args, {"seed": args.seed}, artifacts, renormalization_divisor=scale,
                        renormalization=f"dataset max(1, p{noise.RENORM_PERCENTILE})" if args.renormalize else "none")
    print(f"wrote {len(rows)} pairs to {out / DATASET_MANIFEST} (renormalization divisor {scale:.6g})")
    return 0


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = trainer.TrainConfig(
        data=args.data, out=args.out, total_steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed,
        scale=str(parse_scale(args.scale)), checkpoint_interval=args.checkpoint_interval,
        d_steps_per_g_step=args.d_steps, perceptual_seed=args.perceptual_seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    res = trainer.train(cfg, resume=args.resume)
    out = Path(args.out)
    ck_manifest = trainer.read_checkpoint_manifest(res["checkpoint"])
    artifacts = [out / "train_log.jsonl"] + sorted(p for p in out.rglob("*.tns"))
    _write_run_manifest(out, "train", args, {"seed": args.seed, **trainer.derive_seeds(args.seed)}, artifacts,
                        train_config=cfg.to_dict(), perceptual=ck_manifest.get("perceptual"))
    last = res["records"][-1] if res["records"] else {}
    print(f"trained {cfg.total_steps} steps; final checkpoint {res['checkpoint']}; last record {json.dumps(last)}")
    return 0


# ---------------------------------------------------------------- denoise


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _pad_reflect(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = h - img.shape[0], w - img.shape[1]
    # symmetric handles pads larger than the image, where reflect cannot
    mode = "reflect" if ph < img.shape[0] and pw < img.shape[1] else "symmetric"
    return np.pad(img, ((0, ph), (0, pw)), mode=mode)


def _starts(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    stride = tile - overlap
    s = list(range(0, length - tile, stride))
    s.append(length - tile)
    return s


def _feather(n: int, overlap: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    ramp = np.minimum((i + 0.5) / overlap, (n - i - 0.5) / overlap)
    return np.clip(ramp, 0.0, 1.0)


def denoise_image(g: Generator, img: np.ndarray, tile: int = 256, overlap: int = DEFAULT_OVERLAP,
                  batch: int = 4) -> np.ndarray:
    """Reflection-pad to a multiple of 16, run in feather-blended overlapping tiles, crop back.

    ``tile`` <= 0 runs the whole padded image in one pass.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ph, pw = _ceil_to(h, TILE_MULTIPLE), _ceil_to(w, TILE_MULTIPLE)
    padded = _pad_reflect(img, ph, pw)
    if tile <= 0 or (ph <= tile and pw <= tile):
        return infer(g, padded)[0][:h, :w]
    if tile % TILE_MULTIPLE or tile <= overlap:
        raise CliError(f"tile {tile} must be a multiple of {TILE_MULTIPLE} and larger than the overlap {overlap}")
    th, tw = min(tile, ph), min(tile, pw)
    boxes = [(y, x) for y in _starts(ph, th, overlap) for x in _starts(pw, tw, overlap)]
    weight = np.outer(_feather(th, overlap), _feather(tw, overlap))
    acc = np.zeros((ph, pw))
    wsum = np.zeros((ph, pw))
    for b in range(0, len(boxes), batch):
        chunk = boxes[b : b + batch]
        preds = infer(g, np.stack([padded[y : y + th, x : x + tw] for y, x in chunk]))
        for (y, x), p in zip(chunk, preds):
            acc[y : y + th, x : x + tw] += weight * p
            wsum[y : y + th, x : x + tw] += weight
    return (acc / wsum)[:h, :w]


def _normalizer(img: np.ndarray, mode: str) -> float:
    if mode == "none":
        return 1.0
    p = float(np.percentile(img, noise.RENORM_PERCENTILE))
    return p if p > 0 else 1.0


def cmd_denoise(args) -> int:
    ck_path = Path(args.checkpoint)
    if not (ck_path / "manifest.json").is_file():
        raise CliError(f"checkpoint {ck_path} not found")
    ck = trainer.load_checkpoint(ck_path)
    src = Path(args.input)
    inputs = sorted(src.glob("*.pgm")) if src.is_dir() else [src]
    if not inputs or not all(p.is_file() for p in inputs):
        raise CliError(f"no input images at {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck_hash = pio.sha256_file(ck_path / "manifest.json")
    written, per_image = [], {}
    for p in inputs:
        img = pio.read_pgm(p)
        k = _normalizer(img, args.normalize)
        res = np.clip(denoise_image(ck.g, img / k, args.tile, args.overlap) * k, 0.0, 1.0)
        dst = out / p.name
        if dst.resolve() == p.resolve():
            raise CliError(f"refusing to overwrite input {p}")
        pio.write_pgm(dst, res)
        written.append(dst)
        per_image[p.name] = {"normalization_divisor": k, "shape": list(img.shape)}
    _write_run_manifest(out, "denoise", args, {"generator": ck.g.seed}, written,
                        checkpoint_sha256=ck_hash, checkpoint_step=ck.step, normalization=args.normalize,
                        images=per_image, perceptual=ck.manifest.get("perceptual"))
    print(f"denoised {len(written)} image(s) into {out}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if args.pred_dir and args.checkpoint:
        raise CliError("give --pred-dir or --checkpoint, not both")
    rows = pio.read_dataset_manifest(args.data)
    rois: metrics.RoiSource = None
    if args.rois == "auto":
        rois = "auto"
    elif args.rois:
        rois = metrics.RoiSet.load(args.rois)
    model = predictions = None
    extra: dict = {}
    if args.checkpoint:
        ck = trainer.load_checkpoint(args.checkpoint)
        model = lambda x: infer(ck.g, x)  # noqa: E731
        extra = {"checkpoint_sha256": pio.sha256_file(Path(args.checkpoint) / "manifest.json"),
                 "perceptual": ck.manifest.get("perceptual")}
    elif args.pred_dir:
        predictions = []
        for r in rows:
            p = Path(args.pred_dir) / Path(r["noisy_path"]).name
            if not p.is_file():
                raise CliError(f"prediction {p} missing")
            predictions.append(pio.read_pgm(p))
    try:
        report = metrics.evaluate(rows, model=model, rois=rois, group_by_level=args.group_by_level,
                                  predictions=predictions)
    except metrics.UsageError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    _write_run_manifest(out, "eval", args, {}, [out / "report.json", out / "report.txt"], **extra)
    print(table)
    return 0


# ---------------------------------------------------------------- gradcheck / bench


def cmd_gradcheck(args) -> int:
    results = selfcheck.run(args.scale, args.size, args.seed)
    worst = 0.0
    for name, err in results:
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{name:22s} {err:.3e}  {flag}")
        worst = max(worst, err)
    failed = [n for n, e in results if not e < args.tol]
    print(f"max relative error {worst:.3e} over {len(results)} checks; {len(failed)} above {args.tol:g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pio.dump_json(out / "gradcheck.json", {n: e for n, e in results})
        _write_run_manifest(out, "gradcheck", args, {"seed": args.seed}, [out / "gradcheck.json"])
    return 1 if failed else 0


def bench_timings(g: Generator, size: int, repeat: int, seed: int = 0) -> list[float]:
    x = np.random.default_rng(seed).uniform(0.0, 1.0, (size, size))
    infer(g, x)  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        infer(g, x)
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise CliError("--repeat must be >= 1")
    if args.checkpoint:
        g = trainer.load_checkpoint(args.checkpoint).g
        source = args.checkpoint
    else:
        g = Generator(args.seed, args.scale)
        source = f"fresh generator, scale {parse_scale(args.scale)}"
    times = bench_timings(g, args.size, args.repeat, args.seed)
    for i, t in enumerate(times):
        print(f"run {i}: {t:.4f} s")
    med = statistics.median(times)
    print(f"median {med:.4f} s  min {min(times):.4f} s  max {max(times):.4f} s  ({args.size}x{args.size}, {source})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pio.dump_json(out / "bench.json", {"times": times, "median": med, "size": args.size})
        _write_run_manifest(out, "bench", args, {"seed": args.seed}, [out / "bench.json"])
    return 0


# ---------------------------------------------------------------- parser


def _size(s: str) -> int:
    return int(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pamdenoise", description="Synthetic PAM denoising: data, training, inference, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file supplying any option; command-line values win")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate clean vessel phantoms")
    s.add_argument("--kind", default="veins", choices=sorted(noise.KIND_WANDER))
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--size", type=_size, nargs=2, default=[64, 64], metavar=("H", "W"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="phantoms")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("synth", parents=[common], help="make noisy/clean training pairs")
    s.add_argument("--clean-dir", default="phantoms")
    s.add_argument("--levels", default="low,mid,high")
    s.add_argument("--pairs-per-image", type=int, default=1)
    s.add_argument("--depth", type=int, default=noise.DEFAULT_DEPTH)
    s.add_argument("--pulse-sigma", type=float, default=noise.DEFAULT_PULSE_SIGMA)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zero-noise", action="store_true", help="debug: noise-free pairs")
    s.add_argument("--no-renormalize", dest="renormalize", action="store_false")
    s.add_argument("--workers", type=int, default=default_workers())
    s.add_argument("--out", default="dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="adversarial training")
    s.add_argument("--data", default="dataset/dataset.json")
    s.add_argument("--scale", default="1/8")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint-interval", type=int, default=500)
    s.add_argument("--d-steps", type=int, default=1, help="discriminator updates per generator update")
    s.add_argument("--perceptual-seed", type=int, default=1234)
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--out", default="run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", parents=[common], help="denoise images of any size")
    s.add_argument("--checkpoint", required=False)
    s.add_argument("--in", dest="input", required=False)
    s.add_argument("--out", default="denoised")
    s.add_argument("--tile", type=int, default=256, help="tile size; 0 disables tiling")
    s.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    s.add_argument("--normalize", choices=("p99.9", "none"), default="p99.9")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/SNR/CNR report")
    s.add_argument("--data", default="dataset/dataset.json")
    s.add_argument("--pred-dir")
    s.add_argument("--checkpoint")
    s.add_argument("--rois", help="RoiSet JSON file, or 'auto'")
    s.add_argument("--group-by-level", action="store_true")
    s.add_argument("--out", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and both networks")
    s.add_argument("--scale", default="1/8")
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=selfcheck.TOLERANCE)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="time generator inference")
    s.add_argument("--checkpoint")
    s.add_argument("--scale", default="1/8")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list, ns: argparse.Namespace) -> argparse.Namespace:
    path = Path(ns.config)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config {path}: {exc}") from exc
    if isinstance(data, dict) and "command" in data and isinstance(data.get("config"), dict):
        data = data["config"]  # a run manifest replays its own configuration
    if not isinstance(data, dict):
        raise CliError(f"config {path}: expected a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[ns.command]
    known = {a.dest for a in subparser._actions}
    values = {}
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func", "config", "verbose"):
            continue
        if dest not in known:
            raise CliError(f"config {path}: unknown option {key!r} for {ns.command}")
        values[dest] = val
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def _check_required(ns: argparse.Namespace) -> None:
    if ns.command == "denoise":
        missing = [f for f, d in (("--checkpoint", "checkpoint"), ("--in", "input")) if not getattr(ns, d)]
        if missing:
            raise CliError(f"denoise needs {' and '.join(missing)}")
    if ns.command == "phantom" and min(ns.size) < 32:
        raise CliError(f"--size {ns.size[0]} {ns.size[1]}: minimum is 32 x 32")


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.config:
            ns = _apply_config(parser, argv, ns)
        _check_required(ns)
        return ns.func(ns)
    except CliError as exc:
        print(f"pamdenoise {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, trainer.CheckpointError, trainer.TrainingDiverged) as exc:
        print(f"pamdenoise {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
