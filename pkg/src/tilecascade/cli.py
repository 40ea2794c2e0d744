"""Command line for tilecascade: generate, superres, ablate, metrics, ingest, synth.

Every command takes ``--config FILE`` (JSON) and any number of
``--set key.path=value`` overrides, validates the result, and writes
``resolved_config.json`` and ``run.log`` into its output directory before
doing any work. Exit codes: 0 success, 2 configuration error, 3 runtime
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .cascade import CascadeConfig, Region, StageConfig, ablate_direct, generate_world, low_frequency_power, superres_stage
from .codec import DecodeTiling, tiled_decode, to_uint8
from .config import (
    AblateConfig,
    ConfigError,
    GenerateConfig,
    IngestConfig,
    MetricsConfig,
    SuperresConfig,
    SynthConfig,
    build_cascade,
    build_codec,
    build_denoiser,
    build_sampler,
    build_stage,
    dump,
    load_document,
    validate,
)
from .compose import DEFAULT_LAMBDA_NEG
from .metrics import FeatureStats, RandomProjectionExtractor, eval_split, extract, frechet_distance, kid, seam_energy
from .pyramid import PyramidMap, _atomic_write_bytes, encode_png
from .tiling import STRATEGIES, build_layout, rng_noise, run_strategy, stationary_tile_predictor, strategy_layout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

log = logging.getLogger("tilecascade")


# ---------------------------------------------------------------------------
# helpers


def _prepare(args, model, extra: dict | None = None):
    """Validate config (file + ``--set`` + flags), create the output dir, write resolved config, start logging."""
    doc = load_document(args.config, args.set or ())
    for k, v in (extra or {}).items():
        if v is not None:
            doc[k] = v
    cfg = validate(model, doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(out / "resolved_config.json", (dump(cfg) + "\n").encode())
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("tilecascade").addHandler(handler)
    log.info("tilecascade %s: %s", __version__, " ".join(sys.argv[1:]) or args.command)
    return cfg, out


def _write_png(path: Path, image: np.ndarray) -> None:
    _atomic_write_bytes(path, encode_png(np.ascontiguousarray(image)))


def _write_json(path: Path, doc) -> None:
    _atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def high_frequency_power(image: np.ndarray, cutoff: float = 0.25) -> float:
    return 1.0 - low_frequency_power(image, cutoff)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg, out = _prepare(args, GenerateConfig, {"threads": args.threads})
    casc, region = build_cascade(cfg)
    store = PyramidMap(out / "tiles", casc.tile_size)
    world = generate_world(region, casc, store)
    summary = {
        "zooms": casc.zooms,
        "layers": {str(z): list(world.layers[z].shape) for z in casc.zooms},
        "stable_tiles": {str(z): len(world.stable_tiles(z)) for z in casc.zooms},
    }
    _write_json(out / "summary.json", summary)
    log.info("wrote %d zoom levels to %s", len(casc.zooms), out / "tiles")
    return EXIT_OK


def cmd_superres(args) -> int:
    cfg, out = _prepare(args, SuperresConfig, {"threads": args.threads})
    low = _read_png(Path(args.input))
    ts = cfg.tile_size
    if low.shape[0] % ts or low.shape[1] % ts:
        raise ConfigError(f"input {low.shape[1]}x{low.shape[0]} is not a multiple of tile_size {ts}")
    codec = build_codec(cfg.codec)
    sampler = build_sampler(cfg.sampler)
    stage = build_stage(cfg.stage, codec, sampler, cfg.negative_prompt, DEFAULT_LAMBDA_NEG.get(cfg.stage.name, 0.0))
    try:
        casc = CascadeConfig(
            base_zoom=cfg.zoom, base=stage, stages=(), codec=codec, seed=cfg.seed, tile_size=ts,
            chunk=cfg.chunk.size, halo=cfg.chunk.halo, budget=cfg.chunk.budget, std_fraction=cfg.std_fraction,
            decode=DecodeTiling(cfg.decode.window, cfg.decode.overlap), threads=cfg.threads,
        )
        region = Region(cfg.zoom, cfg.x0, cfg.y0, low.shape[1] // ts, low.shape[0] // ts)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    high = superres_stage(low, stage, casc, region)
    _write_png(out / "superres.png", high)
    log.info("superres %s -> %s", low.shape[:2], high.shape[:2])
    return EXIT_OK


def _ablate_tiling(cfg: AblateConfig, out: Path) -> None:
    codec = build_codec(cfg.codec)
    sampler = build_sampler(cfg.sampler)
    den = build_denoiser(cfg.denoiser, codec, sampler)
    predict = stationary_tile_predictor(den)
    layout = build_layout(cfg.canvas, cfg.tile, cfg.stride)
    z_T = np.random.default_rng([cfg.seed, 0]).standard_normal((cfg.canvas, cfg.canvas, codec.channels))
    rows = []
    for strategy in STRATEGIES:
        noise = rng_noise(np.random.default_rng([cfg.seed, 1])) if sampler.stochastic else None
        z = run_strategy(strategy, predict, z_T, sampler, layout, cfg.std_fraction, noise, cfg.threads, cfg.seed)
        rep = seam_energy(z, strategy_layout(strategy, layout))
        rows.append({"strategy": strategy, **rep.as_dict()})
        np.save(out / f"{strategy}_latent.npy", z)
        _write_png(out / f"{strategy}.png", to_uint8(tiled_decode(codec, z)))
        log.info("%s: seam ratio %.4f", strategy, rep.ratio)
    with open(out / "seams.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["strategy", "boundary", "interior", "ratio"])
        w.writeheader()
        w.writerows(rows)


def _ablate_direct(cfg: AblateConfig, out: Path) -> None:
    if cfg.cascade is None:
        raise ConfigError("cascade: required for --mode direct")
    gen = cfg.cascade
    casc, region = build_cascade(gen)
    direct_cfg = cfg.direct or gen.base.denoiser
    sampler = build_sampler(gen.sampler)
    direct_den = build_denoiser(direct_cfg, casc.codec, sampler)
    direct = StageConfig("direct", direct_den, 0.0, gen.negative_prompt, sampler, gen.base.tile, gen.base.stride)
    res = ablate_direct(region, casc, direct)
    _write_png(out / "cascaded.png", res["cascaded"])
    _write_png(out / "direct.png", res["direct"])
    _write_png(out / "base.png", res["base"])
    report = dict(res["report"])

    # negative-guidance sweep: the same cascade with every lambda set to 0
    zero = gen.model_copy(deep=True)
    for s in zero.stages:
        s.lambda_neg = 0.0
    casc0, _ = build_cascade(zero)
    unguided = generate_world(region, casc0).layers[casc0.final_zoom]
    _write_png(out / "lambda_0.png", unguided)
    _write_png(out / "lambda_default.png", res["cascaded"])
    report["negative_sweep"] = {
        "lambda": {s.name: [0.0, st.lambda_neg] for s, st in zip(gen.stages, casc.stages)},
        "high_freq_power_lambda_0": high_frequency_power(unguided),
        "high_freq_power_lambda_default": high_frequency_power(res["cascaded"]),
    }
    _write_json(out / "direct_report.json", report)
    log.info("direct ablation: %s", json.dumps(report, sort_keys=True))


def cmd_ablate(args) -> int:
    if args.mode not in ("tiling", "direct"):
        raise ConfigError(f"unknown mode {args.mode!r}")
    cfg, out = _prepare(args, AblateConfig, {"threads": args.threads})
    if args.mode == "tiling":
        _ablate_tiling(cfg, out)
    else:
        _ablate_direct(cfg, out)
    return EXIT_OK


def _load_images(directory: Path) -> list[np.ndarray]:
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    images = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        img = _read_png(p)
        if img.shape[:2] == (2048, 2048):
            images.extend(eval_split(img))
        else:
            images.append(img)
    return images


def cmd_metrics(args) -> int:
    cfg, out = _prepare(args, MetricsConfig)
    a = _load_images(Path(args.dir_a))
    b = _load_images(Path(args.dir_b))
    n = min(len(a), len(b))
    if n < 2:
        raise RuntimeError(f"need at least 2 images per side, got {len(a)} and {len(b)}")
    extractor = RandomProjectionExtractor(cfg.seed, cfg.dim, cfg.size)
    fa, fb = extract(a, extractor), extract(b, extractor)
    fid = frechet_distance(FeatureStats.from_features(fa), FeatureStats.from_features(fb))
    report = {
        "n_a": len(a),
        "n_b": len(b),
        "fid": fid,
        "kid_mean": None,
        "kid_stderr": None,
        "subset_size": cfg.subset_size,
        "n_subsets": cfg.n_subsets,
        "extractor": extractor.describe(),
    }
    need = 2 * cfg.subset_size if np.array_equal(fa, fb) else cfg.subset_size
    if n >= need:
        k = kid(fa, fb, cfg.subset_size, cfg.n_subsets, cfg.seed)
        report["kid_mean"], report["kid_stderr"] = k.mean, k.stderr
    else:
        report["kid_skipped"] = f"fewer than {need} images per side (subset_size={cfg.subset_size})"
        log.warning("KID skipped: %s", report["kid_skipped"])
    _write_json(out / "metrics.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .ingest import MockTileServer, TileClient, TileServerSpec, build_dataset
    from .ingest.client import sample_locations

    overrides = {"threads": args.threads, "url": args.url}
    if args.mock:
        overrides["mock"] = True
    cfg, out = _prepare(args, IngestConfig, overrides)
    locations = [tuple(l) for l in cfg.locations]
    if cfg.n_random:
        locations += sample_locations(cfg.n_random, np.random.default_rng([cfg.seed, 0]))
    store = PyramidMap(out / "tiles", cfg.tile_size)
    server = None
    try:
        if cfg.mock:
            server = MockTileServer(cfg.mock_max_zoom, cfg.tile_size).start()
            url = server.zxy_template
        else:
            url = cfg.url
        spec = TileServerSpec.from_env(url, rate=cfg.rate, retries=cfg.retries, backoff=cfg.backoff,
                                       tile_size=cfg.tile_size)
        doc = build_dataset(TileClient(spec), locations, store, tuple(cfg.zooms), cfg.stack_side, cfg.urban,
                            cfg.seed, cfg.threads)
    finally:
        if server is not None:
            server.stop()
    classes = [e["class"] for e in doc["stacks"]]
    log.info("ingested %d locations: %s", len(classes), {c: classes.count(c) for c in sorted(set(classes))})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .ingest.synth import synth_pyramid

    cfg, out = _prepare(args, SynthConfig)
    index = []
    for i in range(cfg.count):
        seed = cfg.seed + i
        stack = synth_pyramid(seed, cfg.zooms, cfg.stack_side, cfg.detail, cfg.decay)
        d = out / f"stack{i:05d}"
        for z, img in stack.items():
            _write_png(d / f"{z}.png", img)
        index.append({"seed": seed, "dir": d.name, "zooms": sorted(stack)})
    _write_json(out / "synth.json", {"stacks": index})
    log.info("wrote %d synthetic stacks", cfg.count)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "superres": cmd_superres,
    "ablate": cmd_ablate,
    "metrics": cmd_metrics,
    "ingest": cmd_ingest,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value; dotted keys, JSON values (repeatable)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    threaded = argparse.ArgumentParser(add_help=False)
    threaded.add_argument("--threads", type=int, help="cap on worker threads; never changes outputs")

    p = argparse.ArgumentParser(prog="tilecascade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common, threaded], help="generate a multi-zoom world into a tile pyramid")
    sp = sub.add_parser("superres", parents=[common, threaded], help="apply one x4 stage to an image")
    sp.add_argument("--input", required=True, help="low-res PNG")
    ap = sub.add_parser("ablate", parents=[common, threaded], help="tiling strategies or cascaded-vs-direct")
    ap.add_argument("--mode", required=True, help="tiling or direct")
    mp = sub.add_parser("metrics", parents=[common], help="FID/KID-form metrics between two image folders")
    mp.add_argument("dir_a")
    mp.add_argument("dir_b")
    ip = sub.add_parser("ingest", parents=[common, threaded], help="fetch concentric stacks from a tile server")
    src = ip.add_mutually_exclusive_group()
    src.add_argument("--url", help="tile URL template with {z}/{x}/{y} or {quadkey} (and optional {key})")
    src.add_argument("--mock", action="store_true", help="serve tiles from the bundled mock server")
    sub.add_parser("synth", parents=[common], help="write procedural concentric stacks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    pkg_log = logging.getLogger("tilecascade")
    pkg_log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    before = list(pkg_log.handlers)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        log.error("I/O error: %s", e, exc_info=args.verbose)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001
        log.error("run failed: %s", e, exc_info=args.verbose)
        return EXIT_RUNTIME
    finally:
        for h in pkg_log.handlers[len(before):]:
            h.close()
            pkg_log.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
