"""Command-line entry point: ``maskadapt {generate,train,eval,ablate,render}``.

Every failure ends with one JSON line on stderr,
``{"error": <kind>, "message": <text>, "problems": [...]}``, and a nonzero exit
status (2 for configuration/usage problems, 1 otherwise).
"""
from __future__ import annotations

import os

# Thread caps must be in the environment before numpy loads its BLAS.
_THREADS = os.environ.get("MASKADAPT_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402

import numpy as np  # noqa: E402

from . import config as cfgmod  # noqa: E402
from . import pnm  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .config import ConfigError, RunConfig  # noqa: E402
from .depth_features import depth_gradient  # noqa: E402
from .evaluation import compare_runs, format_table, report_csv, table_csv  # noqa: E402
from .masking import GEOMETRIES, apply_mask, sample_mask  # noqa: E402
from .numerics import Tensor  # noqa: E402
from .synthdata import DatasetError, SpecError, benchmark_pair, generate, read_dataset, write_dataset  # noqa: E402
from . import uda  # noqa: E402

# background soil, crop, weed
PALETTE = np.array([[90, 60, 40], [40, 200, 60], [230, 50, 200]], dtype=np.uint8)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _threads() -> int:
    if not _THREADS:
        return 1
    try:
        n = int(_THREADS)
    except ValueError:
        raise UsageError(f"MASKADAPT_THREADS must be a positive integer, got {_THREADS!r}") from None
    if n < 1:
        raise UsageError(f"MASKADAPT_THREADS must be a positive integer, got {_THREADS!r}")
    return n


def _config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    return cfg.replace(**over) if over else cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    os.makedirs(out, exist_ok=True)
    return out


def _write(path: str, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        with open(path, mode) as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# -- subcommands -----------------------------------------------------------

def cmd_generate(args) -> dict:
    """Write source/, target/ and val/ datasets for the configured domain pair."""
    cfg = _config(args)
    out = _out_dir(args, cfg)
    src_spec, tgt_spec = benchmark_pair(cfg.benchmark)
    if cfg.source_spec:
        src_spec = type(src_spec).from_dict(cfg.source_spec)
    if cfg.target_spec:
        tgt_spec = type(tgt_spec).from_dict(cfg.target_spec)
    splits = {
        "source": (src_spec, cfg.n_source, cfg.data_seed),
        "target": (tgt_spec, cfg.n_target, cfg.data_seed),
        "val": (tgt_spec, cfg.n_val, cfg.data_seed + 1_000_003),
    }
    for name, (spec, n, seed) in splits.items():
        write_dataset(os.path.join(out, name), generate(spec, n, seed, cfg.image_size), spec)
    return {"command": "generate", "out": out, "counts": {k: v[1] for k, v in splits.items()}}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    cfg = cfg.replace(out_dir=out)
    log_path = os.path.join(out, "metrics.ndjson")
    if os.path.exists(log_path):
        os.remove(log_path)
    _write(os.path.join(out, "config.json"), json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    _, log = uda.run_training(cfg, log_path=log_path)
    final = log[-1] if log else {}
    return {"command": "train", "out": out, "iterations": cfg.iterations, "miou": final.get("miou"),
            "checkpoint": os.path.join(out, "checkpoint_final.npz")}


def _eval_data(args, cfg: RunConfig) -> uda.DomainData:
    if args.dataset:
        return uda.DomainData.from_samples(read_dataset(args.dataset))
    if cfg.val_path:
        return uda.DomainData.from_samples(read_dataset(cfg.val_path))
    return uda.load_data(cfg)[2]


def cmd_eval(args) -> dict:
    state = uda.load_checkpoint(args.checkpoint)
    cfg = state.cfg
    data = _eval_data(args, cfg)
    if data.rgb.shape[1] % 8 or data.rgb.shape[2] % 8:
        raise UsageError(f"dataset images {data.rgb.shape[1]}x{data.rgb.shape[2]} are not multiples of 8")
    report = uda.evaluate(state.student, data, cfg, state.fused())
    report = {"command": "eval", "checkpoint": args.checkpoint, "iteration": state.t, **report}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "eval.json"), json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def _ablation_run(job: tuple) -> dict:
    cfg_dict, name, seed, data = job
    cfg = cfgmod.variant(cfgmod.from_dict(cfg_dict).replace(seed=seed, out_dir=None), name)
    _, log = uda.run_training(cfg, data)
    return {"variant": name, "seed": seed, "evals": log}


def cmd_ablate(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    names = [v for v in args.variants.split(",") if v]
    unknown = [v for v in names if v not in cfgmod.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(cfgmod.VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not names or not seeds:
        raise UsageError("need at least one variant and one seed")
    data = uda.load_data(cfg)
    jobs = [(cfg.to_dict(), name, seed, data) for name in names for seed in seeds]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_ablation_run, jobs))
    else:
        logs = [_ablation_run(j) for j in jobs]
    rows = compare_runs(logs)
    with open(os.path.join(out, "runs.ndjson"), "w") as fh:
        for log in logs:
            fh.write(json.dumps(log, sort_keys=True) + "\n")
    _write(os.path.join(out, "report.csv"), report_csv(logs))
    _write(os.path.join(out, "table.csv"), table_csv(rows))
    table = format_table(rows)
    _write(os.path.join(out, "table.txt"), table + "\n")
    if not args.quiet:
        print(table, file=sys.stderr)
    return {"command": "ablate", "out": out, "rows": len(rows), "runs": len(logs)}


def _to8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _read_mask(path: str, h: int, w: int) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = pnm.decode(fh.read())
    if arr.shape != (h, w):
        raise UsageError(f"{path}: mask is {arr.shape}, images are {(h, w)}")
    return (arr > 0).astype(np.uint8)


def cmd_render(args) -> dict:
    """Write inputs, masked inputs, masks, depth-gradient maps and (optionally) predictions."""
    state = uda.load_checkpoint(args.checkpoint) if args.checkpoint else None
    cfg = state.cfg if state else _config(args)
    out = _out_dir(args, cfg)
    if args.dataset:
        samples = read_dataset(args.dataset)[: args.samples]
    else:
        samples = generate(benchmark_pair(cfg.benchmark)[1], args.samples, cfg.data_seed + 1_000_003, cfg.image_size)
    rng = uda.named_rng(cfg.seed, "render")
    written = []
    for i, s in enumerate(samples):
        h, w = s.labels.shape
        if args.mask_file:
            rgb_mask = _read_mask(args.mask_file, h, w)
        else:
            rgb_mask = sample_mask(h, w, args.geometry, args.ratio, args.block or cfg.block, rng).rgb_mask
        depth_mask = 1 - rgb_mask
        files = {
            "rgb.ppm": pnm.encode(_to8(s.rgb), 255),
            "rgb_masked.ppm": pnm.encode(_to8(apply_mask(s.rgb, rgb_mask)), 255),
            "mask.pgm": pnm.encode((rgb_mask * 255).astype(np.uint8), 255),
            "labels.ppm": pnm.encode(PALETTE[s.labels], 255),
        }
        d = s.depth[..., 0]
        span = max(float(d.max() - d.min()), 1e-9)
        files["depth.pgm"] = pnm.encode(_to8((d - d.min()) / span), 255)
        dm = apply_mask(s.depth, depth_mask)[..., 0]
        files["depth_masked.pgm"] = pnm.encode(_to8((dm - d.min()) / span), 255)
        g = depth_gradient(Tensor(s.depth.astype(np.float64))).data[..., 0]
        files["depth_grad.pgm"] = pnm.encode(_to8(g / max(float(g.max()), 1e-12)), 255)
        if state is not None:
            pred = uda.predict(state.student, uda.DomainData(s.rgb[None], s.depth[None], None), cfg,
                               state.fused())[0]
            files["pred.ppm"] = pnm.encode(PALETTE[pred], 255)
            blend = 0.6 * _to8(s.rgb).astype(np.float64) + 0.4 * PALETTE[pred]
            files["overlay.ppm"] = pnm.encode(np.rint(blend).astype(np.uint8), 255)
        for suffix, buf in files.items():
            path = os.path.join(out, f"{i:05d}_{suffix}")
            _write(path, buf)
            written.append(path)
    return {"command": "render", "out": out, "files": len(written)}


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (JSON document with a required \"version\" field):\n" + cfgmod.describe()
    parser = _Parser(prog="maskadapt", description="RGB-D unsupervised domain adaptation toolkit",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")

    kw = dict(epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sub.add_parser("generate", help="write synthetic source/target/val datasets", **kw))
    common(sub.add_parser("train", help="train and write checkpoints plus metrics.ndjson", **kw))
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", **kw)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (default: the checkpoint config's validation split)")
    p.add_argument("--out", help="directory for eval.json")
    p = sub.add_parser("ablate", help="train variants over seeds and tabulate final mIoU", **kw)
    common(p, seed=False)
    p.add_argument("--variants", default="no_fusion,fusion_no_grad,full",
                   help="comma-separated, from: " + ", ".join(cfgmod.VARIANTS))
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--quiet", action="store_true", help="do not print the table")
    p = sub.add_parser("render", help="write masks, inputs, depth gradients and predictions as PNM images", **kw)
    common(p)
    p.add_argument("--checkpoint", help="also render predictions from this checkpoint")
    p.add_argument("--dataset", help="dataset directory (default: generated target validation scenes)")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--geometry", choices=GEOMETRIES, default="stochastic")
    p.add_argument("--ratio", type=float, default=0.5, help="masking ratio for the RGB view")
    p.add_argument("--block", type=int, help="mask block size (default: config block)")
    p.add_argument("--mask-file", help="PGM visibility mask (nonzero = RGB visible) instead of sampling")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "render": cmd_render}


def _fail(kind: str, message: str, problems=None, code: int = 1) -> int:
    print(json.dumps({"error": kind, "message": message, "problems": problems or []}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), code=2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads()
        result = COMMANDS[args.command](args)
    except (ConfigError, SpecError) as exc:
        return _fail(type(exc).__name__, str(exc), getattr(exc, "problems", None), code=2)
    except UsageError as exc:
        return _fail("UsageError", str(exc), code=2)
    except (DatasetError, CheckpointError, pnm.PNMError, uda.ContractError) as exc:
        return _fail(type(exc).__name__, str(exc))
    except uda.TrainingDiverged as exc:
        return _fail("TrainingDiverged", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
