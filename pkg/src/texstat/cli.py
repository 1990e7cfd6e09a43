"""Command-line entry point: ``texstat synth|train|eval|predict|gradcheck|ksco-dump``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ModelConfig, TrainConfig, build_configs, bundled_config, format_value, load_config
from .data import DataError, SynthParams, load_dataset, load_image, save_pair, synth
from .nn_ops import ConfigurationError

logger = logging.getLogger("texstat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@contextlib.contextmanager
def thread_limit():
    """Honour ``TEXSTAT_THREADS`` for the BLAS pools numpy uses."""
    raw = os.environ.get("TEXSTAT_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TEXSTAT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("TEXSTAT_THREADS must be positive")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# configuration plumbing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_overrides(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (take precedence over --config)")
    seen = set()
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="VALUE", default=None)


def collect_overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def resolve_config(source: str | None, overrides: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """``source`` is a file path or the name of a bundled config (``desk``, ``large``)."""
    source = source or "desk"
    if Path(source).is_file():
        model, train = load_config(source, overrides)
    elif source in ("desk", "large"):
        model, train = bundled_config(source)
        model, train = build_configs(overrides, model, train)
    else:
        raise UsageError(f"config {source!r} is neither a file nor a bundled name (desk, large)")
    return model.validate(), train.validate()


def manifest(model: ModelConfig, train: TrainConfig, artifacts: dict[str, str], **extra) -> dict:
    def plain(cfg):
        return {k: format_value(v) for k, v in dataclasses.asdict(cfg).items()}

    return {
        "tool": "texstat",
        "version": tool_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "model_config": plain(model),
        "train_config": plain(train),
        "seed": train.seed,
        "artifacts": artifacts,
        **extra,
    }


def manifest_overrides(path: str | Path) -> dict[str, str]:
    """Config key=value pairs recorded in a manifest, for exact reruns."""
    data = json.loads(Path(path).read_text())
    pairs = dict(data["model_config"])
    pairs.update(data["train_config"])
    return pairs


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    params = SynthParams(count=args.count, size=args.size, tail_weight=args.tail_weight, seed=args.seed,
                         roughness=args.roughness, contrast=args.contrast)
    if params.count < 1:
        raise UsageError("--count must be positive")
    if not 0.0 <= params.tail_weight <= 1.0:
        raise UsageError("--tail-weight must lie in [0, 1]")
    model, _ = resolve_config(args.config, {})
    dataclasses.replace(model, input_size=(args.size, args.size)).validate()
    out = Path(args.out)
    try:
        for sample in synth(params):
            save_pair(sample, out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {params.count} pairs of {args.size}x{args.size} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import build, save_checkpoint
    from .plotting import plot_loss_trace
    from .training import train

    overrides = manifest_overrides(args.manifest) if args.manifest else {}
    overrides.update(collect_overrides(args))
    model_cfg, train_cfg = resolve_config(args.config, overrides)
    out = Path(args.out)
    train_cfg = dataclasses.replace(train_cfg, checkpoint_dir=str(out))
    dataset = load_dataset(args.data, model_cfg.input_size)
    val = load_dataset(args.val, model_cfg.input_size) if args.val else None
    artifacts = {name: str(out / name) for name in
                 ("manifest.json", "best.ckpt", "final.ckpt", "trace.csv", "loss_curve.png")}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(
            manifest(model_cfg, train_cfg, artifacts, data=str(args.data), val=args.val, dtype=args.dtype),
            indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc

    model = build(model_cfg, dtype=_dtype(args.dtype))
    logger.info("training %d parameters on %d samples", model.num_parameters(), len(dataset))
    result = train(model, dataset, train_cfg, val=val, eval_every=args.eval_every)
    (out / "trace.csv").write_text(result.trace_csv())
    plot_loss_trace(result.trace, out / "loss_curve.png")
    if result.best_epoch < 0:
        save_checkpoint(model, out / "best.ckpt", {"epoch": str(train_cfg.epochs - 1)})
    print(f"best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch}; outputs in {out}")
    return EXIT_OK


def _load_ckpt(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    from .metrics import evaluate_logits
    from .plotting import plot_eval_report
    from .training import predict_logits

    model = _load_ckpt(args.checkpoint)
    samples = load_dataset(args.data, model.config.input_size)
    logits = predict_logits(model, [s.image for s in samples])
    report = evaluate_logits(logits, [s.mask for s in samples], [s.id for s in samples],
                             level=args.threshold, geometric_ge=args.geometric_ge)
    text = report.to_csv()
    sys.stdout.write(text)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    plot_eval_report(report, out.with_suffix(".png"))
    return EXIT_OK


def _resize_prob(prob: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if prob.shape == (h, w):
        return prob
    img = Image.fromarray(prob.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def mask_path_for(out: Path) -> Path:
    return out.with_name(out.stem + "_mask.png")


def cmd_predict(args) -> int:
    from .training import predict_logits

    model = _load_ckpt(args.checkpoint)
    path = Path(args.image)
    if not path.is_file():
        raise DataError(f"image {path} does not exist")
    original = load_image(path, None).shape[-2:]
    image = load_image(path, model.config.input_size)
    logits = predict_logits(model, [image])[0][0].astype(np.float64)
    prob = _resize_prob(1.0 / (1.0 + np.exp(-logits)), original)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(prob * 255).astype(np.uint8), "L").save(out)
        Image.fromarray((prob >= args.threshold).astype(np.uint8) * 255, "L").save(mask_path_for(out))
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {out} and {mask_path_for(out)} ({original[0]}x{original[1]})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    start = time.perf_counter()
    results = run_suite(args.module, tol=args.tol, eps=args.eps, seed=args.seed,
                        include_negative=args.negative_control)
    print(format_table(results))
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} cases ok in {time.perf_counter() - start:.1f}s")
    if args.out:
        lines = ["module,operation,max_rel_error,coords,passed,expect_fail,seconds"]
        lines += [f"{r.module},{r.name},{r.report.max_rel_error:.6e},{r.report.n_coords},"
                  f"{str(r.report.passed).lower()},{str(r.expect_fail).lower()},{r.seconds:.3f}" for r in results]
        Path(args.out).write_text("\n".join(lines) + "\n")
    if failed:
        raise NumericalFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_ksco_dump(args) -> int:
    """Bottleneck KSCO levels and embedding for one image under a checkpoint."""
    from .plotting import plot_embedding
    from .tensor import Tensor, no_grad

    model = _load_ckpt(args.checkpoint)
    op = model.stft.ksco if "stft" in vars(model) else model.stet.q_ksco if "stet" in vars(model) else None
    if op is None:
        raise UsageError("checkpoint has neither STFT nor STET, so there is no KSCO to dump")
    image = load_image(Path(args.image), model.config.input_size)
    with no_grad():
        _, bottleneck = model.encoder(Tensor(image[None].astype(model.dtype)))
        emb = op(bottleneck)
    s = emb.s.data[0]
    levels = emb.levels.levels[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# kurtosis={emb.stats.kurtosis[0]:.9g} lo={emb.levels.lo[0]:.9g} hi={emb.levels.hi[0]:.9g}",
             "level,w,active_pixels,s_sum"]
    lines += [f"{n + 1},{levels[n]:.9g},{int((s[n] > 0).sum())},{s[n].sum():.9g}" for n in range(len(levels))]
    (out / "ksco_levels.csv").write_text("\n".join(lines) + "\n")
    plot_embedding(s, levels, out / "ksco_embedding.png")
    print(f"wrote {out / 'ksco_levels.csv'} and {out / 'ksco_embedding.png'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="texstat", description="Texture-statistics lesion segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tail-weight", type=float, default=0.8, help="share of heavy-tailed noise in lesions")
    s.add_argument("--roughness", type=float, default=0.15)
    s.add_argument("--contrast", type=float, default=0.25)
    s.add_argument("--config", default=None, help="config whose size rules --size must satisfy (default desk)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write checkpoints, trace and manifest")
    t.add_argument("--data", required=True, help="directory with images/ and masks/")
    t.add_argument("--val", default=None, help="validation directory (default: training set)")
    t.add_argument("--config", default=None, help="key=value file or bundled name: desk (default), large")
    t.add_argument("--manifest", default=None, help="rerun with the configuration recorded in a manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--eval-every", type=int, default=1)
    add_config_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None, help="CSV path (default: eval.csv beside the checkpoint)")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--geometric-ge", action="store_true", help="GE as the geometric mean")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="probability map and binary mask for one image")
    r.add_argument("--image", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="probability PNG; the mask goes to <stem>_mask.png")
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", default="all",
                   choices=("all", "core", "ksco", "attention", "stft", "stet", "loss", "model"))
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--negative-control", action="store_true", help="add a deliberately wrong gradient rule")
    g.add_argument("--out", default=None, help="also write the table as CSV")
    g.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("ksco-dump", help="dump bottleneck KSCO levels and embedding for one image")
    k.add_argument("--image", required=True)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", required=True, help="output directory")
    k.set_defaults(func=cmd_ksco_dump)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import DivergenceError

    try:
        with thread_limit():
            return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"texstat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"texstat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, DivergenceError, FloatingPointError) as exc:
        print(f"texstat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
