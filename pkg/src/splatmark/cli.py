"""Command-line workflow: synth -> fgd -> embed -> evaluate, plus render/extract/attack/sweep.

Every subcommand accepts ``--config file.json``; keys are option names
(dashes or underscores) and explicit flags override them. Exit codes:
0 success, 1 validation / usage / I/O error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, dumps_precise, read_png, write_png
from .attacks import attack_image, attack_model, is_model_attack, spec_from_json
from .decoder import FrozenDecoder, WatermarkKey
from .errors import NumericError, ValidationError
from .evaluation import evaluate, extract_from_image, save_report, sweep_scene
from .fgd import FgdConfig, run_fgd
from .finetune import FinetuneConfig, decoder_for, finetune
from .metrics import bit_accuracy
from .render import rasterize
from .scene import load_scene, save_scene, synthesize_toy_scene

log = logging.getLogger("splatmark")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _stem(path: str) -> str:
    p = Path(path)
    return str(p.with_suffix(""))


def _dump(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Config handling


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve(args: argparse.Namespace, defaults: dict, nested: tuple[str, ...] = ()) -> argparse.Namespace:
    """Fill options left unset on the command line from --config, then from ``defaults``."""
    config = load_config(args.config)
    known = set(defaults) | set(nested)
    unknown = set(config) - known
    if unknown:
        raise ValidationError(f"unknown config key(s) for '{args.command}': {sorted(unknown)}")
    for name, default in defaults.items():
        if getattr(args, name, None) is None:
            setattr(args, name, config.get(name, default))
    for name in nested:
        setattr(args, name, config.get(name, {}))
    return args


def load_watermark(path: str) -> tuple[FrozenDecoder, dict]:
    """Read a decoder JSON or an embed sidecar (which wraps one)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if "decoder" in doc:
        return FrozenDecoder.from_json(doc["decoder"]), doc
    return FrozenDecoder.from_json(doc), {"decoder": doc}


def _original_path(args, sidecar: dict) -> str:
    if args.original:
        return args.original
    rel = sidecar.get("original_scene")
    if not rel:
        raise ValidationError("--original is required (the watermark file does not name the original scene)")
    return str(Path(args.watermark).parent / rel)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    resolve(args, {"seed": 7, "n_gaussians": 300, "n_views": 8, "resolution": [64, 64], "out": None})
    if not args.out:
        raise ValidationError("synth: --out is required")
    w, h = (int(v) for v in args.resolution)
    cloud, ts = synthesize_toy_scene(int(args.seed), int(args.n_gaussians), int(args.n_views), (w, h))
    save_scene(cloud, ts, args.out)
    _dump({"scene": args.out, "n_gaussians": len(cloud), "n_views": len(ts)})
    return 0


def cmd_fgd(args) -> int:
    defaults = {k: v for k, v in asdict(FgdConfig()).items()}
    resolve(args, {"scene": None, "out": None, "report": None, "figure": None, **defaults})
    if not args.scene or not args.out:
        raise ValidationError("fgd: --scene and --out are required")
    cfg = FgdConfig(**{k: getattr(args, k) for k in defaults})
    cloud, ts = load_scene(args.scene)
    out, report = run_fgd(cloud, ts, cfg)
    save_scene(out, ts, args.out)
    report_path = args.report or _stem(args.out) + "_fgd.json"
    atomic_write_text(report_path, dumps_precise(report.to_json()))
    if args.figure:
        from .plotting import plot_fgd

        plot_fgd(report, args.figure)
    _dump({"scene": args.out, "report": report_path, "n_before": report.n_before, "n_removed": report.n_removed,
           "n_split": report.n_split, "n_after": report.n_after})
    return 0


_EMBED_FLAGS = {
    "key_seed": None, "bits": None, "epochs": None, "beta": None, "seed": None, "decoder_domain": None,
    "grid": None, "reject": None, "lambda_rec": None, "lambda_w": None, "lambda_m": None,
}


def embed_config(args) -> FinetuneConfig:
    cfg = FinetuneConfig.from_json(args.finetune or {})
    changes = {}
    if args.key_seed is not None or args.bits is not None:
        changes["key"] = WatermarkKey(int(args.key_seed if args.key_seed is not None else cfg.key.seed),
                                      int(args.bits if args.bits is not None else cfg.key.n_bits))
    for name in ("epochs", "seed", "grid", "reject"):
        if getattr(args, name) is not None:
            changes[name] = int(getattr(args, name))
    if args.beta is not None:
        changes["beta"] = float(args.beta)
    if args.decoder_domain is not None:
        changes["decoder_domain"] = args.decoder_domain
    if args.no_mask:
        changes["use_mask"] = False
    lam = {k: getattr(args, k) for k in ("lambda_rec", "lambda_w", "lambda_m") if getattr(args, k) is not None}
    if lam:
        changes["weights"] = replace(cfg.weights, **{k: float(v) for k, v in lam.items()})
    return replace(cfg, **changes)


def cmd_embed(args) -> int:
    resolve(args, {"scene": None, "out": None, "log": None, "watermark": None, "figure": None, **_EMBED_FLAGS},
            nested=("finetune",))
    if not args.scene or not args.out:
        raise ValidationError("embed: --scene and --out are required")
    cfg = embed_config(args)
    cloud, ts = load_scene(args.scene)
    out, train_log = finetune(cloud, ts, cfg)
    save_scene(out, ts, args.out)
    stem = _stem(args.out)
    log_path = args.log or stem + "_log.jsonl"
    atomic_write_text(log_path, train_log.to_jsonl())
    decoder = decoder_for(cfg, ts.cameras[0].shape)
    wm_path = args.watermark or stem + "_watermark.json"
    sidecar = {
        "decoder": decoder.to_json(),
        "finetune": cfg.to_json(),
        "original_scene": os.path.relpath(os.path.abspath(args.scene), os.path.dirname(os.path.abspath(wm_path))),
    }
    atomic_write_text(wm_path, dumps_precise(sidecar))
    if args.figure:
        from .plotting import plot_training_curve

        plot_training_curve(train_log, args.figure)
    last = train_log.epochs[-1]
    _dump({"scene": args.out, "watermark": wm_path, "log": log_path,
           "bit_accuracy": last.bit_accuracy, "psnr": last.psnr})
    return 0


def cmd_render(args) -> int:
    resolve(args, {"scene": None, "out_dir": None, "view": None, "bits_per_channel": 16})
    if not args.scene or not args.out_dir:
        raise ValidationError("render: --scene and --out-dir are required")
    cloud, ts = load_scene(args.scene)
    views = range(len(ts)) if args.view is None else [int(args.view)]
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for k in views:
        if not 0 <= k < len(ts):
            raise ValidationError(f"view {k} out of range (scene has {len(ts)} views)")
        path = os.path.join(args.out_dir, f"view_{k:03d}.png")
        write_png(path, rasterize(cloud, ts.cameras[k]).image, bits=int(args.bits_per_channel))
        written.append(path)
    _dump({"images": written})
    return 0


def cmd_extract(args) -> int:
    resolve(args, {"watermark": None, "image": None, "scene": None, "view": None})
    if not args.watermark:
        raise ValidationError("extract: --watermark is required")
    decoder, _ = load_watermark(args.watermark)
    if args.image:
        images = [read_png(args.image)]
    elif args.scene:
        cloud, ts = load_scene(args.scene)
        views = range(len(ts)) if args.view is None else [int(args.view)]
        images = [rasterize(cloud, ts.cameras[k]).image for k in views]
    else:
        raise ValidationError("extract: give --image or --scene")
    per_view = []
    for img in images:
        bits = extract_from_image(decoder, img)
        per_view.append({"bits": "".join(map(str, bits.tolist())), "bit_accuracy": bit_accuracy(bits, decoder.key)})
    _dump({"bit_accuracy": float(np.mean([v["bit_accuracy"] for v in per_view])), "views": per_view})
    return 0


def _read_spec(text_or_path: str):
    if os.path.exists(text_or_path):
        with open(text_or_path) as fh:
            text_or_path = fh.read()
    try:
        return spec_from_json(json.loads(text_or_path))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"attack spec: invalid JSON ({exc})") from exc


def cmd_attack(args) -> int:
    resolve(args, {"spec": None, "image": None, "scene": None, "out": None})
    if not args.spec or not args.out:
        raise ValidationError("attack: --spec and --out are required")
    spec = _read_spec(args.spec) if isinstance(args.spec, str) else spec_from_json(args.spec)
    if is_model_attack(spec):
        if not args.scene:
            raise ValidationError("attack: model attacks need --scene")
        cloud, ts = load_scene(args.scene)
        out = attack_model(cloud, spec)
        save_scene(out, ts, args.out)
        _dump({"scene": args.out, "n_before": len(cloud), "n_after": len(out)})
        return 0
    if args.image:
        write_png(args.out, attack_image(read_png(args.image), spec))
        _dump({"image": args.out})
        return 0
    if args.scene:
        cloud, ts = load_scene(args.scene)
        os.makedirs(args.out, exist_ok=True)
        paths = []
        for k, cam in enumerate(ts.cameras):
            path = os.path.join(args.out, f"view_{k:03d}.png")
            write_png(path, attack_image(rasterize(cloud, cam).image, spec))
            paths.append(path)
        _dump({"images": paths})
        return 0
    raise ValidationError("attack: give --image or --scene")


def cmd_evaluate(args) -> int:
    resolve(args, {"scene": None, "original": None, "watermark": None, "out": None, "figure": None,
                   "attack_seed": 0})
    if not args.scene or not args.watermark or not args.out:
        raise ValidationError("evaluate: --scene, --watermark and --out are required")
    decoder, sidecar = load_watermark(args.watermark)
    cloud, ts = load_scene(args.scene)
    original, _ = load_scene(_original_path(args, sidecar))
    config = {"finetune": sidecar.get("finetune"), "n_gaussians": len(cloud), "n_views": len(ts)}
    report = evaluate(cloud, original, ts, decoder, config=config, attack_seed=int(args.attack_seed))
    save_report(report, args.out)
    if args.figure:
        from .plotting import plot_eval_bars

        plot_eval_bars(report, args.figure)
    _dump({"report": args.out, "bit_accuracy": report.bit_accuracy, "psnr": report.psnr, "ssim": report.ssim,
           "rows": {r.name: r.bit_accuracy for r in report.rows}})
    return 0


def cmd_sweep(args) -> int:
    resolve(args, {"scene": None, "original": None, "watermark": None, "attack": None, "strengths": None,
                   "out": None, "figure": None})
    if not (args.scene and args.watermark and args.attack and args.strengths and args.out):
        raise ValidationError("sweep: --scene, --watermark, --attack, --strengths and --out are required")
    template = _read_spec(args.attack) if isinstance(args.attack, str) else spec_from_json(args.attack)
    strengths = [float(s) for s in args.strengths]
    decoder, sidecar = load_watermark(args.watermark)
    cloud, ts = load_scene(args.scene)
    original, _ = load_scene(_original_path(args, sidecar))
    curve = sweep_scene(template, strengths, cloud, original, ts, decoder)
    atomic_write_text(args.out, curve.to_csv())
    if args.figure:
        from .plotting import plot_sweep

        plot_sweep(curve, args.figure)
    _dump({"csv": args.out, "points": [[p.strength, p.bit_accuracy] for p in curve.points]})
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatmark", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file of option values")
        return sp

    sp = add("synth", "synthesize a toy scene")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-gaussians", type=int)
    sp.add_argument("--n-views", type=int)
    sp.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    sp.add_argument("--out", help="scene JSON to write")

    sp = add("fgd", "prune and split with frequency-guided densification")
    sp.add_argument("--scene")
    sp.add_argument("--out")
    sp.add_argument("--report", help="FGD report JSON (default <out>_fgd.json)")
    sp.add_argument("--figure", help="optional PNG summary")
    sp.add_argument("--prune-threshold", type=float)
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--top-k-percent", type=float)
    sp.add_argument("--split-quantile", type=float)
    sp.add_argument("--split-scale-divisor", type=float)
    sp.add_argument("--aggregation", choices=("max", "sum"))
    sp.add_argument("--channel-reduce", choices=("mean", "sum"))

    sp = add("embed", "fine-tune a watermark into a scene")
    sp.add_argument("--scene")
    sp.add_argument("--out")
    sp.add_argument("--log", help="training log JSONL (default <out>_log.jsonl)")
    sp.add_argument("--watermark", help="decoder + config sidecar (default <out>_watermark.json)")
    sp.add_argument("--figure", help="optional training-curve PNG")
    sp.add_argument("--key-seed", type=int)
    sp.add_argument("--bits", type=int, choices=(32, 48, 64))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--seed", type=int, help="view-order seed")
    sp.add_argument("--no-mask", action="store_true")
    sp.add_argument("--decoder-domain", choices=("ll2", "pixel"))
    sp.add_argument("--grid", type=int)
    sp.add_argument("--reject", type=int)
    sp.add_argument("--lambda-rec", type=float)
    sp.add_argument("--lambda-w", type=float)
    sp.add_argument("--lambda-m", type=float)

    sp = add("render", "render scene views to PNG")
    sp.add_argument("--scene")
    sp.add_argument("--out-dir")
    sp.add_argument("--view", type=int)
    sp.add_argument("--bits-per-channel", type=int, choices=(8, 16))

    sp = add("extract", "decode watermark bits")
    sp.add_argument("--watermark", help="decoder JSON or embed sidecar")
    sp.add_argument("--image")
    sp.add_argument("--scene")
    sp.add_argument("--view", type=int)

    sp = add("attack", "apply an attack spec to an image or scene")
    sp.add_argument("--spec", help="attack spec JSON (file or inline)")
    sp.add_argument("--image")
    sp.add_argument("--scene")
    sp.add_argument("--out", help="output PNG, scene JSON (model attacks) or directory (scene + image attack)")

    sp = add("evaluate", "run the robustness matrix and write an EvalReport")
    sp.add_argument("--scene", help="watermarked scene")
    sp.add_argument("--original", help="pre-embedding scene (default: named in the watermark file)")
    sp.add_argument("--watermark")
    sp.add_argument("--out")
    sp.add_argument("--figure", help="optional bar-chart PNG")
    sp.add_argument("--attack-seed", type=int)

    sp = add("sweep", "bit accuracy versus attack strength")
    sp.add_argument("--scene")
    sp.add_argument("--original")
    sp.add_argument("--watermark")
    sp.add_argument("--attack", help="attack spec template JSON (file or inline)")
    sp.add_argument("--strengths", type=float, nargs="+")
    sp.add_argument("--out", help="CSV output")
    sp.add_argument("--figure", help="optional PNG plot")
    return p


COMMANDS = {
    "synth": cmd_synth, "fgd": cmd_fgd, "embed": cmd_embed, "render": cmd_render, "extract": cmd_extract,
    "attack": cmd_attack, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
