"""Command line entry point: ``a3dseg <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error (bad flags or config file),
1 runtime failure. Errors are printed as ``error [<module>]: <message>``.
The default output root is ``$A3DSEG_OUT`` (``runs`` if unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import OUT_ENV, default_out_root, dump, parse_override, resolve
from .errors import A3DSegError, ConfigError

log = logging.getLogger("a3dseg")

ABLATIONS = ("M1", "M2", "M3", "M4")


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value, e.g. train2d.epochs=3 (repeatable)")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")


def _resolve(args, extra=()):
    overrides = [parse_override(o) for o in args.overrides] + [o for o in extra if o]
    return resolve(args.config, overrides)


def _root(args) -> Path:
    return Path(args.out) if getattr(args, "out", None) else default_out_root()


def _data_dir(cfg, args) -> Path:
    return Path(cfg.data.out_dir) if cfg.data.out_dir else _root(args) / "data"


def _manifest_path(cfg, args) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return _data_dir(cfg, args) / "manifest.json"


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"{path} is not empty; pick a new --run-dir (runs are append-only)")
    return path


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .phantom import build_dataset

    cfg = _resolve(args)
    out = _fresh_dir(Path(args.data_dir) if args.data_dir else _data_dir(cfg, args))
    cfg.data.out_dir = str(out)
    manifest = build_dataset(cfg.data.phantom, cfg.data.degradation, cfg.data.n_low, cfg.data.n_high, out,
                             n_test=cfg.data.n_test)
    dump(cfg, out / "config.yaml")
    print(f"wrote {len(manifest.entries)} entries to {out / 'manifest.json'}")
    return 0


def _train2d(cfg, manifest, run_dir: Path, resume_from=None) -> Path:
    from .train2d import run_train_2d

    cfg.train2d.checkpoint_dir = str(run_dir)
    return run_train_2d(manifest, cfg.train2d, cfg.net, resume_from=resume_from, resolved_config=cfg.to_dict())


def cmd_train_2d(args) -> int:
    from .storage import load_manifest

    cfg = _resolve(args, [{"train2d": {"ablation": args.ablation}} if args.ablation else None,
                          {"train2d": {"seed": args.seed}, "net": {"seed": args.seed}}
                          if args.seed is not None else None])
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    cfg.data.out_dir = str(mpath.parent)
    run_dir = Path(args.run_dir) if args.run_dir else _root(args) / "train2d" / cfg.train2d.ablation
    path = _train2d(cfg, manifest, run_dir, args.resume)
    print(f"checkpoint: {path}")
    return 0


def cmd_train_3d(args) -> int:
    from .seg3d import run_train_3d
    from .storage import load_manifest

    cfg = _resolve(args, [{"train3d": {"seed": args.seed}} if args.seed is not None else None])
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    cfg.data.out_dir = str(mpath.parent)
    run_dir = Path(args.run_dir) if args.run_dir else _root(args) / "train3d"
    cfg.train3d.checkpoint_dir = str(run_dir)
    path = run_train_3d(manifest, args.translator, cfg.train3d, resolved_config=cfg.to_dict())
    print(f"checkpoint: {path}")
    return 0


def cmd_translate(args) -> int:
    from .seg3d import translate_volume
    from .storage import read_tensor, write_tensor

    vol, meta = read_tensor(args.input)
    src = read_tensor(args.artifact_source)[0] if args.artifact_source else None
    out = translate_volume(vol, args.checkpoint, args.direction, artifact_source=src)
    domain = "high" if args.direction == "low_to_high" else "low"
    dest = Path(args.output)
    if dest.with_suffix(".f32").exists():
        raise ConfigError(f"{dest} exists; refusing to overwrite")
    path = write_tensor(dest, out, meta["spacing_mm"], domain)
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_model
    from .storage import load_manifest

    cfg = _resolve(args, [{"eval": {k: v for k, v in (("mode", args.mode), ("which", args.which)) if v}}])
    manifest = load_manifest(_manifest_path(cfg, args))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_model(args.checkpoint, manifest, cfg.eval.mode, cfg.eval.which)
    print(report.render())
    if args.json:
        dest = Path(args.json)
        if dest.exists():
            raise ConfigError(f"{dest} exists; refusing to overwrite")
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(report.to_json())
    return 0


def evaluate_all_heads(checkpoint, manifest, ablation: str) -> dict:
    """Mean Dice/ASD for every table head; attention-map heads only exist for M3/M4."""
    from .losses import ANATOMY_AWARE
    from .metrics import TABLE_HEADS, evaluate_model

    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for head in TABLE_HEADS:
            if head.startswith("m_") and not ANATOMY_AWARE[ablation]:
                out[head] = None
                continue
            out[head] = evaluate_model(checkpoint, manifest, "2d", head)
    return out


def cmd_ablate(args) -> int:
    import copy

    from .metrics import render_table
    from .storage import load_manifest

    cfg = _resolve(args)
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    cfg.data.out_dir = str(mpath.parent)
    root = _fresh_dir(Path(args.run_dir) if args.run_dir else _root(args) / "ablate")
    rows, results = {}, {}
    for abl in ABLATIONS:
        c = copy.deepcopy(cfg)
        c.train2d.ablation = abl
        ckpt = _train2d(c, manifest, root / abl)
        rows[abl] = evaluate_all_heads(ckpt, manifest, abl)
        results[abl] = {"checkpoint": str(ckpt),
                        "heads": {h: None if r is None else {"dice": r.mean_dice, "asd": r.mean_asd}
                                  for h, r in rows[abl].items()}}
        log.info("%s done", abl)
    table = render_table(rows)
    (root / "table.txt").write_text(table + "\n")
    (root / "results.json").write_text(json.dumps(results, indent=1))
    print(table)
    return 0


LOSS_KEYS = ("total", "adv", "recon", "cycle", "arti", "segm", "segm_m", "anat", "disc", "segm3d", "anat3d")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import EvalReport, render_table

    out = _fresh_dir(Path(args.output))
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for run in map(Path, args.runs):
        logf = run / "metrics.jsonl"
        if logf.exists():
            rows = read_jsonl(logf)
            keys = [k for k in LOSS_KEYS if any(k in r for r in rows)]
            fig, ax = plt.subplots(figsize=(7, 4))
            for k in keys:
                pts = [(r["step"], r[k]) for r in rows if k in r]
                ax.plot(*zip(*pts), label=k, lw=1)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_yscale("symlog", linthresh=1e-2)
            ax.set_title(run.name)
            ax.legend(fontsize=7, ncol=2)
            fig.tight_layout()
            png = out / f"{run.name}_losses.png"
            fig.savefig(png, dpi=100)
            plt.close(fig)
            last = rows[-1]
            summary.append(f"{run.name:<16}steps={len(rows):<6}" + " ".join(
                f"{k}={last[k]:.4f}" for k in keys if k in last))
        res = run / "results.json"
        if res.exists():
            doc = json.loads(res.read_text())
            table_rows = {}
            for abl, r in doc.items():
                table_rows[abl] = {h: None if v is None else EvalReport("2d", h, mean_dice=v["dice"], mean_asd=v["asd"])
                                   for h, v in r["heads"].items()}
            summary.append(render_table(table_rows))
        if not logf.exists() and not res.exists():
            raise ConfigError(f"{run} has neither metrics.jsonl nor results.json")
    text = "\n".join(summary)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a3dseg", description=__doc__.split("\n")[0],
                                epilog="exit codes: 0 ok, 1 runtime failure, 2 configuration error")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the phantom dataset")
    _config_args(s)
    s.add_argument("--data-dir", help="output directory (default <out>/data)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-2d", help="train the 2D translation/segmentation network")
    _config_args(s)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--seed", type=int)
    s.add_argument("--manifest")
    s.add_argument("--run-dir")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train_2d)

    s = sub.add_parser("train-3d", help="train the 3D segmentors on a frozen 2D translator")
    _config_args(s)
    s.add_argument("--translator", required=True, help="trained 2D checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--manifest")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_train_3d)

    s = sub.add_parser("translate", help="translate one volume slice by slice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help=".f32 tensor")
    s.add_argument("--output", required=True)
    s.add_argument("--direction", choices=("low_to_high", "high_to_low"), default="low_to_high")
    s.add_argument("--artifact-source", help="low-quality volume lending its artifact code (high_to_low)")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="Dice/ASD of one prediction head on the test split")
    _config_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--mode", choices=("2d", "3d"))
    s.add_argument("--which", choices=("y_l", "y_ll", "y_lh", "m_l", "y_h", "y_hh", "y_hl", "m_h"))
    s.add_argument("--json", help="also write the report as JSON here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train M1..M4 with shared data and seed and print the comparison table")
    _config_args(s)
    s.add_argument("--manifest")
    s.add_argument("--run-dir")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="loss-curve plots and metric tables from run logs")
    s.add_argument("runs", nargs="+", help="run directories")
    s.add_argument("--output", required=True, help="directory for PNGs and summary.txt")
    s.set_defaults(func=cmd_report)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 2
    except A3DSegError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        mod = getattr(args.func, "__name__", "cli").replace("cmd_", "")
        print(f"error [{mod}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
