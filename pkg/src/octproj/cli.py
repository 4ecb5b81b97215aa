"""Single executable for the full workflow.

Subcommands: gen-phantom, train, fit-dpm, project, transfer, eval,
gradcheck. Flags override an optional JSON config file (--config), which
overrides built-in defaults. Human-readable output goes to stdout;
machine-readable artifacts only to files. Every artifact-producing run
writes a manifest.json (atomically) into its output directory.

Exit codes: 0 success, 1 usage error, 2 runtime/contract error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dpm, gradsuite, optim, phantom, report
from .errors import ContractError, OctprojError, ShapeError
from .objective import minmax_normalize, psnr, ssim
from .optim import TrainConfig
from .phantom import PhantomSpec
from .tensorio import load_volume, read_tsr, write_pgm, write_tsr

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir, command: str, config: dict, seed, outputs,
                   started_at: str, finished_at: str) -> Path:
    """Atomic manifest write (tmp file + rename)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": report.sanitize(config),
        "seed": seed,
        "version": __version__,
        "started_at": started_at,
        "finished_at": finished_at,
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge precedence: CLI flag > config file > defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    merged = dict(defaults)
    merged.update({k: v for k, v in file_cfg.items() if k in defaults})
    for key in defaults:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
    return merged


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {"out": None, "subjects": 5, "seed": 0, "preset": "", "D": 32,
                "H": 128, "W": 128, "noise_sigma": 0.02, "vessel_count": 6,
                "amplitude": 0.08}


def cmd_gen_phantom(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    if not cfg["out"]:
        raise ContractError("--out is required")
    started = _utc_now()
    spec = PhantomSpec(D=cfg["D"], H=cfg["H"], W=cfg["W"], seed=cfg["seed"],
                       noise_sigma=cfg["noise_sigma"], vessel_count=cfg["vessel_count"],
                       amplitude=cfg["amplitude"])
    written = phantom.export_dataset(cfg["out"], cfg["subjects"], spec,
                                     stress=cfg["preset"] == "stress")
    outputs = [p for split in written.values() for p in split]
    write_manifest(cfg["out"], "gen-phantom", cfg, cfg["seed"], outputs, started, _utc_now())
    counts = {k: len(v) for k, v in written.items()}
    print(f"wrote {sum(counts.values())} subjects to {cfg['out']} (splits: {counts})")
    return 0


TRAIN_DEFAULTS = {"data": None, "out": None, "pipeline": "cnn_dpm", "epochs": 30,
                  "lr": 1e-4, "lam": 0.2, "batch": 8, "M": 64, "seed": 0,
                  "no_cmm": False, "monotone": False, "lr_decay": "anneal"}


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if not cfg["data"] or not cfg["out"]:
        raise ContractError("--data and --out are required")
    started = _utc_now()
    dataset = phantom.load_dataset(cfg["data"])
    tc = TrainConfig(lr0=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                     lam=cfg["lam"], M=cfg["M"], seed=cfg["seed"],
                     cmm_enabled=not cfg["no_cmm"], monotone=cfg["monotone"],
                     lr_decay=cfg["lr_decay"])
    result = optim.train(cfg["pipeline"], dataset, tc)
    out = Path(cfg["out"])
    optim.save_result(out, result)
    report.write_jsonl(out / "history.jsonl", result.history)
    outputs = [str(out / "history.jsonl"), str(out / "manifest.json")]
    if result.history:
        report.save_history_figure(out / "figures" / "history.png", result.history)
        outputs.append(str(out / "figures" / "history.png"))
        last = result.history[result.best_epoch]
        print(f"best epoch {result.best_epoch}")
        print(f"{'band':<6}{'psnr':>10}{'ssim':>10}")
        print(f"{'b2':<6}{last['val_psnr_b2']:>10.4f}{last['val_ssim_b2']:>10.4f}")
        print(f"{'b3':<6}{last['val_psnr_b3']:>10.4f}{last['val_ssim_b3']:>10.4f}")
    write_manifest(out, "train", cfg, cfg["seed"], outputs, started, _utc_now())
    return 0


FIT_DEFAULTS = {"data": None, "out": None, "steps": 200, "seed": 0,
                "monotone": False, "M": 64, "lam": 0.2, "fit_lr": 0.02}


def cmd_fit_dpm(args) -> int:
    cfg = _resolve(args, FIT_DEFAULTS)
    if not cfg["data"] or not cfg["out"]:
        raise ContractError("--data and --out are required")
    started = _utc_now()
    dataset = phantom.load_dataset(cfg["data"])
    subjects = dataset["test"] or dataset["train"]
    if not subjects:
        raise ContractError("no test subjects to fit")
    tc = TrainConfig(seed=cfg["seed"], M=cfg["M"], lam=cfg["lam"], steps=cfg["steps"],
                     fit_lr=cfg["fit_lr"], monotone=cfg["monotone"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = []
    outputs = []
    for subj in subjects:
        res = optim.fit_dpm_only(subj.oct, subj.gt_pm_b2, subj.gt_pm_b3, tc)
        pm2 = minmax_normalize(dpm.project_volume(subj.oct, res.curves, (0, 1), tc.M, tc.mode))
        pm3 = minmax_normalize(dpm.project_volume(subj.oct, res.curves, (1, 2), tc.M, tc.mode))
        sdir = out / subj.subject_id
        sdir.mkdir(parents=True, exist_ok=True)
        write_tsr(res.curves, sdir / "curves.tsr")
        write_tsr(pm2, sdir / "pm_b2.tsr")
        write_tsr(pm3, sdir / "pm_b3.tsr")
        write_pgm(pm2, sdir / "pm_b2.pgm")
        write_pgm(pm3, sdir / "pm_b3.pgm")
        report.save_compare_figure(out / "figures" / f"{subj.subject_id}_b2.png",
                                   [("fitted", pm2), ("ground truth", subj.gt_pm_b2)],
                                   suptitle=f"{subj.subject_id} B2, per-pair fit")
        records.append({
            "volume": subj.subject_id,
            "crossing_fraction": res.crossing_fraction,
            "psnr_b2": psnr(pm2, subj.gt_pm_b2), "ssim_b2": ssim(pm2, subj.gt_pm_b2),
            "psnr_b3": psnr(pm3, subj.gt_pm_b3), "ssim_b3": ssim(pm3, subj.gt_pm_b3),
            "final_loss": res.traces[-1][-1] if res.traces and res.traces[-1] else None,
        })
        outputs.append(str(sdir))
    report.write_jsonl(out / "report.jsonl", records)
    outputs.append(str(out / "report.jsonl"))
    for rec in records:
        print(f"{rec['volume']}: crossing_fraction={rec['crossing_fraction']:.4f} "
              f"ssim_b2={rec['ssim_b2']:.4f}")
    write_manifest(out, "fit-dpm", cfg, cfg["seed"], outputs, started, _utc_now())
    return 0


PROJECT_DEFAULTS = {"volume": None, "curves": None, "band": "b2", "mode": "mean",
                    "M": 64, "out": None}

BAND_INDICES = {"b2": (0, 1), "b3": (1, 2)}


def cmd_project(args) -> int:
    cfg = _resolve(args, PROJECT_DEFAULTS)
    for key in ("volume", "curves", "out"):
        if not cfg[key]:
            raise ContractError(f"--{key} is required")
    started = _utc_now()
    _, vol = load_volume(cfg["volume"])
    curves = read_tsr(cfg["curves"])
    if curves.ndim != 3:
        raise ShapeError(f"curves must be [D, K, W], got {curves.shape}")
    band = BAND_INDICES[cfg["band"]]
    raw = dpm.project_volume(vol, curves, band, cfg["M"], cfg["mode"])
    pm = minmax_normalize(raw)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"pm_{cfg['band']}"
    write_tsr(raw, out / f"{stem}_raw.tsr")
    write_tsr(pm, out / f"{stem}.tsr")
    write_pgm(pm, out / f"{stem}.pgm")
    report.save_pm_figure(out / "figures" / f"{stem}.png", pm,
                          title=f"{cfg['band']} ({cfg['mode']}, M={cfg['M']})")
    outputs = [str(out / f"{stem}_raw.tsr"), str(out / f"{stem}.tsr"),
               str(out / f"{stem}.pgm"), str(out / "figures" / f"{stem}.png")]
    write_manifest(out, "project", cfg, None, outputs, started, _utc_now())
    print(f"projected {cfg['band']} ({cfg['mode']}): {out / (stem + '.tsr')}")
    return 0


TRANSFER_DEFAULTS = {"oct_checkpoint": None, "oct_volume": None,
                     "octa_volume": None, "out": None, "M": 64, "mode": "mean"}


def cmd_transfer(args) -> int:
    cfg = _resolve(args, TRANSFER_DEFAULTS)
    for key in ("oct_checkpoint", "oct_volume", "octa_volume", "out"):
        if not cfg[key]:
            raise ContractError(f"--{key.replace('_', '-')} is required")
    started = _utc_now()
    _, oct_vol = load_volume(cfg["oct_volume"])
    _, octa_vol = load_volume(cfg["octa_volume"])
    if oct_vol.shape != octa_vol.shape:
        raise ShapeError(f"paired volumes must share extents: {oct_vol.shape} vs {octa_vol.shape}")
    res = optim.infer(cfg["oct_checkpoint"], oct_vol)
    if res.curves is None:
        raise ContractError("checkpoint does not produce layer curves (not a cnn_dpm model)")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    record = {"oct_volume": cfg["oct_volume"], "octa_volume": cfg["octa_volume"]}
    outputs = []
    for band_name, band in BAND_INDICES.items():
        raw = dpm.project_volume(octa_vol, res.curves, band, cfg["M"], cfg["mode"])
        pm = minmax_normalize(raw)
        write_tsr(pm, out / f"octa_pm_{band_name}.tsr")
        write_pgm(pm, out / f"octa_pm_{band_name}.pgm")
        outputs.append(str(out / f"octa_pm_{band_name}.tsr"))
        gt_path = Path(cfg["octa_volume"]).parent / f"octa_gt_pm_{band_name}.tsr"
        if gt_path.is_file():
            gt = read_tsr(gt_path)
            record[f"psnr_{band_name}"] = psnr(pm, gt)
            record[f"ssim_{band_name}"] = ssim(pm, gt)
            report.save_compare_figure(out / "figures" / f"octa_{band_name}.png",
                                       [("transferred", pm), ("ground truth", gt)],
                                       suptitle=f"OCTA {band_name} via OCT curves")
    write_tsr(res.curves, out / "curves.tsr")
    outputs.append(str(out / "curves.tsr"))
    with open(out / "transfer.json", "w") as fh:
        json.dump(report.sanitize(record), fh, indent=2)
        fh.write("\n")
    outputs.append(str(out / "transfer.json"))
    write_manifest(out, "transfer", cfg, None, outputs, started, _utc_now())
    for k, v in record.items():
        if isinstance(v, float):
            print(f"{k}: {v:.4f}")
    return 0


EVAL_DEFAULTS = {"pred": None, "gt": None, "out": None}


def _metric_pairs(pred_path: Path, gt_path: Path):
    """Match .tsr maps between a pred and gt location (file-file or dir-dir)."""
    if pred_path.is_file() and gt_path.is_file():
        return [(pred_path.stem, pred_path, gt_path)]
    if pred_path.is_dir() and gt_path.is_dir():
        pairs = []
        for p in sorted(pred_path.glob("*.tsr")):
            q = gt_path / p.name
            if q.is_file():
                pairs.append((p.stem, p, q))
        if not pairs:
            raise ContractError(f"no matching .tsr names between {pred_path} and {gt_path}")
        return pairs
    raise ContractError("--pred and --gt must both be files or both be directories")


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    for key in ("pred", "gt", "out"):
        if not cfg[key]:
            raise ContractError(f"--{key} is required")
    started = _utc_now()
    pairs = _metric_pairs(Path(cfg["pred"]), Path(cfg["gt"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = []
    outputs = []
    for name, p, q in pairs:
        a, b = read_tsr(p), read_tsr(q)
        band = "b2" if "b2" in name else ("b3" if "b3" in name else "")
        records.append({"volume": name, "band": band,
                        "psnr": psnr(a, b), "ssim": ssim(a, b)})
        report.save_compare_figure(out / "figures" / f"{name}.png",
                                   [("prediction", a), ("ground truth", b)],
                                   suptitle=name)
        outputs.append(str(out / "figures" / f"{name}.png"))
    agg = {"volume": "aggregate", "band": "all",
           "psnr": float(np.mean([r["psnr"] for r in records])),
           "ssim": float(np.mean([r["ssim"] for r in records]))}
    records.append(agg)
    report.write_jsonl(out / "metrics.jsonl", records)
    outputs.append(str(out / "metrics.jsonl"))
    print(f"{'volume':<24}{'band':<6}{'psnr':>10}{'ssim':>10}")
    for r in records:
        p_str = f"{r['psnr']:.4f}" if np.isfinite(r["psnr"]) else "inf"
        print(f"{r['volume']:<24}{r['band']:<6}{p_str:>10}{r['ssim']:>10.4f}")
    write_manifest(out, "eval", cfg, None, outputs, started, _utc_now())
    return 0


GRADCHECK_DEFAULTS = {"which": "all", "seed": 0}


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, GRADCHECK_DEFAULTS)
    t0 = time.time()
    reports = gradsuite.run_suites(cfg["which"], cfg["seed"])
    for rep in reports:
        print(rep.summary())
    n_fail = sum(1 for r in reports if not r.passed)
    n_excl = sum(r.n_excluded for r in reports)
    print(f"{len(reports) - n_fail}/{len(reports)} ops passed, "
          f"{n_excl} boundary cases excluded, {time.time() - t0:.1f}s")
    return 0 if n_fail == 0 else RUNTIME_EXIT


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="octproj", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out")
    p.add_argument("--subjects", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["stress"])
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_phantom)

    p = sub.add_parser("train", help="train a pipeline on a phantom dataset")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--pipeline", choices=list(optim.PIPELINES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-cmm", dest="no_cmm", action="store_const", const=True)
    p.add_argument("--monotone", action="store_const", const=True)
    p.add_argument("--lr-decay", dest="lr_decay", choices=["anneal", "per_epoch"])
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fit-dpm", help="per-pair coordinate fitting (no deep prior)")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--monotone", action="store_const", const=True)
    p.add_argument("--M", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_fit_dpm)

    p = sub.add_parser("project", help="project a volume between stored curves")
    p.add_argument("--volume")
    p.add_argument("--curves")
    p.add_argument("--band", choices=["b2", "b3"])
    p.add_argument("--mode", choices=["mean", "max"])
    p.add_argument("--M", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("transfer", help="apply OCT-trained curves to the paired OCTA volume")
    p.add_argument("--oct-checkpoint", dest="oct_checkpoint")
    p.add_argument("--oct-volume", dest="oct_volume")
    p.add_argument("--octa-volume", dest="octa_volume")
    p.add_argument("--out")
    p.add_argument("--M", type=int)
    p.add_argument("--mode", choices=["mean", "max"])
    p.add_argument("--config")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("eval", help="PSNR/SSIM report for predicted maps")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    p.add_argument("--which", choices=["all", *gradsuite.SUITES])
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (OctprojError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
