"""Command-line orchestration: gen-data, train, sample, eval, schedule.

Every subcommand resolves its settings from builtin defaults, an optional
config file (flat `key = value` text or a previously written run.json), and
explicit flags, in that order of precedence.  The resolved config is
serialized to <out>/run.json before any work happens, so a run can be
reproduced bit-exactly from that file plus its seed.  Exit codes: 0 on
success, 1 on validation errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import time

import numpy as np

from . import boundaries, data, metrics
from .schedule import ScheduleConfig, build_schedule, loss_weight, schedule_rows
from .synth import GeneratorParams, generate_synthetic

SPLITS = ("train", "val", "test")


def _fail(msg: str) -> None:
    raise ValueError(msg)


def _threads() -> int | None:
    v = os.environ.get("RESDIFF_THREADS")
    return int(v) if v else None


def _setup_torch_threads(cfg: dict) -> None:
    import torch

    n = cfg.get("threads") or _threads()
    if n:
        torch.set_num_threads(int(n))
    cfg["threads"] = torch.get_num_threads()


def _load_config_file(path: str) -> dict:
    with open(path) as f:
        text = f.read()
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj.get("config", obj)
    except json.JSONDecodeError:
        pass
    cfg = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key = value): {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            cfg[key.replace("-", "_")] = json.loads(val)
        except json.JSONDecodeError:
            cfg[key.replace("-", "_")] = val
    return cfg


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (argparse defaults are all None)."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        for k, v in file_cfg.items():
            if k in cfg:
                cfg[k] = v
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _prepare_out(cfg: dict, command: str, force: bool = False) -> str:
    out = cfg.get("out")
    if not out:
        _fail("--out is required")
    if os.path.isdir(out) and os.listdir(out):
        if not force:
            _fail(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    payload = {"command": command, "config": _jsonable(cfg)}
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    return obj


def _schedule_from(cfg: dict) -> ScheduleConfig:
    return ScheduleConfig(
        T=int(cfg["T"]),
        p=float(cfg["p"]),
        kappa=float(cfg["kappa"]),
        eta_1=float(cfg["eta1"]),
        eta_T=float(cfg["etaT"]),
    )


# --- gen-data -----------------------------------------------------------------

GEN_DEFAULTS = {
    "n": None,
    "size": 64,
    "seed": 0,
    "out": None,
    "split": "0.7,0.15,0.15",
    "png": False,
    "min_sep": 2.0,
    "cells": "5,20",
    "cell_axes": "7,12",
}


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    n = cfg["n"]
    if not n or int(n) < 1:
        _fail(f"--n must be a positive integer, got {n}")
    n, size, seed = int(n), int(cfg["size"]), int(cfg["seed"])
    if size < 16 or size % 4:
        _fail(f"--size must be >= 16 and divisible by 4 (default model depth), got {size}")
    fracs = [float(x) for x in str(cfg["split"]).split(",")]
    if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-9 or min(fracs) < 0:
        _fail(f"--split needs three fractions summing to 1, got {cfg['split']}")
    lo, hi = (int(x) for x in str(cfg["cells"]).split(","))
    ax_lo, ax_hi = (float(x) for x in str(cfg["cell_axes"]).split(","))
    params = GeneratorParams(
        n_cells=(lo, hi), cell_axes=(ax_lo, ax_hi), min_separation=float(cfg["min_sep"])
    )

    out = _prepare_out(cfg, "gen-data", force=bool(getattr(args, "force", False)))
    records = generate_synthetic(n, size=size, seed=seed, params=params)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    splits = {
        "train": [records[i] for i in order[:n_train]],
        "val": [records[i] for i in order[n_train : n_train + n_val]],
        "test": [records[i] for i in order[n_train + n_val :]],
    }
    data.save_dataset(out, splits)
    if cfg["png"]:
        for split, recs in splits.items():
            for rec in recs:
                arrays = {"bf": rec.bf[0]}
                arrays.update({c: rec.fluor[i] for i, c in enumerate(data.FLUOR_CHANNELS)})
                arrays.update({f"seg_{c}": rec.seg[i] for i, c in enumerate(data.SEG_CHANNELS)})
                data.export_record_pngs(os.path.join(out, split, rec.record_id, "png"), arrays)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"wrote {n} records to {out} ({counts})")
    return 0


# --- train ---------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "steps": 3000,
    "batch_size": 2,
    "lr": 1e-4,
    "seed": 0,
    "weighting": False,
    "checkpoint_every": 1000,
    "resume": None,
    "T": 15,
    "p": 0.3,
    "kappa": 2.0,
    "eta1": 1e-4,
    "etaT": 0.9999,
    "base_width": 32,
    "levels": 3,
    "time_dim": 128,
    "attention": True,
    "threads": None,
}


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if not cfg["data"]:
        _fail("--data is required")
    if not os.path.isdir(cfg["data"]):
        _fail(f"dataset directory {cfg['data']} does not exist")
    _setup_torch_threads(cfg)
    from .model import DenoiserConfig, TrainConfig, train

    s = build_schedule(_schedule_from(cfg))
    records = data.load_directory(cfg["data"], split="train")
    if not records:
        _fail(f"no training records under {cfg['data']}")
    pairs = data.training_pairs(records)
    model_cfg = DenoiserConfig(
        in_channels=pairs[0][0].shape[0] + pairs[0][1].shape[0],
        out_channels=pairs[0][0].shape[0],
        base_width=int(cfg["base_width"]),
        num_levels=int(cfg["levels"]),
        time_embed_dim=int(cfg["time_dim"]),
        attention_at_bottleneck=bool(cfg["attention"]),
    )
    train_cfg = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["lr"]),
        max_steps=int(cfg["steps"]),
        seed=int(cfg["seed"]),
        weighting=bool(cfg["weighting"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
    )
    out = _prepare_out(cfg, "train", force=bool(getattr(args, "force", False)))

    def progress(step, loss):
        print(f"step {step}/{train_cfg.max_steps} loss {loss:.6f}", file=sys.stderr)

    net, loss_log = train(
        pairs, train_cfg, s, model_cfg=model_cfg, out_dir=out,
        resume=cfg["resume"], progress=progress,
    )
    with open(os.path.join(out, "loss.tsv"), "w") as f:
        f.write("step\tloss\n")
        for step, loss in loss_log:
            f.write(f"{step}\t{loss:.10g}\n")
    print(f"trained {train_cfg.max_steps} steps; final checkpoint in {out}")
    return 0


# --- sample --------------------------------------------------------------------

SAMPLE_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "split": "test",
    "out": None,
    "steps": None,
    "baseline": "residual",
    "seed": 0,
    "limit": None,
    "png": True,
    "threads": None,
}


def cmd_sample(args) -> int:
    cfg = _resolve(args, SAMPLE_DEFAULTS)
    for key in ("checkpoint", "data", "out"):
        if not cfg[key]:
            _fail(f"--{key} is required")
    if not os.path.isfile(cfg["checkpoint"]):
        _fail(f"checkpoint {cfg['checkpoint']} does not exist")
    if cfg["baseline"] not in ("residual", "ddpm"):
        _fail(f"--baseline must be residual or ddpm, got {cfg['baseline']}")
    _setup_torch_threads(cfg)
    from . import diffusion
    from .model import denoiser_fn, load_checkpoint

    net, sched_cfg, header, _ = load_checkpoint(cfg["checkpoint"])
    net.eval()
    records = data.load_directory(cfg["data"], split=cfg["split"])
    if cfg["limit"]:
        records = records[: int(cfg["limit"])]
    if not records:
        _fail(f"no records in split {cfg['split']} under {cfg['data']}")

    out_channels = net.cfg.out_channels
    fn = denoiser_fn(net)
    if cfg["baseline"] == "ddpm":
        steps = int(cfg["steps"] or 1000)
        ds = diffusion.build_ddpm_schedule(T=steps)
    else:
        if sched_cfg is None:
            sched_cfg = ScheduleConfig()
        if cfg["steps"]:
            sched_cfg = ScheduleConfig(
                T=int(cfg["steps"]), p=sched_cfg.p, kappa=sched_cfg.kappa,
                eta_1=sched_cfg.eta_1, eta_T=sched_cfg.eta_T,
            )
        steps = sched_cfg.T
        s = build_schedule(sched_cfg)
    cfg["steps"] = steps

    out = _prepare_out(cfg, "sample", force=bool(getattr(args, "force", False)))
    streams = np.random.SeedSequence(int(cfg["seed"])).spawn(len(records))
    timing = []
    for rec, ss in zip(records, streams):
        rng = np.random.default_rng(ss)
        y0 = data.to_unit(rec.bf).astype(np.float64)
        trace = diffusion.SampleTrace()
        if cfg["baseline"] == "ddpm":
            x = diffusion.ddpm_sample(y0, fn, ds, rng, out_channels=out_channels, trace=trace)
        else:
            x = diffusion.sample(y0, fn, s, rng, out_channels=out_channels, trace=trace)
        pred = data.from_unit(x)
        d = os.path.join(out, rec.record_id)
        os.makedirs(d, exist_ok=True)
        data.write_crif(os.path.join(d, "pred.crif"), pred)
        if cfg["png"]:
            arrays = {c: pred[i] for i, c in enumerate(data.FLUOR_CHANNELS)}
            arrays.update(
                {f"seg_{c}": pred[5 + i] for i, c in enumerate(data.SEG_CHANNELS)}
            )
            data.export_record_pngs(os.path.join(d, "png"), arrays)
        timing.append(
            {"id": rec.record_id, "model_calls": trace.model_calls,
             "seconds": round(trace.wall_seconds, 6)}
        )
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump(
            {"baseline": cfg["baseline"], "steps": steps, "per_record": timing,
             "total_seconds": round(sum(t["seconds"] for t in timing), 6)},
            f, indent=2,
        )
        f.write("\n")
    print(f"sampled {len(records)} records with {steps} steps each -> {out}")
    return 0


# --- eval ----------------------------------------------------------------------

EVAL_DEFAULTS = {
    "pred": None,
    "data": None,
    "split": "test",
    "out": None,
    "tau": 0.5,
    "compare": None,
}


def _quality_rows(preds: dict[str, np.ndarray], records: list) -> list[dict]:
    rows = []
    for rec in records:
        pred = preds[rec.record_id]
        for i, ch in enumerate(data.FLUOR_CHANNELS):
            a = data.to_255(pred[i])
            b = data.to_255(rec.fluor[i])
            rows.append(
                {"id": rec.record_id, "channel": ch, "mse": metrics.mse(a, b),
                 "psnr": metrics.psnr(a, b), "ssim": metrics.ssim(a, b)}
            )
    return rows


def _match_rows(preds, records, tau):
    # both sides go through the same boundary -> instance conversion, so a
    # perfect boundary prediction scores exactly 1 despite the 1-px band
    rows, agg = [], {}
    pred_insts = {ch: [] for ch in data.SEG_CHANNELS}
    gt_insts = {ch: [] for ch in data.SEG_CHANNELS}
    for rec in records:
        pred = preds[rec.record_id]
        for i, ch in enumerate(data.SEG_CHANNELS):
            pred_inst = boundaries.boundary_to_instances(pred[5 + i])
            gt_inst = boundaries.boundary_to_instances(rec.seg[i])
            rep = metrics.match_instances(pred_inst, gt_inst, tau=tau)
            rows.append({"id": rec.record_id, "channel": ch, **rep.as_dict()})
            a = agg.setdefault(ch, {"n_true": 0, "n_pred": 0, "tp": 0, "sum_iou": 0.0})
            a["n_true"] += rep.n_true
            a["n_pred"] += rep.n_pred
            a["tp"] += rep.tp
            a["sum_iou"] += rep.sum_iou_matched
            pred_insts[ch].append(pred_inst)
            gt_insts[ch].append(gt_inst)
    aggregate = {
        ch: metrics.MatchReport.from_counts(tau, a["n_true"], a["n_pred"], a["tp"], a["sum_iou"]).as_dict()
        for ch, a in agg.items()
    }
    counts = {}
    for ch in data.SEG_CHANNELS:
        if len(gt_insts[ch]) >= 3:
            counts[ch] = metrics.count_correlation(pred_insts[ch], gt_insts[ch])
    return rows, aggregate, counts


def _write_tsv(path, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(_fmt_cell(r[c]) for c in cols) + "\n")


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.10g}"
    return str(v)


def _summarize_quality(rows: list[dict]) -> dict:
    out = {}
    for ch in data.FLUOR_CHANNELS:
        per = {}
        for m in ("mse", "psnr", "ssim"):
            vals = [r[m] for r in rows if r["channel"] == ch]
            finite = [v for v in vals if math.isfinite(v)]
            if not finite:
                per[m] = {"mean": math.inf if vals else math.nan, "std": 0.0, "n_inf": len(vals)}
            else:
                per[m] = {
                    "mean": float(np.mean(finite)),
                    "std": float(np.std(finite)),
                    "n_inf": len(vals) - len(finite),
                }
        out[ch] = per
    return out


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    for key in ("pred", "data", "out"):
        if not cfg[key]:
            _fail(f"--{key} is required")
    if not os.path.isdir(cfg["pred"]):
        _fail(f"prediction directory {cfg['pred']} does not exist")
    if not os.path.isdir(cfg["data"]):
        _fail(f"dataset directory {cfg['data']} does not exist")
    tau = float(cfg["tau"])

    records = data.load_directory(cfg["data"], split=cfg["split"])
    records, excluded = data.exclusion_filter(records)
    preds = data.load_predictions(cfg["pred"])
    have = [r for r in records if r.record_id in preds]
    missing = [r.record_id for r in records if r.record_id not in preds]
    extra = sorted(set(preds) - {r.record_id for r in records})
    for rid in missing:
        print(f"warning: no prediction for {rid}, skipped", file=sys.stderr)
    for rid in extra:
        print(f"warning: prediction {rid} has no ground truth, skipped", file=sys.stderr)
    if not have:
        raise RuntimeError("no overlapping record ids between predictions and ground truth")

    out = _prepare_out(cfg, "eval", force=bool(getattr(args, "force", False)))
    qrows = _quality_rows(preds, have)
    mrows, magg, counts = _match_rows(preds, have, tau)
    _write_tsv(os.path.join(out, "quality.tsv"), qrows)
    _write_tsv(os.path.join(out, "matching.tsv"), mrows)

    summary = {
        "n_records": len(have),
        "excluded_black": excluded,
        "skipped_missing_prediction": missing,
        "tau": tau,
        "image_quality": _summarize_quality(qrows),
        "matching": magg,
        "count_correlation": counts,
    }
    if cfg["compare"]:
        from scipy import stats

        other = data.load_predictions(cfg["compare"])
        both = [r for r in have if r.record_id in other]
        if len(both) >= 2:
            orows = _quality_rows(other, both)
            pvals = {}
            for ch in data.FLUOR_CHANNELS:
                pvals[ch] = {}
                for m in ("mse", "psnr", "ssim"):
                    a = [r[m] for r in qrows if r["channel"] == ch and math.isfinite(r[m])
                         and r["id"] in {x.record_id for x in both}]
                    b = [r[m] for r in orows if r["channel"] == ch and math.isfinite(r[m])]
                    if len(a) >= 2 and len(b) >= 2:
                        pvals[ch][m] = float(stats.ttest_ind(a, b).pvalue)
                    else:
                        pvals[ch][m] = math.nan
            summary["t_test_p_vs_compare"] = pvals
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(_jsonable(summary), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"evaluated {len(have)} records -> {out}")
    return 0


# --- schedule ------------------------------------------------------------------

SCHEDULE_DEFAULTS = {
    "T": 15,
    "p": 0.3,
    "kappa": 2.0,
    "eta1": 1e-4,
    "etaT": 0.9999,
    "t1_weight": 1.0,
    "out": None,
}


def cmd_schedule(args) -> int:
    cfg = _resolve(args, SCHEDULE_DEFAULTS)
    s = build_schedule(_schedule_from(cfg))
    header = (
        f"# T={s.T} p={s.config.p} kappa={s.config.kappa} "
        f"eta1={s.config.eta_1} etaT={s.config.eta_T}\n"
    )
    lines = [header, "t,eta,alpha,loss_weight\n"]
    for t, eta, alpha, w in schedule_rows(s, t1_fallback=float(cfg["t1_weight"])):
        lines.append(f"{t},{eta:.12g},{alpha:.12g},{w:.12g}\n")
    if cfg["out"]:
        out = _prepare_out(cfg, "schedule", force=bool(getattr(args, "force", False)))
        with open(os.path.join(out, "schedule.csv"), "w") as f:
            f.writelines(lines)
        print(f"wrote schedule table to {out}/schedule.csv")
    else:
        sys.stdout.write("".join(lines))
    return 0


# --- parser --------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value lines, or a run.json)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", default=None,
                   help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resdiff",
        description="Residual-shift diffusion for brightfield-to-fluorescence translation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="train,val,test fractions (default 0.7,0.15,0.15)")
    p.add_argument("--png", action="store_true", default=None)
    p.add_argument("--min-sep", dest="min_sep", type=float)
    p.add_argument("--cells", help="min,max cells per image")
    p.add_argument("--cell-axes", dest="cell_axes", help="min,max cell semi-axis in px")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--weighting", action="store_true", default=None,
                   help="use the schedule loss weight instead of uniform")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--T", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--etaT", type=float)
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--time-dim", dest="time_dim", type=int)
    p.add_argument("--no-attention", dest="attention", action="store_false", default=None)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize records from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--steps", type=int, help="reverse steps (ddpm baseline defaults to 1000)")
    p.add_argument("--baseline", choices=["residual", "ddpm"])
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--no-png", dest="png", action="store_false", default=None)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--tau", type=float)
    p.add_argument("--compare", help="second prediction directory for t-tests")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="dump the shifting schedule as CSV")
    _add_common(p)
    p.add_argument("--T", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--etaT", type=float)
    p.add_argument("--t1-weight", dest="t1_weight", type=float)
    p.set_defaults(func=cmd_schedule)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit code 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
