"""Command-line surface: synth, stmap, pretrain, finetune, probe, eval,
ablate, plot.

Every command is driven by a JSON config (--config) with strict
unknown-key rejection, is idempotent under identical config+seed, and
echoes the effective config into its output directory. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure; errors are
emitted as one JSON object on stderr.

Spectral note for finetune/eval: the frequency cross-entropy reads HR
from clips of length T at rate fs, so its bin resolution is limited by
the clip duration (about 60/(T/fs) bpm of leakage around the true rate).
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline, stmap, svgplot
from .errors import ConfigError, DataError, RppgLabError
from .nn.checkpoint import load_checkpoint
from .objectives import make_recon_target, pretrain_loss
from .pipeline import ProtocolBundle, TrainConfig
from .stmap import STMap, Variant, make_mask_plan, patchify, unpatchify
from .synthgen import SynthConfig, gen_bvp, gen_roi_traces

CACHE_ENV = "RPPG_LAB_CACHE"

# RunConfig schema: section -> allowed keys. Defaults follow the paper's
# published settings; desk runs override sizes explicitly.
SCHEMA = {
    "seed": None,
    "out_dir": None,
    "synth": {
        "subjects",
        "clips_per_subject",
        "duration_s",
        "fs",
        "n_rois",
        "hr_range",
        "rf_range",
        "pulse_amp_rgb",
        "illum_drift_amp",
        "motion_noise_std",
        "white_noise_std",
    },
    "stmap": {"variant", "clip_len", "step", "aug_channels", "pos_win_s"},
    "train": {
        "stage",
        "epochs",
        "batch_size",
        "base_lr",
        "warmup_epochs",
        "betas",
        "weight_decay",
        "layer_decay",
        "mask_ratio",
        "lambda",
        "gamma",
        "numeric_mode",
        "profile",
        "ckpt_every",
    },
    "protocol": {"name", "folds", "labeled_fraction", "ablate_axis", "ablate_values", "video_mean"},
    "data": {"train_dir", "test_dir"},
}

SYNTH_DEFAULTS = {
    "subjects": 5,
    "clips_per_subject": 1,
    "duration_s": 30.0,
    "fs": 30.0,
    "n_rois": 25,
    "hr_range": [50.0, 110.0],
    "rf_range": [0.18, 0.35],
    "pulse_amp_rgb": [0.5, 1.0, 0.5],
    "illum_drift_amp": 0.0,
    "motion_noise_std": 0.0,
    "white_noise_std": 0.0,
}

STMAP_DEFAULTS = {"variant": "PC", "clip_len": 224, "step": 5, "aug_channels": "eq1", "pos_win_s": 1.6}


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    validate_keys(cfg)
    return cfg


def validate_keys(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for key, value in cfg.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'; legal: {', '.join(sorted(SCHEMA))}")
        allowed = SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{key}' must be an object")
        for sub in value:
            if sub not in allowed:
                raise ConfigError(f"unknown key '{key}.{sub}'; legal: {', '.join(sorted(allowed))}")


def train_config_from(cfg: dict, args) -> TrainConfig:
    sec = dict(cfg.get("train", {}))
    stage = sec.pop("stage", "pretrain")
    if stage == "pretrain":
        tc = TrainConfig.pretrain_defaults()
    elif stage == "finetune":
        tc = TrainConfig.finetune_defaults()
    elif stage == "probe":
        tc = TrainConfig.probe_defaults()
    else:
        raise ConfigError(f"unknown train.stage '{stage}'")
    if "lambda" in sec:
        sec["lam"] = sec.pop("lambda")
    if "betas" in sec:
        sec["betas"] = tuple(sec["betas"])
    tc = replace(tc, **sec)
    tc = replace(tc, seed=int(cfg.get("seed", tc.seed)))
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.f64:
        tc = replace(tc, numeric_mode="f64")
    tc.validate()
    return tc


def _echo_config(out_dir: Path, cfg: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "config": cfg}
    (out_dir / "config_echo.json").write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: dict, out_dir: Path, seed: int) -> None:
    sec = {**SYNTH_DEFAULTS, **cfg.get("synth", {})}
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(pipeline.stable_seed(seed, "synth"))
    entries = []
    for s in range(int(sec["subjects"])):
        hr = float(rng.uniform(*sec["hr_range"]))
        rf = float(rng.uniform(*sec["rf_range"]))
        for c in range(int(sec["clips_per_subject"])):
            scfg = SynthConfig(
                hr_bpm=hr,
                rf_hz=rf,
                duration_s=float(sec["duration_s"]),
                fs=float(sec["fs"]),
                n_rois=int(sec["n_rois"]),
                pulse_amp_rgb=tuple(sec["pulse_amp_rgb"]),
                illum_drift_amp=float(sec["illum_drift_amp"]),
                motion_noise_std=float(sec["motion_noise_std"]),
                white_noise_std=float(sec["white_noise_std"]),
                seed=pipeline.stable_seed(seed, "trace", s, c),
            )
            traces = gen_roi_traces(gen_bvp(scfg), scfg)
            name = f"subj{s:03d}_clip{c:02d}.roit"
            stmap.write_traces(out_dir / name, traces)
            entries.append(
                {
                    "file": name,
                    "subject": f"subj{s:03d}",
                    "hr_gt": hr,
                    "rf_gt": rf,
                    "fs": scfg.fs,
                    "frames": traces.n_frames,
                }
            )
    manifest = {"files": entries, "synth": sec, "seed": seed, "created_unix": time.time()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(entries)} trace files to {out_dir}")


def load_trace_dataset(data_dir) -> list[tuple[str, "object"]]:
    """[(subject_id, RoiTraceSet)] from a directory of ROIT files.

    A synth manifest supplies subject grouping; otherwise each file is
    its own subject.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    manifest_path = data_dir / "manifest.json"
    out = []
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for entry in manifest["files"]:
            out.append((entry["subject"], stmap.read_traces(data_dir / entry["file"])))
    else:
        for path in sorted(data_dir.glob("*.roit")):
            out.append((path.stem, stmap.read_traces(path)))
    if not out:
        raise DataError(f"no .roit traces found in {data_dir}")
    return out


def _cache_key(traces_blob: bytes, stmap_sec: dict) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(traces_blob)
    h.update(json.dumps(stmap_sec, sort_keys=True).encode())
    return h.hexdigest()


def build_clipsets(cfg: dict, data_dir) -> list:
    """Directory of traces -> StmapClipSet list, honoring RPPG_LAB_CACHE."""
    sec = {**STMAP_DEFAULTS, **cfg.get("stmap", {})}
    variant = Variant.parse(sec["variant"])
    pairs = load_trace_dataset(data_dir)
    cache_root = os.environ.get(CACHE_ENV)
    sets = []
    grouped: dict[str, list] = {}
    for sid, tr in pairs:
        grouped.setdefault(sid, []).append(tr)
    for sid in sorted(grouped):
        for i, tr in enumerate(grouped[sid]):
            source = sid if len(grouped[sid]) == 1 else f"{sid}#{i}"
            cache_file = None
            if cache_root:
                key = _cache_key(tr.traces.tobytes(), sec)
                cache_file = Path(cache_root) / f"{key}.npz"
                if cache_file.exists():
                    blob = np.load(cache_file, allow_pickle=False)
                    clips = [
                        STMap(data=blob[f"clip{k}"], fs=float(blob["fs"]), variant=variant)
                        for k in range(int(blob["n_clips"]))
                    ]
                    labels = [blob[f"label{k}"] for k in range(int(blob["n_clips"]))] if "label0" in blob else None
                    sets.append(
                        stmap.StmapClipSet(
                            clips=clips,
                            source_id=source,
                            labels=labels,
                            hr_gt=float(blob["hr_gt"]) if "hr_gt" in blob else None,
                            rf_gt=float(blob["rf_gt"]) if "rf_gt" in blob else None,
                        )
                    )
                    continue
            made = pipeline.make_clipset(
                tr, source, variant, int(sec["clip_len"]), int(sec["step"]), sec["aug_channels"]
            )
            sets.append(made)
            if cache_file is not None:
                cache_file.parent.mkdir(parents=True, exist_ok=True)
                payload = {"n_clips": len(made.clips), "fs": made.clips[0].fs}
                for k, clip in enumerate(made.clips):
                    payload[f"clip{k}"] = clip.data
                if made.labels is not None:
                    for k, lab in enumerate(made.labels):
                        payload[f"label{k}"] = lab
                    payload["hr_gt"] = made.hr_gt
                    payload["rf_gt"] = made.rf_gt
                np.savez(cache_file, **payload)
    return sets


def cmd_stmap(cfg: dict, data_dir, out_dir: Path) -> None:
    sec = {**STMAP_DEFAULTS, **cfg.get("stmap", {})}
    variant = Variant.parse(sec["variant"])
    pairs = load_trace_dataset(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, tr in pairs:
        made = pipeline.make_clipset(
            tr, sid, variant, int(sec["clip_len"]), int(sec["step"]), sec["aug_channels"]
        )
        for k, clip in enumerate(made.clips):
            name = f"{sid}_{k:03d}.stmp"
            stmap.write_stmap(out_dir / name, clip)
            entries.append(
                {
                    "file": name,
                    "subject": sid,
                    "clip_index": k,
                    "col_start": k * int(sec["step"]),
                    "hr_gt": made.hr_gt,
                    "rf_gt": made.rf_gt,
                }
            )
    manifest = {"files": entries, "stmap": sec, "created_unix": time.time()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(entries)} STMap clips to {out_dir}")


# ---------------------------------------------------------------------------
# training commands


def cmd_pretrain(cfg: dict, args, out_dir: Path) -> None:
    tc = train_config_from(cfg, args)
    sets = build_clipsets(cfg, cfg.get("data", {}).get("train_dir") or args.data)
    _echo_config(out_dir, cfg, "pretrain")
    model, history = pipeline.pretrain(sets, tc, out_dir=out_dir, resume=args.resume)
    _dump_reconstruction_triplet(model, sets, tc, out_dir)
    print(f"pretrain done: {len(history)} epochs, final loss {history[-1]:.6f}")


def _dump_reconstruction_triplet(model, sets, tc: TrainConfig, out_dir: Path) -> None:
    """Original / masked / reconstructed STMaps of the first clip."""
    clip = sets[0].clips[0]
    data = np.asarray(clip.data, dtype=np.float64)
    plan = make_mask_plan(
        data.shape[0], model.enc_cfg.patch_size, tc.mask_ratio, pipeline.stable_seed(tc.seed, "viz")
    )
    patches = patchify(data, model.enc_cfg.patch_size)
    pred = model.reconstruct(patches, plan).data
    masked = patches.copy()
    masked[plan.masked_indices] = 0.5
    recon = patches.copy()
    recon[plan.masked_indices] = pred[plan.masked_indices]
    for name, arr in (("original", patches), ("masked", masked), ("reconstructed", recon)):
        m = STMap(
            data=np.clip(unpatchify(arr, model.enc_cfg.patch_size, data.shape[2]), 0, 1),
            fs=clip.fs,
            variant=clip.variant,
        )
        stmap.write_stmap(out_dir / f"recon_{name}.stmp", m)


def cmd_finetune(cfg: dict, args, out_dir: Path) -> None:
    tc = train_config_from(cfg, args)
    if tc.stage == "pretrain":
        tc = replace(TrainConfig.finetune_defaults(), seed=tc.seed, numeric_mode=tc.numeric_mode)
    sets = build_clipsets(cfg, cfg.get("data", {}).get("train_dir") or args.data)
    init = None if args.init in (None, "random") else args.init
    _echo_config(out_dir, cfg, "finetune")
    model, history = pipeline.finetune(sets, tc, init=init, out_dir=out_dir)
    print(f"finetune done: final loss {history[-1]:.6f}")


def cmd_probe(cfg: dict, args, out_dir: Path) -> None:
    tc = train_config_from(cfg, args)
    if tc.stage != "probe":
        tc = replace(TrainConfig.probe_defaults(), seed=tc.seed, numeric_mode=tc.numeric_mode)
    train_dir = cfg.get("data", {}).get("train_dir") or args.data
    test_dir = cfg.get("data", {}).get("test_dir")
    sets = build_clipsets(cfg, train_dir)
    test_sets = build_clipsets(cfg, test_dir) if test_dir else None
    _echo_config(out_dir, cfg, "probe")
    _, report = pipeline.linear_probe(sets, tc, encoder_init=args.init, test_sets=test_sets)
    report.to_csv(out_dir / "probe.csv")
    report.to_json(out_dir / "probe.json", config_echo=cfg)
    print(f"probe done: mean_ae={report.mean_ae:.3f} r={report.pearson_r:.3f}")


def cmd_eval(cfg: dict, args, out_dir: Path) -> None:
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt")
    meta, params = load_checkpoint(args.ckpt)
    if meta.get("stage") != "finetune":
        raise ConfigError(f"eval expects a finetune checkpoint, got stage '{meta.get('stage')}'")
    data_dir = cfg.get("data", {}).get("test_dir") or args.data
    sets = build_clipsets(cfg, data_dir)
    first = sets[0].clips[0]
    tc = train_config_from(cfg, args)
    tc = replace(tc, profile=meta.get("profile", tc.profile))
    enc_cfg, _ = pipeline._profile_for(tc, first.data.shape[0], first.data.shape[2])
    from .nn.model import RppgRegressor

    model = RppgRegressor(enc_cfg, out_len=first.data.shape[0], seed=tc.seed, dtype=tc.numeric_mode)
    model.params.load(params)
    video_mean = bool(cfg.get("protocol", {}).get("video_mean", False)) or args.video_mean
    report = pipeline.evaluate_regressor(model, sets, video_mean=video_mean)
    _echo_config(out_dir, cfg, "eval")
    report.to_csv(out_dir / "metrics.csv")
    report.to_json(out_dir / "metrics.json", config_echo=cfg)
    _dump_waveforms(model, sets, out_dir)
    print(f"eval: mean_ae={report.mean_ae:.3f} rmse={report.rmse:.3f} r={report.pearson_r:.3f}")


def _dump_waveforms(model, sets, out_dir: Path, limit: int = 3) -> None:
    clips = pipeline.flatten_clips(sets, model.enc_cfg.patch_size)
    for c in clips[:limit]:
        if c.label is None:
            continue
        sig = model.forward(c.patches[None]).data[0]
        lines = ["t,pred,gt"]
        for i, (p, g) in enumerate(zip(sig, c.label)):
            lines.append(f"{i / c.fs:.6f},{p:.8g},{g:.8g}")
        safe = c.clip_id.replace("/", "_")
        (out_dir / f"waveform_{safe}.csv").write_text("\n".join(lines) + "\n")


def _ablate_one(payload):
    """Worker for one ablation grid point (runs in a separate process)."""
    cfg, value, data_dir, test_dir, seed, f64 = payload
    args = argparse.Namespace(seed=seed, f64=f64)
    bundle = _make_bundle(cfg, args, data_dir, test_dir)
    report = pipeline.ablate_point(bundle, value)
    return value, report.mean_ae, report.rmse, report.std, report.pearson_r


def _make_bundle(cfg: dict, args, data_dir, test_dir) -> ProtocolBundle:
    proto = cfg.get("protocol", {})
    train_sets = build_clipsets(cfg, data_dir)
    test_sets = build_clipsets(cfg, test_dir) if test_dir else None
    pre = train_config_from({**cfg, "train": {**cfg.get("train", {}), "stage": "pretrain"}}, args)
    fin_over = dict(cfg.get("train", {}))
    fin_over["stage"] = "finetune"
    fin_over.setdefault("epochs", 20)
    fin = train_config_from({**cfg, "train": fin_over}, args)
    sec = {**STMAP_DEFAULTS, **cfg.get("stmap", {})}
    traces = None
    if proto.get("ablate_axis") == "variant":
        traces = load_trace_dataset(data_dir)
    return ProtocolBundle(
        train=train_sets,
        test=test_sets,
        pretrain_cfg=pre,
        finetune_cfg=fin,
        probe_cfg=TrainConfig.probe_defaults(seed=pre.seed),
        labeled_fraction=float(proto.get("labeled_fraction", 0.1)),
        folds=int(proto.get("folds", 5)),
        ablate_axis=proto.get("ablate_axis", "mask_ratio"),
        ablate_values=tuple(proto.get("ablate_values", (0.5, 0.6, 0.7, 0.8, 0.9))),
        traces=traces,
        clip_len=int(sec["clip_len"]),
        clip_step=int(sec["step"]),
        aug_channels=sec["aug_channels"],
        video_mean=bool(proto.get("video_mean", False)),
    )


def cmd_ablate(cfg: dict, args, out_dir: Path) -> None:
    proto = cfg.get("protocol", {})
    axis = proto.get("ablate_axis", "mask_ratio")
    values = tuple(proto.get("ablate_values", (0.5, 0.6, 0.7, 0.8, 0.9)))
    data_dir = cfg.get("data", {}).get("train_dir") or args.data
    test_dir = cfg.get("data", {}).get("test_dir")
    _echo_config(out_dir, cfg, "ablate")
    rows = []
    if args.jobs > 1:
        payloads = [(cfg, v, data_dir, test_dir, args.seed, args.f64) for v in values]
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablate_one, payloads))
    else:
        for v in values:
            rows.append(_ablate_one((cfg, v, data_dir, test_dir, args.seed, args.f64)))
    lines = [f"{axis},mean_ae,rmse,std,r"]
    for value, mae, rmse, std, r in rows:
        lines.append(f"{value},{mae:.17g},{rmse:.17g},{std:.17g},{r:.17g}")
    (out_dir / "ablate.csv").write_text("\n".join(lines) + "\n")
    print(f"ablate over {axis}: {len(rows)} grid points -> {out_dir / 'ablate.csv'}")


def cmd_protocol(cfg: dict, args, out_dir: Path) -> None:
    proto = cfg.get("protocol", {})
    name = proto.get("name")
    if not name:
        raise ConfigError("protocol.name is required")
    data_dir = cfg.get("data", {}).get("train_dir") or args.data
    test_dir = cfg.get("data", {}).get("test_dir")
    bundle = _make_bundle(cfg, args, data_dir, test_dir)
    bundle.out_dir = out_dir
    _echo_config(out_dir, cfg, f"protocol:{name}")
    reports = pipeline.run_protocol(name, bundle)
    for rname, rep in sorted(reports.items()):
        print(f"{rname}: mean_ae={rep.mean_ae:.3f} rmse={rep.rmse:.3f} r={rep.pearson_r:.3f}")


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args, out_path: Path) -> None:
    kind = args.kind
    if kind == "loss":
        rows = [line.split(",") for line in Path(args.inputs[0]).read_text().strip().splitlines()[1:]]
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        svg = svgplot.line_chart([("loss", xs, ys)], "training loss", "epoch", "loss")
    elif kind == "waveform":
        rows = [line.split(",") for line in Path(args.inputs[0]).read_text().strip().splitlines()[1:]]
        t = [float(r[0]) for r in rows]
        pred = [float(r[1]) for r in rows]
        gt = [float(r[2]) for r in rows]
        svg = svgplot.line_chart(
            [("predicted", t, pred), ("ground truth", t, gt)], "rPPG prediction", "time (s)", "a.u."
        )
    elif kind == "reconstruction":
        if len(args.inputs) != 3:
            raise ConfigError("reconstruction plot needs three STMP paths: original masked reconstructed")
        maps = [stmap.read_stmap(p).data for p in args.inputs]
        svg = svgplot.stmap_triptych(maps, ["original", "masked", "reconstructed"])
    else:
        raise ConfigError(f"unknown plot kind '{kind}'")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg + "\n")
    print(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rppg-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (ablate)")
        p.add_argument("--resume", action="store_true", help="resume from the last checkpoint")
        p.add_argument("--f64", action="store_true", help="64-bit numerics")
        p.add_argument("--data", help="input data directory (overrides config data section)")

    for name in ("synth", "stmap", "pretrain", "finetune", "probe", "eval", "ablate", "protocol"):
        p = sub.add_parser(name)
        common(p)
        if name in ("finetune", "probe"):
            p.add_argument("--init", help="pre-training checkpoint, or 'random'")
        if name == "eval":
            p.add_argument("--ckpt", help="finetuned checkpoint to evaluate")
            p.add_argument("--video-mean", action="store_true", help="aggregate clips per video")

    p = sub.add_parser("plot")
    p.add_argument("--kind", required=True, choices=("loss", "waveform", "reconstruction"))
    p.add_argument("inputs", nargs="+", help="input CSV/STMP files")
    p.add_argument("--out", required=True, help="output SVG path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            cmd_plot(args, Path(args.out))
            return 0
        cfg = load_config(args.config) if args.config else {}
        if args.seed is not None:
            cfg["seed"] = args.seed
        seed = int(cfg.get("seed", 0))
        out_dir = Path(args.out or cfg.get("out_dir") or "out")
        if args.command == "synth":
            cmd_synth(cfg, out_dir, seed)
        elif args.command == "stmap":
            cmd_stmap(cfg, cfg.get("data", {}).get("train_dir") or args.data, out_dir)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args, out_dir)
        elif args.command == "finetune":
            cmd_finetune(cfg, args, out_dir)
        elif args.command == "probe":
            cmd_probe(cfg, args, out_dir)
        elif args.command == "eval":
            cmd_eval(cfg, args, out_dir)
        elif args.command == "ablate":
            cmd_ablate(cfg, args, out_dir)
        elif args.command == "protocol":
            cmd_protocol(cfg, args, out_dir)
        return 0
    except RppgLabError as err:
        sys.stderr.write(
            json.dumps({"error": type(err).__name__, "message": str(err)}, sort_keys=True) + "\n"
        )
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
