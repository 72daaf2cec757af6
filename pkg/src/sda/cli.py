"""Batch pipeline driver: generate, train, bias-correct, downscale, evaluate.

Exit codes: 0 success, 2 configuration errors, 3 missing inputs, 4 shape or
precondition violations, 5 numerical failure. Every command derives all of
its randomness from one seed and writes the fully resolved configuration
alongside its outputs, so re-running reproduces outputs byte for byte
(manifest timestamps aside).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, RunConfig, data_dir
from .errors import (DataError, DomainError, FormatError, NumericalError, SdaError,
                     ShapeError)
from .fields import (NormStats, TrajectoryTensor, VariableMask, denormalize,
                     read_trajectory, write_trajectory)
from .nets import (Checkpoint, TrainConfig, checkpoint_digest, load_checkpoint,
                   save_checkpoint, train)
from .observation import (CoarseObservation, ObservationSpec, apply_operator, coarsen,
                          normalize_observation, observed_shape, read_observation,
                          write_observation)
from .quantile import QuantileMap, apply_qm, bcsd, fit_qm, read_quantile_map, write_quantile_map
from .sampler import SamplerConfig, sample
from .sequence import ComposeConfig
from .synth import SynthConfig, generate as synth_generate, make_pair

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SHAPE = 4
EXIT_NUMERIC = 5


def _parse_mask(text: str, v: int) -> VariableMask:
    if text == "all":
        return VariableMask.all_true(v)
    if text == "none":
        return VariableMask.all_false(v)
    bits = [tok.strip() for tok in text.split(",")]
    if len(bits) != v:
        raise ConfigError(f"mask has {len(bits)} entries for V={v}")
    return VariableMask(tuple(tok in ("1", "true", "yes") for tok in bits))


def _noise_std(values: tuple[float, ...], v: int) -> np.ndarray:
    if len(values) == 1:
        return np.full(v, values[0])
    if len(values) != v:
        raise ConfigError(f"noise_std has {len(values)} entries for V={v}")
    return np.array(values)


def _observation_spec(cfg: RunConfig, v: int) -> ObservationSpec:
    obs = cfg["observe"]
    return ObservationSpec(
        block=obs["block"], stride_t=obs["stride_t"],
        noise_std=_noise_std(obs["noise_std"], v),
        mask=_parse_mask(obs["mask"], v), phase=obs["phase"],
    )


def _synth_config(cfg: RunConfig) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(
        l=d["l"], v=d["v"], h=d["h"], w=d["w"], process=d["process"],
        advect=d["advect"], length_scale=d["length_scale"], time_scale=d["time_scale"],
        shared_weight=d["shared_weight"], diurnal_amplitude=d["diurnal_amplitude"],
        diurnal_period_hours=d["diurnal_period_hours"], dt_hours=d["dt_hours"],
        seed=d["seed"], var_names=d["var_names"],
    )


def _write_resolved(cfg: RunConfig, out: Path, command: str) -> None:
    (out / f"resolved_{command}.ini").write_text(cfg.resolved_ini(), encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


def cmd_generate(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    scfg = _synth_config(cfg)
    spec = _observation_spec(cfg, scfg.v)
    fine, coarse = make_pair(scfg, spec)
    obs_names = tuple(fine.var_names[i] for i in spec.mask.indices)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / cfg.get("data", "fine"), fine)
    write_observation(out / cfg.get("data", "coarse"), coarse, obs_names, fine.dt_hours)
    files = {"fine": cfg.get("data", "fine"), "coarse": cfg.get("data", "coarse")}
    shift, scale = cfg.get("data", "bias_shift"), cfg.get("data", "bias_scale")
    if shift or scale:
        shift = np.array(shift if shift else (0.0,) * scfg.v)
        scale = np.array(scale if scale else (1.0,) * scfg.v)
        if shift.shape[0] != scfg.v or scale.shape[0] != scfg.v:
            raise ConfigError("bias_shift/bias_scale need one entry per variable")
        twin = synth_generate(dataclasses.replace(scfg, seed=scfg.seed + 7919))
        distorted = twin.data * scale[None, :, None, None] + shift[None, :, None, None]
        biased = coarsen(twin.with_data(distorted), spec)
        write_observation(out / cfg.get("data", "coarse_biased"), biased,
                          obs_names, fine.dt_hours)
        files["coarse_biased"] = cfg.get("data", "coarse_biased")
    manifest = {
        "command": "generate", "seed": scfg.seed, "files": files,
        "fine_dims": list(fine.dims), "coarse_dims": list(coarse.data.shape),
        "information_ratio": spec.block ** 2 * spec.stride_t,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "generate_manifest.json").write_text(json.dumps(manifest, indent=2))
    _write_resolved(cfg, out, "generate")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    fine = read_trajectory(_require(out / cfg.get("data", "fine")))
    tcfg = TrainConfig(
        k=cfg.get("model", "k"), epochs=cfg.get("train", "epochs"),
        batch=cfg.get("train", "batch"), lr=cfg.get("train", "lr"),
        seed=cfg.get("train", "seed"), hidden=cfg.get("model", "hidden"),
    )
    ckpt_path = out / cfg.get("train", "checkpoint")
    start = None
    if cfg.get("train", "resume"):
        start = load_checkpoint(_require(ckpt_path))
    losses: list[tuple[int, float]] = []
    ckpt = train(fine, tcfg, start=start, on_step=lambda s, l: losses.append((s, l)))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, ckpt)
    mode = "a" if start is not None else "w"
    with open(out / cfg.get("train", "loss_log"), mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write("step,loss\n")
        for step, loss in losses:
            fh.write(f"{step},{loss!r}\n")
    _write_resolved(cfg, out, "train")
    return EXIT_OK


def cmd_bias_correct(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    src_y, src_names, src_dt = read_observation(_require(out / cfg.get("bias", "source")))
    ref_y, ref_names, _ = read_observation(_require(out / cfg.get("bias", "reference")))
    src = TrajectoryTensor(src_y.data, src_names, src_dt * src_y.spec.stride_t)
    ref = TrajectoryTensor(ref_y.data, ref_names, src_dt * ref_y.spec.stride_t)
    pooling = cfg.get("bias", "pooling") or None
    cycle = cfg.get("bias", "cycle_len") or None
    qm = fit_qm(src, ref, n_q=cfg.get("bias", "n_q"), pooling=pooling, cycle_len=cycle)
    corrected = apply_qm(src, qm)
    out.mkdir(parents=True, exist_ok=True)
    write_quantile_map(out / cfg.get("bias", "qm_table"), qm)
    fixed = CoarseObservation(corrected.data, src_y.spec, src_y.origin_l)
    write_observation(out / cfg.get("bias", "corrected"), fixed, src_names, src_dt)
    _write_resolved(cfg, out, "bias-correct")
    return EXIT_OK


def _one_sample(index: int, ckpt: Checkpoint, y_norm, y_phys, scfg_base: SamplerConfig,
                compose: ComposeConfig, l: int, shape, out: Path, prefix: str):
    seed = scfg_base.seed + index
    scfg = dataclasses.replace(scfg_base, seed=seed)
    traj = sample(ckpt.network(), l, shape, y=y_norm, cfg=scfg, compose=compose,
                  var_names=ckpt.var_names, dt_hours=ckpt.dt_hours)
    phys = denormalize(traj, ckpt.stats)
    path = out / f"{prefix}_{index:03d}.sdat"
    write_trajectory(path, phys)
    record = {"sample": path.name, "seed": seed, "steps": scfg.steps,
              "guidance_scale": scfg.guidance_scale,
              "corrector_steps": scfg.corrector_steps, "corrector_snr": scfg.corrector_snr}
    if y_phys is not None:
        resid = y_phys.data.astype(np.float64) - apply_operator(phys.data, y_phys.spec)
        scaled = resid / y_phys.spec.noise_std[y_phys.spec.mask.indices][None, :, None, None]
        record["residual_rms_per_var"] = [
            float(np.sqrt((scaled[:, i] ** 2).mean())) for i in range(scaled.shape[1])
        ]
    return record


def cmd_downscale(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    ckpt_path = _require(out / cfg.get("train", "checkpoint"))
    ckpt = load_checkpoint(ckpt_path)
    s = cfg["sample"]
    scfg = SamplerConfig(steps=s["steps"], guidance_scale=s["guidance_scale"],
                         corrector_steps=s["corrector_steps"],
                         corrector_snr=s["corrector_snr"], seed=s["seed"])
    compose = ComposeConfig(k=ckpt.k, batch_windows=s["batch_windows"])
    y_phys = None
    if s["unconditional"]:
        l = cfg.get("data", "l")
        h, w = cfg.get("data", "h"), cfg.get("data", "w")
    else:
        y_phys, _, _ = read_observation(_require(out / cfg.get("data", "coarse")))
        mask = _parse_mask(cfg.get("observe", "mask"), ckpt.v)
        y_phys = _remask(y_phys, mask)
        y_phys = _with_noise(y_phys, _noise_std(cfg.get("observe", "noise_std"), ckpt.v))
        l = y_phys.origin_l
        h = y_phys.data.shape[2] * y_phys.spec.block
        w = y_phys.data.shape[3] * y_phys.spec.block
    y_norm = None
    if y_phys is not None and y_phys.spec.mask.count > 0:
        y_norm = normalize_observation(y_phys, ckpt.stats)
    elif y_phys is not None:
        y_phys = None  # empty mask: unconditional sampling
    shape = (ckpt.v, h, w)
    n = s["n_samples"]
    out.mkdir(parents=True, exist_ok=True)
    args = [(i, ckpt, y_norm, y_phys, scfg, compose, l, shape, out, s["out_prefix"])
            for i in range(n)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(lambda a: _one_sample(*a), args))
    else:
        records = [_one_sample(*a) for a in args]
    digest = checkpoint_digest(ckpt_path)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(out / s["manifest"], "w", encoding="utf-8") as fh:
        for record in records:
            record["checkpoint_sha256"] = digest
            record["created_at"] = stamp
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _write_resolved(cfg, out, "downscale")
    return EXIT_OK


def _remask(y: CoarseObservation, mask: VariableMask) -> CoarseObservation:
    """Restrict a stored observation to a sub-mask of its variables."""
    old = y.spec.mask
    if mask.included == old.included:
        return y
    for want, have in zip(mask.included, old.included):
        if want and not have:
            raise DataError("mask requests a variable absent from the observation file")
    keep = [i for i, idx in enumerate(old.indices) if mask.included[idx]]
    spec = dataclasses.replace(y.spec, mask=mask)
    return CoarseObservation(y.data[:, keep], spec, y.origin_l)


def _with_noise(y: CoarseObservation, noise_std: np.ndarray) -> CoarseObservation:
    spec = dataclasses.replace(y.spec, noise_std=noise_std)
    return CoarseObservation(y.data, spec, y.origin_l)


def _discover_samples(out: Path, prefix: str, n: int) -> list[Path]:
    if n > 0:
        paths = [out / f"{prefix}_{i:03d}.sdat" for i in range(n)]
        for p in paths:
            _require(p)
        return paths
    paths = sorted(out.glob(f"{prefix}_[0-9][0-9][0-9].sdat"))
    if not paths:
        raise FileNotFoundError(f"no sample files matching {prefix}_*.sdat under {out}")
    return paths


def cmd_evaluate(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    e = cfg["eval"]
    truth = read_trajectory(_require(out / e["truth"]))
    sample_paths = _discover_samples(out, e["samples"], e["n_samples"])
    members = [read_trajectory(p) for p in sample_paths]
    for m in members:
        if m.dims != truth.dims:
            raise ShapeError(f"sample dims {m.dims} != truth dims {truth.dims}")
    l, v, h, w = truth.dims
    rng = np.random.default_rng(e["seed"])
    report = metrics.MetricReport()
    stack = np.stack([m.data for m in members])  # (N, L, V, H, W)

    for vi, name in enumerate(truth.var_names):
        tru_fields = truth.data[:, vi].astype(np.float64)
        pred_fields = stack[:, :, vi].reshape(-1, h, w).astype(np.float64)
        report.scalars[f"sliced_w1/{name}"] = metrics.sliced_w1(
            pred_fields, tru_fields, n_slices=e["n_slices"], seed=e["seed"])
        ks_axis, ref_curve = metrics.mean_rapsd(tru_fields)
        _, pred_curve = metrics.mean_rapsd(pred_fields)
        report.scalars[f"melr/{name}"] = metrics.melr(pred_curve, ref_curve)
        report.curves[f"rapsd/{name}"] = {
            "wavenumber": ks_axis.tolist(),
            "truth": ref_curve.tolist(),
            "prediction": pred_curve.tolist(),
        }
        rng_range = float(tru_fields.max() - tru_fields.min()) or 1.0
        vals = [metrics.ssim(stack[si, ti, vi], truth.data[ti, vi],
                             window=e["ssim_window"], data_range=rng_range)
                for si in range(len(members)) for ti in range(l)]
        report.scalars[f"ssim/{name}"] = float(np.mean(vals))

    if len(members) >= 2:  # rank calibration needs an ensemble
        cell_count = min(e["pit_cells"], l * h * w) if e["pit_cells"] else l * h * w
        pit_all = []
        for vi, name in enumerate(truth.var_names):
            cells = rng.choice(l * h * w, size=cell_count, replace=False)
            hist, values = metrics.pit(stack[:, :, vi], truth.data[:, vi], cells=cells,
                                       bins=e["pit_bins"], rng=rng)
            pit_all.append(values)
            report.scalars[f"pit_ks/{name}"] = metrics.ks_uniform(values)
            report.curves[f"pit/{name}"] = {
                "bin": list(range(e["pit_bins"])), "mass": hist.tolist()}
        all_values = np.concatenate(pit_all)
        report.scalars["pit_ks/all"] = metrics.ks_uniform(all_values)

    wind_u, wind_v = e["wind_u"], e["wind_v"]
    if wind_u and wind_v:
        if wind_u not in truth.var_names or wind_v not in truth.var_names:
            raise DataError(f"wind variables {wind_u!r}/{wind_v!r} not in {truth.var_names}")
        iu, iv = truth.var_names.index(wind_u), truth.var_names.index(wind_v)
        curve = metrics.PowerCurve()
        speeds_tru = metrics.wind_speed(truth.data[:, iu], truth.data[:, iv])
        speeds_pred = metrics.wind_speed(stack[:, :, iu], stack[:, :, iv])
        wp_tru = metrics.wind_power(speeds_tru, curve)
        wp_pred = metrics.wind_power(speeds_pred, curve)
        report.scalars["wind_power/truth"] = wp_tru.expected_power
        report.scalars["wind_power/prediction"] = wp_pred.expected_power
        per_frame_tru = curve(speeds_tru).mean(axis=(1, 2))
        per_frame_pred = curve(speeds_pred).mean(axis=(0, 2, 3))
        report.curves["wind_power_cumulative"] = {
            "frame": list(range(l)),
            "truth": (np.cumsum(per_frame_tru) / l).tolist(),
            "prediction": (np.cumsum(per_frame_pred) / l).tolist(),
        }

    if e["baseline"]:
        y, names, dt = read_observation(_require(out / e["coarse"]))
        base = bcsd(y, None, l, h, w, var_names=names, dt_hours=dt)
        for vi, name in enumerate(names):
            report.scalars[f"sliced_w1_bcsd/{name}"] = metrics.sliced_w1(
                base.data[:, vi].astype(np.float64), truth.data[:, vi].astype(np.float64),
                n_slices=e["n_slices"], seed=e["seed"])

    report.validate()
    out.mkdir(parents=True, exist_ok=True)
    (out / e["report"]).write_text(report.to_json(), encoding="utf-8")
    (out / e["schema"]).write_text(json.dumps(metrics.REPORT_SCHEMA, indent=2),
                                   encoding="utf-8")
    for curve_name in report.curves:
        safe = curve_name.replace("/", "_")
        (out / f"curve_{safe}.csv").write_text(report.curve_csv(curve_name),
                                               encoding="utf-8")
    _write_resolved(cfg, out, "evaluate")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "bias-correct": cmd_bias_correct,
    "downscale": cmd_downscale,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sda", description="Generative downscaling pipeline driver.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config entry (repeatable)")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command's seed")
        p.add_argument("--out-dir", default=None,
                       help="output root (default: $SDA_DATA_DIR or .)")
    return parser


_SEED_KEY = {"generate": "data.seed", "train": "train.seed", "downscale": "sample.seed"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    overrides = list(args.set)
    if args.seed is not None and args.command in _SEED_KEY:
        overrides.append(f"{_SEED_KEY[args.command]}={args.seed}")
    try:
        cfg = RunConfig.load(args.config, overrides)
        code = COMMANDS[args.command](cfg, data_dir(args.out_dir), jobs=args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ShapeError, DataError, DomainError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
