"""Command-line pipeline. Commands talk to each other only through files in ``--out``.

    hexsim phantom | simulate | reconstruct | dataset | train | infer |
           metrics | ablate | noise_sweep | report
           [--config FILE] [--seed N] [--out DIR] [--set section.key=value ...]
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import classical, core, metrology, neural, optics, phantoms
from .config import ConfigError, config_hash, load_config

log = logging.getLogger("hexsim")

COMMANDS = ("phantom", "simulate", "reconstruct", "dataset", "train", "infer",
            "metrics", "ablate", "noise_sweep", "report")
METRIC_COLUMNS = ["stack_id", "method", "fwhm_axial_nm", "fwhm_lateral_nm", "mse", "ssim",
                  "contrast", "fit_residual"]
LAYERED_KINDS = ("two_point", "gratings")


class PipelineError(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


class Run:
    """Resolved config plus path helpers for one command invocation."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.seed = int(cfg["seed"])
        self.micro = optics.MicroscopeConfig(**cfg["optics"])
        self.illum = optics.IlluminationSpec.for_microscope(self.micro, **cfg["illumination"])
        self.net = neural.NetConfig(**cfg["net"])

    def path(self, key) -> Path:
        p = Path(self.cfg["paths"][key])
        return p if p.is_absolute() else self.out / p

    def need(self, key) -> Path:
        p = self.path(key)
        if not p.exists():
            raise PipelineError(f"missing input '{p}' (paths.{key}); run the producing command first")
        return p

    @property
    def stack_id(self) -> str:
        return f"{self.cfg['phantom']['kind']}-{self.seed}"

    def recon_params(self) -> classical.ReconParams:
        return classical.ReconParams.from_setup(self.micro, self.illum, **self.cfg["recon"])

    def train_config(self, **kw) -> neural.TrainConfig:
        return neural.TrainConfig(seed=self.seed, **{**self.cfg["train"], **kw})


# -- phantoms ------------------------------------------------------------------------

def make_phantom(run: Run, seed: int) -> phantoms.PointCloud:
    ph = run.cfg["phantom"]
    kind = ph["kind"]
    if kind == "chromatin":
        m = run.micro
        box = (m.field_nm, m.field_nm, m.depth_nm) if ph["fill_field"] else tuple(ph["box_nm"])
        cloud = phantoms.gen_chromatin(seed, ph["n_steps"], ph["step_nm"], ph["persistence"],
                                       ph["emitters_per_step"], box)
    elif kind == "sphere":
        cloud = phantoms.gen_sphere_cloud(seed, ph["radius_nm"], ph["n_points"])
    elif kind == "two_point":
        cloud = phantoms.gen_two_points(ph["dz_nm"])
    elif kind == "gratings":
        cloud = phantoms.gen_gratings(ph["n_planes"], ph["size_um"], ph["density_per_um2"],
                                      ph["dz_nm"], seed)
    else:
        cloud = phantoms.load_smlm_csv(ph["csv_path"], ph["unit_scale"])
    return cloud.centered_at(run.micro.center())


def simulate_pair(run: Run, cloud, noise_seed):
    raw = optics.simulate_raw_sim(cloud, run.micro, run.illum)
    photons = run.cfg["noise"]["photons_per_emitter"]
    if photons is not None:
        raw = optics.add_poisson_noise(raw, optics.NoiseSpec(photons, noise_seed))
    return raw, optics.simulate_confocal_hr(cloud, run.micro)


def cmd_phantom(run: Run):
    phantoms.save_cloud_csv(make_phantom(run, run.seed), run.path("phantom"))


def cmd_simulate(run: Run):
    cloud = phantoms.load_smlm_csv(run.need("phantom"))
    raw, hr = simulate_pair(run, cloud, run.seed)
    core.write_raw(raw, run.path("raw"))
    core.write_container(optics.simulate_widefield(cloud, run.micro), run.path("widefield"), kind="widefield")
    core.write_container(hr, run.path("hr"), kind="hr_confocal")


def cmd_reconstruct(run: Run):
    raw = core.read_raw(run.need("raw"))
    core.write_container(classical.reconstruct_stack(raw, run.recon_params()), run.path("sim"), kind="sim")


def cmd_dataset(run: Run):
    root = run.path("dataset")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(run.cfg["phantom"]["count"]):
        seed = run.seed * 1000 + i
        cloud = make_phantom(run, seed)
        raw, hr = simulate_pair(run, cloud, seed)
        core.write_raw(raw, root / f"pair_{i:03d}_raw.stk")
        core.write_container(hr, root / f"pair_{i:03d}_hr.stk", kind="hr_confocal")
        rows.append({"pair": i, "phantom_seed": seed, "emitters": len(cloud)})
    write_rows(root / "index.csv", ["pair", "phantom_seed", "emitters"], rows)


def load_pairs(root: Path):
    raws = sorted(root.glob("pair_*_raw.stk"))
    if not raws:
        raise PipelineError(f"no pairs in dataset directory '{root}'")
    return [(core.read_raw(r), core.read_container(r.with_name(r.name.replace("_raw", "_hr"))))
            for r in raws]


def load_dataset(run: Run):
    tcfg = run.train_config()
    return neural.prepare_dataset(load_pairs(run.need("dataset")), run.net,
                                  tcfg.validation_fraction, run.seed)


def cmd_train(run: Run):
    dataset = load_dataset(run)
    params, history = neural.train(run.net, run.train_config(), dataset)
    neural.save_params(params, run.net, run.path("params"))
    history.write_csv(run.out / "train_log.csv")


def cmd_infer(run: Run):
    params, ncfg = neural.load_params(run.need("params"))
    raw = core.read_raw(run.need("raw"))
    core.write_container(neural.predict_stack(params, ncfg, raw), run.path("net"), kind="net")


# -- evaluation ----------------------------------------------------------------------

def _plane_positions(run: Run):
    if run.cfg["phantom"]["kind"] not in LAYERED_KINDS or not run.path("phantom").exists():
        return None
    z = np.unique(phantoms.load_smlm_csv(run.path("phantom")).positions[:, 2])
    return z if 2 <= len(z) <= 16 else None


def _comparable(stack: core.Stack3D) -> core.Stack3D:
    return core.normalize_unit_range(core.truncate_negatives(stack))


def stack_metrics(run: Run, method, stack, ref, planes) -> dict:
    row = {"stack_id": run.stack_id, "method": method}
    try:
        rep = metrology.measure_resolution(stack, padding_factor=run.cfg["metrology"]["padding_factor"])
        row.update(fwhm_axial_nm=rep.fwhm_axial_nm, fwhm_lateral_nm=rep.fwhm_lateral_nm,
                   fit_residual=rep.axial.fit.relative_residual)
    except metrology.FitError:
        row.update(fwhm_axial_nm=np.nan, fwhm_lateral_nm=np.nan, fit_residual=np.nan)
    if ref is not None and ref.data.shape == stack.data.shape:
        a, b = _comparable(stack), _comparable(ref)
        row.update(mse=metrology.mse(a, b), ssim=metrology.ssim(a, b))
    else:
        row.update(mse=np.nan, ssim=np.nan)
    row["contrast"] = metrology.grating_contrast(stack, planes) if planes is not None else np.nan
    return row


def write_profile(path: Path, stack: core.Stack3D):
    prof = metrology.z_profile(stack)
    rows = [{"z_nm": k * stack.spacing[2], "mean_intensity": v} for k, v in enumerate(prof)]
    write_rows(path, ["z_nm", "mean_intensity"], rows)


def cmd_metrics(run: Run):
    ref = core.read_container(run.need("hr"))
    planes = _plane_positions(run)
    rows = []
    for method in ("widefield", "sim", "net", "hr"):
        p = run.path(method)
        if not p.exists():
            continue
        stack = core.read_container(p)
        rows.append(stack_metrics(run, method, stack, ref, planes))
        write_profile(run.out / f"profile_{method}.csv", stack)
    write_rows(run.out / "metrics.csv", METRIC_COLUMNS, rows)


def cmd_ablate(run: Run):
    params, ncfg = neural.load_params(run.need("params"))
    train_chunks, val_chunks = load_dataset(run)
    chunk = (val_chunks or train_chunks)[0]
    ref = core.Stack3D(chunk.target, (1.0, 1.0, 1.0))
    res = metrology.masked_frame_ablation(neural.chunk_model(params, ncfg), chunk.input, ref)
    rows = [{"masked_frame": "none", "mse": res.baseline[0], "ssim": res.baseline[1]}]
    rows += [{"masked_frame": j, "mse": m, "ssim": s} for j, (m, s) in enumerate(res.masked)]
    write_rows(run.out / "ablation.csv", ["masked_frame", "mse", "ssim"], rows)


def cmd_noise_sweep(run: Run):
    cloud = phantoms.load_smlm_csv(run.need("phantom"))
    clean = optics.simulate_raw_sim(cloud, run.micro, run.illum)
    ref = optics.simulate_confocal_hr(cloud, run.micro)
    model = neural.load_params(run.path("params")) if run.path("params").exists() else None
    recon = run.recon_params()
    rows = []
    for i, photons in enumerate(run.cfg["noise"]["levels"]):
        noisy = optics.add_poisson_noise(clean, optics.NoiseSpec(photons, run.seed * 1000 + i))
        outputs = {"sim": classical.reconstruct_stack(noisy, recon)}
        if model is not None:
            outputs["net"] = neural.predict_stack(model[0], model[1], noisy)
        for method, stack in outputs.items():
            a, b = _comparable(stack), _comparable(ref)
            rows.append({"stack_id": run.stack_id, "method": method, "photons": photons,
                         "mse": metrology.mse(a, b), "ssim": metrology.ssim(a, b)})
    rows.sort(key=lambda r: (r["method"], r["photons"]))
    write_rows(run.out / "noise_sweep.csv", ["stack_id", "method", "photons", "mse", "ssim"], rows)


def cmd_report(run: Run, inputs=()):
    paths = [Path(p) for p in inputs] or [run.out / "metrics.csv"]
    rows = []
    for p in paths:
        if not p.exists():
            raise PipelineError(f"missing metrics file '{p}'")
        with p.open(newline="") as fh:
            rows.extend(csv.DictReader(fh))
    numeric = METRIC_COLUMNS[2:]
    out = []
    for method in sorted({r["method"] for r in rows}):
        group = [r for r in rows if r["method"] == method]
        entry = {"method": method, "n_stacks": len(group)}
        for col in numeric:
            vals = np.array([float(r[col]) for r in group])
            vals = vals[np.isfinite(vals)]
            entry[col] = float(vals.mean()) if vals.size else np.nan
        out.append(entry)
    write_rows(run.out / "report.csv", ["method", "n_stacks"] + numeric, out)


# -- entry point ---------------------------------------------------------------------

def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "torch", "PyYAML"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_provenance(run: Run, command: str):
    record = {"command": command, "config_hash": config_hash(run.cfg), "seed": run.seed,
              "versions": _versions(), "config": run.cfg}
    (run.out / f"provenance_{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hexsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("."), help="artifact directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("inputs", nargs="*", help="metrics CSVs (default: OUT/metrics.csv)")
    return parser


def _error(kind: str, message: str, problems=()) -> None:
    print("error: " + json.dumps({"kind": kind, "message": message, "problems": list(problems)}),
          file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        _error("config", "invalid configuration", exc.problems)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, args.out)
    handler = globals()[f"cmd_{args.command}"]
    try:
        if args.command == "report":
            handler(run, args.inputs)
        else:
            handler(run)
    except PipelineError as exc:
        _error("input", str(exc))
        return 3
    except (ValueError, OSError, RuntimeError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    write_provenance(run, args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
