"""Command-line pipeline: ``gen-ti``, ``sample``, ``train``, ``simulate``, ``metrics``.

Every stage reads one INI config (all keys unique across sections, each
overridable by a same-named ``--flag``) and writes into ``<out>/<stage>``.
Work happens in ``<out>/<stage>.partial``; on success it replaces the stage
directory, on failure it is kept as ``<out>/<stage>.failed`` and the exit
status is nonzero.  The resolved config is echoed as ``config.ini`` in every
stage directory.  Stage seeds derive from the single master ``seed``.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, write_loss_csv
from .grid import (
    CategoricalGrid,
    WindowSpec,
    load_drillholes,
    load_grid,
    migrate_hard_data,
    sample_drillholes,
    save_drillholes,
    save_grid,
    save_real_grid,
)
from .metrics import (
    Ensemble,
    etype,
    indicator_variance,
    indicator_variogram,
    most_probable,
    proportions,
    sill_estimate,
    variance_map,
    variograms,
    write_variogram_csv,
)
from .rcnn import RCNNConfig, train
from .seeding import derive_seed
from .simulate import SimulationJob, run_ensemble
from .synthti import SurfaceModelParams, crop, generate_surface_model, quadrants

logger = logging.getLogger("rcnnmps")

SECTORS = ("s1", "s2", "s3")
# sill band reported for the full-scale experiment, kept as a reference in summaries
REFERENCE_SILL_BAND = (0.17, 0.19)


def _ints(s):
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _floats(s):
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_ints(s):
    return None if s.strip().lower() in ("", "none") else _ints(s)


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


# key -> (section, parser, default text, help)
SCHEMA = {
    "seed": ("run", int, "0", "master seed"),
    "out": ("run", str, "run", "output root directory"),
    "jobs": ("run", int, "1", "worker processes for simulation"),
    "nx": ("field", int, "100", "field size along x"),
    "ny": ("field", int, "100", "field size along y"),
    "nz": ("field", int, "50", "field size along z"),
    "n_surfaces": ("field", int, "4", "boundary surfaces"),
    "amplitude": ("field", _floats, "2,6", "cosine amplitude range (nodes)"),
    "wavelength": ("field", _floats, "0.25,1", "cosine wavelength range (fraction of nx)"),
    "target_proportion": ("field", _opt_float, "0.235", "category-2 proportion target"),
    "crop": ("field", _opt_ints, "none", "crop TI and sectors to these dims, e.g. 32,32,32"),
    "field_seed": ("field", _opt_int, "none", "surface seed; default derives from the master seed"),
    "fractions": ("sample", _floats, "0.02,0.05", "drill-hole sampling fractions"),
    "n_cnn": ("model", int, "4", "chained CNNs"),
    "sg": ("model", _ints, "15,15,15", "search grid dims"),
    "ip": ("model", _ints, "5,5,5", "inner pattern dims"),
    "conv_channels": ("model", _ints, "16,16,32,32", "feature maps per conv layer"),
    "pool_after": ("model", _ints, "2,4", "conv layers followed by 2x2x2 max pooling"),
    "fc_widths": ("model", _ints, "512,256", "hidden fully connected widths"),
    "activation": ("model", str, "relu", "relu, sigmoid or tanh"),
    "per_dc": ("train", float, "0.10", "training hard-data fraction"),
    "epochs": ("train", int, "40", "maximum epochs"),
    "batch_size": ("train", int, "32", "mini-batch size"),
    "lr": ("train", float, "0.001", "Adam learning rate"),
    "pairs_per_epoch": ("train", _opt_int, "none", "cap on training pairs per CNN per epoch"),
    "early_stop": ("train", _bool, "true", "stop when the loss EMA flattens"),
    "resimulate": ("train", str, "epoch", "epoch or once"),
    "epoch_checkpoints": ("train", _bool, "false", "write a checkpoint after every epoch"),
    "resume": ("train", str, "", "epoch checkpoint to resume from"),
    "realizations": ("simulate", int, "100", "realizations per sector and fraction"),
    "freeze_fraction": ("simulate", float, "0.5", "share of predicted IP nodes frozen per visit"),
    "sample_mode": ("simulate", str, "draw", "draw or argmax"),
    "category": ("metrics", int, "2", "indicator category for variograms and maps"),
    "gamma_lag": ("metrics", int, "3", "lag of the reported anisotropy check"),
}


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config


def load_config(path=None, overrides=None) -> dict:
    """Resolve defaults < config file < overrides into typed values."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    raw = {k: v[2] for k, v in SCHEMA.items()}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in SCHEMA:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            if SCHEMA[key][0] != section:
                raise ValueError(f"{path}: key {key!r} belongs in [{SCHEMA[key][0]}], not [{section}]")
            raw[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = str(value)
    cfg = {}
    for key, text in raw.items():
        try:
            cfg[key] = SCHEMA[key][1](text)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {exc}") from None
    cfg["_raw"] = raw
    return cfg


def dump_config(cfg) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for key, (section, *_) in SCHEMA.items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, cfg["_raw"][key])
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def rcnn_config(cfg) -> RCNNConfig:
    return RCNNConfig(
        n_cnn=cfg["n_cnn"],
        window=WindowSpec(cfg["sg"], cfg["ip"]),
        per_dc=cfg["per_dc"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        freeze_fraction=cfg["freeze_fraction"],
        seed=derive_seed(cfg["seed"], "train"),
        conv_channels=cfg["conv_channels"],
        pool_after=cfg["pool_after"],
        fc_widths=cfg["fc_widths"],
        activation=cfg["activation"],
        lr=cfg["lr"],
        resimulate=cfg["resimulate"],
        pairs_per_epoch=cfg["pairs_per_epoch"],
        early_stop=cfg["early_stop"],
        sample_mode=cfg["sample_mode"],
    )


def _pct(fraction) -> str:
    return f"{fraction * 100:g}pct"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Stages


def cmd_gen_ti(cfg, out: Path, root: Path):
    field_seed = cfg["field_seed"]
    if field_seed is None:
        field_seed = derive_seed(cfg["seed"], "gen-ti") % 2**32
    params = SurfaceModelParams(
        nx=cfg["nx"], ny=cfg["ny"], nz=cfg["nz"], n_surfaces=cfg["n_surfaces"],
        amplitude=cfg["amplitude"], wavelength=cfg["wavelength"],
        target_proportion=cfg["target_proportion"], target_block=cfg["crop"], seed=field_seed,
    )
    field = generate_surface_model(params)
    blocks = quadrants(field)
    if cfg["crop"] is not None:
        blocks = tuple(crop(b, cfg["crop"]) for b in blocks)
    names = ("ti",) + SECTORS
    save_grid(field, out / "field.gslib", title="field")
    for name, grid in zip(names, blocks):
        save_grid(grid, out / f"{name}.gslib", title=name)
    _write_json(out / "gen_ti.json", {
        "seed": cfg["seed"],
        "params": params.to_dict(),
        "dims": {"field": list(field.dims), **{n: list(b.dims) for n, b in zip(names, blocks)}},
        "proportion": {n: float(proportions(b)[1]) for n, b in zip(("field",) + names, (field,) + blocks)},
        "ti_indicator_variance": indicator_variance(blocks[0]),
    })


def _load_block(root: Path, name: str) -> CategoricalGrid:
    meta_path = root / "gen-ti" / "gen_ti.json"
    if not meta_path.exists():
        raise StageError(f"{meta_path} missing; run gen-ti first")
    dims = _read_json(meta_path)["dims"][name]
    return load_grid(root / "gen-ti" / f"{name}.gslib", dims, 2)


def cmd_sample(cfg, out: Path, root: Path):
    rows = []
    for k, sector in enumerate(SECTORS):
        grid = _load_block(root, sector)
        for fraction in cfg["fractions"]:
            seed = derive_seed(cfg["seed"], f"sample:{sector}:{fraction!r}")
            dh = sample_drillholes(grid, fraction, seed)
            name = f"{sector}_{_pct(fraction)}.csv"
            save_drillholes(dh, out / name)
            rows.append({"sector": sector, "fraction": fraction, "file": name, "seed": seed,
                         "samples": len(dh), "achieved_fraction": dh.source_fraction})
    _write_json(out / "sample.json", {"seed": cfg["seed"], "files": rows})


def cmd_train(cfg, out: Path, root: Path):
    ti = _load_block(root, "ti")
    config = rcnn_config(cfg)
    model = None
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"])
        if model.config != config:
            raise StageError(f"{cfg['resume']}: checkpoint config differs from the resolved config")
        logger.info("resuming after epoch %d", model.epochs_done)

    def save_epoch(m, epoch):
        save_checkpoint(m, out / "epochs" / f"epoch_{epoch:03d}.npz")

    if cfg["epoch_checkpoints"]:
        (out / "epochs").mkdir()
    model = train(ti, config, model=model,
                  epoch_callback=save_epoch if cfg["epoch_checkpoints"] else None)
    save_checkpoint(model, out / "checkpoint.npz")
    write_loss_csv(model, out / "loss.csv")


def _ensembles(cfg, root: Path):
    meta_path = root / "sample" / "sample.json"
    if not meta_path.exists():
        raise StageError(f"{meta_path} missing; run sample first")
    for row in _read_json(meta_path)["files"]:
        yield row["sector"], row["fraction"], f"{row['sector']}_{_pct(row['fraction'])}", row["file"]


def cmd_simulate(cfg, out: Path, root: Path):
    ckpt = root / "train" / "checkpoint.npz"
    if not ckpt.exists():
        raise StageError(f"{ckpt} missing; run train first")
    model = load_checkpoint(ckpt)
    manifest = {"seed": cfg["seed"], "checkpoint": "train/checkpoint.npz", "ensembles": []}
    for sector, fraction, name, dh_file in _ensembles(cfg, root):
        dims = _load_block(root, sector).dims
        hard = load_drillholes(root / "sample" / dh_file)
        base = derive_seed(cfg["seed"], f"simulate:{name}") % 2**32
        job = SimulationJob(model, hard, dims, cfg["realizations"], base, cfg["freeze_fraction"],
                            cfg["sample_mode"], cfg["jobs"])
        logger.info("simulating %s: %d realizations", name, job.realizations)
        ensemble = run_ensemble(job)
        d0 = migrate_hard_data(CategoricalGrid.unknown(dims), hard).values
        informed = d0 > 0
        (out / name).mkdir()
        files = []
        for r, (seed, real) in enumerate(zip(job.seeds(), ensemble)):
            if not np.array_equal(real.values[informed], d0[informed]):
                raise StageError(f"{name} realization {r} does not honor its hard data")
            fname = f"{name}/real_{r:03d}.gslib"
            save_grid(real, out / fname, title=f"{name} realization {r}")
            files.append({"index": r, "seed": seed, "file": fname})
        manifest["ensembles"].append({
            "name": name, "sector": sector, "fraction": fraction, "dims": list(dims),
            "hard_data": dh_file, "hard_nodes": int(informed.sum()), "base_seed": base,
            "realizations": files,
        })
    _write_json(out / "manifest.json", manifest)


def _gamma(grid, cfg, direction):
    return indicator_variogram(grid, cfg["category"], direction, cfg["gamma_lag"]).at(cfg["gamma_lag"])


def cmd_metrics(cfg, out: Path, root: Path):
    cat = cfg["category"]
    manifest_path = root / "simulate" / "manifest.json"
    if not manifest_path.exists():
        raise StageError(f"{manifest_path} missing; run simulate first")
    manifest = _read_json(manifest_path)
    ti = _load_block(root, "ti")
    summary = {
        "category": cat,
        "reference_sill_band": list(REFERENCE_SILL_BAND),
        "ti": {"proportions": proportions(ti).tolist(), "sill": sill_estimate(ti, cat),
               "indicator_variance": indicator_variance(ti, cat)},
        "ensembles": {},
    }
    write_variogram_csv(variograms(ti, cat), out / "variogram_ti.csv")
    for sector in SECTORS:
        write_variogram_csv(variograms(_load_block(root, sector), cat), out / f"variogram_{sector}.csv")

    for ens_meta in manifest["ensembles"]:
        name, dims = ens_meta["name"], ens_meta["dims"]
        (out / name).mkdir()
        reals = []
        for rec in ens_meta["realizations"]:
            real = load_grid(root / "simulate" / rec["file"], dims, 2)
            write_variogram_csv(variograms(real, cat), out / name / f"variogram_real_{rec['index']:03d}.csv")
            reals.append(real)
        ens = Ensemble(reals)
        save_real_grid(etype(ens, cat), out / f"etype_{name}.gslib", title=f"E-type {name}", name="probability")
        save_real_grid(variance_map(ens, cat), out / f"variance_{name}.gslib", title=f"variance {name}",
                       name="variance")
        sills = [sill_estimate(r, cat) for r in reals]
        props = [proportions(r).tolist() for r in reals]
        mp = most_probable(ens)
        gt = _load_block(root, ens_meta["sector"])
        summary["ensembles"][name] = {
            "realizations": len(reals),
            "proportions": props,
            "mean_proportions": np.mean(props, axis=0).tolist(),
            "sills": sills,
            "sill_range": [min(sills), max(sills)],
            "mean_sill": float(np.mean(sills)),
            "ground_truth": {"proportions": proportions(gt).tolist(), "sill": sill_estimate(gt, cat)},
            "etype_threshold_gamma": {
                "lag": cfg["gamma_lag"],
                "omni-horizontal": _gamma(mp, cfg, "omni-horizontal"),
                "vertical": _gamma(mp, cfg, "vertical"),
            },
        }
    _write_json(out / "summary.json", summary)


HELP = {
    "gen-ti": "generate the synthetic field, TI and sectors",
    "sample": "draw drill-hole samples from each sector",
    "train": "train the CNN chain on the TI",
    "simulate": "simulate conditioned realization ensembles",
    "metrics": "variograms, E-type/variance maps and summary statistics",
}

STAGES = {
    "gen-ti": cmd_gen_ti,
    "sample": cmd_sample,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
}


def run_stage(stage: str, cfg) -> Path:
    """Run one stage into ``<out>/<stage>`` with partial/quarantine handling."""
    root = Path(cfg["out"])
    root.mkdir(parents=True, exist_ok=True)
    final = root / stage
    partial = root / f"{stage}.partial"
    failed = root / f"{stage}.failed"
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir()
    (partial / "config.ini").write_text(dump_config(cfg))
    try:
        STAGES[stage](cfg, partial, root)
    except BaseException:
        # the previous quarantine may hold the checkpoint this run resumed from,
        # so it is only replaced once the stage has finished
        if failed.exists():
            shutil.rmtree(failed)
        partial.rename(failed)
        raise
    for d in (final, failed):
        if d.exists():
            shutil.rmtree(d)
    partial.rename(final)
    return final


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    for key, (section, _, default, help_text) in SCHEMA.items():
        common.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar=key.upper(),
                            help=f"{help_text} [{section}; default {default or 'empty'}]")
    parser = argparse.ArgumentParser(prog="rcnnmps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=HELP[stage], description=HELP[stage])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {k: getattr(args, k) for k in SCHEMA})
    except (OSError, ValueError, configparser.Error) as exc:
        print(f"rcnnmps: config error: {exc}", file=sys.stderr)
        return 2
    try:
        final = run_stage(args.stage, cfg)
    except Exception as exc:
        print(f"rcnnmps {args.stage}: {type(exc).__name__}: {exc} "
              f"(partial output in {Path(cfg['out']) / (args.stage + '.failed')})", file=sys.stderr)
        return 1
    print(final)
    return 0


if __name__ == "__main__":
    sys.exit(main())
