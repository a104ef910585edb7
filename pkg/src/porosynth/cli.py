"""Command-line pipeline: synth-data, deconstruct, fit, train-gan, gen-surface, gen-part, validate, run.

Exit codes: 0 ok, 2 configuration error (including missing inputs),
3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, PorosynthError

log = logging.getLogger("porosynth")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


@dataclass(frozen=True)
class PipelineConfig:
    out: str = "out"
    seed: int | None = None
    profile: str = "desk"
    voxel_size: float = 4.0
    dims: tuple = (96, 96, 192)
    n_pores: int = 500
    density_alpha: float = 1.0
    n_bins: int = 30
    window_dz: int = 256
    # GAN
    gan_epochs: int = 40
    gan_lr: float = 2e-4
    gan_batch: int = 32
    bank_size: int = 2000
    # surface synthesis
    synth_side: int = 64
    synth_G: int = 64
    synth_iterations: int = 500
    savgol_um: float = 100.0
    # run: build the bank with a freshly trained GAN instead of the ground-truth pores
    with_gan: bool = False

    def __post_init__(self):
        if self.profile not in ("desk", "full"):
            raise ConfigError(f"profile must be desk or full, got {self.profile!r}")
        if len(self.dims) != 3:
            raise ConfigError("dims needs three values")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("n_bins", "window_dz", "gan_epochs", "gan_batch", "synth_side", "synth_G", "synth_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_pores < 0 or self.bank_size < 0:
            raise ConfigError("counts must be non-negative")

    def digest(self):
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def load_config(path=None, overrides=None):
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        unknown = set(doc) - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PipelineConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _need(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _need_seed(cfg):
    if cfg.seed is None:
        raise ConfigError("--seed is required for generation commands")
    return int(cfg.seed)


def _volume_path(path):
    """Accept either the header path or the stem of a saved volume."""
    p = Path(path)
    return p.with_suffix(".json") if p.suffix != ".json" else p


def threads():
    v = os.environ.get("POROSYNTH_THREADS")
    if v is None:
        return 1
    if not v.isdigit() or int(v) < 1:
        raise ConfigError(f"POROSYNTH_THREADS must be a positive integer, got {v!r}")
    return int(v)


# -- commands -----------------------------------------------------------------

def cmd_synth_data(cfg, out=None):
    from . import groundtruth as gt

    seed = _need_seed(cfg)
    gcfg = gt.GroundTruthConfig(dims=cfg.dims, voxel_size=cfg.voxel_size, n_pores=cfg.n_pores,
                                density_alpha=cfg.density_alpha, seed=seed)
    part = gt.generate_part(gcfg)
    path = gt.save_part(out or Path(cfg.out) / "groundtruth", part)
    log.info("synth-data: %d pores (%d rejected placements)", len(part.pores), part.rejections)
    return path


def cmd_deconstruct(cfg, volume, out=None):
    from . import gan, metrics, surface, voxel

    vol = voxel.load_volume(_need(_volume_path(volume), "volume"))
    d = Path(out or Path(cfg.out) / "deconstructed")
    d.mkdir(parents=True, exist_ok=True)
    pores = voxel.extract_pores(voxel.label_components(vol))
    ms = metrics.population_metrics(pores)
    metrics.write_metrics_csv(d / "metrics.csv", ms)
    surf = surface.unroll(vol)
    surface.save_surface(d / "surface", surf)
    side = gan.PROFILES[cfg.profile][0]
    cubes = [voxel.center_in_cube(p, side).data == voxel.PORE for p in pores if max(p.extent) <= side - 2]
    np.savez_compressed(d / "cubes.npz", cubes=np.array(cubes, dtype=bool).reshape(-1, side, side, side))
    gan.save_bank(d / "bank", gan.PoreBank(pores, ms, provenance="ground-truth"))
    (d / "part.json").write_text(json.dumps({"dims": list(vol.dims), "voxel_size": vol.voxel_size,
                                             "n_pores": len(pores), "n_cubes": len(cubes)}))
    log.info("deconstruct: %d pores, %d training cubes", len(pores), len(cubes))
    return d


def cmd_fit(cfg, metrics_csv, surface_path, out=None):
    from . import metrics, spatial, surface

    ms = metrics.read_metrics_csv(_need(metrics_csv, "metrics table"))
    surf = surface.load_surface(_need(Path(surface_path).with_suffix(".json"), "surface map"))
    model = spatial.fit(ms, spatial.PartGeometry.from_surface(surf), cfg.n_bins)
    return spatial.save_model(out or Path(cfg.out) / "model.json", model)


def cmd_train_gan(cfg, cubes_npz, gt_metrics_csv, out=None):
    from . import gan, metrics, voxel

    seed = _need_seed(cfg)
    cubes = np.load(_need(cubes_npz, "training cubes"))["cubes"]
    gt = metrics.read_metrics_csv(_need(gt_metrics_csv, "metrics table"))
    d = Path(out or Path(cfg.out) / "gan")
    res = gan.train(list(cubes), gan.TrainConfig(batch=cfg.gan_batch, epochs=cfg.gan_epochs, lr=cfg.gan_lr,
                                                 seed=seed, profile=cfg.profile))
    gan.save_generator(d / "generator", res.generator, {"d_loss": res.d_loss, "g_loss": res.g_loss})
    side = gan.PROFILES[cfg.profile][0]
    # envelope from the training cubes themselves, in the bank's voxel units
    train_ms = [metrics.metrics_for(voxel.Pore.from_mask(c, voxel_size=cfg.voxel_size)) for c in cubes]
    bounds = gan.plausibility_bounds(train_ms or gt, side)
    bank = gan.build_bank(res.generator, cfg.bank_size, lambda p, m: gan.plausibility_filter(p, bounds, m),
                          seed=seed, voxel_size=cfg.voxel_size)
    gan.save_bank(d / "bank", bank)
    return d


def cmd_gen_surface(cfg, surface_path, out=None):
    from . import surface, synth

    seed = _need_seed(cfg)
    target = surface.load_surface(_need(Path(surface_path).with_suffix(".json"), "surface map"))
    scfg = synth.SynthConfig(G=cfg.synth_G, iterations=cfg.synth_iterations, side=cfg.synth_side, seed=seed)
    run = synth.generate_surface(target, scfg, cfg.savgol_um)
    path = surface.save_surface(out or Path(cfg.out) / "gen_surface", run.surface)
    log.info("gen-surface: loss %.3g -> %.3g", run.losses[0], min(run.losses))
    return path


def cmd_gen_part(cfg, model_path, bank_dir, surface_path, out=None):
    from . import assembler, gan, spatial, surface, voxel

    seed = _need_seed(cfg)
    model = spatial.load_model(_need(model_path, "spatial model"))
    bank = gan.load_bank(_need(bank_dir, "pore bank"))
    surf = surface.load_surface(_need(Path(surface_path).with_suffix(".json"), "surface map"))
    part = assembler.traverse(model, bank, cfg.dims, cfg.voxel_size, cfg.window_dz, seed)
    inside = surface.boundary_mask(surf, cfg.dims, cfg.voxel_size)
    part = assembler.clip_to_boundary(part, inside)
    d = Path(out or Path(cfg.out) / "gen_part")
    d.mkdir(parents=True, exist_ok=True)
    voxel.save_volume(d / "part", part.volume)
    assembler.write_ledger_csv(d / "ledger.csv", part)
    log.info("gen-part: %d pores placed, %d ledger entries", len(part.accepted), len(part.ledger))
    return d / "part.json"


def cmd_validate(cfg, gt_volume, gen_volume, out=None):
    from . import metrics, validate, voxel

    a = voxel.load_volume(_need(_volume_path(gt_volume), "ground-truth volume"))
    b = voxel.load_volume(_need(_volume_path(gen_volume), "generated volume"))
    ma = metrics.population_metrics(voxel.extract_pores(voxel.label_components(a)))
    mb = metrics.population_metrics(voxel.extract_pores(voxel.label_components(b)))
    if not ma or not mb:
        raise DataError("both volumes need pores to compare")
    rep = validate.compare(ma, mb, a, b)
    path = validate.write_report(out or Path(cfg.out) / "report", rep)
    return path, rep


def cmd_run(cfg):
    """synth-data -> deconstruct -> fit -> gen-surface -> gen-part -> validate.

    The bank is the deconstructed ground-truth pores unless ``--with-gan``.
    """
    root = Path(cfg.out)
    gt_json = cmd_synth_data(cfg, root / "groundtruth")
    d = cmd_deconstruct(cfg, gt_json, root / "deconstructed")
    model = cmd_fit(cfg, d / "metrics.csv", d / "surface.json", root / "model.json")
    bank = d / "bank"
    if cfg.with_gan:
        bank = cmd_train_gan(cfg, d / "cubes.npz", d / "metrics.csv", root / "gan") / "bank"
    surf = cmd_gen_surface(cfg, d / "surface.json", root / "gen_surface")
    part = cmd_gen_part(cfg, model, bank, surf, root / "gen_part")
    return cmd_validate(cfg, gt_json, part, root / "report")


# -- argument parsing ---------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=["desk", "full"])
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--n-pores", type=int)
    p.add_argument("--density-alpha", type=float)
    p.add_argument("--n-bins", type=int)
    p.add_argument("--window-dz", type=int)
    p.add_argument("--gan-epochs", type=int)
    p.add_argument("--gan-lr", type=float)
    p.add_argument("--bank-size", type=int)
    p.add_argument("--synth-iterations", type=int)
    p.add_argument("--synth-side", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="porosynth", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    specs = {
        "synth-data": [],
        "deconstruct": ["volume"],
        "fit": ["metrics", "surface"],
        "train-gan": ["cubes", "metrics"],
        "gen-surface": ["surface"],
        "gen-part": ["model", "bank", "surface"],
        "validate": ["gt", "gen"],
        "run": [],
    }
    for name, positional in specs.items():
        p = sub.add_parser(name)
        for a in positional:
            p.add_argument(a)
        _add_common(p)
        if name == "run":
            p.add_argument("--with-gan", action="store_true", default=None)
    return ap


def _overrides(args):
    keys = [k for k in FIELDS if hasattr(args, k)]
    return {k: getattr(args, k) for k in keys}


def dispatch(args):
    threads()
    cfg = load_config(args.config, _overrides(args))
    log.info("config %s profile %s", cfg.digest(), cfg.profile)
    c = args.command
    if c == "synth-data":
        return cmd_synth_data(cfg)
    if c == "deconstruct":
        return cmd_deconstruct(cfg, args.volume)
    if c == "fit":
        return cmd_fit(cfg, args.metrics, args.surface)
    if c == "train-gan":
        return cmd_train_gan(cfg, args.cubes, args.metrics)
    if c == "gen-surface":
        return cmd_gen_surface(cfg, args.surface)
    if c == "gen-part":
        return cmd_gen_part(cfg, args.model, args.bank, args.surface)
    if c == "validate":
        path, rep = cmd_validate(cfg, args.gt, args.gen)
        print(json.dumps(rep.summary()["ks"], indent=1))
        return path
    if c == "run":
        path, rep = cmd_run(cfg)
        print(json.dumps(rep.summary()["ks"], indent=1))
        return path
    raise ConfigError(f"unknown command {c}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    t0 = time.time()
    try:
        result = dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PorosynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("%s done in %.1f s", args.command, time.time() - t0)
    if result is not None:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
