"""Command-line interface: make-config, train-base, adapt, reconstruct, evaluate, analyze.

Every subcommand takes ``-c CONFIG`` plus trailing ``key.sub=value``
overrides. Failures print one line ``error[<category>]: <message>`` to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .benchmark import DTYPES, new_backbone, prepare_all, solver_for
from .data import DatasetSpec, ingest, verify_manifest
from .domains import prepare_domain, simulate_measurements
from .errors import ConfigError, ReconError
from .evaluation import (
    Reconstructor,
    emit_report,
    eval_matrix,
    metric_image,
    norm_profile,
    psnr,
    residual_figure,
    save_png,
    ssim,
)
from .modulation import CHANNEL_ONLY, RANK_ONE, DomainRegistry
from .operators import build_operator, embed_image
from .prior import load_checkpoint, save_checkpoint
from .solver import unrolled_reconstruct
from .training import adapt_domain, adapt_partial, standard_subsets, train_base, validate

EXIT_CODES = {
    "invalid-config": 2,
    "unknown-domain": 3,
    "fingerprint-mismatch": 4,
    "manifest-mismatch": 5,
    "missing-modulation": 6,
    "backbone-mutated": 7,
    "non-finite": 8,
    "data": 9,
    "io": 10,
}

log = logging.getLogger("rankone_pnp")


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.desk_profile()
    cfg = cfgmod.apply_overrides(cfg, args.overrides)
    torch.set_num_threads(max(1, cfg.workers()))
    return cfg


def _paths(cfg: cfgmod.RunConfig, args) -> tuple[Path, Path, Path]:
    out = cfg.output_dir()
    backbone = Path(args.backbone) if getattr(args, "backbone", None) else out / "backbone.safetensors"
    return out, backbone, out / "registry"


def _write_json(path: Path, obj) -> None:
    from .modulation import _atomic_write_bytes

    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n").encode())


# --------------------------------------------------------------------------- subcommands


def cmd_make_config(args) -> int:
    cfg = cfgmod.PROFILES[args.profile]()
    text = cfgmod.dumps(cfgmod.apply_overrides(cfg, args.overrides))
    if args.output == "-":
        sys.stdout.write(text)
    else:
        cfgmod.save(cfgmod.loads(text), args.output)
        print(args.output)
    return 0


def cmd_train_base(args) -> int:
    cfg = _load_config(args)
    out, backbone, registry_root = _paths(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.yaml")
    spec = cfg.source_spec()
    source = prepare_domain(spec, DTYPES[cfg.prior.dtype], manifest_path=out / "manifests" / f"{spec.domain_id}.json")
    net = new_backbone(cfg, source.images["train"].shape[1])
    state = out / "train_state.pt" if args.resume else None
    best, report = train_base(source, net, cfg.training, solver_for(cfg, source), state_path=state,
                              log_path=out / "logs" / "base.jsonl")
    fp = save_checkpoint(best, backbone, {"domain": spec.domain_id, "best_epoch": report.best_epoch})
    DomainRegistry(registry_root, fp, source_domain=spec.domain_id)
    _write_json(out / "reports" / "train_base.json", report.to_dict())
    print(f"backbone {backbone} fingerprint {fp[:12]} best val psnr {report.best_val:.2f} dB")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_config(args)
    out, backbone, registry_root = _paths(cfg, args)
    net, _ = load_checkpoint(backbone)
    registry = DomainRegistry(registry_root, net.fingerprint(), source_domain=cfg.source_domain)
    spec = cfg.domain_spec(args.domain)
    dom = prepare_domain(spec, net.dtype, manifest_path=out / "manifests" / f"{spec.domain_id}.json")
    layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    mod, report = adapt_domain(dom, net, cfg.adaptation, solver_for(cfg, dom), layers=layers, mode=args.mode,
                               registry=registry, log_path=out / "logs" / f"adapt_{spec.domain_id}.jsonl")
    _write_json(out / "reports" / f"adapt_{spec.domain_id}.json", report.to_dict())
    print(f"registered {spec.domain_id}: {mod.param_count} parameters, best val psnr {report.best_val:.2f} dB")
    return 0


def _load_measurements(args, cfg, op):
    if args.measurements:
        data = np.load(args.measurements)
        y = torch.from_numpy(data["y"])
        x = torch.from_numpy(data["x"]) if "x" in data.files else None
        if y.ndim == 1:
            y = y[None]
        return y, (x[None] if x is not None and x.ndim == 3 else x)
    spec = DatasetSpec(kind="directory", source=str(Path(args.image).parent), size=cfg.dataset.size,
                       channels=cfg.dataset.channels, split=[1.0, 0.0, 0.0])
    images = ingest(spec)
    name = Path(args.image).name
    idx = [i for i, r in enumerate(images.manifest["files"]) if Path(r["path"]).name == name]
    if not idx:
        raise ConfigError(f"image {args.image} could not be decoded")
    x = embed_image(torch.from_numpy(images["train"][idx[0]:idx[0] + 1]), op)
    y = simulate_measurements(op, x, cfg.noise)
    return y, x


def cmd_reconstruct(args) -> int:
    if not args.measurements and not args.image:
        raise ConfigError("reconstruct needs --measurements or --image")
    cfg = _load_config(args)
    out, backbone, registry_root = _paths(cfg, args)
    net, _ = load_checkpoint(backbone)
    modulation, label = None, "unmodulated"
    if args.domain:
        registry = DomainRegistry(registry_root, net.fingerprint())
        modulation = registry.resolve(args.domain, net.fingerprint())
        label = args.domain if modulation is not None else "unmodulated"
    spec = cfg.domain_spec(args.domain) if args.domain and args.domain in cfg.domain_ids() else cfg.source_spec()
    op = build_operator(spec.operator, spec.dataset.size)
    y, x = _load_measurements(args, cfg, op)
    if y.is_complex():
        y = y.to(torch.complex64 if net.dtype == torch.float32 else torch.complex128)
    else:
        y = y.to(net.dtype)
    solver = cfgmod.SolverConfig(cfg.solver.iterations, spec.gamma, cfg.solver.momentum, cfg.solver.alpha)
    with torch.no_grad():
        x_hat = unrolled_reconstruct(y, op, net, modulation, solver)
    dest = Path(args.output) if args.output else out / "reconstruct"
    dest.mkdir(parents=True, exist_ok=True)
    np.save(dest / "reconstruction.npy", x_hat.double().numpy())
    img = metric_image(x_hat)[0, 0].clamp(0, 1)
    save_png(img, dest / "reconstruction.png")
    report = {"modulation": label, "domain": args.domain, "backbone_fingerprint": net.fingerprint(),
              "shape": list(x_hat.shape)}
    if x is not None:
        truth = metric_image(x.to(x_hat.dtype))
        rec = metric_image(x_hat)
        report["psnr"] = [psnr(a, b) for a, b in zip(truth, rec)]
        report["ssim"] = [ssim(a, b) for a, b in zip(truth, rec)]
        residual_figure(truth[0, 0], rec[0, 0], path=dest / "residual.png")
    _write_json(dest / "report.json", report)
    print(f"wrote {dest} ({label})")
    return 0


def _check_manifests(out: Path, ids) -> None:
    for d in ids:
        path = out / "manifests" / f"{d}.json"
        if path.exists():
            verify_manifest(path)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out, backbone, registry_root = _paths(cfg, args)
    net, _ = load_checkpoint(backbone)
    registry = DomainRegistry(registry_root, net.fingerprint(), source_domain=cfg.source_domain)
    ids = cfg.domain_ids()
    _check_manifests(out, ids)
    domains = prepare_all(cfg)
    recons = [Reconstructor("base", net)]
    if all(d == cfg.source_domain or d in registry for d in ids) or args.require_modulation:
        recons.append(Reconstructor("modulated", net, modulated=True))
    matrix = eval_matrix([domains[d] for d in ids], recons, registry, cfg.solver, split=args.split)
    written = emit_report(matrix, None, None, out / "evaluation",
                          extra={"config": cfgmod.to_dict(cfg), "backbone_fingerprint": net.fingerprint(),
                                 "modulations": {d: registry.entries()[d]["sha256"] for d in registry.list()}})
    sys.stdout.write(matrix.table("psnr"))
    print(f"report: {written['report']}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    out, backbone, registry_root = _paths(cfg, args)
    net, _ = load_checkpoint(backbone)
    registry = DomainRegistry(registry_root, net.fingerprint(), source_domain=cfg.source_domain)
    profiles = {d: norm_profile(registry.get(d), net) for d in registry.list()}
    extra = {"backbone_fingerprint": net.fingerprint()}
    if args.sweep:
        spec = cfg.domain_spec(args.sweep)
        dom = prepare_domain(spec, net.dtype)
        solver = solver_for(cfg, dom)
        base_psnr = validate(dom, net, None, solver, split="test")["psnr"]
        sweep = {"domain": spec.domain_id, "base": base_psnr, "subsets": {}}
        for name, layers in standard_subsets(net.num_layers).items():
            mod, rep = adapt_partial(dom, net, layers, cfg.adaptation, solver)
            sweep["subsets"][name] = {"layers": layers, "params": mod.param_count,
                                      "psnr": validate(dom, net, mod, solver, split="test")["psnr"]}
            print(f"{name:<12} {mod.param_count:>7d} params  {sweep['subsets'][name]['psnr']:.2f} dB")
        extra["partial_sweep"] = sweep
    emit_report(None, profiles, None, out / "analysis", extra=extra)
    for d, p in profiles.items():
        print(d, " ".join(f"{v:.2f}" for v in p.normalized))
    return 0


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankone-pnp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="YAML run config (default: desk profile)")
        p.add_argument("overrides", nargs="*", help="dotted overrides such as operator.pattern=cartesian")
        p.set_defaults(fn=fn)
        return p

    p = add("make-config", cmd_make_config, "write a commented default config")
    p.add_argument("--profile", choices=sorted(cfgmod.PROFILES), default="desk")
    p.add_argument("-o", "--output", default="-")

    p = add("train-base", cmd_train_base, "train the backbone on the source domain")
    p.add_argument("--resume", action="store_true", help="keep and resume from a per-epoch train state")

    p = add("adapt", cmd_adapt, "train a modulation for one configured domain")
    p.add_argument("--domain", required=True)
    p.add_argument("--backbone")
    p.add_argument("--mode", choices=(RANK_ONE, CHANNEL_ONLY), default=RANK_ONE)
    p.add_argument("--layers", help="comma-separated layer indices (default: all)")

    p = add("reconstruct", cmd_reconstruct, "reconstruct measurements or a simulated image")
    p.add_argument("--backbone")
    p.add_argument("--domain", help="registered domain id; omitted means the bare backbone")
    p.add_argument("--measurements", help=".npz with 'y' (and optional ground truth 'x')")
    p.add_argument("--image", help="image file to simulate measurements from")
    p.add_argument("-o", "--output")

    p = add("evaluate", cmd_evaluate, "cross-domain evaluation matrix")
    p.add_argument("--backbone")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--require-modulation", action="store_true",
                   help="fail instead of dropping the modulated column when a domain has no modulation")

    p = add("analyze", cmd_analyze, "modulation norm profiles and partial-modulation sweep")
    p.add_argument("--backbone")
    p.add_argument("--sweep", metavar="DOMAIN", help="run the partial-layer sweep on this domain")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ReconError as exc:
        category = exc.category
        message = str(exc)
    except FileNotFoundError as exc:
        category, message = "io", f"file not found: {exc.filename}"
    except PermissionError as exc:
        category, message = "io", f"permission denied: {exc.filename}"
    message = " ".join(message.split())
    print(f"error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
