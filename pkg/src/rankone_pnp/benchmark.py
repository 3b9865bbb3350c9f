"""Domain-shift benchmark: base training, per-domain adaptation, baselines and evaluation."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional

import torch

from .config import RunConfig, desk_profile
from .domains import PreparedDomain, prepare_domain
from .evaluation import NormProfile, Reconstructor, emit_report, eval_matrix, norm_profile
from .modulation import DomainRegistry
from .prior import PriorNetwork, build_prior, load_checkpoint, save_checkpoint
from .solver import SolverConfig
from .training import adapt_channel_only, adapt_domain, adapt_partial, full_tune, standard_subsets, train_base, validate

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def prepare_all(cfg: RunConfig) -> dict[str, PreparedDomain]:
    dtype = DTYPES[cfg.prior.dtype]
    return {d: prepare_domain(cfg.domain_spec(d), dtype) for d in cfg.domain_ids()}


def new_backbone(cfg: RunConfig, channels: int) -> PriorNetwork:
    p = cfg.prior
    return build_prior(channels, seed=p.seed, blocks=p.blocks, features=p.features, kernel=p.kernel,
                       alpha=p.alpha, dtype=DTYPES[p.dtype], sn_warmup=p.sn_warmup)


def solver_for(cfg: RunConfig, domain: PreparedDomain) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(s.iterations, domain.spec.gamma, s.momentum, s.alpha)


def run_benchmark(cfg: Optional[RunConfig] = None, out_dir=None, partial_domain: str = "noise20",
                  channel_only: bool = True) -> dict:
    """Train, adapt and evaluate every configured domain; writes artifacts under ``out_dir``.

    Returns a JSON-serializable summary with per-domain test PSNR for the
    frozen base, the rank-one modulation, full-tuning and the baselines.
    """
    cfg = cfg or desk_profile()
    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    domains = prepare_all(cfg)
    source = domains[cfg.source_domain]
    channels = source.images["train"].shape[1]

    net = new_backbone(cfg, channels)
    base, base_report = train_base(source, net, cfg.training, solver_for(cfg, source),
                                   log_path=out / "logs" / "base.jsonl")
    save_checkpoint(base, out / "backbone.safetensors", {"domain": cfg.source_domain})
    registry = DomainRegistry(out / "registry", base.fingerprint(), source_domain=cfg.source_domain)
    reports = {"base": base_report.to_dict()}

    tuned: dict[str, PriorNetwork] = {}
    channel_mods, partial = {}, {}
    for d in cfg.domain_ids():
        if d == cfg.source_domain:
            continue
        dom = domains[d]
        solver = solver_for(cfg, dom)
        _, rep = adapt_domain(dom, base, cfg.adaptation, solver, registry=registry,
                              log_path=out / "logs" / f"adapt_{d}.jsonl")
        reports[f"adapt:{d}"] = rep.to_dict()
        tuned[d], rep = full_tune(dom, base, cfg.adaptation, solver, log_path=out / "logs" / f"full_{d}.jsonl")
        reports[f"full_tune:{d}"] = rep.to_dict()
        if channel_only:
            channel_mods[d], rep = adapt_channel_only(dom, base, cfg.adaptation, solver)
            reports[f"channel_only:{d}"] = rep.to_dict()
        log.info("domain %s done after %.0fs", d, time.perf_counter() - t0)

    if partial_domain in domains and partial_domain != cfg.source_domain:
        dom = domains[partial_domain]
        subsets = standard_subsets(base.num_layers)
        for name in ("first_half", "last_half"):
            mod, rep = adapt_partial(dom, base, subsets[name], cfg.adaptation, solver_for(cfg, dom))
            partial[name] = mod
            reports[f"partial:{name}"] = rep.to_dict()

    ids = cfg.domain_ids()
    recons = [Reconstructor("base", base), Reconstructor("modulated", base, modulated=True)]
    if channel_mods:
        recons.append(Reconstructor("channel_only", base,
                                    modulations={d: channel_mods.get(d) for d in ids}))
    recons += [Reconstructor(f"full_tune:{d}", net_d) for d, net_d in tuned.items()]
    matrix = eval_matrix([domains[d] for d in ids], recons, registry, cfg.solver)

    partial_psnr = {}
    if partial:
        dom = domains[partial_domain]
        for name, mod in partial.items():
            partial_psnr[name] = validate(dom, base, mod, solver_for(cfg, dom), split="test")["psnr"]

    profiles: dict[str, NormProfile] = {d: norm_profile(registry.get(d), base) for d in registry.list()}
    summary = {
        "source_domain": cfg.source_domain,
        "domains": ids,
        "psnr": matrix.psnr,
        "partial": {"domain": partial_domain, "psnr": partial_psnr},
        "profiles": {d: p.normalized for d, p in profiles.items()},
        "backbone_fingerprint": base.fingerprint(),
        "seconds": time.perf_counter() - t0,
    }
    emit_report(matrix, profiles, None, out, extra={"summary": summary, "training": reports})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def trend_checks(summary: dict, min_drop: float = 1.0, min_recovery: float = 0.5, slack: float = 0.5) -> dict:
    """Evaluate the domain-shift and layer-localization trends on a benchmark summary."""
    src = summary["source_domain"]
    table = summary["psnr"]
    base_src = table[src]["base"]
    checks = {}
    for d in summary["domains"]:
        if d == src:
            continue
        row = table[d]
        base, mod, full = row["base"], row["modulated"], row[f"full_tune:{d}"]
        gap = full - base
        recovery = (mod - base) / gap if gap > 0 else float("nan")
        checks[d] = {
            "drop": base_src - base,
            "drop_ok": base_src - base >= min_drop,
            "recovery": recovery,
            "recovery_ok": gap > 0 and recovery >= min_recovery,
            "upper_bound_ok": full >= mod - slack,
        }
    partial = summary.get("partial", {})
    if partial.get("psnr"):
        d = partial["domain"]
        base, mod = table[d]["base"], table[d]["modulated"]
        gain = mod - base
        first, last = partial["psnr"]["first_half"] - base, partial["psnr"]["last_half"] - base
        prof = summary["profiles"][d]
        third = max(1, len(prof) // 3)
        checks["localization"] = {
            "first_third": sum(prof[:third]) / third,
            "last_third": sum(prof[-third:]) / third,
            "profile_ok": sum(prof[-third:]) > sum(prof[:third]),
            "last_half_retained": last / gain if gain > 0 else float("nan"),
            "first_half_retained": first / gain if gain > 0 else float("nan"),
            "partial_ok": gain > 0 and last >= 0.8 * gain and first < last,
        }
    return checks


def load_backbone(out_dir) -> PriorNetwork:
    net, _ = load_checkpoint(Path(out_dir) / "backbone.safetensors")
    return net
