"""Command-line entry point: one subcommand per pipeline stage.

Every run writes ``manifest-<command>.json`` into the output directory before
any work starts. It records the config hash, package version, derived seeds
and every file the stage will produce.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (outputs
written so far are kept).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import benchmark as bench
from . import igso3
from .config import RunConfig, load_config
from .errors import AdsplaceError, ConfigError
from .lattice import adsorbate_site, species_set
from .potentials import calculator_from_dict, evaluate
from .relax import relax
from .sampler import sample_many, slab_only, write_trajectories
from .score_net import load_model
from .structure_io import parse_structure_file, write_frames, write_structure_file

log = logging.getLogger("adsplace")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
STREAMS = ("benchmark", "train", "sample")


def substream_seed(seed: int, name: str) -> int:
    """Seed of the named random stream derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seed: int
    seeds: dict
    started: str
    outputs: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest-{self.command}.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def start_run(cfg: RunConfig, command: str, outputs: dict, inputs: Optional[dict] = None):
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    outputs = {"config": "config.yaml", **outputs}
    seeds = {name: substream_seed(cfg.seed, name) for name in STREAMS}
    man = RunManifest(command, cfg.config_hash(), __version__, cfg.seed, seeds, _now(), outputs,
                      {k: str(v) for k, v in (inputs or {}).items() if v is not None})
    man.write(out)
    return man, {k: out / v for k, v in outputs.items()}


def _table_path(cfg: RunConfig) -> Optional[Path]:
    cache = cfg["table"].get("cache")
    if not cache:
        return None
    return Path(cache) if Path(cache).is_absolute() else cfg.out_dir / cache


def _table(cfg: RunConfig) -> igso3.IgSo3Table:
    return igso3.load_or_build_table(_table_path(cfg), **cfg.table_params())


def _calculator(cfg: RunConfig):
    """(slab, template, calculator) of the configured preset, or a calculator loaded from JSON."""
    spec = cfg["calculator"]
    if spec.get("file"):
        try:
            return None, None, calculator_from_dict(json.loads(Path(spec["file"]).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read calculator file {spec['file']}: {exc}") from None
    return bench.preset_system(spec["preset"])


def _load_benchmark(path) -> list:
    if path is None or not Path(path).exists():
        raise ConfigError(f"benchmark file {path} not found; run the benchmark subcommand first")
    return bench.load_benchmark(path)


# -- subcommands ----------------------------------------------------------------


def cmd_benchmark(cfg: RunConfig, args) -> int:
    _, paths = start_run(cfg, "benchmark", {"benchmark": "benchmark.jsonl", "dataset": "dataset.jsonl",
                                            "summary": "benchmark_summary.json"})
    from dataclasses import replace

    from .training import save_samples

    bcfg = replace(cfg.benchmark(), seed=substream_seed(cfg.seed, "benchmark"))
    systems = []
    for i in range(bcfg.n_systems):
        systems.append(bench.generate_system(bcfg, i))
        log.info("system %s: %d minima, oracle %.4f eV", systems[-1].system_id, len(systems[-1].local_minima),
                 systems[-1].oracle_energy)
    bench.save_benchmark(systems, paths["benchmark"])
    save_samples(bench.training_samples(systems), paths["dataset"])
    summary = {
        "n_systems": len(systems),
        "family": bcfg.family,
        "split": bcfg.split,
        "minima_per_system": [len(s.local_minima) for s in systems],
        "relax_failures": [s.relax_failures for s in systems],
        "oracle_energy": [s.oracle_energy for s in systems],
    }
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {len(systems)} systems to {paths['benchmark']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    from .plotting import loss_curve_plot
    from .training import load_samples, train

    dataset = args.dataset or cfg.out_dir / "dataset.jsonl"
    if not Path(dataset).exists():
        raise ConfigError(f"dataset {dataset} not found; run the benchmark subcommand first")
    _, paths = start_run(cfg, "train", {"checkpoint": "best.npz", "last": "last.npz", "loss_curve": "loss_curve.tsv",
                                        "loss_plot": "loss_curve.png"}, {"dataset": dataset, "resume": args.resume,
                                                              "igso3_table": _table_path(cfg)})
    samples = load_samples(dataset)
    tcfg = replace(cfg.training(), seed=substream_seed(cfg.seed, "train"))
    net = cfg.net(species_set([s.system for s in samples]))
    res = train(samples, net, tcfg, cfg.schedule(), _table(cfg), out_dir=cfg.out_dir, resume=args.resume)
    loss_curve_plot(res.history, paths["loss_plot"])
    print(f"best validation loss {res.best_val:.6g} at step {res.best_step}; checkpoint {res.best_checkpoint}")
    return EXIT_OK


def _targets(cfg: RunConfig, args):
    """Slabs and templates to sample on: a benchmark file or the configured preset."""
    if args.benchmark:
        systems = _load_benchmark(args.benchmark)
        return [(b.system_id, b.slab, b.template) for b in systems]
    slab, template, _ = _calculator(cfg)
    if slab is None:
        raise ConfigError("sampling needs a benchmark file or a synthetic preset")
    return [(cfg["calculator"]["preset"], slab, template)]


def cmd_sample(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    _, paths = start_run(cfg, "sample", {"structures": "samples.xyz", "trajectories": "trajectories.jsonl",
                                         "sites": "sites.tsv"}, {"checkpoint": args.checkpoint,
                                                                 "benchmark": args.benchmark,
                                                                 "igso3_table": _table_path(cfg)})
    model = load_model(args.checkpoint, table=_table(cfg))
    seed = substream_seed(cfg.seed, "sample")
    targets = _targets(cfg, args)
    slabs, tpls, rngs, ids = [], [], [], []
    for t, (sid, slab, tpl) in enumerate(targets):
        for k in range(args.n):
            slabs.append(slab)
            tpls.append(tpl)
            rngs.append(np.random.default_rng([seed, t, k]))
            ids.append((sid, k))
    res = sample_many(slabs, None, model, cfg.sampler(), cfg.schedule(), rngs, templates=tpls)
    write_frames(paths["structures"], [r.system for r in res])
    write_trajectories(paths["trajectories"], [r.trajectory for r in res])
    with open(paths["sites"], "w") as fh:
        fh.write("system_id\tsample\tx\ty\tsteps_used\n")
        for (sid, k), r in zip(ids, res):
            x, y = adsorbate_site(r.system)
            fh.write(f"{sid}\t{k}\t{x:.6f}\t{y:.6f}\t{r.n_steps_used}\n")
    print(f"wrote {len(res)} samples to {paths['structures']}")
    return EXIT_OK


def cmd_relax(cfg: RunConfig, args) -> int:
    from .sampler import init_placement

    _, paths = start_run(cfg, "relax", {"structure": "relaxed.xyz", "result": "relax_result.json"},
                         {"structure": args.structure})
    slab, template, calc = _calculator(cfg)
    if args.structure and not Path(args.structure).exists():
        raise ConfigError(f"structure file {args.structure} not found")
    if args.structure:
        system = parse_structure_file(args.structure)
    elif slab is not None:
        system = init_placement(slab, template, np.random.default_rng(substream_seed(cfg.seed, "sample")),
                                cfg["sampler"]["interstitial_gap"])
    else:
        raise ConfigError("relax needs --structure when the calculator comes from a file")
    res = relax(system, calc, cfg.relax())
    write_structure_file(paths["structure"], res.system)
    result = {"energy": res.energy, "n_iterations": res.n_iterations, "converged": res.converged,
              "failed": res.failed, "fmax": res.fmax}
    paths["result"].write_text(json.dumps(result, indent=2) + "\n")
    print(f"energy {res.energy:.6f} eV after {res.n_iterations} iterations (converged: {res.converged})")
    return EXIT_OK if not res.failed else EXIT_RUNTIME


def cmd_oracle(cfg: RunConfig, args) -> int:
    _, paths = start_run(cfg, "oracle", {"minima": "oracle_minima.json", "structure": "oracle.xyz"})
    slab, template, calc = _calculator(cfg)
    if slab is None:
        raise ConfigError("the oracle needs a synthetic preset")
    b = cfg["benchmark"]
    res = bench.oracle_minimum(slab, template, calc, b["grid"], b["n_orientations"])
    minima = [m.to_dict() for m in res.local_minima]
    paths["minima"].write_text(json.dumps({"energy": res.energy, "local_minima": minima}, indent=2) + "\n")
    write_structure_file(paths["structure"], res.system)
    print(f"oracle energy {res.energy:.6f} eV; {len(minima)} local minima")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    from .plotting import anomaly_plot, success_plot

    benchmark_path = args.benchmark or cfg.out_dir / "benchmark.jsonl"
    systems = _load_benchmark(benchmark_path)
    ev = cfg["evaluate"]
    methods = list(ev["methods"])
    if "diffusion" in methods and not args.checkpoint:
        raise ConfigError("--checkpoint is required to evaluate the diffusion method")
    _, paths = start_run(cfg, "evaluate", {"records": "records.jsonl", "summary": "summary.json",
                                           "series": "series.tsv", "success_plot": "success_vs_nsites.png",
                                           "anomaly_plot": "anomaly_vs_nsites.png"},
                         {"benchmark": benchmark_path, "checkpoint": args.checkpoint,
                          "igso3_table": _table_path(cfg) if "diffusion" in methods else None})
    model = load_model(args.checkpoint, table=_table(cfg)) if "diffusion" in methods else None
    pcfg = replace(cfg.protocol(), seed=substream_seed(cfg.seed, "sample"))
    nsites = sorted({int(n) for n in ev["nsites"]})
    nmax = max(nsites + [int(ev["diversity_samples"])])
    records, rows, diversity = [], [], {}
    for method in methods:
        # Site k of every system is independent of nsites, so one run at the
        # largest nsites serves every prefix.
        recs = bench.run_protocol(systems, method, nmax, pcfg, model, workers=int(ev["workers"]))
        records.extend(recs)
        for n in nsites:
            rows.append({"method": method, **bench.aggregate(recs, n)})
        div = bench.diversity_by_system(recs, systems, int(ev["diversity_samples"]))
        diversity[method] = float(np.mean(list(div.values())))
    bench.save_records(records, paths["records"])
    summary = {"config_hash": cfg.config_hash(), "rows": rows, "site_diversity": diversity}
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    table = bench.series_table(rows)
    paths["series"].write_text(table)
    success_plot(rows, paths["success_plot"])
    anomaly_plot(rows, paths["anomaly_plot"])
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "relax": cmd_relax,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "oracle": cmd_oracle,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (unset keys take defaults)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="adsplace", description="Adsorbate placement by pose diffusion on synthetic slabs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("benchmark", parents=[common], help="generate benchmark systems and the training dataset")
    t = sub.add_parser("train", parents=[common], help="train a score model")
    t.add_argument("--dataset", help="training samples (default: <out>/dataset.jsonl)")
    t.add_argument("--resume", help="checkpoint to continue from")
    s = sub.add_parser("sample", parents=[common], help="draw adsorbate placements with a trained model")
    s.add_argument("--checkpoint")
    s.add_argument("--benchmark", help="benchmark file (default: the configured preset)")
    s.add_argument("-n", type=int, default=10, help="samples per system")
    r = sub.add_parser("relax", parents=[common], help="relax a structure with the configured calculator")
    r.add_argument("--structure", help="extended-XYZ input (default: a random placement on the preset)")
    e = sub.add_parser("evaluate", parents=[common], help="run the placement protocol and report metrics")
    e.add_argument("--checkpoint")
    e.add_argument("--benchmark", help="benchmark file (default: <out>/benchmark.jsonl)")
    sub.add_parser("oracle", parents=[common], help="dense-grid global minimum of the configured preset")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.print_config:
            print(cfg.to_yaml(), end="")
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdsplaceError, OSError, FloatingPointError, RuntimeError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
