"""Command-line entry point wiring the modules into reproducible runs.

Every command reads one JSON config file, writes a run manifest into the
output directory before any computation starts, and exits with a code from
the closed set {0 ok, 1 check failure, 2 config error, 3 simulation or
training error, 4 I/O error}. ``--threads 1`` is the bitwise-reference run.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adjoint, dataio, topology as topo, training
from .errors import (CflViolation, ConfigError, DivergedLoss, ExportError,
                     InvalidProbeCount, SimulationError, TroughcalError)
from .fluid import FluidPropertyTable
from .params import ParamSet

ARTIFACT_VERSION = 1

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_IO = 4


@dataclass
class RunManifest:
    """Everything needed to reproduce a run; written before compute starts.

    Identical manifests imply identical outputs for single-threaded runs;
    multi-threaded runs match within the documented reduction tolerance.
    """

    command: str
    config_paths: list
    input_hashes: dict
    seed: int
    threads: int
    artifact_version: int = ARTIFACT_VERSION
    out_dir: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = dataclasses.asdict(self)
        payload["out_dir"] = str(out_dir)
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    return {str(p): file_sha256(p) for p in sorted(map(Path, paths))}


def _default_threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("TROUGHCAL_THREADS")
    return int(env) if env else 1


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _topology_from_config(cfg: dict):
    """Accept either a full config tree or default_config() keyword args."""
    node = cfg.get("topology", {})
    if "subfields" in node:
        return topo.build_topology(node)
    return topo.build_topology(topo.default_config(**node))


def _fluid_from_config(cfg: dict) -> FluidPropertyTable:
    node = cfg.get("fluid")
    return FluidPropertyTable.from_config(node) if node \
        else FluidPropertyTable()


def _scenario_from_config(cfg: dict, seed_override) -> dataio.SyntheticScenario:
    node = dict(cfg["scenario"])
    node["nights"] = [dataio.NightDrive(**n) for n in node["nights"]]
    node["omega"] = {int(k): np.asarray(v, dtype=float)
                     for k, v in node["omega"].items()}
    node["hpg"] = np.asarray(node["hpg"], dtype=float)
    if seed_override is not None:
        node["seed"] = seed_override
    return dataio.SyntheticScenario(**node)


def _criteria_from_config(cfg: dict) -> dataio.ExtractionCriteria:
    node = dict(cfg.get("criteria", {}))
    if node.get("clock_window_utc") is not None:
        node["clock_window_utc"] = tuple(node["clock_window_utc"])
    if node.get("site") is not None:
        node["site"] = tuple(node["site"])
    if "era_labels" in node:
        node["era_labels"] = {sf: [tuple(span) for span in spans]
                              for sf, spans in node["era_labels"].items()}
    return dataio.ExtractionCriteria(**node)


def _train_config(cfg: dict, args) -> training.TrainConfig:
    node = dict(cfg.get("train", {}))
    tc = training.TrainConfig(**node)
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.seed is not None:
        tc.seed = args.seed
    tc.threads = _default_threads(args)
    return tc


def _data_files(cfg: dict, args):
    data_dir = args.data or cfg.get("data_dir")
    if not data_dir:
        raise ConfigError("no data directory (--data or config data_dir)")
    files = sorted(Path(data_dir).glob("*.csv"))
    if not files:
        raise ConfigError(f"no CSV files under {data_dir}")
    return files


def cmd_synth(args) -> int:
    cfg = _load_json(args.config)
    topology = _topology_from_config(cfg)
    props = _fluid_from_config(cfg)
    scenario = _scenario_from_config(cfg, args.seed)
    manifest = RunManifest(
        command="synth", config_paths=[str(args.config)],
        input_hashes=_hash_inputs([args.config]), seed=scenario.seed,
        threads=1)
    manifest.write(args.out)
    paths, _ = dataio.generate(scenario, topology, props, args.out)
    print(f"wrote {len(paths)} nights under {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_json(args.config)
    topology = _topology_from_config(cfg)
    props = _fluid_from_config(cfg)
    criteria = _criteria_from_config(cfg)
    config = _train_config(cfg, args)
    files = _data_files(cfg, args)

    inputs = list(files) + [args.config]
    init_params, velocity, start_epoch = None, None, 0
    if args.resume:
        init_params, velocity, _, ck_config, start_epoch = \
            training.load_checkpoint(args.resume)
        if args.epochs is None:
            config.epochs = ck_config.epochs
        inputs.append(args.resume)
    manifest = RunManifest(
        command="fit", config_paths=[str(args.config)],
        input_hashes=_hash_inputs(inputs), seed=config.seed,
        threads=config.threads,
        extra={"resume": str(args.resume) if args.resume else None})
    manifest.write(args.out)

    sequences = dataio.extract_periods(dataio.ingest(files), criteria,
                                       topology)
    run_cfg = dataclasses.replace(
        config, epochs=max(config.epochs - start_epoch, 0))
    params, report = training.fit(sequences, topology, props, run_cfg,
                                  init_params=init_params,
                                  optimizer_state=velocity)
    out = Path(args.out)
    registry = training.era_registry(sequences)
    training.save_checkpoint(
        out / "checkpoint.json", params,
        report.meta["optimizer_state"],
        {f"{sf}/{era}": idx for (sf, era), idx in registry.mapping.items()},
        config, epoch=config.epochs)
    dataio.export_report(report, out, formats=("csv", "svg"))
    summary = {"final_loss": report.final_loss,
               "overall_rmse_K": report.overall_rmse,
               "epochs_run": len(report.loss_curve),
               "clip_events": report.clip_events}
    with open(out / "fit_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"fit: loss {report.final_loss:.6g} K^2, "
          f"overall RMSE {report.overall_rmse:.4g} K")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_json(args.config)
    topology = _topology_from_config(cfg)
    props = _fluid_from_config(cfg)
    criteria = _criteria_from_config(cfg)
    files = _data_files(cfg, args)

    params, _, _, ck_config, _ = training.load_checkpoint(args.checkpoint)
    manifest = RunManifest(
        command="eval", config_paths=[str(args.config)],
        input_hashes=_hash_inputs(list(files) + [args.config,
                                                 args.checkpoint]),
        seed=ck_config.seed, threads=1,
        extra={"checkpoint": str(args.checkpoint)})
    manifest.write(args.out)

    sequences = dataio.extract_periods(dataio.ingest(files), criteria,
                                       topology)
    for seq in sequences:
        key = (seq.subfield_id, seq.era_id)
        if key not in params.omega:
            raise ConfigError(
                f"checkpoint has no valve state for {key}; "
                f"known: {sorted(params.omega)}")
        if params.omega[key].size != seq.n_loops:
            raise ConfigError(
                f"checkpoint valve state for {key} covers "
                f"{params.omega[key].size} loops, data has {seq.n_loops}")
    params.ensure_blocks(topology, sequences, hpg_init=ck_config.hpg_init)
    report = training.build_report(params, sequences, topology, props)
    report.loss_curve = [adjoint.loss(params, sequences, topology, props)]
    out = Path(args.out)
    dataio.export_report(report, out, formats=("csv", "svg"))
    dataio.export_predictions(params, sequences, topology, props, out)
    summary = {"loss": report.loss_curve[0],
               "overall_rmse_K": report.overall_rmse,
               "n_sequences": len(sequences)}
    with open(out / "eval_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"eval: {len(sequences)} sequences, "
          f"overall RMSE {report.overall_rmse:.4g} K")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config:
        cfg = _load_json(args.config)
        topology = _topology_from_config(cfg)
        props = _fluid_from_config(cfg)
        config_paths = [str(args.config)]
        hashes = _hash_inputs([args.config])
    else:
        topology = topo.build_topology(
            topo.default_config(n_subfields=1, loops_per_subfield=2))
        props = FluidPropertyTable()
        config_paths, hashes = [], {}
    if args.probes < 1:
        raise InvalidProbeCount(f"--probes must be >= 1, got {args.probes}")
    manifest = RunManifest(
        command="check-grad", config_paths=config_paths, input_hashes=hashes,
        seed=seed, threads=1, extra={"probes": args.probes})
    manifest.write(args.out)

    sequence, params = miniature_problem(topology, props, seed)
    report = adjoint.check_gradients(params, sequence, topology, props,
                                     n_probes=args.probes, seed=seed)
    lines = [f"{p.block} analytic={p.analytic!r} numeric={p.numeric!r} "
             f"rel_error={p.rel_error:.3e} "
             f"{'ok' if p.passed else 'FAIL'}" for p in report.probes]
    lines.append(f"max relative error {report.max_rel_error:.3e} over "
                 f"{len(report.probes)} probes: "
                 f"{'PASS' if report.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    with open(Path(args.out) / "gradient_check.txt", "w",
              encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def miniature_problem(topology, props, seed):
    """A small synthetic sequence plus perturbed parameters, used to probe
    the gradient engine away from the loss minimum."""
    sf = topology.subfields[0]
    n = sf.n_loops
    n_spans = sf.loops[0].n_spans
    rng = np.random.default_rng(seed)
    base = dataio.parse_timestamp("2025-01-10T22:00:00Z")
    nights = [dataio.NightDrive(start_epoch=base, duration_s=1000.0,
                                flow_base=0.004, flow_wobble=0.2)]
    scenario = dataio.SyntheticScenario(
        subfield_id=sf.id, nights=nights,
        omega={0: 1.0 + 0.2 * (rng.random(n) - 0.5)},
        hpg=1.0 + rng.random((n, n_spans)),
        alpha=0.9, noise_sigma=0.3, seed=seed)
    seq, _ = dataio.simulate_night(scenario, nights[0], topology, props, rng)
    params = ParamSet.initialize(topology, [seq])
    x = params.flatten()
    x += 0.05 * rng.standard_normal(x.size)
    return seq, params.replace_from_vector(x)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="troughcal",
        description="Nighttime calibration of trough-loop mass flows and "
                    "receiver heat-loss coefficients.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; default $TROUGHCAL_THREADS or 1")

    p = sub.add_parser("synth", help="generate synthetic nights")
    common(p)
    p.set_defaults(func=cmd_synth, needs_config=True)

    p = sub.add_parser("fit", help="calibrate on extracted sequences")
    common(p)
    p.add_argument("--data", help="directory of schema CSVs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_fit, needs_config=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on data")
    common(p)
    p.add_argument("--data", help="directory of schema CSVs")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval, needs_config=True)

    p = sub.add_parser("check-grad",
                       help="finite-difference check of the gradient engine")
    common(p)
    p.add_argument("--probes", type=int, default=20)
    p.set_defaults(func=cmd_check_grad, needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_config and not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (CflViolation, SimulationError, DivergedLoss) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (ConfigError, InvalidProbeCount, ValueError, KeyError,
            TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TroughcalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
