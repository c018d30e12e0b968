"""Batch command line: run experiments from a JSON config, report scaling, dump circuits.

Usage::

    qnetcfa run CONFIG.json [--out PATH] [--seed N] [--trials N] [--backend NAME] [--strategy NAME]
    qnetcfa report RESULTS.csv [...] [--outdir DIR]
    qnetcfa dump-circuit PROTOCOL SIZE STRATEGY

Exit status is 0 on success, 1 on a validation error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cfa import AdaptationStrategy, StrategyError, round_circuits
from .noise import NoiseConfig
from .protocols import (
    BackendKind,
    ProtocolInstance,
    nested_distillation_instance,
    run_instance,
    single_distillation_instance,
    swap_chain_instance,
    teleportation_instance,
)
from .quantum import PureState, QuantumError
from .rng import RNG_ALGORITHM

SCHEMA_VERSION = "1"
SCHEMA_PATH = Path(__file__).with_name("config.schema.json")
PROTOCOLS = ("swap_chain", "distill_single", "distill_nested", "teleport")
SLOPE_THRESHOLD = 1.5
MAX_SEED = 2**64 - 1

# state sent by the teleport protocol: cos(pi/8)|0> + e^{i pi/4} sin(pi/8)|1>
TELEPORT_AMPLITUDES = (math.cos(math.pi / 8), complex(math.cos(math.pi / 4), math.sin(math.pi / 4)) * math.sin(math.pi / 8))


class ConfigError(ValueError):
    """Invalid configuration; maps to exit status 1."""


class ExperimentError(RuntimeError):
    """A sweep point failed; the message names the point."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    size: int
    backend: str = "cfa"
    strategy: str = "chain"
    F_gen: float = 1.0
    f_gate: float = 1.0
    Tdp_s: float = 0.01
    loss_p: float = 0.0
    channel_latency_s: float = 1e-3
    trials: int = 10_000
    seed: int = 0
    sweep: tuple[int, ...] | None = None
    output_path: str | None = None
    jsonl: bool = False
    record_wallclock: bool = True
    workers: int = 1

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.loss_p, self.f_gate, self.F_gen, self.Tdp_s)

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.sweep if self.sweep else (self.size,)

    def replace(self, **changes: Any) -> ExperimentConfig:
        return validate_config(dataclasses.replace(self, **changes))


FIELDS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))
REQUIRED = ("protocol", "size")


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_real(x: Any) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


def _need(cond: bool, name: str, bound: str) -> None:
    if not cond:
        raise ConfigError(f"{name} out of range: must be {bound}")


def _min_size(protocol: str) -> int:
    return {"swap_chain": 3, "distill_single": 1, "distill_nested": 1, "teleport": 0}[protocol]


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every field against its bound and normalise names."""
    if cfg.protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {', '.join(PROTOCOLS)}; got {cfg.protocol!r}")
    try:
        backend = BackendKind.parse(cfg.backend).value
    except ValueError as e:
        raise ConfigError(str(e)) from None
    try:
        strategy = AdaptationStrategy.parse(cfg.strategy).value
    except (ValueError, StrategyError) as e:
        raise ConfigError(str(e)) from None
    for name in ("F_gen", "f_gate", "Tdp_s", "loss_p", "channel_latency_s"):
        if not _is_real(getattr(cfg, name)):
            raise ConfigError(f"{name} must be a finite number")
    _need(0.0 < cfg.F_gen <= 1.0, "F_gen", "in (0, 1]")
    _need(0.0 <= cfg.f_gate <= 1.0, "f_gate", "in [0, 1]")
    _need(cfg.Tdp_s > 0.0, "Tdp_s", "> 0")
    _need(0.0 <= cfg.loss_p < 1.0, "loss_p", "in [0, 1)")
    _need(cfg.channel_latency_s >= 0.0, "channel_latency_s", ">= 0")
    for name in ("size", "trials", "seed", "workers"):
        if not _is_int(getattr(cfg, name)):
            raise ConfigError(f"{name} must be an integer")
    _need(cfg.trials >= 1, "trials", ">= 1")
    _need(0 <= cfg.seed <= MAX_SEED, "seed", f"in [0, {MAX_SEED}]")
    _need(cfg.workers >= 1, "workers", ">= 1")
    low = _min_size(cfg.protocol)
    sweep = cfg.sweep
    if sweep is not None:
        sweep = tuple(sweep)
        if not sweep or not all(_is_int(n) for n in sweep):
            raise ConfigError("sweep must be a non-empty list of integers")
    for n in (cfg.size,) + (sweep or ()):
        _need(n >= low, "size", f">= {low} for {cfg.protocol}")
        if cfg.protocol == "distill_single":
            _need(n == 1, "size", "1 for distill_single")
    if cfg.output_path is not None and not isinstance(cfg.output_path, str):
        raise ConfigError("output_path must be a string")
    for name in ("jsonl", "record_wallclock"):
        if not isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name} must be true or false")
    return dataclasses.replace(cfg, backend=backend, strategy=strategy, sweep=sweep)


def config_from_mapping(data: Any) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(FIELDS))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}; valid keys: {', '.join(FIELDS)}")
    missing = [k for k in REQUIRED if k not in data]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    return validate_config(ExperimentConfig(**data))


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON config document (schema in ``config.schema.json``)."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_mapping(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    data = dataclasses.asdict(cfg)
    if data["sweep"] is not None:
        data["sweep"] = list(data["sweep"])
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class ResultRecord:
    protocol: str
    size: int
    backend: str
    strategy: str
    F_gen: float
    f_gate: float
    Tdp_s: float
    loss_p: float
    latency_s: float
    seed: int
    trials: int
    success_prob: float
    fidelity: float
    stderr: float
    peak_live_amplitudes: int
    peak_tensor_order: int
    wallclock_s: float
    sim_time_s: float
    rng_algorithm: str = RNG_ALGORITHM
    schema_version: str = SCHEMA_VERSION


CSV_FIELDS = tuple(f.name for f in dataclasses.fields(ResultRecord))


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Iterable[ResultRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in CSV_FIELDS])
    return buf.getvalue()


def records_to_jsonl(records: Iterable[ResultRecord]) -> str:
    return "".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in records)


_INT_FIELDS = {"size", "seed", "trials", "peak_live_amplitudes", "peak_tensor_order"}
_STR_FIELDS = {"protocol", "backend", "strategy", "rng_algorithm", "schema_version"}


def read_records(text: str) -> list[ResultRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_FIELDS:
        raise ConfigError("CSV header does not match the result schema")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        vals = {}
        for name, cell in zip(CSV_FIELDS, row):
            vals[name] = cell if name in _STR_FIELDS else int(cell) if name in _INT_FIELDS else float(cell)
        out.append(ResultRecord(**vals))
    return out


# ---------------------------------------------------------------- running


def make_instance(protocol: str, size: int, noise: NoiseConfig, latency: float) -> ProtocolInstance:
    if protocol == "swap_chain":
        return swap_chain_instance(size, noise, latency)
    if protocol == "distill_single":
        return single_distillation_instance(noise, latency)
    if protocol == "distill_nested":
        return nested_distillation_instance(size, noise, latency)
    if protocol == "teleport":
        return teleportation_instance(PureState(("s",), np.array(TELEPORT_AMPLITUDES)), noise, latency, size)
    raise ConfigError(f"unknown protocol {protocol!r}")


def run_point(cfg: ExperimentConfig, size: int) -> ResultRecord:
    inst = make_instance(cfg.protocol, size, cfg.noise, cfg.channel_latency_s)
    start = time.perf_counter()
    res = run_instance(inst, cfg.backend, cfg.strategy, cfg.trials, cfg.seed, cfg.workers)
    wall = time.perf_counter() - start
    fid = res.output_fidelity
    if fid is None:
        print(f"warning: {cfg.protocol} size {size}: {res.note or 'fidelity undefined'}; writing 0.0",
              file=sys.stderr)
        fid = 0.0
    mc = res.backend == BackendKind.MONTE_CARLO.value
    return ResultRecord(
        protocol=cfg.protocol,
        size=size,
        backend=res.backend,
        strategy=cfg.strategy,
        F_gen=float(cfg.F_gen),
        f_gate=float(cfg.f_gate),
        Tdp_s=float(cfg.Tdp_s),
        loss_p=float(cfg.loss_p),
        latency_s=float(cfg.channel_latency_s),
        seed=cfg.seed,
        trials=cfg.trials if mc else 1,
        success_prob=float(res.success_probability),
        fidelity=float(fid),
        stderr=float(res.stderr_estimate),
        peak_live_amplitudes=int(res.stats.peak_live_amplitudes),
        peak_tensor_order=int(res.stats.peak_tensor_order),
        wallclock_s=float(wall) if cfg.record_wallclock else 0.0,
        sim_time_s=float(res.final_sim_time),
    )


def run_experiment(cfg: ExperimentConfig) -> list[ResultRecord]:
    """One record per sweep point, run sequentially; writes outputs if configured."""
    cfg = validate_config(cfg)
    records = []
    for size in cfg.sizes:
        try:
            records.append(run_point(cfg, size))
        except (QuantumError, ValueError, RuntimeError) as e:
            raise ExperimentError(f"{cfg.protocol} size {size} ({cfg.backend}/{cfg.strategy}): {e}") from e
    if cfg.output_path:
        path = Path(cfg.output_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(records_to_csv(records), encoding="utf-8", newline="")
        if cfg.jsonl:
            path.with_suffix(".jsonl").write_text(records_to_jsonl(records), encoding="utf-8", newline="")
    return records


# ---------------------------------------------------------------- report


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def classify(slope: float) -> str:
    return "linear" if slope <= SLOPE_THRESHOLD else "super-linear"


def scale_of(protocol: str, size: int) -> int:
    """Problem size the cost should be linear in: n for chains, 2^k pairs for trees."""
    return size if protocol == "swap_chain" else 2**size


def _series_line(label: str, xs: list[int], ys: list[float]) -> str:
    if any(v <= 0 for v in ys):
        return f"  {label}: slope n/a (non-positive values)"
    s = loglog_slope(xs, ys)
    return f"  {label}: log-log slope {s:.3f} -> {classify(s)}"


def emit_scaling_report(records: Sequence[ResultRecord], outdir: str | Path = ".") -> str:
    """Fit growth per (protocol, backend, strategy) group and write plot data.

    For each group two files are written: ``<group>_wallclock.dat`` and
    ``<group>_amplitudes.dat``, each with ``size value`` rows.
    """
    groups: dict[tuple[str, str, str], list[ResultRecord]] = {}
    for r in records:
        groups.setdefault((r.protocol, r.backend, r.strategy), []).append(r)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for (protocol, backend, strategy), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.size)
        if len({r.size for r in rows}) < 3:
            raise ConfigError(f"{protocol}/{backend}/{strategy}: need at least 3 sweep points to fit, got {len(rows)}")
        stem = f"{protocol}_{backend}_{strategy}"
        (outdir / f"{stem}_wallclock.dat").write_text(
            "".join(f"{r.size} {r.wallclock_s!r}\n" for r in rows), encoding="utf-8")
        (outdir / f"{stem}_amplitudes.dat").write_text(
            "".join(f"{r.size} {r.peak_live_amplitudes}\n" for r in rows), encoding="utf-8")
        xs = [scale_of(protocol, r.size) for r in rows]
        lines.append(f"{stem}")
        lines.append(f"  {'size':>6} {'wallclock_s':>12} {'peak_amps':>10} {'order':>6} {'fidelity':>10}")
        for r in rows:
            lines.append(f"  {r.size:>6} {r.wallclock_s:>12.4g} {r.peak_live_amplitudes:>10} "
                         f"{r.peak_tensor_order:>6} {r.fidelity:>10.6f}")
        lines.append(_series_line("wallclock_s", xs, [r.wallclock_s for r in rows]))
        lines.append(_series_line("peak_live_amplitudes", xs, [float(r.peak_live_amplitudes) for r in rows]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- circuits


def dump_circuit(protocol: str, size: int, strategy: str) -> str:
    """Adaptation circuits of every deciding round, as ``GATE NAME ops`` lines."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {', '.join(PROTOCOLS)}; got {protocol!r}")
    if size < _min_size(protocol):
        raise ConfigError(f"size out of range: must be >= {_min_size(protocol)} for {protocol}")
    strat = AdaptationStrategy.parse(strategy)
    loccp, _ = make_instance(protocol, size, NoiseConfig(), 1e-3).record()
    return "".join(c.dump() for c in round_circuits(loccp, strat) if c is not None)


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnetcfa", description="Quantum network simulation with control flow adaptation.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="CSV output path (overrides output_path)")
    run.add_argument("--seed", type=int)
    run.add_argument("--trials", type=int)
    run.add_argument("--backend")
    run.add_argument("--strategy")
    run.add_argument("--workers", type=int)
    rep = sub.add_parser("report", help="fit scaling of swept results")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--outdir", default=".")
    dump = sub.add_parser("dump-circuit", help="print adaptation circuits")
    dump.add_argument("protocol")
    dump.add_argument("size", type=int)
    dump.add_argument("strategy")
    return p


def _cmd_run(args) -> None:
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    overrides = {k: v for k, v in (("seed", args.seed), ("trials", args.trials), ("backend", args.backend),
                                   ("strategy", args.strategy), ("workers", args.workers),
                                   ("output_path", args.out)) if v is not None}
    cfg = cfg.replace(**overrides)
    records = run_experiment(cfg)
    if not cfg.output_path:
        sys.stdout.write(records_to_csv(records))


def _cmd_report(args) -> None:
    records = []
    for path in args.csv:
        records += read_records(Path(path).read_text(encoding="utf-8"))
    sys.stdout.write(emit_scaling_report(records, args.outdir))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        if args.command == "run":
            _cmd_run(args)
        elif args.command == "report":
            _cmd_report(args)
        else:
            sys.stdout.write(dump_circuit(args.protocol, args.size, args.strategy))
    except (ConfigError, StrategyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ExperimentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
