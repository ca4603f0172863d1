"""Experiment control: runs, sweeps, metrics, and report emission.

A run builds a device + engine + workload from one flat config (file of
``key = value`` lines and/or CLI flags), resets the device, loads, drives
the workload to steady state, and reports a write drilldown measured over
the final window. Reports are emitted as JSON and/or a CSV row with a fixed
schema.

Exit codes: 0 success, 2 config error, 3 invariant breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from zstoresim.engine import (
    GC_GDT,
    GC_GREEDY,
    MODE_INPLACE,
    MODE_OOP,
    Engine,
    EngineConfig,
)
from zstoresim.errors import ConfigError, InvariantBreach
from zstoresim.flashsim import (
    MODE_FDP,
    MODE_STANDARD,
    MODE_ZNS,
    PAGE_BYTES,
    DeviceConfig,
    FlashDevice,
)
from zstoresim.workload import WorkloadConfig, WorkloadDriver

CSV_HEADER = ("run_id,mode,zipf_theta,fill,zone_pages,max_open_zones,gc_policy,"
              "nowa,compression,fdp,user_pages,dwb_pages,db_gc_pages,comp_pages,"
              "ssd_gc_pages,db_waf,ssd_waf,total_waf,hit_ratio,"
              "logical_bytes_per_op,physical_bytes_per_op")


@dataclass
class WriteDrilldown:
    user_pages: int = 0
    dwb_pages: int = 0
    db_gc_pages: int = 0
    comp_pages: int = 0
    ssd_gc_pages: int = 0

    @property
    def db_issued(self) -> int:
        return self.user_pages + self.dwb_pages + self.db_gc_pages + self.comp_pages

    @property
    def db_waf(self) -> float:
        if self.user_pages == 0:
            return 1.0
        return self.db_issued / self.user_pages

    @property
    def ssd_waf(self) -> float:
        if self.db_issued == 0:
            return 1.0
        return (self.db_issued + self.ssd_gc_pages) / self.db_issued

    @property
    def total_waf(self) -> float:
        return self.db_waf * self.ssd_waf


@dataclass
class ExperimentSpec:
    """Flat run configuration; field names map 1:1 to CLI flags."""

    seed: int = 0
    run_id: str = ""
    # device
    capacity_pages: int = 16384
    superblock_pages: int = 256
    op_fraction: float = 0.10
    free_sb_threshold: int = 2
    device_mode: str = MODE_STANDARD
    ruh_count: int = 1
    ru_pages: int = 0  # 0 = superblock_pages
    gc_stream_separate: bool = True
    # engine
    mode: str = MODE_OOP
    zone_pages: int = 256
    max_open_zones: int = 4
    gc_policy: str = GC_GDT
    nowa: bool = False
    compression: bool = False
    fdp: bool = False
    gc_trigger_free_zones: int = 1
    edt_group_count: int = 4
    usable_fraction: float = 1.0
    dwb_pages: int = 128
    # workload
    fill: float = 0.9
    zipf_theta: float = 0.8
    update_fraction: float = 0.5
    total_ops: int = 20_000
    pool_fraction: float = 0.10
    eviction_batch: int = 64
    compress_target: float = 0.5
    steady_capacity_multiple: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.fill <= 1.0:
            raise ConfigError("fill must be in (0, 1]")
        if not self.run_id:
            self.run_id = f"{self.mode}-{self.device_mode}-s{self.seed}"

    def device_config(self) -> DeviceConfig:
        return DeviceConfig(
            capacity_pages=self.capacity_pages,
            superblock_pages=self.superblock_pages,
            op_fraction=self.op_fraction,
            free_sb_threshold=self.free_sb_threshold,
            mode=self.device_mode,
            ruh_count=self.ruh_count,
            ru_pages=self.ru_pages or None,
            gc_stream_separate=self.gc_stream_separate,
        )

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            mode=self.mode,
            zone_pages=self.zone_pages,
            max_open_zones=self.max_open_zones,
            gc_policy=self.gc_policy,
            nowa_enabled=self.nowa,
            compression_enabled=self.compression,
            fdp_hints_enabled=self.fdp,
            gc_trigger_free_zones=self.gc_trigger_free_zones,
            edt_group_count=self.edt_group_count,
            usable_fraction=self.usable_fraction,
            dwb_pages=self.dwb_pages,
        )

    def workload_config(self) -> WorkloadConfig:
        page_count = int(self.fill * self.capacity_pages)
        if self.mode == MODE_INPLACE:
            page_count = min(page_count, self.capacity_pages - self.dwb_pages)
        return WorkloadConfig(
            page_count=page_count,
            zipf_theta=self.zipf_theta,
            update_fraction=self.update_fraction,
            total_ops=self.total_ops,
            seed=self.seed,
            pool_fraction=self.pool_fraction,
            eviction_batch=self.eviction_batch,
            compress_target=self.compress_target,
            steady_capacity_multiple=self.steady_capacity_multiple,
        )


@dataclass
class RunReport:
    spec: ExperimentSpec
    drilldown: WriteDrilldown
    hit_ratio: float
    logical_bytes_per_op: float
    physical_bytes_per_op: float
    steady_state: bool
    window_ops: int
    cumulative_ssd_gc_pages: int = 0

    def to_dict(self) -> dict:
        d = self.drilldown
        return {
            "run_id": self.spec.run_id,
            "config": dataclasses.asdict(self.spec),
            "drilldown": {
                "user_pages": d.user_pages,
                "dwb_pages": d.dwb_pages,
                "db_gc_pages": d.db_gc_pages,
                "comp_pages": d.comp_pages,
                "ssd_gc_pages": d.ssd_gc_pages,
            },
            "db_waf": d.db_waf,
            "ssd_waf": d.ssd_waf,
            "total_waf": d.total_waf,
            "hit_ratio": self.hit_ratio,
            "logical_bytes_per_op": self.logical_bytes_per_op,
            "physical_bytes_per_op": self.physical_bytes_per_op,
            "steady_state": self.steady_state,
            "window_ops": self.window_ops,
            "cumulative_ssd_gc_pages": self.cumulative_ssd_gc_pages,
        }

    def csv_row(self) -> str:
        s, d = self.spec, self.drilldown
        cells = [
            s.run_id, s.mode, repr(s.zipf_theta), repr(s.fill),
            str(s.zone_pages), str(s.max_open_zones), s.gc_policy,
            str(int(s.nowa)), str(int(s.compression)), str(int(s.fdp)),
            str(d.user_pages), str(d.dwb_pages), str(d.db_gc_pages),
            str(d.comp_pages), str(d.ssd_gc_pages),
            repr(d.db_waf), repr(d.ssd_waf), repr(d.total_waf),
            repr(self.hit_ratio),
            repr(self.logical_bytes_per_op), repr(self.physical_bytes_per_op),
        ]
        return ",".join(cells)


def run_experiment(spec: ExperimentSpec, run_dir: Path | None = None) -> RunReport:
    device = FlashDevice(spec.device_config())
    device.discard_all()
    engine = Engine(device, spec.engine_config(), run_dir=run_dir)
    driver = WorkloadDriver(engine, device, spec.workload_config())
    result = driver.run()

    ew = result.engine_window
    host_delta, nand_delta, gcrel_delta = result.device_window
    drill = WriteDrilldown(
        user_pages=ew.user_slots,
        dwb_pages=ew.dwb_slots,
        db_gc_pages=ew.db_gc_slots,
        comp_pages=ew.comp_slots,
        ssd_gc_pages=gcrel_delta,
    )
    if host_delta != drill.db_issued:
        raise InvariantBreach(
            f"counter audit failed: device host writes {host_delta} "
            f"!= engine issued {drill.db_issued}")
    if drill.ssd_waf < 1.0:
        raise InvariantBreach("ssd_waf below its theoretical floor")

    ops = result.window_ops
    return RunReport(
        spec=spec,
        drilldown=drill,
        hit_ratio=result.pool.hit_ratio,
        logical_bytes_per_op=drill.db_issued * PAGE_BYTES / ops,
        physical_bytes_per_op=nand_delta * PAGE_BYTES / ops,
        steady_state=result.steady_state,
        window_ops=ops,
        cumulative_ssd_gc_pages=device.counters.gc_relocated_pages,
    )


# ----------------------------------------------------------------------
# GC-unit inference

FALLBACK_CEILING_PAGES = (32 << 30) // PAGE_BYTES  # 32 GB safe upper bound


@dataclass
class InferenceResult:
    gc_unit_pages: int
    found: bool
    measured: list[tuple[int, float]] = field(default_factory=list)


def _zone_pattern_waf(device: FlashDevice, zone_pages: int, seed: int,
                      passes_to_steady: float = 4.0) -> float:
    """Single-active-zone overwrite pattern: whole zones rewritten in a
    seeded random order, one zone at a time; returns the steady-state WAF."""
    cap = device.config.capacity_pages
    n_zones = cap // zone_pages
    rng = np.random.default_rng(seed)

    def rewrite(zone: int):
        base = zone * zone_pages
        lbas = np.arange(base, base + zone_pages, dtype=np.int64)
        if device.config.mode == MODE_ZNS:
            step = device.sb_pages
            for z in range(base // step, (base + zone_pages) // step):
                device.zone_reset(z)
                device.zone_append(z, step)
        else:
            device.host_write(lbas)

    for z in range(n_zones):
        rewrite(z)  # initial fill
    target = int(passes_to_steady * cap)
    while device.counters.host_write_pages < target:
        for z in rng.permutation(n_zones):
            rewrite(int(z))
    before = device.counters
    stop = before.host_write_pages + cap
    while device.counters.host_write_pages < stop:
        for z in rng.permutation(n_zones):
            rewrite(int(z))
    after = device.counters
    host = after.host_write_pages - before.host_write_pages
    nand = after.nand_write_pages - before.nand_write_pages
    return nand / host


def infer_gc_unit(device_spec: DeviceConfig, candidates: list[int], seed: int = 1,
                  epsilon: float = 0.01,
                  ceiling: int = FALLBACK_CEILING_PAGES) -> InferenceResult:
    """Find the smallest candidate zone size whose single-active-zone
    pattern reaches WAF <= 1 + epsilon; fall back to the ceiling."""
    if not candidates:
        raise ConfigError("candidate list must not be empty")
    if sorted(candidates) != list(candidates):
        raise ConfigError("candidates must be ascending")
    measured = []
    for zone_pages in candidates:
        if device_spec.capacity_pages % zone_pages:
            raise ConfigError(f"candidate {zone_pages} does not divide the capacity")
        device = FlashDevice(device_spec)
        waf = _zone_pattern_waf(device, zone_pages, seed)
        measured.append((zone_pages, waf))
        if waf <= 1.0 + epsilon:
            return InferenceResult(zone_pages, True, measured)
    return InferenceResult(ceiling, False, measured)


# ----------------------------------------------------------------------
# OP-split sweep


def op_split_sweep(fractions: list[float], spec: ExperimentSpec) -> list[dict]:
    """DB-vs-SSD WAF trade-off: for each fill fraction f, DB GC is confined
    to the first f of the zone space while the dataset stays fixed."""
    dataset_fraction = spec.fill
    for f in fractions:
        if not dataset_fraction < f <= 1.0:
            raise ConfigError(
                f"fraction {f} outside (logical fill {dataset_fraction}, 1]")
    rows = []
    for f in fractions:
        run_spec = dataclasses.replace(
            spec, usable_fraction=f, run_id=f"{spec.run_id}-f{f}")
        report = run_experiment(run_spec)
        d = report.drilldown
        rows.append({"fraction": f, "db_waf": d.db_waf, "ssd_waf": d.ssd_waf,
                     "total_waf": d.total_waf})
    return rows


# ----------------------------------------------------------------------
# emission


def emit_report(report: RunReport, fmt: str, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        path.write_text(CSV_HEADER + "\n" + report.csv_row() + "\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path


# ----------------------------------------------------------------------
# config file + CLI

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str, lineno: int | None = None):
    where = f" (line {lineno})" if lineno is not None else ""
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}{where}") from None


def load_spec_file(path: Path) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentSpec)}
    types = {f.name: type(f.default) for f in dataclasses.fields(ExperimentSpec)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value (line {lineno})")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        out[key] = _coerce(key, types[key], raw.strip(), lineno)
    return out


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    values = {}
    if args.config:
        values.update(load_spec_file(args.config))
    for f in dataclasses.fields(ExperimentSpec):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return ExperimentSpec(**values)


def _add_spec_flags(parser: argparse.ArgumentParser, skip=("seed",)):
    for f in dataclasses.fields(ExperimentSpec):
        if f.name in skip:
            continue
        kind = type(f.default)
        flag = "--" + f.name.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, type=str, default=None,
                                help=f"bool, default {f.default}")
        else:
            parser.add_argument(flag, type=kind, default=None,
                                help=f"default {f.default}")


def _normalize_bools(args: argparse.Namespace):
    for f in dataclasses.fields(ExperimentSpec):
        if type(f.default) is bool:
            raw = getattr(args, f.name, None)
            if isinstance(raw, str):
                setattr(args, f.name, _coerce(f.name, bool, raw))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zstoresim",
        description="Zoned storage engine / flash device write-amplification experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and emit a report")
    p_run.add_argument("--config", type=Path, default=None,
                       help="key = value config file")
    p_run.add_argument("--seed", type=int, required=True)
    p_run.add_argument("--out", type=Path, default=Path("report"),
                       help="output path stem (suffix added per format)")
    p_run.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p_run.add_argument("--run-dir", type=Path, default=None,
                       help="directory for the mapping WAL and checkpoints")
    _add_spec_flags(p_run)

    p_inf = sub.add_parser("infer-gc-unit", help="estimate the device GC unit size")
    p_inf.add_argument("--candidates", type=str, required=True,
                       help="ascending zone sizes in pages, comma separated")
    p_inf.add_argument("--capacity-pages", type=int, default=16384)
    p_inf.add_argument("--superblock-pages", type=int, default=256)
    p_inf.add_argument("--op-fraction", type=float, default=0.10)
    p_inf.add_argument("--device-mode", default=MODE_STANDARD,
                       choices=(MODE_STANDARD, MODE_ZNS, MODE_FDP))
    p_inf.add_argument("--seed", type=int, default=1)
    p_inf.add_argument("--epsilon", type=float, default=0.01)

    p_op = sub.add_parser("op-split", help="DB-vs-SSD WAF trade-off sweep")
    p_op.add_argument("--fractions", type=str, required=True,
                      help="fill fractions, comma separated")
    p_op.add_argument("--config", type=Path, default=None)
    p_op.add_argument("--seed", type=int, required=True)
    p_op.add_argument("--out", type=Path, default=None)
    _add_spec_flags(p_op)

    p_rep = sub.add_parser("report", help="re-emit a saved JSON report")
    p_rep.add_argument("--in", dest="infile", type=Path, required=True)
    p_rep.add_argument("--format", choices=("json", "csv"), default="csv")
    p_rep.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_run(args) -> int:
    _normalize_bools(args)
    spec = build_spec(args)
    report = run_experiment(spec, run_dir=args.run_dir)
    if args.format in ("json", "both"):
        emit_report(report, "json", args.out.with_suffix(".json"))
    if args.format in ("csv", "both"):
        emit_report(report, "csv", args.out.with_suffix(".csv"))
    print(f"{spec.run_id}: db_waf={report.drilldown.db_waf:.4f} "
          f"ssd_waf={report.drilldown.ssd_waf:.4f} "
          f"total_waf={report.drilldown.total_waf:.4f} "
          f"hit_ratio={report.hit_ratio:.4f} steady={report.steady_state}")
    return 0


def _cmd_infer(args) -> int:
    candidates = [int(x) for x in args.candidates.split(",") if x]
    dev_cfg = DeviceConfig(
        capacity_pages=args.capacity_pages,
        superblock_pages=args.superblock_pages,
        op_fraction=args.op_fraction,
        mode=args.device_mode,
    )
    result = infer_gc_unit(dev_cfg, candidates, seed=args.seed,
                           epsilon=args.epsilon)
    marker = "found" if result.found else "not-found (ceiling)"
    print(f"inferred gc unit: {result.gc_unit_pages} pages [{marker}]")
    for zone_pages, waf in result.measured:
        print(f"  zone={zone_pages} ssd_waf={waf:.4f}")
    return 0

def _cmd_op_split(args) -> int:
    _normalize_bools(args)
    fractions = [float(x) for x in args.fractions.split(",") if x]
    spec = build_spec(args)
    if spec.fill >= min(fractions):
        spec = dataclasses.replace(spec, fill=0.5)
    rows = op_split_sweep(fractions, spec)
    for row in rows:
        print(f"fraction={row['fraction']} db_waf={row['db_waf']:.4f} "
              f"ssd_waf={row['ssd_waf']:.4f} total_waf={row['total_waf']:.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def _cmd_report(args) -> int:
    data = json.loads(args.infile.read_text())
    spec = ExperimentSpec(**{k: v for k, v in data["config"].items()})
    drill = WriteDrilldown(**data["drilldown"])
    report = RunReport(
        spec=spec, drilldown=drill, hit_ratio=data["hit_ratio"],
        logical_bytes_per_op=data["logical_bytes_per_op"],
        physical_bytes_per_op=data["physical_bytes_per_op"],
        steady_state=data["steady_state"], window_ops=data["window_ops"],
        cumulative_ssd_gc_pages=data.get("cumulative_ssd_gc_pages", 0),
    )
    emit_report(report, args.format, args.out)
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    handlers = {"run": _cmd_run, "infer-gc-unit": _cmd_infer,
                "op-split": _cmd_op_split, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
