"""Command-line front end.

Verbs: ``characterize`` (per-layer reuse, traffic and cache behaviour), ``simulate``
(machine x layer runs with energy), ``sweep`` (port-bandwidth sensitivity) and
``capabilities`` (per-level TFU map). Exit status: 0 on success, 1 on a
configuration error, 2 when a simulation invariant fires.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import click
import yaml

from . import energy, kernelgen, layers as layerlib
from .kernelgen import UnblockableLayer
from .layers import InvalidConfig, InvalidLayer, LayerSpec, UnknownModel
from .machine import (MachineConfig, Policy, Schedule, SimMetrics, UnknownConfig, combine,
                      config_from_dict, describe_capabilities, distinct_shapes, parse_config,
                      run_layer, with_ports)
from .memhier import (BandwidthViolation, CoherenceViolation, InvalidCacheConfig,
                      InvalidWayCount, Level, partition_l3)
from .psx import DEFAULT_LOOP_OVERHEAD

SCHEMA_VERSION = 1
SWEEP_PORTS = ((2, 1, 1), (2, 2, 1), (2, 2, 2))
CALIBRATION_SCALE = 0.25


class InvalidPortConfig(ValueError):
    pass


class SchemaError(ValueError):
    pass


CONFIG_ERRORS = (UnknownConfig, UnknownModel, InvalidConfig, InvalidLayer, UnblockableLayer,
                 InvalidCacheConfig, InvalidWayCount, InvalidPortConfig, FileNotFoundError,
                 click.UsageError, click.Abort, yaml.YAMLError, json.JSONDecodeError)
INVARIANT_ERRORS = (BandwidthViolation, CoherenceViolation)

_METRIC_COLUMNS = [
    "layer", "kind", "multiplicity", "cycles", "macs", "macs_per_cycle_per_core",
    "dm_overhead", "bw_utilization", "legacy_instructions", "psx_core_instructions", "tfu_ops",
    "hit_L1", "hit_L2", "hit_L3", "hit_L3P",
    "dm_L1-L2", "dm_L2-L3", "dm_L3-L3", "dm_L3-DRAM",
]
SIMULATE_COLUMNS = (["schema", "experiment", "machine", "policy"] + _METRIC_COLUMNS
                    + ["compression"] + [f"energy_{c.value}" for c in energy.Cluster]
                    + ["energy_total"])
CHARACTERIZE_COLUMNS = [
    "schema", "experiment", "machine", "layer", "kind", "macs",
    "ops_per_byte_input", "ops_per_byte_weight", "ops_per_byte_output",
    "loads_per_mac", "stores_per_mac", "compression",
    "hit_L1", "hit_L2", "hit_L3", "dm_L1-L2", "dm_L2-L3", "dm_total",
]
SWEEP_COLUMNS = ["schema", "experiment", "machine", "ports", "macs_per_cycle_per_core",
                 "provisioned_macs_per_cycle", "efficiency"]


def validate_rows(rows: Sequence[dict], columns: Sequence[str]) -> None:
    """Every row must carry exactly the published columns."""
    want = set(columns)
    for r in rows:
        got = set(r)
        if got != want:
            extra, missing = sorted(got - want), sorted(want - got)
            raise SchemaError(f"row does not match schema: extra {extra}, missing {missing}")


# -- experiment description ----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    machines: tuple[str, ...]
    model: Optional[str] = None
    layers_file: Optional[str] = None
    levels: Optional[tuple[str, ...]] = None
    schedule: str = Schedule.STATIC_ASYMMETRIC.value
    psx: bool = True
    loop_overhead: int = DEFAULT_LOOP_OVERHEAD
    l3_tfu_ways: Optional[int] = None
    ports: tuple[tuple[int, int, int], ...] = ()
    scale: float = 1.0
    seed: int = 0

    @property
    def experiment_id(self) -> str:
        doc = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:12]

    def policy(self) -> Policy:
        levels = None
        if self.levels is not None:
            try:
                levels = frozenset(Level.parse(x) for x in self.levels)
            except ValueError as e:
                raise InvalidConfig(f"unknown cache level in {self.levels}") from e
        return Policy(schedule=Schedule(self.schedule), levels=levels, psx=self.psx)

    def layers(self) -> list[LayerSpec]:
        if self.layers_file:
            return layerlib.load_layers(self.layers_file)
        if self.model:
            return layerlib.builtin_model(self.model)
        raise InvalidConfig("give --model or --layers")


def parse_ports(text: str) -> tuple[int, int, int]:
    """``R/L2/L3`` port counts, e.g. ``2/2/1``."""
    try:
        parts = tuple(int(x) for x in text.split("/"))
    except ValueError:
        parts = ()
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise InvalidPortConfig(f"ports must look like R/L2/L3 with counts >= 1, got {text!r}")
    return parts


def load_machine(ref: str) -> MachineConfig:
    """A notation name (``P256``) or a YAML/JSON machine document."""
    path = Path(ref)
    if path.suffix in (".yaml", ".yml", ".json") or path.is_file():
        doc = yaml.safe_load(path.read_text())
        if not isinstance(doc, dict):
            raise InvalidConfig(f"{ref}: machine document must be a mapping")
        return config_from_dict(doc)
    return parse_config(ref)


def machine_variants(spec: ExperimentSpec) -> list[MachineConfig]:
    out = []
    for ref in spec.machines:
        m = load_machine(ref)
        if spec.l3_tfu_ways is not None:
            m = replace(m, l3=partition_l3(m.l3, spec.l3_tfu_ways))
        if spec.ports:
            out.extend(with_ports(m, *p) for p in spec.ports)
        else:
            out.append(m)
    return out


# -- running -----------------------------------------------------------------------

def _run_one(task: tuple[MachineConfig, LayerSpec, Policy, int]) -> SimMetrics:
    m, layer, policy, k = task
    r = run_layer(m, layer, policy)
    return r.scaled(k) if k > 1 else r


def run_tasks(tasks: list, workers: int) -> list[SimMetrics]:
    """Run independent simulations, results in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, tasks))


def _policy_label(p: Policy) -> str:
    levels = "auto" if p.levels is None else "+".join(sorted(l.value for l in p.levels))
    return f"{p.schedule.value};levels={levels};psx={'on' if p.psx else 'off'}"


def _metric_row(spec: ExperimentSpec, policy: Policy, r: SimMetrics,
                w: Optional[energy.EnergyWeights]) -> dict:
    base = r.to_row()
    row = {"schema": SCHEMA_VERSION, "experiment": spec.experiment_id,
           "machine": base.pop("config"), "policy": _policy_label(policy)}
    row.update({k: base[k] for k in _METRIC_COLUMNS})
    comp = r.compression
    row["compression"] = None if comp is None else round(comp, 4)
    stack = energy.energy_stack(r, w) if w is not None else None
    for c in energy.Cluster:
        row[f"energy_{c.value}"] = None if stack is None else stack.clusters[c.value]
    row["energy_total"] = None if stack is None else stack.total
    return row


def reference_weights() -> energy.EnergyWeights:
    """Weights calibrated on the 1/4-scale baseline suites (best fit if out of band)."""
    try:
        return energy.baseline_weights(CALIBRATION_SCALE)
    except energy.InfeasibleCalibration as e:
        click.echo(f"warning: {e}; energy columns use the best fit", err=True)
        return e.best


def simulate_rows(spec: ExperimentSpec, workers: int = 1,
                  weights: Optional[Callable[[], energy.EnergyWeights]] = None) -> list[dict]:
    """One row per (machine, distinct layer) plus a suite total per machine.

    ``weights`` is called after the configuration has been validated.
    """
    policy = spec.policy()
    machines = machine_variants(spec)
    shapes = distinct_shapes(l.scaled(spec.scale) for l in spec.layers())
    w = weights() if weights else None
    tasks = [(m, layer, policy, k) for m in machines for layer, k in shapes]
    results = run_tasks(tasks, workers)
    rows, i = [], 0
    for m in machines:
        mine = results[i:i + len(shapes)]
        i += len(shapes)
        rows.extend(_metric_row(spec, policy, r, w) for r in mine)
        rows.append(_metric_row(spec, policy, combine(mine, "total"), w))
    validate_rows(rows, SIMULATE_COLUMNS)
    return rows


_LAYER_FIELDS = ("schema", "experiment", "machine", "layer", "kind", "macs")


def _summary(rows: list[dict], label: str, fn) -> dict:
    """Aggregate row over the numeric per-layer columns."""
    out = {"schema": SCHEMA_VERSION, "experiment": rows[0]["experiment"],
           "machine": rows[0]["machine"], "layer": label, "kind": "summary",
           "macs": sum(r["macs"] for r in rows)}
    for c in CHARACTERIZE_COLUMNS:
        if c in _LAYER_FIELDS:
            continue
        vals = [r[c] for r in rows if r[c] is not None]
        out[c] = round(fn(vals), 6) if vals else None
    return out


def characterize_rows(spec: ExperimentSpec, workers: int = 1) -> list[dict]:
    """Per-layer reuse, kernel traffic and baseline cache behaviour, plus avg/min/max.

    Reuse and traffic analytics are symbolic at full shapes; hit rates and data
    movement come from simulating the layer at ``spec.scale``.
    """
    layer_list = spec.layers()
    m = machine_variants(replace(spec, ports=()))[0]
    policy = spec.policy()
    sims = run_tasks([(m, l.scaled(spec.scale), policy, 1) for l in layer_list], workers)
    rows = []
    for layer, r in zip(layer_list, sims):
        k = kernelgen.block_layer(layer)
        t = kernelgen.kernel_traffic(k)
        hr, dm = r.hitrates, r.dm_per_interface
        rows.append({
            "schema": SCHEMA_VERSION, "experiment": spec.experiment_id, "machine": m.name,
            "layer": layer.name, "kind": layer.kind.value, "macs": layer.macs,
            "ops_per_byte_input": round(t.input_ops_per_byte, 6),
            "ops_per_byte_weight": round(t.weight_ops_per_byte, 6),
            "ops_per_byte_output": round(t.output_ops_per_byte, 6),
            "loads_per_mac": None if t.loads_per_mac is None else round(t.loads_per_mac, 6),
            "stores_per_mac": None if t.stores_per_mac is None else round(t.stores_per_mac, 6),
            "compression": round(kernelgen.kernel_compression(k, spec.loop_overhead), 4),
            "hit_L1": _r(hr.get("L1")), "hit_L2": _r(hr.get("L2")), "hit_L3": _r(hr.get("L3")),
            "dm_L1-L2": _r(dm.get("L1-L2")), "dm_L2-L3": _r(dm.get("L2-L3")),
            "dm_total": _r(r.dm_overhead),
        })
    if rows:
        rows += [_summary(rows, name, fn)
                 for name, fn in (("avg", statistics.fmean), ("min", min), ("max", max))]
    validate_rows(rows, CHARACTERIZE_COLUMNS)
    return rows


def _r(v: Optional[float]) -> Optional[float]:
    return None if v is None else round(v, 6)


def sweep_rows(spec: ExperimentSpec, workers: int = 1) -> list[dict]:
    """Compute efficiency across port configurations (or plain machines when no
    ports are given)."""
    for p in spec.ports:
        if p not in SWEEP_PORTS:
            raise InvalidPortConfig(
                f"sweep ports must be one of {', '.join('/'.join(map(str, q)) for q in SWEEP_PORTS)}")
    policy = spec.policy()
    machines = machine_variants(spec)
    shapes = distinct_shapes(l.scaled(spec.scale) for l in spec.layers())
    tasks = [(m, layer, policy, k) for m in machines for layer, k in shapes]
    results = run_tasks(tasks, workers)
    rows = []
    for j, m in enumerate(machines):
        total = combine(results[j * len(shapes):(j + 1) * len(shapes)])
        provisioned = m.peak_macs_per_cycle
        achieved = total.macs_per_cycle_per_core
        ports = f"{m.l1.read_ports_64B}/{m.l2.shared_rw_ports_64B}/{m.l3.shared_rw_ports_64B}"
        rows.append({"schema": SCHEMA_VERSION, "experiment": spec.experiment_id,
                     "machine": m.name, "ports": ports,
                     "macs_per_cycle_per_core": round(achieved, 4),
                     "provisioned_macs_per_cycle": provisioned,
                     "efficiency": round(achieved / provisioned, 6)})
    validate_rows(rows, SWEEP_COLUMNS)
    return rows


# -- output --------------------------------------------------------------------------

def render(rows: list[dict], columns: Sequence[str], fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"schema": SCHEMA_VERSION, "columns": list(columns), "rows": rows},
                          indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if v is None else v for k, v in r.items()})
    return buf.getvalue()


def emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


# -- click wiring --------------------------------------------------------------------

def _spec(machine, model, layers_file, levels, schedule, psx, l3_tfu_ways, ports, scale,
          seed) -> ExperimentSpec:
    return ExperimentSpec(
        machines=tuple(machine),
        model=model, layers_file=layers_file,
        levels=None if levels is None else tuple(x for x in levels.split(",") if x),
        schedule=schedule, psx=psx == "on", l3_tfu_ways=l3_tfu_ways,
        ports=tuple(parse_ports(p) for p in ports), scale=scale, seed=seed)


def _common(f):
    opts = [
        click.option("--model", help="builtin model: " + ", ".join(layerlib.BUILTIN_MODELS)),
        click.option("--layers", "layers_file", type=click.Path(dir_okay=False),
                     help="layer table (JSON or YAML)"),
        click.option("--levels", help="comma-separated TFU levels, e.g. L2,L3"),
        click.option("--schedule", type=click.Choice([s.value for s in Schedule]),
                     default=Schedule.STATIC_ASYMMETRIC.value, show_default=True),
        click.option("--psx", type=click.Choice(["on", "off"]), default="on",
                     show_default=True),
        click.option("--l3-tfu-ways", type=int, help="L3 ways reserved for the near-L3 TFU"),
        click.option("--ports", multiple=True, help="R/L2/L3 port counts; repeatable"),
        click.option("--scale", type=float, default=1.0, show_default=True,
                     help="spatial plane scale for simulated layers"),
        click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
                     show_default=True),
        click.option("--out", type=click.Path(dir_okay=False), help="output file"),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--workers", type=int, default=1, show_default=True),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
def cli():
    """Near-cache tensor unit simulator."""


@cli.command()
@click.option("--machine", multiple=True, default=("M128",), show_default=True)
@_common
def characterize(machine, model, layers_file, levels, schedule, psx, l3_tfu_ways, ports, scale,
                 fmt, out, seed, workers):
    """Per-layer reuse, kernel traffic, hit rates and data movement."""
    spec = _spec(machine[:1], model, layers_file, levels, schedule, psx, l3_tfu_ways, (),
                 scale, seed)
    emit(render(characterize_rows(spec, workers), CHARACTERIZE_COLUMNS, fmt), out)


@cli.command()
@click.option("--machine", multiple=True, required=True, help="name or config file; repeatable")
@_common
def simulate(machine, model, layers_file, levels, schedule, psx, l3_tfu_ways, ports, scale,
             fmt, out, seed, workers):
    """Simulate layers on one or more machines, with energy stacks."""
    spec = _spec(machine, model, layers_file, levels, schedule, psx, l3_tfu_ways, ports,
                 scale, seed)
    emit(render(simulate_rows(spec, workers, reference_weights), SIMULATE_COLUMNS, fmt), out)


@cli.command()
@click.option("--machine", multiple=True, default=("P640",), show_default=True)
@_common
def sweep(machine, model, layers_file, levels, schedule, psx, l3_tfu_ways, ports, scale,
          fmt, out, seed, workers):
    """Compute efficiency across cache port configurations."""
    if not ports and all(m.upper().startswith("P") for m in machine):
        ports = tuple("/".join(map(str, p)) for p in SWEEP_PORTS)
    spec = _spec(machine, model or "resnet50_conv", layers_file, levels, schedule, psx,
                 l3_tfu_ways, ports, scale, seed)
    emit(render(sweep_rows(spec, workers), SWEEP_COLUMNS, fmt), out)


@cli.command()
@click.option("--machine", required=True)
@click.option("--format", "fmt", type=click.Choice(["json", "yaml"]), default="json",
              show_default=True)
def capabilities(machine, fmt):
    """Per-level TFU presence and width, and the SMT binding."""
    report = describe_capabilities(load_machine(machine))
    text = (json.dumps(report, indent=2) + "\n" if fmt == "json"
            else yaml.safe_dump(report, sort_keys=False))
    click.echo(text, nl=False)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures onto the exit-code contract."""
    try:
        cli.main(args=list(argv) if argv is not None else None, standalone_mode=False,
                 prog_name="proxsim")
    except click.exceptions.Exit as e:
        return e.exit_code
    except INVARIANT_ERRORS as e:
        click.echo(f"invariant violated: {e}", err=True)
        return 2
    except CONFIG_ERRORS as e:
        if isinstance(e, click.ClickException):
            msg = e.format_message()
        elif isinstance(e, KeyError) and e.args:
            msg = str(e.args[0])
        else:
            msg = str(e)
        click.echo(f"error: {msg}", err=True)
        return 1
    return 0


def run() -> None:
    sys.exit(main())
