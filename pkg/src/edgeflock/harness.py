"""Verification and benchmarking over the planned cluster.

``verify`` runs identical seeded inputs through the single-process
reference and the distributed runtime and demands exact equality, tag
by tag.  ``bench`` drives simulated-latency runs per device count and
reports throughput, latency breakdown and energy next to the planner's
predictions.  Desk-scale defaults (hidden dimensions at 1/8, memory
budget shrunk to match) keep full-scale memory-pressure behavior while
running in seconds.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from edgeflock import costs
from edgeflock import model_ir as ir
from edgeflock.costs import CommModel, DeviceProfile
from edgeflock.engine import run_reference
from edgeflock.planner import AssignmentSet, PlanError, render_plan, task_assign
from edgeflock.runtime import RunMetrics, RuntimeFault, run_stream, start_cluster

DESK_SCALE = 0.125


class VerifyMismatch(RuntimeError):
    """Distributed output differed from the reference (device count,
    tag and max abs difference in the message)."""


def load_model(spec: str, scale: float, seed: int) -> ir.ModelGraph:
    """Model by stock name or path to a model JSON file."""
    if spec in ir.MODEL_NAMES:
        return ir.build_model(spec, scale, seed)
    path = Path(spec)
    graph = ir.ModelGraph.from_json(path.read_text())
    graph.seed = seed if seed else graph.seed
    return ir.validate_graph(graph)


def make_clip(graph: ir.ModelGraph, n_frames: int, seed: int) -> np.ndarray:
    """Seeded input sequence for the graph's (single) source."""
    src = graph.inputs[0]
    shape = graph.shapes[src].dims
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, (n_frames, *shape)).astype(np.float32)


def frames_needed(graph: ir.ModelGraph, n_outputs: int) -> int:
    """Frames required for at least n_outputs sink emissions."""
    sink = graph.outputs[0]
    return graph.first_valid[sink] + n_outputs


def plan_for(graph: ir.ModelGraph, n_max: int, device: Optional[DeviceProfile] = None,
             comm: Optional[CommModel] = None, scale: float = 1.0,
             overhead_factor: float = 2.0) -> AssignmentSet:
    """Plan with the memory budget shrunk to match a scaled-down model."""
    device = (device or DeviceProfile()).scaled_mem(scale)
    return task_assign(graph, n_max, comm or CommModel(), device, overhead_factor)


@dataclass
class VerifyEntry:
    model: str
    seed: int
    devices: int
    outputs: int
    exact: bool
    max_abs_diff: float


@dataclass
class VerifyReport:
    entries: list[VerifyEntry] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(e.exact for e in self.entries)

    def render(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok " if e.exact else "FAIL"
            lines.append(f"[{status}] {e.model} seed={e.seed} n={e.devices:2d} "
                         f"outputs={e.outputs} max|diff|={e.max_abs_diff:.3g}")
        lines.append(f"verify: {'all exact' if self.ok else 'MISMATCH'} "
                     f"({self.elapsed_seconds:.1f}s)")
        return "\n".join(lines)


def verify(model: str, n_list: Iterable[int], scale: float = DESK_SCALE,
           seeds: Iterable[int] = (1, 2, 3), n_frames: Optional[int] = None,
           device: Optional[DeviceProfile] = None, comm: Optional[CommModel] = None,
           transport: str = "in_process", param_override=None,
           raise_on_mismatch: bool = False) -> VerifyReport:
    """Exact-equality check of distributed vs reference execution."""
    n_list = sorted(set(n_list))
    report = VerifyReport()
    t0 = time.perf_counter()
    for seed in seeds:
        graph = load_model(model, scale, seed)
        aset = plan_for(graph, max(n_list), device, comm, scale)
        frames = make_clip(graph, n_frames or frames_needed(graph, 4), seed)
        ref = run_reference(graph, {graph.inputs[0]: frames})[graph.outputs[0]]
        for n in n_list:
            if transport == "loopback_sockets":
                from edgeflock.loopback import LoopbackCluster
                cluster = LoopbackCluster(aset, n, param_override=param_override)
                try:
                    outs = cluster.feed(frames, expected_outputs=len(ref))
                finally:
                    cluster.close()
            else:
                cluster = start_cluster(aset, n, param_override=param_override)
                outs, _ = run_stream(cluster, frames)
            exact = set(outs) == set(ref)
            max_diff = 0.0
            first_bad = None
            for tag in sorted(ref):
                got = outs.get(tag)
                if got is None or got.shape != ref[tag].shape:
                    exact = False
                    first_bad = first_bad if first_bad is not None else tag
                    max_diff = float("inf")
                    continue
                d = float(np.max(np.abs(got - ref[tag]))) if got.size else 0.0
                if d != 0.0:
                    exact = False
                    first_bad = first_bad if first_bad is not None else tag
                max_diff = max(max_diff, d)
            report.entries.append(VerifyEntry(model, seed, n, len(outs), exact, max_diff))
            if not exact and raise_on_mismatch:
                raise VerifyMismatch(
                    f"{model} seed={seed} n={n}: first mismatching tag {first_bad}, "
                    f"max abs diff {max_diff}")
    report.elapsed_seconds = time.perf_counter() - t0
    return report


@dataclass
class BenchEntry:
    devices: int
    predicted_ips: float
    predicted_t_forward: float
    simulated: RunMetrics = field(default_factory=RunMetrics)
    energy: dict = field(default_factory=dict)
    note: str = ""


@dataclass
class BenchReport:
    model: str
    scale: float
    entries: list[BenchEntry] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "model": self.model,
            "scale": self.scale,
            "entries": [
                {
                    "devices": e.devices,
                    "predicted_ips": e.predicted_ips,
                    "predicted_t_forward": e.predicted_t_forward,
                    "simulated": asdict(e.simulated),
                    "energy": e.energy,
                    "note": e.note,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def render(self) -> str:
        head = (f"{'n':>3} {'pred ips':>10} {'sim ips':>10} {'t_fwd s':>9} "
                f"{'compute':>9} {'comm':>9} {'reload':>9} {'E_stat J':>9} {'E_dyn J':>9}")
        lines = [f"bench: {self.model} (scale {self.scale})", head]
        for e in self.entries:
            m = e.simulated
            lines.append(
                f"{e.devices:>3} {e.predicted_ips:>10.3f} {m.ips:>10.3f} "
                f"{m.t_forward_seconds:>9.3f} {m.breakdown['compute']:>9.3f} "
                f"{m.breakdown['comm']:>9.3f} {m.breakdown['reload']:>9.3f} "
                f"{e.energy.get('static_joules', 0.0):>9.2f} "
                f"{e.energy.get('dynamic_joules', 0.0):>9.2f}"
            )
            if e.note:
                lines.append(f"    note: {e.note}")
        return "\n".join(lines)


def bench(model: str, n_list: Iterable[int], scale: float = DESK_SCALE,
          n_frames: int = 40, fps: float = 30.0, seed: int = 1,
          device: Optional[DeviceProfile] = None, comm: Optional[CommModel] = None,
          paced: bool = True) -> BenchReport:
    """Simulated-latency benchmark across device counts."""
    graph = load_model(model, scale, seed)
    n_list = sorted(set(n_list))
    device = device or DeviceProfile()
    aset = plan_for(graph, max(n_list), device, comm, scale)
    report = BenchReport(model=model, scale=scale)
    frames = make_clip(graph, max(n_frames, frames_needed(graph, 8)), seed)
    for n in n_list:
        entry = BenchEntry(
            devices=n,
            predicted_ips=aset.assignments[n].predicted.ips,
            predicted_t_forward=aset.assignments[n].predicted.t_forward_seconds,
        )
        try:
            cluster = start_cluster(aset, n)
            outputs, metrics = run_stream(cluster, frames, fps=fps, paced=paced)
            wall = max([metrics.wall_seconds] + [w.free_at for w in cluster.workers.values()])
            metrics.wall_seconds = wall
            entry.simulated = metrics
            entry.energy = costs.energy(
                wall, metrics.per_device_busy_seconds,
                [cluster.profile] * n,
            )
            per_inf = max(metrics.outputs, 1)
            entry.energy["static_per_inference"] = entry.energy["static_joules"] / per_inf
            entry.energy["dynamic_per_inference"] = entry.energy["dynamic_joules"] / per_inf
        except (PlanError, RuntimeFault) as exc:
            entry.note = f"skipped: {exc}"
        report.entries.append(entry)
    return report


def plan_dump(model: str, n_max: int, scale: float = 1.0, seed: int = 1,
              device: Optional[DeviceProfile] = None, comm: Optional[CommModel] = None,
              n_values: Optional[Iterable[int]] = None) -> str:
    """Human-readable per-device architecture listing."""
    graph = load_model(model, scale, seed)
    aset = plan_for(graph, n_max, device, comm, scale)
    return render_plan(aset, n_values)
