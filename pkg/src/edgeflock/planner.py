"""Profiling-driven task assignment for 1..n_max devices.

Planning walks four stages:

1. The validated graph is folded into atomic layer groups: elementwise
   glue (act/norm/pool/softmax and sinks) fuses onto its producer, flow
   stacking fuses onto the recording source, and the pyramid pair plus
   their joining concat form one group.
2. ``find_min_load_tasks`` chain-merges groups along single-consumer
   paths while the resident footprint fits device memory, producing the
   smallest task set that runs without mid-stream weight reloads.
3. For fewer devices than tasks, ``minimize_load_time`` packs tasks into
   contiguous buckets, choosing the packing with the least per-inference
   reload time; over-memory buckets cycle through resident subsets and
   pay their load time every inference.
4. For more devices than tasks, candidate transforms are applied
   greedily: replicating a stateless task (round-robin data parallelism)
   or sharding a dense layer's output rows across two devices (the
   shards recombine exactly, so accuracy is untouched).  Each step takes
   the candidate with the best predicted throughput improvement per
   added device; ties go to the slowest stage, then fewer devices, then
   earliest position.

Throughput is predicted with a synchronous-pipeline bound: one over the
slowest stage time, inbound communication included.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional

from edgeflock import model_ir as ir
from edgeflock import costs
from edgeflock.costs import DeviceProfile, CommModel, comm_latency, BYTES_PER_VALUE

# Dense-layer shards must clear this relative throughput gain to be
# worth fragmenting weights over; replication is accepted at any
# non-negative gain since replicas keep the model whole.
MIN_SPLIT_GAIN = 0.02

MAX_EXHAUSTIVE_TASKS = 12


class PlanError(ValueError):
    """Unsatisfiable memory constraints or invalid planner input."""


@dataclass(frozen=True)
class ModelSplitInfo:
    origin: str                 # sharded fc layer
    terminal: str               # value name consumers assemble (post-glue)
    index: int
    count: int
    rows: tuple[int, int]       # output rows [lo, hi) of this shard


@dataclass(frozen=True)
class DataReplicaInfo:
    group: str                  # replica group id
    index: int
    count: int


@dataclass(frozen=True)
class Task:
    """A contiguous layer group bound to one device."""

    task_id: str
    device: int
    layers: tuple[str, ...]
    split: Optional[ModelSplitInfo] = None
    replica: Optional[DataReplicaInfo] = None
    resident_groups: tuple[tuple[str, ...], ...] = ()
    window_specs: tuple[tuple[str, int], ...] = ()

    @property
    def reloads(self) -> bool:
        return len(self.resident_groups) > 1


@dataclass(frozen=True)
class Edge:
    producer_device: int
    consumer_device: int
    layer: str                  # transported value (a layer or shard terminal)


@dataclass
class Predicted:
    ips: float
    t_forward_seconds: float
    stage_seconds: dict[int, float] = field(default_factory=dict)
    load_seconds: dict[int, float] = field(default_factory=dict)
    reload_seconds_per_inference: float = 0.0


@dataclass
class Assignment:
    device_count: int
    tasks: dict[int, Task]                  # device -> task; absent = idle spare
    edges: list[Edge]
    predicted: Predicted
    notes: list[str] = field(default_factory=list)


@dataclass
class AssignmentSet:
    graph: ir.ModelGraph
    device: DeviceProfile
    comm: CommModel
    overhead_factor: float
    assignments: dict[int, Assignment]

    def for_devices(self, n: int) -> Assignment:
        return self.assignments[n]

    def to_json(self) -> str:
        doc = {
            "model": json.loads(self.graph.to_json()),
            "device": asdict(self.device),
            "comm": asdict(self.comm),
            "overhead_factor": self.overhead_factor,
            "assignments": {
                str(n): {
                    "device_count": a.device_count,
                    "notes": a.notes,
                    "predicted": asdict(a.predicted),
                    "edges": [asdict(e) for e in a.edges],
                    "tasks": [asdict(t) for t in a.tasks.values()],
                }
                for n, a in sorted(self.assignments.items())
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "AssignmentSet":
        doc = json.loads(text)
        graph = ir.ModelGraph.from_json(json.dumps(doc["model"]))
        dev = dict(doc["device"])
        power = costs.PowerProfile(**dev.pop("power", {}))
        device = DeviceProfile(power=power, **dev)
        comm = CommModel(**doc["comm"])
        assignments = {}
        for key, entry in doc["assignments"].items():
            tasks = {}
            for t in entry["tasks"]:
                split = ModelSplitInfo(**{**t["split"], "rows": tuple(t["split"]["rows"])}) if t["split"] else None
                replica = DataReplicaInfo(**t["replica"]) if t["replica"] else None
                task = Task(
                    task_id=t["task_id"],
                    device=t["device"],
                    layers=tuple(t["layers"]),
                    split=split,
                    replica=replica,
                    resident_groups=tuple(tuple(g) for g in t["resident_groups"]),
                    window_specs=tuple((w[0], w[1]) for w in t["window_specs"]),
                )
                tasks[task.device] = task
            pred = entry["predicted"]
            predicted = Predicted(
                ips=pred["ips"],
                t_forward_seconds=pred["t_forward_seconds"],
                stage_seconds={int(k): v for k, v in pred["stage_seconds"].items()},
                load_seconds={int(k): v for k, v in pred["load_seconds"].items()},
                reload_seconds_per_inference=pred["reload_seconds_per_inference"],
            )
            assignments[int(key)] = Assignment(
                device_count=entry["device_count"],
                tasks=tasks,
                edges=[Edge(**e) for e in entry["edges"]],
                predicted=predicted,
                notes=list(entry.get("notes", [])),
            )
        return AssignmentSet(graph, device, comm, doc["overhead_factor"], assignments)


# -- stage 1: atomic groups ----------------------------------------------


def model_to_layers(graph: ir.ModelGraph) -> list[list[str]]:
    """Fold the graph into topologically ordered atomic layer groups."""
    group_of: dict[str, int] = {}
    groups: list[list[str]] = []

    def new_group(name) -> int:
        groups.append([name])
        group_of[name] = len(groups) - 1
        return group_of[name]

    def join(name, gid):
        groups[gid].append(name)
        group_of[name] = gid

    for name in graph.topo_order:
        spec = graph.layer(name)
        if spec.kind == ir.SOURCE:
            new_group(name)
        elif spec.kind == ir.FLOWSTACK:
            gid = group_of[spec.inputs[0]]
            if any(graph.layer(m).kind == ir.SOURCE for m in groups[gid]):
                join(name, gid)  # flow is computed on the recording device
            else:
                new_group(name)
        elif spec.kind in ir.GLUE_KINDS or spec.kind == ir.SINK:
            join(name, group_of[spec.inputs[0]])
        elif spec.kind == ir.CONCAT:
            in_gids = sorted({group_of[i] for i in spec.inputs})
            if all(any(graph.layer(m).kind == ir.PYRAMID for m in groups[g]) for g in in_gids):
                keep = in_gids[0]
                for g in in_gids[1:]:
                    for m in groups[g]:
                        group_of[m] = keep
                    groups[keep].extend(groups[g])
                    groups[g] = []
                join(name, keep)
            else:
                new_group(name)
        else:
            new_group(name)

    return [g for g in groups if g]


def _group_graph(graph: ir.ModelGraph, groups: list[list[str]]):
    gid_of = {name: i for i, g in enumerate(groups) for name in g}
    preds: dict[int, set[int]] = {i: set() for i in range(len(groups))}
    succs: dict[int, set[int]] = {i: set() for i in range(len(groups))}
    for i, g in enumerate(groups):
        for name in g:
            for inp in graph.layer(name).inputs:
                j = gid_of[inp]
                if j != i:
                    preds[i].add(j)
                    succs[j].add(i)
    return preds, succs


# -- stage 2: minimum task set --------------------------------------------


def find_min_load_tasks(graph: ir.ModelGraph, groups: list[list[str]],
                        mem_bytes: int, overhead_factor: float = 2.0) -> list[list[str]]:
    """Merge groups along single-consumer chains while memory allows.

    Returns the resulting task list (each a list of layer names) in
    topological order.  Raises PlanError when a single atomic group
    exceeds the memory budget.
    """
    for g in groups:
        need = costs.estimate_memory(graph, g, overhead_factor)
        if need > mem_bytes:
            raise PlanError(
                f"atomic group {g[0]!r} needs {need} bytes, exceeding device memory {mem_bytes}"
            )
    preds, succs = _group_graph(graph, groups)
    assigned: set[int] = set()
    tasks: list[list[str]] = []
    for i in range(len(groups)):
        if i in assigned:
            continue
        member_gids = {i}
        layers = list(groups[i])
        assigned.add(i)
        tail = i
        while True:
            nxt = succs[tail]
            if len(nxt) != 1:
                break
            (c,) = nxt
            if c in assigned or not preds[c] <= member_gids:
                break
            if costs.estimate_memory(graph, layers + groups[c], overhead_factor) > mem_bytes:
                break
            layers.extend(groups[c])
            member_gids.add(c)
            assigned.add(c)
            tail = c
        tasks.append(layers)
    return tasks


# -- working representation for stages 3 and 4 ----------------------------


@dataclass
class _Work:
    """Mutable planning view of one pipeline stage."""

    layers: list[str]
    order: int
    split: Optional[ModelSplitInfo] = None
    part_local: tuple[str, ...] = ()        # glue computed on shard rows
    replicas: int = 1
    resident_groups: list[list[str]] = field(default_factory=list)
    reload_seconds: float = 0.0

    def devices(self) -> int:
        return self.replicas

    def stateless(self, graph: ir.ModelGraph) -> bool:
        return all(graph.layer(n).kind not in ir.WINDOWED_KINDS for n in self.layers)


def _split_fraction(graph: ir.ModelGraph, work: _Work) -> Optional[float]:
    if work.split is None:
        return None
    out = graph.shapes[work.split.origin].size
    lo, hi = work.split.rows
    return (hi - lo) / out


def _work_compute(graph: ir.ModelGraph, work: _Work, device: DeviceProfile) -> float:
    """Per-item compute seconds, swap multiplier included."""
    frac = _split_fraction(graph, work)
    scaled = {}
    if frac is not None:
        scaled[work.split.origin] = frac
        for n in work.part_local:
            scaled[n] = frac
    seconds = 0.0
    raw_weights = 0
    for n in work.layers:
        spec = graph.layer(n)
        ops = costs.layer_ops(graph, n) * scaled.get(n, 1.0)
        rate = device.conv_flops_per_sec if spec.kind == ir.CONV else device.flops_per_sec
        seconds += ops / rate
        raw_weights += int(costs.weight_count(graph, n) * scaled.get(n, 1.0))
    raw = raw_weights * BYTES_PER_VALUE + costs.peak_activation_bytes(graph, work.layers)
    if raw > device.swap_threshold:
        seconds *= device.swap_penalty
    return seconds


def _external_inputs(graph: ir.ModelGraph, work: _Work, state: list[_Work]) -> list[tuple[str, int]]:
    """(value name, payload bytes) for each inbound boundary edge."""
    owned = set(work.layers)
    seen: dict[str, int] = {}
    split_by_terminal = {}
    for other in state:
        if other.split is not None:
            split_by_terminal.setdefault(other.split.terminal, []).append(other)
    for n in work.layers:
        spec = graph.layer(n)
        for inp in spec.inputs:
            if inp in owned and not (work.split and inp == work.split.terminal):
                continue
            if inp in seen:
                continue
            seen[inp] = graph.shapes[inp].size * BYTES_PER_VALUE
    edges: list[tuple[str, int]] = []
    for name, nbytes in seen.items():
        parts = split_by_terminal.get(name)
        if parts:
            for p in sorted(parts, key=lambda w: w.split.index):
                if work.split is not None and p.split == work.split:
                    continue  # own shard is local
                lo, hi = p.split.rows
                edges.append((name, (hi - lo) * BYTES_PER_VALUE))
        else:
            edges.append((name, nbytes))
    return edges


def _work_stage(graph: ir.ModelGraph, work: _Work, state: list[_Work],
                device: DeviceProfile, comm: CommModel) -> float:
    """Full per-item stage seconds for one device of this stage."""
    if len(work.resident_groups) > 1:
        t = _reload_compute(graph, work, device) + work.reload_seconds
    else:
        t = _work_compute(graph, work, device) + work.reload_seconds
    for _, nbytes in _external_inputs(graph, work, state):
        t += comm_latency(nbytes, comm)
    return t


def _effective_stage(graph, work, state, device, comm) -> float:
    return _work_stage(graph, work, state, device, comm) / work.replicas


def _bottleneck(graph, state, device, comm) -> float:
    return max(_effective_stage(graph, w, state, device, comm) for w in state)


def _predict(graph: ir.ModelGraph, state: list[_Work], device: DeviceProfile,
             comm: CommModel) -> tuple[float, float]:
    """(ips, t_forward): pipeline bound and critical-path latency."""
    ips = 1.0 / _bottleneck(graph, state, device, comm)
    produced = {}
    for i, w in enumerate(state):
        for n in w.layers:
            produced.setdefault(n, i)
        if w.split is not None:
            produced[w.split.terminal] = i
    longest: dict[int, float] = {}
    for i, w in enumerate(state):  # state holds topological stage order
        stage = _work_stage(graph, w, state, device, comm)
        best_in = 0.0
        for name, _ in _external_inputs(graph, w, state):
            j = produced.get(name)
            if j is not None and j != i and j in longest:
                best_in = max(best_in, longest[j])
        longest[i] = best_in + stage
    return ips, max(longest.values())


# -- stage 3: fewer devices than tasks ------------------------------------


def _compositions(n_items: int, n_buckets: int):
    for cuts in itertools.combinations(range(1, n_items), n_buckets - 1):
        bounds = (0,) + cuts + (n_items,)
        yield [(bounds[i], bounds[i + 1]) for i in range(n_buckets)]


def _bucketize(graph, tasks, span, mem_bytes, overhead_factor, device):
    """Build one bucket work item from tasks[span[0]:span[1]]."""
    members = tasks[span[0]:span[1]]
    layers = [n for t in members for n in t]
    mem = costs.estimate_memory(graph, layers, overhead_factor)
    work = _Work(layers=layers, order=span[0])
    if mem <= mem_bytes:
        work.resident_groups = [layers]
        return work
    # Reloading bucket: pack member tasks into consecutive resident
    # subsets, each fitting memory; every inference pays each subset's
    # load time.
    subsets: list[list[str]] = []
    cur: list[str] = []
    for t in members:
        if cur and costs.estimate_memory(graph, cur + t, overhead_factor) > mem_bytes:
            subsets.append(cur)
            cur = list(t)
        else:
            cur.extend(t)
    if cur:
        subsets.append(cur)
    work.resident_groups = subsets
    work.reload_seconds = sum(costs.estimate_load_time(graph, s, device) for s in subsets)
    return work


def _reload_compute(graph, work, device) -> float:
    """Compute seconds for a reloading bucket: per-subset swap checks."""
    total = 0.0
    for subset in work.resident_groups:
        sub = _Work(layers=list(subset), order=work.order)
        total += _work_compute(graph, sub, device)
    return total


def minimize_load_time(graph: ir.ModelGraph, tasks: list[list[str]], mem_bytes: int,
                       n: int, device: DeviceProfile, comm: CommModel,
                       overhead_factor: float = 2.0) -> list[_Work]:
    """Pack |tasks| > n stages into n contiguous buckets.

    Exhaustive over contiguous compositions up to MAX_EXHAUSTIVE_TASKS
    tasks, else greedy pairwise merging; the objective minimizes total
    per-inference reload seconds, then the bottleneck stage, then
    critical-path latency.
    """

    def evaluate(spans):
        works = [_bucketize(graph, tasks, s, mem_bytes, overhead_factor, device) for s in spans]
        reload_total = sum(w.reload_seconds for w in works)
        stages = []
        for w in works:
            if len(w.resident_groups) > 1:
                t = _reload_compute(graph, w, device) + w.reload_seconds
            else:
                t = _work_compute(graph, w, device)
            for _, nbytes in _external_inputs(graph, w, works):
                t += comm_latency(nbytes, comm)
            stages.append(t)
        return (reload_total, max(stages), sum(stages)), works

    best = None
    if len(tasks) <= MAX_EXHAUSTIVE_TASKS:
        for spans in _compositions(len(tasks), n):
            key, works = evaluate(spans)
            if best is None or key < best[0]:
                best = (key, works)
    else:
        spans = [(i, i + 1) for i in range(len(tasks))]
        while len(spans) > n:
            candidates = []
            for i in range(len(spans) - 1):
                merged = spans[:i] + [(spans[i][0], spans[i + 1][1])] + spans[i + 2:]
                key, works = evaluate(merged)
                candidates.append((key, merged, works))
            key, spans, works = min(candidates, key=lambda c: c[0])
            best = (key, works)
        if best is None:
            _, works = evaluate(spans)
            best = (None, works)
    return best[1]


# -- stage 4: more devices than tasks --------------------------------------


@dataclass
class Candidate:
    kind: str                   # "data_replica" | "model_split" | "conv_split"
    target: int                 # index into state
    extra_devices: int
    gain: float                 # local stage-time ratio old/new
    delta_ips_per_device: float
    t_forward_new: float
    target_stage: float
    order: int
    fc_layer: Optional[str] = None
    realizable: bool = True


def split_fc_rows(out_size: int, k: int) -> list[tuple[int, int]]:
    """Row ranges of a k-way output shard; earlier parts take the extra."""
    if k < 1 or k > out_size:
        raise PlanError(f"cannot split {out_size} outputs {k} ways")
    chunk = math.ceil(out_size / k)
    rows = []
    lo = 0
    for _ in range(k):
        hi = min(out_size, lo + chunk)
        rows.append((lo, hi))
        lo = hi
    return rows


def _glue_chain(graph: ir.ModelGraph, owned: set[str], fc: str) -> list[str]:
    """Elementwise glue directly downstream of fc, safe to keep on shards."""
    chain = []
    cur = fc
    while True:
        consumers = [c for c in graph.consumers(cur) if c in owned]
        if len(consumers) != 1:
            break
        nxt = consumers[0]
        if graph.layer(nxt).kind not in (ir.RELU, ir.NORM):
            break
        chain.append(nxt)
        cur = nxt
    return chain


def _apply_model_split(graph: ir.ModelGraph, state: list[_Work], idx: int, fc: str,
                       k: int = 2) -> Optional[list[_Work]]:
    """Shard ``fc`` of state[idx] k ways; returns the new state or None.

    The shard tasks own the fc plus its elementwise glue; upstream
    layers stay behind as a prefix stage and any downstream remainder
    rides with the last shard (assembling its input from all shards).
    """
    work = state[idx]
    if work.split is not None or work.replicas > 1:
        return None
    owned = set(work.layers)
    glue = _glue_chain(graph, owned, fc)
    terminal = glue[-1] if glue else fc
    part_set = {fc, *glue}
    ancestors = set()
    frontier = [i for i in graph.layer(fc).inputs]
    while frontier:
        a = frontier.pop()
        if a in owned and a not in ancestors:
            ancestors.add(a)
            frontier.extend(graph.layer(a).inputs)
    suffix = [n for n in work.layers if n not in part_set and n not in ancestors]
    prefix = [n for n in work.layers if n in ancestors]
    out_size = graph.shapes[fc].size
    if out_size < k:
        return None
    rows = split_fc_rows(out_size, k)

    new_state = [w for i, w in enumerate(state) if i != idx]
    insert_at = idx
    if prefix:
        new_state.insert(insert_at, _Work(layers=prefix, order=work.order))
        insert_at += 1
    for p in range(k):
        layers = [fc] + glue + (suffix if p == k - 1 else [])
        info = ModelSplitInfo(origin=fc, terminal=terminal, index=p, count=k, rows=rows[p])
        new_state.insert(insert_at, _Work(layers=layers, order=work.order, split=info,
                                          part_local=tuple(glue)))
        insert_at += 1
    return new_state


def model_vs_data(graph: ir.ModelGraph, state: list[_Work], idx: int,
                  device: DeviceProfile, comm: CommModel, budget: int) -> list[Candidate]:
    """Candidate parallelizations of one stage with their predicted merit."""
    work = state[idx]
    old_bneck = _bottleneck(graph, state, device, comm)
    old_eff = _effective_stage(graph, work, state, device, comm)
    out: list[Candidate] = []

    # Replication duplicates a whole task round-robin; shard tasks are
    # excluded (each shard must see every tag to recombine).
    if work.stateless(graph) and work.split is None:
        k = work.replicas + 1
        trial = [w if i != idx else _replicated(w, k) for i, w in enumerate(state)]
        new_bneck = _bottleneck(graph, trial, device, comm)
        delta = (1.0 / new_bneck - 1.0 / old_bneck)
        _, t_fwd = _predict(graph, trial, device, comm)
        out.append(Candidate(
            kind="data_replica", target=idx, extra_devices=1,
            gain=old_eff / (_effective_stage(graph, trial[idx], trial, device, comm)),
            delta_ips_per_device=delta, t_forward_new=t_fwd,
            target_stage=old_eff, order=work.order,
        ))

    if work.split is None and work.replicas == 1:
        for fc in [n for n in work.layers if graph.layer(n).kind == ir.FC]:
            trial = _apply_model_split(graph, state, idx, fc, k=2)
            if trial is None:
                continue
            extra = len(trial) - len(state)
            if extra > budget:
                continue
            new_bneck = _bottleneck(graph, trial, device, comm)
            rel = (old_bneck - new_bneck) / old_bneck
            if rel < MIN_SPLIT_GAIN:
                continue
            shard_stage = max(
                _effective_stage(graph, w, trial, device, comm)
                for w in trial if w.split is not None and w.split.origin == fc
            )
            _, t_fwd = _predict(graph, trial, device, comm)
            out.append(Candidate(
                kind="model_split", target=idx, extra_devices=extra,
                gain=old_eff / shard_stage,
                delta_ips_per_device=(1.0 / new_bneck - 1.0 / old_bneck) / extra,
                t_forward_new=t_fwd, target_stage=old_eff, order=work.order,
                fc_layer=fc,
            ))

    # Filter-sharded convolution is evaluated for completeness but is
    # dominated here: shards duplicate the full input transfer while a
    # replica splits both compute and traffic.
    conv_ops = [n for n in work.layers if graph.layer(n).kind == ir.CONV]
    if conv_ops and work.split is None:
        dup_comm = sum(comm_latency(b, comm) for _, b in _external_inputs(graph, work, state))
        half = _work_compute(graph, work, device) / 2 + work.reload_seconds + dup_comm
        out.append(Candidate(
            kind="conv_split", target=idx, extra_devices=1,
            gain=old_eff / max(half, 1e-12),
            delta_ips_per_device=0.0, t_forward_new=float("inf"),
            target_stage=old_eff, order=work.order,
            realizable=False,
        ))
    return out


def _replicated(work: _Work, k: int) -> _Work:
    return _Work(layers=list(work.layers), order=work.order, split=work.split,
                 part_local=work.part_local, replicas=k,
                 resident_groups=work.resident_groups, reload_seconds=work.reload_seconds)


def choose_best(candidates: list[Candidate], budget: int) -> Optional[Candidate]:
    """Pick the best feasible candidate.

    Ranking: predicted IPS improvement per added device first; equal
    gains prefer the lower resulting end-to-end latency (throughput up,
    latency kept in range), then the slowest target stage (load
    balancing), then fewer added devices, then earliest pipeline
    position.
    """
    feasible = [c for c in candidates
                if c.realizable and c.extra_devices <= budget
                and (c.kind != "data_replica" or c.delta_ips_per_device >= 0)]
    if not feasible:
        return None
    return min(feasible, key=lambda c: (-c.delta_ips_per_device, c.t_forward_new,
                                        -c.target_stage, c.extra_devices, c.order))


# -- assembly ---------------------------------------------------------------


def _window_specs(graph: ir.ModelGraph, layers: Iterable[str]) -> tuple[tuple[str, int], ...]:
    specs = []
    for n in layers:
        spec = graph.layer(n)
        if spec.kind in ir.WINDOWED_KINDS:
            specs.append((spec.inputs[0], spec.window))
    return tuple(specs)


def _materialize(graph: ir.ModelGraph, state: list[_Work], n: int,
                 device: DeviceProfile, comm: CommModel, notes: list[str]) -> Assignment:
    tasks: dict[int, Task] = {}
    dev = 0
    work_devices: dict[int, list[int]] = {}
    for i, w in enumerate(state):
        ids = []
        for r in range(w.replicas):
            split = w.split
            replica = DataReplicaInfo(group=f"g{i}", index=r, count=w.replicas) if w.replicas > 1 else None
            tid = f"t{i}" + (f".p{split.index}" if split else "") + (f".r{r}" if w.replicas > 1 else "")
            resident = tuple(tuple(g) for g in (w.resident_groups or [list(w.layers)]))
            tasks[dev] = Task(
                task_id=tid, device=dev, layers=tuple(w.layers), split=split,
                replica=replica, resident_groups=resident,
                window_specs=_window_specs(graph, w.layers),
            )
            ids.append(dev)
            dev += 1
        work_devices[i] = ids

    # Edges: for each stage, every inbound boundary value from every
    # producing device (all shards, all replicas).
    produced_by: dict[str, list[int]] = {}
    for i, w in enumerate(state):
        for name in w.layers:
            produced_by.setdefault(name, [])
            produced_by[name].extend(work_devices[i])
    edges: list[Edge] = []
    seen = set()
    for i, w in enumerate(state):
        for name, _ in _external_inputs(graph, w, state):
            for src in sorted(set(produced_by.get(name, []))):
                for dst in work_devices[i]:
                    if src != dst and (src, dst, name) not in seen:
                        seen.add((src, dst, name))
                        edges.append(Edge(src, dst, name))

    ips, t_fwd = _predict(graph, state, device, comm)
    stage_map = {}
    load_map = {}
    for i, w in enumerate(state):
        st = _work_stage(graph, w, state, device, comm)
        for d in work_devices[i]:
            stage_map[d] = st
            groups = w.resident_groups or [list(w.layers)]
            load_map[d] = sum(costs.estimate_load_time(graph, g, device) for g in groups)
    reload_total = sum(w.reload_seconds for w in state)
    predicted = Predicted(ips=ips, t_forward_seconds=t_fwd, stage_seconds=stage_map,
                          load_seconds=load_map, reload_seconds_per_inference=reload_total)
    return Assignment(device_count=n, tasks=tasks, edges=edges, predicted=predicted,
                      notes=list(notes))


def task_assign(graph: ir.ModelGraph, n_max: int,
                comm: Optional[CommModel] = None,
                device: Optional[DeviceProfile] = None,
                overhead_factor: float = 2.0) -> AssignmentSet:
    """Plan assignments for every device count 1..n_max."""
    if n_max < 1:
        raise PlanError("n_max must be >= 1")
    comm = comm or CommModel()
    device = device or DeviceProfile()
    groups = model_to_layers(graph)
    base = find_min_load_tasks(graph, groups, device.mem_bytes, overhead_factor)

    assignments = {}
    for n in range(1, n_max + 1):
        notes: list[str] = []
        if len(base) > n:
            state = minimize_load_time(graph, base, device.mem_bytes, n, device, comm,
                                       overhead_factor)
            if any(len(w.resident_groups) > 1 for w in state):
                notes.append(
                    "reload cycling required at full accuracy; a reduced dense "
                    "variant (see build_model dense_scale) would avoid it"
                )
        elif len(base) == n:
            state = [_Work(layers=list(t), order=i, resident_groups=[list(t)])
                     for i, t in enumerate(base)]
        else:
            state = [_Work(layers=list(t), order=i, resident_groups=[list(t)])
                     for i, t in enumerate(base)]
            used = len(state)
            while used < n:
                budget = n - used
                cands: list[Candidate] = []
                for i in range(len(state)):
                    cands.extend(model_vs_data(graph, state, i, device, comm, budget))
                pick = choose_best(cands, budget)
                if pick is None:
                    notes.append(f"no beneficial split for {n - used} remaining device(s); left idle")
                    break
                if pick.kind == "data_replica":
                    state[pick.target] = _replicated(state[pick.target], state[pick.target].replicas + 1)
                elif pick.kind == "model_split":
                    state = _apply_model_split(graph, state, pick.target, pick.fc_layer, k=2)
                used = sum(w.devices() for w in state)
        assignments[n] = _materialize(graph, state, n, device, comm, notes)
    return AssignmentSet(graph, device, comm, overhead_factor, assignments)


def render_plan(aset: AssignmentSet, n_values: Optional[Iterable[int]] = None) -> str:
    """Human-readable per-device architecture table."""
    lines = []
    for n in sorted(n_values or aset.assignments):
        a = aset.assignments[n]
        lines.append(f"=== {n} device(s): predicted {a.predicted.ips:.3f} inf/s, "
                     f"t_forward {a.predicted.t_forward_seconds:.3f} s ===")
        for d in range(a.device_count):
            task = a.tasks.get(d)
            if task is None:
                lines.append(f"  device {d:2d}: (idle spare)")
                continue
            mode = ""
            if task.split:
                lo, hi = task.split.rows
                mode = f"  [shard {task.split.index + 1}/{task.split.count} of {task.split.origin}: rows {lo}:{hi}]"
            if task.replica:
                mode += f"  [replica {task.replica.index + 1}/{task.replica.count}]"
            if task.reloads:
                mode += f"  [reloads {len(task.resident_groups)} groups/inference]"
            lines.append(f"  device {d:2d}: {', '.join(task.layers)}{mode}")
        for note in a.notes:
            lines.append(f"  note: {note}")
    return "\n".join(lines)
