"""Deterministic forward-pass execution of every layer kind.

All math is float32 with a pinned accumulation order: weighted sums
accumulate strictly in ascending input index (products first, then an
ordered running sum), so an output row computed on one worker is
bit-identical to the same row computed anywhere else.  That makes
distributed-vs-reference comparisons exact rather than tolerance-based,
including when a dense layer is sharded row-wise across devices.

The streaming ``TaskExecutor`` consumes tagged items and drives layers
ordered by the graph topology; windowed layers (flow stacking, temporal
pyramids) buffer items through ``SlidingWindow``.  The single-process
reference oracle is just a ``TaskExecutor`` that owns the whole graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from edgeflock import model_ir as ir
from edgeflock.windows import SlidingWindow

BN_EPS = np.float32(1e-5)

FlowFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class EngineError(ValueError):
    """Dimension mismatches and invalid layer parameters."""


@dataclass
class LayerParams:
    """Learned constants for one layer; absent fields stay None."""

    w: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None


def params_for(graph: ir.ModelGraph, name: str) -> LayerParams:
    """Deterministic parameters for one layer.

    Values are drawn from a PRNG keyed by (graph seed, layer seed), so
    every worker regenerates identical weights locally: uniform in
    [-0.05, 0.05] for weights/biases/shift, near-unit for variance and
    gain.
    """
    spec = graph.layer(name)
    rng = np.random.default_rng([graph.seed, spec.weights_seed])

    def u(lo, hi, shape):
        return rng.uniform(lo, hi, shape).astype(np.float32)

    if spec.kind == ir.FC:
        in_size = graph.shapes[spec.inputs[0]].size
        out = int(spec.attrs["out_size"])
        return LayerParams(w=u(-0.05, 0.05, (out, in_size)), b=u(-0.05, 0.05, out))
    if spec.kind == ir.CONV:
        c = graph.shapes[spec.inputs[0]].dims[-1]
        f = int(spec.attrs["filters"])
        kh, kw = int(spec.attrs["kernel_h"]), int(spec.attrs["kernel_w"])
        return LayerParams(w=u(-0.05, 0.05, (f, kh, kw, c)), b=u(-0.05, 0.05, f))
    if spec.kind == ir.NORM:
        c = graph.shapes[spec.inputs[0]].dims[-1]
        return LayerParams(
            mean=u(-0.05, 0.05, c), var=u(0.9, 1.1, c), gamma=u(0.95, 1.05, c), beta=u(-0.05, 0.05, c)
        )
    return LayerParams()


def _ordered_sum(products: np.ndarray) -> np.ndarray:
    """Sum over the last axis in strictly ascending index order (float32)."""
    return np.add.accumulate(products, axis=-1)[..., -1]


# Above this product-matrix size, sequential sums run as a column loop
# with a running accumulator instead of materializing the cumsum; the
# float32 add sequence per output is identical either way.
_ORDERED_SUM_MATERIALIZE_LIMIT = 4_000_000


def forward_fc(x: np.ndarray, params: LayerParams, rows: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Dense layer: out[i] = sum_j w[i, j] * x[j] + b[i].

    Accumulation runs in ascending j, so any row subset (``rows``) of a
    sharded layer reproduces the corresponding rows of the full layer
    exactly.
    """
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    w, b = params.w, params.b
    if rows is not None:
        w, b = w[rows[0]:rows[1]], b[rows[0]:rows[1]]
    if w.shape[1] != x.size:
        raise EngineError(f"fc input size {x.size} != weight columns {w.shape[1]}")
    if w.size <= _ORDERED_SUM_MATERIALIZE_LIMIT:
        return _ordered_sum(w * x) + b
    acc = np.zeros(w.shape[0], dtype=np.float32)
    tmp = np.empty_like(acc)
    for j in range(w.shape[1]):
        np.multiply(w[:, j], x[j], out=tmp)
        np.add(acc, tmp, out=acc)
    return acc + b


def _pad_same(h, w, kh, kw, stride):
    ph = max((-(-h // stride) - 1) * stride + kh - h, 0)
    pw = max((-(-w // stride) - 1) * stride + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    """Patch matrix of shape (out_h*out_w, kh*kw*c), tap order (dy, dx, c)."""
    h, w, c = x.shape
    if padding == "same":
        pt, pb, pl, pr = _pad_same(h, w, kh, kw, stride)
        x = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    elif padding != "valid":
        raise EngineError(f"unknown padding {padding!r}")
    if kh > x.shape[0] or kw > x.shape[1]:
        raise EngineError(f"kernel {kh}x{kw} exceeds padded input {x.shape[:2]}")
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw, c))[::stride, ::stride, 0]
    oh, ow = view.shape[0], view.shape[1]
    return np.ascontiguousarray(view).reshape(oh * ow, kh * kw * c), (oh, ow)


def forward_conv(x: np.ndarray, params: LayerParams, stride: int = 1, padding: str = "same") -> np.ndarray:
    """2-D cross-correlation per filter plus bias, zero same-padding.

    Matches a naive six-loop implementation bit-for-bit: taps accumulate
    in (dy, dx, channel) order, bias added last.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise EngineError(f"conv input must be rank 3, got shape {x.shape}")
    w, b = params.w, params.b
    f, kh, kw, c = w.shape
    if c != x.shape[2]:
        raise EngineError(f"conv input channels {x.shape[2]} != kernel channels {c}")
    patches, (oh, ow) = im2col(x, kh, kw, stride, padding)
    taps = kh * kw * c
    positions = patches.shape[0]
    wflat = w.reshape(f, taps)
    if positions * f * taps <= _ORDERED_SUM_MATERIALIZE_LIMIT:
        out = _ordered_sum(patches[:, None, :] * wflat[None, :, :])
    else:
        out = np.zeros((positions, f), dtype=np.float32)
        tmp = np.empty_like(out)
        wt = np.ascontiguousarray(wflat.T)
        for j in range(taps):
            np.multiply(patches[:, j, None], wt[j], out=tmp)
            np.add(out, tmp, out=out)
    out = out + b
    return out.reshape(oh, ow, f)


def forward_relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def forward_norm(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Per-channel standardization: gamma * (x - mean) / sqrt(var + eps) + beta."""
    if np.any(params.var <= 0):
        raise EngineError("batchnorm variance entries must be > 0")
    x = np.asarray(x, dtype=np.float32)
    denom = np.sqrt(params.var + BN_EPS, dtype=np.float32)
    return params.gamma * ((x - params.mean) / denom) + params.beta


def forward_softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the flattened input; outputs sum to ~1."""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    e = np.exp(x - np.max(x), dtype=np.float32)
    return e / e.sum(dtype=np.float32)


def forward_maxpool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    h, w, c = x.shape
    if window > h or window > w:
        raise EngineError(f"pool window {window} exceeds input {h}x{w}")
    view = np.lib.stride_tricks.sliding_window_view(x, (window, window, c))[::stride, ::stride, 0]
    return view.max(axis=(2, 3)).reshape(view.shape[0], view.shape[1], c)


def pyramid_ranges(n_items: int, n_ranges: int) -> list[tuple[int, int]]:
    """Contiguous index ranges for one pyramid level.

    When items split unevenly, earlier ranges take the extra item.  With
    fewer items than ranges every range stays nonempty by sharing the
    trailing items, so a single item fills every row.
    """
    if n_items < 1:
        raise EngineError("pyramid needs at least one item")
    out = []
    for r in range(n_ranges):
        start = min(math.ceil(r * n_items / n_ranges), n_items - 1)
        end = max(math.ceil((r + 1) * n_items / n_ranges), start + 1)
        out.append((start, end))
    return out


def temporal_pyramid(frames: list[np.ndarray], levels: int) -> np.ndarray:
    """Multi-resolution max pooling over an ordered item sequence.

    Level k (k = 0..levels-1) splits the sequence into 2**k contiguous
    ranges and emits one elementwise max per range; rows are ordered
    level-major then range-major, giving 2**levels - 1 rows.
    """
    if not frames:
        raise EngineError("temporal pyramid needs a nonempty frame list")
    if levels < 1:
        raise EngineError("pyramid levels must be >= 1")
    flat = [np.asarray(f, dtype=np.float32).reshape(-1) for f in frames]
    stack = np.stack(flat)
    rows = []
    for k in range(levels):
        for start, end in pyramid_ranges(len(flat), 2 ** k):
            rows.append(stack[start:end].max(axis=0))
    return np.stack(rows)


def flow_diff_stub(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Stand-in flow field: signed per-pixel intensity difference,
    duplicated into the (dx, dy) channels."""
    p = np.asarray(prev, dtype=np.float32)
    c = np.asarray(cur, dtype=np.float32)
    if p.shape != c.shape:
        raise EngineError(f"flow frames disagree on shape: {p.shape} vs {c.shape}")
    if p.ndim == 3:
        p = p.mean(axis=-1, dtype=np.float32)
        c = c.mean(axis=-1, dtype=np.float32)
    d = c - p
    return np.stack([d, d], axis=-1)


def flow_stack(frames: list[np.ndarray], window_len: int, flow_fn: Optional[FlowFn] = None) -> np.ndarray:
    """Stack per-pair flow fields of window_len consecutive frame pairs.

    Takes window_len + 1 frames and emits an (H, W, 2*window_len) tensor;
    channels 2t and 2t+1 hold the (dx, dy) field of pair t.
    """
    if len(frames) != window_len + 1:
        raise EngineError(f"flow stack needs {window_len + 1} frames, got {len(frames)}")
    fn = flow_fn or flow_diff_stub
    fields = [fn(frames[t], frames[t + 1]) for t in range(window_len)]
    h, w, _ = fields[0].shape
    out = np.empty((h, w, 2 * window_len), dtype=np.float32)
    for t, fld in enumerate(fields):
        out[:, :, 2 * t] = fld[:, :, 0]
        out[:, :, 2 * t + 1] = fld[:, :, 1]
    return out


@dataclass
class Emission:
    """One boundary output of a task executor."""

    layer: str
    tag: int
    value: np.ndarray


@dataclass
class SkipNotice:
    """Declares that a layer's outputs below next_tag will never arrive."""

    layer: str
    next_tag: int


class TaskExecutor:
    """Streams tagged items through an owned slice of a validated graph.

    ``push`` feeds one tagged value produced by ``origin`` (an external
    producer or a source) and returns every owned boundary emission that
    becomes ready.  Windowed layers buffer items in sliding windows and
    emit at the newest contributing tag, so tags stay aligned across
    parallel branches.

    ``part`` restricts one fc layer to an output-row slice, for model
    parallelism; elementwise layers downstream of it operate on the
    partial rows.  ``external`` marks owned-layer inputs whose values
    arrive via ``push`` anyway (assembled shards), overriding the local
    partial value.
    """

    def __init__(
        self,
        graph: ir.ModelGraph,
        owned: Optional[Iterable[str]] = None,
        emit: Optional[Iterable[str]] = None,
        part: Optional[tuple[str, int, int]] = None,
        external: Optional[Iterable[str]] = None,
        flow_fn: Optional[FlowFn] = None,
        param_override: Optional[Callable[[str, LayerParams], LayerParams]] = None,
    ):
        self.graph = graph
        self.owned = list(owned) if owned is not None else list(graph.topo_order)
        owned_set = set(self.owned)
        self.emit = set(emit) if emit is not None else {
            n for n in self.owned
            if graph.layer(n).kind == ir.SINK
            or any(c not in owned_set for c in graph.consumers(n))
        }
        self.part = part
        self.external = set(external or ())
        self.flow_fn = flow_fn or flow_diff_stub
        self._params: dict[str, LayerParams] = {}
        self._param_override = param_override
        self._owned_set = owned_set
        # consumers[x] = owned layers reading x inside the executor
        self.consumers: dict[str, list[str]] = {}
        for n in self.owned:
            for inp in graph.layer(n).inputs:
                self.consumers.setdefault(inp, []).append(n)
        # Windows for flowstack/pyramid; join buffers for multi-input layers.
        self._windows: dict[str, SlidingWindow] = {}
        self._joins: dict[str, dict[int, dict[int, np.ndarray]]] = {}
        self._skip: dict[str, int] = {}
        for n in self.owned:
            spec = graph.layer(n)
            if spec.kind in ir.WINDOWED_KINDS:
                start = graph.first_valid[spec.inputs[0]]
                self._windows[n] = SlidingWindow(length=spec.window, next_tag=start)
            if len(spec.inputs) > 1:
                self._joins[n] = {}
        self.fired_log: list[str] = []
        self.pending_notices: list[SkipNotice] = []

    def params(self, name: str) -> LayerParams:
        p = self._params.get(name)
        if p is None:
            p = params_for(self.graph, name)
            if self._param_override is not None:
                p = self._param_override(name, p)
            self._params[name] = p
        return p

    # -- computation ----------------------------------------------------

    def _apply(self, name: str, tag: int, inputs: list[np.ndarray]) -> np.ndarray:
        spec = self.graph.layer(name)
        k = spec.kind
        if k in (ir.SOURCE, ir.SINK):
            return inputs[0] if inputs else None
        if k == ir.FC:
            rows = None
            if self.part is not None and self.part[0] == name:
                rows = (self.part[1], self.part[2])
            return forward_fc(inputs[0], self.params(name), rows=rows)
        if k == ir.CONV:
            return forward_conv(
                inputs[0],
                self.params(name),
                stride=int(spec.attrs.get("stride", 1)),
                padding=spec.attrs.get("padding", "same"),
            )
        if k == ir.RELU:
            return forward_relu(inputs[0])
        if k == ir.NORM:
            return forward_norm(inputs[0], self.params(name))
        if k == ir.SOFTMAX:
            return forward_softmax(inputs[0])
        if k == ir.MAXPOOL:
            return forward_maxpool(inputs[0], int(spec.attrs["window"]), int(spec.attrs.get("stride", spec.attrs["window"])))
        if k == ir.CONCAT:
            axis = int(spec.attrs.get("axis", 0))
            return np.concatenate(inputs, axis=axis)
        raise EngineError(f"layer {name!r}: kind {k!r} is windowed or unknown here")

    def _fire_windowed(self, name: str, end_tag: int, items: list[np.ndarray]) -> np.ndarray:
        spec = self.graph.layer(name)
        if spec.kind == ir.PYRAMID:
            return temporal_pyramid(items, int(spec.attrs["levels"]))
        if spec.kind == ir.FLOWSTACK:
            return flow_stack(items, int(spec.attrs["window_len"]), self.flow_fn)
        raise EngineError(f"layer {name!r} is not windowed")

    # -- streaming ------------------------------------------------------

    def push(self, origin: str, tag: int, value: np.ndarray) -> list[Emission]:
        """Feed one tagged item produced by ``origin``; returns emissions.

        A push for an owned source layer counts as that layer firing (it
        is emitted if on the boundary).  Any other push supplies an
        externally produced value: it feeds owned consumers but is never
        re-emitted, and it is how assembled shard values reach layers
        marked ``external``.

        Side channels read by callers after each push: ``fired_log``
        lists owned layers that computed, ``pending_notices`` collects
        skip notices raised by window resyncs.
        """
        out: list[Emission] = []
        self.fired_log: list[str] = []
        self.pending_notices: list[SkipNotice] = []
        local = origin in self._owned_set and self.graph.layer(origin).kind == ir.SOURCE
        if local:
            self.fired_log.append(origin)
        queue: list[tuple[str, int, np.ndarray, bool]] = [(origin, int(tag), value, local)]
        while queue:
            layer, t, val, is_local = queue.pop(0)
            if is_local and layer in self.emit:
                out.append(Emission(layer, t, val))
            if not is_local or layer not in self.external:
                for consumer in self.consumers.get(layer, ()):  # deterministic order
                    for fired, ft, fv in self._feed(consumer, layer, t, val):
                        queue.append((fired, ft, fv, True))
        return out

    def _feed(self, consumer: str, via: str, tag: int, value: np.ndarray) -> list[tuple[str, int, np.ndarray]]:
        spec = self.graph.layer(consumer)
        if consumer in self._windows:
            win = self._windows[consumer]
            pre = win.resync_on_next
            fired = win.push(tag, value)
            if pre and not win.resync_on_next and win.last_resync == tag:
                # Buffer was lost in a handoff; declare the resulting
                # output gap so downstream windows advance too.
                self.pending_notices.extend(
                    self._skip_from(consumer, win.last_resync + win.length - 1)
                )
            out = []
            for end, items in fired:
                self.fired_log.append(consumer)
                out.append((consumer, end, self._fire_windowed(consumer, end, items)))
            return out
        if consumer in self._joins:
            pend = self._joins[consumer].setdefault(tag, {})
            for slot, inp in enumerate(spec.inputs):
                if inp == via and slot not in pend:
                    pend[slot] = value
                    break
            if len(pend) == len(spec.inputs):
                del self._joins[consumer][tag]
                inputs = [pend[i] for i in range(len(spec.inputs))]
                self.fired_log.append(consumer)
                return [(consumer, tag, self._apply(consumer, tag, inputs))]
            return []
        self.fired_log.append(consumer)
        return [(consumer, tag, self._apply(consumer, tag, [value]))]

    def skip(self, origin: str, next_tag: int) -> list[SkipNotice]:
        """Propagate a declared tag gap; returns boundary skip notices.

        Windowed consumers advance past the gap and resume once a full
        run of post-gap tags accumulates, so their first valid output
        tag shifts by window - 1.
        """
        local = origin in self._owned_set and self.graph.layer(origin).kind == ir.SOURCE
        return self._traverse_skip([(origin, int(next_tag), local)])

    def _skip_from(self, layer: str, next_tag: int) -> list[SkipNotice]:
        """Declare a gap starting at an owned layer's own output."""
        return self._traverse_skip([(layer, int(next_tag), True)])

    def _traverse_skip(self, queue: list[tuple[str, int, bool]]) -> list[SkipNotice]:
        notices: list[SkipNotice] = []
        while queue:
            layer, nxt, is_local = queue.pop(0)
            if is_local:
                if self._skip.get(layer, -1) >= nxt:
                    continue
                self._skip[layer] = nxt
                if layer in self.emit:
                    notices.append(SkipNotice(layer, nxt))
            if not is_local or layer not in self.external:
                for consumer in self.consumers.get(layer, ()):
                    spec = self.graph.layer(consumer)
                    out_next = nxt + (spec.window - 1)
                    if consumer in self._windows:
                        self._windows[consumer].skip_below(nxt)
                    if consumer in self._joins:
                        for t in [t for t in self._joins[consumer] if t < out_next]:
                            del self._joins[consumer][t]
                    queue.append((consumer, out_next, True))
        return notices

    def mark_handoff(self) -> None:
        """Flag all windows to realign on their next arrival (task moved
        between devices and buffered items were lost)."""
        for win in self._windows.values():
            win.resync_on_next = True


def dump_weights(graph: ir.ModelGraph, names: Optional[Iterable[str]] = None) -> str:
    """Debug dump of generated parameters as JSON (same container style
    as model files)."""
    import json

    doc = {}
    for n in (names if names is not None else graph.topo_order):
        p = params_for(graph, n)
        entry = {}
        for field_name in ("w", "b", "mean", "var", "gamma", "beta"):
            val = getattr(p, field_name)
            if val is not None:
                entry[field_name] = val.tolist()
        if entry:
            doc[n] = entry
    return json.dumps(doc, sort_keys=True)


def run_reference(graph: ir.ModelGraph, inputs: dict[str, Iterable[np.ndarray]],
                  flow_fn: Optional[FlowFn] = None) -> dict[str, dict[int, np.ndarray]]:
    """Execute the whole graph in-process over tagged input sequences.

    ``inputs`` maps each source name to an ordered iterable of items
    (tags are assigned 0, 1, ...).  Returns, per sink, the map from tag
    to output value.  Deterministic: identical (graph, seed, inputs)
    produce bit-identical outputs.
    """
    missing = [s for s in graph.inputs if s not in inputs]
    if missing:
        raise EngineError(f"missing input streams: {missing}")
    ex = TaskExecutor(graph, flow_fn=flow_fn)
    results: dict[str, dict[int, np.ndarray]] = {s: {} for s in graph.outputs}
    for source, frames in inputs.items():
        if source not in graph.layers or graph.layer(source).kind != ir.SOURCE:
            raise EngineError(f"{source!r} is not a source layer")
        for tag, frame in enumerate(frames):
            for em in ex.push(source, tag, np.asarray(frame, dtype=np.float32)):
                if em.layer in results:
                    results[em.layer][em.tag] = em.value
    return results
