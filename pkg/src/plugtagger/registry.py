"""Plugin registry and the task-switch benchmark.

Two serving regimes process the same shuffled multi-task stream one sentence
at a time.  PluginSwitch keeps one backbone in memory and swaps the active
pack on a task change.  ModelSwitch throws the backbone away on every task
change and rebuilds it from its checkpoint (or waits a fixed synthetic delay
standing in for a large model's reload) before tagging.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import TaggedSentence
from .errors import ContractError, DataError, UnknownTaskError
from .model import ModelWeights, encode_batch, lm_logits, load_model, model_from_bytes
from .plugin import PluginPack, apply_labelword_deltas, check_compatible, load_plugin
from .training import decode

PLUGIN_SWITCH = "PluginSwitch"
MODEL_SWITCH = "ModelSwitch"
CSV_HEADER = ("n_per_task", "model_switch_s", "plugin_switch_s", "ratio")


def tag_ids(view: ModelWeights, pack: PluginPack, ids: Sequence[int]) -> tuple[list[int], list[str]]:
    """Arg-max words and decoded tags for one sentence; ``view`` already carries the pack's deltas."""
    with dc.no_grad():
        h = encode_batch(view, np.asarray(ids, dtype=np.int64).reshape(1, -1), plugin=pack).data[0]
        words = [int(w) for w in lm_logits(view, h).data.argmax(axis=1)]
    return words, decode(words, pack.label_map)


@dataclass(frozen=True)
class TaskView:
    """Read-only pairing of a pack with its delta-patched backbone view; safe to share across threads."""

    task: str
    pack: PluginPack
    weights: ModelWeights

    def tag(self, ids: Sequence[int]) -> list[str]:
        return tag_ids(self.weights, self.pack, ids)[1]


class Registry:
    def __init__(self, backbone: ModelWeights):
        self.backbone = backbone
        self._views: dict[str, TaskView] = {}
        self.active: str | None = None
        self._active_view: TaskView | None = None

    def register(self, pack: PluginPack, task: str | None = None) -> None:
        task = task or pack.meta.task
        if not task:
            raise ContractError("a registered pack needs a task name")
        if pack.meta.model_hash is None:
            raise ContractError(f"pack for {task!r} does not record its backbone hash")
        check_compatible(pack, self.backbone)
        self._views[task] = TaskView(task, pack, apply_labelword_deltas(self.backbone, pack))

    @property
    def tasks(self) -> list[str]:
        return sorted(self._views)

    def view(self, task: str) -> TaskView:
        try:
            return self._views[task]
        except KeyError:
            raise UnknownTaskError(f"task {task!r} is not registered") from None

    def activate(self, task: str) -> bool:
        """Make ``task`` active; returns whether anything changed."""
        if task == self.active:
            return False
        self._active_view = self.view(task)
        self.active = task
        return True

    def tag(self, ids: Sequence[int]) -> list[str]:
        if self._active_view is None:
            raise ContractError("no active task")
        return self._active_view.tag(ids)

    def backbone_hash(self) -> int:
        return self.backbone.content_hash()


# ---------------------------------------------------------------------------
# stream and regimes
# ---------------------------------------------------------------------------


def build_stream(datasets: Mapping[str, Sequence[TaggedSentence]], per_task: int, seed: int = 0) -> list[tuple[str, TaggedSentence]]:
    """Sample ``per_task`` sentences without replacement from every task, then shuffle the union."""
    rng = np.random.default_rng(seed)
    stream = []
    for task in sorted(datasets):
        data = datasets[task]
        if not data:
            raise DataError(f"task {task!r} has no sentences")
        if per_task > len(data):
            raise DataError(f"task {task!r} has {len(data)} sentences, {per_task} requested")
        stream += [(task, data[i]) for i in rng.choice(len(data), size=per_task, replace=False)]
    return [stream[i] for i in rng.permutation(len(stream))]


@dataclass
class SampleRecord:
    task: str
    switched: bool
    latency: float
    words: list[int] = field(repr=False)
    tags: list[str] = field(repr=False)


@dataclass
class SwitchTrace:
    regime: str
    records: list[SampleRecord] = field(default_factory=list)

    @property
    def total(self) -> float:
        return sum(r.latency for r in self.records)

    @property
    def switches(self) -> int:
        return sum(r.switched for r in self.records)

    def tasks(self) -> list[str]:
        return [r.task for r in self.records]

    def predictions(self) -> list[list[int]]:
        return [r.words for r in self.records]

    def to_json(self) -> str:
        return json.dumps({"regime": self.regime, "total_s": self.total, "switches": self.switches,
                           "records": [asdict(r) for r in self.records]})


class PluginSwitcher:
    regime = PLUGIN_SWITCH

    def __init__(self, registry: Registry):
        self.registry = registry

    def prepare(self, task: str) -> None:
        self.registry.activate(task)

    def switch(self, task: str) -> bool:
        return self.registry.activate(task)

    def tag(self, ids):
        v = self.registry.view(self.registry.active)
        return tag_ids(v.weights, v.pack, ids)


class ModelSwitcher:
    """Rebuilds backbone and task state from checkpoints on every task change.

    With ``reload_delay`` set, the disk read is replaced by a fixed sleep
    followed by deserialising an in-memory copy of the checkpoint, which
    makes the cost deterministic and independent of the toy model's size.
    """

    regime = MODEL_SWITCH

    def __init__(self, model_path, plugin_paths: Mapping[str, str | Path], reload_delay: float | None = None):
        self.model_path = Path(model_path)
        self.plugin_paths = {t: Path(p) for t, p in plugin_paths.items()}
        self.reload_delay = reload_delay
        self._blob = None
        if reload_delay is not None:
            try:
                self._blob = self.model_path.read_bytes()
            except OSError as exc:
                raise DataError(f"cannot read model checkpoint {self.model_path}: {exc}") from exc
        self.task: str | None = None
        self.weights = self.pack = self.view = None

    def _load(self, task: str) -> None:
        if task not in self.plugin_paths:
            raise UnknownTaskError(f"no plugin checkpoint for task {task!r}")
        self.weights = self.pack = self.view = None
        if self.reload_delay is not None:
            time.sleep(self.reload_delay)
            weights, _ = model_from_bytes(self._blob)
        else:
            weights, _ = load_model(self.model_path)
        pack = load_plugin(self.plugin_paths[task], weights)
        self.weights, self.pack = weights, pack
        self.view = apply_labelword_deltas(weights, pack)
        self.task = task

    def prepare(self, task: str) -> None:
        self._load(task)

    def switch(self, task: str) -> bool:
        if task == self.task:
            return False
        self._load(task)
        return True

    def tag(self, ids):
        return tag_ids(self.view, self.pack, ids)


def run_stream(stream: Sequence[tuple[str, TaggedSentence]], switcher) -> SwitchTrace:
    """Process the stream one sentence at a time, timing switch plus tagging per sample.

    A warm-up pass (untimed) loads the first task and tags the first sample,
    so the first timed sample never counts as a switch.
    """
    trace = SwitchTrace(switcher.regime)
    if not stream:
        return trace
    first_task, first = stream[0]
    switcher.prepare(first_task)
    switcher.tag(first.ids)
    for task, sent in stream:
        t0 = time.perf_counter()
        switched = switcher.switch(task)
        words, tags = switcher.tag(sent.ids)
        trace.records.append(SampleRecord(task, switched, time.perf_counter() - t0, words, tags))
    return trace


# ---------------------------------------------------------------------------
# speed ratio
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatioPoint:
    n_per_task: int
    model_switch_s: float
    plugin_switch_s: float

    @property
    def ratio(self) -> float:
        return self.model_switch_s / self.plugin_switch_s if self.plugin_switch_s > 0 else float("inf")


def _prefix_total(trace: SwitchTrace, n: int) -> float:
    seen: dict[str, int] = {}
    total = 0.0
    for r in trace.records:
        rank = seen.get(r.task, 0)
        seen[r.task] = rank + 1
        if rank < n:
            total += r.latency
    return total


def speed_ratio(trace_model: SwitchTrace, trace_plugin: SwitchTrace, sample_counts: Sequence[int]) -> list[RatioPoint]:
    """Model-switch time over plugin-switch time, counting each task's first ``n`` samples."""
    if trace_model.tasks() != trace_plugin.tasks():
        raise ContractError("traces come from different streams")
    return [RatioPoint(n, _prefix_total(trace_model, n), _prefix_total(trace_plugin, n)) for n in sample_counts]


def ratio_slope(points: Sequence[RatioPoint]) -> float:
    """Least-squares slope of ratio against samples per task."""
    x = np.array([p.n_per_task for p in points], dtype=float)
    y = np.array([p.ratio for p in points], dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def ratio_csv(points: Sequence[RatioPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow([p.n_per_task, f"{p.model_switch_s:.6f}", f"{p.plugin_switch_s:.6f}", f"{p.ratio:.4f}"])
    return buf.getvalue()
