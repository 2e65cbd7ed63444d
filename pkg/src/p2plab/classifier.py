"""Infer application message types from payload lengths alone.

A v2 payload of x bytes can carry a message of type t with k repeated
elements when x minus the 20 mandatory bytes, the type field (1 or 3
bytes) and an optional count prefix (0, 1 or 3 bytes) is exactly k times
t's element size. Types with identical framing (inv/getdata, ping/pong)
are indistinguishable this way and always co-occur as candidates. Block
payloads have too many variable-length fields for the equation and are
only offered as a wildcard candidate above a size threshold.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import messages

MANDATORY_BYTES = 20
EMPTY_CANDIDATE = ("empty", 0)


class ClassifierError(Exception):
    pass


class NotAPacketError(ClassifierError):
    """Payload too short to be a v2 packet."""


class UndefinedMetricsError(ClassifierError):
    """Evaluation asked for metrics over an empty ground truth."""


@dataclass(frozen=True)
class MessageTypeSpec:
    name: str
    type_field_bytes: int = 1
    count_prefix_bytes: frozenset = frozenset({0})
    unit_size: int = 1
    min_elements: int = 1
    max_elements: int = 1
    wildcard_min_payload: int | None = None  # match any payload at least this big

    def __post_init__(self):
        if self.unit_size < 1:
            raise ClassifierError("unit_size must be positive")
        if not self.count_prefix_bytes <= {0, 1, 3}:
            raise ClassifierError("count prefix must be drawn from {0, 1, 3}")

    def candidates_for(self, payload_len: int) -> list[tuple[str, int]]:
        if self.wildcard_min_payload is not None:
            if payload_len >= self.wildcard_min_payload:
                return [(self.name, 1)]
            return []
        out = []
        for prefix in sorted(self.count_prefix_bytes):
            rem = payload_len - MANDATORY_BYTES - self.type_field_bytes - prefix
            if rem < 0 or rem % self.unit_size:
                continue
            k = rem // self.unit_size
            if self.min_elements <= k <= self.max_elements:
                out.append((self.name, k))
        return out


def _repeated(name, unit, max_elements) -> MessageTypeSpec:
    return MessageTypeSpec(
        name,
        count_prefix_bytes=frozenset({1, 3}),
        unit_size=unit,
        min_elements=1,
        max_elements=max_elements,
    )


def _fixed(name, body_size) -> MessageTypeSpec:
    if body_size == 0:
        # empty body: the count-0 form with zero elements
        return MessageTypeSpec(name, unit_size=1, min_elements=0, max_elements=0)
    return MessageTypeSpec(name, unit_size=body_size)


DEFAULT_SPECS: tuple[MessageTypeSpec, ...] = (
    _repeated("inv", messages.INV_VEC_SIZE, messages.MAX_INV_ENTRIES),
    _repeated("getdata", messages.INV_VEC_SIZE, messages.MAX_INV_ENTRIES),
    _repeated("addr", messages.ADDR_ENTRY_SIZE, 1000),
    _repeated("headers", messages.BLOCK_HEADER_SIZE, 2000),
    _fixed("ping", messages.PING_BODY_SIZE),
    _fixed("pong", messages.PING_BODY_SIZE),
    _fixed("version", messages.VERSION_BODY_SIZE_V2),
    _fixed("verack", 0),
    _fixed("getheaders", messages.GETHEADERS_BODY_SIZE),
    MessageTypeSpec("block", wildcard_min_payload=1000),
)


@dataclass(frozen=True)
class Classification:
    payload_len: int
    candidates: frozenset

    @property
    def names(self) -> frozenset:
        return frozenset(name for name, _ in self.candidates)

    def matches(self, type_name: str) -> bool:
        return type_name in self.names

    def count_for(self, type_name: str) -> int | None:
        for name, k in self.candidates:
            if name == type_name:
                return k
        return None


def classify(
    payload_len: int, specs: Sequence[MessageTypeSpec] = DEFAULT_SPECS
) -> Classification:
    """All (type, element count) pairs consistent with a payload length."""
    if payload_len < MANDATORY_BYTES:
        raise NotAPacketError(f"{payload_len} bytes is below the packet minimum")
    if payload_len == MANDATORY_BYTES:
        return Classification(payload_len, frozenset({EMPTY_CANDIDATE}))
    found = []
    for spec in specs:
        found.extend(spec.candidates_for(payload_len))
    return Classification(payload_len, frozenset(found))


@dataclass(frozen=True, slots=True)
class TrafficItem:
    """One ground-truth application message on the wire."""

    time: float
    direction: str  # "out" | "in" relative to the observed node
    type_name: str
    wire_len: int


@dataclass(frozen=True, slots=True)
class Observation:
    """One observed payload, annotated with the truth it was derived from."""

    time: float
    direction: str
    payload_len: int
    true_types: tuple


def segment_coalescer(
    items: Sequence[TrafficItem], flush_after: float = 0.0
) -> list[Observation]:
    """Model transport segmentation over a message sequence.

    With ``flush_after`` zero every message is its own payload; otherwise
    consecutive same-direction messages closer together than the window are
    merged into one payload whose length is the sum of the wire sizes.
    """
    out: list[Observation] = []
    group: list[TrafficItem] = []

    def flush():
        if group:
            out.append(
                Observation(
                    time=group[0].time,
                    direction=group[0].direction,
                    payload_len=sum(i.wire_len for i in group),
                    true_types=tuple(i.type_name for i in group),
                )
            )
            group.clear()

    for item in items:
        if group and (
            flush_after <= 0.0
            or item.direction != group[-1].direction
            or item.time - group[-1].time > flush_after
        ):
            flush()
        group.append(item)
    flush()
    return out


def evaluate(
    observations: Sequence[Observation],
    target_type: str,
    specs: Sequence[MessageTypeSpec] = DEFAULT_SPECS,
) -> tuple[float, float]:
    """Precision and recall of length-only labelling for one message type."""
    total_true = sum(obs.true_types.count(target_type) for obs in observations)
    if total_true == 0:
        raise UndefinedMetricsError(f"no {target_type!r} messages in ground truth")
    labeled = 0
    labeled_hits = 0
    detected = 0
    for obs in observations:
        if classify(obs.payload_len, specs).matches(target_type):
            labeled += 1
            hits = obs.true_types.count(target_type)
            if hits:
                labeled_hits += 1
            detected += hits
    precision = labeled_hits / labeled if labeled else 0.0
    recall = detected / total_true
    return precision, recall


def load_specs(path) -> tuple[MessageTypeSpec, ...]:
    """Read a spec table: name type_bytes counts unit min max [wildcard].

    Whitespace-separated columns, ``#`` comments. ``counts`` is a comma
    list drawn from 0,1,3. A line like ``block wildcard 1000`` declares a
    size-threshold wildcard type.
    """
    specs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) == 3 and parts[1] == "wildcard":
                specs.append(
                    MessageTypeSpec(parts[0], wildcard_min_payload=int(parts[2]))
                )
                continue
            if len(parts) != 6:
                raise ClassifierError(f"bad spec line: {line!r}")
            name, type_bytes, counts, unit, lo, hi = parts
            specs.append(
                MessageTypeSpec(
                    name,
                    type_field_bytes=int(type_bytes),
                    count_prefix_bytes=frozenset(int(c) for c in counts.split(",")),
                    unit_size=int(unit),
                    min_elements=int(lo),
                    max_elements=int(hi),
                )
            )
    return tuple(specs)


def dump_specs(specs: Sequence[MessageTypeSpec]) -> str:
    lines = ["# name type_bytes counts unit min max"]
    for s in specs:
        if s.wildcard_min_payload is not None:
            lines.append(f"{s.name} wildcard {s.wildcard_min_payload}")
        else:
            counts = ",".join(str(c) for c in sorted(s.count_prefix_bytes))
            lines.append(
                f"{s.name} {s.type_field_bytes} {counts} {s.unit_size} "
                f"{s.min_elements} {s.max_elements}"
            )
    return "\n".join(lines) + "\n"


def size_report_csv(items: Iterable[TrafficItem], top: int = 3) -> str:
    """Most frequent wire sizes per type as CSV rows (type, size, percent)."""
    by_type: dict[str, dict[int, int]] = {}
    for item in items:
        sizes = by_type.setdefault(item.type_name, {})
        sizes[item.wire_len] = sizes.get(item.wire_len, 0) + 1
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["type", "size", "percent"])
    for name in sorted(by_type):
        counts = by_type[name]
        total = sum(counts.values())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
        for size, n in ranked:
            writer.writerow([name, size, f"{100.0 * n / total:.2f}"])
    return buf.getvalue()


def classify_report_csv(
    lengths: Iterable[int], specs: Sequence[MessageTypeSpec] = DEFAULT_SPECS
) -> str:
    """Aggregate observed payload lengths into candidate-labelled CSV rows."""
    counts: dict[int, int] = {}
    for n in lengths:
        counts[n] = counts.get(n, 0) + 1
    total = sum(counts.values())
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["size", "count", "percent", "candidates"])
    for size in sorted(counts):
        try:
            cands = classify(size, specs)
            label = ";".join(
                f"{name}:{k}" for name, k in sorted(cands.candidates)
            )
        except NotAPacketError:
            label = "not-a-packet"
        writer.writerow(
            [size, counts[size], f"{100.0 * counts[size] / total:.2f}", label]
        )
    return buf.getvalue()
