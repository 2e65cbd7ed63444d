"""Deterministic discrete-event network with an in-path adversary hook.

Connections are ordered duplex byte channels: each send becomes one
segment delivered after a fixed per-link latency. TCP control flow is
reduced to connect / graceful-close / reset events, which is all the
studied attacks depend on. An adversary positioned on every channel that
touches its target sees each segment exactly once, in order, before
delivery, and may forward, replace, drop, or convert it to a reset. It
never decrypts anything.

Eclipse mode stores at most one payload copy per connection (first
payload whose length matches the replay class) and substitutes it for the
next same-length payload, which garbles the receiver's cipher position
and forces a graceful close. Downgrade mode watches the first payload of
each new connection: the 126-byte legacy opening is left alone, anything
else marks the connection as encrypted-capable and the next
responder-to-initiator segment is turned into a reset while the key
exchange is still in flight.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
from dataclasses import dataclass, field
from random import Random
from typing import Callable

from . import classifier

DEFAULT_LATENCY = 0.05
SYN_TIMEOUT = 10.0
REPLAY_CLASS_LEN = 29  # ping/pong wire size


class Verdict(enum.Enum):
    FORWARD = "forward"
    REPLACE = "replace"
    RESET = "reset"
    DROP = "drop"
    MISS = "miss"  # wanted to reset but the window had closed


class AdversaryMode(enum.Enum):
    OFF = "off"
    ECLIPSE = "eclipse"
    DOWNGRADE = "downgrade"


@dataclass
class AdversaryPolicy:
    mode: AdversaryMode = AdversaryMode.OFF
    target_key: str = ""
    replay_payload_len: int = REPLAY_CLASS_LEN
    # at most this many replay closes per stagger window; None = unlimited
    stagger_max_closes: int | None = None
    stagger_interval: float = 60.0
    drop_reconnect_syn: bool = True


@dataclass(frozen=True, slots=True)
class VerdictRecord:
    time: float
    channel_id: int
    src: str
    dst: str
    observed_len: int
    candidates: tuple
    verdict: str


class VerdictTrace:
    """Append-only record of every adversary decision on observed segments."""

    def __init__(self):
        self.records: list[VerdictRecord] = []

    def append(self, rec: VerdictRecord) -> None:
        self.records.append(rec)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.records:
            out[rec.verdict] = out.get(rec.verdict, 0) + 1
        return out


@dataclass
class _ChannelView:
    """What the adversary knows about one monitored channel."""

    saw_connect: bool = False
    stored_payload: bytes | None = None
    first_payload_len: int | None = None
    v2_candidate: bool = False
    fired: bool = False
    missed: bool = False


class Adversary:
    """In-path packet mangler for all channels touching the target."""

    def __init__(self, policy: AdversaryPolicy, sim: "Simulator"):
        self.policy = policy
        self.sim = sim
        self.trace = VerdictTrace()
        self.views: dict[int, _ChannelView] = {}
        self.blocked_keys: dict[str, None] = {}  # peers barred from reconnecting
        self._window_index = -1
        self._window_closes = 0

    def monitors(self, channel: "Channel") -> bool:
        t = self.policy.target_key
        return bool(t) and t in (channel.initiator_key, channel.responder_key)

    def note_connect(self, channel: "Channel") -> None:
        if self.policy.mode is not AdversaryMode.OFF and self.monitors(channel):
            self.views[channel.id] = _ChannelView(saw_connect=True)

    def blocks_connect(self, src_key: str, dst_key: str) -> bool:
        """Whether a SYN between these endpoints is silently dropped."""
        if self.policy.mode is not AdversaryMode.ECLIPSE or not self.policy.drop_reconnect_syn:
            return False
        t = self.policy.target_key
        if t == dst_key and src_key in self.blocked_keys:
            return True
        if t == src_key and dst_key in self.blocked_keys:
            return True
        return False

    def _stagger_allows(self) -> bool:
        if self.policy.stagger_max_closes is None:
            return True
        window = int(self.sim.now // self.policy.stagger_interval)
        if window != self._window_index:
            self._window_index = window
            self._window_closes = 0
        return self._window_closes < self.policy.stagger_max_closes

    def _record(self, channel, src, dst, length, verdict: Verdict) -> None:
        try:
            cands = tuple(sorted(classifier.classify(length).candidates))
        except classifier.ClassifierError:
            cands = ()
        self.trace.append(
            VerdictRecord(self.sim.now, channel.id, src, dst, length, cands, verdict.value)
        )

    def observe(self, channel: "Channel", src_key: str, dst_key: str, data: bytes):
        """Issue a verdict for one segment. Returns (Verdict, payload)."""
        mode = self.policy.mode
        if mode is AdversaryMode.OFF or not self.monitors(channel):
            return Verdict.FORWARD, data
        view = self.views.setdefault(channel.id, _ChannelView())
        if mode is AdversaryMode.ECLIPSE:
            return self._eclipse_step(channel, view, src_key, dst_key, data)
        return self._downgrade_step(channel, view, src_key, dst_key, data)

    def _eclipse_step(self, channel, view, src_key, dst_key, data):
        # only payloads leaving the victim are replayed, per the attack recipe
        if src_key != self.policy.target_key or len(data) != self.policy.replay_payload_len:
            return Verdict.FORWARD, data
        if view.stored_payload is None:
            view.stored_payload = bytes(data)
            self._record(channel, src_key, dst_key, len(data), Verdict.FORWARD)
            return Verdict.FORWARD, data
        if not self._stagger_allows():
            return Verdict.FORWARD, data
        stored = view.stored_payload
        view.stored_payload = None  # at most one stored payload per connection
        view.fired = True
        self._window_closes += 1
        self.blocked_keys[dst_key] = None
        self._record(channel, src_key, dst_key, len(data), Verdict.REPLACE)
        return Verdict.REPLACE, stored

    def _downgrade_step(self, channel, view, src_key, dst_key, data):
        if not view.saw_connect:
            # attached mid-conversation: the key-exchange window has closed
            if not view.missed:
                view.missed = True
                self._record(channel, src_key, dst_key, len(data), Verdict.MISS)
                self.sim.log(self.policy.target_key, "downgrade_miss", channel=channel.id)
            return Verdict.FORWARD, data
        if view.first_payload_len is None and src_key == channel.initiator_key:
            view.first_payload_len = len(data)
            from .transport import Protocol, first_payload_protocol

            guess = first_payload_protocol(len(data))
            view.v2_candidate = guess.protocol is Protocol.V2
            return Verdict.FORWARD, data
        if (
            view.v2_candidate
            and not view.fired
            and src_key == channel.responder_key
        ):
            view.fired = True
            self._record(channel, src_key, dst_key, len(data), Verdict.RESET)
            return Verdict.RESET, data
        return Verdict.FORWARD, data


class ChannelState(enum.Enum):
    CONNECTING = "connecting"
    OPEN = "open"
    CLOSED = "closed"


class Channel:
    """Ordered duplex byte pipe between two endpoints."""

    _ids = itertools.count(1)

    def __init__(self, sim: "Simulator", initiator_key: str, responder_key: str, latency: float):
        self.id = next(Channel._ids)
        self.sim = sim
        self.initiator_key = initiator_key
        self.responder_key = responder_key
        self.latency = latency
        self.state = ChannelState.CONNECTING
        self.close_reason = ""

    def other(self, key: str) -> str:
        return self.responder_key if key == self.initiator_key else self.initiator_key

    def send(self, src_key: str, data: bytes, truth: tuple = ()) -> None:
        """Transmit one segment; the adversary sees it before delivery."""
        if self.state is not ChannelState.OPEN:
            return
        dst_key = self.other(src_key)
        self.sim.record_traffic(self, src_key, dst_key, data, truth)
        verdict, payload = self.sim.adversary.observe(self, src_key, dst_key, data)
        if verdict is Verdict.DROP:
            return
        if verdict is Verdict.RESET:
            self.sim.schedule(self.latency, self.sim._deliver_reset, self.id, dst_key)
            return
        self.sim.schedule(self.latency, self.sim._deliver, self.id, dst_key, payload)

    def close(self, src_key: str, reason: str = "") -> None:
        """Graceful FIN-style close initiated by one endpoint."""
        if self.state is ChannelState.CLOSED:
            return
        self.state = ChannelState.CLOSED
        self.close_reason = reason
        dst_key = self.other(src_key)
        self.sim.schedule(self.latency, self.sim._deliver_close, self.id, dst_key, reason)


class Simulator:
    """Single-threaded deterministic event loop over nodes and channels.

    Nodes register under their "ip:port" key and must provide the event
    hooks the loop calls (`on_connection_established`, `on_segment`,
    `on_channel_closed`, `on_connect_failed`, `on_inbound_request`).
    """

    def __init__(self, seed: int = 0, latency: float = DEFAULT_LATENCY, block_interval: float = 600.0):
        self.seed = seed
        self.now = 0.0
        self.latency = latency
        self.block_interval = block_interval
        self._heap: list = []
        self._seq = itertools.count()
        self.nodes: dict[str, object] = {}
        self.channels: dict[int, Channel] = {}
        self.adversary = Adversary(AdversaryPolicy(), self)
        self.event_log: list[dict] = []
        self.traffic: list[classifier.TrafficItem] = []
        self.traffic_focus: str = ""  # only log segments touching this node
        self._stopped = False

    # -- rng / time -------------------------------------------------------

    def rng_for(self, name: str) -> Random:
        return Random(f"{self.seed}/{name}")

    def schedule(self, delay: float, fn: Callable, *args) -> list:
        """Queue fn(*args) after delay; returns a cancellable entry."""
        entry = [self.now + delay, next(self._seq), fn, args, False]
        heapq.heappush(self._heap, entry)
        return entry

    @staticmethod
    def cancel(entry: list) -> None:
        entry[4] = True

    def run_until(self, t_end: float) -> None:
        while self._heap and not self._stopped:
            if self._heap[0][0] > t_end:
                break
            time, _, fn, args, cancelled = heapq.heappop(self._heap)
            self.now = time
            if not cancelled:
                fn(*args)
        self.now = max(self.now, t_end)

    def stop(self) -> None:
        self._stopped = True

    # -- chain clock ------------------------------------------------------

    def chain_height(self) -> int:
        return int(self.now // self.block_interval)

    def tip_time(self) -> float:
        return self.chain_height() * self.block_interval

    # -- logging ----------------------------------------------------------

    def log(self, node_key: str, event: str, **details) -> None:
        self.event_log.append(
            {"time": round(self.now, 6), "node": node_key, "event": event, "details": details}
        )

    def event_log_jsonl(self) -> str:
        return "\n".join(json.dumps(rec, sort_keys=True) for rec in self.event_log)

    def record_traffic(self, channel: Channel, src_key: str, dst_key: str, data: bytes, truth: tuple) -> None:
        focus = self.traffic_focus
        if not focus or focus not in (src_key, dst_key):
            return
        direction = "out" if src_key == focus else "in"
        self.traffic.append(
            classifier.TrafficItem(self.now, direction, "+".join(truth) or "handshake", len(data))
        )

    # -- nodes / connections ----------------------------------------------

    def register(self, node) -> None:
        self.nodes[node.key] = node

    def connect(self, initiator_key: str, target_key: str, context: dict | None = None) -> None:
        """Open a connection; the initiator hears back via its hooks."""
        initiator = self.nodes[initiator_key]
        if self.adversary.blocks_connect(initiator_key, target_key):
            self.log(initiator_key, "syn_dropped", target=target_key)
            self.schedule(SYN_TIMEOUT, initiator.on_connect_failed, target_key, context)
            return
        target = self.nodes.get(target_key)
        if target is None or not getattr(target, "listening", False):
            self.schedule(SYN_TIMEOUT, initiator.on_connect_failed, target_key, context)
            return
        self.schedule(self.latency, self._handle_inbound, initiator_key, target_key, context)

    def _handle_inbound(self, initiator_key: str, target_key: str, context: dict | None) -> None:
        initiator = self.nodes[initiator_key]
        target = self.nodes.get(target_key)
        if target is None or not target.on_inbound_request(initiator_key):
            self.schedule(self.latency, initiator.on_connect_failed, target_key, context)
            return
        channel = Channel(self, initiator_key, target_key, self.latency)
        channel.state = ChannelState.OPEN
        self.channels[channel.id] = channel
        self.adversary.note_connect(channel)
        target.on_connection_established(channel, inbound=True, context=None)
        self.schedule(
            self.latency, initiator.on_connection_established, channel, False, context
        )

    def is_reachable(self, prober_key: str, target_key: str) -> bool:
        """Feeler-style reachability probe (no real channel is built)."""
        if self.adversary.blocks_connect(prober_key, target_key):
            return False
        target = self.nodes.get(target_key)
        return target is not None and getattr(target, "listening", False)

    # -- deliveries -------------------------------------------------------

    def _deliver(self, channel_id: int, dst_key: str, payload: bytes) -> None:
        channel = self.channels.get(channel_id)
        if channel is None or channel.state is not ChannelState.OPEN:
            return
        node = self.nodes.get(dst_key)
        if node is not None:
            node.on_segment(channel, payload)

    def _deliver_close(self, channel_id: int, dst_key: str, reason: str) -> None:
        channel = self.channels.pop(channel_id, None)
        if channel is None:
            return
        node = self.nodes.get(dst_key)
        if node is not None:
            node.on_channel_closed(channel, graceful=True, reason=reason)

    def _deliver_reset(self, channel_id: int, dst_key: str) -> None:
        channel = self.channels.pop(channel_id, None)
        if channel is None:
            return
        channel.state = ChannelState.CLOSED
        channel.close_reason = "reset"
        node = self.nodes.get(dst_key)
        if node is not None:
            node.on_channel_closed(channel, graceful=False, reason="reset")
        other = self.nodes.get(channel.other(dst_key))
        if other is not None:
            other.on_channel_closed(channel, graceful=False, reason="reset")
