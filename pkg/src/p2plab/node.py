"""Node behaviour: connection slots, handshakes, keepalive, sync checks,
inbound eviction and the outbound-connection loop.

Three behaviour profiles exist. A "full" node answers pings, serves
headers from the (simulated) chain, announces new blocks and gossips
addresses. The "minimal" and "attacker" profiles keep a connection alive
with as little machinery as possible: they answer pings, and instead of
tracking chain state they bounce a received GETHEADERS straight back and
later mirror the HEADERS reply they get, which satisfies the peer's sync
check with zero protocol state. Attackers never volunteer data, which is
precisely what the eviction ranking punishes them for.

Timeout constants follow the reference behaviour: 60 s for a silent
handshake, pings every 120 s, a 20-minute inactivity cutoff, and a
two-minute deadline for a headers reply after a sync check.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from random import Random

from . import addrman, messages, transport
from .addrman import AddressRecord, AddrTables, ServiceFlags
from .netsim import Channel, Simulator
from .transport import (
    FallbackDecision,
    HandshakeState,
    Phase,
    Protocol,
    Role,
    TransportSession,
)

HANDSHAKE_TIMEOUT = 60.0
PING_INTERVAL = 120.0
INACTIVITY_TIMEOUT = 1200.0
SYNC_CHECK_INTERVAL = 1200.0
SYNC_REPLY_DEADLINE = 120.0
STALE_TIP_INTERVALS = 2  # headers older than this many block intervals are stale
FEELER_INTERVAL = 120.0
OUTBOUND_LOOP_INTERVAL = 30.0
ADDR_GOSSIP_INTERVAL = 600.0
RECONNECT_DELAY = 1.0


class Direction(enum.Enum):
    OUTBOUND = "outbound"
    INBOUND = "inbound"


@dataclass(frozen=True)
class BehaviorProfile:
    name: str
    responds_to_ping: bool
    echoes_getheaders: bool
    relays_data: bool


PROFILES = {
    "full": BehaviorProfile("full", True, False, True),
    "minimal": BehaviorProfile("minimal", True, True, False),
    "attacker": BehaviorProfile("attacker", True, True, False),
}


@dataclass
class NodeConfig:
    max_connections: int = 125
    outbound_slots: int = 10
    feeler_slots: int = 1
    c3c_no_retry: bool = False
    c6_threshold: int | None = None  # 90 or 95 (percent), None disables
    behavior: str = "full"
    supports_v2: bool = True
    user_agent: str = "Core"
    services: int = int(
        addrman.REQUIRED_OUTBOUND_FLAGS | ServiceFlags.NODE_P2P_V2
    )

    @property
    def inbound_capacity(self) -> int:
        return self.max_connections - self.outbound_slots - self.feeler_slots


@dataclass
class PeerInfo:
    remote_key: str
    direction: Direction
    channel: Channel
    address: AddressRecord | None = None
    protocol: Protocol | None = None
    handshake: HandshakeState | None = None
    session: TransportSession | None = None
    forced_v1: bool = False
    connected_at: float = 0.0
    established: bool = False
    established_at: float = 0.0
    user_agent: str = ""
    provides_data: bool = False
    last_recv: float = 0.0
    sent_version: bool = False
    got_version: bool = False
    got_verack: bool = False
    ping_timer: list | None = None
    handshake_timer: list | None = None
    sync_timer: list | None = None
    sync_deadline: list | None = None
    echoed_getheaders: bool = False
    remote_ip: str = ""

    @property
    def prefix_group(self) -> str:
        return addrman.prefix_group_of(self.remote_ip)


class Node:
    """One simulated peer. Owns its slots, addrman and transport sessions."""

    def __init__(
        self,
        sim: Simulator,
        ip: str,
        port: int = 8333,
        config: NodeConfig | None = None,
        tables: AddrTables | None = None,
        listening: bool = True,
    ):
        self.sim = sim
        self.ip = ip
        self.port = port
        self.key = f"{ip}:{port}"
        self.config = config or NodeConfig()
        self.profile = PROFILES[self.config.behavior]
        self.tables = tables if tables is not None else AddrTables()
        self.listening = listening
        self.rng = sim.rng_for(f"node/{self.key}")
        self.peers: dict[str, PeerInfo] = {}
        self._pending_outbound: dict[str, AddressRecord] = {}
        self._known_inv: set[bytes] = set()
        self.duplicate_prefix_rejections = 0
        self.disconnects: dict[str, int] = {}
        self.fallback_retries = 0
        self.fallback_giveups = 0
        sim.register(self)

    # -- slot accounting ----------------------------------------------------

    def outbound_count(self) -> int:
        live = sum(1 for p in self.peers.values() if p.direction is Direction.OUTBOUND)
        return live + len(self._pending_outbound)

    def inbound_count(self) -> int:
        return sum(1 for p in self.peers.values() if p.direction is Direction.INBOUND)

    def inbound_occupancy(self) -> float:
        cap = self.config.inbound_capacity
        return self.inbound_count() / cap if cap else 1.0

    def outbound_groups(self) -> list[str]:
        groups = [
            p.prefix_group for p in self.peers.values() if p.direction is Direction.OUTBOUND
        ]
        groups.extend(rec.prefix_group for rec in self._pending_outbound.values())
        return groups

    def start(self) -> None:
        """Kick off the periodic loops; call once after registration."""
        self.sim.schedule(self._jitter(OUTBOUND_LOOP_INTERVAL), self._outbound_loop)
        self.sim.schedule(self._jitter(FEELER_INTERVAL), self._feeler_tick)
        if self.profile.relays_data:
            self.sim.schedule(self._jitter(ADDR_GOSSIP_INTERVAL), self._gossip_tick)
            self.sim.schedule(
                self.sim.block_interval - (self.sim.now % self.sim.block_interval) + 0.5,
                self._block_tick,
            )

    def _jitter(self, interval: float) -> float:
        return interval * (0.5 + self.rng.random())

    # -- outbound connections ------------------------------------------------

    def _outbound_loop(self) -> None:
        self.sim.schedule(OUTBOUND_LOOP_INTERVAL, self._outbound_loop)
        self.try_fill_outbound()

    def try_fill_outbound(self) -> None:
        attempts = 0
        while self.outbound_count() < self.config.outbound_slots and attempts < 20:
            attempts += 1
            candidate = self.tables.select_candidate(self.rng)
            if candidate is None:
                return
            if candidate.key == self.key or candidate.key in self.peers:
                continue
            if candidate.key in self._pending_outbound:
                continue
            if not addrman.outbound_eligible(candidate, self.outbound_groups()):
                continue
            self.open_connection(candidate)

    def open_connection(self, record: AddressRecord, forced_v1: bool = False) -> None:
        self._pending_outbound[record.key] = record
        self.sim.connect(self.key, record.key, {"record": record, "forced_v1": forced_v1})

    def on_connect_failed(self, target_key: str, context: dict | None) -> None:
        self._pending_outbound.pop(target_key, None)

    def _feeler_tick(self) -> None:
        self.sim.schedule(FEELER_INTERVAL, self._feeler_tick)
        self.tables.feeler_tick(
            self.rng, lambda rec: self.sim.is_reachable(self.key, rec.key)
        )

    # -- inbound admission ----------------------------------------------------

    def on_inbound_request(self, from_key: str) -> bool:
        """Accept, reject, or evict-and-accept an incoming connection."""
        if not self.listening or from_key in self.peers:
            return False
        cfg = self.config
        from_ip = from_key.rsplit(":", 1)[0]
        if cfg.c6_threshold is not None:
            occupancy = 100.0 * self.inbound_occupancy()
            group = addrman.prefix_group_of(from_ip)
            have_group = any(
                p.prefix_group == group
                for p in self.peers.values()
                if p.direction is Direction.INBOUND
            )
            if have_group and occupancy >= cfg.c6_threshold:
                self.duplicate_prefix_rejections += 1
                self.sim.log(self.key, "inbound_rejected_prefix", source=from_key)
                return False
        if self.inbound_count() >= cfg.inbound_capacity:
            victim = self._eviction_candidate()
            if victim is None:
                return False
            self._disconnect(victim, "evicted")
        return True

    def _eviction_candidate(self) -> PeerInfo | None:
        inbound = [p for p in self.peers.values() if p.direction is Direction.INBOUND]
        if not inbound:
            return None
        ip_counts: dict[str, int] = {}
        for p in inbound:
            ip_counts[p.remote_ip] = ip_counts.get(p.remote_ip, 0) + 1
        # worst first: no data relayed, crowded source IP, youngest, stable tie
        inbound.sort(
            key=lambda p: (
                p.provides_data,
                -ip_counts[p.remote_ip],
                self.sim.now - p.connected_at,
                p.remote_key,
            )
        )
        return inbound[0]

    # -- connection lifecycle --------------------------------------------------

    def on_connection_established(self, channel: Channel, inbound: bool, context=None) -> None:
        remote_key = channel.other(self.key)
        context = context or {}
        record = context.get("record")
        if not inbound:
            self._pending_outbound.pop(remote_key, None)
        peer = PeerInfo(
            remote_key=remote_key,
            direction=Direction.INBOUND if inbound else Direction.OUTBOUND,
            channel=channel,
            address=record,
            forced_v1=bool(context.get("forced_v1")),
            connected_at=self.sim.now,
            last_recv=self.sim.now,
            remote_ip=remote_key.rsplit(":", 1)[0],
        )
        self.peers[remote_key] = peer
        if inbound:
            peer.handshake_timer = self.sim.schedule(
                HANDSHAKE_TIMEOUT, self._handshake_expired, remote_key
            )
            return
        use_v2 = (
            self.config.supports_v2
            and not peer.forced_v1
            and record is not None
            and record.has_flags(ServiceFlags.NODE_P2P_V2)
        )
        if use_v2:
            peer.protocol = Protocol.V2
            peer.handshake = HandshakeState(
                Role.INITIATOR, self.sim.rng_for(f"hs/{self.key}/{remote_key}/{channel.id}")
            )
            channel.send(self.key, peer.handshake.step(None), ("handshake",))
        else:
            peer.protocol = Protocol.V1
            peer.session = TransportSession(Protocol.V1, Role.INITIATOR)
            self._send_version(peer)

    def _handshake_expired(self, remote_key: str) -> None:
        peer = self.peers.get(remote_key)
        if peer is not None and not peer.established:
            self._disconnect(peer, "handshake_timeout")

    def on_channel_closed(self, channel: Channel, graceful: bool, reason: str = "") -> None:
        remote_key = channel.other(self.key)
        peer = self.peers.get(remote_key)
        if peer is None or peer.channel.id != channel.id:
            return
        self._forget_peer(peer)
        self.sim.log(
            self.key,
            "peer_closed",
            peer=remote_key,
            graceful=graceful,
            reason=reason,
            direction=peer.direction.value,
        )
        # a v2 attempt that died during key exchange may retry in plaintext
        if (
            peer.direction is Direction.OUTBOUND
            and peer.protocol is Protocol.V2
            and not peer.established
            and peer.handshake is not None
        ):
            decision = transport.v1_fallback_decision(
                peer.handshake.phase, self.config.c3c_no_retry
            )
            if decision is FallbackDecision.RETRY_V1 and peer.address is not None:
                self.fallback_retries += 1
                self.sim.log(self.key, "v1_retry", peer=remote_key)
                self.sim.schedule(
                    RECONNECT_DELAY, self.open_connection, peer.address, True
                )
            else:
                self.fallback_giveups += 1

    def _forget_peer(self, peer: PeerInfo) -> None:
        for timer in (peer.ping_timer, peer.handshake_timer, peer.sync_timer, peer.sync_deadline):
            if timer is not None:
                Simulator.cancel(timer)
        self.peers.pop(peer.remote_key, None)

    def _disconnect(self, peer: PeerInfo, reason: str) -> None:
        self.disconnects[reason] = self.disconnects.get(reason, 0) + 1
        self._forget_peer(peer)
        peer.channel.close(self.key, reason)
        self.sim.log(
            self.key,
            "disconnect",
            peer=peer.remote_key,
            reason=reason,
            direction=peer.direction.value,
        )

    # -- segments ---------------------------------------------------------------

    def on_segment(self, channel: Channel, data: bytes) -> None:
        remote_key = channel.other(self.key)
        peer = self.peers.get(remote_key)
        if peer is None or peer.channel.id != channel.id:
            return
        peer.last_recv = self.sim.now
        if peer.session is None or (
            peer.protocol is Protocol.V2 and peer.handshake is not None
            and peer.handshake.phase is not Phase.APPLICATION
        ):
            self._handshake_segment(peer, data)
            return
        try:
            msgs = peer.session.decode_segment(data)
        except transport.TransportError as exc:
            self.sim.log(
                self.key,
                "decode_failure",
                peer=remote_key,
                error=type(exc).__name__,
                detail=str(exc),
            )
            self._disconnect(peer, "decode_failure")
            return
        for msg in msgs:
            self._handle_message(peer, msg)

    def _handshake_segment(self, peer: PeerInfo, data: bytes) -> None:
        if peer.handshake_timer is not None:
            Simulator.cancel(peer.handshake_timer)
            peer.handshake_timer = None
        if peer.protocol is None:
            # responder sniffs the transport from the first bytes
            if data[:4] == messages.V1_MAGIC:
                peer.protocol = Protocol.V1
                peer.session = TransportSession(Protocol.V1, Role.RESPONDER)
                self.on_segment(peer.channel, data)
                return
            peer.protocol = Protocol.V2
            peer.handshake = HandshakeState(
                Role.RESPONDER,
                self.sim.rng_for(f"hs/{self.key}/{peer.remote_key}/{peer.channel.id}"),
            )
        try:
            reply = peer.handshake.step(data)
        except transport.TransportError as exc:
            self.sim.log(
                self.key, "handshake_failure", peer=peer.remote_key, error=type(exc).__name__
            )
            self._disconnect(peer, "handshake_failure")
            return
        if reply:
            peer.channel.send(self.key, reply, ("handshake",))
        if peer.handshake.phase is Phase.APPLICATION:
            peer.session = peer.handshake.session
            if peer.handshake.role is Role.INITIATOR:
                self._send_version(peer)

    # -- application messages -----------------------------------------------------

    def _send(self, peer: PeerInfo, msg: messages.Message) -> None:
        if peer.session is None:
            return
        wire = peer.session.encode_message(msg)
        peer.channel.send(self.key, wire, (msg.name,))

    def _send_version(self, peer: PeerInfo) -> None:
        peer.sent_version = True
        self._send(
            peer,
            messages.version(
                services=self.config.services,
                height=self.sim.chain_height(),
                nonce=self.rng.getrandbits(64),
                user_agent=self.config.user_agent,
            ),
        )

    def _handle_message(self, peer: PeerInfo, msg: messages.Message) -> None:
        t = msg.type_id
        if t == messages.MSG_VERSION:
            peer.got_version = True
            peer.user_agent = msg.user_agent
            if not peer.sent_version:
                self._send_version(peer)
            self._send(peer, messages.verack())
            self._maybe_established(peer)
        elif t == messages.MSG_VERACK:
            peer.got_verack = True
            self._maybe_established(peer)
        elif t == messages.MSG_PING:
            if self.profile.responds_to_ping:
                self._send(peer, messages.pong(msg.nonce))
        elif t == messages.MSG_PONG:
            pass  # any bytes received already refresh the inactivity clock
        elif t == messages.MSG_GETHEADERS:
            self._handle_getheaders(peer, msg)
        elif t == messages.MSG_HEADERS:
            self._handle_headers(peer, msg)
        elif t == messages.MSG_ADDR:
            self._handle_addr(peer, msg)
        elif t == messages.MSG_INV:
            # unsolicited announcements are what counts as providing data
            peer.provides_data = True
            if self.profile.relays_data:
                fresh = [(k, h) for k, h in msg.inv if h not in self._known_inv]
                if fresh:
                    self._known_inv.update(h for _, h in fresh)
                    self._send(peer, messages.getdata(fresh))
        # getdata, blocks and anything else are ignored by the model

    def _maybe_established(self, peer: PeerInfo) -> None:
        if peer.established or not (peer.got_version and peer.got_verack):
            return
        peer.established = True
        peer.established_at = self.sim.now
        peer.ping_timer = self.sim.schedule(PING_INTERVAL, self._keepalive, peer.remote_key)
        if peer.direction is Direction.OUTBOUND:
            if peer.address is not None:
                self.tables.mark_connected(peer.address, self.rng)
            if self.profile.relays_data:
                peer.sync_timer = self.sim.schedule(
                    SYNC_CHECK_INTERVAL, self._sync_check, peer.remote_key
                )
        self.sim.log(
            self.key,
            "peer_established",
            peer=peer.remote_key,
            direction=peer.direction.value,
            protocol=peer.protocol.value,
            user_agent=peer.user_agent,
        )

    # -- keepalive / sync -----------------------------------------------------------

    def _keepalive(self, remote_key: str) -> None:
        peer = self.peers.get(remote_key)
        if peer is None or not peer.established:
            return
        if self.sim.now - peer.last_recv > INACTIVITY_TIMEOUT:
            self._disconnect(peer, "inactivity")
            return
        peer.ping_timer = self.sim.schedule(PING_INTERVAL, self._keepalive, remote_key)
        self._send(peer, messages.ping(self.rng.getrandbits(64)))

    def _sync_check(self, remote_key: str) -> None:
        peer = self.peers.get(remote_key)
        if peer is None or not peer.established:
            return
        peer.sync_timer = self.sim.schedule(SYNC_CHECK_INTERVAL, self._sync_check, remote_key)
        if peer.sync_deadline is None:
            peer.sync_deadline = self.sim.schedule(
                SYNC_REPLY_DEADLINE, self._sync_expired, remote_key
            )
            self._send(peer, messages.getheaders(self._tip_hash()))

    def _sync_expired(self, remote_key: str) -> None:
        peer = self.peers.get(remote_key)
        if peer is None:
            return
        peer.sync_deadline = None
        self._disconnect(peer, "sync_timeout")

    def _tip_hash(self) -> bytes:
        return self.sim.chain_height().to_bytes(32, "little")

    def _tip_header(self) -> messages.BlockHeader:
        height = self.sim.chain_height()
        return messages.BlockHeader(
            height=height,
            prev_hash=(height - 1).to_bytes(32, "little", signed=True),
            merkle_root=bytes(32),
            timestamp=int(self.sim.tip_time()),
        )

    def _handle_getheaders(self, peer: PeerInfo, msg: messages.Message) -> None:
        if self.profile.echoes_getheaders:
            # bounce the identical request back; the peer answers it like any
            # other request and we mirror their HEADERS, passing their check
            peer.echoed_getheaders = True
            self._send(peer, msg)
        elif self.profile.relays_data:
            self._send(peer, messages.headers([self._tip_header()]))

    def _handle_headers(self, peer: PeerInfo, msg: messages.Message) -> None:
        if self.profile.echoes_getheaders:
            if peer.echoed_getheaders:
                peer.echoed_getheaders = False
                self._send(peer, msg)  # mirror of the peer's own reply
            return
        if not msg.headers or peer.sync_deadline is None:
            return
        Simulator.cancel(peer.sync_deadline)
        peer.sync_deadline = None
        tip = msg.headers[-1]
        stale = tip.timestamp < self.sim.now - STALE_TIP_INTERVALS * self.sim.block_interval
        if stale:
            self._disconnect(peer, "stale_headers")

    def _handle_addr(self, peer: PeerInfo, msg: messages.Message) -> None:
        relayer_group = peer.prefix_group
        for entry in msg.addrs:
            record = _record_from_entry(entry, self.sim.now)
            if record.key != self.key:
                self.tables.insert_from_addr_msg(record, relayer_group, self.rng)

    # -- gossip / chain -----------------------------------------------------------

    def _gossip_tick(self) -> None:
        self.sim.schedule(ADDR_GOSSIP_INTERVAL, self._gossip_tick)
        established = [p for p in self.peers.values() if p.established]
        if not established:
            return
        entries = []
        # advertise ourselves plus a small random sample of known addresses
        entries.append(self._self_entry())
        for _ in range(3):
            rec = self.tables.select_candidate(self.rng)
            if rec is not None:
                entries.append(_entry_from_record(rec))
        target = established[self.rng.randrange(len(established))]
        self._send(target, messages.addr(entries))

    def _self_entry(self) -> messages.AddrEntry:
        return _entry_from_record(
            AddressRecord(self.ip, self.port, self.config.services, self.sim.now)
        )

    def _block_tick(self) -> None:
        self.sim.schedule(self.sim.block_interval, self._block_tick)
        self._known_inv.add(self._tip_hash())
        announce = messages.inv([(2, self._tip_hash())])
        for peer in list(self.peers.values()):
            if peer.established:
                self._send(peer, announce)

    # -- external hooks -----------------------------------------------------------

    def send_addr(self, remote_key: str, entries) -> None:
        """Relay an ADDR message on an established connection (gossip API)."""
        peer = self.peers.get(remote_key)
        if peer is not None and peer.established:
            self._send(peer, messages.addr(list(entries)))

    def status_snapshot(self) -> dict:
        """JSON-able peer listing."""
        peers = []
        for key in sorted(self.peers):
            p = self.peers[key]
            peers.append(
                {
                    "peer": key,
                    "direction": p.direction.value,
                    "protocol": p.protocol.value if p.protocol else None,
                    "user_agent": p.user_agent,
                    "established": p.established,
                    "provides_data": p.provides_data,
                }
            )
        return {
            "node": self.key,
            "time": self.sim.now,
            "outbound": self.outbound_count(),
            "inbound": self.inbound_count(),
            "peers": peers,
        }


def _entry_from_record(rec: AddressRecord) -> messages.AddrEntry:
    import ipaddress

    packed = ipaddress.ip_address(rec.ip).packed
    if len(packed) == 4:
        packed = b"\x00" * 10 + b"\xff\xff" + packed  # v4-mapped
    return messages.AddrEntry(int(rec.last_seen), rec.services, packed, rec.port)


def _record_from_entry(entry: messages.AddrEntry, now: float) -> AddressRecord:
    import ipaddress

    ip = ipaddress.ip_address(entry.ip)
    if isinstance(ip, ipaddress.IPv6Address) and ip.ipv4_mapped:
        ip = ip.ipv4_mapped
    return AddressRecord(str(ip), entry.port, entry.services, now)
