"""Address manager: new/tried tables with prefix-group bucketing.

Gossiped addresses land in the new table, keyed by the address's /16 (or
/32 for IPv6) prefix group and the relayer's group; one address may be
referenced from up to eight buckets. Successfully connected addresses move
to the tried table and lose all new-table references. Selection draws the
two tables with equal probability, then uniformly within the chosen table
(reference-weighted for new). Service flags are taken at face value from
gossip; nothing verifies them, which is exactly the weakness the slot
occupation attack leans on.

Bucket geometry (1024x64 new, 256x64 tried) pins the new table at 2^16
references. Bucket indices come from SHA-256 so runs are reproducible
across processes.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
from dataclasses import dataclass, field, replace
from random import Random
from typing import Callable, Iterable, TextIO

NEW_BUCKET_COUNT = 1024
TRIED_BUCKET_COUNT = 256
BUCKET_SIZE = 64
NEW_CAPACITY = NEW_BUCKET_COUNT * BUCKET_SIZE  # 2^16
TRIED_CAPACITY = TRIED_BUCKET_COUNT * BUCKET_SIZE
MAX_NEW_REFS = 8


class ServiceFlags(enum.IntFlag):
    NONE = 0
    NODE_NETWORK = 1
    NODE_NETWORK_LIMITED = 2
    NODE_WITNESS = 4
    NODE_P2P_V2 = 8


# Flags a candidate must advertise before it is dialled as an outbound peer.
REQUIRED_OUTBOUND_FLAGS = (
    ServiceFlags.NODE_NETWORK
    | ServiceFlags.NODE_NETWORK_LIMITED
    | ServiceFlags.NODE_WITNESS
)


class AddrmanError(Exception):
    pass


@dataclass(frozen=True)
class AddressRecord:
    ip: str
    port: int
    services: int = 0
    last_seen: float = 0.0

    @property
    def key(self) -> str:
        return f"{self.ip}:{self.port}"

    @property
    def prefix_group(self) -> str:
        return prefix_group_of(self.ip)

    def has_flags(self, flags: int) -> bool:
        return (self.services & flags) == flags


def prefix_group_of(ip: str) -> str:
    addr = ipaddress.ip_address(ip)
    if addr.version == 4:
        return str(ipaddress.ip_network(f"{ip}/16", strict=False))
    return str(ipaddress.ip_network(f"{ip}/32", strict=False))


def default_routable(record: AddressRecord) -> bool:
    """Simulated routability: excludes obvious non-host addresses only."""
    addr = ipaddress.ip_address(record.ip)
    return not (
        addr.is_loopback or addr.is_multicast or addr.is_link_local or addr.is_unspecified
    )


def _bucket_index(domain: bytes, parts: Iterable[str], modulo: int) -> int:
    digest = hashlib.sha256(domain + b"|".join(p.encode() for p in parts)).digest()
    return int.from_bytes(digest[:8], "little") % modulo


def new_bucket_for(address_group: str, relayer_group: str) -> int:
    return _bucket_index(b"new|", (address_group, relayer_group), NEW_BUCKET_COUNT)


def tried_bucket_for(addr_key: str, address_group: str) -> int:
    return _bucket_index(b"tried|", (address_group, addr_key), TRIED_BUCKET_COUNT)


@dataclass
class AddrTables:
    """The two-table address store of one node. Single-owner mutable."""

    new_buckets: list = field(default_factory=lambda: [dict() for _ in range(NEW_BUCKET_COUNT)])
    tried_buckets: list = field(default_factory=lambda: [dict() for _ in range(TRIED_BUCKET_COUNT)])
    routable: Callable[[AddressRecord], bool] = default_routable

    def __post_init__(self):
        self._new_records: dict[str, AddressRecord] = {}
        self._new_ref_buckets: dict[str, dict[int, None]] = {}
        self._new_refs: list[tuple[int, str]] = []
        self._new_ref_pos: dict[tuple[int, str], int] = {}
        self._tried_records: dict[str, AddressRecord] = {}
        self._tried_keys: list[str] = []
        self._tried_pos: dict[str, int] = {}
        self._tried_bucket_of: dict[str, int] = {}

    # -- bookkeeping ------------------------------------------------------

    def _add_ref(self, bucket: int, record: AddressRecord) -> None:
        key = record.key
        self.new_buckets[bucket][key] = None
        self._new_ref_pos[(bucket, key)] = len(self._new_refs)
        self._new_refs.append((bucket, key))
        self._new_records[key] = record
        self._new_ref_buckets.setdefault(key, {})[bucket] = None

    def _drop_ref(self, bucket: int, key: str) -> None:
        del self.new_buckets[bucket][key]
        pos = self._new_ref_pos.pop((bucket, key))
        last = self._new_refs.pop()
        if pos < len(self._new_refs):
            self._new_refs[pos] = last
            self._new_ref_pos[last] = pos
        refs = self._new_ref_buckets[key]
        del refs[bucket]
        if not refs:
            del self._new_ref_buckets[key]
            del self._new_records[key]

    def _drop_all_refs(self, key: str) -> None:
        for bucket in list(self._new_ref_buckets.get(key, ())):
            self._drop_ref(bucket, key)

    def _tried_add(self, record: AddressRecord, rng: Random) -> None:
        key = record.key
        if key in self._tried_records:
            self._tried_records[key] = record
            return
        bucket = tried_bucket_for(key, record.prefix_group)
        members = self.tried_buckets[bucket]
        if len(members) >= BUCKET_SIZE:
            evicted = rng.choice(list(members))
            self._tried_remove(evicted)
        members[key] = None
        self._tried_records[key] = record
        self._tried_bucket_of[key] = bucket
        self._tried_pos[key] = len(self._tried_keys)
        self._tried_keys.append(key)

    def _tried_remove(self, key: str) -> None:
        bucket = self._tried_bucket_of.pop(key)
        del self.tried_buckets[bucket][key]
        del self._tried_records[key]
        pos = self._tried_pos.pop(key)
        last = self._tried_keys.pop()
        if pos < len(self._tried_keys):
            self._tried_keys[pos] = last
            self._tried_pos[last] = pos

    # -- counts -----------------------------------------------------------

    @property
    def new_reference_count(self) -> int:
        return len(self._new_refs)

    @property
    def new_address_count(self) -> int:
        return len(self._new_records)

    @property
    def tried_count(self) -> int:
        return len(self._tried_keys)

    def references_of(self, key: str) -> int:
        return len(self._new_ref_buckets.get(key, ()))

    def in_tried(self, key: str) -> bool:
        return key in self._tried_records

    def get(self, key: str) -> AddressRecord | None:
        return self._new_records.get(key) or self._tried_records.get(key)

    def distinct_prefix_groups(self) -> int:
        groups: dict[str, None] = {}
        for rec in self._new_records.values():
            groups[rec.prefix_group] = None
        for rec in self._tried_records.values():
            groups[rec.prefix_group] = None
        return len(groups)

    # -- operations -------------------------------------------------------

    def insert_from_addr_msg(
        self, record: AddressRecord, relayer_prefix_group: str, rng: Random
    ) -> bool:
        """Place a gossiped address into the new table; False when rejected."""
        if not self.routable(record):
            return False
        key = record.key
        if key in self._tried_records:
            self._tried_records[key] = replace(
                self._tried_records[key], last_seen=record.last_seen
            )
            return False
        bucket = new_bucket_for(record.prefix_group, relayer_prefix_group)
        if key in self.new_buckets[bucket]:
            self._new_records[key] = record
            return False
        if self.references_of(key) >= MAX_NEW_REFS:
            return False
        if len(self.new_buckets[bucket]) >= BUCKET_SIZE:
            evicted = rng.choice(list(self.new_buckets[bucket]))
            self._drop_ref(bucket, evicted)
        self._add_ref(bucket, record)
        return True

    def select_candidate(self, rng: Random) -> AddressRecord | None:
        """Draw new-or-tried 50/50 (falling back to the non-empty table),
        then a uniform entry within it; new-table draws are per reference."""
        have_new, have_tried = bool(self._new_refs), bool(self._tried_keys)
        if not have_new and not have_tried:
            return None
        use_tried = rng.random() < 0.5
        if use_tried and not have_tried:
            use_tried = False
        elif not use_tried and not have_new:
            use_tried = True
        if use_tried:
            return self._tried_records[rng.choice(self._tried_keys)]
        _, key = rng.choice(self._new_refs)
        return self._new_records[key]

    def mark_connected(self, record: AddressRecord, rng: Random | None = None) -> None:
        """Promote to tried, erasing every new-table reference."""
        rng = rng or Random(0)
        existing = self._new_records.get(record.key)
        if existing is not None:
            record = replace(existing, last_seen=max(existing.last_seen, record.last_seen))
        self._drop_all_refs(record.key)
        self._tried_add(record, rng)

    def remove_address(self, key: str) -> AddressRecord | None:
        """Erase an address from both tables (selection-consumes-entry mode)."""
        record = self.get(key)
        self._drop_all_refs(key)
        if key in self._tried_records:
            self._tried_remove(key)
        return record

    def feeler_tick(
        self, rng: Random, reachable: Callable[[AddressRecord], bool]
    ) -> AddressRecord | None:
        """Probe one random new-table address; promote it when reachable."""
        if not self._new_refs:
            return None
        _, key = rng.choice(self._new_refs)
        record = self._new_records[key]
        if reachable(record):
            self.mark_connected(record, rng)
            return record
        return None

    # -- persistence ------------------------------------------------------

    def dump(self, fh: TextIO) -> None:
        """Line-oriented snapshot: table, bucket, ip, port, flags."""
        for bucket, members in enumerate(self.new_buckets):
            for key in members:
                rec = self._new_records[key]
                fh.write(f"new {bucket} {rec.ip} {rec.port} {rec.services}\n")
        for key in self._tried_keys:
            rec = self._tried_records[key]
            fh.write(f"tried {self._tried_bucket_of[key]} {rec.ip} {rec.port} {rec.services}\n")

    @classmethod
    def load(cls, fh: TextIO, routable: Callable[[AddressRecord], bool] = default_routable) -> "AddrTables":
        tables = cls(routable=routable)
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            table, bucket, ip, port, flags = line.split()
            record = AddressRecord(ip, int(port), int(flags))
            if table == "new":
                b = int(bucket)
                key = record.key
                if key in tables.new_buckets[b] or tables.references_of(key) >= MAX_NEW_REFS:
                    continue
                if len(tables.new_buckets[b]) >= BUCKET_SIZE:
                    continue
                tables._add_ref(b, record)
            elif table == "tried":
                tables._tried_add(record, Random(0))
            else:
                raise AddrmanError(f"unknown table {table!r}")
        return tables


def outbound_eligible(
    candidate: AddressRecord,
    current_outbound_groups: Iterable[str],
    required_flags: int = REQUIRED_OUTBOUND_FLAGS,
    routable: Callable[[AddressRecord], bool] = default_routable,
) -> bool:
    """Outbound checks: fresh prefix group, advertised flags, routability.

    Flags are advertised values straight from gossip; there is no
    verification step, so they can be satisfied by anyone who claims them.
    """
    if candidate.prefix_group in set(current_outbound_groups):
        return False
    if not candidate.has_flags(required_flags):
        return False
    return routable(candidate)
