"""In-process deterministic K-V store: the control-plane contract.

Provides get/put/delete, prefix fetch, prefix watch, leases, a distributed
lock, and a minimal transaction, all serialized through the virtual clock's
event queue.  The surface is deliberately etcd-shaped so an adapter to a real
external store could be attached later without touching callers; within the
simulator this implementation is authoritative.

Partitions are per client name: while a client is partitioned its operations
raise StoreUnavailable and its watches buffer events, which replay in
revision order on heal.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .netsim import VirtualClock

PUT = "put"
DELETE = "delete"


class StoreError(Exception):
    pass


class StoreUnavailable(StoreError):
    pass


class LeaseExpired(StoreError):
    pass


class LeaseNotFound(StoreError):
    pass


class CompactedRevision(StoreError):
    pass


class LockAbandoned(StoreError):
    pass


class ReentrantLock(StoreError):
    pass


@dataclass(frozen=True)
class KvEntry:
    key: str
    value: bytes
    lease_id: Optional[int]
    mod_revision: int


@dataclass(frozen=True)
class WatchEvent:
    kind: str  # PUT | DELETE
    entry: KvEntry
    revision: int


class Lease:
    def __init__(self, lease_id: int, ttl_ns: int, expires_at: int):
        self.lease_id = lease_id
        self.ttl_ns = ttl_ns
        self.expires_at = expires_at
        self.keys: set[str] = set()
        self.expired = False


class LockGuard:
    def __init__(self, name: str, lease_id: int, token: int):
        self.name = name
        self.lease_id = lease_id
        self.token = token
        self.released = False
        self.abandoned = False


class _NamedLock:
    def __init__(self, name: str):
        self.name = name
        self.holder: Optional[LockGuard] = None
        self.waiters: deque[tuple[int, Callable[[LockGuard], None]]] = deque()


class Watch:
    """Single-consumer event stream over one key prefix.

    With an on_event callback, events are pushed as they happen while the
    owning client is healthy; during a partition they buffer and replay on
    heal.  Without a callback, drain with take().
    """

    def __init__(self, store: "KvStore", watch_id: int, prefix: str,
                 client: Optional[str], on_event: Optional[Callable[[WatchEvent], None]]):
        self.store = store
        self.watch_id = watch_id
        self.prefix = prefix
        self.client = client
        self.on_event = on_event
        self.backlog: deque[WatchEvent] = deque()
        self.canceled = False

    def _client_healthy(self) -> bool:
        return self.client is None or self.client not in self.store.partitioned

    def _deliver(self, ev: WatchEvent) -> None:
        if self.canceled:
            return
        if self.on_event is not None and self._client_healthy():
            self.on_event(ev)
        else:
            self.backlog.append(ev)

    def _flush(self) -> None:
        while self.backlog and self.on_event is not None and not self.canceled:
            self.on_event(self.backlog.popleft())

    def take(self) -> list[WatchEvent]:
        """Drain buffered events; raises while the owning client is partitioned."""
        if not self._client_healthy():
            raise StoreUnavailable(f"client {self.client} is partitioned")
        out = list(self.backlog)
        self.backlog.clear()
        return out

    def cancel(self) -> None:
        self.canceled = True


class KvStore:
    """Deterministic single-process store bound to a virtual clock."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self.revision = 0
        self.entries: dict[str, KvEntry] = {}
        self.leases: dict[int, Lease] = {}
        self.watches: list[Watch] = []
        self.history: list[WatchEvent] = []
        self.compacted_floor = 0
        self.partitioned: set[str] = set()
        self.locks: dict[str, _NamedLock] = {}
        self._next_lease_id = 1
        self._next_watch_id = 1
        self._next_lock_token = 1

    def client(self, name: str, via: Optional["StoreHandle"] = None) -> "StoreHandle":
        return StoreHandle(self, name, via)

    # -- core K-V ----------------------------------------------------------

    def _emit(self, kind: str, entry: KvEntry) -> None:
        ev = WatchEvent(kind, entry, entry.mod_revision)
        self.history.append(ev)
        for watch in self.watches:
            if not watch.canceled and entry.key.startswith(watch.prefix):
                watch._deliver(ev)

    def _live_lease(self, lease_id: Optional[int]) -> Optional[Lease]:
        if lease_id is None:
            return None
        lease = self.leases.get(lease_id)
        if lease is None or lease.expired:
            raise LeaseExpired(f"lease {lease_id} is gone")
        if self.clock.now >= lease.expires_at:
            raise LeaseExpired(f"lease {lease_id} expired")
        return lease

    def put(self, key: str, value: bytes, lease_id: Optional[int] = None) -> int:
        if not key:
            raise ValueError("key must be non-empty")
        lease = self._live_lease(lease_id)
        old = self.entries.get(key)
        if old is not None and old.lease_id is not None and old.lease_id != lease_id:
            old_lease = self.leases.get(old.lease_id)
            if old_lease is not None:
                old_lease.keys.discard(key)
        self.revision += 1
        entry = KvEntry(key, bytes(value), lease_id, self.revision)
        self.entries[key] = entry
        if lease is not None:
            lease.keys.add(key)
        self._emit(PUT, entry)
        return self.revision

    def get(self, key: str) -> Optional[KvEntry]:
        return self.entries.get(key)

    def delete(self, key: str) -> bool:
        old = self.entries.pop(key, None)
        if old is None:
            return False
        if old.lease_id is not None:
            lease = self.leases.get(old.lease_id)
            if lease is not None:
                lease.keys.discard(key)
        self.revision += 1
        self._emit(DELETE, KvEntry(key, old.value, old.lease_id, self.revision))
        return True

    def get_prefix(self, prefix: str) -> list[KvEntry]:
        return [self.entries[k] for k in sorted(self.entries) if k.startswith(prefix)]

    def txn(self, compares: Iterable[tuple[str, Optional[int]]],
            puts: Iterable[tuple[str, bytes, Optional[int]]] = (),
            deletes: Iterable[str] = ()) -> bool:
        """Atomic compare-then-mutate: compares are (key, expected mod_revision),
        None meaning the key must be absent."""
        for key, expected in compares:
            entry = self.entries.get(key)
            actual = entry.mod_revision if entry is not None else None
            if actual != expected:
                return False
        for key, value, lease_id in puts:
            self.put(key, value, lease_id)
        for key in deletes:
            self.delete(key)
        return True

    # -- watches ------------------------------------------------------------

    def watch_prefix(self, prefix: str, from_revision: Optional[int] = None,
                     client: Optional[str] = None,
                     on_event: Optional[Callable[[WatchEvent], None]] = None) -> Watch:
        if from_revision is not None:
            if from_revision <= self.compacted_floor:
                raise CompactedRevision(
                    f"revision {from_revision} compacted (floor {self.compacted_floor})")
            if from_revision > self.revision + 1:
                raise ValueError(f"from_revision {from_revision} is in the future")
        watch = Watch(self, self._next_watch_id, prefix, client, on_event)
        self._next_watch_id += 1
        self.watches.append(watch)
        if from_revision is not None:
            for ev in self.history:
                if ev.revision >= from_revision and ev.entry.key.startswith(prefix):
                    watch._deliver(ev)
        return watch

    def compact(self, revision: int) -> None:
        self.compacted_floor = max(self.compacted_floor, revision)
        self.history = [ev for ev in self.history if ev.revision > self.compacted_floor]

    # -- leases ---------------------------------------------------------------

    def grant_lease(self, ttl_ns: int) -> Lease:
        if ttl_ns <= 0:
            raise ValueError("ttl must be positive")
        lease = Lease(self._next_lease_id, ttl_ns, self.clock.now + ttl_ns)
        self._next_lease_id += 1
        self.leases[lease.lease_id] = lease
        self.clock.call_at(lease.expires_at, lambda: self._expiry_check(lease.lease_id),
                           label=f"lease:{lease.lease_id}")
        return lease

    def keepalive(self, lease_id: int) -> int:
        lease = self.leases.get(lease_id)
        if lease is None or lease.expired or self.clock.now >= lease.expires_at:
            raise LeaseNotFound(f"lease {lease_id} not alive")
        lease.expires_at = self.clock.now + lease.ttl_ns
        return lease.expires_at

    def _expiry_check(self, lease_id: int) -> None:
        lease = self.leases.get(lease_id)
        if lease is None or lease.expired:
            return
        if self.clock.now < lease.expires_at:
            self.clock.call_at(lease.expires_at, lambda: self._expiry_check(lease_id),
                               label=f"lease:{lease_id}")
            return
        lease.expired = True
        del self.leases[lease_id]
        for key in sorted(lease.keys):
            entry = self.entries.get(key)
            if entry is not None and entry.lease_id == lease_id:
                self.delete(key)
        self._release_abandoned(lease_id)

    # -- locks ------------------------------------------------------------------

    def acquire_lock(self, name: str, lease_id: int,
                     granted: Callable[[LockGuard], None]) -> None:
        """FIFO lock tied to a session lease; granted() fires synchronously
        when the lock is free, otherwise when it becomes ours."""
        self._live_lease(lease_id)
        lock = self.locks.setdefault(name, _NamedLock(name))
        if lock.holder is not None and lock.holder.lease_id == lease_id:
            raise ReentrantLock(f"lease {lease_id} already holds {name}")
        if any(lid == lease_id for lid, _ in lock.waiters):
            raise ReentrantLock(f"lease {lease_id} already waiting for {name}")
        if lock.holder is None:
            guard = self._make_guard(name, lease_id)
            lock.holder = guard
            granted(guard)
        else:
            lock.waiters.append((lease_id, granted))

    def release_lock(self, guard: LockGuard) -> None:
        if guard.released:
            raise LockAbandoned(f"lock {guard.name} was already released")
        lock = self.locks[guard.name]
        guard.released = True
        lock.holder = None
        self._grant_next(lock)

    def _make_guard(self, name: str, lease_id: int) -> LockGuard:
        guard = LockGuard(name, lease_id, self._next_lock_token)
        self._next_lock_token += 1
        return guard

    def _grant_next(self, lock: _NamedLock) -> None:
        while lock.waiters:
            lease_id, cb = lock.waiters.popleft()
            try:
                self._live_lease(lease_id)
            except LeaseExpired:
                continue
            guard = self._make_guard(lock.name, lease_id)
            lock.holder = guard
            cb(guard)
            return

    def _release_abandoned(self, lease_id: int) -> None:
        for lock in self.locks.values():
            lock.waiters = deque((lid, cb) for lid, cb in lock.waiters if lid != lease_id)
            if lock.holder is not None and lock.holder.lease_id == lease_id:
                lock.holder.released = True
                lock.holder.abandoned = True
                lock.holder = None
                self._grant_next(lock)

    # -- partitions ----------------------------------------------------------------

    def set_partitioned(self, client: str, on: bool) -> None:
        if on:
            self.partitioned.add(client)
            return
        self.partitioned.discard(client)
        for watch in self.watches:
            if watch.client == client:
                watch._flush()

    def snapshot(self) -> dict[str, bytes]:
        return {k: self.entries[k].value for k in sorted(self.entries)}


class StoreHandle:
    """Per-client view of the store, optionally proxied through another handle.

    Every operation checks the partition state of the whole proxy chain.
    """

    def __init__(self, store: KvStore, name: str, via: Optional["StoreHandle"] = None):
        self.store = store
        self.name = name
        self.via = via

    def _check(self) -> None:
        handle: Optional[StoreHandle] = self
        while handle is not None:
            if handle.name in self.store.partitioned:
                raise StoreUnavailable(f"client {handle.name} is partitioned")
            handle = handle.via

    @property
    def available(self) -> bool:
        try:
            self._check()
            return True
        except StoreUnavailable:
            return False

    def put(self, key: str, value: bytes, lease_id: Optional[int] = None) -> int:
        self._check()
        return self.store.put(key, value, lease_id)

    def get(self, key: str) -> Optional[KvEntry]:
        self._check()
        return self.store.get(key)

    def delete(self, key: str) -> bool:
        self._check()
        return self.store.delete(key)

    def get_prefix(self, prefix: str) -> list[KvEntry]:
        self._check()
        return self.store.get_prefix(prefix)

    def txn(self, compares, puts=(), deletes=()) -> bool:
        self._check()
        return self.store.txn(compares, puts, deletes)

    def watch_prefix(self, prefix: str, from_revision: Optional[int] = None,
                     on_event: Optional[Callable[[WatchEvent], None]] = None) -> Watch:
        self._check()
        return self.store.watch_prefix(prefix, from_revision, client=self.name,
                                       on_event=on_event)

    def grant_lease(self, ttl_ns: int) -> Lease:
        self._check()
        return self.store.grant_lease(ttl_ns)

    def keepalive(self, lease_id: int) -> int:
        self._check()
        return self.store.keepalive(lease_id)

    def acquire_lock(self, name: str, lease_id: int, granted) -> None:
        self._check()
        self.store.acquire_lock(name, lease_id, granted)

    def release_lock(self, guard: LockGuard) -> None:
        self._check()
        self.store.release_lock(guard)

    @property
    def revision(self) -> int:
        return self.store.revision
