"""Directory service: latest-value cache, query routing, federation.

Latest queries hit the cache while it is fresh, then the longest-prefix
live provider (agents preferred over archives; a child directory means the
query federates down with a hop cap). Historical queries always delegate to
an archive. When a provider is registered but unreachable, a stale cache
cell may be served, explicitly flagged, instead of going silent.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from fabmon.core import Clock, MetricSample, ResourcePath
from fabmon.directory.registry import InvalidTTL, Registry
from fabmon.wire.client import ConnectionLost, LatestResult, UpstreamError, WireClient
from fabmon.wire.session import RequestError, WireHandler, WireServer

log = logging.getLogger(__name__)

MAX_HOPS = 8
FRESHNESS_CAP_S = 300


class UpstreamUnreachable(RuntimeError):
    """A live registration exists but the fetch failed."""


class NoProvider(UpstreamUnreachable):
    """No live registration covers the queried path."""


class HopLimitExceeded(RuntimeError):
    pass


@dataclass
class CacheCell:
    sample: MetricSample
    fetched_at: int  # unix ms
    freshness_ttl: int  # seconds

    def fresh(self, now: int) -> bool:
        return now < self.fetched_at + self.freshness_ttl * 1000


Dialer = Callable[[str], object]  # endpoint -> channel


class DirectoryService(WireHandler):
    def __init__(
        self,
        clock: Clock,
        dial: Dialer,
        name: str = "directory",
        freshness_ttls: dict[str, int] | None = None,
        freshness_cap_s: int = FRESHNESS_CAP_S,
    ):
        self.clock = clock
        self.dial = dial
        self.registry = Registry()
        self.server = WireServer(self, clock, name=name)
        self.freshness_ttls = dict(freshness_ttls or {})
        self.freshness_cap_s = freshness_cap_s
        self._cache: dict[tuple[str, str], CacheCell] = {}
        self._cache_lock = threading.Lock()
        self._inflight: dict[tuple[str, str], threading.Event] = {}
        self._local = threading.local()  # keys this thread is already fetching
        self.upstream_fetches = 0

    # -- cache -------------------------------------------------------------

    def _freshness_for(self, sample: MetricSample) -> int:
        ttl = self.freshness_ttls.get(sample.metric, sample.ttl)
        return max(1, min(ttl, self.freshness_cap_s))

    def _cache_get(self, key: tuple[str, str], now: int) -> tuple[Optional[CacheCell], bool]:
        """(cell, fresh) - the cell may be stale but usable as a fallback."""
        with self._cache_lock:
            cell = self._cache.get(key)
        if cell is None:
            return None, False
        return cell, cell.fresh(now)

    def _cache_put(self, key: tuple[str, str], sample: MetricSample, now: int) -> None:
        cell = CacheCell(sample, now, self._freshness_for(sample))
        with self._cache_lock:
            self._cache[key] = cell

    # -- upstream fetches ----------------------------------------------------

    def _fetch_latest(self, endpoint: str, path: ResourcePath, metric: str, hops: int) -> LatestResult:
        self.upstream_fetches += 1
        try:
            channel = self.dial(endpoint)
        except (ConnectionError, OSError, TimeoutError) as exc:
            raise UpstreamUnreachable(f"dial {endpoint}: {exc}") from exc
        try:
            client = WireClient(channel, role="consumer", name=self.server.name)
            return client.query_latest(path, metric, hops=hops)
        except UpstreamError as exc:
            if exc.code == "hop_limit":
                raise HopLimitExceeded(exc.message) from exc
            raise UpstreamUnreachable(f"{endpoint}: {exc}") from exc
        except (ConnectionLost, ConnectionError, OSError, TimeoutError) as exc:
            raise UpstreamUnreachable(f"{endpoint}: {exc}") from exc
        finally:
            try:
                channel.close()
            except Exception:
                pass

    def _fetch_range(self, endpoint, path, metric, t0, t1, hops) -> list[MetricSample]:
        self.upstream_fetches += 1
        try:
            channel = self.dial(endpoint)
        except (ConnectionError, OSError, TimeoutError) as exc:
            raise UpstreamUnreachable(f"dial {endpoint}: {exc}") from exc
        try:
            client = WireClient(channel, role="consumer", name=self.server.name)
            return client.query_range(path, metric, t0, t1, hops=hops)
        except UpstreamError as exc:
            if exc.code == "hop_limit":
                raise HopLimitExceeded(exc.message) from exc
            if exc.code == "invalid_range":
                raise ValueError(exc.message) from exc
            raise UpstreamUnreachable(f"{endpoint}: {exc}") from exc
        except (ConnectionLost, ConnectionError, OSError, TimeoutError) as exc:
            raise UpstreamUnreachable(f"{endpoint}: {exc}") from exc
        finally:
            try:
                channel.close()
            except Exception:
                pass

    # -- queries -------------------------------------------------------------

    def _keys_in_flight_here(self) -> set:
        keys = getattr(self._local, "keys", None)
        if keys is None:
            keys = self._local.keys = set()
        return keys

    def query_latest(self, path: ResourcePath, metric: str, hops: int = 0) -> LatestResult:
        """Latest value for (path, metric): cache, then provider, then stale."""
        if hops > MAX_HOPS:
            raise HopLimitExceeded(f"query for {path}/{metric} exceeded {MAX_HOPS} hops")
        now = self.clock.now()
        key = (str(path), metric)
        cell, fresh = self._cache_get(key, now)
        if fresh:
            return LatestResult(cell.sample, stale=False, source="cache")

        # coalesce concurrent upstream fetches for one key, but never block on
        # our own fetch (federation cycles re-enter on the same thread)
        local = self._keys_in_flight_here()
        coalesce = key not in local
        if coalesce:
            with self._cache_lock:
                waiter = self._inflight.get(key)
                if waiter is None:
                    self._inflight[key] = threading.Event()
            if waiter is not None:
                waiter.wait(timeout=30)
                now = self.clock.now()
                cell, fresh = self._cache_get(key, now)
                if fresh:
                    return LatestResult(cell.sample, stale=False, source="cache")
                with self._cache_lock:
                    if key not in self._inflight:
                        self._inflight[key] = threading.Event()

        local.add(key)
        try:
            entry = self.registry.resolve(path, ("agent", "archive", "directory"), now)
            if entry is None:
                return LatestResult(None)
            next_hops = hops + 1 if entry.provider_kind == "directory" else hops
            try:
                result = self._fetch_latest(entry.endpoint, path, metric, next_hops)
            except UpstreamUnreachable:
                if cell is not None:
                    log.warning("serving stale %s/%s: upstream %s unreachable",
                                path, metric, entry.endpoint)
                    return LatestResult(cell.sample, stale=True, source="cache")
                raise
            if result.sample is not None and not result.stale:
                self._cache_put(key, result.sample, self.clock.now())
            if result.sample is None:
                return LatestResult(None)
            return LatestResult(result.sample, stale=result.stale, source="upstream")
        finally:
            local.discard(key)
            if coalesce:
                with self._cache_lock:
                    event = self._inflight.pop(key, None)
                if event is not None:
                    event.set()

    def query_history(self, path: ResourcePath, metric: str, t0: int, t1: int,
                      hops: int = 0) -> list[MetricSample]:
        """Historical samples, always from an archive, never the cache."""
        if hops > MAX_HOPS:
            raise HopLimitExceeded(f"history for {path}/{metric} exceeded {MAX_HOPS} hops")
        if t0 > t1:
            raise ValueError(f"t0 {t0} > t1 {t1}")
        now = self.clock.now()
        entry = self.registry.resolve(path, ("archive", "directory"), now)
        if entry is None:
            raise NoProvider(f"no archive covers {path}")
        next_hops = hops + 1 if entry.provider_kind == "directory" else hops
        return self._fetch_range(entry.endpoint, path, metric, t0, t1, next_hops)

    def trigger_probe(self, path: ResourcePath, metric: str) -> MetricSample:
        """Ask the owning agent directly, bypassing the archive; refills cache."""
        now = self.clock.now()
        entry = self.registry.resolve(path, ("agent",), now)
        if entry is None:
            raise NoProvider(f"no agent registration covers {path}")
        result = self._fetch_latest(entry.endpoint, path, metric, 0)
        if result.sample is None:
            raise UpstreamUnreachable(f"agent {entry.endpoint} has no sample for {path}/{metric}")
        self._cache_put((str(path), metric), result.sample, self.clock.now())
        return result.sample

    def sweep(self) -> int:
        return len(self.registry.sweep(self.clock.now()))

    def registry_dump(self) -> list[dict]:
        now = self.clock.now()
        return [
            {
                "subtree": str(e.subtree),
                "kind": e.provider_kind,
                "endpoint": e.endpoint,
                "ttl": e.ttl,
                "registered_at": e.registered_at,
                "expires_at": e.expires_at,
            }
            for e in self.registry.live_entries(now)
        ]

    # -- wire handler ----------------------------------------------------------

    def on_register(self, subtree, kind, endpoint, ttl):
        try:
            return self.registry.register(subtree, kind, endpoint, ttl, self.clock.now())
        except InvalidTTL as exc:
            raise RequestError("invalid_ttl", str(exc)) from None

    def on_renew(self, subtree, kind, endpoint, ttl):
        try:
            return self.registry.renew(subtree, kind, endpoint, ttl, self.clock.now())
        except InvalidTTL as exc:
            raise RequestError("invalid_ttl", str(exc)) from None

    def on_deregister(self, subtree, endpoint):
        return self.registry.deregister(subtree, endpoint)

    def on_query_latest(self, path, metric, hops):
        try:
            result = self.query_latest(path, metric, hops)
        except HopLimitExceeded as exc:
            raise RequestError("hop_limit", str(exc)) from None
        except UpstreamUnreachable as exc:
            raise RequestError("upstream_unreachable", str(exc)) from None
        return (result.sample, result.stale, result.source)

    def on_query_range(self, path, metric, t0, t1, hops):
        try:
            return self.query_history(path, metric, t0, t1, hops)
        except HopLimitExceeded as exc:
            raise RequestError("hop_limit", str(exc)) from None
        except NoProvider as exc:
            raise RequestError("no_provider", str(exc)) from None
        except UpstreamUnreachable as exc:
            raise RequestError("upstream_unreachable", str(exc)) from None
        except ValueError as exc:
            raise RequestError("invalid_range", str(exc)) from None
