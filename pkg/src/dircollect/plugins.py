"""Pluggable document collectors and the host that drives them.

A plugin names the documents it wants (`expectations`) and knows how to
fetch them; the host owns every archive write and repeats the
expectations -> fetch -> store loop until a cycle stops producing new
documents. Two collectors ship in-tree: `relaydescs` for the directory
protocol and `onionperf` for daily measurement files.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable
from urllib.parse import urlsplit

from . import docparse
from .archive import Archive, ArchiveEntry
from .clock import Clock
from .docmodel import DigestSet, DocType, DocumentIdentifier, RawDocument
from .errors import CollectorError, FetchError, PermanentMiss, PluginInitError
from .fetcher import ONIONPERF_SIZES, Fetcher, ServerEndpoint
from .metrics import Metrics
from .refchecker import STARTING_TYPES, ReferenceChecker
from .scheduler import Phase, Scheduler

log = logging.getLogger("dircollect.plugins")

MAX_ROUNDS = 10

_BATCH_TYPES = frozenset({
    DocType.ServerDescriptor,
    DocType.ExtraInfoDescriptor,
    DocType.Microdescriptor,
})

FetchResult = list[tuple[DocumentIdentifier | None, RawDocument]]


@dataclass
class PluginContext:
    """Everything a plugin may lean on, assembled once by the service."""

    archive: Archive
    fetcher: Fetcher
    clock: Clock
    scheduler: Scheduler
    refchecker: ReferenceChecker | None = None
    servers: list[ServerEndpoint] = field(default_factory=list)
    settings: dict = field(default_factory=dict)
    metrics: Metrics = field(default_factory=Metrics)


class Plugin:
    """One document family: name what you want, fetch what you can.

    The host archives whatever `fetch_many` hands back; a pair may carry
    an explicit identifier when the plugin knows more about the document
    than its bytes do (e.g. which day a measurement file belongs to).
    """

    name = "plugin"
    host: "PluginHost | None" = None

    def expectations(self) -> list[DocumentIdentifier]:
        return []

    def fetch(self, docid: DocumentIdentifier) -> list[RawDocument]:
        raise NotImplementedError

    def fetch_many(
        self, docids: list[DocumentIdentifier]
    ) -> tuple[FetchResult, list[DocumentIdentifier]]:
        pairs: FetchResult = []
        unfetched: list[DocumentIdentifier] = []
        for docid in docids:
            try:
                docs = self.fetch(docid)
            except FetchError as exc:
                log.info("event=fetch_failed plugin=%s doc=%s error=%r",
                         self.name, docid.key(), exc)
                unfetched.append(docid)
                continue
            if len(docs) == 1:
                pairs.append((docid, docs[0]))
            elif docs:
                pairs.extend((None, raw) for raw in docs)
            else:
                unfetched.append(docid)
        return pairs, unfetched

    def admit(self, raw: RawDocument, entry: ArchiveEntry) -> None:
        """Called by the host once for each newly archived document."""

    def register_jobs(self, scheduler: Scheduler) -> None:
        """Hook for plugins that want scheduler time."""

    def run_once(self) -> int:
        """One unscheduled collection pass; returns documents stored."""
        if self.host is None:
            return 0
        return self.host.run_cycle(self)


class PluginHost:
    """Owns archive writes; plugins only produce documents."""

    def __init__(self, archive: Archive, metrics: Metrics | None = None):
        self.archive = archive
        self.metrics = metrics or Metrics()

    def store(self, plugin: Plugin, raw: RawDocument,
              ident: DocumentIdentifier | None = None) -> bool:
        """Archive one document; returns True when it was new."""
        new = self.archive.find_by_digests(raw.digests) is None
        entry = self.archive.store(raw, ident)
        if new:
            self.metrics.incr(f"plugins.{plugin.name}.archived")
            try:
                plugin.admit(raw, entry)
            except Exception as exc:  # a bad document must not kill the cycle
                log.warning("event=admit_failed plugin=%s path=%s error=%r",
                            plugin.name, entry.path, exc)
        return new

    def run_cycle(self, plugin: Plugin, max_rounds: int = MAX_ROUNDS) -> int:
        """Drive one plugin to a fixed point; returns new documents stored.

        Each round re-asks the plugin what is still missing, so documents
        discovered by earlier rounds (a vote referencing descriptors, a
        descriptor referencing its extra-info) get picked up before the
        cycle ends. A round that archives nothing new ends the cycle.
        """
        total = 0
        for _ in range(max_rounds):
            pending = [
                docid for docid in plugin.expectations()
                if not self.archive.contains(docid)
            ]
            if not pending:
                break
            pairs, unfetched = plugin.fetch_many(pending)
            fresh = sum(
                1 for ident, raw in pairs if self.store(plugin, raw, ident)
            )
            if unfetched:
                log.info("event=cycle_unfetched plugin=%s count=%d",
                         plugin.name, len(unfetched))
            total += fresh
            if fresh == 0:
                break
        self.metrics.incr(f"plugins.{plugin.name}.cycles")
        return total


# --- the directory-protocol collector ----------------------------------------


class RelayDescsPlugin(Plugin):
    """Consensuses, votes, signatures, descriptors and bandwidth files.

    Wires four download behaviours onto the scheduler: a bootstrap fetch
    of the current consensus, eager per-authority fetches of next-period
    votes and detached signatures, a periodic reference-check cycle, and
    (off unless configured) a greedy sweep of everything each authority
    volunteers. Every digest-addressed attempt goes through the
    reference checker's per-phase attempt ledger, so no (document,
    server) pair is asked twice within one phase.
    """

    name = "relaydescs"

    def __init__(self, context: PluginContext):
        if context.refchecker is None:
            raise PluginInitError("relaydescs needs a reference checker")
        if not context.servers:
            raise PluginInitError("relaydescs needs at least one directory server")
        self.archive = context.archive
        self.fetcher = context.fetcher
        self.clock = context.clock
        self.scheduler = context.scheduler
        self.refchecker = context.refchecker
        self.servers = list(context.servers)
        self.metrics = context.metrics
        self.host: PluginHost | None = None
        tasks = context.settings.get("tasks", {})
        check = tasks.get("reference_check", {})
        self.check_interval = float(check.get("interval_seconds", 30.0))
        greedy = tasks.get("greedy_discovery", {})
        self.greedy_enabled = bool(greedy.get("enabled", False))
        self.greedy_interval = float(greedy.get("interval_seconds", 3600.0))
        voting = context.settings.get("voting", {})
        self.assumed_delays = (
            int(voting.get("assumed_vote_seconds", 300)),
            int(voting.get("assumed_dist_seconds", 300)),
        )

    # -- scheduling ----------------------------------------------------------

    def register_jobs(self, scheduler: Scheduler) -> None:
        scheduler.add_bootstrap(self.bootstrap_and_check)
        scheduler.add_eager_votes(self.eager_votes)
        scheduler.add_eager_signatures(self.eager_signatures)
        scheduler.add_interval("reference-check", self.check_references,
                               self.check_interval)
        if self.greedy_enabled:
            scheduler.add_interval("greedy-discovery", self.greedy_discovery,
                                   self.greedy_interval)

    def bootstrap(self) -> None:
        """First consensus; raising lets the scheduler back off and retry."""
        if self.scheduler.timings is not None:
            return
        assert self.host is not None
        failures = 0
        for server in self._authorities():
            try:
                raw = self.fetcher.fetch_current_consensus(server)
            except FetchError as exc:
                log.info("event=bootstrap_attempt_failed server=%s error=%r",
                         server.server_id, exc)
                failures += 1
                continue
            if raw.doctype not in (DocType.ConsensusNs, DocType.ConsensusMicrodesc):
                failures += 1
                continue
            self.host.store(self, raw)
            try:
                self.scheduler.set_timings(docparse.extract_timings(
                    docparse.parse(raw), *self.assumed_delays))
            except CollectorError as exc:
                log.warning("event=bootstrap_bad_consensus server=%s error=%r",
                            server.server_id, exc)
                failures += 1
                continue
            return
        raise FetchError(f"bootstrap failed against {failures} authorities")

    def bootstrap_and_check(self):
        """Scheduled bootstrap: chase the fresh consensus's references right
        away instead of waiting out the next reference-check slot."""
        self.bootstrap()
        self.host.run_cycle(self)

    def eager_votes(self) -> None:
        self._fetch_period_guesses({DocType.Vote})

    def eager_signatures(self) -> None:
        self._fetch_period_guesses({DocType.DetachedSignature})

    def check_references(self) -> None:
        assert self.host is not None
        if self.scheduler.timings is None:
            # bootstrap owns discovery (with its own backoff) until a
            # first consensus exists; probing here would double up on it
            return
        self.refchecker.prune()
        self.host.run_cycle(self)

    def run_once(self) -> int:
        assert self.host is not None
        try:
            self.bootstrap()
        except FetchError as exc:
            log.warning("event=bootstrap_failed error=%r", exc)
            return 0
        self.refchecker.prune()
        return self.host.run_cycle(self)

    def greedy_discovery(self) -> None:
        """Sweep each authority's voluntary listings once, no retries."""
        assert self.host is not None
        for doctype in (DocType.ExtraInfoDescriptor, DocType.ServerDescriptor):
            for server in self._authorities():
                if doctype is DocType.ExtraInfoDescriptor and not server.serves_extra_info():
                    continue
                for raw in self.fetcher.fetch_all_descriptors(server, doctype):
                    self.host.store(self, raw)

    def _fetch_period_guesses(self, types: set[DocType]) -> None:
        assert self.host is not None
        timings = self.scheduler.timings
        if timings is None:
            return
        wanted = [
            guess for guess in
            self.refchecker.guess_period_documents(self.clock.now(), timings)
            if guess.doctype in types
        ]
        pairs, _ = self.fetch_many(wanted)
        for ident, raw in pairs:
            self.host.store(self, raw, ident)

    # -- the plugin contract --------------------------------------------------

    def expectations(self) -> list[DocumentIdentifier]:
        now = self.clock.now()
        guesses = self.refchecker.guess_period_documents(
            now, self.scheduler.timings)
        return guesses + self.refchecker.expectations(now)

    def fetch_many(self, docids):
        pairs: FetchResult = []
        unfetched: list[DocumentIdentifier] = []
        batches: dict[DocType, list[DocumentIdentifier]] = {}
        singles: list[DocumentIdentifier] = []
        for docid in docids:
            if docid.doctype in _BATCH_TYPES and not docid.digests.empty:
                batches.setdefault(docid.doctype, []).append(docid)
            else:
                singles.append(docid)
        for doctype, group in batches.items():
            docs, left = self.fetcher.fetch_batch(
                doctype, group, self._preference(), gate=self._gate)
            pairs.extend((None, raw) for raw in docs)
            unfetched.extend(left)
        for docid in singles:
            try:
                docs = self.fetch(docid)
            except FetchError as exc:
                log.info("event=fetch_failed plugin=%s doc=%s error=%r",
                         self.name, docid.key(), exc)
                unfetched.append(docid)
                continue
            if docs:
                pairs.extend((None, raw) for raw in docs)
            else:
                unfetched.append(docid)
        return pairs, unfetched

    def fetch(self, docid: DocumentIdentifier) -> list[RawDocument]:
        t = docid.doctype
        if t is DocType.Vote:
            return self._fetch_from_authority(docid, self.fetcher.fetch_next_vote)
        if t is DocType.DetachedSignature:
            return self._fetch_from_authority(
                docid, self.fetcher.fetch_detached_signatures)
        if t is DocType.BandwidthList:
            if not self._bandwidth_window_open(docid):
                return []
            return self._fetch_from_authority(
                docid, self.fetcher.fetch_next_bandwidth)
        if t in (DocType.ConsensusNs, DocType.ConsensusMicrodesc):
            if docid.digests.empty:
                return self._fetch_current(docid)
            return self._fetch_consensus_by_digest(docid)
        if t in _BATCH_TYPES:
            docs, _ = self.fetcher.fetch_batch(
                t, [docid], self._preference(), gate=self._gate)
            return docs
        raise FetchError(f"relaydescs cannot fetch {docid.key()}")

    def admit(self, raw: RawDocument, entry: ArchiveEntry) -> None:
        if raw.doctype not in STARTING_TYPES:
            return
        try:
            parsed = docparse.parse(raw)
        except CollectorError as exc:
            log.warning("event=admit_parse_failed path=%s error=%r",
                        entry.path, exc)
            return
        ident = DocumentIdentifier(
            entry.doctype, entry.subject, entry.doc_datetime, entry.digests)
        self.refchecker.add_starting_point(parsed, ident=ident)
        if raw.doctype in (DocType.ConsensusNs, DocType.ConsensusMicrodesc):
            try:
                self.scheduler.set_timings(
                    docparse.extract_timings(parsed, *self.assumed_delays))
            except CollectorError as exc:
                log.warning("event=timings_rejected path=%s error=%r",
                            entry.path, exc)

    # -- fetch strategies ------------------------------------------------------

    def _fetch_from_authority(
        self, docid: DocumentIdentifier,
        method: Callable[[ServerEndpoint], RawDocument],
    ) -> list[RawDocument]:
        server = self._endpoint_for(docid.subject)
        if server is None:
            raise FetchError(f"no endpoint for {docid.subject[:16]}")
        if not self._gate(docid, server.server_id):
            return []
        return [method(server)]

    def _fetch_current(self, docid: DocumentIdentifier) -> list[RawDocument]:
        """A consensus we know only by period: any one server will do."""
        for server in self._preference():
            if not self._gate(docid, server.server_id):
                continue
            try:
                return [self.fetcher.fetch_current_consensus(server, docid.doctype)]
            except FetchError as exc:
                log.info("event=consensus_fetch_failed server=%s error=%r",
                         server.server_id, exc)
        return []

    def _fetch_consensus_by_digest(
        self, docid: DocumentIdentifier
    ) -> list[RawDocument]:
        """Hunt a specific consensus variant across servers.

        Servers may disagree about the current consensus (a vote split),
        so every response is kept for archiving even when it is not the
        one asked for; the hunt stops at the first digest match.

        Attempts are recorded against the period, not the digest: every
        hunt for this flavor and period asks the same URL, and a server's
        answer to it will not change within a phase.
        """
        if docid.datetime is not None and self.clock.now() < docid.datetime:
            return []  # not published yet; keep the per-phase attempts
        if self.archive.find_by_digests(docid.digests) is not None:
            return []  # arrived since the cycle's to-do list was drawn up
        period_docid = DocumentIdentifier(docid.doctype, "", docid.datetime)
        docs: list[RawDocument] = []
        for server in self._preference():
            if not self._gate(period_docid, server.server_id):
                continue
            try:
                raw = self.fetcher.fetch_current_consensus(server, docid.doctype)
            except FetchError:
                continue
            docs.append(raw)
            if _digests_overlap(raw.digests, docid.digests):
                break
        return docs

    def _bandwidth_window_open(self, docid: DocumentIdentifier) -> bool:
        # next/bandwidth is only served during the voting window before
        # the referencing vote's valid-after; outside it, save the attempt.
        timings = self.scheduler.timings
        if docid.datetime is None or timings is None:
            return True
        opens = docid.datetime - timedelta(
            seconds=timings.vote_seconds + timings.dist_seconds)
        return opens <= self.clock.now() < docid.datetime

    # -- plumbing ---------------------------------------------------------------

    def _gate(self, docid: DocumentIdentifier, server_id: str) -> bool:
        return self.refchecker.record_attempt(
            docid, server_id, self.scheduler.phase_token())

    def _authorities(self) -> list[ServerEndpoint]:
        return [s for s in self.servers if s.is_authority]

    def _preference(self) -> list[ServerEndpoint]:
        """Server order for the current phase.

        Right after a consensus appears we behave like a directory cache
        and sync straight from the authorities; later in the period we
        behave like a client and spare them where caches exist.
        """
        if self.scheduler.phase() is Phase.Alpha:
            return self._authorities() or list(self.servers)
        caches = [s for s in self.servers if not s.is_authority]
        return caches + self._authorities()

    def _endpoint_for(self, fingerprint: str) -> ServerEndpoint | None:
        for server in self.servers:
            if server.server_id.upper() == fingerprint.upper():
                return server
        return None


def _digests_overlap(have: DigestSet, want: DigestSet) -> bool:
    for attr in ("sha1_hex", "sha256_hex", "sha256_base64"):
        wanted = getattr(want, attr)
        if wanted is not None and wanted == getattr(have, attr):
            return True
    return False


# --- the measurement collector -----------------------------------------------


class OnionPerfPlugin(Plugin):
    """Daily `.tpf` files from measurement hosts.

    Each day's files are collected the morning after; a missing file is
    retried on later days while it is still fresh, but a 404 means it
    will never exist and is never asked for again.
    """

    name = "onionperf"
    RETAIN_DAYS = 3

    def __init__(self, context: PluginContext):
        settings = context.settings.get("onionperf", {})
        self.hosts: dict[str, str] = {}
        for item in settings.get("hosts", []):
            if isinstance(item, str):
                hostname = urlsplit(item).hostname or ""
                source = hostname.split(".")[0] or item
                self.hosts[source] = item
            else:
                self.hosts[str(item["source"])] = str(item["url"])
        if not self.hosts:
            raise PluginInitError("onionperf enabled with no hosts")
        self.sizes = tuple(int(s) for s in settings.get("sizes", ONIONPERF_SIZES))
        self.daily_at = str(settings.get("daily_at", "00:15"))
        self.archive = context.archive
        self.fetcher = context.fetcher
        self.clock = context.clock
        self.metrics = context.metrics
        self.host: PluginHost | None = None
        self._missed: set[str] = set()
        self._lock = threading.Lock()

    def register_jobs(self, scheduler: Scheduler) -> None:
        scheduler.add_daily("onionperf", self.collect, at=self.daily_at)

    def collect(self) -> None:
        assert self.host is not None
        self.host.run_cycle(self)

    def expectations(self) -> list[DocumentIdentifier]:
        today = self.clock.now().date()
        out: list[DocumentIdentifier] = []
        for source in sorted(self.hosts):
            for size in self.sizes:
                for back in range(1, self.RETAIN_DAYS + 1):
                    ident = self._ident(source, size,
                                        today - timedelta(days=back))
                    with self._lock:
                        if ident.key() in self._missed:
                            continue
                    if not self.archive.contains(ident):
                        out.append(ident)
        return out

    def fetch(self, docid: DocumentIdentifier) -> list[RawDocument]:
        source, _, size = docid.subject.rpartition("-")
        base = self.hosts.get(source)
        if base is None or docid.datetime is None:
            raise FetchError(f"unroutable measurement {docid.key()}")
        try:
            raw = self.fetcher.fetch_onionperf(
                base, source, int(size), docid.datetime.date())
        except PermanentMiss:
            with self._lock:
                self._missed.add(docid.key())
            self.metrics.incr("onionperf.permanent_misses")
            log.info("event=permanent_miss doc=%s", docid.key())
            raise
        return [raw]

    def permanently_missed_count(self) -> int:
        with self._lock:
            return len(self._missed)

    @staticmethod
    def _ident(source: str, size: int, day) -> DocumentIdentifier:
        when = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
        return DocumentIdentifier(DocType.TorperfResults,
                                  f"{source}-{size}", when)


# --- registry -----------------------------------------------------------------

BUILTIN: dict[str, type[Plugin]] = {
    "relaydescs": RelayDescsPlugin,
    "onionperf": OnionPerfPlugin,
}


def discover(names: list[str], context: PluginContext,
             host: PluginHost) -> list[Plugin]:
    """Instantiate the named plugins; a broken one never stops the rest.

    Unknown names raise immediately (a config typo should not fail
    silently), but a plugin whose constructor blows up is logged,
    counted and skipped.
    """
    plugins: list[Plugin] = []
    for name in names:
        cls = BUILTIN.get(name)
        if cls is None:
            raise PluginInitError(f"unknown plugin {name!r}")
        try:
            plugin = cls(context)
        except Exception as exc:
            context.metrics.incr("plugins.init_failures")
            log.error("event=plugin_init_failed plugin=%s error=%r", name, exc)
            continue
        plugin.host = host
        plugins.append(plugin)
    return plugins
