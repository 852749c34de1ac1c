"""Reference checking: what should exist, what to fetch, what was tried.

Holds the starting-point documents (votes, consensuses, detached
signatures) fetched in the last three hours, walks their references to
produce download expectations, guesses period documents that should
exist by now from the consensus timing alone, and keeps the one-attempt
ledger that stops a (document, server) pair being asked twice in the
same downloader phase.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from math import floor

from . import docparse
from .archive import Archive
from .clock import Clock
from .docmodel import (
    ConsensusTimings,
    DocType,
    DocumentIdentifier,
    fmt_ts,
)
from .errors import WrongDocType
from .metrics import Metrics

log = logging.getLogger("dircollect.refchecker")

STARTING_TYPES = frozenset({
    DocType.Vote,
    DocType.ConsensusNs,
    DocType.ConsensusMicrodesc,
    DocType.DetachedSignature,
})

STARTING_POINT_WINDOW = timedelta(hours=3)

#: Output ordering of expectations. Consensus digests (referenced by
#: detached signatures) come first since everything else hangs off them,
#: then bandwidth lists, then the descriptors, then documents referenced
#: by descriptors.
_EXPECT_ORDER = {
    DocType.ConsensusNs: 0,
    DocType.ConsensusMicrodesc: 1,
    DocType.BandwidthList: 2,
    DocType.ServerDescriptor: 3,
    DocType.Microdescriptor: 4,
    DocType.ExtraInfoDescriptor: 5,
}
_ORDER_COUNT = 6


@dataclass(frozen=True)
class _StartingPoint:
    ident: DocumentIdentifier
    parsed: docparse.ParsedDocument
    added_at: datetime


@dataclass(frozen=True)
class _Guess:
    ident: DocumentIdentifier
    window_end: datetime


class ReferenceChecker:
    def __init__(
        self,
        archive: Archive,
        clock: Clock,
        authorities: list[str] | None = None,
        metrics: Metrics | None = None,
    ):
        self.archive = archive
        self.clock = clock
        self.authorities = list(authorities or [])
        self.metrics = metrics or Metrics()
        self._lock = threading.RLock()
        self._points: dict[str, _StartingPoint] = {}
        self._guessed: dict[str, _Guess] = {}
        self._missed: set[str] = set()
        self._attempts: set[tuple[str, str]] = set()
        self._phase_tag: object = None
        self._extra_info_refs: dict[str, DocumentIdentifier | None] = {}

    # -- starting points ------------------------------------------------------

    def add_starting_point(
        self,
        parsed: docparse.ParsedDocument,
        now: datetime | None = None,
        ident: DocumentIdentifier | None = None,
    ) -> None:
        if parsed.doctype not in STARTING_TYPES:
            raise WrongDocType(f"{parsed.doctype} is not a starting point type")
        if ident is None:
            raw = docparse.make_raw(
                parsed.source_bytes, "starting-point", now or self.clock.now(),
                parsed.doctype,
            )
            ident = docparse.identify(raw, parsed)
        key = ident.key()
        with self._lock:
            if key in self._points:
                return
            self._points[key] = _StartingPoint(ident, parsed, now or self.clock.now())
            self.metrics.set_gauge("refchecker.starting_points", len(self._points))
        log.info("event=starting_point type=%s key=%s", parsed.doctype.value, key[:16])

    def load_from_archive(self, now: datetime | None = None) -> int:
        """Re-seed starting points from the last 3 h of archived statuses."""
        now = now or self.clock.now()
        loaded = 0
        for entry in self.archive.entries():
            if entry.doctype not in STARTING_TYPES:
                continue
            if now - entry.stored_at > STARTING_POINT_WINDOW:
                continue
            try:
                raw = self.archive.load_entry(entry)
                parsed = docparse.parse(raw)
            except Exception as exc:
                log.warning("event=starting_point_unloadable path=%s error=%r",
                            entry.path, exc)
                continue
            ident = DocumentIdentifier(
                entry.doctype, entry.subject, entry.doc_datetime, entry.digests
            )
            self.add_starting_point(parsed, now=entry.stored_at, ident=ident)
            loaded += 1
        return loaded

    def prune(self, now: datetime | None = None) -> int:
        now = now or self.clock.now()
        with self._lock:
            stale = [
                key for key, point in self._points.items()
                if now - point.added_at > STARTING_POINT_WINDOW
            ]
            for key in stale:
                del self._points[key]
            self.metrics.set_gauge("refchecker.starting_points", len(self._points))
        return len(stale)

    def starting_point_count(self) -> int:
        with self._lock:
            return len(self._points)

    # -- guessing period documents ---------------------------------------------

    def guess_period_documents(
        self,
        now: datetime | None = None,
        timings: ConsensusTimings | None = None,
    ) -> list[DocumentIdentifier]:
        """Digest-less identifiers for period documents that should exist.

        Consensus flavors are guessed for the period containing now once
        the known consensus is stale; votes and detached signatures are
        guessed for the upcoming period while the protocol actually
        serves them (the voting window and the distribution window).
        Documents whose window closes unfetched become permanent misses.
        """
        now = now or self.clock.now()
        if timings is None:
            return [DocumentIdentifier(DocType.ConsensusNs, "", None)]
        period = timings.period_seconds
        elapsed = (now - timings.valid_after).total_seconds()
        current_start = timings.valid_after + timedelta(
            seconds=floor(elapsed / period) * period
        )
        next_start = current_start + timedelta(seconds=period)
        validity = timings.valid_until - timings.valid_after
        out: list[DocumentIdentifier] = []

        def consider(ident: DocumentIdentifier, window_end: datetime) -> None:
            key = ident.key()
            with self._lock:
                if key in self._missed:
                    return
            if self.archive.contains(ident):
                with self._lock:
                    self._guessed.pop(key, None)
                return
            with self._lock:
                self._guessed.setdefault(key, _Guess(ident, window_end))
            out.append(ident)

        for flavor in (DocType.ConsensusNs, DocType.ConsensusMicrodesc):
            consider(
                DocumentIdentifier(flavor, "", current_start),
                current_start + validity,
            )
        vote_open = next_start - timedelta(
            seconds=timings.vote_seconds + timings.dist_seconds
        )
        if now >= vote_open:
            for auth in self.authorities:
                consider(DocumentIdentifier(DocType.Vote, auth, next_start), next_start)
        sig_open = next_start - timedelta(seconds=timings.dist_seconds)
        if now >= sig_open:
            for auth in self.authorities:
                consider(
                    DocumentIdentifier(DocType.DetachedSignature, auth, next_start),
                    next_start,
                )
        self._expire_guesses(now)
        return out

    def _expire_guesses(self, now: datetime) -> None:
        with self._lock:
            expired = [
                (key, guess) for key, guess in self._guessed.items()
                if now >= guess.window_end
            ]
            for key, guess in expired:
                del self._guessed[key]
                if not self.archive.contains(guess.ident):
                    self._missed.add(key)
                    self.metrics.incr("refchecker.permanently_missed")
                    log.info("event=permanently_missed key=%s", key)

    def note_missed(self, ident: DocumentIdentifier) -> None:
        """Record a miss decided elsewhere (e.g. an HTTP 404 that is final)."""
        with self._lock:
            if ident.key() in self._missed:
                return
            self._missed.add(ident.key())
        self.metrics.incr("refchecker.permanently_missed")

    def is_missed(self, ident: DocumentIdentifier) -> bool:
        with self._lock:
            return ident.key() in self._missed

    def permanently_missed_count(self) -> int:
        with self._lock:
            return len(self._missed)

    # -- expectations -------------------------------------------------------------

    def expectations(self, now: datetime | None = None) -> list[DocumentIdentifier]:
        """Everything referenced but not archived, in fetch order:
        bandwidth lists, then server descriptors, then microdescriptors,
        then extra-info descriptors."""
        now = now or self.clock.now()
        buckets: dict[int, dict[str, DocumentIdentifier]] = {
            i: {} for i in range(_ORDER_COUNT)
        }
        with self._lock:
            points = list(self._points.values())
        for point in points:
            for ref in docparse.extract_references(point.parsed, self.metrics):
                order = _EXPECT_ORDER.get(ref.doctype)
                if order is None:
                    continue
                buckets[order].setdefault(ref.key(), ref)
        for ref in self._extra_info_expectations(now):
            buckets[_EXPECT_ORDER[DocType.ExtraInfoDescriptor]].setdefault(ref.key(), ref)
        pending = [
            ident
            for order in range(_ORDER_COUNT)
            for ident in buckets[order].values()
            if self.archive.find_by_digests(ident.digests) is None
        ]
        self.metrics.set_gauge("refchecker.expectations_pending", len(pending))
        return pending

    def _extra_info_expectations(self, now: datetime) -> list[DocumentIdentifier]:
        """extra-info references of server descriptors stored in the window."""
        out = []
        for entry in self.archive.entries():
            if entry.doctype is not DocType.ServerDescriptor:
                continue
            if now - entry.stored_at > STARTING_POINT_WINDOW:
                continue
            key = entry.digests.sha1_hex or entry.path
            if key not in self._extra_info_refs:
                ref = None
                try:
                    raw = self.archive.load_entry(entry)
                    refs = docparse.extract_references(docparse.parse(raw), self.metrics)
                    ref = next(
                        (r for r in refs if r.doctype is DocType.ExtraInfoDescriptor),
                        None,
                    )
                except Exception as exc:
                    log.warning("event=descriptor_unparseable path=%s error=%r",
                                entry.path, exc)
                self._extra_info_refs[key] = ref
            if self._extra_info_refs[key] is not None:
                out.append(self._extra_info_refs[key])
        return out

    # -- attempt ledger --------------------------------------------------------------

    def record_attempt(self, docid: DocumentIdentifier, server_id: str, phase) -> bool:
        """True exactly once per (document, server) per phase.

        ``phase`` is any equality-comparable tag; a change of tag clears
        the ledger, which is how "until the next phase" is enforced.
        Documents are keyed by digest when they have one and by their
        period identity otherwise, so guessed documents are gated too.
        """
        key = (docid.key(), server_id)
        with self._lock:
            if phase != self._phase_tag:
                self._attempts.clear()
                self._phase_tag = phase
                log.info("event=phase_change phase=%r", phase)
            if key in self._attempts:
                return False
            self._attempts.add(key)
            return True

    def reset_phase(self, new_phase) -> None:
        with self._lock:
            self._attempts.clear()
            self._phase_tag = new_phase
