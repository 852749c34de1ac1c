"""Simulated directory authority network.

Generates a deterministic, self-consistent set of directory documents
(votes, consensuses in both flavors, detached signatures, bandwidth
lists, and per-relay descriptor triples) for a configurable number of
voting periods, and serves them over HTTP with the same URL layout and
time gating a real directory authority uses: votes appear only during
the voting window before a period starts, signatures only during the
distribution window, the consensus from its valid-after time.

Every request is recorded, which lets integration tests assert on who
asked whom for what and when. Authorities can be marked down, in which
case their listener accepts the TCP connection and drops it without
answering, and the attempt is logged with status 0.
"""

from __future__ import annotations

import base64
import gzip
import logging
import random
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from math import floor

from . import docparse
from .clock import Clock
from .docmodel import ConsensusTimings, DocType, fmt_ts

log = logging.getLogger("dircollect.simnet")


@dataclass(frozen=True)
class SimScenario:
    seed: int = 1
    n_authorities: int = 9
    n_relays: int = 40
    n_periods: int = 4
    period_start: datetime = None  # required
    period_seconds: int = 3600
    vote_seconds: int = 300
    dist_seconds: int = 300
    validity_periods: int = 3
    #: Period index whose ns consensus exists in two variants, or None.
    split_period: int | None = None
    split_minority: int = 4
    #: Authority indexes that never answer (connection dropped).
    down: frozenset = frozenset()


@dataclass(frozen=True)
class SimAuthority:
    index: int
    nickname: str
    identity: str
    signing: str
    address: str


@dataclass(frozen=True)
class SimRelay:
    index: int
    nickname: str
    fingerprint: str
    address: str


@dataclass(frozen=True)
class RequestRecord:
    server_id: str
    path: str
    at: datetime
    status: int


@dataclass
class PeriodDocs:
    index: int
    valid_after: datetime
    votes: dict = field(default_factory=dict)        # auth identity -> bytes
    bandwidths: dict = field(default_factory=dict)   # auth identity -> bytes
    sigs: dict = field(default_factory=dict)         # auth identity -> bytes
    consensus_ns: bytes = b""
    consensus_ns_alt: bytes | None = None            # minority variant if split
    consensus_md: bytes = b""
    server_descriptors: dict = field(default_factory=dict)  # sha1 -> bytes
    extra_infos: dict = field(default_factory=dict)          # sha1 -> bytes
    micros: dict = field(default_factory=dict)               # b64 sha256 -> bytes


def _fp_b64(hex40: str) -> str:
    return base64.b64encode(bytes.fromhex(hex40)).decode("ascii").rstrip("=")


class SimNetwork:
    def __init__(self, scenario: SimScenario, clock: Clock):
        if scenario.period_start is None:
            raise ValueError("scenario needs a period_start")
        if (scenario.split_period is not None
                and scenario.split_minority * 2 >= scenario.n_authorities):
            raise ValueError("split minority must be a true minority")
        self.scenario = scenario
        self.clock = clock
        self.request_log: list[RequestRecord] = []
        self._log_lock = threading.Lock()
        self.authorities = [self._make_authority(i) for i in range(scenario.n_authorities)]
        self.relays = [self._make_relay(i) for i in range(scenario.n_relays)]
        self.periods = [self._generate_period(k) for k in range(scenario.n_periods)]
        self._by_identity = {a.identity: a for a in self.authorities}
        self._sd_lookup: dict[str, bytes] = {}
        self._ei_lookup: dict[str, bytes] = {}
        self._micro_lookup: dict[str, bytes] = {}
        for period in self.periods:
            self._sd_lookup.update(period.server_descriptors)
            self._ei_lookup.update(period.extra_infos)
            self._micro_lookup.update(period.micros)
        self._servers: list[ThreadingHTTPServer] = []
        self._threads: list[threading.Thread] = []
        self.ports: dict[str, int] = {}

    # -- deterministic generation ----------------------------------------------

    def _rng(self, *parts) -> random.Random:
        return random.Random("|".join(str(p) for p in (self.scenario.seed,) + parts))

    def _hex40(self, *parts) -> str:
        return self._rng(*parts).randbytes(20).hex().upper()

    def _block(self, *parts, header: str = "SIGNATURE", nbytes: int = 128) -> str:
        enc = base64.b64encode(self._rng(*parts).randbytes(nbytes)).decode("ascii")
        lines = [enc[i : i + 64] for i in range(0, len(enc), 64)]
        return (
            f"-----BEGIN {header}-----\n"
            + "\n".join(lines)
            + f"\n-----END {header}-----\n"
        )

    def _b64(self, *parts, nbytes: int = 32) -> str:
        raw = self._rng(*parts).randbytes(nbytes)
        return base64.b64encode(raw).decode("ascii").rstrip("=")

    def _make_authority(self, i: int) -> SimAuthority:
        return SimAuthority(
            index=i,
            nickname=f"auth{i}",
            identity=self._hex40("auth", i, "identity"),
            signing=self._hex40("auth", i, "signing"),
            address=f"10.0.0.{i + 1}",
        )

    def _make_relay(self, i: int) -> SimRelay:
        return SimRelay(
            index=i,
            nickname=f"relay{i:03d}",
            fingerprint=self._hex40("relay", i, "identity"),
            address=f"10.1.{i // 256}.{i % 256}",
        )

    def period_time(self, k: int) -> datetime:
        return self.scenario.period_start + timedelta(
            seconds=k * self.scenario.period_seconds
        )

    def timings(self, k: int) -> ConsensusTimings:
        sc = self.scenario
        t = self.period_time(k)
        return ConsensusTimings(
            valid_after=t,
            fresh_until=t + timedelta(seconds=sc.period_seconds),
            valid_until=t + timedelta(seconds=sc.validity_periods * sc.period_seconds),
            vote_seconds=sc.vote_seconds,
            dist_seconds=sc.dist_seconds,
        )

    def _timing_header(self, k: int) -> str:
        tm = self.timings(k)
        return (
            f"valid-after {fmt_ts(tm.valid_after)}\n"
            f"fresh-until {fmt_ts(tm.fresh_until)}\n"
            f"valid-until {fmt_ts(tm.valid_until)}\n"
            f"voting-delay {tm.vote_seconds} {tm.dist_seconds}\n"
        )

    def _generate_period(self, k: int) -> PeriodDocs:
        sc = self.scenario
        t = self.period_time(k)
        period = PeriodDocs(index=k, valid_after=t)
        published = fmt_ts(t - timedelta(seconds=1800))

        relay_sd_sha1: dict[int, str] = {}
        relay_micro_b64: dict[int, str] = {}
        for relay in self.relays:
            ei = (
                f"extra-info {relay.nickname} {relay.fingerprint}\n"
                f"published {published}\n"
                f"write-history {published} (14400 s) "
                f"{','.join(str(self._rng(k, relay.index, 'wh', j).randrange(10**6)) for j in range(3))}\n"
                "router-signature\n" + self._block(k, relay.index, "ei-sig")
            ).encode("ascii")
            ei_digests = docparse.compute_digests(ei, DocType.ExtraInfoDescriptor)
            period.extra_infos[ei_digests.sha1_hex] = ei

            sd = (
                f"router {relay.nickname} {relay.address} 9001 0 9030\n"
                "platform Tor 0.4.8.10 on Linux\n"
                f"published {published}\n"
                "fingerprint "
                + " ".join(relay.fingerprint[i : i + 4] for i in range(0, 40, 4)) + "\n"
                f"uptime {86400 + k * 3600 + relay.index}\n"
                "bandwidth 1073741824 1073741824 52428800\n"
                f"extra-info-digest {ei_digests.sha1_hex} {ei_digests.sha256_base64}\n"
                "onion-key\n" + self._block(k, relay.index, "onion", header="RSA PUBLIC KEY", nbytes=140)
                + "signing-key\n" + self._block(k, relay.index, "signing", header="RSA PUBLIC KEY", nbytes=140)
                + "ntor-onion-key " + self._b64(k, relay.index, "ntor") + "\n"
                "reject *:*\n"
                "router-signature\n" + self._block(k, relay.index, "sd-sig")
            ).encode("ascii")
            sd_digests = docparse.compute_digests(sd, DocType.ServerDescriptor)
            period.server_descriptors[sd_digests.sha1_hex] = sd
            relay_sd_sha1[relay.index] = sd_digests.sha1_hex

            micro = (
                "onion-key\n" + self._block(k, relay.index, "md-onion", header="RSA PUBLIC KEY", nbytes=140)
                + "ntor-onion-key " + self._b64(k, relay.index, "md-ntor") + "\n"
                "id ed25519 " + self._b64(k, relay.index, "md-ed") + "\n"
                "p reject 25,119,135-139\n"
            ).encode("ascii")
            md_digests = docparse.compute_digests(micro, DocType.Microdescriptor)
            period.micros[md_digests.sha256_base64] = micro
            relay_micro_b64[relay.index] = md_digests.sha256_base64

        def r_line(relay: SimRelay) -> str:
            return (
                f"r {relay.nickname} {_fp_b64(relay.fingerprint)} "
                f"{_fp_b64(relay_sd_sha1[relay.index])} {published} "
                f"{relay.address} 9001 9030\n"
            )

        def r_line_md(relay: SimRelay) -> str:
            return (
                f"r {relay.nickname} {_fp_b64(relay.fingerprint)} {published} "
                f"{relay.address} 9001 9030\n"
            )

        flags = "s Fast Running Stable V2Dir Valid\n"
        known = "known-flags Authority Exit Fast Guard HSDir Running Stable V2Dir Valid\n"

        for auth in self.authorities:
            bw = (
                f"{int(t.timestamp()) - 600}\n"
                "version=1.4.0\n"
                "software=sbws\n"
                f"software_version=1.{auth.index}.0\n"
                "=====\n"
                + "".join(
                    f"bw={self._rng(k, auth.index, 'bw', r.index).randrange(500, 90000)}"
                    f" node_id=${r.fingerprint} nick={r.nickname}\n"
                    for r in self.relays
                )
            ).encode("ascii")
            period.bandwidths[auth.identity] = bw
            bw_b64 = docparse.compute_digests(bw, DocType.BandwidthList).sha256_base64

            vote = (
                "network-status-version 3\n"
                "vote-status vote\n"
                "consensus-methods 28 29 30 31 32\n"
                f"published {fmt_ts(t - timedelta(seconds=sc.vote_seconds + sc.dist_seconds))}\n"
                + self._timing_header(k)
                + known
                + f"bandwidth-file-digest sha256={bw_b64}\n"
                + f"dir-source {auth.nickname} {auth.identity} {auth.address} {auth.address} 80 443\n"
                + f"contact operator of {auth.nickname}\n"
                + "".join(
                    r_line(r) + flags
                    + f"v Tor 0.4.8.10\n"
                    + f"w Bandwidth={self._rng(k, auth.index, 'w', r.index).randrange(500, 90000)} Measured={self._rng(k, auth.index, 'm', r.index).randrange(500, 90000)}\n"
                    + f"m 28,29,30,31,32 sha256={relay_micro_b64[r.index]}\n"
                    for r in self.relays
                )
                + "directory-footer\n"
                + f"directory-signature {auth.identity} {auth.signing}\n"
                + self._block(k, auth.index, "vote-sig")
            ).encode("ascii")
            period.votes[auth.identity] = vote

        vote_digests = {
            identity: docparse.compute_digests(body, DocType.Vote).sha1_hex
            for identity, body in period.votes.items()
        }
        sources = "".join(
            f"dir-source {a.nickname} {a.identity} {a.address} {a.address} 80 443\n"
            f"contact operator of {a.nickname}\n"
            f"vote-digest {vote_digests[a.identity]}\n"
            for a in self.authorities
        )

        def ns_consensus(params: str, signers: list[SimAuthority]) -> bytes:
            return (
                "network-status-version 3\n"
                "vote-status consensus\n"
                "consensus-method 32\n"
                + self._timing_header(k)
                + known
                + f"params {params}\n"
                + sources
                + "".join(
                    r_line(r) + flags + "v Tor 0.4.8.10\n"
                    + f"w Bandwidth={self._rng(k, 'cons-w', r.index).randrange(500, 90000)}\n"
                    for r in self.relays
                )
                + "directory-footer\n"
                "bandwidth-weights Wbd=0 Wbe=0 Wbg=4273 Wbm=10000\n"
                + "".join(
                    f"directory-signature {a.identity} {a.signing}\n"
                    + self._block(k, a.index, "cons-sig", params)
                    for a in signers
                )
            ).encode("ascii")

        split = sc.split_period == k
        majority = self.authorities[: sc.n_authorities - sc.split_minority]
        minority = self.authorities[sc.n_authorities - sc.split_minority :]
        if split:
            period.consensus_ns = ns_consensus("circuitwindow=1000", majority)
            period.consensus_ns_alt = ns_consensus("circuitwindow=999", minority)
        else:
            period.consensus_ns = ns_consensus("circuitwindow=1000", self.authorities)

        period.consensus_md = (
            "network-status-version 3 microdesc\n"
            "vote-status consensus\n"
            "consensus-method 32\n"
            + self._timing_header(k)
            + known
            + sources
            + "".join(
                r_line_md(r) + f"m {relay_micro_b64[r.index]}\n" + flags
                + f"w Bandwidth={self._rng(k, 'cons-w', r.index).randrange(500, 90000)}\n"
                for r in self.relays
            )
            + "directory-footer\n"
            + "".join(
                f"directory-signature sha256 {a.identity} {a.signing}\n"
                + self._block(k, a.index, "md-cons-sig")
                for a in self.authorities
            )
        ).encode("ascii")

        ns_sha1 = docparse.compute_digests(period.consensus_ns, DocType.ConsensusNs).sha1_hex
        alt_sha1 = (
            docparse.compute_digests(period.consensus_ns_alt, DocType.ConsensusNs).sha1_hex
            if period.consensus_ns_alt else None
        )
        md_sha256 = docparse.compute_digests(period.consensus_md, DocType.ConsensusMicrodesc).sha256_hex

        for auth in self.authorities:
            signs_alt = split and auth in minority
            period.sigs[auth.identity] = (
                f"consensus-digest {alt_sha1 if signs_alt else ns_sha1}\n"
                + self._timing_header(k).replace(
                    f"voting-delay {sc.vote_seconds} {sc.dist_seconds}\n", ""
                )
                + f"additional-digest microdesc sha256 {md_sha256}\n"
                + f"additional-signature microdesc sha256 {auth.identity} {auth.signing}\n"
                + self._block(k, auth.index, "sig-add")
                + f"directory-signature {auth.identity} {auth.signing}\n"
                + self._block(k, auth.index, "sig-main")
            ).encode("ascii")

        return period

    # -- serving ----------------------------------------------------------------

    def start(self) -> None:
        for auth in self.authorities:
            server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
            server.daemon_threads = True
            server.sim = self
            server.sim_authority = auth
            thread = threading.Thread(
                target=server.serve_forever,
                kwargs={"poll_interval": 0.05},
                name=f"simnet-{auth.nickname}",
                daemon=True,
            )
            thread.start()
            self._servers.append(server)
            self._threads.append(thread)
            self.ports[auth.identity] = server.server_address[1]
        log.info("event=simnet_started authorities=%d", len(self.authorities))

    def stop(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)
        self._servers.clear()
        self._threads.clear()

    def endpoints(self) -> list[tuple[str, str]]:
        """(server_id, host:port) pairs for every authority."""
        return [
            (a.identity, f"127.0.0.1:{self.ports[a.identity]}")
            for a in self.authorities
        ]

    def is_down(self, identity: str, now: datetime) -> bool:
        auth = self._by_identity[identity]
        return auth.index in self.scenario.down

    def record(self, identity: str, path: str, status: int) -> None:
        rec = RequestRecord(identity, path, self.clock.now(), status)
        with self._log_lock:
            self.request_log.append(rec)

    def requests(self) -> list[RequestRecord]:
        with self._log_lock:
            return list(self.request_log)

    def _period_index(self, now: datetime) -> int | None:
        sc = self.scenario
        elapsed = (now - sc.period_start).total_seconds()
        if elapsed < 0:
            return None
        return floor(elapsed / sc.period_seconds)

    def respond(self, identity: str, path: str, now: datetime) -> bytes | None:
        auth = self._by_identity[identity]
        sc = self.scenario
        idx = self._period_index(now)

        if path in ("/tor/status-vote/current/consensus",
                    "/tor/status-vote/current/consensus-microdesc"):
            if idx is None:
                return None
            k = min(idx, sc.n_periods - 1)
            period = self.periods[k]
            if now >= self.timings(k).valid_until:
                return None
            if path.endswith("consensus-microdesc"):
                return period.consensus_md
            minority = auth.index >= sc.n_authorities - sc.split_minority
            if period.consensus_ns_alt is not None and minority:
                return period.consensus_ns_alt
            return period.consensus_ns

        if path in ("/tor/status-vote/next/authority",
                    "/tor/status-vote/next/consensus-signatures",
                    "/tor/status-vote/next/bandwidth"):
            if idx is None:
                nxt = 0
            else:
                nxt = idx + 1
            if nxt >= sc.n_periods:
                return None
            t_next = self.period_time(nxt)
            lead = (t_next - now).total_seconds()
            if path.endswith("authority"):
                if lead <= sc.vote_seconds + sc.dist_seconds:
                    return self.periods[nxt].votes[auth.identity]
            elif path.endswith("bandwidth"):
                if lead <= sc.vote_seconds + sc.dist_seconds:
                    return self.periods[nxt].bandwidths[auth.identity]
            else:
                if lead <= sc.dist_seconds:
                    return self.periods[nxt].sigs[auth.identity]
            return None

        if path.startswith("/tor/server/d/"):
            return self._digest_lookup(self._sd_lookup, path[len("/tor/server/d/"):], "+")
        if path.startswith("/tor/extra/d/"):
            return self._digest_lookup(self._ei_lookup, path[len("/tor/extra/d/"):], "+")
        if path.startswith("/tor/micro/d/"):
            return self._digest_lookup(self._micro_lookup, path[len("/tor/micro/d/"):], "-")

        if path in ("/tor/server/all", "/tor/extra/all"):
            if idx is None:
                return None
            period = self.periods[min(idx, sc.n_periods - 1)]
            table = (period.server_descriptors if path == "/tor/server/all"
                     else period.extra_infos)
            return b"".join(table.values())

        return None

    def _digest_lookup(self, table: dict, spec: str, sep: str) -> bytes | None:
        found = []
        for token in spec.split(sep):
            key = token.upper() if sep == "+" else token
            body = table.get(key)
            if body is not None:
                found.append(body)
        if not found:
            return None
        return b"".join(found)

    # -- what a collector should end up with ------------------------------------

    def expected_census(self, start: datetime, end: datetime) -> dict[DocType, set]:
        """Primary digests of every document a collector running over
        [start, end] should have archived, accounting for downed
        authorities and for windows that closed before the run began."""
        sc = self.scenario
        census: dict[DocType, set] = {t: set() for t in DocType}
        up = [a for a in self.authorities if a.index not in sc.down]
        majority = self.authorities[: sc.n_authorities - sc.split_minority]
        minority = self.authorities[sc.n_authorities - sc.split_minority :]
        start_idx = max(0, self._period_index(start) or 0)

        def primary(doctype, body):
            return docparse.compute_digests(body, doctype).primary_for(doctype)

        for k, period in enumerate(self.periods):
            t = self.period_time(k)
            if t > end:
                break
            if k >= start_idx and up:
                if period.consensus_ns_alt is None:
                    census[DocType.ConsensusNs].add(
                        primary(DocType.ConsensusNs, period.consensus_ns))
                else:
                    if any(a in up for a in majority):
                        census[DocType.ConsensusNs].add(
                            primary(DocType.ConsensusNs, period.consensus_ns))
                    if any(a in up for a in minority):
                        census[DocType.ConsensusNs].add(
                            primary(DocType.ConsensusNs, period.consensus_ns_alt))
                census[DocType.ConsensusMicrodesc].add(
                    primary(DocType.ConsensusMicrodesc, period.consensus_md))
                for table, doctype in (
                    (period.server_descriptors, DocType.ServerDescriptor),
                    (period.extra_infos, DocType.ExtraInfoDescriptor),
                    (period.micros, DocType.Microdescriptor),
                ):
                    for body in table.values():
                        census[doctype].add(primary(doctype, body))
            vote_open = t - timedelta(seconds=sc.vote_seconds + sc.dist_seconds)
            sig_open = t - timedelta(seconds=sc.dist_seconds)
            if vote_open >= start and t <= end:
                for auth in up:
                    census[DocType.Vote].add(
                        primary(DocType.Vote, period.votes[auth.identity]))
                    census[DocType.BandwidthList].add(
                        primary(DocType.BandwidthList, period.bandwidths[auth.identity]))
            if sig_open >= start and t <= end:
                for auth in up:
                    census[DocType.DetachedSignature].add(
                        primary(DocType.DetachedSignature, period.sigs[auth.identity]))
        return census


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self):  # noqa: N802 (http.server API)
        sim: SimNetwork = self.server.sim
        auth: SimAuthority = self.server.sim_authority
        now = sim.clock.now()
        path = self.path.split("?", 1)[0]

        if sim.is_down(auth.identity, now):
            sim.record(auth.identity, path, 0)
            self.close_connection = True
            return

        body = sim.respond(auth.identity, path, now)
        if body is None:
            sim.record(auth.identity, path, 404)
            self.send_response(404)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return

        sim.record(auth.identity, path, 200)
        payload = body
        encoding = None
        if "gzip" in self.headers.get("Accept-Encoding", ""):
            payload = gzip.compress(body)
            encoding = "gzip"
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        if encoding:
            self.send_header("Content-Encoding", encoding)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format, *args):
        pass
