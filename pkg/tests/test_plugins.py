"""Plugin host and built-in collector tests against the simulated network."""

import threading
from collections import Counter
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from types import SimpleNamespace

import pytest

from dircollect import docparse
from dircollect.archive import Archive
from dircollect.clock import ManualClock
from dircollect.docmodel import DocType, DocumentIdentifier, RawDocument
from dircollect.errors import PluginInitError
from dircollect.fetcher import Fetcher, Role, ServerEndpoint
from dircollect.metrics import Metrics
from dircollect.plugins import (
    OnionPerfPlugin,
    Plugin,
    PluginContext,
    PluginHost,
    RelayDescsPlugin,
    discover,
)
from dircollect.refchecker import ReferenceChecker
from dircollect.scheduler import Phase, Scheduler, phase_token
from dircollect.simnet import SimNetwork, SimScenario


def ts(hour, minute=0, second=0, day=15):
    return datetime(2018, 11, day, hour, minute, second, tzinfo=timezone.utc)


@pytest.fixture
def clock():
    return ManualClock(ts(19, 5))


def build_rig(tmp_path, clock, net, settings=None):
    archive = Archive(tmp_path / "data", clock)
    metrics = Metrics()
    scheduler = Scheduler(clock, metrics)
    refchecker = ReferenceChecker(
        archive, clock,
        authorities=[identity for identity, _ in net.endpoints()],
        metrics=metrics,
    )
    host = PluginHost(archive, metrics)
    servers = [
        ServerEndpoint(identity, addr, frozenset({Role.Authority}))
        for identity, addr in net.endpoints()
    ]
    context = PluginContext(
        archive=archive,
        fetcher=Fetcher(clock, metrics=metrics, timeout=5.0),
        clock=clock,
        scheduler=scheduler,
        refchecker=refchecker,
        servers=servers,
        settings=settings or {},
        metrics=metrics,
    )
    (plugin,) = discover(["relaydescs"], context, host)
    return SimpleNamespace(
        archive=archive, metrics=metrics, scheduler=scheduler,
        refchecker=refchecker, host=host, context=context, plugin=plugin,
    )


def archived_digests(archive):
    out = {}
    for entry in archive.entries():
        if entry.doctype is None:
            continue
        out.setdefault(entry.doctype, set()).add(
            entry.digests.primary_for(entry.doctype))
    return out


def assert_census(net, archive, start, end):
    census = net.expected_census(start, end)
    got = archived_digests(archive)
    for doctype in DocType:
        assert got.get(doctype, set()) == census[doctype], doctype


def assert_digest_requests_unique(net, timings):
    """No digest was asked of the same server twice within one phase."""
    seen = Counter()
    routes = {"/tor/server/d/": "+", "/tor/extra/d/": "+", "/tor/micro/d/": "-"}
    for rec in net.requests():
        for prefix, sep in routes.items():
            if rec.path.startswith(prefix):
                for token in rec.path[len(prefix):].split(sep):
                    seen[(rec.server_id, token, phase_token(rec.at, timings))] += 1
    repeats = {k: n for k, n in seen.items() if n > 1}
    assert not repeats


# --- host mechanics, no network ------------------------------------------------


def junk_doc(n, now):
    body = b"junk %d\n" % n
    return RawDocument(None, body, "toy", now, docparse.compute_digests(body, None))


class _ToyPlugin(Plugin):
    name = "toy"

    def __init__(self, clock):
        self.clock = clock
        self.rounds = 0
        self.admitted = []
        self.explode_on_admit = False

    def expectations(self):
        self.rounds += 1
        return [DocumentIdentifier(None, f"round-{self.rounds}", None)]

    def fetch(self, docid):
        return [junk_doc(self.rounds, self.clock.now())]

    def admit(self, raw, entry):
        if self.explode_on_admit:
            raise RuntimeError("bad admit")
        self.admitted.append(entry.path)


class TestPluginHost:
    def test_cycle_stops_at_round_cap(self, tmp_path, clock):
        host = PluginHost(Archive(tmp_path / "data", clock))
        toy = _ToyPlugin(clock)
        stored = host.run_cycle(toy, max_rounds=3)
        assert stored == 3
        assert toy.rounds == 3

    def test_cycle_stops_without_progress(self, tmp_path, clock):
        host = PluginHost(Archive(tmp_path / "data", clock))
        toy = _ToyPlugin(clock)
        toy.fetch = lambda docid: []
        assert host.run_cycle(toy) == 0
        assert toy.rounds == 1

    def test_store_deduplicates_and_admits_once(self, tmp_path, clock):
        host = PluginHost(Archive(tmp_path / "data", clock))
        toy = _ToyPlugin(clock)
        raw = junk_doc(1, clock.now())
        assert host.store(toy, raw) is True
        assert host.store(toy, raw) is False
        assert len(toy.admitted) == 1

    def test_admit_errors_do_not_escape(self, tmp_path, clock):
        host = PluginHost(Archive(tmp_path / "data", clock))
        toy = _ToyPlugin(clock)
        toy.explode_on_admit = True
        assert host.store(toy, junk_doc(2, clock.now())) is True


class TestDiscovery:
    def test_unknown_plugin_name_raises(self, tmp_path, clock):
        archive = Archive(tmp_path / "data", clock)
        context = PluginContext(
            archive=archive, fetcher=Fetcher(clock), clock=clock,
            scheduler=Scheduler(clock),
        )
        with pytest.raises(PluginInitError):
            discover(["nonsense"], context, PluginHost(archive))

    def test_broken_plugin_is_skipped_not_fatal(self, tmp_path, clock):
        # relaydescs cannot start without a reference checker or servers;
        # the registry logs it and moves on.
        archive = Archive(tmp_path / "data", clock)
        metrics = Metrics()
        context = PluginContext(
            archive=archive, fetcher=Fetcher(clock), clock=clock,
            scheduler=Scheduler(clock), metrics=metrics,
        )
        assert discover(["relaydescs"], context, PluginHost(archive)) == []
        assert metrics.counter("plugins.init_failures") == 1


# --- the directory-protocol plugin ---------------------------------------------


@pytest.fixture
def net(clock):
    network = SimNetwork(
        SimScenario(seed=11, n_authorities=3, n_relays=4, n_periods=3,
                    period_start=ts(19)),
        clock,
    )
    network.start()
    yield network
    network.stop()


@pytest.fixture
def rig(tmp_path, clock, net):
    return build_rig(tmp_path, clock, net)


class TestBootstrap:
    def test_bootstrap_adopts_timings_and_seeds_checker(self, rig, net):
        rig.plugin.bootstrap()
        timings = rig.scheduler.timings
        assert timings is not None
        assert timings.valid_after == ts(19)
        assert rig.refchecker.starting_point_count() == 1
        assert rig.archive.counts() == {"consensus": 1}

    def test_bootstrap_skips_dead_authority(self, tmp_path, clock):
        network = SimNetwork(
            SimScenario(seed=11, n_authorities=3, n_relays=4, n_periods=3,
                        period_start=ts(19), down=frozenset({0})),
            clock,
        )
        network.start()
        try:
            rig = build_rig(tmp_path, clock, network)
            rig.plugin.bootstrap()
            assert rig.scheduler.timings is not None
        finally:
            network.stop()

    def test_bootstrap_is_idempotent(self, rig, net):
        rig.plugin.bootstrap()
        before = len(net.requests())
        rig.plugin.bootstrap()
        assert len(net.requests()) == before


class TestEagerTasks:
    def test_eager_votes_fetches_each_authority_once(self, rig, net, clock):
        rig.plugin.bootstrap()
        clock.set(ts(19, 52, 30))
        rig.plugin.eager_votes()
        assert rig.archive.counts().get("vote") == 3
        # a second firing in the same phase stays quiet
        rig.plugin.eager_votes()
        vote_requests = [
            r for r in net.requests()
            if r.path == "/tor/status-vote/next/authority"
        ]
        assert len(vote_requests) == 3

    def test_eager_signatures_satisfy_guesses(self, rig, net, clock):
        rig.plugin.bootstrap()
        clock.set(ts(19, 57, 30))
        rig.plugin.eager_signatures()
        assert rig.archive.counts().get("detached-signature") == 3
        guessed = rig.refchecker.guess_period_documents(
            clock.now(), rig.scheduler.timings)
        assert not [g for g in guessed
                    if g.doctype is DocType.DetachedSignature]


class TestReferenceCycle:
    def drive(self, rig, clock):
        """One collector day, compressed: bootstrap, then cycles around
        the vote/signature windows and the period rollover."""
        rig.plugin.bootstrap()
        rig.plugin.check_references()
        clock.set(ts(19, 52, 30))
        rig.plugin.eager_votes()
        clock.set(ts(19, 53))
        rig.plugin.check_references()
        clock.set(ts(19, 57, 30))
        rig.plugin.eager_signatures()
        clock.set(ts(20, 0, 30))
        rig.plugin.check_references()

    def test_closes_over_first_period(self, rig, net, clock):
        rig.plugin.bootstrap()
        rig.plugin.check_references()
        assert_census(net, rig.archive, ts(19, 5), clock.now())
        assert rig.plugin.expectations() == []

    def test_closes_over_period_rollover(self, rig, net, clock):
        self.drive(rig, clock)
        assert_census(net, rig.archive, ts(19, 5), clock.now())
        assert rig.plugin.expectations() == []
        assert rig.refchecker.permanently_missed_count() == 0
        assert_digest_requests_unique(net, rig.scheduler.timings)

    def test_down_authority_not_retried_within_phase(self, tmp_path, clock):
        network = SimNetwork(
            SimScenario(seed=11, n_authorities=3, n_relays=4, n_periods=3,
                        period_start=ts(19), down=frozenset({2})),
            clock,
        )
        network.start()
        try:
            rig = build_rig(tmp_path, clock, network)
            self.drive(rig, clock)
            # one more cycle in the same phase must not re-ask the dead one
            rig.plugin.check_references()
            assert_census(network, rig.archive, ts(19, 5), clock.now())
            down_id = network.authorities[2].identity
            down_votes = [
                r for r in network.requests()
                if r.server_id == down_id
                and r.path == "/tor/status-vote/next/authority"
            ]
            assert len(down_votes) == 1
            # its vote and signature windows closed unserved
            assert rig.refchecker.permanently_missed_count() == 2
        finally:
            network.stop()

    def test_split_consensus_archives_both_variants(self, tmp_path, clock):
        network = SimNetwork(
            SimScenario(seed=11, n_authorities=3, n_relays=4, n_periods=3,
                        period_start=ts(19), split_period=1, split_minority=1),
            clock,
        )
        network.start()
        try:
            rig = build_rig(tmp_path, clock, network)
            self.drive(rig, clock)
            assert_census(network, rig.archive, ts(19, 5), clock.now())
            variants = rig.archive.find_period(DocType.ConsensusNs, ts(20))
            assert len(variants) == 2
            assert rig.plugin.expectations() == []
        finally:
            network.stop()


class TestServerPreference:
    def test_alpha_uses_authorities_beta_prefers_caches(self, rig, clock):
        rig.plugin.bootstrap()
        cache = ServerEndpoint("cache-1", "127.0.0.1:1")
        rig.plugin.servers.append(cache)
        clock.set(ts(19, 55))  # inside the alpha window
        assert rig.scheduler.phase() is Phase.Alpha
        assert cache not in rig.plugin._preference()
        clock.set(ts(20, 40))
        assert rig.scheduler.phase() is Phase.Beta
        assert rig.plugin._preference()[0] is cache


# --- the measurement plugin -----------------------------------------------------


class _TpfHandler(BaseHTTPRequestHandler):
    def do_GET(self):
        self.server.paths.append(self.path)
        body = self.server.files.get(self.path)
        if body is None:
            self.send_response(404)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def tpf_host():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _TpfHandler)
    httpd.files = {}
    httpd.paths = []
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield httpd
    httpd.shutdown()
    httpd.server_close()


def tpf_body(source, size, day):
    return (f"SOURCE={source} FILESIZE={size} START={day}T00:05:00\n"
            f"SOURCE={source} FILESIZE={size} START={day}T06:05:00\n"
            ).encode()


def perf_rig(tmp_path, clock, tpf_host, sizes=(51200,)):
    base = f"http://127.0.0.1:{tpf_host.server_address[1]}"
    archive = Archive(tmp_path / "data", clock)
    metrics = Metrics()
    context = PluginContext(
        archive=archive,
        fetcher=Fetcher(clock, metrics=metrics, timeout=5.0),
        clock=clock,
        scheduler=Scheduler(clock, metrics),
        settings={"onionperf": {
            "hosts": [{"source": "op-ab", "url": base}],
            "sizes": list(sizes),
        }},
        metrics=metrics,
    )
    host = PluginHost(archive, metrics)
    (plugin,) = discover(["onionperf"], context, host)
    return SimpleNamespace(archive=archive, host=host, plugin=plugin,
                           context=context)


class TestOnionPerf:
    def test_expectations_cover_three_days_back(self, tmp_path, tpf_host):
        clock = ManualClock(ts(0, 20, day=16))
        rig = perf_rig(tmp_path, clock, tpf_host, sizes=(51200, 1048576))
        wanted = rig.plugin.expectations()
        assert len(wanted) == 6
        days = {d.datetime.date().isoformat() for d in wanted}
        assert days == {"2018-11-15", "2018-11-14", "2018-11-13"}
        assert all(d.doctype is DocType.TorperfResults for d in wanted)

    def test_collect_archives_under_measurement_day(self, tmp_path, tpf_host):
        clock = ManualClock(ts(0, 20, day=16))
        for day in ("2018-11-15", "2018-11-14", "2018-11-13"):
            tpf_host.files[f"/op-ab-51200-{day}.tpf"] = tpf_body(
                "op-ab", 51200, day)
        rig = perf_rig(tmp_path, clock, tpf_host)
        rig.plugin.collect()
        assert rig.archive.counts() == {"torperf": 3}
        entry = next(e for e in rig.archive.entries()
                     if "2018-11-15" in e.path)
        assert entry.subject == "op-ab-51200"
        assert entry.doc_datetime == ts(0, 0, day=15)
        # a fresh plugin instance sees them as done without private state
        again = perf_rig(tmp_path, clock, tpf_host)
        assert again.plugin.expectations() == []

    def test_permanent_miss_never_asked_again(self, tmp_path, tpf_host):
        clock = ManualClock(ts(0, 20, day=16))
        tpf_host.files["/op-ab-51200-2018-11-15.tpf"] = tpf_body(
            "op-ab", 51200, "2018-11-15")
        tpf_host.files["/op-ab-51200-2018-11-13.tpf"] = tpf_body(
            "op-ab", 51200, "2018-11-13")
        rig = perf_rig(tmp_path, clock, tpf_host)
        rig.plugin.collect()
        rig.plugin.collect()
        tpf_host.files["/op-ab-51200-2018-11-16.tpf"] = tpf_body(
            "op-ab", 51200, "2018-11-16")
        clock.set(ts(0, 20, day=17))
        rig.plugin.collect()
        missing = [p for p in tpf_host.paths
                   if p == "/op-ab-51200-2018-11-14.tpf"]
        assert len(missing) == 1
        assert rig.plugin.permanently_missed_count() == 1
        assert rig.archive.counts() == {"torperf": 3}  # day 16 arrived on the 17th

    def test_requires_hosts(self, tmp_path, clock):
        archive = Archive(tmp_path / "data", clock)
        context = PluginContext(
            archive=archive, fetcher=Fetcher(clock), clock=clock,
            scheduler=Scheduler(clock), settings={"onionperf": {"hosts": []}},
        )
        with pytest.raises(PluginInitError):
            OnionPerfPlugin(context)
