"""Tests for re-serving archived documents."""

import gzip
import json
import urllib.error
import urllib.request
from datetime import datetime, timedelta, timezone

import pytest

import sample_docs
from dircollect import docparse
from dircollect.archive import Archive, index_json_bytes
from dircollect.clock import ManualClock
from dircollect.dirserver import DirServer
from dircollect.simnet import SimNetwork, SimScenario


def ts(hour, minute=0, second=0, day=15):
    return datetime(2018, 11, day, hour, minute, second, tzinfo=timezone.utc)


@pytest.fixture
def clock():
    return ManualClock(ts(19, 30))


@pytest.fixture
def archive(tmp_path, clock):
    return Archive(tmp_path / "data", clock)


@pytest.fixture
def server(archive, clock):
    srv = DirServer(archive, clock, listen="127.0.0.1:0",
                    status_provider=lambda: {"phase": "alpha", "jobs": 3})
    srv.start()
    yield srv
    srv.stop()


def stored(archive, clock, *bodies):
    entries = []
    for body in bodies:
        entries.append(archive.store(docparse.make_raw(body, "test", clock.now())))
    return entries


def get(server, path, gzip_ok=False):
    req = urllib.request.Request(f"http://{server.address}{path}")
    if gzip_ok:
        req.add_header("Accept-Encoding", "gzip")
    return urllib.request.urlopen(req, timeout=5)


def get_body(server, path):
    with get(server, path) as resp:
        return resp.read()


def get_code(server, path):
    try:
        with get(server, path) as resp:
            return resp.status
    except urllib.error.HTTPError as err:
        return err.code


class TestCurrentConsensus:
    def test_serves_latest_flavor(self, server, archive, clock):
        stored(archive, clock, sample_docs.CONSENSUS_NS, sample_docs.CONSENSUS_MD)
        assert get_body(server, "/tor/status-vote/current/consensus") \
            == sample_docs.CONSENSUS_NS
        assert get_body(server, "/tor/status-vote/current/consensus-microdesc") \
            == sample_docs.CONSENSUS_MD

    def test_newest_wins(self, server, archive, clock):
        net = SimNetwork(
            SimScenario(seed=5, n_authorities=1, n_relays=1, n_periods=2,
                        period_start=ts(19)),
            clock,
        )
        stored(archive, clock, sample_docs.CONSENSUS_NS)  # valid-after 19:00
        stored(archive, clock, net.periods[1].consensus_ns)  # valid-after 20:00
        clock.set(ts(20, 30))
        assert get_body(server, "/tor/status-vote/current/consensus") \
            == net.periods[1].consensus_ns

        # published but not yet started periods stay invisible
        srv2_archive_state = get_code(server, "/tor/status-vote/current/consensus")
        assert srv2_archive_state == 200

    def test_nothing_stored_404(self, server):
        assert get_code(server, "/tor/status-vote/current/consensus") == 404

    def test_expired_404(self, server, archive, clock):
        stored(archive, clock, sample_docs.CONSENSUS_NS)  # valid until 22:00
        clock.set(ts(22, 0))
        assert get_code(server, "/tor/status-vote/current/consensus") == 404


class TestDigestBatches:
    def test_served_by_digest_without_annotation(self, server, archive, clock):
        stored(archive, clock, sample_docs.SERVER_DESCRIPTOR, sample_docs.EXTRA_INFO)
        body = get_body(server, f"/tor/server/d/{sample_docs.SERVER_DESCRIPTOR_SHA1}")
        assert body == sample_docs.SERVER_DESCRIPTOR
        assert not body.startswith(b"@type")
        assert get_body(server, f"/tor/extra/d/{sample_docs.EXTRA_INFO_SHA1}") \
            == sample_docs.EXTRA_INFO

    def test_batch_is_concatenated_and_partial(self, server, archive, clock):
        stored(archive, clock, sample_docs.SERVER_DESCRIPTOR)
        d = sample_docs.SERVER_DESCRIPTOR_SHA1
        body = get_body(server, f"/tor/server/d/{d}+{'0' * 40}")
        assert body == sample_docs.SERVER_DESCRIPTOR
        assert get_code(server, "/tor/server/d/" + "0" * 40) == 404

    def test_wrong_type_not_served_from_other_route(self, server, archive, clock):
        stored(archive, clock, sample_docs.SERVER_DESCRIPTOR)
        assert get_code(
            server, f"/tor/extra/d/{sample_docs.SERVER_DESCRIPTOR_SHA1}"
        ) == 404

    def test_micro_batch_by_base64(self, server, archive, clock):
        stored(archive, clock, sample_docs.MICRODESCRIPTOR)
        b64 = sample_docs.MICRODESCRIPTOR_SHA256_B64
        assert get_body(server, f"/tor/micro/d/{b64}") \
            == sample_docs.MICRODESCRIPTOR

    def test_malformed_tokens_are_400(self, server, archive, clock):
        stored(archive, clock, sample_docs.SERVER_DESCRIPTOR)
        assert get_code(server, "/tor/server/d/nothex") == 400
        assert get_code(server, "/tor/server/d/") == 400
        assert get_code(server, "/tor/micro/d/short") == 400


class TestBulk:
    def test_recently_stored_only(self, server, archive, clock):
        stored(archive, clock, sample_docs.SERVER_DESCRIPTOR)
        body = get_body(server, "/tor/server/all")
        assert body == sample_docs.SERVER_DESCRIPTOR

        clock.set(clock.now() + timedelta(hours=25))
        assert get_code(server, "/tor/server/all") == 404

    def test_extra_all(self, server, archive, clock):
        stored(archive, clock, sample_docs.EXTRA_INFO)
        assert get_body(server, "/tor/extra/all") == sample_docs.EXTRA_INFO


class TestMeta:
    def test_index_json_matches_archive(self, server, archive, clock):
        stored(archive, clock, sample_docs.VOTE, sample_docs.SERVER_DESCRIPTOR)
        body = get_body(server, "/index.json")
        assert body == index_json_bytes(archive.build_index())
        parsed = json.loads(body)
        assert len(parsed["entries"]) == 2

    def test_status_endpoint(self, server):
        status = json.loads(get_body(server, "/status"))
        assert status == {"phase": "alpha", "jobs": 3}

    def test_gzip(self, server, archive, clock):
        stored(archive, clock, sample_docs.CONSENSUS_NS)
        with get(server, "/tor/status-vote/current/consensus", gzip_ok=True) as resp:
            assert resp.headers.get("Content-Encoding") == "gzip"
            assert gzip.decompress(resp.read()) == sample_docs.CONSENSUS_NS

    def test_unknown_path_404(self, server):
        assert get_code(server, "/nothing/here") == 404

    def test_round_trip_is_byte_identical(self, server, archive, clock):
        """What was stored off the wire is what gets served back."""
        for body in (sample_docs.CONSENSUS_NS, sample_docs.SERVER_DESCRIPTOR,
                     sample_docs.MICRODESCRIPTOR):
            stored(archive, clock, body)
        assert get_body(server, "/tor/status-vote/current/consensus") \
            == sample_docs.CONSENSUS_NS
        assert get_body(server, f"/tor/server/d/{sample_docs.SERVER_DESCRIPTOR_SHA1}") \
            == sample_docs.SERVER_DESCRIPTOR
        assert get_body(
            server, f"/tor/micro/d/{sample_docs.MICRODESCRIPTOR_SHA256_B64}"
        ) == sample_docs.MICRODESCRIPTOR
