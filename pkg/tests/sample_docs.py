"""Hand-built document fixtures shared by the unit tests.

SAMPLE_DETACHED_SIGNATURE is a verbatim real-world detached consensus
signature; the digests inside it are frozen expected values. Everything
else is synthetic but follows the wire formats closely enough to
exercise parsing, digesting and reference extraction. Key material is
deterministic junk derived from seeded RNGs.
"""

import base64
import random

import oracle_digests as oracle

SAMPLE_DETACHED_SIGNATURE = b"""\
consensus-digest 1CBD322788FFC841B0DB701C2942EE5750617CFF
valid-after 2018-11-15 19:00:00
fresh-until 2018-11-15 20:00:00
valid-until 2018-11-15 22:00:00
additional-digest microdesc sha256 476993E797C51682E95ACEED12B2DD21588847E8E2FF7C49291E64207D8FED53
additional-signature microdesc sha256 D586D18309DED4CD6D57C18FDB97EFA96D330566 8A45BACC94A6023A90C24FBCD10520C1741828F7
-----BEGIN SIGNATURE-----
1c/vHIqlqdhS8HR+Lps3Tk+VHeJaQ5lL/NxIkARDpVMLhv6fHxCNGlXrKvd9S5KR
MvOzblmrVt3TV/iJTvOmMwHuziRjzrZeHpeeK81zQ/z6QGvheooaxa8jsYuANgA0
GK4agnsCI4JTKz/47SGpIDjY3VtXbns58TUPYHHUQY82khLqWvj1nL5djWdnnm9l
yyU4od4mv6JJz9XdCNN+qDTzEA0QE10Y0lUV+K2Ipqplrb/zd9pzJS9GUf82cNOj
GYLvBMzuSr/aL0UIeQgiI0BRDw2MPqXd/KA04dOFCiqnDhKqh0PR6SMD3ulgxxhs
R0du41KYQC/eDqeRhxZF4g==
-----END SIGNATURE-----
directory-signature D586D18309DED4CD6D57C18FDB97EFA96D330566 8A45BACC94A6023A90C24FBCD10520C1741828F7
-----BEGIN SIGNATURE-----
ITaD0D5CmuobYi3G5LbuWmbIe5Vpt3o+5d1XOtKaBhRxmC10c9WWMXCVJ7K6Ezb5
dzX6CsEKpop1+V8eqPRTyAZ7H4VvxNS5j6yPsgrMlahgQjcaOpxZY8p+dmzEluPe
E45/+qlXoNfxwF4jv1t1+NLM0jIJRwHErNgJXzFRZ/q/MUZxn/LuN68mcBqzdLD4
L/D9bKNmvIAkcfTedk0x/zmwaXNMV6N9kN3kmUqeAvFLNOM/oP46ktj+B5Ch/2et
lFy4MEf1iHXKiLzq2uuCkMN2pfVtmga8j/BHE47ne5paMHnDwaTrEmBM2ws8n4mK
E/RAIUlD8COyEUImjcns6w==
-----END SIGNATURE-----
"""

SAMPLE_CONSENSUS_SHA1 = "1CBD322788FFC841B0DB701C2942EE5750617CFF"
SAMPLE_MICRODESC_CONSENSUS_SHA256 = (
    "476993E797C51682E95ACEED12B2DD21588847E8E2FF7C49291E64207D8FED53"
)


def _b64(seed: str, nbytes: int) -> str:
    return base64.b64encode(random.Random(seed).randbytes(nbytes)).decode("ascii")


def _block(seed: str, header: str = "SIGNATURE", nbytes: int = 128) -> str:
    enc = _b64(seed, nbytes)
    lines = [enc[i : i + 64] for i in range(0, len(enc), 64)]
    return f"-----BEGIN {header}-----\n" + "\n".join(lines) + f"\n-----END {header}-----\n"


def _hex40(seed: str) -> str:
    return random.Random(seed).randbytes(20).hex().upper()


def _fp_b64(hex40: str) -> str:
    return base64.b64encode(bytes.fromhex(hex40)).decode("ascii").rstrip("=")


RELAY_FP = _hex40("relay0-identity")
AUTH_FP = _hex40("auth0-identity")
AUTH_SIGNING_FP = _hex40("auth0-signing")

EXTRA_INFO = (
    f"extra-info demo {RELAY_FP}\n"
    "published 2018-11-15 18:05:00\n"
    "write-history 2018-11-15 18:00:00 (14400 s) 1000,2000,3000\n"
    "read-history 2018-11-15 18:00:00 (14400 s) 1500,2500,3500\n"
    "router-signature\n" + _block("ei-sig")
).encode("ascii")

EXTRA_INFO_SHA1 = oracle.extra_info_sha1(EXTRA_INFO)
EXTRA_INFO_SHA256_B64 = oracle.extra_info_sha256_b64(EXTRA_INFO)

SERVER_DESCRIPTOR = (
    "router demo 198.51.100.7 9001 0 9030\n"
    "platform Tor 0.3.5.7 on Linux\n"
    "published 2018-11-15 18:05:00\n"
    "fingerprint " + " ".join(RELAY_FP[i : i + 4] for i in range(0, 40, 4)) + "\n"
    "uptime 93600\n"
    "bandwidth 1073741824 1073741824 52428800\n"
    f"extra-info-digest {EXTRA_INFO_SHA1} {EXTRA_INFO_SHA256_B64}\n"
    "onion-key\n" + _block("sd-onion", "RSA PUBLIC KEY", 140) +
    "signing-key\n" + _block("sd-signing", "RSA PUBLIC KEY", 140) +
    "ntor-onion-key " + _b64("sd-ntor", 32).rstrip("=") + "\n"
    "contact demo operator\n"
    "reject *:*\n"
    "router-signature\n" + _block("sd-sig")
).encode("ascii")

SERVER_DESCRIPTOR_SHA1 = oracle.server_descriptor_sha1(SERVER_DESCRIPTOR)

MICRODESCRIPTOR = (
    "onion-key\n" + _block("md-onion", "RSA PUBLIC KEY", 140) +
    "ntor-onion-key " + _b64("md-ntor", 32).rstrip("=") + "\n"
    "id ed25519 " + _b64("md-ed", 32).rstrip("=") + "\n"
    "p reject 25,119,135-139,445\n"
).encode("ascii")

MICRODESCRIPTOR_SHA256_B64 = oracle.microdescriptor_b64(MICRODESCRIPTOR)

BANDWIDTH_LIST = (
    "1542304800\n"
    "version=1.4.0\n"
    "software=sbws\n"
    "software_version=1.0.2\n"
    "earliest_bandwidth=2018-11-10T18:00:00\n"
    "=====\n"
    f"bw=7500 node_id=${RELAY_FP} nick=demo\n"
    f"bw=6100 node_id=${_hex40('relay1-identity')} nick=other\n"
).encode("ascii")

BANDWIDTH_LIST_SHA256_B64 = oracle.sha256_b64(BANDWIDTH_LIST)

_EXTRA_RELAYS = [
    (_hex40("relay1-identity"), _hex40("relay1-sd-digest")),
    (_hex40("relay2-identity"), _hex40("relay2-sd-digest")),
]

VOTE_SD_DIGESTS = [SERVER_DESCRIPTOR_SHA1] + [d for _, d in _EXTRA_RELAYS]


def _r_line(fp_hex: str, sd_digest_hex: str, nick: str, addr: str) -> str:
    return (
        f"r {nick} {_fp_b64(fp_hex)} {_fp_b64(sd_digest_hex)} "
        f"2018-11-15 18:05:00 {addr} 9001 9030\n"
    )


VOTE = (
    "network-status-version 3\n"
    "vote-status vote\n"
    "consensus-methods 25 26 27 28\n"
    "published 2018-11-15 18:50:00\n"
    "valid-after 2018-11-15 19:00:00\n"
    "fresh-until 2018-11-15 20:00:00\n"
    "valid-until 2018-11-15 22:00:00\n"
    "voting-delay 300 300\n"
    "known-flags Authority Exit Fast Guard HSDir Running Stable V2Dir Valid\n"
    f"bandwidth-file-digest sha256={BANDWIDTH_LIST_SHA256_B64}\n"
    f"dir-source demoauth {AUTH_FP} 198.51.100.1 198.51.100.1 80 443\n"
    "contact demo authority\n"
    + _r_line(RELAY_FP, SERVER_DESCRIPTOR_SHA1, "demo", "198.51.100.7")
    + "s Fast Running Stable Valid\n"
    "v Tor 0.3.5.7\n"
    "w Bandwidth=7500 Measured=7500\n"
    f"m 25,26,27,28 sha256={MICRODESCRIPTOR_SHA256_B64}\n"
    + _r_line(*_EXTRA_RELAYS[0], "other", "198.51.100.8")
    + "s Fast Running\n"
    f"m 25,26,27,28 sha256={_b64('other-md-digest', 32).rstrip('=')}\n"
    + _r_line(*_EXTRA_RELAYS[1], "third", "198.51.100.9")
    + "s Running\n"
    f"m 25,26,27,28 sha256={_b64('third-md-digest', 32).rstrip('=')}\n"
    "directory-footer\n"
    f"directory-signature {AUTH_FP} {AUTH_SIGNING_FP}\n" + _block("vote-sig")
).encode("ascii")

CONSENSUS_NS = (
    "network-status-version 3\n"
    "vote-status consensus\n"
    "consensus-method 28\n"
    "valid-after 2018-11-15 19:00:00\n"
    "fresh-until 2018-11-15 20:00:00\n"
    "valid-until 2018-11-15 22:00:00\n"
    "voting-delay 300 300\n"
    "known-flags Authority Exit Fast Guard HSDir Running Stable V2Dir Valid\n"
    f"dir-source demoauth {AUTH_FP} 198.51.100.1 198.51.100.1 80 443\n"
    "contact demo authority\n"
    f"vote-digest {_hex40('vote-digest')}\n"
    + _r_line(RELAY_FP, SERVER_DESCRIPTOR_SHA1, "demo", "198.51.100.7")
    + "s Fast Running Stable Valid\n"
    "v Tor 0.3.5.7\n"
    "w Bandwidth=7500\n"
    + _r_line(*_EXTRA_RELAYS[0], "other", "198.51.100.8")
    + "s Fast Running\n"
    "w Bandwidth=6100\n"
    "directory-footer\n"
    "bandwidth-weights Wbd=0 Wbe=0 Wbg=4273 Wbm=10000\n"
    f"directory-signature {AUTH_FP} {AUTH_SIGNING_FP}\n" + _block("cons-sig-1")
    + f"directory-signature {_hex40('auth1-identity')} {_hex40('auth1-signing')}\n"
    + _block("cons-sig-2")
).encode("ascii")

CONSENSUS_NS_SD_DIGESTS = [SERVER_DESCRIPTOR_SHA1, _EXTRA_RELAYS[0][1]]


def _r_line_md(fp_hex: str, nick: str, addr: str) -> str:
    return f"r {nick} {_fp_b64(fp_hex)} 2018-11-15 18:05:00 {addr} 9001 9030\n"


CONSENSUS_MD = (
    "network-status-version 3 microdesc\n"
    "vote-status consensus\n"
    "consensus-method 28\n"
    "valid-after 2018-11-15 19:00:00\n"
    "fresh-until 2018-11-15 20:00:00\n"
    "valid-until 2018-11-15 22:00:00\n"
    "voting-delay 300 300\n"
    "known-flags Authority Exit Fast Guard HSDir Running Stable V2Dir Valid\n"
    f"dir-source demoauth {AUTH_FP} 198.51.100.1 198.51.100.1 80 443\n"
    "contact demo authority\n"
    f"vote-digest {_hex40('vote-digest')}\n"
    + _r_line_md(RELAY_FP, "demo", "198.51.100.7")
    + f"m {MICRODESCRIPTOR_SHA256_B64}\n"
    "s Fast Running Stable Valid\n"
    "w Bandwidth=7500\n"
    + _r_line_md(_EXTRA_RELAYS[0][0], "other", "198.51.100.8")
    + f"m {_b64('other-md-digest', 32).rstrip('=')}\n"
    "s Fast Running\n"
    "w Bandwidth=6100\n"
    "directory-footer\n"
    f"directory-signature sha256 {AUTH_FP} {AUTH_SIGNING_FP}\n" + _block("mdcons-sig")
).encode("ascii")

CONSENSUS_MD_MICRO_DIGESTS = [
    MICRODESCRIPTOR_SHA256_B64,
    _b64("other-md-digest", 32).rstrip("="),
]

TORPERF = (
    "BUILDTIMES=0.36,0.48,0.6 CIRC_ID=8 CONNECT=1542305000.38 DATACOMPLETE=1542305002.91 "
    "DATAREQUEST=1542305001.02 DATARESPONSE=1542305001.58 DIDTIMEOUT=0 FILESIZE=51200 "
    "LAUNCH=1542304998.50 READBYTES=51416 SOURCE=op-nl START=1542305000.00 WRITEBYTES=75\n"
    "BUILDTIMES=0.33,0.41,0.57 CIRC_ID=9 CONNECT=1542305300.12 DATACOMPLETE=1542305304.77 "
    "DATAREQUEST=1542305300.80 DATARESPONSE=1542305301.41 DIDTIMEOUT=0 FILESIZE=51200 "
    "LAUNCH=1542305298.01 READBYTES=51416 SOURCE=op-nl START=1542305300.00 WRITEBYTES=75\n"
).encode("ascii")
