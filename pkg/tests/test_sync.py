import hashlib
import json
import random
from types import SimpleNamespace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from httpsync.sync import (
    DecodeError,
    EncodingError,
    HopLength,
    LengthMode,
    ListLengthMismatch,
    NotCanonical,
    Oversize,
    PolicyMode,
    SchemaViolation,
    SyncHistory,
    SyncKey,
    TransitionRule,
    ValidationPolicy,
    Verdict,
    append_history,
    compute_hmac,
    decode_sync,
    encode_sync,
    init_history,
    validate_sync,
    verify_hmac,
)
from httpsync.wire import FieldSnapshot

# -- independent oracles ------------------------------------------------------


def hmac_sha256_oracle(key: bytes, msg: bytes) -> str:
    """HMAC built by hand from the ipad/opad construction."""
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key.ljust(block, b"\x00")
    inner = hashlib.sha256(bytes(b ^ 0x36 for b in key) + msg).digest()
    return hashlib.sha256(bytes(b ^ 0x5C for b in key) + inner).hexdigest()


def canonical_oracle(h: SyncHistory) -> bytes:
    obj = {
        "host": [v.decode("utf-8") for v in h.host_values],
        "length": "stream" if h.last_length.is_stream else h.last_length.value,
        "path": [v.decode("utf-8") for v in h.path_values],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def strict_oracle(length: HopLength, fields: FieldSnapshot, history: SyncHistory) -> bool:
    observed = (fields.path, fields.host)
    tuples = list(zip(history.path_values, history.host_values))
    return all(t == observed for t in tuples) and length.value == history.last_length.value


def rules_oracle(length, fields, history, rules) -> bool:
    licensed = set()
    for r in rules:
        licensed.add((r.field, r.at_hop, r.from_, r.to))
    for name, values, observed in (
        ("path", history.path_values, fields.path),
        ("host", history.host_values, fields.host),
    ):
        seq = list(values) + [observed]
        for pos in range(1, len(seq)):
            a, b = seq[pos - 1], seq[pos]
            if a != b and (name, pos, a, b) not in licensed and (name, pos, None, b) not in licensed:
                return False
    return length.value == history.last_length.value


# RFC 4231 test cases 1, 2, 3, 4, 6, 7
RFC4231 = [
    (b"\x0b" * 20, b"Hi There", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?", "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (b"\xaa" * 20, b"\xdd" * 50, "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
    (bytes(range(1, 26)), b"\xcd" * 50, "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
    (
        b"\xaa" * 131,
        b"Test Using Larger Than Block-Size Key - Hash Key First",
        "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
    ),
    (
        b"\xaa" * 131,
        b"This is a test using a larger than block-size key and a larger than block-size data."
        b" The key needs to be hashed before being used by the HMAC algorithm.",
        "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2",
    ),
]


def history(paths, hosts, length=HopLength.declared(0)) -> SyncHistory:
    return SyncHistory(tuple(paths), tuple(hosts), length)


# -- strategies ---------------------------------------------------------------

_values = st.binary(min_size=0, max_size=12).filter(lambda b: _is_utf8(b)) | st.text(max_size=10).map(str.encode)


def _is_utf8(b: bytes) -> bool:
    try:
        b.decode("utf-8")
        return True
    except UnicodeDecodeError:
        return False


_lengths = st.one_of(
    st.integers(0, 2**40).map(HopLength.declared),
    st.just(HopLength.stream()),
)


@st.composite
def histories(draw, values=_values):
    n = draw(st.integers(1, 5))
    paths = draw(st.lists(values, min_size=n, max_size=n))
    hosts = draw(st.lists(values, min_size=n, max_size=n))
    return SyncHistory(tuple(paths), tuple(hosts), draw(_lengths))


# -- encoding -----------------------------------------------------------------


class TestEncode:
    def test_single_hop(self):
        h = history([b"/"], [b"www.example.com"], HopLength.declared(13))
        assert encode_sync(h) == b'{"host":["www.example.com"],"length":13,"path":["/"]}'

    def test_two_identical_hops(self):
        h = history([b"/public"] * 2, [b"www.example.com"] * 2, HopLength.declared(51))
        assert encode_sync(h) == (
            b'{"host":["www.example.com","www.example.com"],"length":51,"path":["/public","/public"]}'
        )

    def test_stream_marker(self):
        h = history([b"/"], [b"h"], HopLength.stream())
        assert b'"length":"stream"' in encode_sync(h)
        assert decode_sync(encode_sync(h)) == h

    def test_control_bytes_are_escaped(self):
        h = history([b"/a\x00b\n"], [b"h\x7f"])
        v = encode_sync(h)
        assert b"\\u0000" in v and b"\\n" in v
        assert all(0x20 <= c < 0x7F for c in v)
        assert decode_sync(v) == h

    def test_non_utf8_rejected(self):
        with pytest.raises(EncodingError):
            encode_sync(history([b"/\xff"], [b"h"]))

    @given(histories())
    def test_matches_json_oracle(self, h):
        assert encode_sync(h) == canonical_oracle(h)

    @given(histories())
    def test_round_trip(self, h):
        assert decode_sync(encode_sync(h)) == h

    @given(histories(), histories())
    def test_injective(self, a, b):
        if a != b:
            assert encode_sync(a) != encode_sync(b)


class TestDecode:
    def test_list_length_mismatch(self):
        with pytest.raises(ListLengthMismatch):
            decode_sync(b'{"host":["h"],"length":0,"path":["/","/"]}')

    def test_empty_lists(self):
        with pytest.raises(SchemaViolation):
            decode_sync(b'{"host":[],"length":0,"path":[]}')

    @pytest.mark.parametrize(
        "raw",
        [
            b"",
            b"[]",
            b"not json",
            b'{"host":["h"],"length":0}',
            b'{"host":["h"],"length":0,"path":["/"],"extra":1}',
            b'{"host":"h","length":0,"path":["/"]}',
            b'{"host":[1],"length":0,"path":["/"]}',
            b'{"host":["h"],"length":-1,"path":["/"]}',
            b'{"host":["h"],"length":1.5,"path":["/"]}',
            b'{"host":["h"],"length":true,"path":["/"]}',
            b'{"host":["h"],"length":"streaming","path":["/"]}',
            b'{"host":["h"],"length":null,"path":["/"]}',
            b'{"host":["h"],"length":0,"path":["/"]}x',
            b'\xff{"host":["h"],"length":0,"path":["/"]}',
            b'{"host":["\\ud800"],"length":0,"path":["/"]}',
        ],
    )
    def test_schema_violations(self, raw):
        with pytest.raises(SchemaViolation):
            decode_sync(raw)

    @pytest.mark.parametrize(
        "raw",
        [
            b'{"length":0,"host":["h"],"path":["/"]}',
            b'{"host": ["h"],"length":0,"path":["/"]}',
            b'{"host":["h"],"length":0,"path":["/"]}\n',
            b'{"host":["h"],"length":00,"path":["/"]}',
            b'{"host":["\\u0068"],"length":0,"path":["/"]}',
            b'{"host":["h"],"length":0,"path":["\\/"]}',
        ],
    )
    def test_non_canonical_rejected(self, raw):
        with pytest.raises(DecodeError):
            decode_sync(raw)

    def test_reordered_keys_are_not_canonical(self):
        with pytest.raises(NotCanonical):
            decode_sync(b'{"length":0,"host":["h"],"path":["/"]}')

    def test_oversize(self):
        h = history([b"/" + b"a" * 9000], [b"h"])
        with pytest.raises(Oversize):
            decode_sync(encode_sync(h))

    @given(histories(), st.data())
    def test_reserializations_rejected(self, h, data):
        v = encode_sync(h).decode("ascii")
        obj = json.loads(v)
        variants = [
            json.dumps(obj, sort_keys=True),
            json.dumps(obj, sort_keys=True, separators=(",", ":"), indent=1),
            json.dumps(dict(reversed(list(obj.items()))), separators=(",", ":")),
            " " + v,
            v + " ",
        ]
        pos = data.draw(st.integers(1, len(v) - 1))
        variants.append(v[:pos] + " " + v[pos:])
        for text in variants:
            if text == v:
                continue
            try:
                decoded = decode_sync(text.encode("utf-8"))
            except DecodeError:
                continue
            # a space inside a string value yields a different, valid history
            assert encode_sync(decoded) == text.encode("utf-8")


# -- authentication -----------------------------------------------------------


class TestHmac:
    @pytest.mark.parametrize("key, msg, digest", RFC4231)
    def test_oracle_matches_rfc4231(self, key, msg, digest):
        assert hmac_sha256_oracle(key, msg) == digest

    @pytest.mark.parametrize("key, msg, digest", RFC4231)
    def test_compute_hmac_rfc4231(self, key, msg, digest):
        # compute_hmac only reads .secret, so non-32-byte vector keys can be fed directly
        assert compute_hmac(SimpleNamespace(secret=key), msg) == digest.encode("ascii")

    @given(st.binary(min_size=32, max_size=32), st.binary(max_size=300))
    def test_matches_oracle(self, secret, msg):
        assert compute_hmac(SyncKey(secret), msg).decode("ascii") == hmac_sha256_oracle(secret, msg)

    def test_lowercase_hex(self, key):
        tag = compute_hmac(key, b"x")
        assert len(tag) == 64 and tag == tag.lower()

    def test_deterministic(self, key):
        assert compute_hmac(key, b"v") == compute_hmac(key, b"v")

    @given(histories(), st.data())
    def test_bit_flip_changes_digest(self, h, data):
        key = SyncKey(bytes(32))
        v = encode_sync(h)
        i = data.draw(st.integers(0, len(v) * 8 - 1))
        flipped = bytearray(v)
        flipped[i // 8] ^= 1 << (i % 8)
        assert compute_hmac(key, bytes(flipped)) != compute_hmac(key, v)
        assert not verify_hmac(key, bytes(flipped), compute_hmac(key, v))

    def test_verify(self, key):
        v = encode_sync(history([b"/"], [b"h"]))
        tag = compute_hmac(key, v)
        assert verify_hmac(key, v, tag)
        assert not verify_hmac(key, v, tag[:-1])
        assert not verify_hmac(key, v, b"")
        assert not verify_hmac(key, v, tag.upper())

    @given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
    def test_wrong_key(self, k1, k2):
        v = b'{"host":["h"],"length":0,"path":["/"]}'
        if k1 != k2:
            assert not verify_hmac(SyncKey(k2), v, compute_hmac(SyncKey(k1), v))


class TestKey:
    def test_size_enforced(self):
        with pytest.raises(ValueError):
            SyncKey(b"short")
        with pytest.raises(ValueError):
            SyncKey.from_hex("ab" * 31)

    def test_load(self, key_file, key):
        assert SyncKey.load(key_file) == key

    def test_secret_not_in_repr(self, key):
        assert key.secret.hex() not in repr(key)

    def test_generate_distinct(self):
        assert SyncKey.generate() != SyncKey.generate()


# -- history ------------------------------------------------------------------


class TestHistory:
    def test_init(self):
        h = init_history(HopLength.declared(0), FieldSnapshot(b"/", b"h"))
        assert h.path_values == (b"/",) and h.host_values == (b"h",) and len(h) == 1

    def test_init_stream_mode(self):
        h = init_history(HopLength.stream(), FieldSnapshot(b"/", b"h"))
        assert h.last_length.mode is LengthMode.STREAM_EMBEDDED

    def test_append(self):
        h1 = init_history(HopLength.declared(51), FieldSnapshot(b"/public", b"www.example.com"))
        h2 = append_history(h1, HopLength.declared(51), FieldSnapshot(b"/public", b"www.example.com"))
        assert len(h2) == 2
        assert h2.path_values[:1] == h1.path_values and h2.host_values[:1] == h1.host_values
        assert h2.last_length == HopLength.declared(51)
        assert encode_sync(h2).count(b"51") == 1

    @given(histories(), st.lists(st.tuples(_values, _values, _lengths), max_size=6))
    def test_monotone(self, h, steps):
        for path, host, length in steps:
            nxt = append_history(h, length, FieldSnapshot(path, host))
            assert nxt.path_values[: len(h)] == h.path_values
            assert nxt.host_values[: len(h)] == h.host_values
            assert len(nxt) == len(h) + 1 and nxt.last_length == length
            h = nxt

    def test_mismatched_lists_rejected(self):
        with pytest.raises(ValueError):
            SyncHistory((b"/",), (), HopLength.declared(0))
        with pytest.raises(ValueError):
            SyncHistory((), (), HopLength.declared(0))


# -- validation ---------------------------------------------------------------


class TestValidate:
    def test_length_mismatch(self):
        h = history([b"/public"], [b"www.example.com"], HopLength.declared(51))
        out = validate_sync(HopLength.declared(0), FieldSnapshot(b"/public", b"www.example.com"), h)
        assert out.verdict is Verdict.INVALID
        assert (out.reason.field, out.reason.expected, out.reason.observed) == ("length", "51", "0")

    def test_path_mismatch(self):
        h = history([b"/account.php/image.png"], [b"h"])
        out = validate_sync(HopLength.declared(0), FieldSnapshot(b"/account.php", b"h"), h)
        assert not out.valid and out.reason.field == "path"
        assert out.reason.expected == "/account.php/image.png" and out.reason.hop == 0

    def test_identical(self):
        h = history([b"/"] * 3, [b"h"] * 3, HopLength.declared(5))
        out = validate_sync(HopLength.declared(5), FieldSnapshot(b"/", b"h"), h)
        assert out.valid and out.reason is None

    def test_host_rule(self):
        h = history([b"/"], [b"public.example.com"])
        fields = FieldSnapshot(b"/", b"admin.example.com")
        rule = TransitionRule("host", 1, b"admin.example.com", b"public.example.com")
        assert validate_sync(HopLength.declared(0), fields, h, ValidationPolicy.with_rules([rule])).valid
        assert not validate_sync(HopLength.declared(0), fields, h, ValidationPolicy.with_rules([])).valid
        assert not validate_sync(HopLength.declared(0), fields, h).valid

    def test_rule_position_and_source_matter(self):
        h = history([b"/"], [b"public.example.com"])
        fields = FieldSnapshot(b"/", b"admin.example.com")
        for rule in (
            TransitionRule("host", 2, b"admin.example.com"),
            TransitionRule("host", 1, b"admin.example.com", b"other"),
            TransitionRule("path", 1, b"admin.example.com"),
        ):
            assert not validate_sync(HopLength.declared(0), fields, h, ValidationPolicy.with_rules([rule])).valid
        wildcard = TransitionRule("host", 1, b"admin.example.com")
        assert validate_sync(HopLength.declared(0), fields, h, ValidationPolicy.with_rules([wildcard])).valid

    def test_stream_recorded_vs_declared_here(self):
        h = history([b"/"], [b"h"], HopLength.stream())
        out = validate_sync(HopLength.declared(0), FieldSnapshot(b"/", b"h"), h)
        assert not out.valid and out.reason.cause == "framing-mismatch"
        assert validate_sync(HopLength.stream(), FieldSnapshot(b"/", b"h"), h).valid

    def test_policy_file(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([{"field": "host", "at_hop": 1, "from": "a", "to": "b"}]))
        policy = ValidationPolicy.load(path)
        assert policy.mode is PolicyMode.RULES and policy.rules[0].to_dict()["to"] == "b"
        assert ValidationPolicy.load(None).mode is PolicyMode.STRICT
        path.write_text('{"field": "host"}')
        with pytest.raises(ValueError):
            ValidationPolicy.load(path)

    @pytest.mark.parametrize("bad", [{"field": "length", "at_hop": 1, "to": "x"}, {"field": "host", "at_hop": 0, "to": "x"}])
    def test_bad_rules(self, bad):
        with pytest.raises(ValueError):
            TransitionRule.from_dict(bad)

    def test_strict_exhaustive_oracle(self):
        rng = random.Random(7)
        values = [b"a", b"b"]
        for _ in range(3000):
            n = rng.randint(1, 3)
            h = history(
                [rng.choice(values) for _ in range(n)],
                [rng.choice(values) for _ in range(n)],
                HopLength.declared(rng.randint(0, 1)),
            )
            length = HopLength.declared(rng.randint(0, 1))
            fields = FieldSnapshot(rng.choice(values), rng.choice(values))
            assert validate_sync(length, fields, h).valid == strict_oracle(length, fields, h)

    def test_rules_exhaustive_oracle(self):
        rng = random.Random(11)
        values = [b"a", b"b", b"c"]
        for _ in range(3000):
            n = rng.randint(1, 3)
            h = history(
                [rng.choice(values) for _ in range(n)],
                [rng.choice(values) for _ in range(n)],
                HopLength.declared(rng.randint(0, 1)),
            )
            rules = [
                TransitionRule(
                    rng.choice(["path", "host"]),
                    rng.randint(1, 3),
                    rng.choice(values),
                    rng.choice([None] + values),
                )
                for _ in range(rng.randint(0, 4))
            ]
            length = HopLength.declared(rng.randint(0, 1))
            fields = FieldSnapshot(rng.choice(values), rng.choice(values))
            got = validate_sync(length, fields, h, ValidationPolicy.with_rules(rules)).valid
            assert got == rules_oracle(length, fields, h, rules)

    @given(histories(), st.integers(0, 100))
    def test_length_never_waivable(self, h, observed):
        if h.last_length.is_stream or h.last_length.value == observed:
            return
        rules = [
            TransitionRule(f, pos, v)
            for f in ("path", "host")
            for pos in range(1, len(h) + 1)
            for v in set(h.path_values + h.host_values)
        ]
        fields = FieldSnapshot(h.path_values[-1], h.host_values[-1])
        out = validate_sync(HopLength.declared(observed), fields, h, ValidationPolicy.with_rules(rules))
        assert not out.valid and out.reason.field == "length"
