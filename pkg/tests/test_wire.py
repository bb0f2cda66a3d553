import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from httpsync.harness.corpus import load_corpus, load_fixture
from httpsync.presets import PRESETS, UnknownPreset, build_personality, get_preset
from httpsync.wire import (
    SYNC_HEADER,
    AbsoluteURIHost,
    CLTEPrecedence,
    Chunked,
    ContentLength,
    DuplicateHost,
    FatGetBody,
    HeaderTooLarge,
    MalformedHeader,
    MalformedRequestLine,
    NoBody,
    ParseError,
    ParserPersonality,
    PathDecoding,
    RejectedByPolicy,
    TEHandling,
    honored_fields,
    parse_request,
    percent_decode,
    serialize_head,
    serialize_request,
    split_head,
)

SEMICOLON_SMUGGLE = (
    b"POST /public HTTP/1.1\r\n"
    b"Host: www.example.com\r\n"
    b"Content-Length: 51\r\n"
    b"Transfer-Encoding: ;chunked\r\n"
    b"\r\n"
    b"0\r\n"
    b"\r\n"
    b"GET /admin HTTP/1.1\r\n"
    b"Host: www.example.com\r\n"
    b"\r\n"
)

ALL_PERSONALITIES = [
    ParserPersonality(*combo)
    for combo in itertools.product(
        TEHandling, CLTEPrecedence, DuplicateHost, AbsoluteURIHost, PathDecoding, FatGetBody
    )
]


def p(**knobs) -> ParserPersonality:
    return ParserPersonality().with_overrides(**knobs)


class TestSemicolonSmuggleFraming:
    def test_fixture_matches_constant(self):
        assert load_fixture("cl-te-semicolon-smuggle") == SEMICOLON_SMUGGLE
        _, body = split_head(SEMICOLON_SMUGGLE)
        assert len(body) == 51

    def test_ignore_invalid_te_honors_content_length(self):
        req = parse_request(SEMICOLON_SMUGGLE, p(te_handling="ignore-invalid-value", cl_te_precedence="prefer-te"))
        assert req.framing == ContentLength(51)

    def test_sanitizing_personality_honors_chunked(self):
        req = parse_request(
            SEMICOLON_SMUGGLE, p(te_handling="sanitize-leading-semicolon", cl_te_precedence="prefer-te")
        )
        assert req.framing == Chunked()

    def test_strict_rejects(self):
        with pytest.raises(RejectedByPolicy) as exc:
            parse_request(SEMICOLON_SMUGGLE, ParserPersonality())
        assert exc.value.knob == "te_handling"

    def test_shipped_presets_witness_the_discrepancy(self):
        framings = set()
        for preset in PRESETS.values():
            try:
                framings.add(parse_request(SEMICOLON_SMUGGLE, preset).framing)
            except ParseError:
                pass
        assert ContentLength(51) in framings and Chunked() in framings

    def test_presets_used_by_the_smuggling_chain(self):
        assert parse_request(SEMICOLON_SMUGGLE, get_preset("cl-preferring-proxy")).framing == ContentLength(51)
        assert parse_request(SEMICOLON_SMUGGLE, get_preset("te-sanitizing-origin")).framing == Chunked()


class TestBasicParsing:
    def test_simple_get(self):
        for personality in PRESETS.values():
            req = parse_request(b"GET / HTTP/1.1\r\nHost: www.example.com\r\n\r\n", personality)
            assert req.framing == NoBody()
            assert req.honored_host == b"www.example.com"
            assert req.honored_path == b"/"

    def test_header_order_and_case_preserved(self):
        raw = b"GET /x?a=1 HTTP/1.1\r\nhOsT: a\r\nX-One: 1\r\nx-one: 2\r\n\r\n"
        req = parse_request(raw, ParserPersonality())
        assert req.headers == ((b"hOsT", b"a"), (b"X-One", b"1"), (b"x-one", b"2"))
        assert list(req.header_values(b"X-ONE")) == [b"1", b"2"]
        assert req.target == b"/x?a=1"

    def test_body_bytes_after_head_are_ignored(self):
        req = parse_request(b"POST / HTTP/1.1\r\nHost: h\r\nContent-Length: 3\r\n\r\nabc", ParserPersonality())
        assert req.framing == ContentLength(3)
        assert req.raw_head.endswith(b"\r\n\r\n") and b"abc" not in req.raw_head

    def test_duplicate_equal_content_length_is_accepted(self):
        req = parse_request(load_fixture("benign-post-cl-duplicate-same"), ParserPersonality())
        assert isinstance(req.framing, ContentLength)

    def test_conflicting_content_length_rejected(self):
        raw = b"POST / HTTP/1.1\r\nHost: h\r\nContent-Length: 3\r\nContent-Length: 4\r\n\r\n"
        with pytest.raises(MalformedHeader):
            parse_request(raw, ParserPersonality())

    @pytest.mark.parametrize(
        "raw, error",
        [
            (b"GET /\r\nHost: h\r\n\r\n", MalformedRequestLine),
            (b"GET  / HTTP/1.1\r\nHost: h\r\n\r\n", MalformedRequestLine),
            (b"G(T / HTTP/1.1\r\nHost: h\r\n\r\n", MalformedRequestLine),
            (b"GET / HTTP/x\r\nHost: h\r\n\r\n", MalformedRequestLine),
            (b"GET nopath HTTP/1.1\r\nHost: h\r\n\r\n", MalformedRequestLine),
            (b"GET / HTTP/1.1\r\nNo colon here\r\n\r\n", MalformedHeader),
            (b"GET / HTTP/1.1\r\nBad Name: v\r\n\r\n", MalformedHeader),
            (b"GET / HTTP/1.1\r\nHost: h\r\n folded\r\n\r\n", MalformedHeader),
            (b"POST / HTTP/1.1\r\nContent-Length: -1\r\n\r\n", MalformedHeader),
            (b"POST / HTTP/1.1\r\nContent-Length: 0x10\r\n\r\n", MalformedHeader),
            (b"GET / HTTP/1.1\r\nHost: h\r\n", MalformedHeader),
        ],
    )
    def test_malformed_input(self, raw, error):
        with pytest.raises(error):
            parse_request(raw, ParserPersonality())

    def test_head_size_limits(self):
        big_line = b"GET / HTTP/1.1\r\nX: " + b"a" * (16 * 1024) + b"\r\n\r\n"
        with pytest.raises(HeaderTooLarge):
            parse_request(big_line, ParserPersonality())
        many = b"GET / HTTP/1.1\r\n" + b"X: aaaaaaaaaaaaaaaaaaaaaaaaaaaaaa\r\n" * 2200 + b"\r\n"
        with pytest.raises(HeaderTooLarge):
            parse_request(many, ParserPersonality())

    def test_valid_te_with_extra_codings(self):
        req = parse_request(load_fixture("te-gzip-chunked"), ParserPersonality())
        assert req.framing == Chunked()

    def test_te_uppercase_is_chunked(self):
        assert parse_request(load_fixture("te-uppercase"), ParserPersonality()).framing == Chunked()


class TestHonoredFields:
    def test_wcd_raw_path(self):
        req = parse_request(load_fixture("wcd-path-info"), get_preset("raw-path-cache"))
        assert honored_fields(req).path == b"/account.php/image.png"

    def test_wcd_framework_path(self):
        req = parse_request(load_fixture("wcd-path-info"), get_preset("decoding-framework-origin"))
        assert honored_fields(req).path == b"/account.php"

    def test_encoded_query_delimiter(self):
        raw = b"GET /account.php%3Fx=/image.png HTTP/1.1\r\nHost: h\r\n\r\n"
        assert parse_request(raw, p()).honored_path == b"/account.php%3Fx=/image.png"
        assert parse_request(raw, p(path_decoding="decode-percent-then-split-query")).honored_path == b"/account.php"

    def test_absolute_uri_host(self):
        raw = b"GET http://admin.example.com/x HTTP/1.1\r\nHost: public.example.com\r\n\r\n"
        uri = parse_request(raw, p(absolute_uri_host="prefer-uri-host"))
        header = parse_request(raw, p(absolute_uri_host="ignore-malformed-uri-use-host-header"))
        assert uri.honored_host == b"admin.example.com"
        assert header.honored_host == b"public.example.com"
        assert uri.honored_path == header.honored_path == b"/x"

    def test_absolute_uri_fixture_through_routers(self):
        raw = load_fixture("absolute-uri-host-confusion")
        assert parse_request(raw, get_preset("host-header-router")).honored_host == b"public.example.com"
        assert parse_request(raw, get_preset("absolute-uri-router")).honored_host == b"admin.example.com"

    def test_duplicate_host(self):
        raw = b"GET / HTTP/1.1\r\nHost: a\r\nHost: b\r\n\r\n"
        assert parse_request(raw, p(duplicate_host="first-wins")).honored_host == b"a"
        assert parse_request(raw, p(duplicate_host="last-wins")).honored_host == b"b"
        with pytest.raises(RejectedByPolicy):
            parse_request(raw, p(duplicate_host="reject"))

    def test_missing_host_is_empty(self):
        assert parse_request(load_fixture("missing-host"), p()).honored_host == b""

    def test_fat_get(self):
        raw = load_fixture("fat-get-small")
        assert parse_request(raw, p(fat_get_body="consume-body")).framing == ContentLength(13)
        assert parse_request(raw, p(fat_get_body="ignore-body")).framing == NoBody()

    def test_percent_decode(self):
        assert percent_decode(b"/a%20b%2F%zz") == b"/a b/%zz"


class TestSerialization:
    def test_simple_get_round_trips_byte_identical(self):
        raw = load_fixture("benign-get-root")
        req = parse_request(raw, p())
        assert serialize_request(req) == raw

    def test_duplicate_hosts_kept_in_order(self):
        raw = b"GET / HTTP/1.1\r\nHost: a\r\nX: 1\r\nHost: b\r\n\r\n"
        req = parse_request(raw, p(duplicate_host="first-wins"))
        assert serialize_request(req) == raw

    def test_added_sync_header_appears_once(self):
        req = parse_request(load_fixture("benign-get-root"), p())
        head = serialize_head(req.method, req.target, req.version, req.headers + ((SYNC_HEADER, b"{}"),))
        again = parse_request(head, p())
        assert len(again.header_values(b"http-sync")) == 1

    def test_corpus_round_trip_under_every_preset(self):
        for name, raw in load_corpus().items():
            for preset_name, preset in PRESETS.items():
                try:
                    req = parse_request(raw, preset)
                except ParseError:
                    continue
                again = parse_request(serialize_request(req), preset)
                assert again == req, (name, preset_name)


class TestPresets:
    def test_unknown_preset(self):
        with pytest.raises(UnknownPreset):
            get_preset("no-such-preset")

    def test_overrides(self):
        q = build_personality("fat-get-ignorer", {"duplicate_host": "last-wins"})
        assert q.fat_get_body is FatGetBody.IGNORE_BODY
        assert q.duplicate_host is DuplicateHost.LAST_WINS
        with pytest.raises(ValueError):
            build_personality("raw-path-cache", {"no_such_knob": "x"})
        with pytest.raises(ValueError):
            build_personality("raw-path-cache", {"duplicate_host": "sometimes"})

    def test_dict_round_trip(self):
        for preset in PRESETS.values():
            assert ParserPersonality.from_dict(preset.to_dict()) == preset


# -- properties ---------------------------------------------------------------

_token = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-", min_size=1, max_size=12)
_value = st.text(alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E), max_size=30)
_path = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789/._-%?=&", max_size=40).map(lambda s: "/" + s)


@st.composite
def requests(draw):
    method = draw(st.sampled_from(["GET", "POST", "HEAD", "PUT"]))
    path = draw(_path)
    headers = [("Host", draw(st.sampled_from(["a.example", "b.example"])))]
    for _ in range(draw(st.integers(0, 4))):
        headers.append((draw(_token), draw(_value)))
    if draw(st.booleans()):
        headers.append(("Host", draw(st.sampled_from(["a.example", "c.example"]))))
    framing = draw(st.sampled_from(["none", "cl", "te", "both", "bad-te", "bad-te-cl"]))
    if framing in ("cl", "both", "bad-te-cl"):
        headers.append(("Content-Length", str(draw(st.integers(0, 500)))))
    if framing in ("te", "both"):
        headers.append(("Transfer-Encoding", "chunked"))
    if framing in ("bad-te", "bad-te-cl"):
        headers.append(("Transfer-Encoding", draw(st.sampled_from([";chunked", "chunked;", "xchunked", ";"]))))
    draw(st.randoms()).shuffle(headers)
    head = f"{method} {path} HTTP/1.1\r\n" + "".join(f"{n}: {v}\r\n" for n, v in headers) + "\r\n"
    return head.encode("ascii")


@given(requests(), st.sampled_from(ALL_PERSONALITIES))
def test_parse_is_deterministic_and_round_trips(raw, personality):
    try:
        first = parse_request(raw, personality)
    except ParseError as exc:
        with pytest.raises(type(exc)):
            parse_request(raw, personality)
        return
    assert parse_request(raw, personality) == first
    assert parse_request(serialize_request(first), personality) == first


@given(requests())
def test_strict_personality_never_reinterprets(raw):
    strict = ParserPersonality.strict()
    lowered = raw.lower()
    has_cl = b"\r\ncontent-length:" in lowered
    has_te = b"\r\ntransfer-encoding:" in lowered
    hosts = lowered.count(b"\r\nhost:")
    if (has_cl and has_te) or hosts > 1:
        with pytest.raises(ParseError):
            parse_request(raw, strict)


@given(requests(), st.sampled_from(ALL_PERSONALITIES))
def test_exactly_one_framing(raw, personality):
    try:
        req = parse_request(raw, personality)
    except ParseError:
        return
    assert type(req.framing) in (NoBody, ContentLength, Chunked)
    if isinstance(req.framing, ContentLength):
        assert str(req.framing.length).encode() in req.header_values(b"content-length")
