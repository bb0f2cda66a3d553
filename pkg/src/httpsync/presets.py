"""Named parser personalities reconstructing common server behaviors.

Each preset changes only the knobs needed for the behavior it is named
after; everything else keeps the defaults of :class:`ParserPersonality`.
"""

from __future__ import annotations

from httpsync.wire import (
    AbsoluteURIHost,
    CLTEPrecedence,
    DuplicateHost,
    FatGetBody,
    ParserPersonality,
    PathDecoding,
    TEHandling,
)

_BASE = ParserPersonality()

PRESETS: dict[str, ParserPersonality] = {
    # caches key on the request-target exactly as received
    "raw-path-cache": _BASE,
    # web frameworks decode the path and treat segments after a script as path info
    "decoding-framework-origin": _BASE.with_overrides(
        path_decoding=PathDecoding.DECODE_PERCENT_SPLIT_QUERY
    ),
    # routes by the Host header and ignores the authority of an absolute URI
    "host-header-router": _BASE.with_overrides(
        absolute_uri_host=AbsoluteURIHost.IGNORE_MALFORMED_URI,
        duplicate_host=DuplicateHost.FIRST_WINS,
    ),
    # routes by the absolute URI authority, last Host header otherwise
    "absolute-uri-router": _BASE.with_overrides(
        absolute_uri_host=AbsoluteURIHost.PREFER_URI_HOST,
        duplicate_host=DuplicateHost.LAST_WINS,
    ),
    # forwards GET bodies; refuses CL and TE together
    "fat-get-forwarder": _BASE.with_overrides(
        cl_te_precedence=CLTEPrecedence.REJECT_BOTH_PRESENT
    ),
    # treats GET and HEAD as bodiless regardless of framing headers
    "fat-get-ignorer": _BASE.with_overrides(fat_get_body=FatGetBody.IGNORE_BODY),
    # drops a Transfer-Encoding it cannot parse and frames by Content-Length
    "cl-preferring-proxy": _BASE.with_overrides(
        te_handling=TEHandling.IGNORE_INVALID_VALUE,
        cl_te_precedence=CLTEPrecedence.PREFER_CL,
    ),
    # strips stray semicolons from Transfer-Encoding and lets chunked win
    "te-sanitizing-origin": _BASE.with_overrides(
        te_handling=TEHandling.SANITIZE_LEADING_SEMICOLON,
        cl_te_precedence=CLTEPrecedence.PREFER_TE,
    ),
}


class UnknownPreset(KeyError):
    pass


def get_preset(name: str) -> ParserPersonality:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown personality preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


def build_personality(name: str = "raw-path-cache", overrides: dict[str, str] | None = None) -> ParserPersonality:
    p = get_preset(name)
    return p.with_overrides(**overrides) if overrides else p
