from .cache import ResponseCache, make_key, sha256_hex
from .gateway import (
    ROLES,
    DetectorEndpoint,
    DetectorError,
    EndpointError,
    EndpointProfile,
    EndpointTimeout,
    Gateway,
    HttpStatus,
    JudgeUnparseable,
    MalformedResponse,
    ScorerError,
    TextEndpoint,
    Transcript,
    Unconfigured,
    encode_png,
    load_endpoints,
    parse_endpoints,
)
from .mock import MockScript, MockServer, PortInUse, serve_mock

__all__ = [
    "ROLES",
    "DetectorEndpoint",
    "DetectorError",
    "EndpointError",
    "EndpointProfile",
    "EndpointTimeout",
    "Gateway",
    "HttpStatus",
    "JudgeUnparseable",
    "MalformedResponse",
    "MockScript",
    "MockServer",
    "PortInUse",
    "ResponseCache",
    "ScorerError",
    "TextEndpoint",
    "Transcript",
    "Unconfigured",
    "encode_png",
    "load_endpoints",
    "make_key",
    "parse_endpoints",
    "serve_mock",
    "sha256_hex",
]
