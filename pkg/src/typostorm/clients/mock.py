"""Deterministic offline stand-in for every endpoint role.

One threaded HTTP server exposes::

    POST /vision/v1/chat/completions
    POST /generator/v1/chat/completions
    POST /judge/v1/chat/completions
    POST /detector/detect
    POST /scorer/score
    GET  /_stats

Behaviour comes from a declarative script (JSON)::

    {
      "seed": 7,
      "latency_ms": 0,
      "vision": {"clean": "4", "answers": {"<png sha256[:16]>|<question>": "3"},
                 "fooled_by_banner": true, "fool_probability": 0.3},
      "generator": {"rule": "offset", "offset": 3},
      "judge": {"rule": "equality"},
      "detector": {"boxes": [[10, 10, 110, 90, 0.9]]},
      "scorer": {"rule": "overlap"},
      "fail": {"vision": [503]}
    }

The vision role cannot read pixels. It learns the attack text from the
``X-Typostorm-Payload`` header that the gateway adds for mock endpoints only,
and when fooled answers with the payload after its ``ANSWER: `` marker.
With ``fool_probability`` set, each (image, question) pair is fooled iff a
hash of (seed, image, question) falls below it, independent of request order.
"""

from __future__ import annotations

import base64
import errno
import hashlib
import json
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import unquote

from ..compose import COMMAND_PREFIX
from ..metrics import normalize_text, parse_count
from .gateway import PAYLOAD_HEADER

CHAT_ROLES = ("vision", "generator", "judge")


class PortInUse(OSError):
    pass


@dataclass
class MockScript:
    seed: int = 0
    latency_ms: float = 0.0
    vision: dict = field(default_factory=lambda: {"clean": "4", "fooled_by_banner": True})
    generator: dict = field(default_factory=lambda: {"rule": "offset", "offset": 3})
    judge: dict = field(default_factory=lambda: {"rule": "equality"})
    detector: dict = field(default_factory=lambda: {"boxes": []})
    scorer: dict = field(default_factory=lambda: {"rule": "overlap"})
    fail: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown mock script keys {sorted(unknown)}")
        script = cls()
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(getattr(script, key), dict):
                merged = dict(getattr(script, key))
                merged.update(value)
                value = merged
            setattr(script, key, value)
        return script

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def image_tag(png: bytes) -> str:
    return hashlib.sha256(png).hexdigest()[:16]


def fool_draw(seed: int, tag: str, question: str) -> float:
    """Uniform [0, 1) value fixed by (seed, image, question)."""
    digest = hashlib.sha256(f"{seed}|{tag}|{question}".encode("utf-8")).hexdigest()
    return int(digest[:13], 16) / float(16**13)


def _labelled(text: str, label: str) -> str | None:
    m = re.search(rf"^{re.escape(label)}:[ \t]*(.*)$", text, re.MULTILINE)
    return m.group(1).strip() if m else None


def _token_f1(a: str, b: str) -> float:
    ta, tb = normalize_text(a).split(), normalize_text(b).split()
    if not ta and not tb:
        return 1.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    p, r = common / len(ta), common / len(tb)
    return 2 * p * r / (p + r)


def _chat_reply(text: str, model: str) -> dict:
    return {
        "id": "mock-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12],
        "object": "chat.completion",
        "model": model,
        "choices": [
            {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
        ],
    }


class _State:
    def __init__(self, script: MockScript):
        self.script = script
        self.lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        with getattr(self, "lock", threading.Lock()):
            self.counts: Counter = Counter()
            self.in_flight: Counter = Counter()
            self.high_water: Counter = Counter()
            self.requests: list[tuple[str, str]] = []
            self.decisions: list[dict] = []
            self.reply_index: Counter = Counter()
            self.fail_index: Counter = Counter()

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "counts": dict(self.counts),
                "high_water": dict(self.high_water),
                "requests": [list(r) for r in self.requests],
                "decisions": list(self.decisions),
            }


class _Handler(BaseHTTPRequestHandler):
    server_version = "typostorm-mock/1"
    state: _State

    def log_message(self, format: str, *args: Any) -> None:
        pass

    def _send(self, code: int, body: dict) -> None:
        raw = json.dumps(body).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self) -> None:
        if self.path.rstrip("/") == "/_stats":
            self._send(200, self.state.snapshot())
        else:
            self._send(404, {"error": f"no route {self.path}"})

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        role = self._route()
        if role is None:
            self._send(404, {"error": f"no route {self.path}"})
            return
        st = self.state
        with st.lock:
            st.counts[role] += 1
            st.in_flight[role] += 1
            st.high_water[role] = max(st.high_water[role], st.in_flight[role])
            st.requests.append((role, hashlib.sha256(raw).hexdigest()))
            fails = st.script.fail.get(role, [])
            idx = st.fail_index[role]
            st.fail_index[role] += 1
            fail_code = fails[idx] if idx < len(fails) else None
        try:
            code, reply = self._handle(role, raw, fail_code)
        finally:
            # release before writing, so a client that reuses its slot as soon as
            # the response lands is never counted alongside this request
            with st.lock:
                st.in_flight[role] -= 1
        self._send(code, reply)

    def _handle(self, role: str, raw: bytes, fail_code) -> tuple[int, dict]:
        if self.state.script.latency_ms:
            time.sleep(self.state.script.latency_ms / 1000.0)
        if fail_code is not None:
            return int(fail_code), {"error": "scripted failure"}
        try:
            body = json.loads(raw or b"{}")
        except ValueError:
            return 400, {"error": "body is not JSON"}
        return getattr(self, f"_{role}")(body)

    def _route(self) -> str | None:
        path = self.path.split("?", 1)[0].rstrip("/")
        for role in CHAT_ROLES:
            if path == f"/{role}/v1/chat/completions":
                return role
        if path == "/detector/detect":
            return "detector"
        if path == "/scorer/score":
            return "scorer"
        return None

    # --- roles --------------------------------------------------------------

    def _vision(self, body: dict) -> tuple[int, dict]:
        cfg = self.state.script.vision
        question, png = "", b""
        for msg in body.get("messages", []):
            content = msg.get("content")
            if not isinstance(content, list):
                continue
            for part in content:
                if part.get("type") == "text":
                    question = part.get("text", "")
                elif part.get("type") == "image_url":
                    url = part.get("image_url", {}).get("url", "")
                    png = base64.b64decode(url.split(",", 1)[-1]) if url else b""
        tag = image_tag(png)
        clean = cfg.get("answers", {}).get(f"{tag}|{question}", cfg.get("clean", "4"))
        payload = self.headers.get(PAYLOAD_HEADER)
        payload = unquote(payload) if payload else None
        fooled = False
        if payload and cfg.get("fooled_by_banner", True):
            p = cfg.get("fool_probability")
            fooled = True if p is None else fool_draw(self.state.script.seed, tag, question) < float(p)
        if payload is not None:
            with self.state.lock:
                self.state.decisions.append({"image": tag, "question": question, "fooled": fooled})
        if fooled:
            i = payload.find(COMMAND_PREFIX)
            answer = payload[i + len(COMMAND_PREFIX):] if i >= 0 else payload
        else:
            answer = clean
        return 200, _chat_reply(answer, body.get("model", ""))

    def _next_reply(self, role: str, replies: list) -> str:
        with self.state.lock:
            i = self.state.reply_index[role]
            self.state.reply_index[role] += 1
        return replies[min(i, len(replies) - 1)]

    def _generator(self, body: dict) -> tuple[int, dict]:
        cfg = self.state.script.generator
        model = body.get("model", "")
        if "replies" in cfg:
            return 200, _chat_reply(self._next_reply("generator", cfg["replies"]), model)
        if "reply" in cfg:
            return 200, _chat_reply(cfg["reply"], model)
        user = next(
            (m.get("content", "") for m in body.get("messages", []) if m.get("role") == "user"), ""
        )
        truth = _labelled(user, "Correct answer")
        if truth is None:
            return 200, _chat_reply("unknown", model)
        count = parse_count(truth)
        if count is not None:
            text = str(count + int(cfg.get("offset", 3)))
        else:
            text = f"not {truth}"
        return 200, _chat_reply(text, model)

    def _judge(self, body: dict) -> tuple[int, dict]:
        cfg = self.state.script.judge
        model = body.get("model", "")
        if "reply" in cfg:
            return 200, _chat_reply(cfg["reply"], model)
        user = next(
            (m.get("content", "") for m in body.get("messages", []) if m.get("role") == "user"), ""
        )
        ref = _labelled(user, "Reference answer") or ""
        cand = _labelled(user, "Candidate answer") or ""
        return 200, _chat_reply("YES" if normalize_text(ref) == normalize_text(cand) else "NO", model)

    def _detector(self, body: dict) -> tuple[int, dict]:
        cfg = self.state.script.detector
        by_prompt = cfg.get("by_prompt", {})
        boxes = by_prompt.get(body.get("prompt", ""), cfg.get("boxes", []))
        return 200, {"boxes": boxes}

    def _scorer(self, body: dict) -> tuple[int, dict]:
        cfg = self.state.script.scorer
        if "score" in cfg:
            return 200, {"score": cfg["score"]}
        return 200, {"score": _token_f1(body.get("candidate", ""), body.get("reference", ""))}


class MockServer:
    def __init__(self, script: MockScript | dict | None = None, port: int = 0, host: str = "127.0.0.1"):
        if isinstance(script, dict) or script is None:
            script = MockScript.from_dict(script or {})
        self.script = script
        self.state = _State(script)
        handler = type("Handler", (_Handler,), {"state": self.state})
        try:
            self.httpd = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(exc.errno, f"port {port} is already in use") from exc
            raise
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self) -> "MockServer":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def stats(self) -> dict:
        return self.state.snapshot()

    def reset_stats(self) -> None:
        self.state.reset()

    def endpoints_toml(self, max_in_flight: int = 4, vision_names: tuple[str, ...] = ("mock-vision",)) -> str:
        """An endpoints file pointing every role at this server."""
        blocks = []
        for name in vision_names:
            blocks.append((name, "vision", f"{self.url}/vision/v1"))
        blocks += [
            ("mock-generator", "generator", f"{self.url}/generator/v1"),
            ("mock-judge", "judge", f"{self.url}/judge/v1"),
            ("mock-detector", "detector", f"{self.url}/detector"),
            ("mock-scorer", "scorer", f"{self.url}/scorer"),
        ]
        out = []
        for name, role, base in blocks:
            out.append(
                f'[endpoints.{name}]\nrole = "{role}"\nbase_url = "{base}"\n'
                f'model = "{name}"\ntimeout_s = 10.0\nmax_in_flight = {max_in_flight}\n'
                f"max_retries = 1\nbackoff_s = 0.01\nmock = true\n"
            )
        return "\n".join(out)


def serve_mock(script: MockScript | dict | None = None, port: int = 0, host: str = "127.0.0.1") -> MockServer:
    """Start a mock server on a background thread and return its handle."""
    return MockServer(script, port, host).start()
