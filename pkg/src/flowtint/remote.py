"""HTTP client for an external rater, plus a scriptable stub server.

Wire format (JSON over POST):

    request   {"prompt": str, "reference": base64 PNG, "prediction": base64 PNG,
               "mode": "logits" | "judge"}
    response  {"logits": [float, ...]}                  one per score token
          or  {"score": [number], "reasoning": str}     judge mode
"""

import argparse
import base64
from dataclasses import dataclass, field
import io
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
import json
import logging
import socket
import threading
import time
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ProtocolError, ScoringError
from .pool import to_uint8
from .reward import SCORE_TOKENS, ScoreDistribution, expected_score, proxy_score

log = logging.getLogger(__name__)

RUBRIC_PROMPT = """\
Role: colour-matching judge for photo series.

Compare the two images (reference first, prediction second) on colour only.
Rate how closely the prediction matches the reference in three respects:
dominant tone, saturation, and the spread of brightness.  Judge the image as
a whole first, then lower the rating for key regions whose colour clearly
departs from the reference.  Objects, composition, sharpness and taste do
not matter.

Ratings:
0  two or more respects disagree completely
1  the colour style differs at its root
2  similar tone but saturation or brightness is well off
3  similar tone with a noticeable saturation or brightness gap, or a few
   regions graded differently
4  same grading overall and in most key regions
5  no visible colour difference anywhere

Reply with JSON only: {"score": [<rating>], "reasoning": "<one sentence>"}
"""


def encode_png(img) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(np.asarray(img))).save(buf, format="PNG", compress_level=6)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class EndpointConfig:
    url: str
    timeout: float = 10.0
    retries: int = 3
    mode: str = "logits"
    backoff: float = 0.05
    prompt: str = RUBRIC_PROMPT

    def __post_init__(self):
        if self.mode not in ("logits", "judge"):
            raise ConfigurationError(f"unknown remote mode {self.mode!r}")
        if self.retries < 0 or self.timeout <= 0:
            raise ConfigurationError("retries must be >= 0 and timeout > 0")


@dataclass
class CallReport:
    attempts: int = 0
    retries: int = 0
    errors: list = field(default_factory=list)
    elapsed_ms: float = 0.0


def parse_response(body: bytes, tokens=SCORE_TOKENS) -> ScoreDistribution:
    """Turn a response body into a score distribution or raise ProtocolError."""
    text = body.decode("utf-8", errors="replace")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not JSON: {exc}", payload=text) from exc
    if not isinstance(obj, dict):
        raise ProtocolError("response is not a JSON object", payload=text)
    try:
        if "logits" in obj:
            return ScoreDistribution.from_logits([float(v) for v in obj["logits"]], tokens)
        if "score" in obj:
            score = obj["score"]
            if isinstance(score, list):
                if len(score) != 1:
                    raise ProtocolError("judge score list must hold one number", payload=text)
                score = score[0]
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise ProtocolError("judge score is not a number", payload=text)
            value = int(score) if float(score).is_integer() else score
            return ScoreDistribution.delta(value, tokens)
    except ProtocolError:
        raise
    except Exception as exc:  # bad shapes, non-numeric logits, off-scale scores
        raise ProtocolError(f"unusable response: {exc}", payload=text) from exc
    raise ProtocolError("response carries neither logits nor score", payload=text)


class RemoteRater:
    """Rater backed by an HTTP endpoint; usable wherever ProxyRater is."""

    def __init__(self, config: EndpointConfig, tokens=SCORE_TOKENS):
        self.config = config
        self.tokens = tuple(tokens)
        self.last_report = CallReport()

    def request_body(self, reference, prediction) -> bytes:
        return json.dumps({"prompt": self.config.prompt, "reference": encode_png(reference),
                           "prediction": encode_png(prediction), "mode": self.config.mode}).encode()

    def distribution(self, reference, prediction) -> ScoreDistribution:
        dist, self.last_report = self.call(reference, prediction)
        return dist

    def __call__(self, reference, prediction) -> float:
        return expected_score(self.distribution(reference, prediction))

    def call(self, reference, prediction):
        cfg = self.config
        body = self.request_body(reference, prediction)
        report = CallReport()
        start = time.monotonic()
        for attempt in range(cfg.retries + 1):
            report.attempts = attempt + 1
            req = urllib.request.Request(cfg.url, data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                    payload = resp.read()
            except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
                report.errors.append(repr(exc))
                log.warning("remote rater attempt %d failed: %s", attempt + 1, exc)
                if attempt < cfg.retries:
                    report.retries += 1
                    time.sleep(cfg.backoff * (2 ** attempt))
                continue
            report.elapsed_ms = (time.monotonic() - start) * 1000.0
            return parse_response(payload, self.tokens), report
        raise ScoringError(f"remote rater failed after {report.attempts} attempts: {report.errors[-1]}",
                           attempts=report.attempts)


# --- stub server ---------------------------------------------------------


@dataclass
class StubScript:
    """What the stub answers.

    ``stall`` requests are first held longer than ``stall_seconds`` (so a
    client with a shorter timeout gives up), then answers follow ``mode``:
    "logits" returns ``logits``; "judge" returns ``score``; "malformed"
    returns a non-JSON body; "proxy" scores the decoded images with the
    in-process rubric proxy.
    """

    mode: str = "logits"
    logits: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0, 10.0])
    score: float = 3
    stall: int = 0
    stall_seconds: float = 1.0


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):
        log.debug("stub: " + fmt, *args)

    def do_POST(self):
        server = self.server
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        with server.lock:
            server.requests.append(raw)
            n = len(server.requests)
        script = server.script
        if n <= script.stall:
            time.sleep(script.stall_seconds)
        if script.mode == "malformed":
            self._send(b"<html>rater overloaded</html>", "text/html")
            return
        if script.mode == "judge":
            out = {"score": [script.score], "reasoning": "stub judgement"}
        elif script.mode == "proxy":
            req = json.loads(raw)
            dist = proxy_score(decode_png(req["reference"]), decode_png(req["prediction"]))
            out = {"logits": np.log(np.maximum(dist.probs, 1e-300)).tolist()}
        else:
            out = {"logits": list(script.logits)}
        self._send(json.dumps(out).encode(), "application/json")

    def _send(self, body, ctype):
        try:
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client already timed out


class StubServer:
    """Threaded local rater stub; use as a context manager."""

    def __init__(self, script: StubScript = StubScript(), host="127.0.0.1", port=0):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.script = script
        self.httpd.requests = []
        self.httpd.lock = threading.Lock()
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/score"

    @property
    def requests(self):
        return [json.loads(r) for r in self.httpd.requests]

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    ap = argparse.ArgumentParser(description="run the stub rater server")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--mode", default="proxy", choices=["logits", "judge", "malformed", "proxy"])
    ap.add_argument("--stall", type=int, default=0)
    args = ap.parse_args(argv)
    server = StubServer(StubScript(mode=args.mode, stall=args.stall), args.host, args.port)
    print(f"stub rater listening on {server.url}", flush=True)
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()


if __name__ == "__main__":
    main()
