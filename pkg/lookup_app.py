"""Online subsidy lookup: one JSON object per line in, one per line out.

Requests are {"k", "origin", "dest", "time_bucket"}; replies are {"amount"}
or {"amount": 0, "fallback": true} for keys the dictionary does not cover.
Admin lines: {"cmd": "reload", "path": optional} and {"cmd": "stats"}.
"""

from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading
import time
from pathlib import Path

from allocator_app import AllocationDictionary, load_dictionary
from domain_app import ClusterKey, SubsidyError

log = logging.getLogger(__name__)

REQUEST_FIELDS = ("k", "origin", "dest", "time_bucket")


class DictionaryHolder:
    """Current dictionary behind a lock; reload swaps the whole object at once."""

    def __init__(self, dictionary: AllocationDictionary, path: str | Path | None = None):
        self._lock = threading.Lock()
        self._dictionary = dictionary
        self._path = Path(path) if path else None
        self._loaded_at = time.time()
        self.lookups = 0
        self.fallbacks = 0

    @classmethod
    def from_path(cls, path) -> "DictionaryHolder":
        return cls(load_dictionary(path), path)

    @property
    def dictionary(self) -> AllocationDictionary:
        with self._lock:
            return self._dictionary

    def reload(self, path=None) -> AllocationDictionary:
        path = Path(path) if path else self._path
        if path is None:
            raise SubsidyError("no dictionary path to reload from")
        fresh = load_dictionary(path)
        with self._lock:
            self._dictionary = fresh
            self._path = path
            self._loaded_at = time.time()
        log.info("reloaded dictionary from %s: %d entries", path, len(fresh))
        return fresh

    def record(self, fallback: bool) -> None:
        with self._lock:
            self.lookups += 1
            if fallback:
                self.fallbacks += 1

    def stats(self) -> dict:
        with self._lock:
            return {
                "entries": len(self._dictionary),
                "loaded_at": self._loaded_at,
                "path": str(self._path) if self._path else None,
                "lookups": self.lookups,
                "fallbacks": self.fallbacks,
            }


def lookup(dictionary: AllocationDictionary, k: int, key: ClusterKey) -> dict:
    amount, fallback = dictionary.lookup(k, key)
    if fallback:
        return {"amount": 0, "fallback": True}
    return {"amount": amount}


def _parse_request(line: str):
    try:
        req = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if not isinstance(req, dict):
        return None
    return req


def handle_line(holder: DictionaryHolder, line: str) -> dict:
    """Answer one request line; never raises."""
    req = _parse_request(line)
    if req is None:
        return {"error": "bad_request"}
    if "cmd" in req:
        if req["cmd"] == "reload":
            try:
                fresh = holder.reload(req.get("path"))
            except SubsidyError as e:
                log.warning("reload failed: %s", e)
                return {"error": "reload_failed", "message": str(e)}
            return {"ok": True, "entries": len(fresh)}
        if req["cmd"] == "stats":
            return holder.stats()
        return {"error": "bad_request"}
    values = [req.get(f) for f in REQUEST_FIELDS]
    if any(type(v) is not int for v in values):
        return {"error": "bad_request"}
    k, origin, dest, bucket = values
    reply = lookup(holder.dictionary, k, ClusterKey(origin, dest, bucket))
    holder.record(bool(reply.get("fallback")))
    if reply.get("fallback"):
        log.debug("fallback for k=%d key=%s", k, (origin, dest, bucket))
    return reply


def encode(reply: dict) -> bytes:
    return (json.dumps(reply, sort_keys=True) + "\n").encode("utf-8")


class LookupHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write(encode(handle_line(self.server.holder, line)))
            self.wfile.flush()


class LookupServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, holder: DictionaryHolder):
        super().__init__(address, LookupHandler)
        self.holder = holder


def serve_lookup(dictionary_path, host: str = "127.0.0.1", port: int = 7070) -> LookupServer:
    """Load the dictionary and bind; the caller runs serve_forever()."""
    holder = DictionaryHolder.from_path(dictionary_path)
    server = LookupServer((host, port), holder)
    log.info("serving %d entries on %s:%d", len(holder.dictionary), *server.server_address[:2])
    return server


def serve_stdio(holder: DictionaryHolder, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    answered = 0
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        stdout.write(json.dumps(handle_line(holder, line), sort_keys=True) + "\n")
        stdout.flush()
        answered += 1
    return answered
