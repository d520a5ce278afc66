"""VLM backends: an offline canned-response mock and a chat-completion HTTP client."""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .prompts import PromptRequest

FALLBACK_REPLY = "no response configured"


class BackendError(RuntimeError):
    """Base class; recoverable per call."""


class BackendTimeout(BackendError):
    pass


class BackendHttpError(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"backend returned HTTP {status}: {body[:200]}")


class BackendReplyError(BackendError):
    """The backend answered, but not in the expected shape."""


class BackendConfigError(BackendError):
    """Fatal: the backend cannot be used at all (bad descriptor, missing credentials)."""


class BackendAuthError(BackendHttpError):
    """Fatal: HTTP 401/403."""


FATAL_ERRORS = (BackendConfigError, BackendAuthError)


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str = "mock"  # "mock" or "http"
    endpoint_url: str = ""
    model_name: str = "mock"
    api_key_env: str = ""

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ValueError(f"backend kind must be 'mock' or 'http', got {self.kind!r}")
        if self.kind == "http" and not self.endpoint_url:
            raise ValueError("http backend requires endpoint_url")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "endpoint_url": self.endpoint_url, "model_name": self.model_name, "api_key_env": self.api_key_env}


def request_key(req: PromptRequest) -> str:
    """Stable hash of the prompt text and image pixel digests."""
    h = hashlib.sha256()
    h.update(req.user_text.encode("utf-8"))
    for digest in req.image_digests:
        h.update(b"\x00" + digest.encode("ascii"))
    return h.hexdigest()


@dataclass
class MockBackend:
    """Replies from a table keyed by ``request_key``.

    ``responder`` (if given) is consulted for keys absent from the table,
    which lets tests script content-dependent judges. Every call is logged
    in ``calls``.
    """

    table: Mapping[str, str] = field(default_factory=dict)
    fallback: str = FALLBACK_REPLY
    responder: Callable[[PromptRequest], str] | None = None
    calls: list = field(default_factory=list)

    def complete(self, req: PromptRequest, timeout_ms: int | None = None) -> str:
        key = request_key(req)
        self.calls.append(key)
        if key in self.table:
            return self.table[key]
        if self.responder is not None:
            return self.responder(req)
        return self.fallback

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        """Load a JSON document ``{"table": {...}, "fallback": "..."}``."""
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: mock table must be a JSON object")
        return cls(table=dict(doc.get("table", {})), fallback=doc.get("fallback", FALLBACK_REPLY))


class HttpBackend:
    def __init__(self, desc: BackendDescriptor, session=None):
        if desc.kind != "http":
            raise BackendConfigError("HttpBackend needs an http descriptor")
        self.desc = desc
        self._session = session

    def _api_key(self) -> str | None:
        if not self.desc.api_key_env:
            return None
        key = os.environ.get(self.desc.api_key_env)
        if not key:
            raise BackendConfigError(f"environment variable {self.desc.api_key_env} is not set")
        return key

    def payload(self, req: PromptRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": req.user_text}]
        for im in req.images:
            uri = "data:image/png;base64," + base64.b64encode(im.png).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": uri}})
        messages = []
        if req.system_text:
            messages.append({"role": "system", "content": req.system_text})
        messages.append({"role": "user", "content": content})
        return {"model": self.desc.model_name, "temperature": req.temperature, "max_tokens": req.max_tokens, "messages": messages}

    def complete(self, req: PromptRequest, timeout_ms: int | None = None) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        key = self._api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = self.desc.endpoint_url.rstrip("/") + "/chat/completions"
        timeout = None if timeout_ms is None else timeout_ms / 1000.0
        http = self._session or requests
        try:
            resp = http.post(url, json=self.payload(req), headers=headers, timeout=timeout)
        except requests.Timeout as exc:
            raise BackendTimeout(f"no reply from {url} within {timeout_ms} ms") from exc
        except requests.RequestException as exc:
            raise BackendError(f"request to {url} failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise BackendAuthError(resp.status_code, resp.text)
        if not 200 <= resp.status_code < 300:
            raise BackendHttpError(resp.status_code, resp.text)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendReplyError(f"malformed chat-completion reply: {exc!r}") from None
        if isinstance(content, list):  # some servers return content parts
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str):
            raise BackendReplyError("reply content is not text")
        return content


def make_backend(desc: BackendDescriptor, mock_table=None):
    if desc.kind == "mock":
        if isinstance(mock_table, MockBackend):
            return mock_table
        return MockBackend(table=dict(mock_table or {}))
    return HttpBackend(desc)


def query_backend(backend, req: PromptRequest, timeout_ms: int | None = None) -> str:
    """One call, no retries. ``backend`` is a descriptor or an instance with ``complete``."""
    if isinstance(backend, BackendDescriptor):
        backend = make_backend(backend)
    return backend.complete(req, timeout_ms)
