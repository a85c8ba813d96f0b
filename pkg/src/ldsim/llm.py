"""LLM access for the distillation steps.

A :class:`Gateway` renders a prompt template, consults a content-addressed
response cache and only then calls the configured backend.  Responses that
cannot be parsed are re-requested with a fresh attempt index (a new cache key),
so a rerun against a warm cache replays exactly the same sequence of answers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Callable, Iterable, Protocol, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")

TEMPLATE_IDS = ("relevance", "prerequisite", "mastery")
DEFAULT_RETRIES = 3

_PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TransportError(RuntimeError):
    """The backend could not be reached."""


class ParseError(ValueError):
    """The LLM answer does not have the expected form."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.text))

    def render(self, arguments: dict[str, str]) -> str:
        missing = self.placeholders - arguments.keys()
        if missing:
            raise KeyError(f"template {self.template_id!r}: unbound placeholder(s) {sorted(missing)}")
        extra = arguments.keys() - self.placeholders
        if extra:
            raise KeyError(f"template {self.template_id!r}: unknown argument(s) {sorted(extra)}")
        return Template(self.text).substitute({k: str(v) for k, v in arguments.items()})


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Read ``<id>.txt`` for every template id, from ``directory`` or the bundled set."""
    out = {}
    for tid in TEMPLATE_IDS:
        if directory is None:
            text = resources.files("ldsim.prompts").joinpath(f"{tid}.txt").read_text(encoding="utf-8")
        else:
            text = (Path(directory) / f"{tid}.txt").read_text(encoding="utf-8")
        out[tid] = PromptTemplate(tid, text)
    return out


def parse_binary(text: str) -> int:
    """Leading "yes" -> 1, leading "no" -> 0 (case-insensitive)."""
    m = re.match(r"\s*[\"'*]*([A-Za-z]+)", text or "")
    word = m.group(1).lower() if m else ""
    if word == "yes":
        return 1
    if word == "no":
        return 0
    raise ParseError(f"expected a yes/no answer, got {text[:60]!r}")


def parse_mastery(text: str) -> tuple[float, float]:
    """Extract ``{"mastery": m, "credit": s}`` with both values in [0, 1]."""
    start, end = (text or "").find("{"), (text or "").rfind("}")
    if start < 0 or end < start:
        raise ParseError(f"no JSON object in {text[:60]!r}")
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object")
    values = []
    for key in ("mastery", "credit"):
        v = obj.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"missing or non-numeric {key!r}")
        if not 0.0 <= v <= 1.0:
            raise ParseError(f"{key}={v} outside [0, 1]")
        values.append(float(v))
    return values[0], values[1]


def cache_key(template_id: str, arguments: dict[str, str], attempt: int = 0) -> str:
    payload = json.dumps({"template": template_id, "arguments": arguments, "attempt": attempt},
                         sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed store of LLM exchanges.

    With ``directory=None`` the cache lives in memory only.  On disk, each entry is
    ``<dir>/<key[:2]>/<key>.json``; an existing entry is never overwritten.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.directory is None:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        with self._lock:
            self._memory[key] = entry
        return entry

    def put(self, key: str, entry: dict) -> dict:
        """Store ``entry`` unless ``key`` is already present; return the canonical entry."""
        with self._lock:
            if key in self._memory:
                return self._memory[key]
            if self.directory is not None:
                path = self._path(key)
                path.parent.mkdir(exist_ok=True)
                try:
                    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
                except FileExistsError:
                    entry = json.loads(path.read_text(encoding="utf-8"))
                else:
                    with os.fdopen(fd, "w", encoding="utf-8") as fh:
                        json.dump(entry, fh, sort_keys=True, ensure_ascii=False)
            self._memory[key] = entry
            return entry

    def __len__(self) -> int:
        if self.directory is None:
            return len(self._memory)
        return sum(1 for _ in self.directory.glob("*/*.json"))


class Backend(Protocol):
    model_id: str

    def generate(self, prompt: str, template_id: str, arguments: dict[str, str]) -> str: ...


class HTTPBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, base_url: str, model_id: str, api_key_env: str = "LDSIM_API_KEY",
                 temperature: float | None = None, timeout: float = 60.0, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.temperature = temperature
        api_key = os.environ.get(api_key_env, "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def generate(self, prompt: str, template_id: str, arguments: dict[str, str]) -> str:
        import httpx

        body = {"model": self.model_id, "messages": [{"role": "user", "content": prompt}]}
        if self.temperature is not None:
            body["temperature"] = self.temperature
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"{self.base_url}: {exc}") from exc


class Gateway:
    """Cached, retrying access to one backend.

    ``retries`` bounds both transport retries inside :meth:`complete` and parse
    retries inside :meth:`ask`.  ``calls`` counts backend invocations.
    """

    def __init__(self, backend: Backend, cache: ResponseCache | None = None,
                 retries: int = DEFAULT_RETRIES, parallelism: int = 1,
                 templates: dict[str, PromptTemplate] | None = None, backoff: float = 0.0):
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache()
        self.retries = retries
        self.parallelism = max(1, parallelism)
        self.templates = templates or load_templates()
        self.backoff = backoff
        self.calls = 0
        self.cache_hits = 0
        self._count_lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def _lock_for(self, key: str) -> threading.Lock:
        with self._count_lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def complete(self, template_id: str, arguments: dict[str, str], attempt: int = 0) -> str:
        prompt = self.templates[template_id].render(arguments)
        key = cache_key(template_id, arguments, attempt)
        with self._lock_for(key):
            hit = self.cache.get(key)
            if hit is not None:
                with self._count_lock:
                    self.cache_hits += 1
                return hit["response"]
            last_exc = None
            for i in range(self.retries + 1):
                with self._count_lock:
                    self.calls += 1
                try:
                    text = self.backend.generate(prompt, template_id, arguments)
                    break
                except TransportError as exc:
                    last_exc = exc
                    logger.warning("backend error (attempt %d/%d): %s", i + 1, self.retries + 1, exc)
                    if self.backoff:
                        time.sleep(self.backoff * 2 ** i)
            else:
                raise TransportError(f"backend unreachable after {self.retries + 1} attempts") from last_exc
            entry = self.cache.put(key, {"template": template_id, "arguments": arguments,
                                         "attempt": attempt, "request": prompt, "response": text,
                                         "model": getattr(self.backend, "model_id", "")})
            return entry["response"]

    def ask(self, template_id: str, arguments: dict[str, str], parser: Callable[[str], T]) -> T:
        """Complete and parse, re-asking up to ``retries`` times on unparsable answers."""
        err = None
        for attempt in range(self.retries + 1):
            text = self.complete(template_id, arguments, attempt)
            try:
                return parser(text)
            except ParseError as exc:
                err = exc
                logger.debug("unparsable %s answer (attempt %d): %s", template_id, attempt, exc)
        raise ParseError(f"{template_id}: no parsable answer after {self.retries + 1} attempts: {err}")

    def map(self, fn: Callable[..., T], items: Iterable) -> list[T]:
        """Apply ``fn`` to ``items`` with at most ``parallelism`` calls in flight; order kept."""
        items = list(items)
        if self.parallelism == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            return list(pool.map(fn, items))
