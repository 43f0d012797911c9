import json
import os
import threading
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import requests

from config.settings import ModelConfig, model_config
from models.messages import ChatMessage, ToolCall
from utils.errors import ConfigError, HttpStatusError, ProtocolError, TransportError
from utils.logging import get_logger
from utils.text import stable_hash
from .base import Responder

logger = get_logger(__name__)

RETRY_STATUSES = {429, 500, 502, 503, 504}


class RateLimiter:
    """Spaces request starts at least 1/rate seconds apart across threads."""

    def __init__(self, requests_per_second: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / requests_per_second if requests_per_second > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


class ChatClient(Responder):
    """Talks to an OpenAI-compatible chat completions endpoint."""

    name = "openai_compat"

    def __init__(self, config: Optional[ModelConfig] = None, use_cache: bool = True, sleep=time.sleep):
        super().__init__()
        self.config = config or model_config
        self.api_key = os.getenv(self.config.api_key_env)
        if not self.api_key:
            raise ConfigError(f"environment variable {self.config.api_key_env} is not set")
        if self.config.temperature < 0:
            raise ConfigError("temperature must be >= 0")

        self.url = f"{self.config.endpoint_url.rstrip('/')}/v1/chat/completions"
        self.session = requests.Session()
        self.limiter = RateLimiter(self.config.requests_per_second, sleep=sleep)
        self.cache_dir = Path(self.config.cache_dir) if use_cache and self.config.cache_dir else None
        self._sleep = sleep
        self.cache_hits = 0

    @property
    def is_offline(self) -> bool:
        return False

    def build_payload(self, messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]] = None) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [message.to_wire() for message in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        if tools:
            payload["tools"] = tools
        if self.config.logprobs:
            payload["logprobs"] = True
        return payload

    def complete(self, messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]] = None,
                 hints: Any = None) -> ChatMessage:
        payload = self.build_payload(messages, tools)
        key = stable_hash(payload)

        cached = self._cache_read(key)
        if cached is not None:
            self.cache_hits += 1
            return parse_response(cached)

        body = self._post(payload)
        message = parse_response(body)
        self._cache_write(key, body)
        return message

    def _post(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        headers = {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json"
        }
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            self.limiter.wait()
            self.calls += 1
            last_try = attempt == attempts - 1
            try:
                resp = self.session.post(self.url, headers=headers, json=payload, timeout=self.config.timeout_s)
            except requests.RequestException as e:
                if last_try:
                    raise TransportError(f"request to {self.url} failed: {e}") from e
                logger.warning(f"Transport error ({e}), retry {attempt + 1}/{self.config.max_retries}")
                self._sleep(self.config.backoff_base_s * 2 ** attempt)
                continue

            if resp.status_code in RETRY_STATUSES and not last_try:
                logger.warning(f"HTTP {resp.status_code}, retry {attempt + 1}/{self.config.max_retries}")
                self._sleep(self.config.backoff_base_s * 2 ** attempt)
                continue
            if resp.status_code >= 400:
                raise HttpStatusError(resp.status_code, resp.text[:500])
            try:
                return resp.json()
            except ValueError as e:
                raise ProtocolError("response body is not JSON", resp.text) from e
        raise TransportError("retries exhausted")

    def _cache_read(self, key: str) -> Optional[Dict[str, Any]]:
        if self.cache_dir is None:
            return None
        path = self.cache_dir / f"{key}.json"
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def _cache_write(self, key: str, body: Dict[str, Any]):
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = self.cache_dir / f"{key}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(body, f)
        tmp.replace(self.cache_dir / f"{key}.json")


def parse_response(body: Any) -> ChatMessage:
    """Assistant message out of a chat completions body; ProtocolError carries the raw payload."""
    try:
        choice = body["choices"][0]
        wire = choice["message"]
    except (KeyError, IndexError, TypeError) as e:
        raise ProtocolError("response has no choices[0].message", body) from e

    calls = []
    for raw in wire.get("tool_calls") or []:
        try:
            function = raw["function"]
            arguments = function.get("arguments") or "{}"
            if isinstance(arguments, str):
                arguments = json.loads(arguments)
            calls.append(ToolCall(id=raw["id"], name=function["name"], arguments=arguments))
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed tool call: {e}", body) from e

    logprobs = None
    if isinstance(choice.get("logprobs"), dict) and choice["logprobs"].get("content"):
        logprobs = [float(item["logprob"]) for item in choice["logprobs"]["content"]]

    return ChatMessage(
        role="assistant",
        content=wire.get("content") or "",
        tool_calls=calls or None,
        logprobs=logprobs,
    )
