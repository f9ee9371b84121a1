"""Thin HTTP adapters for live tool backends.

Endpoints speak a small generic JSON shape; vendor-specific schemas are
expected to be adapted by a gateway configured per deployment. Each client
retries remote errors with exponential backoff and records the attempt count
in the asset provenance.
"""
from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass

from ..tags import SourceKind
from .base import ImageAsset, ToolError, ToolProvenance, call_with_retries, params_digest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    api_key: str = ""
    model: str = ""
    timeout_s: float = 30.0
    retries: int = 2


def _post_json(endpoint: EndpointConfig, payload: dict) -> dict:
    import requests

    headers = {"Content-Type": "application/json"}
    if endpoint.api_key:
        headers["Authorization"] = f"Bearer {endpoint.api_key}"
    try:
        response = requests.post(endpoint.url, json=payload, headers=headers, timeout=endpoint.timeout_s)
    except requests.Timeout as err:
        raise ToolError("timeout", str(err)) from err
    except requests.RequestException as err:
        raise ToolError("remote_error", str(err)) from err
    if response.status_code >= 400:
        raise ToolError("remote_error", f"upstream status {response.status_code}: {response.text[:500]}")
    try:
        return response.json()
    except ValueError as err:
        raise ToolError("remote_error", f"non-JSON upstream reply: {err}") from err


def decode_image_items(items: list, *, source: SourceKind, digest: str, backend: str, latency: float, attempts: int) -> list[ImageAsset]:
    """Decode ``{"image_b64", "media_type"}`` result items into assets."""
    assets = []
    for item in items:
        try:
            content = base64.b64decode(item["image_b64"])
            media = str(item.get("media_type", "png"))
        except (KeyError, TypeError, ValueError) as err:
            raise ToolError("remote_error", f"malformed result item: {err}") from err
        assets.append(ImageAsset(content, media, ToolProvenance(source, digest, backend, latency, attempts)))
    if not assets:
        raise ToolError("remote_error", "upstream returned no results")
    return assets


class HttpSearchClient:
    backend = "live"

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint

    def search(self, query: str, count: int = 1) -> list[ImageAsset]:
        if not query:
            raise ValueError("query must be non-empty")
        if count < 1:
            raise ValueError("count must be >= 1")
        digest = params_digest({"query": query})
        started = time.monotonic()
        payload = {"query": query, "count": count, "model": self.endpoint.model}
        reply, attempts = call_with_retries(
            lambda: _post_json(self.endpoint, payload), retries=self.endpoint.retries
        )
        latency = time.monotonic() - started
        return decode_image_items(
            reply.get("results", [])[:count],
            source=SourceKind.SEARCH, digest=digest, backend=self.backend,
            latency=latency, attempts=attempts,
        )


class HttpDiffusionClient:
    backend = "live"

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint

    def generate(self, prompt: str) -> ImageAsset:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        digest = params_digest({"prompt": prompt})
        started = time.monotonic()
        payload = {"prompt": prompt, "model": self.endpoint.model}
        reply, attempts = call_with_retries(
            lambda: _post_json(self.endpoint, payload), retries=self.endpoint.retries
        )
        latency = time.monotonic() - started
        return decode_image_items(
            reply.get("results", []),
            source=SourceKind.DIFFUSION, digest=digest, backend=self.backend,
            latency=latency, attempts=attempts,
        )[0]


class HttpEditClient:
    backend = "live"

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint

    def edit(self, base: ImageAsset, prompt: str) -> ImageAsset:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        digest = params_digest({"prompt": prompt, "base": base.content_digest()})
        started = time.monotonic()
        payload = {
            "prompt": prompt,
            "model": self.endpoint.model,
            "image_b64": base64.b64encode(base.content).decode("ascii"),
            "media_type": base.media_type,
        }
        reply, attempts = call_with_retries(
            lambda: _post_json(self.endpoint, payload), retries=self.endpoint.retries
        )
        latency = time.monotonic() - started
        return decode_image_items(
            reply.get("results", []),
            source=SourceKind.EDIT, digest=digest, backend=self.backend,
            latency=latency, attempts=attempts,
        )[0]


class HttpTextClient:
    """Chat/completion endpoint used for generation, judging and selection."""

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint

    def complete(self, prompt: str) -> str:
        payload = {"prompt": prompt, "model": self.endpoint.model, "temperature": 0}
        reply, _ = call_with_retries(
            lambda: _post_json(self.endpoint, payload), retries=self.endpoint.retries
        )
        text = reply.get("text")
        if not isinstance(text, str):
            raise ToolError("remote_error", "upstream reply carries no text field")
        return text
