"""Runtime configuration: config file plus environment overrides.

The config file is JSON. Credentials are normally supplied through
environment variables (``IWV_<SECTION>_KEY``); URL and model fields can be
overridden the same way, so a config file never has to contain secrets.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

from .tools.live import EndpointConfig
from .tts import TtsConfig

_ENDPOINT_SECTIONS = ("search", "diffusion", "edit", "generator", "llm_judge", "mllm_judge")


@dataclass
class AppConfig:
    backend: str = "mock"  # mock | live
    parallelism: int = 4
    cache_dir: str | None = None
    work_root: str | None = None
    sandbox_root: str | None = None
    runner_cmd: list[str] = field(default_factory=list)
    mock_latency: float = 0.0
    timeout_s: float = 30.0
    output_cap: int = 32768
    tts: TtsConfig = field(default_factory=TtsConfig)
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)

    def endpoint(self, section: str) -> EndpointConfig:
        try:
            return self.endpoints[section]
        except KeyError:
            raise ValueError(f"backend 'live' requires an endpoint config for {section!r}") from None

    def resolved_work_root(self) -> Path:
        if self.work_root:
            root = Path(self.work_root)
            root.mkdir(parents=True, exist_ok=True)
            return root
        return Path(tempfile.mkdtemp(prefix="interweave-work-"))


def _endpoint_from_dict(section: str, raw: dict) -> EndpointConfig:
    known = {f.name for f in fields(EndpointConfig)} | {"api_key_env"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"endpoint {section!r} has unknown fields: {unknown}")
    key_env = raw.get("api_key_env", "")
    api_key = raw.get("api_key", "")
    if key_env:
        api_key = os.environ.get(key_env, api_key)
    return EndpointConfig(
        url=raw.get("url", ""),
        api_key=api_key,
        model=raw.get("model", ""),
        timeout_s=float(raw.get("timeout_s", 30.0)),
        retries=int(raw.get("retries", 2)),
    )


def load_config(path: str | Path | None = None) -> AppConfig:
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError("config file must contain a JSON object")
    cfg = AppConfig(
        backend=raw.get("backend", "mock"),
        parallelism=int(raw.get("parallelism", 4)),
        cache_dir=raw.get("cache_dir"),
        work_root=raw.get("work_root"),
        sandbox_root=raw.get("sandbox_root"),
        runner_cmd=list(raw.get("runner_cmd", [])),
        mock_latency=float(raw.get("mock_latency", 0.0)),
        timeout_s=float(raw.get("timeout_s", 30.0)),
        output_cap=int(raw.get("output_cap", 32768)),
        tts=TtsConfig(**raw.get("tts", {})),
        endpoints={
            section: _endpoint_from_dict(section, raw[section])
            for section in _ENDPOINT_SECTIONS
            if section in raw
        },
    )
    return _apply_env(cfg)


def _apply_env(cfg: AppConfig) -> AppConfig:
    backend = os.environ.get("IWV_BACKEND")
    if backend:
        cfg.backend = backend
    parallelism = os.environ.get("IWV_PARALLELISM")
    if parallelism:
        cfg.parallelism = int(parallelism)
    cache_dir = os.environ.get("IWV_CACHE_DIR")
    if cache_dir:
        cfg.cache_dir = cache_dir
    for section in _ENDPOINT_SECTIONS:
        prefix = f"IWV_{section.upper()}_"
        url = os.environ.get(prefix + "URL")
        key = os.environ.get(prefix + "KEY")
        model = os.environ.get(prefix + "MODEL")
        if not (url or key or model):
            continue
        base = cfg.endpoints.get(section, EndpointConfig(url=""))
        cfg.endpoints[section] = EndpointConfig(
            url=url or base.url,
            api_key=key or base.api_key,
            model=model or base.model,
            timeout_s=base.timeout_s,
            retries=base.retries,
        )
    return cfg
