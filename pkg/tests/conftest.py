from __future__ import annotations

import json

import pytest

from interweave.tools import mock_toolset


def tag(source: str, description: str, params: dict) -> str:
    payload = json.dumps(
        {"source": source, "description": description, "params": params},
        separators=(",", ":"),
    )
    return f"<imgen>{payload}</imgen>"


def search_tag(query: str = "eiffel tower photo", description: str = "Eiffel Tower") -> str:
    return tag("search", description, {"query": query})


def diffusion_tag(prompt: str = "a watercolor fox", description: str = "Fox") -> str:
    return tag("diffusion", description, {"prompt": prompt})


def code_tag(code: str = "x = 1\n", description: str = "Chart") -> str:
    return tag("code", description, {"code": code})


def edit_tag(img_index: int = 0, prompt: str = "add a yellow star", description: str = "Edit") -> str:
    return tag("edit", description, {"img index": img_index, "prompt": prompt})


@pytest.fixture
def toolset(tmp_path):
    return mock_toolset(tmp_path / "codework")
