from __future__ import annotations

import hashlib
import io
import json
import os

import pytest
from PIL import Image

from interweave.tags import SourceKind
from interweave.tools import (
    AssetCache,
    ExecLimits,
    ImageAsset,
    MockDiffusionClient,
    MockEditClient,
    MockSandbox,
    MockSearchClient,
    SandboxScript,
    ToolError,
    ToolFailure,
    ToolOutcome,
    ToolProvenance,
    call_with_retries,
    canonical_params,
    params_digest,
)
from interweave.tools.live import decode_image_items
from interweave.tools.sandbox import CodeClient, ExecRequest


def expected_digest(params: dict) -> str:
    # Independent recomputation: lowercase keys, trimmed strings, sorted keys.
    canon = {
        key.lower(): (value.strip() if isinstance(value, str) else value)
        for key, value in params.items()
    }
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def test_canonicalization_rules():
    assert canonical_params({"Query": "  padded  ", "N": 2}) == {"query": "padded", "n": 2}


def test_params_digest_matches_independent_recomputation():
    params = {"query": "eiffel tower photo"}
    assert params_digest(params) == expected_digest(params)
    assert params_digest({"QUERY": " eiffel tower photo "}) == expected_digest(params)


def test_mock_search_returns_ranked_deterministic_assets():
    client = MockSearchClient()
    assets = client.search("eiffel tower photo", 2)
    assert len(assets) == 2
    digest = expected_digest({"query": "eiffel tower photo"})
    assert all(a.provenance.params_digest == digest for a in assets)
    assert assets[0].content != assets[1].content  # ranked variants
    again = client.search("eiffel tower photo", 2)
    assert [a.content for a in again] == [a.content for a in assets]


def test_mock_search_rejects_bad_preconditions():
    client = MockSearchClient()
    with pytest.raises(ValueError):
        client.search("", 1)
    with pytest.raises(ValueError):
        client.search("ok", 0)


def test_mock_diffusion_determinism_and_distinct_prompts():
    client = MockDiffusionClient()
    one = client.generate("a watercolor fox")
    two = client.generate("a watercolor fox")
    assert one.content == two.content
    other = client.generate("a watercolor owl")
    assert other.provenance.params_digest != one.provenance.params_digest


def test_mock_diffusion_accepts_huge_prompt():
    client = MockDiffusionClient()
    asset = client.generate("x" * 10_000)
    assert asset.media_type == "png"


def test_mock_edit_is_deterministic_and_base_sensitive():
    search = MockSearchClient()
    edit = MockEditClient()
    base_a = search.search("tower", 1)[0]
    base_b = search.search("bridge", 1)[0]
    first = edit.edit(base_a, "crop")
    second = edit.edit(base_a, "crop")
    assert first.content == second.content
    assert edit.edit(base_b, "crop").content != first.content
    with pytest.raises(ValueError):
        edit.edit(base_a, "")


def test_mock_png_carries_digest_metadata():
    asset = MockDiffusionClient().generate("a watercolor fox")
    image = Image.open(io.BytesIO(asset.content))
    assert image.text["digest"] == asset.provenance.params_digest
    assert image.text["source"] == "diffusion"


def test_asset_invariants():
    provenance = ToolProvenance(SourceKind.SEARCH, "d" * 64, "mock")
    with pytest.raises(ValueError):
        ImageAsset(b"", "png", provenance)
    with pytest.raises(ValueError):
        ImageAsset(b"x", "gif", provenance)
    with pytest.raises(ValueError):
        ToolProvenance(SourceKind.SEARCH, "d", "mock", attempts=0)
    with pytest.raises(ValueError):
        ToolProvenance(SourceKind.SEARCH, "d", "mock", latency=-1)
    with pytest.raises(ValueError):
        ToolFailure("nope")


def test_outcome_accessors():
    asset = MockDiffusionClient().generate("fox")
    ok = ToolOutcome(0, asset)
    bad = ToolOutcome(1, ToolFailure("timeout", "slow"))
    assert ok.ok and not bad.ok
    assert ok.asset is asset
    assert bad.failure.kind == "timeout"
    with pytest.raises(ValueError):
        _ = ok.failure
    with pytest.raises(ValueError):
        _ = bad.asset


def test_retry_helper_retries_remote_errors_only():
    calls = []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise ToolError("remote_error", "blip")
        return "ok"

    value, attempts = call_with_retries(flaky, retries=2, sleep=lambda _: None)
    assert value == "ok" and attempts == 3

    def sandbox_fail():
        raise ToolError("sandbox_error", "deterministic")

    with pytest.raises(ToolError) as err:
        call_with_retries(sandbox_fail, retries=2, sleep=lambda _: None)
    assert err.value.kind == "sandbox_error"

    always = lambda: (_ for _ in ()).throw(ToolError("remote_error", "down"))
    with pytest.raises(ToolError):
        call_with_retries(always, retries=1, sleep=lambda _: None)


def test_cache_round_trip_and_coherence(tmp_path):
    cache = AssetCache(tmp_path / "cache")
    asset = MockDiffusionClient().generate("a watercolor fox")
    digest = asset.provenance.params_digest
    assert cache.get(digest) is None
    cache.put(digest, asset)
    hit = cache.get(digest)
    assert hit is not None
    assert hit.content == asset.content
    assert hit.media_type == asset.media_type
    assert hit.provenance.attempts == asset.provenance.attempts  # attempts unchanged
    index = json.loads((tmp_path / "cache" / "index.json").read_text())
    assert index[digest]["media_type"] == "png"


def test_cache_survives_reload(tmp_path):
    root = tmp_path / "cache"
    asset = MockDiffusionClient().generate("fox")
    AssetCache(root).put(asset.provenance.params_digest, asset)
    reloaded = AssetCache(root).get(asset.provenance.params_digest)
    assert reloaded is not None and reloaded.content == asset.content


def test_mock_sandbox_dry_run_compiles(tmp_path):
    sandbox = MockSandbox()
    ok = sandbox.run(ExecRequest("x = 1", 5.0, str(tmp_path / "w1"), dry_run=True))
    assert ok.status == "ok"
    bad = sandbox.run(ExecRequest("def broken(:", 5.0, str(tmp_path / "w2"), dry_run=True))
    assert bad.status == "error"
    assert "SyntaxError" in bad.stderr
    assert sandbox.dry_count == 2 and sandbox.exec_count == 0


def test_code_client_success_over_mock_protocol(tmp_path):
    client = CodeClient(MockSandbox(), tmp_path, backend="mock")
    asset = client.execute("x = 1\n", ExecLimits())
    assert asset.media_type == "png"
    assert asset.provenance.source is SourceKind.CODE
    assert asset.provenance.params_digest == expected_digest({"code": "x = 1\n"})


def test_code_client_failure_carries_traceback_detail(tmp_path):
    traceback_text = 'Traceback (most recent call last):\n  File "<script>", line 1\nNameError: boom'
    sandbox = MockSandbox({"boom()": SandboxScript("error", stderr=traceback_text)})
    client = CodeClient(sandbox, tmp_path, backend="mock")
    with pytest.raises(ToolError) as err:
        client.execute("boom()", ExecLimits())
    assert err.value.kind == "sandbox_error"
    assert "NameError" in err.value.detail


def test_code_client_timeout_maps_to_timeout_kind(tmp_path):
    sandbox = MockSandbox({"while True: pass": SandboxScript("timeout")})
    client = CodeClient(sandbox, tmp_path, backend="mock")
    with pytest.raises(ToolError) as err:
        client.execute("while True: pass", ExecLimits(timeout_s=2.0))
    assert err.value.kind == "timeout"


def test_code_client_rejects_empty_code(tmp_path):
    client = CodeClient(MockSandbox(), tmp_path)
    with pytest.raises(ValueError):
        client.execute("", ExecLimits())


@pytest.mark.skipif(
    not os.environ.get("IWV_LIVE_TESTS"),
    reason="live contract test; set IWV_LIVE_TESTS=1 with IWV_SEARCH_URL configured",
)
def test_live_search_contract():
    from interweave.config import load_config
    from interweave.tools.live import HttpSearchClient

    cfg = load_config(os.environ.get("IWV_CONFIG"))
    client = HttpSearchClient(cfg.endpoint("search"))
    try:
        assets = client.search("eiffel tower photo", 1)
    except ToolError as err:
        assert err.kind in ("remote_error", "timeout")
    else:
        assert len(assets) >= 1
        assert assets[0].content


def test_decode_image_items_round_trip():
    import base64

    content = MockDiffusionClient().generate("fox").content
    items = [{"image_b64": base64.b64encode(content).decode(), "media_type": "png"}]
    assets = decode_image_items(
        items, source=SourceKind.SEARCH, digest="d" * 64, backend="live", latency=0.1, attempts=2
    )
    assert assets[0].content == content
    assert assets[0].provenance.attempts == 2
    with pytest.raises(ToolError):
        decode_image_items(
            [], source=SourceKind.SEARCH, digest="d", backend="live", latency=0.0, attempts=1
        )
    with pytest.raises(ToolError):
        decode_image_items(
            [{"media_type": "png"}],
            source=SourceKind.SEARCH, digest="d", backend="live", latency=0.0, attempts=1,
        )
