import json
import threading
from pathlib import Path

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keysg.errors import ParseFailure, ProviderError, ProviderTimeout
from keysg.providers import MockProvider, make_provider
from keysg.providers.base import (
    EMBED_DIM,
    embed_fixture_id,
    fnv1a,
    hash_embedding,
    read_fixture_id,
    rle_decode,
    rle_encode,
    token_slot,
    tokenize,
)
from keysg.providers.http import HttpProvider, load_provider_config
from keysg.providers.prompts import PROMPT_NAMES, load_prompt, render_prompt
from keysg.providers.runtime import CachingProvider, GuardedProvider

DATA = Path(__file__).parent / "data"


@pytest.fixture
def kitchen():
    return MockProvider(DATA / "kitchen_fixtures.json")


def image(fid=None):
    img = np.full((24, 32, 3), 90, np.uint8)
    return embed_fixture_id(img, fid) if fid else img


# ---------------------------------------------------------------- hashing embedder


def test_fnv1a_reference_values():
    # published FNV-1a 32-bit test vectors
    assert fnv1a(b"") == 0x811C9DC5
    assert fnv1a(b"a") == 0xE40C292C
    assert fnv1a(b"foobar") == 0xBF9CF968


def test_tokenizer_folds_case_and_splits_punctuation():
    assert tokenize("Where's the Mug? (kitchen_01)") == ["where", "s", "the", "mug", "kitchen", "01"]


def test_embed_text_deterministic(mock):
    assert np.array_equal(mock.embed_text("a").vector, mock.embed_text("a").vector)


def test_embedding_is_scale_invariant_bag(mock):
    assert mock.embed_text("mug") .vector @ mock.embed_text("mug mug").vector == pytest.approx(1.0, abs=1e-15)


def test_disjoint_tokens_are_orthogonal(mock):
    a, b = "mug table", "sofa lamp"
    slots_a = {token_slot(t) for t in tokenize(a)}
    slots_b = {token_slot(t) for t in tokenize(b)}
    assert not slots_a & slots_b  # no collision in this fixture
    assert mock.embed_text(a).vector @ mock.embed_text(b).vector == 0.0


def test_embedding_equals_bag_of_words_cosine():
    # counts {red: 2, mug: 1} vs {red: 1, cup: 1}: cos = 2 / (sqrt(5) sqrt(2))
    assert len({token_slot(t) for t in ("red", "mug", "cup")}) == 3
    got = hash_embedding("red red mug") @ hash_embedding("red cup")
    assert got == pytest.approx(2 / np.sqrt(10), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd", "Zs")), min_size=1).filter(lambda s: tokenize(s)))
def test_embeddings_unit_norm(text):
    v = hash_embedding(text)
    assert v.shape == (EMBED_DIM,)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-6


def test_empty_text_cannot_be_embedded(mock):
    with pytest.raises(ProviderError):
        mock.embed_text(" ,; ")


# ---------------------------------------------------------------- mock perception


def test_fixture_id_round_trip():
    assert read_fixture_id(image("kitchen_01")) == "kitchen_01"
    assert read_fixture_id(image()) is None


def test_tag_frame_from_table(kitchen):
    tags = kitchen.tag_frame(image("kitchen_01"))
    assert tags.object_tags == ["mug", "table"] and tags.functional_tags == ["handle"]
    unknown = kitchen.tag_frame(image())
    assert unknown.object_tags == [] and unknown.functional_tags == []


def test_detect_from_table(kitchen):
    dets = kitchen.detect(image("kitchen_01"), ["mug"])
    assert len(dets) == 1
    assert dets[0].box == (4, 10, 12, 16) and dets[0].mask.sum() == 48
    with pytest.raises(ProviderError):
        kitchen.detect(image("kitchen_01"), [])
    assert kitchen.detect(image("kitchen_01"), ["sofa"]) == []
    assert kitchen.detect(image(), ["mug"]) == []


def test_embed_image_uses_caption(kitchen):
    full = kitchen.embed_image(image("kitchen_01"))
    assert np.allclose(full.vector, hash_embedding("a mug on a table"), atol=1e-15)
    mask = np.zeros((24, 32), bool)
    mask[11:15, 5:10] = True
    crop = kitchen.embed_image(image("kitchen_01"), mask)
    assert np.allclose(crop.vector, hash_embedding("a white mug"), atol=1e-15)


def test_rle_round_trip(rng):
    for _ in range(20):
        m = rng.uniform(size=(7, 9)) < rng.uniform()
        assert np.array_equal(rle_decode(rle_encode(m), m.shape), m)


# ---------------------------------------------------------------- mock language


def test_describe_frame(mock):
    assert mock.describe_frame(None, ["mug", "table"]) == "Frame shows: mug, table"
    assert mock.describe_frame(None, []) == "Frame shows:"
    assert mock.describe_frame(None, ["table", "mug"]) == "Frame shows: table, mug"


def test_summarize(mock):
    assert mock.summarize(["a", "b"], "room") == "ROOM SUMMARY: a | b"
    assert mock.summarize(["only"], "room") == "ROOM SUMMARY: only"
    assert mock.summarize(["a", "b"], "floor") == "FLOOR SUMMARY: a | b"
    with pytest.raises(ValueError):
        mock.summarize(["a"], "building")


def test_room_summary_hint(mock):
    text = mock.summarize(["Frame shows: oven, table", "Frame shows: sink"], "room")
    assert text.endswith("| Likely a kitchen.")


def test_decompose_examples(mock):
    assert mock.decompose_hierarchical("the toilet in the bathroom on the ground floor") == {
        "floor": "ground floor", "room": "bathroom", "object": "toilet"}
    assert mock.decompose_hierarchical("oven in the kitchen") == {"floor": None, "room": "kitchen", "object": "oven"}


def test_parse_examples(mock):
    assert mock.parse_query("mug") == {"target": "mug", "anchors": []}
    assert mock.parse_query("Where is the lamp near the sofa?") == {"target": "lamp", "anchors": ["sofa"]}
    with pytest.raises(ParseFailure):
        mock.parse_query("where is the")


def test_mock_answer_cites_best_target(mock):
    ctx = [
        {"id": "object_0002", "type": "object", "role": "target", "score": 0.9, "label": "chair", "centroid": [0, 0, 0]},
        {"id": "object_0005", "type": "object", "role": "target", "score": 0.9, "label": "chair", "centroid": [5, 0, 0]},
        {"id": "object_0007", "type": "object", "role": "anchor", "score": 0.8, "label": "desk", "centroid": [5.5, 0, 0]},
    ]
    assert mock.generate_answer("the chair", ctx) == "The chair is object [object_0002]."
    assert mock.generate_answer("the chair near the desk", ctx) == "The chair is object [object_0005]."
    assert "[" not in mock.generate_answer("the chair", [])


def test_mock_is_pure(kitchen):
    a = [kitchen.tag_frame(image("kitchen_01")).to_dict(), kitchen.summarize(["x"], "floor")]
    b = [MockProvider(DATA / "kitchen_fixtures.json").tag_frame(image("kitchen_01")).to_dict(),
         MockProvider().summarize(["x"], "floor")]
    assert a == b


# ---------------------------------------------------------------- prompts


def test_prompt_templates_render():
    for name in PROMPT_NAMES:
        assert load_prompt(name).startswith("# version:")
    text = render_prompt("parse_query", query="the mug near the sink")
    assert "the mug near the sink" in text and '{"target"' in text


# ---------------------------------------------------------------- HTTP provider


def _transport(handler):
    return httpx.MockTransport(handler)


def test_http_status_mapping():
    def handler(request):
        return httpx.Response(429 if request.url.path == "/tag" else 400, json={})

    p = HttpProvider("http://x", transport=_transport(handler))
    with pytest.raises(ProviderError) as exc:
        p.tag_frame(image())
    assert exc.value.retryable and exc.value.status == 429
    with pytest.raises(ProviderError) as exc:
        p.summarize(["a"], "room")
    assert not exc.value.retryable


def test_http_timeout_maps_to_provider_timeout():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(ProviderTimeout):
        HttpProvider("http://x", transport=_transport(handler)).embed_text("mug")


def test_http_round_trip_payloads():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.url.path, body))
        if request.url.path == "/embed":
            return httpx.Response(200, json={"vector": [3.0, 4.0]})
        if request.url.path == "/decompose":
            return httpx.Response(200, json={"floor": None, "room": "kitchen", "object": "oven"})
        if request.url.path == "/parse":
            return httpx.Response(200, json={"target": ""})
        return httpx.Response(200, json={"text": "ok"})

    p = HttpProvider("http://x/", {"embed": "e-1", "summarize": "s-1"}, api_key="k", transport=_transport(handler))
    assert np.allclose(p.embed_text("mug").vector, [0.6, 0.8])
    assert p.summarize(["a", "b"], "floor") == "ok"
    assert p.decompose_hierarchical("oven in the kitchen")["room"] == "kitchen"
    with pytest.raises(ParseFailure):
        p.parse_query("mug")
    assert seen[0] == ("/embed", {"model": "e-1", "text": "mug"})
    assert seen[1][1]["model"] == "s-1" and "- a\n- b" in seen[1][1]["prompt"]


def test_provider_config_file(tmp_path, monkeypatch):
    path = tmp_path / "providers.toml"
    path.write_text('base_url = "http://localhost:9"\napi_key_env = "MY_KEY"\n[models]\nembed = "m"\n')
    monkeypatch.setenv("MY_KEY", "secret")
    cfg = load_provider_config(path)
    p = HttpProvider.from_config(cfg)
    assert p.models == {"embed": "m"} and p.client.headers["Authorization"] == "Bearer secret"
    (tmp_path / "bad.toml").write_text("x = 1\n")
    with pytest.raises(ProviderError):
        load_provider_config(tmp_path / "bad.toml")


# ---------------------------------------------------------------- runtime guard and cache


class Flaky(MockProvider):
    def __init__(self, failures, retryable=True):
        super().__init__()
        self.left = failures
        self.retryable = retryable
        self.calls = 0

    def embed_text(self, text):
        self.calls += 1
        if self.left > 0:
            self.left -= 1
            raise ProviderError("busy", 503, retryable=self.retryable)
        return super().embed_text(text)


def test_guard_retries_with_exponential_backoff():
    sleeps = []
    g = GuardedProvider(Flaky(2), retries=3, backoff=0.5, sleep=sleeps.append)
    assert g.embed_text("mug").vector.shape == (EMBED_DIM,)
    assert sleeps == [0.5, 1.0]
    assert g.stats()["retries"] == {"embed_text": 2}


def test_guard_gives_up():
    g = GuardedProvider(Flaky(5), retries=2, backoff=0.0, sleep=lambda s: None)
    with pytest.raises(ProviderError):
        g.embed_text("mug")
    assert g.stats()["failures"] == {"embed_text": 1}
    g = GuardedProvider(Flaky(1, retryable=False), retries=5, sleep=lambda s: None)
    with pytest.raises(ProviderError):
        g.embed_text("mug")
    assert g.inner.calls == 1


def test_guard_bounds_in_flight_calls():
    active, peak, lock = [0], [0], threading.Lock()

    class Slow(MockProvider):
        def embed_text(self, text):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            threading.Event().wait(0.01)
            with lock:
                active[0] -= 1
            return super().embed_text(text)

    g = GuardedProvider(Slow(), max_in_flight=2)
    threads = [threading.Thread(target=g.embed_text, args=(f"t{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2


def test_cache_replays_without_calls(tmp_path):
    counter = Flaky(0)
    first = CachingProvider(counter, tmp_path)
    v1 = first.embed_text("mug").vector
    assert counter.calls == 1
    inner = Flaky(0)
    second = CachingProvider(inner, tmp_path)
    assert np.array_equal(second.embed_text("mug").vector, v1)
    assert inner.calls == 0 and second.stats() == {"hits": 1, "misses": 0}


def test_cache_round_trips_detections(tmp_path, kitchen):
    live = CachingProvider(kitchen, tmp_path).detect(image("kitchen_01"), ["mug", "table"])
    replay = CachingProvider(MockProvider(), tmp_path).detect(image("kitchen_01"), ["mug", "table"])
    assert [(d.label, d.box, d.score, d.caption) for d in live] == [(d.label, d.box, d.score, d.caption) for d in replay]
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(live, replay))


def test_make_provider_env(monkeypatch, tmp_path):
    monkeypatch.setenv("KEYSG_MOCK", "1")
    monkeypatch.setenv("KEYSG_CACHE_DIR", str(tmp_path / "cache"))
    guard, cache = make_provider()
    assert guard.inner.name == "mock" and cache is not None and cache.root == tmp_path / "cache"
    monkeypatch.delenv("KEYSG_MOCK")
    with pytest.raises(FileNotFoundError):
        make_provider(providers_toml=tmp_path / "missing.toml")
