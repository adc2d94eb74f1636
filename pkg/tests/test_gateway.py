import base64
import json
import threading
import time

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from premir.errors import ConfigError, GatewayError, GenerationError, RankingError, TransportError
from premir.gateway import (ChatRequest, LiveBackend, MockBackend, ModelGateway, PromptLibrary,
                            ProviderConfig, parse_question_list, parse_rank_output)


def mock(d=256, responder=None):
    return ModelGateway(ProviderConfig(embed_dimension=d), MockBackend(d, responder=responder))


# --- captions ------------------------------------------------------------


def test_mock_caption_format_and_determinism():
    gw = mock()
    assert gw.caption_component("img/fig1.png", "figure") == "caption(figure:img/fig1.png)"
    assert gw.caption_component("img/fig1.png", "figure") == gw.caption_component("img/fig1.png", "figure")


def test_empty_caption_retried_then_fails():
    gw = mock(responder=lambda r: "  ")
    with pytest.raises(GenerationError):
        gw.caption_component("a.png", "table")
    assert gw.calls["caption"] == gw.config.retry_limit + 1


# --- question parsing ----------------------------------------------------


def test_question_list_parsing():
    assert parse_question_list('[{"question":"Q1"},{"question":"Q2"}]') == ["Q1", "Q2"]
    assert parse_question_list("[]") == []
    assert parse_question_list('```json\n[{"question": "x"}]\n```') == ["x"]
    assert parse_question_list('Here you go: [{"question": "y"}] thanks') == ["y"]
    assert parse_question_list('{"questions": ["a", {"question": "b"}]}') == ["a", "b"]
    with pytest.raises(ValueError):
        parse_question_list("not json")


def test_unparseable_questions_raise_after_retries():
    gw = mock(responder=lambda r: "not json")
    with pytest.raises(GenerationError) as exc:
        gw.generate_questions("textual", "some text", 5)
    assert exc.value.raw_output == "not json"
    assert gw.calls["textual"] == gw.config.retry_limit + 1


def test_generation_recovers_on_retry():
    replies = iter(["garbage", '[{"question": "ok?"}]'])
    gw = mock(responder=lambda r: next(replies))
    assert gw.generate_questions("visual", "a.png", 5) == ["ok?"]


def test_question_cap_applied():
    many = json.dumps([{"question": f"q{i}"} for i in range(60)])
    gw = mock(responder=lambda r: many)
    assert len(gw.generate_questions("multimodal", "page.png", 50)) == 50


def test_prompt_receives_cap_and_text():
    seen = []
    gw = mock(responder=lambda r: seen.append(r) or "[]")
    gw.generate_questions("textual", "DOC BODY", 7)
    prompt = seen[0].prompt
    assert "DOC BODY" in prompt and "7" in prompt
    assert "{document_text}" not in prompt and "{cfg.max_new_questions}" not in prompt
    assert seen[0].model == gw.config.textual_model_name


# --- rank parsing --------------------------------------------------------


def test_rank_output_parsing():
    assert parse_rank_output("2,1,4,3,5", 5) == [2, 1, 4, 3, 5]
    assert parse_rank_output(" 3 , 1,2 ", 5) == [3, 1, 2]
    assert parse_rank_output("3,3,9,0,x,1", 5) == [3, 1]
    assert parse_rank_output("1,2,3,4,5,6,7", 10) == [1, 2, 3, 4, 5]
    assert parse_rank_output(None, 3) == []


def test_rank_without_numbers_raises():
    gw = mock(responder=lambda r: "sure! the best is group two")
    with pytest.raises(RankingError):
        gw.rank_groups_llm("q", "Group 1:\n  - a", 1)


@given(st.text(max_size=60), st.integers(1, 40))
def test_rank_parse_never_crashes(raw, m):
    out = parse_rank_output(raw, m)
    assert len(out) <= 5 and len(set(out)) == len(out)
    assert all(1 <= n <= m for n in out)


# --- prompts -------------------------------------------------------------


def test_prompt_render_only_touches_named_slots():
    lib = PromptLibrary()
    text = lib.render("rank", {"query": "QQ", "questions_text": "GROUPS"})
    assert "QQ" in text and "GROUPS" in text
    assert "{query}" not in text


def test_missing_prompt_dir_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        PromptLibrary(tmp_path)


# --- embeddings ----------------------------------------------------------


def test_mock_embedding_normalisation_identity():
    gw = mock(8)
    a, b = gw.embed_texts(["a a", "a"])
    assert np.array_equal(a, b)


@given(st.lists(st.text(min_size=1).filter(str.strip), min_size=1, max_size=5))
def test_mock_embeddings_unit_norm(texts):
    v = mock(32).embed_texts(texts)
    assert v.dtype == np.float32
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)


def test_mock_embedding_deterministic():
    assert mock().embed_query("apple pie").tobytes() == mock().embed_query("apple pie").tobytes()


def test_embed_rejects_empty_text():
    with pytest.raises(ValueError):
        mock().embed_texts(["ok", " "])


def test_embedding_dimension_mismatch():
    gw = ModelGateway(ProviderConfig(embed_dimension=16), MockBackend(8))
    with pytest.raises(GatewayError, match="dimension"):
        gw.embed_texts(["x"])


def test_config_validation():
    with pytest.raises(ConfigError):
        ProviderConfig(backend="other")
    with pytest.raises(ConfigError):
        ProviderConfig(max_parallel_requests=0)


# --- live backend over a fake transport ------------------------------------


def live(handler, **cfg):
    config = ProviderConfig(backend="live", endpoint_url="http://fake/v1", **cfg)
    client = httpx.Client(base_url="http://fake/v1/", transport=httpx.MockTransport(handler))
    backend = LiveBackend(config, client=client, sleep=lambda s: None)
    return ModelGateway(config, backend), backend


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_live_chat_wire_format_with_image(tmp_path):
    img = tmp_path / "fig.png"
    img.write_bytes(b"\x89PNGfake")
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        assert request.url.path == "/v1/chat/completions"
        return chat_reply("a bar chart")

    gw, _ = live(handler)
    assert gw.caption_component("fig.png", "chart", root=tmp_path) == "a bar chart"
    body = bodies[0]
    assert body["model"] == "gpt-4o-mini" and body["temperature"] == 0.0
    content = body["messages"][0]["content"]
    assert content[0]["type"] == "text"
    url = content[1]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == b"\x89PNGfake"


def test_live_unreadable_image_is_gateway_error(tmp_path):
    gw, _ = live(lambda r: chat_reply("x"))
    with pytest.raises(GatewayError, match="cannot read image"):
        gw.caption_component("missing.png", "figure", root=tmp_path)


def test_live_retries_429_and_5xx():
    statuses = iter([429, 503, 200])
    sleeps = []

    def handler(request):
        code = next(statuses)
        return chat_reply("1,2") if code == 200 else httpx.Response(code)

    config = ProviderConfig(backend="live", endpoint_url="http://fake/v1", backoff_base=0.5)
    client = httpx.Client(base_url="http://fake/v1/", transport=httpx.MockTransport(handler))
    gw = ModelGateway(config, LiveBackend(config, client=client, sleep=sleeps.append))
    assert gw.rank_groups_llm("q", "Group 1:", 2) == [1, 2]
    assert sleeps == [0.5, 1.0]


def test_live_does_not_retry_client_errors():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    gw, _ = live(handler)
    with pytest.raises(TransportError, match="400"):
        gw.rank_groups_llm("q", "Group 1:", 1)
    assert len(calls) == 1


def test_live_gives_up_after_retry_limit():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("down")

    gw, _ = live(handler, retry_limit=2)
    with pytest.raises(TransportError):
        gw.embed_texts(["x"])
    assert len(calls) == 3


def test_live_embeddings_batched_and_reordered():
    batches = []

    def handler(request):
        body = json.loads(request.content)
        batches.append(body["input"])
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    gw, _ = live(handler, embed_batch_size=2)
    v = gw.embed_texts(["a", "bbb", "cc"])
    assert batches == [["a", "bbb"], ["cc"]]
    assert v.shape == (3, 2)
    assert np.allclose(v[1], np.array([3, 1]) / np.sqrt(10))


def test_live_parallelism_bounded():
    def handler(request):
        time.sleep(0.02)
        return chat_reply("caption")

    gw, backend = live(handler, max_parallel_requests=3)
    threads = [threading.Thread(target=gw.caption_component, args=("data:image/png;base64,AA", "figure"))
               for _ in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert 1 <= backend.max_inflight <= 3
    assert gw.calls["caption"] == 12


def test_chat_request_defaults():
    r = ChatRequest("rank", "p", "m")
    assert r.images == () and r.context == {}
