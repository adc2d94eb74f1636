import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from premir.corpus import Component, Corpus, Document, OcrBlock, Passage
from premir.errors import ArtifactMissingError, ConfigError
from premir.gateway import MockBackend, ModelGateway, ProviderConfig
from premir.preq import (GenConfig, PreQ, RetrievalPool, build_pool, dedupe_and_cap,
                         generate_for_passage, load_pool, parse_modalities, preq_id, save_pool)


def gateway(responder=None, per_image=2):
    return ModelGateway(ProviderConfig(embed_dimension=64), MockBackend(64, per_image, responder))


def questions(*qs):
    return json.dumps([{"question": q} for q in qs])


def page(pid="d0/p0", n_comps=0, text="alpha\n\nbeta"):
    comps = tuple(Component(f"{pid}/c{i}", "figure", f"c{i}.png", 10 + i, f"cap {i}")
                  for i in range(n_comps))
    blocks = tuple(OcrBlock(t, i) for i, t in enumerate(text.split("\n\n")))
    return Passage(pid, f"{pid}.png", comps, blocks, document_id=pid.split("/")[0])


def test_text_only_passage():
    gw = gateway(lambda r: questions("a?", "b?", "c?") if r.task == "textual" else None)
    out = generate_for_passage(page(), GenConfig(modalities_enabled="t"), gw)
    assert [q.modality for q in out] == ["T", "T", "T"]
    assert [q.id for q in out] == ["d0/p0:T:0", "d0/p0:T:1", "d0/p0:T:2"]


def test_visual_fan_out_per_component():
    out = generate_for_passage(page(n_comps=2), GenConfig(modalities_enabled=["V"]), gateway())
    assert len(out) == 4
    assert sorted({q.source_component_id for q in out}) == ["d0/p0/c0", "d0/p0/c1"]
    assert out[0].id == "d0/p0:V:d0/p0/c0:0"


def test_cap_applies_per_source():
    sixty = questions(*[f"m{i}?" for i in range(60)])
    gw = gateway(lambda r: sixty if r.task in ("multimodal", "visual") else None)
    out = generate_for_passage(page(n_comps=2), GenConfig(50, "m,v"), gw)
    counts = {}
    for q in out:
        counts[(q.modality, q.source_component_id)] = counts.get((q.modality, q.source_component_id), 0) + 1
    assert counts == {("M", None): 50, ("V", "d0/p0/c0"): 50, ("V", "d0/p0/c1"): 50}


def test_all_modalities_one_component():
    out = generate_for_passage(page(n_comps=1, text="only block"), GenConfig(), gateway())
    # the surrogate holds the OCR block and the caption, one mock question each
    assert [q.modality for q in out] == ["M", "M", "V", "V", "T", "T"]
    assert out[-1].text == "what about [figure] cap 0?"


def test_all_modalities_two_questions_each():
    gw = gateway(lambda r: questions("x?", "y?") if r.task == "textual" else None)
    assert len(generate_for_passage(page(n_comps=1), GenConfig(), gw)) == 6


def test_empty_visual_answer_gives_no_visual_preqs():
    gw = gateway(lambda r: "[]" if r.task == "visual" else None)
    out = generate_for_passage(page(n_comps=1), GenConfig(modalities_enabled="v,t"), gw)
    assert {q.modality for q in out} == {"T"}
    assert not generate_for_passage(page(n_comps=0), GenConfig(modalities_enabled="v"), gateway())


def test_generation_failure_is_partial_not_fatal(caplog):
    gw = gateway(lambda r: "broken" if r.task == "multimodal" else None)
    c = Corpus([Document("d0", (page(),))])
    pool = build_pool(c, GenConfig(), gw)
    entry = pool.report["passages"][0]
    assert entry["partial"] and entry["counts"]["M"] == 0 and entry["counts"]["T"] == 2
    assert "M generation failed" in caplog.text


@pytest.mark.parametrize("items,n,expected", [
    (["a", "b", "a"], 50, ["a", "b"]),
    ([f"q{i}" for i in range(60)], 50, [f"q{i}" for i in range(50)]),
    ([], 50, []),
])
def test_dedupe_and_cap(items, n, expected):
    assert dedupe_and_cap(items, n) == expected


@given(st.lists(st.sampled_from("abcdefg"), max_size=30), st.integers(1, 10))
def test_dedupe_and_cap_properties(items, n):
    out = dedupe_and_cap(items, n)
    assert len(out) == min(n, len(set(items)))
    assert len(set(out)) == len(out)
    # first occurrences, in order
    firsts = list(dict.fromkeys(items))
    assert out == firsts[:n]


def test_zero_cap_rejected():
    with pytest.raises(ConfigError):
        GenConfig(max_questions_per_source=0)


def test_modalities_parsing():
    assert parse_modalities("t, m") == ("M", "T")
    with pytest.raises(ConfigError):
        parse_modalities("x")
    with pytest.raises(ConfigError):
        parse_modalities("")


def test_preq_component_invariant():
    with pytest.raises(ValueError):
        PreQ("i", "q", "V", "p")
    with pytest.raises(ValueError):
        PreQ("i", "q", "T", "p", "c")
    assert preq_id("p", "V", 3, "c") == "p:V:c:3"


def test_pool_by_passage_and_embeddings():
    gw = gateway(lambda r: questions("a?", "b?", "c?") if r.task == "textual" else None)
    corpus = Corpus([Document("d0", (page("d0/p0"), page("d0/p1")))])
    pool = build_pool(corpus, GenConfig(modalities_enabled="t"), gw)
    assert len(pool) == 6
    assert {k: len(v) for k, v in pool.by_passage.items()} == {"d0/p0": 3, "d0/p1": 3}
    assert pool.embedded and pool.embedding_matrix().shape == (6, 64)


def test_workers_do_not_change_pool():
    corpus = Corpus([Document("d0", tuple(page(f"d0/p{i}", n_comps=i % 3) for i in range(9)))])
    a = build_pool(corpus, GenConfig(), gateway(), workers=1)
    b = build_pool(corpus, GenConfig(), gateway(), workers=4)
    assert a.preqs == b.preqs and a.report == b.report
    assert np.array_equal(a.embedding_matrix(), b.embedding_matrix())


def test_filter_keeps_order():
    corpus = Corpus([Document("d0", (page(n_comps=1),))])
    pool = build_pool(corpus, GenConfig(), gateway())
    sub = pool.filter("t,m")
    assert [q.id for q in sub.preqs] == [q.id for q in pool.preqs if q.modality != "V"]


def test_store_roundtrip(tmp_path):
    corpus = Corpus([Document("d0", (page(n_comps=1), page("d0/p1")))])
    pool = build_pool(corpus, GenConfig(), gateway())
    save_pool(pool, tmp_path / "store")
    back = load_pool(tmp_path / "store")
    assert back.preqs == pool.preqs and back.report == pool.report
    assert np.array_equal(back.embedding_matrix(), pool.embedding_matrix())


def test_missing_store(tmp_path):
    with pytest.raises(ArtifactMissingError, match="run generate"):
        load_pool(tmp_path)


def test_empty_pool_roundtrip(tmp_path):
    save_pool(RetrievalPool.from_preqs([]), tmp_path)
    assert len(load_pool(tmp_path)) == 0
