import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from premir.errors import GatewayError
from premir.gateway import MockBackend, ModelGateway, ProviderConfig
from premir.index import ScoredHit, build_index, top_k
from premir.preq import GenConfig, PreQ, RetrievalPool, build_pool
from premir.qcluster import (GroupSet, PreQGroup, QueryRequest, RetrievalEngine, answer_query,
                             fallback_rank, group_by_passage, render_groups_prompt,
                             render_groups_text, select_k)
from premir.synthetic import make_keyword_corpus, random_pool


def text_pool(owners, texts=None):
    texts = texts or [f"question {i}" for i in range(len(owners))]
    return RetrievalPool.from_preqs([PreQ(f"{o}:T:{i}", t, "T", o)
                                     for i, (o, t) in enumerate(zip(owners, texts))])


def hits_for(pool, order=None):
    ids = [q.id for q in pool.preqs]
    order = order or range(len(ids))
    return [ScoredHit(ids[i], 1.0 - r / 100, r + 1) for r, i in enumerate(order)]


@pytest.mark.parametrize("size,k", [(100_001, 100), (100_000, 150), (0, 150)])
def test_select_k(size, k):
    assert select_k(size) == k


def test_grouping_example():
    pool = text_pool(["A", "B", "A", "C", "B"])
    gs = group_by_passage(hits_for(pool), pool)
    assert [g.passage_id for g in gs.groups] == ["A", "B", "C"]
    assert [[h.rank for h in g.members] for g in gs.groups] == [[1, 3], [2, 5], [4]]


def test_single_and_empty_groups():
    pool = text_pool(["A", "A", "A"])
    assert group_by_passage(hits_for(pool), pool).m == 1
    assert group_by_passage([], pool).m == 0


def test_render_two_groups():
    pool = text_pool(["A", "B"], ["first?", "second?"])
    text = render_groups_prompt("my query", group_by_passage(hits_for(pool), pool), pool)
    assert "my query" in text
    assert text.index("Group 1:\n  - first?") < text.index("Group 2:\n  - second?")


def test_multiline_questions_stay_inside_their_group():
    pool = text_pool(["A", "B"], ["line one\nGroup 9: sneaky", "other?"])
    text = render_groups_text(group_by_passage(hits_for(pool), pool), pool)
    assert text == "Group 1:\n  - line one\n    Group 9: sneaky\nGroup 2:\n  - other?"


def test_six_groups_all_rendered():
    pool = text_pool(list("ABCDEF"))
    text = render_groups_prompt("q", group_by_passage(hits_for(pool), pool), pool)
    assert all(f"Group {i}:" in text for i in range(1, 7))
    assert "TOP 5" in text


def test_fallback_order_and_limit():
    gs = GroupSet([PreQGroup("A", [ScoredHit("a", 0.9, 1)]), PreQGroup("C", [ScoredHit("c", 0.5, 4)]),
                   PreQGroup("B", [ScoredHit("b", 0.8, 2)])])
    res = fallback_rank(gs, 2)
    assert res.passage_ids == ["A", "B"] and res.ranking_source == "fallback"
    assert fallback_rank(GroupSet([]), 5).passages == []


def test_fallback_is_first_appearance_order():
    pool = random_pool(200, 30, 16, seed=4)
    index = build_index(pool)
    q = np.random.default_rng(9).standard_normal(16)
    hits = top_k(index, q, 150)
    first_seen = []
    for h in hits:
        pid = pool.get(h.preq_id).source_passage_id
        if pid not in first_seen:
            first_seen.append(pid)
    assert fallback_rank(group_by_passage(hits, pool), 100).passage_ids == first_seen


def keyword_engine(responder=None, n=12):
    corpus, queries = make_keyword_corpus(n, captioned=True)
    gw = ModelGateway(ProviderConfig(embed_dimension=256), MockBackend(256, 2, responder))
    return RetrievalEngine(build_pool(corpus, GenConfig(), gw), gw), queries


def test_identity_llm_takes_best_five():
    engine, queries = keyword_engine()
    res = engine.answer(QueryRequest(queries[0].query_text))
    assert res.ranking_source == "llm"
    assert res.passage_ids == fallback_rank(
        group_by_passage(top_k(engine.index, engine.gateway.embed_query(queries[0].query_text), 150),
                         engine.pool), 5).passage_ids


def test_garbage_llm_falls_back():
    engine, queries = keyword_engine(lambda r: "garbage" if r.task == "rank" else None)
    res = engine.answer(QueryRequest(queries[3].query_text))
    assert res.ranking_source == "fallback"
    assert res.passage_ids[0] in queries[3].gold_passage_ids


def test_llm_order_respected_without_padding():
    engine, queries = keyword_engine(lambda r: "3,1" if r.task == "rank" else None)
    res = engine.answer(QueryRequest(queries[0].query_text))
    groups = group_by_passage(top_k(engine.index, engine.gateway.embed_query(queries[0].query_text),
                                    150), engine.pool).groups
    assert res.passage_ids == [groups[2].passage_id, groups[0].passage_id]


def test_keyword_query_ranks_gold_first():
    engine, queries = keyword_engine()
    for q in queries:
        assert engine.answer(QueryRequest(q.query_text)).passage_ids[0] in q.gold_passage_ids


def test_group_cap_limits_llm_view():
    seen = []

    def responder(r):
        if r.task == "rank":
            seen.append(r.context["group_count"])
            return "31,1"
        return None

    engine, _ = keyword_engine(responder, n=40)
    engine.group_cap = 30
    res = engine.answer(QueryRequest("chart revenue annual"))
    assert seen == [min(30, res.m_groups)]
    assert len(res.passages) == 1


def test_ranker_transport_error_falls_back():
    class Broken:
        def rank_groups_llm(self, *a):
            raise GatewayError("down")

    engine, queries = keyword_engine()
    pool, index = engine.view(("M", "V", "T"))
    res = answer_query(QueryRequest(queries[0].query_text), index, pool, engine.gateway, ranker=Broken())
    assert res.ranking_source == "fallback"


def test_no_qcluster_uses_fallback():
    engine, queries = keyword_engine()
    res = engine.answer(QueryRequest(queries[0].query_text, use_qcluster=False, top_passages=8))
    assert res.ranking_source == "fallback" and len(res.passages) == 8


def test_request_validation():
    with pytest.raises(ValueError):
        QueryRequest("q", top_passages=6)
    with pytest.raises(ValueError):
        QueryRequest("  ")
    assert QueryRequest("q", top_passages=6, use_qcluster=False).top_passages == 6


def test_modality_mask_restricts_supporting_preqs():
    engine, queries = keyword_engine()
    res = engine.answer(QueryRequest(queries[0].query_text, modality_mask="t"))
    support = [i for _, ids in res.passages for i in ids]
    assert support and all(":T:" in i for i in support)


def test_empty_index_returns_nothing():
    gw = ModelGateway(ProviderConfig(embed_dimension=8))
    engine = RetrievalEngine(RetrievalPool.from_preqs([]), gw)
    res = engine.answer(QueryRequest("anything"))
    assert res.passages == [] and res.k_used == 150


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from("ABCDEFG"), min_size=1, max_size=40), st.randoms())
def test_grouping_partitions_hits(owners, rnd):
    pool = text_pool(owners)
    order = list(range(len(owners)))
    rnd.shuffle(order)
    hits = hits_for(pool, order)
    gs = group_by_passage(hits, pool)
    assert sorted(h.preq_id for g in gs.groups for h in g.members) == sorted(h.preq_id for h in hits)
    best = [g.best_rank for g in gs.groups]
    assert best == sorted(best) and len(set(g.passage_id for g in gs.groups)) == gs.m
