"""
From pages to ranked passages
=============================

Build a small synthetic corpus, expand every page into pre-questions,
index them and answer a few queries. Everything runs offline on the
deterministic mock backend.
"""

# %%
# A corpus of twelve pages. Each page mentions one made-up keyword and
# carries one figure; the matching query is just the keyword.
from premir import GenConfig, ModelGateway, ProviderConfig, QueryRequest, RetrievalEngine, build_pool
from premir.synthetic import make_keyword_corpus

corpus, queries = make_keyword_corpus(12, captioned=True)
page = next(corpus.passages())
print(page.id, [b.text for b in page.ocr_blocks])
print(queries[0])

# %%
# Generate the pool. Each page yields multimodal questions from the page
# image, visual ones per component and textual ones from the OCR text
# merged with the captions.
gateway = ModelGateway(ProviderConfig(embed_dimension=256))
pool = build_pool(corpus, GenConfig(max_questions_per_source=50), gateway)
print(len(pool), "preQs")
for q in pool.preqs[:6]:
    print(f"  {q.modality}  {q.text}")

# %%
# Retrieval: top-k preQs by cosine, grouped by page, groups ranked by the
# (mock) LLM.
engine = RetrievalEngine(pool, gateway)
result = engine.answer(QueryRequest(queries[4].query_text))
print(result.ranking_source, result.k_used, result.m_groups)
for pid, support in result.passages:
    print(f"  {pid}  ({len(support)} supporting preQs)")
print("gold:", sorted(queries[4].gold_passage_ids))

# %%
# Score the whole query set.
from premir import run_eval
from premir.evaluation import format_table

report = run_eval(queries, QueryRequest("placeholder"), engine)
print(format_table({"keyword12": report}))
