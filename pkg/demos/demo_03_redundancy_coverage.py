"""
How redundant are the generated questions?
==========================================

Pairwise cosine statistics over a pool, then DBSCAN cluster counts per
page as the per-source cap grows.
"""

# %%
import json

from premir import GenConfig, ModelGateway, ProviderConfig, build_pool, coverage_sweep, redundancy_analysis
from premir.gateway import MockBackend
from premir.synthetic import make_keyword_corpus

corpus, _ = make_keyword_corpus(9, captioned=True)
gateway = ModelGateway(ProviderConfig(embed_dimension=256))
pool = build_pool(corpus, GenConfig(), gateway)
report = redundancy_analysis(pool, document_of=corpus.document_of())
print(report.table())

# %%
# A responder lets us script the mock. Here every page answers with
# questions about three unrelated topics, so coverage should saturate at
# three clusters once the cap admits enough questions.
topics = [["apple", "pear", "plum"], ["engine", "gear", "valve"], ["violin", "cello", "harp"]]


def scripted(request):
    if request.task != "textual":
        return None
    qs = [f"{w} {t[0]} {t[1]}?" for t in topics for w in t]
    return json.dumps([{"question": q} for q in qs])


scripted_gw = ModelGateway(ProviderConfig(embed_dimension=512), MockBackend(512, 2, scripted))
coverage = coverage_sweep(corpus, [1, 3, 6, 9], GenConfig(modalities_enabled="t"), scripted_gw,
                          eps=0.4, min_pts=3)
print(coverage.table())
