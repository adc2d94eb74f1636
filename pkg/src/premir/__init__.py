"""Pre-question based multimodal document retrieval.

Pages are expanded offline into multimodal, visual and textual
pre-questions; queries are answered by retrieving the closest preQs,
grouping them by source page and letting an LLM rank the groups.
"""
from .corpus import (Component, Corpus, Document, OcrBlock, Passage,
                     assemble_text_surrogate, dump_corpus, load_corpus, with_surrogates)
from .errors import (ArtifactMissingError, ConfigError, CorpusError, GatewayError,
                     GenerationError, PremirError, RankingError, VectorIndexError)
from .gateway import MockBackend, LiveBackend, ModelGateway, PromptLibrary, ProviderConfig
from .index import ScoredHit, VectorIndex, build_index, top_k
from .preq import (GenConfig, PreQ, RetrievalPool, build_pool, dedupe_and_cap,
                   generate_for_passage, load_pool, save_pool)
from .qcluster import (QueryRequest, RankedPassages, RetrievalEngine, answer_query,
                       fallback_rank, group_by_passage, select_k)
from .evaluation import (EvalQuery, EvalReport, coverage_sweep, dbscan_cluster_count,
                         mrr_at_k, recall_at_k, redundancy_analysis, run_eval)

__version__ = "0.1.0"
