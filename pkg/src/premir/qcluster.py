"""
Query path: k selection, preQ retrieval, grouping of hits by source
passage and LLM ranking of the groups, with a deterministic fallback.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import GatewayError, RankingError
from .index import ScoredHit, VectorIndex, build_index, top_k
from .preq import MODALITIES, RetrievalPool, parse_modalities

logger = logging.getLogger(__name__)

LARGE_POOL = 100_000
K_LARGE_POOL = 100
K_DEFAULT = 150
DEFAULT_GROUP_CAP = 30
MAX_LLM_PASSAGES = 5


def select_k(pool_size: int) -> int:
    """Number of preQs to retrieve for a pool of ``pool_size`` entries."""
    return K_LARGE_POOL if pool_size > LARGE_POOL else K_DEFAULT


@dataclass
class QueryRequest:
    query_text: str
    top_passages: int = 5
    use_qcluster: bool = True
    modality_mask: tuple = MODALITIES

    def __post_init__(self):
        if not self.query_text or not self.query_text.strip():
            raise ValueError("query_text must be non-empty")
        if self.top_passages < 1:
            raise ValueError("top_passages must be >= 1")
        if self.use_qcluster and self.top_passages > MAX_LLM_PASSAGES:
            raise ValueError("top_passages must be <= 5 when Q-Cluster ranking is on")
        self.modality_mask = parse_modalities(self.modality_mask)


@dataclass
class PreQGroup:
    passage_id: str
    members: List[ScoredHit]

    @property
    def best_rank(self) -> int:
        return self.members[0].rank


@dataclass
class GroupSet:
    groups: List[PreQGroup]

    @property
    def m(self) -> int:
        return len(self.groups)

    def __len__(self):
        return len(self.groups)


@dataclass
class RankedPassages:
    passages: List[Tuple[str, List[str]]]
    ranking_source: str
    k_used: int = 0
    m_groups: int = 0

    @property
    def passage_ids(self) -> List[str]:
        return [pid for pid, _ in self.passages]

    def record(self, query_id: Optional[str] = None) -> dict:
        return {
            "query_id": query_id,
            "ranked": [{"passage_id": pid, "supporting_preq_ids": list(ids)}
                       for pid, ids in self.passages],
            "ranking_source": self.ranking_source,
            "k_used": self.k_used,
            "m_groups": self.m_groups,
        }


def group_by_passage(hits: Sequence[ScoredHit], pool: RetrievalPool) -> GroupSet:
    """Partition hits by source passage; groups ordered by their best rank."""
    groups: Dict[str, PreQGroup] = {}
    for hit in sorted(hits, key=lambda h: h.rank):
        if hit.preq_id not in pool:
            raise KeyError(f"unknown preQ id {hit.preq_id!r}")
        pid = pool.get(hit.preq_id).source_passage_id
        if pid not in groups:
            groups[pid] = PreQGroup(pid, [])
        groups[pid].members.append(hit)
    # dicts keep insertion order, which is first-appearance = best_rank order
    return GroupSet(list(groups.values()))


def _indent_question(text: str) -> str:
    lines = text.strip().splitlines() or [""]
    return "\n".join(["  - " + lines[0]] + ["    " + ln for ln in lines[1:]])


def render_groups_text(group_set: GroupSet, pool: RetrievalPool) -> str:
    blocks = []
    for number, group in enumerate(group_set.groups, start=1):
        lines = [f"Group {number}:"]
        lines += [_indent_question(pool.get(h.preq_id).text) for h in group.members]
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def render_groups_prompt(query: str, group_set: GroupSet, pool: RetrievalPool,
                         prompts=None) -> str:
    """The full ranking prompt for ``group_set`` (groups numbered from 1)."""
    if group_set.m < 1:
        raise ValueError("need at least one group to render")
    if prompts is None:
        from .gateway import PromptLibrary
        prompts = PromptLibrary()
    return prompts.render("rank", {"query": query,
                                   "questions_text": render_groups_text(group_set, pool)})


def fallback_rank(group_set: GroupSet, limit: int) -> RankedPassages:
    """Passages ordered by the rank of their best preQ, truncated to ``limit``."""
    ordered = sorted(group_set.groups, key=lambda g: g.best_rank)[:limit]
    return RankedPassages([(g.passage_id, [h.preq_id for h in g.members]) for g in ordered],
                          "fallback", m_groups=group_set.m)


def answer_query(request: QueryRequest, index: VectorIndex, pool: RetrievalPool, gateway,
                 group_cap: int = DEFAULT_GROUP_CAP,
                 k_override: Optional[int] = None, ranker=None) -> RankedPassages:
    """Retrieve, group and rank passages for one query.

    ``index`` must already be restricted to ``request.modality_mask``.
    ``ranker`` (default: ``gateway``) supplies ``rank_groups_llm``. An
    embedding failure propagates; a ranking failure falls back to
    :func:`fallback_rank`.
    """
    ranker = ranker or gateway
    k = k_override or select_k(len(index))
    qvec = gateway.embed_query(request.query_text)
    hits = top_k(index, qvec, k)
    group_set = group_by_passage(hits, pool)
    limit = request.top_passages

    result = None
    if request.use_qcluster and group_set.m:
        shown = GroupSet(group_set.groups[:group_cap])
        try:
            numbers = ranker.rank_groups_llm(request.query_text,
                                              render_groups_text(shown, pool), shown.m)
        except (RankingError, GatewayError) as exc:
            logger.info("group ranking failed, using fallback: %s", exc)
            numbers = []
        picked, seen = [], set()
        for n in numbers:
            if 1 <= n <= shown.m and n not in seen:
                seen.add(n)
                picked.append(shown.groups[n - 1])
        if picked:
            result = RankedPassages(
                [(g.passage_id, [h.preq_id for h in g.members]) for g in picked[:limit]],
                "llm")
    if result is None:
        result = fallback_rank(group_set, limit)
    result.k_used = k
    result.m_groups = group_set.m
    return result


class RetrievalEngine:
    """Pool + index + gateway, with per-mask sub-indices built on demand."""

    def __init__(self, pool: RetrievalPool, gateway, index: Optional[VectorIndex] = None,
                 group_cap: int = DEFAULT_GROUP_CAP, k_override: Optional[int] = None,
                 ranker=None):
        self.pool = pool
        self.gateway = gateway
        self.ranker = ranker
        self.index = index if index is not None else build_index(pool)
        self.group_cap = group_cap
        self.k_override = k_override
        self._by_mask: Dict[tuple, Tuple[RetrievalPool, VectorIndex]] = {}
        self._lock = threading.Lock()

    def view(self, mask) -> Tuple[RetrievalPool, VectorIndex]:
        mask = parse_modalities(mask)
        with self._lock:
            return self._view(mask)

    def _view(self, mask):
        if mask not in self._by_mask:
            if mask == MODALITIES:
                self._by_mask[mask] = (self.pool, self.index)
            else:
                sub = self.pool.filter(mask)
                self._by_mask[mask] = (sub, self.index.subset([q.id for q in sub.preqs]))
        return self._by_mask[mask]

    def answer(self, request: QueryRequest) -> RankedPassages:
        pool, index = self.view(request.modality_mask)
        return answer_query(request, index, pool, self.gateway,
                            group_cap=self.group_cap, k_override=self.k_override,
                            ranker=self.ranker)
