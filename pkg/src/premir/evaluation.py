"""
Retrieval metrics, the evaluation loop, and the ablation / analysis
procedures: modality subsets, Q-Cluster on/off, swapped rankers and
embedders, n-sweeps, DBSCAN semantic-cluster counts and pairwise
redundancy statistics.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, PremirError
from .preq import MODALITIES, GenConfig, PreQ, RetrievalPool, build_pool, embed_pool
from .qcluster import QueryRequest, RetrievalEngine

logger = logging.getLogger(__name__)

RECALL_KS = (1, 3, 5)
DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_EPS = 0.4
DEFAULT_MIN_PTS = 3
# pairs whose cosine is within this of a threshold count as reaching it, so
# identical unit vectors (cosine 0.9999999999999998) reach 1.0
SIM_TOL = 1e-9
PAIR_BLOCK = 2048


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(ranks: Sequence[Optional[int]], k: int) -> float:
    """Fraction of queries whose first gold passage is ranked within ``k``."""
    if not ranks:
        raise ValueError("no queries")
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def mrr_at_k(ranks: Sequence[Optional[int]], k: int = 5) -> float:
    if not ranks:
        raise ValueError("no queries")
    return sum(1.0 / r for r in ranks if r is not None and r <= k) / len(ranks)


@dataclass(frozen=True)
class EvalQuery:
    query_id: str
    query_text: str
    gold_passage_ids: frozenset

    def __post_init__(self):
        if not self.gold_passage_ids:
            raise ValueError(f"query {self.query_id}: no gold passages")
        object.__setattr__(self, "gold_passage_ids", frozenset(self.gold_passage_ids))


def load_eval_set(path, corpus: Optional[Corpus] = None) -> List[EvalQuery]:
    """Read a JSONL eval set; gold ids are checked against ``corpus`` if given."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                queries.append(EvalQuery(str(rec["query_id"]), rec["query_text"],
                                         frozenset(rec["gold_passage_ids"])))
    if corpus is not None:
        known = set(corpus.passage_ids())
        for q in queries:
            unknown = q.gold_passage_ids - known
            if unknown:
                raise ConfigError(f"query {q.query_id}: unknown gold passages {sorted(unknown)}")
    return queries


def dump_eval_set(queries: Iterable[EvalQuery], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"query_id": q.query_id, "query_text": q.query_text,
                                 "gold_passage_ids": sorted(q.gold_passage_ids)},
                                ensure_ascii=False) + "\n")


@dataclass
class EvalReport:
    recall_at: Dict[int, float]
    mrr_at_5: float
    per_query: List[tuple]
    config_fingerprint: str
    results: List[dict] = field(default_factory=list, repr=False)
    warnings: List[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {"recall_at": {str(k): v for k, v in self.recall_at.items()},
                "mrr_at_5": self.mrr_at_5,
                "queries": len(self.per_query),
                "config_fingerprint": self.config_fingerprint,
                "warnings": self.warnings}

    def write(self, directory, stem: str = "eval") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / f"{stem}_queries.jsonl").open("w", encoding="utf-8") as fh:
            for (qid, rank), rec in zip(self.per_query, self.results):
                fh.write(json.dumps({**rec, "query_id": qid, "first_gold_rank": rank},
                                    sort_keys=True) + "\n")
        (directory / f"{stem}_report.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (directory / f"{stem}_table.txt").write_text(format_table({stem: self}) + "\n")
        return directory


def _first_gold_rank(passage_ids: Sequence[str], gold: frozenset) -> Optional[int]:
    for pos, pid in enumerate(passage_ids, start=1):
        if pid in gold:
            return pos
    return None


def _fingerprint(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def run_eval(queries: Sequence[EvalQuery], request_template: QueryRequest,
             engine: RetrievalEngine, workers: int = 1) -> EvalReport:
    """Answer every query and aggregate Recall@{1,3,5} and MRR@5."""
    if not queries:
        raise ValueError("empty eval set")
    ordered = sorted(queries, key=lambda q: q.query_id)
    warnings: List[str] = []

    def one(q: EvalQuery):
        try:
            result = engine.answer(replace(request_template, query_text=q.query_text))
        except PremirError as exc:
            return None, f"query {q.query_id} failed: {exc}"
        return result, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(one, ordered))
    else:
        outcomes = [one(q) for q in ordered]

    per_query, results = [], []
    for q, (result, warning) in zip(ordered, outcomes):
        if warning:
            logger.warning(warning)
            warnings.append(warning)
            per_query.append((q.query_id, None))
            results.append({"query_id": q.query_id, "ranked": [], "ranking_source": None,
                            "k_used": 0, "m_groups": 0})
            continue
        per_query.append((q.query_id, _first_gold_rank(result.passage_ids, q.gold_passage_ids)))
        results.append(result.record(q.query_id))

    ranks = [r for _, r in per_query]
    # the mask enters only through the sub-pool it selects, so two masks that
    # pick the same preQs give the same fingerprint
    template = asdict(request_template)
    for key in ("query_text", "modality_mask"):
        template.pop(key)
    pool, _ = engine.view(request_template.modality_mask)
    fingerprint = _fingerprint({
        "template": template,
        "k_override": engine.k_override,
        "group_cap": engine.group_cap,
        "pool": [q.id for q in pool.preqs],
        "results": results,
    })
    return EvalReport({k: recall_at_k(ranks, k) for k in RECALL_KS}, mrr_at_k(ranks, 5),
                      per_query, fingerprint, results, warnings)


def format_table(reports: Mapping[str, EvalReport]) -> str:
    """Plain-text table with one row per labelled report."""
    width = max([len(str(k)) for k in reports] + [6])
    head = f"{'run':<{width}} | Recall@1 | Recall@3 | Recall@5 | MRR@5"
    lines = [head, "-" * len(head)]
    for label, rep in reports.items():
        r = rep.recall_at
        lines.append(f"{str(label):<{width}} | {r[1]:8.3f} | {r[3]:8.3f} | {r[5]:8.3f} | {rep.mrr_at_5:5.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablations

# row order of the modality ablation table
MODALITY_SUBSETS = (("M", "V", "T"), ("M", "V"), ("M", "T"), ("V", "T"), ("M",), ("V",), ("T",))


def modality_ablation(queries, engine: RetrievalEngine, request_template: QueryRequest,
                      subsets=MODALITY_SUBSETS) -> Dict[str, EvalReport]:
    out = {}
    for subset in subsets:
        out["+".join(subset)] = run_eval(queries, replace(request_template, modality_mask=subset),
                                         engine)
    return out


def qcluster_ablation(queries, engine: RetrievalEngine,
                      request_template: QueryRequest) -> Dict[str, EvalReport]:
    return {
        "Q-Cluster": run_eval(queries, replace(request_template, use_qcluster=True), engine),
        "- Q-Cluster": run_eval(queries, replace(request_template, use_qcluster=False), engine),
    }


def ranker_ablation(queries, engine: RetrievalEngine, rankers: Mapping[str, object],
                    request_template: QueryRequest) -> Dict[str, EvalReport]:
    """Same pool and embeddings; only the group-ranking model changes."""
    out = {}
    for name, ranker in rankers.items():
        swapped = RetrievalEngine(engine.pool, engine.gateway, engine.index,
                                  engine.group_cap, engine.k_override, ranker=ranker)
        out[name] = run_eval(queries, replace(request_template, use_qcluster=True), swapped)
    return out


def embedding_ablation(queries, pool: RetrievalPool, gateways: Mapping[str, object],
                       request_template: QueryRequest) -> Dict[str, EvalReport]:
    """Re-embed the same preQs with each gateway's embedder and evaluate."""
    out = {}
    for name, gateway in gateways.items():
        engine = RetrievalEngine(embed_pool(pool, gateway), gateway)
        out[name] = run_eval(queries, request_template, engine)
    return out


def n_sweep(corpus: Corpus, queries, n_values: Sequence[int], gen_config: GenConfig,
            gateway, request_template: QueryRequest, workers: int = 1) -> Dict[int, EvalReport]:
    """Rebuild the pool at each cap ``n`` and evaluate it."""
    out = {}
    for n in n_values:
        cfg = GenConfig(n, gen_config.modalities_enabled)
        engine = RetrievalEngine(build_pool(corpus, cfg, gateway, workers=workers), gateway)
        out[n] = run_eval(queries, request_template, engine)
    return out


# ---------------------------------------------------------------------------
# redundancy


@dataclass
class RedundancyReport:
    thresholds: List[float]
    within_source_fraction: Dict[float, float]
    across_all_fraction: Dict[float, float]
    within_document_fraction: Optional[Dict[float, float]] = None
    pair_counts: Dict[str, int] = field(default_factory=dict)

    def record(self) -> dict:
        rec = {"thresholds": self.thresholds,
               "within_source_pct": {str(t): v for t, v in self.within_source_fraction.items()},
               "across_all_pct": {str(t): v for t, v in self.across_all_fraction.items()},
               "pair_counts": self.pair_counts}
        if self.within_document_fraction is not None:
            rec["within_document_pct"] = {str(t): v for t, v in self.within_document_fraction.items()}
        return rec

    def table(self) -> str:
        cols = ["within page"] + (["within doc"] if self.within_document_fraction else []) + ["across all"]
        lines = ["threshold | " + " | ".join(f"{c:>11}" for c in cols)]
        for t in self.thresholds:
            vals = [self.within_source_fraction[t]]
            if self.within_document_fraction:
                vals.append(self.within_document_fraction[t])
            vals.append(self.across_all_fraction[t])
            lines.append(f">= {t:<6.2f} | " + " | ".join(f"{v:10.2f}%" for v in vals))
        return "\n".join(lines)


def _unit_rows(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.size == 0:
        return x.reshape(0, 0)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _count_pairs_at(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Unordered pairs (i<j) with cosine >= each threshold (within SIM_TOL)."""
    counts = np.zeros(len(thresholds), dtype=np.int64)
    n = len(x)
    for a in range(0, n, PAIR_BLOCK):
        block = x[a:a + PAIR_BLOCK] @ x.T
        rows = np.arange(a, min(a + PAIR_BLOCK, n))[:, None]
        upper = block[np.arange(n)[None, :] > rows]
        upper = np.sort(upper)
        # count of values >= t - tol via binary search on the sorted block
        counts += len(upper) - np.searchsorted(upper, thresholds - SIM_TOL, side="left")
    return counts


def _grouped_pct(x, labels, thresholds):
    counts = np.zeros(len(thresholds), dtype=np.int64)
    pairs = 0
    order: Dict[str, List[int]] = {}
    for i, lab in enumerate(labels):
        order.setdefault(lab, []).append(i)
    for rows in order.values():
        if len(rows) > 1:
            counts += _count_pairs_at(x[rows], thresholds)
            pairs += len(rows) * (len(rows) - 1) // 2
    return counts, pairs


def _pct(counts, pairs, thresholds):
    return {float(t): (100.0 * int(c) / pairs if pairs else 0.0) for t, c in zip(thresholds, counts)}


def redundancy_analysis(pool: RetrievalPool, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                        document_of: Optional[Mapping[str, str]] = None) -> RedundancyReport:
    """Percentage of preQ pairs whose cosine reaches each threshold.

    Pairs are counted within the same source page, within the same document
    (when ``document_of`` maps passage -> document) and across the whole pool.
    """
    thresholds = [float(t) for t in thresholds]
    th = np.asarray(thresholds, dtype=np.float64)
    zeros = {t: 0.0 for t in thresholds}
    if len(pool) < 2:
        logger.warning("redundancy analysis needs at least 2 preQs, got %d", len(pool))
        return RedundancyReport(thresholds, dict(zeros), dict(zeros),
                                dict(zeros) if document_of is not None else None,
                                {"within_source": 0, "within_document": 0, "all": 0})
    x = _unit_rows(pool.embedding_matrix())
    n = len(x)
    all_counts = _count_pairs_at(x, th)
    all_pairs = n * (n - 1) // 2
    page_counts, page_pairs = _grouped_pct(x, [q.source_passage_id for q in pool.preqs], th)
    doc = None
    doc_pairs = 0
    if document_of is not None:
        doc_counts, doc_pairs = _grouped_pct(
            x, [document_of[q.source_passage_id] for q in pool.preqs], th)
        doc = _pct(doc_counts, doc_pairs, thresholds)
    return RedundancyReport(thresholds, _pct(page_counts, page_pairs, thresholds),
                            _pct(all_counts, all_pairs, thresholds), doc,
                            {"within_source": page_pairs, "within_document": doc_pairs,
                             "all": all_pairs})


# ---------------------------------------------------------------------------
# DBSCAN semantic coverage


def dbscan_labels(vectors, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> np.ndarray:
    """DBSCAN over cosine distance; returns labels with -1 for noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = _unit_rows(vectors)
    n = len(x)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = (1.0 - x @ x.T) <= eps
    core = neighbours.sum(axis=1) >= min_pts
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        stack = [seed]
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(neighbours[p]):
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


def dbscan_cluster_count(preqs, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> int:
    """Number of DBSCAN clusters among ``preqs`` (PreQs or an (n, d) array); noise excluded."""
    if isinstance(preqs, np.ndarray):
        vectors = preqs
    else:
        preqs = list(preqs)
        if not preqs:
            return 0
        if isinstance(preqs[0], PreQ):
            vectors = np.stack([q.embedding for q in preqs])
        else:
            vectors = np.asarray(preqs)
    if len(vectors) == 0:
        return 0
    labels = dbscan_labels(vectors, eps, min_pts)
    return int(labels.max() + 1) if labels.size else 0


@dataclass
class CoverageReport:
    n_values: List[int]
    avg_cluster_count: Dict[int, float]
    eps: float = DEFAULT_EPS
    min_pts: int = DEFAULT_MIN_PTS

    def record(self) -> dict:
        return {"n_values": self.n_values, "eps": self.eps, "min_pts": self.min_pts,
                "avg_cluster_count": {str(n): v for n, v in self.avg_cluster_count.items()}}

    def table(self) -> str:
        lines = ["n  | avg clusters"]
        lines += [f"{n:<3}| {self.avg_cluster_count[n]:.2f}" for n in self.n_values]
        return "\n".join(lines)


def passage_cluster_counts(pool: RetrievalPool, passage_ids: Sequence[str],
                           eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> List[int]:
    return [dbscan_cluster_count([pool.get(i) for i in pool.by_passage.get(pid, [])], eps, min_pts)
            for pid in passage_ids]


def coverage_sweep(corpus: Corpus, n_values: Sequence[int], config: GenConfig, gateway,
                   eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS,
                   workers: int = 1) -> CoverageReport:
    """Mean per-passage DBSCAN cluster count for pools capped at each ``n``."""
    n_values = [int(n) for n in n_values]
    configs = [GenConfig(n, config.modalities_enabled) for n in n_values]  # validates n >= 1
    pids = corpus.passage_ids()
    avg = {}
    for n, cfg in zip(n_values, configs):
        pool = build_pool(corpus, cfg, gateway, workers=workers)
        counts = passage_cluster_counts(pool, pids, eps, min_pts)
        avg[n] = float(np.mean(counts)) if counts else 0.0
    return CoverageReport(n_values, avg, eps, min_pts)


# ---------------------------------------------------------------------------
# export


def export_embeddings(pool: RetrievalPool, path, query_vectors: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    """Write embeddings as a TSV matrix plus a ``.labels.tsv`` sidecar.

    Intended for external t-SNE / UMAP plotting; queries may be appended.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [pool.embedding_matrix()] if len(pool) else []
    labels = [(q.id, q.modality, q.source_passage_id) for q in pool.preqs]
    for qid, vec in (query_vectors or {}).items():
        rows.append(np.asarray(vec, dtype=np.float32).reshape(1, -1))
        labels.append((qid, "query", ""))
    matrix = np.concatenate(rows) if rows else np.zeros((0, 0))
    np.savetxt(path, matrix, delimiter="\t", fmt="%.8g")
    label_path = path.with_suffix(".labels.tsv")
    with label_path.open("w", encoding="utf-8") as fh:
        fh.write("id\tkind\tpassage_id\n")
        for rec in labels:
            fh.write("\t".join(rec) + "\n")
    return path
