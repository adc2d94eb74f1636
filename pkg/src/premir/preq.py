"""
Per-passage generation of multimodal (M), visual (V) and textual (T)
pre-questions and assembly of the retrieval pool.

M questions come from the page image, V questions from each component
image and T questions from the layout-aware text surrogate. The cap ``n``
applies to each source independently: the M set, the T set and every
component's V set.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .corpus import Corpus, Passage, assemble_text_surrogate
from .errors import ArtifactMissingError, ConfigError, GatewayError
from .index import read_vectors, write_vectors

logger = logging.getLogger(__name__)

MODALITIES = ("M", "V", "T")
PROMPT_KIND = {"M": "multimodal", "V": "visual", "T": "textual"}
EMBED_CHUNK = 512


def parse_modalities(value) -> tuple:
    """Normalise ``"m,v,t"`` / ``["M", "T"]`` to a canonical tuple."""
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    mods = {str(v).upper() for v in value}
    unknown = mods - set(MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities: {sorted(unknown)}")
    if not mods:
        raise ConfigError("at least one modality must be enabled")
    return tuple(m for m in MODALITIES if m in mods)


@dataclass
class GenConfig:
    max_questions_per_source: int = 50
    modalities_enabled: tuple = MODALITIES

    def __post_init__(self):
        self.modalities_enabled = parse_modalities(self.modalities_enabled)
        if int(self.max_questions_per_source) < 1:
            raise ConfigError("max_questions_per_source must be >= 1")


@dataclass(frozen=True)
class PreQ:
    id: str
    text: str
    modality: str
    source_passage_id: str
    source_component_id: Optional[str] = None
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"preQ {self.id}: empty text")
        if self.modality not in MODALITIES:
            raise ValueError(f"preQ {self.id}: bad modality {self.modality!r}")
        if (self.modality == "V") != (self.source_component_id is not None):
            raise ValueError(f"preQ {self.id}: source_component_id must be set iff modality is V")

    def record(self) -> dict:
        rec = {"id": self.id, "text": self.text, "modality": self.modality,
               "source_passage_id": self.source_passage_id}
        if self.source_component_id is not None:
            rec["source_component_id"] = self.source_component_id
        return rec


def preq_id(passage_id: str, modality: str, ordinal: int,
            component_id: Optional[str] = None) -> str:
    if component_id is None:
        return f"{passage_id}:{modality}:{ordinal}"
    return f"{passage_id}:{modality}:{component_id}:{ordinal}"


def dedupe_and_cap(questions: Iterable[str], n: int) -> List[str]:
    """Drop exact duplicates (first occurrence wins) and keep the first ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    out = []
    for q in questions:
        if q in seen:
            continue
        seen.add(q)
        out.append(q)
        if len(out) == n:
            break
    return out


@dataclass
class PassageOutcome:
    passage_id: str
    preqs: List[PreQ]
    warnings: List[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.warnings)

    def counts(self) -> Dict[str, int]:
        c = {m: 0 for m in MODALITIES}
        for q in self.preqs:
            c[q.modality] += 1
        return c


def _generate(passage: Passage, config: GenConfig, gateway, root=None) -> PassageOutcome:
    n = config.max_questions_per_source
    outcome = PassageOutcome(passage.id, [])

    def run(modality, payload, component_id=None):
        try:
            raw = gateway.generate_questions(PROMPT_KIND[modality], payload, n, root=root)
        except GatewayError as exc:
            src = component_id or passage.id
            msg = f"{modality} generation failed for {src}: {exc}"
            logger.warning(msg)
            outcome.warnings.append(msg)
            return
        for ordinal, text in enumerate(dedupe_and_cap(raw, n)):
            outcome.preqs.append(PreQ(preq_id(passage.id, modality, ordinal, component_id),
                                      text, modality, passage.id, component_id))

    mods = config.modalities_enabled
    if "M" in mods:
        run("M", passage.page_image_ref)
    if "V" in mods:
        for comp in passage.components:
            run("V", comp.image_ref, comp.id)
    if "T" in mods:
        surrogate = passage.text_surrogate
        if surrogate is None:
            surrogate = assemble_text_surrogate(passage)
        if surrogate.strip():
            run("T", surrogate)
    return outcome


def generate_for_passage(passage: Passage, config: GenConfig, gateway,
                         root=None) -> List[PreQ]:
    """PreQs of every enabled modality for one passage (unembedded)."""
    return _generate(passage, config, gateway, root).preqs


@dataclass
class RetrievalPool:
    preqs: List[PreQ]
    by_passage: Dict[str, List[str]]
    report: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self._pos = {q.id: i for i, q in enumerate(self.preqs)}

    @classmethod
    def from_preqs(cls, preqs: Sequence[PreQ], report=None) -> "RetrievalPool":
        by_passage: Dict[str, List[str]] = {}
        for q in preqs:
            by_passage.setdefault(q.source_passage_id, []).append(q.id)
        return cls(list(preqs), by_passage, report or {})

    def __len__(self):
        return len(self.preqs)

    def __contains__(self, preq_id):
        return preq_id in self._pos

    def get(self, preq_id: str) -> PreQ:
        return self.preqs[self._pos[preq_id]]

    @property
    def embedded(self) -> bool:
        return all(q.embedding is not None for q in self.preqs)

    def embedding_matrix(self) -> np.ndarray:
        missing = [q.id for q in self.preqs if q.embedding is None]
        if missing:
            raise ValueError(f"preQ {missing[0]} has no embedding")
        if not self.preqs:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([q.embedding for q in self.preqs]).astype(np.float32)

    def filter(self, modalities) -> "RetrievalPool":
        """Sub-pool restricted to ``modalities``, canonical order kept."""
        mods = set(parse_modalities(modalities))
        return RetrievalPool.from_preqs([q for q in self.preqs if q.modality in mods],
                                        self.report)

    def with_embeddings(self, vectors: np.ndarray) -> "RetrievalPool":
        if len(vectors) != len(self.preqs):
            raise ValueError("one embedding per preQ required")
        preqs = [PreQ(q.id, q.text, q.modality, q.source_passage_id,
                      q.source_component_id, np.asarray(v, dtype=np.float32))
                 for q, v in zip(self.preqs, vectors)]
        return RetrievalPool.from_preqs(preqs, self.report)


def embed_pool(pool: RetrievalPool, gateway) -> RetrievalPool:
    """(Re-)embed every preQ with ``gateway``; used for embedding swaps too."""
    texts = [q.text for q in pool.preqs]
    chunks = [gateway.embed_texts(texts[i:i + EMBED_CHUNK])
              for i in range(0, len(texts), EMBED_CHUNK)]
    dim = gateway.dimension or 0
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, dim), np.float32)
    return pool.with_embeddings(vectors)


def build_pool(corpus: Corpus, config: GenConfig, gateway, workers: int = 1,
               embed: bool = True) -> RetrievalPool:
    """Generate preQs for every passage and embed them.

    Passages are processed by ``workers`` threads; the pool is assembled in
    corpus order regardless of completion order.
    """
    passages = list(corpus.passages())
    root = corpus.root if corpus.manifest_path else None
    job = lambda p: _generate(p, config, gateway, root)  # noqa: E731
    if workers > 1 and len(passages) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(job, passages))
    else:
        outcomes = [job(p) for p in passages]

    preqs = [q for o in outcomes for q in o.preqs]
    report = {
        "n": config.max_questions_per_source,
        "modalities": list(config.modalities_enabled),
        "total": len(preqs),
        "passages": [{"passage_id": o.passage_id, "counts": o.counts(),
                      "partial": o.partial, "warnings": o.warnings} for o in outcomes],
    }
    pool = RetrievalPool.from_preqs(preqs, report)
    return embed_pool(pool, gateway) if embed else pool


# ---------------------------------------------------------------------------
# store I/O

PREQ_FILE = "preqs.jsonl"
EMB_DIR = "embeddings"
REPORT_FILE = "run_report.json"


def save_pool(pool: RetrievalPool, directory) -> Path:
    """Write ``preqs.jsonl``, the embedding sidecar and the run report."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / PREQ_FILE).open("w", encoding="utf-8") as fh:
        for q in pool.preqs:
            fh.write(json.dumps(q.record(), ensure_ascii=False, sort_keys=True) + "\n")
    if pool.preqs and pool.embedded:
        write_vectors(directory / EMB_DIR, [q.id for q in pool.preqs], pool.embedding_matrix())
    (directory / REPORT_FILE).write_text(json.dumps(pool.report, indent=2, sort_keys=True) + "\n")
    return directory


def load_pool(directory) -> RetrievalPool:
    directory = Path(directory)
    path = directory / PREQ_FILE
    if not path.is_file():
        raise ArtifactMissingError(f"preQ store not found at {path}; run generate")
    preqs = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                preqs.append(PreQ(rec["id"], rec["text"], rec["modality"],
                                  rec["source_passage_id"], rec.get("source_component_id")))
    report = {}
    if (directory / REPORT_FILE).is_file():
        report = json.loads((directory / REPORT_FILE).read_text())
    pool = RetrievalPool.from_preqs(preqs, report)
    if (directory / EMB_DIR).is_dir():
        ids, vectors = read_vectors(directory / EMB_DIR)
        if ids != [q.id for q in preqs]:
            raise ValueError("embedding sidecar ids do not match the preQ store")
        pool = pool.with_embeddings(vectors)
    return pool
