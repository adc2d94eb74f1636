"""
Corpus data model and ingestion of pre-parsed multimodal documents.

A corpus is read from a line-delimited JSON manifest where every record
describes one page (passage)::

    {"passage_id": "d0/p0", "document_id": "d0", "page_index": 0,
     "page_image_ref": "pages/d0_p0.png",
     "ocr_blocks": [{"text": "...", "layout_order": 0}],
     "components": [{"id": "d0/p0/c0", "kind": "figure",
                     "image_ref": "crops/d0_p0_c0.png",
                     "layout_order": 1, "caption": "..."}]}

Image references are kept exactly as written; they are resolved against the
manifest directory only when a backend actually needs the bytes.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

from .errors import CorpusError, DuplicateIdError

logger = logging.getLogger(__name__)

COMPONENT_KINDS = ("table", "figure", "chart", "diagram", "other")


def is_uri(ref: str) -> bool:
    return "://" in ref or ref.startswith("data:")


@dataclass(frozen=True)
class OcrBlock:
    text: str
    layout_order: int


@dataclass(frozen=True)
class Component:
    id: str
    kind: str
    image_ref: str
    layout_order: int
    caption: Optional[str] = None

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise CorpusError(f"component {self.id!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Passage:
    id: str
    page_image_ref: str
    components: Tuple[Component, ...] = ()
    ocr_blocks: Tuple[OcrBlock, ...] = ()
    text_surrogate: Optional[str] = None
    document_id: str = ""
    page_index: int = 0


@dataclass(frozen=True)
class Document:
    id: str
    passages: Tuple[Passage, ...]


@dataclass
class Corpus:
    documents: List[Document]
    manifest_path: Optional[Path] = None
    warnings: List[str] = field(default_factory=list, compare=False)

    @property
    def root(self) -> Path:
        return self.manifest_path.parent if self.manifest_path else Path(".")

    def passages(self) -> Iterator[Passage]:
        for doc in self.documents:
            yield from doc.passages

    def passage_ids(self) -> List[str]:
        return [p.id for p in self.passages()]

    def passage(self, passage_id: str) -> Passage:
        for p in self.passages():
            if p.id == passage_id:
                return p
        raise KeyError(passage_id)

    def document_of(self) -> dict:
        """Map passage id -> document id."""
        return {p.id: doc.id for doc in self.documents for p in doc.passages}

    def resolve(self, ref: str) -> str:
        """Absolute path (or untouched URI) for an image reference."""
        if is_uri(ref) or os.path.isabs(ref):
            return ref
        return str((self.root / ref).resolve())

    def __len__(self):
        return sum(len(d.passages) for d in self.documents)


# ---------------------------------------------------------------------------
# surrogate assembly


def assemble_text_surrogate(passage: Passage) -> str:
    """Merge OCR blocks and component captions in layout order.

    Blocks are separated by a blank line; caption blocks get a ``[kind] ``
    prefix. Components without a caption are skipped with a warning.
    """
    blocks = [(b.layout_order, b.text) for b in passage.ocr_blocks]
    for comp in passage.components:
        if not comp.caption:
            logger.warning("passage %s: component %s has no caption, skipped",
                           passage.id, comp.id)
            continue
        blocks.append((comp.layout_order, f"[{comp.kind}] {comp.caption}"))
    # sorted() is stable: OCR blocks precede captions sharing an order value
    blocks = sorted(blocks, key=lambda item: item[0])
    return "\n\n".join(text for _, text in blocks)


def with_surrogates(corpus: Corpus) -> Corpus:
    """Return a copy of ``corpus`` with every text surrogate (re)assembled."""
    docs = [
        Document(d.id, tuple(replace(p, text_surrogate=assemble_text_surrogate(p))
                             for p in d.passages))
        for d in corpus.documents
    ]
    return Corpus(docs, corpus.manifest_path, list(corpus.warnings))


# ---------------------------------------------------------------------------
# manifest I/O


def _parse_record(rec: dict, lineno: int) -> Tuple[str, int, Passage]:
    try:
        doc_id = str(rec["document_id"])
        page_index = int(rec["page_index"])
        ocr = tuple(OcrBlock(str(b["text"]), int(b["layout_order"]))
                    for b in rec.get("ocr_blocks", []))
        comps = tuple(
            Component(str(c["id"]), str(c.get("kind", "other")), str(c["image_ref"]),
                      int(c["layout_order"]), c.get("caption"))
            for c in rec.get("components", [])
        )
        passage = Passage(
            id=str(rec["passage_id"]),
            page_image_ref=str(rec["page_image_ref"]),
            components=comps,
            ocr_blocks=ocr,
            text_surrogate=rec.get("text_surrogate"),
            document_id=doc_id,
            page_index=page_index,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"manifest line {lineno}: malformed record ({exc})") from exc

    orders = [b.layout_order for b in ocr]
    if len(set(orders)) != len(orders):
        raise CorpusError(f"passage {passage.id}: duplicate OCR layout_order values")
    return doc_id, page_index, passage


def parse_records(records: Iterable[dict], manifest_path: Optional[Path] = None,
                  strict: bool = False) -> Corpus:
    """Validate manifest records and assemble them into a Corpus."""
    by_doc: dict = {}
    seen_passages: set = set()
    seen_components: set = set()
    for lineno, rec in enumerate(records, start=1):
        doc_id, page_index, passage = _parse_record(rec, lineno)
        if passage.id in seen_passages:
            raise DuplicateIdError(f"duplicate passage id {passage.id!r}")
        seen_passages.add(passage.id)
        for comp in passage.components:
            if comp.id in seen_components:
                raise DuplicateIdError(f"duplicate component id {comp.id!r}")
            seen_components.add(comp.id)
        by_doc.setdefault(doc_id, []).append((page_index, passage))

    documents = []
    for doc_id, pages in by_doc.items():
        pages.sort(key=lambda item: item[0])
        indices = [i for i, _ in pages]
        if indices != list(range(len(pages))):
            raise CorpusError(
                f"document {doc_id!r}: page indices {indices} are not contiguous from 0")
        documents.append(Document(doc_id, tuple(p for _, p in pages)))

    corpus = Corpus(documents, Path(manifest_path) if manifest_path else None)
    if manifest_path is not None:
        corpus.warnings.extend(_dangling_refs(corpus))
        if corpus.warnings and strict:
            raise CorpusError("; ".join(corpus.warnings))
        for w in corpus.warnings:
            logger.warning(w)
    return corpus


def _dangling_refs(corpus: Corpus) -> List[str]:
    problems = []
    for p in corpus.passages():
        refs = [p.page_image_ref] + [c.image_ref for c in p.components]
        for ref in refs:
            if ref and not is_uri(ref) and not os.path.exists(corpus.resolve(ref)):
                problems.append(f"passage {p.id}: image not found: {ref}")
    return problems


def load_corpus(manifest_path, strict: bool = False) -> Corpus:
    """Load and validate a JSONL corpus manifest.

    Missing image files are recorded on ``Corpus.warnings``; with
    ``strict=True`` they raise instead.
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise CorpusError(f"manifest not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return parse_records(records, path, strict=strict)


def passage_record(passage: Passage, ref_map=None) -> dict:
    ref_map = ref_map or (lambda r: r)
    rec = {
        "passage_id": passage.id,
        "document_id": passage.document_id,
        "page_index": passage.page_index,
        "page_image_ref": ref_map(passage.page_image_ref),
        "ocr_blocks": [{"text": b.text, "layout_order": b.layout_order}
                       for b in passage.ocr_blocks],
        "components": [],
    }
    for c in passage.components:
        comp = {"id": c.id, "kind": c.kind, "image_ref": ref_map(c.image_ref),
                "layout_order": c.layout_order}
        if c.caption is not None:
            comp["caption"] = c.caption
        rec["components"].append(comp)
    if passage.text_surrogate is not None:
        rec["text_surrogate"] = passage.text_surrogate
    return rec


def dump_corpus(corpus: Corpus, manifest_path) -> Path:
    """Write ``corpus`` as a JSONL manifest.

    Relative image references are rewritten so they stay valid relative to
    the new manifest's directory.
    """
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    src_root = corpus.root.resolve()
    dst_root = path.parent.resolve()

    def ref_map(ref: str) -> str:
        if is_uri(ref) or os.path.isabs(ref) or src_root == dst_root:
            return ref
        return Path(os.path.relpath(src_root / ref, dst_root)).as_posix()

    with path.open("w", encoding="utf-8") as fh:
        for p in corpus.passages():
            fh.write(json.dumps(passage_record(p, ref_map), ensure_ascii=False,
                                sort_keys=True) + "\n")
    return path
