"""
Synthetic corpora for offline runs and property tests.

``make_keyword_corpus`` builds pages that each carry one unique made-up
keyword. Keywords are chosen so that, under the mock backend's hashed-token
embedding, no other token the mock pipeline can produce lands in the same
bucket; a query consisting of the keyword therefore scores zero against every
preQ of every other page.
"""
from __future__ import annotations

import json
import random
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import Component, Corpus, Document, OcrBlock, Passage, dump_corpus
from .evaluation import EvalQuery, dump_eval_set
from .gateway import ChatRequest, MockBackend, token_bucket, tokenize

FILLER = ("annual revenue growth region segment margin forecast quarter table "
          "chart survey population index rate share volume output cost").split()
_LETTERS = "bcdfghjklmnpqrstvwxz"
_VOWELS = "aeiou"


def _made_up_word(rng: random.Random, syllables: int = 4) -> str:
    return "".join(rng.choice(_LETTERS) + rng.choice(_VOWELS) for _ in range(syllables))


def _mock_strings(passage: Passage, backend: MockBackend) -> List[str]:
    """Every text the mock backend can emit for this page, minus keywords."""
    out = []
    for comp in passage.components:
        out.append(f"[{comp.kind}] " + backend.chat(ChatRequest(
            "caption", "", "", context={"kind": comp.kind, "image_ref": comp.image_ref})))
        out.append(backend.chat(ChatRequest("visual", "", "", context={"image_ref": comp.image_ref})))
    out.append(backend.chat(ChatRequest("multimodal", "", "",
                                        context={"image_ref": passage.page_image_ref})))
    out.append("what about")
    return out


def make_keyword_corpus(n_passages: int, pages_per_document: int = 3,
                        components_per_passage: int = 1, dimension: int = 256,
                        seed: int = 0, questions_per_image: int = 2,
                        captioned: bool = False) -> Tuple[Corpus, List[EvalQuery]]:
    """Pages with one unique keyword each, plus one keyword query per page.

    Components are left uncaptioned unless ``captioned`` is set, in which
    case they carry the mock backend's caption.
    """
    rng = random.Random(seed)
    backend = MockBackend(dimension, questions_per_image)
    skeleton = []
    for i in range(n_passages):
        d, j = divmod(i, pages_per_document)
        pid = f"d{d}/p{j}"
        comps = tuple(
            Component(f"{pid}/c{c}", "figure" if c % 2 == 0 else "table",
                      f"crops/d{d}_p{j}_c{c}.png", layout_order=1 + 2 * c)
            for c in range(components_per_passage))
        skeleton.append((d, j, pid, comps))

    reserved: Set[str] = set(FILLER)
    for d, j, pid, comps in skeleton:
        stub = Passage(pid, f"pages/d{d}_p{j}.png", comps)
        for text in _mock_strings(stub, backend):
            reserved.update(tokenize(text))
    taken = {token_bucket(t, dimension) for t in reserved}
    if len(taken) + n_passages > dimension:
        raise ValueError(f"dimension {dimension} too small for {n_passages} keywords")

    keywords = []
    while len(keywords) < n_passages:
        word = _made_up_word(rng)
        bucket = token_bucket(word, dimension)
        if bucket not in taken:
            taken.add(bucket)
            keywords.append(word)

    docs: dict = {}
    queries = []
    for (d, j, pid, comps), kw in zip(skeleton, keywords):
        fill = rng.sample(FILLER, 6)
        ocr = (OcrBlock(f"{kw} {fill[0]} {fill[1]}", 0),
               OcrBlock(f"{fill[2]} {fill[3]} {kw}", 2 * len(comps) + 2),
               OcrBlock(f"{fill[4]} {fill[5]}", 2 * len(comps) + 4))
        if captioned:
            comps = tuple(Component(c.id, c.kind, c.image_ref, c.layout_order,
                                    f"caption({c.kind}:{c.image_ref})") for c in comps)
        passage = Passage(pid, f"pages/d{d}_p{j}.png", comps, ocr,
                          document_id=f"d{d}", page_index=j)
        docs.setdefault(f"d{d}", []).append(passage)
        queries.append(EvalQuery(f"q{len(queries):03d}", kw, frozenset([pid])))
    corpus = Corpus([Document(k, tuple(v)) for k, v in docs.items()])
    return corpus, queries


def write_keyword_corpus(directory, n_passages: int = 12, **kwargs) -> Tuple[Path, Path]:
    """Write ``manifest.jsonl`` and ``queries.jsonl`` for a keyword corpus."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corpus, queries = make_keyword_corpus(n_passages, **kwargs)
    corpus.manifest_path = directory / "manifest.jsonl"
    manifest = dump_corpus(corpus, directory / "manifest.jsonl")
    qpath = directory / "queries.jsonl"
    dump_eval_set(queries, qpath)
    return manifest, qpath


SAMPLE_DIR = Path(__file__).parent / "data"


def sample_corpus_path(name: str = "keyword12") -> Path:
    """Directory of a bundled sample corpus (``sample3`` or ``keyword12``)."""
    path = SAMPLE_DIR / name
    if not (path / "manifest.jsonl").is_file():
        raise FileNotFoundError(path)
    return path


# ---------------------------------------------------------------------------
# random vectors and pools for property tests


def random_unit_vectors(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def random_pool(n_preqs: int, n_passages: int, d: int, seed: int = 0,
                duplicate_fraction: float = 0.0):
    """Pool of random embedded T-preQs spread over ``n_passages`` pages.

    With ``duplicate_fraction`` > 0 some vectors are exact copies of earlier
    ones, which exercises tie-breaking.
    """
    from .preq import PreQ, RetrievalPool

    rng = np.random.default_rng(seed)
    vecs = random_unit_vectors(n_preqs, d, rng)
    for i in range(1, n_preqs):
        if rng.random() < duplicate_fraction:
            vecs[i] = vecs[rng.integers(0, i)]
    owners = rng.integers(0, n_passages, size=n_preqs)
    preqs = [PreQ(f"d0/p{o}:T:{i}", f"question {i}", "T", f"d0/p{o}", None, vecs[i])
             for i, o in enumerate(owners)]
    return RetrievalPool.from_preqs(preqs)
