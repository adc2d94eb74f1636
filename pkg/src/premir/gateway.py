"""
Model gateway: one entry point for captioning, preQ generation, group
ranking and text embedding.

Two backends are provided. ``LiveBackend`` talks to any OpenAI-compatible
HTTP endpoint (chat completions + embeddings). ``MockBackend`` is a pure
function of its inputs so every pipeline run under it is reproducible
byte-for-byte; its embedding is a bag of hashed tokens, which makes lexical
overlap between a query and a preQ show up as cosine similarity.
"""
from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import re
import string
import threading
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import (ConfigError, GatewayError, GenerationError, RankingError,
                     TransportError)

logger = logging.getLogger(__name__)

PROMPT_KINDS = ("textual", "visual", "multimodal")
PROMPT_FILES = {
    "caption": "caption.txt",
    "textual": "preq_textual.txt",
    "visual": "preq_visual.txt",
    "multimodal": "preq_visual.txt",
    "rank": "qcluster_rank.txt",
}
DEFAULT_PROMPT_DIR = Path(__file__).parent / "prompts"
MAX_RANKED_GROUPS = 5


@dataclass
class ProviderConfig:
    backend: str = "mock"
    endpoint_url: str = "https://api.openai.com/v1"
    api_key_env_var: str = "OPENAI_API_KEY"
    chat_model_name: str = "gpt-4o"
    caption_model_name: str = "gpt-4o-mini"
    embed_model_name: str = "text-embedding-3-large"
    # model for textual preQs; falls back to chat_model_name when unset
    textual_model_name: Optional[str] = "gpt-4o-mini"
    # model for group ranking; falls back to chat_model_name when unset
    rank_model_name: Optional[str] = None
    max_parallel_requests: int = 8
    retry_limit: int = 3
    request_timeout: float = 60.0
    temperature: float = 0.0
    embed_dimension: Optional[int] = None
    embed_batch_size: int = 100
    backoff_base: float = 1.0
    prompt_dir: Optional[str] = None
    mock_questions_per_image: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.backend not in ("live", "mock"):
            raise ConfigError(f"backend must be 'live' or 'mock', got {self.backend!r}")
        if int(self.max_parallel_requests) < 1:
            raise ConfigError("max_parallel_requests must be >= 1")
        if not 0 <= int(self.retry_limit) <= 10:
            raise ConfigError("retry_limit must be within [0, 10]")
        if self.embed_dimension is not None and int(self.embed_dimension) < 1:
            raise ConfigError("embed_dimension must be positive")
        if self.request_timeout <= 0:
            raise ConfigError("request_timeout must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# prompt templates


class PromptLibrary:
    """Prompt templates with ``{placeholder}`` slots, stored as text files.

    Only the slot names passed to :meth:`render` are substituted; after that
    doubled braces collapse to single ones, so literal JSON in a template
    survives untouched.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else DEFAULT_PROMPT_DIR
        self.templates: Dict[str, str] = {}
        for kind, fname in PROMPT_FILES.items():
            path = self.directory / fname
            if not path.is_file():
                raise ConfigError(f"prompt template missing: {path}")
            self.templates[kind] = path.read_text(encoding="utf-8")

    def render(self, kind: str, slots: Optional[dict] = None) -> str:
        text = self.templates[kind]
        for name, value in (slots or {}).items():
            text = text.replace("{" + name + "}", str(value))
        return text.replace("{{", "{").replace("}}", "}")


# ---------------------------------------------------------------------------
# output parsing

_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def parse_question_list(raw: Optional[str]) -> List[str]:
    """Parse a JSON array of ``{"question": ...}`` objects into strings.

    Raises ValueError when no JSON array can be recovered.
    """
    if raw is None:
        raise ValueError("empty model output")
    text = _FENCE.sub("", raw.strip())
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("["), text.rfind("]")
        if start < 0 or end <= start:
            raise ValueError("no JSON array in model output")
        try:
            data = json.loads(text[start:end + 1])
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid JSON array: {exc}") from exc
    if isinstance(data, dict) and isinstance(data.get("questions"), list):
        data = data["questions"]
    if not isinstance(data, list):
        raise ValueError("model output is not a JSON array")
    questions = []
    for item in data:
        if isinstance(item, dict):
            item = item.get("question")
        if isinstance(item, str) and item.strip():
            questions.append(item.strip())
    return questions


_INT = re.compile(r"\+?\d+")


def parse_rank_output(raw: Optional[str], group_count: int,
                      limit: int = MAX_RANKED_GROUPS) -> List[int]:
    """Extract 1-based group numbers from a comma-separated ranking.

    Non-integer pieces, out-of-range and repeated numbers are dropped; at
    most ``limit`` numbers are kept.
    """
    picked: List[int] = []
    for piece in (raw or "").split(","):
        piece = piece.strip()
        if not _INT.fullmatch(piece):
            continue
        idx = int(piece)
        if 1 <= idx <= group_count and idx not in picked:
            picked.append(idx)
            if len(picked) == limit:
                break
    return picked


# ---------------------------------------------------------------------------
# backends


@dataclass
class ChatRequest:
    task: str  # caption | textual | visual | multimodal | rank
    prompt: str
    model: str
    images: Sequence[str] = ()
    image_root: Optional[str] = None
    context: dict = field(default_factory=dict)


def tokenize(text: str) -> List[str]:
    """Lowercase whitespace tokens with surrounding punctuation stripped."""
    tokens = [t.strip(string.punctuation) for t in text.lower().split()]
    tokens = [t for t in tokens if t]
    if not tokens and text.strip():
        tokens = [text.strip().lower()]
    return tokens


def token_bucket(token: str, dimension: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % dimension


def hashed_bag_embedding(texts: Sequence[str], dimension: int) -> np.ndarray:
    out = np.zeros((len(texts), dimension), dtype=np.float64)
    for row, text in enumerate(texts):
        for tok in tokenize(text):
            out[row, token_bucket(tok, dimension)] += 1.0
    return out


def _one_line(text: str) -> str:
    return " ".join(text.split())


class MockBackend:
    """Deterministic offline backend.

    ``responder(request) -> str | None`` may override chat output for any
    task; returning None falls through to the built-in behaviour:

    * caption: ``caption(<kind>:<image_ref>)``
    * textual: one ``what about <block>?`` question per blank-line block
    * visual / multimodal: ``mock_questions_per_image`` questions naming the
      image file
    * rank: the identity ranking ``1,2,...,min(5, m)``
    """

    name = "mock"

    def __init__(self, dimension: int = 256, questions_per_image: int = 2,
                 responder: Optional[Callable[[ChatRequest], Optional[str]]] = None):
        self.dimension = dimension
        self.questions_per_image = questions_per_image
        self.responder = responder

    def chat(self, request: ChatRequest) -> str:
        if self.responder is not None:
            out = self.responder(request)
            if out is not None:
                return out
        ctx = request.context
        if request.task == "caption":
            return f"caption({ctx['kind']}:{ctx['image_ref']})"
        if request.task == "textual":
            blocks = [_one_line(b) for b in ctx["document_text"].split("\n\n")]
            qs = [f"what about {b}?" for b in blocks if b]
            return json.dumps([{"question": q} for q in qs[:ctx["max_questions"]]])
        if request.task in ("visual", "multimodal"):
            name = os.path.basename(ctx["image_ref"])
            word = "page" if request.task == "multimodal" else "figure"
            qs = [f"what does {word} {name} show {i}?"
                  for i in range(1, self.questions_per_image + 1)]
            return json.dumps([{"question": q} for q in qs])
        if request.task == "rank":
            m = min(MAX_RANKED_GROUPS, ctx["group_count"])
            return ",".join(str(i) for i in range(1, m + 1))
        raise GatewayError(f"mock backend: unknown task {request.task!r}")

    def embed(self, texts: Sequence[str], model: str) -> np.ndarray:
        return hashed_bag_embedding(texts, self.dimension)


class _Retryable(Exception):
    pass


def image_data_uri(path: str) -> str:
    mime = mimetypes.guess_type(path)[0] or "image/png"
    with open(path, "rb") as fh:
        payload = base64.b64encode(fh.read()).decode("ascii")
    return f"data:{mime};base64,{payload}"


class LiveBackend:
    """OpenAI-compatible HTTP backend.

    At most ``max_parallel_requests`` requests are in flight at once across
    all threads sharing this backend. Transport errors, HTTP 429 and 5xx
    are retried with exponential backoff.
    """

    name = "live"

    def __init__(self, config: ProviderConfig, client=None, sleep=time.sleep):
        import httpx

        self._httpx = httpx
        self.config = config
        api_key = os.environ.get(config.api_key_env_var, "")
        if client is None:
            client = httpx.Client(
                base_url=config.endpoint_url.rstrip("/") + "/",
                timeout=config.request_timeout,
                headers={"Authorization": f"Bearer {api_key}"},
            )
        self.client = client
        self._slots = threading.BoundedSemaphore(config.max_parallel_requests)
        self._sleep = sleep
        self._inflight = 0
        self.max_inflight = 0
        self._lock = threading.Lock()

    def _post(self, path: str, body: dict) -> dict:
        last_exc: Optional[Exception] = None
        for attempt in range(self.config.retry_limit + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                with self._slots:
                    with self._lock:
                        self._inflight += 1
                        self.max_inflight = max(self.max_inflight, self._inflight)
                    try:
                        resp = self.client.post(path, json=body)
                    finally:
                        with self._lock:
                            self._inflight -= 1
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise _Retryable(f"HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    raise TransportError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (_Retryable, self._httpx.TransportError, ValueError) as exc:
                last_exc = exc
                logger.warning("%s attempt %d failed: %s", path, attempt + 1, exc)
        raise TransportError(f"{path}: failed after {self.config.retry_limit + 1} attempts: {last_exc}")

    def _image_url(self, ref: str, root: Optional[str]) -> str:
        if ref.startswith(("http://", "https://", "data:")):
            return ref
        path = ref if os.path.isabs(ref) or root is None else os.path.join(root, ref)
        try:
            return image_data_uri(path)
        except OSError as exc:
            raise GatewayError(f"cannot read image {path}: {exc}") from exc

    def chat(self, request: ChatRequest) -> str:
        if request.images:
            content = [{"type": "text", "text": request.prompt}]
            for ref in request.images:
                content.append({"type": "image_url",
                                "image_url": {"url": self._image_url(ref, request.image_root)}})
        else:
            content = request.prompt
        body = {
            "model": request.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.config.temperature,
        }
        data = self._post("chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected chat response shape: {exc}") from exc

    def embed(self, texts: Sequence[str], model: str) -> np.ndarray:
        rows = []
        size = self.config.embed_batch_size
        for start in range(0, len(texts), size):
            batch = list(texts[start:start + size])
            data = self._post("embeddings", {"model": model, "input": batch})
            try:
                items = sorted(data["data"], key=lambda d: d["index"])
                vecs = [item["embedding"] for item in items]
            except (KeyError, TypeError) as exc:
                raise TransportError(f"unexpected embeddings response shape: {exc}") from exc
            if len(vecs) != len(batch):
                raise TransportError("embeddings response count mismatch")
            rows.extend(vecs)
        return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# gateway


class ModelGateway:
    """Facade used by every pipeline stage for model calls."""

    def __init__(self, config: Optional[ProviderConfig] = None, backend=None,
                 prompts: Optional[PromptLibrary] = None):
        self.config = config or ProviderConfig()
        if backend is None:
            if self.config.backend == "mock":
                backend = MockBackend(self.config.embed_dimension or 256,
                                      self.config.mock_questions_per_image)
            else:
                backend = LiveBackend(self.config)
        self.backend = backend
        self.prompts = prompts or PromptLibrary(self.config.prompt_dir)
        self.calls: Counter = Counter()
        self._lock = threading.Lock()
        self._dimension = self.config.embed_dimension
        if self._dimension is None and isinstance(backend, MockBackend):
            self._dimension = backend.dimension

    @property
    def dimension(self) -> Optional[int]:
        return self._dimension

    def _chat(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls[request.task] += 1
        return self.backend.chat(request)

    def caption_component(self, image_ref: str, kind: str, root=None) -> str:
        request = ChatRequest(
            task="caption",
            prompt=self.prompts.render("caption"),
            model=self.config.caption_model_name,
            images=(image_ref,),
            image_root=str(root) if root else None,
            context={"image_ref": image_ref, "kind": kind},
        )
        for attempt in range(self.config.retry_limit + 1):
            caption = (self._chat(request) or "").strip()
            if caption:
                return caption
            logger.warning("empty caption for %s (attempt %d)", image_ref, attempt + 1)
        raise GenerationError(f"empty caption for {image_ref}", raw_output="")

    def generate_questions(self, prompt_kind: str, payload, max_questions: int,
                           root=None) -> List[str]:
        """Generate up to ``max_questions`` questions.

        ``payload`` is the document text for ``textual`` prompts and an image
        reference (or list of references) otherwise.
        """
        if prompt_kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {prompt_kind!r}")
        if max_questions < 1:
            raise ValueError("max_questions must be >= 1")
        context = {"max_questions": max_questions}
        if prompt_kind == "textual":
            if not isinstance(payload, str):
                raise TypeError("textual prompts take the document text")
            prompt = self.prompts.render("textual", {"cfg.max_new_questions": max_questions,
                                                     "document_text": payload})
            images = ()
            context["document_text"] = payload
            model = self.config.textual_model_name or self.config.chat_model_name
        else:
            images = (payload,) if isinstance(payload, str) else tuple(payload)
            if not images:
                raise ValueError(f"{prompt_kind} prompts need at least one image")
            prompt = self.prompts.render(prompt_kind, {"cfg.max_new_questions": max_questions})
            context["image_ref"] = images[0]
            model = self.config.chat_model_name
        request = ChatRequest(prompt_kind, prompt, model, images,
                              str(root) if root else None, context)
        raw = None
        for attempt in range(self.config.retry_limit + 1):
            raw = self._chat(request)
            try:
                return parse_question_list(raw)[:max_questions]
            except ValueError as exc:
                logger.warning("unparseable %s output (attempt %d): %s",
                               prompt_kind, attempt + 1, exc)
        raise GenerationError(f"could not parse {prompt_kind} questions", raw_output=raw)

    def rank_groups_llm(self, query: str, groups_text: str, group_count: int) -> List[int]:
        if group_count < 1:
            raise ValueError("group_count must be >= 1")
        request = ChatRequest(
            task="rank",
            prompt=self.prompts.render("rank", {"query": query, "questions_text": groups_text}),
            model=self.config.rank_model_name or self.config.chat_model_name,
            context={"query": query, "group_count": group_count,
                     "groups_text": groups_text},
        )
        raw = self._chat(request)
        ranked = parse_rank_output(raw, group_count)
        if not ranked:
            raise RankingError("no valid group number in ranking output", raw_output=raw)
        return ranked

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Embed ``texts``; rows are L2-normalised float32 vectors."""
        texts = list(texts)
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValueError("embed_texts requires non-empty strings")
        with self._lock:
            self.calls["embed"] += 1
        if not texts:
            return np.zeros((0, self._dimension or 0), dtype=np.float32)
        raw = np.asarray(self.backend.embed(texts, self.config.embed_model_name),
                         dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] != len(texts):
            raise GatewayError(f"embedding backend returned shape {raw.shape}")
        with self._lock:
            if self._dimension is None:
                self._dimension = raw.shape[1]
        if raw.shape[1] != self._dimension:
            raise GatewayError(
                f"embedding dimension {raw.shape[1]} != configured {self._dimension}")
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise GatewayError("backend returned a zero embedding")
        return (raw / norms).astype(np.float32)

    def embed_query(self, text: str) -> np.ndarray:
        return self.embed_texts([text])[0]
