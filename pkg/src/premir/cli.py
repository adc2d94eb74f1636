"""
Command-line front end: ``caption -> generate -> index -> query / eval / analyze``.

Every stage reads and writes artifacts under one work directory, so stages
can be re-run independently. Exit codes: 0 success, 1 usage or config
error, 2 missing upstream artifact, 3 provider failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import yaml

from . import evaluation as ev
from .corpus import Corpus, Document, dump_corpus, load_corpus, with_surrogates
from .errors import ArtifactMissingError, ConfigError, GatewayError, PremirError
from .gateway import ModelGateway, ProviderConfig
from .index import load as load_index, persist as persist_index, build_index
from .preq import MODALITIES, GenConfig, build_pool, load_pool, parse_modalities, save_pool
from .qcluster import DEFAULT_GROUP_CAP, QueryRequest, RetrievalEngine

logger = logging.getLogger("premir")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_PROVIDER = 0, 1, 2, 3


@dataclass
class RetrievalSettings:
    use_qcluster: bool = True
    top_passages: int = 5
    group_cap: int = DEFAULT_GROUP_CAP
    modality_mask: tuple = MODALITIES
    top_k_override: Optional[int] = None


@dataclass
class AnalysisSettings:
    thresholds: List[float] = field(default_factory=lambda: list(ev.DEFAULT_THRESHOLDS))
    eps: float = ev.DEFAULT_EPS
    min_pts: int = ev.DEFAULT_MIN_PTS
    n_values: List[int] = field(default_factory=lambda: [10, 30, 50, 70])


@dataclass
class RunConfig:
    corpus_manifest: Optional[str] = None
    workdir: str = "premir_work"
    queries: Optional[str] = None
    seed: int = 0
    workers: int = 4
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path = Path(".")) -> "RunConfig":
        data = dict(data or {})
        sections = {"provider": ProviderConfig, "gen": GenConfig,
                    "retrieval": RetrievalSettings, "analysis": AnalysisSettings}
        kwargs = {}
        try:
            for name, typ in sections.items():
                if name in data:
                    kwargs[name] = typ(**(data.pop(name) or {}))
            for key in ("corpus_manifest", "workdir", "queries"):
                if data.get(key) is not None:
                    p = Path(data[key])
                    data[key] = str(p if p.is_absolute() else base_dir / p)
            cfg = cls(**data, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.retrieval.modality_mask = parse_modalities(cfg.retrieval.modality_mask)
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))


# ---------------------------------------------------------------------------
# workdir layout


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def corpus(self):
        return self.root / "corpus" / "manifest.jsonl"

    @property
    def preqs(self):
        return self.root / "preqs"

    @property
    def index(self):
        return self.root / "index"

    @property
    def eval(self):
        return self.root / "eval"

    @property
    def analysis(self):
        return self.root / "analysis"

    def fingerprint_path(self, stage):
        return self.root / "fingerprints" / f"{stage}.json"

    def write_fingerprint(self, stage: str, payload: dict) -> str:
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str)
                                .encode("utf-8")).hexdigest()
        path = self.fingerprint_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"stage": stage, "fingerprint": digest, "config": payload},
                                   indent=2, sort_keys=True, default=str) + "\n")
        return digest

    def read_fingerprint(self, stage: str) -> Optional[str]:
        path = self.fingerprint_path(stage)
        if not path.is_file():
            return None
        return json.loads(path.read_text())["fingerprint"]


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else ""


# ---------------------------------------------------------------------------
# commands


def _gateway(cfg: RunConfig) -> ModelGateway:
    return ModelGateway(cfg.provider)


def _load_source_corpus(cfg: RunConfig) -> Corpus:
    if not cfg.corpus_manifest:
        raise ConfigError("no corpus manifest given (--corpus or corpus_manifest in config)")
    return load_corpus(cfg.corpus_manifest)


def cmd_caption(cfg: RunConfig, args) -> int:
    wd = Workdir(cfg.workdir)
    corpus = _load_source_corpus(cfg)
    gateway = _gateway(cfg)
    todo = [(p, c) for p in corpus.passages() for c in p.components
            if not (args.skip_existing and c.caption)]
    logger.info("captioning %d components", len(todo))

    def caption(item):
        passage, comp = item
        try:
            return gateway.caption_component(comp.image_ref, comp.kind, root=corpus.root), None
        except GatewayError as exc:
            return None, f"component {comp.id}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as ex:
        outcomes = list(ex.map(caption, todo))
    captions = {}
    failures = []
    for (passage, comp), (text, err) in zip(todo, outcomes):
        if err:
            logger.warning(err)
            failures.append(err)
        else:
            captions[comp.id] = text

    docs = []
    for doc in corpus.documents:
        passages = []
        for p in doc.passages:
            comps = tuple(replace(c, caption=captions.get(c.id, c.caption)) for c in p.components)
            passages.append(replace(p, components=comps))
        docs.append(Document(doc.id, tuple(passages)))
    derived = with_surrogates(Corpus(docs, corpus.manifest_path))
    dump_corpus(derived, wd.corpus)
    wd.write_fingerprint("caption", {"corpus": _digest_file(Path(cfg.corpus_manifest)),
                                     "provider": cfg.provider.to_dict(),
                                     "skip_existing": args.skip_existing,
                                     "failures": failures})
    print(f"captioned {len(captions)} of {len(todo)} components -> {wd.corpus}")
    if todo and not captions:
        return EXIT_PROVIDER
    return EXIT_OK


def _captioned_corpus(cfg: RunConfig) -> Corpus:
    wd = Workdir(cfg.workdir)
    if wd.corpus.is_file():
        return load_corpus(wd.corpus)
    corpus = _load_source_corpus(cfg)
    if any(c.caption is None for p in corpus.passages() for c in p.components):
        raise ArtifactMissingError("captioned corpus not found; run caption")
    return corpus


def cmd_generate(cfg: RunConfig, args) -> int:
    wd = Workdir(cfg.workdir)
    corpus = with_surrogates(_captioned_corpus(cfg))
    payload = {"corpus": _digest_file(corpus.manifest_path), "gen": dataclasses.asdict(cfg.gen),
               "provider": cfg.provider.to_dict(), "seed": cfg.seed}
    fp = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    if (not args.force and wd.read_fingerprint("generate") == fp
            and (wd.preqs / "preqs.jsonl").is_file()):
        print(f"preQ store up to date ({wd.preqs})")
        return EXIT_OK
    pool = build_pool(corpus, cfg.gen, _gateway(cfg), workers=cfg.workers)
    save_pool(pool, wd.preqs)
    wd.write_fingerprint("generate", payload)
    partial = sum(1 for p in pool.report.get("passages", []) if p["partial"])
    print(f"generated {len(pool)} preQs for {len(corpus)} passages "
          f"({partial} partial) -> {wd.preqs}")
    return EXIT_OK


def cmd_index(cfg: RunConfig, args) -> int:
    wd = Workdir(cfg.workdir)
    pool = load_pool(wd.preqs)
    if len(pool) and not pool.embedded:
        raise ArtifactMissingError("preQ embeddings not found; run generate")
    index = build_index(pool)
    persist_index(index, wd.index)
    wd.write_fingerprint("index", {"preqs": _digest_file(wd.preqs / "preqs.jsonl")})
    print(f"indexed {len(index)} preQs (dimension {index.dimension}) -> {wd.index}")
    return EXIT_OK


def _engine(cfg: RunConfig) -> RetrievalEngine:
    wd = Workdir(cfg.workdir)
    if not (wd.index / "vectors.bin").is_file():
        raise ArtifactMissingError("index not found; run index")
    pool = load_pool(wd.preqs)
    index = load_index(wd.index)
    if index.ids != [q.id for q in pool.preqs]:
        raise ArtifactMissingError("index is stale relative to the preQ store; run index")
    return RetrievalEngine(pool, _gateway(cfg), index, group_cap=cfg.retrieval.group_cap,
                           k_override=cfg.retrieval.top_k_override)


def _request(cfg: RunConfig, text: str = "placeholder") -> QueryRequest:
    r = cfg.retrieval
    try:
        return QueryRequest(text, r.top_passages, r.use_qcluster, r.modality_mask)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_query(cfg: RunConfig, args) -> int:
    engine = _engine(cfg)
    result = engine.answer(_request(cfg, args.text))
    print(json.dumps(result.record(args.query_id), indent=2))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    wd = Workdir(cfg.workdir)
    queries_path = args.queries or cfg.queries
    if not queries_path:
        raise ConfigError("no eval set given (--queries or queries in config)")
    queries = ev.load_eval_set(queries_path)
    if not queries:
        raise ConfigError(f"eval set {queries_path} is empty")
    engine = _engine(cfg)
    template = _request(cfg)
    if args.ablation == "modalities":
        reports = ev.modality_ablation(queries, engine, template)
    elif args.ablation == "qcluster":
        reports = ev.qcluster_ablation(queries, engine, template)
    else:
        reports = {"eval": ev.run_eval(queries, template, engine, workers=cfg.workers)}
    for label, rep in reports.items():
        rep.write(wd.eval, stem=_stem(label))
    table = ev.format_table(reports)
    (wd.eval / f"{args.ablation or 'eval'}_summary.txt").write_text(table + "\n")
    wd.write_fingerprint(f"eval_{args.ablation or 'none'}", {"queries": _digest_file(Path(queries_path)),
                                  "retrieval": dataclasses.asdict(cfg.retrieval),
                                  "ablation": args.ablation,
                                  "reports": {k: r.config_fingerprint for k, r in reports.items()}})
    print(table)
    return EXIT_OK


def _stem(label: str) -> str:
    label = str(label)
    if label.startswith("- "):
        label = "no " + label[2:]
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_") or "eval"


def cmd_analyze(cfg: RunConfig, args) -> int:
    wd = Workdir(cfg.workdir)
    wd.analysis.mkdir(parents=True, exist_ok=True)
    a = cfg.analysis
    if args.target == "redundancy":
        pool = load_pool(wd.preqs)
        document_of = None
        if wd.corpus.is_file():
            document_of = load_corpus(wd.corpus).document_of()
        report = ev.redundancy_analysis(pool, a.thresholds, document_of)
        (wd.analysis / "redundancy.json").write_text(
            json.dumps(report.record(), indent=2, sort_keys=True) + "\n")
        print(report.table())
    elif args.target == "coverage":
        corpus = with_surrogates(_captioned_corpus(cfg))
        report = ev.coverage_sweep(corpus, a.n_values, cfg.gen, _gateway(cfg),
                                   a.eps, a.min_pts, workers=cfg.workers)
        (wd.analysis / "coverage.json").write_text(
            json.dumps(report.record(), indent=2, sort_keys=True) + "\n")
        print(report.table())
    else:
        pool = load_pool(wd.preqs)
        out = ev.export_embeddings(pool, args.output or wd.analysis / "embeddings.tsv")
        print(f"wrote {out}")
    wd.write_fingerprint(f"analyze_{args.target}", {"analysis": dataclasses.asdict(a)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--workdir")
    common.add_argument("--corpus", help="corpus manifest (JSONL)")
    common.add_argument("--backend", choices=("live", "mock"))
    common.add_argument("--modalities", help="comma list of m,v,t")
    common.add_argument("--no-qcluster", action="store_true",
                        help="rank passages by best preQ rank instead of the LLM")
    common.add_argument("--top-k-override", type=int)
    common.add_argument("--seed", type=int,
                        help="recorded in fingerprints; no pipeline stage draws random numbers")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="premir", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("caption", parents=[common], help="caption corpus components")
    p.add_argument("--skip-existing", action="store_true")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("generate", parents=[common], help="generate and embed preQs")
    p.add_argument("--force", action="store_true", help="regenerate even if up to date")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("index", parents=[common], help="build the vector index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common], help="answer one query")
    p.add_argument("text")
    p.add_argument("--query-id")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="evaluate an eval set")
    p.add_argument("--queries", help="eval set (JSONL)")
    p.add_argument("--ablation", choices=("modalities", "qcluster"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="preQ analyses")
    p.add_argument("target", choices=("redundancy", "coverage", "embeddings"))
    p.add_argument("--output", help="output path for embeddings export")
    p.set_defaults(func=cmd_analyze)
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        cfg = RunConfig.from_dict(data, path.parent)
    else:
        cfg = RunConfig()
    if args.workdir:
        cfg.workdir = args.workdir
    if args.corpus:
        cfg.corpus_manifest = args.corpus
    if args.backend:
        cfg.provider = replace(cfg.provider, backend=args.backend)
    if args.modalities:
        mods = parse_modalities(args.modalities)
        cfg.gen = GenConfig(cfg.gen.max_questions_per_source, mods)
        cfg.retrieval.modality_mask = mods
    if args.no_qcluster:
        cfg.retrieval.use_qcluster = False
    if args.top_k_override is not None:
        if args.top_k_override < 1:
            raise ConfigError("--top-k-override must be >= 1")
        cfg.retrieval.top_k_override = args.top_k_override
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ArtifactMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except GatewayError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ConfigError, PremirError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
