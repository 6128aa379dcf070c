"""
bench.py - Three-variant retrieval bench: worker only, lens + worker, and
lens + index + worker, with per-role token accounting.

Every count is ``estimate_tokens`` over the exact text presented to a role.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
import textwrap
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from binding_engine import Candidate, describe_candidates, index_entries, lens_select
from constants import BRIEF_LIMIT, LOCAL_CONTEXT_TOKENS, READ_LIMIT, REPORT_COLUMNS, SUMMARY_MARKER, TOP_K
from reasoner import LexicalReasoner, Reasoner, Scorer
from utils import InputError, token_spans
from view_engine import estimate_tokens

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    WORKER_ONLY = "worker_only"
    LENS_WORKER = "lens_worker"
    LENS_INDEX_WORKER = "lens_index_worker"


VARIANT_ALIASES = {
    "worker_only": Variant.WORKER_ONLY,
    "lens": Variant.LENS_WORKER,
    "lens_worker": Variant.LENS_WORKER,
    "lens_index": Variant.LENS_INDEX_WORKER,
    "lens_index_worker": Variant.LENS_INDEX_WORKER,
}


class MalformedQuery(InputError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NoReports(InputError):
    pass


class IoError(InputError):
    pass


def parse_variant(name: str) -> Variant:
    try:
        return VARIANT_ALIASES[name]
    except KeyError:
        raise InputError(f"Unknown variant {name!r}; expected one of {', '.join(VARIANT_ALIASES)}")


# --------------------------------- #
# domain types
# --------------------------------- #

@dataclass(frozen=True)
class BenchQuery:
    query_id: str
    local_context: str
    candidates: Tuple[Candidate, ...]
    gold_id: str


@dataclass(frozen=True)
class VariantConfig:
    variant: Variant
    k: int = TOP_K
    brief_limit: int = BRIEF_LIMIT
    read_limit: int = READ_LIMIT
    local_context_tokens: int = LOCAL_CONTEXT_TOKENS

    def __post_init__(self) -> None:
        for name in ("k", "brief_limit", "read_limit", "local_context_tokens"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1 (got {getattr(self, name)})")


@dataclass(frozen=True)
class QueryReport:
    query_id: str
    variant: Variant
    selected_ids: Tuple[str, ...]
    hit_at_k: bool
    top1: bool
    worker_input_tokens: int
    lens_tokens: int
    index_tokens: int
    total_tokens: int


@dataclass
class VariantSummary:
    queries: int
    hit_at_k_rate: float
    top1_rate: float
    avg_worker_tokens: float
    avg_lens_tokens: float
    avg_index_tokens: float
    avg_total_tokens: float


@dataclass
class BenchSummary:
    variants: Dict[str, VariantSummary]
    rows: List[QueryReport] = field(default_factory=list)


class PresentationProbe:
    """Largest text handed to the lens and to the worker per selected item."""

    def __init__(self):
        self._lock = threading.Lock()
        self.max_brief_chars = 0
        self.max_read_chars = 0
        self.briefs_seen = 0
        self.reads_seen = 0

    def lens(self, text: str) -> None:
        with self._lock:
            self.max_brief_chars = max(self.max_brief_chars, len(text))
            self.briefs_seen += 1

    def worker(self, text: str) -> None:
        with self._lock:
            self.max_read_chars = max(self.max_read_chars, len(text))
            self.reads_seen += 1


# --------------------------------- #
# corpus
# --------------------------------- #

def _parse_query(raw: Dict, number: int) -> BenchQuery:
    if not isinstance(raw, dict):
        raise MalformedQuery(number, "expected a JSON object")
    for key in ("query_id", "local_context", "candidates", "gold_id"):
        if key not in raw:
            raise MalformedQuery(number, f"missing {key}")
    if not isinstance(raw["candidates"], list):
        raise MalformedQuery(number, "candidates must be a list")

    candidates = []
    for item in raw["candidates"]:
        if not isinstance(item, dict) or "id" not in item or "text" not in item:
            raise MalformedQuery(number, "each candidate needs id and text")
        candidates.append(Candidate(str(item["id"]), str(item["text"])))
    ids = [c.id for c in candidates]
    if len(set(ids)) != len(ids):
        raise MalformedQuery(number, "candidate ids are not unique")
    if str(raw["gold_id"]) not in ids:
        raise MalformedQuery(number, f"gold_id {raw['gold_id']!r} is not among the candidates")
    return BenchQuery(
        query_id=str(raw["query_id"]),
        local_context=str(raw["local_context"]),
        candidates=tuple(candidates),
        gold_id=str(raw["gold_id"]),
    )


def load_corpus(path: Path) -> List[BenchQuery]:
    """
    One JSON object per line: query_id, local_context, candidates[{id, text}], gold_id.

    Raises:
        InputError: file missing.
        MalformedQuery: bad line (line-numbered).
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"Corpus not found: {path}")
    queries = []
    with path.open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedQuery(number, f"invalid JSON: {e}")
            queries.append(_parse_query(raw, number))
    return queries


def write_corpus(queries: Sequence[BenchQuery], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for q in queries:
            f.write(json.dumps({
                "query_id": q.query_id,
                "local_context": q.local_context,
                "candidates": [{"id": c.id, "text": c.text} for c in q.candidates],
                "gold_id": q.gold_id,
            }) + "\n")
    return path


def generate_synthetic_corpus(
    n_queries: int,
    n_candidates: int,
    seed: int = 0,
    shared_candidates: bool = False,
    planted_tokens: int = 4,
) -> List[BenchQuery]:
    """
    Deterministic corpus. Every candidate opens with tokens only it carries;
    the local context of a query repeats those of its gold candidate plus a
    few common words, so a lexical scorer always ranks the gold first.
    """
    if n_queries < 0 or n_candidates < 1:
        raise InputError("Need n_queries >= 0 and n_candidates >= 1")
    rng = random.Random(seed)
    common = [f"w{i:03d}" for i in range(200)]
    local_words = [f"l{i:03d}" for i in range(200)]

    def make_pool(prefix: str) -> Tuple[Candidate, ...]:
        pool = []
        for c in range(n_candidates):
            marker = " ".join(f"u{c:03d}x{j}" for j in range(planted_tokens))
            words = " ".join(rng.choice(common) for _ in range(rng.randint(30, 120)))
            pool.append(Candidate(f"{prefix}c{c:03d}", f"def {marker} ( ):\n    {words}\n"))
        return tuple(pool)

    shared = make_pool("") if shared_candidates else None
    queries = []
    for q in range(n_queries):
        pool = shared if shared is not None else make_pool(f"q{q:03d}-")
        gold = rng.randrange(n_candidates)
        marker = " ".join(f"u{gold:03d}x{j}" for j in range(planted_tokens))
        context = (
            f"# complete {marker}\n"
            + " ".join(rng.sample(local_words, 20)) + "\n"
            + " ".join(rng.sample(common, min(planted_tokens - 1, len(common)))) + "\n"
        )
        queries.append(BenchQuery(f"q{q:03d}", context, pool, pool[gold].id))
    return queries


# --------------------------------- #
# variants
# --------------------------------- #

def window_local_context(text: str, n_tokens: int) -> str:
    """The last ``n_tokens`` tokens of the worker's local context."""
    spans = list(token_spans(text))
    if len(spans) <= n_tokens:
        return text
    return text[spans[-n_tokens].start():]


def candidate_set_digest(candidates: Sequence[Candidate]) -> str:
    digest = hashlib.sha256()
    for c in candidates:
        digest.update(c.id.encode("utf-8") + b"\0" + c.text.encode("utf-8") + b"\0")
    return digest.hexdigest()


@dataclass(frozen=True)
class IndexPackage:
    lines: Dict[str, str]
    build_tokens: int


def build_index_package(candidates: Sequence[Candidate], line_limit: int) -> IndexPackage:
    """Index lines per candidate; building reads every full candidate text once."""
    entries = index_entries([(c.id, c.text) for c in candidates], max_degree=3)
    return IndexPackage(
        lines=describe_candidates(candidates, entries, line_limit=line_limit),
        build_tokens=sum(estimate_tokens(c.text) for c in candidates),
    )


def plan_index_packages(queries: Sequence[BenchQuery], line_limit: int) -> List[Tuple[IndexPackage, int]]:
    """
    Build (or reuse) one package per distinct candidate set, in input order.
    Only the first query on a set is charged its build tokens.
    """
    cache: Dict[str, IndexPackage] = {}
    plan = []
    for query in queries:
        key = candidate_set_digest(query.candidates)
        if key in cache:
            plan.append((cache[key], 0))
        else:
            package = build_index_package(query.candidates, line_limit)
            cache[key] = package
            plan.append((package, package.build_tokens))
    return plan


def _probed(scorer: Scorer, probe: Optional[PresentationProbe]) -> Scorer:
    if probe is None:
        return scorer

    def score(query: str, text: str) -> float:
        probe.lens(text)
        return scorer(query, text)

    return score


def _worker_reads(query: BenchQuery, selected: Sequence[str], read_limit: int, probe: Optional[PresentationProbe]) -> int:
    by_id = {c.id: c for c in query.candidates}
    tokens = 0
    for cid in selected:
        read = by_id[cid].text[:read_limit]
        if probe is not None:
            probe.worker(read)
        tokens += estimate_tokens(read)
    return tokens


def run_variant(
    query: BenchQuery,
    config: VariantConfig,
    reasoner: Optional[Reasoner] = None,
    probe: Optional[PresentationProbe] = None,
    index: Optional[Tuple[IndexPackage, int]] = None,
) -> QueryReport:
    """
    worker_only: the worker scores every brief itself.
    lens_worker: the lens scores briefs, the worker reads only the top k.
    lens_index_worker: the lens scores index lines instead of briefs.
    """
    reasoner = reasoner or LexicalReasoner()
    local = window_local_context(query.local_context, config.local_context_tokens)
    local_tokens = estimate_tokens(local)
    lens_tokens = 0
    index_tokens = 0

    if config.variant == Variant.LENS_INDEX_WORKER:
        package, index_tokens = index if index is not None else plan_index_packages([query], config.brief_limit)[0]
        presented = [Candidate(c.id, package.lines[c.id]) for c in query.candidates]
    else:
        presented = [Candidate(c.id, c.text[:config.brief_limit]) for c in query.candidates]

    scorer = _probed(reasoner.scorer_for([c.text[:config.brief_limit] for c in presented]), probe)
    decision = lens_select(presented, local, config.k, config.brief_limit, scorer=scorer)
    selected = tuple(decision.ids)
    # index lines already open with the candidate id
    id_cost = config.variant != Variant.LENS_INDEX_WORKER
    shown = sum(
        (estimate_tokens(c.id) if id_cost else 0) + estimate_tokens(c.text[:config.brief_limit])
        for c in presented
    )

    reads = _worker_reads(query, selected, config.read_limit, probe)
    if config.variant == Variant.WORKER_ONLY:
        worker_tokens = local_tokens + shown + reads
    else:
        lens_tokens = local_tokens + shown
        worker_tokens = local_tokens + reads

    return QueryReport(
        query_id=query.query_id,
        variant=config.variant,
        selected_ids=selected,
        hit_at_k=query.gold_id in selected,
        top1=bool(selected) and selected[0] == query.gold_id,
        worker_input_tokens=worker_tokens,
        lens_tokens=lens_tokens,
        index_tokens=index_tokens,
        total_tokens=worker_tokens + lens_tokens + index_tokens,
    )


def run_bench(
    queries: Sequence[BenchQuery],
    configs: Sequence[VariantConfig],
    reasoner: Optional[Reasoner] = None,
    workers: int = 1,
    probe: Optional[PresentationProbe] = None,
    progress: bool = False,
) -> List[QueryReport]:
    """
    Run every config over every query. Reports come back grouped by config,
    queries in input order, whatever the completion order.
    """
    reasoner = reasoner or LexicalReasoner()
    jobs = []
    for config in configs:
        plan = (
            plan_index_packages(queries, config.brief_limit)
            if config.variant == Variant.LENS_INDEX_WORKER
            else [None] * len(queries)
        )
        jobs.extend((query, config, index) for query, index in zip(queries, plan))

    def work(job) -> QueryReport:
        query, config, index = job
        return run_variant(query, config, reasoner, probe, index)

    if workers <= 1:
        return [work(job) for job in tqdm(jobs, desc="bench", disable=not progress)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(work, jobs), total=len(jobs), desc="bench", disable=not progress))


# --------------------------------- #
# metrics and reports
# --------------------------------- #

def compute_metrics(reports: Sequence[QueryReport]) -> BenchSummary:
    """
    Raises:
        NoReports: empty input.
    """
    if not reports:
        raise NoReports("No query reports to summarize")
    grouped: Dict[str, List[QueryReport]] = {}
    for r in reports:
        grouped.setdefault(Variant(r.variant).value, []).append(r)

    variants = {}
    for name, rows in grouped.items():
        n = len(rows)
        variants[name] = VariantSummary(
            queries=n,
            hit_at_k_rate=sum(r.hit_at_k for r in rows) / n,
            top1_rate=sum(r.top1 for r in rows) / n,
            avg_worker_tokens=sum(r.worker_input_tokens for r in rows) / n,
            avg_lens_tokens=sum(r.lens_tokens for r in rows) / n,
            avg_index_tokens=sum(r.index_tokens for r in rows) / n,
            avg_total_tokens=sum(r.total_tokens for r in rows) / n,
        )
    return BenchSummary(variants=variants, rows=list(reports))


def _summary_values(s: VariantSummary) -> List[str]:
    return [
        repr(s.hit_at_k_rate),
        repr(s.top1_rate),
        repr(s.avg_worker_tokens),
        repr(s.avg_lens_tokens),
        repr(s.avg_index_tokens),
        repr(s.avg_total_tokens),
    ]


def emit_report(summary: BenchSummary, path: Path, fmt: str = "csv") -> List[Path]:
    """
    Write the CSV (data rows, then ``#summary`` rows per variant) and/or a
    JSON twin next to it.

    Raises:
        IoError: path not writable.
    """
    if fmt not in ("csv", "json", "both"):
        raise InputError(f"Unknown report format: {fmt}")
    path = Path(path)
    written = []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt in ("csv", "both"):
            with path.open("w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(REPORT_COLUMNS)
                for r in summary.rows:
                    writer.writerow([
                        r.query_id,
                        Variant(r.variant).value,
                        int(r.hit_at_k),
                        int(r.top1),
                        r.worker_input_tokens,
                        r.lens_tokens,
                        r.index_tokens,
                        r.total_tokens,
                    ])
                for name, s in summary.variants.items():
                    writer.writerow([SUMMARY_MARKER, name] + _summary_values(s))
            written.append(path)
        if fmt in ("json", "both"):
            target = path.with_suffix(".json") if fmt == "both" or path.suffix != ".json" else path
            data = {
                "summary": {name: asdict(s) for name, s in summary.variants.items()},
                "rows": [
                    {**asdict(r), "variant": Variant(r.variant).value, "selected_ids": list(r.selected_ids)}
                    for r in summary.rows
                ],
            }
            with target.open("w", encoding="utf-8") as f:
                json.dump(data, f, indent=2)
            written.append(target)
    except OSError as e:
        raise IoError(f"Cannot write report to {path}: {e}")
    return written


def read_report(path: Path) -> BenchSummary:
    """Parse a CSV written by ``emit_report``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Report not found: {path}")
    rows: List[QueryReport] = []
    variants: Dict[str, VariantSummary] = {}
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != REPORT_COLUMNS:
            raise InputError(f"{path}: unexpected header {header}")
        for record in reader:
            if not record:
                continue
            if record[0] == SUMMARY_MARKER:
                name, values = record[1], [float(v) for v in record[2:]]
                count = sum(1 for r in rows if r.variant.value == name)
                variants[name] = VariantSummary(count, *values)
                continue
            worker, lens, index, total = (int(v) for v in record[4:8])
            rows.append(QueryReport(
                query_id=record[0],
                variant=Variant(record[1]),
                selected_ids=(),
                hit_at_k=record[2] == "1",
                top1=record[3] == "1",
                worker_input_tokens=worker,
                lens_tokens=lens,
                index_tokens=index,
                total_tokens=total,
            ))
    return BenchSummary(variants=variants, rows=rows)


def format_summary(summary: BenchSummary) -> str:
    """Human-readable summary block printed by the CLI."""
    report = textwrap.dedent(f"""
    {'='*70}
    RETRIEVAL BENCH SUMMARY
    {'='*70}

    """)
    for name, s in summary.variants.items():
        report += (
            f"  {name:18s} queries {s.queries:4d}  hit@k {s.hit_at_k_rate:.3f}  top1 {s.top1_rate:.3f}  "
            f"worker {s.avg_worker_tokens:8.1f}  lens {s.avg_lens_tokens:8.1f}  "
            f"index {s.avg_index_tokens:8.1f}  total {s.avg_total_tokens:8.1f}\n"
        )
    return report
