"""Adaptation measurements over completed interactions.

Per-repetition message length and listener accuracy, plus WNR, WND and
averaged-embedding cosine similarity between the messages for the same image
in consecutive repetitions.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import re
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import N_REPETITIONS, Interaction
from .stats import BootstrapSpec, bootstrap_ci

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("metric", "repetition", "mean", "ci_low", "ci_high", "n", "excluded_pairs")


class MetricError(ValueError):
    pass


class VectorFileError(MetricError):
    def __init__(self, path: str | Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


class Metric(str, enum.Enum):
    LENGTH = "LENGTH"
    ACCURACY = "ACCURACY"
    WNR = "WNR"
    WND = "WND"
    SIMILARITY = "SIMILARITY"

    @property
    def pairwise(self) -> bool:
        return self in (Metric.WNR, Metric.WND, Metric.SIMILARITY)


# -- tokens --------------------------------------------------------------------------------

def parse_stoplist(text: str) -> frozenset[str]:
    words = (line.split("#", 1)[0].strip().lower() for line in text.splitlines())
    return frozenset(w for w in words if w)


@lru_cache(maxsize=1)
def default_stoplist() -> frozenset[str]:
    return parse_stoplist(resources.files("icca").joinpath("data/stoplist.txt").read_text(encoding="utf-8"))


def load_stoplist(path: str | Path) -> frozenset[str]:
    return parse_stoplist(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class FilteredMessage:
    original: str
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


_SPLITTERS = re.compile(r"[-\u2010-\u2015/\\]")


def _strip_punct(text: str) -> str:
    text = _SPLITTERS.sub(" ", text)
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def filter_tokens(message: str, stoplist: Iterable[str] | None = None) -> FilteredMessage:
    """Lowercase, drop punctuation (dashes and slashes split words), split on whitespace, drop stop words."""
    stop = default_stoplist() if stoplist is None else frozenset(stoplist)
    words = _strip_punct(message.lower()).split()
    return FilteredMessage(message, tuple(w for w in words if w not in stop))


# -- novelty -------------------------------------------------------------------------------

def novelty_counts(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[int, int]:
    """(total edits, insertions + substitutions) of the best alignment of ``reference`` to ``hypothesis``.

    Alignments are ranked by total edits, then by insertions + substitutions,
    so deletions are preferred wherever they tie.
    """
    m, n = len(reference), len(hypothesis)
    prev = [(j, j) for j in range(n + 1)]
    for i in range(1, m + 1):
        cur = [(i, 0)] + [(0, 0)] * n
        for j in range(1, n + 1):
            a, b = prev[j]
            delete = (a + 1, b)
            a, b = cur[j - 1]
            insert = (a + 1, b + 1)
            a, b = prev[j - 1]
            same = reference[i - 1] == hypothesis[j - 1]
            diag = (a, b) if same else (a + 1, b + 1)
            cur[j] = min(delete, insert, diag)
        prev = cur
    return prev[n]


def _tokens(m: FilteredMessage | Sequence[str]) -> Sequence[str]:
    return m.tokens if isinstance(m, FilteredMessage) else m


def wnd(reference: FilteredMessage | Sequence[str], hypothesis: FilteredMessage | Sequence[str]) -> int:
    return novelty_counts(_tokens(reference), _tokens(hypothesis))[1]


def wnr(reference: FilteredMessage | Sequence[str], hypothesis: FilteredMessage | Sequence[str]) -> float | None:
    """Insertions + substitutions per reference token; None when the reference is empty."""
    ref = _tokens(reference)
    if not ref:
        return None
    return wnd(ref, hypothesis) / len(ref)


# -- embeddings ----------------------------------------------------------------------------

class WordVectors:
    def __init__(self, table: Mapping[str, np.ndarray], dim: int):
        self.table = dict(table)
        self.dim = dim

    def __contains__(self, word: str) -> bool:
        return word in self.table

    def __len__(self) -> int:
        return len(self.table)

    def mean(self, tokens: Sequence[str]) -> np.ndarray | None:
        hits = [self.table[t] for t in tokens if t in self.table]
        if not hits:
            return None
        return np.mean(hits, axis=0)


def load_vectors(path: str | Path, vocabulary: Iterable[str] | None = None) -> WordVectors:
    """Read a GloVe-style text file: a word, then the same number of floats on every line.

    With ``vocabulary`` only those words are kept, which keeps large files cheap.
    """
    keep = None if vocabulary is None else set(vocabulary)
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) < 2:
                raise VectorFileError(path, lineno, "expected a word followed by numbers")
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise VectorFileError(path, lineno, f"expected {dim} values, found {len(parts) - 1}")
            word = parts[0]
            if keep is not None and word not in keep:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise VectorFileError(path, lineno, f"non-numeric value ({exc})") from None
            if not np.all(np.isfinite(vec)):
                raise VectorFileError(path, lineno, "non-finite value")
            table[word] = vec
    if dim is None:
        raise VectorFileError(path, 0, "empty vector file")
    return WordVectors(table, dim)


def embedding_similarity(a: FilteredMessage | Sequence[str], b: FilteredMessage | Sequence[str],
                         vectors: WordVectors) -> float | None:
    """Cosine of the mean in-vocabulary vectors; None if either side has no known word or a zero mean."""
    va, vb = vectors.mean(_tokens(a)), vectors.mean(_tokens(b))
    if va is None or vb is None:
        return None
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


# -- length tokenizers ---------------------------------------------------------------------

LengthTokenizer = Callable[[str], int]


def _hf_tokenizer(name: str) -> LengthTokenizer:
    try:
        from tokenizers import Tokenizer  # optional
    except ImportError as exc:
        raise MetricError(f"tokenizer hf:{name} needs the 'tokenizers' package") from exc
    tok = Tokenizer.from_pretrained(name)
    return lambda text: len(tok.encode(text, add_special_tokens=False).ids)


def get_tokenizer(spec: str | LengthTokenizer = "whitespace") -> LengthTokenizer:
    if callable(spec):
        return spec
    if spec == "whitespace":
        return lambda text: len(text.split())
    if spec == "filtered":
        return lambda text: len(filter_tokens(text).tokens)
    if spec.startswith("hf:"):
        return _hf_tokenizer(spec[3:])
    raise MetricError(f"unknown length tokenizer {spec!r} (whitespace, filtered, hf:NAME)")


# -- aggregation ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSeries:
    metric: Metric
    repetitions: tuple[int, ...]
    values: tuple[float | None, ...]
    ci_low: tuple[float | None, ...]
    ci_high: tuple[float | None, ...]
    n: tuple[int, ...]
    excluded_pairs: tuple[int, ...]

    def __post_init__(self):
        for v, lo, hi in zip(self.values, self.ci_low, self.ci_high):
            if v is not None and not lo <= v <= hi:
                raise MetricError(f"{self.metric.value}: CI [{lo}, {hi}] does not contain {v}")

    def rows(self) -> list[dict[str, object]]:
        return [
            {"metric": self.metric.value, "repetition": r, "mean": v, "ci_low": lo, "ci_high": hi,
             "n": n, "excluded_pairs": x}
            for r, v, lo, hi, n, x in zip(self.repetitions, self.values, self.ci_low, self.ci_high,
                                          self.n, self.excluded_pairs)
        ]


def _interaction(item) -> Interaction | None:
    """Accept a transcript or a bare interaction; incomplete transcripts give None."""
    if isinstance(item, Interaction):
        return item
    if not getattr(item, "complete", True):
        return None
    return item.interaction


def _pair_value(metric: Metric, ref: FilteredMessage, hyp: FilteredMessage, vectors) -> float | None:
    if metric is Metric.WNR:
        return wnr(ref, hyp)
    if metric is Metric.WND:
        return float(wnd(ref, hyp))
    return embedding_similarity(ref, hyp, vectors)


def per_repetition(
    metric: Metric | str,
    transcripts: Sequence,
    tokenizer: str | LengthTokenizer = "whitespace",
    *,
    stoplist: Iterable[str] | None = None,
    vectors: WordVectors | None = None,
    bootstrap: BootstrapSpec | None = None,
) -> MetricSeries:
    """Average a metric per repetition, first within each interaction and then across interactions.

    Pairwise metrics compare the messages for the same image id in repetitions
    r-1 and r and are indexed by r (2..6).
    """
    metric = Metric(metric)
    if not transcripts:
        raise MetricError("no transcripts to aggregate")
    interactions = []
    for item in transcripts:
        inter = _interaction(item)
        if inter is None:
            log.warning("skipping incomplete transcript %s", getattr(item, "run_id", "?"))
        else:
            interactions.append(inter)
    if not interactions:
        raise MetricError("no complete transcripts to aggregate")
    if metric is Metric.SIMILARITY and vectors is None:
        raise MetricError("SIMILARITY needs a word-vector table")
    bootstrap = bootstrap or BootstrapSpec()
    stop = default_stoplist() if stoplist is None else frozenset(stoplist)
    count = get_tokenizer(tokenizer) if metric is Metric.LENGTH else None

    reps = tuple(range(2 if metric.pairwise else 1, N_REPETITIONS + 1))
    per_rep: dict[int, list[float]] = {r: [] for r in reps}
    excluded = {r: 0 for r in reps}
    for inter in interactions:
        if metric.pairwise:
            by_rep = {r: {t.target_id: filter_tokens(t.speaker_message, stop) for t in inter.repetition(r)}
                      for r in range(1, N_REPETITIONS + 1)}
            for r in reps:
                vals = []
                for image_id, hyp in sorted(by_rep[r].items()):
                    ref = by_rep[r - 1].get(image_id)
                    v = None if ref is None else _pair_value(metric, ref, hyp, vectors)
                    if v is None:
                        excluded[r] += 1
                    else:
                        vals.append(v)
                if vals:
                    per_rep[r].append(float(np.mean(vals)))
        else:
            for r in reps:
                trials = inter.repetition(r)
                if not trials:
                    continue
                if metric is Metric.ACCURACY:
                    vals = [1.0 if t.correct else 0.0 for t in trials]
                else:
                    vals = [float(count(t.speaker_message)) for t in trials]
                per_rep[r].append(float(np.mean(vals)))

    values, lows, highs = [], [], []
    for r in reps:
        if per_rep[r]:
            mean, lo, hi = bootstrap_ci(per_rep[r], bootstrap)
        else:
            mean = lo = hi = None
        values.append(mean)
        lows.append(lo)
        highs.append(hi)
    return MetricSeries(metric, reps, tuple(values), tuple(lows), tuple(highs),
                        tuple(len(per_rep[r]) for r in reps), tuple(excluded[r] for r in reps))


# -- CSV -----------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def metrics_csv(series: Iterable[MetricSeries]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for s in series:
        for row in s.rows():
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(series: Iterable[MetricSeries], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(series), encoding="utf-8", newline="")
    return path


@dataclass(frozen=True)
class MetricRow:
    metric: str
    repetition: int
    mean: float | None
    ci_low: float | None
    ci_high: float | None
    n: int
    excluded_pairs: int


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    """Parse a metrics CSV, rejecting any other column layout."""
    def num(text: str) -> float | None:
        return float(text) if text.strip() else None

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise MetricError(f"{path}: expected columns {','.join(METRICS_COLUMNS)}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_COLUMNS):
                raise MetricError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(rec)}")
            try:
                rows.append(MetricRow(rec[0], int(rec[1]), num(rec[2]), num(rec[3]), num(rec[4]),
                                      int(rec[5]), int(rec[6])))
            except ValueError as exc:
                raise MetricError(f"{path}:{lineno}: {exc}") from None
    return rows
