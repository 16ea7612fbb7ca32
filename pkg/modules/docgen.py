# modules/docgen.py - Document-Template Generation, Stripping and Alignment Check
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import config
from modules.backend import CompletionBackend
from modules.corpus import Clustering, Document, plain_text
from modules.templates import (
    DEFAULT_INSTRUCTION_SET, ContextMode, InstructionSet, PromptRecord,
    build_doc_full, build_doc_iter_step, render_annotated, unescape_token
)
from modules.utils import (
    logger, normalize_text, ProgressTracker,
    BackendError, BackendFailure, CorefWeaveError, DocgenError, MalformedMarkup, MissingMentions
)

# ========== DOMAIN TYPES ==========

@dataclass
class AnnotatedDocState:
    """Iterative-generation loop state for one document."""
    doc_key: str
    assigned: List[int] = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.assigned)

    @property
    def max_id(self) -> int:
        return max(self.assigned, default=0)

    def accept(self, cluster_id: int):
        if not 1 <= cluster_id <= self.max_id + 1:
            raise DocgenError(f"id {cluster_id} is not legal after max id {self.max_id}")
        self.assigned.append(cluster_id)


@dataclass(frozen=True)
class MarkedSpan:
    """Marked region of stripped text: inclusive token range plus character range."""
    start: int
    end: int
    cluster_id: Optional[int]
    char_start: int
    char_end: int


@dataclass(frozen=True)
class StrippedText:
    plain: str
    spans: Tuple[MarkedSpan, ...]

    def regions(self) -> List[Tuple[int, int]]:
        return [(span.start, span.end) for span in self.spans]


@dataclass(frozen=True)
class AlignmentReport:
    passed: bool
    em: bool
    mention_map: Tuple[Optional[Tuple[int, int]], ...] = ()
    diff_summary: Dict[str, int] = field(default_factory=lambda: {'insertions': 0, 'deletions': 0, 'substitutions': 0})

    def to_dict(self) -> Dict:
        return {
            'pass': self.passed,
            'em': self.em,
            'mention_map': [list(m) if m is not None else None for m in self.mention_map],
            'diff': dict(self.diff_summary)
        }


FAILED_ALIGNMENT = AlignmentReport(passed=False, em=False)

# ========== STRIPPING ==========

_ID_TOKEN_RE = re.compile(r'\(#(\d*)\)')
_MARKER_LIKE_RE = re.compile(r'\(#\d*\)?')


def strip_annotations(text: str) -> StrippedText:
    """
    Remove `## ... ## (#k)` markup and recover the plain text.

    A `##` directly followed by an id token closes the innermost open
    mention; any other `##` opens one. Escaped tokens are un-doubled.

    Raises:
        MalformedMarkup: dangling `##`, stray or unclosed `(#`, empty mention
    """
    stream: List[Tuple[str, int]] = []
    lines = (text or '').split('\n')
    for line_no, line in enumerate(lines):
        stream.extend((token, line_no) for token in line.split())

    words: List[List[str]] = [[] for _ in lines]
    raw_spans: List[Tuple[int, int, Optional[int], int]] = []
    stack: List[Tuple[int, int]] = []
    flat = 0
    open_seq = 0
    k = 0
    while k < len(stream):
        token, line_no = stream[k]
        if token == '##':
            following = stream[k + 1][0] if k + 1 < len(stream) else None
            id_match = _ID_TOKEN_RE.fullmatch(following) if following is not None else None
            if id_match:
                if not stack:
                    raise MalformedMarkup(f"closing ## at token {k} has no open mention")
                start, seq = stack.pop()
                if flat == start:
                    raise MalformedMarkup(f"empty mention closed at token {k}")
                cluster_id = int(id_match.group(1)) if id_match.group(1) else None
                raw_spans.append((start, flat - 1, cluster_id, seq))
                k += 2
            else:
                stack.append((flat, open_seq))
                open_seq += 1
                k += 1
            continue
        if _MARKER_LIKE_RE.fullmatch(token):
            raise MalformedMarkup(f"stray cluster marker {token!r} at token {k}")
        words[line_no].append(unescape_token(token))
        flat += 1
        k += 1

    if stack:
        raise MalformedMarkup(f"{len(stack)} mention(s) opened but never closed")

    plain = '\n'.join(' '.join(line_words) for line_words in words)
    offsets = []
    position = 0
    for line_words in words:
        for word in line_words:
            offsets.append((position, position + len(word)))
            position += len(word) + 1
        if not line_words:
            position += 1

    spans = tuple(
        MarkedSpan(start, end, cluster_id, offsets[start][0], offsets[end][1])
        for start, end, cluster_id, _ in sorted(raw_spans, key=lambda s: (s[0], -s[1], s[3]))
    )
    return StrippedText(plain, spans)

# ========== ALIGNMENT ==========

def _nw_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Global alignment score matrix: match +1, mismatch -1, gap -1."""
    n, m = len(a), len(b)
    scores = np.zeros((n + 1, m + 1), dtype=np.int64)
    scores[0, :] = -np.arange(m + 1)
    scores[:, 0] = -np.arange(n + 1)
    offsets = np.arange(m + 1)
    for i in range(1, n + 1):
        substitution = np.where(b == a[i - 1], 1, -1)
        best = np.empty(m + 1, dtype=np.int64)
        best[0] = scores[i, 0]
        best[1:] = np.maximum(scores[i - 1, :-1] + substitution, scores[i - 1, 1:] - 1)
        # horizontal gaps as a running maximum along the row
        scores[i] = np.maximum.accumulate(best + offsets) - offsets
    return scores


def _traceback(forward: np.ndarray, a: np.ndarray, b: np.ndarray) -> Dict[str, int]:
    i, j = len(a), len(b)
    summary = {'insertions': 0, 'deletions': 0, 'substitutions': 0}
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            step = 1 if a[i - 1] == b[j - 1] else -1
            if forward[i, j] == forward[i - 1, j - 1] + step:
                if step < 0:
                    summary['substitutions'] += 1
                i, j = i - 1, j - 1
                continue
        if j > 0 and forward[i, j] == forward[i, j - 1] - 1:
            summary['insertions'] += 1
            j -= 1
        else:
            summary['deletions'] += 1
            i -= 1
    return summary


def align(original: str, recovered: str,
          regions: Optional[Sequence[Tuple[int, int]]] = None) -> AlignmentReport:
    """
    Alignment check between the reference text and recovered text.

    Passes when the optimal global alignment leaves no original token
    unmatched and every token of every marked region of `recovered` has a
    single optimal counterpart: an identical original token, with no
    optimal alternative that treats it as inserted, forming a contiguous
    original region. Without `regions` the whole recovered text counts as
    one region.

    Args:
        original: Reference text
        recovered: Stripped model output
        regions: Inclusive token ranges of marked mentions in `recovered`

    Returns:
        AlignmentReport
    """
    original_tokens = original.split()
    recovered_tokens = recovered.split()
    em = normalize_text(original) == normalize_text(recovered)
    if regions is None:
        regions = [(0, len(recovered_tokens) - 1)] if recovered_tokens else []

    vocabulary: Dict[str, int] = {}
    a = np.array([vocabulary.setdefault(t, len(vocabulary)) for t in original_tokens], dtype=np.int64)
    b = np.array([vocabulary.setdefault(t, len(vocabulary)) for t in recovered_tokens], dtype=np.int64)

    forward = _nw_scores(a, b)
    backward = _nw_scores(a[::-1], b[::-1])[::-1, ::-1]
    best = forward[-1, -1]
    summary = _traceback(forward, a, b)

    substitution = np.where(a[:, None] == b[None, :], 1, -1) if len(a) and len(b) else np.zeros((len(a), len(b)), dtype=np.int64)
    diagonal_optimal = (forward[:-1, :-1] + substitution + backward[1:, 1:]) == best
    insertion_optimal = (forward[:, :-1] - 1 + backward[:, 1:]) == best

    mention_map: List[Optional[Tuple[int, int]]] = []
    regions_ok = True
    for start, end in regions:
        positions = []
        for j in range(start, end + 1):
            rows = np.flatnonzero(diagonal_optimal[:, j]) if 0 <= j < len(b) else np.array([], dtype=np.int64)
            if len(rows) != 1 or insertion_optimal[:, j].any() or substitution[rows[0], j] != 1:
                positions = None
                break
            positions.append(int(rows[0]))
        if positions is None or any(q - p != 1 for p, q in zip(positions, positions[1:])):
            mention_map.append(None)
            regions_ok = False
        else:
            mention_map.append((positions[0], positions[-1]))

    passed = regions_ok and summary['deletions'] == 0
    return AlignmentReport(passed=passed, em=em, mention_map=tuple(mention_map), diff_summary=summary)

# ========== GENERATION ==========

_ITER_ID_RE = re.compile(r'^\s*\(?\s*#?\s*(\d+)')


def parse_iter_id(text: Optional[str], max_id: int) -> Tuple[int, bool]:
    """
    Read the cluster id of an iterative completion.

    The completion is cut at the first `)`. Anything that is not an integer
    in 1..max_id+1 becomes max_id+1.

    Returns:
        (cluster_id, legal)
    """
    head = (text or '').split(')', 1)[0]
    match = _ITER_ID_RE.match(head)
    if match:
        value = int(match.group(1))
        if 1 <= value <= max_id + 1:
            return value, True
    return max_id + 1, False


def _flat_mention_ranges(doc: Document) -> List[Tuple[int, int]]:
    sentence_offsets = np.cumsum([0] + [len(s) for s in doc.sentences])
    return [
        (int(sentence_offsets[m.sent_index]) + m.start, int(sentence_offsets[m.sent_index]) + m.end)
        for m in doc.mentions
    ]


def extract_clustering(doc: Document, stripped: StrippedText, report: AlignmentReport) -> Optional[Clustering]:
    """Predicted clustering from an aligned output; None when spans do not line up with mentions."""
    if not report.passed or len(stripped.spans) != doc.num_mentions:
        return None
    if list(report.mention_map) != _flat_mention_ranges(doc):
        return None
    groups: Dict[object, List[int]] = {}
    for mention_id, span in enumerate(stripped.spans):
        key = span.cluster_id if span.cluster_id is not None else ('unfilled', mention_id)
        groups.setdefault(key, []).append(mention_id)
    return Clustering.from_groups(groups.values())


@dataclass
class DocgenResult:
    doc_key: str
    mode: str
    generated: Optional[str] = None
    report: AlignmentReport = FAILED_ALIGNMENT
    predicted: Optional[Clustering] = None
    assigned: List[int] = field(default_factory=list)
    coerced_ids: int = 0
    steps: int = 0
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_report_row(self) -> Dict:
        return {
            'doc_key': self.doc_key,
            'pass': self.report.passed,
            'em': self.report.em,
            'coerced_ids': self.coerced_ids,
            'steps': self.steps,
            'error': self.error
        }


class DocumentGenerator:
    """
    Drives Document-Template inference.

    Full mode asks for the whole annotated document at once; iterative mode
    asks for one cluster id per step and fills a driver-owned document.
    """

    def __init__(self, backend: CompletionBackend,
                 context_mode: ContextMode = None,
                 instructions: InstructionSet = DEFAULT_INSTRUCTION_SET,
                 iter_max_tokens: Optional[int] = None):
        self.backend = backend
        self.context_mode = ContextMode(context_mode or config.ITER_CONTEXT_MODE)
        self.instructions = instructions
        self.iter_max_tokens = iter_max_tokens or config.ITER_MAX_TOKENS

    def _complete(self, doc: Document, record: PromptRecord, max_tokens: Optional[int] = None) -> str:
        if len(record.prompt) > config.MAX_PROMPT_CHARS:
            logger.warning(
                f"⚠️  Prompt {record.record_id} has {len(record.prompt)} chars "
                f"(limit {config.MAX_PROMPT_CHARS}); the model may not see all of it"
            )
        try:
            return self.backend.complete(record.prompt, record, max_tokens)
        except BackendError as e:
            raise BackendFailure(f"document '{doc.doc_key}', record {record.record_id}: {e}") from e

    def run_full(self, doc: Document) -> DocgenResult:
        """
        One-shot generation; predicted clusters are kept only when the output passes.

        Raises:
            BackendFailure, MissingMentions
        """
        record = build_doc_full(doc, self.instructions)
        generated = self._complete(doc, record)
        try:
            stripped = strip_annotations(generated)
        except MalformedMarkup as e:
            logger.debug(f"Malformed output for '{doc.doc_key}': {e}")
            return DocgenResult(doc.doc_key, 'full', generated=generated, steps=1)
        report = align(plain_text(doc), stripped.plain, stripped.regions())
        return DocgenResult(
            doc_key=doc.doc_key,
            mode='full',
            generated=generated,
            report=report,
            predicted=extract_clustering(doc, stripped, report),
            steps=1
        )

    def run_iterative(self, doc: Document) -> DocgenResult:
        """
        Step-by-step generation of one cluster id per mention.

        The filled document is rendered by the driver, so it always strips
        back to the original text.

        Raises:
            BackendFailure, MissingMentions
        """
        if not doc.mentions:
            raise MissingMentions(f"document '{doc.doc_key}' has no mentions to annotate")
        state = AnnotatedDocState(doc.doc_key)
        coerced = 0
        for step in range(doc.num_mentions):
            record = build_doc_iter_step(doc, step, state.assigned, self.context_mode, self.instructions)
            completion = self._complete(doc, record, self.iter_max_tokens)
            cluster_id, legal = parse_iter_id(completion, state.max_id)
            if not legal:
                coerced += 1
                logger.debug(f"Coerced step {step} of '{doc.doc_key}' from {completion!r} to {cluster_id}")
            state.accept(cluster_id)

        filled = render_annotated(doc, dict(enumerate(state.assigned)))
        stripped = strip_annotations(filled)
        report = align(plain_text(doc), stripped.plain, stripped.regions())
        groups: Dict[int, List[int]] = {}
        for mention_id, cluster_id in enumerate(state.assigned):
            groups.setdefault(cluster_id, []).append(mention_id)
        return DocgenResult(
            doc_key=doc.doc_key,
            mode='iter',
            generated=filled,
            report=report,
            predicted=Clustering.from_groups(groups.values()),
            assigned=list(state.assigned),
            coerced_ids=coerced,
            steps=doc.num_mentions
        )

    def _run_one(self, doc: Document, mode: str) -> DocgenResult:
        try:
            if mode == 'full':
                return self.run_full(doc)
            return self.run_iterative(doc)
        except CorefWeaveError as e:
            logger.error(f"❌ Generation failed for '{doc.doc_key}': {e}", exc_info=True)
            return DocgenResult(doc.doc_key, mode, error=f"{type(e).__name__}: {e}")

    def run_batch(self, docs: Sequence[Document], mode: str) -> List[DocgenResult]:
        """Process documents in parallel; results keep input order."""
        if mode not in ('full', 'iter'):
            raise DocgenError(f"mode must be 'full' or 'iter', got {mode!r}")
        results: List[Optional[DocgenResult]] = [None] * len(docs)
        if not docs:
            return []

        tracker = ProgressTracker(len(docs), f"Document generation ({mode})")
        with ThreadPoolExecutor(max_workers=max(1, self.backend.parallelism)) as executor:
            future_to_index = {executor.submit(self._run_one, doc, mode): i for i, doc in enumerate(docs)}
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()
                tracker.update()
        tracker.complete()

        summary = summarize(results)
        logger.info(
            f"📊 {mode}: pass {summary['pass_rate']:.3f}, em {summary['em_rate']:.3f}, "
            f"{summary['failed']} failed"
        )
        return results

# ========== CHECKING ==========

def summarize(results: Sequence[DocgenResult]) -> Dict:
    total = len(results)
    passed = sum(1 for r in results if r.report.passed)
    exact = sum(1 for r in results if r.report.em)
    return {
        'documents': total,
        'pass_rate': passed / total if total else 0.0,
        'em_rate': exact / total if total else 0.0,
        'failed': sum(1 for r in results if r.failed),
        'coerced_ids': sum(r.coerced_ids for r in results)
    }


def check_batch(docs: Sequence[Document], generated: Mapping[str, str]) -> Dict:
    """
    Pass and EM rates of generated annotated texts against their documents.

    Documents without generated text count as failures.
    """
    rows = []
    for doc in docs:
        text = generated.get(doc.doc_key)
        report = FAILED_ALIGNMENT
        if text is not None:
            try:
                stripped = strip_annotations(text)
                report = align(plain_text(doc), stripped.plain, stripped.regions())
            except MalformedMarkup as e:
                logger.debug(f"Malformed markup in '{doc.doc_key}': {e}")
        rows.append({'doc_key': doc.doc_key, 'pass': report.passed, 'em': report.em, 'diff': report.diff_summary})

    total = len(rows)
    return {
        'documents': total,
        'pass_rate': sum(r['pass'] for r in rows) / total if total else 0.0,
        'em_rate': sum(r['em'] for r in rows) / total if total else 0.0,
        'per_document': rows
    }
