# modules/templates.py - QA and Document Template Prompt Construction
import ast
import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from config import config
from modules.corpus import Document
from modules.utils import (
    logger, normalize_surface, write_jsonl,
    AssignedLengthMismatch, ConfigError, MissingGoldAnswer, MissingMentions,
    NoMentionsInSentence, StepOutOfRange, TemplateError, UnknownMention, Unparseable
)

# ========== TASK MODES ==========

class TaskMode(str, Enum):
    QA_FORWARD = 'qa_forward'
    QA_BACKWARD = 'qa_backward'
    QA_SINGLETON = 'qa_singleton'
    DOC_FULL = 'doc_full'
    DOC_ITER = 'doc_iter'

    @property
    def rank(self) -> int:
        """Position in the SFT export order."""
        return list(TaskMode).index(self)


class ContextMode(str, Enum):
    PREVIOUS_SENTENCE = 'previous_sentence'
    NONE = 'none'

# ========== INSTRUCTIONS ==========

DEFAULT_INSTRUCTIONS = {
    TaskMode.QA_FORWARD: (
        "Read the numbered sentences below and answer the question about a phrase in the last "
        "sentence. List the most recent preceding phrases that refer to the same entity, nearest "
        "first, as a numbered list in the form 1. \"<phrase>\" (S<k>), where S<k> is the sentence "
        "the phrase appears in. If the phrase does not refer to any preceding phrase, answer None."
    ),
    TaskMode.QA_BACKWARD: (
        "Read the numbered sentences below and answer the question about a phrase in the text. "
        "List the nearest later phrases that refer back to the same entity, nearest first, as a "
        "numbered list in the form 1. \"<phrase>\" (S<k>), where S<k> is the sentence the phrase "
        "appears in. If no later phrase refers back to it, answer None."
    ),
    TaskMode.QA_SINGLETON: (
        "List all phrases in the last sentence that do not refer to any previous phrases preceding "
        "them. Your response should be formatted as a Python list containing all phrases from the "
        "candidate list that do not refer to any preceding phrases. If no such phrases can be found, "
        "simply return `None.'"
    ),
    TaskMode.DOC_FULL: (
        "Annotate the coreference clusters of the document below. Every mention is enclosed in ## "
        "markers and followed by a (#) placeholder. Reproduce the document exactly, replacing each "
        "placeholder with the cluster ID of its mention so that mentions of the same entity share "
        "an ID. Number clusters 1, 2, 3, ... in order of first appearance."
    ),
    TaskMode.DOC_ITER: (
        "The text below is annotated up to its last mention. Mentions are enclosed in ## markers and "
        "followed by their cluster ID as (#k); the ID of the last mention is missing. Output only "
        "that cluster ID followed by ')': reuse the ID of an earlier mention of the same entity, or "
        "use the next unused ID for a new entity."
    ),
}


class InstructionSet:
    """Instruction text per TaskMode, loadable from `<mode>.txt` assets."""

    def __init__(self, texts: Optional[Dict[TaskMode, str]] = None):
        self.texts = dict(DEFAULT_INSTRUCTIONS)
        if texts:
            self.texts.update(texts)

    @classmethod
    def load(cls, directory: Optional[str]) -> 'InstructionSet':
        """
        Read instruction assets from a directory.

        Missing files fall back to the built-in defaults.
        """
        texts = {}
        if directory and os.path.isdir(directory):
            for mode in TaskMode:
                path = os.path.join(directory, f"{mode.value}.txt")
                if os.path.exists(path):
                    with open(path, 'r', encoding='utf-8') as f:
                        texts[mode] = f.read().strip()
            logger.debug(f"Loaded {len(texts)} instruction assets from {directory}")
        elif directory:
            logger.warning(f"⚠️  Instruction directory not found: {directory}, using defaults")
        return cls(texts)

    def get(self, mode: TaskMode) -> str:
        return self.texts[mode]


DEFAULT_INSTRUCTION_SET = InstructionSet()

# ========== RECORDS ==========

@dataclass(frozen=True)
class PromptRecord:
    """One prompt (p_i) with its gold response (rp_i) when built from gold."""
    record_id: str
    doc_key: str
    mode: TaskMode
    target: int
    prompt: str
    gold_answer: Optional[str] = None
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.prompt:
            raise TemplateError(f"record {self.record_id} has an empty prompt")
        object.__setattr__(self, 'mode', TaskMode(self.mode))

    def to_dict(self) -> Dict:
        return {
            'id': self.record_id,
            'doc_key': self.doc_key,
            'mode': self.mode.value,
            'target': self.target,
            'prompt': self.prompt,
            'gold_answer': self.gold_answer,
            'meta': dict(self.meta)
        }

    @classmethod
    def from_dict(cls, row: Dict) -> 'PromptRecord':
        return cls(
            record_id=row['id'],
            doc_key=row['doc_key'],
            mode=TaskMode(row['mode']),
            target=int(row['target']),
            prompt=row['prompt'],
            gold_answer=row.get('gold_answer'),
            meta={str(k): str(v) for k, v in (row.get('meta') or {}).items()}
        )


def make_record_id(doc_key: str, mode: TaskMode, target: int) -> str:
    return f"{doc_key}:{mode.value}:{target}"


@dataclass(frozen=True)
class ChainAnswer:
    """Numbered chain answer; items are (surface, sentence) pairs, nearest first."""
    items: Tuple[Tuple[str, Optional[int]], ...] = ()
    none_marker: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'items', tuple((s, k) for s, k in self.items))
        if self.none_marker == bool(self.items):
            raise TemplateError("a chain answer is either None or has items, never both")

    @classmethod
    def none(cls) -> 'ChainAnswer':
        return cls((), True)

    def render(self) -> str:
        if self.none_marker:
            return 'None'
        parts = []
        for rank, (surface, sent) in enumerate(self.items, start=1):
            if sent is None:
                parts.append(f'{rank}. "{surface}"')
            else:
                parts.append(f'{rank}. "{surface}" (S{sent})')
        return ' '.join(parts)

# ========== GOLD HELPERS ==========

def gold_cluster_ids(doc: Document) -> List[int]:
    """Gold cluster id per mention, numbered by first appearance."""
    gold = doc.clustering('gold').normalized()
    return [gold.cluster_of(mid) for mid in range(doc.num_mentions)]


def gold_members(doc: Document, mention_id: int) -> Tuple[int, ...]:
    """Mention ids of the gold cluster containing `mention_id`."""
    gold = doc.clustering('gold')
    cluster_id = gold.cluster_of(doc.mention(mention_id).mention_id)
    if cluster_id is None:
        raise UnknownMention(f"mention {mention_id} of '{doc.doc_key}' is in no gold cluster")
    return gold.clusters[cluster_id]


def gold_chain(doc: Document, mention_id: int, chain_len: int, direction: str) -> ChainAnswer:
    """Up to `chain_len` nearest gold-coreferent mentions before (fwd) or after (bwd)."""
    members = gold_members(doc, mention_id)
    if direction == 'fwd':
        chosen = [mid for mid in members if mid < mention_id][::-1][:chain_len]
    else:
        chosen = [mid for mid in members if mid > mention_id][:chain_len]
    if not chosen:
        return ChainAnswer.none()
    return ChainAnswer(tuple((doc.mentions[mid].surface, doc.mentions[mid].sent_index) for mid in chosen))


def is_discourse_new(doc: Document, mention_id: int) -> bool:
    """True when the mention has no gold antecedent (singleton or cluster opener)."""
    return gold_members(doc, mention_id)[0] == mention_id

# ========== MARKER RENDERING ==========

def escape_token(token: str) -> str:
    """Double reserved marker substrings occurring in corpus text."""
    if len(token) >= 2 and set(token) == {'#'}:
        return token * 2
    match = re.match(r'\(+#', token)
    if match:
        return '(' * (len(match.group(0)) - 1) + token
    return token


def unescape_token(token: str) -> str:
    if len(token) >= 4 and len(token) % 2 == 0 and set(token) == {'#'}:
        return token[:len(token) // 2]
    match = re.match(r'(\(+)#', token)
    if match and len(match.group(1)) >= 2 and len(match.group(1)) % 2 == 0:
        return token[len(match.group(1)) // 2:]
    return token


def render_annotated(doc: Document, ids: Dict[int, Optional[int]], stop_at: Optional[int] = None,
                     first_sentence: int = 0) -> str:
    """
    Render the document with `## <surface> ## (#k)` markers.

    Only mentions present in `ids` are marked; a None id renders as `(#)`.
    With `stop_at`, the text ends right after that mention's closing `##`
    followed by the open placeholder `(#`. Sentences before `first_sentence`
    are left out.
    """
    opens = defaultdict(list)
    closes = defaultdict(list)
    for mention_id in ids:
        mention = doc.mention(mention_id)
        opens[(mention.sent_index, mention.start)].append(mention)
        closes[(mention.sent_index, mention.end)].append(mention)

    lines = []
    for s, sentence in enumerate(doc.sentences):
        if s < first_sentence:
            continue
        pieces = []
        for w, token in enumerate(sentence):
            for mention in sorted(opens[(s, w)], key=lambda m: (-m.end, m.mention_id)):
                pieces.append('##')
            pieces.append(escape_token(token))
            for mention in sorted(closes[(s, w)], key=lambda m: (-m.start, -m.mention_id)):
                pieces.append('##')
                if mention.mention_id == stop_at:
                    pieces.append('(#')
                    lines.append(' '.join(pieces))
                    return '\n'.join(lines)
                cid = ids[mention.mention_id]
                pieces.append('(#)' if cid is None else f'(#{cid})')
        lines.append(' '.join(pieces))
    return '\n'.join(lines)


def _numbered_sentences(doc: Document, last: int) -> str:
    return '\n'.join(f"S{k}: {doc.sentence_text(k)}" for k in range(last + 1))

# ========== QA TEMPLATES ==========

def _check_chain_len(chain_len: int) -> int:
    if chain_len is None:
        chain_len = config.CHAIN_LEN
    if chain_len < 1:
        raise ConfigError(f"chain_len must be at least 1, got {chain_len}")
    return chain_len


def build_qa_forward(doc: Document, mention_id: int, chain_len: Optional[int] = None,
                     instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> PromptRecord:
    """
    Forward QA prompt: context up to the mention's sentence, question by surface only.

    Args:
        doc: Source document
        mention_id: Queried mention
        chain_len: Number of most recent antecedents in the gold answer

    Returns:
        PromptRecord with gold_answer when the document has gold clusters
    """
    chain_len = _check_chain_len(chain_len)
    mention = doc.mention(mention_id)
    prompt = (
        f"{instructions.get(TaskMode.QA_FORWARD)}\n\n"
        f"{_numbered_sentences(doc, mention.sent_index)}\n\n"
        f"Question: What does \"{mention.surface}\" in the last sentence refer to?"
    )
    gold = gold_chain(doc, mention_id, chain_len, 'fwd').render() if doc.gold is not None else None
    return PromptRecord(
        record_id=make_record_id(doc.doc_key, TaskMode.QA_FORWARD, mention_id),
        doc_key=doc.doc_key,
        mode=TaskMode.QA_FORWARD,
        target=mention_id,
        prompt=prompt,
        gold_answer=gold,
        meta={'surface': mention.surface, 'sent': str(mention.sent_index), 'chain_len': str(chain_len)}
    )


def build_qa_backward(doc: Document, mention_id: int, chain_len: Optional[int] = None,
                      instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> PromptRecord:
    """Backward QA prompt over the whole document: which later phrases refer back?"""
    chain_len = _check_chain_len(chain_len)
    mention = doc.mention(mention_id)
    prompt = (
        f"{instructions.get(TaskMode.QA_BACKWARD)}\n\n"
        f"{_numbered_sentences(doc, len(doc.sentences) - 1)}\n\n"
        f"Question: Which later phrases refer back to \"{mention.surface}\" in S{mention.sent_index}?"
    )
    gold = gold_chain(doc, mention_id, chain_len, 'bwd').render() if doc.gold is not None else None
    return PromptRecord(
        record_id=make_record_id(doc.doc_key, TaskMode.QA_BACKWARD, mention_id),
        doc_key=doc.doc_key,
        mode=TaskMode.QA_BACKWARD,
        target=mention_id,
        prompt=prompt,
        gold_answer=gold,
        meta={'surface': mention.surface, 'sent': str(mention.sent_index), 'chain_len': str(chain_len)}
    )


def build_qa_singleton(doc: Document, sent_index: int,
                       instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> PromptRecord:
    """Singleton-finding prompt for one sentence and its candidate mentions."""
    if not 0 <= sent_index < len(doc.sentences):
        raise NoMentionsInSentence(f"document '{doc.doc_key}' has no sentence {sent_index}")
    mentions = doc.mentions_in_sentence(sent_index)
    if not mentions:
        raise NoMentionsInSentence(f"sentence {sent_index} of '{doc.doc_key}' has no mentions")

    candidates = [m.surface for m in mentions]
    prompt = (
        f"{instructions.get(TaskMode.QA_SINGLETON)}\n\n"
        f"{_numbered_sentences(doc, sent_index)}\n\n"
        f"Candidate list: {json.dumps(candidates, ensure_ascii=False)}"
    )
    gold = None
    if doc.gold is not None:
        new_phrases = [m.surface for m in mentions if is_discourse_new(doc, m.mention_id)]
        gold = json.dumps(new_phrases, ensure_ascii=False) if new_phrases else 'None'
    return PromptRecord(
        record_id=make_record_id(doc.doc_key, TaskMode.QA_SINGLETON, sent_index),
        doc_key=doc.doc_key,
        mode=TaskMode.QA_SINGLETON,
        target=sent_index,
        prompt=prompt,
        gold_answer=gold,
        meta={
            'candidates': json.dumps(candidates, ensure_ascii=False),
            'anchor': str(mentions[0].mention_id)
        }
    )

# ========== DOCUMENT TEMPLATES ==========

def build_doc_full(doc: Document, instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> PromptRecord:
    """Whole-document prompt with `(#)` placeholders; gold fills in first-appearance ids."""
    if not doc.mentions:
        raise MissingMentions(f"document '{doc.doc_key}' has no mentions to annotate")
    placeholders = {mid: None for mid in range(doc.num_mentions)}
    prompt = f"{instructions.get(TaskMode.DOC_FULL)}\n\n{render_annotated(doc, placeholders)}"
    gold = None
    if doc.gold is not None:
        ids = gold_cluster_ids(doc)
        gold = render_annotated(doc, dict(enumerate(ids)))
    return PromptRecord(
        record_id=make_record_id(doc.doc_key, TaskMode.DOC_FULL, 0),
        doc_key=doc.doc_key,
        mode=TaskMode.DOC_FULL,
        target=0,
        prompt=prompt,
        gold_answer=gold,
        meta={'mentions': str(doc.num_mentions)}
    )


def build_doc_iter_step(doc: Document, step: int, assigned: Sequence[int],
                        context_mode: ContextMode = ContextMode.PREVIOUS_SENTENCE,
                        instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> PromptRecord:
    """
    Prompt for one step of iterative generation.

    The segment ends at mention `step` with the open placeholder `(#`.

    With `previous_sentence` context the segment starts at the sentence of
    mention step-1. When that sentence lies before the current one it is
    given unannotated as the context block instead, and the segment starts
    right after it. With `none` the segment runs from the document start.

    Raises:
        StepOutOfRange, AssignedLengthMismatch, MissingMentions
    """
    if not doc.mentions:
        raise MissingMentions(f"document '{doc.doc_key}' has no mentions to annotate")
    if not 0 <= step < doc.num_mentions:
        raise StepOutOfRange(f"step {step} outside 0..{doc.num_mentions - 1} for '{doc.doc_key}'")
    if len(assigned) != step:
        raise AssignedLengthMismatch(f"step {step} needs {step} assigned ids, got {len(assigned)}")

    context_mode = ContextMode(context_mode)
    ids: Dict[int, Optional[int]] = {mid: assigned[mid] for mid in range(step)}
    ids[step] = None

    parts = [instructions.get(TaskMode.DOC_ITER)]
    first_sentence = 0
    if context_mode == ContextMode.PREVIOUS_SENTENCE:
        current_sent = doc.mentions[step].sent_index
        first_sentence = current_sent
        if step > 0:
            previous_sent = doc.mentions[step - 1].sent_index
            if previous_sent != current_sent:
                parts.append(f"Context: {doc.sentence_text(previous_sent)}")
                first_sentence = previous_sent + 1
    segment = render_annotated(doc, ids, stop_at=step, first_sentence=first_sentence)
    parts.append(f"Text: {segment}")

    gold = f"{gold_cluster_ids(doc)[step]})" if doc.gold is not None else None
    return PromptRecord(
        record_id=make_record_id(doc.doc_key, TaskMode.DOC_ITER, step),
        doc_key=doc.doc_key,
        mode=TaskMode.DOC_ITER,
        target=step,
        prompt='\n\n'.join(parts),
        gold_answer=gold,
        meta={
            'assigned': ','.join(str(cid) for cid in assigned),
            'max_id': str(max(assigned, default=0)),
            'context_mode': context_mode.value
        }
    )

# ========== ANSWER PARSING ==========

_CHAIN_ITEM_RE = re.compile(
    r'(\d+)\s*\.\s*["“”]([^"“”\n]+)["“”](?:\s*\(\s*S\s*(\d+)\s*\))?', re.IGNORECASE
)
_NONE_RE = re.compile(r'\bnone\b', re.IGNORECASE)
_LIST_ITEM_RE = re.compile(r'(?:^|,)\s*[\'"“”‘’](.*?)[\'"“”‘’]\s*(?=,|$)', re.DOTALL)


def parse_chain_answer(text: str) -> ChainAnswer:
    """
    Tolerant parse of a numbered chain answer.

    Chatter before the first item is ignored and every item is kept, even
    beyond the requested chain length. Items without an `(S<k>)` tag keep
    their place with no sentence index.

    Raises:
        Unparseable: neither an item nor a None marker was found
    """
    text = text or ''
    items = [
        (m.group(2).strip(), int(m.group(3)) if m.group(3) is not None else None)
        for m in _CHAIN_ITEM_RE.finditer(text)
    ]
    if items:
        return ChainAnswer(tuple(items))
    if _NONE_RE.search(text):
        return ChainAnswer.none()
    raise Unparseable(f"no chain item or None marker in {text[:80]!r}")


def _split_phrase_list(body: str) -> List[str]:
    # literal_eval fails on "['Bob's car']"; recover the phrases by hand
    quoted = _LIST_ITEM_RE.findall(body.strip())
    if quoted:
        return quoted
    return [part.strip().strip('\'"‘’') for part in body.split(',') if part.strip()]


def parse_singleton_answer(text: str) -> List[str]:
    """Parse a Python-style list of phrases; `None` means an empty list."""
    text = text or ''
    match = re.search(r'\[.*?\]', text, re.DOTALL)
    if match:
        try:
            value = ast.literal_eval(match.group(0))
        except (ValueError, SyntaxError):
            value = _split_phrase_list(match.group(0)[1:-1])
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return [v.strip() for v in value if v.strip()]
    if _NONE_RE.search(text):
        return []
    raise Unparseable(f"no phrase list or None marker in {text[:80]!r}")

# ========== GROUNDING ==========

def ground_mention(doc: Document, surface: str, sent_index: Optional[int],
                   anchor: int, direction: str) -> Optional[int]:
    """
    Map a generated phrase back to a gold mention id.

    Matching is exact after whitespace normalization and case-folding. A
    given sentence id narrows the candidates; otherwise the nearest match
    preceding (fwd) or following (bwd) the anchor wins.

    Returns:
        The mention id, or None when the phrase cannot be grounded
    """
    wanted = normalize_surface(surface)
    if not wanted:
        return None
    matches = [
        m.mention_id for m in doc.mentions
        if m.mention_id != anchor and normalize_surface(m.surface) == wanted
    ]
    if direction == 'fwd':
        matches = [mid for mid in matches if mid < anchor]
    elif direction == 'bwd':
        matches = [mid for mid in matches if mid > anchor]
    else:
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")

    if sent_index is not None:
        in_sentence = [mid for mid in matches if doc.mentions[mid].sent_index == sent_index]
        if in_sentence:
            matches = in_sentence
    if not matches:
        return None
    return matches[-1] if direction == 'fwd' else matches[0]

# ========== DATASET CONSTRUCTION ==========

def build_prompts(doc: Document, modes: Iterable[TaskMode], chain_len: Optional[int] = None,
                  backward_chain: bool = True,
                  context_mode: ContextMode = ContextMode.PREVIOUS_SENTENCE,
                  instructions: InstructionSet = DEFAULT_INSTRUCTION_SET) -> List[PromptRecord]:
    """
    Build every record of the requested modes for one document.

    Iterative-step records use the gold ids as history, which is how the
    training data is produced.
    """
    chain_len = _check_chain_len(chain_len)
    modes = [TaskMode(mode) for mode in modes]
    records: List[PromptRecord] = []
    for mode in modes:
        if mode == TaskMode.QA_FORWARD:
            records.extend(build_qa_forward(doc, mid, chain_len, instructions) for mid in range(doc.num_mentions))
        elif mode == TaskMode.QA_BACKWARD:
            backward_len = chain_len if backward_chain else 1
            records.extend(build_qa_backward(doc, mid, backward_len, instructions) for mid in range(doc.num_mentions))
        elif mode == TaskMode.QA_SINGLETON:
            sentences = sorted({m.sent_index for m in doc.mentions})
            records.extend(build_qa_singleton(doc, s, instructions) for s in sentences)
        elif mode == TaskMode.DOC_FULL:
            if doc.mentions:
                records.append(build_doc_full(doc, instructions))
        elif mode == TaskMode.DOC_ITER:
            if doc.mentions:
                ids = gold_cluster_ids(doc)
                records.extend(
                    build_doc_iter_step(doc, step, ids[:step], context_mode, instructions)
                    for step in range(doc.num_mentions)
                )
    return records


def _anchor(record: PromptRecord) -> int:
    return int(record.meta.get('anchor', record.target))


def sort_records(records: Sequence[PromptRecord]) -> List[PromptRecord]:
    """
    Document order, then mention order, then mode order.

    Sentence-targeted records sit at the first mention of their sentence.
    """
    doc_rank: Dict[str, int] = {}
    for record in records:
        doc_rank.setdefault(record.doc_key, len(doc_rank))
    return sorted(records, key=lambda r: (doc_rank[r.doc_key], _anchor(r), r.mode.rank, r.target))


def export_sft(records: Sequence[PromptRecord], path: str) -> int:
    """
    Write the SFT training set as JSON-lines {id, mode, prompt, response}.

    Returns:
        Number of records written

    Raises:
        MissingGoldAnswer: when any record was built without gold
    """
    missing = [r.record_id for r in records if r.gold_answer is None]
    if missing:
        raise MissingGoldAnswer(f"{len(missing)} records have no gold answer (first: {missing[0]})")
    rows = (
        {'id': r.record_id, 'mode': r.mode.value, 'prompt': r.prompt, 'response': r.gold_answer}
        for r in sort_records(records)
    )
    count = write_jsonl(path, rows)
    logger.info(f"💾 Exported {count} SFT records to {path}")
    return count
