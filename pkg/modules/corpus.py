# modules/corpus.py - Coreference Document Model and File Formats
import json
import os
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError

from modules.utils import (
    logger, CrossSentenceMention, EmptyDocument, MalformedLine,
    MissingClustering, SchemaViolation, UnbalancedSpan, UnknownMention
)

# ========== DOMAIN TYPES ==========

@dataclass(frozen=True)
class Token:
    doc_index: int
    sent_index: int
    word_index: int
    text: str


@dataclass(frozen=True)
class MentionSpan:
    """A gold mention; `start`/`end` are inclusive word indices within one sentence."""
    mention_id: int
    sent_index: int
    start: int
    end: int
    surface: str
    non_referring: bool = False
    split_antecedent: bool = False

    def order_key(self) -> Tuple[int, int, int]:
        # outer mentions sort before the mentions nested inside them
        return (self.sent_index, self.start, -self.end)


@dataclass(frozen=True)
class Clustering:
    """
    Partition of mention ids into clusters keyed by positive cluster id.

    Mention ids are dense in document order, so sorting by id is sorting by
    document position.
    """
    clusters: Dict[int, Tuple[int, ...]]
    _index: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        normalized = {}
        index = {}
        for cid in sorted(self.clusters):
            members = tuple(sorted(self.clusters[cid]))
            if cid < 1:
                raise SchemaViolation(f"/clusters/{cid}", "cluster id must be a positive integer")
            if not members:
                raise SchemaViolation(f"/clusters/{cid}", "cluster is empty")
            for mid in members:
                if mid in index:
                    raise SchemaViolation(
                        f"/clusters/{cid}",
                        f"mention {mid} appears in clusters {index[mid]} and {cid}"
                    )
                index[mid] = cid
            normalized[cid] = members
        object.__setattr__(self, 'clusters', normalized)
        object.__setattr__(self, '_index', index)

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[int]]) -> 'Clustering':
        """Build a clustering numbered 1..K in order of first appearance."""
        ordered = sorted(
            (tuple(sorted(set(group))) for group in groups),
            key=lambda members: members[0] if members else -1
        )
        ordered = [members for members in ordered if members]
        return cls({cid: members for cid, members in enumerate(ordered, start=1)})

    @classmethod
    def all_singletons(cls, n_mentions: int) -> 'Clustering':
        return cls.from_groups([mid] for mid in range(n_mentions))

    def cluster_of(self, mention_id: int) -> Optional[int]:
        return self._index.get(mention_id)

    def mention_ids(self) -> List[int]:
        return sorted(self._index)

    def groups(self) -> List[Tuple[int, ...]]:
        return [self.clusters[cid] for cid in sorted(self.clusters)]

    def normalized(self) -> 'Clustering':
        return Clustering.from_groups(self.groups())

    def restricted(self, keep: Iterable[int]) -> 'Clustering':
        """Drop every mention not in `keep`; empty clusters disappear."""
        keep = set(keep)
        return Clustering.from_groups(
            [mid for mid in members if mid in keep] for members in self.groups()
        )

    def remapped(self, id_map: Dict[int, int]) -> 'Clustering':
        """Rename mention ids; mentions missing from `id_map` are dropped."""
        return Clustering.from_groups(
            [id_map[mid] for mid in members if mid in id_map] for members in self.groups()
        )

    def to_json(self) -> Dict[str, List[int]]:
        return {str(cid): list(members) for cid, members in sorted(self.clusters.items())}

    def __len__(self) -> int:
        return len(self.clusters)


@dataclass(frozen=True)
class Document:
    doc_key: str
    sentences: Tuple[Tuple[str, ...], ...]
    mentions: Tuple[MentionSpan, ...] = ()
    gold: Optional[Clustering] = None
    predicted: Optional[Clustering] = None

    def __post_init__(self):
        object.__setattr__(self, 'sentences', tuple(tuple(s) for s in self.sentences))
        object.__setattr__(self, 'mentions', tuple(self.mentions))
        validate_document(self)

    @property
    def num_mentions(self) -> int:
        return len(self.mentions)

    def tokens(self) -> List[Token]:
        tokens = []
        for s, sentence in enumerate(self.sentences):
            for w, text in enumerate(sentence):
                tokens.append(Token(len(tokens), s, w, text))
        return tokens

    def mention(self, mention_id: int) -> MentionSpan:
        if not isinstance(mention_id, int) or not 0 <= mention_id < len(self.mentions):
            raise UnknownMention(f"document '{self.doc_key}' has no mention {mention_id}")
        return self.mentions[mention_id]

    def mentions_in_sentence(self, sent_index: int) -> List[MentionSpan]:
        return [m for m in self.mentions if m.sent_index == sent_index]

    def sentence_text(self, sent_index: int) -> str:
        return ' '.join(self.sentences[sent_index])

    def clustering(self, which: str) -> Clustering:
        """Return the gold or predicted clustering, raising if absent."""
        if which not in ('gold', 'predicted'):
            raise ValueError(f"unknown clustering '{which}'")
        clustering = self.gold if which == 'gold' else self.predicted
        if clustering is None:
            raise MissingClustering(f"document '{self.doc_key}' has no {which} clustering")
        return clustering

    def with_predicted(self, predicted: Optional[Clustering]) -> 'Document':
        return replace(self, predicted=predicted)


def validate_document(doc: Document) -> None:
    """
    Check every Document invariant.

    Raises:
        SchemaViolation: with a JSON-pointer path into the canonical form
    """
    if not isinstance(doc.doc_key, str) or not doc.doc_key:
        raise SchemaViolation('/doc_key', 'doc_key must be a non-empty string')

    for s, sentence in enumerate(doc.sentences):
        if not sentence:
            raise SchemaViolation(f'/sentences/{s}', 'sentence has no tokens')
        for w, token in enumerate(sentence):
            if not isinstance(token, str) or not token or re.search(r'\s', token):
                raise SchemaViolation(
                    f'/sentences/{s}/{w}', f'token {token!r} must be non-empty and contain no whitespace'
                )

    previous = None
    for i, mention in enumerate(doc.mentions):
        path = f'/mentions/{i}'
        if mention.mention_id != i:
            raise SchemaViolation(f'{path}/id', f'mention ids must be dense 0..n-1, found {mention.mention_id}')
        if not 0 <= mention.sent_index < len(doc.sentences):
            raise SchemaViolation(f'{path}/sent', f'sentence {mention.sent_index} does not exist')
        length = len(doc.sentences[mention.sent_index])
        if not 0 <= mention.start <= mention.end < length:
            raise SchemaViolation(
                f'{path}/end',
                f'span {mention.start}..{mention.end} out of bounds for sentence of {length} tokens'
            )
        covered = ' '.join(doc.sentences[mention.sent_index][mention.start:mention.end + 1])
        if mention.surface != covered:
            raise SchemaViolation(f'{path}/surface', f'surface {mention.surface!r} != covered tokens {covered!r}')
        if previous is not None and mention.order_key() < previous.order_key():
            raise SchemaViolation(f'{path}/id', 'mentions are not listed in document order')
        previous = mention

    n_mentions = len(doc.mentions)
    for which, clustering in (('gold', doc.gold), ('predicted', doc.predicted)):
        if clustering is None:
            continue
        for cid, members in clustering.clusters.items():
            for j, mid in enumerate(members):
                if not 0 <= mid < n_mentions:
                    raise SchemaViolation(f'/{which}/{cid}/{j}', f'unknown mention id {mid}')
        uncovered = sorted(set(range(n_mentions)) - set(clustering.mention_ids()))
        if uncovered:
            raise SchemaViolation(f'/{which}', f'mention ids {uncovered} are not covered by any cluster')


def assemble_document(doc_key: str, sentences: Sequence[Sequence[str]],
                      spans: Sequence[Tuple[int, int, int, object]],
                      predicted: Optional[Clustering] = None) -> Document:
    """
    Build a Document from raw (sent, start, end, cluster_label) spans.

    Mention ids are assigned in document order; cluster ids are renumbered
    1..K by first appearance, whatever the source labels were.
    """
    ordered = sorted(
        enumerate(spans),
        key=lambda item: (item[1][0], item[1][1], -item[1][2], item[0])
    )
    mentions = []
    groups: Dict[object, List[int]] = defaultdict(list)
    for mention_id, (_, (sent, start, end, label)) in enumerate(ordered):
        surface = ' '.join(sentences[sent][start:end + 1])
        mentions.append(MentionSpan(mention_id, sent, start, end, surface))
        groups[label].append(mention_id)
    return Document(
        doc_key=doc_key,
        sentences=sentences,
        mentions=mentions,
        gold=Clustering.from_groups(groups.values()),
        predicted=predicted
    )

# ========== CONLL COLUMN FORMAT ==========

_COREF_PART_RE = re.compile(r'(\()?(\d+)(\))?')


class _ConllBlock:
    """Accumulates one `#begin document` ... `#end document` block."""

    def __init__(self, doc_key: str, line_no: int):
        self.doc_key = doc_key
        self.line_no = line_no
        self.sentences: List[List[str]] = []
        self.current: List[str] = []
        self.open_spans: Dict[str, List[Tuple[int, int, int]]] = defaultdict(list)
        self.spans: List[Tuple[int, int, int, str]] = []

    def break_sentence(self):
        if self.current:
            self.sentences.append(self.current)
            self.current = []

    def add_token(self, line: str, line_no: int):
        cols = line.split()
        if len(cols) < 5:
            raise MalformedLine(f"line {line_no}: expected at least 5 columns, got {len(cols)}")
        try:
            word_index = int(cols[2])
        except ValueError:
            raise MalformedLine(f"line {line_no}: word index {cols[2]!r} is not an integer") from None

        # a word index restarting at 0 also starts a sentence
        if word_index == 0 and self.current:
            self.break_sentence()
        if word_index != len(self.current):
            raise MalformedLine(
                f"line {line_no}: word index {word_index} out of sequence (expected {len(self.current)})"
            )

        sent, position = len(self.sentences), len(self.current)
        self.current.append(cols[3])
        if cols[-1] != '-':
            self._read_coref(cols[-1], sent, position, line_no)

    def _read_coref(self, coref: str, sent: int, position: int, line_no: int):
        for part in coref.split('|'):
            match = _COREF_PART_RE.fullmatch(part)
            if not match or not (match.group(1) or match.group(3)):
                raise MalformedLine(f"line {line_no}: bad coreference field {coref!r}")
            opens, label, closes = match.group(1), match.group(2), match.group(3)
            if opens and closes:
                self.spans.append((sent, position, position, label))
            elif opens:
                self.open_spans[label].append((sent, position, line_no))
            else:
                stack = self.open_spans[label]
                if not stack:
                    raise UnbalancedSpan(f"line {line_no}: '{label})' closes a span that was never opened")
                open_sent, start, open_line = stack.pop()
                if open_sent != sent:
                    raise CrossSentenceMention(
                        f"line {line_no}: span '({label}' opened at line {open_line} crosses a sentence boundary"
                    )
                self.spans.append((sent, start, position, label))

    def finish(self) -> Document:
        self.break_sentence()
        if not self.sentences:
            raise EmptyDocument(f"line {self.line_no}: document '{self.doc_key}' contains no tokens")
        for label, stack in self.open_spans.items():
            if stack:
                _, _, open_line = stack[0]
                raise UnbalancedSpan(
                    f"line {open_line}: span '({label}' in document '{self.doc_key}' is never closed"
                )
        return assemble_document(self.doc_key, self.sentences, self.spans)


def parse_conll(text: str) -> List[Document]:
    """
    Parse CoNLL-2012-style column text into Documents.

    Token lines are `<doc_key> <sent> <word_index> <word> ... <coref>`; the
    coreference column uses `(k`, `k)`, `(k)` joined by `|`, or `-`.

    Raises:
        UnbalancedSpan, MalformedLine, EmptyDocument, CrossSentenceMention
    """
    documents = []
    block: Optional[_ConllBlock] = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith('#begin document'):
            if block is not None:
                raise MalformedLine(
                    f"line {line_no}: '#begin document' inside the block opened at line {block.line_no}"
                )
            block = _ConllBlock(line[len('#begin document'):].strip(), line_no)
        elif line.startswith('#end document'):
            if block is None:
                raise MalformedLine(f"line {line_no}: '#end document' without a matching begin")
            documents.append(block.finish())
            block = None
        elif not line:
            if block is not None:
                block.break_sentence()
        elif line.startswith('#'):
            continue
        elif block is None:
            raise MalformedLine(f"line {line_no}: token line outside a document block")
        else:
            block.add_token(line, line_no)

    if block is not None:
        raise MalformedLine(f"line {block.line_no}: document '{block.doc_key}' has no '#end document'")

    logger.debug(f"Parsed {len(documents)} CoNLL documents")
    return documents


def emit_conll(doc: Document, which: str = 'gold') -> str:
    """
    Render one Document in the CoNLL column format.

    On each token, closing brackets come first (innermost first), then
    single-token mentions, then openings (outermost first), which is the
    order parse_conll's per-cluster stacks expect.
    """
    clustering = doc.clustering(which)
    closes: Dict[Tuple[int, int], List[MentionSpan]] = defaultdict(list)
    singles: Dict[Tuple[int, int], List[MentionSpan]] = defaultdict(list)
    opens: Dict[Tuple[int, int], List[MentionSpan]] = defaultdict(list)
    for mention in doc.mentions:
        if clustering.cluster_of(mention.mention_id) is None:
            continue
        if mention.start == mention.end:
            singles[(mention.sent_index, mention.start)].append(mention)
        else:
            opens[(mention.sent_index, mention.start)].append(mention)
            closes[(mention.sent_index, mention.end)].append(mention)

    column_key = re.sub(r'\s+', '_', doc.doc_key)
    lines = [f"#begin document {doc.doc_key}"]
    for s, sentence in enumerate(doc.sentences):
        for w, word in enumerate(sentence):
            parts = []
            for m in sorted(closes[(s, w)], key=lambda m: (-m.start, -m.mention_id)):
                parts.append(f"{clustering.cluster_of(m.mention_id)})")
            for m in sorted(singles[(s, w)], key=lambda m: m.mention_id):
                parts.append(f"({clustering.cluster_of(m.mention_id)})")
            for m in sorted(opens[(s, w)], key=lambda m: (-m.end, m.mention_id)):
                parts.append(f"({clustering.cluster_of(m.mention_id)}")
            lines.append(f"{column_key}\t{s}\t{w}\t{word}\t{'|'.join(parts) or '-'}")
        lines.append("")
    lines.append("#end document")
    return "\n".join(lines) + "\n"

# ========== CANONICAL JSON FORMAT ==========

class _MentionModel(BaseModel):
    model_config = ConfigDict(extra='forbid', strict=True)

    id: int
    sent: int
    start: int
    end: int
    surface: str
    non_referring: bool = False
    split_antecedent: bool = False


class _DocumentModel(BaseModel):
    model_config = ConfigDict(extra='forbid', strict=True)

    doc_key: str
    sentences: List[List[str]]
    mentions: List[_MentionModel] = []
    gold: Optional[Dict[str, List[int]]] = None
    predicted: Optional[Dict[str, List[int]]] = None


def _pointer(loc: Sequence) -> str:
    return '/' + '/'.join(str(part) for part in loc)


def _clustering_from_json(mapping: Dict[str, List[int]], path: str) -> Clustering:
    seen: Dict[int, str] = {}
    groups = []
    for cid_text in sorted(mapping, key=lambda k: (len(k), k)):
        if not re.fullmatch(r'[1-9]\d*', cid_text):
            raise SchemaViolation(f'{path}/{cid_text}', 'cluster id must be a positive integer')
        members = mapping[cid_text]
        if not members:
            raise SchemaViolation(f'{path}/{cid_text}', 'cluster is empty')
        for j, mid in enumerate(members):
            if mid in seen:
                raise SchemaViolation(
                    f'{path}/{cid_text}/{j}', f'mention {mid} already belongs to cluster {seen[mid]}'
                )
            seen[mid] = cid_text
        groups.append(members)
    return Clustering.from_groups(groups)


def document_from_payload(payload: object) -> Document:
    """Validate a decoded canonical JSON object and build the Document."""
    if not isinstance(payload, dict):
        raise SchemaViolation('/', 'expected a JSON object')
    try:
        model = _DocumentModel.model_validate(payload)
    except ValidationError as e:
        error = e.errors()[0]
        raise SchemaViolation(_pointer(error['loc']), error['msg']) from None

    mentions = [
        MentionSpan(m.id, m.sent, m.start, m.end, m.surface, m.non_referring, m.split_antecedent)
        for m in model.mentions
    ]
    gold = _clustering_from_json(model.gold, '/gold') if model.gold is not None else None
    predicted = _clustering_from_json(model.predicted, '/predicted') if model.predicted is not None else None
    return Document(model.doc_key, model.sentences, mentions, gold, predicted)


def parse_canonical(text: str) -> Document:
    """
    Parse one canonical JSON document.

    Raises:
        SchemaViolation: with a JSON-pointer path to the offending value
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaViolation('/', f'invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})') from None
    return document_from_payload(payload)


def parse_canonical_lines(text: str) -> List[Document]:
    """Parse JSON-lines, one canonical document per non-blank line."""
    documents = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            documents.append(parse_canonical(line))
        except SchemaViolation as e:
            raise SchemaViolation(e.path, f"line {line_no}: {e.message}") from None
    return documents


def document_to_payload(doc: Document) -> Dict:
    mentions = []
    for m in doc.mentions:
        item = {
            'id': m.mention_id,
            'sent': m.sent_index,
            'start': m.start,
            'end': m.end,
            'surface': m.surface,
            'non_referring': m.non_referring
        }
        if m.split_antecedent:
            item['split_antecedent'] = True
        mentions.append(item)
    return {
        'doc_key': doc.doc_key,
        'sentences': [list(s) for s in doc.sentences],
        'mentions': mentions,
        'gold': doc.gold.to_json() if doc.gold is not None else None,
        'predicted': doc.predicted.to_json() if doc.predicted is not None else None
    }


def emit_canonical(doc: Document) -> str:
    """Serialize a Document as one line of canonical JSON."""
    return json.dumps(document_to_payload(doc), ensure_ascii=False)

# ========== PLAIN TEXT ==========

def plain_text(doc: Document) -> str:
    """Sentences joined by newlines, tokens by single spaces: the EM reference."""
    return '\n'.join(' '.join(sentence) for sentence in doc.sentences)

# ========== CONVERSION HELPERS ==========

def drop_non_referring(doc: Document) -> Document:
    """Remove non-referring mentions; ids stay dense and clusters are renumbered."""
    kept = [m for m in doc.mentions if not m.non_referring]
    if len(kept) == len(doc.mentions):
        return doc
    id_map = {m.mention_id: new_id for new_id, m in enumerate(kept)}
    mentions = [replace(m, mention_id=id_map[m.mention_id]) for m in kept]
    return Document(
        doc_key=doc.doc_key,
        sentences=doc.sentences,
        mentions=mentions,
        gold=doc.gold.remapped(id_map) if doc.gold is not None else None,
        predicted=doc.predicted.remapped(id_map) if doc.predicted is not None else None
    )


def sample_documents(docs: List[Document], n: int, seed: int) -> List[Document]:
    """Random subset of `n` documents, kept in corpus order."""
    if n >= len(docs):
        return list(docs)
    chosen = set(random.Random(seed).sample(range(len(docs)), n))
    return [doc for i, doc in enumerate(docs) if i in chosen]


def load_documents(path: str) -> List[Document]:
    """
    Load documents, choosing the reader from the file extension.

    `.jsonl` is canonical JSON-lines, `.json` a canonical object or array,
    anything else the CoNLL column format.
    """
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    extension = os.path.splitext(path)[1].lower()
    if extension == '.jsonl':
        documents = parse_canonical_lines(text)
    elif extension == '.json':
        stripped = text.lstrip()
        if stripped.startswith('['):
            try:
                payloads = json.loads(text)
            except json.JSONDecodeError as e:
                raise SchemaViolation('/', f'invalid JSON: {e.msg}') from None
            documents = []
            for i, payload in enumerate(payloads):
                try:
                    documents.append(document_from_payload(payload))
                except SchemaViolation as e:
                    raise SchemaViolation(f'/{i}{e.path}', e.message) from None
        else:
            documents = [parse_canonical(text)]
    else:
        documents = parse_conll(text)
    logger.info(f"📄 Loaded {len(documents)} documents from {path}")
    return documents


def save_documents(docs: Iterable[Document], path: str, which: str = 'gold') -> int:
    """Write documents as canonical JSON-lines or CoNLL (by extension)."""
    docs = list(docs)
    extension = os.path.splitext(path)[1].lower()
    with open(path, 'w', encoding='utf-8') as f:
        if extension == '.json':
            if len(docs) == 1:
                f.write(emit_canonical(docs[0]))
            else:
                f.write(json.dumps([document_to_payload(doc) for doc in docs], ensure_ascii=False))
            f.write('\n')
        elif extension == '.jsonl':
            for doc in docs:
                f.write(emit_canonical(doc))
                f.write('\n')
        else:
            for doc in docs:
                f.write(emit_conll(doc, which))
    return len(docs)
