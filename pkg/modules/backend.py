# modules/backend.py - Completion Backends (OpenAI-compatible HTTP and gold-backed mock)
import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import requests

from config import config
from modules.corpus import Document, MentionSpan
from modules.templates import (
    ChainAnswer, PromptRecord, TaskMode,
    gold_chain, gold_cluster_ids, gold_members, is_discourse_new, render_annotated
)
from modules.utils import (
    logger, stable_seed, ProgressTracker,
    AuthMissing, BackendError, BadResponse, ConfigError, CorefWeaveError,
    TransportError, UnknownRecordMode
)

# ========== CONFIGURATION ==========

@dataclass
class BackendConfig:
    kind: str = 'remote'
    base_url: str = config.LLM_BASE_URL
    model_name: str = config.LLM_MODEL
    api_key_env: str = config.LLM_API_KEY_ENV
    temperature: float = config.LLM_TEMPERATURE
    max_tokens: int = config.LLM_MAX_TOKENS
    timeout_s: float = config.LLM_TIMEOUT
    max_retries: int = config.LLM_MAX_RETRIES
    parallelism: int = config.LLM_PARALLELISM
    backoff_base_s: float = config.LLM_BACKOFF_BASE

    def __post_init__(self):
        if self.kind not in ('remote', 'mock'):
            raise ConfigError(f"backend kind must be 'remote' or 'mock', got {self.kind!r}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be at least 1, got {self.parallelism}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be non-negative, got {self.temperature}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be non-negative, got {self.max_retries}")


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model of the mock backend; every probability lies in [0, 1]."""
    seed: int = 0
    p_fwd_swap: float = 0.0
    p_bwd_swap: float = 0.0
    p_none_flip: float = 0.0
    p_dup: float = 0.0
    p_drop: float = 0.0
    p_id_err: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith('p_'):
                value = getattr(self, f.name)
                if not 0.0 <= value <= 1.0:
                    raise ConfigError(f"{f.name} must lie in [0, 1], got {value}")

    @classmethod
    def parse(cls, text: Optional[str]) -> 'NoiseSpec':
        """
        Parse the CLI form `seed=7,p_fwd_swap=0.3,...`.

        Raises:
            ConfigError: unknown key or malformed value
        """
        if not text or not text.strip():
            return cls()
        known = {f.name for f in fields(cls)}
        values: Dict[str, object] = {}
        for part in text.split(','):
            if not part.strip():
                continue
            key, sep, raw = part.partition('=')
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"invalid noise setting {part.strip()!r}")
            try:
                values[key] = int(raw) if key == 'seed' else float(raw)
            except ValueError:
                raise ConfigError(f"invalid value for {key}: {raw.strip()!r}") from None
        return cls(**values)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ResponseRecord:
    record_id: str
    doc_key: str
    mode: TaskMode
    target: int
    raw_text: Optional[str]
    latency_ms: int = 0
    attempts: int = 1
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self) -> Dict:
        return {
            'id': self.record_id,
            'doc_key': self.doc_key,
            'mode': TaskMode(self.mode).value,
            'target': self.target,
            'raw_text': self.raw_text,
            'latency_ms': self.latency_ms,
            'attempts': self.attempts,
            'error': self.error
        }

    @classmethod
    def from_dict(cls, row: Dict) -> 'ResponseRecord':
        return cls(
            record_id=row['id'],
            doc_key=row['doc_key'],
            mode=TaskMode(row['mode']),
            target=int(row['target']),
            raw_text=row.get('raw_text'),
            latency_ms=int(row.get('latency_ms', 0)),
            attempts=int(row.get('attempts', 1)),
            error=row.get('error')
        )

# ========== BACKENDS ==========

class CompletionBackend:
    """Uniform completion interface; `generate` also reports the attempts used."""

    parallelism: int = 1
    deterministic: bool = False

    def generate(self, prompt: str, record: Optional[PromptRecord] = None,
                 max_tokens: Optional[int] = None) -> Tuple[str, int]:
        raise NotImplementedError

    def complete(self, prompt: str, record: Optional[PromptRecord] = None,
                 max_tokens: Optional[int] = None) -> str:
        return self.generate(prompt, record, max_tokens)[0]


class RemoteBackend(CompletionBackend):
    """
    Client for an OpenAI-compatible `/chat/completions` endpoint.

    429 and 5xx responses, timeouts and connection errors are retried with
    exponential backoff; any other 4xx fails at once.
    """

    def __init__(self, cfg: BackendConfig, session: Optional[requests.Session] = None):
        api_key = os.environ.get(cfg.api_key_env)
        if not api_key:
            raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
        self.cfg = cfg
        self.parallelism = cfg.parallelism
        self.url = cfg.base_url.rstrip('/') + '/chat/completions'

        self.session = session or requests.Session()
        self.session.headers.update({
            'Authorization': f'Bearer {api_key}',
            'Content-Type': 'application/json'
        })
        logger.info(f"🔌 Remote backend: {cfg.model_name} at {cfg.base_url}")

    def _payload(self, prompt: str, max_tokens: Optional[int]) -> Dict:
        return {
            'model': self.cfg.model_name,
            'messages': [{'role': 'user', 'content': prompt}],
            'temperature': self.cfg.temperature,
            'max_tokens': max_tokens or self.cfg.max_tokens
        }

    @staticmethod
    def _extract_text(response: requests.Response) -> str:
        try:
            content = response.json()['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BadResponse(f"unexpected completion body ({type(e).__name__}): {response.text[:200]!r}") from None
        if not isinstance(content, str):
            raise BadResponse(f"completion content is not text: {content!r}")
        return content

    def generate(self, prompt: str, record: Optional[PromptRecord] = None,
                 max_tokens: Optional[int] = None) -> Tuple[str, int]:
        payload = self._payload(prompt, max_tokens)
        total = self.cfg.max_retries + 1
        last_error = 'no attempt made'

        for attempt in range(total):
            try:
                logger.debug(f"📤 Completion attempt {attempt + 1}/{total}")
                response = self.session.post(self.url, json=payload, timeout=self.cfg.timeout_s)
            except requests.exceptions.Timeout:
                last_error = 'timeout'
                logger.warning(f"⏰ Completion timeout (attempt {attempt + 1})")
            except requests.exceptions.RequestException as e:
                last_error = f"{type(e).__name__}: {e}"
                logger.warning(f"🌐 Network error (attempt {attempt + 1}): {e}")
            else:
                status = response.status_code
                if status == 429 or status >= 500:
                    last_error = f"HTTP {status}"
                    logger.warning(f"🌐 Retryable status {status} (attempt {attempt + 1})")
                elif status >= 400:
                    raise TransportError(f"HTTP {status}: {response.text[:200]}", attempts=attempt + 1)
                else:
                    return self._extract_text(response), attempt + 1

            if attempt < total - 1:
                wait_time = self.cfg.backoff_base_s * 2 ** attempt
                logger.info(f"⏳ Waiting {wait_time:.1f}s before retry...")
                time.sleep(wait_time)

        raise TransportError(f"completion failed after {total} attempts: {last_error}", attempts=total)


class MockBackend(CompletionBackend):
    """
    Deterministic gold-backed backend.

    Prompts are answered from the gold clustering of the matching document;
    records are passed explicitly or looked up in the prompt registry.
    """

    deterministic = True

    def __init__(self, documents: Iterable[Document], noise: Optional[NoiseSpec] = None,
                 parallelism: int = 1):
        self.documents = {doc.doc_key: doc for doc in documents}
        self.noise = noise or NoiseSpec()
        self.parallelism = parallelism
        self._registry: Dict[str, PromptRecord] = {}
        logger.info(f"🧪 Mock backend over {len(self.documents)} documents (noise: {self.noise.to_dict()})")

    def register(self, records: Iterable[PromptRecord]):
        for record in records:
            self._registry[record.prompt] = record

    def generate(self, prompt: str, record: Optional[PromptRecord] = None,
                 max_tokens: Optional[int] = None) -> Tuple[str, int]:
        record = record or self._registry.get(prompt)
        if record is None:
            raise BackendError("mock backend received a prompt with no known record")
        doc = self.documents.get(record.doc_key)
        if doc is None:
            raise BackendError(f"mock backend has no document '{record.doc_key}'")
        return mock_answer(doc, record, self.noise), 1


def make_backend(cfg: BackendConfig, documents: Optional[Iterable[Document]] = None,
                 noise: Optional[NoiseSpec] = None) -> CompletionBackend:
    """Build the backend named by `cfg.kind`."""
    if cfg.kind == 'mock':
        if documents is None:
            raise ConfigError("the mock backend needs gold documents")
        return MockBackend(documents, noise, cfg.parallelism)
    return RemoteBackend(cfg)


def complete(cfg: BackendConfig, prompt: str, record: Optional[PromptRecord] = None,
             documents: Optional[Iterable[Document]] = None, noise: Optional[NoiseSpec] = None) -> str:
    """
    One completion through a backend built from `cfg`.

    The mock backend answers from `documents`; `record` tells it which gold
    answer the prompt asks for.
    """
    backend = make_backend(cfg, documents, noise)
    if record is not None and isinstance(backend, MockBackend):
        backend.register([record])
    return backend.complete(prompt, record)

# ========== MOCK ANSWERS ==========

def _item(mention: MentionSpan) -> Tuple[str, int]:
    return (mention.surface, mention.sent_index)


def _corrupt_chain(doc: Document, anchor: int, answer: ChainAnswer, direction: str,
                   p_swap: float, p_flip: float, rng: random.Random) -> ChainAnswer:
    if direction == 'fwd':
        neighbours = list(range(anchor))
    else:
        neighbours = list(range(anchor + 1, doc.num_mentions))
    members = set(gold_members(doc, anchor))
    foreign = [mid for mid in neighbours if mid not in members]

    # both draws happen unconditionally so the stream does not depend on the answer
    swap_draw = rng.random()
    flip_draw = rng.random()

    items = list(answer.items)
    if items and foreign and swap_draw < p_swap:
        items[0] = _item(doc.mentions[rng.choice(foreign)])
    if flip_draw < p_flip:
        if items:
            items = []
        elif neighbours:
            items = [_item(doc.mentions[rng.choice(neighbours)])]
    return ChainAnswer(tuple(items)) if items else ChainAnswer.none()


def _shifted_document(doc: Document, sent: int, position: int, inserted: Sequence[str] = (),
                      removed: int = 0) -> Document:
    """Copy of `doc` with tokens inserted at (or removed from) one position; spans follow."""
    sentence = list(doc.sentences[sent])
    sentence[position:position + removed] = list(inserted)
    delta = len(inserted) - removed
    mentions = []
    for m in doc.mentions:
        if m.sent_index == sent and m.start >= position + removed:
            m = MentionSpan(m.mention_id, m.sent_index, m.start + delta, m.end + delta,
                            m.surface, m.non_referring, m.split_antecedent)
        mentions.append(m)
    sentences = list(doc.sentences)
    sentences[sent] = tuple(sentence)
    return Document(doc.doc_key, sentences, mentions, doc.gold, doc.predicted)


def _plain_positions(doc: Document) -> List[Tuple[int, int]]:
    covered = set()
    for m in doc.mentions:
        covered.update((m.sent_index, w) for w in range(m.start, m.end + 1))
    return [
        (s, w) for s, sentence in enumerate(doc.sentences)
        for w in range(len(sentence)) if (s, w) not in covered and len(sentence) > 1
    ]


def _mock_doc_full(doc: Document, noise: NoiseSpec, rng: random.Random) -> str:
    ids = gold_cluster_ids(doc)
    num_clusters = max(ids)
    for mid, gold_id in enumerate(ids):
        if rng.random() < noise.p_id_err and num_clusters > 1:
            ids[mid] = rng.choice([k for k in range(1, num_clusters + 1) if k != gold_id])

    text_doc = doc
    dup_draw = rng.random()
    if dup_draw < noise.p_dup:
        # a copy inside an enclosing mention would change that mention's surface
        outermost = [
            m for m in doc.mentions
            if not any(o.sent_index == m.sent_index and o.start < m.start <= o.end for o in doc.mentions)
        ]
        mention = outermost[rng.randrange(len(outermost))]
        text_doc = _shifted_document(text_doc, mention.sent_index, mention.start,
                                     inserted=mention.surface.split())
    drop_draw = rng.random()
    if drop_draw < noise.p_drop:
        positions = _plain_positions(text_doc)
        if positions:
            sent, position = positions[rng.randrange(len(positions))]
            text_doc = _shifted_document(text_doc, sent, position, removed=1)
    return render_annotated(text_doc, dict(enumerate(ids)))


def _mock_doc_iter(doc: Document, record: PromptRecord, noise: NoiseSpec, rng: random.Random) -> str:
    step = record.target
    assigned = [int(x) for x in record.meta.get('assigned', '').split(',') if x.strip()]
    if len(assigned) != step:
        raise BackendError(f"record {record.record_id} carries {len(assigned)} assigned ids for step {step}")
    max_id = max(assigned, default=0)

    earlier = [mid for mid in gold_members(doc, step) if mid < step]
    cluster_id = assigned[earlier[-1]] if earlier else max_id + 1
    if rng.random() < noise.p_id_err:
        choices = [k for k in range(1, max_id + 2) if k != cluster_id]
        if choices:
            cluster_id = rng.choice(choices)
    return f"{cluster_id})"


def mock_answer(doc: Document, record: PromptRecord, noise: NoiseSpec) -> str:
    """
    Gold answer for the record's mode with the mode-relevant corruptions applied.

    Draws come from a generator seeded by (noise.seed, record_id), so each
    record's outcome is independent of batch order and composition.
    """
    if record.doc_key != doc.doc_key:
        raise BackendError(f"record {record.record_id} does not belong to document '{doc.doc_key}'")
    rng = random.Random(stable_seed(noise.seed, record.record_id))
    chain_len = int(record.meta.get('chain_len', config.CHAIN_LEN))
    mode = record.mode

    if mode == TaskMode.QA_FORWARD:
        answer = gold_chain(doc, record.target, chain_len, 'fwd')
        return _corrupt_chain(doc, record.target, answer, 'fwd', noise.p_fwd_swap, noise.p_none_flip, rng).render()
    if mode == TaskMode.QA_BACKWARD:
        answer = gold_chain(doc, record.target, chain_len, 'bwd')
        return _corrupt_chain(doc, record.target, answer, 'bwd', noise.p_bwd_swap, noise.p_none_flip, rng).render()
    if mode == TaskMode.QA_SINGLETON:
        candidates = doc.mentions_in_sentence(record.target)
        phrases = [m.surface for m in candidates if is_discourse_new(doc, m.mention_id)]
        if rng.random() < noise.p_none_flip:
            phrases = [] if phrases else [m.surface for m in candidates]
        return json.dumps(phrases, ensure_ascii=False) if phrases else 'None'
    if mode == TaskMode.DOC_FULL:
        return _mock_doc_full(doc, noise, rng)
    if mode == TaskMode.DOC_ITER:
        return _mock_doc_iter(doc, record, noise, rng)
    raise UnknownRecordMode(f"no mock answer for mode {mode!r}")

# ========== BATCH RUNNER ==========

def _complete_one(backend: CompletionBackend, record: PromptRecord) -> ResponseRecord:
    start = time.perf_counter()
    raw_text, attempts, error = None, 1, None
    try:
        raw_text, attempts = backend.generate(record.prompt, record)
    except CorefWeaveError as e:
        attempts = getattr(e, 'attempts', 1)
        error = f"{type(e).__name__}: {e}"
        logger.error(f"❌ {record.record_id} failed: {error}")
    except Exception as e:
        error = f"{type(e).__name__}: {e}"
        logger.error(f"❌ Unexpected error on {record.record_id}: {error}", exc_info=True)
    latency_ms = 0 if backend.deterministic else int((time.perf_counter() - start) * 1000)
    return ResponseRecord(
        record_id=record.record_id,
        doc_key=record.doc_key,
        mode=record.mode,
        target=record.target,
        raw_text=raw_text,
        latency_ms=latency_ms,
        attempts=attempts,
        error=error
    )


def run_batch(backend: CompletionBackend, records: Sequence[PromptRecord],
              parallelism: Optional[int] = None) -> List[ResponseRecord]:
    """
    Complete every record with at most `parallelism` requests in flight.

    Returns:
        One ResponseRecord per input record, in input order; failed records
        carry an error marker instead of aborting the batch
    """
    workers = max(1, parallelism or backend.parallelism)
    results: List[Optional[ResponseRecord]] = [None] * len(records)
    if not records:
        return []

    tracker = ProgressTracker(len(records), "Completions")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {
            executor.submit(_complete_one, backend, record): i
            for i, record in enumerate(records)
        }
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
            tracker.update()
    tracker.complete()

    failed = sum(1 for r in results if r.failed)
    if failed:
        logger.warning(f"⚠️  {failed}/{len(records)} completions failed")
    return results
