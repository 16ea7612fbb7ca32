# modules/joint.py - Joint Inference over Forward, Backward and Singleton Answers
import itertools
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx

from config import config
from modules.corpus import Clustering, Document
from modules.templates import (
    ChainAnswer, TaskMode, ground_mention, parse_chain_answer, parse_singleton_answer
)
from modules.utils import logger, normalize_surface, DocMismatch, JointError, Unparseable

# ========== DOMAIN TYPES ==========

@dataclass(frozen=True)
class MentionPair:
    """Oriented link: `antecedent` always precedes `anaphor`."""
    anaphor: int
    antecedent: int
    source: str
    rank: int

    def __post_init__(self):
        if self.antecedent >= self.anaphor:
            raise JointError(f"antecedent {self.antecedent} does not precede anaphor {self.anaphor}")
        if self.source not in ('fwd', 'bwd'):
            raise JointError(f"pair source must be 'fwd' or 'bwd', got {self.source!r}")


class WeightTable:
    """Anaphor -> candidate antecedent -> accumulated weight."""

    def __init__(self, weights: Optional[Mapping[int, Mapping[int, float]]] = None):
        self.w: Dict[int, Dict[int, float]] = {
            a: dict(cands) for a, cands in (weights or {}).items() if cands
        }

    def add(self, anaphor: int, antecedent: int, amount: float = 1.0):
        if amount < 0:
            raise JointError("weights never decrease")
        self.w.setdefault(anaphor, {})
        self.w[anaphor][antecedent] = self.w[anaphor].get(antecedent, 0.0) + amount

    def candidates(self, anaphor: int) -> Dict[int, float]:
        return dict(self.w.get(anaphor, {}))

    def anaphors(self) -> List[int]:
        return sorted(self.w)

    def max_weight(self, anaphor: int) -> float:
        return max(self.w.get(anaphor, {}).values(), default=0.0)

    def pairs(self) -> Iterable[Tuple[int, int, float]]:
        for anaphor in self.anaphors():
            for antecedent, weight in sorted(self.w[anaphor].items()):
                yield anaphor, antecedent, weight

    def copy(self) -> 'WeightTable':
        return WeightTable(self.w)

    def __getitem__(self, anaphor: int) -> Dict[int, float]:
        return self.candidates(anaphor)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WeightTable) and self.w == other.w


@dataclass(frozen=True)
class ChainSet:
    chains: Tuple[Tuple[int, ...], ...] = ()

    def chain_of(self, mention_id: int) -> Optional[int]:
        for i, chain in enumerate(self.chains):
            if mention_id in chain:
                return i
        return None

    def together(self, a: int, b: int) -> bool:
        chain = self.chain_of(a)
        return chain is not None and b in self.chains[chain]

    def __len__(self) -> int:
        return len(self.chains)


@dataclass
class JointDiagnostics:
    dropped_ungroundable: int = 0
    unparseable: int = 0
    failed_responses: int = 0
    reinforced_anaphors: int = 0
    tie_breaks: int = 0

    def merge(self, other: 'JointDiagnostics'):
        for key, value in asdict(other).items():
            setattr(self, key, getattr(self, key) + value)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class JointResult:
    doc_key: str
    pairs: List[Tuple[int, int]]
    predicted: Clustering
    diagnostics: JointDiagnostics = field(default_factory=JointDiagnostics)

# ========== PAIR CONSTRUCTION ==========

def _check_mention(doc: Document, mention_id: int):
    if not 0 <= mention_id < doc.num_mentions:
        raise DocMismatch(f"response refers to mention {mention_id}, '{doc.doc_key}' has {doc.num_mentions}")


def collect_pairs(doc: Document, fwd_responses: Mapping[int, ChainAnswer],
                  bwd_responses: Mapping[int, ChainAnswer],
                  diagnostics: Optional[JointDiagnostics] = None) -> Tuple[List[MentionPair], List[MentionPair]]:
    """
    Ground parsed chain answers into oriented forward (FP) and backward (BP) pairs.

    Forward items ground to mentions before the queried mention; backward
    items ground to later mentions and take the queried mention as antecedent.
    Ungroundable items are dropped and tallied.
    """
    diagnostics = diagnostics if diagnostics is not None else JointDiagnostics()
    forward, backward = [], []

    for anaphor, answer in sorted(fwd_responses.items()):
        _check_mention(doc, anaphor)
        for rank, (surface, sent) in enumerate(answer.items, start=1):
            antecedent = ground_mention(doc, surface, sent, anaphor, 'fwd')
            if antecedent is None:
                diagnostics.dropped_ungroundable += 1
                continue
            forward.append(MentionPair(anaphor, antecedent, 'fwd', rank))

    for antecedent, answer in sorted(bwd_responses.items()):
        _check_mention(doc, antecedent)
        for rank, (surface, sent) in enumerate(answer.items, start=1):
            anaphor = ground_mention(doc, surface, sent, antecedent, 'bwd')
            if anaphor is None:
                diagnostics.dropped_ungroundable += 1
                continue
            backward.append(MentionPair(anaphor, antecedent, 'bwd', rank))

    return forward, backward


def ground_singletons(doc: Document, singleton_answers: Mapping[int, Sequence[str]],
                      diagnostics: Optional[JointDiagnostics] = None) -> Dict[int, List[int]]:
    """Map each sentence's listed phrases to mention ids of that sentence."""
    diagnostics = diagnostics if diagnostics is not None else JointDiagnostics()
    grounded: Dict[int, List[int]] = {}
    for sent_index, phrases in sorted(singleton_answers.items()):
        pool = doc.mentions_in_sentence(sent_index)
        used: List[int] = []
        for phrase in phrases:
            wanted = normalize_surface(phrase)
            match = next(
                (m.mention_id for m in pool
                 if m.mention_id not in used and normalize_surface(m.surface) == wanted),
                None
            )
            if match is None:
                diagnostics.dropped_ungroundable += 1
                continue
            used.append(match)
        grounded[sent_index] = sorted(used)
    return grounded

# ========== WEIGHTING ==========

def init_weights(forward: Iterable[MentionPair], backward: Iterable[MentionPair]) -> WeightTable:
    """Every occurrence of an oriented pair in FP or BP adds 1."""
    table = WeightTable()
    for pair in itertools.chain(forward, backward):
        table.add(pair.anaphor, pair.antecedent, 1.0)
    return table


def build_chains(weights: WeightTable, threshold: Optional[float] = None) -> ChainSet:
    """Connected components over the pairs whose weight reaches `threshold`."""
    threshold = config.CHAIN_THRESHOLD if threshold is None else threshold
    graph = nx.Graph()
    for anaphor, antecedent, weight in weights.pairs():
        if weight >= threshold:
            graph.add_edge(anaphor, antecedent)
    chains = sorted(
        (tuple(sorted(component)) for component in nx.connected_components(graph) if len(component) >= 2),
        key=lambda chain: chain[0]
    )
    return ChainSet(tuple(chains))


def reinforce(weights: WeightTable, chains: ChainSet, found_threshold: Optional[float] = None) -> WeightTable:
    """
    Raise candidate weights that a trusted chain vouches for.

    For an anaphor whose referent is not yet found, every unordered pair of
    its candidates lying in one chain adds 1 to both candidates. Increments
    are computed from the input table, never from partially updated weights.
    """
    found_threshold = config.FOUND_THRESHOLD if found_threshold is None else found_threshold
    result = weights.copy()
    for anaphor in weights.anaphors():
        if weights.max_weight(anaphor) >= found_threshold:
            continue
        for b, d in itertools.combinations(sorted(weights.candidates(anaphor)), 2):
            if chains.together(b, d):
                result.add(anaphor, b, 1.0)
                result.add(anaphor, d, 1.0)
    return result


def resolve(weights: WeightTable, singleton_lists: Mapping[int, Iterable[int]],
            found_threshold: Optional[float] = None,
            diagnostics: Optional[JointDiagnostics] = None) -> List[Tuple[int, int]]:
    """
    Choose at most one antecedent per anaphor.

    A found referent (weight >= threshold) always wins; otherwise a mention
    the singleton answer lists as discourse-new gets no antecedent; otherwise
    the heaviest candidate is taken. Ties go to the nearest antecedent.

    Returns:
        Sorted (anaphor, antecedent) pairs
    """
    found_threshold = config.FOUND_THRESHOLD if found_threshold is None else found_threshold
    diagnostics = diagnostics if diagnostics is not None else JointDiagnostics()
    discourse_new: Set[int] = set()
    for mention_ids in singleton_lists.values():
        discourse_new.update(mention_ids)

    pairs = []
    for anaphor in weights.anaphors():
        candidates = weights.candidates(anaphor)
        best = max(candidates.values())
        if best < found_threshold and anaphor in discourse_new:
            continue
        top = [antecedent for antecedent, weight in candidates.items() if weight == best]
        if len(top) > 1:
            diagnostics.tie_breaks += 1
        pairs.append((anaphor, max(top)))
    return pairs


def pairs_to_clusters(doc: Document, pairs: Iterable[Tuple[int, int]]) -> Clustering:
    """Transitive closure of the links; unlinked mentions become singletons."""
    graph = nx.Graph()
    graph.add_nodes_from(range(doc.num_mentions))
    for anaphor, antecedent in pairs:
        _check_mention(doc, anaphor)
        _check_mention(doc, antecedent)
        graph.add_edge(anaphor, antecedent)
    return Clustering.from_groups(nx.connected_components(graph))

# ========== EVALUATION HELPERS ==========

def pair_counts(doc: Document, pairs: Iterable[Tuple[int, int]]) -> Tuple[int, int]:
    """(correct, total) over gold anaphors; a link is correct when gold-coreferent."""
    gold = doc.clustering('gold')
    predicted = dict(pairs)
    correct = total = 0
    for members in gold.groups():
        for anaphor in members[1:]:
            total += 1
            antecedent = predicted.get(anaphor)
            if antecedent is not None and gold.cluster_of(antecedent) == gold.cluster_of(anaphor):
                correct += 1
    return correct, total


def pair_accuracy(doc: Document, pairs: Iterable[Tuple[int, int]]) -> float:
    correct, total = pair_counts(doc, pairs)
    return correct / total if total else 1.0

# ========== RESOLVER ==========

ABLATIONS = ('joint', 'fwd_bwd', 'fwd_only')


class JointResolver:
    """
    Per-document joint inference and its ablations.

    - joint: forward + backward weights, chain reinforcement, singleton rule
    - fwd_bwd: forward + backward weights only
    - fwd_only: nearest grounded item of each forward answer
    """

    def __init__(self, ablation: str = 'joint', chain_threshold: Optional[float] = None,
                 found_threshold: Optional[float] = None):
        if ablation not in ABLATIONS:
            raise JointError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
        self.ablation = ablation
        self.chain_threshold = config.CHAIN_THRESHOLD if chain_threshold is None else chain_threshold
        self.found_threshold = config.FOUND_THRESHOLD if found_threshold is None else found_threshold

    def _parse(self, doc: Document, responses: Iterable, diagnostics: JointDiagnostics):
        forward: Dict[int, ChainAnswer] = {}
        backward: Dict[int, ChainAnswer] = {}
        singletons: Dict[int, List[str]] = {}
        for response in responses:
            if response.doc_key != doc.doc_key:
                raise DocMismatch(f"response {response.record_id} belongs to '{response.doc_key}', not '{doc.doc_key}'")
            if response.failed:
                diagnostics.failed_responses += 1
                continue
            mode = TaskMode(response.mode)
            try:
                if mode == TaskMode.QA_FORWARD:
                    forward[response.target] = parse_chain_answer(response.raw_text)
                elif mode == TaskMode.QA_BACKWARD:
                    backward[response.target] = parse_chain_answer(response.raw_text)
                elif mode == TaskMode.QA_SINGLETON:
                    singletons[response.target] = parse_singleton_answer(response.raw_text)
                else:
                    logger.debug(f"Skipping {mode.value} response {response.record_id}")
            except Unparseable as e:
                diagnostics.unparseable += 1
                logger.debug(f"Unparseable response {response.record_id}: {e}")
        return forward, backward, singletons

    def _forward_only(self, doc: Document, forward: Mapping[int, ChainAnswer],
                      diagnostics: JointDiagnostics) -> List[Tuple[int, int]]:
        pairs = []
        for anaphor, answer in sorted(forward.items()):
            _check_mention(doc, anaphor)
            for surface, sent in answer.items:
                antecedent = ground_mention(doc, surface, sent, anaphor, 'fwd')
                if antecedent is not None:
                    pairs.append((anaphor, antecedent))
                    break
                diagnostics.dropped_ungroundable += 1
        return pairs

    def resolve_document(self, doc: Document, responses: Iterable) -> JointResult:
        """
        Resolve one document from its QA responses.

        Args:
            doc: Document with gold mentions
            responses: ResponseRecords of the qa_* modes for this document

        Returns:
            JointResult with the pairs, predicted clustering and diagnostics
        """
        diagnostics = JointDiagnostics()
        forward, backward, singletons = self._parse(doc, responses, diagnostics)

        if self.ablation == 'fwd_only':
            pairs = self._forward_only(doc, forward, diagnostics)
        else:
            fp, bp = collect_pairs(doc, forward, backward, diagnostics)
            weights = init_weights(fp, bp)
            discourse_new: Dict[int, List[int]] = {}
            if self.ablation == 'joint':
                chains = build_chains(weights, self.chain_threshold)
                reinforced = reinforce(weights, chains, self.found_threshold)
                diagnostics.reinforced_anaphors = sum(
                    1 for a in weights.anaphors() if reinforced[a] != weights[a]
                )
                weights = reinforced
                discourse_new = ground_singletons(doc, singletons, diagnostics)
            pairs = resolve(weights, discourse_new, self.found_threshold, diagnostics)

        return JointResult(
            doc_key=doc.doc_key,
            pairs=pairs,
            predicted=pairs_to_clusters(doc, pairs),
            diagnostics=diagnostics
        )

    def resolve_corpus(self, docs: Sequence[Document], responses: Iterable) -> Tuple[List[JointResult], JointDiagnostics]:
        """Group responses by document and resolve each one."""
        by_doc: Dict[str, List] = {doc.doc_key: [] for doc in docs}
        for response in responses:
            if response.doc_key not in by_doc:
                raise DocMismatch(f"response {response.record_id} names unknown document '{response.doc_key}'")
            by_doc[response.doc_key].append(response)

        results = []
        totals = JointDiagnostics()
        for doc in docs:
            result = self.resolve_document(doc, by_doc[doc.doc_key])
            totals.merge(result.diagnostics)
            results.append(result)
        logger.info(f"🔗 Resolved {len(results)} documents ({self.ablation}): {totals.to_dict()}")
        return results, totals
