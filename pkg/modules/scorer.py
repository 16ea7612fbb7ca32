# modules/scorer.py - Coreference Metrics (MUC, B-cubed, CEAF-e, CoNLL F1)
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from modules.corpus import Clustering, Document
from modules.utils import logger, DocKeyMismatch, MentionUniverseMismatch

Clusters = List[FrozenSet[int]]
PRF = Tuple[float, float, float]

# ========== COUNTS ==========

@dataclass(frozen=True)
class MetricCounts:
    """Numerators and denominators of one metric; summed across documents."""
    p_num: float = 0.0
    p_den: float = 0.0
    r_num: float = 0.0
    r_den: float = 0.0

    def __add__(self, other: 'MetricCounts') -> 'MetricCounts':
        return MetricCounts(
            self.p_num + other.p_num,
            self.p_den + other.p_den,
            self.r_num + other.r_num,
            self.r_den + other.r_den
        )

    def prf(self) -> PRF:
        precision = self.p_num / self.p_den if self.p_den else 0.0
        recall = self.r_num / self.r_den if self.r_den else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1


def _clusters(clustering: Clustering) -> Clusters:
    return [frozenset(members) for members in clustering.groups()]


def _muc_side(key: Clusters, response: Clusters) -> Tuple[float, float]:
    owner = {mid: i for i, cluster in enumerate(response) for mid in cluster}
    num = den = 0
    for cluster in key:
        # mentions missing from the response count as their own partitions
        partitions = {owner.get(mid, ('missing', mid)) for mid in cluster}
        num += len(cluster) - len(partitions)
        den += len(cluster) - 1
    return num, den


def muc_counts(key: Clusters, response: Clusters) -> MetricCounts:
    r_num, r_den = _muc_side(key, response)
    p_num, p_den = _muc_side(response, key)
    return MetricCounts(p_num, p_den, r_num, r_den)


def _b_cubed_side(key: Clusters, response: Clusters) -> Tuple[float, float]:
    owner = {mid: cluster for cluster in response for mid in cluster}
    num = 0.0
    den = 0
    for cluster in key:
        for mid in cluster:
            num += len(cluster & owner.get(mid, frozenset())) / len(cluster)
            den += 1
    return num, den


def b_cubed_counts(key: Clusters, response: Clusters) -> MetricCounts:
    r_num, r_den = _b_cubed_side(key, response)
    p_num, p_den = _b_cubed_side(response, key)
    return MetricCounts(p_num, p_den, r_num, r_den)


def phi4(key_cluster: FrozenSet[int], response_cluster: FrozenSet[int]) -> float:
    return 2 * len(key_cluster & response_cluster) / (len(key_cluster) + len(response_cluster))


def ceaf_e_counts(key: Clusters, response: Clusters) -> MetricCounts:
    similarity = 0.0
    if key and response:
        scores = np.array([[phi4(k, r) for r in response] for k in key])
        rows, cols = linear_sum_assignment(scores, maximize=True)
        similarity = float(scores[rows, cols].sum())
    return MetricCounts(similarity, len(response), similarity, len(key))

# ========== PUBLIC METRICS ==========

def check_universe(key: Clustering, response: Clustering):
    """Raise MentionUniverseMismatch naming the first mention present on one side only."""
    key_ids = set(key.mention_ids())
    response_ids = set(response.mention_ids())
    if key_ids != response_ids:
        missing = sorted(key_ids - response_ids)
        extra = sorted(response_ids - key_ids)
        if missing:
            raise MentionUniverseMismatch(f"mention {missing[0]} is in the key but not in the response")
        raise MentionUniverseMismatch(f"mention {extra[0]} is in the response but not in the key")


def muc(key: Clustering, response: Clustering) -> PRF:
    """Link-based MUC (precision, recall, f1)."""
    check_universe(key, response)
    return muc_counts(_clusters(key), _clusters(response)).prf()


def b_cubed(key: Clustering, response: Clustering) -> PRF:
    """Mention-based B-cubed (precision, recall, f1)."""
    check_universe(key, response)
    if not key.mention_ids():
        logger.warning("⚠️  B-cubed on an empty mention universe, reporting zeros")
    return b_cubed_counts(_clusters(key), _clusters(response)).prf()


def ceaf_e(key: Clustering, response: Clustering) -> PRF:
    """Entity-based CEAF with phi4 similarity and optimal one-to-one matching."""
    check_universe(key, response)
    return ceaf_e_counts(_clusters(key), _clusters(response)).prf()

# ========== REPORTS ==========

@dataclass(frozen=True)
class ScoreFlags:
    """
    Scoring setting. Both filters are on by default, which gives the CoNLL
    score without singletons and split antecedents (`-S -SA`).
    """
    drop_singletons: bool = True
    drop_split_antecedents: bool = True

    @property
    def setting(self) -> str:
        if self.drop_singletons:
            return '-S -SA' if self.drop_split_antecedents else '-S'
        return '-SA' if self.drop_split_antecedents else 'UA (with singletons)'


@dataclass
class DocumentCounts:
    muc: MetricCounts = field(default_factory=MetricCounts)
    b3: MetricCounts = field(default_factory=MetricCounts)
    ceaf_e: MetricCounts = field(default_factory=MetricCounts)
    key_mentions: int = 0
    response_mentions: int = 0

    def __add__(self, other: 'DocumentCounts') -> 'DocumentCounts':
        return DocumentCounts(
            self.muc + other.muc,
            self.b3 + other.b3,
            self.ceaf_e + other.ceaf_e,
            self.key_mentions + other.key_mentions,
            self.response_mentions + other.response_mentions
        )


@dataclass(frozen=True)
class ScoreReport:
    muc: PRF
    b3: PRF
    ceaf_e: PRF
    conll_f1: float
    flags: ScoreFlags
    mention_counts: Dict[str, int]
    doc_key: Optional[str] = None

    @classmethod
    def from_counts(cls, counts: DocumentCounts, flags: ScoreFlags, doc_key: Optional[str] = None) -> 'ScoreReport':
        muc_prf, b3_prf, ceaf_prf = counts.muc.prf(), counts.b3.prf(), counts.ceaf_e.prf()
        return cls(
            muc=muc_prf,
            b3=b3_prf,
            ceaf_e=ceaf_prf,
            conll_f1=(muc_prf[2] + b3_prf[2] + ceaf_prf[2]) / 3,
            flags=flags,
            mention_counts={'key': counts.key_mentions, 'response': counts.response_mentions},
            doc_key=doc_key
        )

    def to_dict(self) -> Dict:
        def metric(values: PRF) -> Dict[str, float]:
            return {'precision': values[0], 'recall': values[1], 'f1': values[2]}

        payload = {
            'setting': self.flags.setting,
            'muc': metric(self.muc),
            'b3': metric(self.b3),
            'ceaf_e': metric(self.ceaf_e),
            'conll_f1': self.conll_f1,
            'flags': {
                'drop_singletons': self.flags.drop_singletons,
                'drop_split_antecedents': self.flags.drop_split_antecedents
            },
            'mention_counts': dict(self.mention_counts)
        }
        if self.doc_key is not None:
            payload['doc_key'] = self.doc_key
        return payload

    def to_tsv_row(self) -> str:
        values = [self.muc[2], self.b3[2], self.ceaf_e[2], self.conll_f1]
        return '\t'.join([self.doc_key or 'ALL'] + [f"{v:.4f}" for v in values])

# ========== DOCUMENT SCORING ==========

def _response_clustering(doc: Document) -> Clustering:
    return doc.clustering('predicted')


def _filtered(key_doc: Document, response_doc: Document, flags: ScoreFlags) -> Tuple[Clustering, Clustering]:
    key = key_doc.clustering('gold')
    response = _response_clustering(response_doc)

    if flags.drop_split_antecedents:
        flagged = {m.mention_id for m in key_doc.mentions if m.split_antecedent}
        flagged |= {m.mention_id for m in response_doc.mentions if m.split_antecedent}
        if flagged:
            key = key.restricted(set(key.mention_ids()) - flagged)
            response = response.restricted(set(response.mention_ids()) - flagged)

    check_universe(key, response)

    if flags.drop_singletons:
        key = Clustering.from_groups(g for g in key.groups() if len(g) > 1)
        response = Clustering.from_groups(g for g in response.groups() if len(g) > 1)
    return key, response


def document_counts(key_doc: Document, response_doc: Document, flags: ScoreFlags) -> DocumentCounts:
    if key_doc.doc_key != response_doc.doc_key:
        raise DocKeyMismatch(f"key '{key_doc.doc_key}' scored against response '{response_doc.doc_key}'")
    try:
        key, response = _filtered(key_doc, response_doc, flags)
    except MentionUniverseMismatch as e:
        raise MentionUniverseMismatch(f"document '{key_doc.doc_key}': {e}") from None
    key_clusters, response_clusters = _clusters(key), _clusters(response)
    return DocumentCounts(
        muc=muc_counts(key_clusters, response_clusters),
        b3=b_cubed_counts(key_clusters, response_clusters),
        ceaf_e=ceaf_e_counts(key_clusters, response_clusters),
        key_mentions=len(key.mention_ids()),
        response_mentions=len(response.mention_ids())
    )


def score(key_doc: Document, response_doc: Document, flags: Optional[ScoreFlags] = None) -> ScoreReport:
    """
    Score one document.

    The key is the gold clustering of `key_doc`; the response is the
    predicted clustering of `response_doc`.

    Raises:
        MissingClustering: `response_doc` carries no prediction
    """
    flags = flags or ScoreFlags()
    return ScoreReport.from_counts(document_counts(key_doc, response_doc, flags), flags, key_doc.doc_key)


def score_corpus(key_docs: Sequence[Document], response_docs: Sequence[Document],
                 flags: Optional[ScoreFlags] = None) -> Tuple[ScoreReport, List[ScoreReport]]:
    """
    Micro-averaged corpus score plus per-document reports.

    Raises:
        DocKeyMismatch: the two sides do not hold the same documents
    """
    flags = flags or ScoreFlags()
    responses = {doc.doc_key: doc for doc in response_docs}
    key_names: Set[str] = {doc.doc_key for doc in key_docs}
    missing = [doc.doc_key for doc in key_docs if doc.doc_key not in responses]
    extra = sorted(set(responses) - key_names)
    if missing:
        raise DocKeyMismatch(f"no response for document '{missing[0]}'")
    if extra:
        raise DocKeyMismatch(f"response document '{extra[0]}' has no key")

    total = DocumentCounts()
    per_doc = []
    for key_doc in key_docs:
        counts = document_counts(key_doc, responses[key_doc.doc_key], flags)
        per_doc.append(ScoreReport.from_counts(counts, flags, key_doc.doc_key))
        total = total + counts

    report = ScoreReport.from_counts(total, flags)
    logger.info(f"📊 Scored {len(per_doc)} documents ({flags.setting}): CoNLL F1 {report.conll_f1:.4f}")
    return report, per_doc
