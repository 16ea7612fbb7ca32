# tests/test_joint.py - Joint Inference Tests
import pytest

from modules.backend import MockBackend, NoiseSpec, ResponseRecord, run_batch
from modules.corpus import Clustering
from modules.joint import (
    ChainSet, JointDiagnostics, JointResolver, MentionPair, WeightTable,
    build_chains, collect_pairs, ground_singletons, init_weights, pair_counts,
    pairs_to_clusters, reinforce, resolve
)
from modules.scorer import ScoreFlags, score_corpus
from modules.templates import ChainAnswer, TaskMode, build_prompts
from modules.utils import DocMismatch, JointError

QA_MODES = [TaskMode.QA_FORWARD, TaskMode.QA_BACKWARD, TaskMode.QA_SINGLETON]


def _response(doc, mode, target, text):
    return ResponseRecord(f"{doc.doc_key}:{mode.value}:{target}", doc.doc_key, mode, target, text)


def _resolve_suite(docs, records, noise, ablations):
    responses = run_batch(MockBackend(docs, noise), records, parallelism=4)
    return {
        ablation: JointResolver(ablation).resolve_corpus(docs, responses)[0]
        for ablation in ablations
    }


def _accuracy(docs, results):
    correct = total = 0
    for doc, result in zip(docs, results):
        c, t = pair_counts(doc, result.pairs)
        correct += c
        total += t
    return correct / total


def _conll_f1(docs, results):
    predicted = [doc.with_predicted(r.predicted) for doc, r in zip(docs, results)]
    report, _ = score_corpus(docs, predicted, ScoreFlags())
    return report.conll_f1


class TestWeights:
    """Pair weights, trusted chains and reinforcement."""

    def test_pair_orientation(self):
        with pytest.raises(JointError):
            MentionPair(anaphor=1, antecedent=3, source='fwd', rank=1)

    def test_every_occurrence_adds_one(self):
        forward = [MentionPair(3, 1, 'fwd', 1), MentionPair(3, 0, 'fwd', 2)]
        backward = [MentionPair(3, 1, 'bwd', 1)]
        assert init_weights(forward, backward)[3] == {1: 2.0, 0: 1.0}

    def test_chains_from_heavy_pairs(self):
        weights = WeightTable({2: {0: 2.0}, 3: {2: 2.0, 1: 1.0}, 5: {4: 1.0}})
        assert build_chains(weights, 2.0).chains == ((0, 2, 3),)

    def test_reinforce_candidates_in_one_chain(self):
        weights = WeightTable({5: {1: 1.0, 3: 1.0}, 3: {1: 2.0}})
        chains = ChainSet(((1, 3),))
        reinforced = reinforce(weights, chains, 2.0)
        assert reinforced[5] == {1: 2.0, 3: 2.0}
        assert weights[5] == {1: 1.0, 3: 1.0}

    def test_found_referent_is_not_reinforced(self):
        weights = WeightTable({5: {1: 2.0, 3: 1.0}})
        assert reinforce(weights, ChainSet(((1, 3),)), 2.0) == weights

    def test_reinforcement_never_lowers_weights(self, noisy_suite):
        doc = noisy_suite[0]
        records = build_prompts(doc, QA_MODES)
        responses = run_batch(MockBackend([doc], NoiseSpec(seed=2, p_fwd_swap=0.5, p_bwd_swap=0.5)), records)
        resolver = JointResolver()
        forward, backward, _ = resolver._parse(doc, responses, JointDiagnostics())
        weights = init_weights(*collect_pairs(doc, forward, backward))
        reinforced = reinforce(weights, build_chains(weights))
        for anaphor, antecedent, weight in weights.pairs():
            assert reinforced[anaphor][antecedent] >= weight


class TestResolve:
    """Antecedent selection rules."""

    def test_heaviest_candidate_wins(self):
        weights = WeightTable({7: {2: 1.0, 4: 2.0}})
        assert resolve(weights, {}, 2.0) == [(7, 4)]

    def test_found_referent_beats_singleton_answer(self):
        weights = WeightTable({7: {2: 2.0}})
        assert resolve(weights, {1: [7]}, 2.0) == [(7, 2)]

    def test_discourse_new_gets_no_antecedent(self):
        weights = WeightTable({7: {2: 1.0}})
        assert resolve(weights, {1: [7]}, 2.0) == []

    def test_tie_goes_to_nearest(self):
        diagnostics = JointDiagnostics()
        weights = WeightTable({7: {2: 1.0, 5: 1.0}})
        assert resolve(weights, {}, 2.0, diagnostics) == [(7, 5)]
        assert diagnostics.tie_breaks == 1

    def test_wrong_forward_pair_corrected_by_duplicate_evidence(self):
        # A wrongly answers B, but D accumulates two votes for A
        a, b, d = 6, 4, 2
        weights = WeightTable({a: {b: 1.0, d: 2.0}})
        assert resolve(weights, {}, 2.0) == [(a, d)]

    def test_clusters_are_transitive_closure(self, three_alice_doc):
        clustering = pairs_to_clusters(three_alice_doc, [(2, 0), (3, 2)])
        assert clustering == Clustering.from_groups([[0, 2, 3], [1]])


class TestGroundingResponses:
    """Turning parsed answers into pairs."""

    def test_collect_pairs(self, three_alice_doc):
        forward = {3: ChainAnswer((('Alice', 1), ('Alice', 0)))}
        backward = {0: ChainAnswer((('Alice', 1), ('She', 2)))}
        fp, bp = collect_pairs(three_alice_doc, forward, backward)
        assert [(p.anaphor, p.antecedent, p.rank) for p in fp] == [(3, 2, 1), (3, 0, 2)]
        assert [(p.anaphor, p.antecedent, p.rank) for p in bp] == [(2, 0, 1), (3, 0, 2)]

    def test_ungroundable_items_are_counted(self, alice_doc):
        diagnostics = JointDiagnostics()
        fp, _ = collect_pairs(alice_doc, {2: ChainAnswer((('Carol', 0),))}, {}, diagnostics)
        assert fp == []
        assert diagnostics.dropped_ungroundable == 1

    def test_response_for_unknown_mention(self, alice_doc):
        with pytest.raises(DocMismatch):
            collect_pairs(alice_doc, {9: ChainAnswer.none()}, {})

    def test_ground_singletons(self, alice_doc):
        assert ground_singletons(alice_doc, {0: ['bob', 'Nobody'], 1: []}) == {0: [1], 1: []}


class TestJointResolver:
    """End-to-end resolution from responses."""

    def test_backward_evidence_overrides_wrong_forward_answer(self, three_alice_doc):
        doc = three_alice_doc
        responses = [
            _response(doc, TaskMode.QA_FORWARD, 3, '1. "Bob" (S0) 2. "Alice" (S0)'),
            _response(doc, TaskMode.QA_BACKWARD, 2, '1. "She" (S2)'),
            _response(doc, TaskMode.QA_BACKWARD, 0, '1. "Alice" (S1) 2. "She" (S2)'),
        ]
        joint = JointResolver('joint').resolve_document(doc, responses)
        assert dict(joint.pairs)[3] == 0
        fwd_only = JointResolver('fwd_only').resolve_document(doc, responses)
        assert dict(fwd_only.pairs)[3] == 1

    def test_failed_and_unparseable_responses(self, alice_doc):
        failed = ResponseRecord('alice:qa_forward:2', 'alice', TaskMode.QA_FORWARD, 2, None, error='TransportError: x')
        garbled = _response(alice_doc, TaskMode.QA_BACKWARD, 0, 'no idea')
        result = JointResolver().resolve_document(alice_doc, [failed, garbled])
        assert result.diagnostics.failed_responses == 1
        assert result.diagnostics.unparseable == 1
        assert result.predicted == Clustering.all_singletons(3)

    def test_unknown_document(self, alice_doc, candle_doc):
        response = _response(candle_doc, TaskMode.QA_FORWARD, 0, 'None')
        with pytest.raises(DocMismatch):
            JointResolver().resolve_corpus([alice_doc], [response])

    def test_unknown_ablation(self):
        with pytest.raises(JointError):
            JointResolver('everything')

    @pytest.mark.parametrize('ablation', ['joint', 'fwd_bwd', 'fwd_only'])
    def test_zero_noise_recovers_gold(self, synthetic_corpus, ablation):
        records = [r for doc in synthetic_corpus for r in build_prompts(doc, QA_MODES)]
        results = _resolve_suite(synthetic_corpus, records, NoiseSpec(), [ablation])[ablation]
        for doc, result in zip(synthetic_corpus, results):
            assert result.predicted.normalized() == doc.gold.normalized()
        assert _conll_f1(synthetic_corpus, results) == 1.0


class TestNoisySuite:
    """Corrections and ablation ordering under forward-answer noise."""

    def test_joint_beats_forward_only(self, noisy_suite):
        records = [r for doc in noisy_suite for r in build_prompts(doc, QA_MODES, chain_len=2)]
        noise = NoiseSpec(seed=0, p_fwd_swap=0.3, p_bwd_swap=0.0)
        results = _resolve_suite(noisy_suite, records, noise, ['joint', 'fwd_only'])
        gain = _accuracy(noisy_suite, results['joint']) - _accuracy(noisy_suite, results['fwd_only'])
        assert gain >= 0.10

    def test_ablation_ordering_across_seeds(self, noisy_suite):
        docs = noisy_suite[:10]
        records = [r for doc in docs for r in build_prompts(doc, QA_MODES, chain_len=2)]
        ordered_and_strict = 0
        for seed in range(100):
            noise = NoiseSpec(seed=seed, p_fwd_swap=0.3, p_bwd_swap=0.0)
            results = _resolve_suite(docs, records, noise, ['joint', 'fwd_bwd', 'fwd_only'])
            joint, fwd_bwd, fwd_only = (_conll_f1(docs, results[a]) for a in ('joint', 'fwd_bwd', 'fwd_only'))
            if joint >= fwd_bwd >= fwd_only and joint > fwd_only:
                ordered_and_strict += 1
        assert ordered_and_strict >= 90
