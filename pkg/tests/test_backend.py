# tests/test_backend.py - Completion Backend and Batch Runner Tests
import json

import pytest
import requests

from modules.backend import (
    BackendConfig, MockBackend, NoiseSpec, RemoteBackend, ResponseRecord,
    complete, make_backend, mock_answer, run_batch
)
from modules.docgen import strip_annotations
from modules.templates import PromptRecord, TaskMode, build_doc_full, build_prompts, parse_chain_answer
from modules.utils import AuthMissing, BadResponse, ConfigError, TransportError

ALL_MODES = [TaskMode.QA_FORWARD, TaskMode.QA_BACKWARD, TaskMode.QA_SINGLETON,
             TaskMode.DOC_FULL, TaskMode.DOC_ITER]


class FakeResponse:
    def __init__(self, status_code, payload=None, text=''):
        self.status_code = status_code
        self._payload = payload
        self.text = text or json.dumps(payload)

    def json(self):
        if self._payload is None:
            raise ValueError('no JSON body')
        return self._payload


class FakeSession:
    """Replays queued responses (or raises queued exceptions) for each POST."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.headers = {}
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, json, timeout))
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def _completion(text):
    return FakeResponse(200, {'choices': [{'message': {'content': text}}]})


@pytest.fixture
def remote_cfg(monkeypatch):
    monkeypatch.setenv('COREF_TEST_KEY', 'secret')
    monkeypatch.setattr('modules.backend.time.sleep', lambda seconds: None)
    return BackendConfig(base_url='http://llm.test/v1/', api_key_env='COREF_TEST_KEY',
                         max_retries=2, backoff_base_s=0.0)


class TestNoiseSpec:
    """Parsing and validation of mock corruption settings."""

    def test_parse(self):
        noise = NoiseSpec.parse('seed=7, p_fwd_swap=0.3,p_id_err=1')
        assert noise == NoiseSpec(seed=7, p_fwd_swap=0.3, p_id_err=1.0)

    def test_empty_is_zero_noise(self):
        assert NoiseSpec.parse('') == NoiseSpec()

    @pytest.mark.parametrize('text', ['p_typo=0.1', 'seed=abc', 'p_dup', 'p_drop=1.5'])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            NoiseSpec.parse(text)


class TestMockBackend:
    """Gold-backed answers and their corruptions."""

    def test_zero_noise_answers_equal_gold(self, synthetic_corpus):
        for doc in synthetic_corpus:
            for record in build_prompts(doc, ALL_MODES):
                assert mock_answer(doc, record, NoiseSpec()) == record.gold_answer

    def test_forward_swap_replaces_nearest_item(self, three_alice_doc):
        record = build_prompts(three_alice_doc, [TaskMode.QA_FORWARD])[3]
        answer = parse_chain_answer(mock_answer(three_alice_doc, record, NoiseSpec(p_fwd_swap=1.0)))
        assert answer.items == (('Bob', 0), ('Alice', 0))

    def test_none_flip_on_discourse_new(self, alice_doc):
        record = build_prompts(alice_doc, [TaskMode.QA_FORWARD])[1]
        text = mock_answer(alice_doc, record, NoiseSpec(p_none_flip=1.0))
        assert text == '1. "Alice" (S0)'

    def test_duplicated_mention_text(self, candle_doc):
        record = build_doc_full(candle_doc)
        text = mock_answer(candle_doc, record, NoiseSpec(seed=1, p_dup=1.0))
        plain = strip_annotations(text).plain
        assert plain in ('There are a candle a candle a wall .', 'There are a candle a wall a wall .')

    def test_dropped_token(self, candle_doc):
        record = build_doc_full(candle_doc)
        plain = strip_annotations(mock_answer(candle_doc, record, NoiseSpec(p_drop=1.0))).plain
        assert len(plain.split()) == 6
        assert 'a candle a wall' in plain

    def test_answers_depend_only_on_seed_and_record(self, synthetic_corpus):
        doc = synthetic_corpus[0]
        records = build_prompts(doc, [TaskMode.QA_FORWARD])
        noise = NoiseSpec(seed=4, p_fwd_swap=0.5, p_none_flip=0.2)
        forward = [mock_answer(doc, r, noise) for r in records]
        backward = [mock_answer(doc, r, noise) for r in reversed(records)]
        assert forward == backward[::-1]

    def test_unknown_prompt(self, alice_doc):
        backend = MockBackend([alice_doc])
        [response] = run_batch(backend, build_prompts(alice_doc, [TaskMode.DOC_FULL]))
        assert not response.failed
        backend_without_docs = MockBackend([])
        [response] = run_batch(backend_without_docs, build_prompts(alice_doc, [TaskMode.DOC_FULL]))
        assert response.failed
        assert response.raw_text is None

    def test_registry_lookup_by_prompt(self, alice_doc):
        backend = MockBackend([alice_doc])
        record = build_doc_full(alice_doc)
        backend.register([record])
        assert backend.complete(record.prompt) == record.gold_answer

    def test_make_backend_mock_needs_documents(self):
        with pytest.raises(ConfigError):
            make_backend(BackendConfig(kind='mock'))

    def test_complete_from_config(self, alice_doc):
        record = build_prompts(alice_doc, [TaskMode.QA_FORWARD])[2]
        text = complete(BackendConfig(kind='mock'), record.prompt, record, documents=[alice_doc])
        assert text == record.gold_answer == '1. "Alice" (S0)'

    def test_complete_remote_needs_key(self, monkeypatch):
        monkeypatch.delenv('COREF_ABSENT_KEY', raising=False)
        with pytest.raises(AuthMissing):
            complete(BackendConfig(api_key_env='COREF_ABSENT_KEY'), 'Who is she?')


class TestRunBatch:
    """Ordering, determinism and error markers."""

    def test_parallelism_does_not_change_output(self, synthetic_corpus):
        records = [r for doc in synthetic_corpus for r in build_prompts(doc, ALL_MODES)]
        noise = NoiseSpec(seed=3, p_fwd_swap=0.3, p_bwd_swap=0.2, p_none_flip=0.1,
                          p_dup=0.3, p_drop=0.3, p_id_err=0.3)

        def dump(parallelism):
            responses = run_batch(MockBackend(synthetic_corpus, noise), records, parallelism)
            return '\n'.join(json.dumps(r.to_dict()) for r in responses)

        assert dump(1) == dump(16)

    def test_results_keep_input_order(self, alice_doc):
        records = build_prompts(alice_doc, ALL_MODES)
        responses = run_batch(MockBackend([alice_doc]), records, parallelism=8)
        assert [r.record_id for r in responses] == [r.record_id for r in records]

    def test_unknown_target_is_marked_failed(self, alice_doc):
        good = build_prompts(alice_doc, [TaskMode.QA_FORWARD])
        bad = PromptRecord('alice:qa_forward:9', 'alice', TaskMode.QA_FORWARD, 9, 'Who is mention 9?')
        responses = run_batch(MockBackend([alice_doc]), good + [bad], parallelism=2)
        assert [r.failed for r in responses] == [False, False, False, True]
        assert responses[-1].error.startswith('UnknownMention')

    def test_unexpected_exception_does_not_abort_batch(self, alice_doc):
        class FlakyBackend(MockBackend):
            def generate(self, prompt, record=None, max_tokens=None):
                if record.target == 1:
                    raise RuntimeError('worker crashed')
                return super().generate(prompt, record, max_tokens)

        records = build_prompts(alice_doc, [TaskMode.QA_FORWARD])
        responses = run_batch(FlakyBackend([alice_doc]), records, parallelism=3)
        assert [r.failed for r in responses] == [False, True, False]
        assert responses[1].error == 'RuntimeError: worker crashed'
        assert responses[2].raw_text == '1. "Alice" (S0)'

    def test_empty_batch(self):
        assert run_batch(MockBackend([]), []) == []

    def test_response_dict_round_trip(self, alice_doc):
        [response] = run_batch(MockBackend([alice_doc]), build_prompts(alice_doc, [TaskMode.DOC_FULL]))
        assert ResponseRecord.from_dict(response.to_dict()) == response


class TestRemoteBackend:
    """HTTP client behaviour against a fake session."""

    def test_missing_key(self, monkeypatch):
        monkeypatch.delenv('COREF_ABSENT_KEY', raising=False)
        with pytest.raises(AuthMissing):
            RemoteBackend(BackendConfig(api_key_env='COREF_ABSENT_KEY'))

    def test_success(self, remote_cfg):
        session = FakeSession([_completion('1. "Bob" (S0)')])
        backend = RemoteBackend(remote_cfg, session=session)
        text, attempts = backend.generate('prompt')
        assert (text, attempts) == ('1. "Bob" (S0)', 1)
        url, payload, _ = session.calls[0]
        assert url == 'http://llm.test/v1/chat/completions'
        assert payload['messages'] == [{'role': 'user', 'content': 'prompt'}]
        assert session.headers['Authorization'] == 'Bearer secret'

    def test_retries_rate_limit_and_server_errors(self, remote_cfg):
        session = FakeSession([
            FakeResponse(429, text='slow down'),
            requests.exceptions.Timeout(),
            _completion('None')
        ])
        text, attempts = RemoteBackend(remote_cfg, session=session).generate('prompt')
        assert (text, attempts) == ('None', 3)

    def test_gives_up_after_max_retries(self, remote_cfg):
        session = FakeSession([FakeResponse(503, text='down')] * 3)
        with pytest.raises(TransportError) as excinfo:
            RemoteBackend(remote_cfg, session=session).generate('prompt')
        assert excinfo.value.attempts == 3

    def test_client_error_is_not_retried(self, remote_cfg):
        session = FakeSession([FakeResponse(400, text='bad request'), _completion('never')])
        with pytest.raises(TransportError):
            RemoteBackend(remote_cfg, session=session).generate('prompt')
        assert len(session.calls) == 1

    def test_bad_body(self, remote_cfg):
        session = FakeSession([FakeResponse(200, {'unexpected': True})])
        with pytest.raises(BadResponse):
            RemoteBackend(remote_cfg, session=session).generate('prompt')

    def test_failed_record_in_batch(self, remote_cfg, alice_doc):
        session = FakeSession([FakeResponse(401, text='no')])
        backend = RemoteBackend(remote_cfg, session=session)
        [response] = run_batch(backend, build_prompts(alice_doc, [TaskMode.DOC_FULL]), parallelism=1)
        assert response.failed
        assert response.error.startswith('TransportError')
