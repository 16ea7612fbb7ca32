# tests/test_templates.py - Prompt Construction, Answer Parsing and Grounding Tests
import json

import pytest

from modules.corpus import plain_text
from modules.docgen import strip_annotations
from modules.synthetic import random_corpus
from modules.templates import (
    ChainAnswer, ContextMode, InstructionSet, PromptRecord, TaskMode,
    build_doc_full, build_doc_iter_step, build_prompts, build_qa_backward, build_qa_forward,
    build_qa_singleton, escape_token, export_sft, ground_mention, parse_chain_answer,
    parse_singleton_answer, render_annotated, sort_records, unescape_token
)
from modules.utils import (
    AssignedLengthMismatch, ConfigError, MissingGoldAnswer, MissingMentions,
    NoMentionsInSentence, StepOutOfRange, Unparseable, read_jsonl
)


class TestQaTemplates:
    """Forward, backward and singleton prompts."""

    def test_forward_prompt_stops_at_mention_sentence(self, three_alice_doc):
        record = build_qa_forward(three_alice_doc, 2)
        assert 'S0: Alice met Bob .' in record.prompt
        assert 'S1: Alice smiled .' in record.prompt
        assert 'S2:' not in record.prompt
        assert record.prompt.endswith('Question: What does "Alice" in the last sentence refer to?')
        assert record.gold_answer == '1. "Alice" (S0)'
        assert record.record_id == 'three:qa_forward:2'

    def test_forward_chain_nearest_first(self, three_alice_doc):
        record = build_qa_forward(three_alice_doc, 3, chain_len=2)
        assert record.gold_answer == '1. "Alice" (S1) 2. "Alice" (S0)'

    def test_forward_discourse_new_is_none(self, alice_doc):
        assert build_qa_forward(alice_doc, 0).gold_answer == 'None'

    def test_chain_len_must_be_positive(self, alice_doc):
        with pytest.raises(ConfigError):
            build_qa_forward(alice_doc, 0, chain_len=0)

    def test_backward_prompt_sees_whole_document(self, alice_doc):
        record = build_qa_backward(alice_doc, 0)
        assert 'S1: She smiled .' in record.prompt
        assert 'Which later phrases refer back to "Alice" in S0?' in record.prompt
        assert record.gold_answer == '1. "She" (S1)'

    def test_singleton_candidates_and_gold(self, alice_doc):
        record = build_qa_singleton(alice_doc, 0)
        assert 'Candidate list: ["Alice", "Bob"]' in record.prompt
        assert json.loads(record.gold_answer) == ['Alice', 'Bob']
        assert build_qa_singleton(alice_doc, 1).gold_answer == 'None'

    def test_singleton_needs_mentions(self, alice_doc):
        with pytest.raises(NoMentionsInSentence):
            build_qa_singleton(alice_doc, 5)

    def test_prompt_without_gold(self, alice_doc):
        bare = type(alice_doc)(alice_doc.doc_key, alice_doc.sentences, alice_doc.mentions)
        assert build_qa_forward(bare, 2).gold_answer is None

    def test_instruction_assets(self, tmp_path, alice_doc):
        (tmp_path / 'qa_forward.txt').write_text('Custom forward instruction.\n', encoding='utf-8')
        instructions = InstructionSet.load(str(tmp_path))
        assert build_qa_forward(alice_doc, 2, instructions=instructions).prompt.startswith(
            'Custom forward instruction.'
        )
        assert instructions.get(TaskMode.QA_BACKWARD) == InstructionSet().get(TaskMode.QA_BACKWARD)


class TestDocumentTemplates:
    """Full-document and iterative-step prompts."""

    def test_full_prompt_has_placeholders(self, alice_doc):
        record = build_doc_full(alice_doc)
        assert record.prompt.endswith('## Alice ## (#) met ## Bob ## (#) .\n## She ## (#) smiled .')
        assert record.gold_answer == '## Alice ## (#1) met ## Bob ## (#2) .\n## She ## (#1) smiled .'

    def test_nested_markup(self, nested_doc):
        gold = build_doc_full(nested_doc).gold_answer
        assert gold == "## ## John ## (#2) 's mother ## (#1) arrived .\n## She ## (#1) greeted ## him ## (#2) ."

    def test_full_needs_mentions(self):
        doc = random_corpus(1, seed=0)[0]
        bare = type(doc)(doc.doc_key, doc.sentences)
        with pytest.raises(MissingMentions):
            build_doc_full(bare)

    def test_gold_strips_back_to_plain_text(self):
        for doc in random_corpus(1000, seed=21):
            if not doc.mentions:
                continue
            stripped = strip_annotations(build_doc_full(doc).gold_answer)
            assert stripped.plain == plain_text(doc)
            assert len(stripped.spans) == doc.num_mentions

    def test_iter_step_segment_and_context(self, alice_doc):
        record = build_doc_iter_step(alice_doc, 2, [1, 2])
        assert 'Context: Alice met Bob .' in record.prompt
        assert record.prompt.endswith('Text: ## She ## (#')
        assert record.gold_answer == '1)'
        assert record.meta['max_id'] == '2'

    def test_iter_step_same_sentence_has_no_context(self, alice_doc):
        record = build_doc_iter_step(alice_doc, 1, [1])
        assert 'Context:' not in record.prompt
        assert record.prompt.endswith('Text: ## Alice ## (#1) met ## Bob ## (#')
        assert record.gold_answer == '2)'

    def test_iter_step_context_sentence_appears_once(self, three_alice_doc):
        record = build_doc_iter_step(three_alice_doc, 3, [1, 2, 1])
        assert 'Context: Alice smiled .' in record.prompt
        assert record.prompt.count('smiled') == 1
        assert record.prompt.endswith('Text: ## She ## (#')

    def test_iter_step_without_context(self, alice_doc):
        record = build_doc_iter_step(alice_doc, 2, [1, 2], ContextMode.NONE)
        assert 'Context:' not in record.prompt
        assert record.prompt.endswith('Text: ## Alice ## (#1) met ## Bob ## (#2) .\n## She ## (#')

    def test_iter_step_errors(self, alice_doc):
        with pytest.raises(StepOutOfRange):
            build_doc_iter_step(alice_doc, 3, [1, 2, 1])
        with pytest.raises(AssignedLengthMismatch):
            build_doc_iter_step(alice_doc, 2, [1])


class TestEscaping:
    """Corpus tokens that look like markup."""

    @pytest.mark.parametrize('token', ['##', '###', '#', '(#', '((#', '(#)', '(#2)', '(#1', '#)', 'plain'])
    def test_escape_is_reversible(self, token):
        assert unescape_token(escape_token(token)) == token

    def test_escaped_tokens_are_not_markers(self):
        assert escape_token('##') == '####'
        assert escape_token('(#2)') == '((#2)'


class TestAnswerParsing:
    """Tolerant parsing of model answers."""

    def test_strict_chain(self):
        answer = parse_chain_answer('Sure! 1. "the lawyer" (S3) 2. "a lawyer" (S1)')
        assert answer.items == (('the lawyer', 3), ('a lawyer', 1))

    def test_items_beyond_chain_len_are_kept(self):
        answer = parse_chain_answer('1. "a" (S0) 2. "b" (S0) 3. "c" (S1)')
        assert len(answer.items) == 3

    def test_loose_chain_without_sentence(self):
        assert parse_chain_answer('1. "Bob"').items == (('Bob', None),)

    def test_mixed_tagged_and_untagged_items(self):
        assert parse_chain_answer('1. "Alice" 2. "Bob" (S0)').items == (('Alice', None), ('Bob', 0))
        assert parse_chain_answer('1. "Bob" (S2)\n2. "Alice"').items == (('Bob', 2), ('Alice', None))

    def test_none_marker(self):
        assert parse_chain_answer('None.').none_marker

    def test_unparseable_chain(self):
        with pytest.raises(Unparseable):
            parse_chain_answer('I cannot tell.')

    def test_render_round_trip(self):
        answer = ChainAnswer((('the doctor', 2), ('the doctor', 0)))
        assert parse_chain_answer(answer.render()) == answer

    def test_singleton_list(self):
        assert parse_singleton_answer('Answer: ["a lamp", "the pilot"]') == ['a lamp', 'the pilot']
        assert parse_singleton_answer("['a wall']") == ['a wall']

    def test_singleton_list_with_apostrophes(self):
        assert parse_singleton_answer("['Bob's car']") == ["Bob's car"]
        assert parse_singleton_answer("['Bob's car', \"the lamp\"]") == ["Bob's car", 'the lamp']

    def test_singleton_none(self):
        assert parse_singleton_answer('None.') == []

    def test_unparseable_singleton(self):
        with pytest.raises(Unparseable):
            parse_singleton_answer('the lamp, maybe')


class TestGrounding:
    """Mapping generated phrases back to mention ids."""

    def test_nearest_preceding_match(self, three_alice_doc):
        assert ground_mention(three_alice_doc, 'alice', None, 3, 'fwd') == 2

    def test_sentence_id_narrows(self, three_alice_doc):
        assert ground_mention(three_alice_doc, 'Alice', 0, 3, 'fwd') == 0

    def test_wrong_sentence_falls_back(self, three_alice_doc):
        assert ground_mention(three_alice_doc, 'Alice', 2, 3, 'fwd') == 2

    def test_backward_direction(self, three_alice_doc):
        assert ground_mention(three_alice_doc, 'She', None, 0, 'bwd') == 3
        assert ground_mention(three_alice_doc, 'She', None, 3, 'bwd') is None

    def test_ungroundable(self, alice_doc):
        assert ground_mention(alice_doc, 'Carol', None, 2, 'fwd') is None

    def test_bad_direction(self, alice_doc):
        with pytest.raises(ValueError):
            ground_mention(alice_doc, 'Alice', None, 2, 'sideways')


class TestDatasets:
    """Record building, ordering and SFT export."""

    def test_build_prompts_counts(self, alice_doc):
        modes = [TaskMode.QA_FORWARD, TaskMode.QA_BACKWARD, TaskMode.QA_SINGLETON,
                 TaskMode.DOC_FULL, TaskMode.DOC_ITER]
        records = build_prompts(alice_doc, modes)
        counts = {mode: sum(1 for r in records if r.mode == mode) for mode in modes}
        assert counts == {
            TaskMode.QA_FORWARD: 3, TaskMode.QA_BACKWARD: 3, TaskMode.QA_SINGLETON: 2,
            TaskMode.DOC_FULL: 1, TaskMode.DOC_ITER: 3
        }

    def test_iter_records_use_gold_history(self, alice_doc):
        records = build_prompts(alice_doc, [TaskMode.DOC_ITER])
        assert [r.gold_answer for r in records] == ['1)', '2)', '1)']
        assert records[2].meta['assigned'] == '1,2'

    def test_record_dict_round_trip(self, alice_doc):
        record = build_qa_forward(alice_doc, 2)
        assert PromptRecord.from_dict(record.to_dict()) == record

    def test_sort_records(self, alice_doc):
        records = build_prompts(alice_doc, [TaskMode.QA_BACKWARD, TaskMode.QA_FORWARD])
        ordered = sort_records(records)
        assert [(r.target, r.mode) for r in ordered[:2]] == [
            (0, TaskMode.QA_FORWARD), (0, TaskMode.QA_BACKWARD)
        ]

    def test_sort_places_sentence_records_at_their_first_mention(self, alice_doc):
        records = build_prompts(alice_doc, [TaskMode.QA_SINGLETON, TaskMode.QA_FORWARD])
        ordered = sort_records(list(reversed(records)))
        assert [(r.mode, r.target) for r in ordered] == [
            (TaskMode.QA_FORWARD, 0), (TaskMode.QA_SINGLETON, 0), (TaskMode.QA_FORWARD, 1),
            (TaskMode.QA_FORWARD, 2), (TaskMode.QA_SINGLETON, 1)
        ]

    def test_export_sft(self, tmp_path, alice_doc):
        records = build_prompts(alice_doc, [TaskMode.QA_FORWARD, TaskMode.DOC_FULL])
        path = str(tmp_path / 'sft.jsonl')
        assert export_sft(records, path) == 4
        rows = read_jsonl(path)
        assert set(rows[0]) == {'id', 'mode', 'prompt', 'response'}
        assert rows[0]['id'] == 'alice:qa_forward:0'
        assert all(row['response'] for row in rows)

    def test_export_requires_gold(self, tmp_path, alice_doc):
        bare = type(alice_doc)(alice_doc.doc_key, alice_doc.sentences, alice_doc.mentions)
        records = build_prompts(bare, [TaskMode.QA_FORWARD])
        with pytest.raises(MissingGoldAnswer):
            export_sft(records, str(tmp_path / 'sft.jsonl'))

    def test_render_partial_ids(self, alice_doc):
        assert render_annotated(alice_doc, {1: 4}) == 'Alice met ## Bob ## (#4) .\nShe smiled .'
