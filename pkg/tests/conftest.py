# tests/conftest.py - Shared Document Fixtures
import os

# keep test runs from writing a rotating log into the working directory
os.environ.setdefault('COREF_LOG_FILE', '')

import pytest

from modules.corpus import assemble_document
from modules.synthetic import generate_corpus


@pytest.fixture
def alice_doc():
    """Alice met Bob . / She smiled .  ->  {Alice, She}, {Bob}"""
    return assemble_document(
        'alice',
        [['Alice', 'met', 'Bob', '.'], ['She', 'smiled', '.']],
        [(0, 0, 0, 'a'), (0, 2, 2, 'b'), (1, 0, 0, 'a')]
    )


@pytest.fixture
def candle_doc():
    """Two singleton mentions: "a candle" and "a wall"."""
    return assemble_document(
        'candle',
        [['There', 'are', 'a', 'candle', 'a', 'wall', '.']],
        [(0, 2, 3, 'c'), (0, 4, 5, 'w')]
    )


@pytest.fixture
def nested_doc():
    """John 's mother arrived . / She greeted him .  with "John" nested in "John 's mother"."""
    return assemble_document(
        'nested',
        [['John', "'s", 'mother', 'arrived', '.'], ['She', 'greeted', 'him', '.']],
        [(0, 0, 2, 'm'), (0, 0, 0, 'j'), (1, 0, 0, 'm'), (1, 2, 2, 'j')]
    )


@pytest.fixture
def three_alice_doc():
    """Alice met Bob . / Alice smiled . / She left .  ->  {Alice, Alice, She}, {Bob}"""
    return assemble_document(
        'three',
        [['Alice', 'met', 'Bob', '.'], ['Alice', 'smiled', '.'], ['She', 'left', '.']],
        [(0, 0, 0, 'a'), (0, 2, 2, 'b'), (1, 0, 0, 'a'), (2, 0, 0, 'a')]
    )


@pytest.fixture(scope='session')
def synthetic_corpus():
    return generate_corpus(20, seed=3)


@pytest.fixture(scope='session')
def noisy_suite():
    return generate_corpus(100, seed=11, prefix='suite')
