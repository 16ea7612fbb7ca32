# modules/synthetic.py - Seeded Synthetic Corpora for Fixtures and Evaluation Suites
import random
from dataclasses import replace
from typing import List, Sequence, Tuple

from modules.corpus import Document, assemble_document
from modules.utils import stable_seed

NOUNS = [
    'lawyer', 'doctor', 'pilot', 'farmer', 'weaver', 'painter', 'baker', 'sailor',
    'nurse', 'judge', 'miner', 'singer', 'tailor', 'clerk', 'driver', 'writer',
    'hunter', 'priest', 'banker', 'poet', 'guard', 'chef', 'mayor', 'scholar'
]
OBJECTS = [
    'lamp', 'candle', 'wall', 'river', 'bridge', 'letter', 'garden', 'window',
    'basket', 'ladder', 'mirror', 'wagon', 'anchor', 'barrel', 'kettle', 'fence'
]
TRANSITIVE = ['met', 'saw', 'called', 'helped', 'thanked', 'visited', 'followed', 'praised']
INTRANSITIVE = ['smiled', 'waited', 'left', 'laughed', 'arrived', 'rested']
DETERMINERS = ['the', 'that', 'this']

# tokens that collide with the annotation markup and must survive escaping
MARKUP_TOKENS = ['##', '###', '#', '(#', '((#', '(#)', '(#2)', '(#1', '#)']
PLAIN_TOKENS = ['the', 'a', 'old', 'man', 'river', 'saw', 'it', 'there', ',', '.', "''", '``', 'Zoë', 'naïve']


def _cluster_sizes(total: int, rng: random.Random) -> List[int]:
    sizes = []
    remaining = total
    while remaining > 0:
        if remaining >= 2 and rng.random() < 0.7:
            size = min(rng.randint(2, 4), remaining)
        else:
            size = 1
        sizes.append(size)
        remaining -= size
    return sizes


def generate_document(doc_key: str, rng: random.Random,
                      min_sentences: int = 6, max_sentences: int = 10) -> Document:
    """
    One synthetic document with gold mentions and clusters.

    Each entity owns a distinct noun, so surfaces never collide across
    entities: clustered entities appear as `the/that/this <noun>`, singletons
    as `a <object>`.
    """
    n_sentences = rng.randint(min_sentences, max_sentences)
    slots = [rng.randint(1, 3) for _ in range(n_sentences)]
    sizes = _cluster_sizes(sum(slots), rng)

    nouns = rng.sample(NOUNS, sum(1 for s in sizes if s > 1))
    objects = rng.sample(OBJECTS, min(len(OBJECTS), sum(1 for s in sizes if s == 1)))
    heads: List[Tuple[str, bool]] = []
    for size in sizes:
        if size > 1:
            heads.append((nouns.pop(), True))
        elif objects:
            heads.append((objects.pop(), False))
        else:
            # more singletons than objects
            heads.append((f"object{len(heads)}", False))

    labels = [entity for entity, size in enumerate(sizes) for _ in range(size)]
    rng.shuffle(labels)

    sentences: List[List[str]] = []
    spans: List[Tuple[int, int, int, int]] = []
    seen = set()
    cursor = 0
    for s, count in enumerate(slots):
        phrases = []
        for entity in labels[cursor:cursor + count]:
            noun, clustered = heads[entity]
            if not clustered:
                phrases.append((['a', noun], entity))
            elif entity not in seen:
                phrases.append((['the', noun], entity))
            else:
                phrases.append(([rng.choice(DETERMINERS), noun], entity))
            seen.add(entity)
        cursor += count

        tokens: List[str] = []
        if s > 0 and rng.random() < 0.3:
            tokens.extend(['Later', ','])

        def place(words: Sequence[str], entity: int):
            spans.append((s, len(tokens), len(tokens) + len(words) - 1, entity))
            tokens.extend(words)

        place(*phrases[0])
        if len(phrases) == 1:
            tokens.append(rng.choice(INTRANSITIVE))
        else:
            tokens.append(rng.choice(TRANSITIVE))
            place(*phrases[1])
            if len(phrases) == 3:
                tokens.append('near')
                place(*phrases[2])
        tokens.append('.')
        sentences.append(tokens)

    return assemble_document(doc_key, sentences, spans)


def generate_corpus(n_docs: int, seed: int, prefix: str = 'synth',
                    min_sentences: int = 6, max_sentences: int = 10) -> List[Document]:
    """`n_docs` documents; document i depends only on (seed, i)."""
    return [
        generate_document(
            f"{prefix}_{i:04d}",
            random.Random(stable_seed(seed, i)),
            min_sentences,
            max_sentences
        )
        for i in range(n_docs)
    ]


def random_document(doc_key: str, rng: random.Random, max_sentences: int = 4,
                    max_tokens: int = 8, with_flags: bool = False) -> Document:
    """
    Randomized document for format round trips.

    Tokens include markup look-alikes; spans are laminar (nested or disjoint)
    and may share a cluster with spans they enclose.
    """
    vocabulary = PLAIN_TOKENS + MARKUP_TOKENS
    sentences = [
        [rng.choice(vocabulary) for _ in range(rng.randint(1, max_tokens))]
        for _ in range(rng.randint(1, max_sentences))
    ]
    spans: List[Tuple[int, int, int, int]] = []
    for s, sentence in enumerate(sentences):
        accepted: List[Tuple[int, int]] = []
        for _ in range(rng.randint(0, 4)):
            start = rng.randrange(len(sentence))
            end = rng.randrange(start, len(sentence))
            laminar = all(
                end < a or start > b or (a <= start and end <= b) or (start <= a and b <= end)
                for a, b in accepted
            )
            if laminar and (start, end) not in accepted:
                accepted.append((start, end))
                spans.append((s, start, end, rng.randint(1, 4)))

    doc = assemble_document(doc_key, sentences, spans)
    if with_flags and doc.mentions:
        mentions = [
            replace(m, non_referring=rng.random() < 0.2, split_antecedent=rng.random() < 0.2)
            for m in doc.mentions
        ]
        doc = Document(doc.doc_key, doc.sentences, mentions, doc.gold, doc.predicted)
    return doc


def random_corpus(n_docs: int, seed: int, with_flags: bool = False) -> List[Document]:
    rng = random.Random(seed)
    return [random_document(f"rand_{i:04d}", rng, with_flags=with_flags) for i in range(n_docs)]
