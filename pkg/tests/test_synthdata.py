"""Corpus generators checked against independent oracles (lexicon counting,
CFG membership, gazetteer scanning), plus format and determinism contracts."""

import numpy as np
import pytest

from dfkdt3.synthdata import (
    ACCEPT_LABELS,
    CorpusSpec,
    ExtractionSchema,
    NEGATIVE_WORDS,
    POSITIVE_WORDS,
    assert_disjoint,
    build_default_vocab,
    cfg_accepts,
    count_polarity,
    gazetteer_scan,
    gen_acceptability_corpus,
    gen_extraction_corpus,
    gen_general_corpus,
    gen_sentiment_corpus,
    generate_task_corpus,
    gold_from_str,
    gold_to_str,
    make_schema,
    polar_content_fraction,
    read_general,
    read_tsv,
    sentiment_label_from_counts,
    strip_fillers,
    write_general,
    write_splits,
    write_tsv,
)

VOCAB = build_default_vocab()


def test_vocab_covers_all_generated_text():
    spec = CorpusSpec(seed=3, size=60)
    texts = []
    for task in ("sent2", "sent5", "accept", "extract"):
        schema = make_schema(task, VOCAB)
        for ex in generate_task_corpus(task, spec, schema):
            texts.append(ex.input_text)
            texts.append(ex.target_text)
    texts.extend(gen_general_corpus(CorpusSpec(seed=3, size=120)))
    for text in texts:
        for tok in text.split():
            assert tok in VOCAB, tok


# --- sentiment -----------------------------------------------------------------

def test_sentiment_exact_balance():
    corpus = gen_sentiment_corpus(CorpusSpec(seed=7, size=100), 2)
    labels = [ex.gold_label for ex in corpus]
    assert labels.count(0) == 50 and labels.count(1) == 50


def test_sentiment_three_positive_is_very_positive():
    assert sentiment_label_from_counts(3, 0, 5) == 4


def test_sentiment_lexicon_count_oracle():
    for n in (2, 5):
        corpus = gen_sentiment_corpus(CorpusSpec(seed=11, size=200), n)
        for ex in corpus:
            k, m = count_polarity(ex.input_text)
            assert sentiment_label_from_counts(k, m, n) == ex.gold_label


def test_sentiment_splits_balanced():
    corpus = gen_sentiment_corpus(CorpusSpec(seed=9, size=64), 2)
    for split in ("train", "dev", "test"):
        labels = [ex.gold_label for ex in corpus if ex.split == split]
        assert abs(labels.count(0) - labels.count(1)) <= 1
        assert labels


# --- acceptability ----------------------------------------------------------------

def test_acceptability_cfg_membership_oracle():
    corpus = gen_acceptability_corpus(CorpusSpec(seed=5, size=200))
    for ex in corpus:
        assert cfg_accepts(ex.input_text) == bool(ex.gold_label)
    labels = [ex.gold_label for ex in corpus]
    assert labels.count(0) == labels.count(1)


def test_acceptability_target_texts():
    corpus = gen_acceptability_corpus(CorpusSpec(seed=5, size=20))
    for ex in corpus:
        assert ex.target_text == ACCEPT_LABELS[ex.gold_label]


def test_cfg_rejects_manual_corruptions():
    assert cfg_accepts("the film was long")
    assert not cfg_accepts("the the film was long")   # duplicated determiner
    assert not cfg_accepts("the film long")           # dropped verb
    assert not cfg_accepts("film the was long")       # swapped words


# --- extraction --------------------------------------------------------------------

def test_extraction_gazetteer_scan_oracle():
    schema = ExtractionSchema()
    corpus = gen_extraction_corpus(CorpusSpec(seed=13, size=150), schema)
    for ex in corpus:
        assert sorted(gazetteer_scan(ex.input_text)) == sorted(ex.gold_label)


def test_extraction_two_slots_example():
    schema = ExtractionSchema()
    corpus = gen_extraction_corpus(CorpusSpec(seed=13, size=200), schema)
    two_slot = [ex for ex in corpus if len(ex.gold_label) == 2]
    assert two_slot
    for ex in two_slot[:5]:
        parsed = schema.parse_target(ex.target_text)
        assert parsed is not None and len(parsed) == 2


def test_extraction_zero_entities_empty_target():
    schema = ExtractionSchema()
    corpus = gen_extraction_corpus(CorpusSpec(seed=13, size=200), schema)
    empties = [ex for ex in corpus if not ex.gold_label]
    assert empties
    for ex in empties:
        assert ex.target_text == ""
        assert schema.parse_target(ex.target_text) == []


def test_extraction_linearize_parse_round_trip():
    schema = ExtractionSchema()
    corpus = gen_extraction_corpus(CorpusSpec(seed=21, size=120), schema)
    for ex in corpus:
        parsed = schema.parse_target(ex.target_text)
        assert parsed is not None
        assert schema.linearize(parsed) == ex.target_text


def test_extraction_parse_rejects_malformed():
    schema = ExtractionSchema()
    assert schema.parse_target("<sep0> person alice <sep1>") is None
    assert schema.parse_target("<sep0> widget <sep2> alice <sep1>") is None
    assert schema.parse_target("alice visited arden") is None
    assert schema.parse_target("<sep0> person <sep2> <sep1>") is None


def test_extraction_model_input_layout():
    schema = ExtractionSchema()
    out = schema.model_input("alice visited arden")
    assert out == ("<spot> person <spot> location <spot> organization "
                   "<sep2> alice visited arden")


# --- general corpus -------------------------------------------------------------------

def test_general_corpus_size_and_uniqueness():
    q = gen_general_corpus(CorpusSpec(seed=17, size=1000))
    assert len(q) == 1000
    assert len(set(q)) == 1000


def test_general_corpus_polar_dilution():
    q = gen_general_corpus(CorpusSpec(seed=17, size=1000))
    assert polar_content_fraction(q) < 0.10


def test_general_corpus_disjoint_from_tasks():
    q = gen_general_corpus(CorpusSpec(seed=17, size=500))
    for task in ("sent2", "sent5", "accept", "extract"):
        schema = make_schema(task, VOCAB)
        corpus = generate_task_corpus(task, CorpusSpec(seed=17, size=200), schema)
        assert_disjoint(q, corpus)


def test_strip_fillers_removes_only_fillers():
    assert strip_fillers("basically the museum honestly opened") == "the museum opened"
    assert strip_fillers("the film was long") == "the film was long"


# --- schemas ---------------------------------------------------------------------------

def test_class_schema_prefix_free_and_parse():
    schema = make_schema("sent5", VOCAB)
    assert schema.n_classes == 5
    for idx, label in enumerate(schema.labels):
        ids = VOCAB.encode(label) + [1]
        assert schema.parse_decode(ids) == idx
    assert schema.parse_decode(VOCAB.encode("very")) is None
    assert schema.parse_decode([1]) is None


def test_class_schema_model_input():
    schema = make_schema("sent2", VOCAB)
    assert schema.model_input("the film was superb") == \
        "sent2 sentence: the film was superb"
    assert schema.metric == "acc"
    assert make_schema("accept", VOCAB).metric == "mcc"


# --- reproducibility and file formats ----------------------------------------------------

def test_reproducibility_byte_identical(tmp_path):
    for task in ("sent2", "accept", "extract"):
        schema = make_schema(task, VOCAB)
        a = generate_task_corpus(task, CorpusSpec(seed=23, size=80), schema)
        b = generate_task_corpus(task, CorpusSpec(seed=23, size=80), schema)
        pa, pb = tmp_path / "a.tsv", tmp_path / "b.tsv"
        write_tsv(pa, a)
        write_tsv(pb, b)
        assert pa.read_bytes() == pb.read_bytes()
    qa = gen_general_corpus(CorpusSpec(seed=23, size=100))
    qb = gen_general_corpus(CorpusSpec(seed=23, size=100))
    assert qa == qb


def test_tsv_round_trip(tmp_path):
    schema = make_schema("extract", VOCAB)
    corpus = generate_task_corpus("extract", CorpusSpec(seed=29, size=40), schema)
    paths = write_splits(tmp_path, "extract", corpus)
    total = 0
    for split, path in paths.items():
        loaded = read_tsv(path, split)
        total += len(loaded)
        for ex in loaded:
            orig = next(o for o in corpus if o.input_text == ex.input_text)
            assert ex.target_text == orig.target_text
            assert ex.gold_label == orig.gold_label
    assert total == len(corpus)


def test_gold_str_round_trip():
    assert gold_from_str(gold_to_str(3)) == 3
    spans = [("person", 0, 5), ("location", 14, 19)]
    assert gold_from_str(gold_to_str(spans)) == spans
    assert gold_from_str("") == []


def test_general_file_round_trip(tmp_path):
    q = gen_general_corpus(CorpusSpec(seed=31, size=50))
    path = tmp_path / "gen.q.txt"
    write_general(path, q)
    assert read_general(path) == q
