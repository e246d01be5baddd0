"""Deterministic synthetic corpora: sentiment (2/5-class), linguistic
acceptability, slot extraction, and the label-diluted general-domain corpus,
plus the text linearizations and TSV file formats.

Every generator is a pure function of its CorpusSpec, so identical specs
produce byte-identical corpus files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compute import RngStream
from .textmodel import EOS_TOKEN, PAD_TOKEN, UNK_TOKEN, Vocab

# ---------------------------------------------------------------------------
# word lists (single whitespace-free tokens; polar lexicons are disjoint from
# every other group so a lexicon counter can recompute labels independently)
# ---------------------------------------------------------------------------

SPOT_TOKEN = "<spot>"
SEP0_TOKEN = "<sep0>"
SEP1_TOKEN = "<sep1>"
SEP2_TOKEN = "<sep2>"
MARKER_TOKENS = [SPOT_TOKEN, SEP0_TOKEN, SEP1_TOKEN, SEP2_TOKEN]

PREFIX_TOKENS = ["sent2", "sentence:", "sentiment:", "accept"]
COMMANDER_TOKENS = ["summarize:", "adapt:", "expand:", "paraphrase:"]
LABEL_WORDS = ["negative", "positive", "very", "neutral", "acceptable",
               "unacceptable"]
SLOT_TYPE_WORDS = ["person", "location", "organization"]

POSITIVE_WORDS = [
    "wonderful", "delightful", "superb", "excellent", "charming", "brilliant",
    "graceful", "inspired", "lovely", "splendid", "refreshing", "enjoyable",
    "thrilling", "flawless", "radiant", "heartfelt", "masterful", "vibrant",
    "stunning", "gripping",
]
NEGATIVE_WORDS = [
    "dreadful", "awful", "tedious", "boring", "clumsy", "dismal", "bland",
    "painful", "sloppy", "hollow", "lifeless", "grating", "muddled", "shallow",
    "tiresome", "dreary", "annoying", "broken", "messy", "pointless",
]
NEUTRAL_ADJECTIVES = [
    "long", "short", "new", "old", "early", "late", "quiet", "loud", "small",
    "large", "local", "modern", "formal", "common", "recent", "usual",
]
NOUNS = [
    "film", "movie", "book", "story", "song", "meal", "game", "show", "plot",
    "cast", "dinner", "concert", "garden", "house", "phone", "device",
    "report", "essay", "review", "market", "team", "crew", "design", "lecture",
]
LINK_VERBS = ["was", "seemed", "felt", "looked", "sounded", "proved",
              "stayed", "remained"]
DETERMINERS = ["the", "a", "this", "that"]
ADVERBS = ["quite", "rather", "truly", "really", "fairly", "nearly"]
CONNECTORS = ["and", "but"]
PREPOSITIONS = ["near", "after", "before", "behind", "beside", "under"]
FILLERS = ["basically", "actually", "honestly", "literally", "somehow",
           "perhaps", "indeed", "anyway"]
TOPIC_NOUNS = [
    "museum", "river", "bridge", "railway", "village", "season", "harvest",
    "engine", "library", "festival", "journal", "weather", "forest", "border",
    "valley", "castle", "temple", "mountain", "harbor", "orchard", "workshop",
    "council", "archive", "garrison", "quarry", "meadow", "lantern", "ledger",
    "compass", "granary",
]
TOPIC_VERBS = ["opened", "closed", "moved", "began", "ended", "grew", "stood",
               "appeared", "returned", "settled"]
PERSON_NAMES = ["alice", "bruno", "carla", "denis", "elena", "felix", "greta",
                "horst", "irene", "jonas", "karin", "lukas"]
LOCATION_NAMES = ["arden", "brora", "calera", "dovern", "elsmere", "farrow",
                  "gilwick", "hartsel", "ilmore", "jurby", "keld", "lorton"]
ORG_NAMES = ["acmecorp", "boltworks", "cedarlab", "dynatech", "eastfield",
             "fernbank", "glowmart", "hexagon", "ironside", "jetline",
             "kiterow", "lumeno"]

FUNCTION_WORDS = set(DETERMINERS) | set(CONNECTORS) | set(PREPOSITIONS) \
    | set(FILLERS) | set(ADVERBS)
POLAR_WORDS = set(POSITIVE_WORDS) | set(NEGATIVE_WORDS)


def build_default_vocab() -> Vocab:
    tokens = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN]
    for group in (MARKER_TOKENS, PREFIX_TOKENS, COMMANDER_TOKENS, LABEL_WORDS,
                  SLOT_TYPE_WORDS, POSITIVE_WORDS, NEGATIVE_WORDS,
                  NEUTRAL_ADJECTIVES, NOUNS, LINK_VERBS, DETERMINERS, ADVERBS,
                  CONNECTORS, PREPOSITIONS, FILLERS, TOPIC_NOUNS, TOPIC_VERBS,
                  PERSON_NAMES, LOCATION_NAMES, ORG_NAMES,
                  _EXTRACT_EXTRA_WORDS):
        tokens.extend(group)
    return Vocab(tokens)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    seed: int
    size: int
    grammar: str = "default"
    polar_mix: float = 0.08  # for Q: fraction of sentences given one polar word


@dataclass
class LabeledExample:
    input_text: str
    target_text: str
    gold_label: object  # class index, or list of (type, start, end) spans
    split: str


@dataclass
class ClassSchema:
    task_prefix: str
    labels: list[str]
    label_token_ids: list[list[int]]
    metric: str  # "acc" or "mcc"

    @classmethod
    def build(cls, vocab: Vocab, task_prefix: str, labels: list[str],
              metric: str) -> "ClassSchema":
        seqs = [vocab.encode(lab) for lab in labels]
        for i, a in enumerate(seqs):
            if any(tok not in vocab for tok in labels[i].split()):
                raise ValueError(f"label {labels[i]!r} not in vocabulary")
            for j, b in enumerate(seqs):
                if i != j and len(a) <= len(b) and b[:len(a)] == a:
                    raise ValueError(
                        f"label {labels[i]!r} is a token prefix of {labels[j]!r}")
        return cls(task_prefix, list(labels), seqs, metric)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def max_label_tokens(self) -> int:
        return max(len(s) for s in self.label_token_ids)

    def model_input(self, sentence: str) -> str:
        return f"{self.task_prefix} {sentence}"

    def parse_decode(self, ids) -> int | None:
        """Class index whose token sequence exactly matches the decode
        (EOS-trimmed), or None."""
        trimmed = []
        for i in ids:
            i = int(i)
            if i == 1:  # EOS
                break
            if i == 0:  # PAD
                continue
            trimmed.append(i)
        for j, seq in enumerate(self.label_token_ids):
            if trimmed == seq:
                return j
        return None


@dataclass
class ExtractionSchema:
    slot_types: list[str] = field(default_factory=lambda: list(SLOT_TYPE_WORDS))
    metric: str = "f1"

    def model_input(self, sentence: str) -> str:
        head = " ".join(f"{SPOT_TOKEN} {t}" for t in self.slot_types)
        return f"{head} {SEP2_TOKEN} {sentence}"

    def linearize(self, typed_surfaces: list[tuple[str, str]]) -> str:
        parts = [f"{SEP0_TOKEN} {t} {SEP2_TOKEN} {surface} {SEP1_TOKEN}"
                 for t, surface in typed_surfaces]
        return " ".join(parts)

    def parse_target(self, text: str) -> list[tuple[str, str]] | None:
        """Inverse of linearize; None when the text is not well-formed."""
        toks = text.split()
        out = []
        i = 0
        while i < len(toks):
            if toks[i] != SEP0_TOKEN or i + 1 >= len(toks):
                return None
            slot_type = toks[i + 1]
            if slot_type not in self.slot_types or i + 2 >= len(toks) \
                    or toks[i + 2] != SEP2_TOKEN:
                return None
            j = i + 3
            surface = []
            while j < len(toks) and toks[j] != SEP1_TOKEN:
                if toks[j] in MARKER_TOKENS:
                    return None
                surface.append(toks[j])
                j += 1
            if j >= len(toks) or not surface:
                return None
            out.append((slot_type, " ".join(surface)))
            i = j + 1
        return out


SENT2_LABELS = ["negative", "positive"]
SENT5_LABELS = ["very negative", "negative", "neutral", "positive",
                "very positive"]
ACCEPT_LABELS = ["unacceptable", "acceptable"]

CLASSIFICATION_TASKS = ("sent2", "sent5", "accept")
ALL_TASKS = CLASSIFICATION_TASKS + ("extract",)


def make_schema(task_id: str, vocab: Vocab):
    if task_id == "sent2":
        return ClassSchema.build(vocab, "sent2 sentence:", SENT2_LABELS, "acc")
    if task_id == "sent5":
        return ClassSchema.build(vocab, "sentiment:", SENT5_LABELS, "acc")
    if task_id == "accept":
        return ClassSchema.build(vocab, "accept sentence:", ACCEPT_LABELS, "mcc")
    if task_id == "extract":
        return ExtractionSchema()
    raise ValueError(f"unknown task id {task_id!r}")


# ---------------------------------------------------------------------------
# split assignment: first half train, next quarter dev, rest test; classes
# cycle round-robin so every split stays balanced within one example
# ---------------------------------------------------------------------------

def _split_for(i: int, size: int) -> str:
    n_train = size // 2
    n_dev = size // 4
    if i < n_train:
        return "train"
    if i < n_train + n_dev:
        return "dev"
    return "test"


def _pick(rng: RngStream, items):
    return items[int(rng.integers(0, len(items)))]


# ---------------------------------------------------------------------------
# sentiment
# ---------------------------------------------------------------------------

_POLARITY_MENU_2 = {
    0: [(0, 1), (0, 2), (0, 3)],
    1: [(1, 0), (2, 0), (3, 0)],
}
_POLARITY_MENU_5 = {
    0: [(0, 2), (0, 3)],
    1: [(0, 1)],
    2: [(0, 0)],
    3: [(1, 0)],
    4: [(2, 0), (3, 0)],
}


def sentiment_label_from_counts(n_pos: int, n_neg: int, n_classes: int) -> int:
    """Independent labeling rule: sign bucket of (n_pos - n_neg)."""
    delta = n_pos - n_neg
    if n_classes == 2:
        if delta == 0:
            raise ValueError("2-class sentences must not tie")
        return 1 if delta > 0 else 0
    if delta <= -2:
        return 0
    if delta >= 2:
        return 4
    return delta + 2


def count_polarity(sentence: str) -> tuple[int, int]:
    toks = sentence.split()
    return (sum(t in POSITIVE_WORDS for t in toks),
            sum(t in NEGATIVE_WORDS for t in toks))


def _sentiment_sentence(rng: RngStream, n_pos: int, n_neg: int) -> str:
    total_polar = n_pos + n_neg
    lo = max(0, 2 - total_polar)
    hi = 4 - total_polar
    n_neu = int(rng.integers(lo, hi + 1)) if hi >= lo else 0
    slots = ["p"] * n_pos + ["n"] * n_neg + ["u"] * n_neu
    order = rng.permutation(len(slots))
    phrases = []
    for idx in order:
        kind = slots[int(idx)]
        word = _pick(rng, POSITIVE_WORDS if kind == "p"
                     else NEGATIVE_WORDS if kind == "n" else NEUTRAL_ADJECTIVES)
        if rng.uniform() < 0.35:
            word = f"{_pick(rng, ADVERBS)} {word}"
        phrases.append(word)
    body = phrases[0]
    for ph in phrases[1:]:
        body = f"{body} {_pick(rng, CONNECTORS)} {ph}"
    det = _pick(rng, DETERMINERS)
    noun = _pick(rng, NOUNS)
    verb = _pick(rng, LINK_VERBS)
    return f"{det} {noun} {verb} {body}"


def gen_sentiment_corpus(spec: CorpusSpec, n_classes: int) -> list[LabeledExample]:
    if n_classes not in (2, 5):
        raise ValueError("n_classes must be 2 or 5")
    if spec.size < 1:
        raise ValueError("corpus size must be >= 1")
    rng = RngStream(spec.seed).fork(f"sentiment{n_classes}")
    menu = _POLARITY_MENU_2 if n_classes == 2 else _POLARITY_MENU_5
    labels = SENT2_LABELS if n_classes == 2 else SENT5_LABELS
    seen = set()
    out = []
    for i in range(spec.size):
        cls = i % n_classes
        for _ in range(400):
            n_pos, n_neg = _pick(rng, menu[cls])
            sentence = _sentiment_sentence(rng, n_pos, n_neg)
            if sentence not in seen:
                break
        seen.add(sentence)
        assert sentiment_label_from_counts(*count_polarity(sentence), n_classes) == cls
        out.append(LabeledExample(sentence, labels[cls], cls, _split_for(i, spec.size)))
    return out


# ---------------------------------------------------------------------------
# acceptability: a small CFG plus single corruptions
# ---------------------------------------------------------------------------

_POS_SETS = {
    "DET": set(DETERMINERS),
    "N": set(NOUNS),
    "ADJ": set(NEUTRAL_ADJECTIVES),
    "ADV": set(ADVERBS),
    "V": set(LINK_VERBS),
    "P": set(PREPOSITIONS),
}


def _parse_np(toks: list[str], i: int) -> list[int]:
    """End positions of an NP starting at i: DET N | DET ADJ N."""
    ends = []
    if i < len(toks) and toks[i] in _POS_SETS["DET"]:
        if i + 1 < len(toks) and toks[i + 1] in _POS_SETS["N"]:
            ends.append(i + 2)
        if (i + 2 < len(toks) and toks[i + 1] in _POS_SETS["ADJ"]
                and toks[i + 2] in _POS_SETS["N"]):
            ends.append(i + 3)
    return ends


def _parse_vp(toks: list[str], i: int) -> list[int]:
    """End positions of a VP starting at i:
    V ADJ | V ADV ADJ | V NP | V P NP."""
    if i >= len(toks) or toks[i] not in _POS_SETS["V"]:
        return []
    ends = []
    j = i + 1
    if j < len(toks) and toks[j] in _POS_SETS["ADJ"]:
        ends.append(j + 1)
    if (j + 1 < len(toks) and toks[j] in _POS_SETS["ADV"]
            and toks[j + 1] in _POS_SETS["ADJ"]):
        ends.append(j + 2)
    ends.extend(_parse_np(toks, j))
    if j < len(toks) and toks[j] in _POS_SETS["P"]:
        ends.extend(_parse_np(toks, j + 1))
    return ends


def cfg_accepts(sentence: str) -> bool:
    """Membership test for the acceptability grammar (S -> NP VP)."""
    toks = sentence.split()
    for mid in _parse_np(toks, 0):
        if any(end == len(toks) for end in _parse_vp(toks, mid)):
            return True
    return False


def _cfg_sentence(rng: RngStream) -> str:
    def np_phrase():
        det = _pick(rng, DETERMINERS)
        if rng.uniform() < 0.4:
            return f"{det} {_pick(rng, NEUTRAL_ADJECTIVES)} {_pick(rng, NOUNS)}"
        return f"{det} {_pick(rng, NOUNS)}"

    subject = np_phrase()
    verb = _pick(rng, LINK_VERBS)
    form = int(rng.integers(0, 4))
    if form == 0:
        vp = f"{verb} {_pick(rng, NEUTRAL_ADJECTIVES)}"
    elif form == 1:
        vp = f"{verb} {_pick(rng, ADVERBS)} {_pick(rng, NEUTRAL_ADJECTIVES)}"
    elif form == 2:
        vp = f"{verb} {np_phrase()}"
    else:
        vp = f"{verb} {_pick(rng, PREPOSITIONS)} {np_phrase()}"
    return f"{subject} {vp}"


def _corrupt(rng: RngStream, sentence: str) -> str | None:
    """One corruption guaranteed (by re-check) to leave the language."""
    toks = sentence.split()
    mode = int(rng.integers(0, 3))
    if mode == 0:  # swap adjacent words
        i = int(rng.integers(0, len(toks) - 1))
        toks = toks[:i] + [toks[i + 1], toks[i]] + toks[i + 2:]
    elif mode == 1:  # drop the verb
        toks = [t for t in toks if t not in _POS_SETS["V"]]
    else:  # duplicate a determiner
        for i, t in enumerate(toks):
            if t in _POS_SETS["DET"]:
                toks = toks[:i + 1] + [t] + toks[i + 1:]
                break
    candidate = " ".join(toks)
    if candidate == sentence or cfg_accepts(candidate):
        return None
    return candidate


def gen_acceptability_corpus(spec: CorpusSpec) -> list[LabeledExample]:
    if spec.size < 1:
        raise ValueError("corpus size must be >= 1")
    rng = RngStream(spec.seed).fork("acceptability")
    seen = set()
    out = []
    for i in range(spec.size):
        cls = i % 2  # 0 unacceptable, 1 acceptable
        for _ in range(400):
            sentence = _cfg_sentence(rng)
            if cls == 0:
                corrupted = _corrupt(rng, sentence)
                if corrupted is None:
                    continue
                sentence = corrupted
            if sentence not in seen:
                break
        seen.add(sentence)
        assert cfg_accepts(sentence) == bool(cls)
        out.append(LabeledExample(sentence, ACCEPT_LABELS[cls], cls,
                                  _split_for(i, spec.size)))
    return out


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

_GAZETTEERS = {
    "person": PERSON_NAMES,
    "location": LOCATION_NAMES,
    "organization": ORG_NAMES,
}

# template: list of literal words; slot markers are (type,) tuples
_EXTRACT_TEMPLATES = [
    [("person",), "visited", ("location",), "after", "the", "harvest"],
    [("person",), "joined", ("organization",), "near", ("location",)],
    ["the", ("organization",), "office", "opened", "near", ("location",)],
    [("person",), "met", ("person",), "before", "the", "festival"],
    [("organization",), "hired", ("person",), "this", "season"],
    ["the", "council", "praised", ("person",), "and", ("organization",)],
    [("location",), "welcomed", ("person",), "during", "the", "festival"],
    ["the", "museum", "stood", "near", "the", "river"],
    ["the", "railway", "reached", "the", "valley", "that", "season"],
]
_EXTRACT_EXTRA_WORDS = ["visited", "joined", "met", "hired", "praised",
                        "welcomed", "reached", "during", "office"]


def gazetteer_scan(sentence: str) -> list[tuple[str, int, int]]:
    """Independent span recovery: scan for gazetteer tokens, char-exact."""
    spans = []
    pos = 0
    for tok in sentence.split():
        start = sentence.index(tok, pos)
        for slot_type, names in _GAZETTEERS.items():
            if tok in names:
                spans.append((slot_type, start, start + len(tok)))
        pos = start + len(tok)
    return spans


def gen_extraction_corpus(spec: CorpusSpec,
                          schema: ExtractionSchema) -> list[LabeledExample]:
    if spec.size < 1:
        raise ValueError("corpus size must be >= 1")
    rng = RngStream(spec.seed).fork("extraction")
    seen = set()
    out = []
    for i in range(spec.size):
        for _ in range(400):
            template = _pick(rng, _EXTRACT_TEMPLATES)
            words = []
            used = set()
            typed = []
            for item in template:
                if isinstance(item, tuple):
                    names = _GAZETTEERS[item[0]]
                    for _ in range(50):
                        name = _pick(rng, names)
                        if name not in used:
                            break
                    used.add(name)
                    typed.append((item[0], name))
                    words.append(name)
                else:
                    words.append(item)
            sentence = " ".join(words)
            if sentence not in seen:
                break
        seen.add(sentence)
        spans = []
        for slot_type, surface in typed:
            start = sentence.index(surface)
            spans.append((slot_type, start, start + len(surface)))
        target = schema.linearize(typed)
        out.append(LabeledExample(sentence, target, spans, _split_for(i, spec.size)))
    return out


# ---------------------------------------------------------------------------
# general-domain corpus Q
# ---------------------------------------------------------------------------

def _general_sentence(rng: RngStream, polar_mix: float) -> str:
    form = int(rng.integers(0, 5))
    if form == 0:
        words = ["the", _pick(rng, TOPIC_NOUNS), _pick(rng, TOPIC_VERBS),
                 _pick(rng, PREPOSITIONS), "the", _pick(rng, TOPIC_NOUNS)]
    elif form == 1:
        words = ["the", _pick(rng, TOPIC_NOUNS), _pick(rng, TOPIC_VERBS),
                 _pick(rng, PREPOSITIONS), "the", _pick(rng, TOPIC_NOUNS),
                 _pick(rng, CONNECTORS), "the", _pick(rng, TOPIC_NOUNS),
                 _pick(rng, TOPIC_VERBS)]
    else:
        # task-shaped but label-neutral sentences dominate Q: the transfer
        # generator's raw material should be morphable into task text
        words = [_pick(rng, DETERMINERS), _pick(rng, NOUNS),
                 _pick(rng, LINK_VERBS)]
        n_adj = 2 + int(rng.integers(0, 2))
        for k in range(n_adj):
            if k:
                words.append(_pick(rng, CONNECTORS))
            if rng.uniform() < 0.25:
                words.append(_pick(rng, ADVERBS))
            words.append(_pick(rng, NEUTRAL_ADJECTIVES))
    if rng.uniform() < polar_mix:
        lex = POSITIVE_WORDS if rng.uniform() < 0.5 else NEGATIVE_WORDS
        slot = int(rng.integers(1, len(words) + 1))
        words = words[:slot] + [_pick(rng, lex)] + words[slot:]
    # every Q sentence carries at least one filler, which no task sentence does
    n_fillers = 1 + int(rng.integers(0, 3))
    for _ in range(n_fillers):
        slot = int(rng.integers(0, len(words) + 1))
        words = words[:slot] + [_pick(rng, FILLERS)] + words[slot:]
    return " ".join(words)


def gen_general_corpus(spec: CorpusSpec) -> list[str]:
    if spec.size < 1:
        raise ValueError("corpus size must be >= 1")
    rng = RngStream(spec.seed).fork("general")
    seen = set()
    out = []
    for _ in range(spec.size):
        for _ in range(400):
            sentence = _general_sentence(rng, spec.polar_mix)
            if sentence not in seen:
                break
        seen.add(sentence)
        out.append(sentence)
    return out


def strip_fillers(sentence: str) -> str:
    """The clean core the summarize-mode generator is pretrained to produce."""
    return " ".join(t for t in sentence.split() if t not in FILLERS)


def insert_fillers(sentence: str, rng: RngStream, lo: int = 1, hi: int = 3) -> str:
    """Noise a sentence with 1..3 filler tokens (teacher-training augmentation
    that makes filler tokens label-irrelevant)."""
    words = sentence.split()
    for _ in range(int(rng.integers(lo, hi + 1))):
        slot = int(rng.integers(0, len(words) + 1))
        words = words[:slot] + [_pick(rng, FILLERS)] + words[slot:]
    return " ".join(words)


def polar_content_fraction(sentences: list[str]) -> float:
    polar = 0
    content = 0
    for s in sentences:
        for tok in s.split():
            if tok in FUNCTION_WORDS:
                continue
            content += 1
            polar += tok in POLAR_WORDS
    return polar / max(content, 1)


# ---------------------------------------------------------------------------
# task corpus dispatch + file formats
# ---------------------------------------------------------------------------

def generate_task_corpus(task_id: str, spec: CorpusSpec,
                         schema) -> list[LabeledExample]:
    if task_id == "sent2":
        return gen_sentiment_corpus(spec, 2)
    if task_id == "sent5":
        return gen_sentiment_corpus(spec, 5)
    if task_id == "accept":
        return gen_acceptability_corpus(spec)
    if task_id == "extract":
        return gen_extraction_corpus(spec, schema)
    raise ValueError(f"unknown task id {task_id!r}")


def gold_to_str(gold) -> str:
    if isinstance(gold, int):
        return str(gold)
    return ";".join(f"{t}:{s}:{e}" for t, s, e in gold)


def gold_from_str(text: str):
    if ":" not in text:
        return int(text) if text else []
    spans = []
    for part in text.split(";"):
        t, s, e = part.split(":")
        spans.append((t, int(s), int(e)))
    return spans


def write_tsv(path, examples: list[LabeledExample]) -> None:
    lines = [f"{ex.input_text}\t{ex.target_text}\t{gold_to_str(ex.gold_label)}"
             for ex in examples]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_tsv(path, split: str = "") -> list[LabeledExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            inp, tgt, gold = line.split("\t")
            out.append(LabeledExample(inp, tgt, gold_from_str(gold), split))
    return out


def write_splits(out_dir, task_id: str, examples: list[LabeledExample]) -> dict:
    paths = {}
    for split in ("train", "dev", "test"):
        path = f"{out_dir}/{task_id}.{split}.tsv"
        write_tsv(path, [ex for ex in examples if ex.split == split])
        paths[split] = path
    return paths


def write_general(path, sentences: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(sentences) + ("\n" if sentences else ""))


def read_general(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def assert_disjoint(q_sentences: list[str], task_examples: list[LabeledExample]) -> None:
    overlap = set(q_sentences) & {ex.input_text for ex in task_examples}
    if overlap:
        raise AssertionError(f"general corpus overlaps task corpus: {sorted(overlap)[:3]}")
