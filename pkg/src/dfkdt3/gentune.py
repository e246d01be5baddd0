"""Prompt tuning of the transfer text generator and export of the transfer
corpus: generate from the general corpus through the prompted generator with
straight-through Gumbel sampling at every step, score with the frozen teacher
(self-confidence plus batch diversity for classification, span contrast for
extraction), and backprop into the soft prompt only.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import Adam, RngStream, Tensor, WarmupDecaySchedule, backward
from .losses import (
    ContrastiveConfig,
    GumbelConfig,
    SpanRep,
    batch_class_probabilities,
    contrastive_span_loss,
    diversity_loss,
    gumbel_noise,
    specificity_loss,
)
from .synthdata import gold_to_str
from .textmodel import (
    EOS_ID,
    PAD_ID,
    HybridPrompt,
    Seq2SeqModel,
    Vocab,
    _mask_through_eos,
    encode_with_prompt,
    greedy_decode,
)


@dataclass
class GentuneConfig:
    steps: int = 2000
    batch_size: int = 8
    warmup_steps: int = 100
    lr_hi: float = 8e-3
    lr_lo: float = 8e-4
    decay_end: int = 2000
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    max_gen_len: int = 12
    task_kind: str = "classification"  # or "extraction"
    seed: int = 0
    prompt_len: int = 16
    commander: str = "summarize:"  # "none" disables the hard token
    use_spec: bool = True
    use_divs: bool = True
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.warmup_steps >= self.decay_end:
            raise ValueError("warmup_steps must be < decay_end")
        if self.batch_size < 2:
            raise ValueError("diversity loss needs a batch (batch_size >= 2)")
        if self.task_kind not in ("classification", "extraction"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if not (self.use_spec or self.use_divs):
            raise ValueError("tuning needs at least one objective term")


@dataclass
class TransferRecord:
    source: str
    generated: str
    target_text: str
    gold: object


@dataclass
class TransferCorpus:
    records: list[TransferRecord]
    provenance: str
    dropped: int = 0


def make_prompt(generator: Seq2SeqModel, vocab: Vocab,
                cfg: GentuneConfig) -> HybridPrompt:
    commander = [] if cfg.commander in ("", "none") else vocab.encode(cfg.commander)
    if any(i == 2 for i in commander):  # UNK
        raise ValueError(f"commander {cfg.commander!r} not in vocabulary")
    return HybridPrompt.from_vocab_sample(generator, commander, cfg.prompt_len,
                                          RngStream(cfg.seed))


def pad_batch(id_lists: list[list[int]]):
    width = max(len(ids) for ids in id_lists)
    batch = np.full((len(id_lists), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(id_lists), width), dtype=bool)
    for i, ids in enumerate(id_lists):
        batch[i, :len(ids)] = ids
        mask[i, :len(ids)] = True
    return batch, mask


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_straight_through(generator: Seq2SeqModel, prompt: HybridPrompt,
                              q_ids: np.ndarray, q_mask: np.ndarray,
                              cfg: GentuneConfig, rng: RngStream):
    """Autoregressive decode with straight-through Gumbel sampling per step.

    Returns (y_seq [B, T, vocab] one-hot-with-soft-grads, hard ids [B, T],
    step mask through EOS).
    """
    memory, src_mask, _ = encode_with_prompt(generator, prompt, q_ids, q_mask)
    cache = generator.start_decode(memory, src_mask)
    b = q_ids.shape[0]
    prev = generator.embed_ids(np.full((b, 1), PAD_ID, dtype=np.int64))
    ys = []
    hard = []
    noise_rng = rng.fork("gumbel")
    for _ in range(cfg.max_gen_len):
        logits = generator.decode_one(cache, prev)
        g = gumbel_noise(noise_rng, logits.shape)
        soft = C.softmax((logits + Tensor(g / cfg.gumbel.sigma))
                         * (1.0 / cfg.gumbel.tau), axis=-1)
        idx = np.argmax(soft.data, axis=-1)
        onehot = np.zeros_like(soft.data)
        onehot[np.arange(b), idx] = 1.0
        y = Tensor(onehot - soft.data) + soft if cfg.gumbel.hard else soft
        ys.append(y)
        hard.append(idx)
        prev = C.reshape(generator.embed_soft(y), (b, 1, -1))
    y_seq = C.stack(ys, axis=1)
    hard_ids = np.stack(hard, axis=1)
    return y_seq, hard_ids, _mask_through_eos(hard_ids)


def generate_hard(generator: Seq2SeqModel, prompt: HybridPrompt,
                  q_ids: np.ndarray, q_mask: np.ndarray, cfg: GentuneConfig,
                  rng: RngStream) -> np.ndarray:
    """Plain hard Gumbel decoding (no gradients), for corpus export."""
    with C.no_grad():
        memory, src_mask, _ = encode_with_prompt(generator, prompt, q_ids, q_mask)
        cache = generator.start_decode(memory, src_mask)
        b = q_ids.shape[0]
        prev_ids = np.full((b, 1), PAD_ID, dtype=np.int64)
        out = []
        for _ in range(cfg.max_gen_len):
            logits = generator.decode_one(cache, generator.embed_ids(prev_ids))
            g = gumbel_noise(rng, logits.shape)
            idx = np.argmax(logits.data + g / cfg.gumbel.sigma, axis=-1)
            out.append(idx)
            prev_ids = idx[:, None]
    return np.stack(out, axis=1)


# ---------------------------------------------------------------------------
# teacher scoring
# ---------------------------------------------------------------------------

def _teacher_read_soft(teacher: Seq2SeqModel, prefix_ids: list[int],
                       y_seq: Tensor, gen_mask: np.ndarray):
    """Encode [task prefix ; generated soft tokens] with the teacher."""
    b = y_seq.shape[0]
    prefix = np.tile(np.asarray(prefix_ids, dtype=np.int64)[None, :], (b, 1))
    embeds = C.concat([teacher.embed_ids(prefix), teacher.embed_soft(y_seq)], axis=1)
    pad_mask = np.concatenate(
        [np.ones((b, len(prefix_ids)), dtype=bool), gen_mask], axis=1)
    memory, _ = teacher.encode(embeds=embeds, pad_mask=pad_mask)
    return memory, pad_mask


def score_classification(teacher: Seq2SeqModel, schema, vocab: Vocab,
                         y_seq: Tensor, gen_mask: np.ndarray):
    """Teacher greedy-decodes its label; returns (decoded ids, per-step logits
    [B, L, vocab], step mask)."""
    prefix_ids = vocab.encode(schema.task_prefix)
    memory, pad_mask = _teacher_read_soft(teacher, prefix_ids, y_seq, gen_mask)
    steps = schema.max_label_tokens + 1
    ids, logits, dec_mask = greedy_decode(teacher, memory, pad_mask,
                                          max_steps=steps, min_steps=steps)
    return ids, logits, dec_mask


def span_representations(enc_states: Tensor, generated_ids: np.ndarray,
                         fillers_per_row: list[list[tuple[int, list[int]]]],
                         prefix_len: int):
    """Mean-pooled encoder states over each decoded filler's token span.

    fillers_per_row[b] holds (slot label id, surface token ids) pairs; fillers
    whose token ids cannot be located in the generated row are skipped.
    Returns (list of SpanRep, number skipped).
    """
    reps = []
    skipped = 0
    for b, fillers in enumerate(fillers_per_row):
        row = generated_ids[b].tolist()
        for label, surface_ids in fillers:
            span = _find_subsequence(row, surface_ids)
            if span is None:
                skipped += 1
                continue
            i, j = span
            window = enc_states[b, prefix_len + i:prefix_len + j + 1, :]
            reps.append(SpanRep(window.mean(axis=0), label, (i, j)))
    return reps, skipped


def _find_subsequence(row: list[int], pattern: list[int]):
    if not pattern:
        return None
    for i in range(len(row) - len(pattern) + 1):
        if row[i:i + len(pattern)] == pattern:
            return (i, i + len(pattern) - 1)
    return None


def score_extraction(teacher: Seq2SeqModel, schema, vocab: Vocab, y_seq: Tensor,
                     hard_ids: np.ndarray, gen_mask: np.ndarray,
                     cfg: GentuneConfig, rng: RngStream):
    """Contrastive specificity for extraction: decode the structure, pool
    encoder states over located fillers, and push span types apart."""
    prefix_ids = vocab.encode(schema.model_input("")).copy()
    memory, pad_mask = _teacher_read_soft(teacher, prefix_ids, y_seq, gen_mask)
    max_steps = 6 * len(schema.slot_types) + 2
    ids, _, _ = greedy_decode(teacher, memory, pad_mask, max_steps=max_steps)
    fillers_per_row = []
    for b in range(ids.shape[0]):
        decoded = vocab.decode(ids[b])
        parsed = schema.parse_target(decoded) or []
        fillers = [(schema.slot_types.index(t), vocab.encode(surface))
                   for t, surface in parsed if t in schema.slot_types]
        fillers_per_row.append(fillers)
    reps, skipped = span_representations(memory, hard_ids, fillers_per_row,
                                         len(prefix_ids))
    loss = contrastive_span_loss(reps, cfg.contrastive, rng)
    return loss, reps, skipped


# ---------------------------------------------------------------------------
# tuning loop
# ---------------------------------------------------------------------------

def tune_prompt(generator: Seq2SeqModel, prompt: HybridPrompt,
                teacher: Seq2SeqModel, q_sentences: list[str], schema,
                cfg: GentuneConfig, vocab: Vocab,
                diagnostics_dir: str | None = None):
    """Optimize the soft prompt against the frozen teacher; returns
    (prompt, per-step log). The generator backbone and teacher stay frozen."""
    generator.set_trainable(False)
    teacher.set_trainable(False)
    prompt.soft_prompt.requires_grad = True
    opt = Adam([prompt.soft_prompt],
               lr=WarmupDecaySchedule(cfg.lr_hi, cfg.lr_lo, cfg.warmup_steps,
                                      cfg.decay_end))
    rng = RngStream(cfg.seed)
    batch_rng = rng.fork("batches")
    gen_rng = rng.fork("generation")
    neg_rng = rng.fork("negatives")
    q_ids_all = [vocab.encode(s) for s in q_sentences]
    log = []
    for step in range(cfg.steps):
        idx = batch_rng.choice(len(q_ids_all), cfg.batch_size,
                               replace=len(q_ids_all) < cfg.batch_size)
        q_ids, q_mask = pad_batch([q_ids_all[int(i)] for i in idx])
        y_seq, hard_ids, gen_mask = generate_straight_through(
            generator, prompt, q_ids, q_mask, cfg, gen_rng)
        entry = {"step": step, "lr": opt.current_lr()}
        if cfg.task_kind == "classification":
            ids, logits, dec_mask = score_classification(
                teacher, schema, vocab, y_seq, gen_mask)
            loss = None
            if cfg.use_spec:
                spec = specificity_loss(logits, dec_mask)
                entry["spec"] = float(spec.data)
                loss = spec
            if cfg.use_divs:
                probs = C.softmax(logits, axis=-1)
                divs = diversity_loss(batch_class_probabilities(probs, schema))
                entry["divs"] = float(divs.data)
                loss = divs if loss is None else loss + divs
            entry["classes"] = [schema.parse_decode(row) for row in ids]
            entry["confidence"] = _mean_confidence(logits.data, dec_mask)
        else:
            loss, reps, skipped = score_extraction(
                teacher, schema, vocab, y_seq, hard_ids, gen_mask, cfg, neg_rng)
            entry["spec"] = float(loss.data)
            entry["spans"] = len(reps)
            entry["skipped"] = skipped
        entry["loss"] = float(loss.data)
        if not math.isfinite(entry["loss"]):
            _dump_diagnostics(diagnostics_dir, step, q_ids, hard_ids, entry)
            raise RuntimeError(f"non-finite tuning loss at step {step}")
        log.append(entry)
        if loss.requires_grad:
            backward(loss)
        opt.step()
        opt.zero_grad()
    return prompt, log


def _mean_confidence(logits: np.ndarray, step_mask: np.ndarray) -> float:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    top = probs.max(axis=-1)
    return float(top[step_mask].mean())


def _dump_diagnostics(diagnostics_dir, step, q_ids, hard_ids, entry) -> None:
    if diagnostics_dir is None:
        return
    os.makedirs(diagnostics_dir, exist_ok=True)
    path = os.path.join(diagnostics_dir, f"nan_batch_step{step}.npz")
    np.savez(path, q_ids=q_ids, generated=hard_ids,
             loss=np.asarray(entry["loss"]))


def class_histogram_entropy(classes: list) -> float:
    """Entropy of the parsed class frequencies (None decodes excluded)."""
    counts: dict[int, int] = {}
    for c in classes:
        if c is not None:
            counts[c] = counts.get(c, 0) + 1
    total = sum(counts.values())
    if total == 0:
        return 0.0
    return -sum((k / total) * math.log(k / total) for k in counts.values())


def measure_generation_stats(generator, prompt, teacher, q_sentences, schema,
                             cfg: GentuneConfig, vocab: Vocab,
                             n_batches: int = 8, seed: int = 12345):
    """Post-hoc diagnostics on fresh generated batches: pooled class-histogram
    entropy and mean teacher confidence."""
    rng = RngStream(seed)
    batch_rng = rng.fork("batches")
    gen_rng = rng.fork("generation")
    q_ids_all = [vocab.encode(s) for s in q_sentences]
    classes = []
    confidences = []
    with C.no_grad():
        for _ in range(n_batches):
            idx = batch_rng.choice(len(q_ids_all), cfg.batch_size,
                                   replace=len(q_ids_all) < cfg.batch_size)
            q_ids, q_mask = pad_batch([q_ids_all[int(i)] for i in idx])
            y_seq, _, gen_mask = generate_straight_through(
                generator, prompt, q_ids, q_mask, cfg, gen_rng)
            ids, logits, dec_mask = score_classification(
                teacher, schema, vocab, y_seq, gen_mask)
            classes.extend(schema.parse_decode(row) for row in ids)
            confidences.append(_mean_confidence(logits.data, dec_mask))
    return class_histogram_entropy(classes), float(np.mean(confidences))


# ---------------------------------------------------------------------------
# transfer corpus export
# ---------------------------------------------------------------------------

def export_transfer_corpus(generator: Seq2SeqModel, prompt: HybridPrompt,
                           teacher: Seq2SeqModel, q_sentences: list[str],
                           schema, cfg: GentuneConfig, size_multiplier: int,
                           ref_size: int, vocab: Vocab,
                           provenance: str = "") -> TransferCorpus:
    """Hard-Gumbel decode fresh Q samples (with replacement) until
    size_multiplier * ref_size records survive; the teacher greedy-decodes
    each record's target and unparseable targets are dropped and counted."""
    needed = size_multiplier * ref_size
    rng = RngStream(cfg.seed).fork("export")
    sample_rng = rng.fork("sources")
    noise_rng = rng.fork("noise")
    q_ids_all = [vocab.encode(s) for s in q_sentences]
    records: list[TransferRecord] = []
    dropped = 0
    attempts = 0
    batch = max(cfg.batch_size, 16)
    while len(records) < needed:
        if attempts > max(8 * needed, 64):
            raise RuntimeError(
                f"export drop rate too high: kept {len(records)} of {attempts}")
        idx = [int(i) for i in sample_rng.choice(len(q_ids_all), batch, replace=True)]
        q_ids, q_mask = pad_batch([q_ids_all[i] for i in idx])
        gen_ids = generate_hard(generator, prompt, q_ids, q_mask, cfg, noise_rng)
        with C.no_grad():
            for b in range(len(idx)):
                attempts += 1
                generated = vocab.decode(gen_ids[b])
                record = _record_from_generation(
                    teacher, schema, vocab, generated, q_sentences[idx[b]])
                if record is None:
                    dropped += 1
                else:
                    records.append(record)
                if len(records) >= needed:
                    break
    if dropped > attempts * 0.5:
        raise RuntimeError(
            f"export drop rate {dropped}/{attempts} exceeds 50%")
    return TransferCorpus(records[:needed], provenance, dropped)


def _record_from_generation(teacher, schema, vocab, generated: str,
                            source: str) -> TransferRecord | None:
    if not generated.strip():
        return None
    ids, mask = pad_batch([vocab.encode(schema.model_input(generated))])
    memory, _ = teacher.encode(ids, pad_mask=mask)
    if hasattr(schema, "label_token_ids"):
        steps = schema.max_label_tokens + 1
        out, _, _ = greedy_decode(teacher, memory, mask, max_steps=steps,
                                  min_steps=steps)
        cls = schema.parse_decode(out[0])
        if cls is None:
            return None
        return TransferRecord(source, generated, schema.labels[cls], cls)
    out, _, _ = greedy_decode(teacher, memory, mask,
                              max_steps=6 * len(schema.slot_types) + 2)
    decoded = vocab.decode(out[0])
    parsed = schema.parse_target(decoded)
    if parsed is None:
        return None
    spans = []
    for slot_type, surface in parsed:
        start = generated.find(surface)
        if start < 0:
            return None
        spans.append((slot_type, start, start + len(surface)))
    return TransferRecord(source, generated, decoded, spans)


def write_transfer_tsv(path, corpus: TransferCorpus) -> None:
    lines = [f"# provenance: {corpus.provenance}"]
    for r in corpus.records:
        lines.append(f"{r.generated}\t{r.target_text}\t{gold_to_str(r.gold)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_transfer_tsv(path) -> tuple[list[TransferRecord], str]:
    from .synthdata import gold_from_str
    records = []
    provenance = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# provenance:"):
                provenance = line[len("# provenance:"):].strip()
                continue
            if not line:
                continue
            generated, target, gold = line.split("\t")
            records.append(TransferRecord("", generated, target,
                                          gold_from_str(gold)))
    return records, provenance
