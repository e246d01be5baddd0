"""Teacher training, student distillation (divergence + hidden-state losses),
baseline conditions, and evaluation metrics (ACC, MCC, span micro-F1)."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import Adam, RngStream, Tensor, WarmupDecaySchedule, backward
from .gentune import TransferRecord, pad_batch
from .losses import (
    hidden_loss,
    init_hidden_projections,
    kd_divergence,
    kd_total,
    make_layer_map,
)
from .synthdata import LabeledExample
from .textmodel import (
    EOS_ID,
    PAD_ID,
    Seq2SeqModel,
    Vocab,
    forward_teacher_student,
    greedy_decode,
    shift_right,
)

CONDITIONS = ("teacher", "student-FT", "student-vanillaKD", "student-OOD",
              "student-DFKD")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_hi: float = 2e-3
    lr_lo: float = 2e-4
    warmup_steps: int = 50
    decay_end: int | None = None  # default: total steps
    seed: int = 0
    label_smoothing: float = 0.0


@dataclass
class KDConfig:
    alpha: float = 1.0
    beta: float = 1.0
    t_kd: float = 1.0
    layer_map: list[tuple[int, int]] | None = None  # default: uniform spacing
    epochs: int = 6
    batch_size: int = 16
    lr_hi: float = 1e-3
    lr_lo: float = 1e-4
    warmup_steps: int = 20
    decay_end: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.layer_map is not None:
            student_side = [s for s, _ in self.layer_map]
            if len(set(student_side)) != len(student_side):
                raise ValueError("layer_map must be injective on the student side")


@dataclass
class EvalReport:
    task: str
    condition: str
    metric: str
    mean: float
    std: float | None
    seeds: list[int]
    config_hash: str = ""

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)

    def __post_init__(self):
        if (self.std is not None) != (len(self.seeds) > 1):
            raise ValueError("std must be present iff n_seeds > 1")


def target_steps(schema) -> int:
    if hasattr(schema, "max_label_tokens"):
        return schema.max_label_tokens + 1
    return 6 * len(schema.slot_types) + 2


# ---------------------------------------------------------------------------
# supervised training (teacher, student-FT, denoise/copy pretraining)
# ---------------------------------------------------------------------------

def _encode_pairs(pairs: list[tuple[str, str]], vocab: Vocab):
    inputs = [vocab.encode(src) for src, _ in pairs]
    targets = [vocab.encode(tgt, add_eos=True) for _, tgt in pairs]
    return inputs, targets


def _supervised_step(model: Seq2SeqModel, input_ids, target_ids, opt: Adam,
                     label_smoothing: float = 0.0) -> float:
    src, src_mask = pad_batch(input_ids)
    tgt, _ = pad_batch(target_ids)
    memory, _ = model.encode(src, pad_mask=src_mask)
    loss_mask = tgt != PAD_ID
    logits, _ = model.decode_forced(memory, src_mask,
                                    tgt_in_ids=shift_right(tgt),
                                    tgt_pad_mask=loss_mask)
    flat = logits.reshape(-1, model.config.vocab_size)
    loss = C.cross_entropy(flat, tgt.reshape(-1), mask=loss_mask.reshape(-1),
                           label_smoothing=label_smoothing)
    backward(loss)
    opt.step()
    opt.zero_grad()
    return float(loss.data)


def train_supervised(model: Seq2SeqModel, pairs: list[tuple[str, str]],
                     vocab: Vocab, cfg: TrainConfig,
                     dev_eval=None, keep_best: bool = True):
    """Teacher-forced cross-entropy training over (input, target) text pairs.

    dev_eval: optional callable(model) -> float evaluated once per epoch; the
    best-scoring parameter set is restored at the end. Returns
    (model, best_dev_metric, loss_log).
    """
    model.set_trainable(True)
    inputs, targets = _encode_pairs(pairs, vocab)
    steps_per_epoch = max(1, math.ceil(len(pairs) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    sched = WarmupDecaySchedule(cfg.lr_hi, cfg.lr_lo, cfg.warmup_steps,
                                cfg.decay_end or max(total, cfg.warmup_steps + 1))
    opt = Adam(model.param_list(), lr=sched)
    rng = RngStream(cfg.seed).fork("shuffle")
    log = []
    best_metric = -np.inf
    best_state = None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            loss = _supervised_step(model, [inputs[i] for i in idx],
                                    [targets[i] for i in idx], opt,
                                    cfg.label_smoothing)
            if not math.isfinite(loss):
                raise RuntimeError("non-finite supervised training loss")
            log.append(loss)
        if dev_eval is not None:
            metric = dev_eval(model)
            if metric > best_metric:
                best_metric = metric
                if keep_best:
                    best_state = model.state_arrays()
    if best_state is not None:
        model.load_state(best_state)
    return model, (best_metric if dev_eval is not None else None), log


def train_teacher(model: Seq2SeqModel, splits: dict, schema, vocab: Vocab,
                  cfg: TrainConfig, min_dev_metric: float | None = None,
                  filler_augment: bool = True, calibrate: bool = True):
    """Finetune on the task corpus; keeps the best-dev checkpoint and fails
    loudly if the learnability gate is missed.

    Two augmentations (both derived from the training split alone) give the
    desk-scale teacher the calibration a large pretrained teacher has:
    filler_augment appends a filler-noised copy of every training sentence so
    filler tokens become label-irrelevant, and calibrate appends word-shuffled
    training sentences paired with *every* label so incoherent text gets an
    uncertain prediction instead of a confidently arbitrary one. Dev and test
    stay clean."""
    from .synthdata import insert_fillers
    pairs = [(schema.model_input(ex.input_text), ex.target_text)
             for ex in splits["train"]]
    if filler_augment:
        aug_rng = RngStream(cfg.seed).fork("filler-augment")
        pairs += [(schema.model_input(insert_fillers(ex.input_text, aug_rng)),
                   ex.target_text) for ex in splits["train"]]
    if calibrate and hasattr(schema, "labels"):
        shuffle_rng = RngStream(cfg.seed).fork("calibration-shuffle")
        for ex in splits["train"][::2]:
            words = ex.input_text.split()
            garbled = " ".join(words[int(i)]
                               for i in shuffle_rng.permutation(len(words)))
            for label in schema.labels:
                pairs.append((schema.model_input(garbled), label))
    dev = splits["dev"]

    def dev_eval(m):
        return evaluate(m, dev, schema, vocab)

    model, best, log = train_supervised(model, pairs, vocab, cfg, dev_eval)
    if min_dev_metric is not None and best < min_dev_metric:
        raise RuntimeError(
            f"teacher dev metric {best:.3f} below the learnability gate "
            f"{min_dev_metric:.3f}")
    return model, best, log


def pretrain_generator_backbone(model: Seq2SeqModel, q_sentences: list[str],
                                vocab: Vocab, cfg: TrainConfig):
    """Copy/denoise pretraining over Q that also teaches the commander token:
    "summarize: <q>" maps to the filler-free core of q, a bare (optionally
    junk-prefixed) q maps to itself. Stands in for the pretrained seq2seq."""
    from .synthdata import strip_fillers
    rng = RngStream(cfg.seed).fork("backbone-data")
    pairs = []
    content = [t for t in vocab.tokens[3:] if not t.startswith("<")]
    for i, q in enumerate(q_sentences):
        if i % 2 == 0:
            pairs.append((f"summarize: {q}", strip_fillers(q)))
        else:
            src = q
            if rng.uniform() < 0.5:
                junk = " ".join(content[int(j)] for j in
                                rng.integers(0, len(content), (int(rng.integers(1, 4)),)))
                src = f"{junk} {q}"
            pairs.append((src, q))
    return train_supervised(model, pairs, vocab, cfg)


def pretrain_student_init(model: Seq2SeqModel, q_sentences: list[str],
                          vocab: Vocab, cfg: TrainConfig):
    """Plain copy objective over Q (the unsupervised student initialization)."""
    pairs = [(q, q) for q in q_sentences]
    return train_supervised(model, pairs, vocab, cfg)


def train_student_ft(student: Seq2SeqModel, splits: dict, schema, vocab: Vocab,
                     cfg: TrainConfig):
    """Standard finetuning of the (pretrained) student on gold targets."""
    pairs = [(schema.model_input(ex.input_text), ex.target_text)
             for ex in splits["train"]]
    return train_supervised(student, pairs, vocab, cfg, dev_eval=None)


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------

def distill_student(teacher: Seq2SeqModel, student: Seq2SeqModel,
                    input_texts: list[str], schema, vocab: Vocab,
                    cfg: KDConfig, diagnostics_dir: str | None = None):
    """Distill on the given inputs: the teacher greedy-decodes targets per
    batch, both models run teacher-forced on them, and
    alpha*divergence + beta*hidden is optimized over the student and the
    hidden-state projections. Returns (student, loss log)."""
    teacher.set_trainable(False)
    student.set_trainable(True)
    layer_map = cfg.layer_map or make_layer_map(
        student.config.n_enc_layers, teacher.config.n_enc_layers)
    w_h = init_hidden_projections(layer_map, student.config.d_model,
                                  teacher.config.d_model, RngStream(cfg.seed))
    inputs = [vocab.encode(schema.model_input(text)) for text in input_texts]
    steps_per_epoch = max(1, math.ceil(len(inputs) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    sched = WarmupDecaySchedule(cfg.lr_hi, cfg.lr_lo, cfg.warmup_steps,
                                cfg.decay_end or max(total, cfg.warmup_steps + 1))
    opt = Adam(student.param_list() + [w_h[k] for k in sorted(w_h)], lr=sched)
    rng = RngStream(cfg.seed).fork("kd-shuffle")
    steps = target_steps(schema)
    log = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            ids, mask = pad_batch([inputs[i] for i in idx])
            t_pack, s_pack, _, step_mask = forward_teacher_student(
                teacher, student, ids, mask, max_steps=steps)
            divg = kd_divergence(s_pack[0], t_pack[0], step_mask, cfg.t_kd)
            hidd = hidden_loss(s_pack[1], t_pack[1], w_h, layer_map,
                               src_mask=mask, tgt_mask=step_mask)
            loss = kd_total(divg, hidd, cfg.alpha, cfg.beta)
            entry = {"loss": float(loss.data), "divg": float(divg.data),
                     "hidd": float(hidd.data)}
            if not math.isfinite(entry["loss"]):
                if diagnostics_dir:
                    os.makedirs(diagnostics_dir, exist_ok=True)
                    np.savez(os.path.join(diagnostics_dir, "nan_kd_batch.npz"),
                             ids=ids)
                raise RuntimeError("non-finite distillation loss")
            log.append(entry)
            if loss.requires_grad:
                backward(loss)
            opt.step()
            opt.zero_grad()
    return student, log


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mcc_from_counts(tp: int, fp: int, tn: int, fn: int) -> float:
    """Matthews correlation; 0 when any denominator factor vanishes."""
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def span_micro_f1(predicted: list[list[tuple]], gold: list[list[tuple]]) -> float:
    """Micro F1 over exact (type, start, end) matches."""
    tp = fp = fn = 0
    for pred, gld in zip(predicted, gold):
        gold_left = list(gld)
        for span in pred:
            if span in gold_left:
                gold_left.remove(span)
                tp += 1
            else:
                fp += 1
        fn += len(gold_left)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _predict_classes(model: Seq2SeqModel, sentences: list[str], schema,
                     vocab: Vocab, batch_size: int = 32) -> list[int | None]:
    steps = schema.max_label_tokens + 1
    preds = []
    with C.no_grad():
        for b in range(0, len(sentences), batch_size):
            chunk = sentences[b:b + batch_size]
            ids, mask = pad_batch(
                [vocab.encode(schema.model_input(s)) for s in chunk])
            memory, _ = model.encode(ids, pad_mask=mask)
            out, _, _ = greedy_decode(model, memory, mask, max_steps=steps,
                                      min_steps=steps)
            preds.extend(schema.parse_decode(row) for row in out)
    return preds


def evaluate(model: Seq2SeqModel, examples: list[LabeledExample], schema,
             vocab: Vocab) -> float:
    """Task metric on a split: ACC or MCC for classification, span micro-F1
    for extraction. Unparseable decodes never score."""
    if not examples:
        raise ValueError("evaluate() needs a nonempty split")
    if hasattr(schema, "label_token_ids"):
        preds = _predict_classes(model, [ex.input_text for ex in examples],
                                 schema, vocab)
        golds = [ex.gold_label for ex in examples]
        if schema.metric == "acc":
            return float(np.mean([p == g for p, g in zip(preds, golds)]))
        # binary MCC; unparseable counts as the wrong class
        tp = fp = tn = fn = 0
        for p, g in zip(preds, golds):
            p = (1 - g) if p is None else p
            if g == 1 and p == 1:
                tp += 1
            elif g == 1 and p == 0:
                fn += 1
            elif g == 0 and p == 0:
                tn += 1
            else:
                fp += 1
        return mcc_from_counts(tp, fp, tn, fn)
    # extraction
    predicted = []
    with C.no_grad():
        steps = target_steps(schema)
        for b in range(0, len(examples), 32):
            chunk = examples[b:b + 32]
            ids, mask = pad_batch(
                [vocab.encode(schema.model_input(ex.input_text)) for ex in chunk])
            memory, _ = model.encode(ids, pad_mask=mask)
            out, _, _ = greedy_decode(model, memory, mask, max_steps=steps)
            for row, ex in zip(out, chunk):
                parsed = schema.parse_target(vocab.decode(row))
                spans = []
                if parsed:
                    for slot_type, surface in parsed:
                        start = ex.input_text.find(surface)
                        if start >= 0:
                            spans.append((slot_type, start, start + len(surface)))
                predicted.append(spans)
    return span_micro_f1(predicted, [list(ex.gold_label) for ex in examples])


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------

@dataclass
class ConditionPrereqs:
    teacher: Seq2SeqModel
    student_init: Seq2SeqModel
    splits: dict[str, list[LabeledExample]]
    schema: object
    vocab: Vocab
    q_sentences: list[str] | None = None
    transfer_for_seed: dict[int, list[TransferRecord]] | None = None
    kd_cfg: KDConfig = field(default_factory=KDConfig)
    ft_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6))
    multiplier: int = 1


def _student_for_condition(condition: str, seed: int,
                           prereqs: ConditionPrereqs) -> Seq2SeqModel:
    student = prereqs.student_init.clone()
    kd_cfg = dataclasses.replace(prereqs.kd_cfg, seed=seed)
    if condition == "student-FT":
        ft_cfg = dataclasses.replace(prereqs.ft_cfg, seed=seed)
        train_student_ft(student, prereqs.splits, prereqs.schema,
                         prereqs.vocab, ft_cfg)
        return student
    if condition == "student-vanillaKD":
        texts = [ex.input_text for ex in prereqs.splits["train"]]
    elif condition == "student-OOD":
        if prereqs.q_sentences is None:
            raise RuntimeError("missing artifact: general corpus Q is required "
                               "for the OOD condition (run gen-data)")
        n = len(prereqs.splits["train"]) * prereqs.multiplier
        pick = RngStream(seed).fork("ood").choice(
            len(prereqs.q_sentences), n, replace=n > len(prereqs.q_sentences))
        texts = [prereqs.q_sentences[int(i)] for i in pick]
    elif condition == "student-DFKD":
        if not prereqs.transfer_for_seed or seed not in prereqs.transfer_for_seed:
            raise RuntimeError(
                f"missing artifact: transfer corpus for seed {seed} "
                "(run tune-generator and export-corpus)")
        texts = [r.generated for r in prereqs.transfer_for_seed[seed]]
    else:
        raise ValueError(f"unknown condition {condition!r}")
    distill_student(prereqs.teacher, student, texts, prereqs.schema,
                    prereqs.vocab, kd_cfg)
    return student


def run_condition(condition: str, task_id: str, seeds: list[int],
                  prereqs: ConditionPrereqs, config_hash: str = "",
                  condition_label: str | None = None) -> EvalReport:
    """Train and evaluate one condition per seed; aggregate mean/std."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of "
                         f"{CONDITIONS}")
    values = []
    test = prereqs.splits["test"]
    for seed in seeds:
        if condition == "teacher":
            model = prereqs.teacher
        else:
            model = _student_for_condition(condition, seed, prereqs)
        values.append(evaluate(model, test, prereqs.schema, prereqs.vocab))
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    metric = prereqs.schema.metric
    return EvalReport(task_id, condition_label or condition, metric, mean, std,
                      list(seeds), config_hash)
