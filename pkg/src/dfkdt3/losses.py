"""Loss functions for generator tuning and knowledge distillation, plus the
stable-level Gumbel sampler. All operations are pure and differentiable given
explicit rng streams.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import RngStream, Tensor


@dataclass
class GumbelConfig:
    sigma: float = 1.0   # stable level; large -> argmax, small -> uniform noise
    tau: float = 1.0     # softmax temperature
    hard: bool = True    # straight-through one-hot output

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("sigma and tau must be positive")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    negative_ratio: int | None = 5  # None disables sampling (use all negatives)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negative_ratio is not None and self.negative_ratio <= 0:
            raise ValueError("negative_ratio must be positive")


@dataclass
class SpanRep:
    vector: Tensor
    label: int
    span: tuple[int, int]

    def __post_init__(self):
        i, j = self.span
        if i > j:
            raise ValueError("span start must not exceed span end")


# ---------------------------------------------------------------------------
# generator objective (classification path)
# ---------------------------------------------------------------------------

def specificity_loss(teacher_logits: Tensor, step_mask: np.ndarray | None = None) -> Tensor:
    """Mean self-cross-entropy of the teacher's per-step distribution against
    its own argmax, over unmasked (sample, step) cells.

    teacher_logits: [N, L, vocab]; step_mask: boolean [N, L], False = padding.
    """
    if teacher_logits.ndim != 3:
        raise ValueError("specificity_loss expects logits [N, L, vocab]")
    n, length, vocab = teacher_logits.shape
    if n == 0:
        raise ValueError("specificity_loss received an empty batch")
    flat = teacher_logits.reshape(n * length, vocab)
    targets = np.argmax(flat.data, axis=-1)
    mask = None if step_mask is None else np.asarray(step_mask, bool).reshape(-1)
    return C.cross_entropy(flat, targets, mask=mask)


def class_probability(teacher_step_probs: Tensor, schema) -> Tensor:
    """Per-class probability: product of the decoder's probabilities for each
    label's tokens at their positions. teacher_step_probs: [L, vocab]."""
    length = teacher_step_probs.shape[0]
    per_class = []
    for seq in schema.label_token_ids:
        if len(seq) > length:
            raise ValueError("label longer than the decode window")
        p = teacher_step_probs[0, seq[0]]
        for k, tok in enumerate(seq[1:], start=1):
            p = p * teacher_step_probs[k, tok]
        per_class.append(p)
    return C.stack(per_class)


def batch_class_probabilities(teacher_probs: Tensor, schema) -> Tensor:
    """class_probability applied per sample: [N, L, vocab] -> [N, n]."""
    return C.stack([class_probability(teacher_probs[i], schema)
                    for i in range(teacher_probs.shape[0])], axis=0)


def diversity_loss(p_batch: Tensor) -> Tensor:
    """Negative entropy of the normalized batch-mean class-probability vector
    (Sum m_j ln m_j with 0 ln 0 := 0). Minimized at the uniform vector."""
    if p_batch.ndim != 2:
        raise ValueError("diversity_loss expects [N, n_classes]")
    if (p_batch.data < 0).any():
        raise ValueError("class probabilities must be nonnegative")
    mean_vec = p_batch.mean(axis=0)
    total = mean_vec.sum()
    if total.data <= 0.0:
        raise ValueError("all-zero mean class-probability vector")
    normalized = mean_vec / total
    return C.xlogx(normalized).sum()


def generator_objective(teacher_logits: Tensor, p_batch: Tensor, schema=None,
                        step_mask: np.ndarray | None = None) -> Tensor:
    """Unweighted sum of the specificity and diversity terms."""
    return specificity_loss(teacher_logits, step_mask) + diversity_loss(p_batch)


# ---------------------------------------------------------------------------
# stable-level Gumbel sampling
# ---------------------------------------------------------------------------

def gumbel_noise(rng: RngStream, shape) -> np.ndarray:
    u = np.clip(rng.uniform(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_sample(logits: Tensor, cfg: GumbelConfig, rng: RngStream) -> Tensor:
    """softmax((h + g/sigma) / tau) with g ~ Gumbel(0,1); optionally a
    straight-through one-hot whose gradients flow through the soft values."""
    g = gumbel_noise(rng, logits.shape)
    soft = C.softmax((logits + Tensor(g / cfg.sigma)) * (1.0 / cfg.tau), axis=-1)
    if not cfg.hard:
        return soft
    idx = np.argmax(soft.data, axis=-1)
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, np.expand_dims(idx, -1), 1.0, axis=-1)
    return Tensor(onehot - soft.data) + soft


# ---------------------------------------------------------------------------
# contrastive span loss (extraction specificity)
# ---------------------------------------------------------------------------

def contrastive_span_loss(reps: list[SpanRep], cfg: ContrastiveConfig,
                          rng: RngStream | None = None) -> Tensor:
    """InfoNCE-style separation of same-label spans from other-label spans.

    For each anchor span with label l, positives are the other same-label
    spans (weight 1/(N_l - 1)); each positive's denominator is its own
    similarity term plus up to negative_ratio * n_positives spans sampled from
    the other labels. Labels with fewer than two instances contribute no
    anchors; with no anchors at all the loss is 0 (with a warning).
    """
    by_label: dict[int, list[int]] = {}
    for i, r in enumerate(reps):
        by_label.setdefault(r.label, []).append(i)
    anchor_labels = [l for l, idxs in by_label.items() if len(idxs) >= 2]
    if not anchor_labels:
        warnings.warn("contrastive_span_loss: no label has >= 2 instances")
        return Tensor(0.0)

    sims: dict[tuple[int, int], Tensor] = {}

    def sim(i: int, j: int) -> Tensor:
        key = (i, j) if i <= j else (j, i)
        if key not in sims:
            sims[key] = C.cosine_similarity(reps[key[0]].vector, reps[key[1]].vector)
        return sims[key]

    inv_t = 1.0 / cfg.temperature
    total = None
    for label in sorted(anchor_labels):
        idxs = by_label[label]
        pool = [i for i, r in enumerate(reps) if r.label != label]
        weight = 1.0 / (len(idxs) - 1)
        for a in idxs:
            n_pos = len(idxs) - 1
            negs = pool
            if cfg.negative_ratio is not None and len(pool) > cfg.negative_ratio * n_pos:
                if rng is None:
                    raise ValueError("negative sampling requires an rng stream")
                chosen = rng.choice(len(pool), cfg.negative_ratio * n_pos,
                                    replace=False)
                negs = [pool[int(c)] for c in chosen]
            neg_sum = None
            for m in negs:
                term = C.exp(sim(a, m) * inv_t)
                neg_sum = term if neg_sum is None else neg_sum + term
            for p in idxs:
                if p == a:
                    continue
                num = C.exp(sim(a, p) * inv_t)
                denom = num if neg_sum is None else num + neg_sum
                f = C.log(num / denom) * weight
                total = f if total is None else total + f
    return -total


# ---------------------------------------------------------------------------
# knowledge distillation losses
# ---------------------------------------------------------------------------

def kd_divergence(student_logits: Tensor, teacher_logits: Tensor,
                  step_mask: np.ndarray | None = None,
                  temperature: float = 1.0) -> Tensor:
    """Mean over unmasked (sample, step) cells of KL(teacher || student) with
    temperature-scaled softmaxes. Shapes must agree: [N, L, vocab]."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes disagree: {student_logits.shape} vs {teacher_logits.shape}")
    inv_t = 1.0 / temperature
    ls_s = C.log_softmax(student_logits * inv_t, axis=-1)
    ls_t = C.log_softmax(teacher_logits * inv_t, axis=-1)
    p_t = C.exp(ls_t)
    kl = (p_t * (ls_t - ls_s)).sum(axis=-1)  # [N, L]
    if step_mask is None:
        return kl.mean(axis=0).mean(axis=0) if kl.ndim == 2 else kl.mean()
    mask = np.asarray(step_mask, bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("kd_divergence has no unmasked steps")
    return (kl * Tensor(mask.astype(float))).sum() * (1.0 / count)


def make_layer_map(n_student: int, n_teacher: int) -> list[tuple[int, int]]:
    """Uniformly spaced pairing: student layer i -> teacher layer
    ceil((i+1) * n_teacher / n_student), zero-based."""
    return [(i, math.ceil((i + 1) * n_teacher / n_student) - 1)
            for i in range(n_student)]


def init_hidden_projections(layer_map, d_student: int, d_teacher: int,
                            rng: RngStream) -> dict[str, Tensor]:
    """One trainable W_h per mapped pair and side (encoder/decoder)."""
    proj = {}
    for side in ("enc", "dec"):
        for s_idx, _ in layer_map:
            proj[f"{side}.{s_idx}"] = Tensor(
                rng.fork(f"wh-{side}-{s_idx}").normal((d_student, d_teacher), std=0.05),
                requires_grad=True)
    return proj


def hidden_loss(h_student, h_teacher, w_h: dict[str, Tensor],
                layer_map: list[tuple[int, int]],
                src_mask: np.ndarray | None = None,
                tgt_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared distance between projected student hidden states and
    teacher hidden states over the mapped encoder and decoder layers, with
    padding positions masked out."""
    terms = []
    for side, s_states, t_states, mask in (
            ("enc", h_student.encoder_states, h_teacher.encoder_states, src_mask),
            ("dec", h_student.decoder_states, h_teacher.decoder_states, tgt_mask)):
        if not s_states or not t_states:
            continue
        for s_idx, t_idx in layer_map:
            w = w_h[f"{side}.{s_idx}"]
            s_state = s_states[s_idx]
            t_state = t_states[t_idx]
            if s_state.shape[-1] != w.shape[0] or w.shape[1] != t_state.shape[-1]:
                raise ValueError("projection dimensions do not match the traces")
            diff = C.matmul(s_state, w) - t_state
            sq = diff * diff
            if mask is None:
                terms.append(sq.mean(axis=0).mean(axis=0).mean(axis=0)
                             if sq.ndim == 3 else sq.mean())
            else:
                m = np.asarray(mask, bool)
                count = int(m.sum()) * t_state.shape[-1]
                if count == 0:
                    raise ValueError("hidden_loss has no unmasked positions")
                terms.append((sq * Tensor(m[..., None].astype(float))).sum()
                             * (1.0 / count))
    if not terms:
        raise ValueError("hidden_loss received empty traces")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def kd_total(divg, hidd, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """L_KD = alpha * divergence + beta * hidden-state loss."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be nonnegative")
    divg = divg if isinstance(divg, Tensor) else Tensor(divg)
    hidd = hidd if isinstance(hidd, Tensor) else Tensor(hidd)
    return divg * alpha + hidd * beta
