"""Loss operations: closed forms, enumeration/brute-force oracles, Gumbel
limit behavior, and finite-difference gradient checks."""

import math
import warnings

import numpy as np
import pytest

from dfkdt3 import compute as C
from dfkdt3.compute import RngStream, Tensor, backward
from dfkdt3.losses import (
    ContrastiveConfig,
    GumbelConfig,
    SpanRep,
    batch_class_probabilities,
    class_probability,
    contrastive_span_loss,
    diversity_loss,
    generator_objective,
    gumbel_sample,
    hidden_loss,
    init_hidden_projections,
    kd_divergence,
    kd_total,
    make_layer_map,
    specificity_loss,
)
from dfkdt3.textmodel import HiddenTrace
from gradcheck import check_gradients

RNG = np.random.default_rng(91)


class FakeSchema:
    def __init__(self, label_token_ids):
        self.label_token_ids = label_token_ids
        self.labels = [str(i) for i in range(len(label_token_ids))]


# --- specificity -----------------------------------------------------------------

def test_specificity_confident_teacher_near_zero():
    logits = np.full((2, 3, 5), -20.0)
    logits[:, :, 2] = 20.0
    assert specificity_loss(Tensor(logits)).data < 1e-8

def test_specificity_uniform_closed_form():
    loss = specificity_loss(Tensor(np.zeros((3, 2, 4))))
    assert abs(loss.data - math.log(4.0)) < 1e-12

def test_specificity_masks_padding():
    logits = RNG.normal(size=(2, 4, 5))
    mask = np.array([[True, True, False, False], [True, False, False, False]])
    got = specificity_loss(Tensor(logits), mask)
    rows = [logits[0, 0], logits[0, 1], logits[1, 0]]
    want = np.mean([-np.log(np.exp(r - r.max()).max() / np.exp(r - r.max()).sum())
                    for r in rows])
    assert abs(got.data - want) < 1e-12

def test_specificity_empty_batch_rejected():
    with pytest.raises(ValueError):
        specificity_loss(Tensor(np.zeros((0, 2, 4))))
    with pytest.raises(ValueError):
        specificity_loss(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), bool))

@pytest.mark.parametrize("trial", range(20))
def test_specificity_gradcheck(trial):
    arrays = {"x": RNG.normal(size=(2, 3, 5))}
    err = check_gradients(lambda t: specificity_loss(t["x"]), arrays)
    assert err < 1e-4


# --- class probability -------------------------------------------------------------

def test_class_probability_single_token():
    probs = np.zeros((2, 6))
    probs[0, 3] = 0.9
    schema = FakeSchema([[3]])
    out = class_probability(Tensor(probs), schema)
    assert abs(out.data[0] - 0.9) < 1e-15

def test_class_probability_product():
    probs = np.zeros((2, 6))
    probs[0, 3] = 0.9
    probs[1, 4] = 0.8
    out = class_probability(Tensor(probs), FakeSchema([[3, 4]]))
    assert abs(out.data[0] - 0.72) < 1e-15

def test_class_probability_enumeration_oracle():
    probs = RNG.uniform(0.01, 1.0, size=(2, 7))
    label_ids = [[2], [4, 5], [4, 6]]
    got = class_probability(Tensor(probs), FakeSchema(label_ids)).data
    # independent enumeration: walk each label's tokens, multiply explicitly
    want = []
    for seq in label_ids:
        p = 1.0
        for step, tok in enumerate(seq):
            p *= probs[step, tok]
        want.append(p)
    assert np.abs(got - np.asarray(want)).max() < 1e-12

def test_class_probability_window_too_short():
    with pytest.raises(ValueError):
        class_probability(Tensor(np.zeros((1, 5))), FakeSchema([[1, 2]]))

def test_class_probability_gradcheck():
    arrays = {"p": RNG.uniform(0.05, 1.0, size=(3, 6))}
    schema = FakeSchema([[0], [1, 2], [3, 4, 5]])
    err = check_gradients(
        lambda t: class_probability(t["p"], schema).sum(), arrays)
    assert err < 1e-6


# --- diversity -----------------------------------------------------------------------

def test_diversity_closed_forms():
    assert abs(diversity_loss(Tensor([[0.5, 0.5]])).data - math.log(0.5)) < 1e-10
    assert abs(diversity_loss(Tensor([[1.0, 0.0]])).data - 0.0) < 1e-10
    uniform = np.full((4, 5), 0.2)
    assert abs(diversity_loss(Tensor(uniform)).data + math.log(5.0)) < 1e-10

def test_diversity_uniform_is_minimum():
    n = 5
    lo = -math.log(n)
    for _ in range(50):
        vec = RNG.uniform(0.0, 1.0, size=(3, n))
        loss = diversity_loss(Tensor(vec)).data
        assert lo - 1e-12 <= loss <= 1e-12

def test_diversity_permutation_invariant():
    p = RNG.uniform(0.0, 1.0, size=(4, 6))
    perm = RNG.permutation(6)
    a = diversity_loss(Tensor(p)).data
    b = diversity_loss(Tensor(p[:, perm])).data
    assert abs(a - b) < 1e-12

def test_diversity_contract_errors():
    with pytest.raises(ValueError):
        diversity_loss(Tensor(np.zeros((3, 4))))
    with pytest.raises(ValueError):
        diversity_loss(Tensor([[-0.1, 0.5]]))

def test_diversity_gradcheck():
    arrays = {"p": RNG.uniform(0.05, 1.0, size=(4, 3))}
    err = check_gradients(lambda t: diversity_loss(t["p"]), arrays)
    assert err < 1e-6


# --- combined objective ----------------------------------------------------------------

def test_generator_objective_is_sum_of_terms():
    logits = RNG.normal(size=(3, 2, 6))
    p_batch = RNG.uniform(0.01, 1.0, size=(3, 4))
    combined = generator_objective(Tensor(logits), Tensor(p_batch))
    separate = specificity_loss(Tensor(logits)).data + diversity_loss(Tensor(p_batch)).data
    assert abs(combined.data - separate) < 1e-12

def test_generator_objective_confident_uniform():
    logits = np.full((2, 1, 4), -20.0)
    logits[:, :, 1] = 20.0
    p_batch = np.full((2, 3), 1.0 / 3.0)
    out = generator_objective(Tensor(logits), Tensor(p_batch))
    assert abs(out.data - (-math.log(3.0))) < 1e-6

def test_generator_objective_single_class_degenerates():
    logits = RNG.normal(size=(2, 2, 5))
    p_batch = RNG.uniform(0.1, 1.0, size=(2, 1))
    out = generator_objective(Tensor(logits), Tensor(p_batch))
    assert abs(out.data - specificity_loss(Tensor(logits)).data) < 1e-12


# --- gumbel ---------------------------------------------------------------------------

def test_gumbel_config_validation():
    with pytest.raises(ValueError):
        GumbelConfig(sigma=0.0)
    with pytest.raises(ValueError):
        GumbelConfig(tau=-1.0)

def test_gumbel_huge_sigma_matches_argmax():
    rng = RngStream(5)
    cfg = GumbelConfig(sigma=1e9, tau=1.0, hard=True)
    h = Tensor(RNG.normal(size=8))
    want = int(np.argmax(h.data))
    for _ in range(200):
        y = gumbel_sample(h, cfg, rng)
        assert int(np.argmax(y.data)) == want

def test_gumbel_tiny_sigma_near_uniform():
    rng = RngStream(6)
    cfg = GumbelConfig(sigma=1e-9, tau=1.0, hard=True)
    h = Tensor(RNG.normal(size=8) * 3.0)
    counts = np.zeros(8)
    draws = 4000
    for _ in range(draws):
        counts[int(np.argmax(gumbel_sample(h, cfg, rng).data))] += 1
    tv = 0.5 * np.abs(counts / draws - 1.0 / 8).sum()
    assert tv < 0.08

def test_gumbel_hard_is_one_hot():
    y = gumbel_sample(Tensor(RNG.normal(size=10)), GumbelConfig(), RngStream(9))
    assert abs(y.data.sum() - 1.0) < 1e-12
    assert (y.data != 0).sum() == 1

def test_gumbel_deterministic_given_stream():
    h = Tensor(RNG.normal(size=6))
    a = gumbel_sample(h, GumbelConfig(), RngStream(3, counter=2))
    b = gumbel_sample(h, GumbelConfig(), RngStream(3, counter=2))
    assert np.array_equal(a.data, b.data)

def test_gumbel_soft_gradcheck_fixed_noise():
    cfg = GumbelConfig(sigma=2.0, tau=0.7, hard=False)
    arrays = {"h": RNG.normal(size=6)}
    err = check_gradients(
        lambda t: (gumbel_sample(t["h"], cfg, RngStream(4, counter=0))
                   * Tensor(np.arange(6.0))).sum(),
        arrays)
    assert err < 1e-6

def test_gumbel_straight_through_grad_equals_soft_grad():
    h_arr = RNG.normal(size=6)
    w = Tensor(np.arange(6.0))
    grads = []
    for hard in (True, False):
        h = Tensor(h_arr.copy(), requires_grad=True)
        y = gumbel_sample(h, GumbelConfig(hard=hard), RngStream(8, counter=0))
        backward((y * w).sum())
        grads.append(h.grad.copy())
    assert np.abs(grads[0] - grads[1]).max() < 1e-15

def test_gumbel_batched_rows():
    y = gumbel_sample(Tensor(RNG.normal(size=(4, 7))), GumbelConfig(), RngStream(2))
    assert y.shape == (4, 7)
    assert np.abs(y.data.sum(axis=-1) - 1.0).max() < 1e-12
    assert ((y.data != 0).sum(axis=-1) == 1).all()


# --- contrastive span loss -------------------------------------------------------------

def brute_force_contrastive(vectors: np.ndarray, labels, temperature: float) -> float:
    """Naive enumeration with all negatives (no sampling, no tape)."""
    def cos(a, b):
        return (a * b).sum() / (math.sqrt((a * a).sum() + 1e-12)
                                * math.sqrt((b * b).sum() + 1e-12))

    total = 0.0
    label_set = sorted(set(labels))
    for lab in label_set:
        members = [i for i, l in enumerate(labels) if l == lab]
        if len(members) < 2:
            continue
        others = [i for i, l in enumerate(labels) if l != lab]
        for a in members:
            for p in members:
                if p == a:
                    continue
                num = math.exp(cos(vectors[a], vectors[p]) / temperature)
                denom = num
                for m in others:
                    denom += math.exp(cos(vectors[a], vectors[m]) / temperature)
                total += math.log(num / denom) / (len(members) - 1)
    return -total


def _reps(vectors, labels):
    return [SpanRep(Tensor(v, requires_grad=True), int(l), (0, 0))
            for v, l in zip(vectors, labels)]


def test_contrastive_hand_case():
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    e2 = np.array([0.0, 1.0, 0.0, 0.0])
    vectors = np.stack([e1, e1, e2, e2])
    labels = [0, 0, 1, 1]
    cfg = ContrastiveConfig(temperature=1.0, negative_ratio=None)
    got = contrastive_span_loss(_reps(vectors, labels), cfg).data
    want = 4.0 * math.log((math.e + 2.0) / math.e)  # per-anchor ln(e/(e+2))
    assert abs(got - want) < 1e-9
    assert abs(got - brute_force_contrastive(vectors, labels, 1.0)) < 1e-10


def test_contrastive_identical_reps_maximal_confusion():
    vec = RNG.normal(size=5)
    vectors = np.stack([vec] * 6)
    labels = [0, 0, 0, 1, 1, 1]
    cfg = ContrastiveConfig(temperature=0.5, negative_ratio=None)
    got = contrastive_span_loss(_reps(vectors, labels), cfg).data
    want = brute_force_contrastive(vectors, labels, 0.5)
    assert abs(got - want) < 1e-10


@pytest.mark.parametrize("trial", range(25))
def test_contrastive_matches_brute_force(trial):
    rng = np.random.default_rng(300 + trial)
    n = int(rng.integers(4, 13))
    labels = rng.integers(0, 3, size=n).tolist()
    vectors = rng.normal(size=(n, 4))
    cfg = ContrastiveConfig(temperature=0.5, negative_ratio=None)
    if not any(labels.count(l) >= 2 for l in set(labels)):
        labels[1] = labels[0]
    got = contrastive_span_loss(_reps(vectors, labels), cfg).data
    want = brute_force_contrastive(vectors, labels, 0.5)
    assert abs(got - want) < 1e-10


def test_contrastive_no_pairs_warns_zero():
    vectors = RNG.normal(size=(3, 4))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = contrastive_span_loss(_reps(vectors, [0, 1, 2]),
                                    ContrastiveConfig(negative_ratio=None))
    assert out.data == 0.0
    assert caught


def test_contrastive_negative_sampling_bounded_and_seeded():
    rng_data = np.random.default_rng(12)
    vectors = rng_data.normal(size=(12, 4))
    labels = [0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]
    cfg = ContrastiveConfig(temperature=0.5, negative_ratio=1)
    a = contrastive_span_loss(_reps(vectors, labels), cfg, RngStream(4)).data
    b = contrastive_span_loss(_reps(vectors, labels), cfg, RngStream(4)).data
    assert a == b
    full = contrastive_span_loss(
        _reps(vectors, labels), ContrastiveConfig(temperature=0.5, negative_ratio=None)).data
    assert a != full


def test_contrastive_gradcheck():
    rng = np.random.default_rng(77)
    labels = [0, 0, 1, 1, 2, 2]
    cfg = ContrastiveConfig(temperature=0.8, negative_ratio=None)
    arrays = {f"v{i}": rng.normal(size=4) for i in range(6)}

    def build(t):
        reps = [SpanRep(t[f"v{i}"], labels[i], (0, 0)) for i in range(6)]
        return contrastive_span_loss(reps, cfg)

    assert check_gradients(build, arrays) < 1e-4


def test_span_rep_validates_span():
    with pytest.raises(ValueError):
        SpanRep(Tensor(np.zeros(3)), 0, (4, 2))


# --- kd divergence -----------------------------------------------------------------------

def test_kd_divergence_identical_is_zero():
    logits = RNG.normal(size=(2, 3, 5))
    out = kd_divergence(Tensor(logits), Tensor(logits.copy()))
    assert abs(out.data) < 1e-14

def test_kd_divergence_closed_form_ln2():
    teacher = Tensor(np.array([[[40.0, -40.0]]]))
    student = Tensor(np.array([[[0.0, 0.0]]]))
    out = kd_divergence(student, teacher)
    assert abs(out.data - math.log(2.0)) < 1e-10

def test_kd_divergence_nonnegative():
    for _ in range(20):
        s = Tensor(RNG.normal(size=(2, 2, 6)))
        t = Tensor(RNG.normal(size=(2, 2, 6)))
        assert kd_divergence(s, t).data >= 0.0

def test_kd_divergence_shape_mismatch():
    with pytest.raises(ValueError):
        kd_divergence(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4))))

def test_kd_divergence_mask():
    s = RNG.normal(size=(2, 2, 4))
    t = RNG.normal(size=(2, 2, 4))
    mask = np.array([[True, False], [True, True]])
    got = kd_divergence(Tensor(s), Tensor(t), mask).data

    def kl(si, ti):
        ps = np.exp(si - si.max()); ps /= ps.sum()
        pt = np.exp(ti - ti.max()); pt /= pt.sum()
        return (pt * (np.log(pt) - np.log(ps))).sum()

    want = np.mean([kl(s[0, 0], t[0, 0]), kl(s[1, 0], t[1, 0]), kl(s[1, 1], t[1, 1])])
    assert abs(got - want) < 1e-12

@pytest.mark.parametrize("trial", range(20))
def test_kd_divergence_gradcheck(trial):
    arrays = {"s": RNG.normal(size=(2, 2, 5)), "t": RNG.normal(size=(2, 2, 5))}
    err = check_gradients(
        lambda x: kd_divergence(x["s"], x["t"], temperature=2.0), arrays)
    assert err < 1e-4


# --- hidden loss ---------------------------------------------------------------------------

def _trace(states_enc, states_dec=()):
    return HiddenTrace([Tensor(s, requires_grad=True) for s in states_enc],
                       [Tensor(s, requires_grad=True) for s in states_dec])

def test_hidden_loss_exact_projection_zero():
    hs = RNG.normal(size=(2, 3, 4))
    w = RNG.normal(size=(4, 6))
    ht = hs @ w
    wh = {"enc.0": Tensor(w, requires_grad=True)}
    out = hidden_loss(_trace([hs]), _trace([ht]), wh, [(0, 0)])
    assert abs(out.data) < 1e-18

def test_hidden_loss_scalar_case_unit():
    hs = np.zeros((1, 1, 1))
    ht = np.full((1, 1, 1), -1.0)
    wh = {"enc.0": Tensor(np.ones((1, 1)))}
    out = hidden_loss(_trace([hs]), _trace([ht]), wh, [(0, 0)])
    assert abs(out.data - 1.0) < 1e-15

def test_hidden_loss_dimension_mismatch():
    wh = {"enc.0": Tensor(np.zeros((3, 6)))}
    with pytest.raises(ValueError):
        hidden_loss(_trace([np.zeros((1, 2, 4))]), _trace([np.zeros((1, 2, 6))]),
                    wh, [(0, 0)])

def test_hidden_loss_gradcheck():
    arrays = {"hs": RNG.normal(size=(2, 2, 3)), "w": RNG.normal(size=(3, 4)),
              "ht": RNG.normal(size=(2, 2, 4))}

    def build(t):
        return hidden_loss(
            HiddenTrace([t["hs"]], []), HiddenTrace([t["ht"]], []),
            {"enc.0": t["w"]}, [(0, 0)])

    assert check_gradients(build, arrays) < 1e-4

def test_hidden_loss_masked():
    hs = RNG.normal(size=(1, 3, 2))
    ht = RNG.normal(size=(1, 3, 2))
    wh = {"enc.0": Tensor(np.eye(2))}
    mask = np.array([[True, True, False]])
    got = hidden_loss(_trace([hs]), _trace([ht]), wh, [(0, 0)], src_mask=mask).data
    want = ((hs[0, :2] - ht[0, :2]) ** 2).sum() / (2 * 2)
    assert abs(got - want) < 1e-12


# --- kd total -------------------------------------------------------------------------------

def test_kd_total_paper_weights():
    assert abs(kd_total(0.3, 0.2, 1.0, 1.0).data - 0.5) < 1e-15

def test_kd_total_beta_zero():
    assert abs(kd_total(0.7, 123.0, 1.0, 0.0).data - 0.7) < 1e-15

def test_kd_total_linear_in_alpha():
    for a in (0.0, 0.5, 2.0):
        assert abs(kd_total(0.4, 0.1, a, 1.0).data - (a * 0.4 + 0.1)) < 1e-15

def test_kd_total_rejects_negative_weights():
    with pytest.raises(ValueError):
        kd_total(0.1, 0.1, -1.0, 1.0)


# --- layer map ------------------------------------------------------------------------------

def test_make_layer_map_uniform_spacing():
    assert make_layer_map(2, 3) == [(0, 1), (1, 2)]
    assert make_layer_map(3, 3) == [(0, 0), (1, 1), (2, 2)]
    assert make_layer_map(2, 6) == [(0, 2), (1, 5)]
    student_side = [s for s, _ in make_layer_map(4, 9)]
    assert len(set(student_side)) == 4

def test_init_hidden_projections_shapes():
    proj = init_hidden_projections([(0, 1), (1, 2)], 4, 8, RngStream(3))
    assert set(proj) == {"enc.0", "enc.1", "dec.0", "dec.1"}
    assert all(p.shape == (4, 8) for p in proj.values())
    a = init_hidden_projections([(0, 1)], 4, 8, RngStream(3))
    b = init_hidden_projections([(0, 1)], 4, 8, RngStream(3))
    assert np.array_equal(a["enc.0"].data, b["enc.0"].data)


def test_batch_class_probabilities_shape():
    probs = RNG.uniform(0.01, 1.0, size=(3, 2, 6))
    schema = FakeSchema([[0], [1, 2]])
    out = batch_class_probabilities(Tensor(probs), schema)
    assert out.shape == (3, 2)
