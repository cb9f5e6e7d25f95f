import math

import numpy as np
import pytest

from driftadapt.autodiff import Parameter, constant, scaled_softmax, tsum
from driftadapt.losses import (
    LossWeights,
    consistency_loss,
    contrastive_loss,
    entropy_loss,
    kd_loss,
    mutual_information,
    mutual_learning_loss,
    pairwise_indicator,
    total_loss,
)

# ---------------------------------------------------------------------------
# independent oracles: explicit set construction and direct scalar expression
# evaluation, no shared code with the implementations under test


def oracle_indicator(p, k, n):
    b, c = p.shape

    def top(row, m):
        order = sorted(range(c), key=lambda j: (-row[j], j))
        return set(order[:m])

    out = np.zeros((b, b), dtype=np.int8)
    for i in range(b):
        for j in range(b):
            if i == j:
                continue
            if top(p[i], k) & top(p[j], k):
                out[i, j] = 1
            elif not (top(p[i], n) & top(p[j], n)):
                out[i, j] = -1
    return out


def oracle_mutual_information(p, q, eps=1e-8):
    b, c = len(p), len(p[0])
    joint = [[0.0] * c for _ in range(c)]
    for i in range(b):
        for a in range(c):
            for bb in range(c):
                joint[a][bb] += p[i][a] * q[i][bb]
    joint = [[v / b for v in row] for row in joint]
    joint = [[(joint[a][bb] + joint[bb][a]) / 2.0 for bb in range(c)] for a in range(c)]
    total = sum(sum(row) for row in joint)
    joint = [[v / total for v in row] for row in joint]
    rows = [sum(joint[a]) for a in range(c)]
    cols = [sum(joint[a][bb] for a in range(c)) for bb in range(c)]
    info = 0.0
    for a in range(c):
        for bb in range(c):
            info += joint[a][bb] * (
                math.log(max(joint[a][bb], eps))
                - math.log(max(rows[a], eps))
                - math.log(max(cols[bb], eps))
            )
    return info


def oracle_contrastive(feats, ind, mode):
    b = len(feats)

    def cos(u, v):
        nu = math.sqrt(sum(x * x for x in u))
        nv = math.sqrt(sum(x * x for x in v))
        return sum(a * bb for a, bb in zip(u, v)) / (nu * nv)

    sim = [[cos(feats[i], feats[j]) for j in range(b)] for i in range(b)]

    def softmax_entry(i, j):
        denom = sum(math.exp(sim[i][kk]) for kk in range(b) if kk != i)
        return math.exp(sim[i][j]) / denom

    if mode == "separated":
        total = 0.0
        active = 0
        for i in range(b):
            pos = [j for j in range(b) if ind[i][j] == 1]
            neg = [j for j in range(b) if ind[i][j] == -1]
            if not pos and not neg:
                continue
            active += 1
            if pos:
                total += -(1.0 / len(pos)) * sum(math.log(softmax_entry(i, j)) for j in pos)
            if neg:
                total += (1.0 / len(neg)) * sum(math.log(softmax_entry(i, j)) for j in neg)
        return total / active if active else 0.0
    total = 0.0
    for i in range(b):
        row_sum = sum(int(v) for v in ind[i])
        if row_sum <= 0:
            continue
        total += -sum(
            int(ind[i][j]) * math.log(softmax_entry(i, j)) for j in range(b) if ind[i][j] != 0
        ) / row_sum
    return total


def oracle_pseudo_ce(probs, labels, eps=1e-8):
    return -sum(math.log(max(probs[i][labels[i]], eps)) for i in range(len(labels))) / len(labels)


def _rand_probs(rng, b, c):
    p = rng.random((b, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# pairwise indicator


def test_indicator_shared_argmax_is_positive():
    p = np.array([[0.1, 0.1, 0.8], [0.2, 0.1, 0.7]])
    ind = pairwise_indicator(p, 1, 2)
    assert ind.matrix[0, 1] == 1


def test_indicator_disjoint_topn_is_negative():
    p = np.array([[0.4, 0.4, 0.1, 0.1], [0.05, 0.05, 0.45, 0.45]])
    ind = pairwise_indicator(p, 1, 2)
    assert ind.matrix[0, 1] == -1


def test_indicator_ambiguous_is_zero():
    # top-1 sets differ, top-2 sets share class 1
    p = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
    ind = pairwise_indicator(p, 1, 2)
    assert ind.matrix[0, 1] == 0


def test_indicator_diagonal_zero_and_symmetric():
    rng = np.random.default_rng(0)
    p = _rand_probs(rng, 6, 5)
    m = pairwise_indicator(p, 2, 4).matrix
    assert (np.diag(m) == 0).all()
    assert (m == m.T).all()


def test_indicator_validates_k_n():
    p = np.full((2, 3), 1 / 3)
    with pytest.raises(ValueError):
        pairwise_indicator(p, 2, 2)
    with pytest.raises(ValueError):
        pairwise_indicator(p, 1, 4)


def test_indicator_matches_oracle_exhaustively(any_backend):
    rng = np.random.default_rng(42)
    for _ in range(200):
        b = int(rng.integers(2, 9))
        c = int(rng.integers(3, 7))
        k = int(rng.integers(1, c))
        n = int(rng.integers(k + 1, c + 1))
        p = _rand_probs(rng, b, c)
        got = pairwise_indicator(p, k, n).matrix
        np.testing.assert_array_equal(got, oracle_indicator(p, k, n))


def test_indicator_topk_monotonicity():
    # growing k can only add positive pairs
    rng = np.random.default_rng(7)
    for _ in range(50):
        c = int(rng.integers(4, 7))
        n = c
        k = int(rng.integers(1, n - 1))
        k2 = int(rng.integers(k, n))
        p = _rand_probs(rng, int(rng.integers(2, 8)), c)
        small = pairwise_indicator(p, k, n).matrix
        large = pairwise_indicator(p, k2, n).matrix
        assert ((small == 1) <= (large == 1)).all()


# ---------------------------------------------------------------------------
# contrastive


def test_contrastive_no_pairs_is_exact_zero():
    feats = Parameter(np.random.default_rng(0).normal(size=(4, 3)))
    ind = pairwise_indicator(np.full((4, 5), 0.2), 1, 5)  # everything overlaps -> all +1
    zero_ind = ind
    zero_ind.matrix = np.zeros((4, 4), dtype=np.int8)
    loss = contrastive_loss(feats, zero_ind)
    assert loss.value == 0.0
    loss.backward()
    assert (feats.grad == 0).all()


def test_contrastive_two_identical_rows():
    # B=2: softmax over the single other element is 1, so log terms vanish
    feats = Parameter(np.array([[1.0, 2.0], [1.0, 2.0]]))
    ind = pairwise_indicator(np.array([[0.9, 0.1], [0.8, 0.2]]), 1, 2)
    assert ind.matrix[0, 1] == 1
    loss = contrastive_loss(feats, ind, "separated")
    assert loss.value == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("mode", ["separated", "literal"])
def test_contrastive_matches_bruteforce(mode, any_backend):
    rng = np.random.default_rng(3)
    for _ in range(50):
        b = int(rng.integers(2, 7))
        d = int(rng.integers(2, 6))
        c = int(rng.integers(3, 6))
        feats = Parameter(rng.normal(size=(b, d)))
        ind = pairwise_indicator(_rand_probs(rng, b, c), 1, int(rng.integers(2, c + 1)))
        got = contrastive_loss(feats, ind, mode).value
        want = oracle_contrastive(feats.data.tolist(), ind.matrix.tolist(), mode)
        assert got == pytest.approx(want, abs=1e-9)


def test_contrastive_positive_pair_similarity_rises():
    # one SGD step on an isolated positive pair must pull the pair together
    from driftadapt.engine import OptimizerState, sgd_momentum_step
    from driftadapt.losses import PairIndicator
    from driftadapt.autodiff import cosine_similarity_matrix

    for seed in range(20):
        rng = np.random.default_rng(seed)
        feats = Parameter(rng.normal(size=(4, 6)))
        mat = np.zeros((4, 4), dtype=np.int8)
        mat[0, 1] = mat[1, 0] = 1
        before = cosine_similarity_matrix(feats, feats).data[0, 1]
        loss = contrastive_loss(feats, PairIndicator(mat, 1, 2), "separated")
        loss.backward()
        opt = OptimizerState([feats], learning_rate=0.05, momentum=0.0)
        sgd_momentum_step([feats], opt)
        after = cosine_similarity_matrix(feats, feats).data[0, 1]
        assert after > before


def test_contrastive_batch_too_small():
    feats = Parameter(np.ones((1, 3)))
    from driftadapt.losses import PairIndicator

    with pytest.raises(ValueError):
        contrastive_loss(feats, PairIndicator(np.zeros((1, 1), np.int8), 1, 2))


# ---------------------------------------------------------------------------
# knowledge distillation


def test_kd_identical_is_zero():
    f = np.random.default_rng(0).normal(size=(3, 4))
    loss = kd_loss(Parameter(f.copy()), constant(f.copy()))
    assert loss.value == 0.0


def test_kd_antipodal_rows():
    u = np.array([[0.6, 0.8], [0.0, 1.0]])
    loss = kd_loss(Parameter(u), constant(-u))
    assert loss.value == pytest.approx(2.0, abs=1e-12)


def test_kd_orthogonal_rows():
    loss = kd_loss(Parameter(np.array([[1.0, 0.0]])), constant(np.array([[0.0, 1.0]])))
    assert loss.value == pytest.approx(math.sqrt(2.0), abs=1e-12)


def test_kd_nonnegative_and_gradient_side(any_backend):
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = Parameter(rng.normal(size=(5, 4)))
        s = Parameter(rng.normal(size=(5, 4)))
        loss = kd_loss(t, s)
        assert loss.value >= 0.0
        loss.backward()
        assert (s.grad == 0).all()  # source side detached
        assert np.abs(t.grad).sum() > 0


def test_kd_zero_norm_row_errors():
    with pytest.raises(ValueError, match="row 0"):
        kd_loss(Parameter(np.zeros((1, 3))), constant(np.ones((1, 3))))


# ---------------------------------------------------------------------------
# mutual information


def test_mi_balanced_one_hot_is_log_c():
    for c in (2, 3, 5):
        eye = np.eye(c)
        p = np.vstack([eye] * 2)
        got = mutual_information(constant(p), constant(p)).value
        assert got == pytest.approx(math.log(c), abs=1e-9)


def test_mi_uniform_rows_is_zero():
    p = np.full((6, 4), 0.25)
    assert mutual_information(constant(p), constant(p)).value == pytest.approx(0.0, abs=1e-9)


def test_mi_single_one_hot_degenerate():
    p = np.zeros((1, 4))
    p[0, 2] = 1.0
    assert mutual_information(constant(p), constant(p)).value == pytest.approx(0.0, abs=1e-9)


def test_mi_rejects_non_probability_rows():
    bad = np.full((2, 3), 0.5)
    good = np.full((2, 3), 1 / 3)
    with pytest.raises(ValueError, match="row 0"):
        mutual_information(constant(bad), constant(good))


def test_mi_matches_bruteforce(any_backend):
    rng = np.random.default_rng(9)
    for _ in range(30):
        b = int(rng.integers(1, 9))
        c = int(rng.integers(2, 7))
        p = _rand_probs(rng, b, c)
        q = _rand_probs(rng, b, c)
        got = mutual_information(constant(p), constant(q)).value
        want = oracle_mutual_information(p.tolist(), q.tolist())
        assert got == pytest.approx(want, abs=1e-9)


def test_mi_symmetric_and_nonnegative():
    rng = np.random.default_rng(11)
    for _ in range(25):
        p = _rand_probs(rng, 6, 4)
        q = _rand_probs(rng, 6, 4)
        ab = mutual_information(constant(p), constant(q)).value
        ba = mutual_information(constant(q), constant(p)).value
        assert abs(ab - ba) <= 1e-9
        assert ab >= -1e-9


# ---------------------------------------------------------------------------
# mutual learning


def test_ml_perfect_agreement_zero():
    p_t = constant(np.array([[0.05, 0.9, 0.05], [0.8, 0.1, 0.1]]))
    p_ssl = constant(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))
    ssl_term, _ = mutual_learning_loss(p_ssl, p_t)
    assert ssl_term.value == pytest.approx(0.0, abs=1e-12)


def test_ml_uniform_ssl_gives_log_c():
    c = 5
    p_t = constant(_rand_probs(np.random.default_rng(0), 4, c))
    p_ssl = constant(np.full((4, c), 1.0 / c))
    ssl_term, _ = mutual_learning_loss(p_ssl, p_t)
    assert ssl_term.value == pytest.approx(math.log(c), abs=1e-9)


def test_ml_ssl_term_matches_bruteforce():
    rng = np.random.default_rng(13)
    p_t = _rand_probs(rng, 8, 5)
    p_ssl = _rand_probs(rng, 8, 5)
    ssl_term, _ = mutual_learning_loss(constant(p_ssl), constant(p_t))
    want = oracle_pseudo_ce(p_ssl.tolist(), np.argmax(p_t, axis=1).tolist())
    assert ssl_term.value == pytest.approx(want, abs=1e-9)


def test_ml_target_term_sign_convention():
    rng = np.random.default_rng(14)
    p_t = constant(_rand_probs(rng, 6, 4))
    p_ssl = constant(_rand_probs(rng, 6, 4))
    _, maximize = mutual_learning_loss(p_ssl, p_t, "maximize")
    _, literal = mutual_learning_loss(p_ssl, p_t, "literal")
    assert maximize.value == pytest.approx(-literal.value, abs=1e-12)
    assert literal.value >= -1e-9  # MI itself is non-negative


def test_ml_gradient_routing_exact_zeros():
    rng = np.random.default_rng(15)
    ssl_logits = Parameter(rng.normal(size=(5, 4)), "ssl")
    t_logits = Parameter(rng.normal(size=(5, 4)), "target")
    p_ssl = scaled_softmax(ssl_logits, 3.0)
    p_t = scaled_softmax(t_logits, 3.0)
    ssl_term, target_term = mutual_learning_loss(p_ssl, p_t)
    ssl_term.backward()
    assert (t_logits.grad == 0).all()  # "loss for SSL" never reaches the target
    assert np.abs(ssl_logits.grad).sum() > 0
    ssl_logits.reset_grad()
    t_logits.reset_grad()
    target_term.backward()
    assert (ssl_logits.grad == 0).all()  # "loss for target" sees detached source
    assert np.abs(t_logits.grad).sum() > 0


# ---------------------------------------------------------------------------
# total


def test_total_collapses_to_cl():
    rng = np.random.default_rng(16)
    feats = Parameter(rng.normal(size=(4, 3)))
    ind = pairwise_indicator(_rand_probs(rng, 4, 4), 1, 3)
    cl = contrastive_loss(feats, ind)
    w = LossWeights(lambda_kd=0.0, lambda_ml=0.0)
    combined = total_loss(cl, kd_loss(feats, constant(rng.normal(size=(4, 3)))),
                          None, w)
    # lambda_kd = 0 still multiplies into the graph; value must equal cl exactly
    assert combined.value == cl.value


def test_total_default_weights_are_best_reported():
    w = LossWeights()
    assert w.lambda_kd == 0.01
    assert w.lambda_ml == 0.4


def test_total_all_disabled_zero_loss_zero_grads():
    rng = np.random.default_rng(17)
    feats = Parameter(rng.normal(size=(4, 3)))
    ind = pairwise_indicator(_rand_probs(rng, 4, 4), 1, 3)
    w = LossWeights(enable_cl=False, enable_kd=False, enable_ml=False)
    loss = total_loss(contrastive_loss(feats, ind), None, None, w)
    assert loss.value == 0.0
    assert not loss.requires_grad
    loss.backward()
    assert (feats.grad == 0).all()


def test_total_rejects_negative_weights():
    with pytest.raises(ValueError):
        total_loss(None, None, None, LossWeights(lambda_kd=-0.1))


# ---------------------------------------------------------------------------
# baselines


def test_entropy_one_hot_zero():
    p = np.zeros((3, 4))
    p[np.arange(3), [0, 2, 1]] = 1.0
    assert entropy_loss(constant(p)).value == 0.0


def test_entropy_uniform_log_c():
    assert entropy_loss(constant(np.full((2, 6), 1 / 6))).value == pytest.approx(
        math.log(6), abs=1e-12
    )


def test_entropy_half_half():
    assert entropy_loss(constant(np.array([[0.5, 0.5]]))).value == pytest.approx(
        math.log(2), abs=1e-12
    )


def test_consistency_matching_one_hot_zero():
    p = np.zeros((2, 3))
    p[:, 1] = 1.0
    assert consistency_loss(constant(p), p).value == 0.0


def test_consistency_uniform_student():
    c = 4
    student = constant(np.full((3, c), 1.0 / c))
    teacher = _rand_probs(np.random.default_rng(0), 3, c)
    assert consistency_loss(student, teacher).value == pytest.approx(math.log(c), abs=1e-9)


def test_consistency_matches_bruteforce():
    rng = np.random.default_rng(19)
    student = _rand_probs(rng, 4, 5)
    teacher = _rand_probs(rng, 4, 5)
    got = consistency_loss(constant(student), teacher).value
    want = oracle_pseudo_ce(student.tolist(), np.argmax(teacher, axis=1).tolist())
    assert got == pytest.approx(want, abs=1e-9)


def test_cl_kd_leave_ssl_classifier_untouched():
    # routing: contrastive and distillation act on target features only
    rng = np.random.default_rng(20)
    ssl_protos = Parameter(rng.normal(size=(4, 3)), "ssl_protos")
    feats = Parameter(rng.normal(size=(5, 3)), "feats")
    ind = pairwise_indicator(_rand_probs(rng, 5, 4), 1, 3)
    loss = total_loss(
        contrastive_loss(feats, ind),
        kd_loss(feats, constant(rng.normal(size=(5, 3)))),
        None,
        LossWeights(enable_ml=False),
    )
    loss.backward()
    assert (ssl_protos.grad == 0).all()
    assert np.abs(feats.grad).sum() > 0
