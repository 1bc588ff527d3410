import numpy as np
import pytest

from moelab import balancing as B
from moelab import model as M
from moelab import tensor as T
from moelab.gradcheck import grad_check
from moelab.tensor import Tensor


def record(indices, weights, n_experts):
    indices = np.asarray(indices)
    weights = np.asarray(weights, dtype=np.float64)
    n = indices.shape[0]
    probs = np.full((n, n_experts), 1.0 / n_experts)
    return M.RoutingRecord(probs=Tensor(probs), indices=indices,
                           weights=Tensor(weights), n_seqs=1, seq_len=n)


def test_lbl_single_token_single_expert():
    rec = record([[0]], [[1.0]], n_experts=4)
    assert float(B.lbl_loss([rec], 4).data) == 4.0


def test_lbl_four_tokens_four_distinct_experts():
    rec = record([[0], [1], [2], [3]], [[1.0]] * 4, n_experts=4)
    assert abs(float(B.lbl_loss([rec], 4).data) - 1.0) < 1e-12


@pytest.mark.parametrize("e,a", [(4, 2), (8, 4)])
def test_lbl_uniform_top_a_with_unit_mass_gates_equals_a(e, a):
    # every expert selected by a/e of tokens; each token's gates sum to 1
    tokens = []
    for t in range(e):
        tokens.append([(t + j) % e for j in range(a)])
    rec = record(tokens, np.full((e, a), 1.0 / a), n_experts=e)
    assert abs(float(B.lbl_loss([rec], e).data) - a) < 1e-12


def test_lbl_layer_aggregation_mean_and_sum():
    hot = record([[0]], [[1.0]], n_experts=4)        # loss 4
    spread = record([[0], [1], [2], [3]], [[1.0]] * 4, n_experts=4)  # loss 1
    assert abs(float(B.lbl_loss([hot, spread], 4).data) - 2.5) < 1e-12
    assert abs(float(B.lbl_loss_value([hot, spread], 4, sum_layers=True).data) - 5.0) < 1e-12


def test_lbl_rejects_empty_input():
    with pytest.raises(ValueError):
        B.lbl_loss([], 4)


def test_lbl_invariant_under_expert_permutation():
    rng = np.random.default_rng(0)
    idx = np.stack([rng.choice(6, size=2, replace=False) for _ in range(10)])
    w = rng.uniform(0.1, 0.9, (10, 2))
    base = float(B.lbl_loss([record(idx, w, 6)], 6).data)
    perm = rng.permutation(6)
    assert abs(float(B.lbl_loss([record(perm[idx], w, 6)], 6).data) - base) < 1e-12


def test_lbl_gradient_through_routing():
    cfg = M.ModelConfig(d_model=6, depth=1, heads=2, d_expert=6, n_experts=4,
                        top_a=2, vocab_size=8)
    rng = np.random.default_rng(1)
    R = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((9, 6)))

    def loss(theta):
        rec = M.route(x, M.RouterState(R=theta, lf_bias=np.zeros(4)), cfg)
        return B.lbl_loss([rec], 4)

    report = grad_check(loss, R, tol=1e-5)
    assert report.ok, report


def test_simbal_orthonormal_is_exact_zero():
    assert float(B.simbal_loss(Tensor(np.eye(4))).data) == 0.0
    flip = np.eye(3)
    flip[1, 1] = -1.0  # still orthonormal columns
    assert float(B.simbal_loss(Tensor(flip)).data) == 0.0


def test_simbal_scaled_identity_closed_form():
    assert float(B.simbal_loss(Tensor(2.0 * np.eye(2))).data) == 6.0


def test_simbal_matches_brute_force_double_loop():
    rng = np.random.default_rng(2)
    for _ in range(5):
        R = rng.standard_normal((8, 4))
        gram = R.T @ R
        expect = 0.0
        for i in range(4):
            for j in range(4):
                expect += abs(gram[i, j] - (1.0 if i == j else 0.0))
        assert abs(float(B.simbal_loss(Tensor(R)).data) - expect) < 1e-12


def test_simbal_invariant_under_column_permutation():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((8, 5))
    base = float(B.simbal_loss(Tensor(R)).data)
    perm = rng.permutation(5)
    assert abs(float(B.simbal_loss(Tensor(R[:, perm])).data) - base) < 1e-12


def test_simbal_positive_off_identity():
    near = np.eye(3) + 1e-3
    assert float(B.simbal_loss(Tensor(near)).data) > 0.0


def test_simbal_warns_on_wide_router():
    with pytest.warns(UserWarning):
        B.simbal_loss(Tensor(np.random.default_rng(4).standard_normal((2, 4))))


def test_simbal_gradient_vs_finite_differences():
    R = Tensor(np.random.default_rng(5).standard_normal((8, 4)), requires_grad=True)
    report = grad_check(lambda t: B.simbal_loss(t), R, tol=1e-5)
    assert report.ok, report


def test_lf_update_sign_cases_exact():
    b = B.lf_update([0.5, 0.5, 0.0, 0.0], np.zeros(4), gamma=0.001)
    assert np.array_equal(b, [-0.001, -0.001, 0.001, 0.001])


def test_lf_update_no_motion_at_exact_balance():
    b0 = np.array([0.01, -0.02, 0.0, 0.005])
    b1 = B.lf_update([0.25] * 4, b0.copy(), gamma=0.001)
    assert np.array_equal(b1, b0)


def test_lf_update_constant_skew_moves_monotonically():
    f = [0.9, 0.1, 0.0, 0.0]
    b = np.zeros(4)
    b1 = B.lf_update(f, b, 0.001)
    b2 = B.lf_update(f, b1, 0.001)
    assert np.array_equal(b1, [-0.001, 0.001, 0.001, 0.001])
    assert np.array_equal(b2, 2.0 * b1)  # doubling of one step, exactly


def test_lf_update_rejects_negative_fractions():
    with pytest.raises(ValueError):
        B.lf_update([-0.1, 1.1, 0.0, 0.0], np.zeros(4), 0.001)


def test_lf_state_steps_shared_model_arrays():
    m = M.Model(M.ModelConfig(d_model=4, depth=2, heads=2, d_expert=4,
                              n_experts=4, top_a=1, vocab_size=8), seed=0)
    state = B.LfBiasState.from_model(m)
    state.step([[1.0, 0.0, 0.0, 0.0]] * 2, gamma=0.001)
    for rs in m.routers:
        assert np.array_equal(rs.lf_bias, [-0.001, 0.001, 0.001, 0.001])


def test_z_loss_zero_logits_is_squared_log_vocab():
    z = float(B.z_loss(Tensor(np.zeros((3, 256)))).data)
    assert abs(z - np.log(256.0) ** 2) < 1e-12
    assert abs(z - 30.75) < 1e-2


def test_z_loss_zero_partition_rows():
    logits = np.log(np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert float(B.z_loss(Tensor(logits)).data) == 0.0


def test_z_loss_gradient():
    x = Tensor(np.random.default_rng(6).standard_normal((4, 7)), requires_grad=True)
    report = grad_check(lambda t: B.z_loss(t), x, tol=1e-5)
    assert report.ok, report


def test_assemble_none_with_zero_zloss_returns_ce_exactly():
    ce = Tensor(np.array(1.2345))
    spec = B.BalancingSpec(strategy="none", zloss_coeff=0.0)
    total, parts = B.assemble_loss(ce, spec, [], [], logits=None)
    assert total is ce
    assert parts["total"] == parts["ce"] == 1.2345
    assert parts["lbl"] == parts["simbal"] == parts["zloss"] == 0.0


def test_assemble_simbal_with_exactly_orthonormal_routers():
    ce = Tensor(np.array(2.0))
    logits = Tensor(np.log(np.full((2, 2), 0.5)))  # z-term exactly 0
    routers = [M.RouterState(R=Tensor(np.eye(4)), lf_bias=np.zeros(4))]
    spec = B.BalancingSpec(strategy="simbal")
    total, parts = B.assemble_loss(ce, spec, [], routers, logits=logits)
    assert parts["simbal"] == 0.0 and parts["zloss"] == 0.0
    assert float(total.data) == 2.0


def test_assemble_lbl_matches_hand_summed_components():
    ce = Tensor(np.array(3.0))
    rec = record([[0]], [[1.0]], n_experts=4)  # lbl raw 4.0
    logits = Tensor(np.random.default_rng(7).standard_normal((5, 6)))
    spec = B.BalancingSpec(strategy="lbl", alpha=0.01, zloss_coeff=1e-5)
    total, parts = B.assemble_loss(ce, spec, [rec], [], logits=logits)
    lse = np.log(np.exp(logits.data - logits.data.max(-1, keepdims=True))
                 .sum(-1)) + logits.data.max(-1)
    hand = 3.0 + 0.01 * 4.0 + 1e-5 * float((lse ** 2).mean())
    assert abs(float(total.data) - hand) < 1e-12
    assert abs(parts["ce"] + parts["lbl"] + parts["simbal"] + parts["zloss"]
               - parts["total"]) < 1e-15


def test_lf_strategy_contributes_no_loss_term():
    ce = Tensor(np.array(1.0))
    spec = B.BalancingSpec(strategy="lf", zloss_coeff=0.0)
    total, parts = B.assemble_loss(ce, spec, [], [], logits=None)
    assert total is ce and parts["total"] == 1.0


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        B.BalancingSpec(strategy="entropy")
