import numpy as np
import pytest

from curvpost.errors import BudgetExceededError, ShapeMismatchError
from curvpost.network import (
    Dataset,
    NetworkSpec,
    dense_jacobian,
    forward,
    forward_batch,
    init_params,
    join_params,
    jvp,
    load_checkpoint,
    save_checkpoint,
    split_params,
    vjp,
)

# f(x) = w_out * relu(w_hid * x); flat order is [w_hid, w_out]
RELU_CHAIN = NetworkSpec(input_dim=1, output_dim=1, hidden=(1,),
                         activation="relu", bias_per_layer=(False, False))

LINEAR_2D = NetworkSpec(input_dim=2, output_dim=1, hidden=(),
                        activation="identity", bias_per_layer=(False,))


def random_spec(rng, activation="tanh"):
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
    return NetworkSpec(
        input_dim=int(rng.integers(1, 4)),
        output_dim=int(rng.integers(1, 4)),
        hidden=hidden,
        activation=activation,
    )


def test_parameter_count():
    spec = NetworkSpec(input_dim=3, output_dim=2, hidden=(4,), activation="relu")
    assert spec.num_params == 3 * 4 + 4 + 4 * 2 + 2
    assert RELU_CHAIN.num_params == 2


def test_forward_single_linear_layer():
    spec = NetworkSpec(input_dim=1, output_dim=1, hidden=(), activation="identity")
    w = np.array([2.0, 0.0])  # weight [[2]], bias [0]
    assert forward(spec, w, np.array([3.0])) == pytest.approx(6.0)


def test_forward_relu_chain_scaling_family():
    # (w_out, w_hid) = (2, 3) and its rescaling (1, 6) realize the same function
    assert forward(RELU_CHAIN, np.array([3.0, 2.0]), np.array([1.0]))[0] == 6.0
    assert forward(RELU_CHAIN, np.array([6.0, 1.0]), np.array([1.0]))[0] == 6.0


def test_forward_reparam_exactness_positive_inputs():
    w_hid, w_out = 3.0, 2.0
    for alpha in (0.5, 2.0, 4.0):  # powers of two keep float arithmetic exact
        for x in (0.5, 1.0, 2.0):
            a = forward(RELU_CHAIN, np.array([w_hid, w_out]), np.array([x]))[0]
            b = forward(RELU_CHAIN, np.array([alpha * w_hid, w_out / alpha]), np.array([x]))[0]
            assert a == b


def test_forward_batch_matches_single():
    rng = np.random.default_rng(0)
    spec = random_spec(rng)
    w = init_params(spec, seed=1)
    X = rng.standard_normal((7, spec.input_dim))
    batched = forward_batch(spec, w, X)
    for n in range(7):
        # BLAS may reorder sums across batch shapes; agreement is to rounding
        np.testing.assert_allclose(batched[n], forward(spec, w, X[n]), rtol=1e-13, atol=1e-15)


def test_jvp_linear_net_is_input():
    w = np.array([0.7, -0.3])
    out = jvp(LINEAR_2D, w, np.array([1.0, 2.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [1.0])
    out = jvp(LINEAR_2D, w, np.array([1.0, 2.0]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(out, [2.0])


def test_jvp_zero_tangent():
    rng = np.random.default_rng(3)
    spec = random_spec(rng)
    w = init_params(spec, seed=5)
    x = rng.standard_normal(spec.input_dim)
    np.testing.assert_array_equal(jvp(spec, w, x, np.zeros(spec.num_params)), 0.0)


def test_jvp_matches_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-5
    for _ in range(10):
        spec = random_spec(rng, activation="tanh")
        w = init_params(spec, seed=int(rng.integers(1 << 30)))
        x = rng.standard_normal(spec.input_dim)
        t = rng.standard_normal(spec.num_params)
        fd = (forward(spec, w + h * t, x) - forward(spec, w - h * t, x)) / (2 * h)
        an = jvp(spec, w, x, t)
        assert np.linalg.norm(an - fd) < 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_vjp_linear_net():
    w = np.array([0.7, -0.3])
    out = vjp(LINEAR_2D, w, np.array([1.0, 2.0]), np.array([1.0]))
    np.testing.assert_allclose(out, [1.0, 2.0])


def test_vjp_zero_cotangent():
    rng = np.random.default_rng(11)
    spec = random_spec(rng)
    w = init_params(spec, seed=2)
    x = rng.standard_normal(spec.input_dim)
    np.testing.assert_array_equal(vjp(spec, w, x, np.zeros(spec.output_dim)), 0.0)


def test_adjoint_identity():
    rng = np.random.default_rng(13)
    spec = random_spec(rng, activation="relu")
    w = init_params(spec, seed=17)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(spec.input_dim)
        u = rng.standard_normal(spec.output_dim)
        v = rng.standard_normal(spec.num_params)
        lhs = u @ jvp(spec, w, x, v)
        rhs = vjp(spec, w, x, u) @ v
        worst = max(worst, abs(lhs - rhs))
    assert worst < 1e-10


def test_dense_jacobian_linear_net():
    ds = Dataset(inputs=np.array([[1.0, 2.0]]), targets=np.array([[0.0]]))
    J = dense_jacobian(LINEAR_2D, np.array([0.7, -0.3]), ds)
    np.testing.assert_allclose(J, [[1.0, 2.0]])


def test_dense_jacobian_relu_chain_hand_values():
    # at (w_hid, w_out) = (3, 2), x = 1 > 0: df/dw_hid = w_out*x = 2, df/dw_out = relu(3) = 3
    ds = Dataset(inputs=np.array([[1.0]]), targets=np.array([[0.0]]))
    J = dense_jacobian(RELU_CHAIN, np.array([3.0, 2.0]), ds)
    np.testing.assert_allclose(J, [[2.0, 3.0]])


def test_dense_jacobian_columns_match_jvp():
    rng = np.random.default_rng(19)
    spec = random_spec(rng, activation="relu")
    w = init_params(spec, seed=23)
    X = rng.standard_normal((4, spec.input_dim))
    ds = Dataset(inputs=X, targets=np.zeros((4, spec.output_dim)))
    J = dense_jacobian(spec, w, ds)
    D = spec.num_params
    for j in range(D):
        e = np.zeros(D)
        e[j] = 1.0
        col = np.concatenate([jvp(spec, w, x, e) for x in X])
        np.testing.assert_allclose(J[:, j], col, rtol=0, atol=1e-12)


def test_dense_jacobian_budget_refusal():
    rng = np.random.default_rng(29)
    spec = NetworkSpec(input_dim=4, output_dim=3, hidden=(8,))
    ds = Dataset(inputs=rng.standard_normal((5, 4)), targets=np.zeros((5, 3)))
    with pytest.raises(BudgetExceededError):
        dense_jacobian(spec, init_params(spec, 0), ds, budget=10)


def test_dimension_mismatch_names_the_argument():
    w = np.zeros(LINEAR_2D.num_params)
    with pytest.raises(ShapeMismatchError, match="x"):
        forward(LINEAR_2D, w, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeMismatchError, match="tangent"):
        jvp(LINEAR_2D, w, np.array([1.0, 2.0]), np.zeros(5))
    with pytest.raises(ShapeMismatchError, match="cotangent"):
        vjp(LINEAR_2D, w, np.array([1.0, 2.0]), np.zeros(2))


def test_split_join_roundtrip():
    rng = np.random.default_rng(31)
    spec = random_spec(rng)
    w = rng.standard_normal(spec.num_params)
    np.testing.assert_array_equal(join_params(spec, split_params(spec, w)), w)


def test_checkpoint_roundtrip(tmp_path):
    w = np.random.default_rng(37).standard_normal(23)
    path = tmp_path / "w.bin"
    save_checkpoint(path, w)
    raw = path.read_bytes()
    assert raw[:8] == b"GLAPv001"
    assert int.from_bytes(raw[8:16], "little") == 23
    assert len(raw) == 16 + 23 * 8
    np.testing.assert_array_equal(load_checkpoint(path), w)
    np.testing.assert_array_equal(load_checkpoint(path, expected_dim=23), w)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "short.bin"
    save_checkpoint(path, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_wrong_dim(tmp_path):
    path = tmp_path / "w.bin"
    save_checkpoint(path, np.zeros(4))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path, expected_dim=5)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(inputs=np.array([[np.nan]]), targets=np.array([[1.0]]))
    with pytest.raises(ShapeMismatchError):
        Dataset(inputs=np.zeros((2, 1)), targets=np.zeros((3, 1)))
    ds = Dataset(inputs=np.zeros((2, 3)), targets=np.array([0, 1]))
    assert ds.is_classification and ds.n == 2
