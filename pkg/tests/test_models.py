import numpy as np
import pytest
from scipy import integrate

from saavi import models
from saavi.models import (
    Dataset,
    DatasetError,
    add_intercept_column,
    apply_transform_stack,
    batch_grad_log_joint,
    batch_log_joint,
    exp_transform,
    funnel_model,
    gaussian_conjugate_model,
    load_csv,
    load_libsvm,
    logistic_regression_model,
)


def fd_gradient(f, z):
    """Central differences with the per-coordinate step 1e-5 * max(1, |z_i|)."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        h = 1e-5 * max(1.0, abs(z[i]))
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def rel_err(got, want):
    got, want = np.asarray(got), np.asarray(want)
    return np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))


def toy_dataset():
    return Dataset(np.array([[2.0], [-1.0]]), np.array([1.0, 0.0]))


def zoo(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3))
    y = (rng.uniform(size=20) < 0.5).astype(float)
    A = rng.normal(size=(4, 4))
    sigma = A @ A.T + 0.5 * np.eye(4)
    return [
        logistic_regression_model(Dataset(X, y), prior_variance=2.0),
        gaussian_conjugate_model(rng.normal(size=4), sigma, log_evidence=-3.7),
        funnel_model(5),
    ]


# ------------------------------------------------------------ logistic


def test_logistic_log_joint_at_zero():
    m = logistic_regression_model(toy_dataset(), prior_variance=1.0)
    want = 2 * np.log(0.5) - 0.5 * np.log(2 * np.pi)  # N log(1/2) + prior at 0
    assert m.log_joint(np.zeros(1)) == pytest.approx(want, rel=1e-14)


def test_logistic_gradient_at_zero():
    m = logistic_regression_model(toy_dataset(), prior_variance=1.0)
    # grad = X^T (y - 1/2) - w:  2*0.5 + (-1)*(-0.5) = 1.5
    np.testing.assert_allclose(m.grad_log_joint(np.zeros(1)), [1.5], rtol=1e-14)


def test_logistic_rejects_bad_labels():
    with pytest.raises(ValueError):
        logistic_regression_model(Dataset(np.ones((2, 1)), np.array([1.0, 2.0])))
    with pytest.raises(ValueError):
        logistic_regression_model(toy_dataset(), prior_variance=0.0)


# ------------------------------------------------------------ gaussian


def test_gaussian_conjugate_peak_value():
    sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    mu = np.array([1.0, -2.0])
    m = gaussian_conjugate_model(mu, sigma, log_evidence=4.2)
    want = 4.2 - 0.5 * np.log(np.linalg.det(2 * np.pi * sigma))
    assert m.log_joint(mu) == pytest.approx(want, rel=1e-12)
    np.testing.assert_allclose(m.grad_log_joint(mu), np.zeros(2), atol=1e-14)
    assert m.known_log_evidence == 4.2


def test_gaussian_conjugate_rejects_non_spd():
    with pytest.raises(ValueError):
        gaussian_conjugate_model(np.zeros(2), -np.eye(2), 0.0)
    with pytest.raises(ValueError):
        gaussian_conjugate_model(np.zeros(2), np.array([[1.0, 2.0], [0.0, 1.0]]), 0.0)


# ------------------------------------------------------------ funnel


def test_funnel_at_origin():
    m = funnel_model(3)
    want = -0.5 * np.log(2 * np.pi * 9.0) + 2 * (-0.5 * np.log(2 * np.pi))
    assert m.log_joint(np.zeros(3)) == pytest.approx(want, rel=1e-14)
    np.testing.assert_allclose(m.grad_log_joint(np.zeros(3)), [-1.0, 0.0, 0.0], atol=1e-15)
    assert m.known_log_evidence == 0.0


def test_funnel_needs_two_dims():
    with pytest.raises(ValueError):
        funnel_model(1)


def test_funnel_is_normalized():
    # integrate the 2-d funnel density numerically
    m = funnel_model(2)
    val, err = integrate.dblquad(
        lambda z2, z1: np.exp(m.log_joint(np.array([z1, z2]))),
        -13.5, 13.5,
        lambda z1: -8.0 * np.exp(z1 / 2),  # conditional sd is e^{z1/2}
        lambda z1: 8.0 * np.exp(z1 / 2),
    )
    assert val == pytest.approx(1.0, abs=1e-4)


# ------------------------------------------------------------ gradients


@pytest.mark.parametrize("model_idx", [0, 1, 2])
def test_zoo_gradients_match_finite_differences(model_idx):
    m = zoo()[model_idx]
    rng = np.random.default_rng(41 + model_idx)
    for _ in range(20):
        z = rng.normal(size=m.dim)
        assert rel_err(m.grad_log_joint(z), fd_gradient(m.log_joint, z)) < 1e-6


@pytest.mark.parametrize("model_idx", [0, 1, 2])
def test_batch_paths_match_single_point(model_idx):
    m = zoo()[model_idx]
    Z = np.random.default_rng(5).normal(size=(7, m.dim))
    lj_loop = np.array([m.log_joint(z) for z in Z])
    np.testing.assert_allclose(batch_log_joint(m, Z), lj_loop, rtol=1e-12)
    g_loop = np.stack([m.grad_log_joint(z) for z in Z])
    np.testing.assert_allclose(batch_grad_log_joint(m, Z), g_loop, rtol=1e-12)


def test_batch_fallback_loops_when_no_fast_path():
    m = zoo()[1]
    slow = models.LatentModel(
        name="slow", dim=m.dim, log_joint=m.log_joint, grad_log_joint=m.grad_log_joint
    )
    Z = np.random.default_rng(6).normal(size=(4, m.dim))
    np.testing.assert_allclose(batch_log_joint(slow, Z), batch_log_joint(m, Z), rtol=1e-12)
    np.testing.assert_allclose(
        batch_grad_log_joint(slow, Z), batch_grad_log_joint(m, Z), rtol=1e-12
    )


# ------------------------------------------------------------ transforms


def exponential_target():
    # density e^{-z} on z > 0, written as a model only valid there
    return models.LatentModel(
        name="exponential",
        dim=1,
        log_joint=lambda z: float(-z[0]),
        grad_log_joint=lambda z: np.array([-1.0]),
        known_log_evidence=0.0,
    )


def test_exp_transform_round_trip():
    t = exp_transform([0])
    x = np.array([0.3, -2.0])
    np.testing.assert_allclose(t.inverse(t.forward(x)), x, rtol=1e-12)


def test_transform_stack_preserves_normalization():
    m = apply_transform_stack(exponential_target(), [exp_transform([0])])
    val, _ = integrate.quad(lambda t: np.exp(m.log_joint(np.array([t]))), -30.0, 6.0)
    assert val == pytest.approx(1.0, rel=1e-8)


def test_transform_stack_gradient_by_chain_rule():
    m = apply_transform_stack(exponential_target(), [exp_transform([0])])
    for zeta in [-1.5, 0.0, 0.8]:
        z = np.array([zeta])
        assert rel_err(m.grad_log_joint(z), fd_gradient(m.log_joint, z)) < 1e-6
    # transformed funnel: constrain the last coordinate for the exercise
    f = apply_transform_stack(funnel_model(3), [exp_transform([2])])
    rng = np.random.default_rng(9)
    for _ in range(10):
        z = rng.normal(size=3)
        assert rel_err(f.grad_log_joint(z), fd_gradient(f.log_joint, z)) < 1e-6
    Z = rng.normal(size=(5, 3))
    np.testing.assert_allclose(
        batch_log_joint(f, Z), [f.log_joint(z) for z in Z], rtol=1e-12
    )
    np.testing.assert_allclose(
        batch_grad_log_joint(f, Z), np.stack([f.grad_log_joint(z) for z in Z]), rtol=1e-12
    )


def test_transform_stack_rejects_overlap_and_range():
    m = funnel_model(3)
    with pytest.raises(ValueError):
        apply_transform_stack(m, [exp_transform([1]), exp_transform([1])])
    with pytest.raises(ValueError):
        apply_transform_stack(m, [exp_transform([3])])


# ------------------------------------------------------------ loaders


def test_load_csv_trivial(tmp_path):
    f = tmp_path / "toy.csv"
    f.write_text("y,x1\n1,2.0\n0,-1.0\n")
    d = load_csv(str(f), label_column="y")
    assert d.n == 2 and d.p == 1
    np.testing.assert_array_equal(d.labels, [1.0, 0.0])
    np.testing.assert_array_equal(d.features, [[2.0], [-1.0]])
    assert d.feature_names == ("x1",)


def test_load_csv_errors(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("y,x1\n1,2.0,9\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_csv(str(f), label_column="y")
    f.write_text("y,x1\n1,abc\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_csv(str(f), label_column="y")
    f.write_text("a,b\n1,2\n")
    with pytest.raises(DatasetError, match="no column named"):
        load_csv(str(f), label_column="y")


def test_load_csv_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    X = rng.normal(size=(17, 4))
    y = (rng.uniform(size=17) < 0.4).astype(float)
    f = tmp_path / "rt.csv"
    cols = ["y"] + [f"x{i}" for i in range(4)]
    lines = [",".join(cols)]
    for i in range(17):
        lines.append(",".join([repr(float(y[i]))] + [repr(float(v)) for v in X[i]]))
    f.write_text("\n".join(lines) + "\n")
    d = load_csv(str(f), label_column="y")
    np.testing.assert_array_equal(d.features, X)
    np.testing.assert_array_equal(d.labels, y)


def test_load_libsvm_trivial(tmp_path):
    f = tmp_path / "toy.libsvm"
    f.write_text("+1 1:0.5 3:-2\n-1 2:1\n")
    d = load_libsvm(str(f), n_features=3)
    np.testing.assert_array_equal(d.features, [[0.5, 0.0, -2.0], [0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(d.labels, [1.0, 0.0])
    # feature count inferred from the widest row when not given
    d2 = load_libsvm(str(f))
    assert d2.p == 3


def test_load_libsvm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    X = np.where(rng.uniform(size=(9, 5)) < 0.6, rng.normal(size=(9, 5)), 0.0)
    X[0, 0] = 1.25  # keep at least one entry in the first row
    y = (rng.uniform(size=9) < 0.5).astype(float)
    f = tmp_path / "rt.libsvm"
    lines = []
    for i in range(9):
        toks = ["+1" if y[i] == 1.0 else "-1"]
        toks += [f"{j + 1}:{float(X[i, j])!r}" for j in range(5) if X[i, j] != 0.0]
        lines.append(" ".join(toks))
    f.write_text("\n".join(lines) + "\n")
    d = load_libsvm(str(f), n_features=5)
    np.testing.assert_array_equal(d.features, X)
    np.testing.assert_array_equal(d.labels, y)


def test_load_libsvm_errors(tmp_path):
    f = tmp_path / "bad.libsvm"
    f.write_text("+1 0:1\n")
    with pytest.raises(DatasetError, match="1-based"):
        load_libsvm(str(f))
    f.write_text("+2 1:1\n")
    with pytest.raises(DatasetError, match="label"):
        load_libsvm(str(f))
    f.write_text("+1 1:x\n")
    with pytest.raises(DatasetError, match="token"):
        load_libsvm(str(f))


def test_add_intercept_column():
    d = add_intercept_column(toy_dataset())
    assert d.p == 2
    np.testing.assert_array_equal(d.features[:, 1], [1.0, 1.0])


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.array([[1.0], [np.nan]]), np.array([0.0, 1.0]))
    with pytest.raises(DatasetError):
        Dataset(np.ones((3, 2)), np.ones(2))
