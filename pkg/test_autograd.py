# test_autograd.py
# Tests for the reverse-mode differentiation layer the network trains with
# Every op is checked against central finite differences on small inputs

import numpy as np

import xgen.network.autograd as autograd
from xgen.config.errors import DegenerateDirectionError, NonFiniteError, XGenError
from xgen.grids.sparse_grid import SparseVoxelGrid, conv_rulebook, trilinear_weights
from xgen.network.autograd import (
    Tensor,
    abs_,
    add,
    bce_with_logits,
    clamp,
    concat,
    cos,
    cross_rows,
    div,
    dot_rows,
    exp,
    gather_rows,
    getitem,
    gradcheck,
    leaky_relu,
    linear,
    log1p_exp_neg_abs,
    matmul,
    mean,
    mul,
    no_grad,
    normalize_rows,
    parameter,
    relu,
    reshape,
    sin,
    sparse_conv,
    sqrt,
    sum_,
    trilinear,
)


# ============================================================================
# TEST DATA - inputs kept away from kinks so finite differences are exact
# ============================================================================

RNG_SEED = 17
TOLERANCE = 1e-4


def away_from_zero(rng: np.random.Generator, shape, low: float = 0.3, high: float = 1.5) -> np.ndarray:
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(low, high, size=shape)


def check(build, *arrays, directions: int = 100) -> float:
    """Worst gradcheck error of sum(build(*inputs) * R) for a fixed random R"""
    inputs = [parameter(a) for a in arrays]
    shaped = build(*inputs)
    readout = Tensor(np.random.default_rng(RNG_SEED + 1).standard_normal(shaped.data.shape))
    params = {f"x{i}": t for i, t in enumerate(inputs)}
    return gradcheck(lambda: sum_(mul(build(*inputs), readout)), params, directions=directions)


# ============================================================================
# OP GRADIENT TESTS
# ============================================================================

def test_elementwise_gradients():
    """
    TEST 1: Elementwise ops

    What this tests:
    - add (with broadcasting), mul, div
    - exp, sqrt, sin, cos
    - abs, relu, leaky_relu, clamp, log1p_exp_neg_abs off their kinks
    """
    print("\n" + "=" * 70)
    print("TEST 1: Elementwise gradients")
    print("=" * 70)

    rng = np.random.default_rng(RNG_SEED)
    a = away_from_zero(rng, (4, 3))
    b = away_from_zero(rng, (4, 3))
    row = rng.standard_normal((1, 3))
    positive = rng.uniform(0.5, 1.5, size=(4, 3))
    bounded = np.array([[-1.4, -0.6, 0.3], [0.7, 1.3, -0.2], [0.1, -0.9, 1.8], [-1.7, 0.45, 0.8]])

    cases = {
        "add (broadcast)": (lambda x, y: add(x, y), a, row),
        "mul": (lambda x, y: mul(x, y), a, b),
        "div": (lambda x, y: div(x, y), a, positive),
        "exp": (lambda x: exp(x), a),
        "sqrt": (lambda x: sqrt(x), positive),
        "sin": (lambda x: sin(x), a),
        "cos": (lambda x: cos(x), a),
        "abs": (lambda x: abs_(x), a),
        "relu": (lambda x: relu(x), a),
        "leaky_relu": (lambda x: leaky_relu(x, 0.01), a),
        "clamp": (lambda x: clamp(x, -1.0, 1.0), bounded),
        "log1p_exp_neg_abs": (lambda x: log1p_exp_neg_abs(x), a),
    }
    for name, (build, *arrays) in cases.items():
        worst = check(build, *arrays)
        assert worst < TOLERANCE, f"{name}: {worst}"
        print(f"✓ {name:<20} worst relative error {worst:.1e}")

    print("\n✅ Elementwise Gradients Test: PASSED")


def test_shape_and_linear_gradients():
    """
    TEST 2: Reductions, indexing and linear algebra

    What this tests:
    - sum over an axis, mean, getitem, reshape
    - gather_rows with repeated rows (scatter-add backward)
    - concat, matmul, linear, row-wise dot and cross products
    - normalize_rows
    """
    print("\n" + "=" * 70)
    print("TEST 2: Shape and linear-algebra gradients")
    print("=" * 70)

    rng = np.random.default_rng(RNG_SEED + 2)
    a = rng.standard_normal((5, 3))
    b = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 4))
    bias = rng.standard_normal(4)

    cases = {
        "sum axis 0": (lambda x: sum_(x, axis=0), a),
        "mean": (lambda x: mean(x), a),
        "getitem": (lambda x: getitem(x, (slice(None), slice(0, 2))), a),
        "reshape": (lambda x: reshape(x, (-1,)), a),
        "gather_rows": (lambda x: gather_rows(x, np.array([0, 2, 2, 4, 0])), a),
        "concat": (lambda x, y: concat([x, y], axis=1), a, b),
        "matmul": (lambda x, y: matmul(x, y), a, w),
        "linear": (lambda x, y, c: linear(x, y, c), a, w, bias),
        "dot_rows": (lambda x, y: dot_rows(x, y), a, b),
        "cross_rows": (lambda x, y: cross_rows(x, y), a, b),
        "normalize_rows": (lambda x: normalize_rows(x), a),
    }
    for name, (build, *arrays) in cases.items():
        worst = check(build, *arrays)
        assert worst < TOLERANCE, f"{name}: {worst}"
        print(f"✓ {name:<20} worst relative error {worst:.1e}")

    print("\n✅ Shape and Linear Gradients Test: PASSED")


def test_sparse_and_loss_gradients():
    """
    TEST 3: Sparse voxel ops and the BCE loss

    What this tests:
    - sparse_conv through a real rulebook (features, kernel and bias)
    - trilinear blending with missing corner vertices
    - bce_with_logits against fixed labels
    """
    print("\n" + "=" * 70)
    print("TEST 3: Sparse op and loss gradients")
    print("=" * 70)

    rng = np.random.default_rng(RNG_SEED + 3)
    flat = np.sort(rng.choice(4 ** 3, size=30, replace=False))
    keys = np.stack(np.unravel_index(flat, (4, 4, 4)), axis=1)
    grid = SparseVoxelGrid(4, keys, np.zeros((30, 0)))
    rules = conv_rulebook(grid, grid.keys, 1)
    features = rng.standard_normal((30, 2))
    kernel = rng.standard_normal((27, 2, 3))
    bias = rng.standard_normal(3)

    worst = check(lambda x, k, c: sparse_conv(x, k, rules, 30, c), features, kernel, bias)
    assert worst < TOLERANCE
    print(f"✓ sparse_conv          worst relative error {worst:.1e}")

    index, weights = trilinear_weights(grid, rng.uniform(-0.5, 0.25, size=(12, 3)))
    assert np.any(index < 0)
    worst = check(lambda x: trilinear(x, index, weights), features)
    assert worst < TOLERANCE
    print(f"✓ trilinear            worst relative error {worst:.1e}")

    labels = rng.random(9) < 0.5
    logits = away_from_zero(rng, (9,))
    inputs = {"logits": parameter(logits)}
    worst = gradcheck(lambda: bce_with_logits(inputs["logits"], labels), inputs, directions=100)
    assert worst < TOLERANCE
    print(f"✓ bce_with_logits      worst relative error {worst:.1e}")

    print("\n✅ Sparse and Loss Gradients Test: PASSED")


# ============================================================================
# GRAPH BEHAVIOUR TESTS
# ============================================================================

def test_graph_behaviour():
    """
    TEST 4: Graph construction and accumulation

    What this tests:
    - A node used twice receives both gradient contributions
    - Leaves accumulate across backward passes until zero_grad
    - no_grad builds no graph
    - backward on a non-scalar output needs an explicit gradient
    """
    print("\n" + "=" * 70)
    print("TEST 4: Graph behaviour")
    print("=" * 70)

    x = parameter(np.array([1.0, -2.0, 3.0]))
    y = sum_(add(mul(x, x), x))
    y.backward()
    assert np.allclose(x.grad, 2.0 * x.data + 1.0)
    print("✓ Shared node: d(x^2 + x) = 2x + 1")

    y.backward()
    assert np.allclose(x.grad, 2.0 * (2.0 * x.data + 1.0))
    x.zero_grad()
    assert x.grad is None
    print("✓ Leaf gradients accumulate until zero_grad")

    with no_grad():
        z = mul(x, 2.0)
    assert not z.requires_grad and z._prev == ()
    print("✓ no_grad builds no graph")

    try:
        mul(x, 2.0).backward()
        raise AssertionError("non-scalar backward should fail")
    except XGenError:
        print("✓ Non-scalar backward without a gradient is rejected")

    try:
        normalize_rows(Tensor(np.zeros((2, 3))))
        raise AssertionError("zero rows should not normalise")
    except DegenerateDirectionError:
        print("✓ Zero-length rows raise DegenerateDirectionError")

    print("\n✅ Graph Behaviour Test: PASSED")


def test_debug_nan_mode():
    """
    TEST 5: Non-finite detection

    What this tests:
    - With NaN debugging on, the first op producing a non-finite value raises
      NonFiniteError naming the op
    - With it off, the value simply propagates
    """
    print("\n" + "=" * 70)
    print("TEST 5: Debug NaN mode")
    print("=" * 70)

    previous = autograd._DEBUG_NAN
    try:
        autograd.set_debug_nan(True)
        try:
            with np.errstate(divide="ignore"):
                div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
            raise AssertionError("division by zero should be caught")
        except NonFiniteError as exc:
            assert "div" in str(exc)
            print("✓ Raised:", exc)

        autograd.set_debug_nan(False)
        with np.errstate(divide="ignore"):
            value = div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
        assert np.isinf(value.data[0])
        print("✓ Disabled mode lets the value through")
    finally:
        autograd.set_debug_nan(previous)

    print("\n✅ Debug NaN Mode Test: PASSED")


# ============================================================================
# MAIN TEST RUNNER
# ============================================================================

def run_all_tests():
    """
    Main test orchestration function
    Runs all tests and provides a summary report
    """
    print("\n" + "█" * 70)
    print("AUTOGRAD TEST SUITE")
    print("█" * 70)

    tests = [
        test_elementwise_gradients,
        test_shape_and_linear_gradients,
        test_sparse_and_loss_gradients,
        test_graph_behaviour,
        test_debug_nan_mode,
    ]
    passed = 0
    for test in tests:
        try:
            test()
            passed += 1
        except Exception as e:
            print(f"\n❌ {test.__name__} FAILED: {type(e).__name__}: {e}")

    print("\n" + "█" * 70)
    print(f"RESULTS: {passed}/{len(tests)} tests passed")
    print("█" * 70)
    if passed == len(tests):
        print("\n🎉 ALL TESTS PASSED!")
    return passed == len(tests)


if __name__ == "__main__":
    success = run_all_tests()
    exit(0 if success else 1)
