"""Tensor core: shape contracts, primitive semantics, autodiff, oracles."""

import random
from array import array

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftkit import tensor as tt
from peftkit.errors import ContractError, DimensionError, RankError
from peftkit.gradcheck import finite_diff_check, gradcheck_params
from peftkit.tensor import Tape, Tensor


def rand_matrix(rng, r, c, rg=False):
    return tt.matrix([[rng.uniform(-1, 1) for _ in range(c)] for _ in range(r)],
                     requires_grad=rg)


class TestTensorBasics:
    def test_shape_data_agreement(self):
        with pytest.raises(DimensionError):
            Tensor((2, 3), array("d", [1.0] * 5))

    def test_positive_extents(self):
        with pytest.raises(DimensionError):
            Tensor((2, 0))

    def test_scalar_roundtrip(self):
        s = tt.scalar(4.25)
        assert s.shape == () and s.item() == 4.25

    def test_copy_is_independent(self):
        a = tt.vector([1.0, 2.0])
        b = a.copy()
        b.data[0] = 9.0
        assert a.data[0] == 1.0


class TestMatmul:
    def test_identity(self):
        rng = random.Random(0)
        a = rand_matrix(rng, 3, 3)
        out = tt.matmul(a, tt.identity(3))
        assert out.tobytes() == a.tobytes()

    def test_zero_annihilates(self):
        rng = random.Random(1)
        z = tt.zeros((2, 4))
        b = rand_matrix(rng, 4, 3)
        out = tt.matmul(z, b)
        assert out.shape == (2, 3)
        assert all(v == 0.0 for v in out.data)

    def test_matches_triple_loop_oracle(self):
        rng = random.Random(2)
        a = rand_matrix(rng, 5, 7)
        b = rand_matrix(rng, 7, 4)
        got = tt.matmul(a, b)
        for i in range(5):
            for j in range(4):
                s = 0.0
                for l in range(7):
                    s += a.data[i * 7 + l] * b.data[l * 4 + j]
                assert abs(got.data[i * 4 + j] - s) <= 1e-12

    def test_shape_mismatch_names_both(self):
        a = tt.zeros((2, 3))
        b = tt.zeros((4, 2))
        with pytest.raises(DimensionError) as e:
            tt.matmul(a, b)
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


class TestKron:
    def test_identity_left_factor_is_block_diagonal(self):
        rng = random.Random(3)
        b = rand_matrix(rng, 2, 3)
        out = tt.kron(tt.identity(2), b)
        assert out.shape == (4, 6)
        # two copies of b on the diagonal, zeros elsewhere
        for i in range(4):
            for j in range(6):
                blk_i, blk_j = i // 2, j // 3
                want = b.data[(i % 2) * 3 + (j % 3)] if blk_i == blk_j else 0.0
                assert out.data[i * 6 + j] == want

    def test_scalar_factor(self):
        rng = random.Random(4)
        b = rand_matrix(rng, 2, 2)
        c = 1.75
        out = tt.kron(tt.matrix([[c]]), b)
        assert list(out.data) == [c * v for v in b.data]

    def test_matches_index_formula_exactly(self):
        rng = random.Random(5)
        a = rand_matrix(rng, 2, 2)
        b = rand_matrix(rng, 3, 2)
        out = tt.kron(a, b)
        for i in range(2):
            for j in range(2):
                for x in range(3):
                    for y in range(2):
                        want = a.data[i * 2 + j] * b.data[x * 2 + y]
                        assert out.data[(i * 3 + x) * 4 + (j * 2 + y)] == want

    def test_rank_error_on_vector(self):
        with pytest.raises(RankError):
            tt.kron(tt.vector([1.0, 2.0]), tt.zeros((2, 2)))


class TestElementwise:
    def test_relu_definition(self):
        out = tt.relu(tt.vector([-1.0, 0.0, 2.0]))
        assert list(out.data) == [0.0, 0.0, 2.0]

    def test_softmax_symmetry(self):
        out = tt.softmax(tt.matrix([[0.0, 0.0, 0.0]]))
        assert all(abs(v - 1.0 / 3.0) <= 1e-15 for v in out.data)

    def test_softmax_rows_sum_to_one(self):
        rng = random.Random(6)
        x = rand_matrix(rng, 5, 7)
        y = tt.softmax(x)
        for i in range(5):
            assert abs(sum(y.data[i * 7:(i + 1) * 7]) - 1.0) <= 1e-12

    def test_concat_axis1_left_block(self):
        rng = random.Random(7)
        a = rand_matrix(rng, 2, 3)
        b = rand_matrix(rng, 2, 5)
        out = tt.concat([a, b], axis=1)
        assert out.shape == (2, 8)
        assert tt.slice_cols(out, 0, 3).tobytes() == a.tobytes()
        assert tt.slice_cols(out, 3, 8).tobytes() == b.tobytes()

    def test_add_requires_equal_shapes(self):
        with pytest.raises(DimensionError):
            tt.add(tt.zeros((2, 3)), tt.zeros((3, 2)))

    def test_layer_norm_standardizes(self):
        rng = random.Random(8)
        x = rand_matrix(rng, 4, 6)
        y = tt.layer_norm(x, tt.full((6,), 1.0), tt.zeros((6,)))
        for i in range(4):
            row = y.data[i * 6:(i + 1) * 6]
            mean = sum(row) / 6
            var = sum((v - mean) ** 2 for v in row) / 6
            assert abs(mean) <= 1e-12
            assert abs(var - 1.0) <= 1e-9


class TestBackward:
    def test_hadamard_square_gradient(self):
        x = tt.vector([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_all(tt.hadamard(x, x))
            tape.backward(loss)
        assert list(x.grad) == [2.0, 4.0, 6.0]

    def test_matmul_sum_gradient(self):
        rng = random.Random(9)
        a = rand_matrix(rng, 3, 4, rg=True)
        b = rand_matrix(rng, 4, 2)
        with Tape() as tape:
            loss = tt.sum_all(tt.matmul(a, b))
            tape.backward(loss)
        # dA = ones(3,2) @ B^T: dA[i,l] = sum_j B[l,j]
        for i in range(3):
            for l in range(4):
                want = sum(b.data[l * 2 + j] for j in range(2))
                assert abs(a.grad[i * 4 + l] - want) <= 1e-12

    def test_non_scalar_loss_rejected(self):
        x = tt.vector([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = tt.scale(x, 2.0)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_empty_tape_rejected(self):
        with Tape() as tape:
            with pytest.raises(ContractError):
                tape.backward(tt.scalar(1.0))

    def test_gradient_accumulates_across_consumers(self):
        x = tt.vector([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_all(tt.add(tt.add(x, x), x))
            tape.backward(loss)
        assert list(x.grad) == [3.0, 3.0]

    def test_second_backward_rejected(self):
        x = tt.vector([1.0], requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_all(tt.hadamard(x, x))
            tape.backward(loss)
            with pytest.raises(ContractError):
                tape.backward(loss)
        assert list(x.grad) == [2.0]  # not double-accumulated

    def test_module_level_backward_uses_active_tape(self):
        x = tt.vector([2.0], requires_grad=True)
        with Tape():
            loss = tt.sum_all(tt.hadamard(x, x))
            tt.backward(loss)
        assert list(x.grad) == [4.0]
        with pytest.raises(ContractError):
            tt.backward(tt.scalar(1.0))  # no active tape

    def test_unreachable_tracked_tensor_gets_zero_grad(self):
        x = tt.vector([1.0], requires_grad=True)
        y = tt.vector([2.0], requires_grad=True)
        with Tape() as tape:
            _dead = tt.scale(y, 3.0)  # recorded, not part of the loss
            loss = tt.sum_all(x)
            tape.backward(loss)
        assert list(y.grad) == [0.0]

    def test_frozen_tensor_never_accumulates(self):
        x = tt.vector([1.0, 2.0], requires_grad=True)
        w = tt.vector([3.0, 4.0], requires_grad=False)
        with Tape() as tape:
            loss = tt.sum_all(tt.hadamard(x, w))
            tape.backward(loss)
        assert w.grad is None

    def test_random_composition_matches_finite_differences(self):
        rng = random.Random(10)
        w1 = rand_matrix(rng, 4, 5)
        w2 = rand_matrix(rng, 5, 3)
        gain = tt.full((3,), 1.0)
        bias = tt.zeros((3,))

        def f(x):
            h = tt.relu(tt.matmul(x, w1))
            h = tt.matmul(h, w2)
            h = tt.layer_norm(h, gain, bias)
            h = tt.softmax(h)
            return tt.sum_all(tt.hadamard(h, h))

        x = rand_matrix(rng, 2, 4)
        assert finite_diff_check(f, x, eps=1e-5) <= 1e-6


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences."""

    CASES = {}

    def _register():
        rng = random.Random(42)
        c23 = rand_matrix(rng, 2, 3)
        c32 = rand_matrix(rng, 3, 2)
        v3 = tt.vector([0.3, -0.7, 1.1])
        sq = lambda t: tt.sum_all(tt.hadamard(t, t))
        return {
            "add": lambda x: sq(tt.add(x, c23)),
            "sub": lambda x: sq(tt.sub(c23, x)),
            "hadamard": lambda x: sq(tt.hadamard(x, c23)),
            "scale": lambda x: sq(tt.scale(x, -1.7)),
            "matmul_lhs": lambda x: sq(tt.matmul(x, c32)),
            "matmul_rhs": lambda x: sq(tt.matmul(c32, x)),
            "kron_lhs": lambda x: sq(tt.kron(x, c32)),
            "kron_rhs": lambda x: sq(tt.kron(c32, x)),
            "relu": lambda x: sq(tt.relu(x)),
            "tanh": lambda x: sq(tt.tanh(x)),
            "softmax": lambda x: sq(tt.softmax(x)),
            "layer_norm_x": lambda x: sq(tt.layer_norm(
                x, tt.full((3,), 1.1), tt.full((3,), 0.2))),
            "transpose": lambda x: sq(tt.transpose(x)),
            "concat0": lambda x: sq(tt.concat([x, c23], axis=0)),
            "concat1": lambda x: sq(tt.concat([c23, x], axis=1)),
            "slice_rows": lambda x: sq(tt.slice_rows(x, 0, 1)),
            "slice_cols": lambda x: sq(tt.slice_cols(x, 1, 3)),
            "row_mul_x": lambda x: sq(tt.row_mul(x, v3)),
            "row_add_x": lambda x: sq(tt.row_add(x, v3)),
            "gather": lambda x: sq(tt.gather(x, [1, 0, 1])),
            "cross_entropy": lambda x: tt.cross_entropy(x, [2, 0]),
        }

    CASES = _register()

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_matrix_argument(self, name):
        rng = random.Random(hash(name) % (2**31))
        x = rand_matrix(rng, 2, 3)
        assert finite_diff_check(self.CASES[name], x, eps=1e-5) <= 1e-6, name

    def test_vector_arguments(self):
        rng = random.Random(7)
        x = rand_matrix(rng, 4, 3)
        sq = lambda t: tt.sum_all(tt.hadamard(t, t))
        for f in (lambda v: sq(tt.row_mul(x, v)),
                  lambda v: sq(tt.row_add(x, v)),
                  lambda v: sq(tt.layer_norm(x, v, tt.zeros((3,)))),
                  lambda v: sq(tt.layer_norm(x, tt.full((3,), 1.0), v))):
            v = tt.vector([rng.uniform(0.5, 1.5) for _ in range(3)])
            assert finite_diff_check(f, v, eps=1e-5) <= 1e-6


class TestThreading:
    def test_independent_tapes_on_independent_threads(self):
        import threading

        results = {}

        def work(tag, value):
            x = tt.vector([value], requires_grad=True)
            with Tape() as tape:
                loss = tt.sum_all(tt.hadamard(x, x))
                tape.backward(loss)
            results[tag] = x.grad[0]

        threads = [threading.Thread(target=work, args=(i, float(i + 1)))
                   for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {0: 2.0, 1: 4.0, 2: 6.0, 3: 8.0}


class TestFiniteDiffCheck:
    def test_polynomial_is_nearly_exact(self):
        def f(x):
            return tt.sum_all(tt.hadamard(x, x))

        x = tt.vector([1.0, 2.0])
        assert finite_diff_check(f, x, eps=1e-5) < 1e-8

    def test_nonpositive_eps_rejected(self):
        from peftkit.errors import DomainError

        with pytest.raises(DomainError):
            finite_diff_check(lambda x: tt.sum_all(x), tt.vector([1.0]), eps=0)

    def test_nondeterministic_function_rejected(self):
        state = {"n": 0}

        def f(x):
            state["n"] += 1
            return tt.scale(tt.sum_all(x), float(state["n"]))

        with pytest.raises(ContractError):
            finite_diff_check(f, tt.vector([1.0]))

    def test_gradcheck_params_reports_per_name(self):
        rng = random.Random(20)
        w = rand_matrix(rng, 3, 3, rg=True)
        x = rand_matrix(rng, 2, 3)

        def loss_fn():
            return tt.sum_all(tt.relu(tt.matmul(x, w)))

        worst, report = gradcheck_params(loss_fn, [("w", w)])
        assert set(report) == {"w"}
        assert worst <= 1e-6


class TestDeterminism:
    def test_same_seed_same_bits(self):
        a = tt.uniform((4, 4), random.Random(77), 0.5)
        b = tt.uniform((4, 4), random.Random(77), 0.5)
        assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
       st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
def test_add_commutes(xs, ys):
    n = min(len(xs), len(ys))
    a = tt.vector(xs[:n])
    b = tt.vector(ys[:n])
    assert tt.add(a, b).tobytes() == tt.add(b, a).tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=10**6))
def test_softmax_rows_always_normalized(rows, cols, seed):
    rng = random.Random(seed)
    x = rand_matrix(rng, rows, cols)
    y = tt.softmax(x)
    for i in range(rows):
        assert abs(sum(y.data[i * cols:(i + 1) * cols]) - 1.0) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4),
       st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=10**6))
def test_concat_slice_roundtrip(r, c1, c2, seed):
    rng = random.Random(seed)
    a = rand_matrix(rng, r, c1)
    b = rand_matrix(rng, r, c2)
    joined = tt.concat([a, b], axis=1)
    assert tt.slice_cols(joined, 0, c1).tobytes() == a.tobytes()
    assert tt.slice_cols(joined, c1, c1 + c2).tobytes() == b.tobytes()
