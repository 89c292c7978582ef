"""Kernel backend tests: independent oracles plus backend parity."""

import importlib.util
import math
import random
from array import array

import pytest

from peftkit.backend import py_kernels

HAVE_COMPILED = importlib.util.find_spec("peftkit.backend._ckernels") is not None

BACKENDS = [py_kernels]
if HAVE_COMPILED:
    from peftkit.backend import _ckernels
    BACKENDS.append(_ckernels)


def rand_buf(rng, n, lo=-2.0, hi=2.0):
    return array("d", [rng.uniform(lo, hi) for _ in range(n)])


# Brute-force triple-loop oracle, independent of the kernel under test.
def oracle_matmul(a, b, m, k, n):
    out = [0.0] * (m * n)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i * k + l] * b[l * n + j]
            out[i * n + j] = s
    return out


def oracle_kron(a, b, p, q, r, s):
    out = [0.0] * (p * r * q * s)
    cols = q * s
    for i in range(p):
        for j in range(q):
            for x in range(r):
                for y in range(s):
                    out[(i * r + x) * cols + (j * s + y)] = a[i * q + j] * b[x * s + y]
    return out


@pytest.mark.parametrize("kern", BACKENDS, ids=lambda k: k.NAME)
class TestKernels:
    def test_matmul_matches_triple_loop(self, kern):
        rng = random.Random(11)
        a = rand_buf(rng, 5 * 7)
        b = rand_buf(rng, 7 * 4)
        got = kern.matmul(a, b, 5, 7, 4)
        want = oracle_matmul(a, b, 5, 7, 4)
        assert max(abs(g - w) for g, w in zip(got, want)) <= 1e-12

    def test_matmul_nt_tn(self, kern):
        rng = random.Random(12)
        a = rand_buf(rng, 3 * 5)
        b = rand_buf(rng, 4 * 5)
        got = kern.matmul_nt(a, b, 3, 5, 4)  # a[3,5] @ b[4,5]^T
        bt = [b[j * 5 + l] for l in range(5) for j in range(4)]  # [5,4]
        want = oracle_matmul(a, bt, 3, 5, 4)
        assert max(abs(g - w) for g, w in zip(got, want)) <= 1e-12

        c = rand_buf(rng, 6 * 3)
        d = rand_buf(rng, 6 * 2)
        got = kern.matmul_tn(c, d, 6, 3, 2)  # c[6,3]^T @ d[6,2]
        ct = [c[l * 3 + i] for i in range(3) for l in range(6)]  # [3,6]
        want = oracle_matmul(ct, d, 3, 6, 2)
        assert max(abs(g - w) for g, w in zip(got, want)) <= 1e-12

    def test_kron_matches_index_formula(self, kern):
        rng = random.Random(13)
        a = rand_buf(rng, 2 * 2)
        b = rand_buf(rng, 3 * 2)
        got = kern.kron(a, b, 2, 2, 3, 2)
        want = oracle_kron(a, b, 2, 2, 3, 2)
        assert list(got) == want  # exact: entries are single products

    def test_softmax_rows_normalized(self, kern):
        rng = random.Random(14)
        x = rand_buf(rng, 4 * 6)
        y = kern.softmax_rows(x, 4, 6)
        for i in range(4):
            assert abs(sum(y[i * 6:(i + 1) * 6]) - 1.0) <= 1e-12

    def test_layernorm_rows_standardizes(self, kern):
        rng = random.Random(15)
        x = rand_buf(rng, 3 * 8)
        ones = array("d", [1.0] * 8)
        zeros = array("d", [0.0] * 8)
        y, xhat, rstd = kern.layernorm_rows(x, ones, zeros, 3, 8, 1e-12)
        for i in range(3):
            row = y[i * 8:(i + 1) * 8]
            mean = sum(row) / 8
            var = sum((v - mean) ** 2 for v in row) / 8
            assert abs(mean) <= 1e-12
            assert abs(var - 1.0) <= 1e-9

    def test_cross_entropy_rows_matches_direct(self, kern):
        rng = random.Random(16)
        logits = rand_buf(rng, 3 * 5)
        targets = array("q", [1, 0, 4])
        loss, probs = kern.cross_entropy_rows(logits, targets, 3, 5)
        want = 0.0
        for i in range(3):
            row = logits[i * 5:(i + 1) * 5]
            z = sum(math.exp(v) for v in row)
            want += math.log(z) - row[targets[i]]
        assert abs(loss - want / 3) <= 1e-12
        for i in range(3):
            assert abs(sum(probs[i * 5:(i + 1) * 5]) - 1.0) <= 1e-12


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernel core not built")
class TestBackendParity:
    """Both backends must produce bit-identical buffers."""

    def test_bitwise_identical(self):
        rng = random.Random(99)
        a = rand_buf(rng, 7 * 5)
        b = rand_buf(rng, 5 * 6)
        assert _ckernels.matmul(a, b, 7, 5, 6).tobytes() == \
            py_kernels.matmul(a, b, 7, 5, 6).tobytes()

        x = rand_buf(rng, 4 * 9)
        assert _ckernels.softmax_rows(x, 4, 9).tobytes() == \
            py_kernels.softmax_rows(x, 4, 9).tobytes()

        g = array("d", [1.0] * len(x))
        ones = array("d", [1.0] * 9)
        zeros = array("d", [0.0] * 9)
        yc, xc, rc = _ckernels.layernorm_rows(x, ones, zeros, 4, 9, 1e-12)
        yp, xp, rp = py_kernels.layernorm_rows(x, ones, zeros, 4, 9, 1e-12)
        assert yc.tobytes() == yp.tobytes()
        assert _ckernels.layernorm_rows_grad(g, ones, xc, rc, 4, 9)[0].tobytes() == \
            py_kernels.layernorm_rows_grad(g, ones, xp, rp, 4, 9)[0].tobytes()

        ka = rand_buf(rng, 2 * 2)
        kb = rand_buf(rng, 4 * 3)
        assert _ckernels.kron(ka, kb, 2, 2, 4, 3).tobytes() == \
            py_kernels.kron(ka, kb, 2, 2, 4, 3).tobytes()

        t = array("q", [2, 0, 1])
        lc, pc = _ckernels.cross_entropy_rows(x[:12], t, 3, 4)
        lp, pp = py_kernels.cross_entropy_rows(x[:12], t, 3, 4)
        assert lc == lp and pc.tobytes() == pp.tobytes()
