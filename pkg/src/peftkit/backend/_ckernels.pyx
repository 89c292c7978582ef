# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled numeric kernels over flat float64 buffers.

Twin of ``py_kernels``: every kernel keeps the exact loop order of the
pure-Python reference, and the extension is compiled without FP
contraction, so both backends produce bit-identical buffers.
"""

from cpython cimport array
import array

from libc.math cimport exp, log, sqrt, tanh as c_tanh

NAME = "compiled"

cdef array.array _TEMPLATE = array.array("d", [])


cdef inline array.array _zeros(Py_ssize_t n):
    return array.clone(_TEMPLATE, n, zero=True)


# ---------------------------------------------------------------- matmul

def matmul(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array outa = _zeros(m * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, l, ai, oi
    cdef double s
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[ai + l] * b[l * n + j]
            out[oi + j] = s
    return outa


def matmul_nt(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t n, Py_ssize_t k):
    cdef array.array outa = _zeros(m * k)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, l, ai, oi, bj
    cdef double s
    for i in range(m):
        ai = i * n
        oi = i * k
        for j in range(k):
            bj = j * n
            s = 0.0
            for l in range(n):
                s += a[ai + l] * b[bj + l]
            out[oi + j] = s
    return outa


def matmul_tn(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array outa = _zeros(k * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, l, oi
    cdef double s
    for i in range(k):
        oi = i * n
        for j in range(n):
            s = 0.0
            for l in range(m):
                s += a[l * k + i] * b[l * n + j]
            out[oi + j] = s
    return outa


# ------------------------------------------------------------- kronecker

def kron(double[::1] a, double[::1] b, Py_ssize_t p, Py_ssize_t q,
         Py_ssize_t r, Py_ssize_t s):
    cdef Py_ssize_t cols = q * s
    cdef array.array outa = _zeros(p * r * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, x, y, row, bx
    cdef double aij
    for i in range(p):
        for j in range(q):
            aij = a[i * q + j]
            for x in range(r):
                row = (i * r + x) * cols + j * s
                bx = x * s
                for y in range(s):
                    out[row + y] = aij * b[bx + y]
    return outa


def kron_grad_a(double[::1] g, double[::1] b, Py_ssize_t p, Py_ssize_t q,
                Py_ssize_t r, Py_ssize_t s):
    cdef Py_ssize_t cols = q * s
    cdef array.array outa = _zeros(p * q)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, x, y, row, bx
    cdef double acc_v
    for i in range(p):
        for j in range(q):
            acc_v = 0.0
            for x in range(r):
                row = (i * r + x) * cols + j * s
                bx = x * s
                for y in range(s):
                    acc_v += g[row + y] * b[bx + y]
            out[i * q + j] = acc_v
    return outa


def kron_grad_b(double[::1] g, double[::1] a, Py_ssize_t p, Py_ssize_t q,
                Py_ssize_t r, Py_ssize_t s):
    cdef Py_ssize_t cols = q * s
    cdef array.array outa = _zeros(r * s)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, x, y
    cdef double acc_v
    for x in range(r):
        for y in range(s):
            acc_v = 0.0
            for i in range(p):
                for j in range(q):
                    acc_v += g[(i * r + x) * cols + j * s + y] * a[i * q + j]
            out[x * s + y] = acc_v
    return outa


# ----------------------------------------------------------- elementwise

def ew_add(double[::1] a, double[::1] b, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + b[i]
    return outa


def ew_sub(double[::1] a, double[::1] b, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] - b[i]
    return outa


def ew_mul(double[::1] a, double[::1] b, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * b[i]
    return outa


def ew_scale(double[::1] a, double c, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * c
    return outa


def acc(double[::1] dst, double[::1] src, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        dst[i] += src[i]


def relu(double[::1] x, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return outa


def relu_grad(double[::1] g, double[::1] x, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = g[i] if x[i] > 0.0 else 0.0
    return outa


def tanh(double[::1] x, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = c_tanh(x[i])
    return outa


def tanh_grad(double[::1] g, double[::1] y, Py_ssize_t n):
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = g[i] * (1.0 - y[i] * y[i])
    return outa


# ------------------------------------------------------------- row-wise

def softmax_rows(double[::1] x, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    cdef double mx, total, e, v
    for i in range(rows):
        base = i * cols
        mx = x[base]
        for j in range(1, cols):
            v = x[base + j]
            if v > mx:
                mx = v
        total = 0.0
        for j in range(cols):
            e = exp(x[base + j] - mx)
            out[base + j] = e
            total += e
        for j in range(cols):
            out[base + j] /= total
    return outa


def softmax_rows_grad(double[::1] g, double[::1] y, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    cdef double dot
    for i in range(rows):
        base = i * cols
        dot = 0.0
        for j in range(cols):
            dot += g[base + j] * y[base + j]
        for j in range(cols):
            out[base + j] = y[base + j] * (g[base + j] - dot)
    return outa


def layernorm_rows(double[::1] x, double[::1] gain, double[::1] bias,
                   Py_ssize_t rows, Py_ssize_t cols, double eps):
    cdef array.array ya = _zeros(rows * cols)
    cdef array.array xhata = _zeros(rows * cols)
    cdef array.array rstda = _zeros(rows)
    cdef double[::1] y = ya
    cdef double[::1] xhat = xhata
    cdef double[::1] rstd = rstda
    cdef Py_ssize_t i, j, base
    cdef double mean, var, d, r, h
    for i in range(rows):
        base = i * cols
        mean = 0.0
        for j in range(cols):
            mean += x[base + j]
        mean /= cols
        var = 0.0
        for j in range(cols):
            d = x[base + j] - mean
            var += d * d
        var /= cols
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(cols):
            h = (x[base + j] - mean) * r
            xhat[base + j] = h
            y[base + j] = h * gain[j] + bias[j]
    return ya, xhata, rstda


def layernorm_rows_grad(double[::1] g, double[::1] gain, double[::1] xhat,
                        double[::1] rstd, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array dxa = _zeros(rows * cols)
    cdef array.array dgaina = _zeros(cols)
    cdef array.array dbiasa = _zeros(cols)
    cdef double[::1] dx = dxa
    cdef double[::1] dgain = dgaina
    cdef double[::1] dbias = dbiasa
    cdef Py_ssize_t i, j, base
    cdef double s1, s2, dh, r
    for i in range(rows):
        base = i * cols
        s1 = 0.0
        s2 = 0.0
        for j in range(cols):
            dh = g[base + j] * gain[j]
            s1 += dh
            s2 += dh * xhat[base + j]
        s1 /= cols
        s2 /= cols
        r = rstd[i]
        for j in range(cols):
            dh = g[base + j] * gain[j]
            dx[base + j] = r * (dh - s1 - xhat[base + j] * s2)
            dgain[j] += g[base + j] * xhat[base + j]
            dbias[j] += g[base + j]
    return dxa, dgaina, dbiasa


def row_mul(double[::1] x, double[::1] v, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = x[base + j] * v[j]
    return outa


def row_mul_grad_v(double[::1] g, double[::1] x, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j] += g[base + j] * x[base + j]
    return outa


def row_add(double[::1] x, double[::1] v, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = x[base + j] + v[j]
    return outa


def col_sum(double[::1] g, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j] += g[base + j]
    return outa


def sum_all(double[::1] x, Py_ssize_t n):
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += x[i]
    return s


def transpose(double[::1] x, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j * rows + i] = x[base + j]
    return outa


# ----------------------------------------------------------- embeddings

def gather_rows(double[::1] table, long long[::1] ids, Py_ssize_t count,
                Py_ssize_t cols):
    cdef array.array outa = _zeros(count * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, src, dst
    for i in range(count):
        src = ids[i] * cols
        dst = i * cols
        for j in range(cols):
            out[dst + j] = table[src + j]
    return outa


def scatter_add_rows(double[::1] g, long long[::1] ids, Py_ssize_t count,
                     Py_ssize_t out_rows, Py_ssize_t cols):
    cdef array.array outa = _zeros(out_rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, src, dst
    for i in range(count):
        dst = ids[i] * cols
        src = i * cols
        for j in range(cols):
            out[dst + j] += g[src + j]
    return outa


# -------------------------------------------------------- cross entropy

def cross_entropy_rows(double[::1] logits, long long[::1] targets,
                       Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array probsa = _zeros(rows * cols)
    cdef double[::1] probs = probsa
    cdef Py_ssize_t i, j, base
    cdef double loss = 0.0
    cdef double mx, total, e, v
    for i in range(rows):
        base = i * cols
        mx = logits[base]
        for j in range(1, cols):
            v = logits[base + j]
            if v > mx:
                mx = v
        total = 0.0
        for j in range(cols):
            e = exp(logits[base + j] - mx)
            probs[base + j] = e
            total += e
        for j in range(cols):
            probs[base + j] /= total
        loss += log(total) + mx - logits[base + targets[i]]
    return loss / rows, probsa


def cross_entropy_grad(double[::1] probs, long long[::1] targets,
                       Py_ssize_t rows, Py_ssize_t cols, double scale):
    cdef array.array outa = _zeros(rows * cols)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, base
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = probs[base + j] * scale
        out[base + targets[i]] -= scale
    return outa
