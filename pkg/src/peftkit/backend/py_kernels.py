"""Pure-Python numeric kernels over flat float64 buffers.

Reference implementation of the kernel contract. The compiled twin in
``_ckernels.pyx`` mirrors every loop order here so the two backends are
bit-identical (the extension is compiled without FP contraction).

All buffers are ``array('d')`` in row-major order; dimensions are passed
explicitly. Kernels allocate and return fresh buffers except ``acc``,
which accumulates in place.
"""

import math
from array import array

NAME = "pure-python"


def _zeros(n):
    return array("d", bytes(8 * n))


# ---------------------------------------------------------------- matmul

def matmul(a, b, m, k, n):
    """out[m,n] = a[m,k] @ b[k,n]"""
    out = _zeros(m * n)
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[ai + l] * b[l * n + j]
            out[oi + j] = s
    return out


def matmul_nt(a, b, m, n, k):
    """out[m,k] = a[m,n] @ b[k,n]^T"""
    out = _zeros(m * k)
    for i in range(m):
        ai = i * n
        oi = i * k
        for j in range(k):
            bj = j * n
            s = 0.0
            for l in range(n):
                s += a[ai + l] * b[bj + l]
            out[oi + j] = s
    return out


def matmul_tn(a, b, m, k, n):
    """out[k,n] = a[m,k]^T @ b[m,n]"""
    out = _zeros(k * n)
    for i in range(k):
        oi = i * n
        for j in range(n):
            s = 0.0
            for l in range(m):
                s += a[l * k + i] * b[l * n + j]
            out[oi + j] = s
    return out


# ------------------------------------------------------------- kronecker

def kron(a, b, p, q, r, s):
    """out[p*r, q*s] with out[i*r+x, j*s+y] = a[i,j] * b[x,y]."""
    cols = q * s
    out = _zeros(p * r * cols)
    for i in range(p):
        for j in range(q):
            aij = a[i * q + j]
            for x in range(r):
                row = (i * r + x) * cols + j * s
                bx = x * s
                for y in range(s):
                    out[row + y] = aij * b[bx + y]
    return out


def kron_grad_a(g, b, p, q, r, s):
    """da[i,j] = sum_{x,y} g[i*r+x, j*s+y] * b[x,y]"""
    cols = q * s
    out = _zeros(p * q)
    for i in range(p):
        for j in range(q):
            acc_v = 0.0
            for x in range(r):
                row = (i * r + x) * cols + j * s
                bx = x * s
                for y in range(s):
                    acc_v += g[row + y] * b[bx + y]
            out[i * q + j] = acc_v
    return out


def kron_grad_b(g, a, p, q, r, s):
    """db[x,y] = sum_{i,j} g[i*r+x, j*s+y] * a[i,j]"""
    cols = q * s
    out = _zeros(r * s)
    for x in range(r):
        for y in range(s):
            acc_v = 0.0
            for i in range(p):
                for j in range(q):
                    acc_v += g[(i * r + x) * cols + j * s + y] * a[i * q + j]
            out[x * s + y] = acc_v
    return out


# ----------------------------------------------------------- elementwise

def ew_add(a, b, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = a[i] + b[i]
    return out


def ew_sub(a, b, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = a[i] - b[i]
    return out


def ew_mul(a, b, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = a[i] * b[i]
    return out


def ew_scale(a, c, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = a[i] * c
    return out


def acc(dst, src, n):
    """dst += src, in place."""
    for i in range(n):
        dst[i] += src[i]


def relu(x, n):
    out = _zeros(n)
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return out


def relu_grad(g, x, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = g[i] if x[i] > 0.0 else 0.0
    return out


def tanh(x, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = math.tanh(x[i])
    return out


def tanh_grad(g, y, n):
    out = _zeros(n)
    for i in range(n):
        out[i] = g[i] * (1.0 - y[i] * y[i])
    return out


# ------------------------------------------------------------- row-wise

def softmax_rows(x, rows, cols):
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        mx = x[base]
        for j in range(1, cols):
            v = x[base + j]
            if v > mx:
                mx = v
        total = 0.0
        for j in range(cols):
            e = math.exp(x[base + j] - mx)
            out[base + j] = e
            total += e
        for j in range(cols):
            out[base + j] /= total
    return out


def softmax_rows_grad(g, y, rows, cols):
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        dot = 0.0
        for j in range(cols):
            dot += g[base + j] * y[base + j]
        for j in range(cols):
            out[base + j] = y[base + j] * (g[base + j] - dot)
    return out


def layernorm_rows(x, gain, bias, rows, cols, eps):
    """Returns (y, xhat, rstd). Per row: xhat = (x - mean)/std, y = xhat*g + b."""
    y = _zeros(rows * cols)
    xhat = _zeros(rows * cols)
    rstd = _zeros(rows)
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
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(cols):
            h = (x[base + j] - mean) * r
            xhat[base + j] = h
            y[base + j] = h * gain[j] + bias[j]
    return y, xhat, rstd


def layernorm_rows_grad(g, gain, xhat, rstd, rows, cols):
    """Returns (dx, dgain, dbias)."""
    dx = _zeros(rows * cols)
    dgain = _zeros(cols)
    dbias = _zeros(cols)
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
    return dx, dgain, dbias


def row_mul(x, v, rows, cols):
    """out[i,j] = x[i,j] * v[j]"""
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = x[base + j] * v[j]
    return out


def row_mul_grad_v(g, x, rows, cols):
    """dv[j] = sum_i g[i,j] * x[i,j]"""
    out = _zeros(cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j] += g[base + j] * x[base + j]
    return out


def row_add(x, v, rows, cols):
    """out[i,j] = x[i,j] + v[j]"""
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = x[base + j] + v[j]
    return out


def col_sum(g, rows, cols):
    out = _zeros(cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j] += g[base + j]
    return out


def sum_all(x, n):
    s = 0.0
    for i in range(n):
        s += x[i]
    return s


def transpose(x, rows, cols):
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[j * rows + i] = x[base + j]
    return out


# ----------------------------------------------------------- embeddings

def gather_rows(table, ids, count, cols):
    out = _zeros(count * cols)
    for i in range(count):
        src = ids[i] * cols
        dst = i * cols
        for j in range(cols):
            out[dst + j] = table[src + j]
    return out


def scatter_add_rows(g, ids, count, out_rows, cols):
    out = _zeros(out_rows * cols)
    for i in range(count):
        dst = ids[i] * cols
        src = i * cols
        for j in range(cols):
            out[dst + j] += g[src + j]
    return out


# -------------------------------------------------------- cross entropy

def cross_entropy_rows(logits, targets, rows, cols):
    """Mean negative log-likelihood over rows. Returns (loss, probs)."""
    probs = _zeros(rows * cols)
    loss = 0.0
    for i in range(rows):
        base = i * cols
        mx = logits[base]
        for j in range(1, cols):
            v = logits[base + j]
            if v > mx:
                mx = v
        total = 0.0
        for j in range(cols):
            e = math.exp(logits[base + j] - mx)
            probs[base + j] = e
            total += e
        for j in range(cols):
            probs[base + j] /= total
        loss += math.log(total) + mx - logits[base + targets[i]]
    return loss / rows, probs


def cross_entropy_grad(probs, targets, rows, cols, scale):
    """dlogits = (probs - onehot(targets)) * scale"""
    out = _zeros(rows * cols)
    for i in range(rows):
        base = i * cols
        for j in range(cols):
            out[base + j] = probs[base + j] * scale
        out[base + targets[i]] -= scale
    return out
