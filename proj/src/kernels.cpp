#include "ctrlgen/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ctrlgen::kernels {

namespace {

Mode g_mode = Mode::parallel;

#define CTRLGEN_NOINLINE __attribute__((noinline))

// Row helpers are noinline so the serial and parallel drivers share one
// instantiation and therefore one floating-point instruction sequence.

CTRLGEN_NOINLINE void matmul_nn_row(const double* a, const double* b, double* c, int i, int k, int n) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    for (int kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

CTRLGEN_NOINLINE void matmul_nt_row(const double* a, const double* b, double* c, int i, int k, int n) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] = acc;
    }
}

// For A^T B the output row i reads column i of A; accumulate over k rows.
CTRLGEN_NOINLINE void matmul_tn_row(const double* a, const double* b, double* c, int i, int m, int k, int n) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    for (int kk = 0; kk < k; ++kk) {
        const double av = a[static_cast<std::size_t>(kk) * m + i];
        const double* brow = b + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

CTRLGEN_NOINLINE int softmax_row(const double* x, double* out, int r, int n) {
    const double* xr = x + static_cast<std::size_t>(r) * n;
    double* yr = out + static_cast<std::size_t>(r) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<double>::infinity()) return r;
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        denom += yr[j];
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < n; ++j) yr[j] *= inv;
    return -1;
}

CTRLGEN_NOINLINE void layer_norm_row(const double* x, const double* gain, const double* bias, double eps,
                                     double* out, double* save, int r, int n) {
    const double* xr = x + static_cast<std::size_t>(r) * n;
    double* yr = out + static_cast<std::size_t>(r) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        const double d = xr[j] - mu;
        var += d * d;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * rstd * gain[j] + bias[j];
    if (save) {
        save[2 * static_cast<std::size_t>(r)] = mu;
        save[2 * static_cast<std::size_t>(r) + 1] = rstd;
    }
}

CTRLGEN_NOINLINE void gelu_chunk(const double* x, double* out, std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
        const double v = x[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
    }
}

// One (head, query row) of attention: logits against all keys, masked
// softmax, convex combination of V rows.
CTRLGEN_NOINLINE int attention_rowhead(const double* q, const double* k, const double* v,
                                       const std::uint8_t* mask, double* out, double* probs,
                                       int h, int i, int tq, int tk, int c, int hd) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double* qrow = q + static_cast<std::size_t>(i) * c + static_cast<std::size_t>(h) * hd;
    double* prow = probs + (static_cast<std::size_t>(h) * tq + i) * tk;
    const std::uint8_t* mrow = mask ? mask + static_cast<std::size_t>(i) * tk : nullptr;

    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < tk; ++j) {
        if (mrow && !mrow[j]) {
            prow[j] = -std::numeric_limits<double>::infinity();
            continue;
        }
        const double* krow = k + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
        double acc = 0.0;
        for (int d = 0; d < hd; ++d) acc += qrow[d] * krow[d];
        prow[j] = acc * scale;
        mx = std::max(mx, prow[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) return i;
    double denom = 0.0;
    for (int j = 0; j < tk; ++j) {
        prow[j] = (prow[j] == -std::numeric_limits<double>::infinity()) ? 0.0 : std::exp(prow[j] - mx);
        denom += prow[j];
    }
    const double inv = 1.0 / denom;
    double* orow = out + static_cast<std::size_t>(i) * c + static_cast<std::size_t>(h) * hd;
    for (int d = 0; d < hd; ++d) orow[d] = 0.0;
    for (int j = 0; j < tk; ++j) {
        prow[j] *= inv;
        if (prow[j] == 0.0) continue;
        const double w = prow[j];
        const double* vrow = v + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
        for (int d = 0; d < hd; ++d) orow[d] += w * vrow[d];
    }
    return -1;
}

}  // namespace

Mode mode() { return g_mode; }
void set_mode(Mode m) { g_mode = m; }

int thread_count() {
#ifdef _OPENMP
    return g_mode == Mode::parallel ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}
void matmul_nn_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_nn_row(a, b, c, i, k, n);
}
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    if (g_mode == Mode::parallel)
        matmul_nn_parallel(a, b, c, m, k, n);
    else
        matmul_nn_serial(a, b, c, m, k, n);
}

void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}
void matmul_nt_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    if (g_mode == Mode::parallel)
        matmul_nt_parallel(a, b, c, m, k, n);
    else
        matmul_nt_serial(a, b, c, m, k, n);
}

void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, m, k, n);
}
void matmul_tn_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    if (g_mode == Mode::parallel)
        matmul_tn_parallel(a, b, c, m, k, n);
    else
        matmul_tn_serial(a, b, c, m, k, n);
}

int softmax_rows_serial(const double* x, double* out, int rows, int n) {
    for (int r = 0; r < rows; ++r)
        if (softmax_row(x, out, r, n) >= 0) return r;
    return -1;
}
int softmax_rows_parallel(const double* x, double* out, int rows, int n) {
    int bad = -1;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        if (softmax_row(x, out, r, n) >= 0) {
#pragma omp critical
            bad = (bad < 0) ? r : std::min(bad, r);
        }
    }
    return bad;
}
int softmax_rows(const double* x, double* out, int rows, int n) {
    return g_mode == Mode::parallel ? softmax_rows_parallel(x, out, rows, n) : softmax_rows_serial(x, out, rows, n);
}

void layer_norm_rows_serial(const double* x, const double* gain, const double* bias, double eps,
                            double* out, double* save, int rows, int n) {
    for (int r = 0; r < rows; ++r) layer_norm_row(x, gain, bias, eps, out, save, r, n);
}
void layer_norm_rows_parallel(const double* x, const double* gain, const double* bias, double eps,
                              double* out, double* save, int rows, int n) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) layer_norm_row(x, gain, bias, eps, out, save, r, n);
}
void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps,
                     double* out, double* save, int rows, int n) {
    if (g_mode == Mode::parallel)
        layer_norm_rows_parallel(x, gain, bias, eps, out, save, rows, n);
    else
        layer_norm_rows_serial(x, gain, bias, eps, out, save, rows, n);
}

void gelu_serial(const double* x, double* out, std::int64_t n) { gelu_chunk(x, out, 0, n); }
void gelu_parallel(const double* x, double* out, std::int64_t n) {
#ifdef _OPENMP
    const int nt = omp_get_max_threads();
    const std::int64_t chunk = (n + nt - 1) / nt;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < nt; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo < hi) gelu_chunk(x, out, lo, hi);
    }
#else
    gelu_chunk(x, out, 0, n);
#endif
}
void gelu(const double* x, double* out, std::int64_t n) {
    if (g_mode == Mode::parallel)
        gelu_parallel(x, out, n);
    else
        gelu_serial(x, out, n);
}

int attention_forward_serial(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                             double* out, double* probs, int tq, int tk, int c, int heads) {
    const int hd = c / heads;
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < tq; ++i)
            if (attention_rowhead(q, k, v, mask, out, probs, h, i, tq, tk, c, hd) >= 0) return i;
    return -1;
}
int attention_forward_parallel(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                               double* out, double* probs, int tq, int tk, int c, int heads) {
    const int hd = c / heads;
    int bad = -1;
#pragma omp parallel for schedule(static) collapse(2)
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < tq; ++i)
            if (attention_rowhead(q, k, v, mask, out, probs, h, i, tq, tk, c, hd) >= 0) {
#pragma omp critical
                bad = (bad < 0) ? i : std::min(bad, i);
            }
    return bad;
}
int attention_forward(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                      double* out, double* probs, int tq, int tk, int c, int heads) {
    if (g_mode == Mode::parallel) return attention_forward_parallel(q, k, v, mask, out, probs, tq, tk, c, heads);
    return attention_forward_serial(q, k, v, mask, out, probs, tq, tk, c, heads);
}

namespace {

// Backward for one head. dk/dv accumulation touches every key row, so
// parallelism stays at head granularity to keep accumulation order fixed.
CTRLGEN_NOINLINE void attention_backward_head(const double* q, const double* k, const double* v,
                                              const double* probs, const double* dout,
                                              double* dq, double* dk, double* dv,
                                              int h, int tq, int tk, int c, int hd) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int i = 0; i < tq; ++i) {
        const double* prow = probs + (static_cast<std::size_t>(h) * tq + i) * tk;
        const double* dorow = dout + static_cast<std::size_t>(i) * c + static_cast<std::size_t>(h) * hd;
        const double* qrow = q + static_cast<std::size_t>(i) * c + static_cast<std::size_t>(h) * hd;
        double* dqrow = dq + static_cast<std::size_t>(i) * c + static_cast<std::size_t>(h) * hd;

        // dA[j] = dout . v_j ; dlogit = p * (dA - sum_j p_j dA_j)
        double dot = 0.0;
        for (int j = 0; j < tk; ++j) {
            if (prow[j] == 0.0) continue;
            const double* vrow = v + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
            double da = 0.0;
            for (int d = 0; d < hd; ++d) da += dorow[d] * vrow[d];
            dot += prow[j] * da;
        }
        for (int j = 0; j < tk; ++j) {
            const double p = prow[j];
            if (p == 0.0) continue;
            const double* vrow = v + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
            const double* krow = k + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
            double da = 0.0;
            for (int d = 0; d < hd; ++d) da += dorow[d] * vrow[d];
            const double dlogit = p * (da - dot) * scale;
            double* dkrow = dk + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
            double* dvrow = dv + static_cast<std::size_t>(j) * c + static_cast<std::size_t>(h) * hd;
            for (int d = 0; d < hd; ++d) {
                dqrow[d] += dlogit * krow[d];
                dkrow[d] += dlogit * qrow[d];
                dvrow[d] += p * dorow[d];
            }
        }
    }
}

}  // namespace

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        int tq, int tk, int c, int heads) {
    const int hd = c / heads;
    if (g_mode == Mode::parallel) {
#pragma omp parallel for schedule(static)
        for (int h = 0; h < heads; ++h) attention_backward_head(q, k, v, probs, dout, dq, dk, dv, h, tq, tk, c, hd);
    } else {
        for (int h = 0; h < heads; ++h) attention_backward_head(q, k, v, probs, dout, dq, dk, dv, h, tq, tk, c, hd);
    }
}

}  // namespace ctrlgen::kernels
