#pragma once

#include <cstdint>

namespace ctrlgen::kernels {

// Hot loops exist in two variants: a serial reference and an OpenMP version
// parallelised over independent output rows. Per-element arithmetic order is
// identical in both (shared noinline row helpers), so results are bit-equal
// and the serial variant doubles as the test oracle for the parallel one.
enum class Mode { serial, parallel };

Mode mode();
void set_mode(Mode m);
int thread_count();

// C = A (MxK) * B (KxN), row-major. Accumulates into C after zeroing.
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nn_parallel(const double* a, const double* b, double* c, int m, int k, int n);

// C = A (MxK) * B^T (NxK)
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_parallel(const double* a, const double* b, double* c, int m, int k, int n);

// C = A^T (A is KxM) * B (KxN)
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_parallel(const double* a, const double* b, double* c, int m, int k, int n);

// Row-wise softmax over the trailing dimension; rows x n. -inf entries get
// zero probability; a row whose entries are all -inf is reported via the
// return value (index of first such row, or -1).
int softmax_rows(const double* x, double* out, int rows, int n);
int softmax_rows_serial(const double* x, double* out, int rows, int n);
int softmax_rows_parallel(const double* x, double* out, int rows, int n);

// Row-wise layer norm with affine; saves per-row mean and inverse stddev for
// the backward pass when save != nullptr (2 doubles per row: mu, rstd).
void layer_norm_rows(const double* x, const double* gain, const double* bias, double eps,
                     double* out, double* save, int rows, int n);
void layer_norm_rows_serial(const double* x, const double* gain, const double* bias, double eps,
                            double* out, double* save, int rows, int n);
void layer_norm_rows_parallel(const double* x, const double* gain, const double* bias, double eps,
                              double* out, double* save, int rows, int n);

// Elementwise exact GELU: x * Phi(x).
void gelu(const double* x, double* out, std::int64_t n);
void gelu_serial(const double* x, double* out, std::int64_t n);
void gelu_parallel(const double* x, double* out, std::int64_t n);

// Multi-head attention forward. q: tq x c, k/v: tk x c, heads*hd == c.
// mask: tq x tk (1 = allowed) or nullptr for all-allowed. probs (may be
// nullptr) receives heads x tq x tk attention weights for the backward pass.
// Returns index of first query row with no allowed key, or -1.
int attention_forward(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                      double* out, double* probs, int tq, int tk, int c, int heads);
int attention_forward_serial(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                             double* out, double* probs, int tq, int tk, int c, int heads);
int attention_forward_parallel(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                               double* out, double* probs, int tq, int tk, int c, int heads);

// Attention backward; accumulates into dq/dk/dv (parallel over heads only,
// so accumulation order within a head matches the serial reference).
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        int tq, int tk, int c, int heads);

}  // namespace ctrlgen::kernels
