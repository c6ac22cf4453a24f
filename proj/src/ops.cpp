#include "ctrlgen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "ctrlgen/kernels.hpp"
#include "ctrlgen/mask.hpp"

namespace ctrlgen::ops {

namespace {

bool any_requires(const std::vector<Tensor>& parents) {
    for (const Tensor& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

std::string op_msg(const char* op, const std::string& what) { return std::string(op) + ": " + what; }

// Attach the grad node (when grad mode is on) and enforce the finite-output
// contract, naming the offending op.
Tensor finish(const char* op, Tensor out, std::vector<Tensor> parents, std::function<void(const Tensor&)> bw) {
    if (!out.all_finite()) throw NumericError(op_msg(op, "non-finite values in output"));
    if (grad_enabled() && any_requires(parents)) {
        out.set_requires_grad(true);
        auto node = std::make_shared<GradNode>();
        node->op = op;
        node->parents = std::move(parents);
        node->backward = std::move(bw);
        out.node() = node;
    }
    return out;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(op_msg(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())));
}

void axpy(std::vector<double>& dst, const std::vector<double>& src, double s = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.at(i) + b.at(i);
    return finish("add", out, {a, b}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) axpy(ps[0].grad(), o.grad());
        if (ps[1].requires_grad()) axpy(ps[1].grad(), o.grad());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tensor out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.at(i) - b.at(i);
    return finish("sub", out, {a, b}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) axpy(ps[0].grad(), o.grad());
        if (ps[1].requires_grad()) axpy(ps[1].grad(), o.grad(), -1.0);
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.at(i) * b.at(i);
    return finish("mul", out, {a, b}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        const std::size_t n2 = o.numel();
        if (ps[0].requires_grad()) {
            auto& g = ps[0].grad();
            for (std::size_t i = 0; i < n2; ++i) g[i] += o.grad()[i] * ps[1].at(i);
        }
        if (ps[1].requires_grad()) {
            auto& g = ps[1].grad();
            for (std::size_t i = 0; i < n2; ++i) g[i] += o.grad()[i] * ps[0].at(i);
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.at(i) * s;
    return finish("scale", out, {a}, [s](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) axpy(ps[0].grad(), o.grad(), s);
    });
}

Tensor add_bias(const Tensor& mat, const Tensor& bias) {
    if (mat.ndim() != 2 || bias.ndim() != 1 || mat.dim(1) != bias.dim(0))
        throw ShapeError(op_msg("add_bias", "expected [T,C] + [C], got " + shape_str(mat.shape()) + " + " + shape_str(bias.shape())));
    const int t = mat.dim(0), c = mat.dim(1);
    Tensor out(mat.shape());
    for (int r = 0; r < t; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(r) * c + j] = mat.at(static_cast<std::size_t>(r) * c + j) + bias.at(static_cast<std::size_t>(j));
    return finish("add_bias", out, {mat, bias}, [t, c](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) axpy(ps[0].grad(), o.grad());
        if (ps[1].requires_grad()) {
            auto& g = ps[1].grad();
            for (int r = 0; r < t; ++r)
                for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += o.grad()[static_cast<std::size_t>(r) * c + j];
        }
    });
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    kernels::gelu(x.data(), out.data(), static_cast<std::int64_t>(x.numel()));
    return finish("gelu", out, {x}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        const std::size_t n = o.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const double v = ps[0].at(i);
            const double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
            g[i] += o.grad()[i] * (phi + v * pdf);
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError(op_msg("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape)));
    Tensor out(std::move(shape), x.values());
    return finish("reshape", out, {x}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) axpy(ps[0].grad(), o.grad());
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError(op_msg("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape())));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    kernels::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
    return finish("matmul", out, {a, b}, [m, k, n](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) {
            std::vector<double> tmp(static_cast<std::size_t>(m) * k);
            kernels::matmul_nt(o.grad().data(), ps[1].data(), tmp.data(), m, n, k);
            axpy(ps[0].grad(), tmp);
        }
        if (ps[1].requires_grad()) {
            std::vector<double> tmp(static_cast<std::size_t>(k) * n);
            kernels::matmul_tn(ps[0].data(), o.grad().data(), tmp.data(), k, m, n);
            axpy(ps[1].grad(), tmp);
        }
    });
}

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError(op_msg("softmax", "axis out of range for " + shape_str(x.shape())));
    const int n = x.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
    for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(x.dim(i));

    Tensor out(x.shape());
    if (inner == 1) {
        const int bad = kernels::softmax_rows(x.data(), out.data(), static_cast<int>(outer), n);
        if (bad >= 0) throw ValueError(op_msg("softmax", "slice " + std::to_string(bad) + " has empty support (all -inf)"));
    } else {
        // strided slices for non-trailing axis
        std::vector<double> buf(static_cast<std::size_t>(n)), res(static_cast<std::size_t>(n));
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                for (int j = 0; j < n; ++j) buf[static_cast<std::size_t>(j)] = x.at((o * n + j) * inner + i);
                if (kernels::softmax_rows_serial(buf.data(), res.data(), 1, n) >= 0)
                    throw ValueError(op_msg("softmax", "slice has empty support (all -inf)"));
                for (int j = 0; j < n; ++j) out.data()[(o * n + j) * inner + i] = res[static_cast<std::size_t>(j)];
            }
    }
    return finish("softmax", out, {x}, [n, outer, inner](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        for (std::size_t ou = 0; ou < outer; ++ou)
            for (std::size_t in = 0; in < inner; ++in) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    const std::size_t idx = (ou * n + j) * inner + in;
                    dot += o.at(idx) * o.grad()[idx];
                }
                for (int j = 0; j < n; ++j) {
                    const std::size_t idx = (ou * n + j) * inner + in;
                    g[idx] += o.at(idx) * (o.grad()[idx] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.ndim() < 1) throw ShapeError(op_msg("layer_norm", "input must have at least one axis"));
    const int n = x.dim(x.ndim() - 1);
    if (gain.numel() != static_cast<std::size_t>(n) || bias.numel() != static_cast<std::size_t>(n))
        throw ShapeError(op_msg("layer_norm", "gain/bias must match normalised axis of length " + std::to_string(n)));
    const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(n));
    Tensor out(x.shape());
    auto saved = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 2);
    kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), eps, out.data(), saved->data(), rows, n);
    return finish("layer_norm", out, {x, gain, bias}, [rows, n, saved](const Tensor& o) {
        auto& ps = o.node()->parents;
        const Tensor& x0 = ps[0];
        const Tensor& g0 = ps[1];
        for (int r = 0; r < rows; ++r) {
            const double mu = (*saved)[2 * static_cast<std::size_t>(r)];
            const double rstd = (*saved)[2 * static_cast<std::size_t>(r) + 1];
            const std::size_t base = static_cast<std::size_t>(r) * n;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
                const double xhat = (x0.at(base + j) - mu) * rstd;
                const double dxhat = o.grad()[base + j] * g0.at(static_cast<std::size_t>(j));
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            for (int j = 0; j < n; ++j) {
                const double xhat = (x0.at(base + j) - mu) * rstd;
                const double dxhat = o.grad()[base + j] * g0.at(static_cast<std::size_t>(j));
                if (ps[0].requires_grad()) ps[0].grad()[base + j] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                if (ps[1].requires_grad()) ps[1].grad()[static_cast<std::size_t>(j)] += o.grad()[base + j] * xhat;
                if (ps[2].requires_grad()) ps[2].grad()[static_cast<std::size_t>(j)] += o.grad()[base + j];
            }
        }
    });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError(op_msg("embedding", "table must be 2-D, got " + shape_str(table.shape())));
    const int v = table.dim(0), c = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v) throw ValueError(op_msg("embedding", "index " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")"));
    Tensor out(Shape{static_cast<int>(ids.size()), c});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::memcpy(out.data() + r * c, table.data() + static_cast<std::size_t>(ids[r]) * c, sizeof(double) * static_cast<std::size_t>(c));
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return finish("embedding", out, {table}, [c, ids_copy](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        for (std::size_t r = 0; r < ids_copy->size(); ++r)
            for (int j = 0; j < c; ++j) g[static_cast<std::size_t>((*ids_copy)[r]) * c + j] += o.grad()[r * c + j];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.ndim() != 2) throw ShapeError(op_msg("gather_rows", "input must be 2-D"));
    const int t = x.dim(0), c = x.dim(1);
    for (int r : rows)
        if (r < 0 || r >= t) throw ValueError(op_msg("gather_rows", "row index out of range"));
    Tensor out(Shape{static_cast<int>(rows.size()), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::memcpy(out.data() + i * c, x.data() + static_cast<std::size_t>(rows[i]) * c, sizeof(double) * static_cast<std::size_t>(c));
    auto rows_copy = std::make_shared<std::vector<int>>(rows);
    return finish("gather_rows", out, {x}, [c, rows_copy](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        for (std::size_t i = 0; i < rows_copy->size(); ++i)
            for (int j = 0; j < c; ++j) g[static_cast<std::size_t>((*rows_copy)[i]) * c + j] += o.grad()[i * c + j];
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError(op_msg("concat_rows", "column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())));
    const int ta = a.dim(0), tb = b.dim(0), c = a.dim(1);
    Tensor out(Shape{ta + tb, c});
    std::memcpy(out.data(), a.data(), sizeof(double) * a.numel());
    std::memcpy(out.data() + a.numel(), b.data(), sizeof(double) * b.numel());
    return finish("concat_rows", out, {a, b}, [ta, tb, c](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (ps[0].requires_grad()) {
            auto& g = ps[0].grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(ta) * c; ++i) g[i] += o.grad()[i];
        }
        if (ps[1].requires_grad()) {
            auto& g = ps[1].grad();
            const std::size_t off = static_cast<std::size_t>(ta) * c;
            for (std::size_t i = 0; i < static_cast<std::size_t>(tb) * c; ++i) g[i] += o.grad()[off + i];
        }
    });
}

Tensor slice_rows(const Tensor& x, int start, int len) {
    if (x.ndim() != 2) throw ShapeError(op_msg("slice_rows", "input must be 2-D"));
    const int t = x.dim(0), c = x.dim(1);
    if (start < 0 || len < 0 || start + len > t) throw ShapeError(op_msg("slice_rows", "range out of bounds"));
    Tensor out(Shape{len, c});
    std::memcpy(out.data(), x.data() + static_cast<std::size_t>(start) * c, sizeof(double) * out.numel());
    return finish("slice_rows", out, {x}, [start, c](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        const std::size_t off = static_cast<std::size_t>(start) * c;
        for (std::size_t i = 0; i < o.numel(); ++i) g[off + i] += o.grad()[i];
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc);
    return finish("sum", out, {x}, [](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        const double go = o.grad()[0];
        for (double& v : g) v += go;
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    const double n = static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(acc / n);
    return finish("mean", out, {x}, [n](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        const double go = o.grad()[0] / n;
        for (double& v : g) v += go;
    });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    check_same_shape("mse", pred, target);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.at(i) - target.at(i);
        acc += d * d;
    }
    const double n = static_cast<double>(pred.numel());
    Tensor out = Tensor::scalar(acc / n);
    return finish("mse", out, {pred, target}, [n](const Tensor& o) {
        auto& ps = o.node()->parents;
        const double go = 2.0 * o.grad()[0] / n;
        for (std::size_t i = 0; i < ps[0].numel(); ++i) {
            const double d = ps[0].at(i) - ps[1].at(i);
            if (ps[0].requires_grad()) ps[0].grad()[i] += go * d;
            if (ps[1].requires_grad()) ps[1].grad()[i] -= go * d;
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) throw ShapeError(op_msg("cross_entropy", "logits must be [T,V]"));
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t)
        throw ShapeError(op_msg("cross_entropy", "target count " + std::to_string(targets.size()) + " != rows " + std::to_string(t)));
    for (int id : targets)
        if (id < 0 || id >= v) throw ValueError(op_msg("cross_entropy", "target index out of range"));
    double acc = 0.0;
    for (int r = 0; r < t; ++r) {
        const double* row = logits.data() + static_cast<std::size_t>(r) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        acc += mx + std::log(denom) - row[targets[static_cast<std::size_t>(r)]];
    }
    Tensor out = Tensor::scalar(acc / t);
    auto tg = std::make_shared<std::vector<int>>(targets);
    return finish("cross_entropy", out, {logits}, [t, v, tg](const Tensor& o) {
        auto& ps = o.node()->parents;
        if (!ps[0].requires_grad()) return;
        auto& g = ps[0].grad();
        const double go = o.grad()[0] / t;
        for (int r = 0; r < t; ++r) {
            const double* row = ps[0].data() + static_cast<std::size_t>(r) * v;
            double mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            for (int j = 0; j < v; ++j) {
                const double p = std::exp(row[j] - mx) / denom;
                g[static_cast<std::size_t>(r) * v + j] += go * (p - (j == (*tg)[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
            }
        }
    });
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask, int heads) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw ShapeError(op_msg("masked_attention", "q/k/v must be 2-D"));
    const int tq = q.dim(0), c = q.dim(1), tk = k.dim(0);
    if (k.dim(1) != c || v.dim(1) != c || v.dim(0) != tk)
        throw ShapeError(op_msg("masked_attention", "incompatible q/k/v shapes " + shape_str(q.shape()) + ", " +
                                                        shape_str(k.shape()) + ", " + shape_str(v.shape())));
    if (heads <= 0 || c % heads != 0) throw ShapeError(op_msg("masked_attention", "width not divisible by head count"));
    const std::uint8_t* mptr = nullptr;
    if (mask) {
        if (mask->rows != tq || mask->cols != tk)
            throw ShapeError(op_msg("masked_attention", "mask is " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                                                            ", expected " + std::to_string(tq) + "x" + std::to_string(tk)));
        mptr = mask->allowed.data();
    }
    Tensor out(Shape{tq, c});
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads) * tq * tk);
    const int bad = kernels::attention_forward(q.data(), k.data(), v.data(), mptr, out.data(), probs->data(), tq, tk, c, heads);
    if (bad >= 0) throw ValueError(op_msg("masked_attention", "query row " + std::to_string(bad) + " has no allowed keys"));
    return finish("masked_attention", out, {q, k, v}, [tq, tk, c, heads, probs](const Tensor& o) {
        auto& ps = o.node()->parents;
        std::vector<double> dq(static_cast<std::size_t>(tq) * c, 0.0);
        std::vector<double> dk(static_cast<std::size_t>(tk) * c, 0.0);
        std::vector<double> dv(static_cast<std::size_t>(tk) * c, 0.0);
        kernels::attention_backward(ps[0].data(), ps[1].data(), ps[2].data(), probs->data(), o.grad().data(),
                                    dq.data(), dk.data(), dv.data(), tq, tk, c, heads);
        if (ps[0].requires_grad()) axpy(ps[0].grad(), dq);
        if (ps[1].requires_grad()) axpy(ps[1].grad(), dk);
        if (ps[2].requires_grad()) axpy(ps[2].grad(), dv);
    });
}

}  // namespace ctrlgen::ops
