#include "ctrlgen/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace ctrlgen {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape shape) {
    impl_ = std::make_shared<TensorImpl>();
    impl_->values.assign(shape_numel(shape), 0.0);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = value;
    return t;
}

Tensor Tensor::randn(Shape shape, RngState& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->values[0];
}

Tensor& Tensor::set_requires_grad(bool b) {
    impl_->requires_grad = b;
    if (b && impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return *this;
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
    for (double& g : impl_->grad) g = 0.0;
}

bool Tensor::all_finite() const {
    for (double v : impl_->values)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward() requires a scalar output, got " + shape_str(loss.shape()));

    // Topological order by iterative DFS.
    std::vector<Tensor> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    seen.insert(loss.impl());
    while (!stack.empty()) {
        auto& top = stack.back();
        GradNode* node = top.first.node().get();
        std::size_t fan = node ? node->parents.size() : 0;
        if (top.second < fan) {
            Tensor parent = node->parents[top.second++];
            if (!seen.count(parent.impl())) {
                seen.insert(parent.impl());
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }

    // Interior grads are zeroed per sweep so independent graphs never mix;
    // leaf grads accumulate across calls by design.
    for (Tensor& t : order)
        if (t.node() && t.impl() != loss.impl()) t.grad().assign(t.numel(), 0.0);

    Tensor seed = loss;
    seed.grad().assign(1, 1.0);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Tensor& t = *it;
        if (t.node() && t.node()->backward) t.node()->backward(t);
    }
}

}  // namespace ctrlgen
