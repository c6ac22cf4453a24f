#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrlgen/rng.hpp"

namespace ctrlgen {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tensor;

// Reverse-mode node: parents plus a function scattering the output gradient
// into parent gradient buffers.
struct GradNode {
    const char* op = "";
    std::vector<Tensor> parents;
    std::function<void(const Tensor& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until needed; values.size() once allocated
    bool requires_grad = false;
    std::shared_ptr<GradNode> node;
};

// Value-semantic handle over a shared buffer. Tensors are treated as immutable
// once produced by an op; in-place mutation is reserved for parameter updates.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor randn(Shape shape, RngState& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return impl_->values.size(); }

    double* data() { return impl_->values.data(); }
    const double* data() const { return impl_->values.data(); }
    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }
    double at(std::size_t i) const { return impl_->values[i]; }
    double item() const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool b);

    std::vector<double>& grad();  // allocates zeros on first use
    const std::vector<double>& grad() const;
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    std::shared_ptr<GradNode>& node() { return impl_->node; }
    const std::shared_ptr<GradNode>& node() const { return impl_->node; }
    TensorImpl* impl() const { return impl_.get(); }

    bool all_finite() const;

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Autograd evaluation mode. Sampling runs under NoGradGuard so ops skip node
// construction entirely.
bool grad_enabled();
struct NoGradGuard {
    bool prev;
    NoGradGuard();
    ~NoGradGuard();
};

// Reverse sweep from a scalar output; accumulates into the grad buffers of
// every tensor with requires_grad on the path.
void backward(const Tensor& loss);

}  // namespace ctrlgen
