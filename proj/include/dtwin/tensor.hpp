#pragma once

/**
 * @file tensor.hpp
 * @brief Dense float64 tensors with reverse-mode automatic differentiation.
 *
 * Every op that sees an input with requires_grad records itself (inputs plus an
 * adjoint closure) onto the output node. The adjoint closures are written in
 * terms of the same recorded ops, so running the reverse sweep with
 * create_graph=true yields gradients that are themselves differentiable. This
 * is what the gradient penalty of the WGAN critic needs.
 *
 * Node ids come from a global monotone counter, so sorting reachable nodes by
 * id gives a topological order of the computation record.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dtwin::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

/// Adjoint of one primitive: given dL/d(out) and out itself, return dL/d(input_i)
/// for every input. `needed[i]` is false when nothing downstream asks for input
/// i; the adjoint may then return an undefined Tensor for it.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out,
                                                     const std::vector<bool>& needed)>;

namespace detail {
struct Node;
struct Access;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor full(Shape shape, double value);
    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    std::vector<double> to_vector() const;
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    /// Accumulated gradient of a leaf after backward(); empty until then.
    std::optional<Tensor> grad() const;
    void zero_grad() const;

    const char* op() const;
    std::uint64_t id() const;
    bool is_leaf() const;
    const std::vector<Tensor>& inputs() const;

    /// Same values, cut from the record.
    Tensor detach() const;
    /// Fresh leaf with the same values and requires_grad set.
    Tensor as_leaf(bool requires_grad = true) const;

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct detail::Access;
};

// ---------------------------------------------------------------------------
// Grad mode

bool grad_enabled() noexcept;

/// Scoped switch for op recording on the current thread.
class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

struct NoGradGuard : GradModeGuard {
    NoGradGuard() : GradModeGuard(false) {}
};

/// Create an op node. When grad mode is on and any input requires grad, the node
/// keeps its inputs and adjoint; otherwise it is a plain constant.
Tensor record_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn backward);

// ---------------------------------------------------------------------------
// Primitive ops

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise binary ops. Shapes must match, or one side must hold a single value.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor rsub(double a, const Tensor& b);  // a - b

Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Broadcast a one-element tensor to `shape`.
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Inverse of slice: embed `a` at offset `begin` of a zero tensor whose `axis` extent is `total`.
Tensor pad(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t total);

/// out[i] = a[index[i]] along axis 0.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index);
/// out[index[i]] += a[i] along axis 0, out has `n_out` rows. Each output cell is
/// summed in sorted order of its contributions, so the result does not depend on
/// the order of the rows of `a`.
Tensor scatter_add_rows(const Tensor& a, const std::vector<std::size_t>& index, std::size_t n_out);

// Compositions used often enough to name.
Tensor add_row(const Tensor& a, const Tensor& row);      // a[m x n] + row[1 x n] for every row
Tensor sum_rows(const Tensor& a);                        // [m x n] -> [1 x n]
Tensor sum_cols(const Tensor& a);                        // [m x n] -> [m x 1]
Tensor row_norms(const Tensor& a, double eps = 0.0);     // sqrt(sum_j a_ij^2 + eps) -> [m x 1]

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }

// ---------------------------------------------------------------------------
// Differentiation

/// Gradients of scalar `output` w.r.t. each of `wrt`. With create_graph the
/// returned tensors are recorded and can be differentiated again.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph = false);

/// Reverse sweep from scalar `loss`; accumulates into the grad slot of every
/// requires_grad leaf reachable from it.
void backward(const Tensor& loss);

/// grad_x f(x), recorded so that functions of it can be differentiated w.r.t.
/// whatever parameters f closes over.
Tensor input_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x);

struct RecordEntry {
    const char* op;
    std::uint64_t output_id;
    std::vector<std::uint64_t> input_ids;
};

/// The computation record reachable from `output`, in topological order.
std::vector<RecordEntry> trace(const Tensor& output);

struct FiniteDifferenceReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool pass = false;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

/// Compare backward() against central differences, component by component.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
FiniteDifferenceReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                               const Tensor& x, double h = 1e-5, double tol = 1e-4);

}  // namespace dtwin::ad
