#include "dtwin/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dtwin/errors.hpp"

namespace dtwin::ad {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    const char* op = "leaf";
    std::uint64_t id = 0;
    std::vector<Tensor> inputs;
    BackwardFn backward;
    std::shared_ptr<Node> grad;  // leaf gradient slot, never recorded
};

struct Access {
    static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// Sum a broadcast gradient back down to a one-element operand.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
    if (g.shape() == shape) return g;
    return reshape(sum(g), shape);
}

Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (same_shape(a, b)) return a.shape();
    if (b.numel() == 1) return a.shape();
    if (a.numel() == 1) return b.shape();
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not compatible");
}

template <typename F>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, std::size_t n, F&& f) {
    std::vector<double> out(n);
    const auto da = a.data();
    const auto db = b.data();
    const bool sa = da.size() == 1 && n != 1;
    const bool sb = db.size() == 1 && n != 1;
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[sa ? 0 : i], db[sb ? 0 : i], i);
    return out;
}

template <typename F>
std::vector<double> unary_values(const Tensor& a, F&& f) {
    const auto da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i], i);
    return out;
}

std::vector<double> mask_values(const Tensor& a, double pos, double neg) {
    return unary_values(a, [&](double v, std::size_t) { return v > 0.0 ? pos : neg; });
}

void check_rank2(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(a.shape()));
    }
}

std::size_t row_size(const Tensor& a) {
    if (a.rank() == 0) throw DimensionError("row op on a scalar");
    return a.shape()[0] == 0 ? 0 : a.numel() / a.shape()[0];
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    auto node = make_node(std::move(shape), std::move(data));
    node->requires_grad = requires_grad;
    return detail::Access::wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
    return from({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return from({r, c}, std::move(values), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
    if (rank() == 0) return 1;
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() < 2) return 1;
    return shape()[1];
}

std::span<const double> Tensor::data() const { return {node_->data.data(), node_->data.size()}; }
std::vector<double> Tensor::to_vector() const { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::optional<Tensor> Tensor::grad() const {
    if (!node_->grad) return std::nullopt;
    return Tensor(node_->grad);
}

void Tensor::zero_grad() const { node_->grad.reset(); }

const char* Tensor::op() const { return node_->op; }
std::uint64_t Tensor::id() const { return node_->id; }
bool Tensor::is_leaf() const { return node_->inputs.empty(); }
const std::vector<Tensor>& Tensor::inputs() const { return node_->inputs; }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }
Tensor Tensor::as_leaf(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

// ---------------------------------------------------------------------------

bool grad_enabled() noexcept { return t_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

Tensor record_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn backward) {
    auto node = make_node(std::move(shape), std::move(data));
    node->op = op;
    if (t_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->inputs = std::move(inputs);
            node->backward = std::move(backward);
        }
    }
    return detail::Access::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    // i-k-j order: every output cell accumulates over k in ascending order, so a
    // row's result never depends on where the row sits in the matrix.
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return record_op("matmul", {m, n}, std::move(out), {a, b},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         const auto& in = out.inputs();
                         Tensor ga, gb;
                         if (need[0]) ga = matmul(g, transpose(in[1]));
                         if (need[1]) gb = matmul(transpose(in[0]), g);
                         return std::vector<Tensor>{ga, gb};
                     });
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    const auto d = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = d[i * n + j];
    return record_op("transpose", {n, m}, std::move(out), {a},
                     [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                         return std::vector<Tensor>{transpose(g)};
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    Shape s = binary_shape(a, b, "add");
    auto v = binary_values(a, b, shape_numel(s), [](double x, double y, std::size_t) { return x + y; });
    return record_op("add", std::move(s), std::move(v), {a, b},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         const auto& in = out.inputs();
                         Tensor ga, gb;
                         if (need[0]) ga = reduce_to(g, in[0].shape());
                         if (need[1]) gb = reduce_to(g, in[1].shape());
                         return std::vector<Tensor>{ga, gb};
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Shape s = binary_shape(a, b, "sub");
    auto v = binary_values(a, b, shape_numel(s), [](double x, double y, std::size_t) { return x - y; });
    return record_op("sub", std::move(s), std::move(v), {a, b},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         const auto& in = out.inputs();
                         Tensor ga, gb;
                         if (need[0]) ga = reduce_to(g, in[0].shape());
                         if (need[1]) gb = reduce_to(neg(g), in[1].shape());
                         return std::vector<Tensor>{ga, gb};
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Shape s = binary_shape(a, b, "mul");
    auto v = binary_values(a, b, shape_numel(s), [](double x, double y, std::size_t) { return x * y; });
    return record_op("mul", std::move(s), std::move(v), {a, b},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         const auto& in = out.inputs();
                         Tensor ga, gb;
                         if (need[0]) ga = reduce_to(mul(g, in[1]), in[0].shape());
                         if (need[1]) gb = reduce_to(mul(g, in[0]), in[1].shape());
                         return std::vector<Tensor>{ga, gb};
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
    Shape s = binary_shape(a, b, "div");
    auto v = binary_values(a, b, shape_numel(s), [](double x, double y, std::size_t i) {
        if (y == 0.0) throw DomainError("div: division by zero", i);
        return x / y;
    });
    return record_op("div", std::move(s), std::move(v), {a, b},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         const auto& in = out.inputs();
                         Tensor ga, gb;
                         if (need[0]) ga = reduce_to(div(g, in[1]), in[0].shape());
                         if (need[1]) gb = reduce_to(neg(div(mul(g, out), in[1])), in[1].shape());
                         return std::vector<Tensor>{ga, gb};
                     });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor rsub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }

Tensor neg(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t) { return -x; });
    return record_op("neg", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                         return std::vector<Tensor>{neg(g)};
                     });
}

Tensor tanh(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t) { return std::tanh(x); });
    return record_op("tanh", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{mul(g, rsub(1.0, square(out)))};
                     });
}

Tensor relu(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t) { return x > 0.0 ? x : 0.0; });
    return record_op("relu", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         const Tensor& x = out.inputs()[0];
                         return std::vector<Tensor>{mul(g, Tensor::from(x.shape(), mask_values(x, 1.0, 0.0)))};
                     });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    auto v = unary_values(a, [slope](double x, std::size_t) { return x > 0.0 ? x : slope * x; });
    return record_op("leaky_relu", a.shape(), std::move(v), {a},
                     [slope](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         const Tensor& x = out.inputs()[0];
                         return std::vector<Tensor>{
                             mul(g, Tensor::from(x.shape(), mask_values(x, 1.0, slope)))};
                     });
}

Tensor sigmoid(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t) { return 1.0 / (1.0 + std::exp(-x)); });
    return record_op("sigmoid", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{mul(g, mul(out, rsub(1.0, out)))};
                     });
}

Tensor exp(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t i) {
        const double y = std::exp(x);
        if (!std::isfinite(y)) throw DomainError("exp: overflow", i);
        return y;
    });
    return record_op("exp", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{mul(g, out)};
                     });
}

Tensor log(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t i) {
        if (!(x > 0.0)) throw DomainError("log: non-positive argument", i);
        return std::log(x);
    });
    return record_op("log", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{div(g, out.inputs()[0])};
                     });
}

Tensor square(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t) { return x * x; });
    return record_op("square", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{mul(g, mul(out.inputs()[0], 2.0))};
                     });
}

Tensor sqrt(const Tensor& a) {
    auto v = unary_values(a, [](double x, std::size_t i) {
        if (x < 0.0) throw DomainError("sqrt: negative argument", i);
        return std::sqrt(x);
    });
    return record_op("sqrt", a.shape(), std::move(v), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{div(mul(g, 0.5), out)};
                     });
}

// ---------------------------------------------------------------------------
// Reductions and shape

Tensor sum(const Tensor& a) {
    const auto d = a.data();
    // Sorted accumulation keeps the value independent of element order.
    std::vector<double> tmp(d.begin(), d.end());
    std::sort(tmp.begin(), tmp.end());
    double s = 0.0;
    for (double v : tmp) s += v;
    return record_op("sum", {}, {s}, {a}, [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
        return std::vector<Tensor>{expand(g, out.inputs()[0].shape())};
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ContractError("mean of empty tensor");
    return mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor expand(const Tensor& scalar, const Shape& shape) {
    if (scalar.numel() != 1) throw DimensionError("expand expects a one-element tensor");
    std::vector<double> v(shape_numel(shape), scalar.data()[0]);
    return record_op("expand", shape, std::move(v), {scalar},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{reshape(sum(g), out.inputs()[0].shape())};
                     });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return record_op("reshape", shape, a.to_vector(), {a},
                     [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{reshape(g, out.inputs()[0].shape())};
                     });
}

namespace {

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of an empty list");
    if (parts.size() == 1) return parts.front();
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw DimensionError("concat axis out of range");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.shape()[d] != ref[d]) {
                throw DimensionError("concat: ragged shapes " + shape_str(ref) + " and " + shape_str(p.shape()));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    const AxisSplit sp = split_at(ref, axis);
    std::vector<double> out(shape_numel(out_shape));
    const std::size_t out_block = out_shape[axis] * sp.inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t block = p.shape()[axis] * sp.inner;
        const auto d = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(d.begin() + o * block, block, out.begin() + o * out_block + offset);
        }
        offset += block;
    }
    return record_op("concat", std::move(out_shape), std::move(out), parts,
                     [axis](const Tensor& g, const Tensor& out, const std::vector<bool>& need) {
                         std::vector<Tensor> gs;
                         std::size_t begin = 0;
                         const auto& in = out.inputs();
                         for (std::size_t i = 0; i < in.size(); ++i) {
                             const std::size_t len = in[i].shape()[axis];
                             gs.push_back(need[i] ? slice(g, axis, begin, begin + len) : Tensor());
                             begin += len;
                         }
                         return gs;
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank() || begin > end || end > a.shape()[axis]) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(a.shape()) + " on axis " + std::to_string(axis));
    }
    Shape s = a.shape();
    s[axis] = end - begin;
    const AxisSplit sp = split_at(a.shape(), axis);
    const std::size_t in_block = a.shape()[axis] * sp.inner;
    const std::size_t out_block = s[axis] * sp.inner;
    std::vector<double> out(shape_numel(s));
    const auto d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(d.begin() + o * in_block + begin * sp.inner, out_block, out.begin() + o * out_block);
    }
    return record_op("slice", std::move(s), std::move(out), {a},
                     [axis, begin](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{pad(g, axis, begin, out.inputs()[0].shape()[axis])};
                     });
}

Tensor pad(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t total) {
    if (axis >= a.rank() || begin + a.shape()[axis] > total) throw DimensionError("pad out of range");
    Shape s = a.shape();
    s[axis] = total;
    const AxisSplit sp = split_at(a.shape(), axis);
    const std::size_t in_block = a.shape()[axis] * sp.inner;
    const std::size_t out_block = total * sp.inner;
    std::vector<double> out(shape_numel(s), 0.0);
    const auto d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(d.begin() + o * in_block, in_block, out.begin() + o * out_block + begin * sp.inner);
    }
    return record_op("pad", std::move(s), std::move(out), {a},
                     [axis, begin](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         const std::size_t len = out.inputs()[0].shape()[axis];
                         return std::vector<Tensor>{slice(g, axis, begin, begin + len)};
                     });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
    const std::size_t rs = row_size(a);
    const std::size_t n = a.shape()[0];
    Shape s = a.shape();
    s[0] = index.size();
    std::vector<double> out(index.size() * rs);
    const auto d = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) throw LookupError("gather_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(n));
        std::copy_n(d.begin() + index[i] * rs, rs, out.begin() + i * rs);
    }
    return record_op("gather_rows", std::move(s), std::move(out), {a},
                     [index](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                         return std::vector<Tensor>{scatter_add_rows(g, index, out.inputs()[0].shape()[0])};
                     });
}

Tensor scatter_add_rows(const Tensor& a, const std::vector<std::size_t>& index, std::size_t n_out) {
    const std::size_t rs = row_size(a);
    if (index.size() != a.shape()[0]) throw DimensionError("scatter_add_rows: index length differs from rows");
    Shape s = a.shape();
    s[0] = n_out;
    std::vector<std::vector<std::size_t>> buckets(n_out);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n_out) throw LookupError("scatter_add_rows: index out of range");
        buckets[index[i]].push_back(i);
    }
    std::vector<double> out(n_out * rs, 0.0);
    const auto d = a.data();
    std::vector<double> tmp;
    for (std::size_t r = 0; r < n_out; ++r) {
        const auto& b = buckets[r];
        if (b.empty()) continue;
        if (b.size() == 1) {
            std::copy_n(d.begin() + b[0] * rs, rs, out.begin() + r * rs);
            continue;
        }
        tmp.resize(b.size());
        for (std::size_t j = 0; j < rs; ++j) {
            for (std::size_t t = 0; t < b.size(); ++t) tmp[t] = d[b[t] * rs + j];
            std::sort(tmp.begin(), tmp.end());
            double acc = 0.0;
            for (double v : tmp) acc += v;
            out[r * rs + j] = acc;
        }
    }
    return record_op("scatter_add_rows", std::move(s), std::move(out), {a},
                     [index](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                         return std::vector<Tensor>{gather_rows(g, index)};
                     });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
    check_rank2(a, "add_row");
    if (row.numel() != a.cols()) throw DimensionError("add_row: row width mismatch");
    const Tensor r2 = row.rank() == 2 ? row : reshape(row, {1, row.numel()});
    return add(a, gather_rows(r2, std::vector<std::size_t>(a.rows(), 0)));
}

Tensor sum_rows(const Tensor& a) {
    check_rank2(a, "sum_rows");
    return scatter_add_rows(a, std::vector<std::size_t>(a.rows(), 0), 1);
}

Tensor sum_cols(const Tensor& a) {
    check_rank2(a, "sum_cols");
    return matmul(a, Tensor::ones({a.cols(), 1}));
}

Tensor row_norms(const Tensor& a, double eps) {
    Tensor s = sum_cols(square(a));
    if (eps != 0.0) s = add(s, eps);
    return sqrt(s);
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

// Nodes reachable from `root` that take part in differentiation, ascending id.
std::vector<NodePtr> collect(const NodePtr& root) {
    std::vector<NodePtr> out;
    std::unordered_set<const detail::Node*> seen;
    std::vector<NodePtr> stack{root};
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n.get()).second) continue;
        out.push_back(n);
        for (const auto& in : n->inputs) {
            if (in.requires_grad()) stack.push_back(detail::Access::node(in));
        }
    }
    std::sort(out.begin(), out.end(), [](const NodePtr& x, const NodePtr& y) { return x->id < y->id; });
    return out;
}

}  // namespace

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
    if (!output.defined() || output.numel() != 1) {
        throw ContractError("grad: output must be a scalar tensor");
    }
    std::vector<Tensor> result(wrt.size());
    const NodePtr& root = detail::Access::node(output);
    if (!root->requires_grad) {
        for (std::size_t i = 0; i < wrt.size(); ++i) result[i] = Tensor::zeros(wrt[i].shape());
        return result;
    }

    GradModeGuard mode(create_graph);
    const std::vector<NodePtr> order = collect(root);

    // A node is worth visiting only if some requested tensor lies beneath it.
    std::unordered_set<const detail::Node*> targets;
    for (const auto& w : wrt) targets.insert(detail::Access::node(w).get());
    std::unordered_set<const detail::Node*> useful;
    for (const auto& n : order) {
        bool u = targets.count(n.get()) > 0;
        for (const auto& in : n->inputs) u = u || useful.count(detail::Access::node(in).get()) > 0;
        if (u) useful.insert(n.get());
    }

    std::unordered_map<const detail::Node*, Tensor> acc;
    acc.emplace(root.get(), Tensor::ones(root->shape));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const NodePtr& n = *it;
        if (!n->backward || !useful.count(n.get())) continue;
        auto found = acc.find(n.get());
        if (found == acc.end()) continue;
        std::vector<bool> need(n->inputs.size());
        for (std::size_t i = 0; i < need.size(); ++i) {
            need[i] = n->inputs[i].requires_grad() && useful.count(detail::Access::node(n->inputs[i]).get()) > 0;
        }
        const Tensor g = found->second;
        const std::vector<Tensor> gs = n->backward(g, detail::Access::wrap(n), need);
        for (std::size_t i = 0; i < gs.size(); ++i) {
            if (!need[i] || !gs[i].defined()) continue;
            if (gs[i].shape() != n->inputs[i].shape()) {
                throw DimensionError(std::string("adjoint of ") + n->op + " returned shape " +
                                     shape_str(gs[i].shape()) + " for input " + shape_str(n->inputs[i].shape()));
            }
            const detail::Node* key = detail::Access::node(n->inputs[i]).get();
            auto slot = acc.find(key);
            if (slot == acc.end()) acc.emplace(key, gs[i]);
            else slot->second = add(slot->second, gs[i]);
        }
        if (!targets.count(n.get())) acc.erase(n.get());
    }

    for (std::size_t i = 0; i < wrt.size(); ++i) {
        auto found = acc.find(detail::Access::node(wrt[i]).get());
        result[i] = found != acc.end() ? found->second : Tensor::zeros(wrt[i].shape());
    }
    return result;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward: loss must be a scalar tensor");
    const NodePtr& root = detail::Access::node(loss);
    if (!root->requires_grad) return;
    std::vector<Tensor> leaves;
    for (const auto& n : collect(root)) {
        if (n->inputs.empty()) leaves.push_back(detail::Access::wrap(n));
    }
    const std::vector<Tensor> gs = grad(loss, leaves, false);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        const NodePtr& leaf = detail::Access::node(leaves[i]);
        if (!leaf->grad) {
            leaf->grad = detail::Access::node(gs[i].detach());
        } else {
            auto& d = leaf->grad->data;
            const auto add_on = gs[i].data();
            for (std::size_t k = 0; k < d.size(); ++k) d[k] += add_on[k];
        }
    }
}

Tensor input_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    const Tensor point = x.requires_grad() ? x : x.as_leaf(true);
    GradModeGuard on(true);
    const Tensor y = f(point);
    if (y.numel() != 1) throw ContractError("input_gradient: f must be scalar-valued");
    return grad(y, {point}, true)[0];
}

std::vector<RecordEntry> trace(const Tensor& output) {
    std::vector<RecordEntry> out;
    for (const auto& n : collect(detail::Access::node(output))) {
        RecordEntry e{n->op, n->id, {}};
        for (const auto& in : n->inputs) e.input_ids.push_back(in.id());
        out.push_back(std::move(e));
    }
    return out;
}

FiniteDifferenceReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                               const Tensor& x, double h, double tol) {
    if (!(h > 0.0)) throw ContractError("finite_difference_check: h must be positive");
    FiniteDifferenceReport rep;
    {
        GradModeGuard on(true);
        const Tensor leaf = x.as_leaf(true);
        const Tensor y = f(leaf);
        rep.analytic = grad(y, {leaf}, false)[0].to_vector();
    }
    NoGradGuard off;
    const std::vector<double> base = x.to_vector();
    rep.numeric.resize(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
        const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
        rep.numeric[i] = (fp - fm) / (2.0 * h);
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double a = rep.analytic[i], n = rep.numeric[i];
        const double abs_err = std::abs(a - n);
        const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
        rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
        rep.max_rel_error = std::max(rep.max_rel_error, abs_err / denom);
    }
    rep.pass = rep.max_rel_error <= tol;
    return rep;
}

}  // namespace dtwin::ad
