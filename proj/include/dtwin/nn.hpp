#pragma once

/**
 * @file nn.hpp
 * @brief Building blocks on top of the tensor core: parameter sets, MLPs,
 * inverted dropout, categorical embeddings, SGD/Adam and checkpoints.
 */

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/errors.hpp"
#include "dtwin/tensor.hpp"

namespace dtwin::nn {

using ad::Tensor;
using Rng = std::mt19937_64;

/// Derive an independent stream seed from (base, a, b) with splitmix64.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

enum class Activation { identity, tanh, relu, leaky_relu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

struct MlpSpec {
    /// Input width followed by the output width of every affine layer.
    std::vector<std::size_t> widths;
    Activation hidden = Activation::tanh;
    Activation output = Activation::identity;
    double dropout = 0.0;
    double leaky_slope = 0.2;

    void validate() const;
    std::size_t layers() const { return widths.size() - 1; }
    std::size_t in_width() const { return widths.front(); }
    std::size_t out_width() const { return widths.back(); }
};

/// Named tensors, ordered by name. Values are replaced, never mutated.
class ParamSet {
public:
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
    void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
    std::vector<std::string> names() const;
    std::size_t size() const { return tensors_.size(); }
    std::size_t count() const;  // total scalar parameters
    const std::map<std::string, Tensor>& tensors() const { return tensors_; }

    /// Fresh leaves with requires_grad toggled, values untouched.
    ParamSet as_leaves(bool requires_grad) const;
    /// Entries whose name starts with `prefix`.
    ParamSet with_prefix(const std::string& prefix) const;
    void merge(const ParamSet& other);

    bool operator==(const ParamSet& other) const;

private:
    std::map<std::string, Tensor> tensors_;
};

using Gradients = std::map<std::string, Tensor>;

/// d(loss)/d(param) for every entry of `params`.
Gradients gradients(const Tensor& loss, const ParamSet& params);

// ---------------------------------------------------------------------------

/// Inverted dropout: keep with probability 1-p and scale by 1/(1-p).
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Multilayer perceptron whose weights live in a ParamSet under `prefix`
/// ("<prefix>.W<l>" is in x out, "<prefix>.b<l>" is 1 x out).
class Mlp {
public:
    Mlp() = default;
    Mlp(MlpSpec spec, std::string prefix);

    const MlpSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }
    std::string weight_name(std::size_t layer) const;
    std::string bias_name(std::size_t layer) const;

    /// Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.
    void init(ParamSet& params, Rng& rng) const;

    /// `input` is [batch x in] or a vector of length in. With `stochastic` set,
    /// dropout follows every hidden activation and draws from `rng`.
    Tensor forward(const ParamSet& params, const Tensor& input, bool stochastic, Rng* rng) const;

private:
    MlpSpec spec_;
    std::string prefix_;
};

Tensor mlp_forward(const Mlp& mlp, const ParamSet& params, const Tensor& input, bool train_mode, Rng* rng);

// ---------------------------------------------------------------------------

struct EmbeddingTable {
    std::string name;
    std::size_t vocab = 1;
    std::size_t dim = 1;

    /// Default width ceil(sqrt(vocab)) + 1.
    static EmbeddingTable with_default_dim(std::string name, std::size_t vocab);
    std::string weight_name() const { return name + ".W"; }
    void init(ParamSet& params, Rng& rng) const;
};

/// Column q (1-based) of the d x v weight matrix, i.e. W * onehot(q).
Tensor embed(const EmbeddingTable& table, const ParamSet& params, std::size_t q);
/// One row per index: [b x d].
Tensor embed_rows(const EmbeddingTable& table, const ParamSet& params, const std::vector<std::size_t>& q);
/// Per-covariate embeddings concatenated in table order.
Tensor concat_embeddings(const std::vector<EmbeddingTable>& tables, const ParamSet& params,
                         const std::vector<std::size_t>& q);
/// Batched form: q is row-major [b x c]; result is [b x sum(d_j)].
Tensor concat_embedding_rows(const std::vector<EmbeddingTable>& tables, const ParamSet& params,
                             const std::vector<std::size_t>& q, std::size_t batch);

// ---------------------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    OptimizerConfig config;
    std::size_t step = 0;
    std::map<std::string, std::vector<double>> first;
    std::map<std::string, std::vector<double>> second;
};

/// A gradient held NaN or Inf; the step was not applied.
class PoisonedStateError : public RuntimeFailure {
public:
    explicit PoisonedStateError(const std::string& param)
        : RuntimeFailure("non-finite gradient for parameter '" + param + "'; step refused"), param_(param) {}
    const std::string& param() const noexcept { return param_; }

private:
    std::string param_;
};

/// Apply one update and return the new parameter set. Parameters without a
/// gradient entry are carried over unchanged.
ParamSet optimizer_step(OptimizerState& state, const ParamSet& params, const Gradients& grads);

// ---------------------------------------------------------------------------
// Checkpoints: {"format": "dtwin.params", "version": 1,
//               "tensors": [{"name", "shape", "values"}...], "meta": {...}}

nlohmann::json params_to_json(const ParamSet& params);
ParamSet params_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const nlohmann::json& meta = {});
ParamSet load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace dtwin::nn
