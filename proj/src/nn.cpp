#include "dtwin/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dtwin::nn {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(base) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

Activation parse_activation(std::string_view name) {
    if (name == "identity" || name == "none") return Activation::identity;
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    if (name == "leaky_relu") return Activation::leaky_relu;
    throw ContractError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
    }
    return "identity";
}

void MlpSpec::validate() const {
    if (widths.size() < 2) throw ContractError("MlpSpec needs an input width and at least one layer");
    for (auto w : widths) {
        if (w == 0) throw ContractError("MlpSpec widths must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
}

// ---------------------------------------------------------------------------

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LookupError("no parameter named '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamSet::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
}

std::size_t ParamSet::count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors_) n += v.numel();
    return n;
}

ParamSet ParamSet::as_leaves(bool requires_grad) const {
    ParamSet out;
    for (const auto& [k, v] : tensors_) out.set(k, v.as_leaf(requires_grad));
    return out;
}

ParamSet ParamSet::with_prefix(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [k, v] : tensors_) {
        if (k.compare(0, prefix.size(), prefix) == 0) out.set(k, v);
    }
    return out;
}

void ParamSet::merge(const ParamSet& other) {
    for (const auto& [k, v] : other.tensors_) tensors_[k] = v;
}

bool ParamSet::operator==(const ParamSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (const auto& [k, v] : tensors_) {
        auto it = other.tensors_.find(k);
        if (it == other.tensors_.end()) return false;
        if (v.shape() != it->second.shape() || v.to_vector() != it->second.to_vector()) return false;
    }
    return true;
}

Gradients gradients(const Tensor& loss, const ParamSet& params) {
    std::vector<Tensor> wrt;
    std::vector<std::string> names;
    for (const auto& [k, v] : params.tensors()) {
        names.push_back(k);
        wrt.push_back(v);
    }
    const auto gs = ad::grad(loss, wrt, false);
    Gradients out;
    for (std::size_t i = 0; i < names.size(); ++i) out.emplace(names[i], gs[i]);
    return out;
}

// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout rate must lie in [0, 1)");
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const double scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? scale : 0.0;
    return ad::mul(x, Tensor::from(x.shape(), std::move(mask)));
}

namespace {

Tensor activate(const Tensor& x, Activation a, double slope) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::tanh: return ad::tanh(x);
        case Activation::relu: return ad::relu(x);
        case Activation::leaky_relu: return ad::leaky_relu(x, slope);
    }
    return x;
}

}  // namespace

Mlp::Mlp(MlpSpec spec, std::string prefix) : spec_(std::move(spec)), prefix_(std::move(prefix)) {
    spec_.validate();
}

std::string Mlp::weight_name(std::size_t layer) const { return prefix_ + ".W" + std::to_string(layer); }
std::string Mlp::bias_name(std::size_t layer) const { return prefix_ + ".b" + std::to_string(layer); }

void Mlp::init(ParamSet& params, Rng& rng) const {
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
        const std::size_t fan_in = spec_.widths[l], fan_out = spec_.widths[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-limit, limit);
        std::vector<double> w(fan_in * fan_out);
        for (auto& v : w) v = u(rng);
        params.set(weight_name(l), Tensor::matrix(fan_in, fan_out, std::move(w), true));
        params.set(bias_name(l), Tensor::zeros({1, fan_out}).as_leaf(true));
    }
}

Tensor Mlp::forward(const ParamSet& params, const Tensor& input, bool stochastic, Rng* rng) const {
    const bool was_vector = input.rank() == 1;
    Tensor h = was_vector ? ad::reshape(input, {1, input.numel()}) : input;
    if (h.rank() != 2 || h.cols() != spec_.in_width()) {
        throw DimensionError("mlp '" + prefix_ + "': input " + ad::shape_str(input.shape()) + " but first layer expects width " +
                             std::to_string(spec_.in_width()));
    }
    if (stochastic && spec_.dropout > 0.0 && rng == nullptr) throw ContractError("stochastic forward needs an rng");
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
        h = ad::add_row(ad::matmul(h, params.at(weight_name(l))), params.at(bias_name(l)));
        const bool last = l + 1 == spec_.layers();
        h = activate(h, last ? spec_.output : spec_.hidden, spec_.leaky_slope);
        if (!last && stochastic && spec_.dropout > 0.0) h = dropout(h, spec_.dropout, *rng);
    }
    return was_vector ? ad::reshape(h, {h.numel()}) : h;
}

Tensor mlp_forward(const Mlp& mlp, const ParamSet& params, const Tensor& input, bool train_mode, Rng* rng) {
    return mlp.forward(params, input, train_mode, rng);
}

// ---------------------------------------------------------------------------

EmbeddingTable EmbeddingTable::with_default_dim(std::string name, std::size_t vocab) {
    if (vocab == 0) throw ContractError("embedding vocabulary must be non-empty");
    const auto d = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(vocab)))) + 1;
    return EmbeddingTable{std::move(name), vocab, d};
}

void EmbeddingTable::init(ParamSet& params, Rng& rng) const {
    if (vocab == 0 || dim == 0) throw ContractError("embedding table '" + name + "' needs v>=1 and d>=1");
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> w(dim * vocab);
    for (auto& v : w) v = n(rng);
    params.set(weight_name(), Tensor::matrix(dim, vocab, std::move(w), true));
}

namespace {

std::size_t checked_index(const EmbeddingTable& t, std::size_t q) {
    if (q < 1 || q > t.vocab) {
        throw LookupError("category " + std::to_string(q) + " outside vocabulary 1.." + std::to_string(t.vocab) +
                          " of '" + t.name + "'");
    }
    return q - 1;
}

}  // namespace

Tensor embed_rows(const EmbeddingTable& table, const ParamSet& params, const std::vector<std::size_t>& q) {
    const Tensor& W = params.at(table.weight_name());
    if (W.shape() != ad::Shape{table.dim, table.vocab}) throw DimensionError("embedding weight shape mismatch");
    std::vector<std::size_t> idx(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) idx[i] = checked_index(table, q[i]);
    return ad::gather_rows(ad::transpose(W), idx);
}

Tensor embed(const EmbeddingTable& table, const ParamSet& params, std::size_t q) {
    return ad::reshape(embed_rows(table, params, {q}), {table.dim});
}

Tensor concat_embeddings(const std::vector<EmbeddingTable>& tables, const ParamSet& params,
                         const std::vector<std::size_t>& q) {
    if (q.size() != tables.size()) {
        throw ContractError("expected " + std::to_string(tables.size()) + " categorical indices, got " +
                            std::to_string(q.size()));
    }
    std::vector<Tensor> parts;
    for (std::size_t j = 0; j < tables.size(); ++j) parts.push_back(embed(tables[j], params, q[j]));
    return ad::concat(parts, 0);
}

Tensor concat_embedding_rows(const std::vector<EmbeddingTable>& tables, const ParamSet& params,
                             const std::vector<std::size_t>& q, std::size_t batch) {
    if (q.size() != tables.size() * batch) throw ContractError("categorical index matrix has the wrong size");
    std::vector<Tensor> parts;
    for (std::size_t j = 0; j < tables.size(); ++j) {
        std::vector<std::size_t> col(batch);
        for (std::size_t i = 0; i < batch; ++i) col[i] = q[i * tables.size() + j];
        parts.push_back(embed_rows(tables[j], params, col));
    }
    return ad::concat(parts, 1);
}

// ---------------------------------------------------------------------------

ParamSet optimizer_step(OptimizerState& state, const ParamSet& params, const Gradients& grads) {
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) continue;
        if (g.shape() != params.at(name).shape()) throw DimensionError("gradient shape mismatch for '" + name + "'");
        for (double v : g.data()) {
            if (!std::isfinite(v)) throw PoisonedStateError(name);
        }
    }
    const OptimizerConfig& c = state.config;
    ++state.step;
    ParamSet out;
    for (const auto& [name, p] : params.tensors()) {
        auto git = grads.find(name);
        if (git == grads.end()) {
            out.set(name, p);
            continue;
        }
        std::vector<double> v = p.to_vector();
        const auto g = git->second.data();
        if (c.kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c.lr * g[i];
        } else {
            auto& m = state.first[name];
            auto& s = state.second[name];
            if (m.size() != v.size()) {
                m.assign(v.size(), 0.0);
                s.assign(v.size(), 0.0);
            }
            const double t = static_cast<double>(state.step);
            const double bc1 = 1.0 - std::pow(c.beta1, t);
            const double bc2 = 1.0 - std::pow(c.beta2, t);
            for (std::size_t i = 0; i < v.size(); ++i) {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double shat = s[i] / bc2;
                v[i] -= c.lr * mhat / (std::sqrt(shat) + c.eps);
            }
        }
        out.set(name, Tensor::from(p.shape(), std::move(v), p.requires_grad()));
    }
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json params_to_json(const ParamSet& params) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : params.tensors()) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"values", t.to_vector()}});
    }
    return {{"format", "dtwin.params"}, {"version", 1}, {"tensors", tensors}};
}

ParamSet params_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "dtwin.params") throw DataError("not a dtwin.params container");
    if (j.value("version", 0) != 1) throw DataError("unsupported checkpoint version");
    ParamSet out;
    for (const auto& e : j.at("tensors")) {
        ad::Shape shape = e.at("shape").get<ad::Shape>();
        std::vector<double> values = e.at("values").get<std::vector<double>>();
        if (ad::shape_numel(shape) != values.size()) {
            throw DataError("checkpoint tensor '" + e.at("name").get<std::string>() + "' has inconsistent size");
        }
        out.set(e.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(values), true));
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const nlohmann::json& meta) {
    nlohmann::json j = params_to_json(params);
    if (!meta.is_null()) j["meta"] = meta;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    os << j.dump();
}

ParamSet load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read checkpoint " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
    }
    if (meta) *meta = j.value("meta", nlohmann::json::object());
    return params_from_json(j);
}

}  // namespace dtwin::nn
