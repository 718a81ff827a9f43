#pragma once

/**
 * @file graph_net.hpp
 * @brief Graph-network blocks (edge, node and global updates with
 * permutation-invariant aggregations) and the next-step forecaster built on
 * the physiological dependency graph.
 */

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtwin/nn.hpp"
#include "dtwin/physio.hpp"
#include "dtwin/tensor.hpp"

namespace dtwin::gn {

using ad::Tensor;
using nn::ParamSet;
using nn::Rng;

enum class Aggregator { mean, sum, max };

Aggregator parse_aggregator(std::string_view name);
std::string_view to_string(Aggregator a);

/// Reduce a set of equally shaped [1 x w] (or [w]) items to [1 x w]. The
/// empty set reduces to zeros of `width`.
Tensor aggregate(Aggregator kind, const std::vector<Tensor>& items, std::size_t width);

/// Row-segment form: out[s] = reduce{rows[i] : segment[i] == s}, [n_segments x w].
Tensor segment_aggregate(Aggregator kind, const Tensor& rows, const std::vector<std::size_t>& segment,
                         std::size_t n_segments);

/// One graph, or several stacked disjoint graphs. Node and edge rows carry the
/// index of the graph they belong to; u has one row per graph.
struct GraphState {
    Tensor u;  // [graphs x wu]
    Tensor H;  // [nodes x wh]
    Tensor E;  // [edges x we]
    std::vector<std::size_t> senders, receivers;
    std::vector<std::size_t> node_graph, edge_graph;
    std::size_t graphs = 1;

    std::size_t nodes() const { return H.rows(); }
    std::size_t edges() const { return senders.size(); }
    /// Throws ConsistencyError on dangling indices, DimensionError on ragged widths.
    void validate() const;
};

/// Single graph with `edges` given as (sender, receiver) pairs.
GraphState make_graph(Tensor u, Tensor H, Tensor E, const std::vector<std::pair<std::size_t, std::size_t>>& edges);

/// Node i of the returned graph is node perm[i] of `g`; edges are relabeled and
/// their order reversed, so nothing lines up by accident.
GraphState permute_nodes(const GraphState& g, const std::vector<std::size_t>& perm);

struct GnBlockSpec {
    nn::MlpSpec edge;    // input |e| + 2|h| + |u|
    nn::MlpSpec node;    // input |e'| + |h| + |u|
    nn::MlpSpec global;  // input |e'| + |h'| + |u|
    Aggregator edge_to_node = Aggregator::mean;
    Aggregator edge_to_global = Aggregator::mean;
    Aggregator node_to_global = Aggregator::mean;
    /// When false the edge and node updates see zeros instead of u, so
    /// information only moves along edges (one hop per block).
    bool propagate_global = true;

    /// All three update functions map to `width` through `hidden` tanh layers.
    static GnBlockSpec uniform(std::size_t we, std::size_t wh, std::size_t wu, std::size_t width, std::size_t hidden,
                               double dropout);
};

class GnBlock {
public:
    GnBlock() = default;
    GnBlock(GnBlockSpec spec, std::string prefix);

    const GnBlockSpec& spec() const { return spec_; }
    const nn::Mlp& edge_fn() const { return edge_; }
    const nn::Mlp& node_fn() const { return node_; }
    const nn::Mlp& global_fn() const { return global_; }
    void init(ParamSet& params, Rng& rng) const;

    /// The six-step update: edges, edge->node aggregation, nodes, edge->global
    /// and node->global aggregations, global.
    GraphState forward(const ParamSet& params, const GraphState& g, bool stochastic = false, Rng* rng = nullptr) const;

private:
    GnBlockSpec spec_;
    std::string prefix_;
    nn::Mlp edge_, node_, global_;
};

struct GnConfig {
    std::size_t tau = 500;
    std::size_t width = 32;
    std::size_t blocks = 2;
    std::size_t hidden_layers = 1;
    double dropout = 0.1;
    Aggregator aggregator = Aggregator::mean;
    bool propagate_global = true;
    /// Predict the change from the last observed value instead of the value.
    bool residual = true;

    nlohmann::json to_json() const;
    static GnConfig from_json(const nlohmann::json& j);
};

/// Windows -> next-step predictions for every node. A window is tau rows of V
/// values, row-major, in the normalized units the model was trained on.
class GnForecaster {
public:
    GnForecaster(GnConfig config, physio::GraphTopology topology);

    const GnConfig& config() const { return config_; }
    const physio::GraphTopology& topology() const { return topology_; }
    std::size_t variables() const { return topology_.nodes.size(); }
    const std::vector<GnBlock>& blocks() const { return blocks_; }

    void init(ParamSet& params, Rng& rng) const;
    /// Same as init, but the readout starts at zero.
    void init_zero_readout(ParamSet& params, Rng& rng) const;

    /// Node features from the shared linear history encoder; E and u zero.
    GraphState encode_window(const ParamSet& params, std::span<const double> window) const;
    GraphState encode_windows(const ParamSet& params, const std::vector<std::span<const double>>& windows) const;

    /// [batch x V]
    Tensor predict_batch(const ParamSet& params, const std::vector<std::span<const double>>& windows,
                         bool stochastic = false, Rng* rng = nullptr) const;
    std::vector<double> predict_next(const ParamSet& params, std::span<const double> window, bool stochastic = false,
                                     Rng* rng = nullptr) const;

private:
    GnConfig config_;
    physio::GraphTopology topology_;
    std::vector<GnBlock> blocks_;
};

struct TrainConfig {
    std::size_t epochs = 50;
    double lr = 0.01;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    nn::OptimizerKind optimizer = nn::OptimizerKind::sgd;
    std::function<void(std::size_t epoch, double train_loss, double val_loss)> on_epoch;
};

struct TrainResult {
    ParamSet params;
    std::vector<double> train_loss;  // per epoch, mean over mini-batches
    std::vector<double> val_loss;    // per epoch, dropout off
};

class TrainingDivergedError : public RuntimeFailure {
public:
    explicit TrainingDivergedError(std::size_t epoch)
        : RuntimeFailure("training diverged (non-finite loss) in epoch " + std::to_string(epoch)), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

/// Mean squared next-step error over the given windows, dropout off.
double evaluate(const GnForecaster& model, const ParamSet& params, const physio::TimeSeriesDataset& ds,
                const std::vector<physio::WindowRef>& windows, std::size_t batch = 64);

/// Mini-batch training on the MSE of next-step predictions.
TrainResult train_gnn(const GnForecaster& model, const physio::TimeSeriesDataset& ds, const TrainConfig& config);

/// Everything needed to forecast from raw trajectories.
struct GnModel {
    GnConfig config;
    physio::GraphTopology topology;
    ParamSet params;
    physio::Normalizer normalizer;
    nlohmann::json meta = nlohmann::json::object();
};

void save_model(const std::filesystem::path& path, const GnModel& model);
GnModel load_model(const std::filesystem::path& path);

}  // namespace dtwin::gn
