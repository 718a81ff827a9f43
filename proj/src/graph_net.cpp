#include "dtwin/graph_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace dtwin::gn {

namespace ad = dtwin::ad;

Aggregator parse_aggregator(std::string_view name) {
    if (name == "mean") return Aggregator::mean;
    if (name == "sum") return Aggregator::sum;
    if (name == "max") return Aggregator::max;
    throw ContractError("unknown aggregator '" + std::string(name) + "'");
}

std::string_view to_string(Aggregator a) {
    switch (a) {
        case Aggregator::mean: return "mean";
        case Aggregator::sum: return "sum";
        case Aggregator::max: return "max";
    }
    return "mean";
}

namespace {

Tensor segment_max(const Tensor& rows, const std::vector<std::size_t>& segment, std::size_t n) {
    const std::size_t m = rows.rows(), w = rows.cols();
    const auto d = rows.data();
    std::vector<double> out(n * w, 0.0);
    std::vector<std::size_t> arg(n * w, std::numeric_limits<std::size_t>::max());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t o = segment[i] * w + c;
            const double v = d[i * w + c];
            // On ties the first row seen wins; the value is the same either way.
            if (arg[o] == std::numeric_limits<std::size_t>::max() || v > out[o]) {
                out[o] = v;
                arg[o] = i;
            }
        }
    }
    std::vector<double> mask(m * w, 0.0);
    for (std::size_t o = 0; o < n * w; ++o) {
        if (arg[o] != std::numeric_limits<std::size_t>::max()) mask[arg[o] * w + o % w] = 1.0;
    }
    Tensor mask_t = Tensor::from({m, w}, std::move(mask));
    return ad::record_op("segment_max", {n, w}, std::move(out), {rows},
                         [segment, mask_t](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                             return std::vector<Tensor>{ad::mul(ad::gather_rows(g, segment), mask_t)};
                         });
}

}  // namespace

Tensor segment_aggregate(Aggregator kind, const Tensor& rows, const std::vector<std::size_t>& segment,
                         std::size_t n_segments) {
    if (rows.rank() != 2) throw DimensionError("segment_aggregate expects a matrix of rows");
    if (segment.size() != rows.rows()) throw DimensionError("segment_aggregate: one segment id per row");
    for (auto s : segment) {
        if (s >= n_segments) throw ConsistencyError("segment id out of range");
    }
    switch (kind) {
        case Aggregator::sum: return ad::scatter_add_rows(rows, segment, n_segments);
        case Aggregator::max: return segment_max(rows, segment, n_segments);
        case Aggregator::mean: {
            std::vector<double> count(n_segments, 0.0);
            for (auto s : segment) count[s] += 1.0;
            const std::size_t w = rows.cols();
            std::vector<double> inv(n_segments * w);
            for (std::size_t s = 0; s < n_segments; ++s) {
                std::fill_n(inv.begin() + s * w, w, count[s] > 0 ? 1.0 / count[s] : 0.0);
            }
            return ad::mul(ad::scatter_add_rows(rows, segment, n_segments), Tensor::from({n_segments, w}, std::move(inv)));
        }
    }
    throw ContractError("unknown aggregator");
}

Tensor aggregate(Aggregator kind, const std::vector<Tensor>& items, std::size_t width) {
    if (items.empty()) return Tensor::zeros({1, width});
    std::vector<Tensor> rows;
    for (const auto& t : items) {
        if (t.numel() != width) throw DimensionError("aggregate: item width differs from declared width");
        rows.push_back(ad::reshape(t, {1, width}));
    }
    return segment_aggregate(kind, ad::concat(rows, 0), std::vector<std::size_t>(items.size(), 0), 1);
}

// ---------------------------------------------------------------------------

void GraphState::validate() const {
    if (H.rank() != 2 || E.rank() != 2 || u.rank() != 2) throw DimensionError("graph state tensors must be matrices");
    if (u.rows() != graphs) throw DimensionError("u must have one row per graph");
    if (senders.size() != receivers.size() || E.rows() != senders.size()) {
        throw DimensionError("edge attributes, senders and receivers disagree in length");
    }
    if (node_graph.size() != H.rows() || edge_graph.size() != senders.size()) {
        throw DimensionError("graph membership vectors have the wrong length");
    }
    for (std::size_t k = 0; k < senders.size(); ++k) {
        if (senders[k] >= H.rows() || receivers[k] >= H.rows()) {
            throw ConsistencyError("edge " + std::to_string(k) + " refers to a missing node");
        }
        if (edge_graph[k] >= graphs) throw ConsistencyError("edge graph id out of range");
    }
    for (auto g : node_graph) {
        if (g >= graphs) throw ConsistencyError("node graph id out of range");
    }
}

GraphState make_graph(Tensor u, Tensor H, Tensor E, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    GraphState g;
    g.u = ad::reshape(u, {1, u.numel()});
    g.H = std::move(H);
    g.E = std::move(E);
    for (const auto& [s, r] : edges) {
        g.senders.push_back(s);
        g.receivers.push_back(r);
    }
    g.node_graph.assign(g.H.rows(), 0);
    g.edge_graph.assign(edges.size(), 0);
    g.validate();
    return g;
}

GraphState permute_nodes(const GraphState& g, const std::vector<std::size_t>& perm) {
    const std::size_t n = g.nodes();
    if (perm.size() != n) throw DimensionError("permutation length differs from node count");
    std::vector<std::size_t> inv(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        if (perm[i] >= n || inv[perm[i]] != n) throw ContractError("not a permutation");
        inv[perm[i]] = i;
    }
    GraphState out;
    out.graphs = g.graphs;
    out.u = g.u;
    out.H = ad::gather_rows(g.H, perm);
    for (std::size_t i = 0; i < n; ++i) out.node_graph.push_back(g.node_graph[perm[i]]);
    std::vector<std::size_t> order;
    for (std::size_t k = g.edges(); k-- > 0;) {
        order.push_back(k);
        out.senders.push_back(inv[g.senders[k]]);
        out.receivers.push_back(inv[g.receivers[k]]);
        out.edge_graph.push_back(g.edge_graph[k]);
    }
    out.E = order.empty() ? g.E : ad::gather_rows(g.E, order);
    return out;
}

// ---------------------------------------------------------------------------

GnBlockSpec GnBlockSpec::uniform(std::size_t we, std::size_t wh, std::size_t wu, std::size_t width, std::size_t hidden,
                                 double dropout) {
    auto mlp = [&](std::size_t in) {
        nn::MlpSpec s;
        s.widths.push_back(in);
        for (std::size_t l = 0; l < hidden; ++l) s.widths.push_back(width);
        s.widths.push_back(width);
        s.hidden = nn::Activation::tanh;
        s.output = nn::Activation::tanh;
        s.dropout = dropout;
        return s;
    };
    GnBlockSpec spec;
    spec.edge = mlp(we + 2 * wh + wu);
    spec.node = mlp(width + wh + wu);
    spec.global = mlp(width + width + wu);
    return spec;
}

GnBlock::GnBlock(GnBlockSpec spec, std::string prefix)
    : spec_(std::move(spec)),
      prefix_(std::move(prefix)),
      edge_(spec_.edge, prefix_ + ".edge"),
      node_(spec_.node, prefix_ + ".node"),
      global_(spec_.global, prefix_ + ".global") {}

void GnBlock::init(ParamSet& params, Rng& rng) const {
    edge_.init(params, rng);
    node_.init(params, rng);
    global_.init(params, rng);
}

GraphState GnBlock::forward(const ParamSet& params, const GraphState& g, bool stochastic, Rng* rng) const {
    g.validate();
    const std::size_t we = g.E.cols(), wh = g.H.cols(), wu = g.u.cols();
    if (spec_.edge.in_width() != we + 2 * wh + wu) throw DimensionError("edge update input width mismatch");
    const std::size_t we2 = spec_.edge.out_width();
    if (spec_.node.in_width() != we2 + wh + wu) throw DimensionError("node update input width mismatch");
    const std::size_t wh2 = spec_.node.out_width();
    if (spec_.global.in_width() != we2 + wh2 + wu) throw DimensionError("global update input width mismatch");

    const std::size_t n = g.nodes(), m = g.edges(), b = g.graphs;
    const Tensor u_local = spec_.propagate_global ? g.u : Tensor::zeros(g.u.shape());

    GraphState out;
    out.senders = g.senders;
    out.receivers = g.receivers;
    out.node_graph = g.node_graph;
    out.edge_graph = g.edge_graph;
    out.graphs = b;

    // (1) per-edge update and (2) incoming-edge aggregation per node.
    Tensor e_bar, e_glob;
    if (m > 0) {
        const Tensor in = ad::concat({g.E, ad::gather_rows(g.H, g.receivers), ad::gather_rows(g.H, g.senders),
                                      ad::gather_rows(u_local, g.edge_graph)},
                                     1);
        out.E = edge_.forward(params, in, stochastic, rng);
        e_bar = segment_aggregate(spec_.edge_to_node, out.E, g.receivers, n);
        e_glob = segment_aggregate(spec_.edge_to_global, out.E, g.edge_graph, b);
    } else {
        out.E = g.E;
        e_bar = Tensor::zeros({n, we2});
        e_glob = Tensor::zeros({b, we2});
    }
    // (3) node update.
    out.H = node_.forward(params, ad::concat({e_bar, g.H, ad::gather_rows(u_local, g.node_graph)}, 1), stochastic, rng);
    // (4), (5) aggregations into the global, (6) global update.
    const Tensor h_glob = segment_aggregate(spec_.node_to_global, out.H, g.node_graph, b);
    out.u = global_.forward(params, ad::concat({e_glob, h_glob, g.u}, 1), stochastic, rng);
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json GnConfig::to_json() const {
    return {{"tau", tau},
            {"width", width},
            {"blocks", blocks},
            {"hidden_layers", hidden_layers},
            {"dropout", dropout},
            {"aggregator", std::string(to_string(aggregator))},
            {"propagate_global", propagate_global},
            {"residual", residual}};
}

GnConfig GnConfig::from_json(const nlohmann::json& j) {
    GnConfig c;
    c.tau = j.value("tau", c.tau);
    c.width = j.value("width", c.width);
    c.blocks = j.value("blocks", c.blocks);
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    c.dropout = j.value("dropout", c.dropout);
    c.aggregator = parse_aggregator(j.value("aggregator", std::string("mean")));
    c.propagate_global = j.value("propagate_global", c.propagate_global);
    c.residual = j.value("residual", c.residual);
    return c;
}

GnForecaster::GnForecaster(GnConfig config, physio::GraphTopology topology)
    : config_(std::move(config)), topology_(std::move(topology)) {
    if (config_.tau == 0 || config_.width == 0 || config_.blocks == 0) {
        throw ContractError("forecaster needs tau, width and blocks >= 1");
    }
    if (topology_.nodes.empty()) throw ContractError("forecaster needs at least one node");
    for (const auto& [s, r] : topology_.edges) {
        if (s >= topology_.nodes.size() || r >= topology_.nodes.size()) throw ConsistencyError("topology edge out of range");
    }
    const std::size_t w = config_.width;
    for (std::size_t k = 0; k < config_.blocks; ++k) {
        GnBlockSpec spec = GnBlockSpec::uniform(w, w, w, w, config_.hidden_layers, config_.dropout);
        spec.edge_to_node = spec.edge_to_global = spec.node_to_global = config_.aggregator;
        spec.propagate_global = config_.propagate_global;
        blocks_.emplace_back(std::move(spec), "gn" + std::to_string(k));
    }
}

void GnForecaster::init(ParamSet& params, Rng& rng) const {
    const std::size_t w = config_.width;
    const double lim = std::sqrt(6.0 / static_cast<double>(config_.tau + w));
    std::uniform_real_distribution<double> u(-lim, lim);
    std::vector<double> enc(config_.tau * w);
    for (auto& v : enc) v = u(rng);
    params.set("enc.W", Tensor::matrix(config_.tau, w, std::move(enc), true));
    params.set("enc.b", Tensor::zeros({1, w}).as_leaf(true));
    for (const auto& b : blocks_) b.init(params, rng);
    const double lr = std::sqrt(6.0 / static_cast<double>(w + 1));
    std::uniform_real_distribution<double> ur(-lr, lr);
    std::vector<double> ro(w);
    for (auto& v : ro) v = ur(rng);
    params.set("readout.W", Tensor::matrix(w, 1, std::move(ro), true));
    params.set("readout.b", Tensor::zeros({1, 1}).as_leaf(true));
}

void GnForecaster::init_zero_readout(ParamSet& params, Rng& rng) const {
    init(params, rng);
    params.set("readout.W", Tensor::zeros({config_.width, 1}).as_leaf(true));
}

GraphState GnForecaster::encode_windows(const ParamSet& params, const std::vector<std::span<const double>>& windows) const {
    const std::size_t v = variables(), tau = config_.tau, b = windows.size(), w = config_.width;
    if (b == 0) throw ContractError("no windows to encode");
    std::vector<double> x(b * v * tau);
    for (std::size_t k = 0; k < b; ++k) {
        if (windows[k].size() != tau * v) {
            throw DimensionError("window has " + std::to_string(windows[k].size()) + " values, expected tau*V = " +
                                 std::to_string(tau * v));
        }
        for (std::size_t t = 0; t < tau; ++t) {
            for (std::size_t i = 0; i < v; ++i) x[(k * v + i) * tau + t] = windows[k][t * v + i];
        }
    }
    GraphState g;
    g.graphs = b;
    g.H = ad::add_row(ad::matmul(Tensor::matrix(b * v, tau, std::move(x)), params.at("enc.W")), params.at("enc.b"));
    const std::size_t m = topology_.edges.size();
    g.E = Tensor::zeros({b * m, w});
    g.u = Tensor::zeros({b, w});
    for (std::size_t k = 0; k < b; ++k) {
        for (std::size_t i = 0; i < v; ++i) g.node_graph.push_back(k);
        for (const auto& [s, r] : topology_.edges) {
            g.senders.push_back(k * v + s);
            g.receivers.push_back(k * v + r);
            g.edge_graph.push_back(k);
        }
    }
    return g;
}

GraphState GnForecaster::encode_window(const ParamSet& params, std::span<const double> window) const {
    return encode_windows(params, {window});
}

Tensor GnForecaster::predict_batch(const ParamSet& params, const std::vector<std::span<const double>>& windows,
                                   bool stochastic, Rng* rng) const {
    GraphState g = encode_windows(params, windows);
    for (const auto& block : blocks_) g = block.forward(params, g, stochastic, rng);
    const std::size_t b = windows.size(), v = variables();
    Tensor y = ad::reshape(ad::add_row(ad::matmul(g.H, params.at("readout.W")), params.at("readout.b")), {b, v});
    if (config_.residual) {
        std::vector<double> last(b * v);
        for (std::size_t k = 0; k < b; ++k) {
            std::copy_n(windows[k].begin() + static_cast<std::ptrdiff_t>((config_.tau - 1) * v), v, last.begin() + k * v);
        }
        y = ad::add(y, Tensor::from({b, v}, std::move(last)));
    }
    return y;
}

std::vector<double> GnForecaster::predict_next(const ParamSet& params, std::span<const double> window, bool stochastic,
                                               Rng* rng) const {
    ad::NoGradGuard no_grad;
    return predict_batch(params, {window}, stochastic, rng).to_vector();
}

// ---------------------------------------------------------------------------

namespace {

Tensor batch_targets(const physio::TimeSeriesDataset& ds, const std::vector<physio::WindowRef>& refs, std::size_t begin,
                     std::size_t end, std::vector<std::span<const double>>& windows) {
    windows.clear();
    std::vector<double> t;
    for (std::size_t i = begin; i < end; ++i) {
        windows.push_back(ds.input(refs[i]));
        const auto tg = ds.target(refs[i]);
        t.insert(t.end(), tg.begin(), tg.end());
    }
    return Tensor::from({end - begin, ds.vars}, std::move(t));
}

}  // namespace

double evaluate(const GnForecaster& model, const ParamSet& params, const physio::TimeSeriesDataset& ds,
                const std::vector<physio::WindowRef>& windows, std::size_t batch) {
    if (windows.empty()) throw DataError("no windows to evaluate");
    ad::NoGradGuard no_grad;
    double sse = 0;
    std::vector<std::span<const double>> in;
    for (std::size_t b = 0; b < windows.size(); b += batch) {
        const std::size_t e = std::min(windows.size(), b + batch);
        const Tensor target = batch_targets(ds, windows, b, e, in);
        const Tensor pred = model.predict_batch(params, in, false, nullptr);
        sse += ad::sum(ad::square(ad::sub(pred, target))).item();
    }
    return sse / static_cast<double>(windows.size() * ds.vars);
}

TrainResult train_gnn(const GnForecaster& model, const physio::TimeSeriesDataset& ds, const TrainConfig& config) {
    if (ds.train.empty()) throw DataError("training split is empty");
    if (ds.tau != model.config().tau || ds.vars != model.variables()) {
        throw DimensionError("dataset windows (tau=" + std::to_string(ds.tau) + ", V=" + std::to_string(ds.vars) +
                             ") do not match the model");
    }
    if (config.batch == 0 || config.epochs == 0) throw ContractError("batch and epochs must be >= 1");
    Rng rng(config.seed);
    TrainResult res;
    model.init(res.params, rng);
    nn::OptimizerState opt{nn::OptimizerConfig{config.optimizer, config.lr}, 0, {}, {}};
    std::vector<physio::WindowRef> order = ds.train;
    const auto& val = ds.val.empty() ? ds.train : ds.val;
    std::vector<std::span<const double>> in;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += config.batch) {
            const std::size_t e = std::min(order.size(), b + config.batch);
            const Tensor target = batch_targets(ds, order, b, e, in);
            const Tensor loss = ad::mean(ad::square(ad::sub(model.predict_batch(res.params, in, true, &rng), target)));
            const double lv = loss.item();
            if (!std::isfinite(lv)) throw TrainingDivergedError(epoch);
            total += lv;
            ++batches;
            res.params = nn::optimizer_step(opt, res.params, nn::gradients(loss, res.params));
        }
        const double train_loss = total / static_cast<double>(batches);
        const double val_loss = evaluate(model, res.params, ds, val);
        if (!std::isfinite(val_loss)) throw TrainingDivergedError(epoch);
        res.train_loss.push_back(train_loss);
        res.val_loss.push_back(val_loss);
        if (config.on_epoch) config.on_epoch(epoch, train_loss, val_loss);
    }
    return res;
}

// ---------------------------------------------------------------------------

void save_model(const std::filesystem::path& path, const GnModel& model) {
    nlohmann::json meta = model.meta;
    meta["kind"] = "gn-forecaster";
    meta["config"] = model.config.to_json();
    meta["topology"] = model.topology.to_json();
    meta["normalizer"] = model.normalizer.to_json();
    nn::save_checkpoint(path, model.params, meta);
}

GnModel load_model(const std::filesystem::path& path) {
    nlohmann::json meta;
    GnModel m;
    m.params = nn::load_checkpoint(path, &meta);
    if (meta.value("kind", "") != "gn-forecaster") throw DataError(path.string() + " is not a forecaster checkpoint");
    try {
        m.config = GnConfig::from_json(meta.at("config"));
        m.topology = physio::GraphTopology::from_json(meta.at("topology"));
        m.normalizer = physio::Normalizer::from_json(meta.at("normalizer"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed forecaster checkpoint: ") + e.what());
    }
    for (const char* k : {"kind", "config", "topology", "normalizer"}) meta.erase(k);
    m.meta = meta;
    return m;
}

}  // namespace dtwin::gn
