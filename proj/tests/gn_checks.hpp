#pragma once

// Graph-network property checks shared by the unit tests and the acceptance
// binary: permutation equivariance, K-hop locality and a hand-worked block.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dtwin/graph_net.hpp"

namespace gncheck {

namespace ad = dtwin::ad;
namespace gn = dtwin::gn;
using dtwin::ad::Tensor;

inline Tensor rand_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(r * c);
    for (auto& x : v) x = n(rng);
    return Tensor::matrix(r, c, std::move(v));
}

inline std::vector<std::pair<std::size_t, std::size_t>> random_edges(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<std::size_t> node(0, n - 1);
    std::uniform_int_distribution<std::size_t> count(0, 3 * n);
    std::vector<std::pair<std::size_t, std::size_t>> e;
    const std::size_t m = count(rng);
    for (std::size_t k = 0; k < m; ++k) e.emplace_back(node(rng), node(rng));
    return e;
}

/// Relabel a random graph, run one block on both labelings and compare exactly.
/// Returns a failure description, or an empty string.
inline std::string equivariance_case(std::uint64_t seed, gn::Aggregator agg) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> nn(1, 10);
    const std::size_t n = nn(rng), we = 3, wh = 4, wu = 2, w = 5;
    const auto edges = random_edges(rng, n);
    auto g = gn::make_graph(rand_matrix(rng, 1, wu), rand_matrix(rng, n, wh),
                            edges.empty() ? Tensor::zeros({0, we}) : rand_matrix(rng, edges.size(), we), edges);
    auto spec = gn::GnBlockSpec::uniform(we, wh, wu, w, 1, 0.0);
    spec.edge_to_node = spec.edge_to_global = spec.node_to_global = agg;
    gn::GnBlock block(spec, "b");
    dtwin::nn::ParamSet ps;
    block.init(ps, rng);
    // Biases are zero after init; give them values so they are exercised.
    for (const auto& name : ps.names()) {
        if (name.find(".b") != std::string::npos) ps.set(name, rand_matrix(rng, 1, ps.at(name).numel()));
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    const auto out = block.forward(ps, g);
    const auto out_p = block.forward(ps, gn::permute_nodes(g, perm));
    const auto h = out.H.to_vector(), hp = out_p.H.to_vector();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < w; ++c) {
            if (hp[i * w + c] != h[perm[i] * w + c]) return "node " + std::to_string(i) + " not equivariant";
        }
    }
    if (out.u.to_vector() != out_p.u.to_vector()) return "u' changed under relabeling";
    const std::size_t m = edges.size();
    if (m > 0) {
        const auto e = out.E.to_vector(), ep = out_p.E.to_vector();
        for (std::size_t k = 0; k < m; ++k) {
            for (std::size_t c = 0; c < w; ++c) {
                if (ep[k * w + c] != e[(m - 1 - k) * w + c]) return "edge " + std::to_string(k) + " not equivariant";
            }
        }
    }
    return {};
}

/// Nodes reachable from `j` by following at most `k` directed edges.
inline std::vector<bool> within_hops(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                                     std::size_t j, std::size_t k) {
    std::vector<bool> in(n, false);
    in[j] = true;
    for (std::size_t step = 0; step < k; ++step) {
        std::vector<bool> next = in;
        for (const auto& [s, r] : edges) {
            if (in[s]) next[r] = true;
        }
        in = next;
    }
    return in;
}

/// Perturb one node's history and verify that predictions move only inside
/// its K-hop reach. Returns a failure description, or an empty string.
inline std::string locality_case(std::uint64_t seed, std::size_t blocks, bool propagate_global) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> nn(3, 10);
    const std::size_t n = nn(rng);
    dtwin::physio::GraphTopology topo;
    for (std::size_t i = 0; i < n; ++i) topo.nodes.push_back("n" + std::to_string(i));
    for (const auto& [s, r] : random_edges(rng, n)) {
        if (s != r) topo.edges.emplace_back(s, r);
    }
    gn::GnConfig cfg;
    cfg.tau = 4;
    cfg.width = 6;
    cfg.blocks = blocks;
    cfg.dropout = 0.0;
    cfg.propagate_global = propagate_global;
    gn::GnForecaster model(cfg, topo);
    dtwin::nn::ParamSet ps;
    model.init(ps, rng);
    const auto window = rand_matrix(rng, cfg.tau, n).to_vector();
    const auto base = model.predict_next(ps, window);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const std::size_t j = pick(rng);
    auto moved = window;
    for (std::size_t t = 0; t < cfg.tau; ++t) moved[t * n + j] += 0.75;
    const auto out = model.predict_next(ps, moved);
    const auto reach = within_hops(n, topo.edges, j, blocks);
    for (std::size_t i = 0; i < n; ++i) {
        if (!reach[i] && out[i] != base[i]) return "node " + std::to_string(i) + " outside the reach of " + std::to_string(j) + " changed";
    }
    if (out[j] == base[j]) return "perturbed node itself did not change";
    return {};
}

/// Two nodes x -> y with one-dimensional attributes and single affine layers.
/// The expected values are worked out by plain arithmetic below.
struct HandExample {
    double e_prime, h_x, h_y, u_prime;
};

inline HandExample hand_expected() {
    // Inputs: h = (1, 2), e = 0.5 on edge x->y, u = 0.25.
    const double hx = 1.0, hy = 2.0, e = 0.5, u = 0.25;
    // phi_e: [e, h_r, h_s, u] . (0.1, 0.2, 0.3, 0.4) + 0.05
    const double e1 = 0.1 * e + 0.2 * hy + 0.3 * hx + 0.4 * u + 0.05;
    // phi_h: [e_bar, h, u] . (0.5, -0.1, 0.2); x has no incoming edge.
    const double hx1 = 0.5 * 0.0 - 0.1 * hx + 0.2 * u;
    const double hy1 = 0.5 * e1 - 0.1 * hy + 0.2 * u;
    // phi_u: [e_bar', h_bar', u] . (0.3, 0.6, -0.2) + 0.1 with mean aggregations.
    const double u1 = 0.3 * e1 + 0.6 * (0.5 * (hx1 + hy1)) - 0.2 * u + 0.1;
    return {e1, hx1, hy1, u1};
}

inline gn::GraphState hand_forward() {
    gn::GnBlockSpec spec;
    spec.edge = dtwin::nn::MlpSpec{{4, 1}, dtwin::nn::Activation::tanh, dtwin::nn::Activation::identity, 0.0};
    spec.node = dtwin::nn::MlpSpec{{3, 1}, dtwin::nn::Activation::tanh, dtwin::nn::Activation::identity, 0.0};
    spec.global = dtwin::nn::MlpSpec{{3, 1}, dtwin::nn::Activation::tanh, dtwin::nn::Activation::identity, 0.0};
    gn::GnBlock block(spec, "hand");
    dtwin::nn::ParamSet ps;
    ps.set("hand.edge.W0", Tensor::matrix(4, 1, {0.1, 0.2, 0.3, 0.4}));
    ps.set("hand.edge.b0", Tensor::matrix(1, 1, {0.05}));
    ps.set("hand.node.W0", Tensor::matrix(3, 1, {0.5, -0.1, 0.2}));
    ps.set("hand.node.b0", Tensor::matrix(1, 1, {0.0}));
    ps.set("hand.global.W0", Tensor::matrix(3, 1, {0.3, 0.6, -0.2}));
    ps.set("hand.global.b0", Tensor::matrix(1, 1, {0.1}));
    const auto g = gn::make_graph(Tensor::matrix(1, 1, {0.25}), Tensor::matrix(2, 1, {1.0, 2.0}),
                                  Tensor::matrix(1, 1, {0.5}), {{0, 1}});
    return block.forward(ps, g);
}

}  // namespace gncheck
