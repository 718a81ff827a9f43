#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "dtwin/graph_net.hpp"
#include "gn_checks.hpp"

namespace ad = dtwin::ad;
namespace gn = dtwin::gn;
namespace nn = dtwin::nn;
namespace ph = dtwin::physio;
using dtwin::ad::Tensor;

namespace {

// x(t) = a cos(t + phase), y = -a sin(t + phase): dx/dt = y, dy/dt = -x.
std::vector<ph::Trajectory> rotation_trajectories(std::size_t count, std::size_t rows, double step) {
    std::vector<ph::Trajectory> out;
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> amp(0.5, 1.5), ph0(0.0, 2 * M_PI);
    for (std::size_t k = 0; k < count; ++k) {
        ph::Trajectory t;
        t.vars = 2;
        t.output_dt = step;
        const double a = amp(rng), p = ph0(rng);
        for (std::size_t r = 0; r < rows; ++r) {
            const double s = static_cast<double>(r) * step + p;
            t.values.push_back(a * std::cos(s));
            t.values.push_back(-a * std::sin(s));
        }
        out.push_back(std::move(t));
    }
    return out;
}

ph::GraphTopology rotation_topology() {
    ph::GraphTopology g;
    g.nodes = {"x", "y"};
    g.edges = {{0, 1}, {1, 0}};
    return g;
}

}  // namespace

TEST_CASE("aggregate: singleton, mean, empty convention") {
    CHECK(gn::aggregate(gn::Aggregator::mean, {Tensor::matrix({{1, 2}})}, 2).to_vector() == std::vector<double>{1, 2});
    CHECK(gn::aggregate(gn::Aggregator::mean, {Tensor::matrix({{1, 0}}), Tensor::matrix({{3, 0}})}, 2).to_vector() ==
          std::vector<double>{2, 0});
    CHECK(gn::aggregate(gn::Aggregator::sum, {Tensor::vector({1, 0}), Tensor::vector({3, 5})}, 2).to_vector() ==
          std::vector<double>{4, 5});
    CHECK(gn::aggregate(gn::Aggregator::max, {Tensor::vector({1, 7}), Tensor::vector({3, 5})}, 2).to_vector() ==
          std::vector<double>{3, 7});
    for (auto k : {gn::Aggregator::mean, gn::Aggregator::sum, gn::Aggregator::max}) {
        const auto z = gn::aggregate(k, {}, 3);
        CHECK(z.shape() == ad::Shape{1, 3});
        CHECK(z.to_vector() == std::vector<double>{0, 0, 0});
    }
    CHECK_THROWS_AS(gn::aggregate(gn::Aggregator::mean, {Tensor::vector({1, 2, 3})}, 2), dtwin::DimensionError);
}

TEST_CASE("aggregate: any permutation of 10 random items gives identical output") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 1e3);
    for (auto k : {gn::Aggregator::mean, gn::Aggregator::sum, gn::Aggregator::max}) {
        std::vector<Tensor> items;
        for (int i = 0; i < 10; ++i) items.push_back(Tensor::vector({nd(rng), nd(rng) * 1e-6, nd(rng)}));
        const auto ref = gn::aggregate(k, items, 3).to_vector();
        for (int trial = 0; trial < 20; ++trial) {
            std::shuffle(items.begin(), items.end(), rng);
            CHECK(gn::aggregate(k, items, 3).to_vector() == ref);
        }
    }
}

TEST_CASE("segment max routes gradient to the winning row") {
    const Tensor x = Tensor::matrix({{1, 9}, {4, 2}, {0, 0}}).as_leaf(true);
    const Tensor y = gn::segment_aggregate(gn::Aggregator::max, x, {0, 0, 1}, 3);
    CHECK(y.to_vector() == std::vector<double>{4, 9, 0, 0, 0, 0});
    const auto g = ad::grad(ad::sum(y), {x})[0].to_vector();
    CHECK(g == std::vector<double>{0, 1, 1, 0, 1, 1});
}

TEST_CASE("gn block: zero graph with zero biases stays zero") {
    std::mt19937_64 rng(1);
    gn::GnBlock block(gn::GnBlockSpec::uniform(2, 3, 2, 4, 1, 0.0), "z");
    nn::ParamSet ps;
    block.init(ps, rng);
    const auto g = gn::make_graph(Tensor::zeros({1, 2}), Tensor::zeros({3, 3}), Tensor::zeros({2, 2}), {{0, 1}, {2, 1}});
    const auto out = block.forward(ps, g);
    for (double v : out.H.to_vector()) CHECK(v == 0.0);
    for (double v : out.E.to_vector()) CHECK(v == 0.0);
    for (double v : out.u.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("gn block: hand-computed two-node example follows the six steps") {
    const auto want = gncheck::hand_expected();
    // Frozen from the arithmetic in hand_expected().
    CHECK(want.e_prime == doctest::Approx(0.9).epsilon(1e-14));
    CHECK(want.h_x == doctest::Approx(-0.05).epsilon(1e-14));
    CHECK(want.h_y == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(want.u_prime == doctest::Approx(0.395).epsilon(1e-14));

    const auto out = gncheck::hand_forward();
    CHECK(std::abs(out.E.item() - want.e_prime) <= 1e-12);
    CHECK(std::abs(out.H[0] - want.h_x) <= 1e-12);
    CHECK(std::abs(out.H[1] - want.h_y) <= 1e-12);
    CHECK(std::abs(out.u.item() - want.u_prime) <= 1e-12);
}

TEST_CASE("gn block: node x with no incoming edge sees the zero aggregate") {
    std::mt19937_64 rng(5);
    auto spec = gn::GnBlockSpec::uniform(2, 2, 2, 3, 1, 0.0);
    gn::GnBlock block(spec, "t");
    nn::ParamSet ps;
    block.init(ps, rng);
    const Tensor u = gncheck::rand_matrix(rng, 1, 2), H = gncheck::rand_matrix(rng, 2, 2), E = gncheck::rand_matrix(rng, 1, 2);
    const auto out = block.forward(ps, gn::make_graph(u, H, E, {{0, 1}}));
    const Tensor x_in = ad::concat({Tensor::zeros({1, 3}), ad::slice(H, 0, 0, 1), u}, 1);
    CHECK(ad::slice(out.H, 0, 0, 1).to_vector() == block.node_fn().forward(ps, x_in, false, nullptr).to_vector());
}

TEST_CASE("gn block: permutation equivariance on 50 random graphs") {
    for (auto agg : {gn::Aggregator::mean, gn::Aggregator::sum, gn::Aggregator::max}) {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const auto msg = gncheck::equivariance_case(seed, agg);
            INFO("seed " << seed << " aggregator " << gn::to_string(agg) << ": " << msg);
            CHECK(msg.empty());
        }
    }
}

TEST_CASE("gn block: dangling edges and width mismatches are rejected") {
    gn::GraphState g = gn::make_graph(Tensor::zeros({1, 1}), Tensor::zeros({2, 1}), Tensor::zeros({1, 1}), {{0, 1}});
    g.receivers[0] = 7;
    gn::GnBlock block(gn::GnBlockSpec::uniform(1, 1, 1, 2, 1, 0.0), "d");
    nn::ParamSet ps;
    std::mt19937_64 rng(0);
    block.init(ps, rng);
    CHECK_THROWS_AS(block.forward(ps, g), dtwin::ConsistencyError);
    const auto wide = gn::make_graph(Tensor::zeros({1, 1}), Tensor::zeros({2, 3}), Tensor::zeros({1, 1}), {{0, 1}});
    CHECK_THROWS_AS(block.forward(ps, wide), dtwin::DimensionError);
}

TEST_CASE("forecaster: message locality is exact within K hops") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        for (std::size_t k : {1u, 2u, 3u}) {
            const auto msg = gncheck::locality_case(seed, k, false);
            INFO("seed " << seed << " K=" << k << ": " << msg);
            CHECK(msg.empty());
        }
        // A single block never reads a global that depends on the input.
        const auto msg = gncheck::locality_case(seed, 1, true);
        INFO("seed " << seed << " K=1 with global: " << msg);
        CHECK(msg.empty());
    }
}

TEST_CASE("encode_window: zero, constant and ablated histories") {
    gn::GnConfig cfg;
    cfg.tau = 5;
    cfg.width = 4;
    gn::GnForecaster model(cfg, rotation_topology());
    nn::ParamSet ps;
    std::mt19937_64 rng(2);
    model.init(ps, rng);

    const auto zero = model.encode_window(ps, std::vector<double>(10, 0.0));
    for (double v : zero.H.to_vector()) CHECK(v == 0.0);
    for (double v : zero.u.to_vector()) CHECK(v == 0.0);
    CHECK(zero.E.shape() == ad::Shape{2, 4});

    const auto same = model.encode_window(ps, std::vector<double>(10, 0.3)).H;
    CHECK(ad::slice(same, 0, 0, 1).to_vector() == ad::slice(same, 0, 1, 2).to_vector());

    std::vector<double> w{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const auto base = model.encode_window(ps, w).H;
    for (std::size_t t = 0; t < 5; ++t) w[t * 2 + 1] *= 2.0;
    const auto doubled = model.encode_window(ps, w).H;
    CHECK(ad::slice(base, 0, 0, 1).to_vector() == ad::slice(doubled, 0, 0, 1).to_vector());
    CHECK(ad::slice(base, 0, 1, 2).to_vector() != ad::slice(doubled, 0, 1, 2).to_vector());

    CHECK_THROWS_AS(model.encode_window(ps, std::vector<double>(9, 0.0)), dtwin::DimensionError);
}

TEST_CASE("predict_next: zero readout, residual form, determinism") {
    gn::GnConfig cfg;
    cfg.tau = 3;
    cfg.width = 4;
    cfg.dropout = 0.3;
    cfg.residual = false;
    gn::GnForecaster plain(cfg, rotation_topology());
    nn::ParamSet ps;
    std::mt19937_64 rng(4);
    plain.init_zero_readout(ps, rng);
    const std::vector<double> w{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    CHECK(plain.predict_next(ps, w) == std::vector<double>{0, 0});

    cfg.residual = true;
    gn::GnForecaster res(cfg, rotation_topology());
    CHECK(res.predict_next(ps, w) == std::vector<double>{0.5, 0.6});

    nn::ParamSet full;
    res.init(full, rng);
    CHECK(res.predict_next(full, w) == res.predict_next(full, w));
    nn::Rng r1(9), r2(9), r3(10);
    CHECK(res.predict_next(full, w, true, &r1) == res.predict_next(full, w, true, &r2));
    CHECK(res.predict_next(full, w, true, &r3) != res.predict_next(full, w, false));
}

TEST_CASE("train_gnn: default settings") {
    const gn::TrainConfig c;
    CHECK(c.epochs == 50);
    CHECK(c.lr == 0.01);
    const gn::GnConfig g;
    CHECK(g.blocks == 2);
    CHECK(g.width == 32);
    CHECK(g.tau == 500);
    CHECK(g.dropout == 0.1);
}

TEST_CASE("train_gnn: constant targets are learned") {
    std::vector<ph::Trajectory> trajs(1);
    trajs[0].vars = 2;
    trajs[0].values.assign(2 * 400, 0.7);
    const auto ds = ph::make_dataset(std::move(trajs), 3, {60, 20, 20}, 1, false);
    gn::GnConfig cfg;
    cfg.tau = 3;
    cfg.width = 4;
    cfg.dropout = 0.0;
    cfg.residual = false;
    gn::GnForecaster model(cfg, rotation_topology());
    gn::TrainConfig tc;
    tc.batch = 8;
    tc.seed = 1;
    const auto res = gn::train_gnn(model, ds, tc);
    REQUIRE(res.val_loss.size() == 50);
    CHECK(res.val_loss.back() < 1e-3);
    CHECK(res.val_loss.back() < res.val_loss.front());
}

TEST_CASE("train_gnn: learns one-step rotation dynamics") {
    const auto ds = ph::make_dataset(rotation_trajectories(40, 400, 0.1), 8, {800, 200, 200}, 3, true);
    gn::GnConfig cfg;
    cfg.tau = 8;
    cfg.width = 8;
    cfg.blocks = 1;
    cfg.dropout = 0.0;
    gn::GnForecaster model(cfg, rotation_topology());
    gn::TrainConfig tc;
    tc.seed = 2;
    tc.batch = 16;
    const auto res = gn::train_gnn(model, ds, tc);
    const double test_mse = gn::evaluate(model, res.params, ds, ds.test);
    INFO("epoch-1 val " << res.val_loss.front() << ", final val " << res.val_loss.back());
    CHECK(test_mse <= 1e-3);
}

TEST_CASE("train_gnn: non-finite loss aborts with the epoch") {
    std::vector<ph::Trajectory> trajs(1);
    trajs[0].vars = 2;
    trajs[0].values.assign(2 * 50, 1.0);
    trajs[0].values[2 * 4] = std::nan("");
    const auto ds = ph::make_dataset(std::move(trajs), 3, {10, 1, 1}, 0, false);
    gn::GnConfig cfg;
    cfg.tau = 3;
    cfg.width = 3;
    gn::GnForecaster model(cfg, rotation_topology());
    gn::TrainConfig tc;
    tc.epochs = 3;
    tc.batch = 100;
    try {
        (void)gn::train_gnn(model, ds, tc);
        FAIL("expected divergence");
    } catch (const gn::TrainingDivergedError& e) {
        CHECK(e.epoch() == 1);
    }
}

TEST_CASE("model checkpoint round trip") {
    gn::GnModel m;
    m.config.tau = 4;
    m.config.width = 3;
    m.topology = rotation_topology();
    m.normalizer.mean = {1, 2};
    m.normalizer.scale = {3, 4};
    m.meta["epochs"] = 7;
    gn::GnForecaster f(m.config, m.topology);
    std::mt19937_64 rng(0);
    f.init(m.params, rng);
    const auto path = std::filesystem::temp_directory_path() / "dtwin_gn_model.json";
    gn::save_model(path, m);
    const auto back = gn::load_model(path);
    CHECK(back.params == m.params);
    CHECK(back.topology == m.topology);
    CHECK(back.config.to_json() == m.config.to_json());
    CHECK(back.normalizer.scale == m.normalizer.scale);
    CHECK(back.meta.at("epochs") == 7);
    std::filesystem::remove(path);
}
