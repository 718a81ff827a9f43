#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dtwin/gan.hpp"
#include "gan_checks.hpp"

namespace gan = dtwin::gan;
namespace ad = dtwin::ad;
namespace nn = dtwin::nn;
using dtwin::ad::Tensor;

namespace {

// Three tissues of four genes, two numeric covariates, categoricals with 3 and 2 levels.
gan::GanConfig multi_config() {
    gan::GanConfig c;
    c.tissues = 3;
    c.genes = 4;
    c.covariates = 2;
    c.vocab = {3, 2};
    c.noise_dim = 5;
    c.gen_hidden = {16};
    c.critic_hidden = {16};
    c.batch = 8;
    c.ace2_index = 1;
    return c;
}

gan::OmicsBatch multi_data(std::size_t rows, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::bernoulli_distribution keep(0.7);
    gan::OmicsBatch d;
    d.tissues = 3;
    d.genes = 4;
    d.covariates = 2;
    d.categoricals = 2;
    d.rows = rows;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t t = 0; t < 3; ++t) {
            const bool on = keep(rng);
            d.m.push_back(on ? 1.0 : 0.0);
            for (std::size_t g = 0; g < 4; ++g) d.x.push_back(on ? n(rng) + static_cast<double>(g) : 0.0);
        }
        d.r.push_back(n(rng));
        d.r.push_back(n(rng));
        d.q.push_back(1 + i % 3);
        d.q.push_back(1 + i % 2);
    }
    return d;
}

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(r * c);
    for (auto& x : v) x = n(rng);
    return Tensor::matrix(r, c, std::move(v));
}

}  // namespace

TEST_CASE("generate: the mask absorbs the output") {
    const gan::CondGan g(multi_config());
    nn::ParamSet gp;
    gan::Rng rng(1);
    g.init_generator(gp, rng);
    std::mt19937_64 r2(2);
    const Tensor z = random_matrix(r2, 6, 5), r = random_matrix(r2, 6, 2);
    const std::vector<std::size_t> q{1, 1, 2, 2, 3, 1, 1, 2, 2, 1, 3, 2};

    const auto zero = g.generate(gp, z, r, q, Tensor::zeros({6, 3})).to_vector();
    for (double v : zero) CHECK(v == 0.0);

    // With every tissue present the output is the raw MLP.
    const Tensor in = ad::concat({z, r, nn::concat_embedding_rows(g.gen_embeddings(), gp, q, 6)}, 1);
    CHECK(g.generate(gp, z, r, q, Tensor::ones({6, 3})).to_vector() ==
          g.generator_mlp().forward(gp, in, false, nullptr).to_vector());

    const Tensor m = Tensor::matrix(6, 3, {1, 0, 1, 0, 0, 1, 1, 1, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0});
    const auto x = g.generate(gp, z, r, q, m).to_vector();
    const auto mb = g.broadcast_mask(m).to_vector();
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (mb[i] == 0.0) CHECK(x[i] == 0.0);
    }
    CHECK(g.generate(gp, z, r, q, m).to_vector() == x);
    for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(gancheck::mask_leaks(seed) == 0);

    CHECK_THROWS_AS(g.generate(gp, random_matrix(r2, 6, 4), r, q, m), dtwin::ContractError);
    CHECK_THROWS_AS(g.generate(gp, z, r, q, Tensor::ones({6, 2})), dtwin::ContractError);
    auto bad_q = q;
    bad_q[0] = 4;
    CHECK_THROWS_AS(g.generate(gp, z, r, bad_q, m), dtwin::ContractError);
}

TEST_CASE("critic: zero last layer, sensitivity, imputation contract") {
    const auto cfg = multi_config();
    const gan::CondGan g(cfg);
    nn::ParamSet cp;
    gan::Rng rng(3);
    g.init_critic(cp, rng);
    const auto d = multi_data(5, 4);
    const Tensor x = d.x_tensor(), m = d.m_tensor(), r = d.r_tensor();

    const auto y = g.critic(cp, x, m, r, d.q);
    CHECK(y.shape() == ad::Shape{5, 1});

    std::mt19937_64 r2(5);
    const Tensor delta = ad::mul(random_matrix(r2, 5, 12), g.broadcast_mask(m));
    const auto y2 = g.critic(cp, ad::add(x, ad::mul(delta, 0.1)), m, r, d.q).to_vector();
    const auto y1 = y.to_vector();
    for (std::size_t i = 0; i < 5; ++i) CHECK(y1[i] != y2[i]);

    nn::ParamSet zeroed = cp;
    const std::size_t last = g.critic_mlp().spec().layers() - 1;
    zeroed.set(g.critic_mlp().weight_name(last), Tensor::zeros({16, 1}));
    zeroed.set(g.critic_mlp().bias_name(last), Tensor::zeros({1, 1}));
    for (double v : g.critic(zeroed, x, m, r, d.q).to_vector()) CHECK(v == 0.0);

    // Put a value under a zero mask entry: the critic refuses it.
    std::size_t row = 0, tissue = 0;
    while (d.m[row * 3 + tissue] != 0.0) {
        if (++tissue == 3) {
            tissue = 0;
            ++row;
        }
    }
    auto xv = d.x;
    xv[row * 12 + tissue * 4 + 2] = 0.5;
    CHECK_THROWS_AS(g.critic(cp, Tensor::matrix(5, 12, xv), m, r, d.q), dtwin::ContractError);
}

TEST_CASE("gradient penalty: analytic linear critics") {
    const double s = 1.0 / std::sqrt(3.0);
    std::mt19937_64 rng(6);
    const Tensor x = random_matrix(rng, 7, 3), xh = random_matrix(rng, 7, 3);
    const Tensor m = Tensor::ones({7, 1}), r = Tensor::zeros({7, 0});
    gan::Rng arng(7);

    auto unit = gancheck::linear_critic({s, -s, s});
    const auto p1 = gan::gradient_penalty(unit.gan, unit.params, x, xh, m, r, {}, arng);
    CHECK(std::abs(p1.penalty.item()) <= 1e-9);
    for (double n : p1.norms) CHECK(std::abs(n - 1.0) <= 1e-9);

    auto twice = gancheck::linear_critic({2 * s, -2 * s, 2 * s});
    const auto p2 = gan::gradient_penalty(twice.gan, twice.params, x, xh, m, r, {}, arng);
    CHECK(std::abs(p2.penalty.item() - 1.0) <= 1e-9);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        CHECK(std::abs(gancheck::linear_penalty(1.0, seed)) <= 1e-9);
        CHECK(std::abs(gancheck::linear_penalty(2.0, seed) - 1.0) <= 1e-9);
        CHECK(std::abs(gancheck::linear_penalty(0.5, seed) - 0.25) <= 1e-9);
    }
}

TEST_CASE("gradient penalty: alpha endpoints reproduce gradients at the samples") {
    const auto cfg = multi_config();
    const gan::CondGan g(cfg);
    nn::ParamSet cp;
    gan::Rng rng(8);
    g.init_critic(cp, rng);
    const auto real = multi_data(4, 9);
    auto fake = multi_data(4, 10);
    fake.m = real.m;
    for (std::size_t i = 0; i < fake.x.size(); ++i) fake.x[i] = real.m[i / 4] == 0.0 ? 0.0 : fake.x[i] * 0.5 + 0.1;
    const Tensor m = real.m_tensor(), r = real.r_tensor();
    auto norms_at = [&](const Tensor& point) {
        const Tensor gx = ad::input_gradient(
            [&](const Tensor& p) { return ad::sum(g.critic(cp, p, m, r, real.q)); }, point);
        return ad::row_norms(gx, 1e-12).to_vector();
    };
    const auto at_fake = gan::gradient_penalty(g, cp, real.x_tensor(), fake.x_tensor(), m, r, real.q,
                                               std::vector<double>(4, 0.0));
    const auto at_real = gan::gradient_penalty(g, cp, real.x_tensor(), fake.x_tensor(), m, r, real.q,
                                               std::vector<double>(4, 1.0));
    const auto nf = norms_at(fake.x_tensor()), nr = norms_at(real.x_tensor());
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(at_fake.norms[i] == doctest::Approx(nf[i]).epsilon(1e-12));
        CHECK(at_real.norms[i] == doctest::Approx(nr[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(gan::gradient_penalty(g, cp, real.x_tensor(), Tensor::zeros({3, 12}), m, r, real.q,
                                          std::vector<double>(4, 0.5)),
                    dtwin::ContractError);
}

TEST_CASE("gradient penalty: parameter gradients match finite differences") {
    gan::GanConfig c;
    c.genes = 2;
    c.critic_hidden = {6, 6};
    const gan::CondGan g(c);
    nn::ParamSet cp;
    gan::Rng rng(11);
    g.init_critic(cp, rng);
    std::normal_distribution<double> n(0.0, 0.3);
    for (const auto& name : cp.names()) {
        auto v = cp.at(name).to_vector();
        for (auto& x : v) x += n(rng);
        cp.set(name, Tensor::from(cp.at(name).shape(), v, true));
    }
    const Tensor x = Tensor::matrix(3, 2, {1, 2, 3, -1, 0.5, 0.2});
    const Tensor xh = Tensor::matrix(3, 2, {0, 1, -2, 1, 0.3, 0.4});
    const Tensor m = Tensor::ones({3, 1}), r = Tensor::zeros({3, 0});
    const std::vector<double> alpha{0.2, 0.5, 0.9};
    auto objective = [&](const nn::ParamSet& p) {
        return gan::gradient_penalty(g, p, x, xh, m, r, {}, alpha).penalty;
    };
    const auto grads = nn::gradients(objective(cp), cp);
    double worst = 0.0;
    for (const auto& name : cp.names()) {
        const auto v = cp.at(name).to_vector(), gv = grads.at(name).to_vector();
        for (std::size_t i = 0; i < v.size(); ++i) {
            auto up = v, dn = v;
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            nn::ParamSet pu = cp, pd = cp;
            pu.set(name, Tensor::from(cp.at(name).shape(), up));
            pd.set(name, Tensor::from(cp.at(name).shape(), dn));
            const double fd = (objective(pu).item() - objective(pd).item()) / 2e-5;
            worst = std::max(worst, std::abs(fd - gv[i]) / std::max(1.0, std::abs(fd)));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("critic step decreases the objective on a fixed batch") {
    auto cfg = gancheck::toy_config(0);
    cfg.lr_critic = 1e-4;
    const gan::CondGan g(cfg);
    auto state = gan::init_state(g);
    const auto batch = gancheck::toy_gaussian(64, 1);
    // Replays the draws critic_step makes from a generator seeded the same way.
    auto objective = [&](const nn::ParamSet& cp, std::uint64_t seed) {
        gan::Rng r(seed);
        const Tensor z = g.sample_noise(batch.rows, r);
        const Tensor m = batch.m_tensor(), rr = batch.r_tensor();
        const Tensor xh = g.generate(state.gen, z, rr, batch.q, m);
        const auto pen = gan::gradient_penalty(g, cp, batch.x_tensor(), xh, m, rr, batch.q, r);
        return ad::mean(g.critic(cp, xh, m, rr, batch.q)).item() -
               ad::mean(g.critic(cp, batch.x_tensor(), m, rr, batch.q)).item() + cfg.lambda * pen.penalty.item();
    };
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const double before = objective(state.critic, seed);
        gan::Rng r(seed);
        const auto stats = gan::critic_step(g, state, batch, r);
        CHECK(stats.critic_loss == doctest::Approx(before).epsilon(1e-12));
        CHECK(objective(state.critic, seed) < before);
    }
}

TEST_CASE("player parameters are disjoint and updates never cross over") {
    const auto cfg = multi_config();
    const gan::CondGan g(cfg);
    auto state = gan::init_state(g);
    for (const auto& n : state.gen.names()) CHECK(n.rfind("gen.", 0) == 0);
    for (const auto& n : state.critic.names()) CHECK(n.rfind("critic.", 0) == 0);
    CHECK(state.gen.contains("gen.emb0.W"));
    CHECK(state.critic.contains("critic.emb1.W"));

    const auto data = multi_data(8, 12);
    gan::Rng rng(13);
    const nn::ParamSet gen_before = state.gen;
    (void)gan::critic_step(g, state, data, rng);
    CHECK(state.gen == gen_before);
    const nn::ParamSet critic_before = state.critic;
    (void)gan::generator_step(g, state, data, rng);
    CHECK(state.critic == critic_before);
    CHECK(!(state.gen == gen_before));
}

TEST_CASE("training: short masked run with covariates, divergence detection") {
    auto cfg = multi_config();
    cfg.iterations = 15;
    const auto data = multi_data(40, 14);
    std::size_t calls = 0;
    const auto res = gan::train_wgan_gp(data, cfg, [&](std::size_t, const gan::IterationStats&) { ++calls; });
    CHECK(calls == 15);
    REQUIRE(res.history.size() == 15);
    for (const auto& s : res.history) {
        CHECK(std::isfinite(s.critic_loss));
        CHECK(std::isfinite(s.gen_loss));
        CHECK(s.grad_norm_mean > 0.0);
    }
    // Same seed, same run.
    CHECK(gan::train_wgan_gp(data, cfg).gen == res.gen);

    const gan::CondGan g(cfg);
    const auto s = gan::sample(g, res.gen, data, 5);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (data.m[i / 4] == 0.0) CHECK(s.x[i] == 0.0);
    }
    CHECK_NOTHROW(s.validate());

    auto state = gan::init_state(g);
    state.iteration = 7;
    auto w = state.critic.at("critic.mlp.b0").to_vector();
    w[0] = std::nan("");
    state.critic.set("critic.mlp.b0", Tensor::from(state.critic.at("critic.mlp.b0").shape(), w, true));
    gan::Rng rng(1);
    try {
        (void)gan::critic_step(g, state, data, rng);
        FAIL("expected divergence");
    } catch (const gan::GanDivergedError& e) {
        CHECK(e.iteration() == 7);
    }

    auto wrong = cfg;
    wrong.genes = 5;
    CHECK_THROWS_AS(gan::train_wgan_gp(data, wrong), dtwin::DimensionError);
}

TEST_CASE("conditional sweep") {
    const auto cfg = multi_config();
    const gan::CondGan g(cfg);
    nn::ParamSet gp;
    gan::Rng rng(15);
    g.init_generator(gp, rng);
    const std::vector<double> z{0.1, -0.3, 0.5, 1.2, -0.7}, r{0.4, 0.0}, m{1, 0, 1};
    const std::vector<std::size_t> q{2, 1};

    const auto one = gan::conditional_sweep(g, gp, z, r, q, m, {1.5});
    const auto direct = g.generate(gp, Tensor::matrix(1, 5, z), Tensor::matrix(1, 2, {0.4, 1.5}), q,
                                   Tensor::matrix(1, 3, m));
    CHECK(one.outputs[0] == direct.to_vector());

    const auto a = gan::conditional_sweep(g, gp, z, r, q, m, {2.0, -1.0, 0.5});
    CHECK(a.levels == std::vector<double>{-1.0, 0.5, 2.0});
    CHECK(a.outputs == gan::conditional_sweep(g, gp, z, r, q, m, {2.0, -1.0, 0.5}).outputs);
    CHECK(a.outputs[1] != a.outputs[2]);
    for (const auto& row : a.outputs)
        for (std::size_t gi = 4; gi < 8; ++gi) CHECK(row[gi] == 0.0);

    auto no_index = cfg;
    no_index.ace2_index.reset();
    const gan::CondGan g2(no_index);
    CHECK_THROWS_AS(gan::conditional_sweep(g2, gp, z, r, q, m, {1.0}), dtwin::ContractError);
}

TEST_CASE("correlation fidelity") {
    std::mt19937_64 rng(16);
    std::normal_distribution<double> n(0.0, 1.0);
    // Structured fixture: five genes driven by one latent factor with loadings
    // of both signs, plus one constant gene.
    const std::vector<std::string> genes{"ACE2", "AGT", "CTSA", "NLN", "PREP", "CONST"};
    const double load[5] = {0.9, -0.8, 0.85, 0.7, -0.75};
    Eigen::MatrixXd real(121, 6), noise(121, 6);
    for (int i = 0; i < 121; ++i) {
        const double f = n(rng);
        for (int k = 0; k < 5; ++k) real(i, k) = load[k] * f + 0.4 * n(rng);
        real(i, 5) = 3.0;
        for (int k = 0; k < 6; ++k) noise(i, k) = n(rng);
    }

    const auto same = gan::correlation_fidelity(real, real, genes);
    CHECK(same.mean_abs_diff == 0.0);
    CHECK(same.excluded == std::vector<std::string>{"CONST"});
    CHECK(same.genes.size() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(same.real(i, i) == 1.0);
        for (int j = 0; j < 5; ++j) CHECK(same.real(i, j) == same.real(j, i));
    }

    const auto neg = gan::correlation_fidelity(real, noise, genes);
    CHECK(neg.mean_abs_diff > 0.3);

    std::vector<double> key(121);
    for (int i = 0; i < 121; ++i) key[static_cast<std::size_t>(i)] = real(i, 0);
    const auto [low, high] = gan::median_split(key);
    CHECK(low.size() == 60);
    CHECK(high.size() == 61);
    for (auto i : low)
        for (auto j : high) CHECK(key[i] <= key[j]);
    const auto strat = gan::stratified_fidelity(real, key, real, key, genes);
    CHECK(strat.real_low == 60);
    CHECK(strat.real_high == 61);
    CHECK(strat.mean_abs_diff == 0.0);

    CHECK_THROWS_AS(gan::correlation_fidelity(real.topRows(2), real.topRows(2), genes), dtwin::DataError);
    std::vector<std::string> excluded;
    const auto p = gan::pearson(real, genes, &excluded);
    CHECK(excluded == std::vector<std::string>{"CONST"});
    CHECK(p.r.rows() == 5);
    CHECK(gan::to_json(same).at("genes").size() == 5);
}

TEST_CASE("config, manifest and persistence") {
    const gan::GanConfig defaults;
    CHECK(defaults.lambda == 10.0);
    CHECK(defaults.n_critic == 5);
    CHECK(defaults.noise_dim == 64);
    CHECK(defaults.lr_gen == 1e-4);
    CHECK(defaults.beta1 == 0.0);
    CHECK(defaults.beta2 == 0.9);
    CHECK(defaults.gen_hidden == std::vector<std::size_t>{256, 256});

    const auto cfg = multi_config();
    const auto back = gan::GanConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK_THROWS_AS(gan::GanConfig::from_json({{"critic_steps", 5}}), dtwin::ContractError);
    auto bad = cfg;
    bad.n_critic = 0;
    bad.lambda = -1;
    CHECK(bad.violations().size() == 2);
    CHECK_THROWS_AS(gan::CondGan{bad}, dtwin::ContractError);

    const auto manifest = gan::run_manifest(defaults, {gan::IterationStats{}});
    CHECK(manifest.at("config").at("lambda") == 10.0);
    CHECK(manifest.at("config").at("n_critic") == 5);
    CHECK(manifest.at("diagnostics").at("iterations") == 1);

    gan::GanModel model{cfg, {}, {}, {{"note", "x"}}};
    const gan::CondGan g(cfg);
    gan::Rng rng(17);
    g.init_generator(model.gen, rng);
    g.init_critic(model.critic, rng);
    const auto path = std::filesystem::temp_directory_path() / "dtwin_gan_model.json";
    gan::save_model(path, model);
    const auto loaded = gan::load_model(path);
    CHECK(loaded.gen == model.gen);
    CHECK(loaded.critic == model.critic);
    CHECK(loaded.config.to_json() == cfg.to_json());
    CHECK(loaded.meta == model.meta);
    std::filesystem::remove(path);
}

TEST_CASE("sample export skips unmeasured tissues") {
    const auto d = multi_data(6, 18);
    const auto path = std::filesystem::temp_directory_path() / "dtwin_gan_samples.csv";
    gan::write_samples_csv(d, {"lung", "blood", "heart"}, {"g1", "g2", "g3", "g4"}, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample_id,tissue,gene,value");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    std::size_t measured = 0;
    for (double v : d.m) measured += v == 1.0;
    CHECK(rows == measured * 4);
    std::filesystem::remove(path);
    const auto side = gan::covariate_sidecar(d, {"age", "ace2_lung"});
    CHECK(side.at("r").size() == 6);
    CHECK(side.at("q")[0].size() == 2);
}
