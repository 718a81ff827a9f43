#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "dtwin/omics.hpp"

using namespace dtwin::omics;

namespace {

// Standard normal quantile by bisection on erfc, independent of the library path.
double probit(double p) {
    double lo = -10, hi = 10;
    for (int i = 0; i < 200; ++i) {
        const double mid = (lo + hi) / 2;
        (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
    }
    return (lo + hi) / 2;
}

CountMatrix blank(std::size_t samples, const std::vector<std::string>& genes) {
    CountMatrix c;
    for (std::size_t i = 0; i < samples; ++i) {
        c.samples.push_back("S" + std::to_string(i));
        c.donors.push_back("D" + std::to_string(i));
        c.tissues.push_back("lung");
    }
    c.genes = genes;
    c.gene_lengths.assign(genes.size(), 1000.0);
    c.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(samples), static_cast<Eigen::Index>(genes.size()));
    return c;
}

CountMatrix random_counts(std::size_t samples, std::size_t genes, std::uint64_t seed) {
    std::vector<std::string> names;
    for (std::size_t g = 0; g < genes; ++g) names.push_back("G" + std::to_string(g));
    auto c = blank(samples, names);
    std::mt19937_64 rng(seed);
    std::lognormal_distribution<double> mean(4.0, 1.0);
    std::vector<double> mu(genes);
    for (auto& m : mu) m = mean(rng);
    for (Eigen::Index i = 0; i < c.counts.rows(); ++i)
        for (Eigen::Index g = 0; g < c.counts.cols(); ++g) {
            std::poisson_distribution<long long> p(mu[static_cast<std::size_t>(g)]);
            c.counts(i, g) = static_cast<double>(p(rng));
        }
    return c;
}

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

SynthConfig null_lung(double coupling, std::uint64_t seed) {
    SynthConfig s;
    s.donors = 500;
    s.tissues = {kBlood, "lung"};
    s.availability = {1.0, 1.0};
    s.coupling = coupling;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("synthetic counts: shape, determinism, availability") {
    SynthConfig cfg;
    cfg.seed = 3;
    const auto a = synth_counts(cfg);
    CHECK_NOTHROW(a.validate());
    CHECK(a.n_genes() == 65);
    CHECK(a.counts == synth_counts(cfg).counts);
    CHECK(a.samples == synth_counts(cfg).samples);
    cfg.seed = 4;
    const auto other = synth_counts(cfg);
    CHECK((a.samples != other.samples || a.counts != other.counts));

    std::map<std::string, std::size_t> per;
    for (const auto& t : a.tissues) ++per[t];
    const SynthConfig d;
    for (std::size_t t = 0; t < d.tissues.size(); ++t) {
        const double expect = d.availability[t] * static_cast<double>(d.donors);
        CHECK(std::abs(static_cast<double>(per[d.tissues[t]]) - expect) < 4 * std::sqrt(expect) + 1);
    }
    const Eigen::VectorXd lib = a.library_sizes();
    CHECK(lib[0] == a.counts.row(0).sum());

    // Background genes are lowly expressed and fail the filters.
    const auto kept = filter_genes(a, {});
    CHECK(kept.size() == 55);
    for (auto g : kept) CHECK(a.genes[g].rfind("BG", 0) != 0);

    SynthConfig bad;
    bad.donors = 1;
    bad.coupling = 2;
    CHECK_THROWS_AS(synth_counts(bad), dtwin::ContractError);
}

TEST_CASE("filter_genes: thresholds and the 20% boundary") {
    auto c = blank(100, {"ZERO", "LOWTPM", "BOUND19", "BOUND20", "BIG"});
    for (Eigen::Index i = 0; i < 100; ++i) {
        c.counts(i, 1) = 6;
        c.counts(i, 4) = 29999994;  // puts LOWTPM at 0.2 TPM
        if (i < 19) c.counts(i, 2) = 6;
        if (i < 20) c.counts(i, 3) = 6;
    }
    const auto t = tpm(c);
    CHECK(t(0, 1) == doctest::Approx(0.2).epsilon(1e-3));
    const auto kept = filter_genes(c);
    CHECK(kept == std::vector<std::size_t>{1, 3, 4});

    // 6 reads everywhere but TPM below 0.1 everywhere.
    auto d = blank(10, {"A", "B"});
    d.counts.col(0).setConstant(6);
    d.counts.col(1).setConstant(6e8);
    CHECK(filter_genes(d) == std::vector<std::size_t>{1});
    // 5 reads is below the read threshold whatever the TPM.
    d.counts.col(1).setConstant(5);
    d.counts.col(0).setConstant(5);
    CHECK(filter_genes(d).empty());
}

TEST_CASE("TMM: identity, pure scaling, centering") {
    auto c = random_counts(4, 200, 1);
    c.counts.row(1) = c.counts.row(0);
    c.counts.row(2) = 2.0 * c.counts.row(0);
    const auto f = tmm_factors(c, 0);
    CHECK(f[0] == f[1]);
    const auto eff = effective_library_sizes(c, f);
    CHECK(std::abs(eff[2] / eff[0] / 2.0 - 1.0) <= 0.01);
    double lg = 0;
    for (double x : f) lg += std::log(x);
    CHECK(std::abs(lg / 4) <= 1e-9);

    SynthConfig s;
    s.seed = 5;
    const auto sc = synth_counts(s);
    std::vector<std::size_t> lung;
    for (std::size_t i = 0; i < sc.n_samples(); ++i)
        if (sc.tissues[i] == "lung") lung.push_back(i);
    auto sub = sc.select_samples(lung);
    sub = sub.select_genes(filter_genes(sub));
    const auto fs = tmm_factors(sub, default_reference(sub));
    double g = 0;
    for (double x : fs) g += std::log(x);
    CHECK(std::exp(g / static_cast<double>(fs.size())) == doctest::Approx(1.0).epsilon(1e-9));

    const auto cpm = normalized_cpm(c, f);
    CHECK(cpm(2, 5) == doctest::Approx(c.counts(2, 5) * 1e6 / eff[2]));
}

TEST_CASE("TMM: scaling one sample moves only that sample's effective library") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto c = random_counts(6, 300, 100 + seed);
        const double k = 1.5 + static_cast<double>(seed) * 0.4;
        const std::size_t target = 1 + seed % 5;
        const auto before = effective_library_sizes(c, tmm_factors(c, 0));
        auto scaled = c;
        scaled.counts.row(static_cast<Eigen::Index>(target)) *= k;
        const auto after = effective_library_sizes(scaled, tmm_factors(scaled, 0));
        for (std::size_t j = 1; j < 6; ++j) {
            const double ratio = (after[j] / after[0]) / (before[j] / before[0]);
            if (j == target) CHECK(std::abs(ratio / k - 1.0) <= 0.01);
            else CHECK(ratio == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("TMM: errors") {
    auto c = random_counts(3, 10, 2);
    CHECK_THROWS_AS(tmm_factors(c, 3), dtwin::ContractError);
    auto empty_ref = c;
    empty_ref.counts.row(0).setZero();
    CHECK_THROWS_AS(tmm_factors(empty_ref, 0), NormalizationError);

    // Disjoint support: no gene is nonzero in both.
    auto disjoint = blank(2, {"A", "B"});
    disjoint.counts(0, 0) = 10;
    disjoint.counts(1, 1) = 10;
    CHECK_THROWS_AS(tmm_factors(disjoint, 0), NormalizationError);

    // Trimming half of M from each end leaves nothing.
    auto two = blank(2, {"A", "B"});
    two.counts << 10, 20, 30, 10;
    CHECK_THROWS_AS(tmm_factors(two, 0, {0.5, 0.05}), NormalizationError);
}

TEST_CASE("TMM: weighted trimmed mean on a worked example") {
    // Ten genes, no trimming of A; M trimming removes the top and bottom 3.
    auto c = blank(2, {"g0", "g1", "g2", "g3", "g4", "g5", "g6", "g7", "g8", "g9"});
    const double ref[10] = {50, 80, 120, 40, 60, 200, 90, 30, 70, 110};
    const double obs[10] = {45, 100, 110, 90, 58, 260, 85, 10, 75, 150};
    for (int g = 0; g < 10; ++g) {
        c.counts(0, g) = ref[g];
        c.counts(1, g) = obs[g];
    }
    const double nR = c.counts.row(0).sum(), nO = c.counts.row(1).sum();
    std::vector<std::pair<double, double>> mw;  // (M, weight)
    for (int g = 0; g < 10; ++g) {
        const double m = std::log2(obs[g] / nO) - std::log2(ref[g] / nR);
        const double v = (nO - obs[g]) / nO / obs[g] + (nR - ref[g]) / nR / ref[g];
        mw.emplace_back(m, 1 / v);
    }
    std::sort(mw.begin(), mw.end());
    double num = 0, den = 0;
    for (int i = 3; i < 7; ++i) {
        num += mw[static_cast<std::size_t>(i)].first * mw[static_cast<std::size_t>(i)].second;
        den += mw[static_cast<std::size_t>(i)].second;
    }
    const double raw = std::exp2(num / den);
    const auto f = tmm_factors(c, 0, {0.3, 0.0});
    CHECK(f[1] / f[0] == doctest::Approx(raw).epsilon(1e-12));
}

TEST_CASE("inverse normal transform") {
    const std::vector<double> three{1, 2, 3};
    const auto z = inverse_normal_transform(three);
    CHECK(std::abs(z[0] + 0.967421566101701) <= 1e-6);
    CHECK(z[1] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(std::abs(z[2] - 0.967421566101701) <= 1e-6);
    CHECK(std::abs(z[2] - probit(5.0 / 6.0)) <= 1e-9);

    std::mt19937_64 rng(7);
    std::exponential_distribution<double> e(1.0);
    std::vector<double> v(1000);
    for (auto& x : v) x = e(rng);
    const auto out = inverse_normal_transform(v);
    double mean = 0, var = 0;
    for (double x : out) mean += x / 1000;
    for (double x : out) var += (x - mean) * (x - mean) / 999;
    CHECK(std::abs(mean) <= 0.05);
    CHECK(std::abs(var - 1) <= 0.05);

    // Monotone maps of the input leave the output unchanged.
    std::vector<double> mapped(v.size());
    std::transform(v.begin(), v.end(), mapped.begin(), [](double x) { return std::log(x) * 3 + x * x * x; });
    CHECK(inverse_normal_transform(mapped) == out);

    // Tie-free output is a permutation of the normal-score set.
    std::vector<double> scores = out;
    std::sort(scores.begin(), scores.end());
    std::vector<double> sorted_in = v;
    std::sort(sorted_in.begin(), sorted_in.end());
    CHECK(inverse_normal_transform(sorted_in) == scores);
    for (std::size_t i = 0; i < 1000; i += 97) CHECK(std::abs(scores[i] - probit((i + 0.5) / 1000.0)) <= 1e-9);

    const auto tied = inverse_normal_transform(std::vector<double>{1, 1, 2});
    CHECK(tied[0] == tied[1]);
    CHECK(std::abs(tied[0] - probit(1.0 / 3.0)) <= 1e-9);

    CHECK_THROWS_AS(inverse_normal_transform(std::vector<double>{4, 4, 4}), TransformError);
    CHECK_THROWS_AS(inverse_normal_transform(std::vector<double>{4}), TransformError);
    CHECK_THROWS_AS(inverse_normal_transform(std::vector<double>{1, NAN}), TransformError);
}

TEST_CASE("preprocess: per-tissue tables of normal scores") {
    SynthConfig s;
    s.seed = 9;
    const auto counts = synth_counts(s);
    const auto tables = preprocess(counts);
    REQUIRE(tables.size() == 5);
    const auto* lung = find_table(tables, "lung");
    REQUIRE(lung);
    CHECK(find_table(tables, "brain") == nullptr);
    CHECK(static_cast<std::size_t>(lung->values.rows()) == lung->donors.size());
    CHECK(static_cast<std::size_t>(lung->values.cols()) == lung->genes.size());
    CHECK(lung->gene_index("ACE2").has_value());
    CHECK(!lung->gene_index("BG01").has_value());
    for (Eigen::Index g = 0; g < lung->values.cols(); ++g) CHECK(std::abs(lung->values.col(g).mean()) < 0.05);
}

TEST_CASE("ridge: OLS limit, shrinkage, planted recovery") {
    std::mt19937_64 rng(11);
    const Eigen::MatrixXd X = gaussian(200, 6, rng) * 2.0 + Eigen::MatrixXd::Constant(200, 6, 3.0);
    const Eigen::MatrixXd Wstar = gaussian(6, 3, rng).array().sign() * (0.5 + gaussian(6, 3, rng).array().abs());
    const Eigen::MatrixXd Y = (X * Wstar).rowwise() + Eigen::RowVectorXd::LinSpaced(3, -1, 1);
    const Eigen::MatrixXd Yn = Y + gaussian(200, 3, rng, 0.01);

    // Normal equations with an intercept column on raw X.
    Eigen::MatrixXd A(200, 7);
    A << Eigen::VectorXd::Ones(200), X;
    const Eigen::MatrixXd beta = (A.transpose() * A).llt().solve(A.transpose() * Yn);
    const auto ols = fit_ridge(X, Yn, 0.0);
    CHECK((ols.raw_coefficients() - beta.bottomRows(6)).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((ols.predict(X) - A * beta).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((ols.residuals - (Yn - A * beta)).cwiseAbs().maxCoeff() <= 1e-8);

    const auto planted = fit_ridge(X, Yn, 1e-3);
    CHECK((planted.raw_coefficients() - Wstar).norm() / Wstar.norm() <= 0.1);
    CHECK(((planted.raw_coefficients() - Wstar).array().abs() <= 0.1 * Wstar.array().abs()).all());
    CHECK(planted.W.rows() == 6);
    CHECK(planted.W.cols() == 3);

    double prev = fit_ridge(X, Yn, 1.0).W.norm();
    for (double a : {1e2, 1e4, 1e6, 1e9}) {
        const double n = fit_ridge(X, Yn, a).W.norm();
        CHECK(n < prev);
        prev = n;
    }
    CHECK(fit_ridge(X, Yn, 1e12).W.cwiseAbs().maxCoeff() < 1e-6);

    CHECK_THROWS_AS(fit_ridge(X, Yn.topRows(10), 1.0), dtwin::DimensionError);
    CHECK_THROWS_AS(fit_ridge(X, Yn, -1.0), dtwin::ContractError);
    CHECK_THROWS_AS(ols.predict(X.leftCols(5)), dtwin::DimensionError);
}

TEST_CASE("ridge: closed form equals gradient descent") {
    std::mt19937_64 rng(12);
    const Eigen::MatrixXd X = gaussian(80, 5, rng);
    const Eigen::MatrixXd Y = X * gaussian(5, 2, rng) + gaussian(80, 2, rng, 0.5);
    const double alpha = 3.0;
    const auto fit = fit_ridge(X, Y, alpha);
    const Eigen::MatrixXd Xs = (X.rowwise() - fit.x_mean).array().rowwise() / fit.x_scale.array();
    const Eigen::MatrixXd Yc = Y.rowwise() - Y.colwise().mean();
    // Gradient of ||Yc - Xs W||^2 + alpha ||W||^2 is 2 (Xs'Xs + alpha) W - 2 Xs'Yc.
    Eigen::MatrixXd H = Xs.transpose() * Xs;
    H.diagonal().array() += alpha;
    const double step = 1.0 / (2.0 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H).eigenvalues().maxCoeff());
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(5, 2);
    for (int it = 0; it < 20000; ++it) W -= step * (2 * H * W - 2 * Xs.transpose() * Yc);
    CHECK((W - fit.W).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("ridge cross-validation") {
    std::mt19937_64 rng(13);
    const Eigen::MatrixXd X = gaussian(100, 8, rng);
    const Eigen::MatrixXd noise = gaussian(100, 3, rng);
    const auto null = fit_ridge_cv(X, noise);
    CHECK(null.fit.alpha >= 1e3);
    CHECK(null.cv_r2.size() == 13);

    const Eigen::MatrixXd Y = X * gaussian(8, 3, rng);
    const auto clean = fit_ridge_cv(X, Y);
    CHECK(clean.fit.alpha == doctest::Approx(1e-2));
    CHECK(*std::max_element(clean.cv_r2.begin(), clean.cv_r2.end()) > 0.999);
    CHECK(fit_ridge_cv(X, Y).cv_r2 == clean.cv_r2);

    CHECK_THROWS_AS(fit_ridge_cv(X.topRows(9), Y.topRows(9)), dtwin::DataError);
    RidgeCvConfig one;
    one.folds = 1;
    CHECK_THROWS_AS(fit_ridge_cv(X, Y, one), dtwin::ContractError);
    const auto grid = RidgeCvConfig::log_grid(1, 100, 3);
    REQUIRE(grid.size() == 3);
    CHECK(grid[0] == 1.0);
    CHECK(grid[1] == doctest::Approx(10.0).epsilon(1e-14));
    CHECK(grid[2] == doctest::Approx(100.0).epsilon(1e-14));
}

TEST_CASE("bootstrap R²") {
    std::mt19937_64 rng(14);
    const Eigen::MatrixXd X = gaussian(120, 4, rng);
    const Eigen::MatrixXd Y = X * gaussian(4, 3, rng);
    const FitProcedure ridge = [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) { return fit_ridge(x, y, 1e-6); };
    BootstrapConfig cfg;
    cfg.seed = 1;
    const auto exact = bootstrap_r2(ridge, X, Y, cfg);
    REQUIRE(exact.genes.size() == 3);
    CHECK(exact.skipped == 0);
    for (const auto& g : exact.genes) {
        CHECK(g.mean >= 0.99);
        CHECK(g.evaluated == 200);
    }

    const Eigen::MatrixXd Yn = Y + gaussian(120, 3, rng, 1.5);
    cfg.workers = 1;
    const auto a = bootstrap_r2(ridge, X, Yn, cfg);
    cfg.workers = 3;
    const auto b = bootstrap_r2(ridge, X, Yn, cfg);
    CHECK(a.scores == b.scores);
    for (std::size_t g = 0; g < 3; ++g) {
        CHECK(a.genes[g].lo <= a.genes[g].mean);
        CHECK(a.genes[g].mean <= a.genes[g].hi);
    }

    BootstrapConfig big = cfg;
    big.replicates = 1000;
    const auto c = bootstrap_r2(ridge, X, Yn, big);
    for (std::size_t g = 0; g < 3; ++g) CHECK(std::abs(c.genes[g].mean - a.genes[g].mean) < 0.02);

    // Two rows never leave two out-of-bag rows.
    const auto tiny = bootstrap_r2(ridge, X.topRows(2), Y.topRows(2), cfg);
    CHECK(tiny.skipped == 200);
    CHECK(std::isnan(tiny.genes[0].mean));

    BootstrapConfig few = cfg;
    few.replicates = 9;
    CHECK_THROWS_AS(bootstrap_r2(ridge, X, Y, few), dtwin::ContractError);
}

TEST_CASE("crosstalk: null coupling and planted coupling") {
    for (std::uint64_t seed : {1u, 2u}) {
        const auto null_tables = preprocess(synth_counts(null_lung(0.0, seed)));
        CrosstalkConfig cfg;
        cfg.targets = {"lung"};
        cfg.bootstrap.seed = seed;
        const auto null = crosstalk(null_tables, default_gene_sets(), cfg);
        REQUIRE(null.size() == 1);
        CHECK(null[0].status == "ok");
        CHECK(null[0].donors == 500);
        double mean = 0, covered = 0;
        for (const auto& g : null[0].bootstrap.genes) {
            mean += g.mean;
            covered += g.lo <= 0 && 0 <= g.hi;
        }
        const double G = static_cast<double>(null[0].bootstrap.genes.size());
        CHECK(mean / G <= 0.05);
        CHECK(covered / G >= 0.9);

        const auto tables = preprocess(synth_counts(null_lung(0.8, seed)));
        const auto hit = crosstalk(tables, default_gene_sets(), cfg);
        for (const auto& g : hit[0].bootstrap.genes) CHECK(g.mean >= 0.4);
    }
}

TEST_CASE("crosstalk: donor matching, statuses, report") {
    SynthConfig s;
    s.seed = 15;
    s.availability = {0.8, 0.5, 0.01, 0.3, 0.4};
    const auto tables = preprocess(synth_counts(s));
    const auto* blood = find_table(tables, kBlood);
    const auto* lung = find_table(tables, "lung");
    const auto m = match_donors(*blood, *lung, union_genes(default_gene_sets(), kSignallingPathways),
                                find_gene_set(default_gene_sets(), kRasPathway).genes);
    for (std::size_t i = 0; i < m.donors.size(); ++i) {
        const auto bi = *blood->donor_index(m.donors[i]);
        const auto li = *lung->donor_index(m.donors[i]);
        CHECK(m.X(static_cast<Eigen::Index>(i), 0) == blood->values(static_cast<Eigen::Index>(bi), static_cast<Eigen::Index>(*blood->gene_index(m.predictors[0]))));
        CHECK(m.Y(static_cast<Eigen::Index>(i), 1) == lung->values(static_cast<Eigen::Index>(li), static_cast<Eigen::Index>(*lung->gene_index(m.targets[1]))));
    }
    CHECK(m.predictors.size() == 35);
    CHECK(m.targets.size() == 20);

    CrosstalkConfig cfg;
    cfg.targets = {"lung", "kidney_cortex", "brain"};
    cfg.bootstrap.replicates = 20;
    const auto reps = crosstalk(tables, default_gene_sets(), cfg);
    REQUIRE(reps.size() == 3);
    CHECK(reps[0].status == "ok");
    CHECK(reps[1].status == "insufficient_donors");
    CHECK(reps[2].status == "missing_tissue");
    const auto j = crosstalk_json(reps, cfg);
    CHECK(j.at("schema_version") == 1);
    const auto& ace2 = j.at("tissues").at("lung").at("genes").at("ACE2");
    CHECK(ace2.contains("r2_mean"));
    CHECK(ace2.at("r2_lo").get<double>() <= ace2.at("r2_hi").get<double>());
    CHECK(j.at("tissues").at("brain").at("status") == "missing_tissue");
    CHECK(crosstalk_json(crosstalk(tables, default_gene_sets(), cfg), cfg) == j);
}

TEST_CASE("gene set fixture and loading") {
    const auto sets = load_gene_sets(std::filesystem::path(DTWIN_FIXTURE_DIR) / "gene_sets.json");
    std::map<std::string, std::vector<std::string>> a, b;
    for (const auto& s : sets) a[s.pathway] = s.genes;
    for (const auto& s : default_gene_sets()) b[s.pathway] = s.genes;
    CHECK(a == b);
    CHECK(find_gene_set(sets, "renin_angiotensin").genes.front() == "ACE");
    CHECK_THROWS_AS(find_gene_set(sets, "wnt"), dtwin::LookupError);

    const auto dir = std::filesystem::temp_directory_path();
    auto write = [&](const std::string& body) {
        std::ofstream(dir / "dtwin_sets.json") << body;
        return dir / "dtwin_sets.json";
    };
    CHECK_THROWS_AS(load_gene_sets(write(R"({"a": []})")), dtwin::DataError);
    CHECK_THROWS_AS(load_gene_sets(write(R"({"a": ["X", "X"]})")), dtwin::DataError);
    CHECK_THROWS_AS(load_gene_sets(write(R"(["X"])")), dtwin::DataError);
    CHECK_THROWS_AS(load_gene_sets(write("{")), dtwin::DataError);
    std::filesystem::remove(dir / "dtwin_sets.json");
    CHECK(fixture_gene_length("ACE2") == fixture_gene_length("ACE2"));
    CHECK(fixture_gene_length("ACE2") >= 500);
    CHECK(fixture_gene_length("ACE2") <= 5000);
}

TEST_CASE("counts CSV round trip") {
    SynthConfig s;
    s.donors = 20;
    s.seed = 16;
    const auto c = synth_counts(s);
    const auto path = std::filesystem::temp_directory_path() / "dtwin_counts.csv";
    write_counts_csv(c, path);
    const auto back = read_counts_csv(path);
    CHECK(back.samples == c.samples);
    CHECK(back.donors == c.donors);
    CHECK(back.tissues == c.tissues);
    CHECK(back.genes == c.genes);
    CHECK(back.gene_lengths == c.gene_lengths);
    CHECK(back.counts == c.counts);

    const auto donors = std::filesystem::temp_directory_path() / "dtwin_donors.csv";
    write_donors_csv(c, donors);
    auto with_info = back;
    read_donors_csv(donors, with_info);
    CHECK(with_info.age == c.age);
    CHECK(with_info.sex == c.sex);
    std::ofstream(donors) << "donor_id,age,sex\nD0001,40,3\n";
    CHECK_THROWS_AS(read_donors_csv(donors, with_info), dtwin::DataError);
    std::ofstream(donors) << "donor_id,age,sex\nD0001,40,1\n";
    CHECK_THROWS_AS(read_donors_csv(donors, with_info), dtwin::DataError);
    std::filesystem::remove(donors);

    std::ofstream(path) << "sample,donor\n";
    CHECK_THROWS_AS(read_counts_csv(path), dtwin::DataError);
    std::ofstream(path) << "sample_id,donor_id,tissue,gene,count\nS1,D1,lung,A,1.5\n";
    CHECK_THROWS_AS(read_counts_csv(path), dtwin::DataError);
    std::filesystem::remove(path);
}

TEST_CASE("GAN handoff: masks, covariates, layout") {
    SynthConfig s;
    s.seed = 17;
    const auto counts = synth_counts(s);
    const auto tables = preprocess(counts);
    const std::vector<std::string> tissues{"lung", "kidney_cortex", "pancreas"};
    const std::vector<std::string> genes{"ACE2", "TNF", "CCL2"};
    const auto d = gan_data(counts, tables, tissues, genes, "lung");
    CHECK_NOTHROW(d.batch.validate());
    CHECK(d.batch.width() == 9);
    CHECK(d.covariates == std::vector<std::string>{"age", "ace2_lung"});
    const auto* lung = find_table(tables, "lung");
    const auto ace = *lung->gene_index("ACE2");
    std::size_t lung_rows = 0;
    for (std::size_t i = 0; i < d.donors.size(); ++i) {
        const auto row = lung->donor_index(d.donors[i]);
        CHECK(d.batch.m[i * 3] == (row ? 1.0 : 0.0));
        if (row) {
            ++lung_rows;
            const double v = lung->values(static_cast<Eigen::Index>(*row), static_cast<Eigen::Index>(ace));
            CHECK(d.batch.x[i * 9] == v);
            CHECK(d.batch.r[i * 2 + 1] == v);
        } else {
            CHECK(d.batch.r[i * 2 + 1] == 0.0);
        }
        CHECK((d.batch.q[i] == 1 || d.batch.q[i] == 2));
    }
    CHECK(lung_rows == lung->donors.size());
    double age_mean = 0;
    for (std::size_t i = 0; i < d.donors.size(); ++i) age_mean += d.batch.r[i * 2];
    CHECK(std::abs(age_mean / static_cast<double>(d.donors.size())) < 1e-9);
}
