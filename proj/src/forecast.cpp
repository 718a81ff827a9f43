#include "dtwin/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <memory>
#include <mutex>
#include <thread>

namespace dtwin::forecast {

StepModel step_model(const gn::GnForecaster& model, const nn::ParamSet& params) {
    auto m = std::make_shared<const gn::GnForecaster>(model);
    auto ps = std::make_shared<const nn::ParamSet>(params);
    StepModel s;
    s.tau = model.config().tau;
    s.vars = model.variables();
    s.step = [m, ps](std::span<const double> window, bool stochastic, Rng* rng) {
        return m->predict_next(*ps, window, stochastic, rng);
    };
    return s;
}

MaskMode parse_mask_mode(std::string_view name) {
    if (name == "per_step") return MaskMode::per_step;
    if (name == "per_trajectory") return MaskMode::per_trajectory;
    throw ContractError("unknown mask mode '" + std::string(name) + "' (per_step, per_trajectory)");
}

std::string_view to_string(MaskMode m) { return m == MaskMode::per_step ? "per_step" : "per_trajectory"; }

void TrajectoryBundle::validate() const {
    if (passes < 2) throw InsufficientSamplesError("bundle needs at least 2 passes, has " + std::to_string(passes));
    if (horizon == 0 || vars == 0) throw ContractError("bundle has an empty horizon or no variables");
    if (values.size() != passes * horizon * vars) throw ContractError("bundle values do not match passes x horizon x vars");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw ContractError("bundle value " + std::to_string(i) + " is not finite");
    }
}

namespace {

// One pass of the rollout into `out` (horizon x vars).
void rollout_pass(const StepModel& model, std::span<const double> window, const RolloutConfig& cfg, std::size_t t,
                  std::span<double> out) {
    const std::size_t V = model.vars, tau = model.tau;
    std::vector<double> buf(window.begin(), window.end());
    buf.resize((tau + cfg.horizon) * V);
    const std::uint64_t pass_seed = nn::derive_seed(cfg.seed, t);
    Rng rng(pass_seed);
    for (std::size_t s = 0; s < cfg.horizon; ++s) {
        if (cfg.masks == MaskMode::per_trajectory) rng.seed(pass_seed);
        const auto y = model.step(std::span<const double>(buf.data() + s * V, tau * V), cfg.stochastic, &rng);
        if (y.size() != V) {
            throw DimensionError("step model returned " + std::to_string(y.size()) + " values, expected " +
                                 std::to_string(V));
        }
        for (std::size_t v = 0; v < V; ++v) {
            if (!std::isfinite(y[v])) {
                throw RolloutError(t, s, "non-finite prediction in pass " + std::to_string(t) + " at step " +
                                             std::to_string(s) + " (variable " + std::to_string(v) + ")");
            }
        }
        std::copy(y.begin(), y.end(), buf.begin() + static_cast<std::ptrdiff_t>((tau + s) * V));
        std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>(s * V));
    }
}

}  // namespace

TrajectoryBundle mc_rollout(const StepModel& model, std::span<const double> window, const RolloutConfig& cfg) {
    if (cfg.horizon < 1) throw ContractError("mc_rollout: horizon must be at least 1");
    if (cfg.passes < 2) throw InsufficientSamplesError("mc_rollout: need at least 2 passes");
    if (!model.step) throw ContractError("mc_rollout: step model is empty");
    if (window.size() != model.tau * model.vars) {
        throw DimensionError("mc_rollout: window has " + std::to_string(window.size()) + " values, model expects " +
                             std::to_string(model.tau) + " x " + std::to_string(model.vars));
    }
    TrajectoryBundle b;
    b.passes = cfg.passes;
    b.horizon = cfg.horizon;
    b.vars = model.vars;
    b.seed = cfg.seed;
    b.values.assign(b.passes * b.horizon * b.vars, 0.0);

    std::size_t workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, cfg.passes);

    // Each worker takes passes w, w + W, ... in ascending order and stops at its
    // first failure, so the lowest failing pass is always the one reported.
    std::mutex mu;
    std::size_t failed_pass = cfg.passes;
    std::exception_ptr failure;
    auto run = [&](std::size_t w) {
        for (std::size_t t = w; t < cfg.passes; t += workers) {
            try {
                rollout_pass(model, window, cfg, t, std::span<double>(b.values).subspan(t * b.horizon * b.vars,
                                                                                      b.horizon * b.vars));
            } catch (...) {
                std::lock_guard lock(mu);
                if (t < failed_pass) {
                    failed_pass = t;
                    failure = std::current_exception();
                }
                return;
            }
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    return b;
}

PredictiveMoments predictive_moments(const TrajectoryBundle& bundle, double tau_inv) {
    if (bundle.passes < 2) throw InsufficientSamplesError("predictive_moments: need at least 2 passes");
    if (!(tau_inv >= 0.0) || !std::isfinite(tau_inv)) throw ContractError("predictive_moments: tau_inv must be >= 0");
    bundle.validate();
    PredictiveMoments m;
    m.horizon = bundle.horizon;
    m.vars = bundle.vars;
    m.tau_inv = tau_inv;
    const std::size_t n = bundle.horizon * bundle.vars;
    // Raw moments of the data shifted by the first pass: same formula, but
    // identical passes give exactly zero and cancellation stays small.
    const auto ref = bundle.pass(0);
    std::vector<double> s1(n, 0.0), s2(n, 0.0);
    for (std::size_t t = 1; t < bundle.passes; ++t) {
        const auto p = bundle.pass(t);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = p[i] - ref[i];
            s1[i] += d;
            s2[i] += d * d;
        }
    }
    const double T = static_cast<double>(bundle.passes);
    m.mean.resize(n);
    m.variance.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = s1[i] / T;
        m.mean[i] = ref[i] + d;
        m.variance[i] = tau_inv + std::max(0.0, s2[i] / T - d * d);
    }
    return m;
}

double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw ContractError("quantile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw ContractError("quantile level must be in [0, 1]");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Band ci_band(const TrajectoryBundle& bundle, double level) {
    if (!(level > 0.0 && level < 1.0)) throw ContractError("ci_band: level must be in (0, 1)");
    if (bundle.passes == 0) throw InsufficientSamplesError("ci_band: empty bundle");
    Band band;
    band.level = level;
    band.horizon = bundle.horizon;
    band.vars = bundle.vars;
    const std::size_t n = bundle.horizon * bundle.vars;
    band.lower.resize(n);
    band.median.resize(n);
    band.upper.resize(n);
    std::vector<double> col(bundle.passes);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < bundle.passes; ++t) col[t] = bundle.values[t * n + i];
        std::sort(col.begin(), col.end());
        band.lower[i] = quantile_sorted(col, (1.0 - level) / 2.0);
        band.median[i] = quantile_sorted(col, 0.5);
        band.upper[i] = quantile_sorted(col, (1.0 + level) / 2.0);
    }
    return band;
}

TrajectoryBundle denormalized(TrajectoryBundle bundle, const physio::Normalizer& norm) {
    if (norm.mean.size() != bundle.vars || norm.scale.size() != bundle.vars) {
        throw DimensionError("denormalized: normalizer covers " + std::to_string(norm.mean.size()) +
                             " variables, bundle has " + std::to_string(bundle.vars));
    }
    for (std::size_t i = 0; i < bundle.values.size(); ++i) {
        bundle.values[i] = norm.inverse(i % bundle.vars, bundle.values[i]);
    }
    return bundle;
}

nlohmann::json bundle_summary(const TrajectoryBundle& bundle, const std::vector<std::string>& names, double tau_inv,
                              double level) {
    if (names.size() != bundle.vars) throw DimensionError("bundle_summary: one name per variable required");
    const auto m = predictive_moments(bundle, tau_inv);
    const auto band = ci_band(bundle, level);
    nlohmann::json vars = nlohmann::json::array();
    for (std::size_t v = 0; v < bundle.vars; ++v) {
        std::vector<double> mean, var, lo, med, hi;
        for (std::size_t s = 0; s < bundle.horizon; ++s) {
            const std::size_t i = s * bundle.vars + v;
            mean.push_back(m.mean[i]);
            var.push_back(m.variance[i]);
            lo.push_back(band.lower[i]);
            med.push_back(band.median[i]);
            hi.push_back(band.upper[i]);
        }
        vars.push_back({{"name", names[v]}, {"mean", mean}, {"var", var}, {"lo", lo}, {"median", med}, {"hi", hi}});
    }
    return {{"passes", bundle.passes}, {"steps", bundle.horizon}, {"level", level},
            {"tau_inv", tau_inv},      {"seed", bundle.seed},     {"variables", vars}};
}

void write_bundle_csv(const TrajectoryBundle& bundle, const std::vector<std::string>& names,
                      const std::filesystem::path& path) {
    if (names.size() != bundle.vars) throw DimensionError("write_bundle_csv: one name per variable required");
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out.precision(17);
    out << "pass,step,variable,value\n";
    for (std::size_t t = 0; t < bundle.passes; ++t)
        for (std::size_t s = 0; s < bundle.horizon; ++s)
            for (std::size_t v = 0; v < bundle.vars; ++v) out << t << ',' << s << ',' << names[v] << ',' << bundle.at(t, s, v) << '\n';
    if (!out) throw RuntimeFailure("failed writing " + path.string());
}

nlohmann::json bundle_to_json(const TrajectoryBundle& b) {
    return {{"passes", b.passes}, {"horizon", b.horizon}, {"vars", b.vars},
            {"seed", b.seed},     {"source", b.source},   {"values", b.values}};
}

TrajectoryBundle bundle_from_json(const nlohmann::json& j) {
    TrajectoryBundle b;
    try {
        b.passes = j.at("passes").get<std::size_t>();
        b.horizon = j.at("horizon").get<std::size_t>();
        b.vars = j.at("vars").get<std::size_t>();
        b.seed = j.at("seed").get<std::uint64_t>();
        b.source = j.value("source", nlohmann::json::object());
        b.values = j.at("values").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed bundle: ") + e.what());
    }
    if (b.values.size() != b.passes * b.horizon * b.vars) throw DataError("malformed bundle: value count mismatch");
    return b;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd PhaseProjection::project(const Eigen::MatrixXd& data) const {
    if (data.cols() != center.size()) throw DimensionError("project: column count differs from the fitted data");
    return (data.rowwise() - center.transpose()) * loadings;
}

PhaseProjection pca_project(const Eigen::MatrixXd& data, std::size_t k) {
    const auto n = static_cast<std::size_t>(data.rows()), V = static_cast<std::size_t>(data.cols());
    if (k == 0) throw ContractError("pca_project: k must be positive");
    if (V < k) throw ContractError("pca_project: need at least k variables");
    if (n < k + 1) throw ContractError("pca_project: need at least k + 1 time points");
    if (!data.allFinite()) throw DataError("pca_project: data contains non-finite values");

    PhaseProjection p;
    p.center = data.colwise().mean().transpose();
    const Eigen::MatrixXd centered = data.rowwise() - p.center.transpose();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw RuntimeFailure("pca_project: eigendecomposition failed");

    // Eigen returns ascending eigenvalues.
    const Eigen::VectorXd lambda = es.eigenvalues().reverse().cwiseMax(0.0);
    const double total = lambda.sum();
    const double tol = std::max(total, 0.0) * 1e-12 * static_cast<double>(V);
    if (total <= 0.0 || lambda(static_cast<Eigen::Index>(k - 1)) <= tol) {
        std::size_t rank = 0;
        while (rank < V && total > 0.0 && lambda(static_cast<Eigen::Index>(rank)) > tol) ++rank;
        throw DegenerateProjectionError("pca_project: centered data has rank " + std::to_string(rank) +
                                        ", fewer than the " + std::to_string(k) + " components requested");
    }
    p.loadings.resize(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
        Eigen::VectorXd vec = es.eigenvectors().col(static_cast<Eigen::Index>(V - 1 - c));
        Eigen::Index arg = 0;
        for (Eigen::Index i = 1; i < vec.size(); ++i) {
            if (std::abs(vec(i)) > std::abs(vec(arg))) arg = i;
        }
        if (vec(arg) < 0) vec = -vec;
        p.loadings.col(static_cast<Eigen::Index>(c)) = vec;
        p.explained.push_back(lambda(static_cast<Eigen::Index>(c)) / total);
    }
    p.projected = centered * p.loadings;
    return p;
}

Density2d density_2d(const Eigen::MatrixXd& points, std::size_t bins, double x_min, double x_max, double y_min,
                     double y_max) {
    if (bins == 0) throw ContractError("density_2d: bins must be positive");
    if (!(x_max > x_min) || !(y_max > y_min)) throw ContractError("density_2d: empty bounds");
    if (points.rows() > 0 && points.cols() < 2) throw DimensionError("density_2d: need two coordinates");
    Density2d d{x_min, x_max, y_min, y_max, bins, std::vector<double>(bins * bins, 0.0)};
    auto cell = [bins](double v, double lo, double hi) {
        const double f = (v - lo) / (hi - lo);
        return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, f) * static_cast<double>(bins)));
    };
    std::size_t counted = 0;
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
        const double x = points(r, 0), y = points(r, 1);
        // Points outside the bounds are left out.
        if (!(x >= x_min && x <= x_max && y >= y_min && y <= y_max)) continue;
        d.cells[cell(y, y_min, y_max) * bins + cell(x, x_min, x_max)] += 1.0;
        ++counted;
    }
    if (counted > 0) {
        for (auto& c : d.cells) c /= static_cast<double>(counted);
    }
    return d;
}

}  // namespace dtwin::forecast
