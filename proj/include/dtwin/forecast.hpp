#pragma once

// MC-dropout rollouts, predictive moments, quantile bands and PCA phase-space
// projections.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dtwin/errors.hpp"
#include "dtwin/graph_net.hpp"
#include "dtwin/nn.hpp"
#include "dtwin/physio.hpp"

namespace dtwin::forecast {

using nn::Rng;

/// One-step predictor over a window of `tau` rows by `vars` columns
/// (row-major). With `stochastic` set the model may draw from `rng`.
struct StepModel {
    std::size_t tau = 0;
    std::size_t vars = 0;
    std::function<std::vector<double>(std::span<const double> window, bool stochastic, Rng* rng)> step;
};

/// Wraps a trained forecaster; the model and parameters are copied.
StepModel step_model(const gn::GnForecaster& model, const nn::ParamSet& params);

enum class MaskMode {
    per_step,        // fresh dropout draws at every rollout step
    per_trajectory,  // one set of draws reused for the whole pass
};

MaskMode parse_mask_mode(std::string_view name);
std::string_view to_string(MaskMode m);

struct RolloutConfig {
    std::size_t horizon = 1;
    std::size_t passes = 100;
    std::uint64_t seed = 0;
    bool stochastic = true;
    MaskMode masks = MaskMode::per_step;
    /// 0 picks the hardware concurrency. Results do not depend on it.
    std::size_t workers = 0;
};

/// passes x horizon x vars, row-major.
struct TrajectoryBundle {
    std::size_t passes = 0;
    std::size_t horizon = 0;
    std::size_t vars = 0;
    std::vector<double> values;
    std::uint64_t seed = 0;
    nlohmann::json source = nlohmann::json::object();

    double at(std::size_t pass, std::size_t step, std::size_t var) const {
        return values[(pass * horizon + step) * vars + var];
    }
    double& at(std::size_t pass, std::size_t step, std::size_t var) { return values[(pass * horizon + step) * vars + var]; }
    /// horizon x vars for one pass.
    std::span<const double> pass(std::size_t t) const { return {values.data() + t * horizon * vars, horizon * vars}; }

    /// ContractError unless passes >= 2, shapes agree and all values are finite.
    void validate() const;
};

class RolloutError : public RuntimeFailure {
public:
    RolloutError(std::size_t pass, std::size_t step, const std::string& what)
        : RuntimeFailure(what), pass_(pass), step_(step) {}
    std::size_t pass() const noexcept { return pass_; }
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t pass_, step_;
};

class InsufficientSamplesError : public ContractError {
public:
    using ContractError::ContractError;
};

class DegenerateProjectionError : public DataError {
public:
    using DataError::DataError;
};

/// Each pass t predicts one step, appends the prediction to the window, drops
/// the oldest row and repeats `horizon` times. Pass t draws from a generator
/// seeded with derive_seed(seed, t), so the bundle is reproducible whatever
/// the worker count.
TrajectoryBundle mc_rollout(const StepModel& model, std::span<const double> window, const RolloutConfig& config);

struct PredictiveMoments {
    std::size_t horizon = 0, vars = 0;
    std::vector<double> mean;      // horizon x vars
    std::vector<double> variance;  // horizon x vars
    double tau_inv = 0.0;
};

/// mean = (1/T) sum y; variance = tau_inv + (1/T) sum y^2 - mean^2, evaluated
/// on values shifted by the first pass. A negative second term (round-off
/// only) is clamped to zero.
PredictiveMoments predictive_moments(const TrajectoryBundle& bundle, double tau_inv = 0.0);

/// Linear interpolation between order statistics (the usual "type 7").
/// `sorted` must be ascending and non-empty.
double quantile_sorted(std::span<const double> sorted, double q);

struct Band {
    double level = 0.95;
    std::size_t horizon = 0, vars = 0;
    std::vector<double> lower, median, upper;  // horizon x vars
};

/// Per-step empirical quantiles at (1 - level)/2 and (1 + level)/2 across passes.
Band ci_band(const TrajectoryBundle& bundle, double level = 0.95);

/// Applies the inverse of `norm` to every value (variables in normalizer order).
TrajectoryBundle denormalized(TrajectoryBundle bundle, const physio::Normalizer& norm);

/// Per variable: {name, mean, var, lo, median, hi}, arrays over steps.
nlohmann::json bundle_summary(const TrajectoryBundle& bundle, const std::vector<std::string>& names,
                              double tau_inv = 0.0, double level = 0.95);

/// Long format: pass,step,variable,value.
void write_bundle_csv(const TrajectoryBundle& bundle, const std::vector<std::string>& names,
                      const std::filesystem::path& path);

nlohmann::json bundle_to_json(const TrajectoryBundle& bundle);
TrajectoryBundle bundle_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Phase space

struct PhaseProjection {
    Eigen::VectorXd center;    // column means of the fitted data
    Eigen::MatrixXd loadings;  // vars x k, orthonormal columns
    std::vector<double> explained;  // k ratios, descending
    Eigen::MatrixXd projected;      // rows x k for the fitted data

    /// Projects new rows (same columns) with the fitted center and loadings.
    Eigen::MatrixXd project(const Eigen::MatrixXd& data) const;
};

/// Centers the columns, eigendecomposes the sample covariance and keeps the
/// top k components. The largest-magnitude entry of each loading vector is
/// made positive. Throws DegenerateProjectionError when the centered data
/// has rank below k, ContractError on too few rows or columns.
PhaseProjection pca_project(const Eigen::MatrixXd& data, std::size_t k = 2);

/// Normalized 2-D histogram of the first two projected coordinates over the
/// given bounds; cells sum to 1 (or all zero for an empty set).
struct Density2d {
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    std::size_t bins = 0;
    std::vector<double> cells;  // bins x bins, row = y bin
};
Density2d density_2d(const Eigen::MatrixXd& points, std::size_t bins, double x_min, double x_max, double y_min,
                     double y_max);

}  // namespace dtwin::forecast
