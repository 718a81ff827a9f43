#pragma once

/**
 * @file physio.hpp
 * @brief Lumped cardiovascular + renin-angiotensin surrogate, its dependency
 * graph, trajectory generation and the windowed training dataset.
 *
 * Heart chambers carry volumes; their pressures are derived from a
 * time-varying elastance driven by a limit-cycle pacemaker (sa_x, sa_y).
 * Pulmonary segments and the systemic artery are RC compartments. All
 * compliances are constant, so the closed-loop blood volume is a linear
 * invariant of the flow.
 */

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dtwin/errors.hpp"

namespace dtwin::physio {

enum Var : std::size_t {
    v_ra, v_rv, v_la, v_lv,
    p_pa_prox, p_pa_dist, p_pa_small, p_pcap, p_pvein,
    p_sa,
    sa_x, sa_y,
    baro,
    renin, ang1, ang2, ang17, ace, ace2,
    glucose, insulin, viral,
    kNumVars
};

using State = std::array<double, kNumVars>;

const std::array<std::string, kNumVars>& variable_names();
std::size_t variable_index(std::string_view name);

/// Variables that are chamber volumes (checked for sign after every step).
bool is_volume(std::size_t v);

struct Exposome {
    double ace_inhibitor_dose = 0.0;  // mg/day
    double heparin_dose = 0.0;        // U/ml
    double calorie_intake = 2000.0;   // kcal/day
    double exercise_level = 0.0;      // 0..1
    std::optional<double> infection_onset;  // s

    void validate() const;
    /// Field-level violations as human-readable strings; empty when valid.
    std::vector<std::string> violations() const;
};

nlohmann::json to_json(const Exposome& e);
/// Missing keys keep `base` values; unknown keys are rejected.
Exposome exposome_from_json(const nlohmann::json& j, const Exposome& base = {});

/// Model constants. Pressures mmHg, volumes ml, time s, resistances mmHg s/ml.
struct Params {
#define DTWIN_PHYSIO_PARAMS(X)                                                     \
    X(hr_base, 72.0)          X(hr_exercise_gain, 0.6)   X(hr_baro_gain, 0.6)      \
    X(pacemaker_gain, 5.0)                                                         \
    X(lv_emax, 2.5)  X(lv_emin, 0.07) X(lv_v0, 10.0)                               \
    X(rv_emax, 0.6)  X(rv_emin, 0.05) X(rv_v0, 10.0)                               \
    X(la_emax, 0.3)  X(la_emin, 0.12) X(la_v0, 5.0)                                \
    X(ra_emax, 0.3)  X(ra_emin, 0.12) X(ra_v0, 5.0)                                \
    X(activation_power, 4.0)  X(atrial_lead, 1.6)                                  \
    X(r_tricuspid, 0.006) X(r_pulmonic, 0.008) X(r_mitral, 0.006) X(r_aortic, 0.01)\
    X(valve_width, 1.0)  X(valve_leak, 1e-3)                                       \
    X(c_pa_prox, 1.0) X(c_pa_dist, 1.5) X(c_pa_small, 1.0) X(c_pcap, 2.0)          \
    X(c_pvein, 8.0)                                                                \
    X(r_pa_prox, 0.01) X(r_pa_dist, 0.02) X(r_pa_small, 0.03) X(r_pcap, 0.02)      \
    X(r_pvein, 0.01)                                                               \
    X(c_sa, 1.5)  X(r_sys, 1.0)  X(resistance_scale, 1.0)                          \
    X(exercise_dilation, 0.4)                                                      \
    X(baro_setpoint, 90.0) X(baro_slope, 10.0) X(baro_tau, 2.0)                    \
    X(baro_resistance_gain, 0.6)                                                   \
    X(renin_tau, 10.0) X(renin_glucose_gain, 0.5) X(renin_baro_gain, 1.0)          \
    X(k_renin, 1.0) X(k_ace, 0.5) X(k_ang1_decay, 0.3) X(k_ace2, 0.2)              \
    X(k_ang2_decay, 0.25) X(k_ang17_decay, 0.2) X(k_ace_ang17, 0.1)                \
    X(ang2_ref, 1.25) X(ang17_ref, 0.83)                                             \
    X(ang2_resistance_gain, 0.4) X(ang17_dilation_gain, 0.1)                       \
    X(ace_tau, 30.0) X(ace_ic50, 2.0) X(ace_hill, 1.0)                             \
    X(ace2_tau, 20.0) X(viral_ace2_decay, 0.25)                                    \
    X(viral_source, 0.02) X(viral_clearance, 0.1) X(infection_ramp, 1.0)           \
    X(inflammation_half, 0.1) X(viscosity_gain, 0.3) X(contractility_loss, 0.2)    \
    X(heparin_half, 2000.0)                                                        \
    X(glucose_input, 5.0) X(glucose_clearance, 0.02) X(insulin_sensitivity, 0.003) \
    X(exercise_uptake, 1.0) X(insulin_secretion, 0.01) X(insulin_clearance, 0.1)

#define DTWIN_DECLARE_PARAM(name, value) double name = value;
    DTWIN_PHYSIO_PARAMS(DTWIN_DECLARE_PARAM)
#undef DTWIN_DECLARE_PARAM
};

nlohmann::json to_json(const Params& p);
/// Overrides named constants of `base`; unknown names are rejected.
Params params_from_json(const nlohmann::json& j, const Params& base = {});

/// Derivative of the full surrogate at time t.
void derivatives(const Params& p, const Exposome& e, double t, const State& x, State& dx);

double heart_rate(const Params& p, const Exposome& e, const State& x);  // bpm
double systemic_resistance(const Params& p, const Exposome& e, const State& x);

struct ChamberPressures {
    double ra, rv, la, lv;
};
ChamberPressures chamber_pressures(const Params& p, const State& x);

/// Closed-loop blood volume (chambers plus compliant compartments), ml.
double total_volume(const Params& p, const State& x);

State default_initial_state();

/// One explicit RK4 step from time t. Throws IntegrationError on NaN or a
/// negative chamber volume.
State step_ode(const State& x, const Exposome& e, double dt, double t = 0.0, const Params& p = {});

struct Trajectory {
    double t0 = 0.0;
    double output_dt = 0.01;
    std::size_t vars = kNumVars;
    std::vector<double> values;  // row-major [rows x vars]

    std::size_t rows() const { return vars ? values.size() / vars : 0; }
    double time(std::size_t row) const { return t0 + output_dt * static_cast<double>(row); }
    double at(std::size_t row, std::size_t var) const { return values[row * vars + var]; }
    std::span<const double> row(std::size_t r) const { return {values.data() + r * vars, vars}; }
    State state(std::size_t r) const;
    std::vector<double> column(std::size_t var) const;
};

/// Rows at t0, t0+output_dt, ... t0+horizon. output_dt must be a multiple of dt.
Trajectory simulate_scenario(const State& initial, const Exposome& e, double horizon_s, double dt = 1e-3,
                             const Params& p = {}, double t0 = 0.0, double output_dt = 0.01);

void write_csv(const Trajectory& traj, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Steady state. The heart beats, so "steady" means the periodic orbit.

struct PeriodicOrbit {
    State start;      // state at the pacemaker phase section (sa_y = 0, sa_x > 0)
    double period;    // s
    std::size_t steps;  // RK4 steps per period (dt = period / steps)
    double residual;  // max |Phi_T(x) - x| / period
};

/// Settle for `settle_s`, then Newton-shoot the one-cycle map with the total
/// volume pinned to the settled value.
PeriodicOrbit find_periodic_orbit(const Exposome& e, const Params& p = {}, double settle_s = 200.0,
                                  const State& initial = default_initial_state());

/// Cycle-averaged summaries over an integer number of beats.
struct CycleSummary {
    double map = 0;       // mean systemic arterial pressure
    double map_var = 0;   // variance of per-beat means
    double ang2 = 0;
    double ace2 = 0;
    double heart_rate = 0;
    std::size_t beats = 0;
    std::vector<double> beat_means;  // per-beat mean arterial pressure
};

/// Beats are delimited by upward zero crossings of sa_y (sa_x > 0).
CycleSummary cycle_summary(const Trajectory& traj);

/// Settle from `initial` for `settle_s`, then record `window_s` at dt resolution.
CycleSummary steady_state_summary(const Exposome& e, const Params& p = {}, double settle_s = 300.0,
                                  double window_s = 20.0, const State& initial = default_initial_state());

// ---------------------------------------------------------------------------
// Dependency graph

using Rhs = std::function<void(double t, std::span<const double> x, std::span<double> dx)>;

struct OdeSystem {
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> deps;  // deps[r]: variables declared in dr/dt
    Rhs rhs;
    std::vector<std::size_t> driven;  // nodes that take exposome inputs
};

struct GraphTopology {
    std::vector<std::string> nodes;
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // (sender, receiver)

    nlohmann::json to_json() const;
    static GraphTopology from_json(const nlohmann::json& j);
    bool operator==(const GraphTopology&) const = default;
};

/// Edge s->r for every declared s in dr/dt (no self-loops), sorted by
/// (sender, receiver). With a probe state, central differences at step h
/// must vanish exactly for undeclared pairs; otherwise ConsistencyError.
GraphTopology derive_graph(const OdeSystem& sys, const std::vector<double>* probe = nullptr, double h = 1e-6,
                           double t = 0.0);

/// Finite-difference Jacobian sparsity: J[r][s] != 0 (s != r).
std::vector<std::vector<bool>> jacobian_sparsity(const OdeSystem& sys, const std::vector<double>& x, double h = 1e-6,
                                                 double t = 0.0);

OdeSystem surrogate_system(const Params& p = {}, const Exposome& e = {});
/// A random state spread over physiological ranges, for Jacobian probes.
State random_state(std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Scenarios

struct Scenario {
    std::string id;
    std::string name;
    std::string description;
    Params params;
    State initial = default_initial_state();
    Exposome exposome;
    double horizon_s = 60.0;
    double dt = 1e-3;
    double output_dt = 0.01;
    std::uint64_t seed = 0;
    std::vector<std::string> violations() const;
};

nlohmann::json to_json(const Scenario& s);
/// Accepts {id?, name?, patient?{param overrides}, initial_state?{name: value},
/// exposome{...}, horizon_s, dt?, output_dt?, seed?}.
Scenario scenario_from_json(const nlohmann::json& j);
Scenario load_scenario(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset

/// Per-variable affine scaling to zero mean / unit spread.
struct Normalizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Normalizer fit(const std::vector<Trajectory>& trajs);
    double forward(std::size_t var, double x) const { return (x - mean[var]) / scale[var]; }
    double inverse(std::size_t var, double z) const { return z * scale[var] + mean[var]; }
    void apply(Trajectory& t) const;
    nlohmann::json to_json() const;
    static Normalizer from_json(const nlohmann::json& j);
};

struct WindowRef {
    std::uint32_t traj;
    std::uint32_t start;
    bool operator==(const WindowRef&) const = default;
    auto operator<=>(const WindowRef&) const = default;
};

struct SplitSizes {
    std::size_t train = 3200;
    std::size_t val = 800;
    std::size_t test = 1000;
    std::size_t total() const { return train + val + test; }
};

/// Windows of tau input rows plus the following target row, cut back to back
/// (disjoint) from normalized trajectories, shuffled and split.
struct TimeSeriesDataset {
    std::size_t tau = 500;
    std::size_t vars = kNumVars;
    std::vector<Trajectory> series;
    Normalizer normalizer;
    std::vector<WindowRef> train, val, test;

    /// tau rows, row-major.
    std::span<const double> input(const WindowRef& w) const;
    std::span<const double> target(const WindowRef& w) const;
};

TimeSeriesDataset make_dataset(std::vector<Trajectory> trajectories, std::size_t tau, SplitSizes sizes,
                               std::uint64_t seed, bool normalize = true);

/// A spread of exposome settings used to generate training trajectories.
std::vector<Scenario> training_scenarios(std::size_t count);

/// One trajectory per training scenario, long enough together to cut
/// `sizes.total()` windows of length tau.
std::vector<Trajectory> default_trajectories(std::size_t tau, SplitSizes sizes, std::size_t scenarios = 10);
/// Simulates enough trajectory to cut `sizes.total()` windows of length tau.
TimeSeriesDataset default_dataset(std::size_t tau, SplitSizes sizes, std::uint64_t seed, std::size_t scenarios = 10);

}  // namespace dtwin::physio
