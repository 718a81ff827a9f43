#include "dtwin/physio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <Eigen/Dense>

namespace dtwin::physio {

namespace {

const std::array<std::string, kNumVars> kNames = {
    "v_ra", "v_rv", "v_la", "v_lv",
    "p_pa_prox", "p_pa_dist", "p_pa_small", "p_pcap", "p_pvein",
    "p_sa",
    "sa_x", "sa_y",
    "baro",
    "renin", "ang1", "ang2", "ang17", "ace", "ace2",
    "glucose", "insulin", "viral",
};

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Smooth valve: nearly closed for negative gradients, conductance 1/r when open.
double valve(double dp, double r, double width, double leak) {
    return dp * (leak + (1.0 / r - leak) * sigmoid(dp / width));
}

struct Activations {
    double ventricle, atrium;
};

Activations activations(const Params& p, const State& x) {
    const double r = std::hypot(x[sa_x], x[sa_y]);
    double c = 1.0, s = 0.0;
    if (r > 0) {
        c = x[sa_x] / r;
        s = x[sa_y] / r;
    }
    // Atria peak `atrial_lead` radians before the ventricles.
    const double ca = c * std::cos(p.atrial_lead) - s * std::sin(p.atrial_lead);
    return {std::pow(0.5 * (1.0 + c), p.activation_power), std::pow(0.5 * (1.0 + ca), p.activation_power)};
}

double inflammation(const Params& p, const State& x) {
    const double v = std::max(x[viral], 0.0);
    return v / (v + p.inflammation_half);
}

double elastance(double emin, double emax, double a) { return emin + (emax - emin) * a; }

}  // namespace

const std::array<std::string, kNumVars>& variable_names() { return kNames; }

std::size_t variable_index(std::string_view name) {
    for (std::size_t i = 0; i < kNumVars; ++i) {
        if (kNames[i] == name) return i;
    }
    throw LookupError("unknown physiological variable '" + std::string(name) + "'");
}

bool is_volume(std::size_t v) { return v <= v_lv; }

// ---------------------------------------------------------------------------

std::vector<std::string> Exposome::violations() const {
    std::vector<std::string> out;
    auto nonneg = [&](const char* n, double v) {
        if (!(v >= 0.0) || !std::isfinite(v)) out.push_back(std::string(n) + " must be a finite value >= 0");
    };
    nonneg("ace_inhibitor_dose", ace_inhibitor_dose);
    nonneg("heparin_dose", heparin_dose);
    nonneg("calorie_intake", calorie_intake);
    if (!(exercise_level >= 0.0 && exercise_level <= 1.0)) out.push_back("exercise_level must lie in [0, 1]");
    if (infection_onset && !(std::isfinite(*infection_onset) && *infection_onset >= 0.0)) {
        out.push_back("infection_onset must be a time >= 0");
    }
    return out;
}

void Exposome::validate() const {
    const auto v = violations();
    if (!v.empty()) throw ContractError("invalid exposome: " + v.front());
}

nlohmann::json to_json(const Exposome& e) {
    nlohmann::json j{{"ace_inhibitor_dose", e.ace_inhibitor_dose},
                     {"heparin_dose", e.heparin_dose},
                     {"calorie_intake", e.calorie_intake},
                     {"exercise_level", e.exercise_level}};
    j["infection_onset"] = e.infection_onset ? nlohmann::json(*e.infection_onset) : nlohmann::json(nullptr);
    return j;
}

Exposome exposome_from_json(const nlohmann::json& j, const Exposome& base) {
    if (!j.is_object()) throw ContractError("exposome must be a JSON object");
    Exposome e = base;
    for (const auto& [k, v] : j.items()) {
        if (k == "infection_onset") {
            if (v.is_null()) e.infection_onset.reset();
            else if (v.is_number()) e.infection_onset = v.get<double>();
            else throw ContractError("infection_onset must be a number or null");
            continue;
        }
        if (!v.is_number()) throw ContractError("exposome field '" + k + "' must be numeric");
        if (k == "ace_inhibitor_dose") e.ace_inhibitor_dose = v.get<double>();
        else if (k == "heparin_dose") e.heparin_dose = v.get<double>();
        else if (k == "calorie_intake") e.calorie_intake = v.get<double>();
        else if (k == "exercise_level") e.exercise_level = v.get<double>();
        else throw ContractError("unknown exposome field '" + k + "'");
    }
    return e;
}

nlohmann::json to_json(const Params& p) {
    nlohmann::json j = nlohmann::json::object();
#define DTWIN_PARAM_TO_JSON(name, value) j[#name] = p.name;
    DTWIN_PHYSIO_PARAMS(DTWIN_PARAM_TO_JSON)
#undef DTWIN_PARAM_TO_JSON
    return j;
}

Params params_from_json(const nlohmann::json& j, const Params& base) {
    if (!j.is_object()) throw ContractError("patient parameters must be a JSON object");
    Params p = base;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number()) throw ContractError("parameter '" + k + "' must be numeric");
        bool found = false;
#define DTWIN_PARAM_FROM_JSON(name, value) \
    if (k == #name) {                      \
        p.name = v.get<double>();          \
        found = true;                      \
    }
        DTWIN_PHYSIO_PARAMS(DTWIN_PARAM_FROM_JSON)
#undef DTWIN_PARAM_FROM_JSON
        if (!found) throw ContractError("unknown model parameter '" + k + "'");
    }
    return p;
}

// ---------------------------------------------------------------------------

double heart_rate(const Params& p, const Exposome& e, const State& x) {
    return p.hr_base * (1.0 + p.hr_exercise_gain * e.exercise_level) * (1.0 - p.hr_baro_gain * (x[baro] - 0.5));
}

double systemic_resistance(const Params& p, const Exposome& e, const State& x) {
    const double a2 = 1.0 - p.ang2_resistance_gain + p.ang2_resistance_gain * x[ang2] / p.ang2_ref;
    const double a17 = 1.0 - p.ang17_dilation_gain + p.ang17_dilation_gain * x[ang17] / p.ang17_ref;
    const double hep = e.heparin_dose / (e.heparin_dose + p.heparin_half);
    const double visc = 1.0 + p.viscosity_gain * inflammation(p, x) * (1.0 - hep);
    const double reflex = 1.0 - p.baro_resistance_gain * (x[baro] - 0.5);
    const double dilation = 1.0 - p.exercise_dilation * e.exercise_level;
    return p.r_sys * p.resistance_scale * (a2 / a17) * visc * reflex * dilation;
}

ChamberPressures chamber_pressures(const Params& p, const State& x) {
    const Activations a = activations(p, x);
    const double lv_max = p.lv_emax * (1.0 - p.contractility_loss * inflammation(p, x));
    return {elastance(p.ra_emin, p.ra_emax, a.atrium) * (x[v_ra] - p.ra_v0),
            elastance(p.rv_emin, p.rv_emax, a.ventricle) * (x[v_rv] - p.rv_v0),
            elastance(p.la_emin, p.la_emax, a.atrium) * (x[v_la] - p.la_v0),
            elastance(p.lv_emin, lv_max, a.ventricle) * (x[v_lv] - p.lv_v0)};
}

double total_volume(const Params& p, const State& x) {
    return x[v_ra] + x[v_rv] + x[v_la] + x[v_lv] + p.c_pa_prox * x[p_pa_prox] + p.c_pa_dist * x[p_pa_dist] +
           p.c_pa_small * x[p_pa_small] + p.c_pcap * x[p_pcap] + p.c_pvein * x[p_pvein] + p.c_sa * x[p_sa];
}

void derivatives(const Params& p, const Exposome& e, double t, const State& x, State& dx) {
    const ChamberPressures cp = chamber_pressures(p, x);
    const double w = p.valve_width, leak = p.valve_leak;

    // Flows, ml/s.
    const double q_tv = valve(cp.ra - cp.rv, p.r_tricuspid, w, leak);
    const double q_pv = valve(cp.rv - x[p_pa_prox], p.r_pulmonic, w, leak);
    const double q_mv = valve(cp.la - cp.lv, p.r_mitral, w, leak);
    const double q_av = valve(cp.lv - x[p_sa], p.r_aortic, w, leak);
    const double q1 = (x[p_pa_prox] - x[p_pa_dist]) / p.r_pa_prox;
    const double q2 = (x[p_pa_dist] - x[p_pa_small]) / p.r_pa_dist;
    const double q3 = (x[p_pa_small] - x[p_pcap]) / p.r_pa_small;
    const double q4 = (x[p_pcap] - x[p_pvein]) / p.r_pcap;
    const double q5 = (x[p_pvein] - cp.la) / p.r_pvein;
    const double q_sys = (x[p_sa] - cp.ra) / systemic_resistance(p, e, x);

    dx[v_ra] = q_sys - q_tv;
    dx[v_rv] = q_tv - q_pv;
    dx[v_la] = q5 - q_mv;
    dx[v_lv] = q_mv - q_av;
    dx[p_pa_prox] = (q_pv - q1) / p.c_pa_prox;
    dx[p_pa_dist] = (q1 - q2) / p.c_pa_dist;
    dx[p_pa_small] = (q2 - q3) / p.c_pa_small;
    dx[p_pcap] = (q3 - q4) / p.c_pcap;
    dx[p_pvein] = (q4 - q5) / p.c_pvein;
    dx[p_sa] = (q_av - q_sys) / p.c_sa;

    // Pacemaker: stable unit limit cycle at angular rate omega.
    const double omega = 2.0 * M_PI * heart_rate(p, e, x) / 60.0;
    const double rad = 1.0 - x[sa_x] * x[sa_x] - x[sa_y] * x[sa_y];
    dx[sa_x] = p.pacemaker_gain * rad * x[sa_x] - omega * x[sa_y];
    dx[sa_y] = p.pacemaker_gain * rad * x[sa_y] + omega * x[sa_x];

    dx[baro] = (sigmoid((x[p_sa] - p.baro_setpoint) / p.baro_slope) - x[baro]) / p.baro_tau;

    const double glucose_drive = 1.0 - p.renin_glucose_gain + p.renin_glucose_gain * x[glucose] / 100.0;
    const double baro_drive = 1.0 - p.renin_baro_gain * (x[baro] - 0.5);
    const double feedback = 2.0 / (1.0 + x[ang2] / p.ang2_ref);
    dx[renin] = (glucose_drive * baro_drive * feedback - x[renin]) / p.renin_tau;
    dx[ang1] = p.k_renin * x[renin] - (p.k_ace * x[ace] + p.k_ang1_decay) * x[ang1];
    dx[ang2] = p.k_ace * x[ace] * x[ang1] - (p.k_ace2 * x[ace2] + p.k_ang2_decay) * x[ang2];
    dx[ang17] = p.k_ace2 * x[ace2] * x[ang2] - (p.k_ang17_decay + p.k_ace_ang17 * x[ace]) * x[ang17];

    const double ace_target = 1.0 / (1.0 + std::pow(e.ace_inhibitor_dose / p.ace_ic50, p.ace_hill));
    dx[ace] = (ace_target - x[ace]) / p.ace_tau;
    dx[ace2] = (1.0 - x[ace2]) / p.ace2_tau - p.viral_ace2_decay * x[viral] * x[ace2];

    const double source = e.infection_onset ? p.viral_source * sigmoid((t - *e.infection_onset) / p.infection_ramp) : 0.0;
    dx[viral] = source - p.viral_clearance * x[viral];

    const double uptake = p.glucose_clearance * (1.0 + p.exercise_uptake * e.exercise_level) + p.insulin_sensitivity * x[insulin];
    dx[glucose] = p.glucose_input * e.calorie_intake / 2000.0 - uptake * x[glucose];
    dx[insulin] = p.insulin_secretion * x[glucose] - p.insulin_clearance * x[insulin];
}

State default_initial_state() {
    State x{};
    x[v_ra] = 60;
    x[v_rv] = 110;
    x[v_la] = 60;
    x[v_lv] = 110;
    x[p_pa_prox] = 16;
    x[p_pa_dist] = 14;
    x[p_pa_small] = 12;
    x[p_pcap] = 10;
    x[p_pvein] = 8;
    x[p_sa] = 90;
    x[sa_x] = 1;
    x[sa_y] = 0;
    x[baro] = 0.5;
    x[renin] = 0.9;
    x[ang1] = 1.1;
    x[ang2] = 1.2;
    x[ang17] = 0.8;
    x[ace] = 1;
    x[ace2] = 1;
    x[glucose] = 100;
    x[insulin] = 10;
    x[viral] = 0;
    return x;
}

namespace {

State rk4(const Params& p, const Exposome& e, double t, const State& x, double dt) {
    State k1, k2, k3, k4, y;
    derivatives(p, e, t, x, k1);
    for (std::size_t i = 0; i < kNumVars; ++i) y[i] = x[i] + 0.5 * dt * k1[i];
    derivatives(p, e, t + 0.5 * dt, y, k2);
    for (std::size_t i = 0; i < kNumVars; ++i) y[i] = x[i] + 0.5 * dt * k2[i];
    derivatives(p, e, t + 0.5 * dt, y, k3);
    for (std::size_t i = 0; i < kNumVars; ++i) y[i] = x[i] + dt * k3[i];
    derivatives(p, e, t + dt, y, k4);
    State out;
    for (std::size_t i = 0; i < kNumVars; ++i) out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return out;
}

void check_state(const State& x, double t) {
    for (std::size_t i = 0; i < kNumVars; ++i) {
        if (!std::isfinite(x[i])) throw IntegrationError(kNames[i], t, "non-finite value");
        if (is_volume(i) && x[i] < 0.0) throw IntegrationError(kNames[i], t, "negative volume");
    }
}

State advance(State x, const Exposome& e, const Params& p, double t0, std::size_t steps, double dt) {
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = t0 + dt * static_cast<double>(k);
        x = rk4(p, e, t, x, dt);
        check_state(x, t + dt);
    }
    return x;
}

std::size_t steps_for(double span, double dt) {
    const double n = span / dt;
    return static_cast<std::size_t>(std::llround(n));
}

}  // namespace

State step_ode(const State& x, const Exposome& e, double dt, double t, const Params& p) {
    if (!(dt > 0.0)) throw ContractError("step_ode needs dt > 0");
    State y = rk4(p, e, t, x, dt);
    check_state(y, t + dt);
    return y;
}

State Trajectory::state(std::size_t r) const {
    State s{};
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(r * vars), kNumVars, s.begin());
    return s;
}

std::vector<double> Trajectory::column(std::size_t var) const {
    std::vector<double> out(rows());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = at(r, var);
    return out;
}

Trajectory simulate_scenario(const State& initial, const Exposome& e, double horizon_s, double dt, const Params& p,
                             double t0, double output_dt) {
    if (!(horizon_s > 0.0)) throw ContractError("horizon_s must be > 0");
    if (!(dt > 0.0)) throw ContractError("dt must be > 0");
    e.validate();
    const std::size_t every = steps_for(output_dt, dt);
    if (every == 0 || std::abs(static_cast<double>(every) * dt - output_dt) > 1e-9 * output_dt) {
        throw ContractError("output_dt must be a positive multiple of dt");
    }
    const std::size_t steps = static_cast<std::size_t>(std::floor(horizon_s / dt + 1e-9));
    const std::size_t rows = steps / every + 1;

    Trajectory traj;
    traj.t0 = t0;
    traj.output_dt = output_dt;
    traj.values.reserve(rows * kNumVars);
    State x = initial;
    check_state(x, t0);
    traj.values.insert(traj.values.end(), x.begin(), x.end());
    for (std::size_t r = 1; r < rows; ++r) {
        x = advance(x, e, p, t0 + dt * static_cast<double>((r - 1) * every), every, dt);
        traj.values.insert(traj.values.end(), x.begin(), x.end());
    }
    return traj;
}

void write_csv(const Trajectory& traj, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "time_s";
    for (std::size_t v = 0; v < traj.vars; ++v) os << ',' << (traj.vars == kNumVars ? kNames[v] : "x" + std::to_string(v));
    os << '\n' << std::setprecision(12);
    for (std::size_t r = 0; r < traj.rows(); ++r) {
        os << traj.time(r);
        for (std::size_t v = 0; v < traj.vars; ++v) os << ',' << traj.at(r, v);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------

CycleSummary cycle_summary(const Trajectory& traj) {
    std::vector<std::size_t> marks;
    for (std::size_t r = 1; r < traj.rows(); ++r) {
        if (traj.at(r - 1, sa_y) < 0.0 && traj.at(r, sa_y) >= 0.0 && traj.at(r, sa_x) > 0.0) marks.push_back(r);
    }
    if (marks.size() < 2) throw DataError("trajectory spans fewer than one full beat");
    CycleSummary s;
    s.beats = marks.size() - 1;
    double sum_p = 0, sum_a2 = 0, sum_ace2 = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b + 1 < marks.size(); ++b) {
        double beat = 0;
        for (std::size_t r = marks[b]; r < marks[b + 1]; ++r) {
            beat += traj.at(r, p_sa);
            sum_a2 += traj.at(r, ang2);
            sum_ace2 += traj.at(r, ace2);
        }
        sum_p += beat;
        const std::size_t len = marks[b + 1] - marks[b];
        n += len;
        s.beat_means.push_back(beat / static_cast<double>(len));
    }
    s.map = sum_p / static_cast<double>(n);
    s.ang2 = sum_a2 / static_cast<double>(n);
    s.ace2 = sum_ace2 / static_cast<double>(n);
    s.heart_rate = 60.0 * static_cast<double>(s.beats) / (static_cast<double>(n) * traj.output_dt);
    double m = 0;
    for (double v : s.beat_means) m += v;
    m /= static_cast<double>(s.beat_means.size());
    for (double v : s.beat_means) s.map_var += (v - m) * (v - m);
    s.map_var /= static_cast<double>(s.beat_means.size());
    return s;
}

CycleSummary steady_state_summary(const Exposome& e, const Params& p, double settle_s, double window_s,
                                  const State& initial) {
    const double dt = 1e-3;
    const State x = advance(initial, e, p, 0.0, steps_for(settle_s, dt), dt);
    return cycle_summary(simulate_scenario(x, e, window_s, dt, p, settle_s, dt));
}

PeriodicOrbit find_periodic_orbit(const Exposome& e, const Params& p, double settle_s, const State& initial) {
    const double dt = 1e-3;
    double t = settle_s;
    State x = advance(initial, e, p, 0.0, steps_for(settle_s, dt), dt);

    // Walk to the phase section, then time one beat for the period guess.
    auto to_section = [&](State& s, double& time) {
        std::size_t guard = 0;
        while (true) {
            const State n = rk4(p, e, time, s, dt);
            time += dt;
            const bool crossed = s[sa_y] < 0.0 && n[sa_y] >= 0.0 && n[sa_x] > 0.0;
            s = n;
            if (crossed) return;
            if (++guard > 100000) throw RuntimeFailure("pacemaker never crossed its phase section");
        }
    };
    to_section(x, t);
    const double t_start = t;
    State probe = x;
    double t_probe = t;
    to_section(probe, t_probe);
    const double period_guess = t_probe - t_start;
    const std::size_t steps = std::max<std::size_t>(16, steps_for(period_guess, dt));
    const double v_target = total_volume(p, x);

    // Unknown vector: the state with the sa_y slot holding the period.
    using Vec = Eigen::Matrix<double, kNumVars, 1>;
    auto unpack = [&](const Vec& z, State& s, double& period) {
        for (std::size_t i = 0; i < kNumVars; ++i) s[i] = z[static_cast<Eigen::Index>(i)];
        period = s[sa_y];
        s[sa_y] = 0.0;
    };
    auto flow = [&](const State& s0, double period) {
        State s = s0;
        const double h = period / static_cast<double>(steps);
        for (std::size_t k = 0; k < steps; ++k) s = rk4(p, e, t_start + h * static_cast<double>(k), s, h);
        return s;
    };
    auto residual = [&](const Vec& z, double* drift) {
        State s0;
        double period;
        unpack(z, s0, period);
        const State s1 = flow(s0, period);
        Vec f;
        double worst = 0;
        for (std::size_t i = 0; i < kNumVars; ++i) {
            f[static_cast<Eigen::Index>(i)] = s1[i] - s0[i];
            worst = std::max(worst, std::abs(s1[i] - s0[i]));
        }
        if (drift) *drift = worst / period;
        f[v_ra] = total_volume(p, s0) - v_target;
        return f;
    };

    Vec z;
    for (std::size_t i = 0; i < kNumVars; ++i) z[static_cast<Eigen::Index>(i)] = x[i];
    z[sa_y] = period_guess;
    double drift = 0;
    Vec f = residual(z, &drift);
    for (int iter = 0; iter < 12 && drift > 1e-12; ++iter) {
        Eigen::Matrix<double, kNumVars, kNumVars> jac;
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(kNumVars); ++j) {
            Vec zp = z;
            const double h = 1e-7 * std::max(1.0, std::abs(z[j]));
            zp[j] += h;
            jac.col(j) = (residual(zp, nullptr) - f) / h;
        }
        z -= jac.partialPivLu().solve(f);
        f = residual(z, &drift);
    }
    PeriodicOrbit orbit;
    unpack(z, orbit.start, orbit.period);
    orbit.steps = steps;
    orbit.residual = drift;
    return orbit;
}

// ---------------------------------------------------------------------------

nlohmann::json GraphTopology::to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& [s, r] : edges) e.push_back({s, r});
    return {{"nodes", nodes}, {"edges", e}};
}

GraphTopology GraphTopology::from_json(const nlohmann::json& j) {
    GraphTopology g;
    g.nodes = j.at("nodes").get<std::vector<std::string>>();
    for (const auto& e : j.at("edges")) {
        const auto s = e.at(0).get<std::size_t>(), r = e.at(1).get<std::size_t>();
        if (s >= g.nodes.size() || r >= g.nodes.size()) throw ConsistencyError("topology edge refers to a missing node");
        g.edges.emplace_back(s, r);
    }
    return g;
}

std::vector<std::vector<bool>> jacobian_sparsity(const OdeSystem& sys, const std::vector<double>& x, double h, double t) {
    const std::size_t n = sys.names.size();
    if (x.size() != n) throw DimensionError("probe state has the wrong length");
    std::vector<std::vector<bool>> nz(n, std::vector<bool>(n, false));
    std::vector<double> xp = x, xm = x, fp(n), fm(n);
    for (std::size_t s = 0; s < n; ++s) {
        xp[s] = x[s] + h;
        xm[s] = x[s] - h;
        sys.rhs(t, xp, fp);
        sys.rhs(t, xm, fm);
        xp[s] = xm[s] = x[s];
        for (std::size_t r = 0; r < n; ++r) {
            if (r != s && (fp[r] - fm[r]) / (2.0 * h) != 0.0) nz[r][s] = true;
        }
    }
    return nz;
}

GraphTopology derive_graph(const OdeSystem& sys, const std::vector<double>* probe, double h, double t) {
    const std::size_t n = sys.names.size();
    if (sys.deps.size() != n) throw ConsistencyError("dependency table does not match the variable list");
    GraphTopology g;
    g.nodes = sys.names;
    std::vector<std::vector<bool>> declared(n, std::vector<bool>(n, false));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t s : sys.deps[r]) {
            if (s >= n) throw ConsistencyError("d" + sys.names[r] + "/dt declares an unknown variable");
            declared[r][s] = true;
            if (s != r) g.edges.emplace_back(s, r);
        }
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());

    if (probe) {
        const auto nz = jacobian_sparsity(sys, *probe, h, t);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t s = 0; s < n; ++s) {
                if (nz[r][s] && !declared[r][s]) {
                    throw ConsistencyError("d" + sys.names[r] + "/dt depends on " + sys.names[s] + " but does not declare it");
                }
            }
        }
    }
    return g;
}

OdeSystem surrogate_system(const Params& p, const Exposome& e) {
    OdeSystem sys;
    sys.names.assign(kNames.begin(), kNames.end());
    sys.deps.resize(kNumVars);
    auto dep = [&](Var r, std::initializer_list<Var> s) { sys.deps[r].assign(s.begin(), s.end()); };
    dep(v_ra, {p_sa, v_rv, sa_x, sa_y, baro, ang2, ang17, viral});
    dep(v_rv, {v_ra, sa_x, sa_y, p_pa_prox});
    dep(v_la, {p_pvein, v_lv, sa_x, sa_y, viral});
    dep(v_lv, {v_la, p_sa, sa_x, sa_y, viral});
    dep(p_pa_prox, {v_rv, sa_x, sa_y, p_pa_dist});
    dep(p_pa_dist, {p_pa_prox, p_pa_small});
    dep(p_pa_small, {p_pa_dist, p_pcap});
    dep(p_pcap, {p_pa_small, p_pvein});
    dep(p_pvein, {p_pcap, v_la, sa_x, sa_y});
    dep(p_sa, {v_lv, sa_x, sa_y, viral, v_ra, baro, ang2, ang17});
    dep(sa_x, {sa_y, baro});
    dep(sa_y, {sa_x, baro});
    dep(baro, {p_sa});
    dep(renin, {glucose, baro, ang2});
    dep(ang1, {renin, ace});
    dep(ang2, {ang1, ace, ace2});
    dep(ang17, {ang2, ace2, ace});
    dep(ace, {});
    dep(ace2, {viral});
    dep(glucose, {insulin});
    dep(insulin, {glucose});
    dep(viral, {});
    for (std::size_t r = 0; r < kNumVars; ++r) sys.deps[r].push_back(r);
    sys.rhs = [p, e](double t, std::span<const double> x, std::span<double> dx) {
        State xs, d;
        std::copy(x.begin(), x.end(), xs.begin());
        derivatives(p, e, t, xs, d);
        std::copy(d.begin(), d.end(), dx.begin());
    };
    sys.driven = {v_ra, p_sa, sa_x, sa_y, ace, viral, glucose};
    return sys;
}

State random_state(std::mt19937_64& rng) {
    auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    State x{};
    x[v_ra] = u(30, 90);
    x[v_rv] = u(40, 150);
    x[v_la] = u(30, 90);
    x[v_lv] = u(40, 150);
    x[p_pa_prox] = u(8, 30);
    x[p_pa_dist] = u(8, 25);
    x[p_pa_small] = u(6, 20);
    x[p_pcap] = u(5, 15);
    x[p_pvein] = u(3, 12);
    x[p_sa] = u(60, 120);
    const double th = u(0, 2 * M_PI), r = u(0.8, 1.2);
    x[sa_x] = r * std::cos(th);
    x[sa_y] = r * std::sin(th);
    x[baro] = u(0.2, 0.8);
    x[renin] = u(0.5, 1.5);
    x[ang1] = u(0.5, 2.0);
    x[ang2] = u(0.5, 2.0);
    x[ang17] = u(0.3, 1.5);
    x[ace] = u(0.2, 1.0);
    x[ace2] = u(0.3, 1.0);
    x[glucose] = u(70, 200);
    x[insulin] = u(5, 25);
    x[viral] = u(0.01, 0.3);
    return x;
}

// ---------------------------------------------------------------------------

std::vector<std::string> Scenario::violations() const {
    std::vector<std::string> out = exposome.violations();
    if (!(horizon_s > 0.0) || !std::isfinite(horizon_s)) out.push_back("horizon_s must be > 0");
    if (!(dt > 0.0) || dt > 0.01) out.push_back("dt must lie in (0, 0.01]");
    if (dt > 0.0 && output_dt > 0.0) {
        const double ratio = output_dt / dt;
        if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio || std::round(ratio) < 1) {
            out.push_back("output_dt must be a positive multiple of dt");
        }
    } else {
        out.push_back("output_dt must be > 0");
    }
    for (std::size_t i = 0; i < kNumVars; ++i) {
        if (!std::isfinite(initial[i]) || (is_volume(i) && initial[i] < 0)) {
            out.push_back("initial_state." + kNames[i] + " is invalid");
        }
    }
    return out;
}

nlohmann::json to_json(const Scenario& s) {
    nlohmann::json init = nlohmann::json::object();
    for (std::size_t i = 0; i < kNumVars; ++i) init[kNames[i]] = s.initial[i];
    // Only parameters that differ from the defaults are written back.
    const nlohmann::json all = to_json(s.params), base = to_json(Params{});
    nlohmann::json patient = nlohmann::json::object();
    for (const auto& [k, v] : all.items()) {
        if (v != base[k]) patient[k] = v;
    }
    return {{"id", s.id},
            {"name", s.name},
            {"description", s.description},
            {"patient", patient},
            {"initial_state", init},
            {"exposome", to_json(s.exposome)},
            {"horizon_s", s.horizon_s},
            {"dt", s.dt},
            {"output_dt", s.output_dt},
            {"seed", s.seed}};
}

Scenario scenario_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractError("scenario must be a JSON object");
    static const std::vector<std::string> known = {"id", "name", "description", "patient", "initial_state",
                                                   "exposome", "horizon_s", "dt", "output_dt", "seed"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) throw ContractError("unknown scenario field '" + k + "'");
    }
    Scenario s;
    try {
        s.id = j.value("id", "");
        s.name = j.value("name", s.id);
        s.description = j.value("description", "");
        if (j.contains("patient")) s.params = params_from_json(j.at("patient"));
        if (j.contains("initial_state")) {
            for (const auto& [k, v] : j.at("initial_state").items()) s.initial[variable_index(k)] = v.get<double>();
        }
        if (j.contains("exposome")) s.exposome = exposome_from_json(j.at("exposome"));
        s.horizon_s = j.value("horizon_s", s.horizon_s);
        s.dt = j.value("dt", s.dt);
        s.output_dt = j.value("output_dt", s.output_dt);
        s.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& ex) {
        throw ContractError(std::string("malformed scenario: ") + ex.what());
    } catch (const LookupError& ex) {
        throw ContractError(ex.what());
    }
    return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ContractError("cannot open scenario file " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw ContractError("scenario file " + path.string() + " is not valid JSON: " + ex.what());
    }
    return scenario_from_json(j);
}

// ---------------------------------------------------------------------------

Normalizer Normalizer::fit(const std::vector<Trajectory>& trajs) {
    if (trajs.empty()) throw DataError("cannot fit a normalizer on no data");
    const std::size_t v = trajs.front().vars;
    std::vector<double> sum(v, 0.0), sq(v, 0.0);
    double n = 0;
    for (const auto& t : trajs) {
        if (t.vars != v) throw DimensionError("trajectories disagree on variable count");
        for (std::size_t r = 0; r < t.rows(); ++r) {
            for (std::size_t i = 0; i < v; ++i) sum[i] += t.at(r, i);
        }
        n += static_cast<double>(t.rows());
    }
    Normalizer out;
    out.mean.resize(v);
    out.scale.resize(v);
    for (std::size_t i = 0; i < v; ++i) out.mean[i] = sum[i] / n;
    for (const auto& t : trajs) {
        for (std::size_t r = 0; r < t.rows(); ++r) {
            for (std::size_t i = 0; i < v; ++i) {
                const double d = t.at(r, i) - out.mean[i];
                sq[i] += d * d;
            }
        }
    }
    for (std::size_t i = 0; i < v; ++i) {
        const double sd = std::sqrt(sq[i] / n);
        out.scale[i] = sd > 1e-9 * std::max(1.0, std::abs(out.mean[i])) ? sd : 1.0;
    }
    return out;
}

void Normalizer::apply(Trajectory& t) const {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t i = 0; i < t.vars; ++i) t.values[r * t.vars + i] = forward(i, t.values[r * t.vars + i]);
    }
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"scale", scale}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
    Normalizer n;
    n.mean = j.at("mean").get<std::vector<double>>();
    n.scale = j.at("scale").get<std::vector<double>>();
    if (n.mean.size() != n.scale.size()) throw DataError("normalizer mean/scale lengths differ");
    return n;
}

std::span<const double> TimeSeriesDataset::input(const WindowRef& w) const {
    const auto& t = series.at(w.traj);
    return {t.values.data() + static_cast<std::size_t>(w.start) * vars, tau * vars};
}

std::span<const double> TimeSeriesDataset::target(const WindowRef& w) const {
    const auto& t = series.at(w.traj);
    return {t.values.data() + (static_cast<std::size_t>(w.start) + tau) * vars, vars};
}

TimeSeriesDataset make_dataset(std::vector<Trajectory> trajectories, std::size_t tau, SplitSizes sizes,
                               std::uint64_t seed, bool normalize) {
    if (tau == 0) throw ContractError("window length tau must be >= 1");
    if (trajectories.empty()) throw DataError("no trajectories supplied");
    const std::size_t need = sizes.total();
    std::vector<WindowRef> windows;
    for (std::size_t i = 0; i < trajectories.size() && windows.size() < need; ++i) {
        const std::size_t rows = trajectories[i].rows();
        for (std::size_t s = 0; s + tau + 1 <= rows && windows.size() < need; s += tau + 1) {
            windows.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(s)});
        }
    }
    if (windows.size() < need) {
        throw DataError("need " + std::to_string(need) + " windows of " + std::to_string(tau + 1) + " rows but only " +
                        std::to_string(windows.size()) + " fit (short by " + std::to_string(need - windows.size()) + ")");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(windows.begin(), windows.end(), rng);

    TimeSeriesDataset ds;
    ds.tau = tau;
    ds.vars = trajectories.front().vars;
    if (normalize) {
        ds.normalizer = Normalizer::fit(trajectories);
        for (auto& t : trajectories) ds.normalizer.apply(t);
    } else {
        ds.normalizer.mean.assign(ds.vars, 0.0);
        ds.normalizer.scale.assign(ds.vars, 1.0);
    }
    ds.series = std::move(trajectories);
    auto b = windows.begin();
    ds.train.assign(b, b + static_cast<std::ptrdiff_t>(sizes.train));
    b += static_cast<std::ptrdiff_t>(sizes.train);
    ds.val.assign(b, b + static_cast<std::ptrdiff_t>(sizes.val));
    b += static_cast<std::ptrdiff_t>(sizes.val);
    ds.test.assign(b, b + static_cast<std::ptrdiff_t>(sizes.test));
    return ds;
}

std::vector<Scenario> training_scenarios(std::size_t count) {
    static const double doses[] = {0.0, 2.5, 5.0, 10.0, 20.0};
    static const double calories[] = {1600, 2000, 2600, 3200};
    static const double exercise[] = {0.0, 0.3, 0.7};
    static const double resistance[] = {0.9, 1.0, 1.2, 1.4};
    std::vector<Scenario> out;
    for (std::size_t i = 0; i < count; ++i) {
        Scenario s;
        s.id = "train-" + std::to_string(i);
        s.name = s.id;
        s.exposome.ace_inhibitor_dose = doses[i % 5];
        s.exposome.calorie_intake = calories[(i / 2) % 4];
        s.exposome.exercise_level = exercise[(i / 3) % 3];
        s.params.resistance_scale = resistance[(i / 5) % 4];
        s.params.insulin_sensitivity = (i % 4 == 3) ? 0.0012 : 0.003;
        if (i % 3 == 1) s.exposome.infection_onset = 60.0 + 40.0 * static_cast<double>(i % 7);
        if (i % 6 == 4) s.exposome.heparin_dose = 5000.0;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Trajectory> default_trajectories(std::size_t tau, SplitSizes sizes, std::size_t scenarios) {
    if (scenarios == 0) throw ContractError("need at least one scenario");
    const std::size_t per = (sizes.total() + scenarios - 1) / scenarios;
    const auto specs = training_scenarios(scenarios);
    std::vector<Trajectory> trajs;
    for (const auto& s : specs) {
        const double horizon = static_cast<double>(per * (tau + 1) - 1) * s.output_dt;
        trajs.push_back(simulate_scenario(s.initial, s.exposome, horizon + 0.5 * s.output_dt, s.dt, s.params, 0.0, s.output_dt));
    }
    return trajs;
}

TimeSeriesDataset default_dataset(std::size_t tau, SplitSizes sizes, std::uint64_t seed, std::size_t scenarios) {
    return make_dataset(default_trajectories(tau, sizes, scenarios), tau, sizes, seed, true);
}

}  // namespace dtwin::physio
