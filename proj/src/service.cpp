#include "dtwin/service.hpp"

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace dtwin::service {

namespace fs = std::filesystem;
using nlohmann::json;

json ApiError::to_json() const {
    json j{{"schema_version", kSchemaVersion}, {"error", {{"code", code_}, {"message", what()}}}};
    if (!violations_.empty()) j["error"]["violations"] = violations_;
    return j;
}

// ---------------------------------------------------------------------------
// Requests

json InterventionRequest::to_json() const {
    json j{{"scenario_id", scenario_id}, {"exposome", exposome}, {"horizon", horizon},
           {"passes", passes},           {"masks", forecast::to_string(masks)}, {"level", level}};
    if (seed) j["seed"] = *seed;
    return j;
}

InterventionRequest InterventionRequest::from_json(const json& j, std::vector<std::string>& violations) {
    InterventionRequest r;
    if (!j.is_object()) {
        violations.push_back("body must be a JSON object");
        return r;
    }
    static const std::set<std::string> known{"scenario_id", "exposome", "horizon", "passes", "seed", "masks", "level"};
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) violations.push_back("unknown field '" + k + "'");
    }
    auto count = [&](const char* key, std::size_t& out, std::size_t lo, std::size_t hi) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(lo) ||
            v.get<long long>() > static_cast<long long>(hi)) {
            violations.push_back(std::string(key) + " must be an integer in [" + std::to_string(lo) + ", " +
                                 std::to_string(hi) + "]");
            return;
        }
        out = v.get<std::size_t>();
    };
    if (!j.contains("scenario_id") || !j.at("scenario_id").is_string() || j.at("scenario_id").get<std::string>().empty())
        violations.push_back("scenario_id is required");
    else
        r.scenario_id = j.at("scenario_id").get<std::string>();
    if (j.contains("exposome")) {
        if (!j.at("exposome").is_object()) {
            violations.push_back("exposome must be an object");
        } else {
            r.exposome = j.at("exposome");
            try {
                for (auto& v : physio::exposome_from_json(r.exposome).violations()) violations.push_back("exposome." + v);
            } catch (const std::exception& e) {
                violations.push_back(std::string("exposome: ") + e.what());
            }
        }
    }
    count("horizon", r.horizon, 1, 10000);
    count("passes", r.passes, 2, 10000);
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0)
            violations.push_back("seed must be a non-negative integer");
        else
            r.seed = j.at("seed").get<std::uint64_t>();
    }
    if (j.contains("masks")) {
        try {
            r.masks = forecast::parse_mask_mode(j.at("masks").get<std::string>());
        } catch (const std::exception&) {
            violations.push_back("masks must be 'per_step' or 'per_trajectory'");
        }
    }
    if (j.contains("level")) {
        const auto& v = j.at("level");
        if (!v.is_number() || !(v.get<double>() > 0.0 && v.get<double>() < 1.0))
            violations.push_back("level must lie in (0, 1)");
        else
            r.level = v.get<double>();
    }
    return r;
}

// ---------------------------------------------------------------------------
// Forecast execution

const std::map<std::string, std::vector<std::string>>& organ_groups() {
    static const std::map<std::string, std::vector<std::string>> groups{
        {"heart", {"p_ra", "p_rv", "p_la", "p_lv", "v_ra", "v_rv", "v_la", "v_lv"}},
        {"pulmonary", {"p_pa_prox", "p_pa_dist", "p_pa_small", "p_pcap", "p_pvein"}},
        {"ras", {"renin", "ang1", "ang2", "ang17", "ace", "ace2"}},
        {"systemic", {"p_sa", "baro", "sa_x", "sa_y"}},
        {"metabolic", {"glucose", "insulin", "viral"}},
    };
    return groups;
}

std::vector<std::string> forecast_variable_names() {
    const auto& base = physio::variable_names();
    std::vector<std::string> names(base.begin(), base.end());
    for (const char* p : {"p_ra", "p_rv", "p_la", "p_lv"}) names.emplace_back(p);
    return names;
}

namespace {

void check_model(const gn::GnModel& model) {
    const auto& names = physio::variable_names();
    if (model.topology.nodes.size() != names.size() ||
        !std::equal(names.begin(), names.end(), model.topology.nodes.begin()))
        throw DataError("checkpoint variables do not match the physiology model");
}

double window_start_time(const physio::Trajectory& traj, std::size_t tau) {
    return traj.time(traj.rows() - tau);
}

physio::Trajectory history(const physio::Scenario& s, const physio::Exposome& e, std::size_t tau) {
    const double need = static_cast<double>(tau) * s.output_dt;
    return physio::simulate_scenario(s.initial, e, std::max(s.horizon_s, need), s.dt, s.params, 0.0, s.output_dt);
}

std::string dump(const json& j) { return j.dump(1); }

std::vector<double> normalized_tail(const physio::Trajectory& traj, const gn::GnModel& model) {
    const std::size_t tau = model.config.tau;
    if (traj.rows() < tau) throw DataError("scenario history is shorter than the model window");
    std::vector<double> w;
    w.reserve(tau * traj.vars);
    for (std::size_t r = traj.rows() - tau; r < traj.rows(); ++r)
        for (std::size_t v = 0; v < traj.vars; ++v) w.push_back(model.normalizer.forward(v, traj.at(r, v)));
    return w;
}

}  // namespace

std::vector<double> forecast_window(const physio::Scenario& scenario, const physio::Exposome& exposome,
                                    const gn::GnModel& model) {
    check_model(model);
    return normalized_tail(history(scenario, exposome, model.config.tau), model);
}

std::map<std::string, std::string> execute_forecast(const physio::Scenario& scenario, const InterventionRequest& req,
                                                    const gn::GnModel& model, const std::string& model_sha256,
                                                    std::size_t rollout_workers) {
    check_model(model);
    const auto exposome = physio::exposome_from_json(req.exposome, scenario.exposome);
    exposome.validate();
    const std::uint64_t seed = req.seed.value_or(scenario.seed);
    const std::size_t tau = model.config.tau;

    const auto traj = history(scenario, exposome, tau);
    const auto window = normalized_tail(traj, model);
    const double t_last = traj.time(traj.rows() - 1);

    const gn::GnForecaster net(model.config, model.topology);
    forecast::RolloutConfig rc;
    rc.horizon = req.horizon;
    rc.passes = req.passes;
    rc.seed = seed;
    rc.stochastic = true;
    rc.masks = req.masks;
    rc.workers = rollout_workers;
    auto raw = forecast::denormalized(forecast::mc_rollout(forecast::step_model(net, model.params), window, rc),
                                      model.normalizer);

    // Append the chamber pressures implied by the forecast volumes.
    const std::size_t nv = physio::kNumVars;
    forecast::TrajectoryBundle b;
    b.passes = raw.passes;
    b.horizon = raw.horizon;
    b.vars = nv + 4;
    b.seed = seed;
    b.values.resize(b.passes * b.horizon * b.vars);
    for (std::size_t t = 0; t < b.passes; ++t) {
        for (std::size_t s = 0; s < b.horizon; ++s) {
            physio::State x{};
            for (std::size_t v = 0; v < nv; ++v) b.at(t, s, v) = x[v] = raw.at(t, s, v);
            for (std::size_t v = 0; v < 4; ++v) x[v] = std::max(x[v], 0.0);
            const auto p = physio::chamber_pressures(scenario.params, x);
            b.at(t, s, nv) = p.ra;
            b.at(t, s, nv + 1) = p.rv;
            b.at(t, s, nv + 2) = p.la;
            b.at(t, s, nv + 3) = p.lv;
        }
    }
    b.source = {{"scenario_id", scenario.id},
                {"window_start", window_start_time(traj, tau)},
                {"window_rows", tau},
                {"t0", t_last},
                {"dt", scenario.output_dt}};
    b.validate();

    const auto names = forecast_variable_names();
    json resolved = req.to_json();
    resolved["seed"] = seed;
    std::vector<double> times;
    for (std::size_t s = 1; s <= b.horizon; ++s) times.push_back(t_last + static_cast<double>(s) * scenario.output_dt);

    json manifest{{"schema_version", kSchemaVersion},
                  {"kind", "forecast"},
                  {"seed", seed},
                  {"scenario", physio::to_json(scenario)},
                  {"request", resolved},
                  {"exposome", physio::to_json(exposome)},
                  {"model_sha256", model_sha256},
                  {"model_config", model.config.to_json()},
                  {"variables", names},
                  {"shape", {b.passes, b.horizon, b.vars}}};
    json summary{{"schema_version", kSchemaVersion},
                 {"scenario_id", scenario.id},
                 {"t0", t_last},
                 {"dt", scenario.output_dt},
                 {"times", times},
                 {"summary", forecast::bundle_summary(b, names, 0.0, req.level)}};
    return {{"manifest.json", dump(manifest)},
            {"bundle.json", forecast::bundle_to_json(b).dump()},
            {"summary.json", dump(summary)}};
}

namespace {

std::vector<std::size_t> group_columns(const std::string& group) {
    const auto& groups = organ_groups();
    const auto it = groups.find(group);
    if (it == groups.end()) {
        std::string known;
        for (const auto& [k, v] : groups) known += (known.empty() ? "" : ", ") + k;
        throw ApiError(422, "unknown_group", "unknown organ group '" + group + "'", {"group must be one of: " + known});
    }
    const auto names = forecast_variable_names();
    std::vector<std::size_t> cols;
    for (const auto& n : it->second)
        cols.push_back(static_cast<std::size_t>(std::find(names.begin(), names.end(), n) - names.begin()));
    return cols;
}

Eigen::MatrixXd group_rows(const forecast::TrajectoryBundle& b, const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(b.passes * b.horizon), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t t = 0; t < b.passes; ++t)
        for (std::size_t s = 0; s < b.horizon; ++s)
            for (std::size_t c = 0; c < cols.size(); ++c)
                m(static_cast<Eigen::Index>(t * b.horizon + s), static_cast<Eigen::Index>(c)) = b.at(t, s, cols[c]);
    return m;
}

forecast::PhaseProjection fit_projection(const Eigen::MatrixXd& data, const std::string& group) {
    try {
        return forecast::pca_project(data, 2);
    } catch (const forecast::DegenerateProjectionError& e) {
        throw ApiError(422, "degenerate_projection",
                       std::string(e.what()) + "; group '" + group + "' barely moves in this forecast, try another organ group");
    } catch (const ContractError& e) {
        throw ApiError(422, "degenerate_projection", e.what());
    }
}

json matrix_rows(const Eigen::MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        out.push_back(row);
    }
    return out;
}

struct Bounds {
    double x_min, x_max, y_min, y_max;
};

Bounds padded_bounds(const Eigen::MatrixXd& pts) {
    Bounds b{pts.col(0).minCoeff(), pts.col(0).maxCoeff(), pts.col(1).minCoeff(), pts.col(1).maxCoeff()};
    const double px = std::max(1e-12, 0.05 * (b.x_max - b.x_min)), py = std::max(1e-12, 0.05 * (b.y_max - b.y_min));
    return {b.x_min - px, b.x_max + px, b.y_min - py, b.y_max + py};
}

json density_json(const Eigen::MatrixXd& pts, std::size_t bins, const Bounds& bd) {
    const auto d = forecast::density_2d(pts, bins, bd.x_min, bd.x_max, bd.y_min, bd.y_max);
    return {{"bins", d.bins}, {"x_min", d.x_min}, {"x_max", d.x_max},
            {"y_min", d.y_min}, {"y_max", d.y_max}, {"cells", d.cells}};
}

/// Per pass, horizon x 2 projected points.
json trajectories_json(const Eigen::MatrixXd& pts, std::size_t passes, std::size_t horizon) {
    json out = json::array();
    for (std::size_t t = 0; t < passes; ++t)
        out.push_back(matrix_rows(pts.middleRows(static_cast<Eigen::Index>(t * horizon), static_cast<Eigen::Index>(horizon))));
    return out;
}

json projection_header(const forecast::PhaseProjection& p, const std::string& group) {
    return {{"group", group},
            {"variables", organ_groups().at(group)},
            {"components", 2},
            {"center", std::vector<double>(p.center.data(), p.center.data() + p.center.size())},
            {"loadings", matrix_rows(p.loadings)},
            {"explained", p.explained}};
}

void check_bins(std::size_t bins) {
    if (bins < 2 || bins > 400) throw ApiError(422, "invalid_query", "bins must lie in [2, 400]", {"bins must lie in [2, 400]"});
}

}  // namespace

json phase_projection(const forecast::TrajectoryBundle& bundle, const std::string& group, std::size_t bins) {
    check_bins(bins);
    const auto cols = group_columns(group);
    const auto data = group_rows(bundle, cols);
    const auto p = fit_projection(data, group);
    json j = projection_header(p, group);
    j["passes"] = bundle.passes;
    j["steps"] = bundle.horizon;
    j["trajectories"] = trajectories_json(p.projected, bundle.passes, bundle.horizon);
    j["density"] = density_json(p.projected, bins, padded_bounds(p.projected));
    return j;
}

// ---------------------------------------------------------------------------
// TwinService

TwinService::TwinService(ServiceConfig config) : config_(std::move(config)), store_(config_.data_dir) {
    if (config_.workers == 0) throw ContractError("the service needs at least one worker");
    fs::create_directories(config_.data_dir / "scenarios");
    auto load_dir = [&](const fs::path& dir, const std::string& source) {
        if (!fs::is_directory(dir)) return;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            auto s = physio::load_scenario(f);
            if (s.id.empty()) s.id = f.stem().string();
            scenarios_[s.id] = s;
            scenario_source_[s.id] = source;
        }
    };
    load_dir(config_.fixture_dir, "fixture");
    load_dir(config_.data_dir / "scenarios", "user");

    for (const auto& r : store_.list()) {
        if (r.kind != "forecast") continue;
        if (r.status == RunStatus::pending) queue_.push_back(r.id);
        if (r.status == RunStatus::running)
            store_.transition(r.id, RunStatus::failed, {}, "interrupted by a service restart");
    }
    for (std::size_t i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

TwinService::~TwinService() {
    {
        std::lock_guard lock(q_mu_);
        stopping_ = true;
    }
    q_cv_.notify_all();
    for (auto& w : workers_) w.join();
}

fs::path TwinService::checkpoint_path() const {
    return config_.checkpoint.value_or(config_.data_dir / "models" / "gnn.json");
}

json TwinService::list_scenarios() const {
    std::lock_guard lock(scen_mu_);
    json items = json::array();
    for (const auto& [id, s] : scenarios_)
        items.push_back({{"id", id}, {"name", s.name}, {"description", s.description}, {"source", scenario_source_.at(id)}});
    return {{"schema_version", kSchemaVersion}, {"scenarios", items}};
}

physio::Scenario TwinService::scenario(const std::string& id) const {
    std::lock_guard lock(scen_mu_);
    const auto it = scenarios_.find(id);
    if (it == scenarios_.end()) throw ApiError(404, "scenario_not_found", "no scenario '" + id + "'");
    return it->second;
}

json TwinService::get_scenario(const std::string& id) const {
    const auto s = scenario(id);
    std::lock_guard lock(scen_mu_);
    return {{"schema_version", kSchemaVersion}, {"source", scenario_source_.at(id)}, {"scenario", physio::to_json(s)}};
}

json TwinService::create_scenario(const json& body) {
    physio::Scenario s;
    try {
        s = physio::scenario_from_json(body);
    } catch (const std::exception& e) {
        throw ApiError(422, "invalid_scenario", e.what(), {e.what()});
    }
    auto v = s.violations();
    if (s.id.empty()) v.insert(v.begin(), "id is required");
    for (char c : s.id) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
            v.push_back("id may only contain letters, digits, '_' and '-'");
            break;
        }
    }
    if (!v.empty()) throw ApiError(422, "invalid_scenario", "scenario has " + std::to_string(v.size()) + " problem(s)", v);

    std::lock_guard lock(scen_mu_);
    if (scenarios_.count(s.id)) throw ApiError(409, "scenario_exists", "scenario '" + s.id + "' already exists");
    const auto path = config_.data_dir / "scenarios" / (s.id + ".json");
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        out << physio::to_json(s).dump(2) << '\n';
        out.flush();
        if (!out) throw RuntimeFailure("cannot write " + tmp);
    }
    fs::rename(tmp, path);
    scenarios_[s.id] = s;
    scenario_source_[s.id] = "user";
    return {{"schema_version", kSchemaVersion}, {"source", "user"}, {"scenario", physio::to_json(s)}};
}

RunRecord TwinService::submit_forecast(const json& body) {
    std::vector<std::string> v;
    auto req = InterventionRequest::from_json(body, v);
    if (!v.empty()) throw ApiError(422, "invalid_request", "request has " + std::to_string(v.size()) + " problem(s)", v);
    const auto s = scenario(req.scenario_id);
    if (!fs::exists(checkpoint_path()))
        throw ApiError(422, "missing_checkpoint",
                       "no trained forecaster at " + checkpoint_path().string() + "; run train-gnn first");
    const std::uint64_t seed = req.seed.value_or(s.seed);
    req.seed = seed;
    // The snapshot carries the scenario itself so the run can be replayed
    // even if the scenario set changes later.
    json config{{"request", req.to_json()}, {"scenario", physio::to_json(s)}};
    auto rec = store_.create("forecast", config, seed);
    {
        std::lock_guard lock(q_mu_);
        queue_.push_back(rec.id);
    }
    q_cv_.notify_one();
    return rec;
}

void TwinService::worker_loop() {
    for (;;) {
        std::string id;
        {
            std::unique_lock lock(q_mu_);
            q_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            id = queue_.front();
            queue_.pop_front();
        }
        execute(id);
        { std::lock_guard lock(q_mu_); }
        done_cv_.notify_all();
    }
}

void TwinService::execute(const std::string& id) {
    try {
        store_.transition(id, RunStatus::running);
    } catch (const std::exception&) {
        return;
    }
    try {
        const auto rec = *store_.get(id);
        std::vector<std::string> v;
        const auto req = InterventionRequest::from_json(rec.config.at("request"), v);
        if (!v.empty()) throw DataError("stored request is invalid: " + v.front());
        const auto scen = physio::scenario_from_json(rec.config.at("scenario"));
        std::ifstream in(checkpoint_path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        const auto model_sha = sha256_hex(ss.str());
        const auto model = gn::load_model(checkpoint_path());
        const auto files = execute_forecast(scen, req, model, model_sha, config_.rollout_workers);
        std::map<std::string, std::string> artifacts;
        for (const auto& [name, bytes] : files) artifacts[name] = store_.put_artifact(bytes);
        store_.transition(id, RunStatus::done, artifacts);
    } catch (const std::exception& e) {
        try {
            store_.transition(id, RunStatus::failed, {}, e.what());
        } catch (const std::exception&) {
        }
    }
}

RunRecord TwinService::get_run(const std::string& id) const {
    const auto r = store_.get(id);
    if (!r) throw ApiError(404, "run_not_found", "no run '" + id + "'");
    return *r;
}

json TwinService::list_runs() const {
    json items = json::array();
    for (const auto& r : store_.list()) items.push_back(r.to_json());
    return {{"schema_version", kSchemaVersion}, {"runs", items}};
}

RunRecord TwinService::require_done(const std::string& id) const {
    const auto r = get_run(id);
    if (r.status != RunStatus::done)
        throw ApiError(409, "run_not_done", "run " + id + " is " + std::string(to_string(r.status)));
    return r;
}

forecast::TrajectoryBundle TwinService::load_bundle(const RunRecord& r) const {
    return forecast::bundle_from_json(json::parse(store_.read_artifact(r.artifacts.at("bundle.json"))));
}

json TwinService::bundle(const std::string& id) const {
    const auto r = require_done(id);
    json j = json::parse(store_.read_artifact(r.artifacts.at("summary.json")));
    j["run_id"] = id;
    return j;
}

json TwinService::phase(const std::string& id, const std::string& group, std::size_t bins) const {
    const auto r = require_done(id);
    json j = phase_projection(load_bundle(r), group, bins);
    j["schema_version"] = kSchemaVersion;
    j["run_id"] = id;
    return j;
}

json TwinService::compare(const json& body) const {
    std::vector<std::string> v;
    std::vector<std::string> ids;
    if (!body.is_object() || !body.contains("run_ids") || !body.at("run_ids").is_array()) {
        v.push_back("run_ids must be an array of run ids");
    } else {
        for (const auto& x : body.at("run_ids")) {
            if (x.is_string()) ids.push_back(x.get<std::string>());
            else v.push_back("run_ids entries must be strings");
        }
        if (ids.size() < 2) v.push_back("compare needs at least two run ids");
    }
    std::optional<std::string> group;
    std::size_t bins = 40;
    if (body.is_object()) {
        for (const auto& [k, x] : body.items())
            if (k != "run_ids" && k != "group" && k != "bins") v.push_back("unknown field '" + k + "'");
        if (body.contains("group")) {
            if (body.at("group").is_string()) group = body.at("group").get<std::string>();
            else v.push_back("group must be a string");
        }
        if (body.contains("bins")) {
            if (body.at("bins").is_number_integer() && body.at("bins").get<long long>() > 0) bins = body.at("bins").get<std::size_t>();
            else v.push_back("bins must be a positive integer");
        }
    }
    if (!v.empty()) throw ApiError(422, "invalid_request", "compare request is invalid", v);
    if (group) group_columns(*group);
    check_bins(bins);

    std::vector<RunRecord> runs;
    for (const auto& id : ids) runs.push_back(require_done(id));
    std::vector<json> summaries;
    for (const auto& r : runs) summaries.push_back(json::parse(store_.read_artifact(r.artifacts.at("summary.json"))));
    const auto& first = summaries.front();
    for (std::size_t i = 1; i < summaries.size(); ++i) {
        const auto& s = summaries[i];
        if (s.at("dt") != first.at("dt") || s.at("summary").at("steps") != first.at("summary").at("steps"))
            throw ApiError(422, "step_grid_mismatch", "runs " + ids.front() + " and " + ids[i] + " use different step grids",
                           {"all compared runs need the same dt and horizon"});
    }
    std::vector<double> offsets;
    const double dt = first.at("dt").get<double>();
    const std::size_t steps = first.at("summary").at("steps").get<std::size_t>();
    for (std::size_t s = 1; s <= steps; ++s) offsets.push_back(static_cast<double>(s) * dt);

    json out{{"schema_version", kSchemaVersion}, {"dt", dt}, {"steps", steps}, {"offsets", offsets}};
    json items = json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        items.push_back({{"run_id", ids[i]},
                         {"scenario_id", summaries[i].at("scenario_id")},
                         {"t0", summaries[i].at("t0")},
                         {"times", summaries[i].at("times")},
                         {"summary", summaries[i].at("summary")}});
    }
    out["runs"] = items;

    if (group) {
        // One projection fitted on all runs together so the overlays share axes.
        const auto cols = group_columns(*group);
        std::vector<forecast::TrajectoryBundle> bundles;
        Eigen::Index total = 0;
        for (const auto& r : runs) {
            bundles.push_back(load_bundle(r));
            total += static_cast<Eigen::Index>(bundles.back().passes * bundles.back().horizon);
        }
        Eigen::MatrixXd all(total, static_cast<Eigen::Index>(cols.size()));
        Eigen::Index at = 0;
        for (const auto& b : bundles) {
            const auto m = group_rows(b, cols);
            all.middleRows(at, m.rows()) = m;
            at += m.rows();
        }
        const auto p = fit_projection(all, *group);
        const auto bd = padded_bounds(p.projected);
        json phase = projection_header(p, *group);
        json per = json::array();
        at = 0;
        for (std::size_t i = 0; i < bundles.size(); ++i) {
            const auto rows = static_cast<Eigen::Index>(bundles[i].passes * bundles[i].horizon);
            const Eigen::MatrixXd pts = p.projected.middleRows(at, rows);
            at += rows;
            per.push_back({{"run_id", ids[i]},
                           {"trajectories", trajectories_json(pts, bundles[i].passes, bundles[i].horizon)},
                           {"density", density_json(pts, bins, bd)}});
        }
        phase["runs"] = per;
        out["phase"] = phase;
    }
    return out;
}

RunRecord TwinService::wait(const std::string& id, double timeout_s) const {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    std::unique_lock lock(q_mu_);
    for (;;) {
        const auto r = get_run(id);
        if (r.status == RunStatus::done || r.status == RunStatus::failed) return r;
        if (done_cv_.wait_until(lock, deadline) == std::cv_status::timeout) return get_run(id);
    }
}

}  // namespace dtwin::service
