#pragma once

// Scenario management and forecast runs on a bounded background worker pool.
// The HTTP layer (http_api.hpp) is a thin mapping onto TwinService.

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dtwin/forecast.hpp"
#include "dtwin/graph_net.hpp"
#include "dtwin/physio.hpp"
#include "dtwin/run_store.hpp"

namespace dtwin::service {

inline constexpr int kSchemaVersion = 1;

/// An error with an HTTP status and a machine-readable code.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, std::string code, std::string message, std::vector<std::string> violations = {})
        : std::runtime_error(std::move(message)), status_(status), code_(std::move(code)),
          violations_(std::move(violations)) {}
    int status() const noexcept { return status_; }
    const std::string& code() const noexcept { return code_; }
    const std::vector<std::string>& violations() const noexcept { return violations_; }
    nlohmann::json to_json() const;

private:
    int status_;
    std::string code_;
    std::vector<std::string> violations_;
};

/// Exposome values override the scenario's (absolute values, same units).
struct InterventionRequest {
    std::string scenario_id;
    nlohmann::json exposome = nlohmann::json::object();
    std::size_t horizon = 100;  // forecast steps
    std::size_t passes = 100;   // MC dropout passes T
    std::optional<std::uint64_t> seed;  // default: the scenario seed
    forecast::MaskMode masks = forecast::MaskMode::per_step;
    double level = 0.95;

    nlohmann::json to_json() const;
    /// Collects every problem instead of stopping at the first.
    static InterventionRequest from_json(const nlohmann::json& j, std::vector<std::string>& violations);
};

/// Named variable groups for phase projections. "heart" uses the chamber
/// pressures derived from the forecast volumes.
const std::map<std::string, std::vector<std::string>>& organ_groups();

/// Physiological variables followed by the derived chamber pressures
/// p_ra, p_rv, p_la, p_lv.
std::vector<std::string> forecast_variable_names();

/// Simulates the scenario under the intervention, forecasts `horizon` steps
/// from its last tau rows and returns the artifacts by name (manifest.json,
/// bundle.json, summary.json). Same inputs give the same bytes.
std::map<std::string, std::string> execute_forecast(const physio::Scenario& scenario, const InterventionRequest& req,
                                                    const gn::GnModel& model, const std::string& model_sha256,
                                                    std::size_t rollout_workers = 0);

/// The window the forecast starts from, in model units: tau rows x vars.
std::vector<double> forecast_window(const physio::Scenario& scenario, const physio::Exposome& exposome,
                                    const gn::GnModel& model);

/// PCA of all (pass, step) rows of the group's variables plus a density grid.
nlohmann::json phase_projection(const forecast::TrajectoryBundle& bundle, const std::string& group,
                                std::size_t bins = 40);

struct ServiceConfig {
    std::filesystem::path data_dir;
    std::filesystem::path fixture_dir = std::filesystem::path(DTWIN_FIXTURE_DIR) / "scenarios";
    std::optional<std::filesystem::path> checkpoint;  // default <data_dir>/models/gnn.json
    std::size_t workers = 2;
    std::size_t rollout_workers = 1;  // threads inside one forecast
};

class TwinService {
public:
    /// Loads scenarios and the run index. Pending runs are queued again;
    /// runs left "running" by a previous process are marked failed.
    explicit TwinService(ServiceConfig config);
    ~TwinService();
    TwinService(const TwinService&) = delete;
    TwinService& operator=(const TwinService&) = delete;

    const ServiceConfig& config() const { return config_; }
    std::filesystem::path checkpoint_path() const;
    RunStore& store() { return store_; }

    nlohmann::json list_scenarios() const;
    nlohmann::json get_scenario(const std::string& id) const;
    physio::Scenario scenario(const std::string& id) const;  // ApiError 404
    nlohmann::json create_scenario(const nlohmann::json& body);

    /// Validates, persists a pending record and enqueues it.
    RunRecord submit_forecast(const nlohmann::json& body);
    RunRecord get_run(const std::string& id) const;  // ApiError 404
    nlohmann::json list_runs() const;

    nlohmann::json bundle(const std::string& id) const;
    nlohmann::json phase(const std::string& id, const std::string& group, std::size_t bins = 40) const;
    /// {"run_ids": [a, b, ...], "group"?: name}. Runs must share the step grid.
    nlohmann::json compare(const nlohmann::json& body) const;

    /// Blocks until the run is done or failed, or the timeout passes.
    RunRecord wait(const std::string& id, double timeout_s = 600.0) const;

private:
    void worker_loop();
    void execute(const std::string& id);
    forecast::TrajectoryBundle load_bundle(const RunRecord& r) const;
    RunRecord require_done(const std::string& id) const;

    ServiceConfig config_;
    RunStore store_;

    mutable std::mutex scen_mu_;
    std::map<std::string, physio::Scenario> scenarios_;
    std::map<std::string, std::string> scenario_source_;  // id -> fixture | user

    mutable std::mutex q_mu_;
    mutable std::condition_variable q_cv_, done_cv_;
    std::deque<std::string> queue_;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

}  // namespace dtwin::service
