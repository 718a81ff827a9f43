#pragma once

// Run registry persisted as an append-only JSON-lines index plus a
// content-addressed artifact directory.
//
//   <data_dir>/index.jsonl        one full record snapshot per line; last wins
//   <data_dir>/objects/<sha256>   artifact bytes, write-once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtwin/errors.hpp"

namespace dtwin::service {

enum class RunStatus { pending, running, done, failed };
std::string_view to_string(RunStatus s);
RunStatus parse_run_status(std::string_view s);

inline const std::vector<std::string> kRunKinds{"simulate", "train-gnn", "forecast", "train-gan", "sample", "crosstalk"};

struct RunRecord {
    std::string id;
    std::string kind;
    RunStatus status = RunStatus::pending;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> artifacts;  // name -> sha256
    std::string created, updated;                   // ISO-8601 UTC
    std::string error;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
    bool operator==(const RunRecord&) const = default;
};

/// The index could not be parsed; the message says how to recover.
class IndexCorruptedError : public DataError {
public:
    using DataError::DataError;
};

std::string sha256_hex(std::string_view bytes);
std::string utc_now_iso();

/// Thread-safe. Every mutation is on disk (flushed) before the call returns.
class RunStore {
public:
    explicit RunStore(std::filesystem::path data_dir);

    const std::filesystem::path& data_dir() const { return dir_; }

    /// New pending record with the next id ("run-000001", ...).
    RunRecord create(const std::string& kind, nlohmann::json config, std::uint64_t seed);
    /// Moves a run forward (pending -> running -> done|failed). ContractError
    /// on a backward or repeated transition, or on done without artifacts.
    RunRecord transition(const std::string& id, RunStatus to, std::map<std::string, std::string> artifacts = {},
                         std::string error = {});

    std::optional<RunRecord> get(const std::string& id) const;
    std::vector<RunRecord> list() const;  // by id

    /// Stores bytes under their SHA-256 and returns the hash.
    std::string put_artifact(std::string_view bytes);
    /// DataError when missing or when the bytes no longer match the hash.
    std::string read_artifact(const std::string& hash) const;
    std::filesystem::path artifact_path(const std::string& hash) const;

private:
    void append(const RunRecord& r);

    std::filesystem::path dir_;
    mutable std::mutex mu_;
    std::map<std::string, RunRecord> runs_;
    std::uint64_t next_ = 1;
};

}  // namespace dtwin::service
