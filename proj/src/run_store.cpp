#include "dtwin/run_store.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

namespace dtwin::service {

namespace fs = std::filesystem;

std::string_view to_string(RunStatus s) {
    switch (s) {
        case RunStatus::pending: return "pending";
        case RunStatus::running: return "running";
        case RunStatus::done: return "done";
        case RunStatus::failed: return "failed";
    }
    return "?";
}

RunStatus parse_run_status(std::string_view s) {
    if (s == "pending") return RunStatus::pending;
    if (s == "running") return RunStatus::running;
    if (s == "done") return RunStatus::done;
    if (s == "failed") return RunStatus::failed;
    throw ContractError("unknown run status '" + std::string(s) + "'");
}

nlohmann::json RunRecord::to_json() const {
    return {{"id", id},       {"kind", kind},           {"status", to_string(status)},
            {"config", config}, {"seed", seed},         {"artifacts", artifacts},
            {"created", created}, {"updated", updated}, {"error", error}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    r.id = j.at("id").get<std::string>();
    r.kind = j.at("kind").get<std::string>();
    r.status = parse_run_status(j.at("status").get<std::string>());
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    r.created = j.at("created").get<std::string>();
    r.updated = j.at("updated").get<std::string>();
    r.error = j.at("error").get<std::string>();
    return r;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw RuntimeFailure("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string utc_now_iso() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

namespace {

std::uint64_t id_number(const std::string& id) {
    if (id.rfind("run-", 0) != 0) return 0;
    try {
        return std::stoull(id.substr(4));
    } catch (const std::exception&) {
        return 0;
    }
}

}  // namespace

RunStore::RunStore(fs::path data_dir) : dir_(std::move(data_dir)) {
    fs::create_directories(dir_ / "objects");
    const auto index = dir_ / "index.jsonl";
    std::ifstream in(index);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto r = RunRecord::from_json(nlohmann::json::parse(line));
            next_ = std::max(next_, id_number(r.id) + 1);
            runs_[r.id] = std::move(r);
        } catch (const std::exception& e) {
            throw IndexCorruptedError("run index " + index.string() + " is corrupted at line " + std::to_string(lineno) +
                                      " (" + e.what() + "). Every line is a full record snapshot, so deleting the "
                                      "damaged line and any after it restores the last good state; move the file "
                                      "aside to start with an empty registry.");
        }
    }
}

void RunStore::append(const RunRecord& r) {
    std::ofstream out(dir_ / "index.jsonl", std::ios::app);
    out << r.to_json().dump() << '\n';
    out.flush();
    if (!out) throw RuntimeFailure("cannot append to " + (dir_ / "index.jsonl").string());
}

RunRecord RunStore::create(const std::string& kind, nlohmann::json config, std::uint64_t seed) {
    if (std::find(kRunKinds.begin(), kRunKinds.end(), kind) == kRunKinds.end())
        throw ContractError("unknown run kind '" + kind + "'");
    std::lock_guard lock(mu_);
    RunRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%06llu", static_cast<unsigned long long>(next_++));
    r.id = buf;
    r.kind = kind;
    r.config = std::move(config);
    r.seed = seed;
    r.created = r.updated = utc_now_iso();
    append(r);
    runs_[r.id] = r;
    return r;
}

RunRecord RunStore::transition(const std::string& id, RunStatus to, std::map<std::string, std::string> artifacts,
                               std::string error) {
    std::lock_guard lock(mu_);
    const auto it = runs_.find(id);
    if (it == runs_.end()) throw LookupError("no run " + id);
    RunRecord r = it->second;
    const auto from = r.status;
    const bool ok = (from == RunStatus::pending && to == RunStatus::running) ||
                    (from == RunStatus::pending && to == RunStatus::failed) ||
                    (from == RunStatus::running && (to == RunStatus::done || to == RunStatus::failed));
    if (!ok)
        throw ContractError("run " + id + ": cannot go from " + std::string(to_string(from)) + " to " +
                            std::string(to_string(to)));
    if (to == RunStatus::done && artifacts.empty()) throw ContractError("run " + id + ": done runs need artifacts");
    r.status = to;
    for (auto& [k, v] : artifacts) r.artifacts[k] = std::move(v);
    r.error = std::move(error);
    r.updated = utc_now_iso();
    append(r);
    it->second = r;
    return r;
}

std::optional<RunRecord> RunStore::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = runs_.find(id);
    if (it == runs_.end()) return std::nullopt;
    return it->second;
}

std::vector<RunRecord> RunStore::list() const {
    std::lock_guard lock(mu_);
    std::vector<RunRecord> out;
    for (const auto& [id, r] : runs_) out.push_back(r);
    return out;
}

fs::path RunStore::artifact_path(const std::string& hash) const { return dir_ / "objects" / hash; }

std::string RunStore::put_artifact(std::string_view bytes) {
    const auto hash = sha256_hex(bytes);
    const auto path = artifact_path(hash);
    std::lock_guard lock(mu_);
    if (fs::exists(path)) return hash;
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw RuntimeFailure("cannot write artifact " + tmp);
    }
    fs::rename(tmp, path);
    return hash;
}

std::string RunStore::read_artifact(const std::string& hash) const {
    std::ifstream in(artifact_path(hash), std::ios::binary);
    if (!in) throw DataError("missing artifact " + hash);
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();
    if (sha256_hex(bytes) != hash) throw DataError("artifact " + hash + " does not match its hash");
    return bytes;
}

}  // namespace dtwin::service
