#pragma once

// JSON routes over TwinService.
//
//   GET  /health
//   GET  /scenarios                 POST /scenarios
//   GET  /scenarios/{id}
//   POST /runs/forecast  -> 202 {run_id}
//   GET  /runs                      GET  /runs/{id}
//   GET  /runs/{id}/bundle
//   GET  /runs/{id}/phase?group=heart&bins=40
//   POST /runs/compare   {"run_ids": [...], "group"?: "heart"}
//
// Every body carries schema_version. Errors: {"error": {code, message, violations?}}.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "dtwin/service.hpp"

namespace httplib {
class Server;
}

namespace dtwin::service {

class HttpApi {
public:
    /// `static_dir`, when set, is served at "/" (API routes take precedence).
    explicit HttpApi(TwinService& service, std::optional<std::filesystem::path> static_dir = std::nullopt);
    ~HttpApi();
    HttpApi(const HttpApi&) = delete;
    HttpApi& operator=(const HttpApi&) = delete;

    /// Binds to host:port (0 picks a free port) and returns the bound port.
    int bind(const std::string& host = "127.0.0.1", int port = 0);
    /// Blocks serving requests until stop().
    void listen();
    void stop();
    httplib::Server& server() { return *server_; }

private:
    TwinService& service_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace dtwin::service
