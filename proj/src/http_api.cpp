#include "dtwin/http_api.hpp"

#include <httplib.h>

namespace dtwin::service {

using nlohmann::json;

namespace {

void send(httplib::Response& res, int status, json body) {
    if (body.is_object() && !body.contains("schema_version")) body["schema_version"] = kSchemaVersion;
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) { send(res, e.status(), e.to_json()); }

json parse_body(const httplib::Request& req) {
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw ApiError(422, "invalid_json", "request body is not valid JSON", {e.what()});
    }
}

/// Runs a handler and maps every exception onto a JSON error response.
template <class F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ApiError& e) {
            send_error(res, e);
        } catch (const std::exception& e) {
            send_error(res, ApiError(500, "internal_error", e.what()));
        }
    };
}

std::size_t bins_param(const httplib::Request& req) {
    if (!req.has_param("bins")) return 40;
    try {
        std::size_t pos = 0;
        const auto s = req.get_param_value("bins");
        const auto v = std::stoul(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ApiError(422, "invalid_query", "bins must be an integer", {"bins must be an integer"});
    }
}

}  // namespace

HttpApi::HttpApi(TwinService& service, std::optional<std::filesystem::path> static_dir)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
    auto& s = *server_;
    s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
    s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    s.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) { send(res, 200, {{"status", "ok"}}); }));

    s.Get("/scenarios", guarded([this](const httplib::Request&, httplib::Response& res) {
              send(res, 200, service_.list_scenarios());
          }));
    s.Post("/scenarios", guarded([this](const httplib::Request& req, httplib::Response& res) {
               send(res, 201, service_.create_scenario(parse_body(req)));
           }));
    s.Get(R"(/scenarios/([A-Za-z0-9_\-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send(res, 200, service_.get_scenario(req.matches[1]));
          }));

    s.Post("/runs/forecast", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto r = service_.submit_forecast(parse_body(req));
               send(res, 202, {{"run_id", r.id}, {"status", to_string(r.status)}, {"run", r.to_json()}});
           }));
    s.Post("/runs/compare", guarded([this](const httplib::Request& req, httplib::Response& res) {
               send(res, 200, service_.compare(parse_body(req)));
           }));
    s.Get("/runs", guarded([this](const httplib::Request&, httplib::Response& res) { send(res, 200, service_.list_runs()); }));
    s.Get(R"(/runs/([A-Za-z0-9_\-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send(res, 200, {{"run", service_.get_run(req.matches[1]).to_json()}});
          }));
    s.Get(R"(/runs/([A-Za-z0-9_\-]+)/bundle)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send(res, 200, service_.bundle(req.matches[1]));
          }));
    s.Get(R"(/runs/([A-Za-z0-9_\-]+)/phase)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              const std::string group = req.has_param("group") ? req.get_param_value("group") : "heart";
              send(res, 200, service_.phase(req.matches[1], group, bins_param(req)));
          }));

    if (static_dir) {
        if (!s.set_mount_point("/", static_dir->string()))
            throw ContractError("static directory " + static_dir->string() + " does not exist");
    }
    s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.status == 404 && res.body.empty())
            send_error(res, ApiError(404, "not_found", "no route for " + req.method + " " + req.path));
    });
}

HttpApi::~HttpApi() { stop(); }

int HttpApi::bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw RuntimeFailure("cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpApi::listen() { server_->listen_after_bind(); }

void HttpApi::stop() {
    if (server_ && server_->is_running()) server_->stop();
}

}  // namespace dtwin::service
