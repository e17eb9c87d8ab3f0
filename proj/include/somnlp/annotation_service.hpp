#pragma once

// JSON-over-HTTP front end for a Campaign.
//
//   GET  /items/next?annotator=ID   200 item | 204 nothing left | 404 unknown annotator
//   POST /labels                    201 stored record | 409 duplicate | 422 invalid
//   GET  /progress                  per-annotator counts
//   GET  /agreement                 resolution summary, kappa, per-item pairs
//   GET  /export?task=T             JSONL; T is fakenews, toxicity or toxicity_multilabel

#include <string>

#include "httplib.h"
#include "json.hpp"
#include "somnlp/annotation.hpp"

namespace somnlp::annotation {

class Service {
 public:
  explicit Service(Campaign& campaign) : campaign_(campaign) { routes(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Blocks until stop().
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  /// Binds an ephemeral port and returns it; follow with listen_after_bind().
  int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }

  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  httplib::Server& server() noexcept { return server_; }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& what) {
    send_json(res, status, {{"error", what}});
  }

  void routes() {
    server_.Get("/items/next", [this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("annotator")) return send_error(res, 400, "missing annotator parameter");
      const auto who = req.get_param_value("annotator");
      const auto& a = campaign_.annotators();
      if (who != a[0] && who != a[1]) return send_error(res, 404, "unknown annotator " + who);
      const auto item = campaign_.next_item(who);
      if (!item) {
        res.status = 204;
        return;
      }
      send_json(res, 200, to_json(*item));
    });

    server_.Post("/labels", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error&) {
        return send_error(res, 400, "body is not JSON");
      }
      try {
        auto r = record_from_json(body);
        r.timestamp.clear();  // the server clock is authoritative
        send_json(res, 201, to_json(campaign_.submit(std::move(r))));
      } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
      } catch (const ValidationError& e) {
        send_error(res, 422, e.what());
      } catch (const IoError& e) {
        send_error(res, 500, e.what());
      }
    });

    server_.Get("/progress", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, to_json(campaign_.progress()));
    });

    server_.Get("/agreement", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, agreement_report(campaign_));
    });

    server_.Get("/export", [this](const httplib::Request& req, httplib::Response& res) {
      const auto t = req.get_param_value("task");
      const bool multi = t == "toxicity_multilabel";
      if (t != "fakenews" && t != "toxicity" && !multi)
        return send_error(res, 400, "task must be fakenews, toxicity or toxicity_multilabel");
      const auto files = export_dataset(campaign_, multi ? Task::toxicity : task_from_string(t));
      res.status = 200;
      res.set_header("Content-Disposition", "attachment; filename=\"" + t + ".jsonl\"");
      res.set_content(task::examples_jsonl(multi ? files.multilabel : files.binary, multi), "application/x-ndjson");
    });

    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });
  }

  Campaign& campaign_;
  httplib::Server server_;
};

}  // namespace somnlp::annotation
