#pragma once

// HTTP/JSON session service for interactive refinement. Each session owns a
// warmed-up copy of the backbone; concurrent submissions to one session are
// rejected rather than queued. Array payloads travel as base64 of
// little-endian int32 (labels, indices) or float32 (positions, colors,
// entropy).

#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipcs/encoding.hpp"
#include "ipcs/errors.hpp"
#include "ipcs/eval.hpp"
#include "ipcs/refine.hpp"
#include "ipcs/scene.hpp"
#include "ipcs/segnet.hpp"

// After the Eigen-based headers: <resolv.h> defines a `_res` macro.
#include <httplib.h>

namespace ipcs {

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

class SessionService {
 public:
  SessionService(NetworkParams backbone, RefineConfig defaults, std::vector<LabeledCloud> scenes)
      : backbone_(std::move(backbone)), defaults_(std::move(defaults)) {
    for (auto& s : scenes) {
      const auto name = s.name;
      scenes_.emplace(name, std::move(s));
    }
  }

  ServiceResponse list_scenes() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, cloud] : scenes_)
      arr.push_back({{"name", name}, {"num_points", cloud.size()}, {"has_ground_truth", cloud.has_labels()}});
    return {200, {{"scenes", arr}}};
  }

  ServiceResponse list_classes() const {
    nlohmann::json arr = nlohmann::json::array();
    const auto palette = default_palette();
    for (std::size_t c = 0; c < backbone_.config.num_classes; ++c) {
      const std::string name = c < class_names().size() ? class_names()[c] : "class_" + std::to_string(c);
      nlohmann::json color = nlohmann::json::array();
      if (c < palette.size()) color = {palette[c][0], palette[c][1], palette[c][2]};
      arr.push_back({{"id", c}, {"name", name}, {"color", color}});
    }
    return {200, {{"classes", arr}}};
  }

  /// Body: {"scene": name} or {"ply": text}, with optional "variant" (one of
  /// the standard variant names) and "config" (refinement overrides).
  ServiceResponse create_session(const std::string& body) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const std::exception& e) {
      return error(422, std::string("malformed JSON: ") + e.what());
    }
    LabeledCloud cloud;
    try {
      if (req.contains("scene")) {
        const auto name = req.at("scene").get<std::string>();
        const auto it = scenes_.find(name);
        if (it == scenes_.end()) return error(404, "unknown scene '" + name + "'");
        cloud = it->second;
      } else if (req.contains("ply")) {
        std::istringstream is(req.at("ply").get<std::string>());
        cloud = load_ply(is, req.value("name", std::string("upload")));
        validate(cloud, backbone_.config.num_classes);
      } else {
        return error(422, "request needs 'scene' or 'ply'");
      }
    } catch (const Error& e) {
      return error(422, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(422, e.what());
    }

    RefineConfig config = defaults_;
    try {
      if (req.contains("variant")) {
        const auto name = req.at("variant").get<std::string>();
        bool found = false;
        for (const auto& v : standard_variants(defaults_))
          if (v.name == name) config = v.config, found = true;
        if (!found) return error(422, "unknown variant '" + name + "'");
      }
      if (req.contains("config")) config = refine_config_from_json(req.at("config"), config);
    } catch (const Error& e) {
      return error(422, e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(422, e.what());
    }

    auto entry = std::make_shared<Entry>();
    try {
      entry->live = make_session(std::move(cloud), backbone_, config);
      warm_up(entry->live);
    } catch (const Error& e) {
      return error(422, e.what());
    }
    entry->snapshot = entry->live;
    std::string id;
    {
      std::lock_guard lock(registry_mutex_);
      id = "s" + std::to_string(++next_id_);
      sessions_.emplace(id, entry);
    }
    auto out = describe(id, entry->live, true);
    return {201, std::move(out)};
  }

  ServiceResponse state(const std::string& id) {
    auto entry = find(id);
    if (!entry) return error(404, "unknown session '" + id + "'");
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error(409, "session is busy");
    return {200, describe(id, entry->live, false)};
  }

  /// Body: {"clicks": [{"index": i, "label": m}, ...]}. Responds with the
  /// points whose labels changed.
  ServiceResponse submit_clicks(const std::string& id, const std::string& body) {
    auto entry = find(id);
    if (!entry) return error(404, "unknown session '" + id + "'");
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error(409, "session is busy");

    std::vector<InteractionRecord> clicks;
    std::vector<std::string> problems;
    try {
      const auto req = nlohmann::json::parse(body);
      const auto& arr = req.at("clicks");
      if (!arr.is_array() || arr.empty()) return error(422, "'clicks' must be a non-empty array");
      for (std::size_t k = 0; k < arr.size(); ++k) {
        const auto& c = arr[k];
        if (!c.contains("index") || !c.at("index").is_number_integer() || !c.contains("label") ||
            !c.at("label").is_number_integer()) {
          problems.push_back("click " + std::to_string(k) + ": needs integer 'index' and 'label'");
          continue;
        }
        const auto idx = c.at("index").get<long long>();
        if (idx < 0) {
          problems.push_back("click " + std::to_string(k) + ": index " + std::to_string(idx) + " is negative");
          continue;
        }
        clicks.push_back({static_cast<std::size_t>(idx), c.at("label").get<int>(), 0, ClickSource::Human});
      }
    } catch (const std::exception& e) {
      return error(422, std::string("malformed request: ") + e.what());
    }
    for (auto& p : click_errors(entry->live, clicks)) problems.push_back(std::move(p));
    if (!problems.empty()) {
      auto r = error(422, "invalid clicks");
      r.body["errors"] = problems;
      return r;
    }

    RefineResult result;
    try {
      result = refine(entry->live, clicks);
    } catch (const Error& e) {
      return error(422, e.what());
    }
    const auto& seg = entry->live.seg;
    std::vector<std::int32_t> idx, labels;
    std::vector<float> entropy;
    for (const auto i : result.changed) {
      idx.push_back(static_cast<std::int32_t>(i));
      labels.push_back(seg.labels[i]);
      entropy.push_back(seg.entropies[i]);
    }
    nlohmann::json out;
    out["id"] = id;
    out["interactions"] = entry->live.interaction_counter;
    out["changed"] = {{"count", idx.size()},
                      {"indices", pack_base64<std::int32_t>(idx)},
                      {"labels", pack_base64<std::int32_t>(labels)},
                      {"entropy", pack_base64<float>(entropy)}};
    out["trace"] = nlohmann::json::array();
    for (const auto& t : result.trace) out["trace"].push_back(to_json(t));
    out["warnings"] = result.warnings;
    add_metrics(out, entry->live);
    return {200, std::move(out)};
  }

  /// Restores the post-warm-up state and drops all clicks.
  ServiceResponse reset(const std::string& id) {
    auto entry = find(id);
    if (!entry) return error(404, "unknown session '" + id + "'");
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error(409, "session is busy");
    entry->live = entry->snapshot;
    return {200, describe(id, entry->live, false)};
  }

  ServiceResponse export_session(const std::string& id) {
    auto entry = find(id);
    if (!entry) return error(404, "unknown session '" + id + "'");
    std::unique_lock lock(entry->mutex, std::try_to_lock);
    if (!lock.owns_lock()) return error(409, "session is busy");
    return {200, ipcs::export_session(entry->live)};
  }

  /// Holds a session's lock for the lifetime of the returned object, so
  /// tests can provoke the busy response deterministically.
  std::unique_lock<std::mutex> hold(const std::string& id) {
    auto entry = find(id);
    if (!entry) throw NotFoundError("unknown session '" + id + "'");
    return std::unique_lock(entry->mutex);
  }

  void bind(httplib::Server& server) {
    auto reply = [](httplib::Response& res, const ServiceResponse& r) {
      res.status = r.status;
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/scenes", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, list_scenes()); });
    server.Get("/classes", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, list_classes()); });
    server.Post("/sessions", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, create_session(req.body));
    });
    server.Get(R"(/sessions/([^/]+)/state)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, state(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/clicks)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, submit_clicks(req.matches[1], req.body));
    });
    server.Post(R"(/sessions/([^/]+)/reset)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, reset(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/export)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, export_session(req.matches[1]));
    });
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.status = 204;
    });
  }

 private:
  struct Entry {
    std::mutex mutex;
    RefinementSession live;
    RefinementSession snapshot;
  };

  static ServiceResponse error(int status, const std::string& message) {
    return {status, {{"error", message}, {"errors", nlohmann::json::array({message})}}};
  }

  std::shared_ptr<Entry> find(const std::string& id) {
    std::lock_guard lock(registry_mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  static void add_metrics(nlohmann::json& out, const RefinementSession& s) {
    if (s.cloud.labels) out["miou"] = miou(s.seg.labels, *s.cloud.labels, s.params.config.num_classes);
    else out["miou"] = nullptr;
  }

  static nlohmann::json describe(const std::string& id, const RefinementSession& s, bool with_geometry) {
    nlohmann::json out;
    out["id"] = id;
    out["scene"] = s.cloud.name;
    out["num_points"] = s.cloud.size();
    out["num_classes"] = s.params.config.num_classes;
    out["interactions"] = s.interaction_counter;
    out["labels"] = pack_labels(s.seg.labels);
    out["entropy"] = pack_base64<float>(s.seg.entropies);
    out["clicks"] = nlohmann::json::array();
    for (const auto& c : s.click_log) out["clicks"].push_back(to_json(c));
    out["has_ground_truth"] = s.cloud.has_labels();
    out["config"] = to_json(s.config);
    if (with_geometry) {
      std::vector<float> colors(3 * s.cloud.size());
      for (std::size_t i = 0; i < s.cloud.size(); ++i) {
        const auto c = s.cloud.color(i);
        std::copy(c.begin(), c.end(), colors.begin() + static_cast<std::ptrdiff_t>(3 * i));
      }
      out["positions"] = pack_base64<float>(s.cloud.positions);
      out["colors"] = pack_base64<float>(colors);
    }
    add_metrics(out, s);
    return out;
  }

  NetworkParams backbone_;
  RefineConfig defaults_;
  std::map<std::string, LabeledCloud> scenes_;
  std::mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::uint64_t next_id_ = 0;
};

}  // namespace ipcs
