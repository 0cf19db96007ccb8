// SPDX-License-Identifier: Apache-2.0
#include "congater/service.hpp"

#include <algorithm>
#include <cmath>

#include "congater/ops.hpp"
#include "httplib.h"

namespace congater {

using nlohmann::json;

json ApiError::to_json() const {
  json j = {{"code", code}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  return j;
}

namespace {

HttpResponse ok(const json& body) { return {200, body.dump()}; }
HttpResponse error_response(const ApiError& e) { return {e.status, e.to_json().dump()}; }

ApiError invalid(std::string field, std::string message) {
  return {422, "invalid_request", std::move(message), std::move(field)};
}

json parse_body(const std::string& body) {
  json j = json::parse(body, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ApiError{400, "bad_json", "request body is not valid JSON", ""};
  if (!j.is_object()) throw ApiError{400, "bad_json", "request body must be a JSON object", ""};
  return j;
}

const ServedModel& require_model(const ServiceState& state, const json& req) {
  auto it = req.find("model");
  if (it == req.end() || !it->is_string()) throw invalid("model", "model must be a string");
  const ServedModel* m = state.find(it->get<std::string>());
  if (!m) throw ApiError{404, "not_found", "unknown model '" + it->get<std::string>() + "'", "model"};
  return *m;
}

TokenSequence parse_tokens(const json& v, const std::string& field, const EncoderConfig& cfg) {
  if (!v.is_array() || v.empty()) throw invalid(field, "tokens must be a nonempty array of integers");
  TokenSequence out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer()) throw invalid(field + "[" + std::to_string(i) + "]", "token must be an integer");
    const auto t = v[i].get<long long>();
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw invalid(field + "[" + std::to_string(i) + "]",
                    "token " + std::to_string(t) + " outside vocabulary of size " + std::to_string(cfg.vocab_size));
    }
    out.push_back(static_cast<TokenId>(t));
  }
  return out;
}

OmegaMap parse_omega(const json& req, const EncoderConfig& cfg) {
  OmegaMap out;
  for (const auto& a : cfg.attributes) {
    if (a.kind == ModuleKind::congater) out[a.name] = 0.0;
  }
  auto it = req.find("omega");
  if (it == req.end() || it->is_null()) return out;
  if (!it->is_object()) throw invalid("omega", "omega must be an object of attribute sensitivities");
  for (auto kv = it->begin(); kv != it->end(); ++kv) {
    const std::string field = "omega." + kv.key();
    const auto known = std::find_if(cfg.attributes.begin(), cfg.attributes.end(),
                                    [&](const AttributeSpec& a) { return a.name == kv.key(); });
    if (known == cfg.attributes.end()) throw invalid(field, "unknown attribute '" + kv.key() + "'");
    if (!kv->is_number()) throw invalid(field, "sensitivity must be a number");
    const double w = kv->get<double>();
    if (!(w >= 0.0 && w <= 1.0)) throw invalid(field, "sensitivity " + kv->dump() + " outside [0,1]");
    if (known->kind == ModuleKind::congater) out[kv.key()] = w;
  }
  return out;
}

std::vector<double> parse_grid(const json& req, const std::vector<double>& fallback) {
  auto it = req.find("grid");
  if (it == req.end() || it->is_null()) return fallback;
  if (!it->is_array()) throw invalid("grid", "grid must be an array of numbers");
  std::vector<double> grid;
  for (const auto& v : *it) {
    if (!v.is_number()) throw invalid("grid", "grid must be an array of numbers");
    grid.push_back(v.get<double>());
  }
  try {
    validate_grid(grid);
  } catch (const std::exception& e) {
    throw invalid("grid", e.what());
  }
  return grid;
}

std::vector<std::string> parse_attributes(const json& req, const EncoderConfig& cfg) {
  std::vector<std::string> names;
  if (auto it = req.find("attributes"); it != req.end() && !it->is_null()) {
    if (!it->is_array()) throw invalid("attributes", "attributes must be an array of names");
    for (const auto& v : *it) {
      if (!v.is_string()) throw invalid("attributes", "attributes must be an array of names");
      names.push_back(v.get<std::string>());
    }
  } else if (auto a = req.find("attribute"); a != req.end() && !a->is_null()) {
    if (!a->is_string()) throw invalid("attribute", "attribute must be a string");
    names.push_back(a->get<std::string>());
  } else {
    for (const auto& spec : cfg.attributes) {
      if (spec.kind == ModuleKind::congater) names.push_back(spec.name);
    }
  }
  if (names.empty()) throw invalid("attributes", "model has no attribute with a sensitivity");
  for (const auto& n : names) {
    const auto spec = std::find_if(cfg.attributes.begin(), cfg.attributes.end(),
                                   [&](const AttributeSpec& a) { return a.name == n; });
    if (spec == cfg.attributes.end()) throw invalid("attributes", "unknown attribute '" + n + "'");
    if (spec->kind != ModuleKind::congater) throw invalid("attributes", "attribute '" + n + "' has no sensitivity");
  }
  return names;
}

template <typename Fn>
HttpResponse guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ApiError& e) {
    return error_response(e);
  } catch (const std::exception& e) {
    return error_response({500, "internal", e.what(), ""});
  }
}

}  // namespace

ServiceState::ServiceState(SweepOptions sweep_defaults) : sweep_defaults_(std::move(sweep_defaults)) {}

void ServiceState::add_model(ServedModel model) {
  if (!model.checkpoint) throw std::invalid_argument("served model needs a checkpoint");
  const std::string name = model.name;
  models_.insert_or_assign(name, std::move(model));
}

void ServiceState::load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("model directory " + dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ckpt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    ServedModel m;
    m.name = path.stem().string();
    m.checkpoint = std::make_shared<Checkpoint>(load_checkpoint(path));
    const auto stem = dir / m.name;
    const auto eval_path = std::filesystem::path(stem.string() + ".eval.jsonl");
    const auto probe_path = std::filesystem::path(stem.string() + ".probe_train.jsonl");
    if (m.checkpoint->model.config().task == TaskKind::classification) {
      if (std::filesystem::exists(eval_path)) m.eval = load_classification_jsonl(eval_path);
      if (std::filesystem::exists(probe_path)) m.probe_train = load_classification_jsonl(probe_path);
    } else if (std::filesystem::exists(eval_path)) {
      m.rank_eval = load_ranking_jsonl(eval_path, m.checkpoint->meta.wordlists);
    }
    add_model(std::move(m));
  }
}

std::vector<std::string> ServiceState::model_names() const {
  std::vector<std::string> out;
  for (const auto& [name, m] : models_) out.push_back(name);
  return out;
}

const ServedModel* ServiceState::find(const std::string& name) const {
  auto it = models_.find(name);
  return it == models_.end() ? nullptr : &it->second;
}

std::size_t ServiceState::cached_sweeps() const {
  std::lock_guard lock(cache_mutex_);
  return sweep_cache_.size();
}

HttpResponse ServiceState::models() const {
  json out = json::array();
  for (const auto& [name, m] : models_) {
    const auto& cfg = m.checkpoint->model.config();
    json attrs = json::array();
    for (const auto& a : cfg.attributes) {
      attrs.push_back({{"name", a.name},
                       {"classes", a.classes},
                       {"kind", to_string(a.kind)},
                       {"omega_range", a.kind == ModuleKind::congater ? json::array({0.0, 1.0}) : json(nullptr)}});
    }
    out.push_back({{"name", name},
                   {"task", to_string(cfg.task)},
                   {"attributes", attrs},
                   {"classes", cfg.task == TaskKind::classification ? json(cfg.task_classes) : json(nullptr)}});
  }
  return ok(out);
}

HttpResponse ServiceState::predict(const std::string& body) const {
  return guarded([&] {
    const json req = parse_body(body);
    const ServedModel& m = require_model(*this, req);
    const EncoderModel& model = m.checkpoint->model;
    if (model.config().task != TaskKind::classification) {
      throw ApiError{409, "mode_mismatch", "model '" + m.name + "' is a ranking model; use /rank", "model"};
    }
    auto it = req.find("tokens");
    if (it == req.end()) throw invalid("tokens", "tokens are required");
    const std::vector<TokenSequence> batch{parse_tokens(*it, "tokens", model.config())};
    const OmegaMap omegas = parse_omega(req, model.config());
    NoGradGuard no_grad;
    const Tensor probs = model.predict(model.encode(batch, omegas));
    const auto p = probs.values();
    const int label = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    return ok({{"model", m.name},
               {"omega", omegas},
               {"probs", std::vector<double>(p.begin(), p.end())},
               {"label", label},
               {"uncertainty", uncertainty(p)}});
  });
}

HttpResponse ServiceState::sweep(const std::string& body) {
  return guarded([&] {
    const json req = parse_body(body);
    const ServedModel& m = require_model(*this, req);
    const EncoderModel& model = m.checkpoint->model;
    SweepOptions options = sweep_defaults_;
    options.attributes = parse_attributes(req, model.config());
    options.grid = parse_grid(req, sweep_defaults_.grid);

    json key = {m.name, m.checkpoint->file_hash, options.grid, options.attributes};
    const std::string cache_key = key.dump();
    {
      std::lock_guard lock(cache_mutex_);
      if (auto hit = sweep_cache_.find(cache_key); hit != sweep_cache_.end()) return HttpResponse{200, hit->second};
    }
    SweepReport report;
    if (model.config().task == TaskKind::classification) {
      if (m.eval.empty()) throw ApiError{409, "no_eval_data", "model '" + m.name + "' has no bundled evaluation split", "model"};
      options.run_probes = options.run_probes && !m.probe_train.empty();
      report = omega_sweep(model, m.probe_train, m.eval, options);
    } else {
      if (m.rank_eval.empty()) throw ApiError{409, "no_eval_data", "model '" + m.name + "' has no bundled evaluation queries", "model"};
      options.background = m.checkpoint->meta.background_neutrality;
      report = omega_sweep(model, m.rank_eval, options);
    }
    json out = report.to_json();
    out["model"] = m.name;
    std::string text = out.dump();
    std::lock_guard lock(cache_mutex_);
    auto [pos, inserted] = sweep_cache_.emplace(cache_key, std::move(text));
    return HttpResponse{200, pos->second};
  });
}

HttpResponse ServiceState::rank(const std::string& body) const {
  return guarded([&] {
    const json req = parse_body(body);
    const ServedModel& m = require_model(*this, req);
    const EncoderModel& model = m.checkpoint->model;
    if (model.config().task != TaskKind::ranking) {
      throw ApiError{409, "mode_mismatch", "model '" + m.name + "' is a classification model; use /predict", "model"};
    }
    auto q = req.find("query");
    if (q == req.end()) throw invalid("query", "query tokens are required");
    const TokenSequence query = parse_tokens(*q, "query", model.config());
    auto c = req.find("candidates");
    if (c == req.end() || !c->is_array()) throw invalid("candidates", "candidates must be an array");
    if (c->size() < 2) throw invalid("candidates", "at least two candidates are required");
    std::vector<TokenSequence> docs;
    std::vector<double> neutrality;
    std::vector<int> relevance;
    bool all_relevance = true;
    for (std::size_t i = 0; i < c->size(); ++i) {
      const json& cand = (*c)[i];
      const std::string field = "candidates[" + std::to_string(i) + "]";
      if (!cand.is_object() || !cand.contains("tokens")) throw invalid(field, "candidate needs tokens");
      docs.push_back(parse_tokens(cand["tokens"], field + ".tokens", model.config()));
      neutrality.push_back(doc_neutrality(docs.back(), m.checkpoint->meta.wordlists));
      if (cand.contains("relevance") && !cand["relevance"].is_null()) {
        if (!cand["relevance"].is_number_integer()) throw invalid(field + ".relevance", "relevance must be an integer");
        relevance.push_back(cand["relevance"].get<int>());
      } else {
        all_relevance = false;
        relevance.push_back(0);
      }
    }
    const OmegaMap omegas = parse_omega(req, model.config());
    Tensor scores;
    {
      NoGradGuard no_grad;
      scores = model.score_candidates(query, docs, omegas);
    }
    const auto order = rank_order(scores.values());
    json ranking = json::array();
    std::vector<int> ranked_rel;
    std::vector<double> ranked_neu;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const auto j = order[r];
      json item = {{"index", j}, {"rank", r + 1}, {"score", scores.values()[j]}, {"neutrality", neutrality[j]}};
      if (all_relevance) item["relevance"] = relevance[j];
      ranking.push_back(item);
      ranked_rel.push_back(relevance[j]);
      ranked_neu.push_back(neutrality[j]);
    }
    json out = {{"model", m.name}, {"omega", omegas}, {"ranking", ranking}};
    if (all_relevance) {
      const auto& bg = m.checkpoint->meta.background_neutrality;
      out["mrr10"] = mrr_at_k({ranked_rel}, 10);
      out["nfairr10"] = nfairr_at_k({ranked_neu}, bg.empty() ? std::span<const double>(neutrality) : std::span<const double>(bg), 10);
    }
    return ok(out);
  });
}

HttpResponse ServiceState::handle(const std::string& method, const std::string& path, const std::string& body) {
  if (method == "GET" && path == "/models") return models();
  if (method == "POST" && path == "/predict") return predict(body);
  if (method == "POST" && path == "/sweep") return sweep(body);
  if (method == "POST" && path == "/rank") return rank(body);
  return error_response({404, "not_found", "no route for " + method + " " + path, ""});
}

struct HttpServer::Impl {
  Impl(ServiceState& s, std::string c) : state(s), cors(std::move(c)) {}
  ServiceState& state;
  std::string cors;
  httplib::Server server;
};

HttpServer::HttpServer(ServiceState& state, std::string cors_origin)
    : impl_(std::make_unique<Impl>(state, std::move(cors_origin))) {
  auto& srv = impl_->server;
  Impl* impl = impl_.get();
  auto reply = [impl](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.set_default_headers({{"Access-Control-Allow-Origin", impl->cors},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Get("/models", [impl, reply](const httplib::Request&, httplib::Response& res) { reply(res, impl->state.models()); });
  srv.Post("/predict", [impl, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, impl->state.predict(req.body));
  });
  srv.Post("/sweep", [impl, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, impl->state.sweep(req.body));
  });
  srv.Post("/rank", [impl, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, impl->state.rank(req.body));
  });
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const ApiError e{res.status, res.status == 404 ? "not_found" : "http_error",
                     "no route for " + req.method + " " + req.path, ""};
    res.set_content(e.to_json().dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw std::runtime_error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace congater
