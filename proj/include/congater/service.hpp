// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "congater/checkpoint.hpp"
#include "congater/config.hpp"
#include "congater/data.hpp"
#include "congater/evaluation.hpp"
#include "json.hpp"

namespace congater {

struct HttpResponse {
  int status = 200;
  /// Serialized JSON body.
  std::string body;
};

/// Structured request error carried as {code, message, field?}.
struct ApiError {
  int status;
  std::string code;
  std::string message;
  std::string field;

  nlohmann::json to_json() const;
};

struct ServedModel {
  std::string name;
  std::shared_ptr<const Checkpoint> checkpoint;
  /// Classification: probe training split and evaluation split.
  std::vector<Example> probe_train;
  std::vector<Example> eval;
  /// Ranking: evaluation queries.
  std::vector<RankingExample> rank_eval;
};

/// Loaded checkpoints and cached sweeps. Request handlers never modify a
/// checkpoint; only the sweep cache is written, under a lock.
class ServiceState {
 public:
  explicit ServiceState(SweepOptions sweep_defaults = {});

  void add_model(ServedModel model);
  /// Loads every <name>.ckpt in `dir` together with its bundled
  /// <name>.probe_train.jsonl and <name>.eval.jsonl when present.
  void load_directory(const std::filesystem::path& dir);

  std::vector<std::string> model_names() const;
  const ServedModel* find(const std::string& name) const;

  HttpResponse models() const;
  HttpResponse predict(const std::string& body) const;
  HttpResponse sweep(const std::string& body);
  HttpResponse rank(const std::string& body) const;
  /// Routes by method and path; unknown routes give 404.
  HttpResponse handle(const std::string& method, const std::string& path, const std::string& body);

  std::size_t cached_sweeps() const;

 private:
  std::map<std::string, ServedModel> models_;
  SweepOptions sweep_defaults_;
  mutable std::mutex cache_mutex_;
  std::map<std::string, std::string> sweep_cache_;
};

/// Blocking HTTP front end over a ServiceState.
class HttpServer {
 public:
  HttpServer(ServiceState& state, std::string cors_origin = "*");
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds host:port (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace congater
