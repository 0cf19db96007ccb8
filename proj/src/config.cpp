// SPDX-License-Identifier: Apache-2.0
#include "congater/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace congater {

using nlohmann::json;

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

// Reads keys from one JSON object and remembers which were consumed so the
// remaining ones can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw ConfigError(key_path(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v->is_number_integer()) throw ConfigError(key_path(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0) {
            throw ConfigError(key_path(key), "expected a nonnegative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw ConfigError(key_path(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw ConfigError(key_path(key), "expected a string");
      }
      out = v->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(key_path(key), e.what());
    }
  }

  template <typename Fn>
  void parse(const std::string& key, Fn&& fn) {
    const json* v = find(key);
    if (!v) return;
    try {
      fn(*v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(key_path(key), e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json section_or_empty(const json& doc, const char* name) {
  auto it = doc.find(name);
  return it == doc.end() ? json::object() : *it;
}

template <typename Fn>
void validated(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

json to_json(const EncoderConfig& c) {
  json attrs = json::array();
  for (const auto& a : c.attributes) attrs.push_back({{"name", a.name}, {"classes", a.classes}, {"kind", to_string(a.kind)}});
  return {{"architecture", to_string(c.architecture)},
          {"task", to_string(c.task)},
          {"vocab_size", c.vocab_size},
          {"width", c.width},
          {"blocks", c.blocks},
          {"heads", c.heads},
          {"ff_width", c.ff_width},
          {"max_length", c.max_length},
          {"bottleneck_factor", c.bottleneck_factor},
          {"task_classes", c.task_classes},
          {"attributes", attrs},
          {"adversary_ensemble", c.adversary_ensemble},
          {"adversary_hidden", c.adversary_hidden}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  Section s(j, "encoder");
  s.parse("architecture", [&](const json& v) { c.architecture = parse_architecture(v.get<std::string>()); });
  s.parse("task", [&](const json& v) { c.task = parse_task_kind(v.get<std::string>()); });
  s.get("vocab_size", c.vocab_size);
  s.get("width", c.width);
  s.get("blocks", c.blocks);
  s.get("heads", c.heads);
  s.get("ff_width", c.ff_width);
  s.get("max_length", c.max_length);
  s.get("bottleneck_factor", c.bottleneck_factor);
  s.get("task_classes", c.task_classes);
  s.get("adversary_ensemble", c.adversary_ensemble);
  s.get("adversary_hidden", c.adversary_hidden);
  s.parse("attributes", [&](const json& v) {
    for (const auto& a : v) {
      AttributeSpec spec;
      spec.name = a.at("name").get<std::string>();
      spec.classes = a.at("classes").get<std::size_t>();
      spec.kind = parse_module_kind(a.value("kind", std::string("congater")));
      c.attributes.push_back(spec);
    }
  });
  s.finish();
  validated("encoder", [&] { c.validate(); });
  return c;
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("", "configuration must be a JSON object");
  {
    Section top(doc, "");
    for (const char* name : {"encoder", "data", "training", "losses", "evaluation", "service"}) top.find(name);
    top.finish();
  }
  RunConfig rc;

  // data
  {
    const json j = section_or_empty(doc, "data");
    Section s(j, "data");
    auto& d = rc.data;
    s.get("dir", rc.data_dir);
    s.get("n_examples", d.n_examples);
    s.get("vocab_size", d.vocab_size);
    s.get("task_classes", d.task_classes);
    s.get("rho_corr", d.rho_corr);
    s.get("marker_share", d.marker_share);
    s.get("topic_share", d.topic_share);
    s.get("topic_rate", d.topic_rate);
    s.get("min_length", d.min_length);
    s.get("max_length", d.max_length);
    s.get("markers_per_example", d.markers_per_example);
    s.get("attribute_skew", d.attribute_skew);
    s.get("n_queries", d.n_queries);
    s.get("candidates_per_query", d.candidates_per_query);
    s.get("relevant_per_query", d.relevant_per_query);
    s.get("query_length", d.query_length);
    s.get("background_size", d.background_size);
    s.get("doc_marker_rate", d.doc_marker_rate);
    s.get("max_doc_markers", d.max_doc_markers);
    s.get("seed", d.seed);
    s.parse("attributes", [&](const json& v) {
      d.attributes.clear();
      for (const auto& a : v) {
        Section as(a, "data.attributes");
        SynthAttribute sa;
        as.get("name", sa.name);
        as.get("classes", sa.classes);
        as.find("kind");
        as.finish();
        d.attributes.push_back(sa);
      }
    });
    s.finish();
    validated("data", [&] { d.validate(); });
  }

  // encoder
  {
    const json j = section_or_empty(doc, "encoder");
    Section s(j, "encoder");
    auto& e = rc.encoder;
    ModuleKind module = ModuleKind::congater;
    s.parse("architecture", [&](const json& v) { e.architecture = parse_architecture(v.get<std::string>()); });
    s.parse("task", [&](const json& v) { e.task = parse_task_kind(v.get<std::string>()); });
    s.parse("module", [&](const json& v) { module = parse_module_kind(v.get<std::string>()); });
    s.get("width", e.width);
    s.get("blocks", e.blocks);
    s.get("heads", e.heads);
    s.get("ff_width", e.ff_width);
    s.get("max_length", e.max_length);
    s.get("bottleneck_factor", e.bottleneck_factor);
    s.get("adversary_ensemble", e.adversary_ensemble);
    s.get("adversary_hidden", e.adversary_hidden);
    s.get("seed", rc.model_seed);
    s.finish();
    e.vocab_size = rc.data.vocab_size;
    e.task_classes = rc.data.task_classes;
    e.attributes.clear();
    const json data_attrs = section_or_empty(doc, "data").value("attributes", json::array());
    for (std::size_t i = 0; i < rc.data.attributes.size(); ++i) {
      ModuleKind kind = module;
      if (i < data_attrs.size() && data_attrs[i].contains("kind")) {
        validated("data.attributes.kind", [&] { kind = parse_module_kind(data_attrs[i]["kind"].get<std::string>()); });
      }
      e.attributes.push_back({rc.data.attributes[i].name, rc.data.attributes[i].classes, kind});
    }
    validated("encoder", [&] { e.validate(); });
  }

  // training
  {
    const json j = section_or_empty(doc, "training");
    Section s(j, "training");
    auto& t = rc.training;
    s.parse("regime", [&](const json& v) { t.regime = parse_regime(v.get<std::string>()); });
    s.get("train_epochs", t.epochs_task);
    s.get("adv_epochs", t.epochs_attr);
    s.get("batch_size", t.batch_size);
    s.get("task_lr", t.task_lr);
    s.get("adv_lr", t.adv_lr);
    s.get("weight_decay", t.weight_decay);
    s.get("dropout", t.dropout);
    s.get("cosine_decay", t.cosine_decay);
    s.get("attributes", t.attributes);
    s.get("seed", t.seed);
    s.finish();
  }

  // losses
  {
    const json j = section_or_empty(doc, "losses");
    Section s(j, "losses");
    auto& l = rc.training.loss;
    l.kind = rc.encoder.task;
    s.parse("lambda", [&](const json& v) {
      if (v.is_number()) {
        l.default_lambda = v.get<double>();
      } else if (v.is_object()) {
        for (auto it = v.begin(); it != v.end(); ++it) {
          if (!it->is_number()) throw ConfigError("losses.lambda." + it.key(), "expected a number");
          rc.encoder.attribute(it.key());
          l.lambda[it.key()] = it->get<double>();
        }
      } else {
        throw ConfigError("losses.lambda", "expected a number or an object of numbers");
      }
    });
    s.get("warmup_epochs", l.warmup_epochs);
    s.finish();
  }
  validated("training", [&] {
    rc.training.validate();
    for (const auto& a : rc.training.attributes) rc.encoder.attribute(a);
  });

  // evaluation
  {
    const json j = section_or_empty(doc, "evaluation");
    Section s(j, "evaluation");
    auto& ev = rc.evaluation;
    s.get("grid", ev.grid);
    s.get("attributes", ev.attributes);
    s.get("probe_epochs", ev.probe.epochs);
    s.get("probe_lr", ev.probe.lr);
    s.get("n_probes", ev.probe.n_probes);
    s.get("probe_batch_size", ev.probe.batch_size);
    s.get("probe_hidden", ev.probe.hidden);
    s.get("probe_seed", ev.probe.seed);
    s.get("run_probes", ev.run_probes);
    s.get("k", ev.k);
    s.get("threads", ev.threads);
    s.finish();
    if (ev.attributes.empty()) {
      for (const auto& a : rc.encoder.attributes) {
        if (a.kind == ModuleKind::congater) ev.attributes.push_back(a.name);
      }
    }
    if (rc.encoder.task == TaskKind::ranking) ev.run_probes = false;
    validated("evaluation.grid", [&] { validate_grid(ev.grid); });
    validated("evaluation", [&] {
      ev.probe.validate();
      if (ev.k < 1) throw std::invalid_argument("k must be at least 1");
      for (const auto& a : ev.attributes) rc.encoder.attribute(a);
    });
  }

  // service
  {
    const json j = section_or_empty(doc, "service");
    Section s(j, "service");
    auto& sv = rc.service;
    s.get("host", sv.host);
    s.get("port", sv.port);
    s.get("model_dir", sv.model_dir);
    s.get("cors_origin", sv.cors_origin);
    s.get("sweep_threads", sv.sweep_threads);
    s.finish();
    if (sv.port < 0 || sv.port > 65535) throw ConfigError("service.port", "port must lie in [0,65535]");
  }
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("", "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(o, "override must look like section.key=value");
    const std::string path = o.substr(0, eq), raw = o.substr(eq + 1);
    json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = raw;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError(path, "empty key in override path");
      if (!node->is_object()) throw ConfigError(path, "override path crosses a non-object value");
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      if (node->is_null()) *node = json::object();
      start = dot + 1;
    }
  }
}

json RunConfig::to_json() const {
  json attrs = json::array();
  for (const auto& a : encoder.attributes) {
    attrs.push_back({{"name", a.name}, {"classes", a.classes}, {"kind", to_string(a.kind)}});
  }
  json lambda = json::object();
  for (const auto& [k, v] : training.loss.lambda) lambda[k] = v;
  const auto& d = data;
  return {
      {"encoder",
       {{"architecture", to_string(encoder.architecture)},
        {"task", to_string(encoder.task)},
        {"width", encoder.width},
        {"blocks", encoder.blocks},
        {"heads", encoder.heads},
        {"ff_width", encoder.ff_width},
        {"max_length", encoder.max_length},
        {"bottleneck_factor", encoder.bottleneck_factor},
        {"adversary_ensemble", encoder.adversary_ensemble},
        {"adversary_hidden", encoder.adversary_hidden},
        {"seed", model_seed}}},
      {"data",
       {{"dir", data_dir},
        {"n_examples", d.n_examples},
        {"vocab_size", d.vocab_size},
        {"task_classes", d.task_classes},
        {"attributes", attrs},
        {"rho_corr", d.rho_corr},
        {"marker_share", d.marker_share},
        {"topic_share", d.topic_share},
        {"topic_rate", d.topic_rate},
        {"min_length", d.min_length},
        {"max_length", d.max_length},
        {"markers_per_example", d.markers_per_example},
        {"attribute_skew", d.attribute_skew},
        {"n_queries", d.n_queries},
        {"candidates_per_query", d.candidates_per_query},
        {"relevant_per_query", d.relevant_per_query},
        {"query_length", d.query_length},
        {"background_size", d.background_size},
        {"doc_marker_rate", d.doc_marker_rate},
        {"max_doc_markers", d.max_doc_markers},
        {"seed", d.seed}}},
      {"training",
       {{"regime", to_string(training.regime)},
        {"train_epochs", training.epochs_task},
        {"adv_epochs", training.epochs_attr},
        {"batch_size", training.batch_size},
        {"task_lr", training.task_lr},
        {"adv_lr", training.adv_lr},
        {"weight_decay", training.weight_decay},
        {"dropout", training.dropout},
        {"cosine_decay", training.cosine_decay},
        {"attributes", training.attributes},
        {"seed", training.seed}}},
      {"losses",
       {{"lambda", training.loss.lambda.empty() ? json(training.loss.default_lambda) : lambda},
        {"warmup_epochs", training.loss.warmup_epochs}}},
      {"evaluation",
       {{"grid", evaluation.grid},
        {"attributes", evaluation.attributes},
        {"probe_epochs", evaluation.probe.epochs},
        {"probe_lr", evaluation.probe.lr},
        {"n_probes", evaluation.probe.n_probes},
        {"probe_batch_size", evaluation.probe.batch_size},
        {"probe_hidden", evaluation.probe.hidden},
        {"probe_seed", evaluation.probe.seed},
        {"run_probes", evaluation.run_probes},
        {"k", evaluation.k},
        {"threads", evaluation.threads}}},
      {"service",
       {{"host", service.host},
        {"port", service.port},
        {"model_dir", service.model_dir},
        {"cors_origin", service.cors_origin},
        {"sweep_threads", service.sweep_threads}}},
  };
}

std::string RunConfig::hash() const {
  const std::string canonical = to_json().dump();
  return hex64(fnv1a64(canonical.data(), canonical.size()));
}

}  // namespace congater
