// SPDX-License-Identifier: Apache-2.0
// Command line entry point: synth, train, sweep, probe, rank-eval, serve, report.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "congater/checkpoint.hpp"
#include "congater/config.hpp"
#include "congater/data.hpp"
#include "congater/evaluation.hpp"
#include "congater/report.hpp"
#include "congater/service.hpp"
#include "congater/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace congater;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  bool json_output = false;
  std::string host;
  int port = -1;
  std::string omega_grid;
  std::string model;
  std::string model_dir;
  std::string input;
  std::vector<std::string> omegas;
};

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("", path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::vector<double> parse_grid_flag(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      grid.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--omega-grid", "'" + item + "' is not a number");
    }
  }
  try {
    validate_grid(grid);
  } catch (const std::exception& e) {
    throw ConfigError("--omega-grid", e.what());
  }
  return grid;
}

// Config from --config (or `fallback` when absent) with --set overrides applied.
RunConfig resolve_config(const Options& o, const json& fallback = json::object()) {
  json doc = o.config.empty() ? fallback : read_json_file(o.config);
  apply_overrides(doc, o.overrides);
  RunConfig rc = parse_run_config(doc);
  if (!o.omega_grid.empty()) rc.evaluation.grid = parse_grid_flag(o.omega_grid);
  return rc;
}

json artifact_meta(const RunConfig& rc) {
  return {{"config_hash", rc.hash()}, {"seed", rc.model_seed}, {"format_version", kCheckpointFormatVersion}};
}

void emit(const Options& o, const json& summary, const std::string& human) {
  if (o.json_output) {
    std::cout << summary.dump() << std::endl;
  } else {
    std::cout << human << std::endl;
  }
}

// ------------------------------------------------------------------ data

struct LoadedData {
  Splits<Example> cls;
  Splits<RankingExample> rank;
  std::vector<double> background;
  Wordlists wordlists;
};

std::vector<double> neutralities(const std::vector<TokenSequence>& docs, const Wordlists& w) {
  std::vector<double> out;
  for (const auto& d : docs) out.push_back(doc_neutrality(d, w));
  return out;
}

LoadedData load_data(const RunConfig& rc) {
  LoadedData d;
  const bool ranking = rc.encoder.task == TaskKind::ranking;
  if (rc.data_dir.empty()) {
    if (ranking) {
      auto ds = gen_retrieval(rc.data);
      d.rank = std::move(ds.splits);
      d.wordlists = std::move(ds.wordlists);
      d.background = neutralities(ds.background, d.wordlists);
    } else {
      auto ds = gen_classification(rc.data);
      d.cls = std::move(ds.splits);
      d.wordlists = std::move(ds.wordlists);
    }
    return d;
  }
  const fs::path dir = rc.data_dir;
  const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
  d.wordlists = load_wordlists(dir / "wordlists", vocab);
  if (ranking) {
    d.rank.train = load_ranking_jsonl(dir / "train.jsonl", d.wordlists);
    d.rank.val = load_ranking_jsonl(dir / "val.jsonl", d.wordlists);
    d.rank.test = load_ranking_jsonl(dir / "test.jsonl", d.wordlists);
    d.background = neutralities(load_documents_jsonl(dir / "background.jsonl"), d.wordlists);
  } else {
    d.cls.train = load_classification_jsonl(dir / "train.jsonl");
    d.cls.val = load_classification_jsonl(dir / "val.jsonl");
    d.cls.test = load_classification_jsonl(dir / "test.jsonl");
  }
  return d;
}

// ------------------------------------------------------------------ commands

int cmd_synth(const Options& o) {
  const RunConfig rc = resolve_config(o);
  if (o.out.empty()) throw ConfigError("--out", "synth needs an output directory");
  const fs::path dir = o.out;
  fs::create_directories(dir);
  json counts;
  if (rc.encoder.task == TaskKind::ranking) {
    const auto ds = gen_retrieval(rc.data);
    write_ranking_jsonl(dir / "train.jsonl", ds.splits.train);
    write_ranking_jsonl(dir / "val.jsonl", ds.splits.val);
    write_ranking_jsonl(dir / "test.jsonl", ds.splits.test);
    write_documents_jsonl(dir / "background.jsonl", ds.background);
    ds.vocab.save(dir / "vocab.txt");
    save_wordlists(dir / "wordlists", ds.wordlists, ds.vocab);
    counts = {{"train", ds.splits.train.size()}, {"val", ds.splits.val.size()}, {"test", ds.splits.test.size()},
              {"background", ds.background.size()}};
  } else {
    const auto ds = gen_classification(rc.data);
    write_classification_jsonl(dir / "train.jsonl", ds.splits.train);
    write_classification_jsonl(dir / "val.jsonl", ds.splits.val);
    write_classification_jsonl(dir / "test.jsonl", ds.splits.test);
    ds.vocab.save(dir / "vocab.txt");
    save_wordlists(dir / "wordlists", ds.wordlists, ds.vocab);
    counts = {{"train", ds.splits.train.size()}, {"val", ds.splits.val.size()}, {"test", ds.splits.test.size()}};
  }
  json manifest = artifact_meta(rc);
  manifest["seed"] = rc.data.seed;
  manifest["counts"] = counts;
  manifest["config"] = rc.to_json();
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  emit(o, {{"out", dir.string()}, {"counts", counts}}, "wrote dataset to " + dir.string());
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig rc = resolve_config(o);
  if (o.out.empty()) throw ConfigError("--out", "train needs a checkpoint path");
  fs::path ckpt = o.out;
  if (ckpt.extension() != ".ckpt") ckpt += ".ckpt";
  const LoadedData data = load_data(rc);
  EncoderModel model(rc.encoder, rc.model_seed);
  auto progress = [&](const EncoderModel&, const EpochRecord& r) {
    if (!o.json_output) {
      std::cerr << "epoch " << r.epoch << " " << r.phase << (r.attribute.empty() ? "" : ":" + r.attribute)
                << " task_loss=" << r.task_loss << " attr_loss=" << r.attr_loss << " (" << r.wall_seconds << " s)\n";
    }
    return std::map<std::string, double>{};
  };
  const RunLog log = rc.encoder.task == TaskKind::ranking ? train(model, data.rank.train, rc.training, progress)
                                                          : train(model, data.cls.train, rc.training, progress);
  CheckpointMeta meta;
  meta.seed = rc.model_seed;
  meta.config_hash = rc.hash();
  meta.provenance = {{"config", rc.to_json()}, {"run_log", log.to_json()}};
  meta.wordlists = data.wordlists;
  meta.background_neutrality = data.background;
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(model, meta, ckpt);

  const std::string stem = (ckpt.parent_path() / ckpt.stem()).string();
  json runlog = artifact_meta(rc);
  runlog["epochs"] = log.to_json();
  write_text(stem + ".runlog.json", runlog.dump(2) + "\n");
  if (rc.encoder.task == TaskKind::ranking) {
    write_ranking_jsonl(stem + ".eval.jsonl", data.rank.test);
  } else {
    write_classification_jsonl(stem + ".probe_train.jsonl", data.cls.train);
    write_classification_jsonl(stem + ".eval.jsonl", data.cls.test);
  }
  const auto& last = log.epochs.empty() ? EpochRecord{} : log.epochs.back();
  json summary = artifact_meta(rc);
  summary["checkpoint"] = ckpt.string();
  summary["epochs"] = log.epochs.size();
  summary["final_task_loss"] = last.task_loss;
  emit(o, summary, "wrote " + ckpt.string());
  return 0;
}

struct ModelBundle {
  Checkpoint ckpt;
  RunConfig rc;
  std::vector<Example> probe_train, eval;
  std::vector<RankingExample> rank_eval;
};

ModelBundle load_bundle(const Options& o) {
  if (o.model.empty()) throw ConfigError("--model", "a checkpoint path is required");
  fs::path path = o.model;
  Checkpoint ckpt = load_checkpoint(path);
  const json stored = ckpt.meta.provenance.value("config", json::object());
  RunConfig rc = resolve_config(o, stored);
  const std::string stem = (path.parent_path() / path.stem()).string();
  ModelBundle b{std::move(ckpt), std::move(rc), {}, {}, {}};
  if (b.ckpt.model.config().task == TaskKind::ranking) {
    b.rank_eval = load_ranking_jsonl(stem + ".eval.jsonl", b.ckpt.meta.wordlists);
  } else {
    b.eval = load_classification_jsonl(stem + ".eval.jsonl");
    if (fs::exists(stem + ".probe_train.jsonl")) b.probe_train = load_classification_jsonl(stem + ".probe_train.jsonl");
  }
  return b;
}

std::string strip_suffix(std::string s, const std::string& suffix) {
  if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
    s.resize(s.size() - suffix.size());
  }
  return s;
}

int cmd_sweep(const Options& o) {
  ModelBundle b = load_bundle(o);
  SweepOptions opts = b.rc.evaluation;
  SweepReport report;
  if (b.ckpt.model.config().task == TaskKind::ranking) {
    opts.run_probes = false;
    opts.background = b.ckpt.meta.background_neutrality;
    report = omega_sweep(b.ckpt.model, b.rank_eval, opts);
  } else {
    opts.run_probes = opts.run_probes && !b.probe_train.empty();
    report = omega_sweep(b.ckpt.model, b.probe_train, b.eval, opts);
  }
  json out = report.to_json();
  out["config_hash"] = b.ckpt.meta.config_hash;
  out["seed"] = b.ckpt.meta.seed;
  out["format_version"] = kCheckpointFormatVersion;
  const std::string prefix = strip_suffix(o.out.empty() ? "sweep" : o.out, ".json");
  write_text(prefix + ".json", out.dump(2) + "\n");
  write_text(prefix + ".csv", "# config_hash=" + b.ckpt.meta.config_hash + " seed=" + std::to_string(b.ckpt.meta.seed) +
                                  " format_version=" + std::to_string(kCheckpointFormatVersion) + "\n" + report.to_csv());
  if (o.json_output) {
    std::cout << out.dump() << std::endl;
  } else {
    std::cout << report.to_csv();
  }
  return 0;
}

OmegaMap parse_omega_flags(const std::vector<std::string>& flags) {
  OmegaMap out;
  for (const auto& f : flags) {
    const auto eq = f.find('=');
    if (eq == std::string::npos) throw ConfigError("--omega", "expected attribute=value, got '" + f + "'");
    try {
      out[f.substr(0, eq)] = std::stod(f.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("--omega", "'" + f.substr(eq + 1) + "' is not a number");
    }
  }
  return out;
}

int cmd_probe(const Options& o) {
  ModelBundle b = load_bundle(o);
  if (b.ckpt.model.config().task != TaskKind::classification) throw std::runtime_error("probing needs a classifier");
  if (b.probe_train.empty()) throw std::runtime_error("checkpoint has no bundled probe training split");
  OmegaMap omegas = parse_omega_flags(o.omegas);
  for (const auto& w : b.ckpt.model.check_omegas(omegas)) std::cerr << "warning: " << w << "\n";
  SweepOptions opts = b.rc.evaluation;
  opts.run_probes = true;
  const SweepRow row = evaluate_point(b.ckpt.model, b.probe_train, b.eval, omegas, opts);
  json probes = json::object();
  for (const auto& [name, p] : row.probes) probes[name] = {{"mean", p.mean}, {"std", p.std}, {"accuracies", p.accuracies}};
  json out = {{"omegas", omegas},
              {"task", row.task},
              {"probes", probes},
              {"config_hash", b.ckpt.meta.config_hash},
              {"seed", b.ckpt.meta.seed},
              {"format_version", kCheckpointFormatVersion}};
  write_text(o.out.empty() ? "probe.json" : o.out, out.dump(2) + "\n");
  std::ostringstream human;
  for (const auto& [name, p] : row.probes) human << name << ": " << p.mean << " +- " << p.std << "\n";
  emit(o, out, human.str());
  return 0;
}

int cmd_rank_eval(const Options& o) {
  ModelBundle b = load_bundle(o);
  if (b.ckpt.model.config().task != TaskKind::ranking) throw std::runtime_error("rank-eval needs a ranking model");
  SweepOptions opts = b.rc.evaluation;
  opts.run_probes = false;
  opts.background = b.ckpt.meta.background_neutrality;
  const SweepReport report = omega_sweep(b.ckpt.model, b.rank_eval, opts);
  json rows = json::array();
  std::ostringstream csv;
  csv << "# config_hash=" << b.ckpt.meta.config_hash << " seed=" << b.ckpt.meta.seed
      << " format_version=" << kCheckpointFormatVersion << "\n";
  for (const auto& a : report.attributes) csv << "omega_" << a << ',';
  csv << "mrr10,nfairr10\n";
  for (const auto& r : report.rows) {
    rows.push_back({{"omegas", r.omegas}, {"mrr10", *r.mrr10}, {"nfairr10", *r.nfairr10}});
    for (const auto& a : report.attributes) csv << r.omegas.at(a) << ',';
    csv << *r.mrr10 << ',' << *r.nfairr10 << '\n';
  }
  json out = {{"rows", rows},
              {"config_hash", b.ckpt.meta.config_hash},
              {"seed", b.ckpt.meta.seed},
              {"format_version", kCheckpointFormatVersion}};
  const std::string prefix = strip_suffix(o.out.empty() ? "rank_eval" : o.out, ".json");
  write_text(prefix + ".json", out.dump(2) + "\n");
  write_text(prefix + ".csv", csv.str());
  emit(o, out, csv.str());
  return 0;
}

HttpServer* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const Options& o) {
  const RunConfig rc = resolve_config(o);
  const std::string host = o.host.empty() ? rc.service.host : o.host;
  const int port = o.port >= 0 ? o.port : rc.service.port;
  const std::string dir = o.model_dir.empty() ? rc.service.model_dir : o.model_dir;
  SweepOptions defaults = rc.evaluation;
  defaults.threads = rc.service.sweep_threads;
  ServiceState state(defaults);
  state.load_directory(dir);
  HttpServer server(state, rc.service.cors_origin);
  const int bound = server.bind(host, port);
  emit(o, {{"host", host}, {"port", bound}, {"models", state.model_names()}},
       "serving " + std::to_string(state.model_names().size()) + " model(s) on http://" + host + ":" +
           std::to_string(bound));
  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  server.listen();
  g_server = nullptr;
  return 0;
}

int cmd_report(const Options& o) {
  if (o.input.empty()) throw ConfigError("--in", "report needs a sweep JSON file");
  const json report = read_json_file(o.input);
  const std::string svg = render_sweep_svg(report, fs::path(o.input).stem().string());
  const std::string out = o.out.empty() ? strip_suffix(o.input, ".json") + ".svg" : o.out;
  write_text(out, svg);
  emit(o, {{"out", out}}, "wrote " + out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-sensitivity (omega) controllable encoders: synthesis, training, sweeps and serving"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--set", o.overrides, "Override section.key=value (repeatable)");
    sub->add_option("--out", o.out, "Output path");
    sub->add_flag("--json", o.json_output, "Print a JSON summary to stdout");
  };
  auto* synth = app.add_subcommand("synth", "Write synthetic JSONL datasets");
  common(synth);
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  common(trn);
  auto* sweep = app.add_subcommand("sweep", "Evaluate a checkpoint over an omega grid");
  common(sweep);
  sweep->add_option("--model", o.model, "Checkpoint path")->required();
  sweep->add_option("--omega-grid", o.omega_grid, "Comma separated grid, e.g. 0,0.5,1");
  auto* probe = app.add_subcommand("probe", "Train attribute probes at fixed omega");
  common(probe);
  probe->add_option("--model", o.model, "Checkpoint path")->required();
  probe->add_option("--omega", o.omegas, "attribute=value (repeatable)");
  auto* rank = app.add_subcommand("rank-eval", "MRR@10 and NFaiRR@10 of a ranking checkpoint");
  common(rank);
  rank->add_option("--model", o.model, "Checkpoint path")->required();
  rank->add_option("--omega-grid", o.omega_grid, "Comma separated grid");
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  common(serve);
  serve->add_option("--host", o.host, "Listen address");
  serve->add_option("--port", o.port, "Listen port (0 picks a free port)");
  serve->add_option("--model-dir", o.model_dir, "Directory of .ckpt files");
  auto* report = app.add_subcommand("report", "Render a sweep JSON as an SVG chart");
  common(report);
  report->add_option("--in", o.input, "Sweep JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*trn) return cmd_train(o);
    if (*sweep) return cmd_sweep(o);
    if (*probe) return cmd_probe(o);
    if (*rank) return cmd_rank_eval(o);
    if (*serve) return cmd_serve(o);
    if (*report) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
