// SPDX-License-Identifier: Apache-2.0
#include "congater/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "congater/objectives.hpp"
#include "congater/ops.hpp"
#include "congater/training.hpp"

namespace congater {

using nlohmann::json;

namespace {

constexpr std::size_t kEmbedChunk = 256;

std::size_t infer_classes(std::span<const int> labels, std::size_t classes) {
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw std::out_of_range("negative label " + std::to_string(l));
    max_label = std::max(max_label, l);
  }
  const auto needed = static_cast<std::size_t>(max_label + 1);
  if (classes == 0) return needed;
  if (needed > classes) throw std::out_of_range("label " + std::to_string(max_label) + " outside " +
                                                std::to_string(classes) + " classes");
  return classes;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t r = probs.rows(), c = probs.cols();
  std::vector<int> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = probs.values().subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Tensor uniform_init(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

BalancedAccuracy balanced_accuracy(std::span<const int> preds, std::span<const int> labels, std::size_t classes) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("balanced_accuracy: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw std::invalid_argument("balanced_accuracy: no labels");
  classes = infer_classes(labels, classes);
  std::vector<std::size_t> hits(classes, 0), count(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++count[y];
    if (preds[i] == labels[i]) ++hits[y];
  }
  BalancedAccuracy out;
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) {
      out.excluded.push_back(static_cast<int>(c));
      continue;
    }
    total += static_cast<double>(hits[c]) / static_cast<double>(count[c]);
    ++present;
  }
  out.value = total / static_cast<double>(present);
  return out;
}

void ProbeConfig::validate() const {
  if (n_probes < 1) throw std::invalid_argument("n_probes must be at least 1");
  if (epochs < 0) throw std::invalid_argument("probe epochs must be nonnegative");
  if (!(lr > 0.0)) throw std::invalid_argument("probe lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("probe batch_size must be positive");
}

ProbeResult train_probes(const Tensor& train_embeddings, std::span<const int> train_labels,
                         const Tensor& eval_embeddings, std::span<const int> eval_labels, std::size_t classes,
                         const ProbeConfig& cfg) {
  cfg.validate();
  if (train_embeddings.rank() != 2 || eval_embeddings.rank() != 2 ||
      train_embeddings.cols() != eval_embeddings.cols()) {
    throw ShapeError("train_probes: embeddings " + shape_str(train_embeddings.shape()) + " and " +
                     shape_str(eval_embeddings.shape()) + " are incompatible");
  }
  if (train_labels.size() != train_embeddings.rows() || eval_labels.size() != eval_embeddings.rows()) {
    throw ShapeError("train_probes: label count does not match embedding rows");
  }
  classes = std::max(infer_classes(train_labels, classes), infer_classes(eval_labels, classes));
  std::vector<bool> seen(classes, false);
  for (int l : train_labels) seen[static_cast<std::size_t>(l)] = true;
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw std::invalid_argument("train_probes: labels contain a single class");
  }

  const Tensor x = train_embeddings.detach();
  const Tensor x_eval = eval_embeddings.detach();
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t h = cfg.hidden == 0 ? d : cfg.hidden;

  ProbeResult result;
  for (std::size_t p = 0; p < cfg.n_probes; ++p) {
    std::mt19937_64 rng(cfg.seed + 7919 * p);
    std::vector<Tensor> params{uniform_init({h, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng),
                               Tensor::zeros({h}, true),
                               uniform_init({classes, h}, 1.0 / std::sqrt(static_cast<double>(h)), rng),
                               Tensor::zeros({classes}, true)};
    auto forward = [&](const Tensor& in) {
      return linear(tanh(linear(in, params[0], params[1])), params[2], params[3]);
    };
    AdamWState state;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < n; b += cfg.batch_size) {
        const std::size_t m = std::min(cfg.batch_size, n - b);
        std::vector<std::int32_t> rows(order.begin() + b, order.begin() + b + m);
        std::vector<int> y(m);
        for (std::size_t i = 0; i < m; ++i) y[i] = train_labels[static_cast<std::size_t>(rows[i])];
        for (auto& t : params) t.zero_grad();
        const Tensor loss = task_ce_loss(softmax_rows(forward(gather_rows(x, rows))), y).loss;
        backward(loss);
        optimizer_step(params, state, {cfg.lr, 0.0});
      }
    }
    NoGradGuard no_grad;
    const auto preds = argmax_rows(forward(x_eval));
    result.accuracies.push_back(balanced_accuracy(preds, eval_labels, classes).value);
  }
  const double k = static_cast<double>(result.accuracies.size());
  result.mean = std::accumulate(result.accuracies.begin(), result.accuracies.end(), 0.0) / k;
  double var = 0.0;
  for (double a : result.accuracies) var += (a - result.mean) * (a - result.mean);
  result.std = std::sqrt(var / k);
  return result;
}

GapReport gap_metric(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                     std::size_t classes) {
  if (preds.size() != labels.size() || groups.size() != labels.size()) {
    throw std::invalid_argument("gap_metric: predictions, labels and groups differ in length");
  }
  for (int g : groups) {
    if (g != 0 && g != 1) throw std::invalid_argument("gap_metric: groups must be binary (0 or 1)");
  }
  classes = infer_classes(labels, classes);
  std::vector<std::array<std::size_t, 2>> hits(classes, {0, 0}), count(classes, {0, 0});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto g = static_cast<std::size_t>(groups[i]);
    ++count[y][g];
    if (preds[i] == labels[i]) ++hits[y][g];
  }
  GapReport out;
  out.tpr.resize(classes);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t y = 0; y < classes; ++y) {
    for (std::size_t g = 0; g < 2; ++g) {
      out.tpr[y][g] = count[y][g] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                       : static_cast<double>(hits[y][g]) / static_cast<double>(count[y][g]);
    }
    if (count[y][0] == 0 || count[y][1] == 0) {
      out.excluded_classes.push_back(static_cast<int>(y));
      continue;
    }
    const double diff = out.tpr[y][0] - out.tpr[y][1];
    total += diff * diff;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("gap_metric: no class has both groups");
  out.gap = std::sqrt(total / static_cast<double>(used));
  return out;
}

double uncertainty(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p < 0.0 || !std::isfinite(p)) throw std::invalid_argument("uncertainty: invalid probability");
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double mean_uncertainty(const Tensor& probs) {
  const std::size_t r = probs.rows(), c = probs.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) total += uncertainty(probs.values().subspan(i * c, c));
  return total / static_cast<double>(r);
}

Tensor embed(const EncoderModel& model, std::span<const Example> data, const OmegaMap& omegas) {
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < data.size(); b += kEmbedChunk) {
    std::vector<TokenSequence> batch;
    for (std::size_t i = b; i < std::min(data.size(), b + kEmbedChunk); ++i) batch.push_back(data[i].tokens);
    parts.push_back(model.encode(batch, omegas));
  }
  if (parts.empty()) throw std::invalid_argument("embed: no examples");
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

std::vector<int> predict_labels(const EncoderModel& model, std::span<const Example> data, const OmegaMap& omegas) {
  NoGradGuard no_grad;
  return argmax_rows(model.predict(embed(model, data, omegas)));
}

FlipMatrix prediction_flips(const EncoderModel& model, std::span<const Example> data, const std::string& attribute,
                            std::span<const double> grid) {
  validate_grid(grid);
  model.config().attribute(attribute);
  const std::size_t classes = model.config().task_classes;
  const auto reference = predict_labels(model, data, {{attribute, 0.0}});
  std::vector<std::size_t> per_class(classes, 0);
  for (int r : reference) ++per_class[static_cast<std::size_t>(r)];

  FlipMatrix out;
  out.grid.assign(grid.begin(), grid.end());
  for (double w : grid) {
    const auto preds = w == 0.0 ? reference : predict_labels(model, data, {{attribute, w}});
    std::vector<std::size_t> kept(classes, 0);
    std::size_t kept_all = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == reference[i]) {
        ++kept[static_cast<std::size_t>(reference[i])];
        ++kept_all;
      }
    }
    std::vector<double> row(classes, 1.0);
    for (std::size_t c = 0; c < classes; ++c) {
      if (per_class[c] > 0) row[c] = static_cast<double>(kept[c]) / static_cast<double>(per_class[c]);
    }
    out.retention.push_back(std::move(row));
    out.overall.push_back(preds.empty() ? 1.0 : static_cast<double>(kept_all) / static_cast<double>(preds.size()));
  }
  return out;
}

double mrr_at_k(const std::vector<std::vector<int>>& relevance, std::size_t k) {
  if (k < 1) throw std::invalid_argument("mrr_at_k: k must be at least 1");
  if (relevance.empty()) throw std::invalid_argument("mrr_at_k: no queries");
  double total = 0.0;
  for (const auto& ranked : relevance) {
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
      if (ranked[r] > 0) {
        total += 1.0 / static_cast<double>(r + 1);
        break;
      }
    }
  }
  return total / static_cast<double>(relevance.size());
}

double fairr_at_k(std::span<const double> ranked_neutrality, std::size_t k) {
  if (k < 1) throw std::invalid_argument("fairr_at_k: k must be at least 1");
  double total = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked_neutrality.size()); ++r) {
    total += ranked_neutrality[r] / std::log2(static_cast<double>(r) + 2.0);
  }
  return total;
}

double nfairr_at_k(const std::vector<std::vector<double>>& neutrality, std::span<const double> background,
                   std::size_t k) {
  if (background.empty()) throw std::invalid_argument("nfairr_at_k: empty background set");
  if (neutrality.empty()) throw std::invalid_argument("nfairr_at_k: no queries");
  std::vector<double> ideal(background.begin(), background.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const double ifairr = fairr_at_k(ideal, k);
  if (!(ifairr > 0.0)) throw std::invalid_argument("nfairr_at_k: background set has zero ideal FaiRR");
  double total = 0.0;
  for (const auto& ranked : neutrality) total += std::min(1.0, fairr_at_k(ranked, k) / ifairr);
  return total / static_cast<double>(neutrality.size());
}

std::vector<std::size_t> rank_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

void validate_grid(std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("omega grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) {
      throw std::out_of_range("omega grid value " + std::to_string(grid[i]) + " outside [0,1]");
    }
    if (i > 0 && !(grid[i] > grid[i - 1])) throw std::invalid_argument("omega grid must be strictly ascending");
  }
  if (grid.front() != 0.0) throw std::invalid_argument("omega grid must contain 0");
}

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

namespace {

std::vector<OmegaMap> cartesian(const std::vector<std::string>& attributes, std::span<const double> grid) {
  std::vector<OmegaMap> points{OmegaMap{}};
  for (const auto& a : attributes) {
    std::vector<OmegaMap> next;
    for (const auto& p : points) {
      for (double w : grid) {
        OmegaMap q = p;
        q[a] = w;
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  return points;
}

template <typename Fn>
void run_jobs(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void check_sweep(const EncoderModel& model, const SweepOptions& options) {
  validate_grid(options.grid);
  if (options.attributes.empty()) throw std::invalid_argument("sweep needs at least one attribute");
  OmegaMap probe;
  for (const auto& a : options.attributes) probe[a] = 0.0;
  model.check_omegas(probe);
}

std::vector<int> attribute_labels(std::span<const Example> data, const std::string& attribute) {
  std::vector<int> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto it = data[i].attr_labels.find(attribute);
    if (it == data[i].attr_labels.end()) {
      throw DataError("example " + std::to_string(i) + " has no label for attribute '" + attribute + "'");
    }
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

SweepRow evaluate_point(const EncoderModel& model, std::span<const Example> probe_train, std::span<const Example> eval,
                        const OmegaMap& omegas, const SweepOptions& options, std::span<const int> reference_preds) {
  if (eval.empty()) throw std::invalid_argument("evaluation data is empty");
  SweepRow row;
  row.omegas = omegas;
  const Tensor z = embed(model, eval, omegas);
  Tensor probs;
  {
    NoGradGuard no_grad;
    probs = model.predict(z);
  }
  const auto preds = argmax_rows(probs);
  std::vector<int> labels;
  for (const auto& ex : eval) labels.push_back(ex.task_label);
  row.task = balanced_accuracy(preds, labels, model.config().task_classes).value;
  row.uncertainty = mean_uncertainty(probs);
  if (!reference_preds.empty()) {
    if (reference_preds.size() != preds.size()) throw std::invalid_argument("reference predictions differ in length");
    std::size_t kept = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) kept += preds[i] == reference_preds[i] ? 1 : 0;
    row.flip_retention = static_cast<double>(kept) / static_cast<double>(preds.size());
  }
  if (options.run_probes) {
    if (probe_train.empty()) throw std::invalid_argument("probe training data is empty");
    const Tensor z_train = embed(model, probe_train, omegas);
    for (const auto& a : options.attributes) {
      const auto classes = model.config().attribute(a).classes;
      row.probes[a] = train_probes(z_train, attribute_labels(probe_train, a), z, attribute_labels(eval, a), classes,
                                   options.probe);
    }
  }
  return row;
}

SweepReport omega_sweep(const EncoderModel& model, std::span<const Example> probe_train, std::span<const Example> eval,
                        const SweepOptions& options) {
  check_sweep(model, options);
  if (model.config().task != TaskKind::classification) throw std::invalid_argument("model is not a classifier");
  SweepReport report;
  report.attributes = options.attributes;
  report.grid = options.grid;
  const auto points = cartesian(options.attributes, options.grid);
  const auto reference = predict_labels(model, eval, points.front());
  report.rows.resize(points.size());
  run_jobs(points.size(), options.threads, [&](std::size_t i) {
    report.rows[i] = evaluate_point(model, probe_train, eval, points[i], options, reference);
  });
  return report;
}

SweepReport omega_sweep(const EncoderModel& model, std::span<const RankingExample> eval, const SweepOptions& options) {
  check_sweep(model, options);
  if (model.config().task != TaskKind::ranking) throw std::invalid_argument("model is not a ranker");
  if (eval.empty()) throw std::invalid_argument("evaluation data is empty");
  if (options.background.empty()) throw std::invalid_argument("ranking sweep needs background neutralities");
  SweepReport report;
  report.attributes = options.attributes;
  report.grid = options.grid;
  const auto points = cartesian(options.attributes, options.grid);

  struct Ranked {
    std::vector<std::vector<int>> relevance;
    std::vector<std::vector<double>> neutrality;
    std::vector<std::size_t> top;
    double entropy = 0.0;
  };
  auto rank_all = [&](const OmegaMap& omegas) {
    NoGradGuard no_grad;
    Ranked out;
    for (const auto& q : eval) {
      std::vector<TokenSequence> docs;
      for (const auto& c : q.candidates) docs.push_back(c.tokens);
      const Tensor s = model.score_candidates(q.query, docs, omegas);
      const auto order = rank_order(s.values());
      std::vector<int> rel;
      std::vector<double> neu;
      for (auto j : order) {
        rel.push_back(q.candidates[j].relevance);
        neu.push_back(q.candidates[j].neutrality);
      }
      out.relevance.push_back(std::move(rel));
      out.neutrality.push_back(std::move(neu));
      out.top.push_back(order.front());
      out.entropy += uncertainty(softmax_rows(s).values());
    }
    out.entropy /= static_cast<double>(eval.size());
    return out;
  };

  const Ranked reference = rank_all(points.front());
  report.rows.resize(points.size());
  run_jobs(points.size(), options.threads, [&](std::size_t i) {
    const Ranked r = i == 0 ? reference : rank_all(points[i]);
    SweepRow row;
    row.omegas = points[i];
    row.mrr10 = mrr_at_k(r.relevance, options.k);
    row.nfairr10 = nfairr_at_k(r.neutrality, options.background, options.k);
    row.task = *row.mrr10;
    row.uncertainty = r.entropy;
    std::size_t kept = 0;
    for (std::size_t q = 0; q < r.top.size(); ++q) kept += r.top[q] == reference.top[q] ? 1 : 0;
    row.flip_retention = static_cast<double>(kept) / static_cast<double>(r.top.size());
    report.rows[i] = std::move(row);
  });
  return report;
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json SweepReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json probes_json = json::object();
    for (const auto& [name, p] : r.probes) {
      probes_json[name] = {{"mean", p.mean}, {"std", p.std}, {"accuracies", p.accuracies}};
    }
    const std::string& first = attributes.empty() ? std::string() : attributes.front();
    const auto fp = r.probes.find(first);
    rows_json.push_back({{"omega", r.omegas.count(first) ? r.omegas.at(first) : 0.0},
                         {"omegas", r.omegas},
                         {"task", r.task},
                         {"probe_mean", fp == r.probes.end() ? json(nullptr) : json(fp->second.mean)},
                         {"probe_std", fp == r.probes.end() ? json(nullptr) : json(fp->second.std)},
                         {"probes", probes_json},
                         {"uncertainty", r.uncertainty},
                         {"flip_retention", r.flip_retention},
                         {"mrr10", optional_number(r.mrr10)},
                         {"nfairr10", optional_number(r.nfairr10)}});
  }
  return {{"attributes", attributes}, {"grid", grid}, {"rows", rows_json}};
}

std::string SweepReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  for (const auto& a : attributes) os << "omega_" << a << ',';
  os << "task";
  for (const auto& a : attributes) os << ",probe_mean_" << a << ",probe_std_" << a;
  os << ",uncertainty,flip_retention,mrr10,nfairr10\n";
  for (const auto& r : rows) {
    for (const auto& a : attributes) os << r.omegas.at(a) << ',';
    os << r.task;
    for (const auto& a : attributes) {
      auto it = r.probes.find(a);
      if (it == r.probes.end()) {
        os << ",,";
      } else {
        os << ',' << it->second.mean << ',' << it->second.std;
      }
    }
    os << ',' << r.uncertainty << ',' << r.flip_retention << ',';
    if (r.mrr10) os << *r.mrr10;
    os << ',';
    if (r.nfairr10) os << *r.nfairr10;
    os << '\n';
  }
  return os.str();
}

}  // namespace congater
