// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "congater/data.hpp"
#include "congater/encoder.hpp"
#include "congater/tensor.hpp"
#include "json.hpp"

namespace congater {

struct BalancedAccuracy {
  double value = 0.0;
  /// Classes below `classes` that have no instance in the labels.
  std::vector<int> excluded;
};

/// Mean per-class recall over the classes present in `labels`. With
/// `classes` = 0 the class count is max(label) + 1.
BalancedAccuracy balanced_accuracy(std::span<const int> preds, std::span<const int> labels, std::size_t classes = 0);

struct ProbeConfig {
  std::size_t n_probes = 5;
  int epochs = 30;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  /// Hidden width of each probe; 0 means the embedding width.
  std::size_t hidden = 0;
  std::uint64_t seed = 101;

  void validate() const;
};

struct ProbeResult {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> accuracies;
};

/// Trains cfg.n_probes two-layer tanh heads on fixed embeddings and reports
/// balanced accuracy on (eval_embeddings, eval_labels).
ProbeResult train_probes(const Tensor& train_embeddings, std::span<const int> train_labels,
                         const Tensor& eval_embeddings, std::span<const int> eval_labels, std::size_t classes,
                         const ProbeConfig& config);

struct GapReport {
  /// tpr[y][g] for task class y and group g; NaN where the cell is empty.
  std::vector<std::array<double, 2>> tpr;
  double gap = 0.0;
  std::vector<int> excluded_classes;
};

/// sqrt(mean over classes of (TPR_{g0,y} - TPR_{g1,y})^2) for binary groups.
GapReport gap_metric(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                     std::size_t classes = 0);

/// Entropy -Σ p ln p of one distribution.
double uncertainty(std::span<const double> probs);
/// Mean entropy over the rows of a probability matrix.
double mean_uncertainty(const Tensor& probs);

struct FlipMatrix {
  std::vector<double> grid;
  /// retention[i][c]: fraction of examples with ω=0 label c keeping it at grid[i].
  std::vector<std::vector<double>> retention;
  /// Over all examples.
  std::vector<double> overall;
};

FlipMatrix prediction_flips(const EncoderModel& model, std::span<const Example> data, const std::string& attribute,
                            std::span<const double> grid);

/// relevance[q] lists the relevance of query q's documents in ranked order.
double mrr_at_k(const std::vector<std::vector<int>>& relevance, std::size_t k = 10);

/// Σ_{r=1..k} neutrality_r / log2(r + 1).
double fairr_at_k(std::span<const double> ranked_neutrality, std::size_t k = 10);

/// Mean over queries of min(1, FaiRR / IFaiRR), where IFaiRR is the FaiRR of
/// the k most neutral background documents.
double nfairr_at_k(const std::vector<std::vector<double>>& neutrality, std::span<const double> background,
                   std::size_t k = 10);

/// Candidate indices sorted by descending score; ties keep input order.
std::vector<std::size_t> rank_order(std::span<const double> scores);

double spearman(std::span<const double> x, std::span<const double> y);

/// Validates a sweep grid: values in [0,1], sorted ascending, unique, containing 0.
void validate_grid(std::span<const double> grid);
std::vector<double> default_grid();

struct SweepOptions {
  /// Swept attributes; two or more give a Cartesian grid.
  std::vector<std::string> attributes;
  std::vector<double> grid = default_grid();
  ProbeConfig probe;
  bool run_probes = true;
  std::size_t k = 10;
  /// Neutralities of the background collection (ranking only).
  std::vector<double> background;
  /// Worker threads for independent grid points.
  unsigned threads = 1;
};

struct SweepRow {
  OmegaMap omegas;
  double task = 0.0;
  std::map<std::string, ProbeResult> probes;
  double uncertainty = 0.0;
  double flip_retention = 1.0;
  std::optional<double> mrr10;
  std::optional<double> nfairr10;
};

struct SweepReport {
  std::vector<std::string> attributes;
  std::vector<double> grid;
  std::vector<SweepRow> rows;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Probes train on `probe_train` embeddings and every metric is computed on `eval`.
SweepReport omega_sweep(const EncoderModel& model, std::span<const Example> probe_train, std::span<const Example> eval,
                        const SweepOptions& options);
/// Ranking sweep: task metric is MRR@k, probes are skipped, flip retention
/// tracks the top-ranked document.
SweepReport omega_sweep(const EncoderModel& model, std::span<const RankingExample> eval, const SweepOptions& options);

/// One row of a sweep at fixed sensitivities, with flips measured against `reference_preds`.
SweepRow evaluate_point(const EncoderModel& model, std::span<const Example> probe_train, std::span<const Example> eval,
                        const OmegaMap& omegas, const SweepOptions& options,
                        std::span<const int> reference_preds = {});

/// Argmax task predictions at the given sensitivities.
std::vector<int> predict_labels(const EncoderModel& model, std::span<const Example> data, const OmegaMap& omegas);
/// Pooled embeddings without gradient tracking, computed in chunks.
Tensor embed(const EncoderModel& model, std::span<const Example> data, const OmegaMap& omegas);

}  // namespace congater
