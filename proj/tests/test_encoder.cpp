// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "congater/encoder.hpp"
#include "congater/objectives.hpp"
#include "congater/ops.hpp"
#include "test_support.hpp"

using namespace congater;
using congater::testing::random_batch;
using congater::testing::random_tensor;
using congater::testing::tiny_config;

namespace {

void expect_bit_identical(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << "element " << i;
}

// Moves every gate away from its near-identity initialisation so that
// omega actually matters.
void scramble_gates(EncoderModel& m, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 2.0);
  for (const auto& p : m.parameters()) {
    if (p.group.rfind("attr:", 0) != 0) continue;
    Tensor t = p.tensor;
    for (auto& v : t.mutable_values()) v = n(rng);
  }
}

}  // namespace

class EncoderArch : public ::testing::TestWithParam<Architecture> {};

TEST_P(EncoderArch, Shapes) {
  const EncoderModel m(tiny_config(GetParam()), 3);
  std::mt19937_64 rng(1);
  const auto batch = random_batch(5, 40, rng);
  const Tensor z = m.encode(batch, {{"gender", 0.5}});
  EXPECT_EQ(z.shape(), (Shape{5, 8}));
  EXPECT_EQ(m.task_logits(z).shape(), (Shape{5, 3}));
  const Tensor p = m.predict(z);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_GT(p.at(r, c), 0.0);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto adv = m.adversary_predict(z, "gender");
  ASSERT_EQ(adv.size(), 2u);
  EXPECT_EQ(adv[0].shape(), (Shape{5, 2}));
}

TEST_P(EncoderArch, OpenGatesEqualModuleFreeEncoderBitwise) {
  EncoderModel m(tiny_config(GetParam()), 5);
  std::mt19937_64 rng(2);
  scramble_gates(m, rng);
  const auto batch = random_batch(6, 40, rng);
  const Tensor base = m.encode_base(batch);
  expect_bit_identical(m.encode(batch, {}), base);
  expect_bit_identical(m.encode(batch, {{"gender", 0.0}}), base);
}

TEST_P(EncoderArch, SensitivityChangesEmbedding) {
  EncoderModel m(tiny_config(GetParam()), 5);
  std::mt19937_64 rng(3);
  scramble_gates(m, rng);
  const auto batch = random_batch(4, 40, rng);
  const Tensor a = m.encode(batch, {{"gender", 0.0}});
  const Tensor b = m.encode(batch, {{"gender", 1.0}});
  double linf = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) linf = std::max(linf, std::abs(a[i] - b[i]));
  EXPECT_GT(linf, 0.0);
  expect_bit_identical(b, m.encode(batch, {{"gender", 1.0}}));
}

TEST_P(EncoderArch, SameSeedSameModel) {
  const EncoderModel a(tiny_config(GetParam()), 9);
  const EncoderModel b(tiny_config(GetParam()), 9);
  EXPECT_EQ(congater::testing::snapshot(a), congater::testing::snapshot(b));
  const EncoderModel c(tiny_config(GetParam()), 10);
  EXPECT_NE(congater::testing::snapshot(a), congater::testing::snapshot(c));
}

TEST_P(EncoderArch, CloneHasIndependentStorage) {
  const EncoderModel m(tiny_config(GetParam()), 4);
  EncoderModel c = m.clone();
  EXPECT_EQ(congater::testing::snapshot(m), congater::testing::snapshot(c));
  const auto before = congater::testing::snapshot(m);
  for (const auto& p : c.parameters()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_values()) v += 1.0;
  }
  EXPECT_EQ(congater::testing::snapshot(m), before);
}

INSTANTIATE_TEST_SUITE_P(Both, EncoderArch, ::testing::Values(Architecture::transformer, Architecture::mlp),
                         [](const auto& info) { return to_string(info.param); });

TEST(Encoder, ParameterPartitionIsDisjointAndExhaustive) {
  const EncoderModel m(tiny_config(Architecture::transformer, TaskKind::classification,
                                   {{"gender", 2, ModuleKind::congater}, {"age", 3, ModuleKind::congater}}),
                       1);
  std::set<const void*> ids;
  std::size_t total = 0;
  for (const auto& g : m.groups()) {
    for (const auto& t : m.group(g)) {
      EXPECT_TRUE(ids.insert(t.id()).second) << "tensor in two groups";
      total += t.size();
    }
  }
  EXPECT_EQ(total, m.parameter_count());
  const auto names = m.groups();
  const std::set<std::string> groups(names.begin(), names.end());
  EXPECT_EQ(groups, (std::set<std::string>{"task", "attr:gender", "attr:age", "adv:gender", "adv:age"}));
}

TEST(Encoder, RejectsBadInputs) {
  const EncoderModel m(tiny_config(Architecture::transformer), 1);
  const std::vector<TokenSequence> oov{{3, 40}};
  EXPECT_THROW(m.encode(oov, {}), std::out_of_range);
  const std::vector<TokenSequence> empty{{}};
  EXPECT_THROW(m.encode(empty, {}), std::invalid_argument);
  const std::vector<TokenSequence> ok{{3, 4}};
  EXPECT_THROW(m.encode(ok, {{"race", 0.5}}), std::out_of_range);
  EXPECT_THROW(m.encode(ok, {{"gender", 1.5}}), std::out_of_range);
  const std::vector<TokenSequence> longer{TokenSequence(50, 5)};
  EXPECT_NO_THROW(m.encode(longer, {}));
}

TEST(Encoder, ConfigValidation) {
  auto c = tiny_config(Architecture::transformer);
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config(Architecture::transformer);
  c.blocks = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config(Architecture::transformer);
  c.attributes.push_back(c.attributes[0]);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_architecture("rnn"), std::invalid_argument);
  EXPECT_EQ(parse_module_kind("adapter"), ModuleKind::adapter);
}

TEST(Encoder, AdapterIgnoresSensitivityWithWarning) {
  const EncoderModel m(tiny_config(Architecture::mlp, TaskKind::classification, {{"gender", 2, ModuleKind::adapter}}),
                       2);
  EXPECT_EQ(m.check_omegas({{"gender", 0.7}}).size(), 1u);
  EXPECT_TRUE(m.check_omegas({{"gender", 0.0}}).empty());
  std::mt19937_64 rng(4);
  const auto batch = random_batch(3, 40, rng);
  expect_bit_identical(m.encode(batch, {{"gender", 0.7}}), m.encode(batch, {{"gender", 0.0}}));
}

TEST(Encoder, TaskHeadZeroWeightsGiveUniform) {
  EncoderModel m(tiny_config(Architecture::mlp), 2);
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("task_head", 0) != 0) continue;
    Tensor t = p.tensor;
    for (auto& v : t.mutable_values()) v = 0.0;
  }
  std::mt19937_64 rng(5);
  const Tensor p = m.predict(random_tensor({2, 8}, rng));
  for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Encoder, TaskHeadMatchesScalarRecomputation) {
  const EncoderModel m(tiny_config(Architecture::mlp), 6);
  Tensor w, b;
  for (const auto& p : m.parameters()) {
    if (p.name == "task_head.w") w = p.tensor;
    if (p.name == "task_head.b") b = p.tensor;
  }
  ASSERT_EQ(w.shape(), (Shape{3, 8}));
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor({1, 8}, rng);
  const Tensor p = m.predict(z);
  std::vector<double> logit(3);
  double denom = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    logit[c] = b[c];
    for (std::size_t k = 0; k < 8; ++k) logit[c] += w.at(c, k) * z[k];
    denom += std::exp(logit[c]);
  }
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p[c], std::exp(logit[c]) / denom, 1e-14);
}

TEST(Encoder, AdversaryReversalFlipsEncoderGradientOnly) {
  const EncoderModel m(tiny_config(Architecture::mlp), 7);
  std::mt19937_64 rng(7);
  const std::vector<int> labels{0, 1, 1};
  const Tensor zv = random_tensor({3, 8}, rng);
  auto grad_for = [&](bool reverse) {
    Tensor z = zv.detach();
    z.set_requires_grad(true);
    const auto logits = m.adversary_logits(z, "gender", {}, reverse);
    std::vector<Tensor> losses;
    for (const auto& l : logits) losses.push_back(task_ce_loss(softmax_rows(l), labels).loss);
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    backward(total);
    return std::make_pair(std::vector<double>(z.grad().begin(), z.grad().end()), total.item());
  };
  const auto [g_rev, f_rev] = grad_for(true);
  const auto [g_fwd, f_fwd] = grad_for(false);
  EXPECT_EQ(f_rev, f_fwd);
  for (std::size_t i = 0; i < g_rev.size(); ++i) EXPECT_EQ(g_rev[i], -g_fwd[i]);
}

TEST(Encoder, RankingModel) {
  const EncoderModel m(tiny_config(Architecture::mlp, TaskKind::ranking), 8);
  std::mt19937_64 rng(8);
  const auto docs = random_batch(5, 40, rng);
  const TokenSequence q{3, 4, 5};
  const Tensor s = m.score_candidates(q, docs, {{"gender", 0.3}});
  EXPECT_EQ(s.size(), 5u);
  EXPECT_THROW(m.task_logits(Tensor::zeros({1, 8})), std::logic_error);
  EXPECT_THROW(m.score_candidates(q, {}, {}), std::invalid_argument);
}
