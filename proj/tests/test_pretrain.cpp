#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "locl/pretrain.hpp"

using namespace locl;
using locl::testing::check_input_grad;
using locl::testing::check_param_grads;
using locl::testing::random_mat;

TEST(Cosine, Examples) {
  Vec<double> a(2), b(2), c(2);
  a << 1, 0;
  b << 0, 1;
  c << 1, 1;
  EXPECT_DOUBLE_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, b), 0.0);
  EXPECT_NEAR(cosine_similarity(c, a), 0.70710678, 1e-8);
  EXPECT_EQ(cosine_similarity(Vec<double>(Vec<double>::Zero(2)), a), 0.0);
  EXPECT_THROW(cosine_similarity(a, Vec<double>(Vec<double>::Ones(3))), std::invalid_argument);
}

TEST(Cosine, BoundedAndSymmetric) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 1000; ++t) {
    const Vec<double> u = random_mat(8, 1, rng, -5, 5), v = random_mat(8, 1, rng, -5, 5);
    const double c = cosine_similarity(u, v);
    EXPECT_LE(std::abs(c), 1.0 + 1e-12);
    EXPECT_DOUBLE_EQ(c, cosine_similarity(v, u));
  }
}

TEST(Cosine, RowsMatchScalarAndBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  Mat<double> a = random_mat(5, 4, rng), b = random_mat(5, 4, rng);
  const Vec<double> c = cosine_rows(a, b);
  for (int k = 0; k < 5; ++k)
    EXPECT_NEAR(c(k), cosine_similarity<double>(a.row(k).transpose(), b.row(k).transpose()), 1e-14);
  const Vec<double> w = random_mat(5, 1, rng);
  Mat<double> ga = Mat<double>::Zero(5, 4), gb = Mat<double>::Zero(5, 4);
  cosine_rows_backward(a, b, w, ga, gb);
  auto loss = [&] { return cosine_rows(a, b).dot(w); };
  check_input_grad(a, ga, loss, "a");
  check_input_grad(b, gb, loss, "b");
}

TEST(PseudoLabels, Examples) {
  Vec<double> phi(4);
  phi << 0.9, 0.1, 0.5, 0.7;
  EXPECT_EQ(make_pseudo_labels(phi, 2).y, (std::vector<int>{1, 0, 0, 1}));
  EXPECT_EQ(make_pseudo_labels(phi, 0).y, (std::vector<int>{0, 0, 0, 0}));
  EXPECT_EQ(make_pseudo_labels(phi, 4).y, (std::vector<int>{1, 1, 1, 1}));
  EXPECT_THROW(make_pseudo_labels(phi, 5), std::invalid_argument);
  Vec<double> tied(3);
  tied << 0.5, 0.5, 0.5;
  EXPECT_EQ(make_pseudo_labels(tied, 1).y, (std::vector<int>{1, 0, 0}));
}

TEST(PseudoLabels, MatchBruteForceSort) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(rng() % 100);
    const int l = static_cast<int>(rng() % (n + 1));
    Vec<double> phi(n);
    for (int i = 0; i < n; ++i) phi(i) = static_cast<double>(static_cast<int>(rng() % 21) - 10) / 10.0;
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return phi(a) != phi(b) ? phi(a) > phi(b) : a < b; });
    std::vector<int> expect(static_cast<std::size_t>(n), 0);
    for (int k = 0; k < l; ++k) expect[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = 1;
    const PseudoLabels y = make_pseudo_labels(phi, l);
    EXPECT_EQ(y.y, expect);
    EXPECT_EQ(std::count(y.y.begin(), y.y.end(), 1), l);
  }
}

TEST(PseudoLabels, InvariantToPositiveRescalingOfSources) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int t = 0; t < 200; ++t) {
    const Vec<double> text = random_mat(6, 1, rng);
    Mat<double> anchors = random_mat(30, 6, rng);
    const auto y = make_pseudo_labels(similarity_scores(text, anchors), 7);
    for (Eigen::Index k = 0; k < anchors.rows(); ++k) anchors.row(k) *= scale(rng);
    const Vec<double> text2 = text * scale(rng);
    EXPECT_EQ(make_pseudo_labels(similarity_scores(text2, anchors), 7).y, y.y);
  }
}

TEST(ContrastiveLoss, ClosedFormCases) {
  PseudoLabels one{{1}, 1}, zero{{0}, 0}, mixed{{0, 1}, 1};
  EXPECT_EQ(contrastive_loss(one, Vec<double>(Vec<double>::Ones(1)), 1.0), 0.0);
  EXPECT_EQ(contrastive_loss(zero, Vec<double>(Vec<double>::Zero(1)), 1.0), 0.0);
  Vec<double> d(2);
  d << 0.5, 0.6;
  EXPECT_NEAR(contrastive_loss(mixed, d, 1.0), 0.89, 1e-9);
  EXPECT_THROW(contrastive_loss(mixed, Vec<double>(Vec<double>::Zero(3)), 1.0), std::invalid_argument);
}

TEST(ContrastiveLoss, NonNegativeAndZeroExactlyAtOptimum) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 2000; ++t) {
    const int n = 1 + static_cast<int>(rng() % 12);
    PseudoLabels y;
    y.y.resize(static_cast<std::size_t>(n));
    Vec<double> d(n);
    const double m = std::array<double, 4>{0.5, 1, 3, 7}[rng() % 4];
    bool optimum = true;
    for (int k = 0; k < n; ++k) {
      y.y[static_cast<std::size_t>(k)] = static_cast<int>(rng() % 2);
      // Mix exact optima into the random draws.
      const int kind = static_cast<int>(rng() % 3);
      d(k) = kind == 0 ? (y.y[static_cast<std::size_t>(k)] ? 1.0 : 0.0) : u(rng);
      const bool ok = y.y[static_cast<std::size_t>(k)] ? d(k) * d(k) >= m : d(k) == 0.0;
      optimum = optimum && ok;
    }
    const double l = contrastive_loss(y, d, m);
    EXPECT_GE(l, 0.0);
    EXPECT_EQ(l == 0.0, optimum);
  }
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  PseudoLabels y{{0, 1, 1, 0, 1}, 3};
  Mat<double> d = random_mat(5, 1, rng, -0.9, 0.9);
  Vec<double> g;
  contrastive_loss(y, Vec<double>(d), 1.0, &g);
  check_input_grad(d, Mat<double>(g), [&] { return contrastive_loss(y, Vec<double>(d), 1.0); }, "d");
}

TEST(ObjectnessBce, ClosedForms) {
  Vec<double> o(1), phi(1);
  o << 0.5;
  phi << 0.0;
  EXPECT_NEAR(objectness_bce(o, phi), std::log(2.0), 1e-12);
  o << 1.0;
  phi << 1.0;
  EXPECT_LT(objectness_bce(o, phi), 1e-6);
  o << 0.0;
  phi << -1.0;
  EXPECT_LT(objectness_bce(o, phi), 1e-6);
  o << 0.0;
  phi << 1.0;
  EXPECT_TRUE(std::isfinite(objectness_bce(o, phi)));
  EXPECT_THROW(objectness_bce(o, Vec<double>(Vec<double>::Zero(2))), std::invalid_argument);
}

TEST(ObjectnessBce, LogitGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Mat<double> logits = random_mat(6, 1, rng, -3, 3);
  const Vec<double> phi = random_mat(6, 1, rng);
  auto obj = [&] { return Vec<double>(logits.unaryExpr([](double x) { return sigmoid(x); })); };
  const Vec<double> g = objectness_bce_grad_logits(obj(), phi);
  check_input_grad(logits, Mat<double>(g), [&] { return objectness_bce(obj(), phi); }, "logits");
}

TEST(TotalLoss, WeightedSum) {
  ContrastiveConfig c;
  EXPECT_DOUBLE_EQ(c.alpha, 0.6);
  EXPECT_DOUBLE_EQ(c.beta, 0.4);
  EXPECT_NEAR(total_pretrain_loss(1, 1, c), 1.0, 1e-12);
  EXPECT_NEAR(total_pretrain_loss(2, 0, c), 1.2, 1e-12);
  c.alpha = c.beta = 0;
  EXPECT_EQ(total_pretrain_loss(3, 5, c), 0.0);
}

TEST(Alignment, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Mat<double> anchors = random_mat(7, 5, rng), text = random_mat(3, 5, rng);
  const AlignmentConfig cfg{0.2, 4.0};
  const auto r = alignment_loss(anchors, text, 1, cfg);
  auto loss = [&] { return static_cast<double>(alignment_loss(anchors, text, 1, cfg, false).loss); };
  check_input_grad(anchors, r.grad_anchor, loss, "anchors");
  check_input_grad(text, r.grad_text, loss, "text");
}

TEST(Alignment, PrefersMatchingText) {
  Mat<double> anchors(2, 2), text(2, 2);
  anchors << 1, 0, 0.1, 0.1;
  text << 1, 0, 0, 1;
  const AlignmentConfig cfg;
  EXPECT_LT(alignment_loss(anchors, text, 0, cfg).loss, alignment_loss(anchors, text, 1, cfg).loss);
}

namespace {

LfeConfig toy_config() {
  LfeConfig c;
  c.encoder.image_size = 32;
  c.encoder.layers = {{4, 4, 4}, {4, 4, 6}};  // stride 16 → 2×2 map
  c.anchors.scales = {1.3};
  c.anchors.ratios = {1.0};  // one shape per cell → n = 4
  c.rpn_hidden = 5;
  c.text_hidden = 7;
  c.contrastive.num_pseudo_labels = 2;
  c.alignment_weight = 0;
  return c;
}

data::Image toy_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  data::Image img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img.set(y, x, {u(rng), u(rng), u(rng)});
  return img;
}

/// Finite differences of pretrain_step's total against the gradients it
/// accumulated on the first call; later calls must not disturb them.
void check_pretrain_step(LfeModel<double>& m, const data::Image& img, const PretrainStepOptions& opt) {
  const std::vector<data::Pair> cands = {{0, 0}, {0, 1}, {1, 1}};
  auto ps = m.params();
  for (auto* p : ps) p->zero_grad();
  Vec<double> phi;
  pretrain_step<double>(m, img, data::Pair{0, 1}, cands, opt, nullptr, &phi);
  std::vector<Mat<double>> saved;
  for (auto* p : ps) saved.push_back(p->grad);
  auto loss = [&] {
    const double t = pretrain_step(m, img, data::Pair{0, 1}, cands, opt, &phi).total;
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->grad = saved[i];
    return t;
  };
  check_param_grads(ps, loss, 1e-3, 1e-6, 40);
}

}  // namespace

TEST(PretrainStep, ToyModelHasFourAnchors) {
  LfeModel<double> m(toy_config(), 2, 2);
  EXPECT_EQ(m.num_anchors(), 4);
}

TEST(PretrainStep, ContrastivePlusBceGradientMatchesFiniteDifferences) {
  LfeModel<double> m(toy_config(), 2, 2);
  std::mt19937_64 rng(9);
  m.init(9);
  m.rpn.init(rng, 0.2);  // non-zero deltas so boxes differ from anchors
  for (auto& c : m.encoder.convs()) c.bias().value.setConstant(0.1);
  check_pretrain_step(m, toy_image(10), {true, true});
}

TEST(PretrainStep, FullObjectiveWithAlignmentGradientMatchesFiniteDifferences) {
  LfeConfig cfg = toy_config();
  cfg.alignment_weight = 0.7;
  LfeModel<double> m(cfg, 2, 2);
  std::mt19937_64 rng(11);
  m.init(11);
  m.rpn.init(rng, 0.2);
  for (auto& c : m.encoder.convs()) c.bias().value.setConstant(0.1);
  check_pretrain_step(m, toy_image(12), {true, true});
  check_pretrain_step(m, toy_image(13), {false, true});
}

TEST(PretrainStep, ReportsWeightedTotal) {
  LfeConfig cfg = toy_config();
  cfg.alignment_weight = 0.5;
  LfeModel<double> m(cfg, 2, 2);
  m.init(3);
  const auto l = pretrain_step(m, toy_image(4), data::Pair{1, 1}, {{0, 0}, {1, 1}}, {true, true});
  EXPECT_NEAR(l.total, 0.6 * l.con + 0.4 * l.bce + 0.5 * l.align, 1e-12);
  EXPECT_GE(l.con, 0.0);
  EXPECT_GT(l.bce, 0.0);
  const auto w = pretrain_step(m, toy_image(4), data::Pair{1, 1}, {{0, 0}, {1, 1}}, {false, true});
  EXPECT_EQ(w.con, 0.0);
  EXPECT_NEAR(w.total, w.align, 1e-12);
}

TEST(PretrainStep, RejectsLabelOutsideCandidates) {
  LfeModel<double> m(toy_config(), 2, 2);
  m.init(1);
  EXPECT_THROW(pretrain_step(m, toy_image(1), data::Pair{1, 0}, {{0, 0}, {1, 1}}, {true, true}), ValidationError);
}

TEST(AlignmentCandidates, ObjectOnlyCollapsesAttributes) {
  const std::vector<data::Pair> train = {{0, 1}, {2, 1}, {1, 0}};
  EXPECT_EQ(alignment_candidates(train, TextInput::kObjectAttribute), train);
  EXPECT_EQ(alignment_candidates(train, TextInput::kObjectOnly), (std::vector<data::Pair>{{0, 0}, {0, 1}}));
  EXPECT_EQ(candidate_index(alignment_candidates(train, TextInput::kObjectOnly), {2, 1}, TextInput::kObjectOnly), 1);
}

TEST(PretrainLoop, OneEpochSmoke) {
  data::DatasetConfig dc;
  dc.image_size = 64;
  dc.num_train = 32;
  dc.num_val = 0;
  dc.num_test = 4;
  dc.seed = 5;
  const data::Dataset ds = data::generate_dataset(dc);
  LfeConfig cfg;
  cfg.encoder = default_encoder_config(64, 16);
  cfg.rpn_hidden = 8;
  cfg.text_hidden = 16;
  LfeModel<float> m(cfg, ds.vocabulary.num_attributes(), ds.vocabulary.num_objects());
  m.init(5);
  PretrainSchedule sched;
  sched.main.max_epochs = 1;
  sched.main.lr = 1e-3;
  const auto view = data::training_view(ds.train);
  const auto hist = pretrain_lfe(m, std::span<const data::TrainingSample>(view), ds.split.train, sched, 5);
  ASSERT_EQ(hist.size(), 1u);
  EXPECT_TRUE(std::isfinite(hist[0].total));
  EXPECT_EQ(hist[0].phase, "contrastive");
}

TEST(PretrainLoop, WarmupFreezesRpnAndCountsEpochs) {
  data::DatasetConfig dc;
  dc.image_size = 64;
  dc.num_train = 16;
  dc.num_val = 0;
  dc.num_test = 4;
  const data::Dataset ds = data::generate_dataset(dc);
  LfeConfig cfg;
  cfg.encoder = default_encoder_config(64, 16);
  cfg.rpn_hidden = 8;
  cfg.text_hidden = 16;
  LfeModel<float> m(cfg, ds.vocabulary.num_attributes(), ds.vocabulary.num_objects());
  m.init(6);
  const LfeModel<float> before = m;
  PretrainSchedule sched;
  sched.warmup_epochs = 2;
  sched.main.max_epochs = 0;
  const auto view = data::training_view(ds.train);
  const auto hist = pretrain_lfe(m, std::span<const data::TrainingSample>(view), ds.split.train, sched, 6);
  ASSERT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist[0].phase, "align");
  auto a = const_cast<LfeModel<float>&>(before).params();
  auto b = m.params();
  bool encoder_moved = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->group == ParamGroup::kRpn) {
      EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
    }
    if (a[i]->group == ParamGroup::kImageEncoder) encoder_moved = encoder_moved || a[i]->value != b[i]->value;
  }
  EXPECT_TRUE(encoder_moved);
}

TEST(Schedule, StepDecayAndEarlyStop) {
  StepSchedule s;
  EXPECT_EQ(s.epochs(), 50);
  EXPECT_DOUBLE_EQ(s.lr_at(0), 1e-5);
  EXPECT_DOUBLE_EQ(s.lr_at(9), 1e-5);
  EXPECT_NEAR(s.lr_at(10), 1e-6, 1e-18);
  EXPECT_NEAR(s.lr_at(25), 1e-7, 1e-19);
}
