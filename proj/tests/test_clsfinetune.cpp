#include <doctest.h>

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "osteo/clsfinetune/clsfinetune.hpp"
#include "osteo/diffcore/errors.hpp"

using namespace osteo;
using namespace osteo::cls;

namespace {

double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

dataio::BonePatch flat_patch(double level, std::size_t h, std::size_t w, dataio::Segment seg) {
  dataio::BonePatch p;
  p.segment = seg;
  p.crop = dataio::Image(h, w, level);
  return p;
}

// Bright-bone subjects are positive; intensity separates the classes.
std::vector<SubjectRecord> separable_subjects(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  std::vector<SubjectRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % 3 == 0;
    std::vector<dataio::BonePatch> patches;
    for (std::size_t k = 0; k < 3; ++k)
      patches.push_back(flat_patch((pos ? 0.8 : 0.3) + jitter(rng), 12 + k * 4, 8, dataio::kAllSegments[k]));
    out.push_back(make_subject("s" + std::to_string(i), std::move(patches), pos ? -3.0 : 0.0));
  }
  return out;
}

}  // namespace

TEST_CASE("auc reference cases") {
  const std::vector<int> y = {1, 1, 0, 0};
  CHECK(auc_score(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y) == 1.0);
  CHECK(auc_score(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y) == 0.0);
  CHECK(auc_score(std::vector<double>{0.9, 0.4, 0.6, 0.1}, y) == 0.75);
  CHECK(auc_score(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y) == 0.5);
  CHECK_THROWS_AS(auc_score(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), ContractError);
}

TEST_CASE("auc matches pairwise counting and ignores monotone transforms") {
  Rng rng(17);
  std::uniform_int_distribution<int> coin(0, 1), level(0, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 40;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;  // coarse grid gives plenty of ties
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    const double a = auc_score(s, y);
    CHECK(std::abs(a - auc_oracle(s, y)) < 1e-12);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    CHECK(std::abs(auc_score(t, y) - a) < 1e-12);
  }
}

TEST_CASE("confusion metrics") {
  const std::vector<int> y = {1, 1, 1, 0, 0, 0, 0};
  const std::vector<int> p = {1, 0, 1, 1, 0, 0, 0};
  const std::vector<double> s = {0.9, 0.3, 0.8, 0.7, 0.2, 0.1, 0.4};
  const MetricsReport m = compute_metrics(p, s, y);
  CHECK(m.precision == doctest::Approx(2.0 / 3.0));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
  CHECK(m.accuracy == doctest::Approx(5.0 / 7.0));
  // negative class: tp 3, fp 1, fn 1
  CHECK(m.macro_f1 == doctest::Approx(0.5 * (2.0 / 3.0 + 0.75)));
  CHECK(m.auc_defined);
  CHECK(m.auc == doctest::Approx(10.0 / 12.0));  // 0.3 beats two negatives

  SUBCASE("no predicted positives") {
    const MetricsReport z = compute_metrics(std::vector<int>(7, 0), s, y);
    CHECK(z.precision == 0.0);
    CHECK(z.recall == 0.0);
    CHECK(z.f1 == 0.0);
  }
  SUBCASE("single-class labels leave AUC undefined") {
    const MetricsReport z = compute_metrics(std::vector<int>{1, 0}, std::vector<double>{0.2, 0.1},
                                            std::vector<int>{0, 0});
    CHECK_FALSE(z.auc_defined);
    CHECK(z.accuracy == 0.5);
    CHECK(nlohmann::json::parse(metrics_json(z))["auc"].is_null());
  }
}

TEST_CASE("f1 is the harmonic mean of precision and recall") {
  Rng rng(3);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> y(30), p(30);
    std::vector<double> s(30);
    for (int i = 0; i < 30; ++i) {
      y[i] = coin(rng);
      p[i] = coin(rng);
      s[i] = u(rng);
    }
    const MetricsReport m = compute_metrics(p, s, y);
    if (m.precision > 0 && m.recall > 0) {
      CHECK(m.f1 == doctest::Approx(2 * m.precision * m.recall / (m.precision + m.recall)).epsilon(1e-12));
    }
  }
}

TEST_CASE("metrics json keys") {
  MetricsReport m;
  m.auc = 0.5;
  m.auc_defined = true;
  m.seed = 7;
  const auto j = nlohmann::json::parse(metrics_json(m));
  for (const char* k : {"precision", "recall", "f1", "auc", "accuracy", "macro_f1", "seed"}) CHECK(j.contains(k));
  CHECK(j["seed"] == 7);
}

TEST_CASE("subject aggregation") {
  SUBCASE("constant positive probability") {
    const std::vector<std::vector<double>> p(7, {0.4, 0.6});
    const Aggregate a = aggregate_subject(p);
    CHECK(a.predicted == 1);
    CHECK(a.mean_probs[1] == doctest::Approx(0.6));
  }
  SUBCASE("single patch") {
    const std::vector<std::vector<double>> p = {{0.7, 0.3}};
    CHECK(aggregate_subject(p).predicted == 0);
  }
  SUBCASE("mean below one half") {
    std::vector<std::vector<double>> p;
    for (double v : {0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.75}) p.push_back({1.0 - v, v});
    const Aggregate a = aggregate_subject(p);
    CHECK(a.mean_probs[1] == doctest::Approx(3.15 / 7.0));
    CHECK(a.predicted == 0);
  }
  SUBCASE("exact tie is negative") {
    const std::vector<std::vector<double>> p = {{0.25, 0.75}, {0.75, 0.25}};
    CHECK(aggregate_subject(p).predicted == 0);
  }
  SUBCASE("dropping a patch flips only across the boundary") {
    std::vector<std::vector<double>> p;
    for (double v : {0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.1}) p.push_back({1.0 - v, v});
    CHECK(aggregate_subject(p).predicted == 1);  // mean 0.529
    p.pop_back();
    CHECK(aggregate_subject(p).predicted == 1);
    std::vector<std::vector<double>> q;
    for (double v : {0.55, 0.55, 0.55, 0.55, 0.55, 0.55, 0.1}) q.push_back({1.0 - v, v});
    CHECK(aggregate_subject(q).predicted == 0);  // mean 0.486
    q.pop_back();
    CHECK(aggregate_subject(q).predicted == 1);
  }
  CHECK_THROWS_AS(aggregate_subject(std::vector<std::vector<double>>{}), ContractError);
}

TEST_CASE("aggregation invariances") {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 7;
    std::vector<std::vector<double>> p;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = u(rng);
      p.push_back({1.0 - v, v});
    }
    const Aggregate a = aggregate_subject(p);
    CHECK(std::abs(a.mean_probs[0] + a.mean_probs[1] - 1.0) < 1e-9);
    std::shuffle(p.begin(), p.end(), rng);
    const Aggregate b = aggregate_subject(p);
    CHECK(b.predicted == a.predicted);
    CHECK(std::abs(b.mean_probs[1] - a.mean_probs[1]) < 1e-12);
  }
}

TEST_CASE("checkpoint selection") {
  CHECK(select_best(std::vector<double>{0.4}) == 0);
  CHECK(select_best(std::vector<double>{0.5, 0.7, 0.7}) == 1);
  CHECK(select_best(std::vector<double>{0.1, 0.2, 0.3, 0.4}) == 3);
  CHECK_THROWS_AS(select_best(std::vector<double>{}), ContractError);
}

TEST_CASE("subject records") {
  std::vector<dataio::BonePatch> one = {flat_patch(0.5, 4, 4, dataio::Segment::M2)};
  CHECK(make_subject("a", one, -3.0).label == 1);
  CHECK(make_subject("a", one, -2.5).label == 0);
  CHECK_THROWS_AS(make_subject("a", {}, 0.0), ContractError);
  std::vector<dataio::BonePatch> eight(8, one[0]);
  CHECK_THROWS_AS(make_subject("a", eight, 0.0), ContractError);
  SubjectRecord bad = make_subject("a", one, 0.0);
  bad.label = 1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("linear probe on separable representations") {
  const auto train = separable_subjects(30, 1), val = separable_subjects(12, 2);
  pre::Encoder enc({}, 4);
  const auto before = enc.params().flat_values();
  FinetuneConfig cfg;
  cfg.epochs = 40;
  cfg.batch = 16;
  const FinetuneResult r = finetune(enc, train, val, cfg);
  CHECK(enc.params().flat_values() == before);
  CHECK(r.val_macro_f1.size() == 40);
  CHECK(r.val_macro_f1[r.best_epoch] == 1.0);

  const auto preds = predict_subjects(enc, r.head, train, cfg.canvas);
  std::size_t correct = 0, total = 0;
  for (const auto& p : preds)
    for (double s : p.patch_scores) {
      correct += (s > 0.5) == (p.label == 1);
      ++total;
    }
  CHECK(correct == total);
  CHECK(evaluate(preds).auc == 1.0);

  const std::string csv = per_bone_csv(preds);
  CHECK(csv.rfind("segment,mean_prob,std\nulna,", 0) == 0);
}

TEST_CASE("shuffled labels give chance-level AUC") {
  // Labels independent of the pixels: the probe has nothing to find.
  Rng rng(12);
  std::uniform_real_distribution<double> u(0.2, 0.8);
  std::bernoulli_distribution pos(0.3);
  auto make = [&](std::size_t n, const std::string& tag) {
    std::vector<SubjectRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<dataio::BonePatch> patches;
      for (std::size_t k = 0; k < 3; ++k) patches.push_back(flat_patch(u(rng), 10, 10, dataio::kAllSegments[k]));
      out.push_back(make_subject(tag + std::to_string(i), std::move(patches), pos(rng) ? -3.0 : 0.0));
    }
    return out;
  };
  const auto train = make(150, "t"), val = make(30, "v"), test = make(300, "x");
  pre::Encoder enc({}, 2);
  FinetuneConfig cfg;
  cfg.epochs = 20;
  const FinetuneResult r = finetune(enc, train, val, cfg);
  const MetricsReport m = evaluate(predict_subjects(enc, r.head, test, cfg.canvas));
  CHECK(std::abs(m.auc - 0.5) < 0.1);
}

TEST_CASE("jointly supervised training") {
  const auto train = separable_subjects(24, 5), val = separable_subjects(9, 6);
  pre::Encoder enc({}, 8);
  const auto before = enc.params().flat_values();
  FinetuneConfig cfg;
  cfg.supervised_epochs = 6;
  cfg.supervised_lr = 3e-3;
  const FinetuneResult r = train_supervised(enc, train, val, cfg);
  CHECK(enc.params().flat_values() != before);
  CHECK(r.train_loss.back() < r.train_loss.front());
  CHECK(evaluate(predict_subjects(enc, r.head, val, cfg.canvas)).auc == 1.0);
}

TEST_CASE("single-class training is rejected") {
  std::vector<SubjectRecord> train;
  for (int i = 0; i < 4; ++i) train.push_back(make_subject("n" + std::to_string(i), {flat_patch(0.3, 6, 6, dataio::Segment::M1)}, 0.0));
  pre::Encoder enc({}, 1);
  CHECK_THROWS_AS(finetune(enc, train, train, FinetuneConfig{}), ContractError);
  CHECK_THROWS_AS(train_supervised(enc, train, train, FinetuneConfig{}), ContractError);
}
