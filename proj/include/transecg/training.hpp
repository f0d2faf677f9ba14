#pragma once

// Loss, dataset splits, the optimization loop and classification metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "transecg/data_io.hpp"
#include "transecg/log.hpp"
#include "transecg/optim.hpp"
#include "transecg/vit.hpp"

namespace transecg {

struct LabeledWindow {
  EcgWindow window;
  std::size_t label = 0;
};

inline constexpr double kProbFloor = 1e-12;

// Mean categorical cross-entropy of probability rows [B, K]; probabilities
// are clamped at 1e-12 before the log.
inline nn::Tensor cross_entropy(const nn::Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    throw std::invalid_argument("cross_entropy: probs " + nn::to_string(probs.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    if (labels[i] >= K) throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) + " >= K");
    const double p = probs[i * K + labels[i]];
    if (!std::isfinite(p)) throw std::runtime_error("cross_entropy: non-finite probability in row " + std::to_string(i));
    loss -= std::log(std::max(p, kProbFloor));
  }
  loss /= static_cast<double>(B);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return nn::detail::make_result("cross_entropy", {}, {loss}, {probs.node()},
                                 [B, K, lab = std::move(lab)](const auto& in, nn::detail::Node& o) {
                                   in[0]->ensure_grad();
                                   for (std::size_t i = 0; i < B; ++i) {
                                     const std::size_t j = i * K + lab[i];
                                     const double p = in[0]->data[j];
                                     if (p > kProbFloor)
                                       in[0]->grad[j] -= o.grad[0] / (static_cast<double>(B) * p);
                                   }
                                 });
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { by_participant, within_participant };

struct SplitPlan {
  std::vector<std::size_t> train, val, test;  // indices into the input windows
  SplitMode mode = SplitMode::by_participant;
  std::vector<std::string> excluded_subjects;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// gender/age: whole participants go to one split (70/15/15 of participants by default).
// id: every participant contributes windows to all three splits; those with
// fewer than 3 windows are dropped.
inline SplitPlan make_split(std::span<const LabeledWindow> windows, Task task, std::uint64_t seed,
                            double train_frac = 0.70, double val_frac = 0.15) {
  if (windows.size() < 3) throw std::invalid_argument("make_split: need at least 3 windows");
  if (!(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0))
    throw std::invalid_argument("make_split: fractions must be positive and leave room for a test split");
  const double test_frac = 1.0 - train_frac - val_frac;
  // Canonical order: (subject_id, offset).
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(windows[a].window.subject_id, windows[a].window.source_offset) <
           std::tie(windows[b].window.subject_id, windows[b].window.source_offset);
  });
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i : order) by_subject[windows[i].window.subject_id].push_back(i);

  std::mt19937_64 rng(splitmix64(seed));
  SplitPlan plan;
  if (task != Task::participant_id) {
    plan.mode = SplitMode::by_participant;
    std::vector<std::string> ids;
    for (const auto& kv : by_subject) ids.push_back(kv.first);
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::size_t n = ids.size();
    std::size_t n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    for (std::size_t k = 0; k < n; ++k) {
      auto& dst = k < n_train ? plan.train : (k < n_train + n_val ? plan.val : plan.test);
      const auto& w = by_subject[ids[k]];
      dst.insert(dst.end(), w.begin(), w.end());
    }
  } else {
    plan.mode = SplitMode::within_participant;
    for (auto& [id, w] : by_subject) {
      if (w.size() < 3) {
        warn("participant '" + id + "' has " + std::to_string(w.size()) + " windows (< 3); excluded from id split");
        plan.excluded_subjects.push_back(id);
        continue;
      }
      auto idx = w;
      std::shuffle(idx.begin(), idx.end(), rng);
      const std::size_t n = idx.size();
      const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n))));
      const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n))));
      if (n_val + n_test >= n) {
        warn("participant '" + id + "' has too few windows for the id split; excluded");
        plan.excluded_subjects.push_back(id);
        continue;
      }
      const std::size_t n_train = n - n_val - n_test;
      plan.train.insert(plan.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
      plan.val.insert(plan.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                      idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
      plan.test.insert(plan.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Metrics

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), from (0,0) to (1,1)
  std::optional<double> auc;                      // absent when a class side is empty
};

struct Metrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro
  std::vector<double> class_precision, class_recall, class_f1;
  std::vector<std::size_t> support;
  std::vector<RocCurve> roc;
  std::vector<std::size_t> flagged_classes;  // absent from ground truth
  std::vector<std::size_t> top_classes;      // highest test support (id task)
};

// One-vs-rest ROC with tied scores grouped; AUC by the trapezoidal rule.
inline RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  RocCurve c;
  const std::size_t P = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), std::uint8_t{1}));
  const std::size_t N = positive.size() - P;
  if (P == 0 || N == 0) return c;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  c.points.emplace_back(0.0, 0.0);
  std::size_t tp = 0, fp = 0;
  double area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (positive[idx[i]] ? tp : fp)++;
    const auto [x0, y0] = c.points.back();
    const double x1 = static_cast<double>(fp) / static_cast<double>(N);
    const double y1 = static_cast<double>(tp) / static_cast<double>(P);
    area += (x1 - x0) * (y0 + y1) / 2.0;
    c.points.emplace_back(x1, y1);
  }
  c.auc = area;
  return c;
}

inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

// probs: row-major [n, K].
inline Metrics compute_metrics(std::span<const double> probs, std::span<const std::size_t> labels, std::size_t K,
                               std::size_t top_k = 0) {
  const std::size_t n = labels.size();
  if (n == 0) throw std::invalid_argument("compute_metrics: empty set");
  if (probs.size() != n * K) throw std::invalid_argument("compute_metrics: probs size mismatch");
  Metrics m;
  m.n = n;
  std::vector<std::size_t> tp(K, 0), predicted(K, 0);
  m.support.assign(K, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = argmax_row(probs.subspan(i * K, K));
    ++predicted[pred];
    ++m.support[labels[i]];
    if (pred == labels[i]) {
      ++correct;
      ++tp[pred];
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  for (std::size_t k = 0; k < K; ++k) {
    double p = 0.0, r = 0.0;
    if (m.support[k] == 0) {
      m.flagged_classes.push_back(k);
    } else {
      p = predicted[k] ? static_cast<double>(tp[k]) / static_cast<double>(predicted[k]) : 0.0;
      r = static_cast<double>(tp[k]) / static_cast<double>(m.support[k]);
    }
    const double f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    m.class_precision.push_back(p);
    m.class_recall.push_back(r);
    m.class_f1.push_back(f);
    m.precision += p / static_cast<double>(K);
    m.recall += r / static_cast<double>(K);
    m.f1 += f / static_cast<double>(K);

    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probs[i * K + k];
      pos[i] = labels[i] == k;
    }
    m.roc.push_back(roc_curve(scores, pos));
  }
  if (top_k > 0) {
    std::vector<std::size_t> cls(K);
    std::iota(cls.begin(), cls.end(), 0);
    std::stable_sort(cls.begin(), cls.end(), [&](std::size_t a, std::size_t b) { return m.support[a] > m.support[b]; });
    cls.resize(std::min(top_k, K));
    m.top_classes = cls;
  }
  return m;
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  j["precision_macro"] = m.precision;
  j["recall_macro"] = m.recall;
  j["f1_macro"] = m.f1;
  j["class_precision"] = m.class_precision;
  j["class_recall"] = m.class_recall;
  j["class_f1"] = m.class_f1;
  j["support"] = m.support;
  j["flagged_classes"] = m.flagged_classes;
  j["top_classes"] = m.top_classes;
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& c : m.roc) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& [x, y] : c.points) pts.push_back({x, y});
    roc.push_back({{"auc", c.auc ? nlohmann::json(*c.auc) : nlohmann::json(nullptr)}, {"points", pts}});
  }
  j["roc"] = roc;
  return j;
}

struct Evaluation {
  Metrics metrics;
  double loss = 0.0;
  std::vector<double> probs;  // row-major [n, K]
};

inline Evaluation evaluate(const VitModel& model, std::span<const LabeledWindow> data,
                           std::span<const std::size_t> indices, std::size_t batch_size = 32,
                           std::size_t top_k = 0) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty set");
  const std::size_t K = model.config.n_classes;
  Evaluation ev;
  std::vector<std::size_t> labels;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    std::vector<const EcgWindow*> ws;
    std::vector<std::size_t> lab;
    for (std::size_t i = start; i < end; ++i) {
      ws.push_back(&data[indices[i]].window);
      lab.push_back(data[indices[i]].label);
    }
    nn::NoGradGuard guard;
    const auto fa = model.infer(ws);
    loss_sum += cross_entropy(fa.probs, lab).item() * static_cast<double>(lab.size());
    ev.probs.insert(ev.probs.end(), fa.probs.data().begin(), fa.probs.data().end());
    labels.insert(labels.end(), lab.begin(), lab.end());
  }
  ev.loss = loss_sum / static_cast<double>(indices.size());
  ev.metrics = compute_metrics(ev.probs, labels, K, top_k);
  return ev;
}

inline Evaluation evaluate(const VitModel& model, std::span<const LabeledWindow> data, std::size_t batch_size = 32,
                           std::size_t top_k = 0) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate(model, data, all, batch_size, top_k);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 45;
  bool early_stopping = true;
  std::size_t early_stop_patience = 10;
  double scheduler_factor = 0.5;
  std::size_t scheduler_patience = 5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t top_k = 0;  // top-support classes to report (id task)
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // on the stochastic training passes
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  bool early_stopped = false;
  std::optional<Metrics> test;
};

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : r.epochs)
    eps.push_back({{"epoch", e.epoch},
                   {"lr", e.lr},
                   {"train_loss", e.train_loss},
                   {"train_accuracy", e.train_accuracy},
                   {"val_loss", e.val_loss},
                   {"val_accuracy", e.val_accuracy}});
  nlohmann::json j{{"epochs", eps},
                   {"best_epoch", r.best_epoch},
                   {"best_val_accuracy", r.best_val_accuracy},
                   {"early_stopped", r.early_stopped}};
  j["test_metrics"] = r.test ? to_json(*r.test) : nlohmann::json(nullptr);
  return j;
}

// Trains in place; on return model.params hold the best-validation snapshot.
// lr is halved after scheduler_patience epochs without a strict val-accuracy
// improvement; training stops after early_stop_patience such epochs.
inline TrainReport train(VitModel& model, std::span<const LabeledWindow> data, const SplitPlan& plan,
                         const TrainOptions& opt) {
  if (plan.train.empty() || plan.val.empty())
    throw std::invalid_argument("train: train and validation sets must be non-empty");
  if (opt.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  model.config.validate();
  for (std::size_t i : plan.train)
    if (data[i].label >= model.config.n_classes)
      throw std::invalid_argument("train: label " + std::to_string(data[i].label) + " outside vocabulary");

  model.params.set_requires_grad(true);
  nn::AdamW optim(model.params.tensors(),
                  {opt.lr, opt.beta1, opt.beta2, opt.adam_eps, opt.weight_decay});
  TrainReport report;
  VitParams best = model.params.clone();
  double best_acc = -1.0;
  std::size_t since_best = 0, since_reduce = 0;

  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    std::mt19937_64 rng(splitmix64(opt.seed ^ splitmix64(epoch)));
    auto order = plan.train;
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = optim.lr();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::vector<const EcgWindow*> ws;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        ws.push_back(&data[order[i]].window);
        labels.push_back(data[order[i]].label);
      }
      nn::Tape::current().clear();
      const auto fa = forward(stack_windows(ws, model.config.seq_len), model.params, model.config, true, false, &rng);
      nn::Tensor loss;
      try {
        loss = cross_entropy(fa.probs, labels);
      } catch (const std::runtime_error& e) {
        nn::Tape::current().clear();
        throw std::runtime_error("train: epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no) +
                                 ": " + e.what());
      }
      if (!std::isfinite(loss.item())) {
        nn::Tape::current().clear();
        throw std::runtime_error("train: NaN loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_no));
      }
      nn::backward(loss);
      optim.step();
      optim.zero_grad();
      loss_sum += loss.item() * static_cast<double>(labels.size());
      for (std::size_t b = 0; b < labels.size(); ++b)
        if (argmax_row(fa.probs.data().subspan(b * model.config.n_classes, model.config.n_classes)) == labels[b])
          ++correct;
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());

    const auto val = evaluate(model, data, plan.val, opt.batch_size);
    rec.val_loss = val.loss;
    rec.val_accuracy = val.metrics.accuracy;
    report.epochs.push_back(rec);

    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      report.best_epoch = epoch;
      best = model.params.clone();
      since_best = 0;
      since_reduce = 0;
    } else {
      ++since_best;
      ++since_reduce;
      if (opt.scheduler_patience > 0 && since_reduce >= opt.scheduler_patience) {
        optim.set_lr(optim.lr() * opt.scheduler_factor);
        since_reduce = 0;
      }
      if (opt.early_stopping && since_best >= opt.early_stop_patience) {
        report.early_stopped = true;
        break;
      }
    }
  }

  // Copy the best snapshot back into the live tensors.
  const auto live = model.params.tensors();
  const auto snap = best.tensors();
  for (std::size_t k = 0; k < live.size(); ++k) {
    auto dst = nn::Tensor(live[k]).mutable_data();
    std::copy(snap[k].data().begin(), snap[k].data().end(), dst.begin());
  }
  report.best_val_accuracy = best_acc;
  if (!plan.test.empty()) report.test = evaluate(model, data, plan.test, opt.batch_size, opt.top_k).metrics;
  return report;
}

}  // namespace transecg
