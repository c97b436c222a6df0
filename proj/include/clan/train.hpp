#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "clan/checkpoint.hpp"
#include "clan/config.hpp"
#include "clan/data.hpp"
#include "clan/model.hpp"

namespace clan {

struct BranchSubset {
  std::string name;  // e.g. "G+A2+CLSA"
  std::vector<std::string> branches;
};

inline BranchSubset make_subset(std::vector<std::string> branches) {
  BranchSubset s;
  for (std::size_t i = 0; i < branches.size(); ++i) s.name += (i ? "+" : "") + branches[i];
  s.branches = std::move(branches);
  return s;
}

/// Every single branch, then G with middle branches added from the deepest
/// tap downwards (G+P, G+P+A, ...), then all branches.
inline std::vector<BranchSubset> default_subsets(const std::vector<std::string>& branches) {
  std::vector<BranchSubset> out;
  for (const auto& b : branches) out.push_back(make_subset({b}));
  std::vector<std::string> mids;
  for (const auto& b : branches)
    if (b.size() > 1 && b[0] == 'A') mids.push_back(b);
  std::vector<std::string> acc{"G"};
  for (auto it = mids.rbegin(); it != mids.rend(); ++it) {
    acc.push_back(*it);
    out.push_back(make_subset(acc));
  }
  if (std::find(branches.begin(), branches.end(), "CLSA") != branches.end()) {
    acc.push_back("CLSA");
    out.push_back(make_subset(acc));
  }
  return out;
}

/// Parses "G+A2,CLSA,all": comma-separated subsets of '+'-joined branch
/// names; "all" selects every branch.
inline std::vector<BranchSubset> parse_subsets(const std::string& spec, const std::vector<std::string>& branches) {
  std::vector<BranchSubset> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    if (item == "all") {
      out.push_back(make_subset(branches));
      continue;
    }
    std::vector<std::string> names;
    std::stringstream parts(item);
    std::string name;
    while (std::getline(parts, name, '+')) {
      name = detail::trim(name);
      if (std::find(branches.begin(), branches.end(), name) == branches.end()) throw UsageError("unknown branch '" + name + "'");
      names.push_back(name);
    }
    if (names.empty()) throw UsageError("empty branch subset in '" + spec + "'");
    out.push_back(make_subset(std::move(names)));
  }
  if (out.empty()) throw UsageError("no branch subsets given");
  return out;
}

/// Test accuracy of each subset, evaluated in fixed-size chunks without
/// recording a graph.
template <typename T>
std::vector<double> evaluate(const ClanModel<T>& model, const std::vector<Sample>& data, const std::vector<BranchSubset>& subsets,
                             std::size_t chunk = 100) {
  NoGradGuard no_grad;
  std::vector<std::size_t> correct(subsets.size(), 0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Batch<T> b = make_batch<T>(data, idx);
    const BranchOutputs<T> out = clan_forward(model, b.images);
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      const auto pred = clan_predict(out, subsets[s].branches);
      for (std::size_t i = 0; i < pred.size(); ++i) correct[s] += pred[i] == b.labels[i];
    }
  }
  std::vector<double> acc;
  for (auto c : correct) acc.push_back(double(c) / double(data.size()));
  return acc;
}

/// SGD with momentum, weight decay folded into the step:
/// v <- mu v + g;  w <- w - lr v - lr wd w.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
    for (auto [name, w] : params) {
      auto& v = velocity_[name];
      if (v.size() != w.numel()) v.assign(w.numel(), T(0));
      const std::vector<T> g = w.grad();
      auto data = w.data();
      const T mu = T(momentum_), step = T(lr), decay = T(lr * weight_decay_);
      for (std::size_t i = 0; i < data.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        data[i] = data[i] - step * v[i] - decay * data[i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<T>> velocity_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  std::vector<double> accuracy;  // one per subset
};

template <typename T>
struct TrainResult {
  ClanModel<T> model;
  std::vector<BranchSubset> subsets;
  std::vector<EpochRecord> history;
};

inline std::string csv_header(const std::vector<BranchSubset>& subsets) {
  std::string h = "epoch,lr,train_loss";
  for (const auto& s : subsets) h += ",acc_" + s.name;
  return h + "\n";
}

inline std::string csv_row(const EpochRecord& r) {
  std::string row = std::to_string(r.epoch) + "," + detail::format_double(r.lr) + "," + detail::format_double(r.train_loss);
  for (double a : r.accuracy) row += "," + detail::format_double(a);
  return row + "\n";
}

/// Full training run. When `out_dir` is non-empty, writes train_log.csv,
/// config.ini and checkpoint.clan (refreshed every epoch) there. Throws
/// NumericError when the loss stops being finite.
template <typename T>
TrainResult<T> train(const RunConfig& cfg, std::ostream* log, const std::string& out_dir) {
  const auto train_set = synth_generate(cfg.data, Split::Train);
  const auto test_set = synth_generate(cfg.data, Split::Test);
  TrainResult<T> result{ClanModel<T>::init(cfg.model, cfg.seed), {}, {}};
  ClanModel<T>& model = result.model;
  result.subsets = default_subsets(model.branches);
  model.set_requires_grad(true);
  const auto trainable = model.trainable_parameters();
  const auto weights = model.loss_weights();
  Sgd<T> sgd(cfg.optim.momentum, cfg.optim.weight_decay);

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/config.ini") << serialize_config(cfg);
    csv.open(out_dir + "/train_log.csv", std::ios::trunc);
    csv << csv_header(result.subsets);
  }

  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const double lr = cfg.optim.lr_at(epoch);
    double loss_sum = 0;
    for (const auto& batch : iterate_batches<T>(train_set, cfg.optim.batch, cfg.seed, epoch)) {
      model.zero_grad();
      const Tensor<T> loss = clan_loss(clan_forward(model, batch.images), batch.labels, weights);
      const double value = double(loss.item());
      if (!std::isfinite(value)) throw NumericError("loss became non-finite in epoch " + std::to_string(epoch + 1));
      backward(loss);
      sgd.step(trainable, lr);
      loss_sum += value * double(batch.labels.size());
    }
    EpochRecord rec{epoch + 1, lr, loss_sum / double(train_set.size()), evaluate(model, test_set, result.subsets)};
    if (log) {
      *log << "epoch=" << rec.epoch << " lr=" << detail::format_double(lr) << " train_loss=" << detail::format_double(rec.train_loss);
      for (std::size_t s = 0; s < result.subsets.size(); ++s) *log << " acc_" << result.subsets[s].name << "=" << detail::format_double(rec.accuracy[s]);
      *log << "\n" << std::flush;
    }
    if (!out_dir.empty()) {
      csv << csv_row(rec) << std::flush;
      write_checkpoint(out_dir + "/checkpoint.clan", model.state());
    }
    result.history.push_back(std::move(rec));
  }
  model.set_requires_grad(false);
  model.zero_grad();
  return result;
}

}  // namespace clan
