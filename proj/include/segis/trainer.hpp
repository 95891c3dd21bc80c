#pragma once

// Simultaneous optimization loop (joint mode) and the independent baselines
// (seg-only, reg-only), with Adam, plateau learning-rate decay, early
// stopping and best-epoch model selection.

#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "io.hpp"
#include "losses.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "warp.hpp"

namespace segis {

enum class TrainMode { joint, seg_only, reg_only };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::joint: return "joint";
    case TrainMode::seg_only: return "seg";
    case TrainMode::reg_only: return "reg";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "joint") return TrainMode::joint;
  if (s == "seg" || s == "seg-only") return TrainMode::seg_only;
  if (s == "reg" || s == "reg-only") return TrainMode::reg_only;
  throw std::invalid_argument("unknown training mode '" + s + "' (expected joint, seg or reg)");
}

template <typename T>
struct TrainSample {
  std::string id;
  std::string subject;
  Volume<T> img_s, img_t;  // registration inputs, 1 channel
  Volume<T> seg_img_s;     // segmentation input, C_img channels
  SegmentationSet<T> seg_s, seg_t;
  AffineTransform affine;

  void validate() const {
    const Dims g = img_s.dims();
    if (img_s.channels() != 1 || img_t.channels() != 1) throw DataError("sample " + id + ": registration images must be 1-channel");
    if (img_t.dims() != g || !seg_img_s.dims().same_grid(g) || !seg_s.dims().same_grid(g) || !seg_t.dims().same_grid(g))
      throw DataError("sample " + id + ": inconsistent spatial dims");
    if (seg_s.structures() != seg_t.structures()) throw DataError("sample " + id + ": K differs between time points");
  }
};

template <typename T>
using Dataset = std::vector<TrainSample<T>>;

struct TrainConfig {
  TrainMode mode = TrainMode::joint;
  int epochs_max = 100;
  double lr0 = 1e-3;
  double decay_factor = 0.8;
  int decay_patience = 10;
  int early_stop_patience = 5;
  int samples_per_epoch = 0;  // 0: every sample each epoch
  std::uint64_t seed = 7;
  WeightSchedule schedule{};
  NetworkConfig network{};

  /// Learning rate and schedule defaults per mode: 1e-3 joint / seg, 1e-4
  /// reg; reg-only keeps alpha fixed at 10 with beta = 0.01 alpha.
  static TrainConfig defaults_for(TrainMode mode) {
    TrainConfig c;
    c.mode = mode;
    c.lr0 = mode == TrainMode::reg_only ? 1e-4 : 1e-3;
    if (mode == TrainMode::reg_only) c.schedule = WeightSchedule::constant(10.0, 0.01, 0.0);
    return c;
  }

  void validate() const {
    if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
    if (decay_patience < 1 || early_stop_patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (epochs_max < 1) throw std::invalid_argument("epochs_max must be >= 1");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw std::invalid_argument("decay_factor must be in (0, 1]");
    if (samples_per_epoch < 0) throw std::invalid_argument("samples_per_epoch must be >= 0");
  }
};

/// Weights applied to each term for one step; zero weights skip a term's
/// gradient entirely.
struct TermWeights {
  double seg = 1.0, alpha = 0.0, beta = 0.0, gamma = 0.0;
};

inline TermWeights weights_for(TrainMode mode, const WeightSchedule& s, int epoch) {
  switch (mode) {
    case TrainMode::joint: return {1.0, s.alpha(epoch), s.beta(epoch), s.gamma};
    case TrainMode::seg_only: return {1.0, 0.0, 0.0, 0.0};
    case TrainMode::reg_only: return {0.0, s.alpha(epoch), s.beta(epoch), 0.0};
  }
  return {};
}

template <typename T>
struct StepResult {
  LossBreakdown losses;
  typename Stream<T>::Params theta_grads;  // empty when theta is not run
  typename Stream<T>::Params psi_grads;    // empty when psi is not run
};

/// One pass of the training body for a single sample: segment, register,
/// compose, warp the image and the predicted segmentation once each through
/// the composite map, evaluate the weighted loss and (optionally) back-
/// propagate into both streams.
template <typename T>
StepResult<T> compute_step(const TrainSample<T>& s, const NetworkParams<T>& net, TrainMode mode, const TermWeights& w,
                           bool with_grads = true) {
  const bool run_seg = mode != TrainMode::reg_only;
  const bool run_reg = mode != TrainMode::seg_only;
  StepResult<T> r;
  r.losses.alpha = w.alpha;
  r.losses.beta = w.beta;
  r.losses.gamma = w.gamma;

  StreamTape<T> seg_tape, reg_tape;
  Volume<T> seg_pred;
  Volume<T> grad_seg_pred;
  if (run_seg) {
    seg_pred = seg_forward(net.theta, s.seg_img_s, with_grads ? &seg_tape : nullptr).volume();
    LossGrad<T> ls = soft_dice_loss(seg_pred, s.seg_s.volume());
    r.losses.l_seg = ls.value;
    grad_seg_pred = std::move(ls.grad);
    for (auto& g : grad_seg_pred.voxels()) g = static_cast<T>(w.seg * g);
  }

  if (run_reg) {
    const Volume<T> aligned = affine_align(s.img_s, s.affine);
    const DisplacementField<T> u = reg_forward(net.psi, s.img_t, aligned, with_grads ? &reg_tape : nullptr);
    const SamplingMap<T> map = compose(s.affine, u);
    const Volume<T> warped_img = trilinear_warp(s.img_s, map);
    LossGrad<T> lr = mse_loss(s.img_t, warped_img);
    LossGrad<T> ld = smoothness_loss(u);
    r.losses.l_reg = lr.value;
    r.losses.l_def = ld.value;

    Volume<T> grad_map(map.dims(), T(0));
    if (with_grads && w.alpha != 0.0) {
      for (auto& g : lr.grad.voxels()) g = static_cast<T>(w.alpha * g);
      grad_map = trilinear_warp_grad(s.img_s, map, lr.grad).grad_map;
    }
    if (run_seg) {
      const Volume<T> warped_seg = trilinear_warp(seg_pred, map);
      CompositeDiceResult<T> lc = composite_dice_loss(s.seg_t.volume(), seg_pred, map, &warped_seg);
      r.losses.l_com = lc.value;
      if (with_grads && w.gamma != 0.0) {
        for (std::size_t i = 0; i < grad_map.size(); ++i) grad_map[i] += static_cast<T>(w.gamma * lc.grad_map[i]);
        for (std::size_t i = 0; i < grad_seg_pred.size(); ++i)
          grad_seg_pred[i] += static_cast<T>(w.gamma * lc.grad_pred[i]);
      }
    }
    if (with_grads) {
      DisplacementField<T> grad_u = compose_backward(s.affine, grad_map);
      if (w.beta != 0.0)
        for (std::size_t i = 0; i < grad_u.field.size(); ++i) grad_u.field[i] += static_cast<T>(w.beta * ld.grad[i]);
      r.psi_grads = net.psi.zero_grads();
      net.psi.backward(reg_tape, grad_u.field, r.psi_grads);
    }
  }
  if (run_seg && with_grads) {
    r.theta_grads = net.theta.zero_grads();
    net.theta.backward(seg_tape, grad_seg_pred, r.theta_grads);
  }
  r.losses.total = w.seg * r.losses.l_seg + w.alpha * r.losses.l_reg + w.beta * r.losses.l_def + w.gamma * r.losses.l_com;
  return r;
}

template <typename T>
struct TrainState {
  NetworkParams<T> net;
  OptimizerState<T> theta_opt;
  OptimizerState<T> psi_opt;

  TrainState() = default;
  explicit TrainState(NetworkParams<T> n) : net(std::move(n)), theta_opt(net.theta), psi_opt(net.psi) {}
};

struct SampleLog {
  int epoch = 0;
  std::string sample;
  LossBreakdown losses;
};

/// Mean of breakdowns, term by term.
inline LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& rows) {
  LossBreakdown m;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.l_seg += r.l_seg;
    m.l_reg += r.l_reg;
    m.l_def += r.l_def;
    m.l_com += r.l_com;
    m.total += r.total;
  }
  const double n = static_cast<double>(rows.size());
  m.l_seg /= n;
  m.l_reg /= n;
  m.l_def /= n;
  m.l_com /= n;
  m.total /= n;
  m.alpha = rows.front().alpha;
  m.beta = rows.front().beta;
  m.gamma = rows.front().gamma;
  return m;
}

/// One epoch: seeded shuffle, then one Adam step per sample (batch size 1)
/// over the first samples_per_epoch of the shuffled order.
template <typename T>
LossBreakdown train_epoch(const Dataset<T>& data, TrainState<T>& state, const TrainConfig& cfg, int epoch, double lr,
                          std::vector<SampleLog>* log = nullptr) {
  if (data.empty()) throw DataError("train_epoch: empty dataset");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(derive_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  if (cfg.samples_per_epoch > 0 && static_cast<std::size_t>(cfg.samples_per_epoch) < order.size())
    order.resize(static_cast<std::size_t>(cfg.samples_per_epoch));
  const TermWeights w = weights_for(cfg.mode, cfg.schedule, epoch);
  std::vector<LossBreakdown> rows;
  rows.reserve(data.size());
  for (std::size_t idx : order) {
    StepResult<T> r = compute_step(data[idx], state.net, cfg.mode, w);
    if (!r.theta_grads.empty()) adam_step(state.net.theta, r.theta_grads, state.theta_opt, lr);
    if (!r.psi_grads.empty()) adam_step(state.net.psi, r.psi_grads, state.psi_opt, lr);
    rows.push_back(r.losses);
    if (log) log->push_back({epoch, data[idx].id, r.losses});
  }
  return mean_breakdown(rows);
}

/// Validation weighting: the schedule's plateau values, fixed across epochs
/// so that totals of different epochs are comparable.
inline TermWeights validation_weights(const TrainConfig& cfg) {
  const WeightSchedule& s = cfg.schedule;
  return weights_for(cfg.mode, WeightSchedule::constant(s.alpha_max, s.beta_ratio, s.gamma), 0);
}

/// Mean validation breakdown at the current network weights (no updates).
template <typename T>
LossBreakdown validation_loss(const Dataset<T>& data, const NetworkParams<T>& net, const TrainConfig& cfg) {
  if (data.empty()) throw DataError("validation: empty dataset");
  const TermWeights w = validation_weights(cfg);
  std::vector<LossBreakdown> rows;
  for (const auto& s : data) rows.push_back(compute_step(s, net, cfg.mode, w, false).losses);
  return mean_breakdown(rows);
}

/// Plateau decay: multiply lr by decay_factor each time the best validation
/// loss has gone decay_patience epochs without improving.
inline double lr_decay_check(const std::vector<double>& history, double lr, const TrainConfig& cfg) {
  if (history.empty()) return lr;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] < history[best]) best = i;
  const std::size_t since = history.size() - 1 - best;
  if (since > 0 && since % static_cast<std::size_t>(cfg.decay_patience) == 0) return lr * cfg.decay_factor;
  return lr;
}

/// True once the last `patience` epochs were each an increase over their
/// predecessor.
inline bool should_stop_early(const std::vector<double>& history, int patience) {
  if (history.size() < static_cast<std::size_t>(patience) + 1) return false;
  for (std::size_t i = history.size() - patience; i < history.size(); ++i)
    if (!(history[i] > history[i - 1])) return false;
  return true;
}

/// Index of the minimum validation loss (first on ties).
inline std::size_t best_epoch(const std::vector<double>& history) {
  if (history.empty()) throw std::invalid_argument("best_epoch: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] < history[best]) best = i;
  return best;
}

/// Model selection over per-epoch snapshots: the snapshot at the minimum
/// validation loss.
template <typename P>
const P& early_stop_and_select(const std::vector<double>& history, const std::vector<P>& checkpoints) {
  if (history.empty() || history.size() != checkpoints.size())
    throw std::invalid_argument("early_stop_and_select: history/checkpoint size mismatch");
  return checkpoints[best_epoch(history)];
}

template <typename T>
void check_split_hygiene(const std::vector<const Dataset<T>*>& splits) {
  std::vector<std::set<std::string>> subjects;
  for (const auto* d : splits) {
    std::set<std::string> s;
    for (const auto& x : *d) s.insert(x.subject);
    for (const auto& prev : subjects)
      for (const auto& id : s)
        if (prev.count(id)) throw DataError("subject '" + id + "' appears in more than one split");
    subjects.push_back(std::move(s));
  }
}

struct ValRow {
  int epoch = 0;
  double total = 0.0;
  double lr = 0.0;
  double alpha = 0.0;
};

template <typename T>
struct TrainResult {
  NetworkParams<T> best;
  int best_epoch = 0;
  double best_val = 0.0;
  int epochs_run = 0;
  std::string stop_reason;
  std::vector<SampleLog> train_log;
  std::vector<ValRow> val_log;
};

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string train_log_csv(const std::vector<SampleLog>& rows) {
  std::ostringstream out;
  out << "epoch,sample,l_seg,l_reg,l_def,l_com,alpha,beta,gamma,total\n";
  for (const auto& r : rows) {
    const auto& b = r.losses;
    out << r.epoch << ',' << r.sample << ',' << fmt_num(b.l_seg) << ',' << fmt_num(b.l_reg) << ',' << fmt_num(b.l_def)
        << ',' << fmt_num(b.l_com) << ',' << fmt_num(b.alpha) << ',' << fmt_num(b.beta) << ',' << fmt_num(b.gamma) << ','
        << fmt_num(b.total) << '\n';
  }
  return out.str();
}

inline std::string val_log_csv(const std::vector<ValRow>& rows) {
  std::ostringstream out;
  out << "epoch,total,lr,alpha\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << fmt_num(r.total) << ',' << fmt_num(r.lr) << ',' << fmt_num(r.alpha) << '\n';
  return out.str();
}

inline Checkpoint make_checkpoint(const NetworkParams<float>& net, const TrainConfig& cfg, int epoch) {
  Checkpoint ck;
  ck.config = cfg.network;
  ck.mode = to_string(cfg.mode);
  ck.epoch = epoch;
  ck.seed = cfg.seed;
  if (cfg.mode != TrainMode::reg_only) ck.theta = net.theta;
  if (cfg.mode != TrainMode::seg_only) ck.psi = net.psi;
  return ck;
}

struct TrainHooks {
  /// Called after each epoch with (epoch, train mean, validation mean, lr).
  std::function<void(int, const LossBreakdown&, const LossBreakdown&, double)> on_epoch;
};

/// Full training run. When `out_dir` is set, writes train_log.csv,
/// val_log.csv, checkpoint_best / checkpoint_last and summary.json.
inline TrainResult<float> train(const Dataset<float>& train_set, const Dataset<float>& val_set, const TrainConfig& cfg,
                                const std::optional<fs::path>& out_dir = std::nullopt, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("empty training set");
  if (val_set.empty()) throw DataError("empty validation set");
  check_split_hygiene<float>({&train_set, &val_set});
  for (const auto& s : train_set) s.validate();
  for (const auto& s : val_set) s.validate();

  TrainState<float> state(init_network<float>(cfg.network, cfg.seed));
  TrainResult<float> result;
  std::vector<double> history;
  double lr = cfg.lr0;
  result.stop_reason = "epochs_max";
  for (int epoch = 0; epoch < cfg.epochs_max; ++epoch) {
    const LossBreakdown tr = train_epoch(train_set, state, cfg, epoch, lr, &result.train_log);
    const LossBreakdown val = validation_loss(val_set, state.net, cfg);
    history.push_back(val.total);
    result.val_log.push_back({epoch, val.total, lr, tr.alpha});
    result.epochs_run = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(epoch, tr, val, lr);
    const bool improved = best_epoch(history) == history.size() - 1;
    if (improved) {
      result.best = state.net;
      result.best_epoch = epoch;
      result.best_val = val.total;
    }
    if (out_dir) {
      save_checkpoint(make_checkpoint(state.net, cfg, epoch), *out_dir / "checkpoint_last");
      if (improved) save_checkpoint(make_checkpoint(state.net, cfg, epoch), *out_dir / "checkpoint_best");
    }
    if (should_stop_early(history, cfg.early_stop_patience)) {
      result.stop_reason = "early_stop";
      break;
    }
    lr = lr_decay_check(history, lr, cfg);
  }
  if (out_dir) {
    write_file_atomic(*out_dir / "train_log.csv", train_log_csv(result.train_log));
    write_file_atomic(*out_dir / "val_log.csv", val_log_csv(result.val_log));
    write_json_atomic(*out_dir / "summary.json", {{"mode", to_string(cfg.mode)},
                                                  {"best_epoch", result.best_epoch},
                                                  {"best_val_loss", result.best_val},
                                                  {"epochs_run", result.epochs_run},
                                                  {"stop_reason", result.stop_reason}});
  }
  return result;
}

}  // namespace segis
