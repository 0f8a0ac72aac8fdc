// SPDX-License-Identifier: Apache-2.0
#include "scob/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <variant>

#include "scob/binary_io.hpp"
#include "scob/error.hpp"
#include "scob/ops.hpp"

namespace scob {

// ---- config -----------------------------------------------------------------

namespace {

using Field = std::variant<int TrainConfig::*, Real TrainConfig::*, bool TrainConfig::*, std::uint64_t TrainConfig::*,
                           std::string TrainConfig::*, std::vector<int> TrainConfig::*>;

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table{
      {"epochs", &TrainConfig::epochs},
      {"batch_size", &TrainConfig::batch_size},
      {"lr_estimator", &TrainConfig::lr_estimator},
      {"lr_smt", &TrainConfig::lr_smt},
      {"lr_head", &TrainConfig::lr_head},
      {"lr_backbone", &TrainConfig::lr_backbone},
      {"adam_beta1", &TrainConfig::adam_beta1},
      {"adam_beta2", &TrainConfig::adam_beta2},
      {"adam_eps", &TrainConfig::adam_eps},
      {"gamma_cam", &TrainConfig::gamma_cam},
      {"cam_window", &TrainConfig::cam_window},
      {"tau", &TrainConfig::tau},
      {"lambda_c", &TrainConfig::lambda_c},
      {"alpha", &TrainConfig::alpha},
      {"negatives_k", &TrainConfig::negatives_k},
      {"ipt_capacity", &TrainConfig::ipt_capacity},
      {"xi", &TrainConfig::xi},
      {"prior_k", &TrainConfig::prior_k},
      {"seed", &TrainConfig::seed},
      {"no_cl", &TrainConfig::no_cl},
      {"no_cam", &TrainConfig::no_cam},
      {"no_smt", &TrainConfig::no_smt},
      {"random_negatives", &TrainConfig::random_negatives},
      {"joint_optim", &TrainConfig::joint_optim},
      {"two_stage", &TrainConfig::two_stage},
      {"gt_masks", &TrainConfig::gt_masks},
      {"momentum_per_step", &TrainConfig::momentum_per_step},
      {"augment", &TrainConfig::augment},
      {"wall_clock", &TrainConfig::wall_clock},
      {"eval_masks", &TrainConfig::eval_masks},
      {"threshold", &TrainConfig::threshold},
      {"widths", &TrainConfig::widths},
      {"d_model", &TrainConfig::d_model},
      {"smt_layers", &TrainConfig::smt_layers},
      {"heads", &TrainConfig::heads},
      {"hidden_dim", &TrainConfig::hidden_dim},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return v;
}

std::string format_real(Real v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  for (const auto& [name, field] : fields()) {
    if (name != key) continue;
    std::visit(
        [&](auto ptr) {
          using T = std::remove_reference_t<decltype(this->*ptr)>;
          T& dst = this->*ptr;
          if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") {
              dst = true;
            } else if (value == "false" || value == "0") {
              dst = false;
            } else {
              throw ConfigError("bad value for " + key + ": '" + value + "' (expected true/false)");
            }
          } else if constexpr (std::is_same_v<T, std::string>) {
            dst = value;
          } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            std::vector<int> out;
            std::stringstream ss(value);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
            dst = std::move(out);
          } else {
            dst = parse_number<T>(key, value);
          }
        },
        field);
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::merge_text(std::istream& is) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  TrainConfig c;
  c.merge_text(in);
  return c;
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [name, field] : fields()) {
    out += name + "=";
    std::visit(
        [&](auto ptr) {
          using T = std::remove_cvref_t<decltype(this->*ptr)>;
          const T& v = this->*ptr;
          if constexpr (std::is_same_v<T, bool>) {
            out += v ? "true" : "false";
          } else if constexpr (std::is_same_v<T, std::string>) {
            out += v;
          } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
          } else if constexpr (std::is_floating_point_v<T>) {
            out += format_real(v);
          } else {
            out += std::to_string(v);
          }
        },
        field);
    out += "\n";
  }
  return out;
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.first);
  return k;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  for (Real r : {lr_estimator, lr_smt, lr_head, lr_backbone}) {
    if (!(r > 0)) throw ConfigError("learning rates must be > 0");
  }
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0)) {
    throw ConfigError("bad Adam hyperparameters");
  }
  if (!(gamma_cam >= 0 && gamma_cam <= 1)) throw ConfigError("gamma_cam must lie in [0, 1]");
  if (cam_window < 1 || cam_window % 2 == 0) throw ConfigError("cam_window must be odd and >= 1");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
  if (negatives_k < 1) throw ConfigError("negatives_k must be >= 1");
  if (ipt_capacity < 1) throw ConfigError("ipt_capacity must be >= 1");
  if (!(xi >= 0 && xi < 0.5)) throw ConfigError("xi must lie in [0, 0.5)");
  if (prior_k < 0) throw ConfigError("prior_k must be >= 0");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
  if (eval_masks != "cam" && eval_masks != "zero") throw ConfigError("eval_masks must be cam or zero");
  if (no_cl && random_negatives) throw ConfigError("random_negatives has no effect with no_cl");
  if (gt_masks && (no_cam || joint_optim || two_stage)) {
    throw ConfigError("gt_masks excludes no_cam, joint_optim and two_stage");
  }
  if (no_cam && (joint_optim || two_stage)) throw ConfigError("joint_optim and two_stage need CAM masks");
  contrastive().validate();
  network(2, 64).validate();
}

NetworkConfig TrainConfig::network(int num_classes, int image_size) const {
  NetworkConfig n;
  if (widths.size() != n.backbone.widths.size()) throw ConfigError("widths needs exactly 4 entries");
  std::copy(widths.begin(), widths.end(), n.backbone.widths.begin());
  n.backbone.input_size = image_size;
  n.smt.d_model = d_model;
  n.smt.num_layers = smt_layers;
  n.smt.num_heads = heads;
  n.smt.hidden_dim = hidden_dim;
  n.num_classes = num_classes;
  n.head = no_smt ? HeadKind::Convolutional : HeadKind::MaskedTransformer;
  return n;
}

GroupRates TrainConfig::rates() const { return {lr_backbone, lr_smt, lr_head}; }
AdamHyper TrainConfig::adam() const { return {adam_beta1, adam_beta2, adam_eps}; }
CamOptions TrainConfig::cam() const { return {gamma_cam, cam_window, true}; }
ContrastiveOptions TrainConfig::contrastive() const { return {tau, lambda_c, true}; }
int TrainConfig::warmup_epochs() const { return two_stage ? (epochs + 2) / 3 : 0; }

// ---- metrics rows -----------------------------------------------------------

void write_metrics_csv(std::ostream& os, const std::vector<EpochRow>& rows) {
  os << "epoch,t,loss_class,loss_cont,val_mAP,val_OF1,val_CF1,mean_unknown_neg_prob,wall_seconds\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%lld,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.3f\n", r.epoch,
                  static_cast<long long>(r.t), static_cast<double>(r.loss_class), static_cast<double>(r.loss_cont),
                  static_cast<double>(r.val.map), static_cast<double>(r.val.of1), static_cast<double>(r.val.cf1),
                  static_cast<double>(r.mean_unknown_neg), static_cast<double>(r.wall_seconds));
    os << buf;
  }
}

// ---- state --------------------------------------------------------------------

DataShape DataShape::of(const Dataset& dataset) {
  return {dataset.spec.num_classes, dataset.spec.image_size, static_cast<int>(dataset.train.size())};
}

TrainState::TrainState(const TrainConfig& cfg, const DataShape& s)
    : config(cfg),
      shape(s),
      nets((cfg.validate(), cfg.network(s.num_classes, s.image_size)), mix_seed(cfg.seed, 101), cfg.alpha),
      adam(nets.online.parameters(), cfg.adam()),
      estimator_adam(s.num_train, s.num_classes, cfg.adam()),
      forest(s.num_classes, static_cast<std::size_t>(cfg.ipt_capacity)),
      rng(mix_seed(cfg.seed, 202)) {}

TrainState::TrainState(const TrainConfig& cfg, const Dataset& dataset) : TrainState(cfg, DataShape::of(dataset)) {
  std::vector<std::vector<std::uint8_t>> z;
  z.reserve(dataset.train.size());
  for (const auto& s : dataset.train) z.push_back(s.z);
  estimator = LabelEstimator(z, cfg.xi, rng);
}

// ---- evaluation -----------------------------------------------------------------

namespace {

constexpr std::size_t kEvalBatch = 32;

Tensor pack(const std::vector<const std::vector<float>*>& images, int S) {
  return batch_pixels(std::span<const std::vector<float>* const>(images.data(), images.size()), S);
}

std::vector<std::uint8_t> one_hot(int c, int L) {
  std::vector<std::uint8_t> z(static_cast<std::size_t>(L), 0);
  z[static_cast<std::size_t>(c)] = 1;
  return z;
}

MaskMetrics merge(const MaskMetrics& a, const MaskMetrics& b) {
  MaskMetrics m;
  m.true_pos = a.true_pos + b.true_pos;
  m.false_pos = a.false_pos + b.false_pos;
  m.false_neg = a.false_neg + b.false_neg;
  const Real tp = static_cast<Real>(m.true_pos);
  m.precision = m.true_pos + m.false_pos ? tp / static_cast<Real>(m.true_pos + m.false_pos) : 0;
  m.recall = m.true_pos + m.false_neg ? tp / static_cast<Real>(m.true_pos + m.false_neg) : 0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0;
  return m;
}

bool uses_masks(const TrainConfig& c) { return !c.no_smt && !c.no_cam; }

}  // namespace

ScoreTable predict(const Network& net, const std::vector<ImageSample>& samples, const TrainConfig& config) {
  const int L = net.config().num_classes;
  const int S = net.config().backbone.input_size;
  ScoreTable table{static_cast<int>(samples.size()), L, {}, {}};
  table.scores.reserve(samples.size() * L);
  table.labels.reserve(samples.size() * L);
  const bool cam = config.eval_masks == "cam" && uses_masks(config);
  for (std::size_t lo = 0; lo < samples.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(samples.size(), lo + kEvalBatch);
    std::vector<const std::vector<float>*> imgs;
    for (std::size_t i = lo; i < hi; ++i) imgs.push_back(&samples[i].pixels);
    const Tensor x = pack(imgs, S);
    const auto zero = net.zero_masks(imgs.size());
    Tensor probs = net.forward(x, zero).probs;
    if (cam) {
      std::vector<std::vector<std::uint8_t>> top;
      for (std::size_t b = 0; b < imgs.size(); ++b) {
        auto row = probs.values().subspan(b * L, L);
        top.push_back(one_hot(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()), L));
      }
      const auto masks = e_step(net, x, top, config.cam()).masks;
      probs = net.forward(x, masks).probs;
    }
    table.scores.insert(table.scores.end(), probs.values().begin(), probs.values().end());
    for (std::size_t i = lo; i < hi; ++i) table.labels.insert(table.labels.end(), samples[i].y.begin(), samples[i].y.end());
  }
  return table;
}

CamQuality cam_quality(const Network& net, const std::vector<ImageSample>& samples, const TrainConfig& config) {
  const int L = net.config().num_classes;
  const int S = net.config().backbone.input_size;
  const auto& bb = net.config().backbone;
  std::vector<std::pair<std::size_t, int>> pairs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (int c = 0; c < L; ++c) {
      if (samples[i].y[static_cast<std::size_t>(c)]) pairs.emplace_back(i, c);
    }
  }
  std::vector<BinaryMask> pred3, pred4, gt3, gt4;
  for (std::size_t lo = 0; lo < pairs.size(); lo += kEvalBatch) {
    const std::size_t hi = std::min(pairs.size(), lo + kEvalBatch);
    std::vector<const std::vector<float>*> imgs;
    std::vector<std::vector<std::uint8_t>> z;
    for (std::size_t k = lo; k < hi; ++k) {
      imgs.push_back(&samples[pairs[k].first].pixels);
      z.push_back(one_hot(pairs[k].second, L));
    }
    auto res = e_step(net, pack(imgs, S), z, config.cam());
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& gt = samples[pairs[k].first].gt_masks[static_cast<std::size_t>(pairs[k].second)];
      pred3.push_back(std::move(res.masks[k - lo].stage3));
      pred4.push_back(std::move(res.masks[k - lo].stage4));
      gt3.push_back(max_pool_mask(gt, bb.grid_extent(3), bb.grid_extent(3)));
      gt4.push_back(max_pool_mask(gt, bb.grid_extent(4), bb.grid_extent(4)));
    }
  }
  CamQuality q;
  q.stage3 = cam_mask_metrics(pred3, gt3);
  q.stage4 = cam_mask_metrics(pred4, gt4);
  q.combined = merge(q.stage3, q.stage4);
  return q;
}

Real mean_positive_count(const ScoreTable& table) {
  table.check();
  Real s = 0;
  for (Real v : table.scores) s += v;
  return table.rows ? s / table.rows : 0;
}

// ---- the loop -----------------------------------------------------------------

namespace {

class Loop {
 public:
  Loop(TrainState& state, const Dataset& data, const RunOptions& options)
      : st_(state), cfg_(state.config), data_(data), opt_(options) {
    L_ = data.spec.num_classes;
    S_ = data.spec.image_size;
    prior_ = {cfg_.prior_k > 0 ? cfg_.prior_k : data.spec.expected_positives(), L_};
    prior_.validate();
    members_.resize(static_cast<std::size_t>(L_));
    for (const auto& s : data.train) members_[static_cast<std::size_t>(s.observed_class())].push_back(s.id);
    if (cfg_.joint_optim && st_.cached_masks.empty()) st_.cached_masks = zero_grid_masks(data.train.size());
  }

  void epoch() {
    const auto started = std::chrono::steady_clock::now();
    const int e = st_.epoch + 1;
    std::vector<int> order(data_.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::shuffle(order.begin(), order.end(), st_.rng);

    train_preds_.assign(data_.train.size() * static_cast<std::size_t>(L_), 0);
    Real sum_class = 0, sum_cont = 0;
    int batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg_.batch_size));
      const std::vector<int> ids(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                 order.begin() + static_cast<std::ptrdiff_t>(hi));
      auto [lc, lk] = batch(ids, e);
      sum_class += lc;
      sum_cont += lk;
      ++batches;
    }
    if (!cfg_.momentum_per_step) momentum();

    EpochRow row;
    row.epoch = e;
    row.t = st_.t;
    row.loss_class = sum_class / batches;
    row.loss_cont = sum_cont / batches;
    const ScoreTable val = predict(st_.online(), data_.val, cfg_);
    row.val = evaluate_scores(val, cfg_.threshold);
    row.val_k_hat = mean_positive_count(val);

    ScoreTable train{static_cast<int>(data_.train.size()), L_, train_preds_, {}};
    std::vector<std::uint8_t> z;
    for (const auto& s : data_.train) {
      train.labels.insert(train.labels.end(), s.y.begin(), s.y.end());
      z.insert(z.end(), s.z.begin(), s.z.end());
    }
    row.mean_unknown_neg = mean_unknown_negative(train, z);
    st_.histograms.push_back(unknown_negative_histogram(train, z, e));
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    row.wall_seconds = cfg_.wall_clock ? static_cast<Real>(elapsed) : 0;
    st_.rows.push_back(row);
    st_.epoch = e;

    if (opt_.log) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "epoch %d  t=%lld  L_class=%.4f  L_cont=%.4f  val mAP=%.4f  unk-neg=%.4f  %.1fs\n",
                    e, static_cast<long long>(st_.t), static_cast<double>(row.loss_class),
                    static_cast<double>(row.loss_cont), static_cast<double>(row.val.map),
                    static_cast<double>(row.mean_unknown_neg), elapsed);
      *opt_.log << buf << std::flush;
    }
    persist();
  }

 private:
  std::vector<MaskSet> zero_grid_masks(std::size_t n) const { return st_.online().zero_masks(n); }

  void event(const char* name) {
    if (opt_.events) opt_.events->emplace_back(name);
  }

  bool cam_phase(int epoch) const {
    if (!uses_masks(cfg_) || cfg_.gt_masks) return false;
    if (epoch <= cfg_.warmup_epochs()) return false;
    return st_.t > 0;  // the first batch runs with the all-zero initial masks
  }

  std::vector<MaskSet> gt_view_masks(const std::vector<int>& ids, const std::vector<ViewPair>& views) const {
    const auto& bb = st_.online().config().backbone;
    std::vector<MaskSet> out(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const auto& s = data_.train[static_cast<std::size_t>(ids[b])];
      const auto full = map_mask_to_view(s.gt_masks[static_cast<std::size_t>(s.observed_class())], views[b].online.transform);
      out[b].stage3 = max_pool_mask(full, bb.grid_extent(3), bb.grid_extent(3));
      out[b].stage4 = max_pool_mask(full, bb.grid_extent(4), bb.grid_extent(4));
    }
    return out;
  }

  ViewPair identity_views(const ImageSample& s) const {
    ViewPair p;
    p.online.pixels = s.pixels;
    p.target.pixels = s.pixels;
    p.target.role = ViewRole::Target;
    return p;
  }

  std::pair<Real, Real> batch(const std::vector<int>& ids, int epoch) {
    try {
      return batch_impl(ids, epoch);
    } catch (const NumericError& err) {
      std::ostringstream msg;
      msg << err.what() << " [epoch " << epoch << ", t " << st_.t << ", samples";
      for (int id : ids) msg << ' ' << id;
      msg << ']';
      dump(msg.str(), ids);
      throw NumericError(msg.str());
    }
  }

  void dump(const std::string& message, const std::vector<int>& ids) const {
    if (opt_.checkpoint_path.empty()) return;
    std::ofstream out(opt_.checkpoint_path + ".nonfinite.txt");
    out << message << "\n";
    for (int id : ids) {
      const auto& s = data_.train[static_cast<std::size_t>(id)];
      out << "sample " << id << " z=";
      for (auto v : s.z) out << int(v);
      out << " estimator=";
      for (int c = 0; c < L_; ++c) out << ' ' << st_.estimator.probability(id, c);
      out << "\n";
    }
  }

  static void require_finite(const Tensor& loss, const char* what) {
    if (!std::isfinite(loss.item())) throw NumericError(std::string("non-finite ") + what + " loss");
  }

  std::pair<Real, Real> batch_impl(const std::vector<int>& ids, int epoch) {
    const std::size_t B = ids.size();
    Network& online = st_.online();

    std::vector<ViewPair> views;
    std::vector<const std::vector<float>*> imgs;
    std::vector<std::vector<std::uint8_t>> z;
    std::vector<Real> zv;
    std::vector<int> cls;
    views.reserve(B);
    for (int id : ids) {
      const auto& s = data_.train[static_cast<std::size_t>(id)];
      views.push_back(cfg_.augment ? make_view_pair(s, st_.rng) : identity_views(s));
      z.push_back(s.z);
      zv.insert(zv.end(), s.z.begin(), s.z.end());
      cls.push_back(s.observed_class());
    }
    for (const auto& v : views) imgs.push_back(&v.online.pixels);
    const Tensor x = pack(imgs, S_);
    const Tensor zt = Tensor::from({static_cast<std::int64_t>(B), L_}, std::move(zv));

    std::vector<MaskSet> masks = zero_grid_masks(B);
    Tensor scores;  // p under the E-step parameters, for IPT confidences

    auto run_e_step = [&] {
      if (cfg_.gt_masks) {
        masks = gt_view_masks(ids, views);
      } else if (cam_phase(epoch)) {
        auto res = e_step(online, x, z, cfg_.cam(), st_.t);
        masks = std::move(res.masks);
        scores = res.probs;
      }
      event("e_step");
    };
    auto confidences = [&] {
      if (!scores.defined()) scores = online.forward(x, masks).probs;
    };

    if (!cfg_.joint_optim) run_e_step();

    // IPT insertion: masked target features of this batch, ranked by p_c
    if (!cfg_.no_cl && !cfg_.joint_optim) {
      confidences();
      insert_nodes(ids, cls, x, masks, scores);
    }

    // classification M-step
    std::vector<MaskSet> class_masks = masks;
    if (cfg_.joint_optim) {
      for (std::size_t b = 0; b < B; ++b) class_masks[b] = st_.cached_masks[static_cast<std::size_t>(ids[b])];
    }
    online.parameters().zero_grad();
    Tape tape;
    Tensor leaf, probs, loss;
    {
      TapeScope scope(tape);
      probs = online.forward(x, class_masks).probs;
      leaf = st_.estimator.gather(ids);
      loss = loss_class(probs, ops::sigmoid(leaf), zt, prior_);
    }
    require_finite(loss, "classification");
    tape.backward(loss);
    st_.adam.step(online.parameters(), cfg_.rates());
    st_.estimator_adam.step(st_.estimator, ids, leaf.grad(), cfg_.lr_estimator);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(probs.values().begin() + static_cast<std::ptrdiff_t>(b * L_), L_,
                  train_preds_.begin() + static_cast<std::ptrdiff_t>(ids[b]) * L_);
    }
    const Real loss_c = loss.item();
    event("m_step_class");

    if (cfg_.joint_optim) {
      run_e_step();
      for (std::size_t b = 0; b < B; ++b) st_.cached_masks[static_cast<std::size_t>(ids[b])] = masks[b];
      if (!cfg_.no_cl) {
        confidences();
        insert_nodes(ids, cls, x, masks, scores);
      }
    }

    Real loss_k = 0;
    if (!cfg_.no_cl) loss_k = contrastive_step(ids, cls, views, x, masks);

    if (cfg_.momentum_per_step) momentum();
    ++st_.t;
    return {loss_c, loss_k};
  }

  void insert_nodes(const std::vector<int>& ids, const std::vector<int>& cls, const Tensor& x,
                    const std::vector<MaskSet>& masks, const Tensor& scores) {
    const Tensor feats = encode_target(st_.target(), x, masks);
    const auto d = static_cast<std::size_t>(feats.dim(1));
    for (std::size_t b = 0; b < ids.size(); ++b) {
      IptNode node;
      node.feature.assign(feats.values().begin() + static_cast<std::ptrdiff_t>(b * d),
                          feats.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
      node.confidence = node_confidence(scores.values().subspan(b * L_, L_), cls[b]);
      node.sample_id = ids[b];
      node.class_id = cls[b];
      st_.forest.insert(std::move(node));
    }
    event("ipt_insert");
  }

  Real contrastive_step(const std::vector<int>& ids, const std::vector<int>& cls, const std::vector<ViewPair>& views,
                        const Tensor& x, const std::vector<MaskSet>& masks) {
    const std::size_t B = ids.size();
    std::vector<Tensor> negatives(B);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
      auto nodes = cfg_.random_negatives ? st_.forest.random_negatives(cls[b], cfg_.negatives_k, st_.rng)
                                         : st_.forest.top_negatives(cls[b], cfg_.negatives_k);
      if (nodes.empty()) continue;
      any = true;
      const auto d = static_cast<std::int64_t>(nodes.front().feature.size());
      std::vector<Real> v;
      v.reserve(nodes.size() * static_cast<std::size_t>(d));
      for (const auto& n : nodes) v.insert(v.end(), n.feature.begin(), n.feature.end());
      negatives[b] = Tensor::from({static_cast<std::int64_t>(nodes.size()), d}, std::move(v));
    }

    // positives: another sample with the same observed class, seen by the target network
    std::vector<AugmentedView> pos_views;
    std::vector<MaskSet> pos_masks(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& pool = members_[static_cast<std::size_t>(cls[b])];
      int j = ids[b];
      if (pool.size() > 1) {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 2);
        const std::size_t k = pick(st_.rng);
        j = pool[k] == ids[b] ? pool.back() : pool[k];
      }
      AugmentedView v;
      if (j == ids[b]) {
        v = views[b].target;
      } else if (cfg_.augment) {
        v = augment_view(data_.train[static_cast<std::size_t>(j)], ViewRole::Target, st_.rng);
      } else {
        v.role = ViewRole::Target;
        v.pixels = data_.train[static_cast<std::size_t>(j)].pixels;
      }
      pos_masks[b].stage3 = transport_mask(masks[b].stage3, views[b].online.transform, v.transform);
      pos_masks[b].stage4 = transport_mask(masks[b].stage4, views[b].online.transform, v.transform);
      pos_views.push_back(std::move(v));
    }
    std::vector<const std::vector<float>*> imgs;
    for (const auto& v : pos_views) imgs.push_back(&v.pixels);
    const Tensor positives = encode_target(st_.target(), pack(imgs, S_), pos_masks);

    Network& online = st_.online();
    online.parameters().zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      const Tensor anchors = encode_online(online, x, masks);
      loss = info_nce(anchors, positives, negatives, cfg_.contrastive());
    }
    require_finite(loss, "contrastive");
    // no stored negatives anywhere: the loss is identically zero and Adam must not move
    if (any) {
      tape.backward(loss);
      st_.adam.step(online.parameters(), cfg_.rates());
    }
    event("m_step_cont");
    return loss.item();
  }

  void momentum() {
    momentum_update(st_.target().parameters(), st_.online().parameters(), cfg_.alpha);
    event("momentum");
  }

  void persist() const {
    if (!opt_.metrics_path.empty()) {
      std::ofstream out(opt_.metrics_path, std::ios::binary);
      if (!out) throw Error("cannot write " + opt_.metrics_path);
      write_metrics_csv(out, st_.rows);
    }
    if (!opt_.histogram_path.empty()) {
      std::ofstream out(opt_.histogram_path, std::ios::binary);
      if (!out) throw Error("cannot write " + opt_.histogram_path);
      write_histogram_csv(out, st_.histograms);
    }
    if (!opt_.checkpoint_path.empty()) save_checkpoint(st_, opt_.checkpoint_path);
  }

  TrainState& st_;
  const TrainConfig& cfg_;
  const Dataset& data_;
  const RunOptions& opt_;
  int L_ = 0;
  int S_ = 0;
  DistributionPrior prior_;
  std::vector<std::vector<int>> members_;
  std::vector<Real> train_preds_;
};

}  // namespace

void run_bootstrap(TrainState& state, const Dataset& dataset, const RunOptions& options) {
  if (!dataset.single_positive) throw ContractError("run_bootstrap needs a single-positive dataset");
  validate_dataset(dataset);
  if (!(DataShape::of(dataset) == state.shape)) throw ContractError("dataset does not match the training state");
  if (dataset.val.empty()) throw DataError("validation split is empty");
  Loop loop(state, dataset, options);
  while (state.epoch < state.config.epochs) {
    if (options.stop_after_epoch >= 0 && state.epoch >= options.stop_after_epoch) break;
    loop.epoch();
  }
}

TrainState run_bootstrap(const TrainConfig& config, const Dataset& dataset, const RunOptions& options) {
  TrainState state(config, dataset);
  run_bootstrap(state, dataset, options);
  return state;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[5] = "SCKP";
constexpr char kCheckpointEnd[5] = "SCKE";
constexpr std::uint32_t kCheckpointVersion = 3;

void write_params(std::ostream& os, const ParameterTable& params) {
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    io::write_string(os, e.name);
    const auto v = e.tensor.values();
    io::write<std::uint64_t>(os, v.size());
    for (Real x : v) io::write<double>(os, static_cast<double>(x));
  }
}

void read_params(std::istream& is, ParameterTable& params) {
  if (io::read<std::uint32_t>(is) != params.size()) throw FormatError("checkpoint parameter count mismatch");
  for (auto& e : params) {
    if (io::read_string(is) != e.name) throw FormatError("checkpoint parameter order mismatch at " + e.name);
    auto v = e.tensor.mutable_values();
    if (io::read<std::uint64_t>(is) != v.size()) throw FormatError("checkpoint shape mismatch at " + e.name);
    for (auto& x : v) x = static_cast<Real>(io::read<double>(is));
  }
}

void write_mask(std::ostream& os, const BinaryMask& m) {
  io::write<std::int32_t>(os, m.height);
  io::write<std::int32_t>(os, m.width);
  io::write_array(os, m.cells.data(), m.cells.size());
}

BinaryMask read_mask(std::istream& is) {
  const auto h = io::read<std::int32_t>(is), w = io::read<std::int32_t>(is);
  if (h < 0 || w < 0 || h > 4096 || w > 4096) throw FormatError("checkpoint mask extent out of range");
  BinaryMask m(h, w);
  io::read_array(is, m.cells.data(), m.cells.size());
  return m;
}

void write_metric_row(std::ostream& os, const MetricRow& m) {
  for (Real v : {m.map, m.op, m.orec, m.of1, m.cp, m.cr, m.cf1, m.threshold}) io::write<double>(os, v);
}

MetricRow read_metric_row(std::istream& is) {
  MetricRow m;
  for (Real* v : {&m.map, &m.op, &m.orec, &m.of1, &m.cp, &m.cr, &m.cf1, &m.threshold}) {
    *v = static_cast<Real>(io::read<double>(is));
  }
  return m;
}

}  // namespace

void save_checkpoint(const TrainState& st, std::ostream& os) {
  os.write(kCheckpointMagic, 4);
  io::write<std::uint32_t>(os, kCheckpointVersion);
  io::write_string(os, st.config.to_text());
  io::write<std::int32_t>(os, st.shape.num_classes);
  io::write<std::int32_t>(os, st.shape.image_size);
  io::write<std::int32_t>(os, st.shape.num_train);
  io::write<std::int32_t>(os, st.epoch);
  io::write<std::int64_t>(os, st.t);
  std::ostringstream rng;
  rng << st.rng;
  io::write_string(os, rng.str());

  write_params(os, st.nets.online.parameters());
  write_params(os, st.nets.target.parameters());
  st.adam.save(os);
  st.estimator_adam.save(os);
  io::write<std::int64_t>(os, st.estimator.rows());
  io::write<std::int32_t>(os, st.estimator.num_classes());
  for (Real v : st.estimator.logits()) io::write<double>(os, v);
  st.forest.save(os);

  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(st.rows.size()));
  for (const auto& r : st.rows) {
    io::write<std::int32_t>(os, r.epoch);
    io::write<std::int64_t>(os, r.t);
    for (Real v : {r.loss_class, r.loss_cont, r.mean_unknown_neg, r.val_k_hat, r.wall_seconds}) {
      io::write<double>(os, v);
    }
    write_metric_row(os, r.val);
  }
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(st.histograms.size()));
  for (const auto& h : st.histograms) {
    io::write<std::int32_t>(os, h.epoch);
    io::write<std::uint32_t>(os, static_cast<std::uint32_t>(h.frequency.size()));
    for (Real v : h.frequency) io::write<double>(os, v);
  }
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(st.cached_masks.size()));
  for (const auto& m : st.cached_masks) {
    write_mask(os, m.stage3);
    write_mask(os, m.stage4);
  }
  os.write(kCheckpointEnd, 4);
  if (!os) throw Error("checkpoint write failed");
}

void save_checkpoint(const TrainState& st, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    save_checkpoint(st, out);
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const auto version = io::read<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  TrainConfig config;
  std::istringstream text(io::read_string(is));
  config.merge_text(text);
  DataShape shape;
  shape.num_classes = io::read<std::int32_t>(is);
  shape.image_size = io::read<std::int32_t>(is);
  shape.num_train = io::read<std::int32_t>(is);
  if (shape.num_classes < 1 || shape.num_train < 0) throw FormatError("checkpoint data shape out of range");
  TrainState st(config, shape);
  st.epoch = io::read<std::int32_t>(is);
  st.t = io::read<std::int64_t>(is);
  std::istringstream rng(io::read_string(is));
  rng >> st.rng;
  if (!rng) throw FormatError("checkpoint rng state unreadable");

  read_params(is, st.nets.online.parameters());
  read_params(is, st.nets.target.parameters());
  st.adam = Adam::load(is);
  st.estimator_adam = RowAdam::load(is);
  const auto rows = io::read<std::int64_t>(is);
  const auto cols = io::read<std::int32_t>(is);
  if (rows != shape.num_train || cols != shape.num_classes) throw FormatError("checkpoint estimator shape mismatch");
  std::vector<Real> logits(static_cast<std::size_t>(rows) * cols);
  for (auto& v : logits) v = static_cast<Real>(io::read<double>(is));
  st.estimator = LabelEstimator::from_logits(rows, cols, std::move(logits));
  st.forest = IptForest::load(is);

  const auto n_rows = io::read<std::uint32_t>(is);
  if (n_rows > 1u << 20) throw FormatError("checkpoint row count out of range");
  for (std::uint32_t i = 0; i < n_rows; ++i) {
    EpochRow r;
    r.epoch = io::read<std::int32_t>(is);
    r.t = io::read<std::int64_t>(is);
    for (Real* v : {&r.loss_class, &r.loss_cont, &r.mean_unknown_neg, &r.val_k_hat, &r.wall_seconds}) {
      *v = static_cast<Real>(io::read<double>(is));
    }
    r.val = read_metric_row(is);
    st.rows.push_back(r);
  }
  const auto n_hist = io::read<std::uint32_t>(is);
  if (n_hist > 1u << 20) throw FormatError("checkpoint histogram count out of range");
  for (std::uint32_t i = 0; i < n_hist; ++i) {
    HistogramRow h;
    h.epoch = io::read<std::int32_t>(is);
    const auto bins = io::read<std::uint32_t>(is);
    if (bins > 1u << 16) throw FormatError("checkpoint histogram bins out of range");
    h.frequency.resize(bins);
    for (auto& v : h.frequency) v = static_cast<Real>(io::read<double>(is));
    st.histograms.push_back(std::move(h));
  }
  const auto n_masks = io::read<std::uint32_t>(is);
  if (n_masks != 0 && n_masks != static_cast<std::uint32_t>(shape.num_train)) {
    throw FormatError("checkpoint mask cache size mismatch");
  }
  for (std::uint32_t i = 0; i < n_masks; ++i) {
    MaskSet m;
    m.stage3 = read_mask(is);
    m.stage4 = read_mask(is);
    st.cached_masks.push_back(std::move(m));
  }
  io::expect_magic(is, kCheckpointEnd);
  return st;
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return load_checkpoint(in);
}

}  // namespace scob
