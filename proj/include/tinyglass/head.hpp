// SPDX-License-Identifier: Apache-2.0
//
// Trainable head: feature adaptor + two-layer 1x1 discriminator, the
// BCE + focal objective, its exact gradients, and AdamW.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinyglass/embedder.hpp"
#include "tinyglass/error.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/synthesis.hpp"
#include "tinyglass/tensor.hpp"
#include "tinyglass/tgw.hpp"

namespace tinyglass {

// ---------------------------------------------------------------------------
// Discriminator

/// conv_a: 1x1 in_ch -> hidden (+bias), leaky ReLU, conv_b: 1x1 hidden -> 1 (+bias).
struct DiscriminatorWeights {
  std::size_t in_ch = 0;
  std::size_t hidden = 0;
  double slope = 0.2;
  std::vector<double> wa;  // hidden x in_ch
  std::vector<double> ba;  // hidden
  std::vector<double> wb;  // hidden
  std::vector<double> bb;  // 1

  std::size_t param_count() const { return wa.size() + ba.size() + wb.size() + bb.size(); }
  static constexpr std::size_t param_count(std::size_t in_ch, std::size_t hidden) {
    return in_ch * hidden + hidden + hidden + 1;
  }

  static DiscriminatorWeights zeros(std::size_t in_ch, std::size_t hidden, double slope = 0.2) {
    detail::require(in_ch > 0 && hidden > 0, "discriminator extents must be positive");
    return {in_ch, hidden, slope, std::vector<double>(in_ch * hidden, 0.0), std::vector<double>(hidden, 0.0),
            std::vector<double>(hidden, 0.0), std::vector<double>(1, 0.0)};
  }

  /// Xavier-normal weights, zero biases.
  static DiscriminatorWeights init(std::size_t in_ch, std::size_t hidden, std::uint64_t seed, double slope = 0.2) {
    auto w = zeros(in_ch, hidden, slope);
    Rng rng(derive_seed(seed, Stream::discriminator));
    const double sa = std::sqrt(2.0 / static_cast<double>(in_ch + hidden));
    const double sb = std::sqrt(2.0 / static_cast<double>(hidden + 1));
    for (double& v : w.wa) v = rng.normal(0.0, sa);
    for (double& v : w.wb) v = rng.normal(0.0, sb);
    return w;
  }

  ConvSpec conv_a() const { return {hidden, in_ch, 1, 1, 1, 0, wa, ba}; }
  ConvSpec conv_b() const { return {1, hidden, 1, 1, 1, 0, wb, bb}; }
  Activation act() const { return Activation::leaky_relu(slope); }

  void validate() const {
    detail::require(wa.size() == hidden * in_ch && ba.size() == hidden && wb.size() == hidden && bb.size() == 1,
                    "discriminator parameter lengths are inconsistent");
  }

  friend bool operator==(const DiscriminatorWeights&, const DiscriminatorWeights&) = default;
};

struct DiscriminatorActivations {
  Tensor4 hidden_pre;  // (n, hidden, G, G)
  Tensor4 hidden;      // after leaky ReLU
  Tensor4 logits;      // (n, 1, G, G)
};

inline DiscriminatorActivations disc_forward_full(const DiscriminatorWeights& w, const Tensor4& e) {
  w.validate();
  if (e.c() != w.in_ch) {
    detail::contract_fail("discriminator expects " + std::to_string(w.in_ch) + " channels, got " + e.shape().str());
  }
  DiscriminatorActivations a;
  a.hidden_pre = conv2d(e, w.conv_a());
  a.hidden = activation(a.hidden_pre, w.act());
  a.logits = conv2d(a.hidden, w.conv_b());
  return a;
}

/// Patch logits (n,1,G,G); anomaly probability is sigmoid(logit).
inline Tensor4 disc_forward(const DiscriminatorWeights& w, const Tensor4& e) {
  return disc_forward_full(w, e).logits;
}

// ---------------------------------------------------------------------------
// Losses

struct LossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const {
    detail::require(focal_alpha > 0.0 && focal_alpha <= 1.0, "focal_alpha must lie in (0,1]");
    detail::require(focal_gamma >= 0.0, "focal_gamma must be non-negative");
  }
};

struct LossReport {
  double l_bce = 0.0;
  double l_focal = 0.0;
  double l_total = 0.0;
};

namespace detail {

inline void check_labels(const Tensor4& logits, const Tensor4& labels) {
  if (logits.shape() != labels.shape()) {
    contract_fail("loss shape mismatch: logits " + logits.shape().str() + " vs labels " + labels.shape().str());
  }
  require(!logits.empty(), "loss over an empty tensor");
  for (double y : labels.data()) {
    if (y != 0.0 && y != 1.0) contract_fail("labels must be 0 or 1, got " + std::to_string(y));
  }
}

// s = +1 for y = 1, -1 for y = 0, so that p_t = sigmoid(s z).
inline double label_sign(double y) { return y == 1.0 ? 1.0 : -1.0; }

inline double focal_term(double z, double y, double alpha, double gamma) {
  const double s = label_sign(y);
  const double log_pt = -softplus(-s * z);
  const double one_minus_pt = sigmoid(-s * z);
  const double alpha_t = y == 1.0 ? alpha : 1.0 - alpha;
  const double mod = gamma == 0.0 ? 1.0 : std::pow(one_minus_pt, gamma);
  return -alpha_t * mod * log_pt;
}

// d focal_term / dz = alpha_t s (1-p_t)^gamma [gamma p_t log p_t - (1-p_t)]
inline double focal_term_grad(double z, double y, double alpha, double gamma) {
  const double s = label_sign(y);
  const double log_pt = -softplus(-s * z);
  const double pt = sigmoid(s * z);
  const double one_minus_pt = sigmoid(-s * z);
  const double alpha_t = y == 1.0 ? alpha : 1.0 - alpha;
  const double mod = gamma == 0.0 ? 1.0 : std::pow(one_minus_pt, gamma);
  return alpha_t * s * mod * (gamma * pt * log_pt - one_minus_pt);
}

}  // namespace detail

/// Mean binary cross-entropy on logits, -[y log p + (1-y) log(1-p)].
inline double bce_loss(const Tensor4& logits, const Tensor4& labels) {
  detail::check_labels(logits, labels);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    s += labels[i] == 1.0 ? softplus(-z) : softplus(z);
  }
  return s / static_cast<double>(logits.size());
}

/// Mean focal loss, -alpha_t (1-p_t)^gamma log p_t.
inline double focal_loss(const Tensor4& logits, const Tensor4& labels, double alpha, double gamma) {
  LossConfig{alpha, gamma}.validate();
  detail::check_labels(logits, labels);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += detail::focal_term(logits[i], labels[i], alpha, gamma);
  return s / static_cast<double>(logits.size());
}

inline LossReport total_loss(const Tensor4& logits, const Tensor4& labels, const LossConfig& cfg) {
  LossReport r;
  r.l_bce = bce_loss(logits, labels);
  r.l_focal = focal_loss(logits, labels, cfg.focal_alpha, cfg.focal_gamma);
  r.l_total = r.l_bce + r.l_focal;
  if (!std::isfinite(r.l_total)) throw NumericError("non-finite loss");
  return r;
}

/// d l_total / d logits.
inline Tensor4 total_loss_grad(const Tensor4& logits, const Tensor4& labels, const LossConfig& cfg) {
  cfg.validate();
  detail::check_labels(logits, labels);
  const double inv = 1.0 / static_cast<double>(logits.size());
  Tensor4 g(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double y = labels[i];
    const double bce = sigmoid(z) - y;
    g[i] = inv * (bce + detail::focal_term_grad(z, y, cfg.focal_alpha, cfg.focal_gamma));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Head parameters

struct HeadParams {
  std::optional<Adaptor> adaptor;
  DiscriminatorWeights disc;
  /// Bumped on every parameter update; forward tapes remember it.
  std::uint64_t generation = 0;

  std::size_t param_count() const { return (adaptor ? adaptor->param_count() : 0) + disc.param_count(); }

  Tensor4 project(const Tensor4& raw) const { return adaptor ? apply_adaptor(raw, *adaptor) : raw; }

  /// Parameter blocks in a fixed order: adaptor (if any), wa, ba, wb, bb.
  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> b;
    if (adaptor) b.emplace_back(adaptor->matrix);
    b.emplace_back(disc.wa);
    b.emplace_back(disc.ba);
    b.emplace_back(disc.wb);
    b.emplace_back(disc.bb);
    return b;
  }
};

struct HeadGradients {
  std::vector<double> adaptor;  // empty without adaptor
  std::vector<double> wa, ba, wb, bb;

  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> b;
    if (!adaptor.empty()) b.emplace_back(adaptor);
    b.emplace_back(wa);
    b.emplace_back(ba);
    b.emplace_back(wb);
    b.emplace_back(bb);
    return b;
  }

  double norm() const {
    double s = 0.0;
    for (auto blk : blocks())
      for (double v : blk) s += v * v;
    return std::sqrt(s);
  }
};

// ---------------------------------------------------------------------------
// Training batches

/// Three-branch batch. Branch embeddings are recomputed from the stored raw
/// features on every forward so adaptor gradients stay exact.
struct AnomalyBatch {
  std::uint64_t id = 0;
  Tensor4 normal_raw;  // (n, D, G, G) pre-adaptor features of normal images
  Tensor4 las_raw;     // (n, D, G, G) pre-adaptor features of LAS-corrupted images
  Tensor4 gas_delta;   // (n, D, G, G) feature-space perturbation
  Tensor4 las_mask;    // (n, 1, G, G) binary LAS labels
  Tensor4 las_image;   // corrupted input images, kept for inspection

  // Post-adaptor snapshots taken when the batch was built.
  Tensor4 normal;
  Tensor4 gas;
  Tensor4 las;

  std::size_t batch_size() const { return normal_raw.n(); }

  /// Labels stacked as [normal; gas; las]: 0, 1, mask.
  Tensor4 labels() const {
    Tensor4 zeros(las_mask.shape(), 0.0);
    Tensor4 ones(las_mask.shape(), 1.0);
    return stack_batch({zeros, ones, las_mask});
  }
};

inline std::uint64_t next_batch_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

namespace detail {

// dL/de for the stacked embedding E given logits gradient and activations.
struct DiscBackward {
  std::vector<double> wa, ba, wb, bb;
  Tensor4 d_embedding;
};

inline DiscBackward disc_backward(const DiscriminatorWeights& w, const Tensor4& e, const DiscriminatorActivations& a,
                                  const Tensor4& d_logits, bool want_param_grads) {
  const std::size_t H = w.hidden;
  const std::size_t D = w.in_ch;
  const std::size_t P = e.h() * e.w();
  const Activation act = w.act();
  DiscBackward out;
  if (want_param_grads) {
    out.wa.assign(H * D, 0.0);
    out.ba.assign(H, 0.0);
    out.wb.assign(H, 0.0);
    out.bb.assign(1, 0.0);
  }
  out.d_embedding = Tensor4(e.shape());
  std::vector<double> dh(H * P);
  for (std::size_t n = 0; n < e.n(); ++n) {
    const double* dz = d_logits.plane(n, 0);
    if (want_param_grads) {
      for (std::size_t p = 0; p < P; ++p) out.bb[0] += dz[p];
    }
    for (std::size_t j = 0; j < H; ++j) {
      const double* hp = a.hidden_pre.plane(n, j);
      const double* ha = a.hidden.plane(n, j);
      double* dhj = dh.data() + j * P;
      double gwb = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        gwb += dz[p] * ha[p];
        dhj[p] = w.wb[j] * dz[p] * act.derivative(hp[p]);
      }
      if (want_param_grads) {
        out.wb[j] += gwb;
        double gba = 0.0;
        for (std::size_t p = 0; p < P; ++p) gba += dhj[p];
        out.ba[j] += gba;
        for (std::size_t c = 0; c < D; ++c) {
          const double* ec = e.plane(n, c);
          double s = 0.0;
          for (std::size_t p = 0; p < P; ++p) s += dhj[p] * ec[p];
          out.wa[j * D + c] += s;
        }
      }
    }
    for (std::size_t c = 0; c < D; ++c) {
      double* de = out.d_embedding.plane(n, c);
      for (std::size_t j = 0; j < H; ++j) {
        const double wjc = w.wa[j * D + c];
        const double* dhj = dh.data() + j * P;
        for (std::size_t p = 0; p < P; ++p) de[p] += wjc * dhj[p];
      }
    }
  }
  return out;
}

// Accumulates dM[o,i] += sum_{n,p} dE[n,o,p] U[n,i,p].
inline void accumulate_adaptor_grad(std::vector<double>& dm, const Tensor4& d_e, const Tensor4& u) {
  const std::size_t D = u.c();
  const std::size_t P = u.h() * u.w();
  for (std::size_t n = 0; n < u.n(); ++n) {
    for (std::size_t o = 0; o < D; ++o) {
      const double* de = d_e.plane(n, o);
      for (std::size_t i = 0; i < D; ++i) {
        const double* ui = u.plane(n, i);
        double s = 0.0;
        for (std::size_t p = 0; p < P; ++p) s += de[p] * ui[p];
        dm[o * D + i] += s;
      }
    }
  }
}

}  // namespace detail

/// Gradient of l_total(disc(e), targets) with respect to the embedding e.
inline Tensor4 input_gradient(const DiscriminatorWeights& w, const Tensor4& e, const Tensor4& target_labels,
                              const LossConfig& cfg) {
  if (target_labels.shape() != Shape4{e.n(), 1, e.h(), e.w()}) {
    detail::contract_fail("input_gradient: labels " + target_labels.shape().str() + " vs embedding " +
                          e.shape().str());
  }
  const auto a = disc_forward_full(w, e);
  const Tensor4 dz = total_loss_grad(a.logits, target_labels, cfg);
  return detail::disc_backward(w, e, a, dz, false).d_embedding;
}

/// Builds a training batch: projects raw features, draws the GAS
/// perturbation by ascending the loss of the "anomalous" target, and
/// attaches LAS labels.
inline AnomalyBatch make_anomaly_batch(const HeadParams& head, Tensor4 normal_raw, Tensor4 las_raw, Tensor4 las_mask,
                                       const GasConfig& gas, const LossConfig& loss, std::uint64_t seed) {
  if (normal_raw.shape() != las_raw.shape()) {
    detail::contract_fail("normal/LAS feature mismatch: " + normal_raw.shape().str() + " vs " + las_raw.shape().str());
  }
  if (las_mask.shape() != Shape4{normal_raw.n(), 1, normal_raw.h(), normal_raw.w()}) {
    detail::contract_fail("LAS mask " + las_mask.shape().str() + " does not match grid " + normal_raw.shape().str());
  }
  AnomalyBatch b;
  b.id = next_batch_id();
  b.normal = head.project(normal_raw);
  b.las = head.project(las_raw);
  const Tensor4 targets(las_mask.shape(), 1.0);
  const GradientFn grad = [&](const Tensor4& e) { return input_gradient(head.disc, e, targets, loss); };
  b.gas_delta = gas_delta(b.normal, gas, grad, seed);
  b.gas = b.normal;
  for (std::size_t i = 0; i < b.gas.size(); ++i) b.gas[i] += b.gas_delta[i];
  b.normal_raw = std::move(normal_raw);
  b.las_raw = std::move(las_raw);
  b.las_mask = std::move(las_mask);
  return b;
}

/// Cached forward quantities for one (parameters, batch) pair.
struct HeadTape {
  std::uint64_t generation = 0;
  std::uint64_t batch_id = 0;
  Tensor4 embedding;  // stacked [normal; gas; las]
  DiscriminatorActivations disc;
  Tensor4 labels;
  LossReport loss;
};

class StaleCacheError : public ContractError {
 public:
  using ContractError::ContractError;
};

inline HeadTape head_forward(const HeadParams& head, const AnomalyBatch& batch, const LossConfig& cfg) {
  HeadTape t;
  t.generation = head.generation;
  t.batch_id = batch.id;
  Tensor4 en = head.project(batch.normal_raw);
  Tensor4 eg = en;
  detail::require(batch.gas_delta.shape() == eg.shape(), "GAS delta does not match embedding shape");
  for (std::size_t i = 0; i < eg.size(); ++i) eg[i] += batch.gas_delta[i];
  Tensor4 el = head.project(batch.las_raw);
  t.embedding = stack_batch({en, eg, el});
  t.disc = disc_forward_full(head.disc, t.embedding);
  t.labels = batch.labels();
  t.loss = total_loss(t.disc.logits, t.labels, cfg);
  return t;
}

/// Exact gradients of l_total with respect to the adaptor and discriminator.
/// The backbone is not part of the graph and receives nothing.
inline HeadGradients head_backward(const HeadParams& head, const AnomalyBatch& batch, const HeadTape& tape,
                                   const LossConfig& cfg) {
  if (tape.generation != head.generation || tape.batch_id != batch.id) {
    throw StaleCacheError("backward called with a stale forward cache (parameters or batch changed)");
  }
  const Tensor4 dz = total_loss_grad(tape.disc.logits, tape.labels, cfg);
  auto db = detail::disc_backward(head.disc, tape.embedding, tape.disc, dz, true);
  HeadGradients g;
  g.wa = std::move(db.wa);
  g.ba = std::move(db.ba);
  g.wb = std::move(db.wb);
  g.bb = std::move(db.bb);
  if (head.adaptor) {
    const std::size_t n = batch.batch_size();
    const Tensor4 dn = db.d_embedding.slice_batch(0, n);
    const Tensor4 dg = db.d_embedding.slice_batch(n, n);
    const Tensor4 dl = db.d_embedding.slice_batch(2 * n, n);
    g.adaptor.assign(head.adaptor->matrix.size(), 0.0);
    detail::accumulate_adaptor_grad(g.adaptor, dn, batch.normal_raw);
    detail::accumulate_adaptor_grad(g.adaptor, dg, batch.normal_raw);
    detail::accumulate_adaptor_grad(g.adaptor, dl, batch.las_raw);
  }
  return g;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// Decoupled weight decay Adam:
///   p <- p (1 - lr wd);  p <- p - lr m_hat / (sqrt(v_hat) + eps)
inline void adamw_step(const AdamWConfig& cfg, AdamWState& state, std::span<double> params,
                       std::span<const double> grads) {
  if (params.size() != grads.size()) {
    detail::contract_fail("adamw: " + std::to_string(params.size()) + " params vs " + std::to_string(grads.size()) +
                          " grads");
  }
  if (state.step == 0 && state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    detail::contract_fail("adamw: optimizer state does not match parameter count");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double step_size = cfg.lr / bc1;
  const double bc2_sqrt = std::sqrt(bc2);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= decay;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double denom = std::sqrt(state.v[i]) / bc2_sqrt + cfg.eps;
    params[i] -= step_size * state.m[i] / denom;
  }
}

/// One AdamW state per parameter block; adaptor and discriminator may use
/// different learning rates.
class HeadOptimizer {
 public:
  HeadOptimizer(AdamWConfig adaptor_cfg, AdamWConfig disc_cfg) : adaptor_cfg_(adaptor_cfg), disc_cfg_(disc_cfg) {}

  void step(HeadParams& head, const HeadGradients& g) {
    auto pb = head.blocks();
    auto gb = g.blocks();
    detail::require(pb.size() == gb.size(), "gradient blocks do not match parameter blocks");
    if (states_.empty()) states_.resize(pb.size());
    detail::require(states_.size() == pb.size(), "optimizer state does not match parameter blocks");
    const bool has_adaptor = head.adaptor.has_value();
    for (std::size_t i = 0; i < pb.size(); ++i) {
      const AdamWConfig& cfg = (has_adaptor && i == 0) ? adaptor_cfg_ : disc_cfg_;
      adamw_step(cfg, states_[i], pb[i], gb[i]);
    }
    ++head.generation;
  }

  const std::vector<AdamWState>& states() const { return states_; }

 private:
  AdamWConfig adaptor_cfg_;
  AdamWConfig disc_cfg_;
  std::vector<AdamWState> states_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  HeadParams head;
  std::uint32_t epoch = 0;
  double best_auroc = 0.0;
};

inline TgwFile checkpoint_to_tgw(const Checkpoint& ck) {
  TgwFile f;
  const auto& d = ck.head.disc;
  if (ck.head.adaptor) {
    const auto D = static_cast<std::uint32_t>(ck.head.adaptor->dim);
    f.add_f32("adaptor.weight", {D, D}, ck.head.adaptor->matrix);
  }
  const auto H = static_cast<std::uint32_t>(d.hidden);
  const auto C = static_cast<std::uint32_t>(d.in_ch);
  f.add_f32("disc.conv_a.weight", {H, C, 1, 1}, d.wa);
  f.add_f32("disc.conv_a.bias", {H}, d.ba);
  f.add_f32("disc.conv_b.weight", {1, H, 1, 1}, d.wb);
  f.add_f32("disc.conv_b.bias", {1}, d.bb);
  const double slope[] = {d.slope};
  f.add_f32("disc.slope", {1}, slope);
  const std::uint32_t epoch[] = {ck.epoch};
  f.add_u32("meta.epoch", epoch);
  const double best[] = {ck.best_auroc};
  f.add_f32("meta.best_auroc", {1}, best);
  return f;
}

inline Checkpoint checkpoint_from_tgw(const TgwFile& f) {
  Checkpoint ck;
  const auto& wa = f.get("disc.conv_a.weight");
  detail::require(wa.dims.size() == 4, "disc.conv_a.weight must be rank 4");
  auto& d = ck.head.disc;
  d.hidden = wa.dims[0];
  d.in_ch = wa.dims[1];
  d.wa = wa.to_f64();
  d.ba = f.get("disc.conv_a.bias").to_f64();
  d.wb = f.get("disc.conv_b.weight").to_f64();
  d.bb = f.get("disc.conv_b.bias").to_f64();
  d.slope = f.get("disc.slope").to_f64().at(0);
  d.validate();
  if (const auto* a = f.find("adaptor.weight")) {
    detail::require(a->dims.size() == 2 && a->dims[0] == a->dims[1], "adaptor.weight must be square");
    ck.head.adaptor = Adaptor{a->dims[0], a->to_f64()};
    detail::require(ck.head.adaptor->dim == d.in_ch, "adaptor and discriminator widths disagree");
  }
  ck.epoch = f.get("meta.epoch").to_u32().at(0);
  ck.best_auroc = f.get("meta.best_auroc").to_f64().at(0);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { checkpoint_to_tgw(ck).write(path); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_tgw(TgwFile::read(path)); }

}  // namespace tinyglass
