#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gam/ground.hpp"
#include "gam/nn.hpp"
#include "gam/rng.hpp"
#include "gam/sequence.hpp"

namespace gam {

constexpr double kLogVarMin = -12.0;
constexpr double kLogVarMax = 8.0;

// Diagonal Gaussian over columns of a batch; log-variances are clamped on
// construction so KL and sampling stay finite.
struct GaussianParams {
  MatX mean;
  MatX log_var;

  int dim() const { return static_cast<int>(mean.rows()); }
  int batch() const { return static_cast<int>(mean.cols()); }
};

struct ModelConfig {
  int state_dim = 207;
  int interaction_dim = 46;
  int contact_dim = 9;
  int latent_motion = 48;
  int latent_interaction = 16;
  int motion_width = 512;
  int motion_depth = 4;
  int interaction_width = 128;
  int interaction_depth = 4;
  int decoder_width = 512;
  int decoder_depth = 4;
  Activation activation = Activation::tanh_fn;
  double w_recon_x = 1.0;
  double w_recon_g = 1.0;
  double w_kl_m = 1e-3;
  double w_kl_g = 1e-3;
  double w_consist = 1.0;
  double w_contact = 0.1;

  int decoder_input_dim() const {
    return latent_motion + latent_interaction + state_dim + interaction_dim;
  }

  void validate() const {
    for (int d : {state_dim, interaction_dim, contact_dim, latent_motion, latent_interaction,
                  motion_width, motion_depth, interaction_width, interaction_depth, decoder_width,
                  decoder_depth})
      if (d <= 0) throw ConfigError("model config: all dimensions must be positive");
    for (double w : {w_recon_x, w_recon_g, w_kl_m, w_kl_g, w_consist, w_contact})
      if (w < 0) throw ConfigError("model config: loss weights must be non-negative");
  }

  bool operator==(const ModelConfig&) const = default;

  nlohmann::json to_json() const {
    return {{"state_dim", state_dim},
            {"interaction_dim", interaction_dim},
            {"contact_dim", contact_dim},
            {"latent_motion", latent_motion},
            {"latent_interaction", latent_interaction},
            {"motion_width", motion_width},
            {"motion_depth", motion_depth},
            {"interaction_width", interaction_width},
            {"interaction_depth", interaction_depth},
            {"decoder_width", decoder_width},
            {"decoder_depth", decoder_depth},
            {"activation", gam::to_string(activation)},
            {"w_recon_x", w_recon_x},
            {"w_recon_g", w_recon_g},
            {"w_kl_m", w_kl_m},
            {"w_kl_g", w_kl_g},
            {"w_consist", w_consist},
            {"w_contact", w_contact}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.state_dim = j.at("state_dim").get<int>();
      c.interaction_dim = j.at("interaction_dim").get<int>();
      c.contact_dim = j.at("contact_dim").get<int>();
      c.latent_motion = j.at("latent_motion").get<int>();
      c.latent_interaction = j.at("latent_interaction").get<int>();
      c.motion_width = j.at("motion_width").get<int>();
      c.motion_depth = j.at("motion_depth").get<int>();
      c.interaction_width = j.at("interaction_width").get<int>();
      c.interaction_depth = j.at("interaction_depth").get<int>();
      c.decoder_width = j.at("decoder_width").get<int>();
      c.decoder_depth = j.at("decoder_depth").get<int>();
      c.activation = activation_from_string(j.at("activation").get<std::string>());
      c.w_recon_x = j.at("w_recon_x").get<double>();
      c.w_recon_g = j.at("w_recon_g").get<double>();
      c.w_kl_m = j.at("w_kl_m").get<double>();
      c.w_kl_g = j.at("w_kl_g").get<double>();
      c.w_consist = j.at("w_consist").get<double>();
      c.w_contact = j.at("w_contact").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Two posterior encoders, two conditional priors, and a shared decoder whose
// trunk feeds a residual state head, an interaction head, and a contact head.
struct ModelWeights {
  ModelConfig config;
  Mlp motion_encoder;       // [x_prev; x_curr] -> (mean, log_var) of z_m
  Mlp interaction_encoder;  // [g_prev; g_curr] -> (mean, log_var) of z_g
  Mlp motion_prior;         // x_prev -> (mean, log_var) of z_m
  Mlp interaction_prior;    // g_prev -> (mean, log_var) of z_g
  Mlp decoder_trunk;        // [z_m; z_g; x_prev; g_prev] -> hidden
  Linear head_state;        // hidden -> state delta
  Linear head_interaction;  // hidden -> interaction
  Linear head_contact;      // hidden -> contact logits

  static ModelWeights init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed ^ 0xa076bd6a4c8dd9e1ULL);
    ModelWeights w;
    w.config = cfg;
    const Activation act = cfg.activation;
    w.motion_encoder = make_mlp(2 * cfg.state_dim, cfg.motion_width, cfg.motion_depth,
                                2 * cfg.latent_motion, act, rng, 0.01);
    w.interaction_encoder = make_mlp(2 * cfg.interaction_dim, cfg.interaction_width,
                                     cfg.interaction_depth, 2 * cfg.latent_interaction, act, rng,
                                     0.01);
    w.motion_prior = make_mlp(cfg.state_dim, cfg.motion_width, cfg.motion_depth,
                              2 * cfg.latent_motion, act, rng, 0.01);
    w.interaction_prior = make_mlp(cfg.interaction_dim, cfg.interaction_width,
                                   cfg.interaction_depth, 2 * cfg.latent_interaction, act, rng,
                                   0.01);
    w.decoder_trunk = make_mlp(cfg.decoder_input_dim(), cfg.decoder_width, cfg.decoder_depth,
                               cfg.decoder_width, act, rng, 1.0, /*final_activation=*/true);
    const double head_std = 0.01 * std::sqrt(2.0 / cfg.decoder_width);
    w.head_state = {rng.normal_mat(cfg.state_dim, cfg.decoder_width, head_std),
                    VecX::Zero(cfg.state_dim)};
    w.head_interaction = {rng.normal_mat(cfg.interaction_dim, cfg.decoder_width, head_std),
                          VecX::Zero(cfg.interaction_dim)};
    w.head_contact = {rng.normal_mat(cfg.contact_dim, cfg.decoder_width, head_std),
                      VecX::Zero(cfg.contact_dim)};
    return w;
  }

  ParamSpans param_spans() {
    ParamSpans s;
    s.add(motion_encoder);
    s.add(interaction_encoder);
    s.add(motion_prior);
    s.add(interaction_prior);
    s.add(decoder_trunk);
    s.add(head_state);
    s.add(head_interaction);
    s.add(head_contact);
    return s;
  }
};

struct ModelGrads {
  MlpGrads motion_encoder, interaction_encoder, motion_prior, interaction_prior, decoder_trunk;
  LinearGrads head_state, head_interaction, head_contact;

  static ModelGrads zeros_like(const ModelWeights& w) {
    return {MlpGrads::zeros_like(w.motion_encoder), MlpGrads::zeros_like(w.interaction_encoder),
            MlpGrads::zeros_like(w.motion_prior),   MlpGrads::zeros_like(w.interaction_prior),
            MlpGrads::zeros_like(w.decoder_trunk),  LinearGrads::zeros_like(w.head_state),
            LinearGrads::zeros_like(w.head_interaction), LinearGrads::zeros_like(w.head_contact)};
  }

  ParamSpans param_spans() {
    ParamSpans s;
    s.add(motion_encoder);
    s.add(interaction_encoder);
    s.add(motion_prior);
    s.add(interaction_prior);
    s.add(decoder_trunk);
    s.add(head_state);
    s.add(head_interaction);
    s.add(head_contact);
    return s;
  }
};

namespace model_detail {

struct GaussCache {
  MlpCache mlp;
  MatX clamp_mask;  // 1 where log_var was inside [kLogVarMin, kLogVarMax]
};

inline GaussianParams gaussian_forward(const Mlp& net, const MatX& input,
                                       GaussCache* cache = nullptr) {
  const MatX out = mlp_forward(net, input, cache ? &cache->mlp : nullptr);
  const int k = static_cast<int>(out.rows()) / 2;
  GaussianParams p;
  p.mean = out.topRows(k);
  const MatX raw_lv = out.bottomRows(k);
  p.log_var = raw_lv.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
  if (cache)
    cache->clamp_mask = ((raw_lv.array() > kLogVarMin) && (raw_lv.array() < kLogVarMax))
                            .cast<double>()
                            .matrix();
  return p;
}

inline void gaussian_backward(const Mlp& net, const GaussCache& cache, const MatX& d_mean,
                              const MatX& d_log_var, MlpGrads* grads, MatX* d_input) {
  MatX d_out(d_mean.rows() * 2, d_mean.cols());
  d_out.topRows(d_mean.rows()) = d_mean;
  d_out.bottomRows(d_mean.rows()) = d_log_var.cwiseProduct(cache.clamp_mask);
  mlp_backward(net, cache.mlp, d_out, grads, d_input);
}

inline MatX vstack(const MatX& a, const MatX& b) {
  MatX out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace model_detail

inline GaussianParams encode_motion(const ModelWeights& w, const MatX& x_prev, const MatX& x_curr) {
  return model_detail::gaussian_forward(w.motion_encoder, model_detail::vstack(x_prev, x_curr));
}

inline GaussianParams encode_interaction(const ModelWeights& w, const MatX& g_prev,
                                         const MatX& g_curr) {
  return model_detail::gaussian_forward(w.interaction_encoder,
                                        model_detail::vstack(g_prev, g_curr));
}

inline GaussianParams prior_motion(const ModelWeights& w, const MatX& x_prev) {
  return model_detail::gaussian_forward(w.motion_prior, x_prev);
}

inline GaussianParams prior_interaction(const ModelWeights& w, const MatX& g_prev) {
  return model_detail::gaussian_forward(w.interaction_prior, g_prev);
}

// Reparameterized draw: mean + exp(log_var / 2) * eps.
inline MatX sample_latent(const GaussianParams& p, Rng& rng, MatX* eps_out = nullptr) {
  const MatX eps = rng.normal_mat(p.dim(), p.batch());
  if (eps_out) *eps_out = eps;
  return p.mean + (0.5 * p.log_var.array()).exp().matrix().cwiseProduct(eps);
}

inline VecX sample_latent(const GaussianParams& p, uint64_t seed) {
  Rng rng(seed ^ 0x6c62272e07bb0142ULL);
  return sample_latent(p, rng);
}

struct DecodeOut {
  MatX x_hat;
  MatX g_hat;
  MatX contact_logits;
};

struct DecodeCache {
  MlpCache trunk;
  MatX trunk_out;
};

inline DecodeOut decode(const ModelWeights& w, const MatX& z_m, const MatX& z_g,
                        const MatX& x_prev, const MatX& g_prev, DecodeCache* cache = nullptr) {
  MatX input(w.config.decoder_input_dim(), z_m.cols());
  input << z_m, z_g, x_prev, g_prev;
  DecodeCache local;
  DecodeCache* c = cache ? cache : &local;
  c->trunk_out = mlp_forward(w.decoder_trunk, input, &c->trunk);
  DecodeOut out;
  out.x_hat = x_prev + w.head_state.forward(c->trunk_out);  // residual state head
  out.g_hat = w.head_interaction.forward(c->trunk_out);
  out.contact_logits = w.head_contact.forward(c->trunk_out);
  return out;
}

// Chain rule for decode. d_x_prev/d_g_prev/d_z are ASSIGNED (not accumulated);
// weight gradients accumulate into `grads` when given.
inline void decode_backward(const ModelWeights& w, const DecodeCache& cache, const MatX& d_x_hat,
                            const MatX& d_g_hat, const MatX& d_logits, ModelGrads* grads,
                            MatX* d_z_m, MatX* d_z_g, MatX* d_x_prev, MatX* d_g_prev) {
  MatX d_trunk = MatX::Zero(cache.trunk_out.rows(), cache.trunk_out.cols());
  MatX tmp;
  if (d_x_hat.size()) {
    linear_backward(w.head_state, cache.trunk_out, d_x_hat, grads ? &grads->head_state : nullptr,
                    &tmp);
    d_trunk += tmp;
  }
  if (d_g_hat.size()) {
    linear_backward(w.head_interaction, cache.trunk_out, d_g_hat,
                    grads ? &grads->head_interaction : nullptr, &tmp);
    d_trunk += tmp;
  }
  if (d_logits.size()) {
    linear_backward(w.head_contact, cache.trunk_out, d_logits,
                    grads ? &grads->head_contact : nullptr, &tmp);
    d_trunk += tmp;
  }
  MatX d_input;
  mlp_backward(w.decoder_trunk, cache.trunk, d_trunk, grads ? &grads->decoder_trunk : nullptr,
               &d_input);
  const int km = w.config.latent_motion, kg = w.config.latent_interaction;
  const int sd = w.config.state_dim, gd = w.config.interaction_dim;
  if (d_z_m) *d_z_m = d_input.middleRows(0, km);
  if (d_z_g) *d_z_g = d_input.middleRows(km, kg);
  if (d_x_prev) {
    *d_x_prev = d_input.middleRows(km + kg, sd);
    if (d_x_hat.size()) *d_x_prev += d_x_hat;  // residual skip connection
  }
  if (d_g_prev) *d_g_prev = d_input.middleRows(km + kg + sd, gd);
}

// Closed-form KL(q || p) between diagonal Gaussians, summed over dimensions.
// Returns one value per batch column.
inline VecX kl_diag_gaussians_batch(const GaussianParams& q, const GaussianParams& p) {
  if (q.dim() != p.dim() || q.batch() != p.batch())
    throw DimensionError("kl_diag_gaussians: dimension mismatch");
  const auto dlv = (q.log_var - p.log_var).array();
  const auto dmu = (q.mean - p.mean).array();
  const auto per = 0.5 * (dlv.exp() + dmu.square() * (-p.log_var.array()).exp() - 1.0 - dlv);
  return per.colwise().sum().transpose();
}

inline double kl_diag_gaussians(const GaussianParams& q, const GaussianParams& p) {
  return kl_diag_gaussians_batch(q, p).sum();
}

// d(sum of per-item KL)/d(params); accumulates into the outputs.
inline void kl_backward(const GaussianParams& q, const GaussianParams& p, double scale,
                        MatX& d_q_mean, MatX& d_q_lv, MatX& d_p_mean, MatX& d_p_lv) {
  const auto dmu = (q.mean - p.mean).array();
  const auto inv_vp = (-p.log_var.array()).exp();
  const auto e = (q.log_var - p.log_var).array().exp();
  d_q_mean.array() += scale * dmu * inv_vp;
  d_p_mean.array() -= scale * dmu * inv_vp;
  d_q_lv.array() += scale * 0.5 * (e - 1.0);
  d_p_lv.array() += scale * 0.5 * (1.0 - e - dmu.square() * inv_vp);
}

inline double bce_with_logits(const MatX& logits, const MatX& labels) {
  const auto l = logits.array();
  return (l.max(0.0) - l * labels.array() + (1.0 + (-l.abs()).exp()).log()).sum();
}

inline MatX sigmoid(const MatX& logits) {
  return logits.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

// One training item per column. Columns are ordered step-major: column
// t * windows + w is step t of window w, so rollout mode can slice one
// time step as a contiguous block.
struct TransitionBatch {
  SkeletonDef skeleton;
  MatX x_prev, x_curr;              // state_dim x (windows * steps)
  MatX g_prev, g_curr;              // interaction_dim x (windows * steps)
  MatX c_curr;                      // contact_dim x (windows * steps)
  std::vector<GroundPlane> plane;   // one per column
  std::vector<uint64_t> item_seed;  // per-column sampling key
  int windows = 1;
  int steps = 1;

  int items() const { return static_cast<int>(x_prev.cols()); }

  void validate() const {
    const int n = items();
    if (x_curr.cols() != n || g_prev.cols() != n || g_curr.cols() != n || c_curr.cols() != n ||
        static_cast<int>(plane.size()) != n || windows * steps != n)
      throw DimensionError("transition batch: inconsistent item counts");
  }
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

enum class LossMode { teacher_forced, rollout };

struct LossBreakdown {
  double recon_x = 0, recon_g = 0, kl_m = 0, kl_g = 0, consist = 0, contact = 0;
  double total = 0;
};

namespace model_detail {

struct StepCache {
  GaussCache enc_m, enc_g, pri_m, pri_g;
  GaussianParams q_m, q_g, p_m, p_g;
  MatX eps_m, eps_g, z_m, z_g;
  DecodeCache dec;
  DecodeOut out;
  MatX x_prev_used, g_prev_used;
  MatX f_of_xhat;  // interaction of the decoded state, per column
};

}  // namespace model_detail

// Objective of one batch: squared-error reconstruction of state and
// interaction, KL between each posterior encoder and its conditional prior,
// interaction-consistency of the decoded state against the plane geometry,
// and contact BCE. Teacher-forced mode conditions on the data and decodes
// posterior samples. Rollout mode conditions every network on the decoder's
// own previous outputs and decodes samples drawn from the conditional priors,
// which is the path autoregressive inference actually uses; gradients flow
// through the whole chain. All terms are means over batch items; `total`
// applies the configured weights with `kl_scale` multiplying both KL weights.
inline double training_loss(const ModelWeights& w, const TransitionBatch& batch, LossMode mode,
                            uint64_t sample_seed, LossBreakdown* breakdown = nullptr,
                            ModelGrads* grads = nullptr, double kl_scale = 1.0) {
  using namespace model_detail;
  batch.validate();
  const ModelConfig& cfg = w.config;
  const int n_items = batch.items();
  const int n_steps = (mode == LossMode::rollout) ? batch.steps : 1;
  const int cols = n_items / n_steps;  // columns processed per step

  LossBreakdown bd;
  std::vector<StepCache> caches(n_steps);

  for (int t = 0; t < n_steps; ++t) {
    StepCache& c = caches[t];
    const int col0 = t * cols;
    const MatX x_curr = batch.x_curr.middleCols(col0, cols);
    const MatX g_curr = batch.g_curr.middleCols(col0, cols);
    const MatX c_curr = batch.c_curr.middleCols(col0, cols);
    if (t == 0 || mode == LossMode::teacher_forced) {
      c.x_prev_used = batch.x_prev.middleCols(col0, cols);
      c.g_prev_used = batch.g_prev.middleCols(col0, cols);
    } else {
      c.x_prev_used = caches[t - 1].out.x_hat;
      c.g_prev_used = caches[t - 1].out.g_hat;
    }

    c.q_m = gaussian_forward(w.motion_encoder, vstack(c.x_prev_used, x_curr), &c.enc_m);
    c.q_g = gaussian_forward(w.interaction_encoder, vstack(c.g_prev_used, g_curr), &c.enc_g);
    c.p_m = gaussian_forward(w.motion_prior, c.x_prev_used, &c.pri_m);
    c.p_g = gaussian_forward(w.interaction_prior, c.g_prev_used, &c.pri_g);

    c.eps_m.resize(cfg.latent_motion, cols);
    c.eps_g.resize(cfg.latent_interaction, cols);
    for (int b = 0; b < cols; ++b) {
      Rng r(mix_seed(sample_seed, batch.item_seed.empty()
                                      ? static_cast<uint64_t>(col0 + b)
                                      : batch.item_seed[col0 + b]));
      c.eps_m.col(b) = r.normal_vec(cfg.latent_motion);
      c.eps_g.col(b) = r.normal_vec(cfg.latent_interaction);
    }
    const GaussianParams& z_source = (mode == LossMode::rollout) ? c.p_m : c.q_m;
    const GaussianParams& z_source_g = (mode == LossMode::rollout) ? c.p_g : c.q_g;
    c.z_m = z_source.mean +
            (0.5 * z_source.log_var.array()).exp().matrix().cwiseProduct(c.eps_m);
    c.z_g = z_source_g.mean +
            (0.5 * z_source_g.log_var.array()).exp().matrix().cwiseProduct(c.eps_g);

    c.out = decode(w, c.z_m, c.z_g, c.x_prev_used, c.g_prev_used, &c.dec);

    bd.recon_x += (x_curr - c.out.x_hat).squaredNorm();
    bd.recon_g += (g_curr - c.out.g_hat).squaredNorm();
    bd.kl_m += kl_diag_gaussians_batch(c.q_m, c.p_m).sum();
    bd.kl_g += kl_diag_gaussians_batch(c.q_g, c.p_g).sum();
    c.f_of_xhat.resize(cfg.interaction_dim, cols);
    for (int b = 0; b < cols; ++b)
      c.f_of_xhat.col(b) =
          interaction_from_flat(batch.skeleton, c.out.x_hat.col(b), batch.plane[col0 + b]);
    bd.consist += (c.out.g_hat - c.f_of_xhat).squaredNorm();
    bd.contact += bce_with_logits(c.out.contact_logits, c_curr);
  }

  const double inv_n = 1.0 / n_items;
  bd.recon_x *= inv_n;
  bd.recon_g *= inv_n;
  bd.kl_m *= inv_n;
  bd.kl_g *= inv_n;
  bd.consist *= inv_n;
  bd.contact *= inv_n;
  bd.total = cfg.w_recon_x * bd.recon_x + cfg.w_recon_g * bd.recon_g +
             kl_scale * (cfg.w_kl_m * bd.kl_m + cfg.w_kl_g * bd.kl_g) +
             cfg.w_consist * bd.consist + cfg.w_contact * bd.contact;
  const struct {
    const char* name;
    double v;
  } terms[] = {{"recon_x", bd.recon_x}, {"recon_g", bd.recon_g}, {"kl_m", bd.kl_m},
               {"kl_g", bd.kl_g},       {"consist", bd.consist}, {"contact", bd.contact}};
  for (const auto& t : terms)
    if (!std::isfinite(t.v))
      throw NumericError(std::string("training_loss: non-finite term ") + t.name);
  if (breakdown) *breakdown = bd;
  if (!grads) return bd.total;

  // Reverse pass, latest step first; adjoints on x_hat/g_hat collect the
  // local losses plus everything flowing back from the following step.
  MatX d_xhat_next, d_ghat_next;  // contributions from step t+1
  for (int t = n_steps - 1; t >= 0; --t) {
    StepCache& c = caches[t];
    const int col0 = t * cols;
    const MatX x_curr = batch.x_curr.middleCols(col0, cols);
    const MatX g_curr = batch.g_curr.middleCols(col0, cols);
    const MatX c_curr = batch.c_curr.middleCols(col0, cols);

    MatX d_xhat = 2.0 * inv_n * cfg.w_recon_x * (c.out.x_hat - x_curr);
    MatX d_ghat = 2.0 * inv_n * cfg.w_recon_g * (c.out.g_hat - g_curr);
    // Consistency: || g_hat - f(x_hat) ||^2 pulls on both heads.
    const MatX consist_resid = 2.0 * inv_n * cfg.w_consist * (c.out.g_hat - c.f_of_xhat);
    d_ghat += consist_resid;
    for (int b = 0; b < cols; ++b) {
      VecX dx = VecX::Zero(cfg.state_dim);
      interaction_from_flat_backward(batch.skeleton, batch.plane[col0 + b],
                                     -consist_resid.col(b), dx);
      d_xhat.col(b) += dx;
    }
    MatX d_logits =
        inv_n * cfg.w_contact * (sigmoid(c.out.contact_logits).array() - c_curr.array()).matrix();
    if (d_xhat_next.size()) {
      d_xhat += d_xhat_next;
      d_ghat += d_ghat_next;
    }

    MatX d_z_m, d_z_g, d_x_prev, d_g_prev;
    decode_backward(w, c.dec, d_xhat, d_ghat, d_logits, grads, &d_z_m, &d_z_g, &d_x_prev,
                    &d_g_prev);

    // KL(q || p), scaled.
    MatX d_qm_mean = MatX::Zero(cfg.latent_motion, cols), d_qm_lv = d_qm_mean;
    MatX d_pm_mean = d_qm_mean, d_pm_lv = d_qm_mean;
    MatX d_qg_mean = MatX::Zero(cfg.latent_interaction, cols), d_qg_lv = d_qg_mean;
    MatX d_pg_mean = d_qg_mean, d_pg_lv = d_qg_mean;
    kl_backward(c.q_m, c.p_m, inv_n * kl_scale * cfg.w_kl_m, d_qm_mean, d_qm_lv, d_pm_mean,
                d_pm_lv);
    kl_backward(c.q_g, c.p_g, inv_n * kl_scale * cfg.w_kl_g, d_qg_mean, d_qg_lv, d_pg_mean,
                d_pg_lv);

    // Reparameterized samples feed their source distribution.
    if (mode == LossMode::rollout) {
      d_pm_mean += d_z_m;
      d_pm_lv += 0.5 * d_z_m.cwiseProduct(c.eps_m)
                           .cwiseProduct((0.5 * c.p_m.log_var.array()).exp().matrix());
      d_pg_mean += d_z_g;
      d_pg_lv += 0.5 * d_z_g.cwiseProduct(c.eps_g)
                           .cwiseProduct((0.5 * c.p_g.log_var.array()).exp().matrix());
    } else {
      d_qm_mean += d_z_m;
      d_qm_lv += 0.5 * d_z_m.cwiseProduct(c.eps_m)
                           .cwiseProduct((0.5 * c.q_m.log_var.array()).exp().matrix());
      d_qg_mean += d_z_g;
      d_qg_lv += 0.5 * d_z_g.cwiseProduct(c.eps_g)
                           .cwiseProduct((0.5 * c.q_g.log_var.array()).exp().matrix());
    }

    MatX d_enc_m_in, d_enc_g_in, d_pri_m_in, d_pri_g_in;
    gaussian_backward(w.motion_encoder, c.enc_m, d_qm_mean, d_qm_lv, grads ? &grads->motion_encoder : nullptr,
                      &d_enc_m_in);
    gaussian_backward(w.interaction_encoder, c.enc_g, d_qg_mean, d_qg_lv,
                      grads ? &grads->interaction_encoder : nullptr, &d_enc_g_in);
    gaussian_backward(w.motion_prior, c.pri_m, d_pm_mean, d_pm_lv,
                      grads ? &grads->motion_prior : nullptr, &d_pri_m_in);
    gaussian_backward(w.interaction_prior, c.pri_g, d_pg_mean, d_pg_lv,
                      grads ? &grads->interaction_prior : nullptr, &d_pri_g_in);

    if (t > 0 && mode == LossMode::rollout) {
      // Everything that consumed the previous prediction pushes back into it.
      d_xhat_next = d_x_prev + d_pri_m_in + d_enc_m_in.topRows(cfg.state_dim);
      d_ghat_next = d_g_prev + d_pri_g_in + d_enc_g_in.topRows(cfg.interaction_dim);
    } else {
      d_xhat_next.resize(0, 0);
      d_ghat_next.resize(0, 0);
    }
  }
  return bd.total;
}

enum class RolloutMode { mean, sample };

inline RolloutMode rollout_mode_from_string(const std::string& s) {
  if (s == "mean") return RolloutMode::mean;
  if (s == "sample") return RolloutMode::sample;
  throw ConfigError("unknown rollout mode: " + s);
}

struct RolloutResult {
  MatX x;              // state_dim x (T+1), column 0 is x0
  MatX g;              // interaction_dim x (T+1)
  MatX contact_probs;  // contact_dim x T, step t in column t-1
};

// Autoregressive generation from the conditional priors. When a plane (and
// skeleton) is supplied, the interaction fed at t=0 is recomputed from x0,
// overriding g0.
inline RolloutResult rollout(const ModelWeights& w, const VecX& x0, const VecX& g0, int T,
                             RolloutMode mode, uint64_t seed,
                             const GroundPlane* plane = nullptr,
                             const SkeletonDef* skel = nullptr) {
  if (T < 1) throw ConfigError("rollout: T must be >= 1");
  const ModelConfig& cfg = w.config;
  if (x0.size() != cfg.state_dim || g0.size() != cfg.interaction_dim)
    throw DimensionError("rollout: initial state dimensions do not match the model");
  RolloutResult r;
  r.x.resize(cfg.state_dim, T + 1);
  r.g.resize(cfg.interaction_dim, T + 1);
  r.contact_probs.resize(cfg.contact_dim, T);
  r.x.col(0) = x0;
  r.g.col(0) = (plane && skel) ? interaction_from_flat(*skel, x0, *plane) : g0;
  Rng rng(seed ^ 0x243f6a8885a308d3ULL);
  for (int t = 1; t <= T; ++t) {
    const MatX x_prev = r.x.col(t - 1);
    const MatX g_prev = r.g.col(t - 1);
    const GaussianParams pm = prior_motion(w, x_prev);
    const GaussianParams pg = prior_interaction(w, g_prev);
    const MatX z_m = (mode == RolloutMode::mean) ? pm.mean : sample_latent(pm, rng);
    const MatX z_g = (mode == RolloutMode::mean) ? pg.mean : sample_latent(pg, rng);
    const DecodeOut out = decode(w, z_m, z_g, x_prev, g_prev);
    if (!out.x_hat.allFinite() || !out.g_hat.allFinite())
      throw NumericError("rollout diverged at step " + std::to_string(t));
    r.x.col(t) = out.x_hat;
    r.g.col(t) = out.g_hat;
    r.contact_probs.col(t - 1) = sigmoid(out.contact_logits);
  }
  return r;
}

}  // namespace gam
