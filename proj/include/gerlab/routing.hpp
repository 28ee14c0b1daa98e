// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gerlab/errors.hpp"
#include "gerlab/lora.hpp"
#include "gerlab/tensor.hpp"

namespace gerlab {

enum class LocalLevel { kFrame, kUtterance };

// Expert-combination policy of one HDMoLE site. The default is the full
// hierarchical scheme: global and local weights, each gated by its own
// trainable threshold. Ablations switch individual pieces off or replace the
// thresholds with a static Top-K selection over pooled combined weights.
struct RoutingPolicy {
  bool use_global = true;
  bool threshold_global = true;
  bool threshold_local = true;
  std::size_t static_top_k = 0;  // > 0 replaces dynamic thresholds
  LocalLevel local_level = LocalLevel::kFrame;
};

inline const char* to_string(LocalLevel level) {
  return level == LocalLevel::kFrame ? "frame" : "utterance";
}

namespace detail {

// A 1-D tensor counts as a single probability row.
inline std::size_t row_width(const Tensor& p) {
  return p.shape().size() == 1 ? p.numel() : p.cols();
}
inline std::size_t row_count(const Tensor& p) {
  return p.shape().size() == 1 ? 1 : p.rows();
}

inline void check_probability_rows(const Tensor& p, const char* who) {
  const std::size_t n = row_width(p);
  const std::size_t rows = row_count(p);
  for (std::size_t t = 0; t < rows; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = p.values()[t * n + j];
      if (v < -1e-12)
        throw ContractError(std::string(who) + ": negative probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ContractError(std::string(who) + ": row does not sum to 1 (" +
                          std::to_string(s) + ")");
  }
}

}  // namespace detail

// Softmax over the frozen domain classifier's logits; one row per utterance,
// shared by every HDMoLE site in the model.
inline Tensor global_route(const Tensor& classifier_logits) {
  if (classifier_logits.shape().size() != 1)
    throw DimensionError("global_route: expected 1-D logits, got " +
                         shape_str(classifier_logits.shape()));
  return softmax(classifier_logits, 0);
}

// Dynamic-threshold adaptation. Per probability row p:
//   mask    = 1[p >= tau]
//   adapted = mask .* p / sum(mask .* p) * tau
// The indicator is piecewise constant: gradients reach tau only through the
// final scaling. If training pushed tau above max(p) the mask would be empty
// and the normalizer zero; that row falls back to a one-hot argmax scaled by
// tau, keeping at least one expert selected (lowest index on ties).
inline Tensor threshold_adapt(const Tensor& p, const Tensor& tau) {
  if (tau.numel() != 1)
    throw DimensionError("threshold_adapt: tau must be scalar");
  const double tv = tau.at(0);
  if (tv <= 0.0 || tv > 1.0)
    throw ContractError("threshold_adapt: tau must lie in (0,1], got " +
                        std::to_string(tv));
  detail::check_probability_rows(p, "threshold_adapt");

  const std::size_t n = detail::row_width(p);
  const std::size_t rows = detail::row_count(p);
  Tensor out(p.shape());
  // Normalized masked rows (or one-hot fallback), cached for backward.
  std::vector<double> norm(rows * n, 0.0);
  std::vector<char> fallback(rows, 0);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* row = &p.values()[t * n];
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (row[j] >= tv) denom += row[j];
    if (denom > 0.0) {
      for (std::size_t j = 0; j < n; ++j)
        if (row[j] >= tv) norm[t * n + j] = row[j] / denom;
    } else {
      fallback[t] = 1;
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
      norm[t * n + best] = 1.0;
    }
    for (std::size_t j = 0; j < n; ++j)
      out.values()[t * n + j] = norm[t * n + j] * tv;
  }

  if (detail::track_inputs({&p, &tau})) {
    const bool gp = detail::wants_grad(p), gt = detail::wants_grad(tau);
    auto pd = p.data_ptr(), td = tau.data_ptr(), od = out.data_ptr();
    auto nm = std::move(norm);
    auto fb = std::move(fallback);
    detail::record_op(out, {&p, &tau}, [=]() {
      for (std::size_t t = 0; t < rows; ++t) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += od->grad[t * n + j] * nm[t * n + j];
        if (gt) td->grad[0] += dot;
        if (gp && !fb[t]) {
          double denom = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            if (pd->values[t * n + j] >= tv) denom += pd->values[t * n + j];
          for (std::size_t j = 0; j < n; ++j)
            if (pd->values[t * n + j] >= tv)
              pd->grad[t * n + j] +=
                  tv / denom * (od->grad[t * n + j] - dot);
        }
      }
    });
  }
  return out;
}

// Static Top-K weights: keep the K largest entries of p (ties broken toward
// the lowest index), renormalize them to sum one, zero elsewhere. Forward
// values only.
inline std::vector<double> topk_weights(const Tensor& p, std::size_t k) {
  const std::size_t n = p.numel();
  if (k < 1 || k > n)
    throw ConfigError("topk: K=" + std::to_string(k) + " out of range for " +
                      std::to_string(n) + " experts");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (p.at(a) != p.at(b)) return p.at(a) > p.at(b);
    return a < b;
  });
  std::vector<double> w(n, 0.0);
  double denom = 0.0;
  for (std::size_t i = 0; i < k; ++i) denom += p.at(order[i]);
  for (std::size_t i = 0; i < k; ++i) w[order[i]] = p.at(order[i]) / denom;
  return w;
}

// Weighted sum of the Top-K experts' outputs. Gradients flow into the
// selected entries of p and into the selected outputs; the selection itself
// is piecewise constant.
inline Tensor topk_combine(const Tensor& p, std::size_t k,
                           const std::vector<Tensor>& outputs) {
  const std::size_t n = p.numel();
  if (outputs.size() != n)
    throw ConfigError("topk_combine: " + std::to_string(outputs.size()) +
                      " outputs for " + std::to_string(n) + " weights");
  detail::check_probability_rows(p, "topk_combine");
  const std::vector<double> w = topk_weights(p, k);

  Tensor out(outputs[0].shape());
  for (std::size_t j = 0; j < n; ++j) {
    if (w[j] == 0.0) continue;
    if (outputs[j].shape() != out.shape())
      throw DimensionError("topk_combine: expert output shape mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i)
      out.at(i) += w[j] * outputs[j].at(i);
  }

  bool any = detail::wants_grad(p);
  for (const Tensor& o : outputs) any = any || detail::wants_grad(o);
  if (any && GradTape::active()) {
    auto pd = p.data_ptr();
    auto od = out.data_ptr();
    const bool gp = detail::wants_grad(p);
    std::vector<std::shared_ptr<detail::TensorData>> outs;
    std::vector<bool> gouts;
    for (const Tensor& o : outputs) {
      outs.push_back(o.data_ptr());
      gouts.push_back(detail::wants_grad(o));
      if (gouts.back()) o.data_ptr()->ensure_grad();
    }
    if (gp) pd->ensure_grad();
    od->tracked = true;
    od->ensure_grad();
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (w[j] > 0.0) denom += p.at(j);
    GradTape::active()->record(od, [=]() {
      // <dOut, out_j> per selected expert, and the weighted mean of those.
      std::vector<double> dots(n, 0.0);
      double mix = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (w[j] == 0.0) continue;
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          dots[j] += od->grad[i] * outs[j]->values[i];
        mix += w[j] * dots[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (w[j] == 0.0) continue;
        if (gouts[j])
          for (std::size_t i = 0; i < od->grad.size(); ++i)
            outs[j]->grad[i] += w[j] * od->grad[i];
        if (gp) pd->grad[j] += (dots[j] - mix) / denom;
      }
    });
  }
  return out;
}

// Per-utterance routing state of one site, captured for diagnostics.
struct RoutingWeights {
  std::vector<double> global;        // P_g  [N]
  std::vector<double> global_adapted;  // P_ga [N] (zeros when global unused)
  Tensor local;                      // P_l  [T x N] or [1 x N]
  Tensor local_adapted;              // P_la same shape
  Tensor adapted;                    // P_a  [rows x N]
};

// One adapter site running a frozen base linear, N frozen LoRA experts, a
// trainable local router and two trainable thresholds.
struct HdmoleLayer {
  std::string site_name;
  Tensor base_weight;  // [d_out x d_in], frozen
  Tensor base_bias;    // [d_out], frozen
  std::vector<LoraExpert> experts;
  Tensor router_weight;  // [N x d_in], trainable
  Tensor tau_global;     // scalar, trainable
  Tensor tau_local;      // scalar, trainable
  RoutingPolicy policy;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t d_in() const { return base_weight.shape()[1]; }

  double scaling() const { return experts.front().scaling(); }

  void validate() const {
    if (experts.empty())
      throw ConfigError("hdmole: site " + site_name + " has no experts");
    const auto& first = experts.front();
    for (const auto& e : experts)
      if (e.d_in() != first.d_in() || e.d_out() != first.d_out() ||
          e.rank != first.rank || e.alpha != first.alpha)
        throw ConfigError("hdmole: expert shape disagreement at site " +
                          site_name);
    if (first.d_in() != base_weight.shape()[1] ||
        first.d_out() != base_weight.shape()[0])
      throw ConfigError("hdmole: experts do not match base layer at site " +
                        site_name);
  }
};

// Builds an HDMoLE site over an existing frozen linear. Thresholds start at
// 1/N so that at least one expert always passes at initialization.
inline HdmoleLayer make_hdmole_layer(const std::string& site_name,
                                     const Tensor& base_weight,
                                     const Tensor& base_bias,
                                     std::vector<LoraExpert> experts,
                                     RoutingPolicy policy = {}) {
  HdmoleLayer layer;
  layer.site_name = site_name;
  layer.base_weight = base_weight;
  layer.base_bias = base_bias;
  layer.experts = std::move(experts);
  layer.policy = policy;
  const std::size_t n = layer.experts.size();
  layer.router_weight =
      Tensor::zeros({n, base_weight.shape()[1]}).set_requires_grad();
  layer.tau_global =
      Tensor::scalar(1.0 / static_cast<double>(n)).set_requires_grad();
  layer.tau_local =
      Tensor::scalar(1.0 / static_cast<double>(n)).set_requires_grad();
  layer.validate();
  return layer;
}

// Local routing weights: softmax over experts per frame, or once per
// utterance after mean-pooling along the length dimension.
inline Tensor local_route(const HdmoleLayer& layer, const Tensor& h_in,
                          LocalLevel level) {
  if (h_in.shape().size() != 2 || h_in.rows() == 0)
    throw DimensionError("local_route: need non-empty 2-D input");
  if (level == LocalLevel::kUtterance)
    return softmax(linear(mean_pool_rows(h_in), layer.router_weight), 1);
  return softmax(linear(h_in, layer.router_weight), 1);
}

namespace detail {

// P_a[t,:] = global_row + local[t,:].
inline Tensor broadcast_add_global(const Tensor& global_row,
                                   const Tensor& local) {
  const std::size_t t = local.rows(), n = local.cols();
  if (global_row.numel() != n)
    throw DimensionError("broadcast_add_global: width mismatch");
  Tensor out({t, n});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = global_row.at(j) + local.at(i, j);
  if (track_inputs({&global_row, &local})) {
    const bool gg = wants_grad(global_row), gl = wants_grad(local);
    auto gd = global_row.data_ptr(), ld = local.data_ptr(),
         od = out.data_ptr();
    record_op(out, {&global_row, &local}, [=]() {
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (gg) gd->grad[j] += od->grad[i * n + j];
          if (gl) ld->grad[i * n + j] += od->grad[i * n + j];
        }
    });
  }
  return out;
}

// Column j of a [T x N] matrix as a 1-D tensor.
inline Tensor column(const Tensor& x, std::size_t j) {
  const std::size_t t = x.rows(), n = x.cols();
  Tensor out({t});
  for (std::size_t i = 0; i < t; ++i) out.at(i) = x.at(i, j);
  if (track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    record_op(out, {&x}, [=]() {
      for (std::size_t i = 0; i < t; ++i)
        xd->grad[i * n + j] += od->grad[i];
    });
  }
  return out;
}

}  // namespace detail

// HDMoLE forward pass for one site:
//   P_a  = threshold_adapt(P_g, tau_g) + threshold_adapt(P_l, tau_l)
//   out  = W0 h + (alpha/r) * sum_j P_a^j .* (B^j A^j h) + b
// An expert whose global and local weights both fall below their thresholds
// contributes exactly zero. `p_global` is computed once per utterance and is
// shared across sites. With policy.static_top_k > 0, the thresholds are
// replaced by static Top-K over pooled combined weights.
inline Tensor hdmole_forward(const HdmoleLayer& layer, const Tensor& h_in,
                             const Tensor& p_global,
                             RoutingWeights* diag = nullptr) {
  layer.validate();
  const std::size_t n = layer.num_experts();
  if (layer.policy.use_global &&
      (!p_global.defined() || p_global.numel() != n))
    throw ConfigError("hdmole_forward: P_g has wrong arity for " +
                      std::to_string(n) + " experts");
  const std::size_t t = h_in.rows();

  Tensor base = linear(h_in, layer.base_weight, layer.base_bias);

  // Expert deltas B^j A^j h, unscaled.
  std::vector<Tensor> deltas;
  deltas.reserve(n);
  for (const auto& e : layer.experts)
    deltas.push_back(linear(linear(h_in, e.a_matrix), e.b_matrix));

  Tensor combined;  // (alpha/r)-unscaled weighted expert sum
  Tensor p_local =
      local_route(layer, h_in, layer.policy.local_level);
  Tensor adapted;  // P_a, [rows x N]

  Tensor local_adapted;
  Tensor global_adapted;

  if (layer.policy.static_top_k > 0) {
    // Pooled combined weights; Top-K renormalized.
    Tensor p_local_utt = layer.policy.local_level == LocalLevel::kUtterance
                             ? p_local
                             : softmax(linear(mean_pool_rows(h_in),
                                              layer.router_weight),
                                       1);
    Tensor p_comb = p_local_utt;
    if (layer.policy.use_global) {
      Tensor pg2({1, n});
      for (std::size_t j = 0; j < n; ++j) pg2.at(0, j) = p_global.at(j);
      p_comb = scale(add(p_local_utt, pg2), 0.5);
    }
    combined = topk_combine(p_comb, layer.policy.static_top_k, deltas);
    const std::vector<double> w =
        topk_weights(p_comb, layer.policy.static_top_k);
    adapted = Tensor({1, n});
    for (std::size_t j = 0; j < n; ++j) adapted.at(0, j) = w[j];
    local_adapted = p_local;
    global_adapted = Tensor({n});
  } else {
    local_adapted = layer.policy.threshold_local
                        ? threshold_adapt(p_local, layer.tau_local)
                        : p_local;
    Tensor local_frames = local_adapted.rows() == t
                              ? local_adapted
                              : broadcast_rows(local_adapted, t);
    if (layer.policy.use_global) {
      global_adapted = layer.policy.threshold_global
                           ? threshold_adapt(p_global, layer.tau_global)
                           : p_global;
      adapted = detail::broadcast_add_global(global_adapted, local_frames);
    } else {
      global_adapted = Tensor({n});
      adapted = local_frames;
    }
    for (std::size_t j = 0; j < n; ++j) {
      Tensor w = detail::column(adapted, j);
      Tensor scaled = row_scale(deltas[j], w);
      combined = combined.defined() ? add(combined, scaled) : scaled;
    }
  }

  if (diag != nullptr) {
    if (layer.policy.use_global)
      diag->global.assign(p_global.values().begin(),
                          p_global.values().end());
    else
      diag->global.assign(n, 0.0);
    diag->global_adapted.assign(global_adapted.values().begin(),
                                global_adapted.values().end());
    diag->local = p_local.clone();
    diag->local_adapted = local_adapted.clone();
    diag->adapted = adapted.clone();
  }

  return add(base, scale(combined, layer.scaling()));
}

// ---------------------------------------------------------------------------
// Routing diagnostics records (one JSON object per line)
// ---------------------------------------------------------------------------

struct RoutingRecord {
  std::string utterance_id;
  std::string domain_tag;
  std::size_t layer_index = 0;
  std::string site;
  std::vector<double> p_global;      // [N]
  std::vector<double> p_local_mean;  // [N], mean over frames
  std::vector<double> p_adapted_mean;  // [N], mean over frames
  double mean_selected = 0.0;        // avg #experts with P_a > 0 per frame
};

inline RoutingRecord summarize_routing(const std::string& utterance_id,
                                       const std::string& domain_tag,
                                       std::size_t layer_index,
                                       const std::string& site,
                                       const RoutingWeights& w) {
  RoutingRecord r;
  r.utterance_id = utterance_id;
  r.domain_tag = domain_tag;
  r.layer_index = layer_index;
  r.site = site;
  r.p_global = w.global;
  const std::size_t n = w.adapted.cols();
  r.p_local_mean.assign(n, 0.0);
  const std::size_t lt = w.local.rows();
  for (std::size_t i = 0; i < lt; ++i)
    for (std::size_t j = 0; j < n; ++j)
      r.p_local_mean[j] += w.local.at(i, j) / static_cast<double>(lt);
  r.p_adapted_mean.assign(n, 0.0);
  const std::size_t at = w.adapted.rows();
  std::size_t selected = 0;
  for (std::size_t i = 0; i < at; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      r.p_adapted_mean[j] += w.adapted.at(i, j) / static_cast<double>(at);
      if (w.adapted.at(i, j) > 0.0) ++selected;
    }
  r.mean_selected = static_cast<double>(selected) / static_cast<double>(at);
  return r;
}

inline void append_routing_record(std::ostream& os, const RoutingRecord& r) {
  nlohmann::json j;
  j["utt"] = r.utterance_id;
  j["domain"] = r.domain_tag;
  j["layer"] = r.layer_index;
  j["site"] = r.site;
  j["p_g"] = r.p_global;
  j["p_l_mean"] = r.p_local_mean;
  j["p_a_mean"] = r.p_adapted_mean;
  j["selected"] = r.mean_selected;
  os << j.dump() << "\n";
}

inline RoutingRecord parse_routing_record(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ReportError("malformed routing record");
  RoutingRecord r;
  try {
    r.utterance_id = j.at("utt").get<std::string>();
    r.domain_tag = j.at("domain").get<std::string>();
    r.layer_index = j.at("layer").get<std::size_t>();
    r.site = j.at("site").get<std::string>();
    r.p_global = j.at("p_g").get<std::vector<double>>();
    r.p_local_mean = j.at("p_l_mean").get<std::vector<double>>();
    r.p_adapted_mean = j.at("p_a_mean").get<std::vector<double>>();
    r.mean_selected = j.at("selected").get<double>();
  } catch (const nlohmann::json::exception&) {
    throw ReportError("malformed routing record");
  }
  return r;
}

}  // namespace gerlab
