// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gerlab/errors.hpp"
#include "gerlab/io.hpp"
#include "gerlab/rng.hpp"
#include "gerlab/tensor.hpp"

namespace gerlab {

// One low-rank adapter pair. The update to a frozen base weight is
// (alpha/rank) * B * A with A:[r x d_in], B:[d_out x r]. A starts Gaussian
// with stddev 1/sqrt(d_in), B starts at zero so a fresh adapter is exactly
// transparent.
struct LoraExpert {
  Tensor a_matrix;  // [r x d_in]
  Tensor b_matrix;  // [d_out x r]
  std::size_t rank = 0;
  double alpha = 1.0;
  std::string domain_tag;
  bool frozen = false;

  std::size_t d_in() const { return a_matrix.shape()[1]; }
  std::size_t d_out() const { return b_matrix.shape()[0]; }
  double scaling() const { return alpha / static_cast<double>(rank); }

  void set_trainable(bool on) {
    frozen = !on;
    a_matrix.set_requires_grad(on);
    b_matrix.set_requires_grad(on);
  }
};

inline LoraExpert lora_init(std::size_t d_in, std::size_t d_out,
                            std::size_t rank, double alpha,
                            std::uint64_t seed,
                            const std::string& domain_tag = "") {
  if (rank < 1 || rank > std::min(d_in, d_out))
    throw ConfigError("lora_init: rank " + std::to_string(rank) +
                      " must be in [1, min(" + std::to_string(d_in) + "," +
                      std::to_string(d_out) + ")]");
  if (alpha <= 0.0) throw ConfigError("lora_init: alpha must be positive");
  Rng rng(seed, "lora:" + domain_tag);
  LoraExpert e;
  e.a_matrix =
      Tensor::gaussian({rank, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)),
                       rng);
  e.b_matrix = Tensor::zeros({d_out, rank});
  e.rank = rank;
  e.alpha = alpha;
  e.domain_tag = domain_tag;
  return e;
}

// A frozen linear layer plus one adapter.
struct LoraLinear {
  Tensor base_weight;  // [d_out x d_in], frozen
  Tensor base_bias;    // [d_out], frozen
  LoraExpert expert;
};

// Low-rank contribution alone: (alpha/r) * B A x.
inline Tensor lora_delta(const LoraExpert& e, const Tensor& x) {
  return scale(linear(linear(x, e.a_matrix), e.b_matrix), e.scaling());
}

// W0 x + (alpha/r) B A x + b.
inline Tensor lora_forward(const LoraLinear& layer, const Tensor& x) {
  Tensor base = linear(x, layer.base_weight, layer.base_bias);
  return add(base, lora_delta(layer.expert, x));
}

// ---------------------------------------------------------------------------
// Expert checkpoints
// ---------------------------------------------------------------------------

// A domain expert spans every adapter site of the corrector, one pair per
// site, all sharing (d_in, d_out, rank, alpha). Files carry the text metadata
// header followed by each site's A then B array, row-major little-endian.
struct LoraExpertSet {
  std::string domain_tag;
  std::size_t d_in = 0, d_out = 0, rank = 0;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<std::string> site_names;
  std::vector<LoraExpert> experts;  // parallel to site_names

  void set_trainable(bool on) {
    for (auto& e : experts) e.set_trainable(on);
  }

  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : experts) {
      h = fnv1a64(e.a_matrix.values(), h);
      h = fnv1a64(e.b_matrix.values(), h);
    }
    return h;
  }
};

inline LoraExpertSet make_expert_set(const std::vector<std::string>& sites,
                                     std::size_t d_in, std::size_t d_out,
                                     std::size_t rank, double alpha,
                                     std::uint64_t seed,
                                     const std::string& domain_tag) {
  LoraExpertSet set;
  set.domain_tag = domain_tag;
  set.d_in = d_in;
  set.d_out = d_out;
  set.rank = rank;
  set.alpha = alpha;
  set.seed = seed;
  set.site_names = sites;
  for (std::size_t i = 0; i < sites.size(); ++i)
    set.experts.push_back(lora_init(d_in, d_out, rank, alpha,
                                    seed + 1000003 * (i + 1),
                                    domain_tag + ":" + sites[i]));
  return set;
}

inline void save_expert_set(const LoraExpertSet& set,
                            const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  TextHeader h;
  h.set("domain_tag", set.domain_tag);
  h.set("d_in", set.d_in);
  h.set("d_out", set.d_out);
  h.set("rank", set.rank);
  h.set("alpha", std::to_string(set.alpha));
  h.set("seed", std::to_string(set.seed));
  h.set("config_digest", set.config_digest);
  h.set("sites", join(set.site_names, ","));
  h.write(os, "GERLAB-EXPERT 1");
  for (const auto& e : set.experts) {
    write_le_doubles(os, e.a_matrix.values());
    write_le_doubles(os, e.b_matrix.values());
  }
  if (!os) throw IoError("save_expert_set: write failed: " + path.string());
}

inline LoraExpertSet load_expert_set(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  TextHeader h = TextHeader::read(is, "GERLAB-EXPERT 1");
  LoraExpertSet set;
  set.domain_tag = h.get("domain_tag");
  set.d_in = h.get_size("d_in");
  set.d_out = h.get_size("d_out");
  set.rank = h.get_size("rank");
  set.alpha = h.get_double("alpha");
  set.seed = static_cast<std::uint64_t>(std::stoull(h.get("seed")));
  set.config_digest = h.get("config_digest");
  set.site_names = split(h.get("sites"), ',');
  for (const auto& name : set.site_names) {
    LoraExpert e;
    e.a_matrix = Tensor({set.rank, set.d_in},
                        read_le_doubles(is, set.rank * set.d_in));
    e.b_matrix = Tensor({set.d_out, set.rank},
                        read_le_doubles(is, set.d_out * set.rank));
    e.rank = set.rank;
    e.alpha = set.alpha;
    e.domain_tag = set.domain_tag;
    e.frozen = true;
    set.experts.push_back(std::move(e));
  }
  return set;
}

}  // namespace gerlab
