// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "gerlab/gradcheck.hpp"
#include "gerlab/routing.hpp"

using namespace gerlab;

namespace {

// Direct arithmetic of the threshold-adaptation formula, written
// independently of the library path.
std::vector<double> oracle_threshold(const std::vector<double>& p,
                                     double tau) {
  std::vector<double> out(p.size(), 0.0);
  double denom = 0.0;
  for (double v : p)
    if (v >= tau) denom += v;
  if (denom == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = i;
    out[best] = tau;
    return out;
  }
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] >= tau) out[i] = p[i] / denom * tau;
  return out;
}

// Direct arithmetic of the Top-K mixture weights.
std::vector<double> oracle_topk(const std::vector<double>& p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  });
  std::vector<double> w(p.size(), 0.0);
  double denom = 0.0;
  for (std::size_t i = 0; i < k; ++i) denom += p[idx[i]];
  for (std::size_t i = 0; i < k; ++i) w[idx[i]] = p[idx[i]] / denom;
  return w;
}

std::vector<double> random_softmax_row(Rng& rng, std::size_t n, double mag) {
  std::vector<double> logits(n);
  for (auto& v : logits) v = (rng.uniform() * 2 - 1) * mag;
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : logits) v /= z;
  return logits;
}

HdmoleLayer small_layer(Rng& rng, std::size_t n_experts, std::size_t d = 6,
                        RoutingPolicy policy = {}) {
  Tensor w0 = Tensor::gaussian({d, d}, 0.3, rng);
  Tensor b0 = Tensor::gaussian({d}, 0.1, rng);
  std::vector<LoraExpert> experts;
  for (std::size_t j = 0; j < n_experts; ++j) {
    LoraExpert e = lora_init(d, d, 2, 2.0, 50 + j, "d" + std::to_string(j));
    for (auto& v : e.b_matrix.values()) v = rng.normal(0.0, 0.3);
    e.frozen = true;
    experts.push_back(e);
  }
  HdmoleLayer layer =
      make_hdmole_layer("block0.ffn", w0, b0, std::move(experts), policy);
  for (auto& v : layer.router_weight.values()) v = rng.normal(0.0, 0.5);
  return layer;
}

}  // namespace

TEST_CASE("local_route uniform for zero router, rows sum to one") {
  Rng rng(3);
  HdmoleLayer layer = small_layer(rng, 4);
  for (auto& v : layer.router_weight.values()) v = 0.0;
  Tensor h = Tensor::gaussian({5, 6}, 1.0, rng);
  Tensor pl = local_route(layer, h, LocalLevel::kFrame);
  REQUIRE(pl.shape() == Shape{5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK_THAT(pl.at(i, j), Catch::Matchers::WithinAbs(0.25, 1e-12));

  // Random router: rows are probability rows.
  for (auto& v : layer.router_weight.values()) v = rng.normal(0.0, 1.0);
  Tensor pl2 = local_route(layer, h, LocalLevel::kFrame);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += pl2.at(i, j);
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("utterance-level routing with one frame equals frame level") {
  Rng rng(9);
  HdmoleLayer layer = small_layer(rng, 3);
  Tensor h = Tensor::gaussian({1, 6}, 1.0, rng);
  Tensor frame = local_route(layer, h, LocalLevel::kFrame);
  Tensor utt = local_route(layer, h, LocalLevel::kUtterance);
  REQUIRE(frame.shape() == utt.shape());
  for (std::size_t i = 0; i < frame.numel(); ++i)
    CHECK_THAT(frame.at(i), Catch::Matchers::WithinAbs(utt.at(i), 1e-15));
}

TEST_CASE("global_route limits") {
  Tensor confident({3}, {50.0, 0.0, -10.0});
  Tensor pg = global_route(confident);
  CHECK_THAT(pg.at(0), Catch::Matchers::WithinAbs(1.0, 1e-12));
  Tensor flat = Tensor::zeros({4});
  Tensor pu = global_route(flat);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK_THAT(pu.at(i), Catch::Matchers::WithinAbs(0.25, 1e-15));
}

TEST_CASE("topk weights: frozen example and degenerate selections") {
  Tensor p({3}, {0.5, 0.3, 0.2});
  auto w = topk_weights(p, 2);
  CHECK_THAT(w[0], Catch::Matchers::WithinAbs(0.625, 1e-12));
  CHECK_THAT(w[1], Catch::Matchers::WithinAbs(0.375, 1e-12));
  CHECK(w[2] == 0.0);

  // K = N with uniform weights: plain average.
  Rng rng(4);
  std::vector<Tensor> outs;
  for (int j = 0; j < 3; ++j)
    outs.push_back(Tensor::gaussian({2, 2}, 1.0, rng));
  Tensor uni({3}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  Tensor avg = topk_combine(uni, 3, outs);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK_THAT(avg.at(i),
               Catch::Matchers::WithinAbs(
                   (outs[0].at(i) + outs[1].at(i) + outs[2].at(i)) / 3.0,
                   1e-12));

  // K = 1: output of the argmax expert alone.
  Tensor one = topk_combine(p, 1, outs);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(one.at(i) == outs[0].at(i));

  CHECK_THROWS_AS(topk_combine(p, 0, outs), ConfigError);
  CHECK_THROWS_AS(topk_combine(p, 4, outs), ConfigError);
}

TEST_CASE("topk ties break toward the lowest expert index") {
  Tensor p({4}, {0.4, 0.1, 0.4, 0.1});
  auto w = topk_weights(p, 1);
  CHECK(w[0] == 1.0);
  CHECK(w[2] == 0.0);
}

TEST_CASE("topk renormalized weights sum to one for random rows") {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(7);
    const std::size_t k = 1 + rng.uniform_int(n);
    auto row = random_softmax_row(rng, n, 5.0);
    auto w = topk_weights(Tensor({n}, row), k);
    double s = 0.0;
    std::size_t nz = 0;
    for (double v : w) {
      s += v;
      if (v > 0.0) ++nz;
    }
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK(nz == k);
  }
}

TEST_CASE("topk_combine matches direct arithmetic on 100 random instances") {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(5);
    const std::size_t k = 1 + rng.uniform_int(n);
    auto row = random_softmax_row(rng, n, 3.0);
    std::vector<Tensor> outs;
    for (std::size_t j = 0; j < n; ++j)
      outs.push_back(Tensor::gaussian({3, 2}, 1.0, rng));
    Tensor got = topk_combine(Tensor({n}, row), k, outs);
    auto w = oracle_topk(row, k);
    for (std::size_t i = 0; i < got.numel(); ++i) {
      double want = 0.0;
      for (std::size_t j = 0; j < n; ++j) want += w[j] * outs[j].at(i);
      CHECK_THAT(got.at(i), Catch::Matchers::WithinAbs(want, 1e-12));
    }
  }
}

TEST_CASE("threshold_adapt frozen examples") {
  // mask = [1,0,0]; 0.6/0.6 * (1/3).
  Tensor p({3}, {0.6, 0.3, 0.1});
  Tensor tau = Tensor::scalar(1.0 / 3.0);
  Tensor out = threshold_adapt(p, tau);
  CHECK_THAT(out.at(0), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  CHECK(out.at(1) == 0.0);
  CHECK(out.at(2) == 0.0);

  // Uniform row at tau = 1/N: everything passes, each entry tau/N.
  const std::size_t n = 5;
  Tensor u({n}, std::vector<double>(n, 1.0 / n));
  Tensor tu = threshold_adapt(u, Tensor::scalar(1.0 / n));
  for (std::size_t i = 0; i < n; ++i)
    CHECK_THAT(tu.at(i), Catch::Matchers::WithinAbs(1.0 / (n * n), 1e-15));

  // Empty mask: one-hot argmax scaled by tau, lowest index on ties.
  Tensor e({3}, {0.5, 0.5, 0.0});
  Tensor te = threshold_adapt(e, Tensor::scalar(0.7));
  CHECK_THAT(te.at(0), Catch::Matchers::WithinAbs(0.7, 1e-15));
  CHECK(te.at(1) == 0.0);
  CHECK(te.at(2) == 0.0);
}

TEST_CASE("threshold_adapt rejects bad inputs") {
  Tensor notprob({3}, {0.5, 0.2, 0.1});
  CHECK_THROWS_AS(threshold_adapt(notprob, Tensor::scalar(0.5)),
                  ContractError);
  Tensor p({2}, {0.5, 0.5});
  CHECK_THROWS_AS(threshold_adapt(p, Tensor::scalar(0.0)), ContractError);
  CHECK_THROWS_AS(threshold_adapt(p, Tensor::scalar(1.5)), ContractError);
}

TEST_CASE("threshold_adapt matches direct arithmetic on 100 random instances") {
  Rng rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(7);
    auto row = random_softmax_row(rng, n, 4.0);
    const double tau = 0.05 + rng.uniform() * 0.9;
    Tensor out = threshold_adapt(Tensor({n}, row), Tensor::scalar(tau));
    auto want = oracle_threshold(row, tau);
    for (std::size_t i = 0; i < n; ++i)
      CHECK_THAT(out.at(i), Catch::Matchers::WithinAbs(want[i], 1e-12));
  }
}

TEST_CASE("threshold init 1/N guarantees a non-empty mask on 10^4 rows") {
  Rng rng(77);
  std::size_t failures = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(9);
    auto row = random_softmax_row(rng, n, trial % 2 == 0 ? 3.0 : 30.0);
    const double tau = 1.0 / static_cast<double>(n);
    // max(p) >= 1/N for any probability row, so the mask cannot be empty.
    double mx = *std::max_element(row.begin(), row.end());
    if (mx < tau) ++failures;
    Tensor out = threshold_adapt(Tensor({n}, row), Tensor::scalar(tau));
    bool any = false;
    for (std::size_t i = 0; i < n; ++i)
      if (out.at(i) > 0.0) any = true;
    if (!any) ++failures;
  }
  CHECK(failures == 0);
}

TEST_CASE("adapted weight support rule") {
  // P_a^j = 0 iff P_g^j < tau_g and P_l^j < tau_l.
  Rng rng(91);
  HdmoleLayer layer = small_layer(rng, 5);
  layer.tau_global = Tensor::scalar(0.3).set_requires_grad();
  layer.tau_local = Tensor::scalar(0.25).set_requires_grad();
  Tensor h = Tensor::gaussian({4, 6}, 1.0, rng);
  Tensor pg({5}, random_softmax_row(rng, 5, 2.0));

  RoutingWeights diag;
  hdmole_forward(layer, h, pg, &diag);
  Tensor pl = diag.local;
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t j = 0; j < 5; ++j) {
      const bool below_both =
          pg.at(j) < 0.3 && pl.at(t, j) < 0.25;
      const bool zero = diag.adapted.at(t, j) == 0.0;
      CHECK(zero == below_both);
    }
  }
  // Every frame keeps at least one selected expert.
  for (std::size_t t = 0; t < 4; ++t) {
    double mx = 0.0;
    for (std::size_t j = 0; j < 5; ++j)
      mx = std::max(mx, diag.adapted.at(t, j));
    CHECK(mx > 0.0);
  }
}

TEST_CASE("one-hot routing equals the single-expert forward") {
  Rng rng(101);
  RoutingPolicy policy;
  policy.use_global = false;  // local only
  HdmoleLayer layer = small_layer(rng, 4, 6, policy);
  layer.tau_local = Tensor::scalar(1.0).set_requires_grad();
  // Saturated router logits make softmax an exact one-hot on expert 2.
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t k = 0; k < 6; ++k)
      layer.router_weight.at(j, k) = (j == 2 ? 4000.0 : -4000.0);

  Tensor h({3, 6}, {0.5, -1, 2, 0.1, 1, -0.4, 1, 1, 0, 0, -1, 2,
                    -0.3, 0.2, 0.9, -1.5, 0.7, 0.1});
  for (auto& v : h.values()) v = std::abs(v) + 0.1;  // keep h'w positive
  Tensor out = hdmole_forward(layer, h, Tensor());

  LoraLinear single;
  single.base_weight = layer.base_weight;
  single.base_bias = layer.base_bias;
  single.expert = layer.experts[2];
  Tensor want = lora_forward(single, h);
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK_THAT(out.at(i), Catch::Matchers::WithinRel(want.at(i), 1e-10));
}

TEST_CASE("all experts zero B: routing cannot change the base output") {
  Rng rng(111);
  Tensor w0 = Tensor::gaussian({6, 6}, 0.3, rng);
  Tensor b0 = Tensor::gaussian({6}, 0.1, rng);
  std::vector<LoraExpert> experts;
  for (int j = 0; j < 3; ++j)
    experts.push_back(lora_init(6, 6, 2, 2.0, 400 + j));
  HdmoleLayer layer = make_hdmole_layer("s", w0, b0, std::move(experts));
  for (auto& v : layer.router_weight.values()) v = rng.normal(0.0, 1.0);
  Tensor h = Tensor::gaussian({4, 6}, 1.0, rng);
  Tensor pg({3}, random_softmax_row(rng, 3, 2.0));
  Tensor out = hdmole_forward(layer, h, pg);
  Tensor base = linear(h, w0, b0);
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK(out.at(i) == base.at(i));
}

TEST_CASE("single expert layer: adapted weight is tau_g + tau_l") {
  Rng rng(121);
  HdmoleLayer layer = small_layer(rng, 1);
  // N = 1: thresholds initialize at 1/1 = 1.
  CHECK(layer.tau_global.item() == 1.0);
  CHECK(layer.tau_local.item() == 1.0);
  layer.tau_global = Tensor::scalar(0.8).set_requires_grad();
  layer.tau_local = Tensor::scalar(0.6).set_requires_grad();
  Tensor h = Tensor::gaussian({3, 6}, 1.0, rng);
  Tensor pg({1}, {1.0});
  RoutingWeights diag;
  Tensor out = hdmole_forward(layer, h, pg, &diag);
  for (std::size_t t = 0; t < 3; ++t)
    CHECK_THAT(diag.adapted.at(t, 0),
               Catch::Matchers::WithinAbs(1.4, 1e-12));

  // Hand evaluation: base + (tau_g + tau_l) * (alpha/r) * B A h.
  const LoraExpert& e = layer.experts[0];
  Tensor base = linear(h, layer.base_weight, layer.base_bias);
  Tensor delta = linear(linear(h, e.a_matrix), e.b_matrix);
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK_THAT(out.at(i),
               Catch::Matchers::WithinAbs(
                   base.at(i) + 1.4 * e.scaling() * delta.at(i), 1e-10));
}

TEST_CASE("hdmole rejects mismatched experts") {
  Rng rng(131);
  Tensor w0 = Tensor::gaussian({6, 6}, 0.3, rng);
  Tensor b0 = Tensor::zeros({6});
  std::vector<LoraExpert> experts;
  experts.push_back(lora_init(6, 6, 2, 2.0, 1));
  experts.push_back(lora_init(6, 6, 3, 2.0, 2));  // different rank
  CHECK_THROWS_AS(make_hdmole_layer("s", w0, b0, std::move(experts)),
                  ConfigError);
}

TEST_CASE("gradients reach thresholds and router away from mask boundaries") {
  Rng rng(141);
  HdmoleLayer layer = small_layer(rng, 4);
  layer.tau_global = Tensor::scalar(0.21).set_requires_grad();
  layer.tau_local = Tensor::scalar(0.19).set_requires_grad();
  Tensor h = Tensor::gaussian({3, 6}, 1.0, rng);
  Tensor pg({4}, random_softmax_row(rng, 4, 2.0));
  Tensor wsum = Tensor::gaussian({3, 6}, 1.0, rng);

  auto f = [&]() { return sum(mul(hdmole_forward(layer, h, pg), wsum)); };
  const double err = finite_difference_check_params(
      f, {layer.tau_global, layer.tau_local, layer.router_weight}, 1e-5);
  CHECK(err < 1e-4);

  {
    GradTape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  CHECK(std::abs(layer.tau_global.grad()[0]) > 0.0);
  CHECK(std::abs(layer.tau_local.grad()[0]) > 0.0);
}

TEST_CASE("static top-k policy trains the router too") {
  Rng rng(151);
  RoutingPolicy policy;
  policy.static_top_k = 2;
  HdmoleLayer layer = small_layer(rng, 4, 6, policy);
  Tensor h = Tensor::gaussian({3, 6}, 1.0, rng);
  Tensor pg({4}, random_softmax_row(rng, 4, 2.0));
  Tensor wsum = Tensor::gaussian({3, 6}, 1.0, rng);
  auto f = [&]() { return sum(mul(hdmole_forward(layer, h, pg), wsum)); };
  const double err =
      finite_difference_check_params(f, {layer.router_weight}, 1e-5);
  CHECK(err < 1e-4);

  RoutingWeights diag;
  hdmole_forward(layer, h, pg, &diag);
  std::size_t nz = 0;
  for (std::size_t j = 0; j < 4; ++j)
    if (diag.adapted.at(0, j) > 0.0) ++nz;
  CHECK(nz == 2);
}

TEST_CASE("routing records round trip and reject malformed lines") {
  RoutingRecord r;
  r.utterance_id = "utt-3";
  r.domain_tag = "d1";
  r.layer_index = 2;
  r.site = "block2.ffn";
  r.p_global = {0.7, 0.2, 0.1};
  r.p_local_mean = {0.5, 0.25, 0.25};
  r.p_adapted_mean = {0.4, 0.0, 0.1};
  r.mean_selected = 2.0;

  std::ostringstream os;
  append_routing_record(os, r);
  std::string line = os.str();
  REQUIRE(!line.empty());
  line.pop_back();  // strip newline
  RoutingRecord back = parse_routing_record(line);
  CHECK(back.utterance_id == r.utterance_id);
  CHECK(back.domain_tag == r.domain_tag);
  CHECK(back.layer_index == r.layer_index);
  CHECK(back.p_adapted_mean == r.p_adapted_mean);
  CHECK(back.mean_selected == 2.0);

  CHECK_THROWS_AS(parse_routing_record("{not json"), ReportError);
  CHECK_THROWS_AS(parse_routing_record("{\"utt\": 1}"), ReportError);
}
