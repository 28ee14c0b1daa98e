// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gerlab/gradcheck.hpp"
#include "gerlab/lora.hpp"

using namespace gerlab;

TEST_CASE("lora_init starts B at zero and is deterministic") {
  LoraExpert e = lora_init(8, 6, 3, 2.0, 99, "au");
  REQUIRE(e.a_matrix.shape() == Shape{3, 8});
  REQUIRE(e.b_matrix.shape() == Shape{6, 3});
  for (double v : e.b_matrix.values()) CHECK(v == 0.0);

  LoraExpert e2 = lora_init(8, 6, 3, 2.0, 99, "au");
  CHECK(e.a_matrix.value_hash() == e2.a_matrix.value_hash());
  LoraExpert e3 = lora_init(8, 6, 3, 2.0, 100, "au");
  CHECK(e.a_matrix.value_hash() != e3.a_matrix.value_hash());
}

TEST_CASE("lora_init accepts the published expert config") {
  LoraExpert e = lora_init(64, 64, 32, 8.0, 1);
  CHECK(e.rank == 32);
  CHECK(e.scaling() == 0.25);
}

TEST_CASE("lora_init rejects rank past min(d_in, d_out)") {
  CHECK_THROWS_AS(lora_init(8, 6, 7, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(lora_init(8, 6, 0, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(lora_init(8, 6, 3, -1.0, 1), ConfigError);
}

TEST_CASE("fresh adapter is bitwise transparent") {
  Rng rng(5);
  LoraLinear layer;
  layer.base_weight = Tensor::gaussian({6, 8}, 0.3, rng);
  layer.base_bias = Tensor::gaussian({6}, 0.1, rng);
  layer.expert = lora_init(8, 6, 3, 3.0, 42);

  Tensor x = Tensor::gaussian({4, 8}, 1.0, rng);
  Tensor with = lora_forward(layer, x);
  Tensor base = linear(x, layer.base_weight, layer.base_bias);
  REQUIRE(with.shape() == base.shape());
  for (std::size_t i = 0; i < with.numel(); ++i)
    CHECK(with.at(i) == base.at(i));
}

TEST_CASE("alpha equal to rank gives unit scaling") {
  LoraExpert e = lora_init(8, 6, 4, 4.0, 7);
  CHECK(e.scaling() == 1.0);
}

TEST_CASE("low rank path equals merged dense path") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t din = 5 + rng.uniform_int(8);
    const std::size_t dout = 5 + rng.uniform_int(8);
    const std::size_t r = 1 + rng.uniform_int(4);
    LoraLinear layer;
    layer.base_weight = Tensor::gaussian({dout, din}, 0.3, rng);
    layer.base_bias = Tensor::gaussian({dout}, 0.1, rng);
    layer.expert = lora_init(din, dout, r, 2.5, 100 + trial);
    // Give B nonzero content so the low-rank path is live.
    for (auto& v : layer.expert.b_matrix.values()) v = rng.normal(0.0, 0.3);

    Tensor x = Tensor::gaussian({3, din}, 1.0, rng);
    Tensor low = lora_forward(layer, x);
    Tensor dense = add(layer.base_weight,
                       scale(matmul(layer.expert.b_matrix,
                                    layer.expert.a_matrix),
                             layer.expert.scaling()));
    Tensor ref = linear(x, dense, layer.base_bias);
    for (std::size_t i = 0; i < low.numel(); ++i)
      CHECK_THAT(low.at(i), Catch::Matchers::WithinRel(ref.at(i), 1e-10));
  }
}

TEST_CASE("lora_forward rejects mismatched input width") {
  LoraLinear layer;
  Rng rng(1);
  layer.base_weight = Tensor::gaussian({6, 8}, 0.3, rng);
  layer.base_bias = Tensor::zeros({6});
  layer.expert = lora_init(8, 6, 2, 2.0, 3);
  Tensor bad = Tensor::zeros({4, 7});
  CHECK_THROWS_AS(lora_forward(layer, bad), DimensionError);
}

TEST_CASE("gradients through a LoraLinear match finite differences") {
  Rng rng(23);
  LoraLinear layer;
  layer.base_weight = Tensor::gaussian({6, 8}, 0.3, rng);
  layer.base_bias = Tensor::gaussian({6}, 0.1, rng);
  layer.expert = lora_init(8, 6, 3, 3.0, 11);
  for (auto& v : layer.expert.b_matrix.values()) v = rng.normal(0.0, 0.2);
  layer.expert.set_trainable(true);

  Tensor x = Tensor::gaussian({4, 8}, 1.0, rng);
  Tensor w = Tensor::gaussian({4, 6}, 1.0, rng);
  auto f = [&]() { return sum(mul(lora_forward(layer, x), w)); };
  const double err = finite_difference_check_params(
      f, {layer.expert.a_matrix, layer.expert.b_matrix}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("expert set round trips byte exact") {
  const auto path =
      std::filesystem::temp_directory_path() / "gerlab_expert_test.bin";
  LoraExpertSet set =
      make_expert_set({"block0.mix", "block0.ffn"}, 8, 8, 3, 2.0, 77, "jp");
  set.config_digest = "deadbeefdeadbeef";
  Rng rng(4);
  for (auto& e : set.experts)
    for (auto& v : e.b_matrix.values()) v = rng.normal(0.0, 0.1);

  save_expert_set(set, path);
  const std::string bytes1 = read_file(path);
  LoraExpertSet loaded = load_expert_set(path);
  CHECK(loaded.domain_tag == "jp");
  CHECK(loaded.rank == 3);
  CHECK(loaded.alpha == 2.0);
  CHECK(loaded.site_names == set.site_names);
  CHECK(loaded.content_hash() == set.content_hash());
  for (const auto& e : loaded.experts) CHECK(e.frozen);

  save_expert_set(loaded, path);
  const std::string bytes2 = read_file(path);
  CHECK(bytes1 == bytes2);
  std::filesystem::remove(path);
}
