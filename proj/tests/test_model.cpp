#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "versemi/model.hpp"

using namespace versemi;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.base_width = 4;
  c.depth = 3;
  c.prompt_dim = 3;
  c.head_hidden = 4;
  c.seed = 5;
  return c;
}

std::vector<std::string> tiny_tasks() { return {"a", "b"}; }

Volume random_volume(Shape3 s, std::uint64_t seed) {
  Rng rng(seed);
  return oracles::random_volume(s, rng);
}

}  // namespace

TEST_CASE("init_model: determinism and parameter-count monotonicity") {
  const auto st1 = init_model<float>(tiny_config(), tiny_tasks());
  const auto st2 = init_model<float>(tiny_config(), tiny_tasks());
  CHECK(param_checksum(st1) == param_checksum(st2));
  CHECK(st1.params.size() > 0);

  auto wider = tiny_config();
  wider.base_width = 8;
  const auto st3 = init_model<float>(wider, tiny_tasks());
  CHECK(st3.params.size() > st1.params.size());
}

TEST_CASE("head parameter count follows the two-layer formula") {
  SegNet<float> net(tiny_config());
  const auto hs = net.head_spec();
  CHECK(hs.param_count() == 4 * 4 + 4 + 4 * 2 + 2);  // c_d=4, hidden=4

  auto single = tiny_config();
  single.head_hidden = 0;
  SegNet<float> net0(single);
  CHECK(net0.head_spec().param_count() == 4 * 2 + 2);

  ModelConfig desk;  // defaults: width 8, hidden 8
  SegNet<float> netd(desk);
  CHECK(netd.head_spec().param_count() == 8 * 8 + 8 + 8 * 2 + 2);
}

TEST_CASE("forward: shape contract, probability invariant, determinism") {
  const auto st = init_model<float>(tiny_config(), tiny_tasks());
  const auto v = random_volume({16, 16, 16}, 9);
  const auto prompt = encode_prompt(st.registry(), 1);

  const auto before = param_checksum(st);
  const auto p1 = forward(st, v, prompt);
  const auto p2 = forward(st, v, prompt);
  CHECK(param_checksum(st) == before);  // forward alone never updates parameters

  CHECK(p1.c == 2);
  CHECK(p1.d == 16);
  CHECK(p1.h == 16);
  CHECK(p1.w == 16);
  CHECK((p1.v == p2.v).all());

  const auto n = p1.spatial();
  for (std::int64_t i = 0; i < n; ++i) {
    const float sum = p1.v[i] + p1.v[n + i];
    CHECK(std::abs(sum - 1.0f) < 1e-5f);
    CHECK(p1.v[i] >= 0.0f);
    CHECK(p1.v[i] <= 1.0f);
  }

  SUBCASE("indivisible input dims are rejected") {
    const auto bad = random_volume({12, 16, 16}, 10);  // 12 % 4 == 0 but 12 % stride(4) == 0 -> use 14
    const auto worse = random_volume({14, 16, 16}, 10);
    (void)bad;
    CHECK_THROWS_AS(forward(st, worse, prompt), Error);
  }

  SUBCASE("constant-zero input stays finite") {
    Volume zeros({16, 16, 16});
    const auto p = forward(st, zeros, prompt);
    CHECK(p.v.isFinite().all());
    const auto fb = extract_features(st, zeros);
    CHECK(fb.pooled.isFinite().all());
    CHECK(fb.decoder.v.isFinite().all());
  }
}

TEST_CASE("extract_features: pooled embedding equals the spatial mean of the bottleneck") {
  const auto st = init_model<float>(tiny_config(), tiny_tasks());
  const auto v = random_volume({16, 16, 16}, 21);
  const auto fb = extract_features(st, v);

  CHECK(fb.decoder.d == 16);
  CHECK(fb.decoder.c == 4);          // C_d = base_width
  CHECK(fb.bottleneck.c == 16);      // C_e = base_width * 4 at depth 3
  REQUIRE(fb.pooled.size() == 16);

  for (int ch = 0; ch < fb.bottleneck.c; ++ch) {
    double acc = 0.0;
    for (int z = 0; z < fb.bottleneck.d; ++z)
      for (int y = 0; y < fb.bottleneck.h; ++y)
        for (int x = 0; x < fb.bottleneck.w; ++x) acc += fb.bottleneck.at(ch, z, y, x);
    acc /= fb.bottleneck.spatial();
    CHECK(std::abs(acc - fb.pooled[ch]) < 1e-5);
  }

  SUBCASE("identical volumes produce identical bundles") {
    const auto fb2 = extract_features(st, v);
    CHECK((fb2.pooled == fb.pooled).all());
    CHECK((fb2.decoder.v == fb.decoder.v).all());
  }
}

TEST_CASE("generate_kernels: prompt slices of the generator map") {
  const auto st = init_model<float>(tiny_config(), tiny_tasks());
  SegNet<float> net(st.cfg);
  const int ce = net.bottleneck_channels();

  nn::ArrX<float> pooled = nn::ArrX<float>::Zero(ce);
  const auto w1 = generate_kernels(st, pooled, encode_prompt(st.registry(), 1));
  const auto w2 = generate_kernels(st, pooled, encode_prompt(st.registry(), 2));
  const auto w3 = generate_kernels(st, pooled, encode_prompt(st.registry(), 3));
  CHECK(w1.size() == net.head_spec().param_count());
  CHECK((w1 != w2).any());
  CHECK((w2 != w3).any());

  // zero pooled embedding: w_k = psi row (C_e + k - 1) plus bias, closed form
  const auto din = net.psi_spec().din;
  for (int k = 1; k <= 3; ++k) {
    const auto wk = generate_kernels(st, pooled, encode_prompt(st.registry(), k));
    for (int j = 0; j < net.psi_spec().dout; ++j) {
      const float expect =
          st.params[net.psi_weight_offset() + static_cast<std::int64_t>(j) * din + ce + k - 1] +
          st.params[net.psi_bias_offset() + j];
      CHECK(wk[j] == doctest::Approx(expect).epsilon(1e-6));
    }
  }

  // random pooled embedding still yields prompt-distinct kernels
  Rng rng(77);
  for (int i = 0; i < ce; ++i) pooled[i] = static_cast<float>(rng.normal());
  CHECK((generate_kernels(st, pooled, encode_prompt(st.registry(), 1)) !=
         generate_kernels(st, pooled, encode_prompt(st.registry(), 2)))
            .any());
}

TEST_CASE("translation equivariance under circular padding") {
  auto cfg = tiny_config();
  cfg.pad_mode = nn::PadMode::circular;
  const auto st = init_model<float>(cfg, tiny_tasks());
  const int stride = cfg.stride_total();  // 4 at depth 3
  const auto v = random_volume({16, 16, 16}, 33);
  const auto prompt = encode_prompt(st.registry(), 2);

  const auto base = forward(st, v, prompt);
  for (int axis = 0; axis < 3; ++axis) {
    Volume shifted(v.shape, v.spacing);
    for (int z = 0; z < 16; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          int src[3] = {z, y, x};
          src[axis] = (src[axis] - stride + 16) % 16;
          shifted.at(z, y, x) = v.at(src[0], src[1], src[2]);
        }
    const auto moved = forward(st, shifted, prompt);
    double max_diff = 0.0;
    const std::int64_t n = base.spatial();
    for (int z = 0; z < 16; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          int dst[3] = {z, y, x};
          dst[axis] = (dst[axis] + stride) % 16;
          const auto a = base.v[n + (static_cast<std::int64_t>(z) * 16 + y) * 16 + x];
          const auto b =
              moved.v[n + (static_cast<std::int64_t>(dst[0]) * 16 + dst[1]) * 16 + dst[2]];
          max_diff = std::max(max_diff, static_cast<double>(std::abs(a - b)));
        }
    CHECK(max_diff < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "versemi_ckpt_test.bin").string();
  auto st = init_model<float>(tiny_config(), tiny_tasks());
  Rng rng(55);
  for (std::int64_t i = 0; i < st.adam_m.size(); ++i) {
    st.adam_m[i] = static_cast<float>(rng.normal());
    st.adam_v[i] = static_cast<float>(std::abs(rng.normal()));
  }
  st.step = 42;
  save_checkpoint(path, st, 0.625);

  double best = 0.0;
  const auto loaded = load_checkpoint<float>(path, &best);
  CHECK(best == 0.625);
  CHECK(loaded.step == 42);
  CHECK(loaded.task_names == st.task_names);
  CHECK(loaded.fingerprint() == st.fingerprint());
  CHECK((loaded.params == st.params).all());
  CHECK((loaded.adam_m == st.adam_m).all());
  CHECK((loaded.adam_v == st.adam_v).all());

  const auto v = random_volume({16, 16, 16}, 60);
  const auto prompt = encode_prompt(st.registry(), 1);
  CHECK((forward(loaded, v, prompt).v == forward(st, v, prompt).v).all());
  fs::remove(path);
}
