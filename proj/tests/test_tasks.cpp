#include "doctest.h"
#include "versemi/tasks.hpp"

using namespace versemi;

TEST_CASE("register_tasks: four named tasks reserve a fifth synthetic slot") {
  const auto r = register_tasks({"pancreas", "atrium", "spleen", "lung"});
  CHECK(r.pertinent_count() == 4);
  CHECK(r.prompt_dim() == 5);
  CHECK(r.synthetic_index() == 5);
  CHECK(r.name_of(2) == "atrium");
  CHECK(r.index_of("lung") == 4);
  CHECK(r.index_of("nope") == 0);
}

TEST_CASE("register_tasks: minimal registry and rejections") {
  const auto r = register_tasks({"a", "b"});
  CHECK(r.prompt_dim() == 3);
  CHECK(r.synthetic_index() == 3);

  CHECK_THROWS_AS(register_tasks({"a", "a"}), Error);
  CHECK_THROWS_AS(register_tasks({"solo"}), Error);
  CHECK_THROWS_AS(register_tasks({"a", ""}), Error);
}

TEST_CASE("encode_prompt: one-hot slots including the synthetic task") {
  const auto r = register_tasks({"t1", "t2", "t3", "t4"});
  const auto p1 = encode_prompt(r, 1);
  const auto p5 = encode_prompt(r, 5);
  const Eigen::ArrayXd v1 = p1.values();
  const Eigen::ArrayXd v5 = p5.values();
  REQUIRE(v1.size() == 5);
  CHECK(v1[0] == 1.0);
  CHECK(v1.sum() == 1.0);
  CHECK(v5[4] == 1.0);
  CHECK(v5.sum() == 1.0);
  CHECK_THROWS_AS(encode_prompt(r, 6), Error);
  CHECK_THROWS_AS(encode_prompt(r, 0), Error);
}

TEST_CASE("prompt properties: orthonormal one-hots, decode round trip") {
  const auto r = register_tasks({"t1", "t2", "t3", "t4"});
  for (int i = 1; i <= r.prompt_dim(); ++i) {
    const auto pi = encode_prompt(r, i);
    CHECK(decode_prompt(pi) == i);
    const Eigen::ArrayXd vi = pi.values();
    CHECK((vi * vi).sum() == 1.0);
    for (int j = 1; j <= r.prompt_dim(); ++j) {
      if (i == j) continue;
      const Eigen::ArrayXd vj = encode_prompt(r, j).values();
      CHECK((vi * vj).sum() == 0.0);
    }
  }
}
