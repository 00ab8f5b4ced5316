#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "versemi/corpus.hpp"
#include "versemi/io.hpp"

using namespace versemi;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("versemi_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

TaskRegistry small_registry() { return register_tasks({"lumpy", "sphere", "bean", "nodules"}); }

SynthParams small_params() {
  SynthParams p;
  p.n_per_task = 10;
  p.shape = {32, 32, 32};
  p.seed = 7;
  return p;
}

CorpusManifest build_small(const std::string& root) {
  return generate_synthetic_corpus(root, small_params(), small_registry());
}

std::uint64_t tree_checksum(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, root).string();
    h = fnv1a64(rel.data(), rel.size(), h);
    const auto fh = file_checksum(f.string());
    h = fnv1a64(&fh, sizeof(fh), h);
  }
  return h;
}

}  // namespace

TEST_CASE("volume/mask round trip is bit exact") {
  TempDir td("io");
  Rng rng(3);
  Volume v({9, 10, 11}, {1.0, 0.5, 2.0});
  for (std::int64_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<float>(rng.normal());
  save_volume(td.str() + "/vol", v, 2);
  const Volume u = load_volume(td.str() + "/vol");
  CHECK(u.shape == v.shape);
  CHECK(u.spacing == v.spacing);
  CHECK((u.data == v.data).all());

  BinaryMask m({9, 10, 11});
  m.at(1, 2, 3) = 1;
  save_mask(td.str() + "/msk", m);
  const BinaryMask m2 = load_mask(td.str() + "/msk");
  CHECK((m2.data == m.data).all());
}

TEST_CASE("load errors carry distinct codes") {
  TempDir td("ioerr");

  SUBCASE("missing file") {
    try {
      load_volume(td.str() + "/absent");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::missing_file);
    }
  }

  SUBCASE("mask with a value of 2") {
    BinaryMask m({8, 8, 8});
    detail::write_meta(td.str() + "/bad.meta", {"uint8", m.shape, m.spacing, -1});
    m.data[5] = 2;  // bypass save_mask's own validation
    detail::write_raw(td.str() + "/bad.raw", m);
    try {
      load_mask(td.str() + "/bad");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::non_binary_mask);
    }
  }

  SUBCASE("truncated raw file") {
    Volume v({8, 8, 8});
    save_volume(td.str() + "/trunc", v);
    fs::resize_file(td.str() + "/trunc.raw", 100);
    try {
      load_volume(td.str() + "/trunc");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::truncated_file);
    }
  }

  SUBCASE("header shape disagrees with payload size") {
    Volume v({8, 8, 8});
    save_volume(td.str() + "/hdr", v);
    detail::write_meta(td.str() + "/hdr.meta", {"float32", {8, 8, 9}, v.spacing, -1});
    try {
      load_volume(td.str() + "/hdr");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::truncated_file);
    }
  }

  SUBCASE("corrupt header") {
    Volume v({8, 8, 8});
    save_volume(td.str() + "/mag", v);
    std::ofstream f(td.str() + "/mag.meta", std::ios::trunc);
    f << "not a grid header\n";
    f.close();
    try {
      load_volume(td.str() + "/mag");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::header_mismatch);
    }
  }
}

TEST_CASE("synthetic corpus: determinism, fractions, contrast") {
  TempDir a("corpus_a"), b("corpus_b");
  const auto man_a = build_small(a.str());
  const auto man_b = build_small(b.str());
  save_manifest(a.str() + "/manifest.json", man_a);
  save_manifest(b.str() + "/manifest.json", man_b);

  CHECK(tree_checksum(a.path) == tree_checksum(b.path));
  CHECK(man_a.entries.size() == 40);
  validate_manifest(a.str(), man_a);

  int checked = 0;
  for (const auto& e : man_a.entries) {
    const Volume v = load_volume(a.str() + "/" + e.volume_path);
    const BinaryMask m = load_mask(a.str() + "/" + e.mask_path);
    const double frac = foreground_fraction(m);
    CHECK(frac >= 0.01);
    CHECK(frac <= 0.4);
    double in_sum = 0, out_sum = 0;
    std::int64_t n_in = 0, n_out = 0;
    for (std::int64_t i = 0; i < v.size(); ++i) {
      if (m.data[i]) {
        in_sum += v.data[i];
        ++n_in;
      } else {
        out_sum += v.data[i];
        ++n_out;
      }
    }
    CHECK(in_sum / n_in - out_sum / n_out >= 0.3);
    ++checked;
  }
  CHECK(checked == 40);

  SUBCASE("manifest round trip") {
    const auto loaded = load_manifest(a.str() + "/manifest.json");
    CHECK(loaded.entries.size() == man_a.entries.size());
    CHECK(loaded.shape == man_a.shape);
    CHECK(loaded.task_names == man_a.task_names);
    CHECK(loaded.entries[7].id == man_a.entries[7].id);
    CHECK(loaded.entries[7].task_index == man_a.entries[7].task_index);
  }
}

TEST_CASE("generate_synthetic_corpus input validation") {
  TempDir td("corpus_bad");
  SynthParams p = small_params();
  p.shape = {8, 32, 32};
  CHECK_THROWS_AS(generate_synthetic_corpus(td.str(), p, small_registry()), Error);
  p = small_params();
  p.n_per_task = 5;
  CHECK_THROWS_AS(generate_synthetic_corpus(td.str(), p, small_registry()), Error);
}

namespace {
CorpusManifest fake_manifest(int n_per_task, int tasks) {
  CorpusManifest m;
  m.shape = {16, 16, 16};
  m.n_per_task = n_per_task;
  for (int k = 1; k <= tasks; ++k) m.task_names.push_back("t" + std::to_string(k));
  for (int k = 1; k <= tasks; ++k)
    for (int i = 0; i < n_per_task; ++i) {
      const auto id = sample_id(m.task_names[static_cast<std::size_t>(k - 1)], i);
      m.entries.push_back({id, k, "v/" + id, "m/" + id});
    }
  return m;
}
}  // namespace

TEST_CASE("split_corpus: labeled counts match the configured fraction") {
  // 78 ids -> 16 test, 62 train; 10% of 62 -> 6 labeled
  const auto plan78 = split_corpus(fake_manifest(78, 2), 0.10, 11);
  CHECK(plan78.of_task(1).test.size() == 16);
  CHECK(plan78.of_task(1).labeled.size() == 6);

  // 38 ids -> 8 test, 30 train; 10% of 30 -> 3 labeled
  const auto plan38 = split_corpus(fake_manifest(38, 2), 0.10, 11);
  CHECK(plan38.of_task(1).test.size() == 8);
  CHECK(plan38.of_task(1).labeled.size() == 3);

  // desk default: 40 ids -> 8 test, 32 train, 3 validation, 3 labeled
  const auto plan40 = split_corpus(fake_manifest(40, 4), 0.10, 11);
  CHECK(plan40.of_task(3).test.size() == 8);
  CHECK(plan40.of_task(3).validation.size() == 3);
  CHECK(plan40.of_task(3).labeled.size() == 3);
  CHECK(plan40.of_task(3).unlabeled.size() == 26);
}

TEST_CASE("split_corpus: determinism, disjointness, union") {
  const auto man = fake_manifest(40, 4);
  const auto p1 = split_corpus(man, 0.10, 5);
  const auto p2 = split_corpus(man, 0.10, 5);
  for (int k = 1; k <= 4; ++k) {
    const auto& a = p1.of_task(k);
    const auto& b = p2.of_task(k);
    CHECK(a.labeled == b.labeled);
    CHECK(a.unlabeled == b.unlabeled);
    CHECK(a.validation == b.validation);
    CHECK(a.test == b.test);

    std::vector<std::string> all;
    for (const auto* set : {&a.labeled, &a.unlabeled, &a.validation, &a.test})
      all.insert(all.end(), set->begin(), set->end());
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());  // disjoint
    auto ids = man.ids_of_task(k);
    std::sort(ids.begin(), ids.end());
    CHECK(sorted == ids);  // union covers everything
  }
  CHECK_THROWS_AS(split_corpus(man, 0.0, 5), Error);
  CHECK_THROWS_AS(split_corpus(man, 1.0, 5), Error);
  CHECK_THROWS_AS(split_corpus(fake_manifest(4, 2), 0.10, 5), Error);
}

TEST_CASE("split plan file round trip") {
  TempDir td("split");
  const auto plan = split_corpus(fake_manifest(40, 4), 0.10, 9);
  save_split(td.str() + "/split.json", plan);
  const auto loaded = load_split(td.str() + "/split.json");
  CHECK(loaded.labeled_fraction == plan.labeled_fraction);
  CHECK(loaded.seed == plan.seed);
  for (int k = 1; k <= 4; ++k) {
    CHECK(loaded.of_task(k).labeled == plan.of_task(k).labeled);
    CHECK(loaded.of_task(k).test == plan.of_task(k).test);
  }
}

TEST_CASE("sample_patch: identity crop, absent mask, foreground bias") {
  TempDir td("patch");
  const auto man = build_small(td.str());
  const auto& e0 = man.entries.front();
  const Volume v = load_volume(td.str() + "/" + e0.volume_path);
  const BinaryMask m = load_mask(td.str() + "/" + e0.mask_path);

  Rng rng(17);
  SUBCASE("patch equal to the volume is the identity") {
    auto [pv, pm] = sample_patch(v, &m, v.shape, rng);
    CHECK((pv.data == v.data).all());
    REQUIRE(pm.has_value());
    CHECK((pm->data == m.data).all());
  }

  SUBCASE("no mask in, no mask out") {
    auto [pv, pm] = sample_patch(v, nullptr, {16, 16, 16}, rng);
    CHECK(pv.shape == Shape3{16, 16, 16});
    CHECK(!pm.has_value());
  }

  SUBCASE("patch larger than volume is rejected") {
    CHECK_THROWS_AS(sample_patch(v, &m, {33, 32, 32}, rng), Error);
  }

  SUBCASE("at least 40% of labeled crops contain foreground") {
    int hits = 0;
    const int draws = 1000;
    for (int i = 0; i < draws; ++i) {
      auto [pv, pm] = sample_patch(v, &m, {16, 16, 16}, rng);
      if (foreground_count(*pm) > 0) ++hits;
    }
    CHECK(static_cast<double>(hits) / draws >= 0.40);
  }

  SUBCASE("same rng state gives the same crop") {
    Rng r1(99), r2(99);
    auto [a, am] = sample_patch(v, &m, {16, 16, 16}, r1);
    auto [b, bm] = sample_patch(v, &m, {16, 16, 16}, r2);
    CHECK((a.data == b.data).all());
  }
}
