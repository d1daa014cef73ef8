#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xbridge/checkpoint.hpp"
#include "xbridge/config.hpp"
#include "xbridge/rng.hpp"
#include "xbridge/tensor.hpp"

using namespace xbridge;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.config_json = dump_run_config(RunConfig{});
  ck.step = 1234;
  ck.seed_state = 0xfeedbeefcafef00dull;
  Rng r1(7), r2(8);
  ck.arrays.emplace_back("head.w", Tensor::randn({3, 5}, r1, DType::f32, 1.0));
  ck.arrays.emplace_back("head.b", Tensor::randn({5}, r2, DType::f64, 1.0));
  return ck;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.dtype() == b.dtype() && a.shape() == b.shape() &&
         std::memcmp(a.bytes().data(), b.bytes().data(), a.bytes().size()) == 0;
}

}  // namespace

TEST_CASE("checkpoint round-trips bitwise through a file") {
  const Checkpoint ck = sample_checkpoint();
  checkpoint_save(ck, "ck_roundtrip.x2i");
  const Checkpoint back = checkpoint_load("ck_roundtrip.x2i");

  CHECK(back.version == 1);
  CHECK(back.step == ck.step);
  CHECK(back.seed_state == ck.seed_state);
  REQUIRE(back.arrays.size() == ck.arrays.size());
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    CHECK(back.arrays[i].first == ck.arrays[i].first);
    CHECK(same_bytes(back.arrays[i].second, ck.arrays[i].second));
  }

  // The config echo survives structurally (key order is canonicalized).
  CHECK(nlohmann::json::parse(back.config_json) == nlohmann::json::parse(ck.config_json));

  // Re-serializing the loaded checkpoint reproduces the file bitwise.
  CHECK(checkpoint_serialize(back) == checkpoint_serialize(ck));
  CHECK(checkpoint_hash(back) == checkpoint_hash(ck));
}

TEST_CASE("checkpoint with no config and no arrays still round-trips") {
  Checkpoint ck;
  ck.step = 1;
  ck.seed_state = 2;
  checkpoint_save(ck, "ck_empty.x2i");
  const Checkpoint back = checkpoint_load("ck_empty.x2i");
  CHECK(back.config_json.empty());
  CHECK(back.arrays.empty());
  CHECK(back.step == 1);
  CHECK(back.seed_state == 2);
  CHECK(checkpoint_serialize(back) == checkpoint_serialize(ck));
}

TEST_CASE("checkpoint hash is content-sensitive") {
  const Checkpoint ck = sample_checkpoint();
  const std::uint64_t base = checkpoint_hash(ck);

  Checkpoint step_changed = ck;
  step_changed.step += 1;
  CHECK(checkpoint_hash(step_changed) != base);

  Checkpoint value_changed = ck;
  value_changed.arrays[0].second = ck.arrays[0].second.clone();
  value_changed.arrays[0].second.set_value_at(0,
                                              ck.arrays[0].second.value_at(0) + 1.0);
  CHECK(checkpoint_hash(value_changed) != base);

  // Deterministic: serializing twice gives the same hash.
  CHECK(checkpoint_hash(ck) == base);
}

TEST_CASE("checkpoint load rejects corrupt files") {
  const auto good = checkpoint_serialize(sample_checkpoint());

  SUBCASE("missing file") {
    CHECK_THROWS_AS(checkpoint_load("ck_does_not_exist.x2i"), std::runtime_error);
  }
  SUBCASE("bad magic") {
    auto bad = good;
    bad[0] ^= 0xff;
    write_file("ck_magic.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_magic.x2i"),
                         doctest::Contains("bad magic"), std::runtime_error);
  }
  SUBCASE("unsupported version") {
    auto bad = good;
    bad[4] = 9;
    write_file("ck_version.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_version.x2i"),
                         doctest::Contains("unsupported version"), std::runtime_error);
  }
  SUBCASE("header length overruns the file") {
    auto bad = good;
    bad[8] = 0xff;
    bad[9] = 0xff;
    write_file("ck_hlen.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_hlen.x2i"),
                         doctest::Contains("truncated header"), std::runtime_error);
  }
  SUBCASE("huge header length does not wrap the bounds check") {
    auto bad = good;
    for (int i = 8; i < 16; ++i) bad[i] = 0xff;
    write_file("ck_hwrap.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_hwrap.x2i"),
                         doctest::Contains("truncated header"), std::runtime_error);
  }
  SUBCASE("garbage header json") {
    auto bad = good;
    bad[16] = '!';
    write_file("ck_json.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_json.x2i"),
                         doctest::Contains("malformed header"), std::runtime_error);
  }
  SUBCASE("payload cut short") {
    auto bad = good;
    bad.resize(bad.size() - 8);
    write_file("ck_payload.x2i", bad);
    CHECK_THROWS_WITH_AS(checkpoint_load("ck_payload.x2i"),
                         doctest::Contains("truncated payload"), std::runtime_error);
  }
}

TEST_CASE("checkpoint load rejects manifest lies") {
  // Rebuild the file with a manifest whose dtype / byte counts disagree.
  auto tamper = [](const char* field, nlohmann::json value, const char* path) {
    const Checkpoint ck = sample_checkpoint();
    const auto raw = checkpoint_serialize(ck);
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(raw[8 + i]) << (8 * i);
    auto header = nlohmann::json::parse(raw.begin() + 16, raw.begin() + 16 + hlen);
    header["arrays"][0][field] = std::move(value);
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(raw.begin(), raw.begin() + 8);
    for (int i = 0; i < 8; ++i) {
      out.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
    }
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), raw.begin() + 16 + hlen, raw.end());
    write_file(path, out);
  };

  tamper("dtype", "f16", "ck_dtype.x2i");
  CHECK_THROWS_WITH_AS(checkpoint_load("ck_dtype.x2i"), doctest::Contains("unknown dtype"),
                       std::runtime_error);

  tamper("bytes", 1, "ck_bytes.x2i");
  CHECK_THROWS_WITH_AS(checkpoint_load("ck_bytes.x2i"),
                       doctest::Contains("byte count disagrees"), std::runtime_error);

  tamper("offset", 1u << 30, "ck_offset.x2i");
  CHECK_THROWS_WITH_AS(checkpoint_load("ck_offset.x2i"),
                       doctest::Contains("truncated payload"), std::runtime_error);

  tamper("step", 0, "ck_missing.x2i");  // renames nothing; adds an ignored key
  CHECK_NOTHROW(checkpoint_load("ck_missing.x2i"));
}
