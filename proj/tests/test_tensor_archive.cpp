#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <filesystem>
#include <random>

#include "dqrelo/tensor_archive.hpp"
#include "oracles.hpp"

using namespace dqrelo;
namespace fs = std::filesystem;

namespace {

TensorRecord f32_record(const std::vector<std::int64_t>& shape,
                        const std::vector<float>& values) {
  TensorRecord rec;
  rec.shape = shape;
  rec.dtype = Dtype::kF32;
  rec.data.resize(values.size() * 4);
  std::memcpy(rec.data.data(), values.data(), rec.data.size());
  return rec;
}

TensorRecord random_record(std::mt19937_64& gen) {
  std::uniform_int_distribution<int> rank_dist(1, 4);
  std::uniform_int_distribution<std::int64_t> dim_dist(1, 9);
  std::uniform_int_distribution<int> dtype_dist(0, 2);
  TensorRecord rec;
  const int rank = rank_dist(gen);
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    rec.shape.push_back(dim_dist(gen));
    numel *= rec.shape.back();
  }
  rec.dtype = static_cast<Dtype>(dtype_dist(gen));
  rec.data.resize(static_cast<std::size_t>(numel) * (dtype_bits(rec.dtype) / 8));
  std::uniform_int_distribution<int> byte_dist(0, 255);
  // random bits can encode NaN in half formats; zero the exponent's top bit
  for (auto& b : rec.data) b = static_cast<std::uint8_t>(byte_dist(gen)) & 0xbf;
  return rec;
}

}  // namespace

TEST_CASE("2x2 float32 tensor round-trips bit-exactly") {
  TensorArchive archive;
  archive.add("w", f32_record({2, 2}, {1, 2, 3, 4}));
  const auto dir = oracles::temp_dir();
  const auto path = dir / "a.safetensors";
  save_archive(archive, path);

  const TensorArchive loaded = load_archive(path);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded.at("w").shape == std::vector<std::int64_t>{2, 2});
  CHECK(loaded.at("w").data == archive.at("w").data);

  const auto path2 = dir / "b.safetensors";
  save_archive(loaded, path2);
  CHECK(oracles::read_file(path) == oracles::read_file(path2));
}

TEST_CASE("byte-length mismatch raises CorruptTensorError") {
  // header declares 4x4 float32 but only 12 payload bytes exist
  const std::string header =
      R"({"w":{"dtype":"F32","shape":[4,4],"data_offsets":[0,12]}})";
  std::vector<std::uint8_t> file(8, 0);
  file[0] = static_cast<std::uint8_t>(header.size());
  file.insert(file.end(), header.begin(), header.end());
  file.resize(file.size() + 12, 0);
  const auto path = oracles::temp_dir() / "short.safetensors";
  oracles::write_file(path, file);
  CHECK_THROWS_AS(load_archive(path), CorruptTensorError);
}

TEST_CASE("random archives round-trip; independent reader agrees") {
  std::mt19937_64 gen(2024);
  const auto dir = oracles::temp_dir();
  for (int trial = 0; trial < 10; ++trial) {
    TensorArchive archive;
    const int count = 1 + static_cast<int>(gen() % 6);
    for (int i = 0; i < count; ++i) {
      archive.add("tensor_" + std::to_string(trial) + "_" + std::to_string(i),
                  random_record(gen));
    }
    const auto path = dir / ("fuzz_" + std::to_string(trial) + ".safetensors");
    save_archive(archive, path);

    const TensorArchive loaded = load_archive(path);
    REQUIRE(loaded.size() == archive.size());
    const auto independent = oracles::independent_read_archive(path);
    REQUIRE(independent.size() == archive.size());
    for (std::size_t i = 0; i < archive.size(); ++i) {
      const auto& [name, rec] = archive.entries()[i];
      CHECK(loaded.entries()[i].first == name);  // header order preserved
      CHECK(loaded.at(name).data == rec.data);
      const auto& ref = independent.at(name);
      CHECK(ref.dtype == dtype_name(rec.dtype));
      CHECK(ref.shape == rec.shape);
      CHECK(ref.bytes == rec.data);
    }
  }
}

TEST_CASE("empty archive saves and loads") {
  TensorArchive archive;
  const auto path = oracles::temp_dir() / "empty.safetensors";
  save_archive(archive, path);
  const TensorArchive loaded = load_archive(path);
  CHECK(loaded.size() == 0);
}

TEST_CASE("file size is header bytes plus payload") {
  TensorArchive archive;
  TensorRecord rec;
  rec.shape = {1};
  rec.dtype = Dtype::kF16;
  rec.data = {0x00, 0x3c};  // 1.0
  archive.add("v", rec);
  const auto path = oracles::temp_dir() / "one.safetensors";
  save_archive(archive, path);
  const auto header = canonical_header_bytes(archive);
  CHECK(fs::file_size(path) == 8 + header.size() + 2);
}

TEST_CASE("save/load/save produces a byte-identical second file") {
  std::mt19937_64 gen(5);
  TensorArchive archive;
  for (int i = 0; i < 4; ++i) {
    archive.add("t" + std::to_string(i), random_record(gen));
  }
  const auto dir = oracles::temp_dir();
  save_archive(archive, dir / "first.safetensors");
  save_archive(load_archive(dir / "first.safetensors"), dir / "second.safetensors");
  CHECK(oracles::read_file(dir / "first.safetensors") ==
        oracles::read_file(dir / "second.safetensors"));
}

TEST_CASE("malformed headers raise FormatError") {
  const auto dir = oracles::temp_dir();

  SECTION("not JSON") {
    std::vector<std::uint8_t> file(8, 0);
    file[0] = 4;
    const char junk[] = "????";
    file.insert(file.end(), junk, junk + 4);
    const auto path = dir / "junk.safetensors";
    oracles::write_file(path, file);
    CHECK_THROWS_AS(load_archive(path), FormatError);
  }
  SECTION("header length exceeds file") {
    std::vector<std::uint8_t> file(8, 0);
    file[0] = 0xff;
    const auto path = dir / "overlong.safetensors";
    oracles::write_file(path, file);
    CHECK_THROWS_AS(load_archive(path), FormatError);
  }
  SECTION("zero dimension") {
    const std::string header =
        R"({"w":{"dtype":"F32","shape":[0,2],"data_offsets":[0,0]}})";
    std::vector<std::uint8_t> file(8, 0);
    file[0] = static_cast<std::uint8_t>(header.size());
    file.insert(file.end(), header.begin(), header.end());
    const auto path = dir / "zerodim.safetensors";
    oracles::write_file(path, file);
    CHECK_THROWS_AS(load_archive(path), FormatError);
  }
  SECTION("missing file") {
    CHECK_THROWS_AS(load_archive(dir / "nope.safetensors"), IoError);
  }
}

TEST_CASE("unsupported dtype raises UnsupportedDtypeError") {
  const std::string header =
      R"({"w":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
  std::vector<std::uint8_t> file(8, 0);
  file[0] = static_cast<std::uint8_t>(header.size());
  file.insert(file.end(), header.begin(), header.end());
  file.resize(file.size() + 8, 0);
  const auto path = oracles::temp_dir() / "i64.safetensors";
  oracles::write_file(path, file);
  CHECK_THROWS_AS(load_archive(path), UnsupportedDtypeError);
}

TEST_CASE("NaN validation is opt-in") {
  TensorArchive archive;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  archive.add("sentinel", f32_record({2}, {1.0f, nan}));
  const auto path = oracles::temp_dir() / "nan.safetensors";
  save_archive(archive, path);

  CHECK(load_archive(path).size() == 1);  // default: accepted
  LoadOptions strict;
  strict.validate_values = true;
  CHECK_THROWS_AS(load_archive(path, strict), CorruptTensorError);
}

TEST_CASE("duplicate tensor names are rejected") {
  TensorArchive archive;
  archive.add("w", f32_record({1}, {1.0f}));
  CHECK_THROWS_AS(archive.add("w", f32_record({1}, {2.0f})), FormatError);
}

TEST_CASE("as_matrix shape classes") {
  TensorRecord vec = f32_record({8}, std::vector<float>(8, 1.0f));
  const FloatTensor v = as_matrix(vec);
  CHECK(v.shape_class == ShapeClass::kVector);
  CHECK(v.vec().size() == 8);

  TensorRecord mat = f32_record({4, 6}, std::vector<float>(24, 0.5f));
  const FloatTensor m = as_matrix(mat);
  CHECK(m.shape_class == ShapeClass::kMatrix);
  CHECK(m.rows() == 4);
  CHECK(m.cols() == 6);

  TensorRecord cube = f32_record({2, 3, 5}, std::vector<float>(30, -1.0f));
  const FloatTensor c = as_matrix(cube);
  CHECK(c.shape_class == ShapeClass::kReshapedMatrix);
  CHECK(c.rows() == 2);
  CHECK(c.cols() == 15);
}

TEST_CASE("as_matrix upcast preserves values representable in float32") {
  std::vector<float> values;
  for (int i = 0; i < 10; ++i) values.push_back(0.25f * static_cast<float>(i) - 1.0f);
  TensorRecord rec;
  rec.shape = {10};
  rec.dtype = Dtype::kF16;
  rec.data = encode_from_f32(values.data(), values.size(), Dtype::kF16);

  const FloatTensor view = as_matrix(rec);
  const auto back = encode_from_f32(view.values.data(), 10, Dtype::kF16);
  CHECK(back == rec.data);
  for (int i = 0; i < 10; ++i) CHECK(view.vec()[i] == values[static_cast<std::size_t>(i)]);
}

TEST_CASE("source precision bits reports the majority width") {
  std::mt19937_64 gen(11);
  TensorArchive mostly16;
  mostly16.add("a", random_record(gen));
  {
    TensorRecord big;
    big.shape = {64};
    big.dtype = Dtype::kF16;
    big.data.assign(128, 0);
    mostly16.add("big", big);
  }
  CHECK(mostly16.source_precision_bits() == 16);

  TensorArchive all32;
  all32.add("w", f32_record({3}, {1, 2, 3}));
  CHECK(all32.source_precision_bits() == 32);
}

TEST_CASE("reads files written by the safetensors ecosystem") {
  const fs::path fixture = fs::path(DQRELO_TEST_DATA_DIR) / "ecosystem.safetensors";
  REQUIRE(fs::exists(fixture));
  const TensorArchive archive = load_archive(fixture);
  REQUIRE(archive.size() == 3);

  // iteration order equals header order, which is not insertion order here
  CHECK(archive.entries()[0].first == "embed.weight");
  CHECK(archive.entries()[1].first == "layers.0.norm.weight");
  CHECK(archive.entries()[2].first == "layers.0.attn.weight");

  CHECK(archive.at("embed.weight").dtype == Dtype::kF32);
  CHECK(archive.at("layers.0.norm.weight").dtype == Dtype::kBF16);
  CHECK(archive.at("layers.0.attn.weight").dtype == Dtype::kF16);
  CHECK(archive.at("embed.weight").shape == std::vector<std::int64_t>{4, 3});

  // every tensor holds value 0.25 * flat_index - 1, exactly representable
  for (const auto& [name, rec] : archive.entries()) {
    const FloatTensor view = as_matrix(rec);
    for (Index k = 0; k < view.values.size(); ++k) {
      CHECK(view.values.data()[k] == 0.25f * static_cast<float>(k) - 1.0f);
    }
  }
}
