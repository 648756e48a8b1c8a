#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "piecewise/data.hpp"

using namespace piecewise;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("piecewise_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Dataset byte_images(Index n, Index pixels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255), lab(0, 9);
  Dataset ds;
  ds.x.resize(n, pixels);
  ds.labels.emplace();
  for (Index i = 0; i < ds.x.size(); ++i) ds.x.data()[i] = px(rng);
  for (Index i = 0; i < n; ++i) ds.labels->push_back(lab(rng));
  return ds;
}

}  // namespace

TEST_CASE("two circles: shape, labels and determinism") {
  const Dataset ds = gen_two_circles(300, 1.0, 2.0, 0.1, 0);
  CHECK(ds.size() == 600);
  CHECK(ds.dim() == 2);
  CHECK(ds.num_classes() == 2);
  CHECK(std::count(ds.labels->begin(), ds.labels->end(), 0) == 300);
  const Dataset again = gen_two_circles(300, 1.0, 2.0, 0.1, 0);
  CHECK(ds.x == again.x);
  CHECK(*ds.labels == *again.labels);
  CHECK(ds.x != gen_two_circles(300, 1.0, 2.0, 0.1, 1).x);
}

TEST_CASE("noiseless circles have exact radii") {
  const Dataset ds = gen_two_circles(50, 0.7, 1.9, 0.0, 3);
  for (Index i = 0; i < ds.size(); ++i) {
    const double r = ds.x.row(i).norm();
    CHECK(r == doctest::Approx((*ds.labels)[i] == 0 ? 0.7 : 1.9).epsilon(1e-15));
  }
}

TEST_CASE("two circles rejects invalid geometry") {
  CHECK_THROWS_AS(gen_two_circles(10, 2.0, 1.0, 0.1, 0), ContractViolation);
  CHECK_THROWS_AS(gen_two_circles(10, 0.0, 1.0, 0.1, 0), ContractViolation);
  CHECK_THROWS_AS(gen_two_circles(10, 1.0, 2.0, -0.1, 0), ContractViolation);
  CHECK_THROWS_AS(gen_two_circles(0, 1.0, 2.0, 0.1, 0), ContractViolation);
}

TEST_CASE("IDX round trip is byte exact") {
  const fs::path dir = scratch_dir("roundtrip");
  const Dataset ds = byte_images(7, 12, 1);
  write_idx(ds, 3, 4, (dir / "img").string(), (dir / "lab").string());
  const Dataset back = load_idx((dir / "img").string(), (dir / "lab").string());
  CHECK(back.x == ds.x);
  CHECK(*back.labels == *ds.labels);
  const auto img = bytes_of(dir / "img");
  CHECK(img.size() == 16 + 7 * 12);
  CHECK(img[3] == 0x03);
  CHECK(img[2] == 0x08);
  write_idx(back, 3, 4, (dir / "img2").string(), (dir / "lab2").string());
  CHECK(bytes_of(dir / "img2") == img);
  CHECK(bytes_of(dir / "lab2") == bytes_of(dir / "lab"));
}

TEST_CASE("IDX errors") {
  const fs::path dir = scratch_dir("errors");
  const Dataset ds = byte_images(5, 4, 2);
  const std::string img = (dir / "img").string(), lab = (dir / "lab").string();
  write_idx(ds, 2, 2, img, lab);

  auto bad = bytes_of(img);
  bad[3] = 0x01;
  write_bytes(dir / "bad_magic", bad);
  try {
    load_idx((dir / "bad_magic").string(), lab);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
    CHECK(std::string(e.what()).find("byte 0") != std::string::npos);
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }

  auto truncated = bytes_of(img);
  truncated.resize(truncated.size() - 3);
  write_bytes(dir / "short", truncated);
  CHECK_THROWS_AS(load_idx((dir / "short").string(), lab), ParseError);

  const Dataset fewer = byte_images(4, 4, 3);
  write_idx(fewer, 2, 2, (dir / "img4").string(), (dir / "lab4").string());
  CHECK_THROWS_AS(load_idx(img, (dir / "lab4").string()), ParseError);
  CHECK_THROWS_AS(load_idx((dir / "missing").string(), lab), ParseError);
}

TEST_CASE("standardization") {
  const Dataset train = byte_images(40, 16, 4);
  const auto [z, t] = standardize(train);
  CHECK(std::abs(z.x.mean()) <= 1e-9);
  const double var = (z.x.array() - z.x.mean()).square().mean();
  CHECK(var >= 1.0 - 1e-6);
  CHECK(var <= 1.0 + 1e-6);

  const Dataset test = byte_images(40, 16, 5);
  const double shifted = t.apply(test).x.mean();
  CHECK(shifted != 0.0);
  CHECK(std::abs(shifted) < 0.2);

  Dataset constant;
  constant.x = Matrix::Constant(5, 3, 7.0);
  CHECK_THROWS_AS(standardize(constant), ContractViolation);
}

TEST_CASE("standardization commutes with convex combinations") {
  const Dataset ds = byte_images(10, 6, 6);
  const Standardizer s = Standardizer::fit(ds);
  Dataset mix;
  mix.x = 0.3 * ds.x.topRows(5) + 0.7 * ds.x.bottomRows(5);
  const Matrix lhs = s.apply(mix).x;
  const Matrix z = s.apply(ds).x;
  const Matrix rhs = 0.3 * z.topRows(5) + 0.7 * z.bottomRows(5);
  CHECK(lhs.isApprox(rhs, 1e-12));
}

TEST_CASE("balanced subsets") {
  const Dataset ds = byte_images(2000, 4, 7);
  const Dataset sub = subset(ds, {0, 1, 2}, 50, 9);
  CHECK(sub.size() == 150);
  CHECK(sub.num_classes() == 3);
  for (int c = 0; c < 3; ++c) CHECK(std::count(sub.labels->begin(), sub.labels->end(), c) == 50);
  const Dataset again = subset(ds, {0, 1, 2}, 50, 9);
  CHECK(sub.x == again.x);
  CHECK(*sub.labels == *again.labels);
  const Dataset remapped = subset(ds, {7, 3}, 10, 1);
  for (Index i = 0; i < remapped.size(); ++i) {
    CHECK((*remapped.labels)[i] == (i < 10 ? 0 : 1));
  }
  CHECK_THROWS_AS(subset(ds, {0}, 100000, 0), ContractViolation);
}

TEST_CASE("CSV round trip and errors") {
  const fs::path dir = scratch_dir("csv");
  const Dataset ds = gen_two_circles(6, 1.0, 2.0, 0.1, 2);
  write_csv(ds, (dir / "d.csv").string());
  const Dataset back = load_csv((dir / "d.csv").string());
  CHECK(back.x == ds.x);
  CHECK(*back.labels == *ds.labels);

  const Dataset unlabeled = load_csv((dir / "d.csv").string(), "");
  CHECK(unlabeled.dim() == 3);
  CHECK_FALSE(unlabeled.labels.has_value());

  std::ofstream(dir / "bad.csv") << "a,b\n1,2\n3,x\n";
  CHECK_THROWS_AS(load_csv((dir / "bad.csv").string(), ""), ParseError);
  std::ofstream(dir / "ragged.csv") << "a,b\n1,2\n3\n";
  CHECK_THROWS_AS(load_csv((dir / "ragged.csv").string(), ""), ParseError);
}
