#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <filesystem>
#include <fstream>

#include "nerfmark/data_io.hpp"
#include "nerfmark/image.hpp"
#include "nerfmark/png_io.hpp"
#include "nerfmark/rng.hpp"

using namespace nerfmark;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path("nerfmark_test_tmp") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("quantization rule: round-half-up, clamped") {
  CHECK(quantize_u8(0.5f) == 128);
  CHECK(quantize_u8(1.2f) == 255);
  CHECK(quantize_u8(-0.3f) == 0);
  CHECK(quantize_u8(0.0f) == 0);
  CHECK(quantize_u8(1.0f) == 255);
}

TEST_CASE("png: write-then-read of a quantized image is exact") {
  const fs::path dir = fresh_dir("png_roundtrip");
  Rng rng(3);
  Tensor img = rand_uniform({3, 13, 9}, rng);
  // Quantize first so the round trip is exact by construction.
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = dequantize_u8(quantize_u8(img[i]));
  const std::string path = (dir / "img.png").string();
  write_image(path, img);
  Tensor back = read_image(path);
  REQUIRE(back.shape() == img.shape());
  CHECK(back.data() == img.data());

  // Writers are byte-stable.
  write_image((dir / "img2.png").string(), img);
  CHECK(slurp(dir / "img.png") == slurp(dir / "img2.png"));
}

TEST_CASE("png: gray and rgba round trips") {
  const fs::path dir = fresh_dir("png_channels");
  Rng rng(4);
  Tensor gray = rand_uniform({1, 6, 7}, rng);
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = dequantize_u8(quantize_u8(gray[i]));
  write_image((dir / "g.png").string(), gray);
  CHECK(read_image((dir / "g.png").string()).data() == gray.data());

  Tensor rgba = rand_uniform({4, 5, 5}, rng);
  for (std::size_t i = 0; i < rgba.size(); ++i) rgba[i] = dequantize_u8(quantize_u8(rgba[i]));
  write_image((dir / "a.png").string(), rgba);
  Tensor back = read_image((dir / "a.png").string());
  REQUIRE(back.shape() == Shape{4, 5, 5});
  CHECK(back.data() == rgba.data());
}

TEST_CASE("png: malformed input is rejected") {
  const fs::path dir = fresh_dir("png_bad");
  std::ofstream((dir / "junk.png").string(), std::ios::binary) << "not a png";
  CHECK_THROWS_AS(read_image((dir / "junk.png").string()), std::runtime_error);
  CHECK_THROWS_AS(read_image((dir / "absent.png").string()), std::runtime_error);
}

TEST_CASE("scene: fixture with two frames loads with correct matrices") {
  const fs::path dir = fresh_dir("scene_fixture");
  fs::create_directories(dir / "train");
  Rng rng(5);
  Tensor img = rand_uniform({3, 8, 8}, rng);
  write_image((dir / "train" / "r_0.png").string(), img);
  write_image((dir / "train" / "r_1.png").string(), img);

  CameraPose p0 = circle_pose(30.0f, -20.0f, 4.0f);
  CameraPose p1 = circle_pose(120.0f, -20.0f, 4.0f);
  nlohmann::json doc;
  doc["camera_angle_x"] = 0.6911112f;
  doc["frames"] = nlohmann::json::array();
  int idx = 0;
  for (const CameraPose* p : {&p0, &p1}) {
    nlohmann::json jf;
    jf["file_path"] = "./train/r_" + std::to_string(idx++);
    nlohmann::json tm = nlohmann::json::array();
    for (int r = 0; r < 4; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (int c = 0; c < 4; ++c) row.push_back(p->cam_to_world.at(r, c));
      tm.push_back(row);
    }
    jf["transform_matrix"] = tm;
    doc["frames"].push_back(jf);
  }
  std::ofstream(dir / "transforms_train.json") << doc.dump(2);

  Scene scene = load_scene(dir.string());
  REQUIRE(scene.frames.size() == 2);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      CHECK(scene.frames[0].pose.cam_to_world.at(r, c) ==
            doctest::Approx(p0.cam_to_world.at(r, c)).epsilon(1e-7));
      CHECK(scene.frames[1].pose.cam_to_world.at(r, c) ==
            doctest::Approx(p1.cam_to_world.at(r, c)).epsilon(1e-7));
    }
}

TEST_CASE("scene: missing image names the file path; bad rotations are rejected") {
  const fs::path dir = fresh_dir("scene_missing");
  nlohmann::json doc;
  doc["camera_angle_x"] = 0.7;
  nlohmann::json jf;
  jf["file_path"] = "./train/r_77";
  nlohmann::json tm = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) row.push_back(r == c ? 1.0 : 0.0);
    tm.push_back(row);
  }
  jf["transform_matrix"] = tm;
  doc["frames"] = nlohmann::json::array({jf});
  std::ofstream(dir / "transforms_train.json") << doc.dump(2);

  try {
    load_scene(dir.string());
    FAIL("expected an error about the missing image");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("r_77") != std::string::npos);
  }

  // Shear the rotation; the loader must reject it.
  doc["frames"][0]["transform_matrix"][0][1] = 0.8;
  std::ofstream(dir / "transforms_train.json") << doc.dump(2);
  fs::create_directories(dir / "train");
  write_image((dir / "train" / "r_77.png").string(), Tensor::zeros({3, 4, 4}));
  CHECK_THROWS_AS(load_scene(dir.string()), std::runtime_error);
}

TEST_CASE("scene: transparent pixels composite to white") {
  const fs::path dir = fresh_dir("scene_alpha");
  fs::create_directories(dir / "train");
  Tensor rgba({4, 2, 2});
  // First pixel fully transparent red, second opaque green.
  rgba[0] = 1.0f;                           // r of pixel 0
  rgba[4 + 1] = 1.0f;                       // g of pixel 1
  rgba[12 + 1] = 1.0f;                      // alpha of pixel 1
  write_image((dir / "train" / "r_0.png").string(), rgba);

  nlohmann::json doc;
  doc["camera_angle_x"] = 0.7;
  nlohmann::json jf;
  jf["file_path"] = "./train/r_0";
  nlohmann::json tm = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) row.push_back(r == c ? 1.0 : 0.0);
    tm.push_back(row);
  }
  jf["transform_matrix"] = tm;
  doc["frames"] = nlohmann::json::array({jf});
  std::ofstream(dir / "transforms_train.json") << doc.dump(2);

  Scene scene = load_scene(dir.string());
  const Tensor& img = scene.frames[0].image;
  REQUIRE(img.shape() == Shape{3, 2, 2});
  CHECK(img[0] == doctest::Approx(1.0f));   // r
  CHECK(img[4] == doctest::Approx(1.0f));   // g
  CHECK(img[8] == doctest::Approx(1.0f));   // b
  CHECK(img[4 + 1] == doctest::Approx(1.0f));
  CHECK(img[0 + 1] == doctest::Approx(0.0f));
}

TEST_CASE("scene: save-then-load preserves poses to 1e-7") {
  const fs::path dir = fresh_dir("scene_save");
  Rng rng(6);
  Scene scene = generate_toy_scene(ToyKind::kSphere, 4, 16, rng);
  save_scene(dir.string(), scene);
  Scene back = load_scene(dir.string());
  REQUIRE(back.frames.size() == scene.frames.size());
  for (std::size_t i = 0; i < scene.frames.size(); ++i)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        CHECK(back.frames[i].pose.cam_to_world.at(r, c) ==
              doctest::Approx(scene.frames[i].pose.cam_to_world.at(r, c)).epsilon(1e-7));
}

TEST_CASE("toy scene: deterministic, mirrored views differ, white background") {
  Rng r1(42), r2(42), r3(43);
  Scene a = generate_toy_scene(ToyKind::kSphere, 8, 24, r1);
  Scene b = generate_toy_scene(ToyKind::kSphere, 8, 24, r2);
  Scene c = generate_toy_scene(ToyKind::kSphere, 8, 24, r3);
  REQUIRE(a.frames.size() == 8);
  for (std::size_t i = 0; i < a.frames.size(); ++i)
    CHECK(a.frames[i].image.data() == b.frames[i].image.data());
  CHECK(a.frames[0].image.data() != c.frames[0].image.data());

  // Theta and theta+180 see opposite hemispheres.
  const Tensor& front = a.frames[0].image;
  const Tensor& backv = a.frames[4].image;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < front.size(); ++i)
    if (std::fabs(front[i] - backv[i]) > 1.0f / 255.0f) ++diff;
  CHECK(diff > front.size() / 10);

  // Corners miss the object.
  const std::size_t plane = 24 * 24;
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(front[static_cast<std::size_t>(ch) * plane] == doctest::Approx(1.0f));
    CHECK(front[static_cast<std::size_t>(ch) * plane + 23] == doctest::Approx(1.0f));
  }

  Rng r4(1);
  CHECK_THROWS_AS(generate_toy_scene(ToyKind::kSphere, 1, 16, r4), std::invalid_argument);
}

TEST_CASE("toy cube scene renders and differs from the sphere") {
  Rng r1(11), r2(11);
  Scene cube = generate_toy_scene(ToyKind::kCube, 4, 20, r1);
  Scene sphere = generate_toy_scene(ToyKind::kSphere, 4, 20, r2);
  CHECK(cube.frames[0].image.data() != sphere.frames[0].image.data());
}

TEST_CASE("checkpoint: bit-exact round trip with metadata") {
  const fs::path dir = fresh_dir("ckpt");
  Rng rng(7);
  std::unordered_map<std::string, Tensor> tensors;
  tensors["w.a"] = randn({3, 4}, rng);
  tensors["w.b"] = randn({2, 2, 2, 2}, rng);
  tensors["scalar"] = Tensor::scalar(-1.5f);
  CheckpointMeta meta;
  meta.seed = 0xdeadbeefcafef00dull;
  meta.step = 1234;
  meta.config_hash = 42;
  meta.extra["phase_switch_step"] = "370";

  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, tensors, meta);
  auto [back, back_meta] = load_checkpoint(path);
  CHECK(back_meta.seed == meta.seed);
  CHECK(back_meta.step == 1234);
  CHECK(back_meta.config_hash == 42);
  CHECK(back_meta.extra.at("phase_switch_step") == "370");
  REQUIRE(back.size() == tensors.size());
  for (const auto& [name, t] : tensors) {
    REQUIRE(back.count(name) == 1);
    CHECK(back.at(name).shape() == t.shape());
    CHECK(back.at(name).data() == t.data());
  }

  // Saving again is byte-stable.
  save_checkpoint((dir / "model2.ckpt").string(), tensors, meta);
  CHECK(slurp(dir / "model.ckpt") == slurp(dir / "model2.ckpt"));
}

TEST_CASE("checkpoint: truncation and corruption are rejected") {
  const fs::path dir = fresh_dir("ckpt_bad");
  Rng rng(8);
  std::unordered_map<std::string, Tensor> tensors{{"w", randn({8, 8}, rng)}};
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, tensors, CheckpointMeta{});

  auto bytes = slurp(dir / "m.ckpt");
  std::ofstream((dir / "trunc.ckpt").string(), std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size() / 2));
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "trunc.ckpt").string()).first.size(),
                       doctest::Contains("checksum"), std::runtime_error);

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  std::ofstream((dir / "flip.ckpt").string(), std::ios::binary)
      .write(reinterpret_cast<const char*>(flipped.data()),
             static_cast<std::streamsize>(flipped.size()));
  CHECK_THROWS_AS(load_checkpoint((dir / "flip.ckpt").string()), std::runtime_error);
}

TEST_CASE("checkpoint: unknown version is rejected") {
  const fs::path dir = fresh_dir("ckpt_ver");
  // Hand-build an empty version-99 container with a valid checksum.
  std::vector<std::uint8_t> payload;
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) payload.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto put_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) payload.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put_u32(99);
  put_u64(0), put_u64(0), put_u64(0);
  put_u32(0);  // no extra
  put_u32(0);  // no tensors
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
  std::ofstream out((dir / "v99.ckpt").string(), std::ios::binary);
  out.write("NMRK", 4);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>(crc >> (8 * i)));
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "v99.ckpt").string()).second.step,
                       doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("texture corpus and watermark are deterministic") {
  Rng r1(9), r2(9);
  auto a = generate_texture_corpus(3, 16, r1);
  auto b = generate_texture_corpus(3, 16, r2);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].data() == b[i].data());

  Tensor w1 = make_default_watermark(32);
  Tensor w2 = make_default_watermark(32);
  CHECK(w1.data() == w2.data());
  // Grayscale replicated across channels.
  const std::size_t plane = 32 * 32;
  for (std::size_t i = 0; i < plane; ++i) {
    CHECK(w1[i] == w1[plane + i]);
    CHECK(w1[i] == w1[2 * plane + i]);
  }
}
