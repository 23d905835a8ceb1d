#pragma once

// Dataset ingestion in the NeRF-synthetic layout, toy-scene synthesis for
// desk-scale runs, and checkpoint persistence.
//
// Checkpoint container (little-endian):
//   "NMRK" | u32 version | u64 seed | u64 step | u64 config_hash
//   | u32 extra_count | extra_count * (str key, str value)
//   | u32 tensor_count | tensor_count * (str name, u32 rank, u32 dims[rank],
//                                        f32 data[...])
//   | u32 crc32 of everything after the magic
// Strings are u32 length + bytes. Round trips are bit-exact.

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nerfmark/camera.hpp"
#include "nerfmark/png_io.hpp"
#include "nerfmark/rng.hpp"
#include "nerfmark/tensor.hpp"

namespace nerfmark {

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

struct Frame {
  Tensor image;  // (3,H,W) float [0,1], alpha already composited over white
  CameraPose pose;
  std::string name;   // file path stem relative to the scene dir
  std::string split;  // train / val / test
};

struct Scene {
  float camera_angle_x = 0.6911112f;
  std::vector<Frame> frames;

  std::vector<const Frame*> split_frames(const std::string& split) const {
    std::vector<const Frame*> out;
    for (const Frame& f : frames)
      if (f.split == split) out.push_back(&f);
    return out;
  }

  int width() const { return frames.empty() ? 0 : frames[0].image.dim(2); }
  int height() const { return frames.empty() ? 0 : frames[0].image.dim(1); }
};

inline Tensor composite_over_white(const Tensor& image) {
  if (image.rank() != 3) detail::fail_op("composite_over_white", "expects (C,H,W)");
  if (image.dim(0) == 3) return image;
  if (image.dim(0) == 1) {
    Tensor out({3, image.dim(1), image.dim(2)});
    const std::size_t plane = image.size();
    for (int c = 0; c < 3; ++c)
      std::copy(image.ptr(), image.ptr() + plane, out.ptr() + static_cast<std::size_t>(c) * plane);
    return out;
  }
  if (image.dim(0) != 4)
    detail::fail_op("composite_over_white", "expects 1, 3 or 4 channels, got " +
                                                detail::shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({3, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    const float alpha = image[3 * plane + i];
    for (int c = 0; c < 3; ++c)
      out[static_cast<std::size_t>(c) * plane + i] =
          alpha * image[static_cast<std::size_t>(c) * plane + i] + (1.0f - alpha);
  }
  return out;
}

namespace detail {

inline void load_split(const std::filesystem::path& dir, const std::string& split, Scene& scene) {
  namespace fs = std::filesystem;
  const fs::path json_path = dir / ("transforms_" + split + ".json");
  if (!fs::exists(json_path)) return;

  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("load_scene: cannot open " + json_path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_scene: malformed JSON in " + json_path.string() + ": " +
                             e.what());
  }
  if (!doc.contains("camera_angle_x") || !doc.contains("frames"))
    throw std::runtime_error("load_scene: " + json_path.string() +
                             " lacks camera_angle_x/frames");
  scene.camera_angle_x = doc["camera_angle_x"].get<float>();

  for (const auto& jf : doc["frames"]) {
    Frame frame;
    frame.split = split;
    frame.name = jf.at("file_path").get<std::string>();
    frame.pose.camera_angle_x = scene.camera_angle_x;
    const auto& tm = jf.at("transform_matrix");
    if (tm.size() != 4) throw std::runtime_error("load_scene: transform_matrix must be 4x4");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        frame.pose.cam_to_world.at(r, c) = tm[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<float>();
    try {
      frame.pose.validate();
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("load_scene: " + frame.name + ": " + e.what());
    }

    fs::path img_path = dir / frame.name;
    if (!img_path.has_extension()) img_path += ".png";
    if (!fs::exists(img_path))
      throw std::runtime_error("load_scene: missing image file " + img_path.string() +
                               " referenced by " + json_path.string());
    frame.image = composite_over_white(read_image(img_path.string()));
    scene.frames.push_back(std::move(frame));
  }
}

}  // namespace detail

// Loads every transforms_{train,val,test}.json present under `directory`.
inline Scene load_scene(const std::string& directory) {
  Scene scene;
  for (const char* split : {"train", "val", "test"})
    detail::load_split(directory, split, scene);
  if (scene.split_frames("train").empty())
    throw std::runtime_error("load_scene: no train frames under " + directory);
  for (const Frame& f : scene.frames) {
    if (f.image.shape() != scene.frames[0].image.shape())
      throw std::runtime_error("load_scene: frame " + f.name + " has mismatched size");
  }
  return scene;
}

// Writes a scene in the same layout load_scene reads.
inline void save_scene(const std::string& directory, const Scene& scene) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  for (const char* split : {"train", "val", "test"}) {
    auto frames = scene.split_frames(split);
    if (frames.empty()) continue;
    fs::create_directories(fs::path(directory) / split);
    nlohmann::json doc;
    doc["camera_angle_x"] = scene.camera_angle_x;
    doc["frames"] = nlohmann::json::array();
    int index = 0;
    for (const Frame* f : frames) {
      const std::string stem = std::string("./") + split + "/r_" + std::to_string(index++);
      nlohmann::json jf;
      jf["file_path"] = stem;
      nlohmann::json tm = nlohmann::json::array();
      for (int r = 0; r < 4; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < 4; ++c) row.push_back(f->pose.cam_to_world.at(r, c));
        tm.push_back(row);
      }
      jf["transform_matrix"] = tm;
      doc["frames"].push_back(jf);
      write_image((fs::path(directory) / (stem + ".png")).string(), f->image);
    }
    std::ofstream out(fs::path(directory) / ("transforms_" + std::string(split) + ".json"));
    out << doc.dump(2) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Toy scenes and procedural images
// ---------------------------------------------------------------------------

enum class ToyKind { kSphere, kCube };

namespace detail {

struct ToyPalette {
  Vec3 colors[3];
};

inline ToyPalette toy_palette(Rng& rng) {
  ToyPalette p;
  for (auto& c : p.colors) c = Vec3{rng.uniform(0.1f, 0.9f), rng.uniform(0.1f, 0.9f), rng.uniform(0.1f, 0.9f)};
  return p;
}

inline Vec3 shade_lambert(const Vec3& albedo, const Vec3& normal) {
  const Vec3 light = Vec3{0.45f, 0.35f, 0.82f}.normalized();
  const float diffuse = std::max(0.0f, normal.dot(light));
  const float k = 0.35f + 0.65f * diffuse;
  return albedo * k;
}

// Returns true on hit; fills color.
inline bool trace_sphere(const Vec3& o, const Vec3& d, const ToyPalette& pal, Vec3& color) {
  const float radius = 1.3f;
  const float b = o.dot(d);
  const float c = o.dot(o) - radius * radius;
  const float disc = b * b - c;
  if (disc < 0.0f) return false;
  const float t = -b - std::sqrt(disc);
  if (t <= 0.0f) return false;
  const Vec3 hit = o + d * t;
  const Vec3 n = hit * (1.0f / radius);
  const float az = std::atan2(hit.y, hit.x);
  const float el = std::asin(std::clamp(hit.z / radius, -1.0f, 1.0f));
  const int cell = static_cast<int>(std::floor(az * 2.2918312f)) +   // 8 bands over 2*pi
                   static_cast<int>(std::floor((el + 1.5707964f) * 2.546479f));
  const Vec3 albedo = pal.colors[((cell % 3) + 3) % 3];
  color = shade_lambert(albedo, n);
  return true;
}

inline bool trace_cube(const Vec3& o, const Vec3& d, const ToyPalette& pal, Vec3& color) {
  const float half = 1.05f;
  float tmin = -1e30f, tmax = 1e30f;
  int axis = -1;
  const float ov[3] = {o.x, o.y, o.z};
  const float dv[3] = {d.x, d.y, d.z};
  for (int i = 0; i < 3; ++i) {
    if (std::fabs(dv[i]) < 1e-9f) {
      if (std::fabs(ov[i]) > half) return false;
      continue;
    }
    float t0 = (-half - ov[i]) / dv[i];
    float t1 = (half - ov[i]) / dv[i];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis = i;
    }
    tmax = std::min(tmax, t1);
  }
  if (tmin > tmax || tmin <= 0.0f || axis < 0) return false;
  const Vec3 hit = o + d * tmin;
  Vec3 n{0, 0, 0};
  const float hv[3] = {hit.x, hit.y, hit.z};
  (axis == 0 ? n.x : axis == 1 ? n.y : n.z) = hv[axis] > 0 ? 1.0f : -1.0f;
  const float u = hv[(axis + 1) % 3], v = hv[(axis + 2) % 3];
  const int cell = static_cast<int>(std::floor(u * 2.0f)) + static_cast<int>(std::floor(v * 2.0f)) +
                   axis;
  const Vec3 albedo = pal.colors[((cell % 3) + 3) % 3];
  color = shade_lambert(albedo, n);
  return true;
}

}  // namespace detail

// Analytic Lambertian scene rendered from poses on a circle; the stand-in
// for the NeRF-synthetic objects at desk scale. Poses follow the (theta,
// phi) convention of circle_pose; background is white.
inline Scene generate_toy_scene(ToyKind kind, int n_views, int resolution, Rng& rng,
                                float phi_deg = -26.0f, float radius = 4.0f) {
  if (n_views < 2) detail::fail_op("generate_toy_scene", "need at least 2 views");
  if (resolution < 4) detail::fail_op("generate_toy_scene", "resolution too small");
  Scene scene;
  const detail::ToyPalette pal = detail::toy_palette(rng);
  for (int v = 0; v < n_views; ++v) {
    const float theta = 360.0f * static_cast<float>(v) / static_cast<float>(n_views);
    Frame frame;
    frame.split = "train";
    frame.name = "toy_" + std::to_string(v);
    frame.pose = circle_pose(theta, phi_deg, radius, scene.camera_angle_x);
    frame.image = Tensor({3, resolution, resolution});
    const std::size_t plane = static_cast<std::size_t>(resolution) * resolution;
    for (int y = 0; y < resolution; ++y) {
      for (int x = 0; x < resolution; ++x) {
        Vec3 o, d;
        pinhole_ray(frame.pose, static_cast<float>(x), static_cast<float>(y), resolution,
                    resolution, o, d);
        Vec3 color{1.0f, 1.0f, 1.0f};  // white background
        if (kind == ToyKind::kSphere)
          detail::trace_sphere(o, d, pal, color);
        else
          detail::trace_cube(o, d, pal, color);
        const std::size_t i = static_cast<std::size_t>(y) * resolution + x;
        frame.image[i] = color.x;
        frame.image[plane + i] = color.y;
        frame.image[2 * plane + i] = color.z;
      }
    }
    scene.frames.push_back(std::move(frame));
  }
  return scene;
}

// Procedural textured images (gradients plus simple shapes) used as the
// coupling-network training corpus at desk scale.
inline Tensor generate_texture_image(int resolution, Rng& rng) {
  Tensor img({3, resolution, resolution});
  const std::size_t plane = static_cast<std::size_t>(resolution) * resolution;
  const Vec3 c0{rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f)};
  const Vec3 c1{rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f)};
  const float angle = rng.uniform(0.0f, 6.2831853f);
  const float gx = std::cos(angle), gy = std::sin(angle);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const float u = static_cast<float>(x) / static_cast<float>(resolution - 1);
      const float v = static_cast<float>(y) / static_cast<float>(resolution - 1);
      const float t = std::clamp(0.5f + 0.5f * (gx * (u - 0.5f) + gy * (v - 0.5f)) * 2.0f, 0.0f, 1.0f);
      const Vec3 c = c0 * (1.0f - t) + c1 * t;
      const std::size_t i = static_cast<std::size_t>(y) * resolution + x;
      img[i] = c.x;
      img[plane + i] = c.y;
      img[2 * plane + i] = c.z;
    }
  }
  const int n_shapes = 2 + static_cast<int>(rng.uniform_int(3));
  for (int s = 0; s < n_shapes; ++s) {
    const Vec3 col{rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f), rng.uniform(0.05f, 0.95f)};
    const float cx = rng.uniform(0.15f, 0.85f), cy = rng.uniform(0.15f, 0.85f);
    const float rad = rng.uniform(0.08f, 0.3f);
    const bool ring = rng.uniform() < 0.4f;
    for (int y = 0; y < resolution; ++y) {
      for (int x = 0; x < resolution; ++x) {
        const float u = static_cast<float>(x) / static_cast<float>(resolution - 1) - cx;
        const float v = static_cast<float>(y) / static_cast<float>(resolution - 1) - cy;
        const float dist = std::sqrt(u * u + v * v);
        const bool inside = ring ? std::fabs(dist - rad) < rad * 0.25f : dist < rad;
        if (!inside) continue;
        const std::size_t i = static_cast<std::size_t>(y) * resolution + x;
        img[i] = col.x;
        img[plane + i] = col.y;
        img[2 * plane + i] = col.z;
      }
    }
  }
  return img;
}

inline std::vector<Tensor> generate_texture_corpus(int count, int resolution, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_texture_image(resolution, rng));
  return out;
}

// Deterministic grayscale mark (smooth rings crossed by a diagonal band)
// replicated across channels; the default watermark payload. Edges are
// antialiased: hard binary transitions alias and are needlessly hostile to
// embedding at desk scale.
inline Tensor make_default_watermark(int resolution) {
  Tensor img({3, resolution, resolution});
  const std::size_t plane = static_cast<std::size_t>(resolution) * resolution;
  const float pi = 3.14159265358979323846f;
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const float u = static_cast<float>(x) / static_cast<float>(resolution - 1) - 0.5f;
      const float v = static_cast<float>(y) / static_cast<float>(resolution - 1) - 0.5f;
      const float dist = std::sqrt(u * u + v * v);
      float value = 0.525f + 0.4f * std::sin(dist * 11.0f * pi);
      const float band = (u + v) / 0.085f;
      if (std::fabs(band) < 1.0f) {
        const float blend = 0.5f * (1.0f + std::cos(band * pi));  // 1 at center, 0 at edge
        value = value + blend * (1.0f - 2.0f * value) * 0.8f;
      }
      const std::size_t i = static_cast<std::size_t>(y) * resolution + x;
      img[i] = img[plane + i] = img[2 * plane + i] = value;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
  std::map<std::string, std::string> extra;
};

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct ByteReader {
  const std::uint8_t* p;
  const std::uint8_t* end;
  const std::string& path;

  void need(std::size_t n) const {
    if (p + n > end) throw std::runtime_error("load_checkpoint: truncated file " + path);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
};

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::unordered_map<std::string, Tensor>& tensors,
                            const CheckpointMeta& meta) {
  std::vector<std::uint8_t> payload;
  detail::put_u32(payload, detail::kCheckpointVersion);
  detail::put_u64(payload, meta.seed);
  detail::put_u64(payload, meta.step);
  detail::put_u64(payload, meta.config_hash);
  detail::put_u32(payload, static_cast<std::uint32_t>(meta.extra.size()));
  for (const auto& [k, v] : meta.extra) {
    detail::put_str(payload, k);
    detail::put_str(payload, v);
  }

  std::vector<std::string> names;
  names.reserve(tensors.size());
  for (const auto& [name, t] : tensors) names.push_back(name);
  std::sort(names.begin(), names.end());  // byte-stable output

  detail::put_u32(payload, static_cast<std::uint32_t>(names.size()));
  for (const std::string& name : names) {
    const Tensor& t = tensors.at(name);
    detail::put_str(payload, name);
    detail::put_u32(payload, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(payload, static_cast<std::uint32_t>(d));
    const std::size_t bytes = t.size() * sizeof(float);
    const std::size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, t.ptr(), bytes);
  }

  const std::uint32_t crc =
      static_cast<std::uint32_t>(::crc32(0L, payload.data(), static_cast<uInt>(payload.size())));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("NMRK", 4);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  std::uint8_t crc_bytes[4];
  for (int i = 0; i < 4; ++i) crc_bytes[i] = static_cast<std::uint8_t>(crc >> (8 * i));
  out.write(reinterpret_cast<const char*>(crc_bytes), 4);
  if (!out) throw std::runtime_error("save_checkpoint: short write to " + path);
}

inline std::pair<std::unordered_map<std::string, Tensor>, CheckpointMeta> load_checkpoint(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (file.size() < 12 || std::memcmp(file.data(), "NMRK", 4) != 0)
    throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path);

  const std::uint8_t* crc_p = file.data() + file.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(crc_p[i]) << (8 * i);
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, file.data() + 4, static_cast<uInt>(file.size() - 8)));
  if (crc != stored_crc)
    throw std::runtime_error("load_checkpoint: checksum mismatch in " + path);

  detail::ByteReader r{file.data() + 4, file.data() + file.size() - 4, path};
  const std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  CheckpointMeta meta;
  meta.seed = r.u64();
  meta.step = r.u64();
  meta.config_hash = r.u64();
  const std::uint32_t n_extra = r.u32();
  for (std::uint32_t i = 0; i < n_extra; ++i) {
    std::string k = r.str();
    meta.extra[k] = r.str();
  }

  std::unordered_map<std::string, Tensor> tensors;
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    Tensor t(shape);
    const std::size_t bytes = t.size() * sizeof(float);
    r.need(bytes);
    std::memcpy(t.ptr(), r.p, bytes);
    r.p += bytes;
    tensors.emplace(name, std::move(t));
  }
  return {std::move(tensors), std::move(meta)};
}

}  // namespace nerfmark
