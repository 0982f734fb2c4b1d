#include "disco3d/eval/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace disco3d::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<FILE, FileCloser>;

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

json vec3(const worldgen::Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

worldgen::Vec3 vec3_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument(std::string("scene json: ") + what + " must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* where) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw std::invalid_argument(std::string(where) + ": unknown key '" + key + "'");
}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) throw std::invalid_argument("write_png: expected [H, W, 3]");
  ensure_parent(path);
  const auto H = static_cast<png_uint_32>(image.dim(0)), W = static_cast<png_uint_32>(image.dim(1));
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng initialisation failed");
  }
  std::vector<png_byte> rows(static_cast<size_t>(H) * W * 3);
  for (size_t k = 0; k < rows.size(); ++k)
    rows[k] = static_cast<png_byte>(std::lround(std::clamp(image[static_cast<int64_t>(k)], 0.0, 1.0) * 255.0));
  std::vector<png_bytep> ptrs(H);
  for (png_uint_32 y = 0; y < H; ++y) ptrs[y] = rows.data() + static_cast<size_t>(y) * W * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error writing " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng initialisation failed");
  }
  std::vector<png_byte> rows;
  std::vector<png_bytep> ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng error reading " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const png_uint_32 H = png_get_image_height(png, info), W = png_get_image_width(png, info);
  rows.resize(static_cast<size_t>(H) * W * 3);
  ptrs.resize(H);
  for (png_uint_32 y = 0; y < H; ++y) ptrs[y] = rows.data() + static_cast<size_t>(y) * W * 3;
  png_read_image(png, ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Tensor out({static_cast<int64_t>(H), static_cast<int64_t>(W), 3});
  for (size_t k = 0; k < rows.size(); ++k) out[static_cast<int64_t>(k)] = rows[k] / 255.0;
  return out;
}

void write_depth(const std::string& path, const Tensor& depth) {
  if (depth.ndim() != 2) throw std::invalid_argument("write_depth: expected [H, W]");
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_depth: cannot open " + path);
  const uint32_t header[3] = {1, static_cast<uint32_t>(depth.dim(0)), static_cast<uint32_t>(depth.dim(1))};
  out.write("DC3D", 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> data(depth.vec().begin(), depth.vec().end());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_depth: write failed for " + path);
}

Tensor read_depth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_depth: cannot open " + path);
  char magic[4];
  uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, "DC3D", 4) != 0) throw std::runtime_error("read_depth: bad magic in " + path);
  if (header[0] != 1) throw std::runtime_error("read_depth: unsupported version");
  if (static_cast<uint64_t>(header[1]) * header[2] > (1u << 26)) throw std::runtime_error("read_depth: implausible size");
  std::vector<float> data(static_cast<size_t>(header[1]) * header[2]);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw std::runtime_error("read_depth: truncated file " + path);
  return Tensor({header[1], header[2]}, std::vector<double>(data.begin(), data.end()));
}

void write_scene_json(const std::string& path, const worldgen::Scene& scene, const worldgen::CameraTrajectory& traj) {
  json prims = json::array();
  for (const auto& p : scene.primitives) {
    prims.push_back({{"kind", worldgen::to_string(p.kind)},
                     {"center", vec3(p.center)},
                     {"size", vec3(p.size)},
                     {"yaw", p.yaw},
                     {"color", vec3(p.material.color)},
                     {"color2", vec3(p.material.color2)},
                     {"stripe_frequency", p.material.stripe_frequency},
                     {"tag", p.tag}});
  }
  json poses = json::array();
  for (const auto& pose : traj.poses) {
    json R = json::array();
    for (int r = 0; r < 3; ++r) R.push_back(vec3(pose.R.row(r).transpose()));
    poses.push_back({{"R", R}, {"t", vec3(pose.t)}});
  }
  const auto& K = traj.intrinsics;
  const json j{{"version", 1},
               {"seed", scene.seed},
               {"primitives", prims},
               {"background", vec3(scene.background)},
               {"poses", poses},
               {"intrinsics", {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}}}};
  write_text(path, j.dump(2) + "\n");
}

SceneFile read_scene_json(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("scene json: ") + e.what());
  }
  try {
    if (!j.is_object() || !j.contains("version")) throw std::invalid_argument("scene json: missing version");
    if (j["version"] != 1) throw std::invalid_argument("scene json: unsupported version");
    reject_unknown(j, {"version", "seed", "primitives", "background", "poses", "intrinsics"}, "scene json");
    SceneFile out;
    out.scene.seed = j.at("seed").get<uint64_t>();
    out.scene.background = vec3_from(j.at("background"), "background");
    for (const auto& pj : j.at("primitives")) {
      reject_unknown(pj, {"kind", "center", "size", "yaw", "color", "color2", "stripe_frequency", "tag"}, "primitive");
      worldgen::Primitive p;
      p.kind = worldgen::primitive_kind_from_string(pj.at("kind").get<std::string>());
      p.center = vec3_from(pj.at("center"), "center");
      p.size = vec3_from(pj.at("size"), "size");
      p.yaw = pj.value("yaw", 0.0);
      p.material.color = vec3_from(pj.at("color"), "color");
      if (pj.contains("color2")) p.material.color2 = vec3_from(pj["color2"], "color2");
      p.material.stripe_frequency = pj.value("stripe_frequency", 0.0);
      p.tag = pj.value("tag", 0);
      out.scene.primitives.push_back(p);
    }
    for (const auto& pj : j.at("poses")) {
      reject_unknown(pj, {"R", "t"}, "pose");
      worldgen::Pose pose;
      for (int r = 0; r < 3; ++r) pose.R.row(r) = vec3_from(pj.at("R").at(r), "R row").transpose();
      pose.t = vec3_from(pj.at("t"), "t");
      out.traj.poses.push_back(pose);
    }
    const auto& kj = j.at("intrinsics");
    reject_unknown(kj, {"fx", "fy", "cx", "cy"}, "intrinsics");
    out.traj.intrinsics = {kj.at("fx").get<double>(), kj.at("fy").get<double>(), kj.at("cx").get<double>(),
                           kj.at("cy").get<double>()};
    out.traj.validate();
    return out;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("scene json: ") + e.what());
  }
}

void write_viewset(const std::string& dir, const worldgen::ViewSet& views) {
  const int n = views.views(), H = views.height(), W = views.width();
  json frames = json::array(), depths = json::array();
  for (int v = 0; v < n; ++v) {
    char name[32];
    std::snprintf(name, sizeof(name), "%03d", v);
    const std::string frame = std::string("frames/") + name + ".png";
    const std::string depth = std::string("depth/") + name + ".dc3d";
    write_png(dir + "/" + frame, views.image(v));
    Tensor d({H, W});
    std::copy(views.depths.data() + static_cast<int64_t>(v) * H * W,
              views.depths.data() + static_cast<int64_t>(v + 1) * H * W, d.data());
    write_depth(dir + "/" + depth, d);
    frames.push_back(frame);
    depths.push_back(depth);
  }
  const json manifest{{"version", 1},  {"views", n},           {"height", H},           {"width", W},
                      {"frames", frames}, {"depths", depths}, {"ref_index", views.ref_index},
                      {"clips", views.clips}, {"background", vec3(views.background)}};
  write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

void write_grid(const std::string& path, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("write_grid: no rows");
  const int64_t H = rows[0].dim(1), W = rows[0].dim(2);
  int64_t cols = 0;
  for (const auto& r : rows) {
    if (r.ndim() != 4 || r.dim(1) != H || r.dim(2) != W || r.dim(3) != 3)
      throw std::invalid_argument("write_grid: rows must be [N, H, W, 3] with equal H, W");
    cols = std::max(cols, r.dim(0));
  }
  const int64_t GH = static_cast<int64_t>(rows.size()) * (H + 1) - 1, GW = cols * (W + 1) - 1;
  Tensor grid({GH, GW, 3}, 1.0);
  for (size_t r = 0; r < rows.size(); ++r)
    for (int64_t c = 0; c < rows[r].dim(0); ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          for (int k = 0; k < 3; ++k)
            grid[((static_cast<int64_t>(r) * (H + 1) + y) * GW + c * (W + 1) + x) * 3 + k] =
                rows[r][((c * H + y) * W + x) * 3 + k];
  write_png(path, grid);
}

void write_text(const std::string& path, const std::string& content) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace disco3d::eval
