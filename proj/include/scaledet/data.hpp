#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scaledet/core_types.hpp"
#include "scaledet/tensor.hpp"

namespace scaledet {

// Synthetic pinhole-camera scenes: shaded rectangles whose 2D extent follows
// exactly from their 3D size and depth, so the geometric depth relation holds
// by construction and every label is analytically exact.

struct ObjectClassSpec {
  std::string name = "Car";
  double h_min = 1.4, h_max = 1.8;  // meters
  double w_min = 1.5, w_max = 1.9;
  double l_min = 3.5, l_max = 4.5;
};

inline ObjectClassSpec car_class_spec() { return {}; }

inline ObjectClassSpec pedestrian_class_spec() {
  return {"Pedestrian", 1.6, 1.9, 0.5, 0.8, 0.5, 0.8};
}

inline ObjectClassSpec cyclist_class_spec() {
  return {"Cyclist", 1.6, 1.9, 0.5, 0.8, 1.6, 2.0};
}

struct SceneConfig {
  int image_width = 640;
  int image_height = 192;
  int min_objects = 1;
  int max_objects = 6;
  double z_min = 6.0;   // meters
  double z_max = 40.0;
  double focal = 700.0;  // pixels
  double noise = 0.08;   // background noise amplitude in [0,1] intensity
  bool resample_truncated = true;
  // Ground-plane placement: objects rest on a plane below the camera, so
  // vertical image position, depth, and scale co-vary and neighbors crowd
  // laterally the way parked cars do. Off: free-floating placement.
  bool ground_plane = true;
  double camera_height = 1.5;  // meters above the ground plane
  std::vector<ObjectClassSpec> classes = {car_class_spec()};
  std::uint64_t seed = 0;

  void validate() const {
    if (image_width % kFeatureStride || image_height % kFeatureStride)
      throw std::invalid_argument("SceneConfig: image size must be divisible by 16");
    if (z_min <= 0 || z_max <= z_min) throw std::invalid_argument("SceneConfig: bad depth range");
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("SceneConfig: bad object count range");
    if (classes.empty()) throw std::invalid_argument("SceneConfig: no object classes");
  }
};

struct SceneSample {
  int width = 0, height = 0;
  std::vector<std::uint8_t> image;  // grayscale, row-major
  std::vector<SceneLabel> labels;
  Tensor depth_gt;  // [H/16, W/16] meters; background cells carry the far value
  Calibration calib;
  double far_value = 0.0;
};

/// Pinhole projection of a 3D point (camera frame, Z forward) to pixels.
inline std::pair<double, double> project_center(const Calibration& calib, double x, double y,
                                                double z) {
  calib.validate();
  if (z <= 0) throw std::invalid_argument("project_center: depth must be positive");
  return {calib.focal_length * x / z + calib.cx, calib.focal_length * y / z + calib.cy};
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic scene generation: a pure function of (config, sample index).
inline SceneSample generate_scene(const SceneConfig& config, std::uint64_t sample_index) {
  config.validate();
  std::mt19937_64 rng(detail::splitmix64(config.seed ^ (sample_index * 0x51d9d374245b64b5ull)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SceneSample sample;
  sample.width = config.image_width;
  sample.height = config.image_height;
  sample.calib.focal_length = config.focal;
  sample.calib.cx = config.image_width / 2.0;
  sample.calib.cy = config.image_height / 2.0;
  sample.far_value = 2.0 * config.z_max;

  const int n_objects =
      config.min_objects +
      static_cast<int>(unit(rng) * (config.max_objects - config.min_objects + 1 - 1e-12));

  struct Placed {
    SceneLabel label;
    double intensity;
  };
  std::vector<Placed> placed;
  for (int obj = 0; obj < n_objects; ++obj) {
    const int cls = static_cast<int>(unit(rng) * config.classes.size());
    const auto& spec = config.classes[static_cast<std::size_t>(std::min<int>(cls, static_cast<int>(config.classes.size()) - 1))];
    SceneLabel label;
    label.class_id = std::min<int>(cls, static_cast<int>(config.classes.size()) - 1);
    bool inside = false;
    for (int attempt = 0; attempt < 64 && !inside; ++attempt) {
      const double z = config.z_min + unit(rng) * (config.z_max - config.z_min);
      const double h3d = spec.h_min + unit(rng) * (spec.h_max - spec.h_min);
      const double w3d = spec.w_min + unit(rng) * (spec.w_max - spec.w_min);
      const double l3d = spec.l_min + unit(rng) * (spec.l_max - spec.l_min);
      const double half_w = config.focal * w3d / z / 2.0;
      const double half_h = config.focal * h3d / z / 2.0;
      const double margin_x = half_w + 1.0, margin_y = half_h + 1.0;
      double cx_px, cy_px;
      if (config.ground_plane) {
        // Object rests on the plane y = camera_height below the camera; its
        // vertical image position follows from depth alone.
        cy_px = sample.calib.cy +
                config.focal * (config.camera_height - h3d / 2.0) / z;
        if (2.0 * margin_x < config.image_width && cy_px - margin_y >= 0.0 &&
            cy_px + margin_y <= config.image_height) {
          cx_px = margin_x + unit(rng) * (config.image_width - 2.0 * margin_x);
          inside = true;
        } else {
          cx_px = unit(rng) * config.image_width;
          inside = !config.resample_truncated;
        }
      } else if (2.0 * margin_x < config.image_width && 2.0 * margin_y < config.image_height) {
        cx_px = margin_x + unit(rng) * (config.image_width - 2.0 * margin_x);
        cy_px = margin_y + unit(rng) * (config.image_height - 2.0 * margin_y);
        inside = true;
      } else {
        cx_px = unit(rng) * config.image_width;
        cy_px = unit(rng) * config.image_height;
        inside = !config.resample_truncated;
      }
      if (inside || attempt == 63) {
        label.left = label.right = half_w;
        label.top = label.bottom = half_h;
        label.center_x = cx_px;
        label.center_y = cy_px;
        label.h3d = h3d;
        label.w3d = w3d;
        label.l3d = l3d;
        label.depth = z;
        label.alpha = (unit(rng) - 0.5) * M_PI;
        label.truncated = label.box_x1() < 0 || label.box_y1() < 0 ||
                          label.box_x2() > config.image_width ||
                          label.box_y2() > config.image_height;
        inside = true;
      }
    }
    label.validate();
    placed.push_back({label, 0.35 + 0.6 * unit(rng)});
  }

  // Painter's order: far objects first so near ones overwrite.
  std::stable_sort(placed.begin(), placed.end(),
                   [](const Placed& a, const Placed& b) { return a.label.depth > b.label.depth; });

  const int w = config.image_width, h = config.image_height;
  std::vector<double> canvas(static_cast<std::size_t>(w) * h);
  for (auto& v : canvas) v = config.noise * unit(rng);
  for (const auto& p : placed) {
    const int x1 = std::max(0, static_cast<int>(std::floor(p.label.box_x1())));
    const int x2 = std::min(w - 1, static_cast<int>(std::ceil(p.label.box_x2())) - 1);
    const int y1 = std::max(0, static_cast<int>(std::floor(p.label.box_y1())));
    const int y2 = std::min(h - 1, static_cast<int>(std::ceil(p.label.box_y2())) - 1);
    for (int y = y1; y <= y2; ++y) {
      const double shade = (y2 > y1) ? 1.0 - 0.25 * (y - y1) / static_cast<double>(y2 - y1) : 1.0;
      for (int x = x1; x <= x2; ++x) {
        canvas[static_cast<std::size_t>(y) * w + x] = std::min(1.0, p.intensity * shade);
      }
    }
  }
  sample.image.resize(canvas.size());
  for (std::size_t i = 0; i < canvas.size(); ++i)
    sample.image[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));

  // Dense ground-truth depth on the stride-16 grid: nearest covering object
  // at each cell center, far value elsewhere.
  const int gh = h / kFeatureStride, gw = w / kFeatureStride;
  sample.depth_gt = Tensor::full({gh, gw}, sample.far_value);
  for (int ci = 0; ci < gh; ++ci) {
    for (int cj = 0; cj < gw; ++cj) {
      const double px = cj * kFeatureStride + kFeatureStride / 2.0 - 0.5;
      const double py = ci * kFeatureStride + kFeatureStride / 2.0 - 0.5;
      double best = sample.far_value;
      for (const auto& p : placed) {
        if (px >= p.label.box_x1() && px <= p.label.box_x2() && py >= p.label.box_y1() &&
            py <= p.label.box_y2()) {
          best = std::min(best, p.label.depth);
        }
      }
      sample.depth_gt.at(ci, cj) = best;
    }
  }

  sample.labels.reserve(placed.size());
  for (const auto& p : placed) sample.labels.push_back(p.label);
  return sample;
}

// ---------------------------------------------------------------------------
// KITTI-format labels (15-field object lines)
// ---------------------------------------------------------------------------

/// Parses KITTI object-label text. Boxes are converted to (l, r, t, b) around
/// the box center, which stands in for the projected 3D center. `DontCare`
/// entries are skipped; unknown types are skipped and counted.
inline std::vector<SceneLabel> load_kitti_labels(const std::string& text,
                                                 const std::vector<std::string>& class_names,
                                                 int* skipped_unknown = nullptr) {
  std::vector<SceneLabel> labels;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string type;
    double trunc, occ, alpha, x1, y1, x2, y2, dh, dw, dl, lx, ly, lz, ry;
    if (!(ls >> type >> trunc >> occ >> alpha >> x1 >> y1 >> x2 >> y2 >> dh >> dw >> dl >> lx >>
          ly >> lz >> ry)) {
      throw std::runtime_error("load_kitti_labels: malformed line " + std::to_string(line_no));
    }
    if (type == "DontCare") continue;
    const auto it = std::find(class_names.begin(), class_names.end(), type);
    if (it == class_names.end()) {
      if (skipped_unknown) ++(*skipped_unknown);
      continue;
    }
    SceneLabel label;
    label.class_id = static_cast<int>(it - class_names.begin());
    label.center_x = (x1 + x2) / 2.0;
    label.center_y = (y1 + y2) / 2.0;
    label.left = label.right = (x2 - x1) / 2.0;
    label.top = label.bottom = (y2 - y1) / 2.0;
    label.h3d = dh;
    label.w3d = dw;
    label.l3d = dl;
    label.alpha = alpha;
    label.depth = lz;
    label.truncated = trunc > 0.0;
    labels.push_back(label);
  }
  return labels;
}

/// Serializes labels in the KITTI 15-field layout. The 3D location is
/// recovered from the projected center via the calibration; Y follows the
/// bottom-face convention.
inline std::string kitti_label_text(const std::vector<SceneLabel>& labels,
                                    const Calibration& calib,
                                    const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out.precision(12);
  for (const auto& label : labels) {
    const std::string& name =
        class_names.at(static_cast<std::size_t>(label.class_id));
    const double x3d = (label.center_x - calib.cx) * label.depth / calib.focal_length;
    const double y3d =
        (label.center_y - calib.cy) * label.depth / calib.focal_length + label.h3d / 2.0;
    out << name << ' ' << (label.truncated ? 1.0 : 0.0) << " 0 " << label.alpha << ' '
        << label.box_x1() << ' ' << label.box_y1() << ' ' << label.box_x2() << ' '
        << label.box_y2() << ' ' << label.h3d << ' ' << label.w3d << ' ' << label.l3d << ' '
        << x3d << ' ' << y3d << ' ' << label.depth << ' ' << label.alpha << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// On-disk dataset: PGM images, KITTI labels, raw depth maps, manifest
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                      int width, int height) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path.string());
  f << "P5\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width,
                                          int& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path.string());
  std::string magic;
  int maxval;
  f >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255) throw std::runtime_error("read_pgm: unsupported format");
  f.get();  // single whitespace after header
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  f.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error("read_pgm: truncated " + path.string());
  return pixels;
}

inline void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
                      int width, int height) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path.string());
  f << "P6\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

inline constexpr char kDepthMagic[4] = {'S', 'D', 'D', 'M'};

/// Raw depth-map container: magic, version, dims, element width, then
/// row-major doubles.
inline void write_depth_map(const std::filesystem::path& path, const Tensor& depth) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_depth_map: cannot open " + path.string());
  const std::uint32_t version = 1, rows = static_cast<std::uint32_t>(depth.dim(0)),
                      cols = static_cast<std::uint32_t>(depth.dim(1)), elem = 8;
  f.write(kDepthMagic, 4);
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  f.write(reinterpret_cast<const char*>(&elem), 4);
  f.write(reinterpret_cast<const char*>(depth.data()),
          static_cast<std::streamsize>(sizeof(double)) * depth.size());
}

inline Tensor read_depth_map(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_depth_map: cannot open " + path.string());
  char magic[4];
  std::uint32_t version, rows, cols, elem;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  f.read(reinterpret_cast<char*>(&elem), 4);
  if (!f || std::memcmp(magic, kDepthMagic, 4) != 0 || version != 1 || elem != 8)
    throw std::runtime_error("read_depth_map: bad header in " + path.string());
  Tensor depth({static_cast<int>(rows), static_cast<int>(cols)});
  f.read(reinterpret_cast<char*>(depth.data()),
         static_cast<std::streamsize>(sizeof(double)) * depth.size());
  if (!f) throw std::runtime_error("read_depth_map: truncated " + path.string());
  return depth;
}

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

inline std::vector<std::string> class_names_of(const SceneConfig& config) {
  std::vector<std::string> names;
  names.reserve(config.classes.size());
  for (const auto& c : config.classes) names.push_back(c.name);
  return names;
}

/// Writes `count` generated samples into a split directory. Layout:
/// manifest.txt, calib.txt, <id>.pgm / <id>.txt / <id>.dmap per sample.
inline void write_dataset(const std::filesystem::path& dir, const SceneConfig& config, int count,
                          std::uint64_t index_offset = 0) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("write_dataset: cannot open manifest");
  const auto names = class_names_of(config);
  Calibration calib;
  for (int i = 0; i < count; ++i) {
    SceneSample sample = generate_scene(config, index_offset + static_cast<std::uint64_t>(i));
    const std::string id = sample_id(i);
    write_pgm(dir / (id + ".pgm"), sample.image, sample.width, sample.height);
    std::ofstream lf(dir / (id + ".txt"));
    lf << kitti_label_text(sample.labels, sample.calib, names);
    write_depth_map(dir / (id + ".dmap"), sample.depth_gt);
    manifest << id << '\n';
    calib = sample.calib;
  }
  std::ofstream cf(dir / "calib.txt");
  cf.precision(12);
  cf << calib.focal_length << ' ' << calib.cx << ' ' << calib.cy << '\n';
  std::ofstream clf(dir / "classes.txt");
  for (const auto& name : names) clf << name << '\n';
}

struct LoadedDataset {
  std::vector<SceneSample> samples;
  std::vector<std::string> ids;
  Calibration calib;
};

/// Class names recorded with a dataset, in id order.
inline std::vector<std::string> read_dataset_classes(const std::filesystem::path& dir) {
  std::ifstream f(dir / "classes.txt");
  if (!f) return {"Car", "Pedestrian", "Cyclist"};
  std::vector<std::string> names;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) names.push_back(line);
  return names;
}

inline LoadedDataset load_dataset(const std::filesystem::path& dir,
                                  const std::vector<std::string>& class_names) {
  LoadedDataset ds;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("load_dataset: missing manifest in " + dir.string());
  std::ifstream cf(dir / "calib.txt");
  if (!cf || !(cf >> ds.calib.focal_length >> ds.calib.cx >> ds.calib.cy))
    throw std::runtime_error("load_dataset: missing calib in " + dir.string());
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    SceneSample sample;
    sample.image = read_pgm(dir / (id + ".pgm"), sample.width, sample.height);
    std::ifstream lf(dir / (id + ".txt"));
    std::stringstream buf;
    buf << lf.rdbuf();
    sample.labels = load_kitti_labels(buf.str(), class_names);
    sample.depth_gt = read_depth_map(dir / (id + ".dmap"));
    sample.calib = ds.calib;
    ds.samples.push_back(std::move(sample));
    ds.ids.push_back(id);
  }
  return ds;
}

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  return load_dataset(dir, read_dataset_classes(dir));
}

/// Fraction of labels whose ground-truth scale falls outside [min, max] of
/// the preset scales; the labels themselves are never clipped.
inline double out_of_range_scale_fraction(const std::vector<SceneSample>& samples,
                                          const ScaleSet& scales) {
  long total = 0, out = 0;
  const double lo = scales.scales.front(), hi = scales.scales.back();
  for (const auto& s : samples) {
    for (const auto& label : s.labels) {
      ++total;
      const double cells = ground_truth_scale(label);
      if (cells < lo || cells > hi) ++out;
    }
  }
  return total ? static_cast<double>(out) / static_cast<double>(total) : 0.0;
}

}  // namespace scaledet
