#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaledet/core_types.hpp"
#include "scaledet/data.hpp"
#include "scaledet/graph.hpp"
#include "scaledet/nn.hpp"
#include "scaledet/ssda.hpp"

namespace scaledet {

struct ModelConfig {
  int channels = 64;       // C
  int heads = 8;           // M
  int decoder_blocks = 3;
  int queries = 50;        // N
  int keypoints = 4;       // K per head
  std::vector<int> scales = {1, 3, 5, 7, 9};
  int vertical_expansion = 1;
  int image_width = 640;
  int image_height = 192;
  int num_classes = 1;
  int encoder_blocks = 2;
  bool use_ssda = true;             // false: plain deformable attention layer
  bool shared_head_offsets = false;
  std::uint64_t seed = 0;           // parameter initialization seed

  int grid_width() const { return image_width / kFeatureStride; }
  int grid_height() const { return image_height / kFeatureStride; }
  int ffn_hidden() const { return 2 * channels; }
  ScaleSet scale_set() const { return ScaleSet(scales, vertical_expansion); }

  void validate() const {
    if (channels % heads != 0) throw std::invalid_argument("ModelConfig: C not divisible by M");
    if (channels % 4 != 0) throw std::invalid_argument("ModelConfig: C must be divisible by 4");
    if (image_width % kFeatureStride || image_height % kFeatureStride)
      throw std::invalid_argument("ModelConfig: image size must be divisible by 16");
    if (queries < 1 || decoder_blocks < 1 || keypoints < 1 || encoder_blocks < 1)
      throw std::invalid_argument("ModelConfig: counts must be positive");
    if (use_ssda) ScaleSet(scales, vertical_expansion).validate();
  }

  std::string to_text() const {
    std::ostringstream o;
    o << "channels=" << channels << "\nheads=" << heads << "\ndecoder_blocks=" << decoder_blocks
      << "\nqueries=" << queries << "\nkeypoints=" << keypoints << "\nscales=";
    for (std::size_t i = 0; i < scales.size(); ++i) o << (i ? "," : "") << scales[i];
    o << "\nvertical_expansion=" << vertical_expansion << "\nimage_width=" << image_width
      << "\nimage_height=" << image_height << "\nnum_classes=" << num_classes
      << "\nencoder_blocks=" << encoder_blocks << "\nuse_ssda=" << (use_ssda ? 1 : 0)
      << "\nshared_head_offsets=" << (shared_head_offsets ? 1 : 0) << "\nseed=" << seed << "\n";
    return o.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("ModelConfig: bad line " + line);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "channels") cfg.channels = std::stoi(value);
      else if (key == "heads") cfg.heads = std::stoi(value);
      else if (key == "decoder_blocks") cfg.decoder_blocks = std::stoi(value);
      else if (key == "queries") cfg.queries = std::stoi(value);
      else if (key == "keypoints") cfg.keypoints = std::stoi(value);
      else if (key == "scales") {
        cfg.scales.clear();
        std::istringstream vs(value);
        std::string tok;
        while (std::getline(vs, tok, ',')) cfg.scales.push_back(std::stoi(tok));
      } else if (key == "vertical_expansion") cfg.vertical_expansion = std::stoi(value);
      else if (key == "image_width") cfg.image_width = std::stoi(value);
      else if (key == "image_height") cfg.image_height = std::stoi(value);
      else if (key == "num_classes") cfg.num_classes = std::stoi(value);
      else if (key == "encoder_blocks") cfg.encoder_blocks = std::stoi(value);
      else if (key == "use_ssda") cfg.use_ssda = value != "0";
      else if (key == "shared_head_offsets") cfg.shared_head_offsets = value != "0";
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw std::runtime_error("ModelConfig: unknown key " + key);
    }
    return cfg;
  }
};

/// Per-block head outputs. Box quantities are normalized to the image extent;
/// depths are meters.
struct BlockPredictions {
  Var features;      // [N, C]
  Var class_logits;  // [N, num_classes]
  Var lrtb;          // [N, 4] >= 0
  Var center;        // [N, 2] in [0,1]
  Var dims;          // [N, 3] > 0
  Var angle;         // [N, 2] raw (sin, cos)
  Var d_reg;         // [N] > 0
  Var log_sigma;     // [N]
  Var scale_probs;   // [N, N_l]; null when the layer runs scale-unaware
  KeypointPrediction keypoints;
};

struct ForwardResult {
  Var visual_map;  // [gh, gw, C]
  Var depth_map;   // [gh, gw, C]
  Var dense_depth; // [gh, gw] meters
  Var qx, qy;      // [N] normalized query positions
  std::vector<BlockPredictions> blocks;

  const BlockPredictions& final_block() const { return blocks.back(); }
};

/// Bilinear read of the dense depth map at a pixel-space center; the grid is
/// indexed at center / 16 in cell-center coordinates.
inline Var read_dmap(const Var& dense_depth, const Var& center_x_px, const Var& center_y_px) {
  const int gh = dense_depth->value.dim(0), gw = dense_depth->value.dim(1);
  Var grid = reshape(dense_depth, {gh, gw, 1});
  Var cx = add_scalar(scale(center_x_px, 1.0 / kFeatureStride), -0.5);
  Var cy = add_scalar(scale(center_y_px, 1.0 / kFeatureStride), -0.5);
  const int n = center_x_px->value.size();
  return reshape(bilinear_sample(grid, cx, cy), {n});
}

namespace detail {

struct ConvStage {
  Var weight, bias;
  int stride = 2;

  ConvStage() = default;
  ConvStage(ParamStore& store, const std::string& name, int cin, int cout, std::mt19937_64& rng) {
    weight = store.add(name + ".weight", xavier_uniform({3, 3, cin, cout}, 9 * cin, 9 * cout, rng));
    bias = store.add(name + ".bias", Tensor::zeros({cout}));
  }

  Var forward(const Var& x) const { return relu(conv2d(x, weight, bias, stride)); }
};

struct EncoderBlock {
  MultiHeadAttention attn;
  LayerNorm norm1, norm2;
  Mlp ffn;

  EncoderBlock() = default;
  EncoderBlock(ParamStore& store, const std::string& name, int dim, int heads, int hidden,
               std::mt19937_64& rng)
      : attn(store, name + ".attn", dim, heads, rng),
        norm1(store, name + ".norm1", dim),
        norm2(store, name + ".norm2", dim),
        ffn(store, name + ".ffn", dim, hidden, dim, rng) {}

  Var forward(const Var& x, const Var& pos) const {
    Var q = add(x, pos);
    Var y = norm1.forward(add(x, attn.forward(q, q, x)));
    return norm2.forward(add(y, ffn.forward(y)));
  }
};

struct DecoderBlock {
  MultiHeadAttention self_attn;
  LayerNorm norm1, norm2, norm3;
  Mlp ffn;
  SSDALayer ssda;

  DecoderBlock() = default;
  DecoderBlock(ParamStore& store, const std::string& name, const ModelConfig& cfg,
               std::mt19937_64& rng)
      : self_attn(store, name + ".self_attn", cfg.channels, cfg.heads, rng),
        norm1(store, name + ".norm1", cfg.channels),
        norm2(store, name + ".norm2", cfg.channels),
        norm3(store, name + ".norm3", cfg.channels),
        ffn(store, name + ".ffn", cfg.channels, cfg.ffn_hidden(), cfg.channels, rng),
        ssda(store, name + ".ssda", cfg.channels, cfg.heads, cfg.keypoints,
             cfg.use_ssda ? cfg.scale_set() : ScaleSet({1, 3}, 1), cfg.use_ssda,
             cfg.shared_head_offsets, rng) {}
};

}  // namespace detail

/// The end-to-end network: convolutional backbone stub (stride 16), visual
/// and depth self-attention encoders, a decoder of self-attention plus
/// scale-aware deformable attention blocks, and shared detection heads.
class Model {
 public:
  explicit Model(ModelConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed ^ 0xabcdef1234567ull);
    const int c = cfg_.channels;

    const int c1 = std::max(8, c / 8), c2 = std::max(8, c / 4), c3 = std::max(16, c / 2);
    stages_ = {detail::ConvStage(store_, "backbone.s1", 1, c1, rng),
               detail::ConvStage(store_, "backbone.s2", c1, c2, rng),
               detail::ConvStage(store_, "backbone.s3", c2, c3, rng),
               detail::ConvStage(store_, "backbone.s4", c3, c, rng)};

    for (int b = 0; b < cfg_.encoder_blocks; ++b) {
      visual_encoder_.emplace_back(store_, "venc.b" + std::to_string(b), c, cfg_.heads,
                                   cfg_.ffn_hidden(), rng);
      depth_encoder_.emplace_back(store_, "denc.b" + std::to_string(b), c, cfg_.heads,
                                  cfg_.ffn_hidden(), rng);
    }
    dense_depth_head_ = Linear(store_, "dense_depth", c, 1, rng);
    dense_depth_head_.bias->value[0] = std::log(20.0);  // start near mid-range depth

    query_features_ = store_.add("query.features", Tensor::uniform({cfg_.queries, c}, rng, -0.5, 0.5));
    query_pos_raw_ = store_.add("query.pos_raw", initial_positions());
    query_pos_embed_ = store_.add("query.pos_embed",
                                  Tensor::uniform({cfg_.queries, c}, rng, -0.5, 0.5));

    for (int b = 0; b < cfg_.decoder_blocks; ++b)
      decoder_.emplace_back(store_, "dec.b" + std::to_string(b), cfg_, rng);

    class_head_ = Linear(store_, "head.class", c, cfg_.num_classes, rng);
    // Focal-style prior so every query starts as a confident background.
    for (int i = 0; i < cfg_.num_classes; ++i)
      class_head_.bias->value[i] = -std::log((1.0 - 0.01) / 0.01);
    box_head_ = Mlp(store_, "head.box", c, c, 4, rng);
    center_head_ = Mlp(store_, "head.center", c, c, 2, rng);
    dims_head_ = Mlp(store_, "head.dims", c, c, 3, rng);
    angle_head_ = Mlp(store_, "head.angle", c, c, 2, rng);
    depth_head_ = Mlp(store_, "head.depth", c, c, 2, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Stride-16 feature extraction. Input [H, W, 1] in [0,1] intensity.
  Var backbone_forward(const Var& image) const {
    if (image->value.dim(0) % kFeatureStride || image->value.dim(1) % kFeatureStride)
      throw std::invalid_argument("backbone_forward: image dims must be divisible by 16");
    Var x = image;
    for (const auto& stage : stages_) x = stage.forward(x);
    return x;
  }

  struct EncodedMaps {
    Var visual;       // [gh, gw, C]
    Var depth;        // [gh, gw, C]
    Var dense_depth;  // [gh, gw] meters, strictly positive
  };

  /// Visual and depth encoders over the flattened base map, plus the dense
  /// depth prediction read off the depth embedding.
  EncodedMaps encoders_forward(const Var& base) const {
    const int gh = base->value.dim(0), gw = base->value.dim(1), c = base->value.dim(2);
    Var flat = reshape(base, {gh * gw, c});
    Var pos = constant(sinusoidal_position_encoding(gh, gw, c));
    Var v = flat, d = flat;
    for (const auto& block : visual_encoder_) v = block.forward(v, pos);
    for (const auto& block : depth_encoder_) d = block.forward(d, pos);
    EncodedMaps maps;
    maps.visual = reshape(v, {gh, gw, c});
    maps.depth = reshape(d, {gh, gw, c});
    maps.dense_depth = reshape(exp_op(dense_depth_head_.forward(d)), {gh, gw});
    return maps;
  }

  /// Decoder pass over prepared maps. Query features and positions are
  /// learned embeddings; each block runs self-attention, the deformable
  /// layer, and a feed-forward update, all with residual + layer norm.
  ForwardResult decoder_forward(const EncodedMaps& maps, bool training) const {
    ForwardResult result;
    result.visual_map = maps.visual;
    result.depth_map = maps.depth;
    result.dense_depth = maps.dense_depth;
    const int n = cfg_.queries;
    result.qx = reshape(sigmoid(slice_cols(query_pos_raw_, 0, 1)), {n});
    result.qy = reshape(sigmoid(slice_cols(query_pos_raw_, 1, 2)), {n});

    Var x = query_features_;
    for (const auto& block : decoder_) {
      Var q = add(x, query_pos_embed_);
      x = block.norm1.forward(add(x, block.self_attn.forward(q, q, x)));
      SSDAOutput ssda_out =
          ssda_forward(block.ssda, x, result.qx, result.qy, maps.visual, maps.depth, training);
      x = block.norm2.forward(ssda_out.updated);
      x = block.norm3.forward(add(x, block.ffn.forward(x)));
      result.blocks.push_back(apply_heads(x, ssda_out));
    }
    return result;
  }

  ForwardResult forward(const SceneSample& sample, bool training) const {
    return decoder_forward(encoders_forward(backbone_forward(image_to_var(sample))), training);
  }

  /// Converts a stored 8-bit image to the [H, W, 1] float input.
  static Var image_to_var(const SceneSample& sample) {
    Tensor img({sample.height, sample.width, 1});
    for (int i = 0; i < img.size(); ++i)
      img[i] = sample.image[static_cast<std::size_t>(i)] / 255.0;
    return constant(std::move(img));
  }

  // -------------------------------------------------------------------------
  // Checkpoints
  // -------------------------------------------------------------------------

  static constexpr char kCheckpointMagic[4] = {'S', 'C', 'D', 'K'};
  static constexpr std::uint32_t kCheckpointVersion = 1;

  void save_checkpoint(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    f.write(kCheckpointMagic, 4);
    write_u32(f, kCheckpointVersion);
    const std::string cfg = cfg_.to_text();
    write_u32(f, static_cast<std::uint32_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_u32(f, static_cast<std::uint32_t>(store_.params().size()));
    for (const auto& [name, p] : store_.params()) write_tensor(f, name, p->value);
    write_u32(f, static_cast<std::uint32_t>(store_.buffers().size()));
    for (const auto& [name, b] : store_.buffers()) write_tensor(f, name, *b);
  }

  static Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
      throw std::runtime_error("load_checkpoint: bad magic");
    if (read_u32(f) != kCheckpointVersion)
      throw std::runtime_error("load_checkpoint: unsupported version");
    std::string cfg_text(read_u32(f), '\0');
    f.read(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    Model model(ModelConfig::from_text(cfg_text));

    std::map<std::string, Var> by_name;
    for (const auto& [name, p] : model.store_.params()) by_name[name] = p;
    const std::uint32_t n_params = read_u32(f);
    for (std::uint32_t i = 0; i < n_params; ++i) {
      auto [name, tensor] = read_tensor(f);
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw std::runtime_error("load_checkpoint: unknown parameter " + name);
      if (!(it->second->value.shape() == tensor.shape()))
        throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
      it->second->value = std::move(tensor);
    }
    std::map<std::string, std::shared_ptr<Tensor>> buf_by_name;
    for (const auto& [name, b] : model.store_.buffers()) buf_by_name[name] = b;
    const std::uint32_t n_buffers = read_u32(f);
    for (std::uint32_t i = 0; i < n_buffers; ++i) {
      auto [name, tensor] = read_tensor(f);
      auto it = buf_by_name.find(name);
      if (it == buf_by_name.end())
        throw std::runtime_error("load_checkpoint: unknown buffer " + name);
      if (!(it->second->shape() == tensor.shape()))
        throw std::runtime_error("load_checkpoint: buffer shape mismatch for " + name);
      *it->second = std::move(tensor);
    }
    return model;
  }

 private:
  Tensor initial_positions() const {
    // Uniform grid in raw logit space, aspect-matched to the feature grid.
    const int n = cfg_.queries;
    const double aspect = static_cast<double>(cfg_.grid_width()) / cfg_.grid_height();
    int nx = static_cast<int>(std::ceil(std::sqrt(n * aspect)));
    nx = std::max(1, nx);
    const int ny = (n + nx - 1) / nx;
    Tensor raw({n, 2});
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    int idx = 0;
    for (int iy = 0; iy < ny && idx < n; ++iy) {
      for (int ix = 0; ix < nx && idx < n; ++ix, ++idx) {
        raw.at(idx, 0) = logit((ix + 0.5) / nx);
        raw.at(idx, 1) = logit((iy + 0.5) / ny);
      }
    }
    return raw;
  }

  BlockPredictions apply_heads(const Var& x, const SSDAOutput& ssda_out) const {
    const int n = cfg_.queries;
    BlockPredictions p;
    p.features = x;
    p.class_logits = class_head_.forward(x);
    p.lrtb = softplus(add_scalar(box_head_.forward(x), -3.0));
    // Centers are deltas on the query's reference point in logit space, the
    // usual deformable-decoder parameterization.
    p.center = sigmoid(add(center_head_.forward(x), query_pos_raw_));
    p.dims = softplus(add_scalar(dims_head_.forward(x), 1.0));
    p.angle = angle_head_.forward(x);
    Var depth_out = depth_head_.forward(x);
    p.d_reg = reshape(softplus(add_scalar(slice_cols(depth_out, 0, 1), 15.0)), {n});
    p.log_sigma = reshape(slice_cols(depth_out, 1, 2), {n});
    p.scale_probs = ssda_out.scale_probs;
    p.keypoints = ssda_out.keypoints;
    return p;
  }

  static void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  static std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("checkpoint: truncated");
    return v;
  }
  static void write_tensor(std::ofstream& f, const std::string& name, const Tensor& t) {
    write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<std::uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) write_u32(f, static_cast<std::uint32_t>(t.dim(d)));
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double)) * t.size());
  }
  static std::pair<std::string, Tensor> read_tensor(std::ifstream& f) {
    std::string name(read_u32(f), '\0');
    f.read(name.data(), static_cast<std::streamsize>(name.size()));
    const std::uint32_t ndim = read_u32(f);
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(read_u32(f)));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double)) * t.size());
    if (!f) throw std::runtime_error("checkpoint: truncated tensor " + name);
    return {std::move(name), std::move(t)};
  }

  ModelConfig cfg_;
  ParamStore store_;
  std::vector<detail::ConvStage> stages_;
  std::vector<detail::EncoderBlock> visual_encoder_, depth_encoder_;
  Linear dense_depth_head_;
  Var query_features_, query_pos_raw_, query_pos_embed_;
  std::vector<detail::DecoderBlock> decoder_;
  Linear class_head_;
  Mlp box_head_, center_head_, dims_head_, angle_head_, depth_head_;
};

}  // namespace scaledet
