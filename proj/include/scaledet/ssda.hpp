#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaledet/core_types.hpp"
#include "scaledet/graph.hpp"
#include "scaledet/nn.hpp"

namespace scaledet {

// Scale-aware deformable attention. Each decoder query extracts local visual
// features at several preset mask scales, predicts a scale distribution from
// the depth map, mixes the two into a nonnegative per-channel filter, and
// uses the filtered feature to place its deformable sampling points.

/// Averaged local features of one query, one C-vector per preset scale.
struct MultiScaleFeatures {
  std::vector<std::vector<double>> per_scale;
};

/// Sampled key-point geometry of one query: offsets in feature-map cells and
/// per-head attention weights (each head's weights sum to one).
struct KeypointSet {
  Tensor offsets;    // [M, K, 2] (dx, dy)
  Tensor attention;  // [M, K]

  bool attention_is_simplex(double tol = 1e-6) const {
    const int m = attention.dim(0), k = attention.dim(1);
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < k; ++j) {
        if (attention.at(i, j) < 0.0) return false;
        s += attention.at(i, j);
      }
      if (std::fabs(s - 1.0) > tol) return false;
    }
    return true;
  }
};

/// Converts a normalized [0,1] coordinate to continuous cell-center
/// coordinates on a grid with `extent` cells.
inline Var to_cells(const Var& normalized, int extent) {
  return add_scalar(scale(normalized, static_cast<double>(extent)), -0.5);
}

inline double to_cells_value(double normalized, int extent) {
  return normalized * extent - 0.5;
}

/// Per-scale averaged local features for all queries: one [N, C] matrix per
/// preset scale, sampled bilinearly with border clamping.
inline std::vector<Var> extract_multiscale_features(const Var& visual_map, const Var& cx_cells,
                                                    const Var& cy_cells, const ScaleSet& scales) {
  scales.validate();
  std::vector<Var> out;
  out.reserve(scales.scales.size());
  for (int l : scales.scales) {
    out.push_back(mask_mean_sample(visual_map, cx_cells, cy_cells, l, scales.vertical_expansion));
  }
  return out;
}

/// Bilinear sample of the depth map at each query position: [N, C].
inline Var sample_depth_feature(const Var& depth_map, const Var& cx_cells, const Var& cy_cells) {
  return bilinear_sample(depth_map, cx_cells, cy_cells);
}

/// Scale matching distribution: softmax of a pointwise projection of the
/// per-query depth feature. Rows satisfy the simplex invariant.
inline Var predict_scale_distribution(const Var& depth_feature, const Linear& scale_projection) {
  return softmax_rows(scale_projection.forward(depth_feature));
}

/// Probability-weighted mixture of the multi-scale features, before the
/// adaptive transform: g_q = sum_l P(q,l) * fbar_q^l. Output [N, C].
inline Var scale_mixture(const std::vector<Var>& per_scale, const Var& probs) {
  if (per_scale.empty()) throw std::invalid_argument("scale_mixture: no scales");
  if (probs->value.dim(1) != static_cast<int>(per_scale.size()))
    throw std::invalid_argument("scale_mixture: probability width mismatch");
  Var acc;
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    const int n = per_scale[i]->value.dim(0);
    Var p_col = reshape(slice_cols(probs, static_cast<int>(i), static_cast<int>(i) + 1), {n});
    Var term = scale_rows(per_scale[i], p_col);
    acc = acc ? add(acc, term) : term;
  }
  return acc;
}

/// Scale-aware filter: pointwise channel mixing of the mixture, batch
/// normalization over the query axis, then a rectified activation. All
/// outputs are >= 0.
inline Var build_scale_aware_filter(const std::vector<Var>& per_scale, const Var& probs,
                                    const Linear& transform, const BatchNorm& norm,
                                    bool training) {
  Var mixed = scale_mixture(per_scale, probs);
  return relu(norm.forward(transform.forward(mixed), training));
}

/// Raw key-point heads applied to the modulated query features. Offsets are
/// unbounded, expressed in feature-map cells; attention is softmaxed over the
/// K points of each head.
struct KeypointPrediction {
  Var offsets_x;  // [N*M*K]
  Var offsets_y;  // [N*M*K]
  Var attention;  // [N*M, K], rows sum to 1
  int queries = 0, heads = 0, points = 0;
};

namespace detail {

/// Expands per-head or shared offsets to the flat (n, m, k) point layout.
inline KeypointPrediction split_keypoint_heads(const Var& raw_offsets, const Var& attn_logits,
                                               int n, int m, int k, bool shared_offsets) {
  KeypointPrediction kp;
  kp.queries = n;
  kp.heads = m;
  kp.points = k;
  if (shared_offsets) {
    // raw_offsets [N, K*2] -> broadcast the K points to every head.
    Var pairs = reshape(raw_offsets, {n * k, 2});
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(n) * m * k);
    for (int q = 0; q < n; ++q)
      for (int h = 0; h < m; ++h)
        for (int p = 0; p < k; ++p) idx.push_back(q * k + p);
    Var expanded = gather_rows(pairs, idx);
    kp.offsets_x = reshape(slice_cols(expanded, 0, 1), {n * m * k});
    kp.offsets_y = reshape(slice_cols(expanded, 1, 2), {n * m * k});
  } else {
    Var pairs = reshape(raw_offsets, {n * m * k, 2});
    kp.offsets_x = reshape(slice_cols(pairs, 0, 1), {n * m * k});
    kp.offsets_y = reshape(slice_cols(pairs, 1, 2), {n * m * k});
  }
  kp.attention = softmax_rows(reshape(attn_logits, {n * m, k}));
  return kp;
}

}  // namespace detail

/// Deformable aggregation: samples the visual map at every key point, applies
/// the per-head value projection, combines points with the attention weights,
/// and projects the concatenated heads back to C channels. Output [N, C].
inline Var deformable_aggregate(const Var& visual_map, const Var& cx_cells, const Var& cy_cells,
                                const KeypointPrediction& kp, const Linear& value_proj,
                                const Linear& output_proj) {
  const int n = kp.queries, m = kp.heads, k = kp.points;
  const int channels = visual_map->value.dim(2);
  if (channels % m != 0) throw std::invalid_argument("deformable_aggregate: C not divisible by M");
  const int head_dim = channels / m;

  std::vector<int> rep;
  rep.reserve(static_cast<std::size_t>(n) * m * k);
  for (int q = 0; q < n; ++q)
    for (int i = 0; i < m * k; ++i) rep.push_back(q);
  Var base_x = reshape(gather_rows(reshape(cx_cells, {n, 1}), rep), {n * m * k});
  Var base_y = reshape(gather_rows(reshape(cy_cells, {n, 1}), rep), {n * m * k});
  Var px = add(base_x, kp.offsets_x);
  Var py = add(base_y, kp.offsets_y);

  Var sampled = bilinear_sample(visual_map, px, py);  // [N*M*K, C]
  Var values = value_proj.forward(sampled);           // per-head columns
  Var attn_flat = reshape(kp.attention, {n * m * k});

  std::vector<Var> heads_out;
  heads_out.reserve(m);
  for (int h = 0; h < m; ++h) {
    std::vector<int> head_rows, head_weights;
    head_rows.reserve(static_cast<std::size_t>(n) * k);
    for (int q = 0; q < n; ++q)
      for (int p = 0; p < k; ++p) head_rows.push_back((q * m + h) * k + p);
    Var vh = slice_cols(gather_rows(values, head_rows), h * head_dim, (h + 1) * head_dim);
    Var ah = reshape(gather_rows(reshape(attn_flat, {n * m * k, 1}), head_rows), {n * k});
    heads_out.push_back(sum_groups(scale_rows(vh, ah), k));  // [N, head_dim]
  }
  return output_proj.forward(concat_cols(heads_out));
}

/// Parameters of one scale-aware deformable attention layer.
struct SSDALayer {
  int channels = 0;
  int heads = 1;
  int keypoints = 4;
  ScaleSet scale_set;
  bool shared_head_offsets = false;
  bool scale_aware = true;  // false strips the filter path (plain deformable attention)

  Linear scale_projection;  // depth feature -> scale logits
  Linear filter_transform;  // pointwise channel mixing of the mixture
  BatchNorm filter_norm;
  Linear offset_head;
  Linear attention_head;
  Linear value_proj;
  Linear output_proj;

  SSDALayer() = default;

  SSDALayer(ParamStore& store, const std::string& name, int c, int m, int k,
            const ScaleSet& scales, bool scale_aware_mode, bool shared_offsets,
            std::mt19937_64& rng)
      : channels(c),
        heads(m),
        keypoints(k),
        scale_set(scales),
        shared_head_offsets(shared_offsets),
        scale_aware(scale_aware_mode) {
    if (c % m != 0) throw std::invalid_argument("SSDALayer: C must be divisible by M");
    if (scale_aware) {
      scale_projection = Linear(store, name + ".scale_proj", c, scale_set.count(), rng);
      filter_transform = Linear(store, name + ".filter", c, c, rng);
      filter_norm = BatchNorm(store, name + ".filter_bn", c);
    }
    const int offset_out = (shared_offsets ? k : m * k) * 2;
    offset_head = Linear(store, name + ".offset", c, offset_out, rng);
    attention_head = Linear(store, name + ".attn", c, m * k, rng);
    value_proj = Linear(store, name + ".value", c, c, rng);
    output_proj = Linear(store, name + ".output", c, c, rng);

    // Key points start as a small radial pattern around each query. The head
    // weights are damped rather than zeroed so the filter path is trainable
    // from the first step.
    for (int i = 0; i < offset_head.weight->value.size(); ++i)
      offset_head.weight->value[i] *= 0.1;
    for (int i = 0; i < attention_head.weight->value.size(); ++i)
      attention_head.weight->value[i] *= 0.1;
    const int groups = shared_offsets ? k : m * k;
    for (int g = 0; g < groups; ++g) {
      const double angle = 2.0 * M_PI * g / groups;
      const double radius = 0.5 * (1.0 + g % k);
      offset_head.bias->value[2 * g] = radius * std::cos(angle);
      offset_head.bias->value[2 * g + 1] = radius * std::sin(angle);
    }
  }

  KeypointPrediction predict_keypoints(const Var& modulated) const {
    const int n = modulated->value.dim(0);
    return detail::split_keypoint_heads(offset_head.forward(modulated),
                                        attention_head.forward(modulated), n, heads, keypoints,
                                        shared_head_offsets);
  }
};

/// One full pass of the layer over a batch of queries.
struct SSDAOutput {
  Var updated;      // [N, C]: input features plus the aggregated update
  Var scale_probs;  // [N, N_l]; null when the layer runs scale-unaware
  KeypointPrediction keypoints;
};

/// Composition of the layer: multi-scale extraction, depth-guided scale
/// prediction, filter construction, key-point prediction, and deformable
/// aggregation. Query positions are normalized; conversion to cells happens
/// here.
inline SSDAOutput ssda_forward(const SSDALayer& layer, const Var& query_features,
                               const Var& qx_norm, const Var& qy_norm, const Var& visual_map,
                               const Var& depth_map, bool training) {
  if (query_features->value.dim(0) < 1) throw std::invalid_argument("ssda_forward: no queries");
  if (!visual_map->value.same_shape(depth_map->value))
    throw std::invalid_argument("ssda_forward: visual/depth map extent mismatch");
  if (!visual_map->value.all_finite() || !depth_map->value.all_finite())
    throw std::invalid_argument("ssda_forward: non-finite feature map");
  const int grid_h = visual_map->value.dim(0), grid_w = visual_map->value.dim(1);

  Var cx = to_cells(qx_norm, grid_w);
  Var cy = to_cells(qy_norm, grid_h);

  SSDAOutput out;
  Var modulated;
  if (layer.scale_aware) {
    auto per_scale = extract_multiscale_features(visual_map, cx, cy, layer.scale_set);
    Var depth_feat = sample_depth_feature(depth_map, cx, cy);
    out.scale_probs = predict_scale_distribution(depth_feat, layer.scale_projection);
    Var filter = build_scale_aware_filter(per_scale, out.scale_probs, layer.filter_transform,
                                          layer.filter_norm, training);
    modulated = mul(filter, query_features);
  } else {
    modulated = query_features;
  }
  out.keypoints = layer.predict_keypoints(modulated);
  Var aggregated =
      deformable_aggregate(visual_map, cx, cy, out.keypoints, layer.value_proj, layer.output_proj);
  out.updated = add(query_features, aggregated);
  return out;
}

/// Unpacks the flat key-point prediction into per-query domain objects.
inline std::vector<KeypointSet> extract_keypoint_sets(const KeypointPrediction& kp) {
  const int n = kp.queries, m = kp.heads, k = kp.points;
  std::vector<KeypointSet> sets(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    KeypointSet& s = sets[static_cast<std::size_t>(q)];
    s.offsets = Tensor::zeros({m, k, 2});
    s.attention = Tensor::zeros({m, k});
    for (int h = 0; h < m; ++h) {
      for (int p = 0; p < k; ++p) {
        const int flat = (q * m + h) * k + p;
        s.offsets.at(h, p, 0) = kp.offsets_x->value[flat];
        s.offsets.at(h, p, 1) = kp.offsets_y->value[flat];
        s.attention.at(h, p) = kp.attention->value.at(q * m + h, p);
      }
    }
  }
  return sets;
}

/// Per-query scale distributions as domain objects.
inline std::vector<ScaleDistribution> extract_scale_distributions(const Var& probs) {
  const int n = probs->value.dim(0), nl = probs->value.dim(1);
  std::vector<ScaleDistribution> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)].probs.resize(static_cast<std::size_t>(nl));
    for (int j = 0; j < nl; ++j) out[static_cast<std::size_t>(i)].probs[static_cast<std::size_t>(j)] = probs->value.at(i, j);
  }
  return out;
}

}  // namespace scaledet
