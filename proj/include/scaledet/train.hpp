#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaledet/config.hpp"
#include "scaledet/data.hpp"
#include "scaledet/eval.hpp"
#include "scaledet/losses.hpp"
#include "scaledet/matching.hpp"
#include "scaledet/model.hpp"

namespace scaledet {

/// Matched scale-prediction rows of one decoder block for one image; pooled
/// across the batch before ranking, since the WSM queues are built per batch.
struct BlockScaleInfo {
  Var matched_probs;  // [B, N_l]; null when nothing matched or layer is scale-unaware
  std::vector<double> true_scales;
  std::vector<double> predicted_scales;  // detached expectations
};

struct ImageLossResult {
  Var detection_total;  // 2D + 3D + dense-depth terms, blocks averaged
  std::map<std::string, double> terms;
  std::vector<BlockScaleInfo> block_scales;
};

namespace detail {

inline std::vector<int> matched_query_indices(const MatchResult& match) {
  std::vector<int> idx;
  idx.reserve(match.pairs.size());
  for (const auto& [q, j] : match.pairs) idx.push_back(q);
  return idx;
}

inline MatchedTargets build_targets(const MatchResult& match, const SceneSample& sample) {
  const int b = static_cast<int>(match.pairs.size());
  MatchedTargets t;
  t.lrtb = Tensor::zeros({b, 4});
  t.center = Tensor::zeros({b, 2});
  t.dims = Tensor::zeros({b, 3});
  t.angle = Tensor::zeros({b, 2});
  t.depth = Tensor::zeros({b});
  t.scale_cells = Tensor::zeros({b});
  const double w = sample.width, h = sample.height;
  for (int i = 0; i < b; ++i) {
    const SceneLabel& label = sample.labels[static_cast<std::size_t>(match.pairs[static_cast<std::size_t>(i)].second)];
    t.lrtb.at(i, 0) = label.left / w;
    t.lrtb.at(i, 1) = label.right / w;
    t.lrtb.at(i, 2) = label.top / h;
    t.lrtb.at(i, 3) = label.bottom / h;
    t.center.at(i, 0) = label.center_x / w;
    t.center.at(i, 1) = label.center_y / h;
    t.dims.at(i, 0) = label.h3d;
    t.dims.at(i, 1) = label.w3d;
    t.dims.at(i, 2) = label.l3d;
    t.angle.at(i, 0) = std::sin(label.alpha);
    t.angle.at(i, 1) = std::cos(label.alpha);
    t.depth[i] = label.depth;
    t.scale_cells[i] = ground_truth_scale(label);
    t.boxes.push_back(Box{label.box_x1() / w, label.box_y1() / h, label.box_x2() / w,
                          label.box_y2() / h});
  }
  return t;
}

inline Tensor build_class_targets(const MatchResult& match, const SceneSample& sample,
                                  int n_queries, int n_classes) {
  Tensor targets = Tensor::zeros({n_queries, n_classes});
  for (const auto& [q, j] : match.pairs) {
    const int cls = sample.labels[static_cast<std::size_t>(j)].class_id;
    if (cls >= 0 && cls < n_classes) targets.at(q, cls) = 1.0;
  }
  return targets;
}

/// L1 on the dense depth map at foreground cells (cells whose center pixel
/// lies inside a ground-truth box).
inline Var dense_depth_loss(const Var& dense_depth, const SceneSample& sample) {
  const int gh = dense_depth->value.dim(0), gw = dense_depth->value.dim(1);
  std::vector<int> fg;
  std::vector<double> target;
  for (int ci = 0; ci < gh; ++ci) {
    for (int cj = 0; cj < gw; ++cj) {
      const double px = cj * kFeatureStride + kFeatureStride / 2.0 - 0.5;
      const double py = ci * kFeatureStride + kFeatureStride / 2.0 - 0.5;
      for (const auto& label : sample.labels) {
        if (px >= label.box_x1() && px <= label.box_x2() && py >= label.box_y1() &&
            py <= label.box_y2()) {
          fg.push_back(ci * gw + cj);
          target.push_back(sample.depth_gt.at(ci, cj));
          break;
        }
      }
    }
  }
  if (fg.empty()) return constant_scalar(0.0);
  Var fg_pred = gather_rows(reshape(dense_depth, {gh * gw, 1}), fg);
  Tensor t = Tensor::from(std::move(target), {static_cast<int>(fg.size()), 1});
  return l1_loss(fg_pred, t);
}

}  // namespace detail

/// Detection losses of a single image: per-block Hungarian matching, the 2D
/// and 3D objectives and the dense depth term, with intermediate-block
/// supervision averaged across blocks. Scale-matching information is returned
/// for batch-level WSM pooling rather than folded in here.
inline ImageLossResult image_detection_loss(const ForwardResult& fwd, const SceneSample& sample,
                                            const RunConfig& cfg) {
  ImageLossResult result;
  const int n_blocks = static_cast<int>(fwd.blocks.size());
  const int first_block = cfg.intermediate_supervision ? 0 : n_blocks - 1;
  const int active_blocks = n_blocks - first_block;
  const double block_scale = 1.0 / active_blocks;

  Var acc;
  for (int b = first_block; b < n_blocks; ++b) {
    const BlockPredictions& block = fwd.blocks[static_cast<std::size_t>(b)];
    const auto snaps = query_snapshots(block);
    const MatchResult match = hungarian_match(snaps, sample.labels, sample.width, sample.height);
    const auto qidx = detail::matched_query_indices(match);
    const int matched = static_cast<int>(qidx.size());

    MatchedTargets targets = detail::build_targets(match, sample);
    Tensor class_targets =
        detail::build_class_targets(match, sample, cfg.model.queries, cfg.model.num_classes);

    MatchedPreds preds;
    if (matched > 0) {
      preds.lrtb = gather_rows(block.lrtb, qidx);
      preds.center = gather_rows(block.center, qidx);
      preds.dims = gather_rows(block.dims, qidx);
      preds.angle = gather_rows(block.angle, qidx);
      Var d_reg = reshape(gather_rows(reshape(block.d_reg, {cfg.model.queries, 1}), qidx), {matched});
      preds.log_sigma =
          reshape(gather_rows(reshape(block.log_sigma, {cfg.model.queries, 1}), qidx), {matched});
      Var h3d = reshape(slice_cols(preds.dims, 0, 1), {matched});
      Var tb_px = scale(reshape(sum_cols(slice_cols(preds.lrtb, 2, 4)), {matched}),
                        static_cast<double>(sample.height));
      Var d_geo = depth_geo_vars(sample.calib.focal_length, h3d, tb_px);
      Var cx_px = scale(reshape(slice_cols(preds.center, 0, 1), {matched}),
                        static_cast<double>(sample.width));
      Var cy_px = scale(reshape(slice_cols(preds.center, 1, 2), {matched}),
                        static_cast<double>(sample.height));
      Var d_map = read_dmap(fwd.dense_depth, cx_px, cy_px);
      preds.d_pre = depth_fuse_vars(d_reg, d_geo, d_map);
    }

    Loss2dTerms l2d = loss_2d(block.class_logits, class_targets, preds, targets, cfg.weights);
    Loss3dTerms l3d = loss_3d(preds, targets, cfg.weights);
    Var block_total = scale(add(l2d.total, l3d.total), block_scale);
    acc = acc ? add(acc, block_total) : block_total;

    result.terms["L_class"] += l2d.classification->value[0] * block_scale;
    result.terms["L_2dsize"] += l2d.size2d->value[0] * block_scale;
    result.terms["L_xy3d"] += l2d.center3d->value[0] * block_scale;
    result.terms["L_giou"] += l2d.giou->value[0] * block_scale;
    result.terms["L_3dsize"] += l3d.size3d->value[0] * block_scale;
    result.terms["L_angle"] += l3d.angle->value[0] * block_scale;
    result.terms["L_depth"] += l3d.depth->value[0] * block_scale;

    BlockScaleInfo info;
    if (block.scale_probs && matched > 0) {
      info.matched_probs = gather_rows(block.scale_probs, qidx);
      const ScaleSet scale_set = cfg.model.scale_set();
      Var expected = predicted_scale_expectation(info.matched_probs, scale_set);
      for (int i = 0; i < matched; ++i) {
        info.true_scales.push_back(targets.scale_cells[i]);
        info.predicted_scales.push_back(expected->value[i]);
      }
    }
    result.block_scales.push_back(std::move(info));
  }

  Var dense = detail::dense_depth_loss(fwd.dense_depth, sample);
  result.terms["L_dense"] = dense->value[0];
  result.detection_total = add(acc, scale(dense, cfg.weights.lambda7));
  return result;
}

/// One optimizer step over a batch of samples. The WSM ranking queues pool
/// the matched queries of all images in the batch, per decoder block.
struct StepResult {
  std::map<std::string, double> terms;
};

inline StepResult train_step(Model& model, AdamOptimizer& opt,
                             const std::vector<const SceneSample*>& batch, const RunConfig& cfg) {
  model.params().zero_grad();
  StepResult step;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  Var det_acc;
  std::vector<std::vector<BlockScaleInfo>> per_image_scales;
  for (const SceneSample* sample : batch) {
    ForwardResult fwd = model.forward(*sample, /*training=*/true);
    ImageLossResult img = image_detection_loss(fwd, *sample, cfg);
    det_acc = det_acc ? add(det_acc, img.detection_total) : img.detection_total;
    for (const auto& [name, value] : img.terms) step.terms[name] += value * inv_batch;
    per_image_scales.push_back(std::move(img.block_scales));
  }

  // Pool the scale information across the batch, block by block.
  const int active_blocks = static_cast<int>(per_image_scales.front().size());
  Var wsm_acc;
  int wsm_blocks = 0;
  const ScaleSet scale_set = cfg.model.use_ssda ? cfg.model.scale_set() : ScaleSet({1, 3}, 1);
  for (int b = 0; b < active_blocks; ++b) {
    std::vector<Var> prob_rows;
    RankBatch rank;
    for (const auto& image_scales : per_image_scales) {
      const BlockScaleInfo& info = image_scales[static_cast<std::size_t>(b)];
      if (!info.matched_probs) continue;
      prob_rows.push_back(info.matched_probs);
      rank.predicted_scales.insert(rank.predicted_scales.end(), info.predicted_scales.begin(),
                                   info.predicted_scales.end());
      rank.true_scales.insert(rank.true_scales.end(), info.true_scales.begin(),
                              info.true_scales.end());
    }
    if (prob_rows.empty()) continue;
    Var pooled = prob_rows.size() == 1 ? prob_rows[0] : concat_rows(prob_rows);
    Tensor true_scales({rank.size()});
    for (int i = 0; i < rank.size(); ++i) true_scales[i] = rank.true_scales[static_cast<std::size_t>(i)];
    Var per_query = scale_losses(pooled, true_scales, scale_set, cfg.scale_loss_mode);
    std::vector<double> loss_values(per_query->value.vec());
    const auto weights = wsm_weights_for_mode(rank, loss_values, cfg.wsm_weight_mode);
    Var block_wsm = wsm_loss(weights, per_query);
    wsm_acc = wsm_acc ? add(wsm_acc, block_wsm) : block_wsm;
    ++wsm_blocks;
  }
  Var wsm = wsm_blocks > 0 ? scale(wsm_acc, 1.0 / wsm_blocks) : constant_scalar(0.0);
  step.terms["L_WSM"] = wsm->value[0];

  Var total = add(scale(det_acc, inv_batch), scale(wsm, cfg.weights.lambda8));
  step.terms["total"] = total->value[0];
  for (const auto& [name, value] : step.terms) {
    if (!std::isfinite(value))
      throw std::runtime_error("train_step: non-finite loss term " + name);
  }
  backward(total);
  opt.step(model.params());
  return step;
}

// ---------------------------------------------------------------------------
// Full training runs
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  std::map<std::string, double> terms;  // per-step means
};

struct TrainResult {
  std::vector<EpochLog> logs;
  std::filesystem::path checkpoint_path;
  std::filesystem::path run_dir;
  double final_total = 0.0;
};

/// Generates both splits into <run>/data if missing. The validation split
/// draws from a reseeded generator so it never overlaps the training scenes.
inline void ensure_datasets(const RunConfig& cfg, const std::filesystem::path& run_dir) {
  const auto train_dir = run_dir / "data" / "train";
  const auto val_dir = run_dir / "data" / "val";
  if (!std::filesystem::exists(train_dir / "manifest.txt")) {
    SceneConfig train_cfg = cfg.scene;
    write_dataset(train_dir, train_cfg, cfg.train_samples);
  }
  if (!std::filesystem::exists(val_dir / "manifest.txt")) {
    SceneConfig val_cfg = cfg.scene;
    val_cfg.seed = detail::splitmix64(cfg.seed ^ 0x76616c5f73706c69ull);  // "val_spli"
    write_dataset(val_dir, val_cfg, cfg.val_samples);
  }
}

/// End-to-end training: dataset generation/loading, epoch loop with batched
/// steps, structured per-epoch logging, checkpoint and resolved config in the
/// run directory. Fully reproducible per seed.
inline TrainResult train_run(RunConfig cfg, std::ostream* progress = nullptr) {
  cfg.finalize();
  const std::filesystem::path run_dir(cfg.out_dir);
  std::filesystem::create_directories(run_dir);
  cfg.save(run_dir / "config.txt");
  ensure_datasets(cfg, run_dir);

  LoadedDataset train_set = load_dataset(run_dir / "data" / "train", cfg.class_names());
  Model model(cfg.model);
  AdamOptimizer opt(cfg.learning_rate, cfg.weight_decay);

  TrainResult result;
  result.run_dir = run_dir;
  std::ofstream log_file(run_dir / "train_log.tsv");
  log_file << "epoch\tterm\tvalue\n";
  log_file.precision(10);

  const int n = static_cast<int>(train_set.samples.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(detail::splitmix64(cfg.seed * 2654435761u + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochLog log;
    log.epoch = epoch;
    int steps = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      std::vector<const SceneSample*> batch;
      for (int i = start; i < std::min(n, start + cfg.batch_size); ++i)
        batch.push_back(&train_set.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      StepResult step = train_step(model, opt, batch, cfg);
      for (const auto& [name, value] : step.terms) log.terms[name] += value;
      ++steps;
    }
    for (auto& [name, value] : log.terms) value /= steps;
    for (const auto& [name, value] : log.terms) {
      log_file << epoch << '\t' << name << '\t' << value << '\n';
    }
    log_file.flush();
    if (progress) {
      (*progress) << "epoch " << epoch << " total=" << log.terms["total"]
                  << " wsm=" << log.terms["L_WSM"] << "\n";
      progress->flush();
    }
    result.final_total = log.terms["total"];
    result.logs.push_back(std::move(log));
  }

  result.checkpoint_path = run_dir / "checkpoint.bin";
  model.save_checkpoint(result.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string setting;
  MetricsReport metrics;
  double final_loss = 0.0;
};

inline std::string sanitize_for_path(std::string s) {
  for (char& c : s)
    if (c == ',' || c == ' ' || c == '.') c = '-';
  return s;
}

/// Trains one run per axis value with a shared seed and evaluates each on its
/// validation split. Axis names: scale-set (pipe-separated value lists),
/// lambda8, wsm-mode.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis,
                                             const std::vector<std::string>& values,
                                             std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (const std::string& value : values) {
    RunConfig cfg = base;
    if (axis == "scale-set") cfg.apply("scales", value);
    else if (axis == "lambda8") cfg.apply("lambda8", value);
    else if (axis == "wsm-mode") cfg.apply("wsm_weight_mode", value);
    else throw std::invalid_argument("run_ablation: unknown axis " + axis);
    cfg.out_dir = base.out_dir + "/" + sanitize_for_path(axis) + "_" + sanitize_for_path(value);
    if (progress) (*progress) << "[ablate] " << axis << " = " << value << "\n";
    TrainResult train = train_run(cfg, progress);
    Model model = Model::load_checkpoint(train.checkpoint_path);
    RunConfig resolved = RunConfig::from_file(train.run_dir / "config.txt");
    LoadedDataset val = load_dataset(train.run_dir / "data" / "val", resolved.class_names());
    AblationRow row;
    row.setting = value;
    row.metrics = evaluate_model(model, val.samples);
    row.final_loss = train.final_total;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string ablation_table_text(const std::string& axis,
                                       const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(4);
  out << std::left;
  out << axis << "\tap40\tpos_prec\twpos_prec\tscale_err\tfinal_loss\n";
  for (const auto& row : rows) {
    auto get = [&](const char* key) {
      auto it = row.metrics.find(key);
      return it == row.metrics.end() ? std::string("-") : [&] {
        std::ostringstream v;
        v.precision(4);
        v << it->second;
        return v.str();
      }();
    };
    out << row.setting << '\t' << get("ap40") << '\t' << get("position_precision") << '\t'
        << get("weighted_position_precision") << '\t' << get("mean_scale_error") << '\t'
        << row.final_loss << '\n';
  }
  return out.str();
}

inline std::string ablation_table_json(const std::string& axis,
                                       const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "{\n  \"axis\": \"" << axis << "\",\n  \"rows\": [";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << (i ? "," : "") << "\n    {\"setting\": \"" << rows[i].setting
        << "\", \"final_loss\": " << rows[i].final_loss;
    for (const auto& [key, value] : rows[i].metrics) {
      out << ", \"" << key << "\": " << value;
    }
    out << "}";
  }
  out << "\n  ]\n}\n";
  return out.str();
}

}  // namespace scaledet
