#pragma once

// Prompt-conditioned volumetric encoder-decoder. The final segmentation head
// is not a stored layer: its weights are generated per input by a linear map
// over concat(pooled bottleneck embedding, one-hot task prompt).

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "versemi/nn.hpp"
#include "versemi/rng.hpp"
#include "versemi/tasks.hpp"

namespace versemi {

struct ModelConfig {
  int in_channels = 1;
  int base_width = 8;
  int depth = 4;        // encoder stages
  int prompt_dim = 5;   // pertinent tasks + synthetic slot
  int head_hidden = 8;  // 0 = single generated layer
  std::uint64_t seed = 1;
  nn::PadMode pad_mode = nn::PadMode::zero;

  void validate() const {
    require(in_channels >= 1, ErrorCode::invalid_argument, "in_channels must be >= 1");
    require(base_width >= 4, ErrorCode::invalid_argument, "base_width must be >= 4");
    require(depth >= 3, ErrorCode::invalid_argument, "depth must be >= 3");
    require(prompt_dim >= 3, ErrorCode::invalid_argument, "prompt_dim must be >= 3");
    require(head_hidden >= 0, ErrorCode::invalid_argument, "head_hidden must be >= 0");
  }
  int width(int stage) const { return base_width << stage; }
  int stride_total() const { return 1 << (depth - 1); }
};

inline nlohmann::ordered_json model_config_json(const ModelConfig& c,
                                                const std::vector<std::string>& task_names) {
  nlohmann::ordered_json j;
  j["in_channels"] = c.in_channels;
  j["base_width"] = c.base_width;
  j["depth"] = c.depth;
  j["prompt_dim"] = c.prompt_dim;
  j["head_hidden"] = c.head_hidden;
  j["seed"] = c.seed;
  j["pad_mode"] = c.pad_mode == nn::PadMode::circular ? "circular" : "zero";
  j["tasks"] = task_names;
  return j;
}

inline void model_config_from_json(const nlohmann::json& j, ModelConfig& c,
                                   std::vector<std::string>& task_names) {
  c.in_channels = j.at("in_channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.prompt_dim = j.at("prompt_dim").get<int>();
  c.head_hidden = j.at("head_hidden").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.pad_mode = j.at("pad_mode").get<std::string>() == "circular" ? nn::PadMode::circular
                                                                 : nn::PadMode::zero;
  task_names = j.at("tasks").get<std::vector<std::string>>();
}

namespace detail {

struct ParamSegment {
  std::int64_t offset = 0, count = 0;
  int init_kind = 0;  // 0 zeros, 1 ones, 2 normal
  double init_std = 0.0;
};

struct ParamBuilder {
  std::vector<ParamSegment> segments;
  std::int64_t total = 0;
  std::int64_t push(std::int64_t count, int kind, double std = 0.0) {
    const auto off = total;
    segments.push_back({off, count, kind, std});
    total += count;
    return off;
  }
};

}  // namespace detail

template <class S>
class SegNet {
 public:
  struct ConvBlock {
    nn::ConvSpec conv;
    std::int64_t w = 0, b = 0, gamma = 0, beta = 0;  // param offsets
  };
  struct UpBlock {
    nn::UpSpec up;
    std::int64_t w = 0, b = 0, gamma = 0, beta = 0;
  };

  explicit SegNet(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int D = cfg_.depth;
    const auto conv_block = [&](int cin, int cout, int k, int stride, int pad) {
      ConvBlock blk;
      blk.conv = {cin, cout, k, stride, pad, cfg_.pad_mode};
      const double std = std::sqrt(2.0 / static_cast<double>(blk.conv.patch_rows()));
      blk.w = layout_.push(blk.conv.weight_count(), 2, std);
      blk.b = layout_.push(blk.conv.bias_count(), 0);
      blk.gamma = layout_.push(cout, 1);
      blk.beta = layout_.push(cout, 0);
      return blk;
    };
    enc_in_ = conv_block(cfg_.in_channels, cfg_.width(0), 3, 1, 1);
    for (int s = 1; s < D; ++s) {
      down_.push_back(conv_block(cfg_.width(s - 1), cfg_.width(s), 2, 2, 0));
      enc_.push_back({conv_block(cfg_.width(s), cfg_.width(s), 3, 1, 1),
                      conv_block(cfg_.width(s), cfg_.width(s), 3, 1, 1)});
    }
    for (int s = D - 2; s >= 0; --s) {
      UpBlock ub;
      ub.up = {cfg_.width(s + 1), cfg_.width(s)};
      const double std = std::sqrt(2.0 / static_cast<double>(ub.up.cin));
      ub.w = layout_.push(ub.up.weight_count(), 2, std);
      ub.b = layout_.push(ub.up.bias_count(), 0);
      ub.gamma = layout_.push(ub.up.cout, 1);
      ub.beta = layout_.push(ub.up.cout, 0);
      up_.push_back(ub);
      std::vector<ConvBlock> blocks;
      blocks.push_back(conv_block(2 * cfg_.width(s), cfg_.width(s), 3, 1, 1));
      if (s >= 1) blocks.push_back(conv_block(cfg_.width(s), cfg_.width(s), 3, 1, 1));
      dec_.push_back(std::move(blocks));
    }
    psi_ = {bottleneck_channels() + cfg_.prompt_dim,
            static_cast<int>(head_spec().param_count())};
    const double psi_std = std::sqrt(2.0 / static_cast<double>(psi_.din));
    psi_w_ = layout_.push(psi_.weight_count(), 2, psi_std);
    psi_b_ = layout_.push(psi_.bias_count(), 0);
  }

  const ModelConfig& config() const { return cfg_; }
  std::int64_t param_count() const { return layout_.total; }
  int bottleneck_channels() const { return cfg_.width(cfg_.depth - 1); }
  int decoder_channels() const { return cfg_.width(0); }
  nn::HeadSpec head_spec() const { return {decoder_channels(), cfg_.head_hidden}; }
  const nn::LinearSpec& psi_spec() const { return psi_; }
  std::int64_t psi_weight_offset() const { return psi_w_; }
  std::int64_t psi_bias_offset() const { return psi_b_; }

  void init_params(nn::ArrX<S>& params) const {
    params.resize(layout_.total);
    Rng rng(mix64(cfg_.seed, 0x6d6f64656cULL));
    for (const auto& seg : layout_.segments) {
      switch (seg.init_kind) {
        case 0:
          params.segment(seg.offset, seg.count).setZero();
          break;
        case 1:
          params.segment(seg.offset, seg.count).setConstant(S(1));
          break;
        default:
          for (std::int64_t i = 0; i < seg.count; ++i)
            params[seg.offset + i] = static_cast<S>(rng.normal(0.0, seg.init_std));
      }
    }
  }

  // ------------------------------------------------------------------
  struct BlockCache {
    nn::Tensor4<S> pre_norm;   // conv output
    nn::NormCache<S> norm;     // per-channel (mean, istd)
  };

  struct Workspace {
    nn::Tensor4<S> x;                        // network input
    std::vector<nn::Tensor4<S>> enc_out;     // stage outputs; last is bottleneck
    std::vector<nn::Tensor4<S>> enc_mid;     // output of enc[s][0]
    std::vector<nn::Tensor4<S>> down_out;
    std::vector<nn::Tensor4<S>> up_out;
    std::vector<nn::Tensor4<S>> cat;
    std::vector<nn::Tensor4<S>> dec_mid;     // output of dec[s][0] when 2 blocks
    std::vector<nn::Tensor4<S>> dec_out;
    nn::ArrX<S> pooled;
    std::vector<BlockCache> caches;          // one per block, fixed ids

    // gradient accumulation between head passes
    nn::Tensor4<S> gfD;
    nn::ArrX<S> gpooled;

    // scratch
    nn::ArrX<S> col_a, col_b, tmp;
    nn::Tensor4<S> gblock;
  };

  const nn::Tensor4<S>& features(const Workspace& ws) const { return ws.dec_out.back(); }
  const nn::Tensor4<S>& bottleneck(const Workspace& ws) const { return ws.enc_out.back(); }

  void forward_backbone(const S* params, const nn::Tensor4<S>& x, Workspace& ws) const {
    require(x.c == cfg_.in_channels, ErrorCode::invalid_argument, "input channel mismatch");
    const int div = cfg_.stride_total();
    require(x.d % div == 0 && x.h % div == 0 && x.w % div == 0, ErrorCode::invalid_argument,
            "input dims must be divisible by " + std::to_string(div));
    const int D = cfg_.depth;
    ws.caches.resize(block_count());
    ws.enc_out.resize(static_cast<std::size_t>(D));
    ws.enc_mid.resize(static_cast<std::size_t>(D));
    ws.down_out.resize(static_cast<std::size_t>(D));
    ws.up_out.resize(up_.size());
    ws.cat.resize(up_.size());
    ws.dec_mid.resize(up_.size());
    ws.dec_out.resize(up_.size());
    ws.x = x;

    int blk = 0;
    block_forward(enc_in_, params, ws.x, ws.enc_out[0], ws.caches[blk++], ws);
    for (int s = 1; s < D; ++s) {
      block_forward(down_[s - 1], params, ws.enc_out[s - 1], ws.down_out[s], ws.caches[blk++], ws);
      block_forward(enc_[s - 1][0], params, ws.down_out[s], ws.enc_mid[s], ws.caches[blk++], ws);
      block_forward(enc_[s - 1][1], params, ws.enc_mid[s], ws.enc_out[s], ws.caches[blk++], ws);
    }
    nn::gap_forward(ws.enc_out[D - 1], ws.pooled);

    const nn::Tensor4<S>* cur = &ws.enc_out[D - 1];
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const int s = cfg_.depth - 2 - static_cast<int>(i);
      up_forward(up_[i], params, *cur, ws.up_out[i], ws.caches[blk++], ws);
      concat(ws.up_out[i], ws.enc_out[s], ws.cat[i]);
      if (dec_[i].size() == 2) {
        block_forward(dec_[i][0], params, ws.cat[i], ws.dec_mid[i], ws.caches[blk++], ws);
        block_forward(dec_[i][1], params, ws.dec_mid[i], ws.dec_out[i], ws.caches[blk++], ws);
      } else {
        block_forward(dec_[i][0], params, ws.cat[i], ws.dec_out[i], ws.caches[blk++], ws);
      }
      cur = &ws.dec_out[i];
    }
  }

  void begin_grad(Workspace& ws) const {
    const auto& fD = features(ws);
    ws.gfD.zero(fD.c, fD.d, fD.h, fD.w);
    ws.gpooled = nn::ArrX<S>::Zero(bottleneck_channels());
  }

  // w_k = psi(concat(pooled, prompt)); psi_in is cached for the backward pass.
  void psi_forward(const S* params, const nn::ArrX<S>& pooled, int prompt_slot,
                   nn::ArrX<S>& psi_in, nn::ArrX<S>& wk) const {
    require(prompt_slot >= 1 && prompt_slot <= cfg_.prompt_dim, ErrorCode::out_of_range,
            "prompt slot outside prompt_dim");
    require(pooled.size() == bottleneck_channels(), ErrorCode::invalid_argument,
            "pooled embedding length mismatch");
    psi_in = nn::ArrX<S>::Zero(psi_.din);
    psi_in.head(pooled.size()) = pooled;
    psi_in[pooled.size() + prompt_slot - 1] = S(1);
    nn::linear_forward(psi_, params, psi_w_, psi_b_, psi_in, wk);
  }

  void psi_backward(const S* params, const nn::ArrX<S>& psi_in, const nn::ArrX<S>& gwk,
                    S* grads, nn::ArrX<S>& gpooled_accum) const {
    nn::ArrX<S> gin;
    nn::linear_backward(psi_, params, psi_w_, psi_b_, psi_in, gwk, &gin, grads);
    gpooled_accum += gin.head(gpooled_accum.size());
  }

  // Consumes ws.gfD and ws.gpooled.
  void backbone_backward(const S* params, Workspace& ws, S* grads) const {
    const int D = cfg_.depth;
    int blk = block_count();
    nn::Tensor4<S> g = ws.gfD;
    nn::Tensor4<S> gtmp, gcat;
    std::vector<nn::Tensor4<S>> gskip(static_cast<std::size_t>(D));

    for (int i = static_cast<int>(up_.size()) - 1; i >= 0; --i) {
      const int s = cfg_.depth - 2 - i;
      if (dec_[static_cast<std::size_t>(i)].size() == 2) {
        block_backward(dec_[static_cast<std::size_t>(i)][1], params,
                       ws.dec_mid[static_cast<std::size_t>(i)], g, ws.caches[--blk], gtmp, grads,
                       ws);
        std::swap(g, gtmp);
        block_backward(dec_[static_cast<std::size_t>(i)][0], params,
                       ws.cat[static_cast<std::size_t>(i)], g, ws.caches[--blk], gcat, grads, ws);
      } else {
        block_backward(dec_[static_cast<std::size_t>(i)][0], params,
                       ws.cat[static_cast<std::size_t>(i)], g, ws.caches[--blk], gcat, grads, ws);
      }
      // split the concat gradient
      const int wch = cfg_.width(s);
      nn::Tensor4<S> gup(wch, gcat.d, gcat.h, gcat.w);
      gup.v = gcat.v.head(gup.size());
      gskip[static_cast<std::size_t>(s)].resize(wch, gcat.d, gcat.h, gcat.w);
      gskip[static_cast<std::size_t>(s)].v = gcat.v.tail(gup.size());
      const nn::Tensor4<S>& up_in =
          i == 0 ? ws.enc_out[static_cast<std::size_t>(D - 1)] : ws.dec_out[static_cast<std::size_t>(i - 1)];
      up_backward(up_[static_cast<std::size_t>(i)], params, up_in, gup, ws.caches[--blk], gtmp,
                  grads, ws);
      std::swap(g, gtmp);
    }

    // decoder-path gradient at the bottleneck, plus the pooled-embedding path
    nn::gap_backward_add(ws.gpooled, g);

    for (int s = D - 1; s >= 1; --s) {
      block_backward(enc_[static_cast<std::size_t>(s - 1)][1], params,
                     ws.enc_mid[static_cast<std::size_t>(s)], g, ws.caches[--blk], gtmp, grads,
                     ws);
      std::swap(g, gtmp);
      block_backward(enc_[static_cast<std::size_t>(s - 1)][0], params,
                     ws.down_out[static_cast<std::size_t>(s)], g, ws.caches[--blk], gtmp, grads,
                     ws);
      std::swap(g, gtmp);
      block_backward(down_[static_cast<std::size_t>(s - 1)], params,
                     ws.enc_out[static_cast<std::size_t>(s - 1)], g, ws.caches[--blk], gtmp,
                     grads, ws);
      std::swap(g, gtmp);
      if (gskip[static_cast<std::size_t>(s - 1)].size() > 0)
        g.v += gskip[static_cast<std::size_t>(s - 1)].v;
    }
    block_backward(enc_in_, params, ws.x, g, ws.caches[--blk], gtmp, grads, ws, false);
  }

  int block_count() const {
    int n = 1 + 3 * (cfg_.depth - 1);
    for (const auto& d : dec_) n += 1 + static_cast<int>(d.size());
    return n;
  }

 private:
  void block_forward(const ConvBlock& blk, const S* params, const nn::Tensor4<S>& x,
                     nn::Tensor4<S>& out, BlockCache& cache, Workspace& ws) const {
    nn::conv3d_forward(blk.conv, params, blk.w, blk.b, x, cache.pre_norm, ws.col_a);
    nn::norm_act_forward(blk.conv.cout, params, blk.gamma, blk.beta, cache.pre_norm, out,
                         cache.norm);
  }

  void block_backward(const ConvBlock& blk, const S* params, const nn::Tensor4<S>& x,
                      const nn::Tensor4<S>& gy, BlockCache& cache, nn::Tensor4<S>& gx, S* grads,
                      Workspace& ws, bool need_gx = true) const {
    nn::norm_act_backward(blk.conv.cout, params, blk.gamma, blk.beta, cache.pre_norm, gy,
                          cache.norm, ws.gblock, grads);
    nn::conv3d_backward(blk.conv, params, blk.w, blk.b, x, ws.gblock, need_gx ? &gx : nullptr,
                        grads, ws.col_a, ws.col_b);
  }

  void up_forward(const UpBlock& blk, const S* params, const nn::Tensor4<S>& x,
                  nn::Tensor4<S>& out, BlockCache& cache, Workspace& ws) const {
    nn::upconv_forward(blk.up, params, blk.w, blk.b, x, cache.pre_norm, ws.tmp);
    nn::norm_act_forward(blk.up.cout, params, blk.gamma, blk.beta, cache.pre_norm, out,
                         cache.norm);
  }

  void up_backward(const UpBlock& blk, const S* params, const nn::Tensor4<S>& x,
                   const nn::Tensor4<S>& gy, BlockCache& cache, nn::Tensor4<S>& gx, S* grads,
                   Workspace& ws) const {
    nn::norm_act_backward(blk.up.cout, params, blk.gamma, blk.beta, cache.pre_norm, gy,
                          cache.norm, ws.gblock, grads);
    nn::upconv_backward(blk.up, params, blk.w, blk.b, x, ws.gblock, &gx, grads, ws.tmp);
  }

  static void concat(const nn::Tensor4<S>& a, const nn::Tensor4<S>& b, nn::Tensor4<S>& out) {
    out.resize(a.c + b.c, a.d, a.h, a.w);
    out.v.head(a.size()) = a.v;
    out.v.tail(b.size()) = b.v;
  }

  ModelConfig cfg_;
  detail::ParamBuilder layout_;
  ConvBlock enc_in_;
  std::vector<ConvBlock> down_;
  std::vector<std::array<ConvBlock, 2>> enc_;
  std::vector<UpBlock> up_;
  std::vector<std::vector<ConvBlock>> dec_;  // indexed like up_ (s = depth-2 .. 0)
  nn::LinearSpec psi_;
  std::int64_t psi_w_ = 0, psi_b_ = 0;
};

// ---------------------------------------------------------------------------

template <class S>
struct ModelState {
  ModelConfig cfg;
  std::vector<std::string> task_names;
  nn::ArrX<S> params;
  nn::ArrX<S> adam_m, adam_v;
  std::int64_t step = 0;

  TaskRegistry registry() const { return TaskRegistry{task_names}; }
  std::uint64_t fingerprint() const {
    const auto s = model_config_json(cfg, task_names).dump();
    return fnv1a64(s.data(), s.size());
  }
};

template <class S>
ModelState<S> init_model(const ModelConfig& cfg, const std::vector<std::string>& task_names) {
  require(static_cast<int>(task_names.size()) + 1 == cfg.prompt_dim, ErrorCode::invalid_argument,
          "prompt_dim must equal task count + 1");
  SegNet<S> net(cfg);
  ModelState<S> st;
  st.cfg = cfg;
  st.task_names = task_names;
  net.init_params(st.params);
  st.adam_m = nn::ArrX<S>::Zero(st.params.size());
  st.adam_v = nn::ArrX<S>::Zero(st.params.size());
  return st;
}

template <class S>
std::uint64_t param_checksum(const ModelState<S>& st) {
  return fnv1a64(st.params.data(), static_cast<std::size_t>(st.params.size()) * sizeof(S));
}

template <class S>
nn::Tensor4<S> volume_to_tensor(const Volume& v) {
  nn::Tensor4<S> t(1, v.shape[0], v.shape[1], v.shape[2]);
  for (std::int64_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<S>(v.data[i]);
  return t;
}

template <class S>
Grid3<float> foreground_grid(const nn::Tensor4<S>& probs, Spacing3 spacing = {1, 1, 1}) {
  Grid3<float> g({probs.d, probs.h, probs.w}, spacing);
  const std::int64_t n = probs.spatial();
  for (std::int64_t i = 0; i < n; ++i) g.data[i] = static_cast<float>(probs.v[n + i]);
  return g;
}

struct FeatureBundle {
  nn::Tensor4<float> bottleneck;
  nn::Tensor4<float> decoder;  // f_D, full resolution
  Eigen::ArrayXf pooled;
};

// Single-volume prompted forward returning the 2-channel probability map.
template <class S>
nn::Tensor4<S> forward(const ModelState<S>& st, const Volume& x, const PromptVector& prompt,
                       typename SegNet<S>::Workspace& ws) {
  require(prompt.dim == st.cfg.prompt_dim, ErrorCode::invalid_argument,
          "prompt dim does not match the model");
  SegNet<S> net(st.cfg);
  const auto xt = volume_to_tensor<S>(x);
  net.forward_backbone(st.params.data(), xt, ws);
  nn::ArrX<S> psi_in, wk;
  net.psi_forward(st.params.data(), ws.pooled, prompt.hot, psi_in, wk);
  nn::Tensor4<S> logits, probs;
  nn::HeadCache<S> hc;
  nn::head_forward(net.head_spec(), wk, net.features(ws), logits, hc);
  nn::softmax2(logits, probs);
  return probs;
}

template <class S>
nn::Tensor4<S> forward(const ModelState<S>& st, const Volume& x, const PromptVector& prompt) {
  typename SegNet<S>::Workspace ws;
  return forward(st, x, prompt, ws);
}

template <class S>
FeatureBundle extract_features(const ModelState<S>& st, const Volume& x) {
  SegNet<S> net(st.cfg);
  typename SegNet<S>::Workspace ws;
  const auto xt = volume_to_tensor<S>(x);
  net.forward_backbone(st.params.data(), xt, ws);
  FeatureBundle fb;
  const auto& bn = net.bottleneck(ws);
  const auto& fd = net.features(ws);
  fb.bottleneck.resize(bn.c, bn.d, bn.h, bn.w);
  fb.decoder.resize(fd.c, fd.d, fd.h, fd.w);
  for (std::int64_t i = 0; i < bn.size(); ++i) fb.bottleneck.v[i] = static_cast<float>(bn.v[i]);
  for (std::int64_t i = 0; i < fd.size(); ++i) fb.decoder.v[i] = static_cast<float>(fd.v[i]);
  fb.pooled = ws.pooled.template cast<float>();
  return fb;
}

// w_k for an externally supplied pooled embedding (Eq-style closed form).
template <class S>
nn::ArrX<S> generate_kernels(const ModelState<S>& st, const nn::ArrX<S>& pooled,
                             const PromptVector& prompt) {
  SegNet<S> net(st.cfg);
  nn::ArrX<S> psi_in, wk;
  net.psi_forward(st.params.data(), pooled, prompt.hot, psi_in, wk);
  return wk;
}

// ---------------------------------------------------------------------------
// checkpoints: magic, config blob, step, best metric, params + Adam moments

namespace detail {

template <class T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void get(std::ifstream& f, T& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const ModelState<S>& st, double best_val_dice) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f.write("VSMCKPT1", 8);
  const std::uint32_t ssize = sizeof(S);
  detail::put(f, ssize);
  const std::string blob = model_config_json(st.cfg, st.task_names).dump();
  const std::uint64_t blob_len = blob.size();
  detail::put(f, blob_len);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  detail::put(f, st.step);
  detail::put(f, best_val_dice);
  const std::uint64_t n = static_cast<std::uint64_t>(st.params.size());
  detail::put(f, n);
  f.write(reinterpret_cast<const char*>(st.params.data()), static_cast<std::streamsize>(n * sizeof(S)));
  f.write(reinterpret_cast<const char*>(st.adam_m.data()), static_cast<std::streamsize>(n * sizeof(S)));
  f.write(reinterpret_cast<const char*>(st.adam_v.data()), static_cast<std::streamsize>(n * sizeof(S)));
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

template <class S>
ModelState<S> load_checkpoint(const std::string& path, double* best_val_dice = nullptr) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_failure, "cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  require(f.gcount() == 8 && std::string(magic, 8) == "VSMCKPT1", ErrorCode::header_mismatch,
          path + ": not a checkpoint");
  std::uint32_t ssize = 0;
  detail::get(f, ssize);
  require(ssize == sizeof(S), ErrorCode::checkpoint_mismatch,
          path + ": scalar width differs from this build");
  std::uint64_t blob_len = 0;
  detail::get(f, blob_len);
  std::string blob(blob_len, '\0');
  f.read(blob.data(), static_cast<std::streamsize>(blob_len));
  ModelState<S> st;
  try {
    model_config_from_json(nlohmann::json::parse(blob), st.cfg, st.task_names);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::header_mismatch, path + ": bad config blob: " + e.what());
  }
  double best = 0.0;
  detail::get(f, st.step);
  detail::get(f, best);
  std::uint64_t n = 0;
  detail::get(f, n);
  SegNet<S> net(st.cfg);
  require(n == static_cast<std::uint64_t>(net.param_count()), ErrorCode::checkpoint_mismatch,
          path + ": parameter count differs from the config");
  st.params.resize(static_cast<std::int64_t>(n));
  st.adam_m.resize(static_cast<std::int64_t>(n));
  st.adam_v.resize(static_cast<std::int64_t>(n));
  f.read(reinterpret_cast<char*>(st.params.data()), static_cast<std::streamsize>(n * sizeof(S)));
  f.read(reinterpret_cast<char*>(st.adam_m.data()), static_cast<std::streamsize>(n * sizeof(S)));
  f.read(reinterpret_cast<char*>(st.adam_v.data()), static_cast<std::streamsize>(n * sizeof(S)));
  require(f.gcount() == static_cast<std::streamsize>(n * sizeof(S)), ErrorCode::truncated_file,
          path);
  if (best_val_dice != nullptr) *best_val_dice = best;
  return st;
}

}  // namespace versemi
