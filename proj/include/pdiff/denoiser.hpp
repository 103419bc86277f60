#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "pdiff/autograd.hpp"
#include "pdiff/tensor.hpp"

namespace pdiff {

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  std::array<int, 3> widths{16, 32, 64};
  int cond_width = 64;  // D_c
  int attention_dim = 16;
  int heads = 1;
  int time_dim = 16;
  int timesteps = 100;  // T, for input validation
  std::uint64_t seed = 1;

  // Small enough for finite-difference checks over every parameter.
  static DenoiserConfig gradient_check_profile();
  void validate() const;
};

// Per-layer [tokens, H_l, W_l] maps, head-averaged, in forward order
// (down path then up path).
struct AttentionRecord {
  std::vector<Var> maps;
  std::vector<int> resolutions;

  std::size_t size() const { return maps.size(); }
  const Tensor& map(std::size_t layer) const { return maps.at(layer).value(); }
};

Tensor timestep_embedding(int t, int dim);

struct CrossAttentionWeights {
  Var wq, wk, wv, wo, bo;
};

struct CrossAttentionOutput {
  Var features;
  Var map;  // invalid when capture is off
};

// features [C,H,W], cond [n,D_c]. Residual output, softmax over tokens.
CrossAttentionOutput cross_attention(Var features, Var cond, const CrossAttentionWeights& w, int heads, bool capture);

class Denoiser {
 public:
  static constexpr int kAttentionLayers = 6;

  Denoiser() = default;
  Denoiser(ParameterSet& params, DenoiserConfig config);

  struct Prediction {
    Var eps;
    AttentionRecord attention;
  };

  Prediction predict_noise(Tape& tape, const ParameterSet& params, Var zt, int t, Var cond,
                           bool capture = true) const;

  const DenoiserConfig& config() const { return config_; }
  std::vector<int> attention_resolutions() const;

 private:
  struct Block {
    std::size_t w = 0, b = 0, time = 0;
    std::optional<std::size_t> skip;  // 1x1 projection when the width changes
  };
  struct Attention {
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0, bo = 0;
  };

  Var block(Tape& tape, const ParameterSet& params, const Block& blk, Var x, Var temb) const;
  Var attend(Tape& tape, const ParameterSet& params, const Attention& a, Var x, Var cond, bool capture,
             AttentionRecord& record) const;

  DenoiserConfig config_;
  std::size_t conv_in_w_ = 0, conv_in_b_ = 0, conv_out_w_ = 0, conv_out_b_ = 0;
  std::array<Block, 6> blocks_{};  // d0 d1 d2 u2 u1 u0
  std::array<Attention, 6> attn_{};
};

}  // namespace pdiff
