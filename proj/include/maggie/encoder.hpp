#pragma once

#include "maggie/nn.hpp"

#include <array>

namespace maggie {

struct EncoderConfig {
  Index in_channels = 6;
  std::array<Index, 4> channels{32, 32, 64, 128};  // scales 1, 2, 4, 8
  Index depth = 1;                                  // extra 3×3 convs per stage
};

/// Dense feature maps at scales 1, 2, 4, 8, each [T, C_s, H/s, W/s].
template <typename Scalar>
struct FeaturePyramid {
  ad::Var<Scalar> f1, f2, f4, f8;

  const ad::Var<Scalar>& at(int scale) const {
    switch (scale) {
      case 1: return f1;
      case 2: return f2;
      case 4: return f4;
      case 8: return f8;
      default: throw ValidationError("pyramid scale must be 1, 2, 4 or 8");
    }
  }
};

/// Strided convolutional pyramid. Frames are processed as a batch with no
/// temporal mixing.
template <typename Scalar>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterSet<Scalar>& params, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    Index in = cfg.in_channels;
    for (int s = 0; s < 4; ++s) {
      const Index out = cfg.channels[static_cast<std::size_t>(s)];
      const std::string name = "encoder.s" + std::to_string(1 << s);
      auto& stage = stages_[static_cast<std::size_t>(s)];
      stage.push_back(Conv2d<Scalar>(params, name + ".down", in, out, 3, rng, s == 0 ? 1 : 2));
      for (Index d = 0; d < cfg.depth; ++d)
        stage.push_back(Conv2d<Scalar>(params, name + ".conv" + std::to_string(d), out, out, 3, rng, 1));
      in = out;
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  FeaturePyramid<Scalar> operator()(const ad::Var<Scalar>& input) const {
    require(input->value.rank() == 4, "encoder: input must be [T, C, H, W]");
    require(input->dim(1) == cfg_.in_channels, "encoder: expected " + std::to_string(cfg_.in_channels) + " channels");
    require(input->dim(2) % 8 == 0 && input->dim(3) % 8 == 0, "encoder: H and W must be divisible by 8");
    std::array<ad::Var<Scalar>, 4> maps;
    ad::Var<Scalar> x = input;
    for (std::size_t s = 0; s < 4; ++s) {
      for (const auto& conv : stages_[s]) x = ad::relu(conv(x));
      maps[s] = x;
    }
    return {maps[0], maps[1], maps[2], maps[3]};
  }

 private:
  EncoderConfig cfg_;
  std::array<std::vector<Conv2d<Scalar>>, 4> stages_;
};

template <typename Scalar>
FeaturePyramid<Scalar> extract_pyramid(const ad::Var<Scalar>& input, const Encoder<Scalar>& encoder) {
  return encoder(input);
}

}  // namespace maggie
