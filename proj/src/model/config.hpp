#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>

namespace countlab {

struct ModelConfig {
  int d_model = 32;
  int n_heads = 2;
  int head_dim = 16;
  int enc_layers = 2;
  int dec_layers = 2;
  int patch_px = 14;
  std::array<int, 3> mrope_sections = {4, 6, 6};  // (t, h, w) dims of head_dim
  int mlp_ratio = 4;
  double rope_theta = 10000.0;
  int max_seq_len = 0;
  int vocab_size = 0;

  void validate() const {
    if (n_heads * head_dim != d_model)
      throw std::runtime_error("model config: n_heads * head_dim != d_model");
    if (mrope_sections[0] + mrope_sections[1] + mrope_sections[2] != head_dim)
      throw std::runtime_error("model config: mrope sections must sum to head_dim");
    if (vocab_size <= 0 || max_seq_len <= 0)
      throw std::runtime_error("model config: vocab_size and max_seq_len required");
  }

  int patch_dim() const { return patch_px * patch_px * 3; }
  int mlp_hidden() const { return mlp_ratio * d_model; }

  // One transformer block: two layernorm affines, four square attention
  // projections (no biases), and a biased two-layer MLP.
  int64_t params_per_block() const {
    const int64_t d = d_model, m = mlp_hidden();
    return 4 * d          // ln1 + ln2 gain/bias
           + 4 * d * d    // wq wk wv wo
           + m * d + m    // mlp in
           + d * m + d;   // mlp out
  }

  // Closed-form total parameter count; the parameter store asserts against it.
  int64_t param_count() const {
    const int64_t d = d_model, v = vocab_size;
    int64_t total = 0;
    total += static_cast<int64_t>(patch_dim()) * d + d;        // patch embed
    total += (enc_layers + dec_layers) * params_per_block();
    total += 2 * (2 * d);                                      // enc + dec final layernorm
    total += d * d + d;                                        // projector
    total += v * d;                                            // token embedding
    total += v * d;                                            // lm head (untied)
    return total;
  }
};

}  // namespace countlab
