#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xaqa/data.hpp"
#include "xaqa/rng.hpp"
#include "xaqa/tensor.hpp"

namespace xaqa {

struct ModelConfig {
  int vocab_size = 200;
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 128;
  int max_seq_len = 64;    // positions per encoder segment
  int max_decode_len = 12; // cap on decoder prefix length
  void validate() const;
  int d_head() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Placement of one encoded segment [question SEP context] inside the fused
/// sequence. All indices are fused positions; ranges are half-open.
struct SegmentBoundary {
  std::size_t begin = 0, end = 0;
  std::size_t question_begin = 0, question_end = 0;
  bool has_sep = false;
  std::size_t sep = 0;
  std::size_t context_begin = 0, context_end = 0;
  bool truncated = false;   // passage tail dropped to fit max_seq_len
  TokenSeq tokens;          // segment input tokens, post-truncation
  std::size_t length() const { return end - begin; }
  std::size_t context_len() const { return context_end - context_begin; }
  Token context_token(std::size_t offset) const {
    return tokens[(question_end - question_begin) + (has_sep ? 1 : 0) + offset];
  }
};

/// Per-passage encoder outputs concatenated row-wise for joint decoding.
struct FusedEncoding {
  Tensor states;  // (sum of segment lengths) × d_model
  std::vector<SegmentBoundary> boundaries;

  std::size_t fused_len() const { return states.rows(); }
  bool is_context_pos(std::size_t fused) const;
  /// (passage, context offset) of a fused context position.
  std::optional<std::pair<int, int>> context_position(std::size_t fused) const;
  /// Fused index of a context token, or nullopt when truncated away.
  std::optional<std::size_t> fused_index(int passage, int offset) const;
};

/// Cross-attention probabilities at one decode step over all fused
/// positions: per head plus the head average (same summation order as the
/// live average tensor).
struct AttentionRecord {
  int step = 0;
  std::vector<std::vector<double>> probs_per_head;
  std::vector<double> probs_avg;
};

struct AttentionLayer {
  Tensor wq, wk, wv, wo;  // d_model × d_model each, no biases
};
struct LayerNormParams {
  Tensor gain, bias;
};
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};
struct EncoderLayerParams {
  LayerNormParams ln_attn;
  AttentionLayer attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};
struct DecoderLayerParams {
  LayerNormParams ln_self;
  AttentionLayer self_attn;
  LayerNormParams ln_cross;
  AttentionLayer cross_attn;
  LayerNormParams ln_ff;
  FeedForwardParams ff;
};

struct CrossAttentionResult {
  Tensor states;          // t × d_model
  Tensor probs_avg;       // t × fused_len, live in the graph (defined when recorded)
  std::vector<AttentionRecord> records;
};

/// Scaled dot-product attention of decoder states over every fused position
/// jointly; the softmax spans all passage segments at once. Records are
/// filled only when `record` is set.
CrossAttentionResult cross_attention(const Tensor& h, const FusedEncoding& fused,
                                     const AttentionLayer& layer, int n_heads, bool record);

Tensor self_attention(const Tensor& x, const AttentionLayer& layer, int n_heads, bool causal);

/// Row-concatenation in passage order. The plain overload treats each
/// segment as all-context; Model::encode supplies full boundary metadata.
FusedEncoding fuse(const std::vector<Tensor>& segments);
FusedEncoding fuse(const std::vector<Tensor>& segments, std::vector<SegmentBoundary> boundaries);

/// Sinusoidal position table, constant (no gradient).
Tensor sinusoidal_positions(std::size_t len, std::size_t d_model);

struct DecoderForward {
  Tensor logits;          // prefix_len × vocab
  Tensor cross_probs_avg; // prefix_len × fused_len from the last decoder layer
  std::vector<AttentionRecord> records;  // one per prefix position
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  /// Contextual states for [question SEP passage]. Overlong passages are
  /// truncated at the tail; the question is never cut.
  Tensor encode_segment(const TokenSeq& question, const TokenSeq& passage,
                        SegmentBoundary* boundary = nullptr) const;
  FusedEncoding encode(const TokenSeq& question, const std::vector<TokenSeq>& passages) const;

  /// Teacher-forced decoder pass: causal self-attention then cross-attention
  /// per layer; logits row i conditions only on prefix[0..=i]. Attention
  /// records come from the last decoder layer.
  DecoderForward decode_forward(const TokenSeq& prefix, const FusedEncoding& fused) const;

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  /// Deep copy: fresh parameter storage with identical values.
  Model clone() const;

 private:
  Model() = default;
  Tensor param(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng,
               double std_dev);
  Tensor const_param(const std::string& name, std::size_t rows, std::size_t cols, double value);
  void build_parameters(std::uint64_t seed);
  Tensor embed(const TokenSeq& ids) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Tensor token_embedding_, lm_head_;
  LayerNormParams enc_final_ln_, dec_final_ln_;
  std::vector<EncoderLayerParams> enc_layers_;
  std::vector<DecoderLayerParams> dec_layers_;
};

/// Checkpoint file: magic "XAQA", u32 version, config, then each parameter
/// as (u32 name length, name, u32 rank, u64 dims, little-endian f64 values).
/// Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace xaqa
