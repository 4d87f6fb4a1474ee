#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "xaqa/model.hpp"

namespace xaqa {

struct InferenceConfig {
  int beam_size = 1;             // 1 = greedy
  int l_max = 10;                // maximum extracted span length in tokens
  bool mask_non_context = true;  // zero question/SEP positions before extraction
  void validate() const;
};

struct DecodeResult {
  TokenSeq generated;                    // BOS/EOS stripped
  std::vector<AttentionRecord> records;  // generated length + 1 (EOS-emitting step)
  double beam_score = 0.0;               // raw log-probability sum of the chosen sequence
  bool truncated = false;                // hit max_decode_len before EOS
};

/// Start/end position probabilities over fused positions, read off the
/// head-averaged last-layer attention at the first/last answer decode steps.
/// p_start/p_end are masked+renormalized when configured; the raw vectors
/// are kept for passage scoring, which sums over whole segments.
struct SpanDistribution {
  std::vector<double> p_start, p_end;
  std::vector<double> p_start_raw, p_end_raw;
  std::vector<SegmentBoundary> boundaries;
};

struct SpanPrediction {
  int passage = 0;
  int start = 0, end = 0;  // context-token offsets, end inclusive
  double score = 0.0;      // p_start(start) * p_end(end)
  TokenSeq tokens;
};

enum class ResolutionStrategy { Generative, Attention, Drop, Backoff };

std::string to_string(ResolutionStrategy s);
ResolutionStrategy parse_resolution(const std::string& name);

struct BeamHypothesis {
  TokenSeq tokens;  // generated tokens, no BOS/EOS
  double log_prob = 0.0;
  bool finished = false;
  bool hit_cap = false;  // reached max_generated without emitting EOS
};

/// Beam search over log-probabilities without length normalization; the step
/// function maps a BOS-prefixed token sequence to next-token log-probs.
/// beam_size 1 is greedy decoding. Returns the best hypothesis.
BeamHypothesis beam_search(
    const std::function<std::vector<double>(const TokenSeq& prefix)>& step_logprobs,
    int beam_size, int max_generated, Token eos);

/// Decode and replay the winning sequence teacher-forced so the attention
/// records reflect the final tokens.
DecodeResult generate(const Model& model, const QAExample& ex, const InferenceConfig& cfg);
DecodeResult generate(const Model& model, const TokenSeq& question,
                      const std::vector<TokenSeq>& passages, const InferenceConfig& cfg);
DecodeResult generate(const Model& model, const FusedEncoding& fused, const InferenceConfig& cfg);

/// nullopt when nothing was generated (immediate EOS).
std::optional<SpanDistribution> span_distributions(const DecodeResult& result,
                                                   const FusedEncoding& fused,
                                                   bool mask_non_context);

/// Two-candidate greedy span: anchor on the start argmax and on the end
/// argmax, search the other endpoint inside an l_max window clipped to the
/// anchor's passage, keep the candidate with the larger probability product.
/// Ties everywhere break toward the lower fused index.
SpanPrediction extract_span(const SpanDistribution& dist, int l_max);

/// True iff the answer is not a contiguous token run of any passage; empty
/// answers count as hallucinations.
bool is_hallucination(const TokenSeq& answer, const std::vector<TokenSeq>& passages);

TokenSeq resolve(const std::vector<TokenSeq>& passages, const TokenSeq& generative,
                 const SpanPrediction& extractive, ResolutionStrategy strategy);

/// score_i = (sum of p_start over segment i) * (sum of p_end over segment i),
/// using the unmasked vectors so question/SEP positions count.
std::vector<double> passage_scores(const SpanDistribution& dist);

/// Everything eval and the prediction dump need for one example.
struct InferenceOutput {
  DecodeResult decode;
  std::optional<SpanDistribution> dist;
  std::optional<SpanPrediction> span;
  bool hallucinated = true;
  TokenSeq generative, attention, drop, backoff;
  std::vector<double> scores;  // per passage; empty when no distribution
};

InferenceOutput run_inference(const Model& model, const QAExample& ex,
                              const InferenceConfig& cfg);

}  // namespace xaqa
