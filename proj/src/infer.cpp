#include "xaqa/infer.hpp"

#include <algorithm>
#include <cmath>

namespace xaqa {

void InferenceConfig::validate() const {
  if (beam_size < 1) throw ContractError("InferenceConfig: beam_size must be >= 1");
  if (l_max < 1) throw ContractError("InferenceConfig: l_max must be >= 1");
}

std::string to_string(ResolutionStrategy s) {
  switch (s) {
    case ResolutionStrategy::Generative: return "generative";
    case ResolutionStrategy::Attention: return "attention";
    case ResolutionStrategy::Drop: return "drop";
    case ResolutionStrategy::Backoff: return "backoff";
  }
  return "generative";
}

ResolutionStrategy parse_resolution(const std::string& name) {
  if (name == "generative") return ResolutionStrategy::Generative;
  if (name == "attention") return ResolutionStrategy::Attention;
  if (name == "drop") return ResolutionStrategy::Drop;
  if (name == "backoff") return ResolutionStrategy::Backoff;
  throw ContractError("unknown resolution strategy '" + name + "'");
}

BeamHypothesis beam_search(
    const std::function<std::vector<double>(const TokenSeq& prefix)>& step_logprobs,
    int beam_size, int max_generated, Token eos) {
  if (beam_size < 1) throw ContractError("beam_search: beam_size must be >= 1");

  std::vector<BeamHypothesis> beams{{{}, 0.0, false}};
  std::vector<BeamHypothesis> finished;

  for (int step = 0; step < max_generated + 1; ++step) {
    struct Candidate {
      std::size_t beam;
      Token token;
      double log_prob;
    };
    std::vector<Candidate> candidates;
    bool any_alive = false;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (beams[b].finished) continue;
      any_alive = true;
      TokenSeq prefix;
      prefix.reserve(beams[b].tokens.size() + 1);
      prefix.push_back(tokens::BOS);
      prefix.insert(prefix.end(), beams[b].tokens.begin(), beams[b].tokens.end());
      const std::vector<double> logprobs = step_logprobs(prefix);
      for (Token t = 0; t < static_cast<Token>(logprobs.size()); ++t)
        candidates.push_back({b, t, beams[b].log_prob + logprobs[static_cast<std::size_t>(t)]});
    }
    if (!any_alive) break;

    // Stable partial sort: equal scores keep (beam, token) order, so ties
    // resolve deterministically toward the lower token id.
    const std::size_t keep = std::min<std::size_t>(candidates.size(),
                                                   static_cast<std::size_t>(beam_size));
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });

    std::vector<BeamHypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      BeamHypothesis hyp = beams[cand.beam];
      hyp.log_prob = cand.log_prob;
      if (cand.token == eos) {
        hyp.finished = true;
        finished.push_back(hyp);
      } else if (static_cast<int>(hyp.tokens.size()) + 1 < max_generated) {
        hyp.tokens.push_back(cand.token);
        next.push_back(hyp);
      } else {
        hyp.tokens.push_back(cand.token);
        hyp.finished = true;
        hyp.hit_cap = true;
        finished.push_back(hyp);
      }
    }
    beams = std::move(next);
    if (beams.empty()) break;
    // Once every live beam scores below the best finished hypothesis, no
    // extension can win (log-probs only decrease).
    if (!finished.empty()) {
      const double best_done =
          std::max_element(finished.begin(), finished.end(),
                           [](const BeamHypothesis& a, const BeamHypothesis& b) {
                             return a.log_prob < b.log_prob;
                           })
              ->log_prob;
      bool can_improve = false;
      for (const BeamHypothesis& b : beams)
        if (b.log_prob > best_done) can_improve = true;
      if (!can_improve) break;
    }
  }

  for (const BeamHypothesis& b : beams) finished.push_back(b);
  if (finished.empty()) return {{}, 0.0, true};
  return *std::max_element(finished.begin(), finished.end(),
                           [](const BeamHypothesis& a, const BeamHypothesis& b) {
                             return a.log_prob < b.log_prob;
                           });
}

namespace {

std::vector<double> row_log_softmax(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  std::vector<double> out(v);
  double mx = logits.at(row, 0);
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits.at(row, j));
  double denom = 0.0;
  for (std::size_t j = 0; j < v; ++j) denom += std::exp(logits.at(row, j) - mx);
  const double log_denom = std::log(denom);
  for (std::size_t j = 0; j < v; ++j) out[j] = logits.at(row, j) - mx - log_denom;
  return out;
}

}  // namespace

DecodeResult generate(const Model& model, const FusedEncoding& fused,
                      const InferenceConfig& cfg) {
  cfg.validate();
  const int max_generated = model.config().max_decode_len - 1;  // prefix holds BOS too

  auto step_fn = [&](const TokenSeq& prefix) {
    DecoderForward fwd = model.decode_forward(prefix, fused);
    return row_log_softmax(fwd.logits, prefix.size() - 1);
  };
  BeamHypothesis best = beam_search(step_fn, cfg.beam_size, max_generated, tokens::EOS);

  DecodeResult result;
  result.generated = best.tokens;
  result.beam_score = best.log_prob;
  result.truncated = best.hit_cap;
  // Replay the winning sequence teacher-forced so attention reflects the
  // final tokens rather than mixed beam prefixes.
  TokenSeq prefix;
  prefix.reserve(result.generated.size() + 1);
  prefix.push_back(tokens::BOS);
  prefix.insert(prefix.end(), result.generated.begin(), result.generated.end());
  DecoderForward fwd = model.decode_forward(prefix, fused);
  result.records = std::move(fwd.records);
  return result;
}

DecodeResult generate(const Model& model, const TokenSeq& question,
                      const std::vector<TokenSeq>& passages, const InferenceConfig& cfg) {
  return generate(model, model.encode(question, passages), cfg);
}

DecodeResult generate(const Model& model, const QAExample& ex, const InferenceConfig& cfg) {
  return generate(model, ex.question, ex.passages, cfg);
}

std::optional<SpanDistribution> span_distributions(const DecodeResult& result,
                                                   const FusedEncoding& fused,
                                                   bool mask_non_context) {
  if (result.generated.empty()) return std::nullopt;
  SpanDistribution dist;
  dist.boundaries = fused.boundaries;
  dist.p_start_raw = result.records.front().probs_avg;
  dist.p_end_raw = result.records[result.generated.size() - 1].probs_avg;
  dist.p_start = dist.p_start_raw;
  dist.p_end = dist.p_end_raw;
  if (mask_non_context) {
    for (std::vector<double>* vec : {&dist.p_start, &dist.p_end}) {
      double total = 0.0;
      for (std::size_t j = 0; j < vec->size(); ++j) {
        if (!fused.is_context_pos(j)) (*vec)[j] = 0.0;
        total += (*vec)[j];
      }
      if (total > 0.0)
        for (double& v : *vec) v /= total;
    }
  }
  return dist;
}

namespace {

// Argmax over [begin, end) restricted to context positions of one segment
// map; ties break toward the lower index. Returns npos when empty.
std::size_t argmax_context(const std::vector<double>& p,
                           const std::vector<SegmentBoundary>& boundaries, std::size_t lo,
                           std::size_t hi) {
  std::size_t best = static_cast<std::size_t>(-1);
  double best_val = -1.0;
  for (const SegmentBoundary& b : boundaries) {
    const std::size_t from = std::max(lo, b.context_begin);
    const std::size_t to = std::min(hi, b.context_end);
    for (std::size_t j = from; j < to; ++j) {
      if (p[j] > best_val) {
        best_val = p[j];
        best = j;
      }
    }
  }
  return best;
}

const SegmentBoundary& segment_of(const std::vector<SegmentBoundary>& boundaries,
                                  std::size_t fused, int& passage) {
  for (int i = 0; i < static_cast<int>(boundaries.size()); ++i) {
    const SegmentBoundary& b = boundaries[i];
    if (fused >= b.context_begin && fused < b.context_end) {
      passage = i;
      return b;
    }
  }
  throw ContractError("extract_span: position outside every context range");
}

}  // namespace

SpanPrediction extract_span(const SpanDistribution& dist, int l_max) {
  if (l_max < 1) throw ContractError("extract_span: l_max must be >= 1");
  const std::size_t n = dist.p_start.size();

  const std::size_t s1 = argmax_context(dist.p_start, dist.boundaries, 0, n);
  if (s1 == static_cast<std::size_t>(-1))
    throw ContractError("extract_span: no context positions available");

  struct Candidate {
    std::size_t start, end;
    double score;
  };

  // Candidate anchored on the start argmax.
  Candidate c1{};
  {
    int passage = 0;
    const SegmentBoundary& seg = segment_of(dist.boundaries, s1, passage);
    const std::size_t window_end = std::min(seg.context_end, s1 + static_cast<std::size_t>(l_max));
    std::size_t e = argmax_context(dist.p_end, dist.boundaries, s1, window_end);
    if (e == static_cast<std::size_t>(-1)) e = s1;
    c1 = {s1, e, dist.p_start[s1] * dist.p_end[e]};
  }

  // Mirrored candidate anchored on the end argmax.
  Candidate c2{};
  {
    const std::size_t e2 = argmax_context(dist.p_end, dist.boundaries, 0, n);
    int passage = 0;
    const SegmentBoundary& seg = segment_of(dist.boundaries, e2, passage);
    const std::size_t window_begin =
        std::max(seg.context_begin,
                 e2 + 1 >= static_cast<std::size_t>(l_max) ? e2 + 1 - static_cast<std::size_t>(l_max)
                                                           : std::size_t{0});
    std::size_t s = argmax_context(dist.p_start, dist.boundaries, window_begin, e2 + 1);
    if (s == static_cast<std::size_t>(-1)) s = e2;
    c2 = {s, e2, dist.p_start[s] * dist.p_end[e2]};
  }

  const Candidate& winner = (c2.score > c1.score) ? c2 : c1;  // ties keep candidate 1

  SpanPrediction pred;
  const SegmentBoundary& seg = segment_of(dist.boundaries, winner.start, pred.passage);
  pred.start = static_cast<int>(winner.start - seg.context_begin);
  pred.end = static_cast<int>(winner.end - seg.context_begin);
  pred.score = winner.score;
  for (std::size_t j = winner.start; j <= winner.end; ++j)
    pred.tokens.push_back(seg.context_token(j - seg.context_begin));
  return pred;
}

bool is_hallucination(const TokenSeq& answer, const std::vector<TokenSeq>& passages) {
  if (answer.empty()) return true;
  for (const TokenSeq& passage : passages) {
    if (passage.size() < answer.size()) continue;
    for (std::size_t s = 0; s + answer.size() <= passage.size(); ++s)
      if (std::equal(answer.begin(), answer.end(), passage.begin() + s)) return false;
  }
  return true;
}

TokenSeq resolve(const std::vector<TokenSeq>& passages, const TokenSeq& generative,
                 const SpanPrediction& extractive, ResolutionStrategy strategy) {
  switch (strategy) {
    case ResolutionStrategy::Generative: return generative;
    case ResolutionStrategy::Attention: return extractive.tokens;
    case ResolutionStrategy::Drop:
      return is_hallucination(generative, passages) ? TokenSeq{} : generative;
    case ResolutionStrategy::Backoff:
      return is_hallucination(generative, passages) ? extractive.tokens : generative;
  }
  return generative;
}

std::vector<double> passage_scores(const SpanDistribution& dist) {
  std::vector<double> scores;
  scores.reserve(dist.boundaries.size());
  for (const SegmentBoundary& b : dist.boundaries) {
    double start_mass = 0.0, end_mass = 0.0;
    for (std::size_t j = b.begin; j < b.end; ++j) {
      start_mass += dist.p_start_raw[j];
      end_mass += dist.p_end_raw[j];
    }
    scores.push_back(start_mass * end_mass);
  }
  return scores;
}

InferenceOutput run_inference(const Model& model, const QAExample& ex,
                              const InferenceConfig& cfg) {
  InferenceOutput out;
  const FusedEncoding fused = model.encode(ex.question, ex.passages);
  out.decode = generate(model, fused, cfg);
  out.dist = span_distributions(out.decode, fused, cfg.mask_non_context);
  if (out.dist) {
    out.span = extract_span(*out.dist, cfg.l_max);
    out.scores = passage_scores(*out.dist);
  }
  out.generative = out.decode.generated;
  out.hallucinated = is_hallucination(out.generative, ex.passages);
  const SpanPrediction empty_span;
  const SpanPrediction& span = out.span ? *out.span : empty_span;
  out.attention = resolve(ex.passages, out.generative, span, ResolutionStrategy::Attention);
  out.drop = resolve(ex.passages, out.generative, span, ResolutionStrategy::Drop);
  out.backoff = resolve(ex.passages, out.generative, span, ResolutionStrategy::Backoff);
  return out;
}

}  // namespace xaqa
