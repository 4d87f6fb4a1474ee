#include <cmath>
#include <map>

#include "doctest.h"
#include "xaqa/infer.hpp"
#include "xaqa/rng.hpp"
#include "xaqa/train.hpp"

using namespace xaqa;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ff = 24;
  cfg.max_seq_len = 16;
  cfg.max_decode_len = 6;
  return cfg;
}

// Hand distribution for beam search: log-probs depend only on the prefix via
// a lookup, вvocabulary {0,1,2=EOS,3}.
struct ToyDistribution {
  std::map<TokenSeq, std::vector<double>> table;
  std::vector<double> fallback;

  std::vector<double> operator()(const TokenSeq& prefix) const {
    auto it = table.find(prefix);
    return it != table.end() ? it->second : fallback;
  }
};

std::vector<double> logs(std::initializer_list<double> probs) {
  std::vector<double> out;
  for (double p : probs) out.push_back(std::log(p));
  return out;
}

// Exhaustive oracle: enumerate every sequence of non-EOS tokens up to
// max_len, each terminated by EOS, and return the best total log-prob.
struct Enumerated {
  TokenSeq tokens;
  double log_prob;
};

Enumerated exhaustive_best(const ToyDistribution& dist, int max_len) {
  Enumerated best{{}, -1e300};
  std::function<void(TokenSeq, double)> walk = [&](TokenSeq prefix_tokens, double acc) {
    TokenSeq prefix;
    prefix.push_back(tokens::BOS);
    prefix.insert(prefix.end(), prefix_tokens.begin(), prefix_tokens.end());
    const std::vector<double> lp = dist(prefix);
    // stop здесь with EOS
    const double stop = acc + lp[static_cast<std::size_t>(tokens::EOS)];
    if (stop > best.log_prob) best = {prefix_tokens, stop};
    if (static_cast<int>(prefix_tokens.size()) >= max_len) return;
    for (Token t = 0; t < static_cast<Token>(lp.size()); ++t) {
      if (t == tokens::EOS) continue;
      TokenSeq next = prefix_tokens;
      next.push_back(t);
      walk(next, acc + lp[static_cast<std::size_t>(t)]);
    }
  };
  walk({}, 0.0);
  return best;
}

SpanDistribution single_passage_dist(std::vector<double> p_start, std::vector<double> p_end) {
  SpanDistribution dist;
  SegmentBoundary b;
  b.begin = 0;
  b.end = p_start.size();
  b.question_begin = b.question_end = 0;
  b.has_sep = false;
  b.context_begin = 0;
  b.context_end = p_start.size();
  for (std::size_t i = 0; i < p_start.size(); ++i)
    b.tokens.push_back(static_cast<Token>(100 + i));
  dist.boundaries = {b};
  dist.p_start_raw = p_start;
  dist.p_end_raw = p_end;
  dist.p_start = std::move(p_start);
  dist.p_end = std::move(p_end);
  return dist;
}

}  // namespace

TEST_SUITE("infer") {

TEST_CASE("beam search matches an exhaustive oracle") {
  ToyDistribution dist;
  dist.fallback = logs({0.05, 0.05, 0.85, 0.05});

  SUBCASE("greedy path is the global optimum") {
    // BOS -> token 0 dominant, then EOS dominant: greedy == global best
    dist.table[{tokens::BOS}] = logs({0.7, 0.1, 0.1, 0.1});
    dist.table[{tokens::BOS, 0}] = logs({0.05, 0.05, 0.8, 0.1});
    Enumerated expected = exhaustive_best(dist, 2);
    BeamHypothesis greedy = beam_search(dist, 1, 2, tokens::EOS);
    BeamHypothesis wide = beam_search(dist, 5, 2, tokens::EOS);
    CHECK(greedy.tokens == expected.tokens);
    CHECK(wide.tokens == expected.tokens);
    CHECK(greedy.log_prob == doctest::Approx(expected.log_prob).epsilon(1e-12));
    CHECK(wide.log_prob == doctest::Approx(expected.log_prob).epsilon(1e-12));
  }

  SUBCASE("wider beam recovers a better non-greedy path") {
    // token 1 looks slightly worse at step one but leads to a confident EOS;
    // token 0 looks best then collapses.
    dist.table[{tokens::BOS}] = logs({0.40, 0.35, 0.05, 0.20});
    dist.table[{tokens::BOS, 0}] = logs({0.3, 0.3, 0.1, 0.3});
    dist.table[{tokens::BOS, 1}] = logs({0.02, 0.02, 0.94, 0.02});
    Enumerated expected = exhaustive_best(dist, 2);
    BeamHypothesis greedy = beam_search(dist, 1, 2, tokens::EOS);
    BeamHypothesis wide = beam_search(dist, 5, 2, tokens::EOS);
    CHECK(wide.tokens == expected.tokens);
    CHECK(wide.log_prob == doctest::Approx(expected.log_prob).epsilon(1e-12));
    CHECK(wide.tokens != greedy.tokens);
    CHECK(wide.log_prob > greedy.log_prob);
  }
}

TEST_CASE("generate on a random model") {
  Model model(tiny_config(), 23);
  GenSpec gen;
  gen.vocab_size = 32;
  gen.n_passages = 2;
  gen.passage_len = 8;
  gen.answer_len_max = 2;
  gen.seed = 3;
  QAExample ex = generate_example(gen, 0);
  InferenceConfig cfg;

  DecodeResult result = generate(model, ex, cfg);
  CHECK(result.records.size() == result.generated.size() + 1);
  for (const AttentionRecord& rec : result.records) {
    double total = 0.0;
    for (double p : rec.probs_avg) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(static_cast<int>(result.generated.size()) <= tiny_config().max_decode_len - 1);

  SUBCASE("beam scores are log-probabilities of the chosen sequence") {
    CHECK(result.beam_score <= 0.0);
  }
  SUBCASE("replay is deterministic") {
    DecodeResult again = generate(model, ex, cfg);
    CHECK(again.generated == result.generated);
    CHECK(again.beam_score == result.beam_score);
    REQUIRE(again.records.size() == result.records.size());
    for (std::size_t i = 0; i < again.records.size(); ++i)
      CHECK(again.records[i].probs_avg == result.records[i].probs_avg);
  }
}

TEST_CASE("span distributions") {
  Model model(tiny_config(), 29);
  GenSpec gen;
  gen.vocab_size = 32;
  gen.n_passages = 2;
  gen.passage_len = 8;
  gen.seed = 9;
  QAExample ex = generate_example(gen, 1);
  FusedEncoding fused = model.encode(ex.question, ex.passages);
  InferenceConfig cfg;
  DecodeResult result = generate(model, fused, cfg);

  SUBCASE("empty generation gives no distribution") {
    DecodeResult empty;
    empty.records.push_back(AttentionRecord{0, {}, std::vector<double>(fused.fused_len(), 0.0)});
    CHECK_FALSE(span_distributions(empty, fused, true).has_value());
  }

  if (result.generated.empty()) return;  // random model may emit EOS at once

  SUBCASE("single-token answers share one step for start and end") {
    if (result.generated.size() == 1) {
      auto dist = span_distributions(result, fused, false);
      REQUIRE(dist);
      CHECK(dist->p_start == dist->p_end);
    }
  }

  SUBCASE("masking zeroes non-context mass and renormalizes, keeping order") {
    auto masked = span_distributions(result, fused, true);
    auto raw = span_distributions(result, fused, false);
    REQUIRE(masked);
    REQUIRE(raw);
    double total = 0.0;
    for (std::size_t j = 0; j < masked->p_start.size(); ++j) {
      total += masked->p_start[j];
      if (!fused.is_context_pos(j)) CHECK(masked->p_start[j] == 0.0);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    // relative order preserved among context positions
    for (std::size_t a = 0; a < masked->p_start.size(); ++a)
      for (std::size_t b = a + 1; b < masked->p_start.size(); ++b) {
        if (!fused.is_context_pos(a) || !fused.is_context_pos(b)) continue;
        CHECK((raw->p_start[a] < raw->p_start[b]) == (masked->p_start[a] < masked->p_start[b]));
      }
    // raw vectors ride along for passage scoring
    CHECK(masked->p_start_raw == raw->p_start_raw);
  }
}

TEST_CASE("extract_span") {
  SUBCASE("one-hot start and end in the same passage") {
    std::vector<double> p_start(12, 0.0), p_end(12, 0.0);
    p_start[3] = 1.0;
    p_end[5] = 1.0;
    SpanPrediction pred = extract_span(single_passage_dist(p_start, p_end), 10);
    CHECK(pred.passage == 0);
    CHECK(pred.start == 3);
    CHECK(pred.end == 5);
    CHECK(pred.score == 1.0);
    CHECK(pred.tokens == TokenSeq{103, 104, 105});
  }

  SUBCASE("two-candidate enumeration on a fixed 24-position distribution") {
    // p_start peaks at 3 (0.6) with a secondary 0.25 at 17; p_end peaks at 20
    // (0.5) with a secondary 0.3 at 6. l_max 5.
    std::vector<double> p_start(24, 0.0), p_end(24, 0.0);
    p_start[3] = 0.6;
    p_start[17] = 0.25;
    p_start[10] = 0.15;
    p_end[20] = 0.5;
    p_end[6] = 0.3;
    p_end[12] = 0.2;
    SpanDistribution dist = single_passage_dist(p_start, p_end);

    // independent oracle: enumerate both windows by hand
    // candidate 1: s1=3, end window [3,7] -> best end 6 -> score 0.6*0.3
    // candidate 2: e2=20, start window [16,20] -> best start 17 -> 0.25*0.5
    const double c1 = 0.6 * 0.3, c2 = 0.25 * 0.5;
    REQUIRE(c1 > c2);
    SpanPrediction pred = extract_span(dist, 5);
    CHECK(pred.start == 3);
    CHECK(pred.end == 6);
    CHECK(pred.score == doctest::Approx(c1).epsilon(1e-12));

    // longer window [3,12] still prefers end 6 (0.3 beats 0.2 at 12); with
    // the window stretched to cover 20 the top pair (3,20) becomes reachable
    SpanPrediction wide = extract_span(dist, 10);
    CHECK(wide.start == 3);
    CHECK(wide.end == 6);
    SpanPrediction full = extract_span(dist, 18);
    CHECK(full.start == 3);
    CHECK(full.end == 20);
    CHECK(full.score == doctest::Approx(0.6 * 0.5).epsilon(1e-12));
  }

  SUBCASE("uniform distributions tie-break to the lowest index") {
    std::vector<double> uniform(9, 1.0 / 9.0);
    SpanPrediction pred = extract_span(single_passage_dist(uniform, uniform), 4);
    CHECK(pred.passage == 0);
    CHECK(pred.start == 0);
    CHECK(pred.end == 0);
  }

  SUBCASE("windows clip at passage boundaries") {
    // start peak near the end of passage 0; end mass over in passage 1 must
    // not be reachable from candidate 1's window
    SpanDistribution dist;
    SegmentBoundary b0, b1;
    b0.begin = 0;
    b0.end = 6;
    b0.question_begin = b0.question_end = 0;
    b0.context_begin = 0;
    b0.context_end = 6;
    for (int i = 0; i < 6; ++i) b0.tokens.push_back(100 + i);
    b1.begin = 6;
    b1.end = 12;
    b1.question_begin = b1.question_end = 6;
    b1.context_begin = 6;
    b1.context_end = 12;
    for (int i = 0; i < 6; ++i) b1.tokens.push_back(200 + i);
    dist.boundaries = {b0, b1};
    dist.p_start.assign(12, 0.0);
    dist.p_end.assign(12, 0.0);
    dist.p_start[4] = 0.9;   // passage 0
    dist.p_end[8] = 0.9;     // passage 1
    dist.p_end[5] = 0.05;    // best end within passage 0's window
    dist.p_start[7] = 0.05;  // best start within passage 1's window
    dist.p_start_raw = dist.p_start;
    dist.p_end_raw = dist.p_end;

    SpanPrediction pred = extract_span(dist, 8);
    // candidate 1: (4,5) in passage 0 -> 0.9*0.05; candidate 2: (7,8) in
    // passage 1 -> 0.05*0.9; tie -> candidate 1
    CHECK(pred.passage == 0);
    CHECK(pred.start == 4);
    CHECK(pred.end == 5);
    // span never crosses passages
    CHECK(pred.end < 6);
  }

  SUBCASE("well-formedness on random distributions") {
    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 6 + rng.index(20);
      std::vector<double> p_start(n), p_end(n);
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p_start[j] = rng.uniform();
        p_end[j] = rng.uniform();
        s1 += p_start[j];
        s2 += p_end[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        p_start[j] /= s1;
        p_end[j] /= s2;
      }
      const int l_max = 1 + static_cast<int>(rng.index(8));
      SpanDistribution dist = single_passage_dist(p_start, p_end);
      SpanPrediction pred = extract_span(dist, l_max);
      CHECK(pred.start <= pred.end);
      CHECK(pred.end - pred.start + 1 <= l_max);
      CHECK(pred.score == doctest::Approx(p_start[pred.start] * p_end[pred.end]));
      CHECK(pred.tokens.size() == static_cast<std::size_t>(pred.end - pred.start + 1));
    }
  }
}

TEST_CASE("is_hallucination") {
  CHECK_FALSE(is_hallucination({5, 6}, {{1, 5, 6, 2}}));
  CHECK(is_hallucination({5, 6}, {{5, 1, 6}}));
  CHECK(is_hallucination({}, {{1, 2, 3}}));
  CHECK(is_hallucination({9}, {{1, 2}, {3}}));
  CHECK_FALSE(is_hallucination({3}, {{1, 2}, {3}}));
}

TEST_CASE("extracted spans are never hallucinations") {
  Rng rng(113);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 8;
    std::vector<TokenSeq> passages{{}, {}};
    for (std::size_t j = 0; j < n; ++j) {
      passages[0].push_back(static_cast<Token>(10 + rng.index(6)));
      passages[1].push_back(static_cast<Token>(10 + rng.index(6)));
    }
    SpanDistribution dist;
    std::size_t offset = 0;
    for (int p = 0; p < 2; ++p) {
      SegmentBoundary b;
      b.begin = offset;
      b.end = offset + n;
      b.question_begin = b.question_end = offset;
      b.context_begin = offset;
      b.context_end = offset + n;
      b.tokens = passages[p];
      dist.boundaries.push_back(b);
      offset += n;
    }
    dist.p_start.assign(2 * n, 0.0);
    dist.p_end.assign(2 * n, 0.0);
    for (std::size_t j = 0; j < 2 * n; ++j) {
      dist.p_start[j] = rng.uniform();
      dist.p_end[j] = rng.uniform();
    }
    dist.p_start_raw = dist.p_start;
    dist.p_end_raw = dist.p_end;
    SpanPrediction pred = extract_span(dist, 4);
    CHECK_FALSE(is_hallucination(pred.tokens, passages));
  }
}

TEST_CASE("resolve strategies") {
  std::vector<TokenSeq> passages{{1, 5, 6, 2}};
  SpanPrediction ext;
  ext.tokens = {5, 6};

  SUBCASE("in-context generation passes through") {
    TokenSeq gen{5, 6};
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Generative) == gen);
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Drop) == gen);
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Backoff) == gen);
  }
  SUBCASE("hallucinated generation") {
    TokenSeq gen{9, 9};
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Generative) == gen);
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Drop).empty());
    CHECK(resolve(passages, gen, ext, ResolutionStrategy::Backoff) == ext.tokens);
  }
  SUBCASE("attention ignores the generation entirely") {
    CHECK(resolve(passages, {9, 9}, ext, ResolutionStrategy::Attention) == ext.tokens);
    CHECK(resolve(passages, {5, 6}, ext, ResolutionStrategy::Attention) == ext.tokens);
  }
  CHECK(parse_resolution("backoff") == ResolutionStrategy::Backoff);
  CHECK(to_string(ResolutionStrategy::Drop) == "drop");
}

TEST_CASE("passage scores") {
  SUBCASE("all mass in one segment scores 1 there and 0 elsewhere") {
    SpanDistribution dist;
    SegmentBoundary b0, b1;
    b0.begin = 0;
    b0.end = 4;
    b1.begin = 4;
    b1.end = 8;
    dist.boundaries = {b0, b1};
    dist.p_start_raw = {0.5, 0.5, 0, 0, 0, 0, 0, 0};
    dist.p_end_raw = {0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0};
    auto scores = passage_scores(dist);
    CHECK(scores[0] == doctest::Approx(1.0));
    CHECK(scores[1] == doctest::Approx(0.0));
  }
  SUBCASE("split mass multiplies per segment") {
    SpanDistribution dist;
    SegmentBoundary b0, b1;
    b0.begin = 0;
    b0.end = 2;
    b1.begin = 2;
    b1.end = 4;
    dist.boundaries = {b0, b1};
    dist.p_start_raw = {0.5, 0.0, 0.5, 0.0};
    dist.p_end_raw = {0.0, 0.5, 0.0, 0.5};
    auto scores = passage_scores(dist);
    CHECK(scores[0] == doctest::Approx(0.25));
    CHECK(scores[1] == doctest::Approx(0.25));
  }
  SUBCASE("factor sums and score bound on random distributions") {
    Rng rng(131);
    for (int trial = 0; trial < 100; ++trial) {
      SpanDistribution dist;
      const int segments = 2 + static_cast<int>(rng.index(3));
      std::size_t offset = 0;
      for (int s = 0; s < segments; ++s) {
        SegmentBoundary b;
        b.begin = offset;
        offset += 3 + rng.index(5);
        b.end = offset;
        dist.boundaries.push_back(b);
      }
      dist.p_start_raw.assign(offset, 0.0);
      dist.p_end_raw.assign(offset, 0.0);
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < offset; ++j) {
        dist.p_start_raw[j] = rng.uniform();
        dist.p_end_raw[j] = rng.uniform();
        s1 += dist.p_start_raw[j];
        s2 += dist.p_end_raw[j];
      }
      for (std::size_t j = 0; j < offset; ++j) {
        dist.p_start_raw[j] /= s1;
        dist.p_end_raw[j] /= s2;
      }
      auto scores = passage_scores(dist);
      double total = 0.0;
      for (double v : scores) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0 + 1e-9);
        total += v;
      }
      CHECK(total <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("run_inference wires every strategy") {
  Model model(tiny_config(), 37);
  GenSpec gen;
  gen.vocab_size = 32;
  gen.n_passages = 2;
  gen.passage_len = 8;
  gen.seed = 21;
  QAExample ex = generate_example(gen, 2);
  InferenceConfig cfg;
  InferenceOutput out = run_inference(model, ex, cfg);
  CHECK(out.generative == out.decode.generated);
  if (out.hallucinated) {
    CHECK(out.drop.empty());
    if (out.span) CHECK(out.backoff == out.span->tokens);
  } else {
    CHECK(out.drop == out.generative);
    CHECK(out.backoff == out.generative);
  }
  if (out.span) {
    CHECK(out.attention == out.span->tokens);
    CHECK_FALSE(is_hallucination(out.attention, ex.passages));
    CHECK(out.scores.size() == ex.passages.size());
  }
}

}  // TEST_SUITE
