#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

#include "xaqa/infer.hpp"
#include "xaqa/train.hpp"

namespace xaqa {

/// 1 iff the token sequences are identical.
int exact_match(const TokenSeq& pred, const TokenSeq& gold);

/// Bag-of-tokens F1; both empty -> 1, exactly one empty -> 0.
double token_f1(const TokenSeq& pred, const TokenSeq& gold);

/// (#relevant in top k) / k; lists shorter than k pad with irrelevant.
double precision_at_k(const std::vector<int>& relevance, int k);

/// Binary-relevance nDCG with DCG = sum rel_r / log2(r+1); zero relevant -> 0.
double ndcg_at_k(const std::vector<int>& relevance, int k);

struct DevScores {
  double em_gen = 0.0, em_ext = 0.0;
  double f1_gen = 0.0, f1_ext = 0.0;
  double hallucination_rate = 0.0;
  int count = 0;
};

/// Inference over a whole dataset, parallel over examples under XAQA_THREADS;
/// results are slotted by index so downstream reductions stay deterministic.
std::vector<InferenceOutput> run_all_inference(const Model& model,
                                               const std::vector<QAExample>& dataset,
                                               const InferenceConfig& cfg);

/// Greedy-decode EM/F1 for generative and attention-extracted answers over a
/// dev set; parallel over examples under XAQA_THREADS with ordered reduction.
DevScores evaluate_dev(const Model& model, const std::vector<QAExample>& dev,
                       const InferenceConfig& cfg);
DevScores evaluate_dev(const std::vector<QAExample>& dev,
                       const std::vector<InferenceOutput>& outputs);

struct StrategyScores {
  double em = 0.0, f1 = 0.0;
};

/// Table of answer-resolution strategies on the answerable subset.
struct HallucinationReport {
  int total = 0;
  int effective = 0;  // answerable examples actually evaluated
  double hallucination_rate = 0.0;
  StrategyScores generative, attention, drop, backoff;
};

HallucinationReport run_hallucination_experiment(const Model& model,
                                                 const std::vector<QAExample>& dataset,
                                                 const InferenceConfig& cfg);
HallucinationReport run_hallucination_experiment(const std::vector<QAExample>& dataset,
                                                 const std::vector<InferenceOutput>& outputs);

struct RankMetrics {
  std::map<int, double> p_at;  // k -> mean P@k
  int ndcg_k = 0;
  double ndcg = 0.0;
};

struct RerankReport {
  int queries = 0;
  std::vector<int> ks;
  RankMetrics original;  // identity (retrieval-order) baseline
  RankMetrics reranked;  // ordered by passage score, ties stable
};

/// Ranks passages by attention-derived scores and compares P@k / nDCG@k
/// against the original order. Relevance: the passage contains the gold
/// answer. Empty `ks` picks {1, 5, 20} clipped to the passage count.
RerankReport run_rerank_experiment(const Model& model, const std::vector<QAExample>& dataset,
                                   const InferenceConfig& cfg, std::vector<int> ks = {});

struct AblationCell {
  double lambda = 0.0;
  SpanStrategy strategy = SpanStrategy::FirstSpan;
  double dev_em_gen = 0.0, dev_em_ext = 0.0;
  double loss_gen = 0.0, loss_span = 0.0;
};

struct AblationReport {
  std::vector<AblationCell> cells;
};

/// Trains one model per (lambda, strategy) grid cell with matched seeds and
/// budget and reports dev EM curves; lambda 0 is the shared baseline.
AblationReport run_lambda_ablation(const std::vector<QAExample>& train_set,
                                   const std::vector<QAExample>& dev_set, const ModelConfig& mcfg,
                                   const TrainConfig& base, const std::vector<double>& lambdas,
                                   const std::vector<SpanStrategy>& strategies);

struct EvalReport {
  std::optional<DevScores> answers;
  std::optional<HallucinationReport> hallucination;
  std::optional<RerankReport> rerank;
  std::optional<AblationReport> ablation;
};

/// Human-readable sections plus a machine-readable line-delimited variant.
void write_report_text(std::ostream& out, const EvalReport& report);
void write_report_jsonl(std::ostream& out, const EvalReport& report);

}  // namespace xaqa
