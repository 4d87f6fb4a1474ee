#include "xaqa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "xaqa/util.hpp"

namespace xaqa {

using nlohmann::json;

int exact_match(const TokenSeq& pred, const TokenSeq& gold) { return pred == gold ? 1 : 0; }

double token_f1(const TokenSeq& pred, const TokenSeq& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<Token, int> gold_counts;
  for (Token t : gold) ++gold_counts[t];
  int overlap = 0;
  for (Token t : pred) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

double precision_at_k(const std::vector<int>& relevance, int k) {
  if (k < 1) throw ContractError("precision_at_k: k must be >= 1");
  int hits = 0;
  for (int r = 0; r < k && r < static_cast<int>(relevance.size()); ++r)
    if (relevance[static_cast<std::size_t>(r)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

double ndcg_at_k(const std::vector<int>& relevance, int k) {
  if (k < 1) throw ContractError("ndcg_at_k: k must be >= 1");
  auto dcg = [k](const std::vector<int>& rel) {
    double total = 0.0;
    for (int r = 0; r < k && r < static_cast<int>(rel.size()); ++r)
      if (rel[static_cast<std::size_t>(r)])
        total += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    return total;
  };
  std::vector<int> ideal = relevance;
  std::sort(ideal.begin(), ideal.end(), std::greater<int>());
  const double idcg = dcg(ideal);
  if (idcg == 0.0) return 0.0;
  return dcg(relevance) / idcg;
}

std::vector<InferenceOutput> run_all_inference(const Model& model,
                                               const std::vector<QAExample>& dataset,
                                               const InferenceConfig& cfg) {
  std::vector<InferenceOutput> outputs(dataset.size());
  parallel_for(dataset.size(),
               [&](std::size_t i) { outputs[i] = run_inference(model, dataset[i], cfg); });
  return outputs;
}

DevScores evaluate_dev(const Model& model, const std::vector<QAExample>& dev,
                       const InferenceConfig& cfg) {
  return evaluate_dev(dev, run_all_inference(model, dev, cfg));
}

DevScores evaluate_dev(const std::vector<QAExample>& dev,
                       const std::vector<InferenceOutput>& outputs) {
  DevScores scores;
  scores.count = static_cast<int>(dev.size());
  if (dev.empty()) return scores;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    const InferenceOutput& out = outputs[i];
    scores.em_gen += exact_match(out.generative, dev[i].answer);
    scores.f1_gen += token_f1(out.generative, dev[i].answer);
    scores.em_ext += exact_match(out.attention, dev[i].answer);
    scores.f1_ext += token_f1(out.attention, dev[i].answer);
    scores.hallucination_rate += out.hallucinated ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(dev.size());
  scores.em_gen /= n;
  scores.f1_gen /= n;
  scores.em_ext /= n;
  scores.f1_ext /= n;
  scores.hallucination_rate /= n;
  return scores;
}

HallucinationReport run_hallucination_experiment(const Model& model,
                                                 const std::vector<QAExample>& dataset,
                                                 const InferenceConfig& cfg) {
  std::vector<const QAExample*> effective;
  for (const QAExample& ex : dataset)
    if (!find_occurrences(ex.answer, ex.passages).empty()) effective.push_back(&ex);
  std::vector<QAExample> subset;
  subset.reserve(effective.size());
  for (const QAExample* ex : effective) subset.push_back(*ex);
  HallucinationReport report = run_hallucination_experiment(subset, run_all_inference(model, subset, cfg));
  report.total = static_cast<int>(dataset.size());
  return report;
}

HallucinationReport run_hallucination_experiment(const std::vector<QAExample>& dataset,
                                                 const std::vector<InferenceOutput>& outputs) {
  HallucinationReport report;
  report.total = static_cast<int>(dataset.size());
  std::vector<std::size_t> effective;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (!find_occurrences(dataset[i].answer, dataset[i].passages).empty()) effective.push_back(i);
  report.effective = static_cast<int>(effective.size());
  if (effective.empty()) return report;

  for (std::size_t idx : effective) {
    const TokenSeq& gold = dataset[idx].answer;
    const InferenceOutput& out = outputs[idx];
    report.hallucination_rate += out.hallucinated ? 1.0 : 0.0;
    report.generative.em += exact_match(out.generative, gold);
    report.generative.f1 += token_f1(out.generative, gold);
    report.attention.em += exact_match(out.attention, gold);
    report.attention.f1 += token_f1(out.attention, gold);
    report.drop.em += exact_match(out.drop, gold);
    report.drop.f1 += token_f1(out.drop, gold);
    report.backoff.em += exact_match(out.backoff, gold);
    report.backoff.f1 += token_f1(out.backoff, gold);
  }
  const double n = static_cast<double>(effective.size());
  report.hallucination_rate /= n;
  for (StrategyScores* s : {&report.generative, &report.attention, &report.drop, &report.backoff}) {
    s->em /= n;
    s->f1 /= n;
  }
  return report;
}

namespace {

std::vector<int> relevance_flags(const QAExample& ex) {
  std::vector<int> rel(ex.passages.size(), 0);
  for (std::size_t p = 0; p < ex.passages.size(); ++p)
    rel[p] = is_hallucination(ex.answer, {ex.passages[p]}) ? 0 : 1;
  return rel;
}

void accumulate_rank_metrics(RankMetrics& metrics, const std::vector<int>& relevance,
                             const std::vector<int>& ks, int ndcg_k) {
  for (int k : ks) metrics.p_at[k] += precision_at_k(relevance, k);
  metrics.ndcg += ndcg_at_k(relevance, ndcg_k);
}

}  // namespace

RerankReport run_rerank_experiment(const Model& model, const std::vector<QAExample>& dataset,
                                   const InferenceConfig& cfg, std::vector<int> ks) {
  RerankReport report;
  if (dataset.empty()) return report;
  const int n_passages = static_cast<int>(dataset.front().passages.size());
  if (ks.empty()) {
    for (int k : {1, 5, 20})
      if (k <= n_passages) ks.push_back(k);
    if (ks.empty()) ks.push_back(1);
  }
  report.ks = ks;
  const int ndcg_k = std::min(20, n_passages);
  report.original.ndcg_k = report.reranked.ndcg_k = ndcg_k;

  std::vector<const QAExample*> effective;
  for (const QAExample& ex : dataset)
    if (!find_occurrences(ex.answer, ex.passages).empty()) effective.push_back(&ex);
  report.queries = static_cast<int>(effective.size());
  if (effective.empty()) return report;

  std::vector<InferenceOutput> outputs(effective.size());
  parallel_for(effective.size(),
               [&](std::size_t i) { outputs[i] = run_inference(model, *effective[i], cfg); });

  for (std::size_t i = 0; i < effective.size(); ++i) {
    const QAExample& ex = *effective[i];
    const std::vector<int> original = relevance_flags(ex);
    accumulate_rank_metrics(report.original, original, ks, ndcg_k);

    std::vector<std::size_t> order(ex.passages.size());
    std::iota(order.begin(), order.end(), 0);
    if (!outputs[i].scores.empty()) {
      const std::vector<double>& scores = outputs[i].scores;
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    }
    std::vector<int> reranked(original.size());
    for (std::size_t r = 0; r < order.size(); ++r) reranked[r] = original[order[r]];
    accumulate_rank_metrics(report.reranked, reranked, ks, ndcg_k);
  }

  const double n = static_cast<double>(effective.size());
  for (RankMetrics* m : {&report.original, &report.reranked}) {
    for (auto& [k, v] : m->p_at) v /= n;
    m->ndcg /= n;
  }
  return report;
}

AblationReport run_lambda_ablation(const std::vector<QAExample>& train_set,
                                   const std::vector<QAExample>& dev_set, const ModelConfig& mcfg,
                                   const TrainConfig& base, const std::vector<double>& lambdas,
                                   const std::vector<SpanStrategy>& strategies) {
  AblationReport report;
  for (SpanStrategy strategy : strategies) {
    for (double lambda : lambdas) {
      TrainConfig cfg = base;
      cfg.lambda = lambda;
      cfg.strategy = strategy;
      cfg.checkpoint_path.clear();
      cfg.metrics_path.clear();
      TrainResult result = train(train_set, dev_set, mcfg, cfg);
      AblationCell cell;
      cell.lambda = lambda;
      cell.strategy = strategy;
      if (!result.history.empty()) {
        cell.dev_em_gen = result.history.back().dev_em_gen;
        cell.dev_em_ext = result.history.back().dev_em_ext;
        cell.loss_gen = result.history.back().loss_gen;
        cell.loss_span = result.history.back().loss_span;
      }
      report.cells.push_back(cell);
    }
  }
  return report;
}

namespace {

void print_rank_metrics(std::ostream& out, const char* label, const RankMetrics& m) {
  out << "  " << label << ":";
  for (const auto& [k, v] : m.p_at)
    out << "  P@" << k << " " << std::fixed << std::setprecision(4) << v;
  out << "  nDCG@" << m.ndcg_k << " " << std::fixed << std::setprecision(4) << m.ndcg << "\n";
}

}  // namespace

void write_report_text(std::ostream& out, const EvalReport& report) {
  out << "== answer metrics ==\n";
  if (report.answers) {
    const DevScores& a = *report.answers;
    out << std::fixed << std::setprecision(4);
    out << "  examples: " << a.count << "\n";
    out << "  generative  EM " << a.em_gen << "  F1 " << a.f1_gen << "\n";
    out << "  extractive  EM " << a.em_ext << "  F1 " << a.f1_ext << "\n";
    out << "  hallucination rate " << a.hallucination_rate << "\n";
  } else {
    out << "  (not run)\n";
  }

  out << "== hallucination strategies ==\n";
  if (report.hallucination) {
    const HallucinationReport& h = *report.hallucination;
    out << std::fixed << std::setprecision(4);
    out << "  effective queries: " << h.effective << " of " << h.total << "\n";
    out << "  hallucination rate: " << h.hallucination_rate << "\n";
    out << "  EM  generative " << h.generative.em << "  attention " << h.attention.em << "  drop "
        << h.drop.em << "  backoff " << h.backoff.em << "\n";
    out << "  F1  generative " << h.generative.f1 << "  attention " << h.attention.f1 << "  drop "
        << h.drop.f1 << "  backoff " << h.backoff.f1 << "\n";
  } else {
    out << "  (not run)\n";
  }

  out << "== passage reranking ==\n";
  if (report.rerank) {
    out << "  queries: " << report.rerank->queries << "\n";
    print_rank_metrics(out, "original", report.rerank->original);
    print_rank_metrics(out, "reranked", report.rerank->reranked);
  } else {
    out << "  (not run)\n";
  }

  out << "== lambda ablation ==\n";
  if (report.ablation) {
    out << std::fixed << std::setprecision(4);
    for (const AblationCell& c : report.ablation->cells)
      out << "  strategy " << to_string(c.strategy) << "  lambda " << c.lambda << "  dev_em_gen "
          << c.dev_em_gen << "  dev_em_ext " << c.dev_em_ext << "\n";
  } else {
    out << "  (not run)\n";
  }
}

void write_report_jsonl(std::ostream& out, const EvalReport& report) {
  if (report.answers) {
    const DevScores& a = *report.answers;
    out << json{{"section", "answers"},
                {"count", a.count},
                {"em_gen", a.em_gen},
                {"f1_gen", a.f1_gen},
                {"em_ext", a.em_ext},
                {"f1_ext", a.f1_ext},
                {"hallucination_rate", a.hallucination_rate}}
               .dump()
        << '\n';
  }
  if (report.hallucination) {
    const HallucinationReport& h = *report.hallucination;
    out << json{{"section", "hallucination"},
                {"total", h.total},
                {"effective", h.effective},
                {"hallucination_rate", h.hallucination_rate},
                {"em_generative", h.generative.em},
                {"em_attention", h.attention.em},
                {"em_drop", h.drop.em},
                {"em_backoff", h.backoff.em}}
               .dump()
        << '\n';
  }
  if (report.rerank) {
    json original = json::object(), reranked = json::object();
    for (const auto& [k, v] : report.rerank->original.p_at) original["p_at_" + std::to_string(k)] = v;
    for (const auto& [k, v] : report.rerank->reranked.p_at) reranked["p_at_" + std::to_string(k)] = v;
    original["ndcg"] = report.rerank->original.ndcg;
    reranked["ndcg"] = report.rerank->reranked.ndcg;
    out << json{{"section", "rerank"},
                {"queries", report.rerank->queries},
                {"ndcg_k", report.rerank->original.ndcg_k},
                {"original", original},
                {"reranked", reranked}}
               .dump()
        << '\n';
  }
  if (report.ablation) {
    for (const AblationCell& c : report.ablation->cells)
      out << json{{"section", "ablation"},
                  {"lambda", c.lambda},
                  {"strategy", to_string(c.strategy)},
                  {"dev_em_gen", c.dev_em_gen},
                  {"dev_em_ext", c.dev_em_ext},
                  {"loss_gen", c.loss_gen},
                  {"loss_span", c.loss_span}}
                 .dump()
          << '\n';
  }
}

}  // namespace xaqa
