#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xaqa/model.hpp"

namespace xaqa {

enum class SpanStrategy { MultiLabel, FirstSpan, MostLikely };

std::string to_string(SpanStrategy s);
SpanStrategy parse_strategy(const std::string& name);

struct TrainConfig {
  double lambda = 0.5;                   // weight of the span loss in [0,1]
  SpanStrategy strategy = SpanStrategy::FirstSpan;
  double lr = 1e-3;
  double warmup_frac = 0.1;              // fraction of total steps with linear warmup
  int epochs = 10;
  int batch_size = 16;
  std::uint64_t seed = 0;
  long max_steps = 0;                    // 0 = bounded by epochs only
  std::string checkpoint_path;           // saved on dev improvement when set
  std::string metrics_path;              // line-delimited epoch metrics when set
  void validate() const;
};

/// Start/end probability targets over fused positions. Support lies only on
/// context tokens of passages holding a gold occurrence.
struct SpanTargets {
  std::vector<double> start, end;
};

/// Teacher-forced pass shared by the losses: decoder input BOS+answer,
/// prediction targets answer+EOS.
struct ExampleForward {
  FusedEncoding fused;
  DecoderForward dec;
  TokenSeq prefix;
  TokenSeq target;
};

ExampleForward teacher_forced_forward(const Model& model, const QAExample& ex);

/// Mean over target positions of -log Pr(token); softmax probabilities are
/// consumed directly with the cross-entropy epsilon floor.
Tensor generative_loss_from_logits(const Tensor& logits, const TokenSeq& target);
Tensor generative_loss_t(const Model& model, const QAExample& ex);
double generative_loss(const Model& model, const QAExample& ex);

/// Distant-supervision targets; nullopt for unanswerable examples (the span
/// loss is skipped and the example counts only toward the generative loss).
/// MostLikely requires the current teacher-forced attention records.
std::optional<SpanTargets> build_span_targets(
    const QAExample& ex, const FusedEncoding& fused, SpanStrategy strategy,
    const std::vector<AttentionRecord>* teacher_forced_records = nullptr);

/// Cross-entropy of the head-averaged last-layer attention at the first and
/// last answer decode steps against the targets (sum of the two terms).
Tensor span_loss_from_forward(const ExampleForward& fwd, const SpanTargets& targets);
double span_loss(const Model& model, const QAExample& ex, SpanStrategy strategy);

struct JointLossResult {
  Tensor loss;
  double gen = 0.0;
  double span = 0.0;
  bool span_used = false;
  bool targets_attempted = false;
};

/// (1-lambda) * gen + lambda * span from one shared forward pass. lambda=0
/// returns the generative loss tensor itself and never builds span targets;
/// lambda=1 on answerable examples returns the span loss tensor itself.
JointLossResult joint_loss(const Model& model, const QAExample& ex, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params);
/// Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction;
/// consumes and clears the accumulated gradients.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr_t);

/// Linear warmup from lr/W at the first step up to lr over
/// W = ceil(warmup_frac * total_steps) steps, constant afterwards.
double lr_at(long step, long total_steps, const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  long step = 0;
  double loss_gen = 0.0, loss_span = 0.0, loss_joint = 0.0;
  double dev_em_gen = 0.0, dev_em_ext = 0.0;
};

struct TrainResult {
  Model model;                 // final parameters
  std::optional<Model> best;   // snapshot at the best dev score, when dev ran
  std::vector<EpochMetrics> history;
  long steps = 0;
  long span_target_builds = 0;
  double best_dev_score = -1.0;
  double best_dev_em_gen = 0.0, best_dev_em_ext = 0.0;
};

std::string metrics_line(const EpochMetrics& m);

TrainResult train(const std::vector<QAExample>& train_set, const std::vector<QAExample>& dev_set,
                  const ModelConfig& mcfg, const TrainConfig& tcfg);

}  // namespace xaqa
