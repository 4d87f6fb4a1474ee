#include "xaqa/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "xaqa/eval.hpp"
#include "xaqa/infer.hpp"
#include "xaqa/rng.hpp"

namespace xaqa {

std::string to_string(SpanStrategy s) {
  switch (s) {
    case SpanStrategy::MultiLabel: return "multi_label";
    case SpanStrategy::FirstSpan: return "first_span";
    case SpanStrategy::MostLikely: return "most_likely";
  }
  return "first_span";
}

SpanStrategy parse_strategy(const std::string& name) {
  if (name == "multi_label") return SpanStrategy::MultiLabel;
  if (name == "first_span") return SpanStrategy::FirstSpan;
  if (name == "most_likely") return SpanStrategy::MostLikely;
  throw ContractError("unknown span strategy '" + name +
                      "' (expected multi_label, first_span or most_likely)");
}

void TrainConfig::validate() const {
  if (lambda < 0.0 || lambda > 1.0) throw ContractError("TrainConfig: lambda must lie in [0,1]");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0)
    throw ContractError("TrainConfig: warmup_frac must lie in [0,1)");
  if (lr <= 0.0) throw ContractError("TrainConfig: lr must be positive");
  if (epochs < 1 || batch_size < 1)
    throw ContractError("TrainConfig: epochs and batch_size must be >= 1");
  if (max_steps < 0) throw ContractError("TrainConfig: max_steps must be >= 0");
}

ExampleForward teacher_forced_forward(const Model& model, const QAExample& ex) {
  ExampleForward fwd;
  fwd.prefix.reserve(ex.answer.size() + 1);
  fwd.prefix.push_back(tokens::BOS);
  fwd.prefix.insert(fwd.prefix.end(), ex.answer.begin(), ex.answer.end());
  fwd.target = ex.answer;
  fwd.target.push_back(tokens::EOS);
  fwd.fused = model.encode(ex.question, ex.passages);
  fwd.dec = model.decode_forward(fwd.prefix, fwd.fused);
  return fwd;
}

Tensor generative_loss_from_logits(const Tensor& logits, const TokenSeq& target) {
  const std::size_t t = target.size();
  const std::size_t v = logits.cols();
  if (logits.rows() != t)
    throw ShapeError("generative_loss: logits rows " + std::to_string(logits.rows()) +
                     " vs target length " + std::to_string(t));
  std::vector<double> one_hot(t * v, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    if (target[i] < 0 || static_cast<std::size_t>(target[i]) >= v)
      throw ContractError("generative_loss: target token outside vocabulary");
    one_hot[i * v + static_cast<std::size_t>(target[i])] = 1.0;
  }
  Tensor probs = ops::softmax_rows(logits);
  Tensor total = ops::cross_entropy(probs, Tensor::matrix(t, v, std::move(one_hot)));
  return ops::scale(total, 1.0 / static_cast<double>(t));
}

Tensor generative_loss_t(const Model& model, const QAExample& ex) {
  ExampleForward fwd = teacher_forced_forward(model, ex);
  return generative_loss_from_logits(fwd.dec.logits, fwd.target);
}

double generative_loss(const Model& model, const QAExample& ex) {
  return generative_loss_t(model, ex).value();
}

namespace {

struct Anchor {
  std::size_t fused_start;
  std::size_t fused_end;
};

// Occurrences that survived passage truncation, in (passage, start) order.
std::vector<Anchor> usable_anchors(const QAExample& ex, const FusedEncoding& fused) {
  std::vector<Anchor> anchors;
  for (const GoldSpan& occ : ex.occurrences) {
    auto fs = fused.fused_index(occ.passage, occ.start);
    auto fe = fused.fused_index(occ.passage, occ.end);
    if (fs && fe) anchors.push_back({*fs, *fe});
  }
  return anchors;
}

}  // namespace

std::optional<SpanTargets> build_span_targets(
    const QAExample& ex, const FusedEncoding& fused, SpanStrategy strategy,
    const std::vector<AttentionRecord>* teacher_forced_records) {
  const std::vector<Anchor> anchors = usable_anchors(ex, fused);
  if (anchors.empty()) return std::nullopt;

  const std::size_t n = fused.fused_len();
  SpanTargets targets;
  targets.start.assign(n, 0.0);
  targets.end.assign(n, 0.0);

  switch (strategy) {
    case SpanStrategy::FirstSpan: {
      targets.start[anchors[0].fused_start] = 1.0;
      targets.end[anchors[0].fused_end] = 1.0;
      break;
    }
    case SpanStrategy::MultiLabel: {
      const double w = 1.0 / static_cast<double>(anchors.size());
      for (const Anchor& a : anchors) {
        targets.start[a.fused_start] += w;
        targets.end[a.fused_end] += w;
      }
      break;
    }
    case SpanStrategy::MostLikely: {
      if (!teacher_forced_records || teacher_forced_records->empty())
        throw ContractError("build_span_targets: most_likely needs teacher-forced attention");
      const std::size_t start_step = 0;
      const std::size_t end_step = ex.answer.size() - 1;
      if (end_step >= teacher_forced_records->size())
        throw ContractError("build_span_targets: records shorter than the answer");
      const std::vector<double>& p_start = (*teacher_forced_records)[start_step].probs_avg;
      const std::vector<double>& p_end = (*teacher_forced_records)[end_step].probs_avg;
      std::size_t best = 0;
      double best_score = -1.0;
      for (std::size_t i = 0; i < anchors.size(); ++i) {
        const double score = p_start[anchors[i].fused_start] * p_end[anchors[i].fused_end];
        if (score > best_score) {  // ties keep the earliest occurrence
          best_score = score;
          best = i;
        }
      }
      targets.start[anchors[best].fused_start] = 1.0;
      targets.end[anchors[best].fused_end] = 1.0;
      break;
    }
  }
  return targets;
}

Tensor span_loss_from_forward(const ExampleForward& fwd, const SpanTargets& targets) {
  if (!fwd.dec.cross_probs_avg.defined())
    throw ContractError("span_loss: forward pass has no recorded cross-attention");
  const std::size_t start_step = 0;
  const std::size_t end_step = fwd.target.size() - 2;  // step emitting the last answer token
  Tensor start_row = ops::pick_row(fwd.dec.cross_probs_avg, start_step);
  Tensor end_row = ops::pick_row(fwd.dec.cross_probs_avg, end_step);
  Tensor loss = ops::cross_entropy(start_row, Tensor::vector(targets.start));
  return ops::add(loss, ops::cross_entropy(end_row, Tensor::vector(targets.end)));
}

double span_loss(const Model& model, const QAExample& ex, SpanStrategy strategy) {
  ExampleForward fwd = teacher_forced_forward(model, ex);
  auto targets = build_span_targets(ex, fwd.fused, strategy, &fwd.dec.records);
  if (!targets) throw ContractError("span_loss: example has no usable gold occurrence");
  return span_loss_from_forward(fwd, *targets).value();
}

JointLossResult joint_loss(const Model& model, const QAExample& ex, const TrainConfig& cfg) {
  JointLossResult result;
  ExampleForward fwd = teacher_forced_forward(model, ex);
  Tensor gen = generative_loss_from_logits(fwd.dec.logits, fwd.target);
  result.gen = gen.value();

  if (cfg.lambda == 0.0) {
    result.loss = gen;
    return result;
  }

  result.targets_attempted = true;
  auto targets = build_span_targets(ex, fwd.fused, cfg.strategy, &fwd.dec.records);
  if (!targets) {
    result.loss = cfg.lambda == 1.0 ? ops::scale(gen, 0.0) : ops::scale(gen, 1.0 - cfg.lambda);
    return result;
  }

  Tensor span = span_loss_from_forward(fwd, *targets);
  result.span = span.value();
  result.span_used = true;
  if (cfg.lambda == 1.0) {
    result.loss = span;
    return result;
  }
  result.loss = ops::add(ops::scale(gen, 1.0 - cfg.lambda), ops::scale(span, cfg.lambda));
  return result;
}

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& [name, tensor] : params) {
    state.m.emplace_back(tensor.numel(), 0.0);
    state.v.emplace_back(tensor.numel(), 0.0);
  }
  return state;
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               double lr_t) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  if (state.m.size() != params.size())
    throw ContractError("adam_step: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& tensor = params[p].second;
    if (!tensor.has_grad()) continue;
    auto grad = tensor.grad_mut();
    auto values = tensor.values_mut();
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = grad[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr_t * m_hat / (std::sqrt(v_hat) + eps);
    }
    tensor.zero_grad();
  }
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  const long warmup = static_cast<long>(
      std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  return cfg.lr;
}

std::string metrics_line(const EpochMetrics& m) {
  nlohmann::json record = {{"epoch", m.epoch},         {"step", m.step},
                           {"loss_gen", m.loss_gen},   {"loss_span", m.loss_span},
                           {"loss_joint", m.loss_joint}, {"dev_em_gen", m.dev_em_gen},
                           {"dev_em_ext", m.dev_em_ext}};
  return record.dump();
}

TrainResult train(const std::vector<QAExample>& train_set, const std::vector<QAExample>& dev_set,
                  const ModelConfig& mcfg, const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");

  TrainResult result{Model(mcfg, tcfg.seed)};
  AdamState adam = make_adam_state(result.model.parameters());

  const long n = static_cast<long>(train_set.size());
  const long steps_per_epoch = (n + tcfg.batch_size - 1) / tcfg.batch_size;
  long total_steps = steps_per_epoch * tcfg.epochs;
  if (tcfg.max_steps > 0) total_steps = std::min(total_steps, tcfg.max_steps);

  std::ofstream metrics_out;
  if (!tcfg.metrics_path.empty()) {
    metrics_out.open(tcfg.metrics_path, std::ios::binary);
    if (!metrics_out) throw IoError("cannot open " + tcfg.metrics_path + " for writing");
  }

  Rng shuffle_rng(Rng::mix(tcfg.seed, 0x73687566666c65ull));
  std::vector<std::size_t> order(train_set.size());
  InferenceConfig dev_cfg;  // greedy decoding for validation

  long step = 0;
  for (int epoch = 0; epoch < tcfg.epochs && step < total_steps; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);

    double sum_gen = 0.0, sum_span = 0.0, sum_joint = 0.0;
    long count_gen = 0, count_span = 0, batches = 0;

    for (long b = 0; b < steps_per_epoch && step < total_steps; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * tcfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + tcfg.batch_size);
      Graph graph;
      double batch_value = 0.0;
      {
        Graph::Scope scope(graph);
        Tensor batch_loss;
        for (std::size_t i = lo; i < hi; ++i) {
          JointLossResult r = joint_loss(result.model, train_set[order[i]], tcfg);
          sum_gen += r.gen;
          ++count_gen;
          if (r.span_used) {
            sum_span += r.span;
            ++count_span;
          }
          if (r.targets_attempted) ++result.span_target_builds;
          batch_loss = batch_loss.defined() ? ops::add(batch_loss, r.loss) : r.loss;
        }
        batch_loss = ops::scale(batch_loss, 1.0 / static_cast<double>(hi - lo));
        batch_value = batch_loss.value();
        if (!std::isfinite(batch_value))
          throw TrainingDiverged("train: loss became non-finite", step);
        graph.backward(batch_loss);
      }
      adam_step(result.model.parameters(), adam, lr_at(step, total_steps, tcfg));
      sum_joint += batch_value;
      ++batches;
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = step;
    m.loss_gen = count_gen ? sum_gen / static_cast<double>(count_gen) : 0.0;
    m.loss_span = count_span ? sum_span / static_cast<double>(count_span) : 0.0;
    m.loss_joint = batches ? sum_joint / static_cast<double>(batches) : 0.0;
    if (!dev_set.empty()) {
      DevScores dev = evaluate_dev(result.model, dev_set, dev_cfg);
      m.dev_em_gen = dev.em_gen;
      m.dev_em_ext = dev.em_ext;
      const double score = dev.em_gen + dev.em_ext;
      if (score > result.best_dev_score) {
        result.best_dev_score = score;
        result.best_dev_em_gen = dev.em_gen;
        result.best_dev_em_ext = dev.em_ext;
        result.best = result.model.clone();
        if (!tcfg.checkpoint_path.empty()) result.model.save(tcfg.checkpoint_path);
      }
    }
    result.history.push_back(m);
    if (metrics_out) metrics_out << metrics_line(m) << '\n' << std::flush;
  }

  result.steps = step;
  if (!tcfg.checkpoint_path.empty() && dev_set.empty()) result.model.save(tcfg.checkpoint_path);
  return result;
}

}  // namespace xaqa
