#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "xaqa/eval.hpp"
#include "xaqa/train.hpp"
#include "xaqa/viz.hpp"

namespace py = pybind11;
using namespace xaqa;

namespace {

py::dict dev_scores_dict(const DevScores& s) {
  py::dict d;
  d["em_gen"] = s.em_gen;
  d["em_ext"] = s.em_ext;
  d["f1_gen"] = s.f1_gen;
  d["f1_ext"] = s.f1_ext;
  d["hallucination_rate"] = s.hallucination_rate;
  d["count"] = s.count;
  return d;
}

py::dict hallucination_dict(const HallucinationReport& h) {
  py::dict d;
  d["total"] = h.total;
  d["effective"] = h.effective;
  d["hallucination_rate"] = h.hallucination_rate;
  d["em_generative"] = h.generative.em;
  d["em_attention"] = h.attention.em;
  d["em_drop"] = h.drop.em;
  d["em_backoff"] = h.backoff.em;
  d["f1_generative"] = h.generative.f1;
  d["f1_attention"] = h.attention.f1;
  d["f1_drop"] = h.drop.f1;
  d["f1_backoff"] = h.backoff.f1;
  return d;
}

py::dict rank_metrics_dict(const RankMetrics& m) {
  py::dict d;
  for (const auto& [k, v] : m.p_at) d[py::str("p_at_" + std::to_string(k))] = v;
  d["ndcg"] = m.ndcg;
  d["ndcg_k"] = m.ndcg_k;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cross-attention span-extraction QA lab";

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<ContractError>(m, "ContractError");
  py::register_exception<ParseError>(m, "ParseFileError");
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged");

  py::class_<GoldSpan>(m, "GoldSpan")
      .def(py::init<>())
      .def_readwrite("passage", &GoldSpan::passage)
      .def_readwrite("start", &GoldSpan::start)
      .def_readwrite("end", &GoldSpan::end)
      .def("__repr__", [](const GoldSpan& s) {
        return "GoldSpan(passage=" + std::to_string(s.passage) + ", start=" +
               std::to_string(s.start) + ", end=" + std::to_string(s.end) + ")";
      });

  py::class_<QAExample>(m, "QAExample")
      .def(py::init<>())
      .def_readwrite("id", &QAExample::id)
      .def_readwrite("question", &QAExample::question)
      .def_readwrite("passages", &QAExample::passages)
      .def_readwrite("answer", &QAExample::answer)
      .def_readwrite("occurrences", &QAExample::occurrences)
      .def_readwrite("answerable", &QAExample::answerable);

  py::class_<GenSpec>(m, "GenSpec")
      .def(py::init<>())
      .def_readwrite("vocab_size", &GenSpec::vocab_size)
      .def_readwrite("n_passages", &GenSpec::n_passages)
      .def_readwrite("passage_len", &GenSpec::passage_len)
      .def_readwrite("answer_len_min", &GenSpec::answer_len_min)
      .def_readwrite("answer_len_max", &GenSpec::answer_len_max)
      .def_readwrite("p_multi_occurrence", &GenSpec::p_multi_occurrence)
      .def_readwrite("p_unanswerable", &GenSpec::p_unanswerable)
      .def_readwrite("seed", &GenSpec::seed);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_enc_layers", &ModelConfig::n_enc_layers)
      .def_readwrite("n_dec_layers", &ModelConfig::n_dec_layers)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("max_decode_len", &ModelConfig::max_decode_len);

  py::enum_<SpanStrategy>(m, "SpanStrategy")
      .value("MULTI_LABEL", SpanStrategy::MultiLabel)
      .value("FIRST_SPAN", SpanStrategy::FirstSpan)
      .value("MOST_LIKELY", SpanStrategy::MostLikely);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lambda_", &TrainConfig::lambda)
      .def_readwrite("strategy", &TrainConfig::strategy)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("warmup_frac", &TrainConfig::warmup_frac)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("max_steps", &TrainConfig::max_steps)
      .def_readwrite("checkpoint_path", &TrainConfig::checkpoint_path)
      .def_readwrite("metrics_path", &TrainConfig::metrics_path);

  py::class_<InferenceConfig>(m, "InferenceConfig")
      .def(py::init<>())
      .def_readwrite("beam_size", &InferenceConfig::beam_size)
      .def_readwrite("l_max", &InferenceConfig::l_max)
      .def_readwrite("mask_non_context", &InferenceConfig::mask_non_context);

  py::class_<SpanPrediction>(m, "SpanPrediction")
      .def_readonly("passage", &SpanPrediction::passage)
      .def_readonly("start", &SpanPrediction::start)
      .def_readonly("end", &SpanPrediction::end)
      .def_readonly("score", &SpanPrediction::score)
      .def_readonly("tokens", &SpanPrediction::tokens);

  py::class_<AttentionRecord>(m, "AttentionRecord")
      .def_readonly("step", &AttentionRecord::step)
      .def_readonly("probs_per_head", &AttentionRecord::probs_per_head)
      .def_readonly("probs_avg", &AttentionRecord::probs_avg);

  py::class_<DecodeResult>(m, "DecodeResult")
      .def_readonly("generated", &DecodeResult::generated)
      .def_readonly("records", &DecodeResult::records)
      .def_readonly("beam_score", &DecodeResult::beam_score)
      .def_readonly("truncated", &DecodeResult::truncated);

  py::class_<Model>(m, "Model")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &Model::config)
      .def("save", &Model::save, py::arg("path"))
      .def_static("load", &Model::load, py::arg("path"))
      .def("clone", &Model::clone);

  m.def("generate_dataset", &generate_dataset, py::arg("spec"), py::arg("count"));
  m.def("generate_example", &generate_example, py::arg("spec"), py::arg("index"));
  m.def("find_occurrences", &find_occurrences, py::arg("answer"), py::arg("passages"));
  m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("dataset"));
  m.def("load_dataset", &load_dataset, py::arg("path"));

  m.def(
      "train",
      [](const std::vector<QAExample>& train_set, const std::vector<QAExample>& dev_set,
         const ModelConfig& mcfg, const TrainConfig& tcfg) {
        TrainResult result = train(train_set, dev_set, mcfg, tcfg);
        py::list history;
        for (const EpochMetrics& e : result.history) {
          py::dict row;
          row["epoch"] = e.epoch;
          row["step"] = e.step;
          row["loss_gen"] = e.loss_gen;
          row["loss_span"] = e.loss_span;
          row["loss_joint"] = e.loss_joint;
          row["dev_em_gen"] = e.dev_em_gen;
          row["dev_em_ext"] = e.dev_em_ext;
          history.append(row);
        }
        py::dict out;
        out["model"] = result.best ? *result.best : result.model;
        out["final_model"] = result.model;
        out["history"] = history;
        out["steps"] = result.steps;
        return out;
      },
      py::arg("train_set"), py::arg("dev_set"), py::arg("model_config"), py::arg("train_config"),
      "Train a model; returns the best-dev snapshot, final model and history.");

  m.def(
      "generate",
      [](const Model& model, const QAExample& ex, const InferenceConfig& cfg) {
        return generate(model, ex, cfg);
      },
      py::arg("model"), py::arg("example"), py::arg("config"));

  m.def(
      "run_inference",
      [](const Model& model, const QAExample& ex, const InferenceConfig& cfg) {
        InferenceOutput out = run_inference(model, ex, cfg);
        py::dict d;
        d["generated"] = out.generative;
        d["beam_score"] = out.decode.beam_score;
        d["hallucinated"] = out.hallucinated;
        d["attention"] = out.attention;
        d["drop"] = out.drop;
        d["backoff"] = out.backoff;
        d["passage_scores"] = out.scores;
        if (out.span)
          d["span"] = *out.span;
        else
          d["span"] = py::none();
        return d;
      },
      py::arg("model"), py::arg("example"), py::arg("config"));

  m.def("is_hallucination", &is_hallucination, py::arg("answer"), py::arg("passages"));
  m.def("exact_match", &exact_match, py::arg("pred"), py::arg("gold"));
  m.def("token_f1", &token_f1, py::arg("pred"), py::arg("gold"));
  m.def("precision_at_k", &precision_at_k, py::arg("relevance"), py::arg("k"));
  m.def("ndcg_at_k", &ndcg_at_k, py::arg("relevance"), py::arg("k"));

  m.def(
      "evaluate_dev",
      [](const Model& model, const std::vector<QAExample>& dev, const InferenceConfig& cfg) {
        return dev_scores_dict(evaluate_dev(model, dev, cfg));
      },
      py::arg("model"), py::arg("dev"), py::arg("config"));

  m.def(
      "run_hallucination_experiment",
      [](const Model& model, const std::vector<QAExample>& dataset, const InferenceConfig& cfg) {
        return hallucination_dict(run_hallucination_experiment(model, dataset, cfg));
      },
      py::arg("model"), py::arg("dataset"), py::arg("config"));

  m.def(
      "run_rerank_experiment",
      [](const Model& model, const std::vector<QAExample>& dataset, const InferenceConfig& cfg) {
        RerankReport r = run_rerank_experiment(model, dataset, cfg);
        py::dict d;
        d["queries"] = r.queries;
        d["original"] = rank_metrics_dict(r.original);
        d["reranked"] = rank_metrics_dict(r.reranked);
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("config"));

  m.def(
      "render_heatmap",
      [](const Model& model, const QAExample& ex, const InferenceConfig& cfg,
         const std::filesystem::path& out_base) {
        const FusedEncoding fused = model.encode(ex.question, ex.passages);
        DecodeResult result = generate(model, fused, cfg);
        if (result.generated.empty())
          throw ContractError("render_heatmap: model generated nothing");
        render_heatmap(result, fused, out_base);
      },
      py::arg("model"), py::arg("example"), py::arg("config"), py::arg("out_base"));

  m.attr("PAD") = tokens::PAD;
  m.attr("BOS") = tokens::BOS;
  m.attr("EOS") = tokens::EOS;
  m.attr("SEP") = tokens::SEP;
}
