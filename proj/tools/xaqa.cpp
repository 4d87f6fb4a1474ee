#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xaqa/eval.hpp"
#include "xaqa/train.hpp"
#include "xaqa/viz.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ModelFlags {
  xaqa::ModelConfig cfg;
  void attach(CLI::App* cmd) {
    cmd->add_option("--vocab", cfg.vocab_size, "vocabulary size including special tokens")
        ->capture_default_str();
    cmd->add_option("--d-model", cfg.d_model, "embedding width")->capture_default_str();
    cmd->add_option("--heads", cfg.n_heads, "attention heads")->capture_default_str();
    cmd->add_option("--enc-layers", cfg.n_enc_layers, "encoder layers")->capture_default_str();
    cmd->add_option("--dec-layers", cfg.n_dec_layers, "decoder layers")->capture_default_str();
    cmd->add_option("--d-ff", cfg.d_ff, "feed-forward width")->capture_default_str();
    cmd->add_option("--max-seq-len", cfg.max_seq_len, "positions per encoder segment")
        ->capture_default_str();
    cmd->add_option("--max-decode-len", cfg.max_decode_len, "decoder prefix cap")
        ->capture_default_str();
  }
};

struct TrainFlags {
  xaqa::TrainConfig cfg;
  std::string strategy = "first_span";
  void attach(CLI::App* cmd) {
    cmd->add_option("--lambda", cfg.lambda, "span loss weight")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--strategy", strategy, "span target strategy")
        ->check(CLI::IsMember({"multi_label", "first_span", "most_likely"}))
        ->capture_default_str();
    cmd->add_option("--lr", cfg.lr, "learning rate")->capture_default_str();
    cmd->add_option("--warmup", cfg.warmup_frac, "warmup fraction of total steps")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--epochs", cfg.epochs, "training epochs")->capture_default_str();
    cmd->add_option("--batch", cfg.batch_size, "batch size")->capture_default_str();
    cmd->add_option("--max-steps", cfg.max_steps, "optimizer step cap, 0 = epochs only")
        ->capture_default_str();
  }
  xaqa::TrainConfig resolved(std::uint64_t seed) const {
    xaqa::TrainConfig out = cfg;
    out.strategy = xaqa::parse_strategy(strategy);
    out.seed = seed;
    return out;
  }
};

struct InferFlags {
  xaqa::InferenceConfig cfg;
  void attach(CLI::App* cmd) {
    cmd->add_option("--beam", cfg.beam_size, "beam size, 1 = greedy")
        ->check(CLI::Range(1, 64))
        ->capture_default_str();
    cmd->add_option("--l-max", cfg.l_max, "maximum extracted span length")
        ->check(CLI::Range(1, 1024))
        ->capture_default_str();
    cmd->add_flag("!--no-mask-non-context", cfg.mask_non_context,
                  "keep question/SEP mass in the span distributions");
  }
};

void check_vocab_covers(const std::vector<xaqa::QAExample>& dataset, int vocab_size) {
  xaqa::Token max_token = 0;
  for (const xaqa::QAExample& ex : dataset) {
    for (xaqa::Token t : ex.question) max_token = std::max(max_token, t);
    for (const xaqa::TokenSeq& p : ex.passages)
      for (xaqa::Token t : p) max_token = std::max(max_token, t);
    for (xaqa::Token t : ex.answer) max_token = std::max(max_token, t);
  }
  if (max_token >= vocab_size)
    throw xaqa::ContractError("--vocab " + std::to_string(vocab_size) +
                              " does not cover dataset token " + std::to_string(max_token));
}

json seq_json(const xaqa::TokenSeq& seq) { return json(seq); }

void write_predictions(const fs::path& path, const std::vector<xaqa::QAExample>& dataset,
                       const std::vector<xaqa::InferenceOutput>& outputs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw xaqa::IoError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const xaqa::InferenceOutput& o = outputs[i];
    json span = nullptr;
    if (o.span)
      span = {{"passage", o.span->passage}, {"start", o.span->start},  {"end", o.span->end},
              {"tokens", o.span->tokens},   {"score", o.span->score}};
    json record = {{"id", dataset[i].id},
                   {"generative", seq_json(o.generative)},
                   {"span", span},
                   {"hallucinated", o.hallucinated},
                   {"resolved",
                    {{"generative", seq_json(o.generative)},
                     {"attention", seq_json(o.attention)},
                     {"drop", seq_json(o.drop)},
                     {"backoff", seq_json(o.backoff)}}},
                   {"passage_scores", o.scores}};
    out << record.dump() << '\n';
  }
  if (!out) throw xaqa::IoError("write failed for " + path.string());
}

void write_reports(const std::string& report_path, const xaqa::EvalReport& report) {
  if (report_path.empty()) {
    xaqa::write_report_text(std::cout, report);
    return;
  }
  std::ofstream txt(report_path, std::ios::binary);
  if (!txt) throw xaqa::IoError("cannot open " + report_path + " for writing");
  xaqa::write_report_text(txt, report);
  const std::string jsonl_path = report_path + ".jsonl";
  std::ofstream jsonl(jsonl_path, std::ios::binary);
  if (!jsonl) throw xaqa::IoError("cannot open " + jsonl_path + " for writing");
  xaqa::write_report_jsonl(jsonl, report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale cross-attention span-extraction QA lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value config file; command-line flags take precedence");
  bool dump_config = false;
  app.add_flag("--dump-config", dump_config, "print the effective configuration and exit");

  // gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic QA dataset");
  xaqa::GenSpec gen_spec;
  long gen_count = 1000;
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  gen_cmd->add_option("--out", gen_out, "output dataset file")->required();
  gen_cmd->add_option("--count", gen_count, "number of examples")->capture_default_str();
  gen_cmd->add_option("--vocab", gen_spec.vocab_size, "vocabulary size")->capture_default_str();
  gen_cmd->add_option("--passages", gen_spec.n_passages, "passages per example")
      ->capture_default_str();
  gen_cmd->add_option("--passage-len", gen_spec.passage_len, "tokens per passage")
      ->capture_default_str();
  gen_cmd->add_option("--answer-min", gen_spec.answer_len_min, "minimum answer length")
      ->capture_default_str();
  gen_cmd->add_option("--answer-max", gen_spec.answer_len_max, "maximum answer length")
      ->capture_default_str();
  gen_cmd->add_option("--p-multi", gen_spec.p_multi_occurrence,
                      "probability of a second gold occurrence")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--p-unanswerable", gen_spec.p_unanswerable,
                      "probability the answer is absent from every passage")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen_seed, "RNG seed")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  std::string train_data, train_dev, train_ckpt, train_metrics;
  ModelFlags train_model;
  TrainFlags train_flags;
  std::uint64_t train_seed = 0;
  train_cmd->add_option("--data", train_data, "training dataset")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--dev", train_dev, "dev dataset for per-epoch validation")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint-out", train_ckpt, "checkpoint output path")->required();
  train_cmd->add_option("--metrics-out", train_metrics, "line-delimited metrics log");
  train_model.attach(train_cmd);
  train_flags.attach(train_cmd);
  train_cmd->add_option("--seed", train_seed, "RNG seed")->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "answer metrics and hallucination strategies");
  std::string eval_data, eval_ckpt, eval_report, eval_pred;
  InferFlags eval_infer;
  eval_cmd->add_option("--data", eval_data, "evaluation dataset")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--report-out", eval_report, "report file (text + .jsonl sidecar)");
  eval_cmd->add_option("--pred-out", eval_pred, "per-example prediction dump");
  eval_infer.attach(eval_cmd);

  // rerank-eval
  auto* rerank_cmd = app.add_subcommand("rerank-eval", "attention-based passage reranking");
  std::string rerank_data, rerank_ckpt, rerank_report;
  InferFlags rerank_infer;
  rerank_cmd->add_option("--data", rerank_data, "evaluation dataset")
      ->required()
      ->check(CLI::ExistingFile);
  rerank_cmd->add_option("--checkpoint", rerank_ckpt, "model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  rerank_cmd->add_option("--report-out", rerank_report, "report file (text + .jsonl sidecar)");
  rerank_infer.attach(rerank_cmd);

  // ablate-lambda
  auto* ablate_cmd = app.add_subcommand("ablate-lambda", "lambda x strategy training grid");
  std::string ablate_data, ablate_dev, ablate_report;
  std::vector<double> ablate_lambdas{0.0, 0.5, 0.9};
  std::vector<std::string> ablate_strategies{"first_span"};
  ModelFlags ablate_model;
  TrainFlags ablate_train;
  std::uint64_t ablate_seed = 0;
  ablate_cmd->add_option("--data", ablate_data, "training dataset")
      ->required()
      ->check(CLI::ExistingFile);
  ablate_cmd->add_option("--dev", ablate_dev, "dev dataset")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--report-out", ablate_report, "report file (text + .jsonl sidecar)");
  ablate_cmd->add_option("--lambdas", ablate_lambdas, "lambda grid")
      ->delimiter(',')
      ->capture_default_str();
  ablate_cmd->add_option("--strategies", ablate_strategies, "strategy grid")
      ->delimiter(',')
      ->capture_default_str();
  ablate_model.attach(ablate_cmd);
  ablate_train.attach(ablate_cmd);
  ablate_cmd->add_option("--seed", ablate_seed, "RNG seed")->capture_default_str();

  // visualize
  auto* viz_cmd = app.add_subcommand("visualize", "attention heatmaps for one example");
  std::string viz_data, viz_ckpt, viz_outdir, viz_id;
  long viz_index = 0;
  InferFlags viz_infer;
  viz_cmd->add_option("--data", viz_data, "dataset")->required()->check(CLI::ExistingFile);
  viz_cmd->add_option("--checkpoint", viz_ckpt, "model checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  viz_cmd->add_option("--outdir", viz_outdir, "output directory")->required();
  viz_cmd->add_option("--index", viz_index, "example index")->capture_default_str();
  viz_cmd->add_option("--id", viz_id, "example id (overrides --index)");
  viz_infer.attach(viz_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (dump_config) {
    // Only the invoked subcommand's section: replayable without dragging in
    // unrelated required options.
    for (CLI::App* sub : app.get_subcommands())
      std::cout << "[" << sub->get_name() << "]\n" << sub->config_to_str(true, true);
    return 0;
  }

  try {
    if (gen_cmd->parsed()) {
      gen_spec.seed = gen_seed;
      gen_spec.validate();
      xaqa::save_dataset(gen_out, xaqa::generate_dataset(gen_spec, gen_count));
      std::cout << "wrote " << gen_count << " examples to " << gen_out << "\n";
    } else if (train_cmd->parsed()) {
      auto data = xaqa::load_dataset(train_data);
      std::vector<xaqa::QAExample> dev;
      if (!train_dev.empty()) dev = xaqa::load_dataset(train_dev);
      train_model.cfg.validate();
      check_vocab_covers(data, train_model.cfg.vocab_size);
      xaqa::TrainConfig tcfg = train_flags.resolved(train_seed);
      tcfg.checkpoint_path = train_ckpt;
      tcfg.metrics_path = train_metrics;
      tcfg.validate();
      xaqa::TrainResult result = xaqa::train(data, dev, train_model.cfg, tcfg);
      std::cout << "trained " << result.steps << " steps";
      if (!result.history.empty() && !dev.empty())
        std::cout << "; final dev EM gen " << result.history.back().dev_em_gen << " ext "
                  << result.history.back().dev_em_ext;
      std::cout << "; checkpoint " << train_ckpt << "\n";
    } else if (eval_cmd->parsed()) {
      eval_infer.cfg.validate();
      xaqa::Model model = xaqa::load_checkpoint(eval_ckpt);
      auto data = xaqa::load_dataset(eval_data);
      auto outputs = xaqa::run_all_inference(model, data, eval_infer.cfg);
      xaqa::EvalReport report;
      report.answers = xaqa::evaluate_dev(data, outputs);
      report.hallucination = xaqa::run_hallucination_experiment(data, outputs);
      if (!eval_pred.empty()) write_predictions(eval_pred, data, outputs);
      write_reports(eval_report, report);
    } else if (rerank_cmd->parsed()) {
      rerank_infer.cfg.validate();
      xaqa::Model model = xaqa::load_checkpoint(rerank_ckpt);
      auto data = xaqa::load_dataset(rerank_data);
      xaqa::EvalReport report;
      report.rerank = xaqa::run_rerank_experiment(model, data, rerank_infer.cfg);
      write_reports(rerank_report, report);
    } else if (ablate_cmd->parsed()) {
      auto data = xaqa::load_dataset(ablate_data);
      auto dev = xaqa::load_dataset(ablate_dev);
      ablate_model.cfg.validate();
      check_vocab_covers(data, ablate_model.cfg.vocab_size);
      xaqa::TrainConfig base = ablate_train.resolved(ablate_seed);
      base.validate();
      std::vector<xaqa::SpanStrategy> strategies;
      for (const std::string& s : ablate_strategies) strategies.push_back(xaqa::parse_strategy(s));
      for (double l : ablate_lambdas)
        if (l < 0.0 || l > 1.0)
          throw xaqa::ContractError("--lambdas entries must lie in [0,1]");
      xaqa::EvalReport report;
      report.ablation =
          xaqa::run_lambda_ablation(data, dev, ablate_model.cfg, base, ablate_lambdas, strategies);
      write_reports(ablate_report, report);
    } else if (viz_cmd->parsed()) {
      viz_infer.cfg.validate();
      xaqa::Model model = xaqa::load_checkpoint(viz_ckpt);
      auto data = xaqa::load_dataset(viz_data);
      const xaqa::QAExample* example = nullptr;
      if (!viz_id.empty()) {
        for (const xaqa::QAExample& ex : data)
          if (ex.id == viz_id) example = &ex;
        if (!example) throw xaqa::ContractError("--id " + viz_id + " not found in dataset");
      } else {
        if (viz_index < 0 || viz_index >= static_cast<long>(data.size()))
          throw xaqa::ContractError("--index outside dataset of " + std::to_string(data.size()));
        example = &data[static_cast<std::size_t>(viz_index)];
      }
      fs::create_directories(viz_outdir);
      const xaqa::FusedEncoding fused = model.encode(example->question, example->passages);
      xaqa::DecodeResult result = xaqa::generate(model, fused, viz_infer.cfg);
      if (result.generated.empty())
        throw xaqa::ContractError("model generated nothing for example " + example->id);
      xaqa::render_heatmap(result, fused, fs::path(viz_outdir) / (example->id + "_attention"));
      std::cout << "wrote heatmap for " << example->id << " under " << viz_outdir << "\n";
    }
  } catch (const xaqa::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
