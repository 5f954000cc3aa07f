// Command-line front end: train, eval, verify, ablate, usage.
//
// Exit codes: 0 success, 1 input/config error, 2 numeric failure,
// 3 verification failure.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moxe/diagnostics.hpp"
#include "moxe/errors.hpp"
#include "moxe/train.hpp"

namespace fs = std::filesystem;
using namespace moxe;

namespace {

constexpr int kOk = 0, kInputError = 1, kNumericError = 2, kVerifyFailed = 3;

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_step(const StepRecord& r) {
  std::cout << "step " << r.step << "  ce " << fixed(r.ce) << "  total " << fixed(r.total) << "  lr "
            << r.lr << std::endl;
}

struct TrainSummary {
  EvalResult validation;
  double unigram = 0.0;
  double seconds = 0.0;
  double final_gap = 0.0;
};

TrainSummary train_run(Trainer& trainer, std::size_t print_every,
                       std::optional<std::uint64_t> stop_after = std::nullopt) {
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run(stop_after, [&](const StepRecord& r) {
    if (print_every > 0 && (r.step % print_every == 0 || r.step == 1)) print_step(r);
  });
  TrainSummary s;
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& cfg = trainer.config();
  s.validation = evaluate(trainer.params(), cfg.model, trainer.corpus().validation(), cfg.train.seq_len);
  s.unigram = unigram_entropy(trainer.corpus().tokens);
  s.final_gap = final_routing_gap(trainer.out_dir() / "routing.csv", 100);

  std::ofstream os(trainer.out_dir() / "summary.txt", std::ios::trunc);
  os << "steps=" << trainer.current_step() << '\n'
     << "val_ce=" << s.validation.ce << '\n'
     << "val_ppl=" << s.validation.perplexity << '\n'
     << "val_tokens=" << s.validation.tokens << '\n'
     << "unigram_entropy=" << s.unigram << '\n'
     << "val_ce_over_unigram=" << s.validation.ce / s.unigram << '\n'
     << "final_group_gap=" << s.final_gap << '\n'
     << "train_seconds=" << s.seconds << '\n';
  return s;
}

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out,
              const std::string& resume, std::optional<std::uint64_t> stop_after) {
  std::optional<Trainer> trainer;
  if (resume.empty()) {
    if (config_path.empty()) throw ConfigError("train needs --config or --resume");
    const RunConfig cfg = load_run_config(config_path);
    trainer.emplace(cfg, load_corpus(data_path, cfg.train.split_fraction, cfg.train.data_seed), out);
  } else {
    trainer.emplace(Trainer::resume(resume, read_bytes(data_path), out));
    std::cout << "resumed at step " << trainer->current_step() << '\n';
  }
  const auto& cfg = trainer->config();
  const auto cost = active_param_and_flop_report(cfg.model);
  std::cout << "parameters " << cost.total_params << " (active per token " << cost.active_params << ")\n";
  const std::size_t every = cfg.train.eval_interval > 0 ? cfg.train.eval_interval : 100;
  const TrainSummary s = train_run(*trainer, every, stop_after);
  std::cout << "validation ce " << fixed(s.validation.ce) << "  ppl " << fixed(s.validation.perplexity, 3)
            << "  unigram entropy " << fixed(s.unigram) << "  ratio " << fixed(s.validation.ce / s.unigram)
            << "\nrun directory " << out << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, std::size_t context_len) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const EvalResult r = evaluate(ck.params, ck.config.model, read_bytes(data), context_len);
  std::cout << "ce " << fixed(r.ce, 6) << "\nperplexity " << fixed(r.perplexity, 4) << "\ntokens " << r.tokens
            << '\n';
  return kOk;
}

int cmd_verify(const std::string& suite, std::uint64_t seed, const std::string& out, bool verbose) {
  std::vector<VerificationReport> reports;
  if (suite == "ratio" || suite == "all") reports.push_back(verify_ratio_theorem(1000, seed));
  if (suite == "grad" || suite == "all") reports.push_back(verify_gradients(seed));
  if (suite == "cost" || suite == "all") {
    for (auto& r : verify_inference_cost(ModelConfig{})) reports.push_back(std::move(r));
  }
  bool pass = true;
  std::string text;
  for (const auto& r : reports) {
    text += r.to_text(verbose);
    pass = pass && r.pass;
  }
  std::cout << text << (pass ? "all suites passed\n" : "verification FAILED\n");
  if (!out.empty()) {
    fs::create_directories(out);
    for (const auto& r : reports) std::ofstream(fs::path(out) / ("verify_" + r.suite + ".txt")) << r.to_text(true);
  }
  return pass ? kOk : kVerifyFailed;
}

struct Variant {
  const char* label;
  const char* slug;
  void (*apply)(ModelConfig&);
};

const Variant kVariants[] = {
    {"Full model (baseline)", "baseline", [](ModelConfig&) {}},
    {"No entropy bias (gamma = 0)", "gamma0", [](ModelConfig& c) { c.gamma = 0.0; }},
    {"No group loss", "no_group_loss", [](ModelConfig& c) { c.group_loss_enabled = false; }},
    {"FFN experts", "ffn_experts", [](ModelConfig& c) { c.expert_kind = ExpertKind::ffn; }},
    {"mLSTM-only experts", "mlstm_only", [](ModelConfig& c) { c.expert_kind = ExpertKind::mlstm_only; }},
    {"sLSTM-only experts", "slstm_only", [](ModelConfig& c) { c.expert_kind = ExpertKind::slstm_only; }},
};

int cmd_ablate(const std::string& config_path, const std::string& data_path, const std::string& out) {
  const RunConfig base = load_run_config(config_path);
  const auto tokens = read_bytes(data_path);
  fs::create_directories(out);

  struct Row {
    std::string label, slug;
    std::size_t params;
    TrainSummary s;
  };
  std::vector<Row> rows;
  for (const auto& v : kVariants) {
    RunConfig cfg = base;
    v.apply(cfg.model);
    cfg.validate();
    std::cout << "== " << v.label << '\n';
    Trainer t(cfg, make_corpus(tokens, cfg.train.split_fraction, cfg.train.data_seed), fs::path(out) / v.slug);
    rows.push_back({v.label, v.slug, active_param_and_flop_report(cfg.model).total_params, train_run(t, 0)});
    std::cout << "   validation ce " << fixed(rows.back().s.validation.ce) << '\n';
  }

  std::ostringstream table;
  table << "| variant | params | val CE | val ppl | group gap | seconds |\n|---|---|---|---|---|---|\n";
  std::ofstream csv(fs::path(out) / "ablation.csv");
  csv << "variant,slug,params,val_ce,val_ppl,final_group_gap,train_seconds\n";
  for (const auto& r : rows) {
    table << "| " << r.label << " | " << r.params << " | " << fixed(r.s.validation.ce) << " | "
          << fixed(r.s.validation.perplexity, 3) << " | " << fixed(r.s.final_gap, 3) << " | " << fixed(r.s.seconds, 1)
          << " |\n";
    csv << '"' << r.label << "\"," << r.slug << ',' << r.params << ',' << r.s.validation.ce << ','
        << r.s.validation.perplexity << ',' << r.s.final_gap << ',' << r.s.seconds << '\n';
  }
  std::vector<const Row*> order;
  for (const auto& r : rows) order.push_back(&r);
  std::stable_sort(order.begin(), order.end(),
                   [](const Row* a, const Row* b) { return a->s.validation.ce < b->s.validation.ce; });
  table << "\nObserved ordering by validation CE (lower is better):";
  for (std::size_t i = 0; i < order.size(); ++i) table << (i ? " < " : " ") << order[i]->slug;
  table << '\n';
  std::ofstream(fs::path(out) / "ablation.md") << table.str();
  std::cout << '\n' << table.str();
  return kOk;
}

int cmd_usage(const std::string& metrics, const std::string& out) {
  const UsageReport r = expert_usage_report(metrics);
  std::cout << r.to_text();
  if (!out.empty()) r.write_csv(out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture of recurrent experts: training, evaluation and verification"};
  app.require_subcommand(1);

  std::string config, data, out, checkpoint, resume, suite = "all", metrics;
  std::size_t context_len = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> stop_after;
  bool verbose = false;

  auto* train = app.add_subcommand("train", "Train a model and write logs and checkpoints to --out");
  auto* train_config =
      train->add_option("--config", config, "key=value run configuration")->check(CLI::ExistingFile);
  train->add_option("--data", data, "training text (bytes)")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--resume", resume, "continue from this checkpoint (its config is used)")
      ->excludes(train_config);
  train->add_option("--stop-after", stop_after, "stop (and checkpoint) after this step");

  auto* eval = app.add_subcommand("eval", "Cross-entropy and perplexity of a checkpoint on a file");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--context-len", context_len)->required()->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "Run the numerical verification suites");
  verify->add_option("--suite", suite)->check(CLI::IsMember({"ratio", "grad", "cost", "all"}));
  verify->add_option("--seed", seed);
  verify->add_option("--out", out, "directory for per-suite reports");
  verify->add_flag("--verbose,-v", verbose, "list every case");

  auto* ablate = app.add_subcommand("ablate", "Train the six ablation variants and compare them");
  ablate->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ablate->add_option("--data", data)->required();
  ablate->add_option("--out", out)->required();

  auto* usage = app.add_subcommand("usage", "Summarize expert usage from a metrics CSV");
  usage->add_option("--metrics", metrics)->required();
  usage->add_option("--out", out, "derived per-step group-gap CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (train->parsed()) return cmd_train(config, data, out, resume, stop_after);
    if (eval->parsed()) return cmd_eval(checkpoint, data, context_len);
    if (verify->parsed()) return cmd_verify(suite, seed, out, verbose);
    if (ablate->parsed()) return cmd_ablate(config, data, out);
    if (usage->parsed()) return cmd_usage(metrics, out);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const DomainError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kInputError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}
