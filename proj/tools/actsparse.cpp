#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "actsparse/io.hpp"
#include "actsparse/kernels.hpp"
#include "actsparse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace actsparse;

namespace {

struct Args {
  std::string model;
  std::string plan;
  std::vector<std::string> calib;
  std::vector<std::string> heldout;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  double target = 0.5;
  std::string prefill = "second_half";
  std::size_t evo_generations = EvoParams{}.generations;
  std::size_t evo_offspring = EvoParams{}.offspring;
  double evo_step = EvoParams{}.step;
  double evo_mutable_frac = EvoParams{}.mutable_fraction;
  std::string alpha_grid = AlphaGrid{}.to_string();
  double greedy_step = 0.05;

  std::size_t calib_sequences = 32;
  std::size_t heldout_sequences = 16;
  std::size_t seq_len = 128;
  std::size_t evo_sequences = 8;
  std::size_t search_sequences = 0;

  // init
  std::size_t n_blocks = ModelConfig{}.n_blocks;
  std::size_t d_model = ModelConfig{}.d_model;
  std::size_t n_heads = ModelConfig{}.n_heads;
  std::size_t d_ff = ModelConfig{}.d_ff;
  std::size_t max_seq = ModelConfig{}.max_seq;

  // sweep
  std::vector<double> levels{0.4, 0.5, 0.6};

  // bench
  std::size_t n_tokens = 200;
  std::size_t prompt_len = 5;
  std::string prompt;
  std::size_t runs = 3;

  // bench-kernel
  std::size_t rows = 4096;
  std::size_t cols = 4096;
  std::vector<double> grid{0.0, 0.25, 0.5, 0.75};
  std::size_t iterations = 100;
};

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

PipelineOptions pipeline_options(const Args& a) {
  PipelineOptions o;
  o.target = a.target;
  o.seed = a.seed;
  o.evo.generations = a.evo_generations;
  o.evo.offspring = a.evo_offspring;
  o.evo.step = a.evo_step;
  o.evo.mutable_fraction = a.evo_mutable_frac;
  o.grid = AlphaGrid::parse(a.alpha_grid);
  o.greedy_step = a.greedy_step;
  o.evo_sequences = a.evo_sequences;
  o.search_sequences = a.search_sequences;
  return o;
}

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

Model load(const Args& a) {
  if (a.model.empty()) throw StageError("load model", "--model is required");
  return stage("load model", [&] { return load_model(a.model); });
}

CalibrationSet corpus(const char* name, const std::vector<std::string>& paths, std::size_t n, const Args& a) {
  return stage(name, [&] {
    if (paths.empty()) throw std::invalid_argument(std::string("no ") + name + " paths given");
    auto set = ingest_corpus(to_paths(paths), n, a.seq_len, a.seed);
    for (const auto& w : set.warnings) std::cerr << "warning: " << w << '\n';
    return set;
  });
}

ModelStates plan_states(const Args& a, const Model& m) {
  return stage("load plan", [&] { return SparsityPlan::load(a.plan).to_states(m); });
}

// Hash of the command line settings that shape a report.
Provenance provenance(const Args& a, const std::string& command, const std::string& extra = "") {
  std::string text = "command=" + command + "\nmodel=" + a.model + "\nplan=" + a.plan + "\nseed=" +
                     std::to_string(a.seed) + "\nprefill=" + a.prefill + "\nseq_len=" + std::to_string(a.seq_len) +
                     "\n" + extra;
  return Provenance{a.seed, config_hash(text)};
}

void emit(const Args& a, const std::string& name, const CsvTable& table) {
  stage("write reports", [&] {
    fs::create_directories(a.out_dir);
    table.write(fs::path(a.out_dir) / name);
    return 0;
  });
  std::cout << "wrote " << (fs::path(a.out_dir) / name).string() << '\n';
}

int cmd_init(const Args& a) {
  ModelConfig c;
  c.n_blocks = a.n_blocks;
  c.d_model = a.d_model;
  c.n_heads = a.n_heads;
  c.d_ff = a.d_ff;
  c.max_seq = a.max_seq;
  if (a.model.empty()) throw StageError("init", "--model is required");
  stage("init", [&] {
    save_model(init_toy_model(c, a.seed), a.model);
    return 0;
  });
  std::cout << "wrote " << a.model << '\n';
  return 0;
}

int cmd_pipeline(const Args& a) {
  const Model m = load(a);
  const auto calib = corpus("calibration", a.calib, a.calib_sequences, a);
  const auto opts = stage("setup", [&] { return pipeline_options(a); });
  const auto r = run_pipeline(m, calib, opts);
  const fs::path plan = a.plan.empty() ? fs::path(a.out_dir) / "plan.json" : fs::path(a.plan);
  stage("write plan", [&] {
    if (plan.has_parent_path()) fs::create_directories(plan.parent_path());
    r.plan.save(plan);
    return 0;
  });
  std::cout << "wrote " << plan.string() << '\n';

  const Provenance prov{a.seed, r.plan.provenance.config_hash};
  emit(a, "alpha.csv", alpha_table(prov, r));
  emit(a, "allocation.csv", allocation_table(prov, m, r.plan));
  emit(a, "greedy_trace.csv", greedy_trace_table(prov, r));
  emit(a, "evolution.csv", evolution_table(prov, r.evolution));
  std::cout << "weighted sparsity " << format_double(r.plan.weighted_sparsity(m)) << '\n';
  return 0;
}

int cmd_eval(const Args& a) {
  const Model m = load(a);
  const auto held = corpus("held-out", a.heldout, a.heldout_sequences, a);
  const auto policy = stage("setup", [&] { return parse_prefill_policy(a.prefill); });
  std::optional<ModelStates> states;
  if (!a.plan.empty()) states = plan_states(a, m);
  const auto r = stage("eval", [&] { return run_eval(m, states ? &*states : nullptr, held, policy); });
  emit(a, "eval.csv", eval_table(provenance(a, "eval"), r));
  std::cout << "dense ppl " << format_double(r.dense_ppl);
  if (r.sparse_ppl) std::cout << "  sparse ppl " << format_double(*r.sparse_ppl) << "  kl " << format_double(*r.kl);
  std::cout << "  mac ratio " << format_double(r.mac_ratio) << '\n';
  return 0;
}

int cmd_sweep(const Args& a) {
  const Model m = load(a);
  const auto calib = corpus("calibration", a.calib, a.calib_sequences, a);
  const auto held = corpus("held-out", a.heldout, a.heldout_sequences, a);
  const auto policy = stage("setup", [&] { return parse_prefill_policy(a.prefill); });
  const auto cap = stage("capture", [&] { return capture_block_inputs(m, calib); });
  const auto r = stage("sweep", [&] { return run_sweep(m, cap, held, a.levels, policy); });
  std::string levels;
  for (double l : a.levels) levels += format_double(l) + ",";
  emit(a, "sweep.csv", sweep_table(provenance(a, "sweep", "levels=" + levels), r));
  for (double l : a.levels) std::cout << "variance at " << format_double(l) << ": " << r.variance_at(l) << '\n';
  return 0;
}

int cmd_bench(const Args& a) {
  const Model m = load(a);
  if (a.plan.empty()) throw StageError("load plan", "--plan is required");
  const auto states = plan_states(a, m);
  const auto policy = stage("setup", [&] { return parse_prefill_policy(a.prefill); });
  std::vector<TokenId> prompt;
  if (!a.prompt.empty()) {
    prompt = tokenize(a.prompt);
  } else {
    const auto held = corpus("held-out", a.heldout, 1, a);
    prompt = held.sequences.front();
  }
  if (prompt.size() > a.prompt_len) prompt.resize(a.prompt_len);
  const auto r = stage("bench", [&] { return run_bench(m, states, prompt, a.n_tokens, policy, a.runs); });
  emit(a, "bench.csv",
       bench_table(provenance(a, "bench", "n_tokens=" + std::to_string(a.n_tokens) +
                                              "\nprompt_len=" + std::to_string(prompt.size())),
                   r));
  std::cout << "dense " << r.dense_tokens_per_s << " tok/s  sparse " << r.sparse_tokens_per_s
            << " tok/s  mac ratio " << format_double(r.mac_ratio) << '\n';
  return 0;
}

int cmd_ablate(const Args& a) {
  const Model m = load(a);
  const auto calib = corpus("calibration", a.calib, a.calib_sequences, a);
  const auto held = corpus("held-out", a.heldout, a.heldout_sequences, a);
  const auto opts = stage("setup", [&] { return pipeline_options(a); });
  const auto policy = stage("setup", [&] { return parse_prefill_policy(a.prefill); });
  const auto rows = run_ablate(m, calib, held, opts, policy);
  emit(a, "ablation.csv", ablation_table(Provenance{a.seed, config_hash(opts.describe(m.config))}, rows));
  for (const auto& r : rows) std::cout << r.name << " kl " << format_double(r.kl) << '\n';
  return 0;
}

int cmd_bench_kernel(const Args& a) {
  const auto points = stage("bench", [&] { return bench_matvec(a.rows, a.cols, a.grid, a.iterations, a.seed); });
  CsvTable t(provenance(a, "bench-kernel", "rows=" + std::to_string(a.rows) + "\ncols=" + std::to_string(a.cols)),
             {"rows", "cols", "sparsity", "ns_per_op", "gmacs_per_s"});
  for (const auto& p : points) {
    t.add_row({std::to_string(a.rows), std::to_string(a.cols), format_double(p.sparsity), format_double(p.ns_per_op),
               format_double(p.gmacs_per_s)});
  }
  emit(a, "bench_kernel.csv", t);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-aware activation sparsity for a toy decoder-only transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Args a;

  app.add_option("--model", a.model, "Model directory")->capture_default_str();
  app.add_option("--plan", a.plan, "Sparsity plan file");
  app.add_option("--calib", a.calib, "Calibration text file or directory (repeatable)");
  app.add_option("--heldout", a.heldout, "Held-out text file or directory (repeatable)");
  app.add_option("--seed", a.seed, "Random seed")->capture_default_str();
  app.add_option("--out-dir", a.out_dir, "Directory for reports")->capture_default_str();
  app.add_option("--target-sparsity", a.target, "Global parameter-weighted sparsity")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app.add_option("--prefill-policy", a.prefill, "Sparse prefill positions")
      ->check(CLI::IsMember({"first_half", "second_half", "all", "none"}))
      ->capture_default_str();
  app.add_option("--evo-generations", a.evo_generations)->capture_default_str();
  app.add_option("--evo-offspring", a.evo_offspring)->capture_default_str();
  app.add_option("--evo-step", a.evo_step)->capture_default_str();
  app.add_option("--evo-mutable-frac", a.evo_mutable_frac)->capture_default_str();
  app.add_option("--alpha-grid", a.alpha_grid, "lo:hi:step")->capture_default_str();
  app.add_option("--greedy-step", a.greedy_step)->capture_default_str();
  app.add_option("--calib-sequences", a.calib_sequences, "Calibration sequences to sample")->capture_default_str();
  app.add_option("--heldout-sequences", a.heldout_sequences, "Held-out sequences to sample")->capture_default_str();
  app.add_option("--seq-len", a.seq_len, "Bytes per sequence")->capture_default_str();
  app.add_option("--evo-sequences", a.evo_sequences, "Sequences scored by the block search")->capture_default_str();
  app.add_option("--search-sequences", a.search_sequences, "Sequences for layer and alpha search (0 = all)")
      ->capture_default_str();

  auto* init = app.add_subcommand("init", "Write a seeded toy model");
  init->add_option("--blocks", a.n_blocks)->capture_default_str();
  init->add_option("--d-model", a.d_model)->capture_default_str();
  init->add_option("--heads", a.n_heads)->capture_default_str();
  init->add_option("--d-ff", a.d_ff)->capture_default_str();
  init->add_option("--max-seq", a.max_seq)->capture_default_str();

  auto* pipeline = app.add_subcommand("pipeline", "Search a sparsity plan");
  auto* eval = app.add_subcommand("eval", "Perplexity, KL and MAC ratio on held-out text");
  auto* sweep = app.add_subcommand("sweep", "Per-block perplexity sensitivity");
  sweep->add_option("--levels", a.levels, "Sparsity levels")->delimiter(',')->capture_default_str();
  auto* bench = app.add_subcommand("bench", "Greedy decode throughput");
  bench->add_option("--n-tokens", a.n_tokens)->capture_default_str();
  bench->add_option("--prompt-len", a.prompt_len)->capture_default_str();
  bench->add_option("--prompt", a.prompt, "Prompt text (default: start of the held-out data)");
  bench->add_option("--runs", a.runs)->capture_default_str();
  auto* ablate = app.add_subcommand("ablate", "Component ablation at matched budget");
  auto* kernel = app.add_subcommand("bench-kernel", "Gather kernel timing");
  kernel->add_option("--rows", a.rows)->capture_default_str();
  kernel->add_option("--cols", a.cols)->capture_default_str();
  kernel->add_option("--grid", a.grid)->delimiter(',')->capture_default_str();
  kernel->add_option("--iterations", a.iterations)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) return cmd_init(a);
    if (*pipeline) return cmd_pipeline(a);
    if (*eval) return cmd_eval(a);
    if (*sweep) return cmd_sweep(a);
    if (*bench) return cmd_bench(a);
    if (*ablate) return cmd_ablate(a);
    if (*kernel) return cmd_bench_kernel(a);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
