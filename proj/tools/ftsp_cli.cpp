#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "ftsp/harness.hpp"

namespace fs = std::filesystem;
using namespace ftsp;

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment(path);
}

std::vector<Sample> load_samples(const std::string& manifest, const ModelConfig& model) {
  const auto specs = read_manifest(manifest);
  for (const auto& s : specs)
    if (s.alphabet.size() != model.alphabet) {
      throw ConfigError("scene " + std::to_string(s.seed) + " uses " + std::to_string(s.alphabet.size()) +
                        " symbols but the model expects " + std::to_string(model.alphabet));
    }
  return render_all(specs, model.image_size, model.M);
}

std::vector<std::vector<int>> lexicon_of(const std::vector<Sample>& data) {
  std::vector<GroundTruth> gts;
  for (const auto& s : data) gts.push_back(s.gt);
  return build_lexicon(gts);
}

void print_report(const EvalReport& r) {
  auto line = [](const char* name, const Metrics& m) {
    std::printf("%-10s P %.4f  R %.4f  F %.4f  (tp %zu, predicted %zu, expected %zu)\n", name, m.precision, m.recall,
                m.f, m.tp, m.predicted, m.expected);
  };
  line("detection", r.detection);
  line("e2e none", r.e2e_none);
  if (r.has_full) line("e2e full", r.e2e_full);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FastTextSpotter desk-scale toolkit"};
  app.require_subcommand(1);

  auto* print_cfg = app.add_subcommand("print-config", "Print the default experiment config as JSON");

  auto* gen = app.add_subcommand("gen-data", "Write a JSONL manifest of synthetic scenes");
  std::size_t gen_seeds = 0;
  std::uint64_t gen_first = 0;
  std::string gen_out, gen_config, gen_ppm;
  std::size_t gen_size = 64;
  gen->add_option("--seeds", gen_seeds, "Number of scenes")->required();
  gen->add_option("--first", gen_first, "First scene seed");
  gen->add_option("--out", gen_out, "Manifest path")->required();
  gen->add_option("--config", gen_config, "Experiment config supplying the scene settings");
  gen->add_option("--ppm", gen_ppm, "Also export rendered images to this directory");
  gen->add_option("--size", gen_size, "Image size for --ppm export");

  auto* tr = app.add_subcommand("train", "Train a model and write loss.csv and model.bin");
  std::string tr_config, tr_data, tr_val, tr_out;
  tr->add_option("--config", tr_config, "Experiment config JSON");
  tr->add_option("--data", tr_data, "Training manifest (default: generated from the config)");
  tr->add_option("--val", tr_val, "Validation manifest evaluated after training");
  tr->add_option("--out", tr_out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  std::string ev_ckpt, ev_data, ev_lexicon = "none", ev_out;
  EvalOptions ev_opt;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Manifest")->required();
  ev->add_option("--lexicon", ev_lexicon, "none or full")->check(CLI::IsMember({"none", "full"}));
  ev->add_option("--out", ev_out, "Write the report as JSON");
  ev->add_option("--conf", ev_opt.conf_threshold, "Confidence threshold");
  ev->add_option("--iou", ev_opt.iou_threshold, "Polygon IoU threshold");

  auto* be = app.add_subcommand("bench", "Time eval-mode forwards");
  std::string be_ckpt, be_config, be_mode;
  std::size_t be_warmup = 3, be_runs = 20;
  be->add_option("--ckpt", be_ckpt, "Checkpoint supplying the model config");
  be->add_option("--config", be_config, "Experiment config (used when no checkpoint is given)");
  be->add_option("--mode", be_mode, "sac2, vanilla or compare")->check(CLI::IsMember({"sac2", "vanilla", "compare"}));
  be->add_option("--warmup", be_warmup, "Untimed forwards");
  be->add_option("--runs", be_runs, "Timed forwards");

  auto* ab = app.add_subcommand("ablate", "Run the five-row module ablation");
  std::string ab_config, ab_out;
  std::vector<std::uint64_t> ab_seeds{0, 1, 2};
  ab->add_option("--config", ab_config, "Experiment config JSON");
  ab->add_option("--seeds", ab_seeds, "Seeds, each used for model init and data order")->delimiter(',');
  ab->add_option("--out", ab_out, "Directory for the table, reports and loss logs");

  auto* da = app.add_subcommand("dump-attn", "Write encoder attention heatmaps as PGM");
  std::string da_ckpt, da_out, da_config;
  std::uint64_t da_seed = 0;
  da->add_option("--ckpt", da_ckpt, "Checkpoint")->required();
  da->add_option("--seed", da_seed, "Scene seed");
  da->add_option("--config", da_config, "Experiment config supplying the scene settings");
  da->add_option("--out", da_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*print_cfg) {
      std::cout << to_json(ExperimentConfig{}).dump(2) << '\n';
    } else if (*gen) {
      const ExperimentConfig cfg = config_or_default(gen_config);
      const auto specs = generate_scenes(gen_first, gen_seeds, cfg.data.scene);
      write_manifest(gen_out, specs);
      if (!gen_ppm.empty()) {
        fs::create_directories(gen_ppm);
        for (const auto& s : render_all(specs, gen_size, cfg.model.M))
          write_ppm(gen_ppm + "/scene_" + std::to_string(s.spec.seed) + ".ppm", s.image);
      }
      std::printf("wrote %zu scenes to %s\n", specs.size(), gen_out.c_str());
    } else if (*tr) {
      const ExperimentConfig cfg = config_or_default(tr_config);
      cfg.validate();
      std::vector<Sample> train_set = tr_data.empty() ? build_dataset(cfg).train : load_samples(tr_data, cfg.model);
      FastTextSpotter model(cfg.model);
      fs::create_directories(tr_out);
      write_json(tr_out + "/config.json", to_json(cfg));
      const std::size_t every = std::max<std::size_t>(1, cfg.train.iterations / 20);
      TrainHooks hooks{tr_out, [&](std::size_t iter, const LossBreakdown& b) {
                         if ((iter + 1) % every == 0 || iter + 1 == cfg.train.iterations)
                           std::printf("iter %zu loss %.4f\n", iter + 1, b.total.item());
                         std::fflush(stdout);
                       }};
      const TrainResult r = train(model, cfg.train, train_set, hooks);
      std::printf("checkpoint %s\n", r.checkpoint.c_str());
      if (!tr_val.empty()) {
        const auto val = load_samples(tr_val, cfg.model);
        const EvalReport rep = evaluate(model, val, {}, lexicon_of(val));
        print_report(rep);
        write_json(tr_out + "/report.json", to_json(rep));
      }
    } else if (*ev) {
      FastTextSpotter model = load_checkpoint(ev_ckpt);
      const auto data = load_samples(ev_data, model.config());
      const EvalReport rep =
          evaluate(model, data, ev_opt, ev_lexicon == "full" ? lexicon_of(data) : std::vector<std::vector<int>>{});
      print_report(rep);
      if (!ev_out.empty()) write_json(ev_out, to_json(rep));
    } else if (*be) {
      ModelConfig mc = be_ckpt.empty() ? config_or_default(be_config).model : load_checkpoint(be_ckpt).config();
      std::puts(kThroughputDisclaimer);
      if (be_mode == "compare") {
        const AttentionComparison c = compare_attention(mc, be_warmup, be_runs);
        std::puts(format_bench("sac2", c.sac2).c_str());
        std::puts(format_bench("vanilla", c.vanilla).c_str());
        std::printf("sac2 overhead %.2f%%\n", 100 * c.overhead);
      } else {
        if (be_mode == "sac2") mc.ld_attention = mc.cd_attention = SelfAttentionKind::kSac2;
        if (be_mode == "vanilla") mc.ld_attention = mc.cd_attention = SelfAttentionKind::kVanilla;
        // Latency does not depend on weight values, so a mode switch re-initialises.
        FastTextSpotter model = be_ckpt.empty() || !be_mode.empty() ? FastTextSpotter(mc) : load_checkpoint(be_ckpt);
        const BenchReport r = bench(model, be_warmup, be_runs);
        std::puts(format_bench(be_mode.empty() ? "model" : be_mode, r).c_str());
        if (!r.weights_unchanged) throw ContractError("weights changed during benchmarking");
      }
    } else if (*ab) {
      const ExperimentConfig cfg = config_or_default(ab_config);
      cfg.validate();
      const Dataset data = build_dataset(cfg);
      if (!ab_out.empty()) fs::create_directories(ab_out);
      const auto rows = ablate(cfg, ab_seeds, data, [&](std::size_t row, std::uint64_t seed, const RunResult& run) {
        std::printf("row %zu seed %llu: det F %.4f e2e %.4f\n", row, static_cast<unsigned long long>(seed),
                    run.report.detection.f, run.report.e2e_none.f);
        std::fflush(stdout);
        if (ab_out.empty()) return;
        const std::string stem = ab_out + "/row" + std::to_string(row) + "_seed" + std::to_string(seed);
        std::ofstream(stem + ".csv") << run.training.csv;
        write_json(stem + ".json", to_json(run.report));
      });
      const std::string table = format_ablation(rows);
      std::cout << table;
      if (!ab_out.empty()) std::ofstream(ab_out + "/ablation.md") << table;
    } else if (*da) {
      FastTextSpotter model = load_checkpoint(da_ckpt);
      const ExperimentConfig cfg = config_or_default(da_config);
      const auto scene = render_scene(generate_scene(da_seed, cfg.data.scene), model.config().image_size,
                                      model.config().M);
      const auto paths = dump_attention(model, scene.image, da_out);
      write_ppm(da_out + "/scene.ppm", scene.image);
      std::printf("wrote %zu heatmaps to %s\n", paths.size(), da_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
