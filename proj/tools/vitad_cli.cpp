// vitad: dataset synthesis, training, evaluation and single-image inference.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vitad/vitad.hpp"

namespace {

using namespace vitad;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

bool is_override(const std::string& arg) {
  if (arg.rfind("--", 0) != 0) return false;
  for (const char* p : {"model.", "fuser.", "train.", "eval.", "synth."})
    if (arg.compare(2, std::string(p).size(), p) == 0) return true;
  return false;
}

// Pulls `--section.key value` / `--section.key=value` pairs out of argv.
std::vector<std::pair<std::string, std::string>> take_overrides(std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!is_override(args[i])) {
      rest.push_back(args[i]);
      continue;
    }
    const std::string body = args[i].substr(2);
    if (auto eq = body.find('='); eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= args.size()) throw ConfigError("missing value for --" + body);
      out.emplace_back(body, args[++i]);
    }
  }
  args = std::move(rest);
  return out;
}

fs::path config_beside(const fs::path& checkpoint) { return checkpoint.parent_path() / "config.txt"; }

void write_text(const fs::path& path, const std::string& s) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::unique_ptr<VitadModel<float>> build_model(const RunConfig& rc) {
  auto m = std::make_unique<VitadModel<float>>(rc.model, rc.fuser, rc.model_seed);
  if (!rc.encoder_weights.empty()) load_encoder_weights(m->params(), load_archive(rc.encoder_weights));
  return m;
}

void print_warnings(const EvalResult& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_synth(RunConfig& rc, const fs::path& out) {
  const auto summary = generate_synthetic(rc.synth, out);
  const auto index = load_layout(out);
  std::cout << "classes=" << index.classes.size() << " train=" << index.count(Split::train)
            << " test=" << index.count(Split::test) << " masks=" << summary.masks << "\n";
  return kExitOk;
}

int cmd_train(RunConfig& rc, ConfigRegistry& reg, const fs::path& data, const fs::path& out) {
  const auto& t = rc.train;
  std::cout << "lr=" << format_real(t.lr) << " wd=" << format_real(t.weight_decay) << " bs=" << t.batch_size
            << " epochs=" << t.epochs << "\n";
  t.validate();
  rc.model.validate();
  const auto index = load_layout(data);
  fs::create_directories(out);
  write_text(out / "config.txt", reg.echo());
  auto model = build_model(rc);
  auto res = train(*model, index, rc.train, rc.eval, &std::cout);
  res.manifest.resolved_config = reg.resolved();
  res.manifest.dataset_fingerprint = dataset_fingerprint(index, data);

  save_archive(model_tensors(model->params()), out / "final.vtad");
  restore_snapshot(model->params(), res.best);
  save_archive(model_tensors(model->params()), out / "best.vtad");
  write_manifest(res.manifest, out / "manifest.json");
  if (res.best_eval) write_report(*res.best_eval, out / "report_best.csv");
  if (res.final_eval) {
    write_report(*res.final_eval, out / "report_final.csv");
    print_warnings(*res.final_eval);
  }
  std::cout << "best_epoch=" << res.manifest.best_epoch << " wrote " << (out / "best.vtad").string() << " and "
            << (out / "final.vtad").string() << "\n";
  return kExitOk;
}

int cmd_eval(RunConfig& rc, const fs::path& ckpt, const fs::path& data, const fs::path& out, bool export_maps) {
  auto model = build_model(rc);
  load_into(model->params(), load_archive(ckpt));
  const auto index = load_layout(data);
  auto set = load_eval_set<float>(index, static_cast<std::size_t>(rc.model.image_size), rc.train.norm);
  fs::create_directories(out);
  MapSink sink;
  if (export_maps) {
    sink = [&](const Record& r, const AnomalyMap<float>& m) {
      const fs::path dir = out / "maps" / r.cls / r.defect_type;
      fs::create_directories(dir);
      export_anomaly_map(m, dir / (r.image_path.stem().string() + ".pgm"));
    };
  }
  const auto res = evaluate(*model, set, rc.eval, sink);
  print_warnings(res);
  write_report(res, out / "report.csv");
  std::cout << report_csv(res.classes, res.per_class, res.mean);
  return kExitOk;
}

int cmd_infer(RunConfig& rc, const fs::path& ckpt, const fs::path& image, const std::string& prefix) {
  auto model = build_model(rc);
  load_into(model->params(), load_archive(ckpt));
  const auto img = normalize(load_image(image, static_cast<std::size_t>(rc.model.image_size)), rc.train.norm);
  const auto map = infer_anomaly(*model, img, rc.eval.scoring);
  export_anomaly_map(map, fs::path(prefix + ".pgm"));
  std::printf("score=%.9g\n", static_cast<double>(map.image_score));
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  const auto overrides = take_overrides(args);

  CLI::App app{"ViT feature-reconstruction anomaly detection", "vitad"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config", config_file, "key=value config file applied before flag overrides");
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.footer("Any config key can be overridden as --<key> <value>, e.g. --train.lr 1e-4.");

  auto* synth = app.add_subcommand("synth", "Write a deterministic synthetic dataset in MVTec layout");
  std::string synth_out;
  std::optional<int> classes;
  std::optional<std::uint64_t> seed;
  synth->add_option("out", synth_out, "Output directory (must be empty or absent)")->required();
  synth->add_option("--classes", classes, "Number of classes (synth.classes)");
  synth->add_option("--seed", seed, "Generator seed (synth.seed)");

  auto* trn = app.add_subcommand("train", "Train fuser and decoder on pooled normal images");
  std::string train_data, train_out;
  trn->add_option("data", train_data, "Dataset root")->required();
  trn->add_option("out", train_out, "Output directory for checkpoints, manifest and reports")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  std::string eval_ckpt, eval_data, eval_out;
  bool export_maps = false, oracle = false;
  std::optional<int> workers;
  ev->add_option("checkpoint", eval_ckpt, "Weight archive")->required();
  ev->add_option("data", eval_data, "Dataset root")->required();
  ev->add_option("out", eval_out, "Output directory")->required();
  ev->add_flag("--export-maps", export_maps, "Write per-image anomaly maps");
  ev->add_flag("--oracle-masks", oracle, "Score with ground-truth masks instead of the model");
  ev->add_option("--workers", workers, "Evaluation threads (eval.workers)");

  auto* inf = app.add_subcommand("infer", "Score one image");
  std::string inf_ckpt, inf_image, inf_prefix;
  inf->add_option("checkpoint", inf_ckpt, "Weight archive")->required();
  inf->add_option("image", inf_image, "PNM image")->required();
  inf->add_option("out_prefix", inf_prefix, "Writes <prefix>.pgm and <prefix>.pgm.txt")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  RunConfig rc;
  ConfigRegistry reg(rc);
  // Eval and infer start from the config saved next to the checkpoint.
  const std::string ckpt = ev->parsed() ? eval_ckpt : inf->parsed() ? inf_ckpt : "";
  if (!ckpt.empty() && fs::exists(config_beside(ckpt))) reg.load_file(config_beside(ckpt));
  if (!config_file.empty()) reg.load_file(config_file);
  if (classes) reg.set("synth.classes", std::to_string(*classes));
  if (seed) reg.set("synth.seed", std::to_string(*seed));
  if (workers) reg.set("eval.workers", std::to_string(*workers));
  if (oracle) reg.set("eval.oracle_masks", "true");
  for (const auto& [k, v] : overrides) reg.set(k, v);

  if (synth->parsed()) return cmd_synth(rc, synth_out);
  if (trn->parsed()) return cmd_train(rc, reg, train_data, train_out);
  if (ev->parsed()) return cmd_eval(rc, eval_ckpt, eval_data, eval_out, export_maps);
  return cmd_infer(rc, inf_ckpt, inf_image, inf_prefix);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const vitad::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const vitad::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
