#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "cki/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
  if (seeds.empty()) throw cki::ConfigError("no seeds given");
  return seeds;
}

std::vector<double> parse_taus(const std::string& csv) {
  std::vector<double> taus;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) taus.push_back(std::stod(item));
  if (taus.empty()) throw cki::ConfigError("no taus given");
  return taus;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
  cki::RunConfig cfg = cki::load_run_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (cfg.output_dir.empty()) cfg.output_dir = "out/run";
  cki::RunRecord rec = cki::train(cfg);
  std::cout << "final oa " << rec.final_eval.oa << " aa " << rec.final_eval.aa << " kappa "
            << rec.final_eval.kappa << " (" << rec.wall_seconds << " s)\n";
  std::cout << "outputs in " << cfg.output_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& scene, const std::string& manifest,
                 const std::string& out_dir) {
  cki::EvalReport r = cki::evaluate(ckpt, scene, manifest);
  std::cout << r.text();
  if (!out_dir.empty()) cki::save_report(r, out_dir);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& seeds_csv, int workers) {
  cki::RunConfig cfg = cki::load_run_config(config_path);
  if (cfg.output_dir.empty()) cfg.output_dir = "out/ablation";
  const auto table = cki::ablate(cfg, parse_seeds(seeds_csv), workers);
  std::cout << "components mean_oa mean_aa mean_kappa\n";
  for (const auto& row : table)
    std::cout << row.label << " " << row.mean_oa << " " << row.mean_aa << " "
              << row.mean_kappa << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& taus_csv,
              const std::string& seeds_csv, int workers) {
  cki::RunConfig cfg = cki::load_run_config(config_path);
  if (cfg.output_dir.empty()) cfg.output_dir = "out/tau_sweep";
  const auto table =
      cki::sweep_temperature(cfg, parse_taus(taus_csv), parse_seeds(seeds_csv), workers);
  std::cout << "tau mean_oa std_oa\n";
  for (const auto& row : table)
    std::cout << row.tau << " " << row.mean_oa << " " << row.std_oa << "\n";
  return 0;
}

int cmd_synth(const cki::SynthSpec& spec, const std::string& out_dir) {
  cki::SynthResult sr = cki::synth_cross_scene(spec);
  fs::create_directories(out_dir);
  cki::save_scene(sr.source, (fs::path(out_dir) / "source.json").string());
  cki::save_scene(sr.target, (fs::path(out_dir) / "target.json").string());
  json map = json::array();
  for (const auto& [s, t] : sr.shared_class_map) map.push_back({{"source", s}, {"target", t}});
  std::ofstream out(fs::path(out_dir) / "shared_map.json");
  out << map.dump(2) << "\n";
  std::cout << "wrote source.json (" << sr.source.bands << " bands, "
            << sr.source.num_classes() << " classes) and target.json (" << sr.target.bands
            << " bands, " << sr.target.num_classes() << " classes) to " << out_dir << "\n";
  return 0;
}

int cmd_convert(int64_t height, int64_t width, int64_t bands, const std::string& cube,
                const std::string& labels, const std::string& classes_csv,
                const std::string& scene_id, double wl_min, double wl_max,
                const std::string& out_header) {
  // validate payload sizes before writing the header
  const auto cube_size = fs::exists(cube) ? fs::file_size(cube) : 0;
  if (static_cast<int64_t>(cube_size) != height * width * bands * 4)
    throw cki::DataError("convert: cube file size " + std::to_string(cube_size) +
                         " does not match height*width*bands float32 values");
  const auto label_size = fs::exists(labels) ? fs::file_size(labels) : 0;
  if (static_cast<int64_t>(label_size) != height * width * 2)
    throw cki::DataError("convert: label file size does not match height*width uint16 values");

  std::vector<std::string> class_names;
  std::stringstream ss(classes_csv);
  std::string item;
  while (std::getline(ss, item, ',')) class_names.push_back(item);
  if (class_names.empty()) throw cki::ConfigError("convert: empty class list");

  const fs::path hp(out_header);
  if (!hp.parent_path().empty()) fs::create_directories(hp.parent_path());
  json j;
  j["scene_id"] = scene_id.empty() ? hp.stem().string() : scene_id;
  j["height"] = height;
  j["width"] = width;
  j["bands"] = bands;
  j["cube_file"] = fs::relative(cube, hp.parent_path().empty() ? "." : hp.parent_path()).string();
  j["label_file"] =
      fs::relative(labels, hp.parent_path().empty() ? "." : hp.parent_path()).string();
  j["class_names"] = class_names;
  j["wavelength_min"] = wl_min;
  j["wavelength_max"] = wl_max;
  std::ofstream out(out_header);
  out << j.dump(2) << "\n";
  // verify the result loads cleanly
  cki::load_scene(out_header, {.normalize = false});
  std::cout << "wrote " << out_header << "\n";
  return 0;
}

int cmd_split(const std::string& scene_header, int shots, uint64_t seed,
              const std::string& out_path) {
  cki::SceneCube scene = cki::load_scene(scene_header, {.normalize = false});
  cki::SplitManifest m = cki::make_split(scene, shots, seed);
  cki::save_manifest(m, out_path);
  std::cout << "wrote " << out_path << " (" << m.train_count() << " train, "
            << m.test_coords.size() << " test)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-scene knowledge transfer for hyperspectral classification"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt, scene, manifest, seeds_csv = "1,2,3,4,5";
  std::string taus_csv = "0.5,1,2,4";
  int workers = 0;

  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  train_cmd->add_option("--config", config_path, "run config JSON")->required();
  train_cmd->add_option("--output-dir", out_dir, "override the config output_dir");

  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a scene/manifest");
  eval_cmd->add_option("--checkpoint", ckpt)->required();
  eval_cmd->add_option("--scene", scene, "scene header JSON")->required();
  eval_cmd->add_option("--manifest", manifest, "split manifest")->required();
  eval_cmd->add_option("--out", out_dir, "optional report directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "run the cumulative component ablation");
  ablate_cmd->add_option("--config", config_path)->required();
  ablate_cmd->add_option("--seeds", seeds_csv, "comma-separated seeds");
  ablate_cmd->add_option("--workers", workers, "parallel runs (0 = auto)");

  auto* sweep_cmd = app.add_subcommand("sweep-tau", "distillation temperature sweep");
  sweep_cmd->add_option("--config", config_path)->required();
  sweep_cmd->add_option("--taus", taus_csv, "comma-separated temperatures");
  sweep_cmd->add_option("--seeds", seeds_csv, "comma-separated seeds");
  sweep_cmd->add_option("--workers", workers, "parallel runs (0 = auto)");

  cki::SynthSpec spec;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic cross-scene pair");
  synth_cmd->add_option("--source-bands", spec.source_bands);
  synth_cmd->add_option("--target-bands", spec.target_bands);
  synth_cmd->add_option("--shared-classes", spec.shared_classes);
  synth_cmd->add_option("--source-private", spec.source_private_classes);
  synth_cmd->add_option("--target-private", spec.target_private_classes);
  synth_cmd->add_option("--pixels-per-class", spec.pixels_per_class);
  synth_cmd->add_option("--noise-sigma", spec.noise_sigma);
  synth_cmd->add_option("--seed", spec.seed);
  synth_cmd->add_option("--out", out_dir, "output directory")->required();

  int64_t height = 0, width = 0, bands = 0;
  std::string cube_file, label_file, classes_csv, scene_id, header_out;
  double wl_min = 0.0, wl_max = 0.0;
  auto* convert_cmd =
      app.add_subcommand("convert", "wrap an existing raw raster pair in a scene header");
  convert_cmd->add_option("--height", height)->required();
  convert_cmd->add_option("--width", width)->required();
  convert_cmd->add_option("--bands", bands)->required();
  convert_cmd->add_option("--cube", cube_file, "float32 band-sequential raster")->required();
  convert_cmd->add_option("--labels", label_file, "uint16 row-major label raster")->required();
  convert_cmd->add_option("--classes", classes_csv, "comma-separated class names")->required();
  convert_cmd->add_option("--scene-id", scene_id);
  convert_cmd->add_option("--wavelength-min", wl_min);
  convert_cmd->add_option("--wavelength-max", wl_max);
  convert_cmd->add_option("--out", header_out, "header JSON to write")->required();

  int shots = 10;
  uint64_t split_seed = 1;
  auto* split_cmd = app.add_subcommand("split", "build a few-shot split manifest");
  split_cmd->add_option("--scene", scene)->required();
  split_cmd->add_option("--shots", shots);
  split_cmd->add_option("--seed", split_seed);
  split_cmd->add_option("--out", out_dir, "manifest path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out_dir);
    if (eval_cmd->parsed()) return cmd_evaluate(ckpt, scene, manifest, out_dir);
    if (ablate_cmd->parsed()) return cmd_ablate(config_path, seeds_csv, workers);
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, taus_csv, seeds_csv, workers);
    if (synth_cmd->parsed()) return cmd_synth(spec, out_dir);
    if (convert_cmd->parsed())
      return cmd_convert(height, width, bands, cube_file, label_file, classes_csv, scene_id,
                         wl_min, wl_max, header_out);
    if (split_cmd->parsed()) return cmd_split(scene, shots, split_seed, out_dir);
  } catch (const cki::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cki::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const cki::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
