// Command-line front end: pretraining, reconstruction, downstream evaluation
// and dataset generation in one binary.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "mae3d/config.hpp"
#include "mae3d/data.hpp"
#include "mae3d/downstream.hpp"
#include "mae3d/training.hpp"

namespace fs = std::filesystem;
using namespace mae3d;

namespace {

/// Thrown for bad configuration; mapped to exit code 1 (runtime errors: 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(const std::string& out_base, const std::string& subcommand,
                      std::uint64_t seed) {
  fs::path dir = fs::path(out_base) /
                 (subcommand + "-" + timestamp() + "-" + std::to_string(seed));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct CommonFlags {
  std::string config_path;
  std::string out_base = "runs";
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::string mask_strategy;
  double mask_ratio = -1.0;
  double alpha = -1.0;
  long long epochs = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value config file");
  cmd->add_option("--out", f.out_base, "output base directory")->capture_default_str();
  cmd->add_option("--seed", f.seed, "rng seed")->each([&](const std::string&) {
    f.seed_set = true;
  });
  cmd->add_option("--mask-strategy", f.mask_strategy, "block | random");
  cmd->add_option("--mask-ratio", f.mask_ratio, "fraction of patches to mask");
  cmd->add_option("--alpha", f.alpha, "fine-loss weight");
  cmd->add_option("--epochs", f.epochs, "training epochs");
}

PretrainConfig resolve_config(const CommonFlags& f) {
  PretrainConfig cfg;
  try {
    if (!f.config_path.empty()) apply_config(cfg, parse_config_file(f.config_path));
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (f.seed_set) cfg.seed = f.seed;
  if (!f.mask_strategy.empty()) cfg.mask_strategy = f.mask_strategy;
  if (f.mask_ratio >= 0.0) cfg.mask_ratio = f.mask_ratio;
  if (f.alpha >= 0.0) cfg.alpha = f.alpha;
  if (f.epochs >= 0) cfg.epochs = static_cast<std::size_t>(f.epochs);
  if (cfg.mask_strategy != "block" && cfg.mask_strategy != "random")
    throw ConfigError("unknown mask strategy: " + cfg.mask_strategy);
  if (cfg.mask_ratio < 0.0 || cfg.mask_ratio >= 1.0)
    throw ConfigError("mask ratio must be in [0,1)");
  return cfg;
}

struct LoadedData {
  Dataset ds;
  std::vector<PointCloud> train, test;
  std::vector<int> train_labels, test_labels;
  int num_classes = 0;
};

LoadedData load_dataset(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--data is required");
  LoadedData out;
  out.ds = cache_read((fs::path(dir) / "cache.bin").string());
  const auto manifest = manifest_read((fs::path(dir) / "manifest.csv").string());
  if (manifest.size() != out.ds.size())
    throw std::runtime_error("manifest/cache size mismatch in " + dir);
  out.ds.manifest = manifest;
  for (std::size_t i = 0; i < out.ds.size(); ++i) {
    auto cloud = normalize_unit_sphere(out.ds.clouds[i]);
    cloud.label = manifest[i].label;
    if (manifest[i].split == "train") {
      out.train.push_back(std::move(cloud));
      out.train_labels.push_back(manifest[i].label);
    } else {
      out.test.push_back(std::move(cloud));
      out.test_labels.push_back(manifest[i].label);
    }
  }
  out.num_classes = out.ds.num_classes();
  return out;
}

Checkpoint load_required_ckpt(const std::string& path) {
  if (path.empty()) throw ConfigError("--ckpt is required");
  return checkpoint_load(path);
}

void snapshot_config(const fs::path& run_dir, const PretrainConfig& cfg) {
  write_text(run_dir / "resolved.cfg", canonical_config(cfg));
}

std::vector<std::vector<float>> backbone_features(const std::vector<PointCloud>& clouds,
                                                  const Checkpoint* ck, std::size_t d_feat,
                                                  std::uint64_t seed) {
  Rng rng(seed);
  Backbone<float> bb(d_feat, rng);
  if (ck) bb.load_pretrained(*ck);
  return cache_features(bb, clouds);
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_synth_data(const CommonFlags& f, const std::string& classes_csv, std::size_t n,
                   std::size_t points) {
  SynthSpec spec;
  std::stringstream cs(classes_csv);
  std::string cls;
  while (std::getline(cs, cls, ','))
    if (!cls.empty()) spec.classes.push_back(cls);
  if (spec.classes.empty()) throw ConfigError("--classes must name at least one class");
  spec.samples_per_class = n;
  spec.points = points;

  Rng rng(f.seed);
  auto ds = synth_dataset(spec, rng);
  const auto run_dir = make_run_dir(f.out_base, "synth-data", f.seed);
  cache_write(ds, (run_dir / "cache.bin").string());
  manifest_write(ds, (run_dir / "manifest.csv").string());
  std::ostringstream meta;
  meta << "classes=" << classes_csv << "\nsamples_per_class=" << n << "\npoints=" << points
       << "\nseed=" << f.seed << "\n";
  write_text(run_dir / "resolved.cfg", meta.str());
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const CommonFlags& f, const std::string& data_dir) {
  const PretrainConfig cfg = resolve_config(f);
  auto data = load_dataset(data_dir);
  if (data.train.empty()) throw ConfigError("dataset has no train split");

  const auto run_dir = make_run_dir(f.out_base, "pretrain", cfg.seed);
  snapshot_config(run_dir, cfg);

  Pretrainer<float> trainer(cfg);
  std::ofstream metrics(run_dir / "metrics.csv");
  Pretrainer<float>::write_metrics_header(metrics);
  trainer.run(data.train, &metrics);
  metrics.close();

  checkpoint_save(trainer.make_checkpoint(static_cast<std::uint32_t>(cfg.epochs)),
                  (run_dir / "last.ckpt").string());
  const double cd = eval_reconstruction_cd(data.test.empty() ? data.train : data.test,
                                           trainer.model(), cfg);
  std::ofstream eval(run_dir / "eval.csv");
  eval << "split,reconstruction_cd\n"
       << (data.test.empty() ? "train" : "test") << "," << std::setprecision(10) << cd << "\n";
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_reconstruct(const CommonFlags& f, const std::string& ckpt_path,
                    const std::string& input_path) {
  PretrainConfig cfg = resolve_config(f);
  const Checkpoint ck = load_required_ckpt(ckpt_path);
  if (ck.config_hash != config_hash(canonical_config(cfg)))
    std::cerr << "warning: checkpoint config hash differs from the resolved config\n";

  if (input_path.empty()) throw ConfigError("--input is required");
  const PointCloud raw = read_xyz(input_path);
  const PointCloud cloud = normalize_unit_sphere(raw);

  Pretrainer<float> trainer(cfg);
  checkpoint_apply(ck, trainer.model().params());

  Rng rng(cfg.seed);
  const PatchSet ps = build_patchset(cloud, cfg, rng);
  auto out = trainer.model().forward_pretrain(cloud, ps, rng, /*train=*/false);

  const auto run_dir = make_run_dir(f.out_base, "reconstruct", cfg.seed);
  snapshot_config(run_dir, cfg);
  write_xyz(raw, (run_dir / "input.xyz").string());
  write_xyz(cloud, (run_dir / "ground_truth.xyz").string());

  PointCloud visible;
  for (std::size_t vi : ps.visible_idx)
    for (std::size_t member : ps.patches[vi]) visible.points.push_back(cloud.points[member]);
  write_xyz(visible, (run_dir / "visible.xyz").string());

  PointCloud recon;
  for (std::size_t i = 0; i < out.fine_cloud.rows(); ++i)
    recon.points.push_back(Vec3{out.fine_cloud.value()[i * 3], out.fine_cloud.value()[i * 3 + 1],
                                out.fine_cloud.value()[i * 3 + 2]});
  write_xyz(recon, (run_dir / "output.xyz").string());

  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "loss_center,loss_fine,loss_total\n"
          << std::setprecision(10) << out.loss_center.item() << "," << out.loss_fine.item()
          << "," << out.loss.item() << "\n";
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_finetune(const CommonFlags& f, const std::string& data_dir, const std::string& ckpt_path,
                 const std::string& subset) {
  if (!subset.empty() && subset != "extractor")
    throw ConfigError("--subset supports only 'extractor'");
  const PretrainConfig pcfg = resolve_config(f);
  auto data = load_dataset(data_dir);
  if (data.train.empty() || data.test.empty()) throw ConfigError("need train and test splits");

  DownstreamConfig cfg;
  cfg.seed = pcfg.seed;
  cfg.d_feat = pcfg.d_feat;
  if (f.epochs >= 0) cfg.epochs = static_cast<std::size_t>(f.epochs);

  std::optional<Checkpoint> ck;
  if (!ckpt_path.empty()) ck = checkpoint_load(ckpt_path);

  const auto run_dir = make_run_dir(f.out_base, "finetune", cfg.seed);
  snapshot_config(run_dir, pcfg);
  auto result = finetune_run<float>(data.train, data.train_labels, data.test, data.test_labels,
                                    data.num_classes, ck ? &*ck : nullptr, cfg);
  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "epoch,test_accuracy\n";
  for (std::size_t e = 0; e < result.epoch_accuracy.size(); ++e)
    metrics << e << "," << std::setprecision(10) << result.epoch_accuracy[e] << "\n";
  std::cout << "best_accuracy " << result.best_accuracy << "\n";
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_probe(const CommonFlags& f, const std::string& data_dir, const std::string& ckpt_path,
              double data_ratio) {
  const PretrainConfig pcfg = resolve_config(f);
  auto data = load_dataset(data_dir);
  if (data.train.empty() || data.test.empty()) throw ConfigError("need train and test splits");

  DownstreamConfig cfg;
  cfg.seed = pcfg.seed;
  cfg.d_feat = pcfg.d_feat;
  if (f.epochs >= 0) cfg.epochs = static_cast<std::size_t>(f.epochs);

  std::optional<Checkpoint> ck;
  if (!ckpt_path.empty()) ck = checkpoint_load(ckpt_path);
  auto train_feats = backbone_features(data.train, ck ? &*ck : nullptr, cfg.d_feat, cfg.seed);
  auto test_feats = backbone_features(data.test, ck ? &*ck : nullptr, cfg.d_feat, cfg.seed);

  std::vector<std::vector<float>> probe_train = train_feats;
  std::vector<int> probe_labels = data.train_labels;
  if (data_ratio < 1.0) {
    Rng rng(cfg.seed + 13);
    const auto subset = limited_subset(data.train_labels, data_ratio, data.num_classes, rng);
    probe_train.clear();
    probe_labels.clear();
    for (std::size_t i : subset) {
      probe_train.push_back(train_feats[i]);
      probe_labels.push_back(data.train_labels[i]);
    }
  }
  const double acc = linear_probe(probe_train, probe_labels, test_feats, data.test_labels,
                                  data.num_classes, cfg);
  const auto run_dir = make_run_dir(f.out_base, "probe", cfg.seed);
  snapshot_config(run_dir, pcfg);
  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "data_ratio,test_accuracy\n"
          << data_ratio << "," << std::setprecision(10) << acc << "\n";
  std::cout << "probe_accuracy " << acc << "\n";
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_fewshot(const CommonFlags& f, const std::string& data_dir, const std::string& ckpt_path,
                const FewShotEpisodeSpec& spec) {
  const PretrainConfig pcfg = resolve_config(f);
  auto data = load_dataset(data_dir);

  DownstreamConfig cfg;
  cfg.seed = pcfg.seed;
  cfg.d_feat = pcfg.d_feat;

  std::optional<Checkpoint> ck;
  if (!ckpt_path.empty()) ck = checkpoint_load(ckpt_path);

  std::vector<PointCloud> all = data.train;
  all.insert(all.end(), data.test.begin(), data.test.end());
  std::vector<int> labels = data.train_labels;
  labels.insert(labels.end(), data.test_labels.begin(), data.test_labels.end());
  auto feats = backbone_features(all, ck ? &*ck : nullptr, cfg.d_feat, cfg.seed);

  auto result = fewshot_eval(feats, labels, data.num_classes, spec, cfg);
  const auto run_dir = make_run_dir(f.out_base, "fewshot", cfg.seed);
  snapshot_config(run_dir, pcfg);
  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "episode,accuracy\n";
  for (std::size_t e = 0; e < result.episode_accuracy.size(); ++e)
    metrics << e << "," << std::setprecision(10) << result.episode_accuracy[e] << "\n";
  std::cout << spec.ways << "-way " << spec.shots << "-shot: " << result.mean << " +/- "
            << result.std_dev << "\n";
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_ablate_masking(const CommonFlags& f, const std::string& data_dir,
                       const std::string& ratios_csv) {
  PretrainConfig base = resolve_config(f);
  auto data = load_dataset(data_dir);
  if (data.train.empty() || data.test.empty()) throw ConfigError("need train and test splits");

  std::vector<double> ratios;
  std::stringstream rs(ratios_csv);
  std::string tok;
  while (std::getline(rs, tok, ','))
    if (!tok.empty()) ratios.push_back(std::stod(tok));
  if (ratios.empty()) throw ConfigError("--ratios must list at least one ratio");

  const auto run_dir = make_run_dir(f.out_base, "ablate-masking", base.seed);
  snapshot_config(run_dir, base);
  std::ofstream csv(run_dir / "ablation.csv");
  csv << "strategy,ratio,final_cd,probe_accuracy\n";

  DownstreamConfig dcfg;
  dcfg.seed = base.seed;
  dcfg.d_feat = base.d_feat;

  for (const std::string strategy : {"random", "block"}) {
    for (const double ratio : ratios) {
      PretrainConfig cfg = base;
      cfg.mask_strategy = strategy;
      cfg.mask_ratio = ratio;
      Pretrainer<float> trainer(cfg);
      trainer.run(data.train);
      const double cd = eval_reconstruction_cd(data.test, trainer.model(), cfg);
      auto ck = trainer.make_checkpoint(static_cast<std::uint32_t>(cfg.epochs));
      auto train_feats = backbone_features(data.train, &ck, cfg.d_feat, cfg.seed);
      auto test_feats = backbone_features(data.test, &ck, cfg.d_feat, cfg.seed);
      const double acc = linear_probe(train_feats, data.train_labels, test_feats,
                                      data.test_labels, data.num_classes, dcfg);
      csv << strategy << "," << ratio << "," << std::setprecision(10) << cd << "," << acc
          << "\n";
      csv.flush();
      std::cout << strategy << " " << ratio << " cd=" << cd << " probe=" << acc << std::endl;
    }
  }
  std::cout << run_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("MAE3D_THREADS")) {
    try {
      Eigen::setNbThreads(std::max(1, std::stoi(threads)));
    } catch (const std::exception&) {
      std::cerr << "error: MAE3D_THREADS must be an integer\n";
      return 1;
    }
  }

  CLI::App app{"masked point-cloud autoencoder toolkit"};
  app.require_subcommand(1);

  CommonFlags f;
  std::string data_dir, ckpt_path, input_path, subset;
  std::string classes_csv = "sphere,cube,cylinder,torus";
  std::string ratios_csv = "0.1,0.3,0.5,0.7,0.9";
  std::size_t synth_n = 50, synth_points = 1024;
  double data_ratio = 1.0;
  FewShotEpisodeSpec fewshot_spec;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset cache");
  add_common(synth, f);
  synth->add_option("--classes", classes_csv, "comma-separated class names")
      ->capture_default_str();
  synth->add_option("--n", synth_n, "samples per class")->capture_default_str();
  synth->add_option("--points", synth_points, "points per cloud")->capture_default_str();

  auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
  add_common(pretrain, f);
  pretrain->add_option("--data", data_dir, "dataset directory (cache.bin + manifest.csv)");

  auto* reconstruct = app.add_subcommand("reconstruct", "reconstruct one cloud from a checkpoint");
  add_common(reconstruct, f);
  reconstruct->add_option("--ckpt", ckpt_path, "pretraining checkpoint");
  reconstruct->add_option("--input", input_path, "input cloud (.xyz)");

  auto* finetune = app.add_subcommand("finetune", "supervised fine-tuning");
  add_common(finetune, f);
  finetune->add_option("--data", data_dir, "dataset directory");
  finetune->add_option("--ckpt", ckpt_path, "optional pretraining checkpoint");
  finetune->add_option("--subset", subset, "checkpoint subset to transfer (extractor)");

  auto* probe = app.add_subcommand("probe", "frozen-feature linear probe");
  add_common(probe, f);
  probe->add_option("--data", data_dir, "dataset directory");
  probe->add_option("--ckpt", ckpt_path, "optional pretraining checkpoint");
  probe->add_option("--data-ratio", data_ratio, "fraction of train data for the probe")
      ->capture_default_str();

  auto* fewshot = app.add_subcommand("fewshot", "K-way N-shot evaluation");
  add_common(fewshot, f);
  fewshot->add_option("--data", data_dir, "dataset directory");
  fewshot->add_option("--ckpt", ckpt_path, "optional pretraining checkpoint");
  fewshot->add_option("--ways", fewshot_spec.ways)->capture_default_str();
  fewshot->add_option("--shots", fewshot_spec.shots)->capture_default_str();
  fewshot->add_option("--queries", fewshot_spec.queries)->capture_default_str();
  fewshot->add_option("--episodes", fewshot_spec.episodes)->capture_default_str();

  auto* ablate = app.add_subcommand("ablate-masking", "strategy x ratio sweep");
  add_common(ablate, f);
  ablate->add_option("--data", data_dir, "dataset directory");
  ablate->add_option("--ratios", ratios_csv, "comma-separated mask ratios")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(f, classes_csv, synth_n, synth_points);
    if (pretrain->parsed()) return cmd_pretrain(f, data_dir);
    if (reconstruct->parsed()) return cmd_reconstruct(f, ckpt_path, input_path);
    if (finetune->parsed()) return cmd_finetune(f, data_dir, ckpt_path, subset);
    if (probe->parsed()) return cmd_probe(f, data_dir, ckpt_path, data_ratio);
    if (fewshot->parsed()) return cmd_fewshot(f, data_dir, ckpt_path, fewshot_spec);
    if (ablate->parsed()) return cmd_ablate_masking(f, data_dir, ratios_csv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
