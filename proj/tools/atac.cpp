// Command-line front end: synth, train, score, eval, heatmap.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <atac/atac.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace atac;

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file (key = value with [section] headers)");
    app->add_option("--set", sets, "Override a config value as section.key=value")
        ->type_name("KEY=VAL");
    app->add_option("--seed", seed, "RNG seed (overrides config and ATAC_SEED)");
  }

  // Precedence: flags > --set > config file > ATAC_SEED env > defaults.
  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      const auto dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("config: --set expects section.key=value, got '" + s + "'");
      apply_kv(cfg, s.substr(0, dot), s.substr(dot + 1, eq - dot - 1),
               detail::trim(s.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

void write_resolved(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream out(dir / "resolved.cfg", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "resolved.cfg").string());
  out << serialize_config(cfg);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

// Accepts either a manifest file or a directory of .pgm/.ppm images
// (sorted by name, labels unknown and recorded as 0).
DatasetManifest resolve_input(const std::string& path) {
  if (fs::is_directory(path)) {
    DatasetManifest m;
    m.root = path;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(path)) {
      if (!e.is_regular_file()) continue;
      const std::string ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".ppm") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& n : names) m.entries.push_back({n, 0});
    return m;
  }
  return read_manifest(path);
}

struct ScoreRow {
  std::string id;
  int label = 0;
  double score = 0, topk1 = 0, topk2 = 0;
  CropBox box;
};

// Batch size only groups work; each sample's score is independent of its
// batch mates, so rows do not depend on listing order.
template <typename T>
std::vector<ScoreRow> score_samples(Model<T>& model, const std::vector<Sample<T>>& samples,
                                    const ScoringConfig& sc, std::size_t batch_size) {
  std::vector<ScoreRow> rows;
  NoGradGuard<T> ng;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - start);
    std::vector<Tensor<T>> imgs;
    for (std::size_t i = 0; i < n; ++i) imgs.push_back(to_chw(samples[start + i].image));
    Tensor<T> x = stack0(imgs);
    auto fwd = atac_forward(model, x, sc);
    for (std::size_t i = 0; i < n; ++i) {
      ScoreRow r;
      r.id = samples[start + i].id;
      r.label = samples[start + i].label;
      // The hinge penalizes anomalies by |deviation|, so a converged model may
      // push them to either side of the prior mean; the reported anomaly
      // score is the deviation magnitude. The per-pass columns stay signed.
      r.score = std::abs(static_cast<double>(fwd.scores.values()[i]));
      r.topk1 = static_cast<double>(fwd.topk1[i].value());
      r.topk2 = static_cast<double>(fwd.topk2[i].value());
      r.box = fwd.boxes[i];
      rows.push_back(std::move(r));
    }
    Tape<T>::active().clear();
  }
  return rows;
}

int cmd_synth(const CommonFlags& common, const std::string& out_dir, bool quiet) {
  RunConfig cfg = common.resolve();
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  validate_config(cfg);
  const fs::path out(cfg.out_dir);
  const fs::path parent = out.has_parent_path() ? out.parent_path() : fs::path(".");
  if (!fs::is_directory(parent))
    throw ConfigError("config: output directory parent does not exist: " + parent.string());
  SynthResult res = generate_synthetic(synth_config(cfg), cfg.out_dir);
  write_resolved(cfg, out);
  if (!quiet) std::cout << res.manifest_path << "\n";
  return 0;
}

int cmd_train(const CommonFlags& common, const std::string& data, const std::string& out_dir,
              const std::string& resume) {
  RunConfig cfg = common.resolve();
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!data.empty()) cfg.train_manifest = data;
  validate_config(cfg);
  if (cfg.train_manifest.empty())
    throw ConfigError("config: no training manifest (--data or data.train_manifest)");

  DatasetManifest manifest = read_manifest(cfg.train_manifest);
  auto all = load_dataset<float>(manifest, cfg.resolution);
  std::vector<Sample<float>> normals, anomalies;
  for (auto& s : all) (s.label == 0 ? normals : anomalies).push_back(std::move(s));
  if (normals.empty()) throw std::runtime_error("training set has no normal samples");

  TrainOptions opts = train_options(cfg);
  Model<float> model;
  Adam<float> opt;
  std::size_t epoch_begin = 0;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(resume);
    model = model_from_checkpoint<float>(ck);
    opt = Adam<float>(model.named_parameters());
    if (ck.has_opt) restore_adam(ck, opt);
    opts.seed = ck.seed;
    cfg.seed = ck.seed;
    epoch_begin = ck.next_epoch;
  } else {
    Rng init_rng(derive_seed(cfg.seed, "init", 0));
    model = Model<float>::init(model_config(cfg), init_rng);
    opt = Adam<float>(model.named_parameters());
  }

  std::vector<Sample<float>> episode =
      sample_episode(normals, anomalies, cfg.anomalies_per_episode,
                     derive_seed(cfg.seed, "episode", 0));

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  auto logs = train(model, opt, episode, opts, epoch_begin, opts.schedule.total_epochs);

  {
    std::ofstream log(out / "train_log.csv", std::ios::binary);
    if (!log) throw std::runtime_error("cannot write " + (out / "train_log.csv").string());
    log << epoch_log_header() << "\n";
    for (const auto& l : logs)
      log << l.epoch << "," << detail::fmt_f64(l.lr) << "," << detail::fmt_f64(l.mean_loss)
          << "," << detail::fmt_f64(l.mean_score_normal) << ","
          << detail::fmt_f64(l.mean_score_anomaly) << "\n";
  }
  Checkpoint ck = make_checkpoint(model, &opt, cfg.seed, opts.schedule.total_epochs);
  save_checkpoint((out / "model.ckpt").string(), ck);
  write_resolved(cfg, out);

  const double sep = logs.empty() ? 0.0
                                  : std::abs(logs.back().mean_score_anomaly) -
                                        std::abs(logs.back().mean_score_normal);
  std::printf("checkpoint %s\n", (out / "model.ckpt").string().c_str());
  std::printf("train separation (|mean anomaly| - |mean normal|): %.6f\n", sep);
  return 0;
}

int cmd_score(const CommonFlags& common, const std::string& ckpt_path, const std::string& data,
              const std::string& out_dir) {
  RunConfig cfg = common.resolve();
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  validate_config(cfg);

  Checkpoint ck = load_checkpoint(ckpt_path);
  Model<float> model = model_from_checkpoint<float>(ck);
  DatasetManifest manifest = resolve_input(data);
  auto samples = load_dataset<float>(manifest, model.cfg.input_resolution);

  auto rows = score_samples(model, samples, scoring_config(cfg), cfg.batch_size);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  const fs::path csv = out / "scores.csv";
  {
    std::ofstream f(csv, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + csv.string());
    f << "id,score,topk1,topk2,x0,y0,x1,y1\n";
    for (const auto& r : rows)
      f << csv_field(r.id) << "," << detail::fmt_f64(r.score) << "," << detail::fmt_f64(r.topk1)
        << "," << detail::fmt_f64(r.topk2) << "," << r.box.x0 << "," << r.box.y0 << ","
        << r.box.x1 << "," << r.box.y1 << "\n";
  }
  write_resolved(cfg, out);
  std::cout << csv.string() << "\n";
  return 0;
}

std::vector<ScoredSample> join_scores(const std::string& scores_csv,
                                      const std::string& labels_manifest) {
  std::ifstream f(scores_csv);
  if (!f) throw std::runtime_error("cannot open " + scores_csv);
  DatasetManifest labels = read_manifest(labels_manifest);
  std::map<std::string, int> label_of;
  for (const auto& e : labels.entries) label_of[e.path] = e.label;

  std::vector<ScoredSample> joined;
  std::string line;
  bool header = true;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos)
      throw std::runtime_error("malformed score row: " + line);
    const std::string id = line.substr(0, c1);
    const std::string sv = line.substr(c1 + 1, c2 == std::string::npos ? c2 : c2 - c1 - 1);
    auto it = label_of.find(id);
    if (it == label_of.end())
      throw std::runtime_error("score id '" + id + "' not present in " + labels_manifest);
    joined.push_back({id, it->second, std::stod(sv)});
  }
  return joined;
}

int cmd_eval(const CommonFlags& common, const std::string& scores_csv,
             const std::string& labels_manifest, const std::string& out_dir,
             std::size_t n_bins) {
  RunConfig cfg = common.resolve();
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  validate_config(cfg);

  auto joined = join_scores(scores_csv, labels_manifest);
  const double a = auroc(joined);
  Histogram h = score_histogram(joined, n_bins);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  {
    std::ofstream f(out / "histogram.csv", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (out / "histogram.csv").string());
    f << "bin_lo,bin_hi,normal,anomalous\n";
    for (std::size_t i = 0; i + 1 < h.edges.size(); ++i)
      f << detail::fmt_f64(h.edges[i]) << "," << detail::fmt_f64(h.edges[i + 1]) << ","
        << h.normal[i] << "," << h.anomalous[i] << "\n";
  }
  write_resolved(cfg, out);
  std::printf("AUROC %.4f\n", a);
  return 0;
}

int cmd_heatmap(const CommonFlags& common, const std::string& ckpt_path, const std::string& data,
                const std::string& out_dir, const std::string& source, bool mask) {
  RunConfig cfg = common.resolve();
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  validate_config(cfg);
  if (source != "anomaly" && source != "attention" && source != "gradcam")
    throw ConfigError("config: heatmap source must be anomaly, attention or gradcam, got '" +
                      source + "'");

  Checkpoint ck = load_checkpoint(ckpt_path);
  Model<float> model = model_from_checkpoint<float>(ck);
  DatasetManifest manifest = resolve_input(data);
  auto samples = load_dataset<float>(manifest, model.cfg.input_resolution);
  ScoringConfig sc = scoring_config(cfg);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  for (const auto& s : samples) {
    Tensor<float> x = stack0(std::vector<Tensor<float>>{to_chw(s.image)});
    auto fwd = atac_forward(model, x, sc);
    std::vector<float> map;
    std::size_t mh = 0, mw = 0;
    if (source == "anomaly") {
      auto v = fwd.map1.values();
      map.assign(v.begin(), v.end());
      mh = fwd.map1.dim(2);
      mw = fwd.map1.dim(3);
    } else if (source == "attention") {
      map = fwd.attention[0].values;
      mh = fwd.attention[0].h;
      mw = fwd.attention[0].w;
    } else {
      // saliency of what raises the deviation magnitude
      auto target = select0(fwd.scores, 0);
      if (target.value() < 0) target = scale(target, -1.0f);
      backward(target);
      auto cam = gradcam(fwd.attended1, 0, s.image.height, s.image.width);
      map = cam.map;
      mh = cam.h;
      mw = cam.w;
    }
    Tape<float>::active().clear();
    std::string base = s.id;
    for (char& c : base)
      if (c == '/' || c == '\\') c = '_';
    const std::string stem = (out / base).string();
    export_heatmap(map, mh, mw, s.image, stem,
                   mask ? std::optional<double>(cfg.omega) : std::nullopt);
    std::cout << stem << "\n";
  }
  write_resolved(cfg, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-guided two-pass anomaly scoring pipeline"};
  app.require_subcommand(1);

  CommonFlags common;
  std::string out_dir, data, ckpt, resume, scores_csv, labels_manifest;
  std::string preset, source = "anomaly";
  bool mask = false, quiet = false;
  std::size_t n_bins = 20;
  std::optional<std::size_t> anomalies, epochs, batch;
  bool flag_two_pass = false, flag_single_pass = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic textured defect dataset");
  common.attach(synth);
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--preset", preset, "Texture preset: stripes, blobs or noise");
  synth->add_flag("--quiet", quiet, "Suppress the manifest path line");

  auto* train = app.add_subcommand("train", "Train a model on a manifest");
  common.attach(train);
  train->add_option("--data", data, "Training manifest")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--anomalies", anomalies, "Real anomalies kept in the episode");
  train->add_option("--epochs", epochs, "Total epochs");
  train->add_option("--batch", batch, "Batch size");
  train->add_flag("--two-pass", flag_two_pass, "Score with the cropped second pass (default)");
  train->add_flag("--single-pass", flag_single_pass, "Score from the first pass only");
  train->add_option("--resume", resume, "Checkpoint to resume from");

  auto* score = app.add_subcommand("score", "Score a manifest or image directory");
  common.attach(score);
  score->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  score->add_option("--data", data, "Manifest file or image directory")->required();
  score->add_option("--out", out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Compute AUROC and a score histogram");
  common.attach(eval);
  eval->add_option("--scores", scores_csv, "Scores CSV from the score command")->required();
  eval->add_option("--labels", labels_manifest, "Manifest carrying the true labels")->required();
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_option("--bins", n_bins, "Histogram bin count");

  auto* heatmap = app.add_subcommand("heatmap", "Export per-sample heatmaps");
  common.attach(heatmap);
  heatmap->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  heatmap->add_option("--data", data, "Manifest file or image directory")->required();
  heatmap->add_option("--out", out_dir, "Output directory")->required();
  heatmap->add_option("--source", source, "Map to export: anomaly, attention or gradcam");
  heatmap->add_flag("--mask", mask, "Also write the omega-binarized mask");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      if (!preset.empty()) common.sets.insert(common.sets.begin(), "synth.texture=" + preset);
      return cmd_synth(common, out_dir, quiet);
    }
    if (*train) {
      if (anomalies)
        common.sets.push_back("data.anomalies_per_episode=" + std::to_string(*anomalies));
      if (epochs) common.sets.push_back("train.epochs=" + std::to_string(*epochs));
      if (batch) common.sets.push_back("train.batch_size=" + std::to_string(*batch));
      if (flag_two_pass && flag_single_pass)
        throw ConfigError("config: --two-pass and --single-pass are mutually exclusive");
      if (flag_two_pass) common.sets.push_back("scoring.two_pass=true");
      if (flag_single_pass) common.sets.push_back("scoring.two_pass=false");
      return cmd_train(common, data, out_dir, resume);
    }
    if (*score) return cmd_score(common, ckpt, data, out_dir);
    if (*eval) return cmd_eval(common, scores_csv, labels_manifest, out_dir, n_bins);
    if (*heatmap) return cmd_heatmap(common, ckpt, data, out_dir, source, mask);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
