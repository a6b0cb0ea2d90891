#include "cli.hpp"

#include "das/checkpoint.hpp"
#include "das/error.hpp"
#include "das/infer.hpp"
#include "das/label.hpp"
#include "das/metrics.hpp"
#include "das/store.hpp"
#include "das/synth.hpp"
#include "das/train.hpp"
#include "das/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace das::cli {

using nlohmann::json;

namespace {

// Structured log lines on stderr; plain "key=value" text unless --json.
class Log {
public:
  Log(std::ostream& err, bool as_json, bool quiet) : err_(err), json_(as_json), quiet_(quiet) {}

  void event(const std::string& name, const json& fields) const {
    if (quiet_) return;
    if (json_) {
      json line = fields;
      line["event"] = name;
      err_ << line.dump() << '\n';
      return;
    }
    err_ << name;
    for (const auto& [k, v] : fields.items()) err_ << ' ' << k << '=' << (v.is_string() ? v.get<std::string>() : v.dump());
    err_ << '\n';
  }

  void run_info(const std::string& command, std::uint64_t seed, std::string_view config) const {
    event("run", {{"command", command}, {"seed", seed}, {"config_hash", hex64(fnv1a(config))}});
  }

private:
  std::ostream& err_;
  bool json_;
  bool quiet_;
};

std::string read_text(const fs::path& path) { return read_file_bytes(path); }

void write_text(const fs::path& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path, text);
}

struct RegionArgs {
  std::size_t channel_start = 0;
  std::size_t channels = 0;  // 0 = to the end
  std::size_t sample_start = 0;
  std::size_t samples = 0;

  void add(CLI::App* app) {
    app->add_option("--channel-start", channel_start, "First channel of the region");
    app->add_option("--channels", channels, "Number of channels (default: all remaining)");
    app->add_option("--sample-start", sample_start, "First sample of the region");
    app->add_option("--samples", samples, "Number of samples (default: all remaining)");
  }

  RegionView view(const DasSegment& seg) const {
    require(channel_start < seg.n_channels() && sample_start < seg.n_samples(), "region start outside segment");
    const std::size_t rows = channels ? channels : seg.n_channels() - channel_start;
    const std::size_t cols = samples ? samples : seg.n_samples() - sample_start;
    return seg.region(channel_start, sample_start, rows, cols);
  }

  std::string describe() const {
    return std::to_string(channel_start) + ":" + std::to_string(channels) + "," + std::to_string(sample_start) +
           ":" + std::to_string(samples);
  }
};

std::vector<fs::path> list_segments(const fs::path& in) {
  std::vector<fs::path> files;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && e.path().extension() == ".dasf") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (in.extension() == ".dasf") {
    files.push_back(in);
  } else {
    // Plain list, one path per line, relative to the list's directory.
    std::istringstream lines(read_text(in));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty() || line[0] == '#') continue;
      fs::path p(line);
      files.push_back(p.is_absolute() ? p : in.parent_path() / p);
    }
  }
  if (files.empty()) fail(Errc::invalid_argument, "no segment files found in " + in.string());
  return files;
}

json components_json(const GaussianFitReport& r) {
  json comps = json::array();
  for (const auto& c : r.components) comps.push_back({{"amplitude", c.amplitude}, {"mean", c.mean}, {"sigma", c.sigma}});
  return {{"components", comps}, {"chi2_red", r.chi2_red}, {"rss", r.rss},        {"df", r.df},
          {"iterations", r.iterations}, {"converged", r.converged}};
}

// Reads the mean_p column of a scan CSV (error rows skipped) or one number per line.
std::vector<double> read_series(const fs::path& path) {
  std::istringstream lines(read_text(path));
  std::string line;
  std::vector<double> values;
  int column = -1;
  bool first = true;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char ch : line) {
      if (ch == '"') quoted = !quoted;
      else if (ch == ',' && !quoted) cells.push_back(std::exchange(cell, {}));
      else cell += ch;
    }
    cells.push_back(cell);
    if (first) {
      first = false;
      const auto it = std::find(cells.begin(), cells.end(), "mean_p");
      if (it != cells.end()) {
        column = static_cast<int>(it - cells.begin());
        continue;
      }
      column = 0;
    }
    if (static_cast<std::size_t>(column) >= cells.size() || cells[column].empty()) continue;
    if (cells.size() >= 4 && !cells[3].empty() && column == 1) continue;  // error row
    try {
      values.push_back(std::stod(cells[column]));
    } catch (const std::exception&) {
      fail(Errc::invalid_argument, "not a number in " + path.string() + ": " + cells[column]);
    }
  }
  return values;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DAS surface-wave detection toolkit", "das"};
  app.require_subcommand(1);
  bool as_json = false, quiet = false;
  app.add_flag("--json", as_json, "Machine-readable JSON log lines on stderr");
  app.add_flag("-q,--quiet", quiet, "Suppress log output");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic segment and its ground-truth mask");
  std::string synth_config, synth_out, synth_truth;
  std::size_t synth_random = 0, synth_tile = 200, synth_stride = 0;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--config", synth_config, "Scene config JSON (object or array)");
  synth->add_option("--random", synth_random, "Generate N randomized scenes instead of --config");
  synth->add_option("--out", synth_out, "Output .dasf (or directory for several scenes)")->required();
  synth->add_option("--truth", synth_truth, "Ground-truth JSON path (default: <out>.truth.json)");
  synth->add_option("--tile", synth_tile, "Tile size of the ground-truth mask");
  synth->add_option("--stride", synth_stride, "Mask stride (default: tile size)");
  synth->add_option("--seed", synth_seed, "Override the scene seed");

  // fit
  auto* fitc = app.add_subcommand("fit", "Histogram a region and fit one- and two-Gaussian models");
  std::string fit_in, fit_out;
  std::size_t fit_bins = kDefaultHistogramBins;
  RegionArgs fit_region;
  fitc->add_option("--in", fit_in, "Input .dasf")->required();
  fitc->add_option("--bins", fit_bins, "Histogram bins");
  fitc->add_option("--out", fit_out, "Report path (default: stdout)");
  fit_region.add(fitc);

  // spectra
  auto* spectra = app.add_subcommand("spectra", "Channel-averaged amplitude spectrum of a region");
  std::string spectra_in, spectra_out;
  RegionArgs spectra_region;
  spectra->add_option("--in", spectra_in, "Input .dasf")->required();
  spectra->add_option("--out", spectra_out, "CSV path (default: stdout)");
  spectra_region.add(spectra);

  // label
  auto* label = app.add_subcommand("label", "Label tiles spectrally and export a balanced corpus");
  std::string label_in, label_out, label_criteria;
  std::size_t label_per = 0, label_tile = 200, label_workers = 1;
  std::uint64_t label_seed = 0;
  label->add_option("--in", label_in, "Segment file, directory of .dasf, or list file")->required();
  label->add_option("--out", label_out, "Corpus output directory")->required();
  label->add_option("--per-label", label_per, "Tiles per retained class")->required();
  label->add_option("--tile", label_tile, "Tile size");
  label->add_option("--criteria", label_criteria, "Labeling criteria JSON");
  label->add_option("--seed", label_seed, "Selection seed");
  label->add_option("--workers", label_workers, "Classification threads");

  // train
  auto* trainc = app.add_subcommand("train", "Train the residual classifier on a corpus");
  std::string train_corpus, train_config, train_hyper, train_out, train_report, train_csv;
  std::size_t train_workers = 1;
  trainc->add_option("--corpus", train_corpus, "Corpus manifest.json")->required();
  trainc->add_option("--config", train_config, "Model config JSON");
  trainc->add_option("--hyper", train_hyper, "Hyperparameter JSON");
  trainc->add_option("--workers", train_workers, "Data-parallel replicas");
  trainc->add_option("--out", train_out, "Checkpoint path")->required();
  trainc->add_option("--report", train_report, "TrainReport JSON path (default: stdout)");
  trainc->add_option("--csv", train_csv, "Per-epoch CSV path");

  // infer
  auto* inferc = app.add_subcommand("infer", "Tiled inference over segments");
  std::string infer_model, infer_in, infer_out, infer_maps;
  std::size_t infer_tile = 0, infer_stride = 0, infer_workers = 1;
  inferc->add_option("--model", infer_model, "Checkpoint")->required();
  inferc->add_option("--in", infer_in, "Segment file, directory, or list file")->required();
  inferc->add_option("--tile", infer_tile, "Tile size (default: model input size)");
  inferc->add_option("--stride", infer_stride, "Tile stride (default: tile size)");
  inferc->add_option("--workers", infer_workers, "Scan workers");
  inferc->add_option("--out", infer_out, "Per-file CSV path (default: stdout)");
  inferc->add_option("--map-dir", infer_maps, "Write <name>.map.csv and <name>.map.pgm per file here");

  // daily
  auto* daily = app.add_subcommand("daily", "Downsample and smooth per-file mean probabilities");
  std::string daily_in, daily_out;
  std::size_t daily_factor = 10;
  double daily_sigma = 6.0;
  daily->add_option("--in", daily_in, "Per-file CSV from infer, or one value per line")->required();
  daily->add_option("--factor", daily_factor, "Downsample factor");
  daily->add_option("--sigma", daily_sigma, "Gaussian kernel sigma in downsampled points");
  daily->add_option("--out", daily_out, "CSV path (default: stdout)");

  // bench
  auto* bench = app.add_subcommand("bench", "Data-parallel training throughput");
  std::string bench_config;
  std::vector<std::size_t> bench_workers{1, 2, 4};
  std::size_t bench_steps = 5, bench_batch = 16, bench_input = 50;
  std::uint64_t bench_seed = 0;
  bench->add_option("--config", bench_config, "Model config JSON");
  bench->add_option("--input-size", bench_input, "Input size when no config is given");
  bench->add_option("--workers", bench_workers, "World sizes")->delimiter(',');
  bench->add_option("--steps", bench_steps, "Timed steps per world size");
  bench->add_option("--batch", bench_batch, "Per-replica batch size");
  bench->add_option("--seed", bench_seed, "Input seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    // Help for the subcommand that failed, when there is one.
    const auto parsed = app.get_subcommands();
    err << (parsed.empty() ? app.help() : parsed.front()->help());
    return kExitUsage;
  }

  const Log log(err, as_json, quiet);
  try {
    if (synth->parsed()) {
      std::vector<SceneConfig> configs;
      if (!synth_config.empty()) {
        configs = scene_configs_from_json(read_text(synth_config));
      } else if (synth_random > 0) {
        for (std::size_t i = 0; i < synth_random; ++i)
          configs.push_back(random_scene_config(mix_seed(synth_seed.value_or(0), i)));
      } else {
        err << "error: synth needs --config or --random\n" << synth->help();
        return kExitUsage;
      }
      if (synth_seed && !synth_config.empty())
        for (std::size_t i = 0; i < configs.size(); ++i) configs[i].seed = mix_seed(*synth_seed, i);
      const std::size_t stride = synth_stride ? synth_stride : synth_tile;
      for (const auto& c : configs) c.validate();
      const bool many = configs.size() > 1;
      if (many) fs::create_directories(synth_out);
      for (std::size_t i = 0; i < configs.size(); ++i) {
        const std::string cfg = scene_config_to_json(configs[i]);
        log.run_info("synth", configs[i].seed, cfg);
        const Scene scene = gen_scene(configs[i], synth_tile, stride);
        char name[32];
        std::snprintf(name, sizeof name, "scene_%03zu", i);
        const fs::path seg_path = many ? fs::path(synth_out) / (std::string(name) + ".dasf") : fs::path(synth_out);
        fs::path truth_path = !many && !synth_truth.empty() ? fs::path(synth_truth) : seg_path;
        if (many || synth_truth.empty()) truth_path.replace_extension(".truth.json");
        if (seg_path.has_parent_path()) fs::create_directories(seg_path.parent_path());
        write_segment(scene.segment, seg_path);
        json truth = json::parse(scene.truth.to_json());
        truth["scene"] = json::parse(scene_config_to_json(configs[i]));
        write_file_bytes(truth_path, truth.dump(1) + "\n");
        log.event("wrote", {{"segment", seg_path.string()},
                            {"truth", truth_path.string()},
                            {"noise_tiles", scene.truth.count(TruthLabel::noise)},
                            {"waves_tiles", scene.truth.count(TruthLabel::waves)}});
      }
      return kExitOk;
    }

    if (fitc->parsed()) {
      log.run_info("fit", 0, fit_in + "|" + fit_region.describe() + "|" + std::to_string(fit_bins));
      const DasSegment seg = read_segment(fit_in);
      const Histogram hist = histogram(fit_region.view(seg), fit_bins);
      const GaussianFitReport one = fit_gaussians(hist, 1);
      const GaussianFitReport two = fit_gaussians(hist, 2);
      json report = {{"n_values", static_cast<std::size_t>(hist.total())},
                     {"bins", fit_bins},
                     {"single", components_json(one)},
                     {"double", components_json(two)},
                     {"preferred", two.chi2_red < one.chi2_red ? "double" : "single"}};
      write_text(fit_out, report.dump(1) + "\n", out);
      return kExitOk;
    }

    if (spectra->parsed()) {
      log.run_info("spectra", 0, spectra_in + "|" + spectra_region.describe());
      const DasSegment seg = read_segment(spectra_in);
      const SpectralSummary s =
          average_spectral_amplitude(channel_spectra(spectra_region.view(seg), seg.info().sample_rate_hz));
      std::ostringstream csv;
      csv.precision(10);
      csv << "freq_hz,avg_amplitude\n";
      for (std::size_t k = 0; k < s.freqs.size(); ++k) csv << s.freqs[k] << ',' << s.avg_amplitude[k] << '\n';
      write_text(spectra_out, csv.str(), out);
      return kExitOk;
    }

    if (label->parsed()) {
      const LabelCriteria criteria = label_criteria.empty() ? LabelCriteria{} : LabelCriteria::from_json(read_text(label_criteria));
      log.run_info("label", label_seed, criteria.to_json() + "|" + std::to_string(label_tile));
      const auto files = list_segments(label_in);
      std::vector<DasSegment> segments;
      segments.reserve(files.size());
      for (const auto& f : files) segments.push_back(read_segment(f));
      std::vector<LabeledSource> sources;
      for (std::size_t i = 0; i < files.size(); ++i) sources.push_back({&segments[i], files[i].stem().string()});
      fs::create_directories(label_out);
      const CorpusManifest m =
          build_training_set(sources, criteria, label_tile, label_out, label_per, label_seed, label_workers);
      const auto counts = m.counts();
      log.event("corpus", {{"manifest", (fs::path(label_out) / "manifest.json").string()},
                           {"noise", counts.at("noise")},
                           {"waves", counts.at("waves")}});
      out << m.to_json() << "\n";
      return kExitOk;
    }

    if (trainc->parsed()) {
      const CorpusManifest manifest = CorpusManifest::load(train_corpus);
      ModelConfig config;
      config.input_size = manifest.tile_size;
      if (!train_config.empty()) config = ModelConfig::from_json(read_text(train_config));
      const Hyperparams hyper = train_hyper.empty() ? Hyperparams{} : Hyperparams::from_json(read_text(train_hyper));
      log.run_info("train", hyper.seed, config.to_json() + "|" + hyper.to_json());
      TrainOptions options;
      options.checkpoint_path = train_out;
      options.on_epoch = [&](const EpochMetrics& m) {
        log.event("epoch", {{"epoch", m.epoch},
                            {"train_loss", m.train_loss},
                            {"train_acc", m.train_accuracy},
                            {"val_acc", m.val_accuracy}});
      };
      if (fs::path(train_out).has_parent_path()) fs::create_directories(fs::path(train_out).parent_path());
      TrainReport report;
      train(manifest, config, hyper, train_workers, &report, options);
      write_text(train_report, report.to_json() + "\n", out);
      if (!train_csv.empty()) write_text(train_csv, report.epochs_csv(), out);
      return kExitOk;
    }

    if (inferc->parsed()) {
      const LoadedCheckpoint ckpt = load_checkpoint(infer_model);
      const std::size_t tile = infer_tile ? infer_tile : ckpt.model.config().input_size;
      const std::size_t stride = infer_stride ? infer_stride : tile;
      log.run_info("infer", ckpt.model.config().seed,
                   ckpt.model.config().to_json() + "|" + std::to_string(tile) + "|" + std::to_string(stride));
      const auto files = list_segments(infer_in);
      const auto rows = scan_corpus(ckpt.model, files, tile, stride, infer_workers);
      std::size_t failed = 0;
      for (const auto& r : rows)
        if (!r.ok()) {
          ++failed;
          log.event("file_error", {{"path", r.path}, {"error", r.error}});
        }
      write_text(infer_out, scan_csv(rows), out);
      if (!infer_maps.empty()) {
        fs::create_directories(infer_maps);
        for (std::size_t i = 0; i < files.size(); ++i) {
          if (!rows[i].ok()) continue;
          const ProbabilityMap map =
              infer_segment(ckpt.model, read_segment(files[i]), tile, stride, files[i].filename().string());
          const fs::path base = fs::path(infer_maps) / files[i].stem();
          write_file_bytes(base.string() + ".map.csv", map.to_csv());
          write_probability_pgm(map, base.string() + ".map.pgm");
        }
      }
      log.event("scanned", {{"files", rows.size()}, {"errors", failed}});
      return kExitOk;
    }

    if (daily->parsed()) {
      log.run_info("daily", 0, daily_in + "|" + std::to_string(daily_factor) + "|" + std::to_string(daily_sigma));
      const auto values = read_series(daily_in);
      const DailyCurve curve = daily_curve(values, daily_factor, daily_sigma);
      write_text(daily_out, curve.to_csv(), out);
      return kExitOk;
    }

    if (bench->parsed()) {
      ModelConfig config;
      config.input_size = bench_input;
      if (!bench_config.empty()) config = ModelConfig::from_json(read_text(bench_config));
      log.run_info("bench", bench_seed, config.to_json());
      const auto rows = throughput_benchmark(config, bench_workers, bench_steps, bench_batch, bench_seed);
      json table = json::array();
      for (const auto& r : rows)
        table.push_back({{"world_size", r.world_size},
                         {"samples_per_second", r.samples_per_second},
                         {"fraction_of_ideal", r.fraction_of_ideal}});
      out << table.dump(1) << "\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    log.event("error", {{"code", std::string(errc_name(e.code()))}, {"message", e.what()}});
    if (quiet) err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    log.event("error", {{"code", "runtime"}, {"message", e.what()}});
    if (quiet) err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace das::cli
