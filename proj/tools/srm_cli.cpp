// srm: command-line driver for data preparation, training, inference and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>

#include "srm/synchrorama.hpp"

namespace fs = std::filesystem;
using namespace srm;

namespace {

void log_line(const std::string& s) { std::cerr << "[srm] " << s << '\n'; }

int cmd_synth(std::size_t clips, std::uint64_t seed, const fs::path& out, double duration, std::size_t res) {
  synth::Options opt;
  opt.duration_s = duration;
  opt.resolution = res;
  for (std::size_t i = 0; i < clips; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "clip_%03zu", i);
    synth::write_raw_clip(out / id, synth::make_clip(mix_seed(seed, id), opt), id);
  }
  log_line("wrote " + std::to_string(clips) + " synthetic clips to " + out.string());
  return 0;
}

int cmd_ingest(const fs::path& in, const fs::path& out, const pipeline::IngestOptions& opt) {
  const json manifest = pipeline::ingest_dataset(in, out, opt);
  for (const auto& r : manifest["rejected"])
    log_line("rejected " + r["id"].get<std::string>() + ": " + r["reason"].get<std::string>() + " (" +
             r["detail"].get<std::string>() + ")");
  log_line("accepted " + std::to_string(manifest["accepted"].size()) + ", rejected " +
           std::to_string(manifest["rejected"].size()));
  return 0;
}

struct TrainArgs {
  int stage = 0;
  fs::path config, data, out, init, resume, log;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  if (a.stage != 0) cfg.stage = a.stage;
  cfg.validate();
  const auto dataset = pipeline::load_dataset(a.data);
  pipeline::TrainOptions opt;
  opt.checkpoint_out = a.out;
  opt.loss_log = a.log;
  if (!a.resume.empty()) opt.resume = a.resume;
  opt.on_step = [&](long step, double total) {
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      std::ostringstream os;
      os << "stage " << cfg.stage << " step " << step << "/" << cfg.steps << " loss " << total;
      log_line(os.str());
    }
  };
  log_line("config " + cfg.hash() + ", " + std::to_string(dataset.size()) + " clips");
  const pipeline::TrainResult r = cfg.stage == 1 ? pipeline::train_stage1(dataset, cfg, opt)
                                                 : pipeline::train_stage2(dataset, cfg, a.init, opt);
  std::ostringstream os;
  os << "probe simple loss " << r.probe_initial << " -> " << r.probe_final << "; checkpoint " << a.out.string();
  log_line(os.str());
  return 0;
}

struct InferArgs {
  fs::path checkpoint, ref_image, audio, out, caption_file;
  std::string caption;
  std::uint64_t seed = 0;
  std::size_t ddim_steps = 40;
};

int cmd_infer(const InferArgs& a) {
  const pipeline::Models m = pipeline::load_models(a.checkpoint);
  pipeline::InferenceRequest req;
  req.reference_image = read_png(a.ref_image);
  req.caption = a.caption_file.empty() ? a.caption : read_file(a.caption_file);
  req.audio = read_wav(a.audio);
  req.seed = a.seed;
  req.ddim_steps = a.ddim_steps;
  const pipeline::InferenceResult r = pipeline::infer(req, m);

  fs::create_directories(a.out);
  write_frame_dir(a.out / "frames", r.frames);
  write_wav(a.out / "audio.wav", pipeline::standardize_audio(req.audio));
  const json info = {{"config_hash", m.config.hash()},
                     {"checkpoint", a.checkpoint.filename().string()},
                     {"seed", a.seed},
                     {"ddim_steps", a.ddim_steps},
                     {"frames", r.frames.dim(0)},
                     {"windows", r.windows},
                     {"caption", req.caption}};
  save_tensor(a.out / "latents.f32", r.latents, {{"config_hash", m.config.hash()}});
  write_json(a.out / "info.json", info);
  log_line("wrote " + std::to_string(r.frames.dim(0)) + " frames to " + (a.out / "frames").string());
  return 0;
}

/// A clip directory holds frames/; a set directory holds clip directories.
std::vector<std::pair<std::string, fs::path>> clip_dirs(const fs::path& root) {
  std::vector<std::pair<std::string, fs::path>> out;
  if (fs::is_directory(root / "frames")) return {{root.filename().string(), root}};
  if (!fs::is_directory(root)) throw IoError(root.string() + ": not a directory");
  for (const auto& e : fs::directory_iterator(root))
    if (fs::is_directory(e.path() / "frames")) out.emplace_back(e.path().filename().string(), e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(root.string() + ": no clip directories with frames/");
  return out;
}

int cmd_evaluate(const fs::path& pred, const fs::path& gt, const fs::path& report) {
  const auto p = clip_dirs(pred), g = clip_dirs(gt);
  std::vector<pipeline::EvalPair> pairs;
  std::string config_hash;
  const bool single = p.size() == 1 && g.size() == 1;
  for (const auto& [id, dir] : p) {
    auto it = std::find_if(g.begin(), g.end(), [&](const auto& x) { return single || x.first == id; });
    if (it == g.end()) throw std::invalid_argument("evaluate: no ground truth for clip " + id);
    pipeline::EvalPair e;
    e.id = id;
    e.pred = read_frame_dir(dir / "frames");
    e.gt = read_frame_dir(it->second / "frames");
    for (const fs::path& a : {it->second / "audio.wav", dir / "audio.wav"})
      if (fs::exists(a)) {
        e.audio = read_wav(a);
        break;
      }
    if (config_hash.empty() && fs::exists(dir / "info.json")) config_hash = read_json(dir / "info.json").value("config_hash", "");
    pairs.push_back(std::move(e));
  }
  const metrics::MetricReport r = pipeline::evaluate(pairs, config_hash);
  write_json(report, r.to_json());

  const std::vector<std::string> cols = {"PSNR", "SSIM", "FID", "FVD", "E-FID", "F1", "Sync", "CCC_V", "CCC_A"};
  std::ostringstream head, row;
  for (const auto& c : cols) {
    head << std::setw(9) << c;
    auto it = r.values.find(c);
    if (it == r.values.end()) row << std::setw(9) << "-";
    else row << std::setw(9) << std::fixed << std::setprecision(3) << it->second;
  }
  std::cout << head.str() << '\n' << row.str() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"srm: audio-driven talking-head toolkit"};
  app.require_subcommand(1);

  std::size_t n_clips = 2, res = 32;
  std::uint64_t seed = 0;
  double duration = 3.0;
  fs::path synth_out = "raw";
  auto* synth = app.add_subcommand("synth-data", "Generate synthetic talking-face clips");
  synth->add_option("--clips", n_clips, "Number of clips")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--duration", duration, "Clip duration in seconds")->check(CLI::PositiveNumber);
  synth->add_option("--resolution", res, "Frame size in pixels");

  pipeline::IngestOptions iopt;
  fs::path ingest_in, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Standardize and filter raw clips");
  ingest->add_option("--in", ingest_in, "Raw clip directory")->required();
  ingest->add_option("--out", ingest_out, "Dataset directory")->required();
  ingest->add_option("--fps", iopt.fps, "Target frame rate");
  ingest->add_option("--sr", iopt.sample_rate, "Target sample rate");
  ingest->add_option("--min-dur", iopt.min_duration_s, "Minimum duration (s)");
  ingest->add_option("--max-dur", iopt.max_duration_s, "Maximum duration (s)");
  ingest->add_option("--resolution", iopt.resolution, "Frame size in pixels");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run a training stage");
  train->add_option("--stage", ta.stage, "Stage (overrides the config)")->check(CLI::IsMember({1, 2}));
  train->add_option("--config", ta.config, "Key-value config file")->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Ingested dataset directory")->required();
  train->add_option("--out", ta.out, "Checkpoint to write")->required();
  train->add_option("--init", ta.init, "Stage-1 checkpoint (stage 2)");
  train->add_option("--resume", ta.resume, "Checkpoint of this stage to continue from")->check(CLI::ExistingFile);
  train->add_option("--log", ta.log, "JSON-lines loss report");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Generate a video from a reference image, caption and audio");
  infer->add_option("--checkpoint", ia.checkpoint, "Stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--ref-image", ia.ref_image, "Reference PNG")->required()->check(CLI::ExistingFile);
  infer->add_option("--caption", ia.caption, "Caption text");
  infer->add_option("--caption-file", ia.caption_file, "Caption text file")->check(CLI::ExistingFile);
  infer->add_option("--audio", ia.audio, "Driving WAV")->required()->check(CLI::ExistingFile);
  infer->add_option("--seed", ia.seed, "Sampling seed");
  infer->add_option("--ddim-steps", ia.ddim_steps, "DDIM steps")->check(CLI::PositiveNumber);
  infer->add_option("--out", ia.out, "Output directory")->required();

  fs::path pred, gt, report = "report.json";
  auto* eval = app.add_subcommand("evaluate", "Score generated clips against ground truth");
  eval->add_option("--pred", pred, "Generated clip (or directory of clips)")->required();
  eval->add_option("--gt", gt, "Ground-truth clip (or directory of clips)")->required();
  eval->add_option("--report", report, "MetricReport JSON to write");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(n_clips, seed, synth_out, duration, res);
    if (*ingest) return cmd_ingest(ingest_in, ingest_out, iopt);
    if (*train) return cmd_train(ta);
    if (*infer) return cmd_infer(ia);
    if (*eval) return cmd_evaluate(pred, gt, report);
  } catch (const std::exception& e) {
    std::cerr << "srm: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
