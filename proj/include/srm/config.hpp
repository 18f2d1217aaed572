#pragma once

// Declarative key = value configuration. Blank lines and '#' comments are
// ignored; unknown keys are errors. The hash covers every effective value in
// canonical (sorted) form, so two files that differ only in comments, order or
// omitted defaults hash the same.

#include <charconv>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "srm/a2m.hpp"
#include "srm/diffusion.hpp"
#include "srm/losses.hpp"
#include "srm/serialize.hpp"

namespace srm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int stage = 1;
  long steps = 3000;
  std::size_t batch_size = 2;
  double learning_rate = 1e-4;
  std::size_t resolution = 32;
  std::size_t clip_frames = 14;
  std::size_t motion_frames = 2;
  std::uint64_t seed = 0;
  std::size_t ddim_steps = 40;
  long log_every = 50;

  // diffusion backbone
  std::size_t diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t blocks = 3;
  std::size_t latent_channels = 4;
  std::size_t audio_radius = 0;

  // audio-to-motion
  long a2m_steps = 1000;
  double a2m_learning_rate = 1e-3;
  std::size_t a2m_latent_dim = 32;
  std::size_t a2m_flow_depth = 4;
  double a2m_kl_weight = 1e-2;

  // auxiliary loss weights
  losses::Weights weights;

  // ingest filters
  double min_duration_s = 3.0;
  double max_duration_s = 20.0;

  diffusion::Config diffusion_config() const {
    diffusion::Config c;
    c.latent_channels = latent_channels;
    c.width = width;
    c.heads = heads;
    c.blocks = blocks;
    c.audio_radius = audio_radius;
    return c;
  }

  a2m::Config a2m_config() const {
    a2m::Config c;
    c.latent_dim = a2m_latent_dim;
    c.flow_depth = a2m_flow_depth;
    c.beta = a2m_kl_weight;
    c.motion_channels = latent_channels;
    return c;
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    auto num = [](auto v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    m["stage"] = num(stage);
    m["steps"] = num(steps);
    m["batch_size"] = num(batch_size);
    m["learning_rate"] = num(learning_rate);
    m["resolution"] = num(resolution);
    m["clip_frames"] = num(clip_frames);
    m["motion_frames"] = num(motion_frames);
    m["seed"] = num(seed);
    m["ddim_steps"] = num(ddim_steps);
    m["log_every"] = num(log_every);
    m["diffusion_steps"] = num(diffusion_steps);
    m["beta_start"] = num(beta_start);
    m["beta_end"] = num(beta_end);
    m["width"] = num(width);
    m["heads"] = num(heads);
    m["blocks"] = num(blocks);
    m["latent_channels"] = num(latent_channels);
    m["audio_radius"] = num(audio_radius);
    m["a2m_steps"] = num(a2m_steps);
    m["a2m_learning_rate"] = num(a2m_learning_rate);
    m["a2m_latent_dim"] = num(a2m_latent_dim);
    m["a2m_flow_depth"] = num(a2m_flow_depth);
    m["a2m_kl_weight"] = num(a2m_kl_weight);
    m["weight_simple"] = num(weights.simple);
    m["weight_sync"] = num(weights.sync);
    m["weight_emo"] = num(weights.emo);
    m["weight_au"] = num(weights.au);
    m["weight_attr"] = num(weights.attr);
    m["min_duration_s"] = num(min_duration_s);
    m["max_duration_s"] = num(max_duration_s);
    return m;
  }

  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : to_map()) s += k + "=" + v + "\n";
    return s;
  }

  std::string hash() const { return sha256_hex(canonical()).substr(0, 16); }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("config: " + what);
    };
    require(stage == 1 || stage == 2, "stage must be 1 or 2");
    require(steps > 0 && a2m_steps >= 0, "steps must be positive");
    require(batch_size > 0, "batch_size must be positive");
    require(learning_rate > 0 && a2m_learning_rate > 0, "learning rates must be positive");
    require(resolution > 0 && resolution % 8 == 0, "resolution must be a positive multiple of 8");
    require(clip_frames > 0, "clip_frames must be positive");
    require(ddim_steps >= 1 && ddim_steps <= diffusion_steps, "ddim_steps must be in [1, diffusion_steps]");
    require(beta_start > 0 && beta_start < beta_end && beta_end < 1, "need 0 < beta_start < beta_end < 1");
    require(width % heads == 0, "width must be divisible by heads");
    require(blocks % 2 == 1, "blocks must be odd");
    require(log_every > 0, "log_every must be positive");
    require(weights.simple >= 0 && weights.sync >= 0 && weights.emo >= 0 && weights.au >= 0 && weights.attr >= 0,
            "loss weights must be non-negative");
    require(min_duration_s >= 0 && min_duration_s <= max_duration_s, "need 0 <= min_duration_s <= max_duration_s");
  }

  void set(const std::string& key, const std::string& value) {
    auto as_double = [&] {
      try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
      }
    };
    auto as_int = [&]<typename T>(T& out) {
      T v{};
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size())
        throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
      out = v;
    };
    if (key == "stage") as_int(stage);
    else if (key == "steps") as_int(steps);
    else if (key == "batch_size") as_int(batch_size);
    else if (key == "learning_rate") learning_rate = as_double();
    else if (key == "resolution") as_int(resolution);
    else if (key == "clip_frames") as_int(clip_frames);
    else if (key == "motion_frames") as_int(motion_frames);
    else if (key == "seed") as_int(seed);
    else if (key == "ddim_steps") as_int(ddim_steps);
    else if (key == "log_every") as_int(log_every);
    else if (key == "diffusion_steps") as_int(diffusion_steps);
    else if (key == "beta_start") beta_start = as_double();
    else if (key == "beta_end") beta_end = as_double();
    else if (key == "width") as_int(width);
    else if (key == "heads") as_int(heads);
    else if (key == "blocks") as_int(blocks);
    else if (key == "latent_channels") as_int(latent_channels);
    else if (key == "audio_radius") as_int(audio_radius);
    else if (key == "a2m_steps") as_int(a2m_steps);
    else if (key == "a2m_learning_rate") a2m_learning_rate = as_double();
    else if (key == "a2m_latent_dim") as_int(a2m_latent_dim);
    else if (key == "a2m_flow_depth") as_int(a2m_flow_depth);
    else if (key == "a2m_kl_weight") a2m_kl_weight = as_double();
    else if (key == "weight_simple") weights.simple = as_double();
    else if (key == "weight_sync") weights.sync = as_double();
    else if (key == "weight_emo") weights.emo = as_double();
    else if (key == "weight_au") weights.au = as_double();
    else if (key == "weight_attr") weights.attr = as_double();
    else if (key == "min_duration_s") min_duration_s = as_double();
    else if (key == "max_duration_s") max_duration_s = as_double();
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  static TrainConfig parse(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
  }

  static TrainConfig load(const std::filesystem::path& path) { return parse(read_file(path)); }

  void save(const std::filesystem::path& path) const { write_file(path, canonical()); }
};

}  // namespace srm
