#include "pdiff/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace pdiff {

void RunConfig::set_seed(std::uint64_t seed) {
  model.seed = seed;
  train.seed = seed;
  sampler.seed = seed;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

template <typename Get, typename Set>
ConfigKey key(std::string name, std::string help, Get get, Set set) {
  return {std::move(name), std::move(help), get, set};
}

#define PDIFF_INT(NAME, FIELD, HELP) \
  key(NAME, HELP, [](const RunConfig& c) { return std::to_string(c.FIELD); }, \
      [](RunConfig& c, const std::string& v) { c.FIELD = to_int(NAME, v); })
#define PDIFF_REAL(NAME, FIELD, HELP) \
  key(NAME, HELP, [](const RunConfig& c) { return fmt(c.FIELD); }, \
      [](RunConfig& c, const std::string& v) { c.FIELD = to_double(NAME, v); })
#define PDIFF_BOOL(NAME, FIELD, HELP) \
  key(NAME, HELP, [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }, \
      [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); })
#define PDIFF_STR(NAME, FIELD, HELP) \
  key(NAME, HELP, [](const RunConfig& c) { return c.FIELD; }, [](RunConfig& c, const std::string& v) { c.FIELD = v; })

std::vector<ConfigKey> build_keys() {
  return {
      key("seed", "root seed for every random stream (data, timestep, dropout, init, sampler)",
          [](const RunConfig& c) { return std::to_string(c.train.seed); },
          [](RunConfig& c, const std::string& v) { c.set_seed(to_u64("seed", v)); }),
      PDIFF_STR("manifest", manifest, "dataset manifest written by build-data"),
      PDIFF_STR("out", out, "output directory"),
      PDIFF_INT("image_size", model.image_size, "square image side in pixels"),
      key("widths", "UNet channel widths per level, comma separated",
          [](const RunConfig& c) {
            return std::to_string(c.model.widths[0]) + "," + std::to_string(c.model.widths[1]) + "," +
                   std::to_string(c.model.widths[2]);
          },
          [](RunConfig& c, const std::string& v) {
            std::stringstream ss(v);
            std::string part;
            std::vector<int> w;
            while (std::getline(ss, part, ',')) w.push_back(to_int("widths", trim(part)));
            if (w.size() != 3) throw ConfigError("'widths' expects three comma-separated integers");
            c.model.widths = {w[0], w[1], w[2]};
          }),
      PDIFF_INT("cond_width", model.cond_width, "text embedding width D_c"),
      PDIFF_INT("attention_dim", model.attention_dim, "cross-attention projection width d"),
      PDIFF_INT("heads", model.heads, "attention heads (1 or 2); maps are head-averaged"),
      PDIFF_INT("time_dim", model.time_dim, "sinusoidal timestep embedding width"),
      PDIFF_INT("head_hidden", model.head_hidden, "hidden width of the identity fusion MLP"),
      PDIFF_INT("max_tokens", model.max_tokens, "prompt length after padding"),
      PDIFF_INT("timesteps", model.timesteps, "diffusion steps T"),
      PDIFF_REAL("beta_start", model.beta_start, "first value of the linear beta schedule"),
      PDIFF_REAL("beta_end", model.beta_end, "last value of the linear beta schedule"),
      PDIFF_INT("steps", train.steps, "optimizer steps"),
      PDIFF_INT("batch_size", train.batch_size, "samples per step"),
      PDIFF_REAL("learning_rate", train.learning_rate, "step size"),
      PDIFF_STR("optimizer", train.optimizer, "sgd (momentum) or adam"),
      PDIFF_REAL("momentum", train.momentum, "SGD momentum"),
      PDIFF_REAL("clip_norm", train.clip_norm, "global gradient norm ceiling"),
      PDIFF_INT("checkpoint_interval", train.checkpoint_interval, "steps between checkpoints"),
      PDIFF_REAL("ema_decay", train.ema_decay, "decay of the weight average used for sampling (0 = raw weights)"),
      PDIFF_REAL("beta", train.weights.beta, "identity-token attention floor inside the face mask"),
      PDIFF_REAL("gamma", train.weights.gamma, "emotion-token attention floor inside the face mask"),
      PDIFF_REAL("lambda", train.weights.lambda, "weight of the identity-token localization row"),
      PDIFF_REAL("mu", train.weights.mu, "weight of the emotion-token localization row"),
      PDIFF_INT("gate", train.weights.gate, "identity loss applies only for t <= gate (R_t)"),
      PDIFF_REAL("face_region_fraction", train.weights.face_region_fraction,
                 "probability of restricting the noise loss to the face region"),
      PDIFF_REAL("dropout_unconditional", train.weights.dropout.unconditional,
                 "fraction of samples trained with the null conditioning"),
      PDIFF_REAL("dropout_text_only", train.weights.dropout.text_only,
                 "fraction of samples trained without the face embedding"),
      PDIFF_BOOL("localization", train.weights.localization, "enable the attention localization loss"),
      PDIFF_BOOL("identity", train.weights.identity, "enable the gated identity loss"),
      PDIFF_INT("num_steps", sampler.num_steps, "sampling steps"),
      PDIFF_REAL("guidance_scale", sampler.guidance_scale, "classifier-free guidance scale"),
      PDIFF_STR("method", sampler.method, "sampling method (euler)"),
  };
}

#undef PDIFF_INT
#undef PDIFF_REAL
#undef PDIFF_BOOL
#undef PDIFF_STR

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string k = trim(line.substr(0, eq));
    try {
      apply_setting(config, k, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string render_config(const RunConfig& config) {
  std::ostringstream out;
  for (const auto& k : config_keys()) out << "# " << k.help << '\n' << k.name << " = " << k.get(config) << "\n\n";
  return out.str();
}

}  // namespace pdiff
