#pragma once

// Flat key-value configuration with [sections]. Every tunable lives in one
// registry so parsing, dumping and the generated reference stay in sync.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "d2d/lmn.hpp"
#include "d2d/pipeline.hpp"
#include "d2d/world.hpp"

namespace d2d {

struct Settings {
  WorldSpec world;
  PipelineConfig pipeline;

  HiddenActivation activation = HiddenActivation::leaky_relu;
  std::uint64_t lmn_init_seed = 1;
  std::string lmn_path;  // pre-aligned params; empty means align in-process

  SuiteTag suite = SuiteTag::small;
  std::size_t n_prompts = 100;
  std::uint64_t suite_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::vector<Mode> modes{Mode::d2d};
  std::size_t jobs = 0;  // 0: hardware concurrency

  /// World actually used for a suite: the large suite needs at least 24 slots.
  [[nodiscard]] WorldSpec world_for_suite() const {
    WorldSpec w = world;
    if (suite == SuiteTag::large && w.slots < 24) w.slots = 24;
    return w;
  }
};

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ConfigError("'" + key + "': not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ConfigError("'" + key + "': not a non-negative integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("'" + key + "': not a boolean: '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct SettingKey {
  std::string section;
  std::string key;
  std::string help;
  std::function<std::string(const Settings&)> get;
  std::function<void(Settings&, const std::string&)> set;

  [[nodiscard]] std::string name() const { return section + "." + key; }
};

inline const std::vector<SettingKey>& setting_keys() {
  using S = Settings;
  auto dbl = [](std::string sec, std::string key, std::string help, auto member) {
    return SettingKey{sec, key, std::move(help), [member](const S& s) { return fmt_double(member(const_cast<S&>(s))); },
                      [member, sec, key](S& s, const std::string& v) { member(s) = parse_double(sec + "." + key, v); }};
  };
  auto u64 = [](std::string sec, std::string key, std::string help, auto member) {
    return SettingKey{sec, key, std::move(help),
                      [member](const S& s) { return std::to_string(member(const_cast<S&>(s))); },
                      [member, sec, key](S& s, const std::string& v) {
                        member(s) = static_cast<std::remove_reference_t<decltype(member(s))>>(parse_u64(sec + "." + key, v));
                      }};
  };
  auto flag = [](std::string sec, std::string key, std::string help, auto member) {
    return SettingKey{sec, key, std::move(help), [member](const S& s) { return member(const_cast<S&>(s)) ? "true" : "false"; },
                      [member, sec, key](S& s, const std::string& v) { member(s) = parse_bool(sec + "." + key, v); }};
  };

  static const std::vector<SettingKey> keys = {
      u64("world", "seed", "seed of the frozen toy generator/detector", [](S& s) -> auto& { return s.world.seed; }),
      u64("world", "slots", "object slots S", [](S& s) -> auto& { return s.world.slots; }),
      u64("world", "slot_dim", "latent entries per slot q (d = S*q)", [](S& s) -> auto& { return s.world.slot_dim; }),
      u64("world", "classes", "object classes m", [](S& s) -> auto& { return s.world.classes; }),

      SettingKey{"critic", "tau", "detection confidence threshold in (0,1)",
                 [](const S& s) { return fmt_double(s.pipeline.critic.tau); },
                 [](S& s, const std::string& v) {
                   s.pipeline.critic = CriticConfig::make(parse_double("critic.tau", v), s.pipeline.critic.beta);
                 }},
      SettingKey{"critic", "beta", "sigmoid steepness",
                 [](const S& s) { return fmt_double(s.pipeline.critic.beta); },
                 [](S& s, const std::string& v) {
                   s.pipeline.critic = CriticConfig::make(s.pipeline.critic.tau, parse_double("critic.beta", v));
                 }},
      dbl("critic", "eval_tau", "threshold of the evaluation oracle", [](S& s) -> auto& { return s.pipeline.eval_tau; }),

      dbl("mix", "w", "weight of the original latent in the mix", [](S& s) -> auto& { return s.pipeline.mix.w; }),

      SettingKey{"lmn", "activation", "hidden activation: leaky_relu | tanh",
                 [](const S& s) { return std::string(activation_name(s.activation)); },
                 [](S& s, const std::string& v) { s.activation = parse_activation(v); }},
      u64("lmn", "init_seed", "seed of the random initial weights", [](S& s) -> auto& { return s.lmn_init_seed; }),
      SettingKey{"lmn", "path", "pre-aligned params file (empty: align in-process)",
                 [](const S& s) { return s.lmn_path; }, [](S& s, const std::string& v) { s.lmn_path = v; }},

      u64("align", "n_latents", "latents visited by alignment", [](S& s) -> auto& { return s.pipeline.align.n_latents; }),
      u64("align", "epochs", "descent steps per latent", [](S& s) -> auto& { return s.pipeline.align.epochs; }),
      dbl("align", "eta", "alignment learning rate", [](S& s) -> auto& { return s.pipeline.align.eta; }),
      dbl("align", "lambda", "alignment loss weight", [](S& s) -> auto& { return s.pipeline.align.lambda; }),
      u64("align", "seed", "seed of the alignment latents", [](S& s) -> auto& { return s.pipeline.align.seed; }),

      u64("calib", "t_min", "minimum calibration iterations", [](S& s) -> auto& { return s.pipeline.calib.t_min; }),
      dbl("calib", "eta", "calibration learning rate", [](S& s) -> auto& { return s.pipeline.calib.eta; }),
      dbl("calib", "lambda", "calibration loss weight", [](S& s) -> auto& { return s.pipeline.calib.lambda; }),
      dbl("calib", "tau_reg_factor", "tau_reg = factor * lambda * min reg_prime(d)",
          [](S& s) -> auto& { return s.pipeline.calib.tau_reg_factor; }),
      u64("calib", "max_resamples", "latent resamples before giving up",
          [](S& s) -> auto& { return s.pipeline.calib.max_resamples; }),

      dbl("optim", "eta", "numeracy learning rate", [](S& s) -> auto& { return s.pipeline.optim.eta; }),
      dbl("optim", "alpha", "critic loss weight", [](S& s) -> auto& { return s.pipeline.optim.alpha; }),
      dbl("optim", "lambda", "shell prior weight", [](S& s) -> auto& { return s.pipeline.optim.lambda; }),
      SettingKey{"optim", "K", "iteration budget (0: 200 single-class, 400 multi-class)",
                 [](const S& s) { return std::to_string(s.pipeline.optim.K.value_or(0)); },
                 [](S& s, const std::string& v) {
                   const auto k = parse_u64("optim.K", v);
                   if (k) s.pipeline.optim.K = k;
                   else s.pipeline.optim.K.reset();
                 }},
      flag("optim", "rescale_loss", "shrink the loss when the gradient norm exceeds grad_cap",
           [](S& s) -> auto& { return s.pipeline.optim.rescale_loss; }),
      dbl("optim", "grad_cap", "gradient norm cap", [](S& s) -> auto& { return s.pipeline.optim.grad_cap; }),
      flag("optim", "adaptive_lr", "slow down once every class is within one of its target",
           [](S& s) -> auto& { return s.pipeline.optim.adaptive_lr; }),
      dbl("optim", "lr_factor", "learning-rate multiplier near the target", [](S& s) -> auto& { return s.pipeline.optim.lr_factor; }),
      flag("optim", "adaptive_lambda", "grow lambda while the prior leaves its flat basin",
           [](S& s) -> auto& { return s.pipeline.optim.adaptive_lambda; }),
      dbl("optim", "lambda_growth", "lambda multiplier per step outside the basin",
          [](S& s) -> auto& { return s.pipeline.optim.lambda_growth; }),

      SettingKey{"reg", "a", "scale of reg_prime inside the powered prior",
                 [](const S& s) { return fmt_double(s.pipeline.reg_a); },
                 [](S& s, const std::string& v) { s.pipeline.reg_a = parse_double("reg.a", v); }},
      SettingKey{"reg", "c", "shift of the powered prior (empty: rounded -a * min reg_prime(d))",
                 [](const S& s) { return s.pipeline.reg_c ? fmt_double(*s.pipeline.reg_c) : std::string(); },
                 [](S& s, const std::string& v) {
                   if (v.empty())
                     s.pipeline.reg_c.reset();
                   else
                     s.pipeline.reg_c = parse_double("reg.c", v);
                 }},

      SettingKey{"bench", "suite", "small | multi | large", [](const S& s) { return std::string(suite_name(s.suite)); },
                 [](S& s, const std::string& v) { s.suite = parse_suite(v); }},
      u64("bench", "n_prompts", "prompts per suite", [](S& s) -> auto& { return s.n_prompts; }),
      u64("bench", "suite_seed", "seed of the prompt sampler", [](S& s) -> auto& { return s.suite_seed; }),
      SettingKey{"bench", "seeds", "comma-separated run seeds",
                 [](const S& s) {
                   std::string out;
                   for (std::size_t i = 0; i < s.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(s.seeds[i]);
                   return out;
                 },
                 [](S& s, const std::string& v) {
                   s.seeds.clear();
                   for (const auto& t : split_list(v)) s.seeds.push_back(parse_u64("bench.seeds", t));
                   if (s.seeds.empty()) throw ConfigError("bench.seeds: empty list");
                 }},
      SettingKey{"bench", "modes", "comma-separated: d2d, f-only, direct-latent, no-op",
                 [](const S& s) {
                   std::string out;
                   for (std::size_t i = 0; i < s.modes.size(); ++i) out += std::string(i ? "," : "") + mode_name(s.modes[i]);
                   return out;
                 },
                 [](S& s, const std::string& v) {
                   s.modes.clear();
                   for (const auto& t : split_list(v)) s.modes.push_back(parse_mode(t));
                   if (s.modes.empty()) throw ConfigError("bench.modes: empty list");
                 }},
      u64("bench", "jobs", "worker threads (0: all cores)", [](S& s) -> auto& { return s.jobs; }),
  };
  return keys;
}

inline const SettingKey* find_key(const std::string& name) {
  for (const auto& k : setting_keys())
    if (k.name() == name) return &k;
  return nullptr;
}

inline void set_value(Settings& s, const std::string& name, const std::string& value) {
  const SettingKey* k = find_key(name);
  if (!k) throw ConfigError("unknown config key '" + name + "'");
  try {
    k->set(s, value);
  } catch (const DomainError& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

/// Applies every key of an INI file; unknown sections or keys are errors.
/// Returns the names that were set.
inline std::vector<std::string> apply_config_file(Settings& s, const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot read config '" + path + "': " + e.message());
  }
  std::vector<std::string> seen;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must live in a [section]");
    for (const auto& [key, leaf] : body) {
      const std::string name = section + "." + key;
      set_value(s, name, leaf.get_value<std::string>());
      seen.push_back(name);
    }
  }
  return seen;
}

/// INI text of the given settings, one commented line per key.
inline std::string dump_config(const Settings& s) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : setting_keys()) {
    if (k.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << k.section << "]\n";
      section = k.section;
    }
    os << "; " << k.help << '\n' << k.key << " = " << k.get(s) << '\n';
  }
  return os.str();
}

}  // namespace d2d
