#include "owtta/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace owtta {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw std::invalid_argument("config: bad number for " + key + ": " + v);
  }
}

int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return static_cast<int>(d);
  } catch (...) {
    throw std::invalid_argument("config: bad integer for " + key + ": " + v);
  }
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw std::invalid_argument("config: bad unsigned integer for " + key + ": " + v);
  }
}

void apply_key(FullConfig& cfg, const std::string& section, const std::string& key,
               const std::string& value) {
  if (section == "backbone") {
    auto& b = cfg.backbone;
    if (key == "layers") b.layers = parse_int(value, key);
    else if (key == "dim") b.dim = parse_int(value, key);
    else if (key == "heads") b.heads = parse_int(value, key);
    else if (key == "patches") b.patches = parse_int(value, key);
    else if (key == "classes") b.classes = parse_int(value, key);
    else if (key == "seed") b.seed = parse_u64(value, key);
    else throw std::invalid_argument("config: unknown key [backbone] " + key);
  } else if (section == "stream") {
    auto& s = cfg.stream;
    if (key == "id_classes") s.id_classes = parse_int(value, key);
    else if (key == "ood_classes") s.ood_classes = parse_int(value, key);
    else if (key == "ood_ratio") s.ood_ratio = parse_double(value, key);
    else if (key == "shift_strength") s.shift_strength = parse_double(value, key);
    else if (key == "batches") s.batches = parse_int(value, key);
    else if (key == "batch_size") s.batch_size = parse_int(value, key);
    else if (key == "seed") s.seed = parse_u64(value, key);
    else if (key == "proto_jitter") s.proto_jitter = parse_double(value, key);
    else if (key == "proto_candidates") s.proto_candidates = parse_int(value, key);
    else if (key == "ood_quantile") s.ood_quantile = parse_double(value, key);
    else if (key == "rotation_scale") s.rotation_scale = parse_double(value, key);
    else if (key == "noise_scale") s.noise_scale = parse_double(value, key);
    else throw std::invalid_argument("config: unknown key [stream] " + key);
  } else if (section == "adapt") {
    auto& a = cfg.adapt;
    if (key == "lr_norm") a.groups.lr_norm = parse_double(value, key);
    else if (key == "lr_aan") a.groups.lr_aan = parse_double(value, key);
    else if (key == "lr_psi") a.groups.lr_psi = parse_double(value, key);
    else if (key == "lr_ladder") a.groups.lr_ladder = parse_double(value, key);
    else if (key == "momentum") a.groups.momentum = parse_double(value, key);
    else if (key == "weight_decay") a.groups.weight_decay = parse_double(value, key);
    else if (key == "adapt_norm_layers") a.groups.adapt_norm_layers = parse_bool(value, key);
    else if (key == "rho") a.sam.rho = parse_double(value, key);
    else if (key == "lambda1") a.weights.lambda1 = parse_double(value, key);
    else if (key == "lambda2") a.weights.lambda2 = parse_double(value, key);
    else if (key == "beta1") a.weights.beta1 = parse_double(value, key);
    else if (key == "beta2") a.weights.beta2 = parse_double(value, key);
    else if (key == "fusion_alpha") a.fusion.alpha = parse_double(value, key);
    else if (key == "ood_entropy_threshold")
      a.fusion.h_thr_ood = (value == "auto") ? -1.0 : parse_double(value, key);
    else if (key == "enable_aan") a.enable_aan = parse_bool(value, key);
    else if (key == "enable_hln") a.enable_hln = parse_bool(value, key);
    else if (key == "differentiate_weights") a.differentiate_weights = parse_bool(value, key);
    else if (key == "predict_after_update") a.predict_after_update = parse_bool(value, key);
    else if (key == "single_pass") a.single_pass = parse_bool(value, key);
    else throw std::invalid_argument("config: unknown key [adapt] " + key);
  } else {
    throw std::invalid_argument("config: unknown section [" + section + "]");
  }
}

}  // namespace

void FullConfig::validate() const {
  backbone.validate();
  stream.validate(backbone);
  adapt.validate(backbone.classes);
}

FullConfig parse_config_text(const std::string& text) {
  FullConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: malformed section at line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty())
      throw std::invalid_argument("config: key outside any section at line " +
                                  std::to_string(lineno));
    apply_key(cfg, section, key, value);
  }
  cfg.validate();
  return cfg;
}

FullConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const FullConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[backbone]\n"
     << "layers = " << cfg.backbone.layers << "\n"
     << "dim = " << cfg.backbone.dim << "\n"
     << "heads = " << cfg.backbone.heads << "\n"
     << "patches = " << cfg.backbone.patches << "\n"
     << "classes = " << cfg.backbone.classes << "\n"
     << "seed = " << cfg.backbone.seed << "\n\n";
  os << "[stream]\n"
     << "id_classes = " << cfg.stream.id_classes << "\n"
     << "ood_classes = " << cfg.stream.ood_classes << "\n"
     << "ood_ratio = " << cfg.stream.ood_ratio << "\n"
     << "shift_strength = " << cfg.stream.shift_strength << "\n"
     << "batches = " << cfg.stream.batches << "\n"
     << "batch_size = " << cfg.stream.batch_size << "\n"
     << "seed = " << cfg.stream.seed << "\n"
     << "proto_jitter = " << cfg.stream.proto_jitter << "\n"
     << "proto_candidates = " << cfg.stream.proto_candidates << "\n"
     << "ood_quantile = " << cfg.stream.ood_quantile << "\n"
     << "rotation_scale = " << cfg.stream.rotation_scale << "\n"
     << "noise_scale = " << cfg.stream.noise_scale << "\n\n";
  const auto& a = cfg.adapt;
  os << "[adapt]\n"
     << "lr_norm = " << a.groups.lr_norm << "\n"
     << "lr_aan = " << a.groups.lr_aan << "\n"
     << "lr_psi = " << a.groups.lr_psi << "\n"
     << "lr_ladder = " << a.groups.lr_ladder << "\n"
     << "momentum = " << a.groups.momentum << "\n"
     << "weight_decay = " << a.groups.weight_decay << "\n"
     << "adapt_norm_layers = " << (a.groups.adapt_norm_layers ? "true" : "false") << "\n"
     << "rho = " << a.sam.rho << "\n"
     << "lambda1 = " << a.weights.lambda1 << "\n"
     << "lambda2 = " << a.weights.lambda2 << "\n"
     << "beta1 = " << a.weights.beta1 << "\n"
     << "beta2 = " << a.weights.beta2 << "\n"
     << "fusion_alpha = " << a.fusion.alpha << "\n"
     << "ood_entropy_threshold = ";
  if (a.fusion.h_thr_ood < 0)
    os << "auto\n";
  else
    os << a.fusion.h_thr_ood << "\n";
  os << "enable_aan = " << (a.enable_aan ? "true" : "false") << "\n"
     << "enable_hln = " << (a.enable_hln ? "true" : "false") << "\n"
     << "differentiate_weights = " << (a.differentiate_weights ? "true" : "false") << "\n"
     << "predict_after_update = " << (a.predict_after_update ? "true" : "false") << "\n"
     << "single_pass = " << (a.single_pass ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace owtta
