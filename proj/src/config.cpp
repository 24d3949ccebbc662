#include "pbseg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pbseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean (0/1/true/false), got '" + v + "'");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_size(key, item));
  }
  if (out.empty()) throw std::invalid_argument("config: key '" + key + "' expects a non-empty list");
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

void apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "model.queries") cfg.queries = parse_size(key, value);
  else if (key == "model.dim") cfg.dim = parse_size(key, value);
  else if (key == "model.heads") cfg.heads = parse_size(key, value);
  else if (key == "model.layers") cfg.layers = parse_size(key, value);
  else if (key == "model.classes") cfg.classes = parse_size(key, value);
  else if (key == "model.proj_dim") cfg.proj_dim = parse_size(key, value);
  else if (key == "model.ffn_hidden") cfg.ffn_hidden = parse_size(key, value);
  else if (key == "model.channels") {
    const auto list = parse_size_list(key, value);
    if (list.size() != 4) throw std::invalid_argument("config: model.channels expects exactly 4 values");
    for (std::size_t i = 0; i < 4; ++i) cfg.channels[i] = list[i];
  } else if (key == "model.input_h") cfg.input_h = parse_size(key, value);
  else if (key == "model.input_w") cfg.input_w = parse_size(key, value);
  else if (key == "model.lambda_cls") cfg.lambda_cls = parse_double(key, value);
  else if (key == "model.lambda_bce") cfg.lambda_bce = parse_double(key, value);
  else if (key == "model.lambda_dice") cfg.lambda_dice = parse_double(key, value);
  else if (key == "model.null_weight") cfg.null_weight = parse_double(key, value);
  else if (key == "model.use_pbca") cfg.use_pbca = parse_bool(key, value);
  else if (key == "model.use_cam") cfg.use_cam = parse_bool(key, value);
  else if (key == "model.use_dconv") cfg.use_dconv = parse_bool(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::map<std::string, std::string> model_config_entries(const ModelConfig& cfg) {
  std::map<std::string, std::string> m;
  m["model.queries"] = std::to_string(cfg.queries);
  m["model.dim"] = std::to_string(cfg.dim);
  m["model.heads"] = std::to_string(cfg.heads);
  m["model.layers"] = std::to_string(cfg.layers);
  m["model.classes"] = std::to_string(cfg.classes);
  m["model.proj_dim"] = std::to_string(cfg.proj_dim);
  m["model.ffn_hidden"] = std::to_string(cfg.ffn_hidden);
  m["model.channels"] = join_sizes({cfg.channels[0], cfg.channels[1], cfg.channels[2], cfg.channels[3]});
  m["model.input_h"] = std::to_string(cfg.input_h);
  m["model.input_w"] = std::to_string(cfg.input_w);
  m["model.lambda_cls"] = fmt_double(cfg.lambda_cls);
  m["model.lambda_bce"] = fmt_double(cfg.lambda_bce);
  m["model.lambda_dice"] = fmt_double(cfg.lambda_dice);
  m["model.null_weight"] = fmt_double(cfg.null_weight);
  m["model.use_pbca"] = cfg.use_pbca ? "1" : "0";
  m["model.use_cam"] = cfg.use_cam ? "1" : "0";
  m["model.use_dconv"] = cfg.use_dconv ? "1" : "0";
  return m;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "seed") seed = parse_u64(key, value);
  else if (key == "out") out_dir = value;
  else if (key.rfind("model.", 0) == 0) {
    if (key == "model.input_h" || key == "model.input_w") {
      throw std::invalid_argument("config: '" + key + "' is derived from data.height/data.width");
    }
    apply_model_key(model, key, value);
  } else if (key == "data.seed") data_seed = parse_u64(key, value);
  else if (key == "data.count") data_count = parse_size(key, value);
  else if (key == "data.height") data_height = parse_size(key, value);
  else if (key == "data.width") data_width = parse_size(key, value);
  else if (key == "train.lr") train_lr = parse_double(key, value);
  else if (key == "train.steps") train_steps = parse_size(key, value);
  else if (key == "train.batch") train_batch = parse_size(key, value);
  else if (key == "train.eval_count") eval_count = parse_size(key, value);
  else if (key == "bench.sizes") bench_sizes = parse_size_list(key, value);
  else if (key == "bench.queries") bench_queries = parse_size_list(key, value);
  else if (key == "bench.dims") bench_dims = parse_size_list(key, value);
  else if (key == "bench.heads") bench_heads = parse_size(key, value);
  else if (key == "bench.repeats") bench_repeats = parse_size(key, value);
  else if (key == "bench.warmups") bench_warmups = parse_size(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                                  line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      cfg.apply(key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.model.input_h = cfg.data_height;
  cfg.model.input_w = cfg.data_width;
  return cfg;
}

std::map<std::string, std::string> RunConfig::echo() const {
  std::map<std::string, std::string> m = model_config_entries(model);
  m["seed"] = std::to_string(seed);
  m["out"] = out_dir;
  m["data.seed"] = std::to_string(data_seed);
  m["data.count"] = std::to_string(data_count);
  m["data.height"] = std::to_string(data_height);
  m["data.width"] = std::to_string(data_width);
  m["train.lr"] = fmt_double(train_lr);
  m["train.steps"] = std::to_string(train_steps);
  m["train.batch"] = std::to_string(train_batch);
  m["train.eval_count"] = std::to_string(eval_count);
  m["bench.sizes"] = join_sizes(bench_sizes);
  m["bench.queries"] = join_sizes(bench_queries);
  m["bench.dims"] = join_sizes(bench_dims);
  m["bench.heads"] = std::to_string(bench_heads);
  m["bench.repeats"] = std::to_string(bench_repeats);
  m["bench.warmups"] = std::to_string(bench_warmups);
  return m;
}

}  // namespace pbseg
