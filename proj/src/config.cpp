#include "tpkd/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tpkd/error.hpp"

namespace tpkd {

void ToyTaskSpec::validate() const {
  require(vocab >= 1 && feat_dim >= 1, ErrorCode::kConfig,
          "data.vocab and data.feat_dim must be positive");
  require(min_len >= 0 && min_len <= max_len, ErrorCode::kConfig,
          "data.min_len/max_len invalid");
  require(min_span >= 1 && min_span <= max_span, ErrorCode::kConfig,
          "data.min_span/max_span invalid");
  require(min_frames >= 1 && min_frames <= max_frames &&
              max_len * max_span <= max_frames,
          ErrorCode::kConfig, "data.max_frames cannot hold max_len * max_span");
  require(noise >= 0.0, ErrorCode::kConfig, "data.noise must be >= 0");
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorCode::kConfig,
          "data.test_fraction must be in (0, 1)");
  require(vocab >= 2 || max_len <= 1, ErrorCode::kConfig,
          "non-repeating latent sequences need vocab >= 2");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorCode::kConfig, "bad value '" + value + "' for key " + key);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      size_t pos = 0;
      out = static_cast<T>(std::stod(value, &pos));
      if (pos != value.size()) bad_value(key, value);
    } catch (const std::logic_error&) {
      bad_value(key, value);
    }
  } else {
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Entry {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Entry num(const std::string& key, T& field) {
  return {[&field, key](const std::string& v) { field = parse_number<T>(key, v); },
          [&field]() {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(field);
            } else {
              return std::to_string(field);
            }
          }};
}

Entry boolean(const std::string& key, bool& field) {
  return {[&field, key](const std::string& v) { field = parse_bool(key, v); },
          [&field]() { return std::string(field ? "true" : "false"); }};
}

void add_first(std::map<std::string, Entry>& m, const std::string& p,
               FirstPassDims& d) {
  m.emplace(p + "enc_layers", num(p + "enc_layers", d.enc_layers));
  m.emplace(p + "enc_width", num(p + "enc_width", d.enc_width));
  m.emplace(p + "pool_layers", num(p + "pool_layers", d.pool_layers));
  m.emplace(p + "pred_embed", num(p + "pred_embed", d.pred_embed));
  m.emplace(p + "pred_width", num(p + "pred_width", d.pred_width));
  m.emplace(p + "joint_width", num(p + "joint_width", d.joint_width));
  m.emplace(p + "dropout", num(p + "dropout", d.dropout));
}

void add_second(std::map<std::string, Entry>& m, const std::string& p,
                SecondPassDims& d) {
  m.emplace(p + "addenc_width", num(p + "addenc_width", d.addenc_width));
  m.emplace(p + "las_embed", num(p + "las_embed", d.las_embed));
  m.emplace(p + "las_width", num(p + "las_width", d.las_width));
  m.emplace(p + "att_dim", num(p + "att_dim", d.att_dim));
  m.emplace(p + "heads", num(p + "heads", d.heads));
}

std::map<std::string, Entry> registry(Config& c) {
  std::map<std::string, Entry> m;
  m.emplace("seed", num("seed", c.seed));

  ToyTaskSpec& d = c.data;
  m.emplace("data.vocab", num("data.vocab", d.vocab));
  m.emplace("data.feat_dim", num("data.feat_dim", d.feat_dim));
  m.emplace("data.min_frames", num("data.min_frames", d.min_frames));
  m.emplace("data.max_frames", num("data.max_frames", d.max_frames));
  m.emplace("data.min_len", num("data.min_len", d.min_len));
  m.emplace("data.max_len", num("data.max_len", d.max_len));
  m.emplace("data.min_span", num("data.min_span", d.min_span));
  m.emplace("data.max_span", num("data.max_span", d.max_span));
  m.emplace("data.noise", num("data.noise", d.noise));
  m.emplace("data.seed", num("data.seed", d.seed));
  m.emplace("data.num_utts", num("data.num_utts", d.num_utts));
  m.emplace("data.test_fraction", num("data.test_fraction", d.test_fraction));

  add_first(m, "model.large.", c.roles.large_first);
  add_first(m, "model.small.", c.roles.small_first);
  add_second(m, "model.large.", c.roles.large_second);
  add_second(m, "model.small.", c.roles.small_second);

  m.emplace("loss.beta", num("loss.beta", c.loss.beta));
  m.emplace("loss.gamma", num("loss.gamma", c.loss.gamma));
  m.emplace("loss.lambda", num("loss.lambda", c.loss.lambda));

  m.emplace("loss.distill_norm",
            Entry{[&c](const std::string& v) {
                    if (v == "per_node") {
                      c.loss.distill_norm = DistillNorm::kPerNode;
                    } else if (v == "sum") {
                      c.loss.distill_norm = DistillNorm::kSum;
                    } else {
                      bad_value("loss.distill_norm", v);
                    }
                  },
                  [&c]() {
                    return std::string(c.loss.distill_norm == DistillNorm::kSum
                                           ? "sum"
                                           : "per_node");
                  }});

  m.emplace("sched.lr", num("sched.lr", c.sched.lr));
  m.emplace("sched.decay", num("sched.decay", c.sched.decay));
  m.emplace("sched.decay_interval", num("sched.decay_interval", c.sched.decay_interval));

  TrainOptions& t = c.train;
  m.emplace("train.epochs_stage1", num("train.epochs_stage1", t.epochs_stage1));
  m.emplace("train.epochs_stage2", num("train.epochs_stage2", t.epochs_stage2));
  m.emplace("train.epochs_stage3", num("train.epochs_stage3", t.epochs_stage3));
  m.emplace("train.batch_size", num("train.batch_size", t.batch_size));
  m.emplace("train.teacher_source",
            Entry{[&t](const std::string& v) {
                    if (v == "stagewise") {
                      t.teacher_source = TeacherSource::kStagewise;
                    } else if (v == "final") {
                      t.teacher_source = TeacherSource::kFinal;
                    } else {
                      bad_value("train.teacher_source", v);
                    }
                  },
                  [&t]() {
                    return std::string(t.teacher_source == TeacherSource::kFinal
                                           ? "final"
                                           : "stagewise");
                  }});
  m.emplace("train.student_las",
            Entry{[&t](const std::string& v) {
                    if (v == "large") {
                      t.student_las = LasSize::kLarge;
                    } else if (v == "small") {
                      t.student_las = LasSize::kSmall;
                    } else {
                      bad_value("train.student_las", v);
                    }
                  },
                  [&t]() {
                    return std::string(t.student_las == LasSize::kSmall ? "small"
                                                                        : "large");
                  }});

  m.emplace("decode.beam_size", num("decode.beam_size", c.beam.beam_size));
  m.emplace("decode.max_symbols_per_frame",
            num("decode.max_symbols_per_frame", c.beam.max_symbols_per_frame));
  m.emplace("decode.length_normalize",
            boolean("decode.length_normalize", c.rescore.length_normalize));
  m.emplace("decode.interpolate_lambda",
            Entry{[&c](const std::string& v) {
                    if (v == "none") {
                      c.rescore.interpolate_lambda.reset();
                    } else {
                      c.rescore.interpolate_lambda =
                          parse_number<double>("decode.interpolate_lambda", v);
                    }
                  },
                  [&c]() {
                    return c.rescore.interpolate_lambda
                               ? fmt(*c.rescore.interpolate_lambda)
                               : std::string("none");
                  }});

  m.emplace("experiment.seeds", num("experiment.seeds", c.experiment.seeds));
  m.emplace("experiment.sweep_seeds",
            num("experiment.sweep_seeds", c.experiment.sweep_seeds));
  m.emplace("experiment.betas",
            Entry{[&c](const std::string& v) {
                    std::vector<double> out;
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) {
                      out.push_back(parse_number<double>("experiment.betas", trim(item)));
                    }
                    if (out.empty()) bad_value("experiment.betas", v);
                    c.experiment.betas = out;
                  },
                  [&c]() {
                    std::string s;
                    for (size_t i = 0; i < c.experiment.betas.size(); ++i) {
                      if (i) s += ", ";
                      s += fmt(c.experiment.betas[i]);
                    }
                    return s;
                  }});
  return m;
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  auto reg = registry(*this);
  auto it = reg.find(key);
  require(it != reg.end(), ErrorCode::kConfig, "unknown config key '" + key + "'");
  it->second.set(value);
}

std::string Config::to_text() const {
  auto reg = registry(const_cast<Config&>(*this));
  std::string out;
  for (const auto& [key, e] : reg) out += key + " = " + e.get() + "\n";
  return out;
}

void Config::validate() const {
  try {
    data.validate();
    loss.validate();
    beam.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, e.what());
  }
  require(sched.lr > 0.0 && sched.decay > 0.0 && sched.decay_interval >= 1,
          ErrorCode::kConfig, "schedule constants must be positive");
  require(train.batch_size >= 1 && train.epochs_stage1 >= 0 &&
              train.epochs_stage2 >= 0 && train.epochs_stage3 >= 0,
          ErrorCode::kConfig, "training counts invalid");
  require(experiment.seeds >= 1 && experiment.sweep_seeds >= 1, ErrorCode::kConfig,
          "experiment seed counts must be >= 1");
}

Config parse_config(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig,
            "line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace tpkd
