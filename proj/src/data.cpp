#include "tpkd/data.hpp"

#include <cmath>
#include <json.hpp>
#include <random>

#include "binio.hpp"
#include "tpkd/error.hpp"

namespace tpkd {

using nnet::Tensor;

namespace {

constexpr char kMagic[4] = {'T', 'P', 'D', 'S'};
constexpr uint32_t kVersion = 1;

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(rng() % span);
}

// Box-Muller on the library's own uniform draw, so datasets do not depend on
// the standard library's distribution implementations.
double gaussian(std::mt19937_64& rng) {
  double u1 = nnet::uniform01(rng);
  const double u2 = nnet::uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Utterance make_utterance(const ToyTaskSpec& spec, const Tensor& protos, int id,
                         std::mt19937_64& rng) {
  const int d = spec.feat_dim;
  const int len = uniform_int(rng, spec.min_len, spec.max_len);
  Utterance utt;
  utt.id = id;
  std::vector<int> frame_sym;  // 0 = silence
  for (int i = 0; i < len; ++i) {
    int tok = uniform_int(rng, 1, spec.vocab);
    if (i > 0 && spec.vocab > 1) {
      // Draw from the K-1 symbols that differ from the previous one.
      tok = uniform_int(rng, 1, spec.vocab - 1);
      if (tok >= utt.transcript.tokens.back()) ++tok;
    }
    utt.transcript.tokens.push_back(tok);
    const int span = uniform_int(rng, spec.min_span, spec.max_span);
    frame_sym.insert(frame_sym.end(), static_cast<size_t>(span), tok);
  }
  const int body = static_cast<int>(frame_sym.size());
  const int lead = std::min(uniform_int(rng, 0, 2), spec.max_frames - body);
  frame_sym.insert(frame_sym.begin(), static_cast<size_t>(lead), 0);
  if (static_cast<int>(frame_sym.size()) < spec.min_frames) {
    frame_sym.resize(static_cast<size_t>(spec.min_frames), 0);
  }
  const size_t frames = frame_sym.size();
  utt.features = Tensor::matrix(frames, static_cast<size_t>(d));
  for (size_t t = 0; t < frames; ++t) {
    for (int j = 0; j < d; ++j) {
      const double clean =
          frame_sym[t] == 0 ? 0.0 : protos.at(static_cast<size_t>(frame_sym[t] - 1), j);
      utt.features.at(t, j) =
          static_cast<float>(clean + spec.noise * gaussian(rng));
    }
  }
  return utt;
}

nlohmann::json spec_json(const ToyTaskSpec& s) {
  return {{"vocab", s.vocab},         {"feat_dim", s.feat_dim},
          {"min_frames", s.min_frames}, {"max_frames", s.max_frames},
          {"min_len", s.min_len},     {"max_len", s.max_len},
          {"min_span", s.min_span},   {"max_span", s.max_span},
          {"noise", s.noise},         {"seed", s.seed},
          {"num_utts", s.num_utts},   {"test_fraction", s.test_fraction}};
}

ToyTaskSpec spec_from_json(const nlohmann::json& j) {
  ToyTaskSpec s;
  s.vocab = j.at("vocab");
  s.feat_dim = j.at("feat_dim");
  s.min_frames = j.at("min_frames");
  s.max_frames = j.at("max_frames");
  s.min_len = j.at("min_len");
  s.max_len = j.at("max_len");
  s.min_span = j.at("min_span");
  s.max_span = j.at("max_span");
  s.noise = j.at("noise");
  s.seed = j.at("seed");
  s.num_utts = j.at("num_utts");
  s.test_fraction = j.at("test_fraction");
  return s;
}

void write_utt(binio::Writer& w, const Utterance& u) {
  w.u32(static_cast<uint32_t>(u.id));
  w.u32(static_cast<uint32_t>(u.features.rows()));
  w.u32(static_cast<uint32_t>(u.features.cols()));
  for (double v : u.features.values()) w.f32(static_cast<float>(v));
  w.u32(static_cast<uint32_t>(u.transcript.size()));
  for (int t : u.transcript.tokens) w.u32(static_cast<uint32_t>(t));
}

Utterance read_utt(binio::Reader& r, const ToyTaskSpec& spec) {
  Utterance u;
  u.id = static_cast<int>(r.u32());
  const uint32_t frames = r.u32();
  const uint32_t dim = r.u32();
  require(dim == static_cast<uint32_t>(spec.feat_dim) && frames >= 1 &&
              frames <= (1u << 20),
          ErrorCode::kCorruptFile, "bad utterance header");
  require(static_cast<size_t>(frames) * dim * 4 <= r.remaining(), ErrorCode::kCorruptFile,
          "utterance payload truncated");
  u.features = Tensor::matrix(frames, dim);
  for (double& v : u.features.storage()) v = r.f32();
  const uint32_t len = r.u32();
  require(static_cast<size_t>(len) * 4 <= r.remaining(), ErrorCode::kCorruptFile,
          "transcript truncated");
  for (uint32_t i = 0; i < len; ++i) u.transcript.tokens.push_back(static_cast<int>(r.u32()));
  try {
    u.transcript.validate(spec.vocab);
  } catch (const Error& e) {
    fail(ErrorCode::kCorruptFile, e.what());
  }
  return u;
}

}  // namespace

Dataset gen_toy_data(const ToyTaskSpec& spec, int n) {
  require(n >= 2, ErrorCode::kInvalidArgument, "need at least 2 utterances");
  spec.validate();
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
  Tensor protos = Tensor::matrix(static_cast<size_t>(spec.vocab),
                                 static_cast<size_t>(spec.feat_dim));
  for (double& v : protos.storage()) v = gaussian(rng);

  Dataset ds;
  ds.spec = spec;
  int n_test = static_cast<int>(std::lround(n * spec.test_fraction));
  n_test = std::clamp(n_test, 1, n - 1);
  for (int i = 0; i < n; ++i) {
    Utterance u = make_utterance(spec, protos, i, rng);
    (i < n - n_test ? ds.train : ds.test).push_back(std::move(u));
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.str(spec_json(ds.spec).dump());
  w.u32(static_cast<uint32_t>(ds.train.size()));
  w.u32(static_cast<uint32_t>(ds.test.size()));
  for (const auto& u : ds.train) write_utt(w, u);
  for (const auto& u : ds.test) write_utt(w, u);
  binio::seal(w);
  binio::write_file(path, w.buffer());
}

Dataset load_dataset(const std::string& path) {
  const auto bytes = binio::read_file(path);
  require(bytes.size() >= 12 && std::equal(kMagic, kMagic + 4, bytes.begin()),
          ErrorCode::kCorruptFile, "not a TPDS dataset file");
  const size_t body = binio::unseal(bytes);
  binio::Reader r(bytes.data(), body);
  char magic[4];
  r.bytes(magic, 4);
  const uint32_t version = r.u32();
  require(version == kVersion, ErrorCode::kVersionMismatch,
          "unsupported dataset version " + std::to_string(version));
  Dataset ds;
  try {
    ds.spec = spec_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad dataset header: ") + e.what());
  }
  const uint32_t n_train = r.u32();
  const uint32_t n_test = r.u32();
  for (uint32_t i = 0; i < n_train; ++i) ds.train.push_back(read_utt(r, ds.spec));
  for (uint32_t i = 0; i < n_test; ++i) ds.test.push_back(read_utt(r, ds.spec));
  require(r.remaining() == 0, ErrorCode::kCorruptFile, "trailing bytes in dataset");
  return ds;
}

}  // namespace tpkd
