#include "tpkd/checkpoint.hpp"

#include <json.hpp>
#include <sstream>

#include "binio.hpp"
#include "tpkd/error.hpp"

namespace tpkd {

using nlohmann::json;
using nnet::ParamStore;
using nnet::Tensor;

namespace {

constexpr char kMagic[4] = {'T', 'P', 'K', 'D'};

size_t elem_bytes(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI32: return 4;
  }
  fail(ErrorCode::kCorruptFile, "unknown dtype tag");
}

}  // namespace

std::vector<unsigned char> encode_container(const Container& c) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kContainerVersion);
  w.str(c.meta_json);
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  uint64_t offset = 0;
  for (const auto& [name, st] : c.tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(st.dtype));
    w.u32(static_cast<uint32_t>(st.tensor.rank()));
    for (size_t d : st.tensor.shape()) w.u32(static_cast<uint32_t>(d));
    w.u64(offset);
    offset += st.tensor.size() * elem_bytes(st.dtype);
  }
  for (const auto& [name, st] : c.tensors) {
    for (double v : st.tensor.values()) {
      switch (st.dtype) {
        case DType::kF32: w.f32(static_cast<float>(v)); break;
        case DType::kF64: w.f64(v); break;
        case DType::kI32: w.i32(static_cast<int32_t>(v)); break;
      }
    }
  }
  binio::seal(w);
  return std::move(w.buffer());
}

Container decode_container(const std::vector<unsigned char>& bytes) {
  require(bytes.size() >= 12 && std::equal(kMagic, kMagic + 4, bytes.begin()),
          ErrorCode::kCorruptFile, "not a TPKD container");
  const size_t body = binio::unseal(bytes);
  binio::Reader r(bytes.data(), body);
  char magic[4];
  r.bytes(magic, 4);
  const uint32_t version = r.u32();
  require(version == kContainerVersion, ErrorCode::kVersionMismatch,
          "unsupported container version " + std::to_string(version));
  Container c;
  c.meta_json = r.str();
  const uint32_t count = r.u32();

  struct Entry {
    std::string name;
    DType dtype;
    std::vector<size_t> shape;
    uint64_t offset;
    size_t elems;
  };
  std::vector<Entry> dir;
  uint64_t expected = 0;
  for (uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str();
    const uint32_t tag = r.u32();
    require(tag <= 2, ErrorCode::kCorruptFile, "unknown dtype tag");
    e.dtype = static_cast<DType>(tag);
    const uint32_t rank = r.u32();
    require(rank >= 1 && rank <= 8, ErrorCode::kCorruptFile, "bad tensor rank");
    e.elems = 1;
    for (uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      e.elems *= e.shape.back();
    }
    e.offset = r.u64();
    require(e.offset == expected, ErrorCode::kCorruptFile, "bad tensor offset");
    expected += e.elems * elem_bytes(e.dtype);
    dir.push_back(std::move(e));
  }
  require(r.remaining() == expected, ErrorCode::kCorruptFile,
          "payload length mismatch");
  for (const Entry& e : dir) {
    std::vector<double> data(e.elems);
    for (double& v : data) {
      switch (e.dtype) {
        case DType::kF32: v = r.f32(); break;
        case DType::kF64: v = r.f64(); break;
        case DType::kI32: v = r.i32(); break;
      }
    }
    require(c.tensors.count(e.name) == 0, ErrorCode::kCorruptFile,
            "duplicate tensor " + e.name);
    c.tensors[e.name] = StoredTensor{e.dtype, Tensor(e.shape, std::move(data))};
  }
  return c;
}

void save_container(const std::string& path, const Container& c) {
  binio::write_file(path, encode_container(c));
}

Container load_container(const std::string& path) {
  return decode_container(binio::read_file(path));
}

// ---- checkpoint -------------------------------------------------------------

namespace {

json first_to_json(const FirstPassDims& d) {
  return {{"enc_layers", d.enc_layers},   {"enc_width", d.enc_width},
          {"pool_layers", d.pool_layers}, {"pred_embed", d.pred_embed},
          {"pred_width", d.pred_width},   {"joint_width", d.joint_width},
          {"dropout", d.dropout}};
}

FirstPassDims first_from_json(const json& j) {
  FirstPassDims d;
  d.enc_layers = j.at("enc_layers");
  d.enc_width = j.at("enc_width");
  d.pool_layers = j.at("pool_layers");
  d.pred_embed = j.at("pred_embed");
  d.pred_width = j.at("pred_width");
  d.joint_width = j.at("joint_width");
  d.dropout = j.at("dropout");
  return d;
}

json second_to_json(const SecondPassDims& d) {
  return {{"addenc_width", d.addenc_width}, {"las_embed", d.las_embed},
          {"las_width", d.las_width},       {"att_dim", d.att_dim},
          {"heads", d.heads}};
}

SecondPassDims second_from_json(const json& j) {
  SecondPassDims d;
  d.addenc_width = j.at("addenc_width");
  d.las_embed = j.at("las_embed");
  d.las_width = j.at("las_width");
  d.att_dim = j.at("att_dim");
  d.heads = j.at("heads");
  return d;
}

bool is_second_pass_name(const std::string& name) {
  return name.rfind(kAddEncPrefix, 0) == 0 || name.rfind(kLasPrefix, 0) == 0;
}

void check_layout(const ParamStore& expected, const ParamStore& got) {
  require(expected.all().size() == got.all().size(), ErrorCode::kCorruptFile,
          "checkpoint tensor set does not match its dims");
  for (const auto& [name, p] : expected.all()) {
    require(got.contains(name) && got.get(name).value.shape() == p.value.shape(),
            ErrorCode::kCorruptFile, "checkpoint tensor " + name + " missing or misshaped");
  }
}

}  // namespace

Checkpoint Checkpoint::from_model(const RnntModel& m, Role role, int stage) {
  Checkpoint ck;
  ck.role = role;
  ck.stage = stage;
  ck.vocab = m.vocab();
  ck.feat_dim = m.feat_dim();
  ck.first = m.dims();
  ck.shared = m.params();
  return ck;
}

Checkpoint Checkpoint::from_model(const TwoPassModel& m, Role role, int stage) {
  Checkpoint ck = from_model(m.shared(), role, stage);
  ck.second = m.dims();
  ck.second_params = m.second();
  return ck;
}

RnntModel Checkpoint::rnnt() const { return RnntModel(vocab, feat_dim, first, shared); }

TwoPassModel Checkpoint::two_pass() const {
  require(second.has_value(), ErrorCode::kWrongStage,
          "checkpoint has no second pass (stage " + std::to_string(stage) + ")");
  return TwoPassModel(rnnt(), *second, second_params);
}

Container to_container(const Checkpoint& ck) {
  json meta;
  meta["kind"] = "checkpoint";
  meta["role"] = role_name(ck.role);
  meta["stage"] = ck.stage;
  meta["vocab"] = ck.vocab;
  meta["feat_dim"] = ck.feat_dim;
  meta["first_pass"] = first_to_json(ck.first);
  meta["second_pass"] = ck.second ? second_to_json(*ck.second) : json(nullptr);
  meta["rng_state"] = ck.rng_state;
  meta["provenance"] = ck.provenance;
  json frozen = json::array();
  Container c;
  for (const ParamStore* ps : {&ck.shared, &ck.second_params}) {
    for (const auto& [name, p] : ps->all()) {
      c.tensors[name] = StoredTensor{DType::kF32, p.value};
      if (p.frozen) frozen.push_back(name);
    }
  }
  meta["frozen"] = frozen;
  c.meta_json = meta.dump();
  return c;
}

Checkpoint from_container(const Container& c) {
  json meta;
  try {
    meta = json::parse(c.meta_json);
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad checkpoint metadata: ") + e.what());
  }
  Checkpoint ck;
  try {
    require(meta.value("kind", "") == "checkpoint", ErrorCode::kCorruptFile,
            "container is not a checkpoint");
    ck.role = parse_role(meta.at("role").get<std::string>());
    ck.stage = meta.at("stage");
    ck.vocab = meta.at("vocab");
    ck.feat_dim = meta.at("feat_dim");
    ck.first = first_from_json(meta.at("first_pass"));
    if (!meta.at("second_pass").is_null()) {
      ck.second = second_from_json(meta.at("second_pass"));
    }
    ck.rng_state = meta.at("rng_state");
    ck.provenance = meta.at("provenance").get<std::map<std::string, std::string>>();
    for (const auto& [name, st] : c.tensors) {
      require(st.dtype == DType::kF32, ErrorCode::kCorruptFile,
              "checkpoint tensor " + name + " is not f32");
      ParamStore& ps = is_second_pass_name(name) ? ck.second_params : ck.shared;
      ps.add(name, st.tensor);
    }
    for (const auto& name : meta.at("frozen")) {
      const std::string n = name.get<std::string>();
      ParamStore& ps = is_second_pass_name(n) ? ck.second_params : ck.shared;
      require(ps.contains(n), ErrorCode::kCorruptFile, "frozen list names unknown " + n);
      ps.get(n).frozen = true;
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kCorruptFile, std::string("bad checkpoint metadata: ") + e.what());
  }
  require(ck.second.has_value() || ck.second_params.count() == 0,
          ErrorCode::kCorruptFile, "second-pass tensors without second-pass dims");
  // The tensor table must match a freshly built model of the same dims.
  const RnntModel fresh(ck.vocab, ck.feat_dim, ck.first, 0);
  check_layout(fresh.params(), ck.shared);
  if (ck.second) {
    const TwoPassModel fresh2(fresh, *ck.second, 0);
    check_layout(fresh2.second(), ck.second_params);
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  save_container(path, to_container(ck));
}

Checkpoint load_checkpoint(const std::string& path) {
  return from_container(load_container(path));
}

void save_lattice(const std::string& path, const LatticeDist& dist,
                  const LabelSequence& target) {
  require(dist.target_len() == target.size(), ErrorCode::kShapeMismatch,
          "lattice and target lengths differ");
  Container c;
  c.meta_json = json{{"kind", "lattice"}}.dump();
  const auto d = dist.data();
  c.tensors["lattice.logp"] = StoredTensor{
      DType::kF64,
      Tensor({static_cast<size_t>(dist.frames()),
              static_cast<size_t>(dist.target_len() + 1),
              static_cast<size_t>(dist.labels())},
             std::vector<double>(d.begin(), d.end()))};
  std::vector<double> toks(target.tokens.begin(), target.tokens.end());
  const size_t n = toks.size();
  c.tensors["lattice.target"] = StoredTensor{DType::kI32, Tensor({n}, std::move(toks))};
  save_container(path, c);
}

std::pair<LatticeDist, LabelSequence> load_lattice(const std::string& path) {
  const Container c = load_container(path);
  auto lp = c.tensors.find("lattice.logp");
  auto tg = c.tensors.find("lattice.target");
  require(lp != c.tensors.end() && tg != c.tensors.end() &&
              lp->second.tensor.rank() == 3,
          ErrorCode::kCorruptFile, "not a lattice fixture");
  const auto& shape = lp->second.tensor.shape();
  LabelSequence target;
  for (double v : tg->second.tensor.values()) target.tokens.push_back(static_cast<int>(v));
  require(static_cast<int>(shape[1]) == target.size() + 1, ErrorCode::kCorruptFile,
          "lattice fixture target length mismatch");
  LatticeDist dist(static_cast<int>(shape[0]), static_cast<int>(shape[1]) - 1,
                   static_cast<int>(shape[2]) - 1);
  const auto src = lp->second.tensor.values();
  std::copy(src.begin(), src.end(), dist.data().begin());
  return {std::move(dist), std::move(target)};
}

}  // namespace tpkd
