#include "fusionformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "fusionformer/error.hpp"

namespace ff {

namespace {

constexpr std::string_view kMagic = "FFKT";
const std::string kMomentM = "adam.m/";
const std::string kMomentV = "adam.v/";

void put_u32(std::string& out, std::uint64_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw CheckpointError(std::string(what) + " does not fit in 32 bits");
  }
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.append(buf, 8);
}

void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                const double* data) {
  put_u32(out, name.size(), "tensor name length");
  out += name;
  put_u32(out, shape.size(), "tensor rank");
  for (std::size_t d : shape) put_u32(out, d, "tensor extent");
  const std::size_t n = shape_numel(shape);
  out.reserve(out.size() + 8 * n);
  for (std::size_t i = 0; i < n; ++i) put_f64(out, data[i]);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    }
    const std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(const char* what) {
    const std::string_view s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  double f64(const char* what) {
    const std::string_view s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return std::bit_cast<double>(v);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const ModelConfig& model, const TrainConfig& train,
                           const TrainSession& session) {
  Checkpoint ck;
  ck.model = model;
  ck.train = train;
  ck.epoch = session.next_epoch;
  for (const auto& [name, t] : session.params.named(model)) ck.tensors.emplace_back(name, t.detach());
  ck.optim = session.optim;
  return ck;
}

TrainSession restore_session(const Checkpoint& ck) {
  TrainSession s;
  s.params = params_from_named(ck.model, ck.tensors);
  s.optim = ck.optim;
  s.next_epoch = ck.epoch;
  return s;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json header{{"model", ck.model},
                        {"train", ck.train},
                        {"epoch", ck.epoch},
                        {"optimizer",
                         {{"step", ck.optim.step},
                          {"beta1", ck.optim.beta1},
                          {"beta2", ck.optim.beta2},
                          {"eps", ck.optim.eps}}}};
  const std::string text = header.dump();

  const bool moments = !ck.optim.m.empty();
  if (moments && (ck.optim.m.size() != ck.tensors.size() || ck.optim.v.size() != ck.tensors.size())) {
    throw CheckpointError("optimizer state does not match the tensor list");
  }

  std::string out(kMagic);
  put_u32(out, kCheckpointVersion, "version");
  put_u32(out, text.size(), "config block");
  out += text;
  put_u32(out, ck.tensors.size() * (moments ? 3 : 1), "tensor count");
  for (const auto& [name, t] : ck.tensors) put_tensor(out, name, t.shape(), t.data().data());
  if (moments) {
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      const auto& [name, t] = ck.tensors[i];
      if (ck.optim.m[i].size() != t.numel() || ck.optim.v[i].size() != t.numel()) {
        throw CheckpointError("optimizer moment size mismatch for '" + name + "'");
      }
      put_tensor(out, kMomentM + name, t.shape(), ck.optim.m[i].data());
    }
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      const auto& [name, t] = ck.tensors[i];
      put_tensor(out, kMomentV + name, t.shape(), ck.optim.v[i].data());
    }
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  r.take(kMagic.size(), "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t text_len = r.u32("config length");
  const std::string_view text = r.take(text_len, "config block");

  Checkpoint ck;
  try {
    const nlohmann::json header = nlohmann::json::parse(text);
    ck.model = header.at("model").get<ModelConfig>();
    ck.train = header.at("train").get<TrainConfig>();
    ck.epoch = header.at("epoch").get<std::size_t>();
    const auto& opt = header.at("optimizer");
    ck.optim.step = opt.at("step").get<std::uint64_t>();
    ck.optim.beta1 = opt.at("beta1").get<double>();
    ck.optim.beta2 = opt.at("beta2").get<double>();
    ck.optim.eps = opt.at("eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config block: ") + e.what());
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("bad checkpoint config block: ") + e.what());
  }

  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> all;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("tensor name length");
    std::string name(r.take(name_len, "tensor name"));
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32("tensor extent");
      if (e == 0) throw CheckpointError("tensor '" + name + "' has a zero extent");
      shape.push_back(e);
    }
    const std::size_t n = shape_numel(shape);
    if (n > bytes.size() / 8) throw CheckpointError("truncated checkpoint while reading '" + name + "'");
    std::vector<double> values(n);
    for (double& v : values) v = r.f64("tensor data");
    all.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last tensor");

  std::size_t n_params = 0;
  while (n_params < all.size() && all[n_params].first.rfind("adam.", 0) != 0) ++n_params;
  const std::size_t rest = all.size() - n_params;
  if (rest != 0 && rest != 2 * n_params) {
    throw CheckpointError("optimizer moment table does not match the parameter table");
  }
  for (std::size_t i = 0; i < n_params; ++i) ck.tensors.push_back(all[i]);
  if (rest) {
    for (std::size_t i = 0; i < n_params; ++i) {
      const auto& [pname, p] = all[i];
      const auto& [mname, m] = all[n_params + i];
      const auto& [vname, v] = all[2 * n_params + i];
      if (mname != kMomentM + pname || vname != kMomentV + pname || m.shape() != p.shape() ||
          v.shape() != p.shape()) {
        throw CheckpointError("optimizer moments for '" + pname + "' are missing or misshapen");
      }
      ck.optim.m.emplace_back(m.data().begin(), m.data().end());
      ck.optim.v.emplace_back(v.data().begin(), v.data().end());
    }
  }
  // Validates the shape table against the stored config.
  params_from_named(ck.model, ck.tensors);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ff
