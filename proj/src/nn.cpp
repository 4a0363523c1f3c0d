#include "mtcr/nn.hpp"

#include "mtcr/io.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>

namespace mtcr::nn {

std::size_t ParamStore::add(std::string name, Matrix value) {
  for (const auto& n : names_) require(n != name, ErrorCode::InvalidArgument, "duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  fail(ErrorCode::InvalidArgument, "no parameter named " + name);
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

double& ParamStore::flat(std::size_t i) {
  for (auto& v : values_) {
    const auto n = static_cast<std::size_t>(v.size());
    if (i < n) return v.data()[i];
    i -= n;
  }
  fail(ErrorCode::InvalidArgument, "flat parameter index out of range");
}

double ParamStore::flat(std::size_t i) const { return const_cast<ParamStore&>(*this).flat(i); }

ParamStore ParamStore::zeros_like() const {
  ParamStore z;
  for (std::size_t i = 0; i < values_.size(); ++i) z.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  return z;
}

void ParamStore::set_zero() {
  for (auto& v : values_) v.setZero();
}

void ParamStore::add_scaled(const ParamStore& other, double scale) {
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

bool ParamStore::all_finite() const {
  for (const auto& v : values_) {
    if (!v.allFinite()) return false;
  }
  return true;
}

void Adam::step(ParamStore& params, const ParamStore& grads) {
  if (m_.size() == 0) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    if (lr_ == 0.0) continue;
    params[i].array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  Matrix m(rows, cols);
  // Column-major fill order is part of the determinism contract.
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * uniform_unit(rng) - 1.0) * bound;
  }
  return m;
}

namespace {

constexpr char kMagic[8] = {'M', 'T', 'C', 'R', 'C', 'K', 'P', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  require(pos + 8 <= in.size(), ErrorCode::Data, "checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    tensors.push_back({{"name", ckpt.params.name(i)}, {"rows", ckpt.params[i].rows()}, {"cols", ckpt.params[i].cols()}});
  }
  nlohmann::json header = {{"kind", ckpt.kind},
                           {"metadata", nlohmann::json::parse(ckpt.metadata_json.empty() ? "{}" : ckpt.metadata_json)},
                           {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, h.size());
  out += h;
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& m = ckpt.params[i];
    for (Eigen::Index k = 0; k < m.size(); ++k) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[k]));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  require(bytes.size() >= sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0, ErrorCode::Data,
          "not a checkpoint file");
  std::size_t pos = sizeof(kMagic);
  const auto hlen = get_u64(bytes, pos);
  require(pos + hlen <= bytes.size(), ErrorCode::Data, "checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Data, std::string("corrupt checkpoint header: ") + e.what());
  }
  pos += hlen;
  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.metadata_json = header.at("metadata").dump();
  for (const auto& t : header.at("tensors")) {
    Matrix m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = std::bit_cast<double>(get_u64(bytes, pos));
    ckpt.params.add(t.at("name").get<std::string>(), std::move(m));
  }
  require(pos == bytes.size(), ErrorCode::Data, "trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(io::read_file(path)); }

}  // namespace mtcr::nn
