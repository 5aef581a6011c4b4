#include "opql/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "opql/binio.hpp"
#include "opql/errors.hpp"
#include "opql/io.hpp"

namespace opql {

namespace {

using binio::put_f64;
using binio::put_string;
using binio::put_u32;
using binio::Reader;

constexpr char kMagic[4] = {'O', 'P', 'Q', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_tensor(std::string& out, const std::string& name, const Mat& m) {
  put_string(out, name);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);

  const EncoderConfig& c = params.config;
  put_u32(out, static_cast<std::uint32_t>(c.token_vocab_size));
  put_u32(out, static_cast<std::uint32_t>(c.entity_vocab_size));
  put_u32(out, static_cast<std::uint32_t>(c.model_dim));
  put_u32(out, static_cast<std::uint32_t>(c.entity_dim));
  put_u32(out, static_cast<std::uint32_t>(c.relation_dim));
  put_u32(out, static_cast<std::uint32_t>(c.key_dim));
  put_u32(out, static_cast<std::uint32_t>(c.layers));
  put_u32(out, static_cast<std::uint32_t>(c.heads));
  put_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
  put_u32(out, static_cast<std::uint32_t>(c.ffn_mult));
  put_u32(out, static_cast<std::uint32_t>(c.max_hops));
  put_f64(out, c.layer_norm_eps);

  std::uint32_t count = 0;
  params.for_each_tensor([&count](const std::string&, const Mat&) { ++count; });
  put_u32(out, count);
  params.for_each_tensor([&out](const std::string& name, const Mat& m) { put_tensor(out, name, m); });

  io::atomic_write_file(path, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  const std::string data = io::read_file(path);
  Reader r{data, 0, path.string()};
  r.need(4);
  if (std::memcmp(data.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + ": not a checkpoint file (bad magic)");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));

  EncoderConfig c;
  c.token_vocab_size = static_cast<int>(r.u32());
  c.entity_vocab_size = static_cast<int>(r.u32());
  c.model_dim = static_cast<int>(r.u32());
  c.entity_dim = static_cast<int>(r.u32());
  c.relation_dim = static_cast<int>(r.u32());
  c.key_dim = static_cast<int>(r.u32());
  c.layers = static_cast<int>(r.u32());
  c.heads = static_cast<int>(r.u32());
  c.max_seq_len = static_cast<int>(r.u32());
  c.ffn_mult = static_cast<int>(r.u32());
  c.max_hops = static_cast<int>(r.u32());
  c.layer_norm_eps = r.f64();
  c.validate();

  // Allocate the right shapes, then fill by name.
  Rng rng(0);
  ModelParams params = init_params(c, rng);

  const std::uint32_t count = r.u32();
  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index a = 0; a < m.rows(); ++a)
      for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = r.f64();
    bool placed = false;
    params.for_each_tensor([&](const std::string& tname, Mat& tensor) {
      if (tname != name) return;
      if (tensor.rows() != m.rows() || tensor.cols() != m.cols())
        throw FormatError(path.string() + ": tensor " + name + " has shape " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", expected " + std::to_string(tensor.rows()) + "x" +
                          std::to_string(tensor.cols()));
      tensor = m;
      placed = true;
    });
    if (!placed) throw FormatError(path.string() + ": unexpected tensor " + name);
    ++filled;
  }
  std::size_t expected = 0;
  params.for_each_tensor([&expected](const std::string&, const Mat&) { ++expected; });
  if (filled != expected)
    throw FormatError(path.string() + ": checkpoint holds " + std::to_string(filled) +
                      " tensors, model needs " + std::to_string(expected));
  return params;
}

void require_same_config(const EncoderConfig& expected, const EncoderConfig& actual) {
  if (!(expected == actual)) throw FormatError("checkpoint config does not match the run config");
}

}  // namespace opql
