#include "owtta/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace owtta {

namespace {

constexpr char kMagic[8] = {'O', 'W', 'T', 'T', 'A', '0', '0', '1'};

constexpr std::array<ParamGroup, 5> kGroupOrder = {ParamGroup::Backbone, ParamGroup::Norm,
                                                   ParamGroup::Aan, ParamGroup::Psi,
                                                   ParamGroup::Ladder};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_state(const std::string& path, ModelState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 8);
  const BackboneConfig& c = state.cfg;
  for (std::uint64_t v : {static_cast<std::uint64_t>(c.layers), static_cast<std::uint64_t>(c.dim),
                          static_cast<std::uint64_t>(c.heads),
                          static_cast<std::uint64_t>(c.patches),
                          static_cast<std::uint64_t>(c.classes), c.seed})
    write_u64(os, v);
  for (ParamGroup g : kGroupOrder) {
    std::uint64_t count = 0;
    for (Parameter* p : state.group(g)) count += static_cast<std::uint64_t>(p->value.size());
    write_u64(os, count);
    for (Parameter* p : state.group(g))
      for (Eigen::Index i = 0; i < p->value.size(); ++i) write_f64(os, p->value(i));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

ModelState load_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  BackboneConfig cfg;
  cfg.layers = static_cast<int>(read_u64(is));
  cfg.dim = static_cast<int>(read_u64(is));
  cfg.heads = static_cast<int>(read_u64(is));
  cfg.patches = static_cast<int>(read_u64(is));
  cfg.classes = static_cast<int>(read_u64(is));
  cfg.seed = read_u64(is);
  cfg.validate();

  ModelState state = init_backbone(cfg);
  for (ParamGroup g : kGroupOrder) {
    std::uint64_t expected = 0;
    for (Parameter* p : state.group(g)) expected += static_cast<std::uint64_t>(p->value.size());
    const std::uint64_t count = read_u64(is);
    if (count != expected)
      throw std::runtime_error("checkpoint: group size mismatch in " + path + " (" +
                               std::to_string(count) + " vs " + std::to_string(expected) + ")");
    for (Parameter* p : state.group(g))
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value(i) = read_f64(is);
  }
  return state;
}

}  // namespace owtta
