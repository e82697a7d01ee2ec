#include "binary_io.hpp"
#include "rebasin/symmetry.hpp"
#include "rebasin/transformer.hpp"

#include <cstring>
#include <sstream>

namespace rebasin {

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'B', 'K', 'T', '0', '0', '0', '1'};
constexpr char kMapsMagic[8] = {'R', 'B', 'M', 'P', '0', '0', '0', '1'};

void check_magic(io::Reader& in, const char (&expected)[8]) {
  char magic[8];
  in.bytes(magic, 8, "magic");
  if (std::memcmp(magic, expected, 8) != 0)
    throw FormatError(in.path() + ": bad magic, expected " + std::string(expected, 8));
}

std::string config_block(const TransformerConfig& c) {
  std::string s;
  for (const auto& [k, v] : c.to_kv()) s += k + "=" + v + "\n";
  return s;
}

TransformerConfig parse_config_block(const std::string& block, const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream lines(block);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path + ": malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  try {
    return TransformerConfig::from_kv(kv);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid config block: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const TransformerParams& params, const TransformerConfig& config,
                     const std::string& path) {
  check_shapes(params, config);
  io::Writer out(path);
  out.bytes(kCheckpointMagic, 8);
  const std::string block = config_block(config);
  out.u64(block.size());
  out.bytes(block.data(), block.size());
  std::uint64_t count = 0;
  for_each_tensor(params, [&](const std::string&, const auto&) { ++count; });
  out.u64(count);
  for_each_tensor(params, [&](const std::string& name, const auto& t) {
    out.str32(name);
    const bool vec = t.cols() == 1 && std::is_same_v<std::decay_t<decltype(t)>, Vector>;
    out.u32(vec ? 1 : 2);
    out.u64(static_cast<std::uint64_t>(t.rows()));
    if (!vec) out.u64(static_cast<std::uint64_t>(t.cols()));
    for (Index i = 0; i < t.rows(); ++i)
      for (Index j = 0; j < t.cols(); ++j) out.f64(t(i, j));
  });
  out.finish();
}

Checkpoint load_checkpoint(const std::string& path) {
  io::Reader in(path);
  check_magic(in, kCheckpointMagic);
  const std::uint64_t block_len = in.u64("config block length");
  if (block_len > (1u << 20)) throw FormatError(path + ": implausible config block length");
  std::string block(block_len, '\0');
  in.bytes(block.data(), block.size(), "config block");
  Checkpoint ck;
  ck.config = parse_config_block(block, path);
  ck.params = zeros_like(ck.config);

  std::uint64_t expected = 0;
  for_each_tensor(ck.params, [&](const std::string&, const auto&) { ++expected; });
  const std::uint64_t count = in.u64("tensor count");
  if (count > expected)
    throw DimensionMismatch(path + ": file holds " + std::to_string(count) +
                            " tensors, config implies " + std::to_string(expected));

  std::uint64_t read = 0;
  for_each_tensor(ck.params, [&](const std::string& name, auto& t) {
    if (read == count)
      throw TruncationError(path + ": file holds " + std::to_string(count) + " tensors, config implies " +
                            std::to_string(expected) + " (missing " + name + ")");
    ++read;
    const std::string got = in.str32("tensor name");
    if (got != name) throw DimensionMismatch(path + ": expected tensor " + name + ", found " + got);
    const std::uint32_t rank = in.u32("tensor rank");
    if (rank < 1 || rank > 2) throw FormatError(path + ": tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = static_cast<Index>(in.u64("tensor dims"));
    const auto cols = rank == 2 ? static_cast<Index>(in.u64("tensor dims")) : Index{1};
    if (rows != t.rows() || cols != t.cols())
      throw DimensionMismatch(path + ": tensor " + name + " is " + shape_str(rows, cols) + ", config implies " +
                              shape_str(t));
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) t(i, j) = in.f64(name.c_str());
  });
  if (!in.at_end()) throw FormatError(path + ": trailing bytes after last tensor");
  return ck;
}

void save_maps(const AlignmentMaps& maps, const std::string& path) {
  require(maps.ffn.size() == maps.heads.size(), "save_maps: per-layer map counts differ");
  io::Writer out(path);
  out.bytes(kMapsMagic, 8);
  out.u64(1 + 2 * maps.ffn.size());
  out.bytes("ORTH", 4);
  out.u64(static_cast<std::uint64_t>(maps.o.rows()));
  out.u64(static_cast<std::uint64_t>(maps.o.cols()));
  for (Index i = 0; i < maps.o.rows(); ++i)
    for (Index j = 0; j < maps.o.cols(); ++j) out.f64(maps.o(i, j));
  for (std::size_t l = 0; l < maps.ffn.size(); ++l) {
    out.bytes("PERM", 4);
    out.u64(static_cast<std::uint64_t>(maps.ffn[l].size()));
    for (Index s : maps.ffn[l].indices()) out.u64(static_cast<std::uint64_t>(s));
    const SemiPermutation& h = maps.heads[l];
    out.bytes("SEMI", 4);
    out.u64(static_cast<std::uint64_t>(h.rows()));
    out.u64(static_cast<std::uint64_t>(h.cols()));
    std::uint64_t used = 0;
    for (const auto& e : h.entries()) used += e.source >= 0;
    out.u64(used);
    for (Index r = 0; r < h.rows(); ++r) {
      if (h[r].source < 0) continue;
      out.u64(static_cast<std::uint64_t>(r));
      out.u64(static_cast<std::uint64_t>(h[r].source));
      out.f64(h[r].weight);
    }
  }
  out.finish();
}

AlignmentMaps load_maps(const std::string& path) {
  io::Reader in(path);
  check_magic(in, kMapsMagic);
  const std::uint64_t count = in.u64("record count");
  if (count % 2 != 1) throw FormatError(path + ": expected one ORTH record plus FFN/head pairs");
  auto tag = [&](const char* want) {
    char t[4];
    in.bytes(t, 4, "record tag");
    if (std::memcmp(t, want, 4) != 0)
      throw FormatError(path + ": expected " + std::string(want) + " record, found " + std::string(t, 4));
  };
  auto dim = [&](const char* what) {
    const std::uint64_t v = in.u64(what);
    if (v > (1u << 24)) throw FormatError(path + ": implausible dimension in " + what);
    return static_cast<Index>(v);
  };
  AlignmentMaps maps;
  tag("ORTH");
  const Index rows = dim("ORTH rows"), cols = dim("ORTH cols");
  maps.o.resize(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) maps.o(i, j) = in.f64("ORTH data");
  for (std::uint64_t l = 0; l < count / 2; ++l) {
    tag("PERM");
    const Index n = dim("PERM size");
    std::vector<Index> sigma(static_cast<std::size_t>(n));
    for (auto& s : sigma) s = static_cast<Index>(in.u64("PERM indices"));
    maps.ffn.emplace_back(std::move(sigma));
    tag("SEMI");
    const Index m = dim("SEMI rows"), k = dim("SEMI cols");
    const Index used = dim("SEMI count");
    if (used > m) throw FormatError(path + ": SEMI record has more entries than rows");
    std::vector<SemiPermutation::Entry> entries(static_cast<std::size_t>(m));
    for (Index e = 0; e < used; ++e) {
      const Index r = dim("SEMI row");
      const Index c = dim("SEMI col");
      const double w = in.f64("SEMI weight");
      if (r >= m) throw FormatError(path + ": SEMI row index out of range");
      entries[static_cast<std::size_t>(r)] = {c, w};
    }
    maps.heads.emplace_back(k, std::move(entries));
  }
  if (!in.at_end()) throw FormatError(path + ": trailing bytes after last record");
  return maps;
}

}  // namespace rebasin
