#include "hedl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace hedl {

namespace {

constexpr char kMagic[4] = {'H', 'E', 'D', 'L'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kF64 = 1;
constexpr uint8_t kI64 = 2;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double d) {
  put_u64(buf, std::bit_cast<uint64_t>(d));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}

  void need(size_t n) const {
    if (pos + n > buf.size()) throw IoError("checkpoint: truncated file");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  Entry e;
  e.dtype = kF64;
  e.shape = t.shape();
  e.f64.assign(t.data().begin(), t.data().end());
  entries_[name] = std::move(e);
}

void Checkpoint::put_ints(const std::string& name, const std::vector<int64_t>& values) {
  Entry e;
  e.dtype = kI64;
  e.shape = {static_cast<int64_t>(values.size())};
  e.i64 = values;
  entries_[name] = std::move(e);
}

bool Checkpoint::contains(const std::string& name) const { return entries_.count(name) > 0; }

Tensor Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("checkpoint: no tensor named '" + name + "'");
  if (it->second.dtype != kF64) throw ContractError("checkpoint: '" + name + "' is not float64");
  return Tensor::from_vector(it->second.shape, it->second.f64);
}

std::vector<int64_t> Checkpoint::get_ints(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("checkpoint: no record named '" + name + "'");
  if (it->second.dtype != kI64) throw ContractError("checkpoint: '" + name + "' is not integer");
  return it->second.i64;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

void Checkpoint::save(const std::filesystem::path& file) const {
  std::string table, payload;
  for (const auto& [name, e] : entries_) {
    put_u32(table, static_cast<uint32_t>(name.size()));
    table += name;
    table.push_back(static_cast<char>(e.dtype));
    put_u32(table, static_cast<uint32_t>(e.shape.size()));
    for (int64_t d : e.shape) put_u64(table, static_cast<uint64_t>(d));
    put_u64(table, payload.size());
    if (e.dtype == kF64) {
      for (double v : e.f64) put_f64(payload, v);
    } else {
      for (int64_t v : e.i64) put_u64(payload, static_cast<uint64_t>(v));
    }
  }
  std::string buf(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(entries_.size()));
  buf += table;
  buf += payload;

  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + file.string() + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("checkpoint: write failed for '" + file.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + file.string() + "'");
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Reader r(buf);
  if (r.str(4) != std::string(kMagic, 4)) throw IoError("checkpoint: bad magic");
  const uint32_t version = r.u32();
  if (version != kVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = r.u32();

  struct Row {
    std::string name;
    uint8_t dtype;
    Shape shape;
    uint64_t offset;
  };
  std::vector<Row> rows;
  rows.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Row row;
    row.name = r.str(r.u32());
    row.dtype = r.u8();
    if (row.dtype != kF64 && row.dtype != kI64) throw IoError("checkpoint: unknown dtype code");
    const uint32_t nd = r.u32();
    for (uint32_t j = 0; j < nd; ++j) row.shape.push_back(static_cast<int64_t>(r.u64()));
    row.offset = r.u64();
    rows.push_back(std::move(row));
  }

  const size_t payload_base = r.pos;
  Checkpoint ck;
  for (const auto& row : rows) {
    int64_t n = 1;
    for (int64_t d : row.shape) {
      if (d <= 0) throw IoError("checkpoint: bad shape in '" + row.name + "'");
      n *= d;
    }
    Reader pr(buf);
    pr.pos = payload_base + row.offset;
    Entry e;
    e.dtype = row.dtype;
    e.shape = row.shape;
    if (row.dtype == kF64) {
      e.f64.reserve(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) e.f64.push_back(pr.f64());
    } else {
      e.i64.reserve(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) e.i64.push_back(static_cast<int64_t>(pr.u64()));
    }
    ck.entries_[row.name] = std::move(e);
  }
  return ck;
}

}  // namespace hedl
