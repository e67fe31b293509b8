#include "moa/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_set>

#include "moa/common.hpp"

namespace moa::ckpt {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'A', '1'};
constexpr size_t kHeaderBytes = 16;  // magic + version + meta length

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; i++) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

uint64_t read_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = v << 8 | p[i];
  return v;
}

void append_f32_le(std::string& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

float read_f32_le(const unsigned char* p) {
  uint32_t u = read_u32(p);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

// Structural checks shared by load and inspect: unique names, positive
// shapes, in-bounds and non-overlapping payload slices.
void validate_index(const std::vector<TensorEntry>& index,
                    uint64_t payload_bytes) {
  std::unordered_set<std::string> names;
  std::vector<std::pair<uint64_t, uint64_t>> spans;
  for (const TensorEntry& e : index) {
    if (e.name.empty()) throw DataError("checkpoint tensor with empty name");
    if (!names.insert(e.name).second)
      throw DataError(strfmt("duplicate checkpoint tensor '%s'", e.name.c_str()));
    int64_t numel = 1;
    for (int64_t d : e.shape) {
      if (d < 1)
        throw DataError(strfmt("tensor '%s' has invalid shape", e.name.c_str()));
      numel *= d;
    }
    if (e.bytes != uint64_t(numel) * 4)
      throw DataError(strfmt("tensor '%s': %llu bytes for %lld elements",
                             e.name.c_str(), (unsigned long long)e.bytes,
                             (long long)numel));
    if (e.offset > payload_bytes || e.bytes > payload_bytes - e.offset)
      throw DataError(strfmt("tensor '%s' extends past the payload",
                             e.name.c_str()));
    spans.emplace_back(e.offset, e.offset + e.bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); i++)
    if (spans[i].first < spans[i - 1].second)
      throw DataError("checkpoint tensors overlap in the payload");
}

struct ParsedMeta {
  nlohmann::ordered_json info;
  std::vector<TensorEntry> index;
  uint64_t payload_bytes = 0;
};

ParsedMeta parse_meta(const std::string& text, const std::string& path) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strfmt("%s: bad checkpoint metadata: %s", path.c_str(),
                           e.what()));
  }
  ParsedMeta m;
  try {
    m.info = j.at("info");
    m.payload_bytes = j.at("payload_bytes").get<uint64_t>();
    for (const auto& t : j.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<int64_t>>();
      e.offset = t.at("offset").get<uint64_t>();
      e.bytes = t.at("bytes").get<uint64_t>();
      e.crc = t.at("crc32").get<uint32_t>();
      m.index.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strfmt("%s: bad checkpoint metadata: %s", path.c_str(),
                           e.what()));
  }
  validate_index(m.index, m.payload_bytes);
  return m;
}

// Reads and validates the fixed header, then the metadata block.
ParsedMeta read_meta(std::ifstream& in, const std::string& path) {
  unsigned char header[kHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kHeaderBytes);
  if (in.gcount() != std::streamsize(kHeaderBytes))
    throw DataError(strfmt("%s: truncated checkpoint header", path.c_str()));
  if (std::memcmp(header, kMagic, 4) != 0)
    throw DataError(strfmt("%s: not a checkpoint (bad magic)", path.c_str()));
  uint32_t version = read_u32(header + 4);
  if (version != kFormatVersion)
    throw DataError(strfmt("%s: unsupported checkpoint version %u",
                           path.c_str(), version));
  uint64_t meta_len = read_u64(header + 8);
  if (meta_len == 0 || meta_len > (uint64_t(1) << 31))
    throw DataError(strfmt("%s: implausible metadata length", path.c_str()));
  std::string meta(meta_len, '\0');
  in.read(meta.data(), std::streamsize(meta_len));
  if (in.gcount() != std::streamsize(meta_len))
    throw DataError(strfmt("%s: truncated checkpoint metadata", path.c_str()));
  return parse_meta(meta, path);
}

}  // namespace

uint32_t crc32(const void* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; i++) {
      uint32_t c = i;
      for (int k = 0; k < 8; k++)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; i++) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

TensorPtr Checkpoint::find(const std::string& name) const {
  auto it = tensors.find(name);
  return it == tensors.end() ? nullptr : it->second;
}

void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors,
    const nlohmann::ordered_json& info) {
  std::string payload;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::unordered_set<std::string> names;
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw UsageError("checkpoint tensor with empty name");
    if (!names.insert(name).second)
      throw UsageError(strfmt("duplicate checkpoint tensor '%s'", name.c_str()));
    if (!t) throw UsageError(strfmt("null tensor '%s'", name.c_str()));
    if (t->dtype != DType::kF32)
      throw UsageError(
          strfmt("checkpoint stores f32 tensors; '%s' is f64", name.c_str()));
    uint64_t offset = payload.size();
    for (float f : t->f32) append_f32_le(payload, f);
    uint64_t bytes = payload.size() - offset;
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t->shape;
    e["offset"] = offset;
    e["bytes"] = bytes;
    e["crc32"] = crc32(payload.data() + offset, bytes);
    index.push_back(std::move(e));
  }
  nlohmann::ordered_json meta;
  meta["info"] = info;
  meta["payload_bytes"] = payload.size();
  meta["tensors"] = std::move(index);
  const std::string meta_text = meta.dump();

  std::string file;
  file.reserve(kHeaderBytes + meta_text.size() + payload.size());
  file.append(kMagic, 4);
  put_u32(file, kFormatVersion);
  put_u64(file, meta_text.size());
  file += meta_text;
  file += payload;

  // stage under a temporary name so `path` only ever holds a complete file
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError(strfmt("cannot write checkpoint %s", path.c_str()));
    out.write(file.data(), std::streamsize(file.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw UsageError(strfmt("cannot write checkpoint %s", path.c_str()));
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw UsageError(strfmt("cannot move checkpoint into place at %s: %s",
                            path.c_str(), ec.message().c_str()));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(strfmt("cannot read checkpoint %s", path.c_str()));
  ParsedMeta meta = read_meta(in, path);
  std::string payload(meta.payload_bytes, '\0');
  in.read(payload.data(), std::streamsize(meta.payload_bytes));
  if (in.gcount() != std::streamsize(meta.payload_bytes))
    throw DataError(strfmt("%s: truncated checkpoint payload", path.c_str()));

  Checkpoint ck;
  ck.info = std::move(meta.info);
  ck.index = std::move(meta.index);
  const unsigned char* base =
      reinterpret_cast<const unsigned char*>(payload.data());
  for (const TensorEntry& e : ck.index) {
    if (crc32(base + e.offset, e.bytes) != e.crc)
      throw DataError(strfmt("%s: checksum mismatch in tensor '%s'",
                             path.c_str(), e.name.c_str()));
    TensorPtr t = Tensor::zeros(e.shape);
    for (int64_t i = 0; i < t->numel(); i++)
      t->f32[size_t(i)] = read_f32_le(base + e.offset + uint64_t(i) * 4);
    ck.tensors.emplace(e.name, std::move(t));
  }
  return ck;
}

Checkpoint inspect_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(strfmt("cannot read checkpoint %s", path.c_str()));
  ParsedMeta meta = read_meta(in, path);
  Checkpoint ck;
  ck.info = std::move(meta.info);
  ck.index = std::move(meta.index);
  return ck;
}

int64_t attach_tensors(
    const Checkpoint& ck,
    const std::vector<std::pair<std::string, TensorPtr>>& targets,
    const std::string& prefix) {
  int64_t written = 0;
  for (const auto& [name, target] : targets) {
    if (name.rfind(prefix, 0) != 0) continue;
    TensorPtr src = ck.find(name);
    if (!src)
      throw DataError(strfmt("checkpoint has no tensor '%s'", name.c_str()));
    if (src->shape != target->shape)
      throw DataError(strfmt("shape mismatch attaching '%s'", name.c_str()));
    if (target->dtype != DType::kF32)
      throw UsageError(strfmt("attach target '%s' is not f32", name.c_str()));
    target->f32 = src->f32;
    written++;
  }
  if (written == 0)
    throw UsageError(
        strfmt("no target tensors match prefix '%s'", prefix.c_str()));
  return written;
}

}  // namespace moa::ckpt
