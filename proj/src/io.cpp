#include "crnet/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "crnet/error.hpp"

namespace crnet {

static_assert(std::endian::native == std::endian::little, "CRT1 I/O assumes a little-endian host");

namespace {

constexpr char kTensorMagic[4] = {'C', 'R', 'T', '1'};
constexpr char kArchiveMagic[4] = {'C', 'R', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxDims = 16;

template <class T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source, std::size_t base)
      : bytes_(bytes), source_(source), base_(base) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + " at offset " + std::to_string(base_ + pos_) + ": " + what);
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  const std::string& source_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

Shape parse_shape(std::string_view text) {
  if (text.size() < 2 || text.front() != '[' || text.back() != ']') throw FormatError("bad shape");
  Shape shape;
  text = text.substr(1, text.size() - 2);
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto token = text.substr(0, comma);
    std::int64_t v = 0;
    if (token.empty()) throw FormatError("bad shape");
    for (char c : token) {
      if (c < '0' || c > '9') throw FormatError("bad shape");
      v = v * 10 + (c - '0');
    }
    shape.push_back(v);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return shape;
}

std::string shape_text(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

std::string encode_tensor(const Tensor& tensor) {
  if (!tensor.defined()) throw FormatError("cannot encode an undefined tensor");
  std::string out(kTensorMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.dtype()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
  for (auto d : tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  if (tensor.dtype() == DType::f32) {
    auto v = tensor.data<float>();
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  } else {
    auto v = tensor.data<double>();
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  return out;
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  const auto bytes = encode_tensor(tensor);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor decode_tensor(std::string_view bytes, const std::string& source, std::size_t base_offset) {
  Reader r(bytes, source, base_offset);
  if (r.take(4, "magic") != std::string_view(kTensorMagic, 4)) r.fail("bad CRT1 magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) r.fail("unsupported CRT1 version " + std::to_string(version));
  const auto code = r.get<std::uint32_t>("dtype");
  if (code > 1) r.fail("unknown dtype code " + std::to_string(code));
  const auto ndim = r.get<std::uint32_t>("ndim");
  if (ndim > kMaxDims) r.fail("implausible ndim " + std::to_string(ndim));
  Shape shape(ndim);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = r.get<std::uint32_t>("dims");
    count *= static_cast<std::uint64_t>(d);
    if (count > (std::uint64_t{1} << 40)) r.fail("implausible element count");
  }
  const auto dtype = static_cast<DType>(code);
  const std::size_t width = dtype == DType::f32 ? 4 : 8;
  const auto payload = r.take(count * width, "payload");
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes after payload");
  Buffer buffer(dtype, count);
  if (dtype == DType::f32) {
    std::memcpy(buffer.view<float>().data(), payload.data(), payload.size());
  } else {
    std::memcpy(buffer.view<double>().data(), payload.data(), payload.size());
  }
  return Tensor::from(std::move(shape), std::move(buffer));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw FormatError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::string encode_pfm(const Tensor& plane) {
  if (plane.ndim() != 2) throw ShapeError("encode_pfm: expected a [H,W] plane, got " + to_string(plane.shape()));
  const std::int64_t h = plane.dim(0), w = plane.dim(1);
  std::string out = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  for (std::int64_t y = h - 1; y >= 0; --y) {
    for (std::int64_t x = 0; x < w; ++x) put<float>(out, static_cast<float>(plane.value(y * w + x)));
  }
  return out;
}

void write_pfm(const std::filesystem::path& path, const Tensor& plane) { write_file_atomic(path, encode_pfm(plane)); }

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  write_file_atomic(path, encode_tensor(tensor));
}

Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_tensor(bytes, path.string());
}

std::string encode_archive(const NamedTensors& entries) {
  std::string manifest;
  std::string payload;
  std::unordered_set<std::string> seen;
  for (const auto& [name, tensor] : entries) {
    if (name.empty() || name.find_first_of("\t\n") != std::string::npos) {
      throw FormatError("archive entry name must be non-empty and free of tabs/newlines: '" + name + "'");
    }
    if (!seen.insert(name).second) throw FormatError("duplicate archive entry '" + name + "'");
    manifest += name + '\t' + std::to_string(payload.size()) + '\t' + shape_text(tensor.shape()) + '\n';
    payload += encode_tensor(tensor);
  }
  std::string out(kArchiveMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, manifest.size());
  out += manifest;
  out += payload;
  return out;
}

NamedTensors decode_archive(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source, 0);
  if (r.take(4, "magic") != std::string_view(kArchiveMagic, 4)) r.fail("bad archive magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) r.fail("unsupported archive version " + std::to_string(version));
  const auto manifest_len = r.get<std::uint64_t>("manifest length");
  if (manifest_len > r.remaining()) r.fail("truncated manifest");
  const std::size_t manifest_start = r.pos();
  const auto manifest = r.take(manifest_len, "manifest");
  const std::size_t payload_start = r.pos();
  const auto payload = bytes.substr(payload_start);

  struct Line {
    std::string name;
    std::size_t offset;
    Shape shape;
    std::size_t at;
  };
  std::vector<Line> lines;
  std::size_t cursor = 0;
  while (cursor < manifest.size()) {
    const auto at = manifest_start + cursor;
    auto fail = [&](const std::string& what) -> void {
      throw FormatError(source + " at offset " + std::to_string(at) + ": " + what);
    };
    const auto end = manifest.find('\n', cursor);
    if (end == std::string_view::npos) fail("manifest line without newline");
    const auto line = manifest.substr(cursor, end - cursor);
    cursor = end + 1;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos) fail("manifest line needs 3 tab-separated fields");
    Line l{std::string(line.substr(0, t1)), 0, {}, at};
    try {
      l.offset = std::stoull(std::string(line.substr(t1 + 1, t2 - t1 - 1)));
      l.shape = parse_shape(line.substr(t2 + 1));
    } catch (const std::exception&) {
      fail("malformed manifest line '" + std::string(line) + "'");
    }
    lines.push_back(std::move(l));
  }

  NamedTensors out;
  out.reserve(lines.size());
  std::size_t expected = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& l = lines[i];
    if (l.offset != expected) {
      throw FormatError(source + " at offset " + std::to_string(l.at) + ": entry '" + l.name +
                        "' offset " + std::to_string(l.offset) + " does not follow the previous entry");
    }
    const std::size_t next = i + 1 < lines.size() ? lines[i + 1].offset : payload.size();
    if (next < l.offset || next > payload.size()) {
      throw FormatError(source + " at offset " + std::to_string(payload_start + l.offset) +
                        ": truncated payload for '" + l.name + "'");
    }
    Tensor t = decode_tensor(payload.substr(l.offset, next - l.offset), source, payload_start + l.offset);
    if (t.shape() != l.shape) {
      throw FormatError(source + " at offset " + std::to_string(payload_start + l.offset) + ": entry '" +
                        l.name + "' shape " + to_string(t.shape()) + " disagrees with manifest " +
                        to_string(l.shape));
    }
    out.emplace_back(l.name, std::move(t));
    expected = next;
  }
  if (expected != payload.size()) {
    throw FormatError(source + " at offset " + std::to_string(payload_start + expected) +
                      ": trailing bytes after last entry");
  }
  return out;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& entries) {
  write_file_atomic(path, encode_archive(entries));
}

NamedTensors load_archive(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_archive(bytes, path.string());
}

}  // namespace crnet
