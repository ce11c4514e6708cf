#include "ddlab/formats.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "ddlab/errors.hpp"

namespace ddlab {

namespace fs = std::filesystem;

namespace {

constexpr char kTensorMagic[4] = {'T', 'S', 'R', '1'};
constexpr char kCheckpointMagic[4] = {'C', 'K', 'P', '1'};
constexpr std::size_t kTensorHeader = 12;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

void require_bytes(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t n, const char* what) {
    if (bytes.size() < offset || bytes.size() - offset < n) {
        throw FormatError(std::string("truncated data reading ") + what + ": need " + std::to_string(n) +
                              " bytes, have " + std::to_string(bytes.size() > offset ? bytes.size() - offset : 0),
                          offset);
    }
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.rank() > kMaxTensorRank) {
        throw ParameterError("TSR1 supports rank <= 8, got shape " + shape_str(t.shape()));
    }
    std::vector<std::uint8_t> out;
    out.reserve(kTensorHeader + 4 * t.rank() + 4 * t.numel());
    out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    out.insert(out.end(), 6, 0);
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    const std::size_t start = offset;
    require_bytes(bytes, offset, kTensorHeader, "tensor header");
    const std::uint8_t* p = bytes.data() + offset;
    if (std::memcmp(p, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic, expected 'TSR1'", start);
    if (p[4] != 0) throw FormatError("unsupported tensor dtype code " + std::to_string(p[4]), start + 4);
    const std::size_t rank = p[5];
    if (rank > kMaxTensorRank) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds 8", start + 5);
    offset += kTensorHeader;

    require_bytes(bytes, offset, 4 * rank, "tensor dims");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        const std::uint32_t d = get_u32(bytes.data() + offset + 4 * i);
        if (d == 0) throw FormatError("zero-length tensor dimension", offset + 4 * i);
        shape[i] = d;
        count *= d;
        if (count > (std::uint64_t(1) << 34)) throw FormatError("tensor element count too large", offset + 4 * i);
    }
    offset += 4 * rank;

    require_bytes(bytes, offset, 4 * count, "tensor payload");
    std::vector<float> values(count);
    const std::uint8_t* q = bytes.data() + offset;
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(get_u32(q + 4 * i));
    offset += 4 * count;
    return Tensor(std::move(shape), std::move(values));
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_tensor(const fs::path& path, const Tensor& t) { write_file_atomic(path, encode_tensor(t)); }

Tensor load_tensor(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t offset = 0;
    Tensor t = decode_tensor(bytes, offset);
    if (offset != bytes.size()) throw FormatError("trailing bytes after tensor record in '" + path.string() + "'", offset);
    return t;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        if (name.size() > 0xffff) throw ParameterError("parameter name too long: " + name.substr(0, 32) + "...");
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        const auto rec = encode_tensor(t);
        out.insert(out.end(), rec.begin(), rec.end());
    }
    return out;
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
    require_bytes(bytes, 0, 8, "checkpoint header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 3) != 0) throw FormatError("bad checkpoint magic, expected 'CKP1'", 0);
    if (bytes[3] != '1') {
        throw FormatError("unknown checkpoint version '" + std::string(1, static_cast<char>(bytes[3])) + "'", 3);
    }
    const std::uint32_t count = get_u32(bytes.data() + 4);
    std::size_t offset = 8;
    ModelParams params;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        require_bytes(bytes, offset, 2, "entry name length");
        const std::size_t len = get_u16(bytes.data() + offset);
        offset += 2;
        require_bytes(bytes, offset, len, "entry name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + offset), len);
        if (!seen.insert(name).second) throw FormatError("duplicate checkpoint entry '" + name + "'", offset);
        offset += len;
        Tensor t = decode_tensor(bytes, offset);
        params.add(std::move(name), std::move(t));
    }
    if (offset != bytes.size()) throw FormatError("trailing bytes after checkpoint entries", offset);
    return params;
}

void save_checkpoint(const fs::path& path, const ModelParams& params) {
    write_file_atomic(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file_bytes(path)); }

void load_checkpoint_into(const fs::path& path, ModelParams& params) {
    try {
        params.assign_from(load_checkpoint(path));
    } catch (const CheckpointMismatchError& e) {
        throw CheckpointMismatchError("checkpoint '" + path.string() + "': " + e.what());
    }
}

namespace {

// Reads the next whitespace-delimited PGM header token, skipping comments.
std::string pgm_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(bytes[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') tok += static_cast<char>(bytes[pos++]);
    if (tok.empty()) throw FormatError("truncated PGM header", pos);
    return tok;
}

long pgm_number(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* what) {
    const std::size_t at = pos;
    const std::string tok = pgm_token(bytes, pos);
    for (char c : tok)
        if (!std::isdigit(static_cast<unsigned char>(c))) throw FormatError(std::string("bad PGM ") + what, at);
    return std::stol(tok);
}

}  // namespace

Tensor read_pgm(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t pos = 0;
    if (pgm_token(bytes, pos) != "P5") throw FormatError("not a binary PGM (P5) file: '" + path.string() + "'", 0);
    const long w = pgm_number(bytes, pos, "width");
    const long h = pgm_number(bytes, pos, "height");
    const long maxval = pgm_number(bytes, pos, "maxval");
    if (w < 1 || h < 1) throw FormatError("PGM dimensions must be positive", pos);
    if (maxval < 1 || maxval > 255) throw FormatError("only 8-bit PGM (maxval <= 255) is supported", pos);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("missing whitespace after PGM header", pos);
    ++pos;
    require_bytes(bytes, pos, std::size_t(w * h), "PGM pixels");
    std::vector<float> v(std::size_t(w * h));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(bytes[pos + i]) / float(maxval);
    return Tensor({1, h, w}, std::move(v));
}

void write_pgm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1) throw DimensionError("write_pgm: expected 1 x H x W, got " + shape_str(image.shape()));
    const std::string header = "P5\n" + std::to_string(image.dim(2)) + " " + std::to_string(image.dim(1)) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (float v : image.data()) {
        const float c = std::min(1.0f, std::max(0.0f, v));
        out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
    }
    write_file_atomic(path, out);
}

void write_manifest(const fs::path& path, std::span<const ManifestRow> rows) {
    std::set<std::string> seen;
    std::string text = "path,label,split\n";
    for (const auto& r : rows) {
        if (!seen.insert(r.path).second) throw ValidationError("manifest: duplicate path '" + r.path + "'");
        if (r.path.find_first_of(",\n\"") != std::string::npos) {
            throw ValidationError("manifest: path '" + r.path + "' contains a reserved character");
        }
        text += r.path + "," + std::to_string(r.label) + "," + std::string(to_string(r.split)) + "\n";
    }
    write_text_atomic(path, text);
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || (line != "path,label,split" && line != "path,label,split\r")) {
        throw ValidationError("manifest '" + path.string() + "' must start with header 'path,label,split'");
    }
    std::vector<ManifestRow> rows;
    std::set<std::string> seen;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
        if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": expected 3 fields");
        }
        ManifestRow r;
        r.path = line.substr(0, c1);
        const std::string label = line.substr(c1 + 1, c2 - c1 - 1);
        if (label != "0" && label != "1") {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": label must be 0 or 1, got '" + label + "'");
        }
        r.label = label[0] - '0';
        r.split = parse_split(line.substr(c2 + 1));
        if (r.path.empty() || !seen.insert(r.path).second) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": empty or duplicate path '" + r.path + "'");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void save_dataset_dir(const fs::path& dir, const Dataset& ds) {
    fs::create_directories(dir / "samples");
    const std::size_t n = ds.size();
    std::vector<ManifestRow> rows;
    rows.reserve(n);
    const auto& s = ds.images.shape();
    const std::size_t per = ds.images.numel() / n;
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "samples/%06zu.tsr", i);
        std::vector<float> v(ds.images.data().begin() + std::ptrdiff_t(i * per),
                             ds.images.data().begin() + std::ptrdiff_t((i + 1) * per));
        save_tensor(dir / name, Tensor({s[1], s[2], s[3]}, std::move(v)));
        rows.push_back({name, ds.labels[i], ds.splits[i]});
    }
    write_manifest(dir / "manifest.csv", rows);
}

Dataset load_dataset_dir(const fs::path& dir, std::int64_t image_size) {
    const auto rows = read_manifest(dir / "manifest.csv");
    if (rows.empty()) throw ValidationError("manifest in '" + dir.string() + "' has no rows");
    Dataset ds;
    std::vector<float> pixels;
    std::int64_t channels = -1;
    for (const auto& r : rows) {
        const fs::path p = dir / r.path;
        Tensor img = p.extension() == ".pgm" ? read_pgm(p) : load_tensor(p);
        if (img.rank() != 3) throw ValidationError("sample '" + r.path + "' is not C x H x W: " + shape_str(img.shape()));
        if (img.dim(1) != image_size || img.dim(2) != image_size) img = resize_bilinear(img, image_size);
        if (channels < 0) channels = img.dim(0);
        if (img.dim(0) != channels) throw ValidationError("sample '" + r.path + "' has inconsistent channel count");
        pixels.insert(pixels.end(), img.data().begin(), img.data().end());
        ds.labels.push_back(r.label);
        ds.splits.push_back(r.split);
    }
    ds.images = Tensor({static_cast<std::int64_t>(rows.size()), channels, image_size, image_size}, std::move(pixels));
    return ds;
}

}  // namespace ddlab
