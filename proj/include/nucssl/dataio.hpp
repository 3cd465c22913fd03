#pragma once

// Raster I/O, dataset indexing and checkpoint persistence.
//
// Rasters are PNG. Images decode to 8-bit RGB; label maps must be
// single-channel grayscale (8- or 16-bit) and are written as 16-bit so that
// more than 255 instances survive a round trip. Lossy formats are refused
// for label maps because instance ids have to come back bit-exact.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <cctype>
#include <optional>
#include <string>
#include <vector>

#include "nucssl/errors.hpp"
#include "nucssl/image.hpp"
#include "nucssl/random.hpp"

namespace nucssl {

namespace fs = std::filesystem;

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    return f;
}

enum class RasterFormat { png, jpeg, unknown };

inline RasterFormat sniff_format(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::array<unsigned char, 8> head{};
    in.read(reinterpret_cast<char*>(head.data()), head.size());
    const auto got = in.gcount();
    if (got >= 8 && png_sig_cmp(head.data(), 0, 8) == 0) {
        return RasterFormat::png;
    }
    if (got >= 3 && head[0] == 0xFF && head[1] == 0xD8 && head[2] == 0xFF) {
        return RasterFormat::jpeg;
    }
    return RasterFormat::unknown;
}

// Decoded PNG: rows of 8- or 16-bit samples, `channels` per pixel.
struct RawRaster {
    int height = 0;
    int width = 0;
    int channels = 0;
    int bit_depth = 0;
    std::vector<unsigned char> bytes;
};

enum class DecodeMode { rgb8, gray_exact };

inline RawRaster decode_png(const fs::path& path, DecodeMode mode) {
    FilePtr fp = open_file(path, "rb");
    RawRaster out;
    std::vector<png_bytep> rows;
    std::string failure;

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) {
        throw IoError("libpng initialisation failed");
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG '" + path.string() + "'" + (failure.empty() ? "" : ": " + failure));
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (mode == DecodeMode::rgb8) {
        if (color == PNG_COLOR_TYPE_PALETTE) {
            png_set_palette_to_rgb(png);
        }
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
            if (depth < 8) {
                png_set_expand_gray_1_2_4_to_8(png);
            }
            png_set_gray_to_rgb(png);
        }
        if (depth == 16) {
            png_set_strip_16(png);
        }
        if ((color & PNG_COLOR_MASK_ALPHA) != 0) {
            png_set_strip_alpha(png);
        }
        if (png_get_valid(png, info, PNG_INFO_tRNS) != 0U) {
            png_set_tRNS_to_alpha(png);
            png_set_strip_alpha(png);
        }
    } else {
        if (color != PNG_COLOR_TYPE_GRAY) {
            png_destroy_read_struct(&png, &info, nullptr);
            throw IoError("label map '" + path.string() + "' must be single-channel grayscale");
        }
        if (depth < 8) {
            png_set_packing(png);
        }
    }
    png_read_update_info(png, info);

    out.height = static_cast<int>(h);
    out.width = static_cast<int>(w);
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    out.bytes.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) {
        rows[y] = out.bytes.data() + y * rowbytes;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const int expected_channels = mode == DecodeMode::rgb8 ? 3 : 1;
    if (out.channels != expected_channels || out.height < 1 || out.width < 1) {
        throw IoError("unexpected PNG layout in '" + path.string() + "'");
    }
    return out;
}

inline void encode_png(const fs::path& path, int height, int width, int color_type, int bit_depth,
                       const std::vector<unsigned char>& bytes) {
    FilePtr fp = open_file(path, "wb");
    const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        rows[y] = const_cast<png_bytep>(bytes.data() + y * rowbytes);
    }

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) {
        throw IoError("libpng initialisation failed");
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void require_png(const fs::path& path, bool label_map) {
    if (!fs::exists(path)) {
        throw IoError("file not found '" + path.string() + "'");
    }
    switch (sniff_format(path)) {
    case RasterFormat::png:
        return;
    case RasterFormat::jpeg:
        if (label_map) {
            throw IoError("lossy format rejected for label map '" + path.string() + "'");
        }
        throw IoError("unsupported raster format (JPEG) '" + path.string() + "'");
    case RasterFormat::unknown:
        break;
    }
    throw IoError("unsupported or corrupt raster file '" + path.string() + "'");
}

} // namespace detail

inline RgbImage read_image(const fs::path& path) {
    detail::require_png(path, false);
    const detail::RawRaster raw = detail::decode_png(path, detail::DecodeMode::rgb8);
    RgbImage img(raw.height, raw.width);
    std::copy(raw.bytes.begin(), raw.bytes.end(), img.pixels.begin());
    return img;
}

inline void write_image(const fs::path& path, const RgbImage& img) {
    detail::encode_png(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 8, img.pixels);
}

inline InstanceLabelMap read_label_map(const fs::path& path) {
    detail::require_png(path, true);
    const detail::RawRaster raw = detail::decode_png(path, detail::DecodeMode::gray_exact);
    InstanceLabelMap labels(raw.height, raw.width);
    if (raw.bit_depth == 16) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels.values[i] = (static_cast<std::uint32_t>(raw.bytes[2 * i]) << 8) | raw.bytes[2 * i + 1];
        }
    } else {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels.values[i] = raw.bytes[i];
        }
    }
    return labels;
}

inline void write_label_map(const fs::path& path, const InstanceLabelMap& labels) {
    if (labels.height < 1 || labels.width < 1) {
        throw ShapeError("cannot write an empty label map");
    }
    if (labels.max_id() > 0xFFFF) {
        throw IoError("instance id exceeds the 16-bit label file range");
    }
    std::vector<unsigned char> bytes(labels.size() * 2);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        bytes[2 * i] = static_cast<unsigned char>(labels.values[i] >> 8);
        bytes[2 * i + 1] = static_cast<unsigned char>(labels.values[i] & 0xFF);
    }
    detail::encode_png(path, labels.height, labels.width, PNG_COLOR_TYPE_GRAY, 16, bytes);
}

// Ternary masks are stored as 8-bit grayscale with values {0, 1, 2}.
inline TernaryMask read_ternary_mask(const fs::path& path) {
    const InstanceLabelMap raw = read_label_map(path);
    TernaryMask mask(raw.height, raw.width);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw.values[i] >= static_cast<std::uint32_t>(kClassCount)) {
            throw IoError("ternary mask '" + path.string() + "' contains values outside {0,1,2}");
        }
        mask.values[i] = static_cast<std::uint8_t>(raw.values[i]);
    }
    return mask;
}

inline void write_gray8(const fs::path& path, const Plane<std::uint8_t>& plane) {
    detail::encode_png(path, plane.height, plane.width, PNG_COLOR_TYPE_GRAY, 8, plane.values);
}

inline void write_ternary_mask(const fs::path& path, const TernaryMask& mask) { write_gray8(path, mask); }

// ---------------------------------------------------------------------------
// Dataset index

enum class Split { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
    case Split::train:
        return "train";
    case Split::val:
        return "val";
    case Split::test:
        return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "val") {
        return Split::val;
    }
    if (s == "test") {
        return Split::test;
    }
    throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

struct DatasetEntry {
    std::string stem;
    fs::path image_path;
    std::optional<fs::path> label_path;
    Split split = Split::train;

    friend bool operator==(const DatasetEntry&, const DatasetEntry&) = default;
};

struct DatasetIndex {
    fs::path root;
    std::vector<DatasetEntry> entries;
    double split_ratio = 0.8;
    std::uint64_t seed = 0;

    std::vector<DatasetEntry> in_split(Split s) const {
        std::vector<DatasetEntry> out;
        for (const auto& e : entries) {
            if (e.split == s) {
                out.push_back(e);
            }
        }
        return out;
    }

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                      [s](const DatasetEntry& e) { return e.split == s; }));
    }

    friend bool operator==(const DatasetIndex& a, const DatasetIndex& b) {
        return a.root == b.root && a.entries == b.entries && a.split_ratio == b.split_ratio && a.seed == b.seed;
    }
};

namespace detail {

inline bool is_raster_name(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff";
}

// Images under `dir/images`, labels paired by stem under `dir/labels`.
inline std::vector<DatasetEntry> scan_pairs(const fs::path& dir, bool require_labels) {
    const fs::path images = dir / "images";
    const fs::path labels = dir / "labels";
    if (!fs::is_directory(images)) {
        throw IoError("missing directory '" + images.string() + "'");
    }
    const bool have_labels = fs::is_directory(labels);
    if (require_labels && !have_labels) {
        throw IoError("missing directory '" + labels.string() + "'");
    }

    std::vector<DatasetEntry> entries;
    for (const auto& item : fs::directory_iterator(images)) {
        if (!item.is_regular_file() || !is_raster_name(item.path())) {
            continue;
        }
        DatasetEntry e;
        e.stem = item.path().stem().string();
        e.image_path = item.path();
        entries.push_back(std::move(e));
    }
    std::sort(entries.begin(), entries.end(), [](const DatasetEntry& a, const DatasetEntry& b) { return a.stem < b.stem; });
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].stem == entries[i - 1].stem) {
            throw IoError("duplicate image stem '" + entries[i].stem + "' in '" + images.string() + "'");
        }
    }

    for (auto& e : entries) {
        std::ifstream probe(e.image_path, std::ios::binary);
        if (!probe) {
            throw IoError("unreadable file '" + e.image_path.string() + "'");
        }
        if (have_labels) {
            const fs::path lp = labels / (e.stem + ".png");
            if (fs::exists(lp)) {
                e.label_path = lp;
            } else if (require_labels) {
                throw IoError("image '" + e.image_path.filename().string() + "' has no label file in '" +
                              labels.string() + "'");
            }
        }
    }
    return entries;
}

} // namespace detail

// Entries under `<root>/images` are shuffled with a seeded permutation and cut
// into train/val at `split_ratio`. Entries under `<root>/test/images`, when
// present, form the test split.
inline DatasetIndex load_dataset(const fs::path& root, double split_ratio, std::uint64_t seed,
                                 bool require_labels = false) {
    if (!(split_ratio > 0.0 && split_ratio <= 1.0)) {
        throw ConfigError("split_ratio must lie in (0, 1]");
    }
    if (!fs::is_directory(root)) {
        throw IoError("missing directory '" + root.string() + "'");
    }
    std::vector<DatasetEntry> pool = detail::scan_pairs(root, require_labels);
    if (pool.empty()) {
        throw IoError("empty dataset: no images in '" + (root / "images").string() + "'");
    }

    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    const auto n_train = static_cast<std::size_t>(std::llround(split_ratio * static_cast<double>(pool.size())));
    std::vector<bool> is_train(pool.size(), false);
    for (std::size_t k = 0; k < n_train && k < order.size(); ++k) {
        is_train[order[k]] = true;
    }

    DatasetIndex index;
    index.root = root;
    index.split_ratio = split_ratio;
    index.seed = seed;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        pool[i].split = is_train[i] ? Split::train : Split::val;
        index.entries.push_back(pool[i]);
    }
    if (fs::is_directory(root / "test" / "images")) {
        for (auto& e : detail::scan_pairs(root / "test", require_labels)) {
            e.split = Split::test;
            index.entries.push_back(std::move(e));
        }
    }
    return index;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary little-endian container:
//   magic "NUCSSLCK" | u32 format version | str schema tag | u64 step |
//   str config snapshot | u32 blob count | blobs...
// blob: str name | str architecture | u64 n | n x f64 (IEEE-754 bit patterns)
// str:  u64 byte length | bytes

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointSchemaTag = "nucssl.checkpoint/1";

struct ParamBlob {
    std::string architecture;
    std::vector<double> values;

    friend bool operator==(const ParamBlob&, const ParamBlob&) = default;
};

struct Checkpoint {
    ParamBlob encoder;
    std::optional<ParamBlob> decoder;
    std::optional<ParamBlob> scorer;
    std::optional<ParamBlob> optimizer_state;
    std::string config_snapshot;
    std::uint64_t step = 0;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    const std::vector<char>& bytes() const { return bytes_; }

private:
    void put_le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
        }
    }
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(std::vector<char> bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
    std::uint64_t u64() { return get_le(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(bytes_.data() + pos_, bytes_.data() + pos_ + n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) {
            throw IoError("truncated checkpoint '" + source_ + "'");
        }
    }
    std::uint64_t get_le(int n) {
        need(static_cast<std::uint64_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::vector<char> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline constexpr char kCheckpointMagic[8] = {'N', 'U', 'C', 'S', 'S', 'L', 'C', 'K'};

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    detail::ByteWriter w;
    w.raw(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    w.u32(kCheckpointFormatVersion);
    w.str(kCheckpointSchemaTag);
    w.u64(ckpt.step);
    w.str(ckpt.config_snapshot);

    std::vector<std::pair<std::string, const ParamBlob*>> blobs{{"encoder", &ckpt.encoder}};
    if (ckpt.decoder) {
        blobs.emplace_back("decoder", &*ckpt.decoder);
    }
    if (ckpt.scorer) {
        blobs.emplace_back("scorer", &*ckpt.scorer);
    }
    if (ckpt.optimizer_state) {
        blobs.emplace_back("optimizer", &*ckpt.optimizer_state);
    }
    w.u32(static_cast<std::uint32_t>(blobs.size()));
    for (const auto& [name, blob] : blobs) {
        w.str(name);
        w.str(blob->architecture);
        w.u64(blob->values.size());
        for (double v : blob->values) {
            w.f64(v);
        }
    }

    const fs::path tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write checkpoint '" + path.string() + "'");
        }
        out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        if (!out) {
            throw IoError("failed writing checkpoint '" + path.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::ByteReader r(std::move(bytes), path.string());

    if (r.raw(8) != std::string(detail::kCheckpointMagic, 8)) {
        throw SchemaError("'" + path.string() + "' is not a nucssl checkpoint");
    }
    const std::uint32_t version = r.u32();
    const std::string tag = r.str();
    if (version != kCheckpointFormatVersion || tag != kCheckpointSchemaTag) {
        throw SchemaError("checkpoint schema mismatch in '" + path.string() + "': found '" + tag + "' v" +
                          std::to_string(version) + ", expected '" + kCheckpointSchemaTag + "' v" +
                          std::to_string(kCheckpointFormatVersion));
    }

    Checkpoint ckpt;
    ckpt.step = r.u64();
    ckpt.config_snapshot = r.str();
    const std::uint32_t count = r.u32();
    bool have_encoder = false;
    for (std::uint32_t b = 0; b < count; ++b) {
        const std::string name = r.str();
        ParamBlob blob;
        blob.architecture = r.str();
        const std::uint64_t n = r.u64();
        blob.values.resize(n);
        for (auto& v : blob.values) {
            v = r.f64();
        }
        if (name == "encoder") {
            ckpt.encoder = std::move(blob);
            have_encoder = true;
        } else if (name == "decoder") {
            ckpt.decoder = std::move(blob);
        } else if (name == "scorer") {
            ckpt.scorer = std::move(blob);
        } else if (name == "optimizer") {
            ckpt.optimizer_state = std::move(blob);
        } else {
            throw SchemaError("unknown checkpoint section '" + name + "' in '" + path.string() + "'");
        }
    }
    if (!have_encoder) {
        throw SchemaError("checkpoint '" + path.string() + "' has no encoder section");
    }
    if (!r.at_end()) {
        throw SchemaError("trailing bytes in checkpoint '" + path.string() + "'");
    }
    return ckpt;
}

} // namespace nucssl
