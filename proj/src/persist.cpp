#include "cmlp/persist.hpp"

#include <array>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "cmlp/error.hpp"

namespace cmlp {
namespace persist {

// ---------------------------------------------------------------------------
// CRC-32
// ---------------------------------------------------------------------------

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) {
            c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
        }
        table[i] = c;
    }
    return table;
}

} // namespace

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed) {
    static const std::array<std::uint32_t, 256> table = make_crc_table();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    }
    return c ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// little-endian byte plumbing
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 24));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() { return 1; }
template <>
constexpr std::uint8_t dtype_code<double>() { return 2; }

void put_value(std::vector<unsigned char>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_value(std::vector<unsigned char>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

std::string hex32(std::uint32_t v) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "0x%08X", v);
    return buf;
}

struct Cursor {
    const unsigned char* base;
    std::size_t size;
    std::size_t off = 0;

    void require(std::size_t n, const char* what) const {
        if (size - off < n) {
            throw PersistError("truncated file: need " + std::to_string(n) + " bytes for " +
                               what + " at offset " + std::to_string(off));
        }
    }

    std::uint8_t u8(const char* what) {
        require(1, what);
        return base[off++];
    }

    std::uint32_t u32(const char* what) {
        require(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(base[off + i]) << (8 * i);
        off += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        require(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(base[off + i]) << (8 * i);
        off += 8;
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        require(n, what);
        std::string s(reinterpret_cast<const char*>(base + off), n);
        off += n;
        return s;
    }
};

template <typename T>
T value_of(Cursor& c, const char* what);

template <>
float value_of<float>(Cursor& c, const char* what) {
    const std::uint32_t bits = c.u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

template <>
double value_of<double>(Cursor& c, const char* what) {
    const std::uint64_t bits = c.u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

template <typename T>
void put_record(std::vector<unsigned char>& out, const std::string& name, const Tensor<T>& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(dtype_code<T>());
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) put_u64(out, t.extent(i));
    for (std::size_t i = 0; i < t.size(); ++i) put_value(out, t[i]);
}

template <typename T>
std::pair<std::string, Tensor<T>> read_record(Cursor& c) {
    const std::uint32_t name_len = c.u32("tensor name length");
    std::string name = c.str(name_len, "tensor name");
    const std::uint8_t dtype = c.u8("tensor dtype code");
    if (dtype != dtype_code<T>()) {
        throw PersistError("tensor '" + name + "': dtype code " + std::to_string(dtype) +
                           " does not match the requested element width");
    }
    const std::uint8_t rank = c.u8("tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::uint64_t e = c.u64("tensor extent");
        shape[i] = static_cast<std::size_t>(e);
        // A zero or absurd extent would be caught by the payload bound below;
        // reject zero explicitly for a clearer message.
        if (e == 0) throw PersistError("tensor '" + name + "': zero extent");
        if (count > c.size / shape[i]) {
            throw PersistError("tensor '" + name + "': extents overflow the file size");
        }
        count *= shape[i];
    }
    c.require(count * sizeof(T), "tensor payload");
    std::vector<T> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = value_of<T>(c, "tensor payload");
    return {std::move(name), Tensor<T>::from_data(std::move(shape), std::move(values))};
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw PersistError("cannot open '" + path + "' for reading");
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw PersistError("read failure on '" + path + "'");
    return bytes;
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw PersistError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw PersistError("write failure on '" + path + "'");
}

// Verifies the trailing CRC and returns a cursor over the protected bytes.
Cursor open_protected(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < 4) {
        throw PersistError("truncated file '" + path + "': shorter than its checksum");
    }
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[body + i]) << (8 * i);
    const std::uint32_t computed = crc32(bytes.data(), body);
    if (stored != computed) {
        throw PersistError("crc mismatch in '" + path + "': stored " + hex32(stored) +
                           ", computed " + hex32(computed));
    }
    return Cursor{bytes.data(), body, 0};
}

void check_magic(Cursor& c, const char* magic, const std::string& path) {
    const std::string got = c.str(4, "file magic");
    if (got != magic) {
        throw PersistError("'" + path + "' is not a " + magic + " file (bad magic)");
    }
    const std::uint32_t version = c.u32("format version");
    if (version != kFormatVersion) {
        throw PersistError("'" + path + "': unknown format version " + std::to_string(version));
    }
}

void seal(std::vector<unsigned char>& bytes) {
    const std::uint32_t crc = crc32(bytes.data(), bytes.size());
    put_u32(bytes, crc);
}

// Field-by-field comparison naming the first disagreement.
void check_expected(const ModelConfig& embedded, const ModelConfig& expected) {
    auto fail = [](const char* field, const std::string& a, const std::string& b) {
        throw PersistError(std::string("config mismatch: field '") + field +
                           "' (checkpoint has " + a + ", expected " + b + ")");
    };
    auto join = [](const auto& seq) {
        std::string s;
        for (std::size_t v : seq) {
            if (!s.empty()) s += ',';
            s += std::to_string(v);
        }
        return s;
    };
    if (embedded.variant != expected.variant)
        fail("variant", embedded.variant, expected.variant);
    if (embedded.tokenizer_channels != expected.tokenizer_channels)
        fail("tokenizer_channels", join(embedded.tokenizer_channels),
             join(expected.tokenizer_channels));
    if (embedded.conv_stage_blocks != expected.conv_stage_blocks)
        fail("conv_stage_blocks", std::to_string(embedded.conv_stage_blocks),
             std::to_string(expected.conv_stage_blocks));
    if (embedded.conv_stage_hidden != expected.conv_stage_hidden)
        fail("conv_stage_hidden", std::to_string(embedded.conv_stage_hidden),
             std::to_string(expected.conv_stage_hidden));
    if (embedded.stage_depths != expected.stage_depths)
        fail("stage_depths", join(embedded.stage_depths), join(expected.stage_depths));
    if (embedded.channels != expected.channels)
        fail("channels", join(embedded.channels), join(expected.channels));
    if (embedded.mlp_ratio != expected.mlp_ratio)
        fail("mlp_ratio", std::to_string(embedded.mlp_ratio),
             std::to_string(expected.mlp_ratio));
    if (embedded.num_classes != expected.num_classes)
        fail("num_classes", std::to_string(embedded.num_classes),
             std::to_string(expected.num_classes));
    if (embedded.use_conv_stage != expected.use_conv_stage)
        fail("use_conv_stage", embedded.use_conv_stage ? "true" : "false",
             expected.use_conv_stage ? "true" : "false");
    if (embedded.use_conv_downsample != expected.use_conv_downsample)
        fail("use_conv_downsample", embedded.use_conv_downsample ? "true" : "false",
             expected.use_conv_downsample ? "true" : "false");
    if (embedded.use_dw_conv != expected.use_dw_conv)
        fail("use_dw_conv", embedded.use_dw_conv ? "true" : "false",
             expected.use_dw_conv ? "true" : "false");
    if (embedded.dropout != expected.dropout)
        fail("dropout", std::to_string(embedded.dropout), std::to_string(expected.dropout));
}

} // namespace

// ---------------------------------------------------------------------------
// checkpoint save/load
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    const auto& reg = model.registry();
    std::vector<unsigned char> bytes;
    bytes.insert(bytes.end(), {'C', 'M', 'L', 'P'});
    put_u32(bytes, kFormatVersion);

    const std::string cfg = emit_config(model.config());
    put_u32(bytes, static_cast<std::uint32_t>(cfg.size()));
    bytes.insert(bytes.end(), cfg.begin(), cfg.end());

    put_u32(bytes, static_cast<std::uint32_t>(reg.params().size() + reg.buffers().size()));
    for (const auto& p : reg.params()) put_record(bytes, p.name, *p.value);
    for (const auto& b : reg.buffers()) put_record(bytes, b.name, *b.value);

    seal(bytes);
    write_file(path, bytes);
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path,
                                          const ModelConfig* expected_config) {
    const auto bytes = read_file(path);
    Cursor c = open_protected(bytes, path);
    check_magic(c, "CMLP", path);

    const std::uint32_t cfg_len = c.u32("config length");
    const std::string cfg_text = c.str(cfg_len, "config text");
    const ModelConfig cfg = parse_config(cfg_text);
    if (expected_config) check_expected(cfg, *expected_config);

    auto model = std::make_unique<Model<T>>(cfg, 0);
    auto& reg = model->registry();

    const std::uint32_t count = c.u32("tensor count");
    const std::size_t expected_count = reg.params().size() + reg.buffers().size();
    if (count != expected_count) {
        throw PersistError("tensor count " + std::to_string(count) +
                           " does not match the registry's " + std::to_string(expected_count));
    }

    auto restore = [&](const std::string& name, Tensor<T>& dst) {
        auto [got_name, t] = read_record<T>(c);
        if (got_name != name) {
            throw PersistError("tensor name mismatch: file has '" + got_name +
                               "' where the registry expects '" + name + "'");
        }
        if (!t.same_shape(dst)) {
            throw PersistError("tensor '" + name + "': shape " + t.shape_string() +
                               " does not match the registry's " + dst.shape_string());
        }
        dst = std::move(t);
    };
    for (const auto& p : reg.params()) restore(p.name, *p.value);
    for (const auto& b : reg.buffers()) restore(b.name, *b.value);

    if (c.off != c.size) {
        throw PersistError("trailing bytes after the last tensor record at offset " +
                           std::to_string(c.off));
    }
    return model;
}

// ---------------------------------------------------------------------------
// single-tensor files
// ---------------------------------------------------------------------------

template <typename T>
void save_tensor(const std::string& path, const std::string& name, const Tensor<T>& t) {
    std::vector<unsigned char> bytes;
    bytes.insert(bytes.end(), {'C', 'M', 'L', 'T'});
    put_u32(bytes, kFormatVersion);
    put_record(bytes, name, t);
    seal(bytes);
    write_file(path, bytes);
}

template <typename T>
std::pair<std::string, Tensor<T>> load_tensor(const std::string& path) {
    const auto bytes = read_file(path);
    Cursor c = open_protected(bytes, path);
    check_magic(c, "CMLT", path);
    auto record = read_record<T>(c);
    if (c.off != c.size) {
        throw PersistError("trailing bytes after the tensor record at offset " +
                           std::to_string(c.off));
    }
    return record;
}

// ---------------------------------------------------------------------------
// config text
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        parts.push_back(trim(s.substr(start, pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return parts;
}

[[noreturn]] void parse_fail(std::size_t line, const std::string& what) {
    throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

std::size_t parse_count(const std::string& v, std::size_t line, const std::string& key) {
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        parse_fail(line, "malformed value '" + v + "' for " + key);
    }
    return out;
}

bool parse_bool(const std::string& v, std::size_t line, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    parse_fail(line, "malformed value '" + v + "' for " + key + " (expected true or false)");
}

double parse_real(const std::string& v, std::size_t line, const std::string& key) {
    double out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        parse_fail(line, "malformed value '" + v + "' for " + key);
    }
    return out;
}

template <std::size_t N>
void parse_list(const std::string& v, std::size_t line, const std::string& key,
                std::size_t* out) {
    const auto parts = split(v, ',');
    if (parts.size() != N) {
        parse_fail(line, key + " expects " + std::to_string(N) +
                   " comma-separated values, got " + std::to_string(parts.size()));
    }
    for (std::size_t i = 0; i < N; ++i) out[i] = parse_count(parts[i], line, key);
}

std::string real_string(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

} // namespace

ModelConfig parse_config(const std::string& text) {
    ModelConfig cfg;
    bool any_setting = false;

    const auto lines = [&] {
        std::vector<std::string> out;
        std::size_t start = 0;
        while (start <= text.size()) {
            const std::size_t pos = text.find('\n', start);
            out.push_back(text.substr(start, pos - start));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        return out;
    }();

    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::size_t line = i + 1;
        std::string s = lines[i];
        const std::size_t hash = s.find('#');
        if (hash != std::string::npos) s.erase(hash);
        s = trim(s);
        if (s.empty()) continue;

        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) parse_fail(line, "expected 'key = value'");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key.empty()) parse_fail(line, "missing key before '='");
        if (value.empty()) parse_fail(line, "missing value for " + key);

        if (key == "variant") {
            if (any_setting) parse_fail(line, "variant must be the first setting");
            // Preset names expand to their configuration; any other value is
            // a free-form label over the defaults (checkpoints re-emit every
            // field explicitly, so nothing rides on the label).
            try {
                cfg = preset(value);
            } catch (const ConfigError&) {
                cfg.variant = value;
            }
        } else if (key == "tokenizer_channels") {
            cfg.tokenizer_channels.assign(3, 0);
            parse_list<3>(value, line, key, cfg.tokenizer_channels.data());
        } else if (key == "conv_stage_blocks") {
            cfg.conv_stage_blocks = parse_count(value, line, key);
        } else if (key == "conv_stage_hidden") {
            cfg.conv_stage_hidden = parse_count(value, line, key);
        } else if (key == "stage_depths") {
            parse_list<3>(value, line, key, cfg.stage_depths.data());
        } else if (key == "channels") {
            parse_list<4>(value, line, key, cfg.channels.data());
        } else if (key == "mlp_ratio") {
            cfg.mlp_ratio = parse_count(value, line, key);
        } else if (key == "num_classes") {
            cfg.num_classes = parse_count(value, line, key);
        } else if (key == "use_conv_stage") {
            cfg.use_conv_stage = parse_bool(value, line, key);
        } else if (key == "use_conv_downsample") {
            cfg.use_conv_downsample = parse_bool(value, line, key);
        } else if (key == "use_dw_conv") {
            cfg.use_dw_conv = parse_bool(value, line, key);
        } else if (key == "dropout") {
            cfg.dropout = parse_real(value, line, key);
        } else {
            parse_fail(line, "unknown key '" + key + "'");
        }
        any_setting = true;
    }

    cfg.validate();
    return cfg;
}

ModelConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::string emit_config(const ModelConfig& cfg) {
    auto join = [](const auto& seq) {
        std::string s;
        for (std::size_t v : seq) {
            if (!s.empty()) s += ',';
            s += std::to_string(v);
        }
        return s;
    };
    std::string out;
    out += "variant = " + cfg.variant + "\n";
    out += "tokenizer_channels = " + join(cfg.tokenizer_channels) + "\n";
    out += "conv_stage_blocks = " + std::to_string(cfg.conv_stage_blocks) + "\n";
    out += "conv_stage_hidden = " + std::to_string(cfg.conv_stage_hidden) + "\n";
    out += "stage_depths = " + join(cfg.stage_depths) + "\n";
    out += "channels = " + join(cfg.channels) + "\n";
    out += "mlp_ratio = " + std::to_string(cfg.mlp_ratio) + "\n";
    out += "num_classes = " + std::to_string(cfg.num_classes) + "\n";
    out += std::string("use_conv_stage = ") + (cfg.use_conv_stage ? "true" : "false") + "\n";
    out += std::string("use_conv_downsample = ") +
           (cfg.use_conv_downsample ? "true" : "false") + "\n";
    out += std::string("use_dw_conv = ") + (cfg.use_dw_conv ? "true" : "false") + "\n";
    out += "dropout = " + real_string(cfg.dropout) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define CMLP_INSTANTIATE_PERSIST(T)                                                     \
    template void save_checkpoint<T>(const Model<T>&, const std::string&);              \
    template std::unique_ptr<Model<T>> load_checkpoint<T>(const std::string&,           \
                                                          const ModelConfig*);          \
    template void save_tensor<T>(const std::string&, const std::string&,                \
                                 const Tensor<T>&);                                     \
    template std::pair<std::string, Tensor<T>> load_tensor<T>(const std::string&);

CMLP_INSTANTIATE_PERSIST(float)
CMLP_INSTANTIATE_PERSIST(double)

#undef CMLP_INSTANTIATE_PERSIST

} // namespace persist
} // namespace cmlp
