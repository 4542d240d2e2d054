#include "cmlp/image_io.hpp"

#include <cmath>
#include <fstream>
#include <vector>

#include "cmlp/error.hpp"

namespace cmlp {
namespace image {

namespace {

struct ByteReader {
    std::vector<unsigned char> bytes;
    std::size_t off = 0;
    std::string path;

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError("image '" + path + "': " + what + " at byte offset " +
                        std::to_string(off));
    }

    int peek() const { return off < bytes.size() ? bytes[off] : -1; }
    int get() { return off < bytes.size() ? bytes[off++] : -1; }

    // Netpbm token separators: blanks, newlines, and '#' comments to EOL.
    void skip_space() {
        while (true) {
            int c = peek();
            if (c == '#') {
                while (c != -1 && c != '\n') c = get();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
            } else {
                return;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space();
        if (peek() < '0' || peek() > '9') fail(std::string("expected ") + what);
        std::size_t v = 0;
        while (peek() >= '0' && peek() <= '9') v = v * 10 + std::size_t(get() - '0');
        return v;
    }
};

} // namespace

template <typename T>
Tensor<T> read_image(const std::string& path) {
    ByteReader r;
    r.path = path;
    {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("image '" + path + "': cannot open");
        r.bytes.assign((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
    }

    if (r.bytes.size() < 2 || r.bytes[0] != 'P' || (r.bytes[1] != '5' && r.bytes[1] != '6')) {
        throw DataError("image '" + path + "': not a binary PGM (P5) or PPM (P6) file");
    }
    const bool color = r.bytes[1] == '6';
    r.off = 2;

    const std::size_t w = r.number("width");
    const std::size_t h = r.number("height");
    const std::size_t maxval = r.number("maxval");
    if (w == 0 || h == 0) r.fail("zero image extent");
    if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (want 255)");

    // Exactly one whitespace byte separates the header from the raster.
    const int sep = r.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') r.fail("missing raster separator");

    const std::size_t pixel_bytes = w * h * (color ? 3 : 1);
    if (r.bytes.size() - r.off < pixel_bytes) {
        r.fail("raster needs " + std::to_string(pixel_bytes) + " bytes, " +
               std::to_string(r.bytes.size() - r.off) + " remain");
    }

    Tensor<T> out({1, 3, h, w});
    const unsigned char* px = r.bytes.data() + r.off;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (color) {
                const unsigned char* p = px + 3 * (y * w + x);
                out(0, 0, y, x) = T(p[0]) / T(255);
                out(0, 1, y, x) = T(p[1]) / T(255);
                out(0, 2, y, x) = T(p[2]) / T(255);
            } else {
                const T v = T(px[y * w + x]) / T(255);
                out(0, 0, y, x) = v;
                out(0, 1, y, x) = v;
                out(0, 2, y, x) = v;
            }
        }
    }
    return out;
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map) {
    if (map.rank() != 2) {
        throw ShapeError("pgm writer: expected a rank-2 map, got " + map.shape_string());
    }
    const std::size_t h = map.extent(0), w = map.extent(1);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("image '" + path + "': cannot open for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            T v = map(y, x);
            if (v < T(0)) v = T(0);
            if (v > T(1)) v = T(1);
            row[x] = static_cast<unsigned char>(std::lround(double(v) * 255.0));
        }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(w));
    }
    if (!f) throw DataError("image '" + path + "': write failure");
}

template Tensor<float> read_image<float>(const std::string&);
template Tensor<double> read_image<double>(const std::string&);
template void write_pgm<float>(const std::string&, const Tensor<float>&);
template void write_pgm<double>(const std::string&, const Tensor<double>&);

} // namespace image
} // namespace cmlp
