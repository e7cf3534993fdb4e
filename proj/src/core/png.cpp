#include "ctxbias/core/png.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ctxbias/core/error.hpp"

namespace ctxbias::png {

namespace {

// ---------------------------------------------------------------------------
// checksums
// ---------------------------------------------------------------------------

const std::array<std::uint32_t, 256>& crc_table() {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t n = 0; n < 256; ++n) {
            std::uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[n] = c;
        }
        return t;
    }();
    return table;
}

std::uint32_t crc32(const std::uint8_t* data, size_t len, std::uint32_t crc = 0xffffffffu) {
    const auto& t = crc_table();
    for (size_t i = 0; i < len; ++i) crc = t[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

std::uint32_t adler32(const std::uint8_t* data, size_t len) {
    std::uint32_t a = 1, b = 0;
    for (size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

// ---------------------------------------------------------------------------
// inflate
// ---------------------------------------------------------------------------

struct BitReader {
    const std::uint8_t* data;
    size_t size;
    size_t pos = 0;   // byte position
    int bit = 0;      // bit position within current byte, LSB first

    int get_bit() {
        if (pos >= size) throw format_error("png: truncated deflate stream");
        const int b = (data[pos] >> bit) & 1;
        if (++bit == 8) {
            bit = 0;
            ++pos;
        }
        return b;
    }

    std::uint32_t get_bits(int n) {
        std::uint32_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(get_bit()) << i;
        return v;
    }

    void align_byte() {
        if (bit != 0) {
            bit = 0;
            ++pos;
        }
    }
};

// Canonical Huffman decoder over code lengths (RFC 1951 ordering).
struct Huffman {
    // count[len] and symbols sorted by (len, symbol).
    std::array<int, 16> count{};
    std::vector<int> symbols;

    explicit Huffman(const std::vector<int>& lengths) {
        for (int len : lengths)
            if (len > 0) ++count[static_cast<size_t>(len)];
        std::array<int, 16> offs{};
        int total = 0;
        for (int l = 1; l < 16; ++l) {
            offs[static_cast<size_t>(l)] = total;
            total += count[static_cast<size_t>(l)];
        }
        symbols.resize(static_cast<size_t>(total));
        for (size_t sym = 0; sym < lengths.size(); ++sym)
            if (lengths[sym] > 0) symbols[static_cast<size_t>(offs[static_cast<size_t>(lengths[sym])]++)] = static_cast<int>(sym);
    }

    int decode(BitReader& br) const {
        int code = 0, first = 0, index = 0;
        for (int len = 1; len < 16; ++len) {
            code |= br.get_bit();
            const int n = count[static_cast<size_t>(len)];
            if (code - first < n) return symbols[static_cast<size_t>(index + (code - first))];
            index += n;
            first = (first + n) << 1;
            code <<= 1;
        }
        throw format_error("png: invalid huffman code");
    }
};

const int kLenBase[29] = {3,  4,  5,  6,  7,  8,  9,  10, 11,  13,  15,  17,  19,  23, 27,
                          31, 35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258};
const int kLenExtra[29] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2,
                           2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
const int kDistBase[30] = {1,    2,    3,    4,    5,    7,     9,     13,    17,   25,
                           33,   49,   65,   97,   129,  193,   257,   385,   513,  769,
                           1025, 1537, 2049, 3073, 4097, 6145,  8193,  12289, 16385, 24577};
const int kDistExtra[30] = {0, 0, 0, 0, 1, 1, 2, 2,  3,  3,  4,  4,  5,  5,  6,
                            6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};

void inflate_block(BitReader& br, const Huffman& lit, const Huffman& dist,
                   std::vector<std::uint8_t>& out) {
    for (;;) {
        const int sym = lit.decode(br);
        if (sym < 256) {
            out.push_back(static_cast<std::uint8_t>(sym));
        } else if (sym == 256) {
            return;
        } else {
            const int li = sym - 257;
            if (li >= 29) throw format_error("png: bad length symbol");
            const int len = kLenBase[li] + static_cast<int>(br.get_bits(kLenExtra[li]));
            const int di = dist.decode(br);
            if (di >= 30) throw format_error("png: bad distance symbol");
            const size_t d = static_cast<size_t>(kDistBase[di]) + br.get_bits(kDistExtra[di]);
            if (d > out.size()) throw format_error("png: distance past start of output");
            size_t from = out.size() - d;
            for (int i = 0; i < len; ++i) out.push_back(out[from + static_cast<size_t>(i)]);
        }
    }
}

std::vector<std::uint8_t> inflate(const std::uint8_t* data, size_t size) {
    BitReader br{data, size};
    std::vector<std::uint8_t> out;
    for (;;) {
        const int bfinal = br.get_bit();
        const std::uint32_t btype = br.get_bits(2);
        if (btype == 0) {
            br.align_byte();
            if (br.pos + 4 > br.size) throw format_error("png: truncated stored block");
            const std::uint32_t len = data[br.pos] | (std::uint32_t(data[br.pos + 1]) << 8);
            const std::uint32_t nlen = data[br.pos + 2] | (std::uint32_t(data[br.pos + 3]) << 8);
            if ((len ^ 0xffffu) != nlen) throw format_error("png: stored block LEN/NLEN mismatch");
            br.pos += 4;
            if (br.pos + len > br.size) throw format_error("png: truncated stored block payload");
            out.insert(out.end(), data + br.pos, data + br.pos + len);
            br.pos += len;
        } else if (btype == 1) {
            std::vector<int> ll(288);
            for (int i = 0; i < 144; ++i) ll[static_cast<size_t>(i)] = 8;
            for (int i = 144; i < 256; ++i) ll[static_cast<size_t>(i)] = 9;
            for (int i = 256; i < 280; ++i) ll[static_cast<size_t>(i)] = 7;
            for (int i = 280; i < 288; ++i) ll[static_cast<size_t>(i)] = 8;
            std::vector<int> dl(30, 5);
            inflate_block(br, Huffman(ll), Huffman(dl), out);
        } else if (btype == 2) {
            const int hlit = static_cast<int>(br.get_bits(5)) + 257;
            const int hdist = static_cast<int>(br.get_bits(5)) + 1;
            const int hclen = static_cast<int>(br.get_bits(4)) + 4;
            static const int order[19] = {16, 17, 18, 0, 8,  7, 9,  6, 10, 5,
                                          11, 4,  12, 3, 13, 2, 14, 1, 15};
            std::vector<int> cl(19, 0);
            for (int i = 0; i < hclen; ++i) cl[static_cast<size_t>(order[i])] = static_cast<int>(br.get_bits(3));
            Huffman clh(cl);
            std::vector<int> lengths;
            lengths.reserve(static_cast<size_t>(hlit + hdist));
            while (static_cast<int>(lengths.size()) < hlit + hdist) {
                const int sym = clh.decode(br);
                if (sym < 16) {
                    lengths.push_back(sym);
                } else if (sym == 16) {
                    if (lengths.empty()) throw format_error("png: repeat with no previous length");
                    const int rep = 3 + static_cast<int>(br.get_bits(2));
                    for (int i = 0; i < rep; ++i) lengths.push_back(lengths.back());
                } else if (sym == 17) {
                    const int rep = 3 + static_cast<int>(br.get_bits(3));
                    for (int i = 0; i < rep; ++i) lengths.push_back(0);
                } else {
                    const int rep = 11 + static_cast<int>(br.get_bits(7));
                    for (int i = 0; i < rep; ++i) lengths.push_back(0);
                }
            }
            std::vector<int> ll(lengths.begin(), lengths.begin() + hlit);
            std::vector<int> dl(lengths.begin() + hlit, lengths.end());
            inflate_block(br, Huffman(ll), Huffman(dl), out);
        } else {
            throw format_error("png: reserved deflate block type");
        }
        if (bfinal) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// scanline filters
// ---------------------------------------------------------------------------

std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

void unfilter(std::vector<std::uint8_t>& raw, int width, int height, int bpp,
              std::vector<std::uint8_t>& pixels) {
    const size_t stride = static_cast<size_t>(width) * static_cast<size_t>(bpp);
    if (raw.size() != (stride + 1) * static_cast<size_t>(height))
        throw format_error("png: decompressed size mismatch");
    pixels.assign(stride * static_cast<size_t>(height), 0);
    for (int y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const std::uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        std::uint8_t* dst = pixels.data() + static_cast<size_t>(y) * stride;
        const std::uint8_t* up = y > 0 ? dst - stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(bpp) ? dst[i - static_cast<size_t>(bpp)] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= static_cast<size_t>(bpp)) ? up[i - static_cast<size_t>(bpp)] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw format_error("png: unknown filter type");
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
}

// ---------------------------------------------------------------------------
// writer
// ---------------------------------------------------------------------------

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    const size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const std::uint32_t crc =
        crc32(out.data() + type_at, 4 + payload.size()) ^ 0xffffffffu;
    put_u32_be(out, crc);
}

void write_png(const std::string& path, int width, int height, int channels,
               const std::uint8_t* pixels) {
    if (width <= 0 || height <= 0) throw format_error("png: empty image");
    const size_t stride = static_cast<size_t>(width) * static_cast<size_t>(channels);

    // raw = filter byte 0 + scanline, per row
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * static_cast<size_t>(height));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels + static_cast<size_t>(y) * stride,
                   pixels + (static_cast<size_t>(y) + 1) * stride);
    }

    // zlib stream with stored deflate blocks
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        const size_t n = std::min<size_t>(65535, raw.size() - off);
        const bool final = (off + n == raw.size());
        z.push_back(final ? 1 : 0);
        z.push_back(static_cast<std::uint8_t>(n & 0xff));
        z.push_back(static_cast<std::uint8_t>(n >> 8));
        z.push_back(static_cast<std::uint8_t>(~n & 0xff));
        z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(off),
                 raw.begin() + static_cast<std::ptrdiff_t>(off + n));
        off += n;
        if (final) break;
    }
    put_u32_be(z, adler32(raw.data(), raw.size()));

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                      // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);                  // color type
    ihdr.push_back(0);                                      // compression
    ihdr.push_back(0);                                      // filter
    ihdr.push_back(0);                                      // interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", z);
    append_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw load_error("png: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw load_error("png: write failed: " + path);
}

}  // namespace

void write_gray8(const std::string& path, int width, int height, const std::uint8_t* pixels) {
    write_png(path, width, height, 1, pixels);
}

void write_rgb8(const std::string& path, int width, int height, const std::uint8_t* pixels) {
    write_png(path, width, height, 3, pixels);
}

ImageU8 read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw load_error("png: cannot open: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw format_error("png: bad signature: " + path);

    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> idat;
    size_t pos = 8;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = get_u32_be(buf.data() + pos);
        if (pos + 12 + len > buf.size()) throw format_error("png: truncated chunk: " + path);
        const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
        const std::uint8_t* payload = buf.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw format_error("png: bad IHDR: " + path);
            width = static_cast<int>(get_u32_be(payload));
            height = static_cast<int>(get_u32_be(payload + 4));
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8) throw format_error("png: only 8-bit supported: " + path);
            if (color == 0) channels = 1;
            else if (color == 2) channels = 3;
            else throw format_error("png: only gray/RGB supported: " + path);
            if (interlace != 0) throw format_error("png: interlace unsupported: " + path);
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || idat.size() < 2)
        throw format_error("png: missing chunks: " + path);

    // zlib wrapper: 2-byte header, trailing adler
    if ((idat[0] & 0x0f) != 8) throw format_error("png: not deflate: " + path);
    std::vector<std::uint8_t> raw = inflate(idat.data() + 2, idat.size() - 2);

    ImageU8 img(width, height, channels);
    unfilter(raw, width, height, channels, img.data);
    return img;
}

void write_mask(const std::string& path, const Mask& mask) {
    std::vector<std::uint8_t> px(mask.bits.size());
    for (size_t i = 0; i < px.size(); ++i) px[i] = mask.bits[i] ? 255 : 0;
    write_gray8(path, mask.width, mask.height, px.data());
}

Mask read_mask(const std::string& path) {
    ImageU8 img = read(path);
    if (img.channels != 1) throw format_error("png: mask must be grayscale: " + path);
    Mask m(img.width, img.height);
    for (size_t i = 0; i < img.data.size(); ++i) m.bits[i] = img.data[i] ? 1 : 0;
    return m;
}

void write_semantic(const std::string& path, const SemanticMap& map) {
    write_gray8(path, map.width, map.height, map.labels.data());
}

SemanticMap read_semantic(const std::string& path, const std::string& image_id) {
    ImageU8 img = read(path);
    if (img.channels != 1) throw format_error("png: semantic map must be grayscale: " + path);
    SemanticMap m;
    m.image_id = image_id;
    m.width = img.width;
    m.height = img.height;
    m.labels = std::move(img.data);
    return m;
}

}  // namespace ctxbias::png
