#pragma once

// Versioned key-value checkpoint files. Layout (all integers little-endian):
//
//   magic    8 bytes  "QMWFCKPT"
//   version  u32      kCheckpointVersion
//   count    u32      number of entries
//   entries  count x { u16 key_len, key bytes, u8 type, u64 n, payload }
//   crc32    u32      zlib CRC-32 of every preceding byte
//
// Payload by type: 1 int64 (n = 1), 2 n float64, 3 string of n bytes,
// 4 n strings each {u32 len, bytes}, 5 n int64. Entries are written in key
// order. README.md lists the keys a ranker uses.

#include "qmwf/embedding.hpp"
#include "qmwf/error.hpp"
#include "qmwf/network.hpp"
#include "qmwf/ranker.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace qmwf {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'Q', 'M', 'W', 'F', 'C', 'K', 'P', 'T'};

class KeyValueFile {
public:
    using Value = std::variant<std::int64_t, std::vector<double>, std::string,
                               std::vector<std::string>, std::vector<std::int64_t>>;

    void set(const std::string& key, Value v) { entries_[key] = std::move(v); }

    [[nodiscard]] bool contains(const std::string& key) const { return entries_.count(key) != 0; }

    template <class T>
    [[nodiscard]] const T& get(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end()) throw FormatError("checkpoint is missing key '" + key + "'");
        const T* v = std::get_if<T>(&it->second);
        if (v == nullptr) throw FormatError("checkpoint key '" + key + "' has the wrong type");
        return *v;
    }

    [[nodiscard]] std::int64_t get_int(const std::string& key) const { return get<std::int64_t>(key); }

    [[nodiscard]] std::vector<unsigned char> serialize() const {
        std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
        put_u32(out, kCheckpointVersion);
        put_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [key, value] : entries_) {
            put_uint(out, key.size(), 2);
            out.insert(out.end(), key.begin(), key.end());
            std::visit([&](const auto& v) { put_value(out, v); }, value);
        }
        const auto crc = static_cast<std::uint32_t>(
            crc32(0L, out.data(), static_cast<uInt>(out.size())));
        put_u32(out, crc);
        return out;
    }

    static KeyValueFile deserialize(const std::vector<unsigned char>& bytes) {
        if (bytes.size() < 20 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic),
                                             bytes.begin())) {
            throw FormatError("not a QMWF checkpoint");
        }
        const std::size_t body = bytes.size() - 4;
        const auto stored = static_cast<std::uint32_t>(read_uint(bytes, body, 4));
        const auto actual = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
        if (stored != actual) throw FormatError("checkpoint checksum mismatch");
        std::size_t pos = 8;
        const auto version = static_cast<std::uint32_t>(take(bytes, pos, 4, body));
        if (version > kCheckpointVersion) {
            throw FormatError("checkpoint version " + std::to_string(version) + " is newer than supported");
        }
        const auto count = take(bytes, pos, 4, body);
        KeyValueFile kv;
        for (std::uint64_t e = 0; e < count; ++e) {
            const auto key_len = take(bytes, pos, 2, body);
            const std::string key = take_bytes(bytes, pos, key_len, body);
            const auto type = take(bytes, pos, 1, body);
            const auto n = take(bytes, pos, 8, body);
            switch (type) {
                case 1:
                    kv.set(key, static_cast<std::int64_t>(take(bytes, pos, 8, body)));
                    break;
                case 2: {
                    check_room(pos, n, 8, body);
                    std::vector<double> v(n);
                    for (auto& x : v) x = std::bit_cast<double>(take(bytes, pos, 8, body));
                    kv.set(key, std::move(v));
                    break;
                }
                case 3:
                    kv.set(key, take_bytes(bytes, pos, n, body));
                    break;
                case 4: {
                    check_room(pos, n, 4, body);
                    std::vector<std::string> v(n);
                    for (auto& s : v) s = take_bytes(bytes, pos, take(bytes, pos, 4, body), body);
                    kv.set(key, std::move(v));
                    break;
                }
                case 5: {
                    check_room(pos, n, 8, body);
                    std::vector<std::int64_t> v(n);
                    for (auto& x : v) x = static_cast<std::int64_t>(take(bytes, pos, 8, body));
                    kv.set(key, std::move(v));
                    break;
                }
                default:
                    throw FormatError("unknown checkpoint entry type " + std::to_string(type));
            }
        }
        if (pos != body) throw FormatError("trailing bytes in checkpoint");
        return kv;
    }

    void save(const std::string& path) const {
        const auto bytes = serialize();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write checkpoint '" + path + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw LoadError("failed writing checkpoint '" + path + "'");
    }

    static KeyValueFile load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }

private:
    static void put_uint(std::vector<unsigned char>& out, std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
    static void put_u32(std::vector<unsigned char>& out, std::uint32_t v) { put_uint(out, v, 4); }

    static void put_header(std::vector<unsigned char>& out, int type, std::uint64_t n) {
        put_uint(out, static_cast<std::uint64_t>(type), 1);
        put_uint(out, n, 8);
    }
    static void put_value(std::vector<unsigned char>& out, std::int64_t v) {
        put_header(out, 1, 1);
        put_uint(out, static_cast<std::uint64_t>(v), 8);
    }
    static void put_value(std::vector<unsigned char>& out, const std::vector<double>& v) {
        put_header(out, 2, v.size());
        for (double x : v) put_uint(out, std::bit_cast<std::uint64_t>(x), 8);
    }
    static void put_value(std::vector<unsigned char>& out, const std::string& v) {
        put_header(out, 3, v.size());
        out.insert(out.end(), v.begin(), v.end());
    }
    static void put_value(std::vector<unsigned char>& out, const std::vector<std::string>& v) {
        put_header(out, 4, v.size());
        for (const auto& s : v) {
            put_uint(out, s.size(), 4);
            out.insert(out.end(), s.begin(), s.end());
        }
    }
    static void put_value(std::vector<unsigned char>& out, const std::vector<std::int64_t>& v) {
        put_header(out, 5, v.size());
        for (auto x : v) put_uint(out, static_cast<std::uint64_t>(x), 8);
    }

    static std::uint64_t read_uint(const std::vector<unsigned char>& b, std::size_t pos, int width) {
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
        return v;
    }
    static void check_room(std::size_t pos, std::uint64_t n, std::uint64_t width, std::size_t end) {
        if (n > (end - pos) / width) throw FormatError("truncated checkpoint");
    }
    static std::uint64_t take(const std::vector<unsigned char>& b, std::size_t& pos, int width, std::size_t end) {
        check_room(pos, 1, static_cast<std::uint64_t>(width), end);
        const auto v = read_uint(b, pos, width);
        pos += static_cast<std::size_t>(width);
        return v;
    }
    static std::string take_bytes(const std::vector<unsigned char>& b, std::size_t& pos, std::uint64_t n,
                                  std::size_t end) {
        check_room(pos, n, 1, end);
        std::string s(b.begin() + static_cast<std::ptrdiff_t>(pos),
                      b.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return s;
    }

    std::map<std::string, Value> entries_;
};

namespace detail {

inline std::vector<std::string> encode_chars_list(const std::vector<char32_t>& chars) {
    std::vector<std::string> out;
    for (char32_t c : chars) out.push_back(utf8_encode(c));
    return out;
}

inline std::size_t as_size(std::int64_t v, const char* key) {
    if (v < 0) throw FormatError(std::string("negative value for checkpoint key '") + key + "'");
    return static_cast<std::size_t>(v);
}

}  // namespace detail

inline KeyValueFile ranker_to_kv(const Ranker& r) {
    KeyValueFile kv;
    const auto& c = r.model.config();
    kv.set("format", std::string("qmwf-ranker"));
    kv.set("model.embed_dim", static_cast<std::int64_t>(c.embed_dim));
    kv.set("model.channels", static_cast<std::int64_t>(c.channels));
    kv.set("model.patch_size", static_cast<std::int64_t>(c.patch_size));
    kv.set("model.shared_kernels", static_cast<std::int64_t>(c.shared_kernels));
    kv.set("model.log_domain", static_cast<std::int64_t>(c.log_domain));
    kv.set("model.epsilon", std::vector<double>{c.epsilon});
    kv.set("model.max_positions", static_cast<std::int64_t>(c.max_positions));
    kv.set("model.kernels", std::vector<double>(r.model.kernels().begin(), r.model.kernels().end()));
    kv.set("model.out_weights", std::vector<double>(r.model.out_weights().begin(), r.model.out_weights().end()));
    if (const auto* w = std::get_if<WordEncoder>(&r.encoder)) {
        kv.set("encoder.kind", std::string("word"));
        kv.set("encoder.dim", static_cast<std::int64_t>(w->table.dim));
        kv.set("encoder.max_tokens", static_cast<std::int64_t>(w->max_tokens));
        kv.set("encoder.trainable", static_cast<std::int64_t>(w->table.trainable));
        kv.set("encoder.vocab", w->table.vocab.tokens());
        kv.set("encoder.matrix", w->table.matrix);
    } else {
        const auto& ch = std::get<CharEncoder>(r.encoder);
        kv.set("encoder.kind", std::string("char"));
        kv.set("encoder.dim", static_cast<std::int64_t>(ch.dim));
        kv.set("encoder.trainable", static_cast<std::int64_t>(ch.trainable));
        kv.set("encoder.charset", detail::encode_chars_list(ch.input.charset.chars()));
        kv.set("encoder.char_dim", static_cast<std::int64_t>(ch.input.char_dim));
        kv.set("encoder.window", static_cast<std::int64_t>(ch.input.window));
        kv.set("encoder.pool_stride", static_cast<std::int64_t>(ch.input.pool_stride));
        kv.set("encoder.max_rows", static_cast<std::int64_t>(ch.input.max_rows));
        kv.set("encoder.char_table", ch.input.char_table);
        kv.set("encoder.kernels", ch.kernels);
    }
    return kv;
}

inline Ranker ranker_from_kv(const KeyValueFile& kv) {
    if (kv.get<std::string>("format") != "qmwf-ranker") throw FormatError("checkpoint is not a ranker");
    QmwfConfig c;
    c.embed_dim = detail::as_size(kv.get_int("model.embed_dim"), "model.embed_dim");
    c.channels = detail::as_size(kv.get_int("model.channels"), "model.channels");
    c.patch_size = detail::as_size(kv.get_int("model.patch_size"), "model.patch_size");
    c.shared_kernels = kv.get_int("model.shared_kernels") != 0;
    c.log_domain = kv.get_int("model.log_domain") != 0;
    const auto& eps = kv.get<std::vector<double>>("model.epsilon");
    if (eps.size() != 1) throw FormatError("model.epsilon must hold one value");
    c.epsilon = eps[0];
    c.max_positions = detail::as_size(kv.get_int("model.max_positions"), "model.max_positions");
    Ranker r;
    r.model = QmwfModel(c, kv.get<std::vector<double>>("model.kernels"),
                        kv.get<std::vector<double>>("model.out_weights"));
    const auto& kind = kv.get<std::string>("encoder.kind");
    if (kind == "word") {
        WordEncoder w;
        w.table.dim = detail::as_size(kv.get_int("encoder.dim"), "encoder.dim");
        w.max_tokens = detail::as_size(kv.get_int("encoder.max_tokens"), "encoder.max_tokens");
        w.table.trainable = kv.get_int("encoder.trainable") != 0;
        const auto& vocab = kv.get<std::vector<std::string>>("encoder.vocab");
        if (vocab.size() < 2) throw FormatError("vocabulary lacks the reserved tokens");
        for (std::size_t i = 2; i < vocab.size(); ++i) {
            if (w.table.vocab.add(vocab[i]) != i) throw FormatError("vocabulary has duplicate tokens");
        }
        w.table.matrix = kv.get<std::vector<double>>("encoder.matrix");
        if (w.table.matrix.size() != w.table.vocab.size() * w.table.dim) {
            throw FormatError("embedding matrix does not match vocabulary");
        }
        r.encoder = std::move(w);
    } else if (kind == "char") {
        CharEncoder ch;
        ch.dim = detail::as_size(kv.get_int("encoder.dim"), "encoder.dim");
        ch.trainable = kv.get_int("encoder.trainable") != 0;
        const auto& chars = kv.get<std::vector<std::string>>("encoder.charset");
        if (chars.size() < 3) throw FormatError("char set lacks the reserved characters");
        for (std::size_t i = 3; i < chars.size(); ++i) {
            const auto cps = utf8_decode(chars[i]);
            if (cps.size() != 1 || ch.input.charset.add(cps[0]) != i) {
                throw FormatError("char set entry " + std::to_string(i) + " is invalid");
            }
        }
        ch.input.char_dim = detail::as_size(kv.get_int("encoder.char_dim"), "encoder.char_dim");
        ch.input.window = detail::as_size(kv.get_int("encoder.window"), "encoder.window");
        ch.input.pool_stride = detail::as_size(kv.get_int("encoder.pool_stride"), "encoder.pool_stride");
        ch.input.max_rows = detail::as_size(kv.get_int("encoder.max_rows"), "encoder.max_rows");
        ch.input.char_table = kv.get<std::vector<double>>("encoder.char_table");
        ch.kernels = kv.get<std::vector<double>>("encoder.kernels");
        ch.input.validate();
        if (ch.kernels.size() != ch.dim * ch.input.window_size()) {
            throw FormatError("char kernels do not match encoder shape");
        }
        r.encoder = std::move(ch);
    } else {
        throw FormatError("unknown encoder kind '" + kind + "'");
    }
    r.validate();
    return r;
}

inline void save_checkpoint(const Ranker& r, const std::string& path) { ranker_to_kv(r).save(path); }

inline Ranker load_checkpoint(const std::string& path) { return ranker_from_kv(KeyValueFile::load(path)); }

}  // namespace qmwf
