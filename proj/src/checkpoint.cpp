#include "wgqa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "wgqa/errors.hpp"
#include "wgqa/rng.hpp"

namespace wgqa {

namespace {

constexpr char kMagic[8] = {'W', 'G', 'Q', 'A', 'C', 'K', 'P', 'T'};
constexpr std::size_t kPrefixBytes = 20;  // magic + u32 version + u64 header length
constexpr unsigned __int128 kMaxPayloadElements = static_cast<unsigned __int128>(1) << 34;

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t read_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

bool plain_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return false;
    }
    return true;
}

std::size_t parse_uint_token(const std::string& tok, const std::string& context) {
    unsigned long long v = 0;
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || tok.empty()) {
        throw FormatError(FormatFault::Malformed,
                          "checkpoint header: '" + tok + "' is not an unsigned integer in " +
                              context);
    }
    return static_cast<std::size_t>(v);
}

// One tensor name of the model naming convention, decomposed. `recognized`
// is false for names outside the convention, which carry no shape contract.
struct ParsedName {
    bool recognized = false;
    enum class Site { Embedding, Pos, OutProj, Block } site = Site::Block;
    bool encoder = false;
    std::size_t layer = 0;
    std::string kind;  // self | cross | ffn
    std::string leaf;  // wq | wk | wv | wo | agg_k | agg_v | w1 | w2
};

ParsedName parse_name(const std::string& name) {
    ParsedName p;
    if (name == "embedding") {
        p.recognized = true;
        p.site = ParsedName::Site::Embedding;
        return p;
    }
    if (name == "pos") {
        p.recognized = true;
        p.site = ParsedName::Site::Pos;
        return p;
    }
    if (name == "out_proj") {
        p.recognized = true;
        p.site = ParsedName::Site::OutProj;
        return p;
    }
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = name.find('.', start);
        if (dot == std::string::npos) {
            parts.push_back(name.substr(start));
            break;
        }
        parts.push_back(name.substr(start, dot - start));
        start = dot + 1;
    }
    if (parts.size() != 4) return p;
    if (parts[0] != "encoder" && parts[0] != "decoder") return p;
    if (parts[1].empty() ||
        !std::all_of(parts[1].begin(), parts[1].end(), [](char c) { return c >= '0' && c <= '9'; }))
        return p;
    static const std::set<std::string> kKinds = {"self", "cross", "ffn"};
    static const std::set<std::string> kLeaves = {"wq", "wk", "wv",    "wo",
                                                  "w1", "w2", "agg_k", "agg_v"};
    if (kKinds.count(parts[2]) == 0 || kLeaves.count(parts[3]) == 0) return p;
    p.recognized = true;
    p.site = ParsedName::Site::Block;
    p.encoder = parts[0] == "encoder";
    p.layer = parse_uint_token(parts[1], "tensor name '" + name + "'");
    p.kind = parts[2];
    p.leaf = parts[3];
    return p;
}

// Geometry a checkpoint's metadata pins down, decoded once.
struct Geometry {
    std::size_t d = 0, h = 0, g = 0, layers = 0, vocab = 0, max_seq = 0;
    Weighting weighting = Weighting::None;
    InitScheme init = InitScheme::MeanEquivalent;
    std::size_t head_dim() const { return d / h; }
};

Geometry decode_geometry(const Checkpoint& ckpt) {
    Geometry geo;
    geo.d = ckpt.metadata_uint("d_model");
    geo.h = ckpt.metadata_uint("n_heads");
    geo.g = ckpt.metadata_uint("n_kv_groups");
    geo.layers = ckpt.metadata_uint("n_layers");
    geo.vocab = ckpt.metadata_uint("vocab_size");
    geo.max_seq = ckpt.metadata_uint("max_seq");
    if (geo.d == 0 || geo.h == 0 || geo.g == 0 || geo.layers == 0 || geo.vocab == 0 ||
        geo.max_seq == 0) {
        throw FormatError(FormatFault::Inconsistent, "checkpoint geometry fields must be >= 1");
    }
    if (geo.d % geo.h != 0 || geo.g > geo.h || geo.h % geo.g != 0) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint geometry d_model=" + std::to_string(geo.d) +
                              " n_heads=" + std::to_string(geo.h) +
                              " n_kv_groups=" + std::to_string(geo.g) + " is not divisible");
    }
    const std::string& variant = ckpt.metadata_at("variant");
    try {
        const VariantSpec spec = variant_spec(variant);
        geo.weighting = spec.weighting;
        geo.init = init_from_string(ckpt.metadata_at("init"));
    } catch (const ConfigError& e) {
        throw FormatError(FormatFault::Inconsistent, std::string("checkpoint metadata: ") +
                                                         e.what());
    }
    if (variant != variant_name(geo.weighting, geo.g, geo.h)) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint variant '" + variant + "' does not match n_kv_groups=" +
                              std::to_string(geo.g) + " at n_heads=" + std::to_string(geo.h) +
                              " (canonical name: " +
                              variant_name(geo.weighting, geo.g, geo.h) + ")");
    }
    return geo;
}

void require_shape(const std::string& name, const Tensor& t,
                   const std::vector<std::size_t>& want) {
    if (t.shape() != want) {
        std::string want_str = "[";
        for (std::size_t i = 0; i < want.size(); ++i) {
            if (i) want_str += "x";
            want_str += std::to_string(want[i]);
        }
        want_str += "]";
        throw FormatError(FormatFault::Inconsistent, "checkpoint tensor '" + name + "' has shape " +
                                                         t.shape_str() + ", geometry requires " +
                                                         want_str);
    }
}

std::vector<std::size_t> agg_shape(const Geometry& geo) {
    switch (geo.weighting) {
        case Weighting::Scalar: return {geo.h};
        case Weighting::Row: return {geo.h, geo.d};
        case Weighting::Col: return {geo.h, geo.head_dim()};
        case Weighting::None: break;
    }
    throw FormatError(FormatFault::Inconsistent,
                      "aggregation tensors are invalid in a weighting-none checkpoint");
}

void check_recognized_tensor(const std::string& name, const ParsedName& p, const Tensor& t,
                             const Geometry& geo) {
    switch (p.site) {
        case ParsedName::Site::Embedding: require_shape(name, t, {geo.vocab, geo.d}); return;
        case ParsedName::Site::Pos: require_shape(name, t, {geo.max_seq, geo.d}); return;
        case ParsedName::Site::OutProj: require_shape(name, t, {geo.d, geo.vocab}); return;
        case ParsedName::Site::Block: break;
    }
    if (p.encoder) {
        if (p.layer != 0) {
            throw FormatError(FormatFault::Inconsistent,
                              "checkpoint tensor '" + name + "': the encoder has one layer");
        }
        if (p.kind == "cross" || p.leaf == "agg_k" || p.leaf == "agg_v") {
            throw FormatError(FormatFault::Inconsistent,
                              "checkpoint tensor '" + name +
                                  "': encoder blocks are plain self-attention");
        }
    } else if (p.layer >= geo.layers) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint tensor '" + name + "': layer index exceeds n_layers=" +
                              std::to_string(geo.layers));
    }
    if (p.kind == "ffn") {
        if (p.leaf == "w1") {
            require_shape(name, t, {geo.d, 4 * geo.d});
            return;
        }
        if (p.leaf == "w2") {
            require_shape(name, t, {4 * geo.d, geo.d});
            return;
        }
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint tensor '" + name + "': feed-forward blocks hold w1/w2 only");
    }
    // Attention block. Encoder blocks are ungrouped; decoder grouping follows
    // the variant: weighted keeps full width, plain narrows to G groups.
    const std::size_t kv_cols =
        p.encoder ? geo.d
                  : (geo.weighting == Weighting::None ? geo.g * geo.head_dim() : geo.d);
    if (p.leaf == "wq" || p.leaf == "wo") {
        require_shape(name, t, {geo.d, geo.d});
    } else if (p.leaf == "wk" || p.leaf == "wv") {
        require_shape(name, t, {geo.d, kv_cols});
    } else if (p.leaf == "agg_k" || p.leaf == "agg_v") {
        if (geo.weighting == Weighting::None) {
            throw FormatError(FormatFault::Inconsistent,
                              "checkpoint tensor '" + name +
                                  "' is an aggregation weight, but the variant has none");
        }
        require_shape(name, t, agg_shape(geo));
    } else {
        throw FormatError(FormatFault::Inconsistent, "checkpoint tensor '" + name +
                                                         "': attention blocks hold "
                                                         "wq/wk/wv/wo/agg_k/agg_v");
    }
}

std::vector<std::string> layout_names(std::size_t n_layers, bool weighted) {
    std::vector<std::string> names;
    names.emplace_back("embedding");
    names.emplace_back("pos");
    for (const char* leaf : {"wq", "wk", "wv", "wo"}) {
        names.emplace_back(std::string("encoder.0.self.") + leaf);
    }
    names.emplace_back("encoder.0.ffn.w1");
    names.emplace_back("encoder.0.ffn.w2");
    for (std::size_t l = 0; l < n_layers; ++l) {
        for (const char* kind : {"self", "cross"}) {
            const std::string base = "decoder." + std::to_string(l) + "." + kind + ".";
            for (const char* leaf : {"wq", "wk", "wv", "wo"}) {
                names.emplace_back(base + leaf);
            }
            if (weighted) {
                names.emplace_back(base + "agg_k");
                names.emplace_back(base + "agg_v");
            }
        }
        const std::string ffn = "decoder." + std::to_string(l) + ".ffn.";
        names.emplace_back(ffn + "w1");
        names.emplace_back(ffn + "w2");
    }
    names.emplace_back("out_proj");
    return names;
}

}  // namespace

const std::vector<std::string>& Checkpoint::required_metadata() {
    static const std::vector<std::string> kKeys = {
        "format_version", "d_model", "n_heads",  "n_kv_groups", "n_layers",
        "vocab_size",     "max_seq", "variant",  "init"};
    return kKeys;
}

void Checkpoint::set_metadata(const std::string& key, const std::string& value) {
    metadata_[key] = value;
}

const std::string& Checkpoint::metadata_at(const std::string& key) const {
    auto it = metadata_.find(key);
    if (it == metadata_.end()) {
        throw FormatError(FormatFault::Inconsistent, "checkpoint metadata lacks '" + key + "'");
    }
    return it->second;
}

bool Checkpoint::has_metadata(const std::string& key) const { return metadata_.count(key) != 0; }

std::size_t Checkpoint::metadata_uint(const std::string& key) const {
    const std::string& raw = metadata_at(key);
    unsigned long long v = 0;
    auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc() || ptr != raw.data() + raw.size() || raw.empty()) {
        throw FormatError(FormatFault::Inconsistent, "checkpoint metadata '" + key + "' = '" +
                                                         raw + "' is not an unsigned integer");
    }
    return static_cast<std::size_t>(v);
}

void Checkpoint::add_tensor(const std::string& name, Tensor t) {
    if (index_.count(name) != 0) {
        throw FormatError(FormatFault::Malformed, "duplicate checkpoint tensor '" + name + "'");
    }
    index_[name] = tensors_.size();
    tensors_.emplace_back(name, std::move(t));
}

bool Checkpoint::has_tensor(const std::string& name) const { return index_.count(name) != 0; }

const Tensor& Checkpoint::tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw FormatError(FormatFault::Inconsistent, "checkpoint has no tensor '" + name + "'");
    }
    return tensors_[it->second].second;
}

void Checkpoint::validate() const {
    for (const std::string& key : required_metadata()) {
        if (!has_metadata(key)) {
            throw FormatError(FormatFault::Inconsistent,
                              "checkpoint metadata lacks required key '" + key + "'");
        }
    }
    if (metadata_uint("format_version") != kFormatVersion) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint metadata format_version must be " +
                              std::to_string(kFormatVersion));
    }
    const Geometry geo = decode_geometry(*this);
    for (const auto& [name, t] : tensors_) {
        const ParsedName p = parse_name(name);
        if (p.recognized) {
            check_recognized_tensor(name, p, t, geo);
        }
    }
}

bool Checkpoint::operator==(const Checkpoint& other) const {
    if (metadata_ != other.metadata_) return false;
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].first != other.tensors_[i].first) return false;
        const Tensor& a = tensors_[i].second;
        const Tensor& b = other.tensors_[i].second;
        if (a.shape() != b.shape()) return false;
        if (std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    ckpt.validate();
    std::ostringstream header;
    for (const auto& [key, value] : ckpt.metadata()) {
        if (!plain_token(key)) {
            throw FormatError(FormatFault::Malformed,
                              "checkpoint metadata key '" + key + "' must be a single token");
        }
        if (value.empty() || value.find('\n') != std::string::npos ||
            value.find('\r') != std::string::npos) {
            throw FormatError(FormatFault::Malformed, "checkpoint metadata value for '" + key +
                                                          "' must be non-empty single-line text");
        }
        header << "meta " << key << " " << value << "\n";
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors()) {
        if (!plain_token(name)) {
            throw FormatError(FormatFault::Malformed,
                              "checkpoint tensor name '" + name + "' must be a single token");
        }
        header << "tensor " << name << " " << offset << " " << t.rank();
        for (std::size_t dim : t.shape()) header << " " << dim;
        header << "\n";
        offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
    }
    const std::string text = header.str();

    std::vector<std::uint8_t> bytes;
    bytes.reserve(kPrefixBytes + text.size() + 8 + static_cast<std::size_t>(offset));
    for (char m : kMagic) bytes.push_back(static_cast<std::uint8_t>(m));
    append_u32(bytes, Checkpoint::kFormatVersion);
    append_u64(bytes, static_cast<std::uint64_t>(text.size()));
    bytes.insert(bytes.end(), text.begin(), text.end());
    while (bytes.size() % 8 != 0) bytes.push_back(0);
    for (const auto& [name, t] : ckpt.tensors()) {
        (void)name;
        for (double v : t.data()) {
            append_u64(bytes, std::bit_cast<std::uint64_t>(v));
        }
    }
    return bytes;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kPrefixBytes) {
        throw FormatError(FormatFault::Truncated,
                          "checkpoint is " + std::to_string(bytes.size()) +
                              " bytes, shorter than the fixed 20-byte prefix");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError(FormatFault::BadMagic, "checkpoint magic mismatch (want WGQACKPT)");
    }
    const std::uint32_t version = read_u32(bytes.data() + 8);
    if (version != Checkpoint::kFormatVersion) {
        throw FormatError(FormatFault::BadVersion, "unsupported checkpoint format version " +
                                                       std::to_string(version));
    }
    const std::uint64_t header_len = read_u64(bytes.data() + 12);
    if (header_len > bytes.size() - kPrefixBytes) {
        throw FormatError(FormatFault::Truncated,
                          "checkpoint header claims " + std::to_string(header_len) +
                              " bytes but only " + std::to_string(bytes.size() - kPrefixBytes) +
                              " follow the prefix");
    }
    const std::string text(reinterpret_cast<const char*>(bytes.data()) + kPrefixBytes,
                           static_cast<std::size_t>(header_len));
    if (!text.empty() && text.back() != '\n') {
        throw FormatError(FormatFault::Malformed,
                          "checkpoint header text must end with a newline");
    }

    Checkpoint ckpt;
    struct PendingTensor {
        std::string name;
        std::uint64_t offset;
        std::vector<std::size_t> shape;
        std::size_t elements;
    };
    std::vector<PendingTensor> pending;
    unsigned __int128 total_elements = 0;
    std::uint64_t expect_offset = 0;

    std::size_t line_start = 0;
    while (line_start < text.size()) {
        const std::size_t line_end = text.find('\n', line_start);
        const std::string line = text.substr(line_start, line_end - line_start);
        line_start = line_end + 1;
        std::istringstream is(line);
        std::string kind;
        is >> kind;
        if (kind == "meta") {
            std::string key;
            is >> key;
            if (key.empty()) {
                throw FormatError(FormatFault::Malformed,
                                  "checkpoint header meta line lacks a key: '" + line + "'");
            }
            const std::string prefix = "meta " + key + " ";
            if (line.size() <= prefix.size() || line.compare(0, prefix.size(), prefix) != 0) {
                throw FormatError(FormatFault::Malformed,
                                  "checkpoint header meta line lacks a value: '" + line + "'");
            }
            if (ckpt.has_metadata(key)) {
                throw FormatError(FormatFault::Malformed,
                                  "duplicate checkpoint metadata key '" + key + "'");
            }
            ckpt.set_metadata(key, line.substr(prefix.size()));
        } else if (kind == "tensor") {
            std::vector<std::string> toks;
            std::string tok;
            while (is >> tok) toks.push_back(tok);
            if (toks.size() < 4) {
                throw FormatError(FormatFault::Malformed,
                                  "checkpoint header tensor line is too short: '" + line + "'");
            }
            PendingTensor pt;
            pt.name = toks[0];
            pt.offset = parse_uint_token(toks[1], "tensor line '" + line + "'");
            const std::size_t rank = parse_uint_token(toks[2], "tensor line '" + line + "'");
            if (rank == 0 || toks.size() != 3 + rank) {
                throw FormatError(FormatFault::Malformed,
                                  "checkpoint header tensor line lists " +
                                      std::to_string(toks.size() - 3) + " dims for rank " +
                                      std::to_string(rank) + ": '" + line + "'");
            }
            pt.elements = 1;
            for (std::size_t i = 0; i < rank; ++i) {
                const std::size_t dim =
                    parse_uint_token(toks[3 + i], "tensor line '" + line + "'");
                if (dim == 0) {
                    throw FormatError(FormatFault::Malformed,
                                      "checkpoint tensor '" + pt.name + "' has a zero dimension");
                }
                pt.shape.push_back(dim);
                const unsigned __int128 next =
                    static_cast<unsigned __int128>(pt.elements) * dim;
                if (next > kMaxPayloadElements) {
                    throw FormatError(FormatFault::Malformed, "checkpoint tensor '" + pt.name +
                                                                  "' is implausibly large");
                }
                pt.elements = static_cast<std::size_t>(next);
            }
            if (pt.offset != expect_offset) {
                throw FormatError(FormatFault::Malformed,
                                  "checkpoint tensor '" + pt.name + "' offset " +
                                      std::to_string(pt.offset) + " breaks dense packing at " +
                                      std::to_string(expect_offset));
            }
            expect_offset += static_cast<std::uint64_t>(pt.elements) * sizeof(double);
            total_elements += pt.elements;
            if (total_elements > kMaxPayloadElements) {
                throw FormatError(FormatFault::Malformed, "checkpoint payload is implausibly large");
            }
            pending.push_back(std::move(pt));
        } else {
            throw FormatError(FormatFault::Malformed,
                              "checkpoint header line must start with meta/tensor: '" + line +
                                  "'");
        }
    }

    const std::uint64_t payload_base =
        (kPrefixBytes + header_len + 7) & ~static_cast<std::uint64_t>(7);
    const std::uint64_t payload_bytes = static_cast<std::uint64_t>(total_elements) * sizeof(double);
    if (bytes.size() < payload_base + payload_bytes) {
        throw FormatError(FormatFault::Truncated,
                          "checkpoint payload is truncated: want " +
                              std::to_string(payload_base + payload_bytes) + " bytes, have " +
                              std::to_string(bytes.size()));
    }
    if (bytes.size() > payload_base + payload_bytes) {
        throw FormatError(FormatFault::Malformed,
                          "checkpoint carries " +
                              std::to_string(bytes.size() - payload_base - payload_bytes) +
                              " trailing bytes past the payload");
    }
    for (std::uint64_t i = kPrefixBytes + header_len; i < payload_base; ++i) {
        if (bytes[static_cast<std::size_t>(i)] != 0) {
            throw FormatError(FormatFault::Malformed,
                              "checkpoint alignment padding must be zero bytes");
        }
    }
    for (PendingTensor& pt : pending) {
        std::vector<double> data(pt.elements);
        const std::uint8_t* src = bytes.data() + payload_base + pt.offset;
        for (std::size_t i = 0; i < pt.elements; ++i) {
            data[i] = std::bit_cast<double>(read_u64(src + i * sizeof(double)));
        }
        ckpt.add_tensor(pt.name, Tensor(std::move(pt.shape), std::move(data)));
    }
    ckpt.validate();
    return ckpt;
}

void save(const Checkpoint& ckpt, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError(FormatFault::Truncated, "cannot open '" + path + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError(FormatFault::Truncated, "short write to '" + path + "'");
    }
}

Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(FormatFault::Truncated, "cannot open '" + path + "' for reading");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw FormatError(FormatFault::Truncated, "short read from '" + path + "'");
    }
    return deserialize(bytes);
}

std::vector<std::string> expected_tensor_names(const Checkpoint& ckpt) {
    const Geometry geo = decode_geometry(ckpt);
    return layout_names(geo.layers, geo.weighting != Weighting::None);
}

Checkpoint convert(const Checkpoint& source, const AttentionConfig& target,
                   std::uint64_t seed) {
    source.validate();
    target.validate();
    const Geometry geo = decode_geometry(source);
    if (geo.weighting != Weighting::None || geo.g != geo.h) {
        throw ConfigError("conversion requires a multi-head source (n_kv_groups == n_heads, "
                          "no aggregation weights); this checkpoint is '" +
                          source.metadata_at("variant") + "'");
    }
    if (target.d_model != geo.d || target.n_heads != geo.h) {
        throw ConfigError("conversion cannot change geometry: source is d_model=" +
                          std::to_string(geo.d) + " n_heads=" + std::to_string(geo.h) +
                          ", target wants d_model=" + std::to_string(target.d_model) +
                          " n_heads=" + std::to_string(target.n_heads));
    }

    const std::vector<std::string> want = layout_names(geo.layers, false);
    std::set<std::string> have;
    for (const auto& [name, t] : source.tensors()) {
        (void)t;
        have.insert(name);
    }
    if (have != std::set<std::string>(want.begin(), want.end())) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint tensor set does not match the toy encoder-decoder layout "
                          "its geometry metadata describes");
    }

    const bool weighted = target.weighting != Weighting::None;
    Checkpoint out;
    for (const auto& [key, value] : source.metadata()) out.set_metadata(key, value);
    out.set_metadata("n_kv_groups", std::to_string(target.n_kv_groups));
    out.set_metadata("variant",
                     variant_name(target.weighting, target.n_kv_groups, target.n_heads));
    out.set_metadata("init", to_string(target.init));

    // Aggregation weights are drawn in canonical block order so the output
    // is a deterministic function of (source, target, seed).
    SeededRng rng(seed);
    AttentionConfig block_cfg = target;
    block_cfg.causal = false;
    block_cfg.cross_attention = false;

    std::map<std::string, Tensor> generated;
    if (weighted) {
        for (std::size_t l = 0; l < geo.layers; ++l) {
            for (const char* kind : {"self", "cross"}) {
                AggregationWeights agg = init_aggregation(block_cfg, rng);
                const std::string base = "decoder." + std::to_string(l) + "." + kind + ".";
                generated.emplace(base + "agg_k", std::move(agg.w_k_agg));
                generated.emplace(base + "agg_v", std::move(agg.w_v_agg));
            }
        }
    }

    const bool pool = !weighted && target.n_kv_groups < geo.h;
    for (const std::string& name : layout_names(geo.layers, weighted)) {
        auto gen = generated.find(name);
        if (gen != generated.end()) {
            out.add_tensor(name, std::move(gen->second));
            continue;
        }
        const Tensor& src = source.tensor(name);
        const ParsedName p = parse_name(name);
        const bool grouped_leaf = p.recognized && p.site == ParsedName::Site::Block &&
                                  !p.encoder && (p.leaf == "wk" || p.leaf == "wv");
        if (pool && grouped_leaf) {
            out.add_tensor(name, mean_pool_heads(src, block_cfg));
        } else {
            out.add_tensor(name, src);
        }
    }
    out.validate();
    return out;
}

}  // namespace wgqa
