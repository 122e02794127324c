#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wgqa/attention.hpp"
#include "wgqa/tensor.hpp"

namespace wgqa {

// Named-tensor container with string metadata. Tensors keep insertion
// order; metadata is a sorted map (order never affects equality or bytes).
//
// On-disk layout (little-endian throughout):
//   bytes 0..7    magic "WGQACKPT"
//   bytes 8..11   format version, u32 (currently 1)
//   bytes 12..19  header length in bytes, u64
//   then          UTF-8 header text of exactly that length:
//                   meta <key> <value>\n          (one per metadata entry)
//                   tensor <name> <offset> <rank> <dim0> ... \n
//                 where <offset> is the tensor's byte offset inside the
//                 payload; tensors are packed in order with no gaps
//   then          zero padding to the next 8-byte boundary
//   then          the payload: each tensor's elements as f64 little-endian
class Checkpoint {
  public:
    static constexpr std::uint32_t kFormatVersion = 1;

    // Required metadata keys; validate() rejects a container missing any.
    // d_model / n_heads / n_kv_groups / n_layers / vocab_size / max_seq are
    // unsigned integers, variant is a variant_spec name, init is mean|rand.
    static const std::vector<std::string>& required_metadata();

    void set_metadata(const std::string& key, const std::string& value);
    const std::string& metadata_at(const std::string& key) const;  // throws FormatError
    bool has_metadata(const std::string& key) const;
    std::size_t metadata_uint(const std::string& key) const;  // parse or throw
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    // Appends; duplicate names throw FormatError (Malformed).
    void add_tensor(const std::string& name, Tensor t);
    bool has_tensor(const std::string& name) const;
    const Tensor& tensor(const std::string& name) const;  // throws FormatError
    const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

    // Full structural check: required metadata present and parseable,
    // geometry self-consistent, and every tensor whose name follows the
    // model naming convention has the shape that geometry dictates.
    // Throws FormatError (Inconsistent) otherwise.
    void validate() const;

    // Equality is bit-exact on tensor payloads and order, order-insensitive
    // on metadata.
    bool operator==(const Checkpoint& other) const;

  private:
    std::map<std::string, std::string> metadata_;
    std::vector<std::pair<std::string, Tensor>> tensors_;
    std::map<std::string, std::size_t> index_;
};

// Container -> bytes per the documented layout. Validates first.
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);

// Bytes -> container. Throws FormatError whose fault tells apart bad
// magic, unsupported version, truncation, malformed header text, and
// shape/metadata inconsistency.
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

// File I/O wrappers over serialize/deserialize. Throw FormatError
// (Truncated) when the file cannot be read or written whole.
void save(const Checkpoint& ckpt, const std::string& path);
Checkpoint load(const std::string& path);

// Expected tensor names, in canonical order, for the toy encoder-decoder
// layout a checkpoint's metadata describes.
std::vector<std::string> expected_tensor_names(const Checkpoint& ckpt);

// Re-group a multi-head-attention checkpoint (n_kv_groups == n_heads,
// weighting none) into the target variant. Decoder w_k/w_v are mean-pooled
// to target.n_kv_groups when target.weighting is none; otherwise they stay
// ungrouped and per-head aggregation tensors are added, initialized per
// target.init (`seed` feeds the rand scheme). Encoder tensors and all
// non-attention tensors are copied bit-exactly. Metadata follows the target.
Checkpoint convert(const Checkpoint& source, const AttentionConfig& target,
                   std::uint64_t seed);

}  // namespace wgqa
