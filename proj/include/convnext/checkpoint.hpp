#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convnext/fcmae.hpp"
#include "convnext/model.hpp"
#include "convnext/tensor.hpp"
#include "convnext/train.hpp"

namespace cnx {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File layout:
//   "CNXCKPT1\n"
//   "header_length <N>\n"            N = byte length of the header block below
//   header block: lines "key = value" and
//                 "tensor <name> <f32|f64> <d0xd1x...|scalar> <offset> <nbytes>"
//   payload: tensor bytes, little-endian, offsets relative to the payload start
struct CheckpointTensor {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<unsigned char> bytes;  // little-endian
};

class Checkpoint {
public:
    std::map<std::string, std::string> meta;

    template <class T>
    void put(const std::string& name, const Tensor<T>& t);
    template <class T>
    Tensor<T> get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<CheckpointTensor>& tensors() const { return tensors_; }

    std::string serialize() const;
    static Checkpoint deserialize(const std::string& bytes);
    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::vector<CheckpointTensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
void store_params(Checkpoint& ck, const std::vector<Param<T>*>& params);

// Loads every listed param by name; shapes must match. Missing names throw.
template <class T>
void restore_params(const Checkpoint& ck, const std::vector<Param<T>*>& params);

// Moments under "adamw.m.<param>" / "adamw.v.<param>", step count in meta.
template <class T>
void store_optimizer(Checkpoint& ck, const AdamW<T>& opt);
template <class T>
void restore_optimizer(const Checkpoint& ck, AdamW<T>& opt);

void store_model_config(Checkpoint& ck, const ModelConfig& cfg);
ModelConfig load_model_config(const Checkpoint& ck);
void store_decoder_config(Checkpoint& ck, const DecoderConfig& cfg);
DecoderConfig load_decoder_config(const Checkpoint& ck);

// Classifier initialized from a checkpoint's encoder weights: every
// parameter except head.* is copied; the head is freshly initialized for
// num_classes. The same weights serve the sparse and dense paths.
template <class T>
ConvNeXt<T> model_from_pretrained(const Checkpoint& ck, std::size_t num_classes, std::uint64_t seed,
                                  std::optional<double> drop_path_rate = std::nullopt);

}  // namespace cnx
