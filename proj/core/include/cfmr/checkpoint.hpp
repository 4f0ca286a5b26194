#pragma once

// Checkpoint container and its binary format (a bit-exact contract):
//
//   magic "CFMR" | version u32 | tensor count u64
//   per tensor:  name length u32, UTF-8 name, rank u32, dims u64 each,
//                raw 32-bit little-endian IEEE-754 values
//   optimizer section: tensor count u64, tensors with the same framing
//                ("adam.m.<param>", "adam.v.<param>", plus "adam.t" holding
//                the step counter)
//   footer:      step u64, metric f64
//
// All integers little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include "cfmr/model.hpp"
#include "cfmr/train.hpp"

namespace cfmr {

struct NamedTensorF {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct CheckpointData {
    uint32_t version = 1;
    std::vector<NamedTensorF> params;
    std::vector<NamedTensorF> opt;
    uint64_t step = 0;
    double metric = 0.0;
};

void save_checkpoint(const std::string& path, const CheckpointData& ckpt);
CheckpointData load_checkpoint(const std::string& path);

// Snapshot the store (and optionally the optimizer) into a checkpoint.
CheckpointData snapshot(const ParamStore<float>& store, const AdamState<float>* adam, uint64_t step,
                        double metric);

// Write checkpoint tensors back into a built model's store (and optimizer
// state when given). Name or shape mismatches raise an error naming the
// offending tensor.
void restore(ParamStore<float>& store, AdamState<float>* adam, const CheckpointData& ckpt);

// Elementwise arithmetic mean of the parameter section over all checkpoints
// (accumulated in double), batch-norm running statistics included. The step
// and metric come from the newest checkpoint; the optimizer section is left
// empty. Name/shape mismatches raise an error naming the tensor.
CheckpointData average_checkpoints(const std::vector<std::string>& paths);

}  // namespace cfmr
