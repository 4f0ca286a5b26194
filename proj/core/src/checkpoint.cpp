#include "cfmr/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cfmr {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

void put_f64(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(os, u);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("checkpoint truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    const uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

double get_f64(std::istream& is) {
    const uint64_t u = get_u64(is);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void put_tensor(std::ostream& os, const NamedTensorF& t) {
    put_u32(os, static_cast<uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u64(os, static_cast<uint64_t>(d));
    for (float v : t.values) put_f32(os, v);
}

NamedTensorF get_tensor(std::istream& is) {
    NamedTensorF t;
    const uint32_t name_len = get_u32(is);
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    if (!is) throw IoError("checkpoint truncated in tensor name");
    const uint32_t rank = get_u32(is);
    t.shape.resize(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        t.shape[i] = static_cast<int64_t>(get_u64(is));
        n *= t.shape[i];
    }
    t.values.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) t.values[static_cast<size_t>(i)] = get_f32(is);
    return t;
}

constexpr char kMagic[4] = {'C', 'F', 'M', 'R'};

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put_u32(os, ckpt.version);
    put_u64(os, ckpt.params.size());
    for (const auto& t : ckpt.params) put_tensor(os, t);
    put_u64(os, ckpt.opt.size());
    for (const auto& t : ckpt.opt) put_tensor(os, t);
    put_u64(os, ckpt.step);
    put_f64(os, ckpt.metric);
    if (!os) throw IoError("write failed for '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    }
    CheckpointData ckpt;
    ckpt.version = get_u32(is);
    if (ckpt.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
    const uint64_t n_params = get_u64(is);
    ckpt.params.reserve(n_params);
    for (uint64_t i = 0; i < n_params; ++i) ckpt.params.push_back(get_tensor(is));
    const uint64_t n_opt = get_u64(is);
    ckpt.opt.reserve(n_opt);
    for (uint64_t i = 0; i < n_opt; ++i) ckpt.opt.push_back(get_tensor(is));
    ckpt.step = get_u64(is);
    ckpt.metric = get_f64(is);
    return ckpt;
}

CheckpointData snapshot(const ParamStore<float>& store, const AdamState<float>* adam, uint64_t step,
                        double metric) {
    CheckpointData ckpt;
    ckpt.step = step;
    ckpt.metric = metric;
    for (size_t i = 0; i < store.size(); ++i) {
        ckpt.params.push_back({store.names()[i], store.tensor(i).shape(), store.tensor(i).values()});
    }
    if (adam != nullptr) {
        for (size_t i = 0; i < store.size(); ++i) {
            if (!store.tensor(i).requires_grad()) continue;
            ckpt.opt.push_back({"adam.m." + store.names()[i], store.tensor(i).shape(), adam->m[i]});
            ckpt.opt.push_back({"adam.v." + store.names()[i], store.tensor(i).shape(), adam->v[i]});
        }
        ckpt.opt.push_back({"adam.t", {1}, {static_cast<float>(adam->step)}});
    }
    return ckpt;
}

void restore(ParamStore<float>& store, AdamState<float>* adam, const CheckpointData& ckpt) {
    if (ckpt.params.size() != store.size()) {
        throw IoError("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, model has " +
                      std::to_string(store.size()));
    }
    for (const auto& t : ckpt.params) {
        if (!store.has(t.name)) throw IoError("checkpoint tensor '" + t.name + "' not in the model");
        auto& dst = store.at(t.name);
        if (dst.shape() != t.shape) {
            throw IoError("shape mismatch for '" + t.name + "': checkpoint " + shape_str(t.shape) +
                          " vs model " + shape_str(dst.shape()));
        }
        dst.mutable_values() = t.values;
    }
    if (adam != nullptr && !ckpt.opt.empty()) {
        for (const auto& t : ckpt.opt) {
            if (t.name == "adam.t") {
                adam->step = static_cast<int64_t>(t.values.at(0));
                continue;
            }
            const bool is_m = t.name.rfind("adam.m.", 0) == 0;
            const bool is_v = t.name.rfind("adam.v.", 0) == 0;
            if (!is_m && !is_v) throw IoError("unknown optimizer tensor '" + t.name + "'");
            const std::string pname = t.name.substr(7);
            if (!store.has(pname)) throw IoError("optimizer tensor '" + t.name + "' has no parameter");
            size_t idx = 0;
            for (; idx < store.size(); ++idx) {
                if (store.names()[idx] == pname) break;
            }
            auto& slot = is_m ? adam->m[idx] : adam->v[idx];
            if (slot.size() != t.values.size()) {
                throw IoError("optimizer state size mismatch for '" + t.name + "'");
            }
            slot = t.values;
        }
    }
}

CheckpointData average_checkpoints(const std::vector<std::string>& paths) {
    if (paths.empty()) throw ContractError("average_checkpoints needs at least one path");
    CheckpointData first = load_checkpoint(paths[0]);
    std::vector<std::vector<double>> acc(first.params.size());
    for (size_t i = 0; i < first.params.size(); ++i) {
        acc[i].assign(first.params[i].values.begin(), first.params[i].values.end());
    }
    CheckpointData newest = first;
    for (size_t p = 1; p < paths.size(); ++p) {
        CheckpointData c = load_checkpoint(paths[p]);
        if (c.params.size() != first.params.size()) {
            throw IoError("checkpoint '" + paths[p] + "' has a different tensor count");
        }
        for (size_t i = 0; i < c.params.size(); ++i) {
            if (c.params[i].name != first.params[i].name) {
                throw IoError("checkpoint tensor name mismatch: '" + c.params[i].name + "' vs '" +
                              first.params[i].name + "'");
            }
            if (c.params[i].shape != first.params[i].shape) {
                throw IoError("checkpoint shape mismatch for '" + c.params[i].name + "'");
            }
            for (size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += static_cast<double>(c.params[i].values[k]);
        }
        if (c.step > newest.step) newest = std::move(c);
    }
    CheckpointData out;
    out.step = newest.step;
    out.metric = newest.metric;
    out.params = first.params;
    const double k_count = static_cast<double>(paths.size());
    for (size_t i = 0; i < out.params.size(); ++i) {
        for (size_t k = 0; k < out.params[i].values.size(); ++k) {
            // true division keeps "average of identical checkpoints" exact
            out.params[i].values[k] = static_cast<float>(acc[i][k] / k_count);
        }
    }
    return out;
}

}  // namespace cfmr
