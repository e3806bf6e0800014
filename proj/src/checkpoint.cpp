#include "convnext/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cnx {

namespace {

constexpr const char* kMagic = "CNXCKPT1";

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw CheckpointError("unknown tensor dtype '" + s + "'");
}

std::string shape_token(const Shape& s) {
    if (s.empty()) return "scalar";
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape_token(const std::string& tok) {
    if (tok == "scalar") return {};
    Shape s;
    std::stringstream ss(tok);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
            throw CheckpointError("malformed tensor shape '" + tok + "'");
        s.push_back(std::stoull(part));
    }
    return s;
}

// Little-endian copy of `count` values of `width` bytes.
void copy_le(const unsigned char* src, unsigned char* dst, std::size_t count, std::size_t width) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(dst, src, count * width);
    } else {
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t b = 0; b < width; ++b) dst[i * width + b] = src[i * width + width - 1 - b];
    }
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::string& require(const Checkpoint& ck, const std::string& key) {
    const auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw CheckpointError("checkpoint is missing '" + key + "'");
    return it->second;
}

}  // namespace

template <class T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
    if (name.empty() || name.find_first_of(" \t\n=") != std::string::npos)
        throw CheckpointError("invalid tensor name '" + name + "'");
    CheckpointTensor ct;
    ct.name = name;
    ct.dtype = dtype_of<T>();
    ct.shape = t.shape();
    ct.bytes.resize(t.numel() * sizeof(T));
    copy_le(reinterpret_cast<const unsigned char*>(t.data()), ct.bytes.data(), t.numel(), sizeof(T));
    const auto it = index_.find(name);
    if (it != index_.end()) {
        tensors_[it->second] = std::move(ct);
    } else {
        index_[name] = tensors_.size();
        tensors_.push_back(std::move(ct));
    }
}

template <class T>
Tensor<T> Checkpoint::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    const CheckpointTensor& ct = tensors_[it->second];
    if (ct.dtype != dtype_of<T>())
        throw CheckpointError("tensor '" + name + "' is " + dtype_name(ct.dtype) + ", requested " +
                              dtype_name(dtype_of<T>()));
    Tensor<T> t(ct.shape);
    copy_le(ct.bytes.data(), reinterpret_cast<unsigned char*>(t.data()), t.numel(), sizeof(T));
    return t;
}

bool Checkpoint::has(const std::string& name) const { return index_.count(name) != 0; }

std::string Checkpoint::serialize() const {
    std::ostringstream header;
    for (const auto& [k, v] : meta) {
        if (k.find_first_of(" \t\n=") != std::string::npos || v.find('\n') != std::string::npos || k == "tensor")
            throw CheckpointError("invalid metadata entry '" + k + "'");
        header << k << " = " << v << "\n";
    }
    std::size_t offset = 0;
    for (const auto& t : tensors_) {
        header << "tensor " << t.name << " " << dtype_name(t.dtype) << " " << shape_token(t.shape) << " " << offset << " "
               << t.bytes.size() << "\n";
        offset += t.bytes.size();
    }
    const std::string h = header.str();
    std::string out = std::string(kMagic) + "\nheader_length " + std::to_string(h.size()) + "\n" + h;
    out.reserve(out.size() + offset);
    for (const auto& t : tensors_) out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
    return out;
}

Checkpoint Checkpoint::deserialize(const std::string& data) {
    const std::string magic = std::string(kMagic) + "\n";
    if (data.compare(0, magic.size(), magic) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    std::size_t pos = magic.size();
    const std::size_t eol = data.find('\n', pos);
    const std::string len_prefix = "header_length ";
    if (eol == std::string::npos || data.compare(pos, len_prefix.size(), len_prefix) != 0)
        throw CheckpointError("checkpoint header length line is missing");
    const std::size_t hlen = std::stoull(data.substr(pos + len_prefix.size(), eol - pos - len_prefix.size()));
    pos = eol + 1;
    if (pos + hlen > data.size()) throw CheckpointError("checkpoint header is truncated");
    const std::size_t payload = pos + hlen;

    Checkpoint ck;
    std::istringstream lines(data.substr(pos, hlen));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        if (line.rfind("tensor ", 0) == 0) {
            std::istringstream ls(line.substr(7));
            std::string name, dt, shape;
            std::size_t off = 0, nbytes = 0;
            if (!(ls >> name >> dt >> shape >> off >> nbytes)) throw CheckpointError("malformed tensor line: " + line);
            CheckpointTensor ct;
            ct.name = name;
            ct.dtype = parse_dtype(dt);
            ct.shape = parse_shape_token(shape);
            if (nbytes != numel_of(ct.shape) * dtype_size(ct.dtype))
                throw CheckpointError("tensor '" + name + "' byte count disagrees with its shape");
            if (payload + off + nbytes > data.size()) throw CheckpointError("tensor '" + name + "' is truncated");
            ct.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(payload + off),
                            data.begin() + static_cast<std::ptrdiff_t>(payload + off + nbytes));
            ck.index_[name] = ck.tensors_.size();
            ck.tensors_.push_back(std::move(ct));
        } else {
            const std::size_t eq = line.find(" = ");
            if (eq == std::string::npos) throw CheckpointError("malformed header line: " + line);
            ck.meta[line.substr(0, eq)] = line.substr(eq + 3);
        }
    }
    return ck;
}

void Checkpoint::save(const std::string& path) const {
    const std::string bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

template <class T>
void store_params(Checkpoint& ck, const std::vector<Param<T>*>& params) {
    for (const Param<T>* p : params) ck.put(p->name, p->value);
}

template <class T>
void restore_params(const Checkpoint& ck, const std::vector<Param<T>*>& params) {
    for (Param<T>* p : params) {
        Tensor<T> t = ck.get<T>(p->name);
        if (t.shape() != p->value.shape())
            throw CheckpointError("tensor '" + p->name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                                  shape_str(p->value.shape()));
        p->value = std::move(t);
    }
}

template <class T>
void store_optimizer(Checkpoint& ck, const AdamW<T>& opt) {
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        ck.put("adamw.m." + opt.params()[i]->name, opt.first_moments()[i]);
        ck.put("adamw.v." + opt.params()[i]->name, opt.second_moments()[i]);
    }
    ck.meta["adamw.step"] = std::to_string(opt.steps());
    ck.meta["adamw.beta1"] = format_double(opt.config().beta1);
    ck.meta["adamw.beta2"] = format_double(opt.config().beta2);
    ck.meta["adamw.eps"] = format_double(opt.config().eps);
    ck.meta["adamw.weight_decay"] = format_double(opt.config().weight_decay);
}

template <class T>
void restore_optimizer(const Checkpoint& ck, AdamW<T>& opt) {
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        const std::string& n = opt.params()[i]->name;
        opt.first_moments()[i] = ck.get<T>("adamw.m." + n);
        opt.second_moments()[i] = ck.get<T>("adamw.v." + n);
        if (opt.first_moments()[i].shape() != opt.params()[i]->value.shape())
            throw CheckpointError("optimizer state for '" + n + "' has the wrong shape");
    }
    opt.set_steps(std::stoull(require(ck, "adamw.step")));
}

void store_model_config(Checkpoint& ck, const ModelConfig& c) {
    std::string depths;
    for (std::size_t i = 0; i < c.depths.size(); ++i) depths += (i ? "," : "") + std::to_string(c.depths[i]);
    ck.meta["model.name"] = c.name;
    ck.meta["model.dim"] = std::to_string(c.dim);
    ck.meta["model.depths"] = depths;
    ck.meta["model.num_classes"] = std::to_string(c.num_classes);
    ck.meta["model.arch"] = arch_name(c.arch);
    ck.meta["model.drop_path_rate"] = format_double(c.drop_path_rate);
    ck.meta["model.layer_scale_init"] = format_double(c.layer_scale_init);
    ck.meta["model.in_channels"] = std::to_string(c.in_channels);
    ck.meta["model.kernel"] = std::to_string(c.kernel);
    ck.meta["model.head_init_scale"] = format_double(c.head_init_scale);
    ck.meta["grn.aggregation"] = grn_aggregation_name(c.grn.aggregation);
    ck.meta["grn.normalization"] = grn_normalization_name(c.grn.normalization);
    ck.meta["grn.residual"] = c.grn.residual ? "on" : "off";
    ck.meta["grn.channel_scale"] = c.grn.channel_scale ? "on" : "off";
    ck.meta["grn.eps"] = format_double(c.grn.eps);
}

ModelConfig load_model_config(const Checkpoint& ck) {
    ModelConfig c;
    c.name = require(ck, "model.name");
    c.dim = std::stoull(require(ck, "model.dim"));
    c.depths.clear();
    std::stringstream ss(require(ck, "model.depths"));
    std::string part;
    while (std::getline(ss, part, ',')) c.depths.push_back(std::stoull(part));
    c.num_classes = std::stoull(require(ck, "model.num_classes"));
    c.arch = parse_arch(require(ck, "model.arch"));
    c.drop_path_rate = std::stod(require(ck, "model.drop_path_rate"));
    c.layer_scale_init = std::stod(require(ck, "model.layer_scale_init"));
    c.in_channels = std::stoull(require(ck, "model.in_channels"));
    c.kernel = std::stoull(require(ck, "model.kernel"));
    c.head_init_scale = std::stod(require(ck, "model.head_init_scale"));
    c.grn.aggregation = parse_grn_aggregation(require(ck, "grn.aggregation"));
    c.grn.normalization = parse_grn_normalization(require(ck, "grn.normalization"));
    c.grn.residual = require(ck, "grn.residual") == "on";
    c.grn.channel_scale = require(ck, "grn.channel_scale") == "on";
    c.grn.eps = std::stod(require(ck, "grn.eps"));
    c.validate();
    return c;
}

void store_decoder_config(Checkpoint& ck, const DecoderConfig& d) {
    ck.meta["decoder.dim"] = std::to_string(d.dim);
    ck.meta["decoder.depth"] = std::to_string(d.depth);
    ck.meta["decoder.patch"] = std::to_string(d.patch);
    ck.meta["decoder.out_channels"] = std::to_string(d.out_channels);
    ck.meta["decoder.kernel"] = std::to_string(d.kernel);
}

DecoderConfig load_decoder_config(const Checkpoint& ck) {
    DecoderConfig d;
    d.dim = std::stoull(require(ck, "decoder.dim"));
    d.depth = std::stoull(require(ck, "decoder.depth"));
    d.patch = std::stoull(require(ck, "decoder.patch"));
    d.out_channels = std::stoull(require(ck, "decoder.out_channels"));
    d.kernel = std::stoull(require(ck, "decoder.kernel"));
    return d;
}

template <class T>
ConvNeXt<T> model_from_pretrained(const Checkpoint& ck, std::size_t num_classes, std::uint64_t seed,
                                  std::optional<double> drop_path_rate) {
    ModelConfig cfg = load_model_config(ck);
    cfg.num_classes = num_classes;
    if (drop_path_rate) cfg.drop_path_rate = *drop_path_rate;
    ConvNeXt<T> model(cfg, seed);
    std::vector<Param<T>*> body;
    for (Param<T>* p : model.params())
        if (p->name.rfind("head.", 0) != 0) body.push_back(p);
    restore_params(ck, body);
    return model;
}

#define CNX_INSTANTIATE(T)                                                                    \
    template void Checkpoint::put(const std::string&, const Tensor<T>&);                      \
    template Tensor<T> Checkpoint::get(const std::string&) const;                             \
    template void store_params(Checkpoint&, const std::vector<Param<T>*>&);                   \
    template void restore_params(const Checkpoint&, const std::vector<Param<T>*>&);           \
    template void store_optimizer(Checkpoint&, const AdamW<T>&);                              \
    template void restore_optimizer(const Checkpoint&, AdamW<T>&);                            \
    template ConvNeXt<T> model_from_pretrained(const Checkpoint&, std::size_t, std::uint64_t, std::optional<double>);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
