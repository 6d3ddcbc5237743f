#include "eas/weights.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace eas {

namespace {

const char kMagic[4] = {'E', 'A', 'S', 'W'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated weights file");
  return v;
}

template <typename Real>
void write_tensor(std::ostream& out, const std::string& name,
                  const Tensor<Real>& t) {
  write_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<uint8_t>(out, sizeof(Real) == 4 ? 0 : 1);
  write_pod<uint8_t>(out, static_cast<uint8_t>(t.rank()));
  for (int d : t.shape) write_pod<uint32_t>(out, static_cast<uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(Real)));
}

template <typename Real>
const Tensor<Real>* tensor_slot(const LayerParams<Real>& lp,
                                const std::string& field) {
  if (field == "kernel") return &lp.kernel;
  if (field == "bias") return &lp.bias;
  if (field == "bn_gamma") return &lp.bn_gamma;
  if (field == "bn_beta") return &lp.bn_beta;
  if (field == "bn_mean") return &lp.bn_mean;
  if (field == "bn_var") return &lp.bn_var;
  return nullptr;
}

const char* kFields[] = {"kernel", "bias", "bn_gamma", "bn_beta",
                         "bn_mean", "bn_var"};

}  // namespace

template <typename Real>
void save_weights(const ArchitectureSpec& spec,
                  const NetworkParams<Real>& params, const std::string& path) {
  check_params(spec, params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, 4);
  write_pod<uint32_t>(out, kWeightsVersion);
  uint32_t count = 0;
  for (const auto& lp : params.layers)
    for (const char* f : kFields)
      if (!tensor_slot(lp, f)->empty()) ++count;
  write_pod<uint32_t>(out, count);
  for (size_t i = 0; i < params.layers.size(); ++i)
    for (const char* f : kFields) {
      const Tensor<Real>* t = tensor_slot(params.layers[i], f);
      if (t->empty()) continue;
      write_tensor(out, "layer" + std::to_string(i) + "." + f, *t);
    }
  if (!out) throw std::runtime_error("write failed: " + path);
}

int weights_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path);
  read_pod<uint32_t>(in);
  uint32_t count = read_pod<uint32_t>(in);
  if (count == 0) throw std::runtime_error("empty weights file");
  uint16_t name_len = read_pod<uint16_t>(in);
  in.seekg(name_len, std::ios::cur);
  return read_pod<uint8_t>(in);
}

template <typename Real>
NetworkParams<Real> load_weights(const ArchitectureSpec& spec,
                                 const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(in);
  if (version != kWeightsVersion)
    throw std::runtime_error("unsupported weights version " +
                             std::to_string(version));
  uint32_t count = read_pod<uint32_t>(in);

  std::map<std::string, Tensor<Real>> tensors;
  for (uint32_t t = 0; t < count; ++t) {
    uint16_t name_len = read_pod<uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("truncated weights file");
    uint8_t dtype = read_pod<uint8_t>(in);
    uint8_t rank = read_pod<uint8_t>(in);
    std::vector<int> shape(rank);
    for (int d = 0; d < rank; ++d)
      shape[d] = static_cast<int>(read_pod<uint32_t>(in));
    Tensor<Real> tensor(shape);
    if ((dtype == 0) == (sizeof(Real) == 4)) {
      in.read(reinterpret_cast<char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(Real)));
      if (!in) throw std::runtime_error("truncated weights file");
    } else if (dtype == 0) {
      std::vector<float> tmp(tensor.data.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * 4));
      if (!in) throw std::runtime_error("truncated weights file");
      for (size_t k = 0; k < tmp.size(); ++k)
        tensor.data[k] = static_cast<Real>(tmp[k]);
    } else if (dtype == 1) {
      std::vector<double> tmp(tensor.data.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * 8));
      if (!in) throw std::runtime_error("truncated weights file");
      for (size_t k = 0; k < tmp.size(); ++k)
        tensor.data[k] = static_cast<Real>(tmp[k]);
    } else {
      throw std::runtime_error("unknown dtype code");
    }
    tensors.emplace(name, std::move(tensor));
  }

  NetworkParams<Real> params;
  params.layers.resize(spec.layers.size());
  for (auto& [name, tensor] : tensors) {
    size_t dot = name.find('.');
    if (dot == std::string::npos || name.rfind("layer", 0) != 0)
      throw std::runtime_error("unrecognized tensor name " + name);
    int layer = std::stoi(name.substr(5, dot - 5));
    if (layer < 0 || layer >= static_cast<int>(params.layers.size()))
      throw std::runtime_error("tensor for out-of-range layer " + name);
    std::string field = name.substr(dot + 1);
    LayerParams<Real>& lp = params.layers[layer];
    Tensor<Real>* slot = const_cast<Tensor<Real>*>(tensor_slot(lp, field));
    if (!slot) throw std::runtime_error("unknown tensor field " + name);
    *slot = std::move(tensor);
  }
  check_params(spec, params);
  return params;
}

template void save_weights<float>(const ArchitectureSpec&,
                                  const NetworkParams<float>&,
                                  const std::string&);
template void save_weights<double>(const ArchitectureSpec&,
                                   const NetworkParams<double>&,
                                   const std::string&);
template NetworkParams<float> load_weights<float>(const ArchitectureSpec&,
                                                  const std::string&);
template NetworkParams<double> load_weights<double>(const ArchitectureSpec&,
                                                    const std::string&);

}  // namespace eas
