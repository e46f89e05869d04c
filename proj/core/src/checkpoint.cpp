#include "versekit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "versekit/errors.hpp"
#include "versekit/version.hpp"

namespace versekit {

namespace {

template <class S>
const char* dtype_tag();
template <>
const char* dtype_tag<float>() { return "f32"; }
template <>
const char* dtype_tag<double>() { return "f64"; }

template <class S>
void write_le_payload(std::ofstream& out, const std::vector<S>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(S)));
    return;
  }
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (S v : values) {
    U bits;
    std::memcpy(&bits, &v, sizeof(S));
    char bytes[sizeof(S)];
    for (std::size_t i = 0; i < sizeof(S); ++i) {
      bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    }
    out.write(bytes, sizeof(S));
  }
}

template <class S>
void read_le_payload(std::ifstream& in, std::vector<S>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(S)));
    return;
  }
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (S& v : values) {
    char bytes[sizeof(S)];
    in.read(bytes, sizeof(S));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(S); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    }
    std::memcpy(&v, &bits, sizeof(S));
  }
}

std::string require_line(std::ifstream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ValidationError(std::string("truncated checkpoint: missing ") +
                          what);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

template <class S>
void save_checkpoint(const ModelParams<S>& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw RunError("cannot write checkpoint: " + path);
  }
  const ModelConfig& cfg = params.config;
  out << "versekit-ckpt " << kCheckpointFormatVersion << "\n";
  out << "d_model = " << cfg.d_model << "\n";
  out << "n_layers = " << cfg.n_layers << "\n";
  out << "n_heads = " << cfg.n_heads << "\n";
  out << "ffn_hidden = " << cfg.resolved_ffn() << "\n";
  out << "vocab_size = " << cfg.vocab_size << "\n";
  out << "context_len = " << cfg.context_len << "\n";
  out << "dropout = " << cfg.dropout << "\n";
  out << "tied_embeddings = " << (cfg.tied_embeddings ? 1 : 0) << "\n";

  auto refs = tensor_registry(const_cast<ModelParams<S>&>(params));
  out << "tensors = " << refs.size() << "\n";
  out << "end-header\n";
  for (auto& [name, tensor] : refs) {
    out << "tensor " << name << " " << dtype_tag<S>() << " " << tensor->rows
        << " " << tensor->cols << "\n";
    write_le_payload(out, tensor->data);
    out << "\n";
  }
  if (!out) {
    throw RunError("write failed: " + path);
  }
}

template <class S>
ModelParams<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open checkpoint: " + path);
  }
  std::string line = require_line(in, "magic");
  {
    std::istringstream magic(line);
    std::string tag;
    int version = 0;
    if (!(magic >> tag >> version) || tag != "versekit-ckpt") {
      throw ValidationError("not a checkpoint file: " + path);
    }
    if (version != kCheckpointFormatVersion) {
      throw ValidationError("unsupported checkpoint version " +
                            std::to_string(version));
    }
  }

  ModelConfig cfg;
  std::size_t tensor_count = 0;
  while (true) {
    line = require_line(in, "header");
    if (line == "end-header") break;
    const std::size_t eq = line.find(" = ");
    if (eq == std::string::npos) {
      throw ValidationError("malformed checkpoint header line: " + line);
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    try {
      if (key == "d_model") cfg.d_model = std::stoi(value);
      else if (key == "n_layers") cfg.n_layers = std::stoi(value);
      else if (key == "n_heads") cfg.n_heads = std::stoi(value);
      else if (key == "ffn_hidden") cfg.ffn_hidden = std::stoi(value);
      else if (key == "vocab_size") cfg.vocab_size = std::stoi(value);
      else if (key == "context_len") cfg.context_len = std::stoi(value);
      else if (key == "dropout") cfg.dropout = std::stod(value);
      else if (key == "tied_embeddings") cfg.tied_embeddings = std::stoi(value) != 0;
      else if (key == "tensors") tensor_count = static_cast<std::size_t>(std::stoul(value));
      else throw ValidationError("unknown checkpoint header key: " + key);
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError("malformed checkpoint header value: " + line);
    }
  }
  cfg.validate();

  // Shape template for validation: an all-zero parameter set for cfg.
  ModelParams<S> params;
  params.config = cfg;
  {
    ModelParams<S> proto;
    proto.config = cfg;
    proto.embedding.resize(static_cast<std::size_t>(cfg.vocab_size),
                           static_cast<std::size_t>(cfg.d_model));
    proto.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t f = static_cast<std::size_t>(cfg.resolved_ffn());
    for (auto& lp : proto.layers) {
      lp.wq.resize(d, d);
      lp.wk.resize(d, d);
      lp.wv.resize(d, d);
      lp.wo.resize(d, d);
      lp.w1.resize(d, f);
      lp.b1.resize(1, f);
      lp.w2.resize(f, d);
      lp.b2.resize(1, d);
      lp.ln1_g.resize(1, d);
      lp.ln1_b.resize(1, d);
      lp.ln2_g.resize(1, d);
      lp.ln2_b.resize(1, d);
    }
    if (!cfg.tied_embeddings) {
      proto.w_out.resize(d, static_cast<std::size_t>(cfg.vocab_size));
    }
    params = std::move(proto);
  }

  auto refs = tensor_registry(params);
  if (tensor_count != refs.size()) {
    throw ValidationError("checkpoint tensor count mismatch");
  }
  std::map<std::string, Matrix<S>*> by_name;
  for (auto& [name, tensor] : refs) by_name[name] = tensor;

  std::size_t loaded = 0;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    line = require_line(in, "tensor record");
    std::istringstream rec(line);
    std::string tag, name, dtype;
    std::size_t rows = 0, cols = 0;
    if (!(rec >> tag >> name >> dtype >> rows >> cols) || tag != "tensor") {
      throw ValidationError("malformed tensor record: " + line);
    }
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ValidationError("unexpected tensor in checkpoint: " + name);
    }
    Matrix<S>* dst = it->second;
    if (dst->rows != rows || dst->cols != cols) {
      throw ValidationError("tensor shape mismatch for " + name);
    }
    if (dtype == dtype_tag<S>()) {
      read_le_payload(in, dst->data);
    } else if (dtype == "f32") {
      std::vector<float> tmp(rows * cols);
      read_le_payload(in, tmp);
      for (std::size_t j = 0; j < tmp.size(); ++j) {
        dst->data[j] = static_cast<S>(tmp[j]);
      }
    } else if (dtype == "f64") {
      std::vector<double> tmp(rows * cols);
      read_le_payload(in, tmp);
      for (std::size_t j = 0; j < tmp.size(); ++j) {
        dst->data[j] = static_cast<S>(tmp[j]);
      }
    } else {
      throw ValidationError("unknown tensor dtype: " + dtype);
    }
    if (!in) {
      throw ValidationError("truncated tensor payload: " + name);
    }
    // Payload separator newline.
    const int sep = in.get();
    if (sep != '\n') {
      throw ValidationError("missing payload separator after " + name);
    }
    by_name.erase(it);  // a second record with this name is "unexpected"
    ++loaded;
  }
  if (loaded != refs.size() || !by_name.empty()) {
    throw ValidationError("checkpoint is missing tensors");
  }
  return params;
}

template void save_checkpoint<float>(const ModelParams<float>&,
                                     const std::string&);
template void save_checkpoint<double>(const ModelParams<double>&,
                                      const std::string&);
template ModelParams<float> load_checkpoint<float>(const std::string&);
template ModelParams<double> load_checkpoint<double>(const std::string&);

}  // namespace versekit
