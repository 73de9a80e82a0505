#pragma once

// Named parameter storage shared by every model variant, plus the binary
// checkpoint format and the AdamW optimizer. Parameters keep master values
// and master gradients here; each per-frame tape binds leaves on demand and
// folds its gradients back in after the backward sweep.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "raven/array.hpp"
#include "raven/tape.hpp"

namespace raven {

template <class T>
class ParamStore {
 public:
  int add(const std::string& name, ArrayT<T> init) {
    if (index_.count(name)) throw std::runtime_error("duplicate param: " + name);
    index_[name] = (int)names_.size();
    names_.push_back(name);
    grads_.emplace_back(init.shape);
    values_.push_back(std::move(init));
    return (int)names_.size() - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown param: " + name);
    return it->second;
  }

  int count() const { return (int)names_.size(); }
  const std::string& name(int i) const { return names_[i]; }
  ArrayT<T>& value(int i) { return values_[i]; }
  const ArrayT<T>& value(int i) const { return values_[i]; }
  ArrayT<T>& value(const std::string& n) { return values_[find(n)]; }
  ArrayT<T>& grad(int i) { return grads_[i]; }

  int64_t total_scalars() const {
    int64_t s = 0;
    for (const auto& v : values_) s += v.numel();
    return s;
  }

  void zero_grad() {
    for (auto& g : grads_) g.fill(T(0));
  }

  // Binds parameters into one tape. Leaves are pushed lazily so a forward
  // pass touching a subset of parameters only pays for that subset.
  struct Bind {
    ParamStore* store = nullptr;
    Tape<T>* tape = nullptr;
    bool train = true;
    std::vector<int> node_of;  // -1 until bound

    Bind(ParamStore& s, Tape<T>& t, bool train_mode)
        : store(&s), tape(&t), train(train_mode), node_of(s.count(), -1) {}

    VarT<T> operator()(const std::string& name) {
      const int i = store->find(name);
      if (node_of[i] < 0) {
        VarT<T> v = tape->leaf(store->value(i), train);
        node_of[i] = v.id;
      }
      return {tape, node_of[i]};
    }

    // fold tape gradients into the master gradients (fixed parameter order)
    void accumulate_grads() {
      for (int i = 0; i < (int)node_of.size(); ++i) {
        if (node_of[i] < 0) continue;
        const ArrayT<T>& g = tape->grad(node_of[i]);
        ArrayT<T>& dst = store->grad(i);
        for (int64_t j = 0; j < g.numel(); ++j) dst.data[j] += g.data[j];
      }
    }
  };

  // ---------------------------------------------------------------------
  // Checkpoint I/O. Layout (all little-endian):
  //   magic "RVWT" | version u32 | count u32
  //   per entry: name_len u16 | name | rank u8 | dims u32 x rank | f32 data
  // ---------------------------------------------------------------------

  void save(const std::string& path) const {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + path);
    std::fwrite("RVWT", 1, 4, f);
    write_u32(f, 1);
    write_u32(f, (uint32_t)names_.size());
    for (size_t i = 0; i < names_.size(); ++i) {
      const std::string& nm = names_[i];
      write_u16(f, (uint16_t)nm.size());
      std::fwrite(nm.data(), 1, nm.size(), f);
      const ArrayT<T>& v = values_[i];
      const uint8_t rank = (uint8_t)v.rank();
      std::fwrite(&rank, 1, 1, f);
      for (int d = 0; d < (int)v.rank(); ++d) write_u32(f, (uint32_t)v.dim(d));
      for (int64_t j = 0; j < v.numel(); ++j) write_f32(f, (float)v.data[j]);
    }
    std::fclose(f);
  }

  void load(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("cannot read " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "RVWT", 4) != 0) {
      std::fclose(f);
      throw std::runtime_error("bad checkpoint magic in " + path);
    }
    const uint32_t version = read_u32(f);
    if (version != 1) {
      std::fclose(f);
      throw std::runtime_error("unsupported checkpoint version");
    }
    const uint32_t count = read_u32(f);
    if (count != names_.size()) {
      std::fclose(f);
      throw std::runtime_error("checkpoint param count mismatch");
    }
    for (uint32_t i = 0; i < count; ++i) {
      const uint16_t len = read_u16(f);
      std::string nm(len, '\0');
      if (std::fread(nm.data(), 1, len, f) != len) {
        std::fclose(f);
        throw std::runtime_error("truncated checkpoint");
      }
      uint8_t rank = 0;
      if (std::fread(&rank, 1, 1, f) != 1) {
        std::fclose(f);
        throw std::runtime_error("truncated checkpoint");
      }
      std::vector<int> shape(rank);
      for (int d = 0; d < rank; ++d) shape[d] = (int)read_u32(f);
      const int idx = find(nm);
      ArrayT<T>& dst = values_[idx];
      if (shape != dst.shape) {
        std::fclose(f);
        throw std::runtime_error("shape mismatch for param " + nm);
      }
      for (int64_t j = 0; j < dst.numel(); ++j) dst.data[j] = (T)read_f32(f);
    }
    std::fclose(f);
  }

  // raw little-endian f32 image of all parameters in registration order
  std::vector<uint8_t> payload_bytes() const {
    std::vector<uint8_t> out;
    out.reserve((size_t)total_scalars() * 4);
    for (const auto& v : values_)
      for (int64_t j = 0; j < v.numel(); ++j) {
        const float x = (float)v.data[j];
        uint32_t u;
        std::memcpy(&u, &x, 4);
        out.push_back((uint8_t)(u & 0xff));
        out.push_back((uint8_t)((u >> 8) & 0xff));
        out.push_back((uint8_t)((u >> 16) & 0xff));
        out.push_back((uint8_t)((u >> 24) & 0xff));
      }
    return out;
  }

 private:
  static void write_u16(FILE* f, uint16_t v) {
    uint8_t b[2] = {(uint8_t)(v & 0xff), (uint8_t)(v >> 8)};
    std::fwrite(b, 1, 2, f);
  }
  static void write_u32(FILE* f, uint32_t v) {
    uint8_t b[4] = {(uint8_t)(v & 0xff), (uint8_t)((v >> 8) & 0xff),
                    (uint8_t)((v >> 16) & 0xff), (uint8_t)((v >> 24) & 0xff)};
    std::fwrite(b, 1, 4, f);
  }
  static void write_f32(FILE* f, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(f, u);
  }
  static uint16_t read_u16(FILE* f) {
    uint8_t b[2];
    if (std::fread(b, 1, 2, f) != 2) throw std::runtime_error("truncated checkpoint");
    return (uint16_t)(b[0] | (b[1] << 8));
  }
  static uint32_t read_u32(FILE* f) {
    uint8_t b[4];
    if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("truncated checkpoint");
    return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) |
           ((uint32_t)b[3] << 24);
  }
  static float read_f32(FILE* f) {
    const uint32_t u = read_u32(f);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
  std::vector<ArrayT<T>> values_;
  std::vector<ArrayT<T>> grads_;
};

using Params = ParamStore<float>;
using ParamsD = ParamStore<double>;

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias correction.
// ---------------------------------------------------------------------------

template <class T>
class AdamW {
 public:
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);

  void step(ParamStore<T>& P) {
    if (m_.empty()) {
      for (int i = 0; i < P.count(); ++i) {
        m_.emplace_back(P.value(i).shape);
        v_.emplace_back(P.value(i).shape);
      }
    }
    ++t_;
    const T bc1 = T(1) - std::pow(beta1, (T)t_);
    const T bc2 = T(1) - std::pow(beta2, (T)t_);
    for (int i = 0; i < P.count(); ++i) {
      ArrayT<T>& w = P.value(i);
      const ArrayT<T>& g = P.grad(i);
      ArrayT<T>& m = m_[i];
      ArrayT<T>& v = v_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        m.data[j] = beta1 * m.data[j] + (T(1) - beta1) * g.data[j];
        v.data[j] = beta2 * v.data[j] + (T(1) - beta2) * g.data[j] * g.data[j];
        const T mhat = m.data[j] / bc1;
        const T vhat = v.data[j] / bc2;
        w.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w.data[j]);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  int t_ = 0;
  std::vector<ArrayT<T>> m_;
  std::vector<ArrayT<T>> v_;
};

}  // namespace raven
