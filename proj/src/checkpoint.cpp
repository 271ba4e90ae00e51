#include "worldgen/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace worldgen {

Checkpoint Checkpoint::from_store(const ParamStore& store) {
  Checkpoint ck;
  for (const auto& p : store.params()) {
    ck.manifest.push_back({p.name, p.tensor.shape()});
    auto vals = p.tensor.values();
    ck.blobs.emplace_back(vals.begin(), vals.end());
  }
  return ck;
}

void Checkpoint::apply_to(ParamStore& store) const {
  for (size_t i = 0; i < manifest.size(); ++i) {
    const Parameter* p = store.find(manifest[i].first);
    if (!p) throw std::runtime_error("checkpoint parameter not in model: " + manifest[i].first);
    if (p->tensor.shape() != manifest[i].second)
      throw std::runtime_error("checkpoint shape mismatch for " + manifest[i].first);
    Tensor t = p->tensor;
    auto dst = t.values_mut();
    std::copy(blobs[i].begin(), blobs[i].end(), dst.begin());
  }
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f << "WGCKPT 1\n";
  f << "meta " << meta.size() << "\n";
  for (const auto& [k, v] : meta) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << k << " " << buf << "\n";
  }
  f << "params " << manifest.size() << "\n";
  size_t total = 0;
  for (size_t i = 0; i < manifest.size(); ++i) {
    f << manifest[i].first << " ";
    const Shape& s = manifest[i].second;
    for (size_t d = 0; d < s.size(); ++d) f << (d ? "," : "") << s[d];
    f << "\n";
    total += blobs[i].size();
  }
  f << "blob " << total * sizeof(float) << "\n";
  for (const auto& b : blobs)
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "WGCKPT 1") throw std::runtime_error("bad checkpoint header: " + path);
  Checkpoint ck;
  size_t nmeta = 0, nparams = 0, nbytes = 0;
  if (!std::getline(f, line) || std::sscanf(line.c_str(), "meta %zu", &nmeta) != 1)
    throw std::runtime_error("bad checkpoint meta line");
  for (size_t i = 0; i < nmeta; ++i) {
    if (!std::getline(f, line)) throw std::runtime_error("truncated checkpoint meta");
    std::istringstream is(line);
    std::string k;
    double v;
    if (!(is >> k >> v)) throw std::runtime_error("bad checkpoint meta entry");
    ck.meta[k] = v;
  }
  if (!std::getline(f, line) || std::sscanf(line.c_str(), "params %zu", &nparams) != 1)
    throw std::runtime_error("bad checkpoint params line");
  for (size_t i = 0; i < nparams; ++i) {
    if (!std::getline(f, line)) throw std::runtime_error("truncated checkpoint manifest");
    std::istringstream is(line);
    std::string name, dims;
    if (!(is >> name >> dims)) throw std::runtime_error("bad checkpoint manifest entry");
    Shape s;
    std::istringstream ds(dims);
    std::string tok;
    while (std::getline(ds, tok, ',')) s.push_back(std::stoi(tok));
    ck.manifest.push_back({name, s});
  }
  if (!std::getline(f, line) || std::sscanf(line.c_str(), "blob %zu", &nbytes) != 1)
    throw std::runtime_error("bad checkpoint blob line");
  size_t expect = 0;
  for (const auto& [n, s] : ck.manifest) expect += static_cast<size_t>(shape_numel(s));
  if (nbytes != expect * sizeof(float)) throw std::runtime_error("checkpoint blob size mismatch");
  for (const auto& [n, s] : ck.manifest) {
    std::vector<float> b(static_cast<size_t>(shape_numel(s)));
    f.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint blob: " + path);
    ck.blobs.push_back(std::move(b));
  }
  return ck;
}

}  // namespace worldgen
