#include "model/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "core/checksum.hpp"

namespace countlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_little_endian() {
  const uint16_t probe = 0x0102;
  if (reinterpret_cast<const uint8_t*>(&probe)[0] != 0x02)
    throw std::runtime_error("checkpoint: little-endian host required");
}

json config_to_json(const ModelConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["head_dim"] = c.head_dim;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["patch_px"] = c.patch_px;
  j["mrope_sections"] = {c.mrope_sections[0], c.mrope_sections[1], c.mrope_sections[2]};
  j["mlp_ratio"] = c.mlp_ratio;
  j["rope_theta"] = c.rope_theta;
  j["max_seq_len"] = c.max_seq_len;
  j["vocab_size"] = c.vocab_size;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.patch_px = j.at("patch_px").get<int>();
  const auto& s = j.at("mrope_sections");
  c.mrope_sections = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Vlm<float>& model, uint64_t vocab_checksum,
                     const Provenance& prov) {
  check_little_endian();
  json header;
  header["format"] = "countlab-checkpoint-v1";
  header["config"] = config_to_json(model.cfg);
  header["vocab_checksum"] = checksum_hex(vocab_checksum);
  header["provenance"] = {{"phase", prov.phase},
                          {"epoch", prov.epoch},
                          {"seed", prov.seed},
                          {"preset", prov.preset}};
  json dir = json::array();
  uint64_t offset = 0;
  for (const auto& [name, m] : model.params.items) {
    json t;
    t["name"] = name;
    t["rows"] = m.rows;
    t["cols"] = m.cols;
    t["offset"] = offset;
    dir.push_back(t);
    offset += m.size() * sizeof(float);
  }
  header["tensors"] = dir;
  const std::string head = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
    const uint64_t hlen = head.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, m] : model.params.items)
      out.write(reinterpret_cast<const char*>(m.data.data()),
                static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  check_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  json header = json::parse(head);
  if (header.value("format", "") != "countlab-checkpoint-v1")
    throw std::runtime_error("checkpoint: unknown format in " + path);

  LoadedCheckpoint out{Vlm<float>(config_from_json(header.at("config"))), 0, {}};
  out.vocab_checksum = std::stoull(header.at("vocab_checksum").get<std::string>(), nullptr, 16);
  const auto& pj = header.at("provenance");
  out.provenance.phase = pj.at("phase").get<std::string>();
  out.provenance.epoch = pj.at("epoch").get<int>();
  out.provenance.seed = pj.at("seed").get<uint64_t>();
  out.provenance.preset = pj.at("preset").get<std::string>();

  const auto& dir = header.at("tensors");
  if (dir.size() != out.model.params.items.size())
    throw std::runtime_error("checkpoint: tensor directory size mismatch");
  for (size_t i = 0; i < dir.size(); ++i) {
    const auto& t = dir[i];
    auto& [name, m] = out.model.params.items[i];
    if (t.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint: tensor order mismatch at " + name);
    if (t.at("rows").get<int>() != m.rows || t.at("cols").get<int>() != m.cols)
      throw std::runtime_error("checkpoint: tensor shape mismatch at " + name);
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.size() * sizeof(float)));
  }
  if (!in) throw std::runtime_error("checkpoint: truncated payload in " + path);
  return out;
}

}  // namespace countlab
