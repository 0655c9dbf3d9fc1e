#include "boardgen/boardgen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <queue>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "core/checksum.hpp"

namespace countlab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string counting_text_prompt(char target_letter) {
  return std::string("How many ") + target_letter + " letters are there in the given string ?";
}

std::string counting_vision_prompt() {
  return "How many black stones are there on the chessboard ?";
}

std::string compare_text_prompt(char target_letter) {
  return std::string("Are the number of ") + target_letter +
         " letters in both input strings the same ?";
}

std::string compare_vision_prompt(char target_letter) {
  return std::string("Is the number of ") + target_letter +
         " letters in the given string the same as the number of black stones on the chessboard ?";
}

std::string TextSample::input_text() const {
  std::string out = "[";
  for (char c : letters) {
    out += ' ';
    out += c;
  }
  out += " ]";
  return out;
}

namespace {

constexpr uint8_t kBgGray = 235;
constexpr uint8_t kBlackGray = 25;
constexpr uint8_t kWhiteGray = 250;
constexpr uint8_t kOutlineGray = 105;

void draw_stone(Image& img, int row, int col, int px, bool black) {
  const double cx = col * px + (px - 1) / 2.0;
  const double cy = row * px + (px - 1) / 2.0;
  const double r = px * 0.43;
  const double r2 = r * r;
  const double inner = (r - 1.2) * (r - 1.2);
  for (int y = row * px; y < (row + 1) * px; ++y) {
    for (int x = col * px; x < (col + 1) * px; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const double d2 = dx * dx + dy * dy;
      if (d2 > r2) continue;
      uint8_t g = black ? kBlackGray : (d2 > inner ? kOutlineGray : kWhiteGray);
      img.set(y, x, g, g, g);
    }
  }
}

}  // namespace

BoardSample gen_board(const BoardSpec& spec) {
  if (spec.grid_size <= 0 || spec.stone_px <= 0) throw std::runtime_error("gen_board: bad geometry");
  if (spec.target_count < 0 || spec.distractor_count < 0)
    throw std::runtime_error("gen_board: negative stone count");
  const int cells = spec.grid_size * spec.grid_size;
  if (spec.target_count + spec.distractor_count > cells)
    throw std::runtime_error("gen_board: stone count exceeds board capacity");

  Rng rng(spec.seed);
  std::vector<int> chosen =
      rng.sample_without_replacement(cells, spec.target_count + spec.distractor_count);

  BoardSample s;
  s.n_target = spec.target_count;
  s.prompt = counting_vision_prompt();
  s.answer = std::to_string(spec.target_count);
  for (int i = 0; i < spec.target_count; ++i)
    s.black_cells.emplace_back(chosen[i] / spec.grid_size, chosen[i] % spec.grid_size);
  for (size_t i = spec.target_count; i < chosen.size(); ++i)
    s.white_cells.emplace_back(chosen[i] / spec.grid_size, chosen[i] % spec.grid_size);
  std::sort(s.black_cells.begin(), s.black_cells.end());
  std::sort(s.white_cells.begin(), s.white_cells.end());

  const int edge = spec.grid_size * spec.stone_px;
  s.image = Image(edge, edge, kBgGray, kBgGray, kBgGray);
  for (auto [r, c] : s.black_cells) draw_stone(s.image, r, c, spec.stone_px, true);
  for (auto [r, c] : s.white_cells) draw_stone(s.image, r, c, spec.stone_px, false);
  return s;
}

int sample_distractor_count(int n_target, int delta, int cells, Rng& rng) {
  if (delta < 0) throw std::runtime_error("sample_distractor_count: negative delta");
  const int lo = std::max(0, n_target - delta);
  const int hi = std::min(cells - n_target, n_target + delta);
  if (lo > hi) throw std::runtime_error("sample_distractor_count: empty feasible range");
  return lo + static_cast<int>(rng.bounded(static_cast<uint64_t>(hi - lo + 1)));
}

TextSample gen_text(int n_target, int length, char target_letter, Rng& rng) {
  if (n_target < 0 || n_target > length) throw std::runtime_error("gen_text: bad target count");
  static const std::string alphabet = "abc";
  std::string others;
  for (char c : alphabet)
    if (c != target_letter) others += c;
  if (others.size() != 2) throw std::runtime_error("gen_text: target letter not in alphabet");

  std::vector<int> pos = rng.sample_without_replacement(length, n_target);
  std::vector<uint8_t> is_target(length, 0);
  for (int p : pos) is_target[p] = 1;

  TextSample t;
  t.target_letter = target_letter;
  t.n_target = n_target;
  t.letters.resize(length);
  for (int i = 0; i < length; ++i)
    t.letters[i] = is_target[i] ? target_letter : others[rng.bounded(2)];
  t.prompt = counting_text_prompt(target_letter);
  t.answer = std::to_string(n_target);
  return t;
}

int sample_comparison_count(int n_lhs, bool want_equal, int neg_delta_max, int n_max, Rng& rng) {
  if (want_equal) return n_lhs;
  std::vector<int> deltas;
  for (int d = 1; d <= neg_delta_max; ++d)
    if (n_lhs - d >= 0 || n_lhs + d <= n_max) deltas.push_back(d);
  if (deltas.empty()) throw std::runtime_error("sample_comparison_count: no feasible delta");
  const int d = deltas[rng.bounded(deltas.size())];
  std::vector<int> candidates;
  if (n_lhs - d >= 0) candidates.push_back(n_lhs - d);
  if (n_lhs + d <= n_max) candidates.push_back(n_lhs + d);
  return candidates[rng.bounded(candidates.size())];
}

ComparisonSample gen_comparison_text(int n_lhs, int n_rhs, int length, char target_letter,
                                     Rng& rng) {
  ComparisonSample s;
  s.kind = ComparisonSample::Kind::kTextText;
  s.lhs_text = gen_text(n_lhs, length, target_letter, rng);
  s.rhs = gen_text(n_rhs, length, target_letter, rng);
  s.n_lhs = n_lhs;
  s.n_rhs = n_rhs;
  s.label = n_lhs == n_rhs;
  s.prompt = compare_text_prompt(target_letter);
  s.answer = s.label ? "True" : "False";
  return s;
}

ComparisonSample gen_comparison_vision(const BoardSpec& board_spec, int n_rhs, int text_length,
                                       char target_letter, Rng& rng) {
  ComparisonSample s;
  s.kind = ComparisonSample::Kind::kVisionText;
  s.lhs_board = gen_board(board_spec);
  s.rhs = gen_text(n_rhs, text_length, target_letter, rng);
  s.n_lhs = board_spec.target_count;
  s.n_rhs = n_rhs;
  s.label = s.n_lhs == n_rhs;
  s.prompt = compare_vision_prompt(target_letter);
  s.answer = s.label ? "True" : "False";
  return s;
}

int pixel_cluster_count(const Image& img, int intensity_below, int min_area) {
  const int H = img.height, W = img.width;
  std::vector<uint8_t> dark(static_cast<size_t>(H) * W, 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const uint8_t* p = img.at(y, x);
      const int intensity = (p[0] + p[1] + p[2]) / 3;
      dark[static_cast<size_t>(y) * W + x] = intensity < intensity_below ? 1 : 0;
    }
  }
  std::vector<uint8_t> seen(static_cast<size_t>(H) * W, 0);
  int clusters = 0;
  std::queue<int> bfs;
  for (int start = 0; start < H * W; ++start) {
    if (!dark[start] || seen[start]) continue;
    int area = 0;
    seen[start] = 1;
    bfs.push(start);
    while (!bfs.empty()) {
      const int cur = bfs.front();
      bfs.pop();
      ++area;
      const int y = cur / W, x = cur % W;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int i = 0; i < 4; ++i) {
        if (ny[i] < 0 || ny[i] >= H || nx[i] < 0 || nx[i] >= W) continue;
        const int idx = ny[i] * W + nx[i];
        if (!dark[idx] || seen[idx]) continue;
        seen[idx] = 1;
        bfs.push(idx);
      }
    }
    if (area >= min_area) ++clusters;
  }
  return clusters;
}

std::string GenPreset::regime_of(int n) const {
  if (n < 0 || n > fe_max) throw std::runtime_error("regime_of: count out of configured range");
  if (n <= vis_max) return "ID";
  if (n <= text_max) return "VE";
  return "FE";
}

GenPreset GenPreset::paper() { return GenPreset{}; }

GenPreset GenPreset::desk() {
  GenPreset p;
  p.name = "desk";
  p.grid_size = 9;
  p.stone_px = 14;
  p.text_len = 81;
  p.vis_max = 14;
  p.text_max = 29;
  p.fe_max = 36;
  p.distractor_delta = 5;
  p.neg_delta_max = 5;
  p.train_per_class = 512;
  p.eval_per_class = 64;
  p.batch_size = 256;
  return p;
}

namespace {

std::string record_id(const std::string& name, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return name + "-" + buf;
}

json record_to_json(const ManifestRecord& r) {
  json j;
  j["id"] = r.id;
  j["kind"] = r.kind;
  j["regime"] = r.regime;
  j["n_target"] = r.n_target;
  if (r.n_distractor >= 0) j["n_distractor"] = r.n_distractor;
  if (r.n_rhs >= 0) j["n_rhs"] = r.n_rhs;
  j["prompt"] = r.prompt;
  j["answer"] = r.answer;
  if (!r.input_text.empty()) j["input"] = r.input_text;
  if (!r.rhs_input_text.empty()) j["rhs_input"] = r.rhs_input_text;
  if (!r.image_path.empty()) j["image_path"] = r.image_path;
  if (!r.black_cells.empty()) {
    json cells = json::array();
    for (auto [row, col] : r.black_cells) cells.push_back(json::array({row, col}));
    j["black_cells"] = cells;
  }
  j["seed"] = r.seed;
  j["checksum"] = checksum_hex(r.checksum);
  return j;
}

ManifestRecord record_from_json(const json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  r.regime = j.at("regime").get<std::string>();
  r.n_target = j.at("n_target").get<int>();
  r.n_distractor = j.value("n_distractor", -1);
  r.n_rhs = j.value("n_rhs", -1);
  r.prompt = j.at("prompt").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  r.input_text = j.value("input", "");
  r.rhs_input_text = j.value("rhs_input", "");
  r.image_path = j.value("image_path", "");
  if (j.count("black_cells"))
    for (const auto& c : j.at("black_cells"))
      r.black_cells.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
  r.seed = j.at("seed").get<uint64_t>();
  r.checksum = std::stoull(j.at("checksum").get<std::string>(), nullptr, 16);
  return r;
}

}  // namespace

uint64_t record_checksum(const ManifestRecord& rec, const Image* img) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_str = [&h](const std::string& s) {
    h = fnv1a64(s.data(), s.size(), h);
    h = fnv1a64("|", 1, h);
  };
  mix_str(rec.id);
  mix_str(rec.kind);
  mix_str(rec.regime);
  mix_str(std::to_string(rec.n_target));
  mix_str(std::to_string(rec.n_distractor));
  mix_str(std::to_string(rec.n_rhs));
  mix_str(rec.prompt);
  mix_str(rec.answer);
  mix_str(rec.input_text);
  mix_str(rec.rhs_input_text);
  mix_str(rec.image_path);
  for (auto [r, c] : rec.black_cells) mix_str(std::to_string(r) + "," + std::to_string(c));
  mix_str(std::to_string(rec.seed));
  if (img) h = fnv1a64(img->pixels.data(), img->pixels.size(), h);
  return h;
}

DatasetManifest build_dataset(const GenPreset& preset, const DatasetRequest& request,
                              const std::string& out_dir) {
  if (request.per_class <= 0) throw std::runtime_error("build_dataset: per_class must be positive");
  if (request.n_lo < 0 || request.n_hi < request.n_lo)
    throw std::runtime_error("build_dataset: bad count range");

  const bool has_board =
      request.kind == "counting_vision" || request.kind == "compare_vision";
  const bool is_compare =
      request.kind == "compare_text" || request.kind == "compare_vision";
  if (!has_board && !is_compare && request.kind != "counting_text")
    throw std::runtime_error("build_dataset: unknown kind " + request.kind);

  DatasetManifest m;
  m.name = request.name;
  m.kind = request.kind;
  m.preset_name = preset.name;
  m.n_lo = request.n_lo;
  m.n_hi = request.n_hi;
  m.per_class = request.per_class;
  m.seed = request.seed;

  fs::create_directories(out_dir);
  const std::string image_dir = "images/" + request.name;
  if (has_board) fs::create_directories(fs::path(out_dir) / image_dir);

  int index = 0;
  for (int n = request.n_lo; n <= request.n_hi; ++n) {
    for (int j = 0; j < request.per_class; ++j, ++index) {
      const uint64_t rseed = mix_seed(request.seed, static_cast<uint64_t>(index));
      ManifestRecord rec;
      rec.id = record_id(request.name, index);
      rec.kind = request.kind;
      rec.regime = preset.regime_of(n);
      rec.n_target = n;
      rec.seed = rseed;

      const Image* img = nullptr;
      Image img_store;
      if (request.kind == "counting_text") {
        Rng r(mix_seed(rseed, 1));
        TextSample t = gen_text(n, preset.text_len, preset.target_letter, r);
        rec.prompt = t.prompt;
        rec.answer = t.answer;
        rec.input_text = t.input_text();
      } else if (request.kind == "counting_vision") {
        Rng r(mix_seed(rseed, 0));
        rec.n_distractor =
            sample_distractor_count(n, preset.distractor_delta, preset.cells(), r);
        BoardSpec spec{preset.grid_size, preset.stone_px, n, rec.n_distractor,
                       mix_seed(rseed, 1)};
        BoardSample b = gen_board(spec);
        rec.prompt = b.prompt;
        rec.answer = b.answer;
        rec.black_cells = b.black_cells;
        rec.image_path = image_dir + "/" + rec.id + ".png";
        img_store = std::move(b.image);
        img = &img_store;
      } else if (request.kind == "compare_text") {
        const bool want_equal = j % 2 == 0;
        Rng rd(mix_seed(rseed, 3));
        const int n_rhs =
            sample_comparison_count(n, want_equal, preset.neg_delta_max, preset.text_max, rd);
        Rng rl(mix_seed(rseed, 1));
        Rng rr(mix_seed(rseed, 2));
        TextSample lhs = gen_text(n, preset.text_len, preset.target_letter, rl);
        TextSample rhs = gen_text(n_rhs, preset.text_len, preset.target_letter, rr);
        rec.n_rhs = n_rhs;
        rec.prompt = compare_text_prompt(preset.target_letter);
        rec.answer = n == n_rhs ? "True" : "False";
        rec.input_text = lhs.input_text();
        rec.rhs_input_text = rhs.input_text();
      } else {
        const bool want_equal = j % 2 == 0;
        Rng rd(mix_seed(rseed, 3));
        const int n_rhs =
            sample_comparison_count(n, want_equal, preset.neg_delta_max, preset.text_max, rd);
        Rng r0(mix_seed(rseed, 0));
        rec.n_distractor =
            sample_distractor_count(n, preset.distractor_delta, preset.cells(), r0);
        BoardSpec spec{preset.grid_size, preset.stone_px, n, rec.n_distractor,
                       mix_seed(rseed, 1)};
        BoardSample b = gen_board(spec);
        Rng rr(mix_seed(rseed, 2));
        TextSample rhs = gen_text(n_rhs, preset.text_len, preset.target_letter, rr);
        rec.n_rhs = n_rhs;
        rec.prompt = compare_vision_prompt(preset.target_letter);
        rec.answer = n == n_rhs ? "True" : "False";
        rec.rhs_input_text = rhs.input_text();
        rec.black_cells = b.black_cells;
        rec.image_path = image_dir + "/" + rec.id + ".png";
        img_store = std::move(b.image);
        img = &img_store;
      }

      rec.checksum = record_checksum(rec, img);
      if (img) write_png((fs::path(out_dir) / rec.image_path).string(), *img);
      m.records.push_back(std::move(rec));
    }
  }

  std::ofstream out(manifest_path(out_dir, request.name));
  if (!out) throw std::runtime_error("build_dataset: cannot write manifest");
  json header;
  header["type"] = "manifest";
  header["name"] = m.name;
  header["kind"] = m.kind;
  header["preset"] = m.preset_name;
  header["n_lo"] = m.n_lo;
  header["n_hi"] = m.n_hi;
  header["per_class"] = m.per_class;
  header["seed"] = m.seed;
  header["count"] = m.records.size();
  out << header.dump() << "\n";
  for (const auto& rec : m.records) out << record_to_json(rec).dump() << "\n";
  return m;
}

BoardSample record_board(const GenPreset& preset, const ManifestRecord& rec) {
  if (rec.image_path.empty()) throw std::runtime_error("record_board: record has no board");
  BoardSpec spec{preset.grid_size, preset.stone_px, rec.n_target, rec.n_distractor,
                 mix_seed(rec.seed, 1)};
  return gen_board(spec);
}

std::string manifest_path(const std::string& out_dir, const std::string& name) {
  return (fs::path(out_dir) / (name + ".jsonl")).string();
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_manifest: empty file");
  json header = json::parse(line);
  if (header.value("type", "") != "manifest")
    throw std::runtime_error("load_manifest: missing header line");
  DatasetManifest m;
  m.name = header.at("name").get<std::string>();
  m.kind = header.at("kind").get<std::string>();
  m.preset_name = header.at("preset").get<std::string>();
  m.n_lo = header.at("n_lo").get<int>();
  m.n_hi = header.at("n_hi").get<int>();
  m.per_class = header.at("per_class").get<int>();
  m.seed = header.at("seed").get<uint64_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    m.records.push_back(record_from_json(json::parse(line)));
  }
  if (m.records.size() != header.at("count").get<size_t>())
    throw std::runtime_error("load_manifest: record count mismatch");
  return m;
}

}  // namespace countlab
