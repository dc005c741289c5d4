#include "aunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace aunet {

std::vector<int> Dataset::subject_ids() const {
  std::set<int> ids;
  for (const auto& s : sessions) ids.insert(s.subject);
  return {ids.begin(), ids.end()};
}

std::vector<std::size_t> Dataset::frames_of_subjects(const std::vector<int>& subjects) const {
  const std::set<int> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (wanted.count(frames[i].subject)) out.push_back(i);
  return out;
}

LabelMatrix Dataset::labels(std::span<const std::size_t> indices) const {
  LabelMatrix m(static_cast<Index>(indices.size()), static_cast<Index>(aus.size()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& l = frames.at(indices[r]).labels;
    for (std::size_t a = 0; a < aus.size(); ++a) m(static_cast<Index>(r), static_cast<Index>(a)) = l[a];
  }
  return m;
}

void Dataset::reindex() {
  sessions.clear();
  std::set<std::pair<int, int>> seen;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto& f = frames[i];
    if (sessions.empty() || sessions.back().subject != f.subject || sessions.back().session != f.session) {
      if (!seen.insert({f.subject, f.session}).second) {
        throw DataError("frames of subject " + std::to_string(f.subject) + " session " + std::to_string(f.session) +
                        " are not contiguous");
      }
      sessions.push_back({f.subject, f.session, {}});
    } else if (frames[sessions.back().frames.back()].frame >= f.frame) {
      throw DataError("frame ids must increase within a session (subject " + std::to_string(f.subject) + ")");
    }
    f.session_index = sessions.size() - 1;
    f.position = sessions.back().frames.size();
    sessions.back().frames.push_back(i);
  }
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::string& path, const Eigen::ArrayXd& image, ImageSize size) {
  if (image.size() != size.height * size.width) throw DataError("write_pgm: image size mismatch for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << size.width << ' ' << size.height << "\n255\n";
  std::string bytes(static_cast<std::size_t>(image.size()), '\0');
  for (Index i = 0; i < image.size(); ++i) {
    bytes[static_cast<std::size_t>(i)] =
        static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

Eigen::ArrayXd read_pgm(const std::string& path, ImageSize expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing image file " + path);
  std::string magic;
  Index w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || maxval != 255) throw DataError("malformed PGM header in " + path);
  in.get();
  if (w != expected.width || h != expected.height) {
    throw DataError(path + ": image is " + std::to_string(w) + "x" + std::to_string(h) + ", expected " +
                    std::to_string(expected.width) + "x" + std::to_string(expected.height));
  }
  std::string bytes(static_cast<std::size_t>(w * h), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError("truncated PGM data in " + path);
  Eigen::ArrayXd img(w * h);
  for (Index i = 0; i < img.size(); ++i) {
    img[i] = static_cast<double>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)])) / 255.0;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Manifest and tables

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

nlohmann::json manifest_json(const DatasetManifest& m) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : m.subjects) {
    nlohmann::json sessions = nlohmann::json::array();
    for (const auto& e : s.sessions) {
      nlohmann::json j{{"id", e.id}, {"path", e.path}, {"frames", e.frames}, {"landmarks", e.landmarks}};
      if (!e.labels.empty()) j["labels"] = e.labels;
      if (!e.intensities.empty()) j["intensities"] = e.intensities;
      sessions.push_back(j);
    }
    subjects.push_back({{"id", s.id}, {"sessions", sessions}});
  }
  return {{"schema_version", m.schema_version},
          {"aus", m.aus},
          {"schema_size", m.schema_size},
          {"image_size", {m.image.height, m.image.width}},
          {"intensity_threshold", m.intensity_threshold},
          {"subjects", subjects}};
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path, std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path.string());
  CsvTable t;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != columns) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                      " columns, found " + std::to_string(cells.size()));
    }
    if (t.header.empty()) t.header = std::move(cells);
    else t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw DataError(path.string() + ": empty table");
  return t;
}

template <typename T>
T parse_cell(const std::string& cell, const fs::path& path, std::size_t row) {
  std::istringstream ss(cell);
  T v{};
  ss >> v;
  if (!ss || !ss.eof()) {
    throw DataError(path.string() + ":" + std::to_string(row + 2) + ": malformed value '" + cell + "'");
  }
  return v;
}

}  // namespace

DatasetManifest write_dataset(const Dataset& data, const std::string& out_dir) {
  const fs::path root(out_dir);
  fs::create_directories(root);
  DatasetManifest m;
  m.root = root.string();
  m.aus = data.aus;
  m.schema_size = data.schema_size;
  m.image = data.image;
  const bool has_latent = !data.frames.empty() && !data.frames.front().latent.empty();

  for (const auto& sess : data.sessions) {
    if (m.subjects.empty() || m.subjects.back().id != sess.subject) m.subjects.push_back({sess.subject, {}});
    ManifestSession ms;
    ms.id = sess.session;
    ms.path = "sub" + std::to_string(sess.subject) + "/ses" + std::to_string(sess.session);
    const fs::path dir = root / ms.path;
    fs::create_directories(dir);

    std::string lm = "frame";
    for (int i = 0; i < data.schema_size; ++i) lm += ",x" + std::to_string(i) + ",y" + std::to_string(i);
    lm += '\n';
    std::string lb = "frame";
    for (int au : data.aus) lb += ",AU" + std::to_string(au);
    lb += '\n';
    std::string lt = lb;

    for (std::size_t idx : sess.frames) {
      const FrameRecord& f = data.frames[idx];
      ms.frames.push_back(f.frame);
      write_pgm((dir / ("frame" + std::to_string(f.frame) + ".pgm")).string(), f.image, data.image);
      lm += std::to_string(f.frame);
      for (const auto& p : f.landmarks.points) lm += "," + fmt_double(p.x) + "," + fmt_double(p.y);
      lm += '\n';
      lb += std::to_string(f.frame);
      for (auto l : f.labels) lb += "," + std::to_string(static_cast<int>(l));
      lb += '\n';
      if (has_latent) {
        lt += std::to_string(f.frame);
        for (double v : f.latent) lt += "," + fmt_double(v);
        lt += '\n';
      }
    }
    write_text(dir / ms.landmarks, lm);
    write_text(dir / ms.labels, lb);
    if (has_latent) write_text(dir / "latents.csv", lt);
    m.subjects.back().sessions.push_back(std::move(ms));
  }
  write_text(root / "manifest.json", manifest_json(m).dump(2) + "\n");
  return m;
}

DatasetManifest generate_dataset(const SynthConfig& config, std::uint64_t seed, const std::string& out_dir) {
  return write_dataset(generate_synthetic(config, seed).data, out_dir);
}

DatasetManifest read_manifest(const std::string& manifest_path) {
  fs::path path(manifest_path);
  if (fs::is_directory(path)) path /= "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("missing manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.root = path.parent_path().string();
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) throw DataError(path.string() + ": unsupported schema version");
    m.aus = j.at("aus").get<std::vector<int>>();
    m.schema_size = j.at("schema_size").get<int>();
    m.image = {j.at("image_size").at(0).get<Index>(), j.at("image_size").at(1).get<Index>()};
    m.intensity_threshold = j.value("intensity_threshold", 2);
    for (const auto& s : j.at("subjects")) {
      ManifestSubject ms{s.at("id").get<int>(), {}};
      for (const auto& e : s.at("sessions")) {
        ManifestSession se;
        se.id = e.at("id").get<int>();
        se.path = e.at("path").get<std::string>();
        se.frames = e.at("frames").get<std::vector<int>>();
        se.landmarks = e.value("landmarks", std::string("landmarks.csv"));
        se.labels = e.value("labels", std::string());
        se.intensities = e.value("intensities", std::string());
        if (se.labels.empty() == se.intensities.empty()) {
          throw DataError(path.string() + ": session " + se.path + " needs exactly one of labels/intensities");
        }
        ms.sessions.push_back(std::move(se));
      }
      m.subjects.push_back(std::move(ms));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

Dataset load_dataset(const std::string& manifest_path) {
  const DatasetManifest m = read_manifest(manifest_path);
  Dataset d;
  d.image = m.image;
  d.aus = m.aus;
  d.schema_size = m.schema_size;
  const std::size_t num_aus = m.aus.size();
  std::set<int> subject_ids;
  for (const auto& s : m.subjects) {
    if (!subject_ids.insert(s.id).second) throw DataError("manifest lists subject " + std::to_string(s.id) + " twice");
    for (const auto& e : s.sessions) {
      const fs::path dir = fs::path(m.root) / e.path;
      if (!std::is_sorted(e.frames.begin(), e.frames.end()) ||
          std::adjacent_find(e.frames.begin(), e.frames.end()) != e.frames.end()) {
        throw DataError("manifest session " + e.path + ": frame ids must be strictly increasing");
      }
      const fs::path lm_path = dir / e.landmarks;
      const CsvTable lm = read_csv(lm_path, 1 + 2 * static_cast<std::size_t>(m.schema_size));
      const bool intensity = !e.intensities.empty();
      const fs::path lb_path = dir / (intensity ? e.intensities : e.labels);
      const CsvTable lb = read_csv(lb_path, 1 + num_aus);
      if (lm.rows.size() != e.frames.size()) {
        throw DataError(lm_path.string() + ": " + std::to_string(lm.rows.size()) + " rows for " +
                        std::to_string(e.frames.size()) + " manifest frames");
      }
      if (lb.rows.size() != e.frames.size()) {
        throw DataError(lb_path.string() + ": " + std::to_string(lb.rows.size()) + " rows for " +
                        std::to_string(e.frames.size()) + " manifest frames");
      }
      for (std::size_t r = 0; r < e.frames.size(); ++r) {
        FrameRecord f;
        f.subject = s.id;
        f.session = e.id;
        f.frame = e.frames[r];
        if (parse_cell<int>(lm.rows[r][0], lm_path, r) != f.frame || parse_cell<int>(lb.rows[r][0], lb_path, r) != f.frame) {
          throw DataError(lm_path.string() + ":" + std::to_string(r + 2) + ": frame id does not match manifest frame " +
                          std::to_string(f.frame));
        }
        for (int i = 0; i < m.schema_size; ++i) {
          const auto c = static_cast<std::size_t>(1 + 2 * i);
          Point p{parse_cell<double>(lm.rows[r][c], lm_path, r), parse_cell<double>(lm.rows[r][c + 1], lm_path, r)};
          f.landmarks.points.push_back(clamp_to_image(p, m.image));
        }
        f.labels.resize(num_aus);
        for (std::size_t a = 0; a < num_aus; ++a) {
          const int v = parse_cell<int>(lb.rows[r][a + 1], lb_path, r);
          if (intensity) {
            if (v < 0 || v > 5) throw DataError(lb_path.string() + ":" + std::to_string(r + 2) + ": intensity outside 0-5");
            f.labels[a] = binarize_intensity(v, m.intensity_threshold);
          } else {
            if (v != 0 && v != 1) throw DataError(lb_path.string() + ":" + std::to_string(r + 2) + ": label must be 0 or 1");
            f.labels[a] = static_cast<std::uint8_t>(v);
          }
        }
        f.image = read_pgm((dir / ("frame" + std::to_string(f.frame) + ".pgm")).string(), m.image);
        d.frames.push_back(std::move(f));
      }
    }
  }
  d.reindex();
  return d;
}

}  // namespace aunet
