#include "slf/data.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace slf {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "image and checkpoint containers assume a little-endian host");

std::size_t ImageSequence::visits_at_or_before(double t) const {
  std::size_t n = 0;
  for (double tij : times)
    if (tij <= t) ++n;
  return n;
}

void ImageSequence::validate() const {
  if (images.empty()) throw InputError("ImageSequence: at least one image");
  if (times.size() != images.size())
    throw InputError("ImageSequence: times/images length mismatch");
  for (std::size_t j = 1; j < times.size(); ++j)
    if (!(times[j] > times[j - 1]))
      throw InputError("ImageSequence: visit times must be strictly increasing");
  const std::size_t r = images[0].rows(), c = images[0].cols();
  for (const Image& im : images)
    if (im.rows() != r || im.cols() != c)
      throw InputError("ImageSequence: images must share one size");
}

double Dataset::horizon_months() const {
  auto it = meta.find("horizon-months");
  return it == meta.end() ? 120.0 : std::stod(it->second);
}

double Dataset::visit_months() const {
  auto it = meta.find("visit-months");
  return it == meta.end() ? 6.0 : std::stod(it->second);
}

namespace {

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(sep);
    out += parts[i];
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_image_file(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write image file: " + path);
  out.write("IMG1", 4);
  write_u32(out, static_cast<std::uint32_t>(img.rows()));
  write_u32(out, static_cast<std::uint32_t>(img.cols()));
  write_u32(out, 0u);  // reserved
  out.write(reinterpret_cast<const char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(double)));
  if (!out) throw InputError("short write on image file: " + path);
}

Image read_image_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read image file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "IMG1", 4) != 0)
    throw InputError("bad image magic in " + path);
  const std::uint32_t rows = read_u32(in);
  const std::uint32_t cols = read_u32(in);
  read_u32(in);  // reserved
  if (rows == 0 || cols == 0) throw InputError("empty image in " + path);
  Image img({rows, cols});
  in.read(reinterpret_cast<char*>(img.data()),
          static_cast<std::streamsize>(img.size() * sizeof(double)));
  if (!in) throw InputError("truncated image file: " + path);
  return img;
}

void write_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(fs::path(dir) / "images");

  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw InputError("cannot write manifest in " + dir);
  manifest << "id,time_at_risk,event,num_visits,covariates,images\n";

  bool any_truth = false;
  for (const Patient& p : ds.patients) {
    std::vector<std::string> image_paths;
    for (std::size_t j = 0; j < p.seq.images.size(); ++j) {
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_v%02zu.img",
                    p.seq.id.c_str(), j);
      image_paths.emplace_back(name);
      write_image_file((fs::path(dir) / name).string(), p.seq.images[j]);
    }
    std::vector<std::string> covs;
    for (double c : p.seq.covariates) covs.push_back(fmt_double(c));
    manifest << p.seq.id << ',' << fmt_double(p.rec.time_at_risk) << ','
             << p.rec.event << ',' << p.seq.images.size() << ','
             << join(covs, ';') << ',' << join(image_paths, ';') << '\n';
    if (p.has_true_risk()) any_truth = true;
  }
  manifest.close();

  if (any_truth) {
    std::ofstream truth(fs::path(dir) / "truth.csv");
    truth << "id,true_risk\n";
    for (const Patient& p : ds.patients)
      if (p.has_true_risk())
        truth << p.seq.id << ',' << fmt_double(p.true_risk) << '\n';
  }

  std::ofstream prov(fs::path(dir) / "provenance.txt");
  for (const auto& [k, v] : ds.meta) prov << k << '=' << v << '\n';
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;

  std::ifstream prov(fs::path(dir) / "provenance.txt");
  if (prov) {
    std::string line;
    while (std::getline(prov, line)) {
      auto eq = line.find('=');
      if (eq != std::string::npos)
        ds.meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  const double visit_step = ds.visit_months() / ds.horizon_months();

  std::map<std::string, double> truth;
  std::ifstream tf(fs::path(dir) / "truth.csv");
  if (tf) {
    std::string line;
    std::getline(tf, line);  // header
    while (std::getline(tf, line)) {
      if (line.empty()) continue;
      auto parts = split(line, ',');
      if (parts.size() == 2) truth[parts[0]] = std::stod(parts[1]);
    }
  }

  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ifstream manifest(manifest_path);
  if (!manifest) throw InputError("cannot read manifest: " + manifest_path);
  std::string line;
  std::getline(manifest, line);
  if (line != "id,time_at_risk,event,num_visits,covariates,images")
    throw InputError("manifest header mismatch at line 1 of " + manifest_path);

  std::size_t lineno = 1;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != 6)
      throw InputError("malformed manifest row at line " +
                       std::to_string(lineno) + " of " + manifest_path);
    Patient p;
    try {
      p.seq.id = fields[0];
      p.rec.id = fields[0];
      p.rec.time_at_risk = std::stod(fields[1]);
      p.rec.event = std::stoi(fields[2]);
      const std::size_t num_visits = std::stoul(fields[3]);
      if (!fields[4].empty())
        for (const std::string& c : split(fields[4], ';'))
          p.seq.covariates.push_back(std::stod(c));
      const auto image_files = split(fields[5], ';');
      if (image_files.size() != num_visits || num_visits == 0)
        throw InputError("visit count mismatch");
      for (std::size_t j = 0; j < num_visits; ++j) {
        p.seq.times.push_back(static_cast<double>(j) * visit_step);
        p.seq.images.push_back(
            read_image_file((fs::path(dir) / image_files[j]).string()));
      }
      if (p.rec.event != 0 && p.rec.event != 1)
        throw InputError("event indicator not in {0,1}");
      p.seq.validate();
    } catch (const std::exception& e) {
      throw InputError("malformed manifest row at line " +
                       std::to_string(lineno) + " of " + manifest_path + ": " +
                       e.what());
    }
    auto it = truth.find(p.seq.id);
    if (it != truth.end()) p.true_risk = it->second;
    ds.patients.push_back(std::move(p));
  }
  return ds;
}

}  // namespace slf
